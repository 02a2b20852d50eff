"""
Run every stage end to end.
"""

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = "Run simulate, noise, transform, invert, recover and evaluate"
    stages = ("all",)
