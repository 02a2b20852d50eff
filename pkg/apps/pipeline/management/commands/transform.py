"""
Turn traces into boundary coefficient vectors q0, q1.
"""

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = "Log-transform traces and project them onto the basis"
    stages = ("transform",)
