"""
Minimise the Carleman-weighted functional.
"""

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = "Run boundary-constrained gradient descent on the transformed data"
    stages = ("invert",)
