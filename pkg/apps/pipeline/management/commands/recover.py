"""
Recover the coefficient from the minimiser.
"""

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = "Recover a(x, t) and export point list and VTK slices"
    stages = ("recover",)
