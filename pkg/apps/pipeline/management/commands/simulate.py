"""
Generate boundary traces for every source and apply the configured noise.
"""

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = "Solve the forward problem and write raw and noisy Cauchy traces"
    stages = ("simulate", "noise")
