"""
Compare the reconstruction with the true target and write the report.
"""

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = "Compute contrast, error and centre metrics for a finished run"
    stages = ("evaluate",)
