"""
Check geometry and Carleman admissibility without running any stage.
"""

from apps.core.basis import dump_tensors_csv
from apps.pipeline.services import get_pipeline_service

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = "Validate the resolved configuration (geometry, weight, cut-off and solver settings)"

    def add_command_arguments(self, parser):
        parser.add_argument("--dump-tensors", metavar="PATH", help="Write M, M^-1, B, C1, C2 as CSV")

    def run(self, config, options):
        service = get_pipeline_service()
        report = service.validate(config)
        self.stdout.write(report.summary())
        advisory = config.inversion.solver_config().validate(config.carleman.h)
        if not advisory:
            self.stdout.write(self.style.WARNING("alpha is below the advisory bound 2 exp(-lambda h)"))
        if options.get("dump_tensors"):
            _, tensors = service.basis_for(config)
            path = dump_tensors_csv(tensors, options["dump_tensors"])
            self.stdout.write(f"Coupling tensors written to {path}")
        self.stdout.write(self.style.SUCCESS(f"Configuration {config.config_hash()[:12]} is admissible"))
