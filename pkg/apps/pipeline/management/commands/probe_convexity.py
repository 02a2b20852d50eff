"""
Random convexity probes of the functional for one or more lambda values.
"""

from apps.pipeline.services import get_pipeline_service

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = (
        "Convexity survey (the probe-convexity subcommand): J(V1) - J(V2) - <J'(V2), V1 - V2> "
        "on random same-boundary pairs"
    )

    def add_command_arguments(self, parser):
        parser.add_argument("--pairs", type=int, default=100, help="Number of random pairs per lambda")
        parser.add_argument("--amplitude", type=float, help="Perturbation amplitude (default from config)")
        parser.add_argument(
            "--lambdas",
            type=float,
            nargs="+",
            help="Lambda values to probe (default: configured lambda and 0)",
        )

    def run(self, config, options):
        frame = get_pipeline_service().probe_convexity(
            config, pairs=options["pairs"], amplitude=options.get("amplitude"), lambdas=options.get("lambdas")
        )
        for lam, group in frame.groupby("lam", sort=False):
            negative = int((group["probe"] < 0).sum())
            line = f"lambda={lam:g}: {len(group) - negative}/{len(group)} non-negative, min {group['probe'].min():.3e}"
            self.stdout.write(self.style.WARNING(line) if negative else line)
        self.stdout.write(self.style.SUCCESS(f"Probe results written to {config.output_dir}/convexity.csv"))
