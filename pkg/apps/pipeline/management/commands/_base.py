"""
Shared flags and error mapping for the pipeline management commands.
"""

import logging

from django.core.management.base import BaseCommand, CommandError

from apps.core.exceptions import ConfigurationError, ConvexificationError
from apps.pipeline.config import PROFILE_ALIASES, PROFILES, SCENARIOS, PipelineConfig, resolve_config
from apps.pipeline.report import emit_report
from apps.pipeline.services import _get_settings, get_pipeline_service

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_STAGE = 3


class PipelineCommand(BaseCommand):
    """Base for commands that resolve a PipelineConfig and run stages."""

    stages: tuple = ()

    def add_arguments(self, parser):
        parser.add_argument("--config", help="Pipeline JSON document")
        parser.add_argument("--profile", choices=PROFILES + tuple(PROFILE_ALIASES) + ("custom",), help="Built-in constants profile")
        parser.add_argument("--scenario", choices=SCENARIOS, help="Target scenario preset")
        parser.add_argument("--noise", type=float, help="Multiplicative noise level delta")
        parser.add_argument("--seed", type=int, help="Master seed")
        parser.add_argument("--threads", type=int, help="Worker pool size")
        parser.add_argument("--out", help="Output directory")
        parser.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="DOT.PATH=VALUE",
            help="Override one config key (repeatable); VALUE is parsed as JSON when possible",
        )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def resolve(self, options) -> PipelineConfig:
        flags = {
            "noise": options.get("noise"),
            "seed": options.get("seed"),
            "threads": options.get("threads"),
            "output_dir": options.get("out"),
        }
        return resolve_config(
            profile=options.get("profile"),
            scenario=options.get("scenario"),
            config_path=options.get("config"),
            flags=flags,
            overrides=options.get("set") or [],
            defaults=_get_settings(),
        )

    def handle(self, *args, **options):
        try:
            config = self.resolve(options)
            self.run(config, options)
        except ConfigurationError as exc:
            self.stderr.write(self.style.ERROR(f"Invalid configuration: {exc}"))
            raise CommandError(str(exc), returncode=EXIT_CONFIG)
        except ConvexificationError as exc:
            self.stderr.write(self.style.ERROR(f"Stage failed: {exc}"))
            raise CommandError(str(exc), returncode=EXIT_STAGE)

    def run(self, config: PipelineConfig, options):
        self.stdout.write(f"Running {', '.join(self.stages)} in {config.output_dir}...")
        manifest = get_pipeline_service().run_pipeline(config, self.stages)
        if "evaluate" in manifest["stages"]:
            report = emit_report(manifest)
            self.stdout.write(report.read_text())
        self.stdout.write(self.style.SUCCESS(f"Done: {len(manifest['files'])} files listed in manifest.json"))
