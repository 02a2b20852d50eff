"""
Human-readable run summary built from the manifest.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

logger = logging.getLogger(__name__)


def _fmt(value: Any, spec: str = ".2f") -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return format(value, spec)


def report_lines(manifest: Dict[str, Any]) -> List[str]:
    """Report text as a list of lines; sections appear only when their data is present."""
    config = manifest.get("config", {})
    lines = [
        "Convexification run report",
        "==========================",
        f"profile: {config.get('profile')}  scenario: {config.get('scenario')}  seed: {manifest.get('seed')}",
        f"config hash: {manifest.get('config_hash')}",
        f"stages: {', '.join(manifest.get('stages', []))}",
    ]
    basis = config.get("basis", {})
    inversion = config.get("inversion", {})
    if inversion:
        lines.append(
            f"N={basis.get('N')}  lambda={inversion.get('lam')}  alpha={inversion.get('alpha')}  "
            f"hx={inversion.get('hx')}  ht={inversion.get('ht')}  penalty=H{inversion.get('penalty_order')}"
        )
    noise = config.get("noise", {})
    if noise:
        lines.append(f"noise level: {noise.get('delta', 0.0):.1%}")

    summary = manifest.get("summary", {}).get("inversion")
    if summary:
        lines += [
            "",
            "Inversion",
            "---------",
            f"iterations: {summary['iterations']}  converged: {summary['converged']}",
            f"final J: {_fmt(summary['final_J'], '.6e')}  |grad J|: {_fmt(summary['final_grad_norm'], '.3e')}",
            f"step size: {_fmt(summary['gamma'], '.3e')}  ball projections: {summary.get('projections', 0)}",
        ]

    metrics = manifest.get("metrics")
    if metrics:
        lines += [
            "",
            "Contrast",
            "--------",
            f"correct {_fmt(metrics.get('contrast_correct'))} / computed {_fmt(metrics.get('contrast_computed'))}",
            f"relative L2 error: {_fmt(metrics.get('relative_l2'), '.4f')}",
            f"max error on target: {_fmt(metrics.get('max_error_on_target'), '.4f')}",
        ]
        probe = metrics.get("convexity_probe")
        if probe:
            lines.append(
                f"convexity probe: {probe['nonnegative']}/{probe['pairs']} non-negative (min {probe['min']:.3e})"
            )

    centers = manifest.get("centers")
    if centers:
        lines += ["", "Target centre", "-------------", f"{'t':>6} {'distance':>10} {'x':>8} {'y':>8} {'z':>8}"]
        for row in centers:
            if not row.get("detected"):
                lines.append(f"no target detected at t={row['t']:g}")
                continue
            lines.append(
                f"{row['t']:6.2f} {_fmt(row.get('distance'), '10.4f')} "
                f"{row['x']:8.4f} {row['y']:8.4f} {row['z']:8.4f}"
            )
        if metrics:
            lines.append(f"mean centre distance: {_fmt(metrics.get('mean_center_distance'), '.4f')}")

    timings = manifest.get("timings")
    if timings:
        lines += ["", "Timing", "------"]
        lines += [f"{stage}: {seconds:.1f}s" for stage, seconds in timings.items()]
    return lines


def emit_report(manifest: Dict[str, Any], path: Optional[Union[str, Path]] = None) -> Path:
    """
    Write the report next to the manifest (or to `path`).

    Args:
        manifest: Manifest dict as produced by the pipeline service
        path: Output file; defaults to <output_dir>/report.txt

    Returns:
        Path of the report
    """
    if path is None:
        path = Path(manifest.get("config", {}).get("output_dir", ".")) / "report.txt"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(report_lines(manifest)) + "\n")
    logger.info(f"Report written to {path}")
    return path


def load_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    return json.loads(Path(path).read_text())
