"""Command-line entry points: ``run``, ``footprint``, ``report``, ``validate-config``."""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import click

from .data import DatasetError
from .engine import ConfigError, ExperimentConfig, run_experiment
from .replay import CODECS, MB, PQParams, memory_footprint
from .report import ReportError, build_report


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _fail(kind: str, message: str, code: int = 2):
    click.echo(json.dumps({"error": kind, "message": message}))
    sys.exit(code)


def _parse_shape(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    try:
        shape = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise click.BadParameter(f"expected a shape like 3x256x256, got {text!r}")
    if not shape or min(shape) < 1:
        raise click.BadParameter(f"shape must be positive, got {text!r}")
    return shape


def _load_config(path: str) -> tuple[ExperimentConfig, bytes]:
    raw = Path(path).read_bytes()
    cfg = ExperimentConfig.from_json(raw.decode("utf-8"))
    return cfg.validate(), raw


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Continual-learning anomaly detection experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("validate-config")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
def validate_config(config_path: str) -> None:
    """Check a config file without running it."""
    try:
        cfg, _ = _load_config(config_path)
    except ConfigError as exc:
        _fail("ConfigError", str(exc))
    click.echo(json.dumps({"valid": True, "strategy": cfg.strategy.kind, "variant": cfg.variant}))


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--dump-maps", is_flag=True, help="Save anomaly maps after every task.")
def run(config_path: str, out_dir: str, dump_maps: bool) -> None:
    """Run the experiment in CONFIG_PATH, writing results to a new OUT_DIR."""
    try:
        cfg, raw = _load_config(config_path)
    except ConfigError as exc:
        _fail("ConfigError", str(exc))
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        _fail("OutputExists", f"output directory {out} is not empty")
    out.mkdir(parents=True, exist_ok=True)
    if dump_maps:
        cfg.dump_maps = True
    manifest = {
        "config_path": str(Path(config_path).resolve()),
        "output_dir": str(out.resolve()),
        "config_hash": git_blob_hash(raw),
        "started_at": _now(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    try:
        result = run_experiment(cfg, out_dir=out)
    except (DatasetError, ConfigError) as exc:
        manifest["failed_at"] = _now()
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        _fail(type(exc).__name__, str(exc))
    (out / "result.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    (out / "metrics.csv").write_text(result.metrics_csv())
    manifest["finished_at"] = _now()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    click.echo(json.dumps({"output_dir": str(out), "final_pixel_f1": result.final("pixel_f1")}))


@main.command()
@click.option("--codec", required=True, type=click.Choice(CODECS))
@click.option("--capacity", required=True, type=click.IntRange(min=0))
@click.option("--image", "image", default=None, help="Image shape CxHxW, e.g. 3x256x256.")
@click.option("--feature", "feature", default=None, help="Feature shape CxHxW (needed for pq_feature).")
@click.option("--feature-elems", type=click.IntRange(min=1), default=None, help="Feature element count.")
@click.option("--pq-m", type=click.IntRange(min=1), default=6, show_default=True)
@click.option("--pq-b", type=click.IntRange(min=1), default=7, show_default=True)
@click.option("--num-codebooks", type=click.IntRange(min=0), default=1, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def footprint(codec, capacity, image, feature, feature_elems, pq_m, pq_b, num_codebooks, as_json) -> None:
    """Replay-memory byte count (1 MB = 10^6 B)."""
    image_shape = _parse_shape(image)
    feature_shape = _parse_shape(feature) or ((feature_elems,) if feature_elems else None)
    pq = PQParams(pq_m, pq_b) if codec == "pq_feature" else None
    try:
        rep = memory_footprint(codec, capacity, image_shape, feature_shape, pq, num_codebooks)
    except ValueError as exc:
        _fail("FootprintError", str(exc))
    if as_json:
        click.echo(json.dumps(rep.to_dict()))
        return
    click.echo(f"codec:            {codec}")
    click.echo(f"capacity:         {capacity}")
    click.echo(f"per_sample_bytes: {rep.per_sample_bytes}")
    click.echo(f"payload_bytes:    {rep.payload_bytes}")
    click.echo(f"codebook_bytes:   {rep.codebook_bytes}")
    click.echo(f"total_bytes:      {rep.total_bytes}")
    click.echo(f"total_mb:         {rep.total_bytes / MB:.2f}")


@main.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--no-plots", is_flag=True, help="Write CSVs only.")
def report(run_dirs, out_dir, no_plots) -> None:
    """Aggregate RUN_DIRS into curves, a memory trade-off and a summary table."""
    try:
        paths = build_report(run_dirs, out_dir, plots=not no_plots)
    except ReportError as exc:
        _fail("ReportError", str(exc))
    click.echo(json.dumps({k: str(v) for k, v in paths.items()}))


if __name__ == "__main__":
    main()
