"""Command line entry points: serve, generate, simulate, report."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .evalsim import (
    SimConfig,
    SimTrace,
    report_from_events,
    report_text,
    simulate as run_simulation,
    summarize,
    write_report,
)
from .generation import MockBackend, RemoteBackend, run_pipeline
from .imaging import PlacementSpec, image_png_bytes, load_image
from .service import AppConfig, CreativeService, create_app


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML config file.")
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
def serve(config_path, host, port):
    """Run the creative service with background pipeline workers."""
    import uvicorn

    cfg = AppConfig.load(config_path)
    service = CreativeService(cfg)
    service.start_workers()
    app = create_app(service)
    try:
        uvicorn.run(app, host=host or cfg.host, port=port or cfg.port, log_level="info")
    finally:
        service.stop()


@main.command()
@click.option("--image", "image_path", type=click.Path(exists=True), required=True,
              help="Product image (any PIL-readable format).")
@click.option("--prompt-id", required=True, help="Prompt id from the pool.")
@click.option("--width", type=int, required=True)
@click.option("--height", type=int, required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def generate(image_path, prompt_id, width, height, out_path, config_path):
    """One-shot pipeline run: product image in, placement creative out."""
    import hashlib

    cfg = AppConfig.load(config_path)
    pool = cfg.prompt_pool()
    prompt = pool.get(prompt_id)
    if prompt is None:
        raise click.ClickException(
            f"prompt {prompt_id!r} not in pool; known: {[p['prompt_id'] for p in pool.to_list()]}"
        )
    backend = MockBackend() if cfg.backend == "mock" else RemoteBackend(cfg.backend)
    raw = Path(image_path).read_bytes()
    product = load_image(raw)
    creative = run_pipeline(
        product, None, prompt, PlacementSpec("cli", width, height),
        cfg.pipeline(), backend, image_hash=hashlib.sha256(raw).hexdigest(),
    )
    Path(out_path).write_bytes(image_png_bytes(creative))
    click.echo(f"wrote {out_path} ({width}x{height}, prompt {prompt_id})")


@main.command()
@click.option("--seed", type=int, default=0)
@click.option("--impressions", type=int, default=50_000)
@click.option("--arms", type=int, default=3)
@click.option("--dominant-gap", type=float, default=0.05)
@click.option("--dominant-arm", type=int, default=0)
@click.option("--d", "dimension", type=int, default=16)
@click.option("--alpha", type=float, default=1.0)
@click.option("--ctr-min", type=float, default=0.01)
@click.option("--ctr-max", type=float, default=0.10)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the full trace JSON here.")
def simulate(seed, impressions, arms, dominant_gap, dominant_arm, dimension, alpha,
             ctr_min, ctr_max, out_path):
    """Paired bandit-vs-random CTR simulation."""
    cfg = SimConfig(
        seed=seed, n_impressions=impressions, n_arms=arms, d=dimension, alpha=alpha,
        ctr_min=ctr_min, ctr_max=ctr_max, dominant_arm=dominant_arm,
        dominant_gap=dominant_gap,
    )
    trace = run_simulation(cfg)
    if out_path:
        trace.save(out_path)
        click.echo(f"trace written to {out_path}")
    click.echo(report_text(summarize(trace)))


@main.command()
@click.option("--in", "trace_path", type=click.Path(exists=True), default=None,
              help="Simulation trace JSON.")
@click.option("--journal", "journal_path", type=click.Path(exists=True), default=None,
              help="Service events journal (events.jsonl).")
@click.option("--window", type=float, default=None, help="Seconds of trailing events to keep.")
@click.option("--out-dir", type=click.Path(), default=None,
              help="Write summary.json, groups.csv and figures here.")
def report(trace_path, journal_path, window, out_dir):
    """Summarize a simulation trace or live service traffic."""
    if (trace_path is None) == (journal_path is None):
        raise click.ClickException("exactly one of --in / --journal is required")
    trace = None
    if trace_path:
        trace = SimTrace.load(trace_path)
        summary = summarize(trace)
    else:
        summary = report_from_events(journal_path, window=window)
    click.echo(report_text(summary))
    if out_dir:
        files = write_report(summary, out_dir, trace=trace)
        click.echo("wrote " + ", ".join(str(f) for f in files))


if __name__ == "__main__":
    main()
