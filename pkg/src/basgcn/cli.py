"""Command line entry point: ``basgcn prepare|train|cv|report|sweep-m``."""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

import click

from . import harness


def _common(f):
    opts = [
        click.option("--dataset", help="Dataset name (file prefix)."),
        click.option("--data-dir", type=click.Path(), help="Dataset root; defaults to $BASGCN_DATA or ./data."),
        click.option("--config", "config_spec", default=None,
                     help="Preset name (default, accuracy, smoke) or YAML key/value file."),
        click.option("--m", "M", type=click.IntRange(min=1), help="Grid size (number of prototypes)."),
        click.option("--levels", type=click.IntRange(min=1), help="Alignment levels L."),
        click.option("--mode", type=click.Choice(harness.ADJACENCY_MODES)),
        click.option("--prototypes", type=click.Choice(harness.PROTOTYPE_MODES)),
        click.option("--epochs", type=click.IntRange(min=1)),
        click.option("--batch-size", type=click.IntRange(min=1)),
        click.option("--seed", type=int),
        click.option("--threads", type=click.IntRange(min=1)),
        click.option("--cache-dir", type=click.Path()),
        click.option("--out-dir", type=click.Path()),
        click.option("--timing/--no-timing", default=None, help="Record wall-clock seconds in results.csv."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _build_config(config_spec, **flags) -> harness.ExperimentConfig:
    try:
        cfg = harness.load_config(config_spec)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--config")
    rename = {"levels": "L"}
    overrides = {rename.get(k, k): v for k, v in flags.items() if v is not None}
    try:
        return harness.config_from_mapping(overrides, cfg)
    except (ValueError, TypeError) as exc:
        raise click.UsageError(str(exc))


def _fold_line(fr):
    click.echo(f"repeat {fr.repeat} fold {fr.fold}: accuracy {fr.accuracy:.4f} "
               f"(final loss {fr.losses[-1]:.4f}, {fr.seconds:.1f}s)")


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Backtrackless aligned-spatial GCN experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")


@main.command()
@_common
def prepare(config_spec, **flags):
    """Build and cache the aligned grids of a dataset."""
    cfg = _build_config(config_spec, **flags)
    if not cfg.cache_dir:
        cfg = replace(cfg, cache_dir="cache")
    try:
        gridset, hit = harness.prepare(cfg)
    except FileNotFoundError as exc:
        raise click.ClickException(str(exc))
    path = harness.cache_path(cfg)
    click.echo(f"{'cache hit' if hit else 'built'}: {len(gridset.grids)} grids -> {path}")


@main.command()
@_common
@click.option("--fold", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--checkpoint", type=click.Path(), help="Write the trained model here.")
def train(config_spec, fold, checkpoint, **flags):
    """Train one model on a single cross-validation split."""
    cfg = _build_config(config_spec, **flags)
    if fold >= cfg.folds:
        raise click.BadParameter(f"fold must be < {cfg.folds}", param_hint="--fold")
    try:
        fr = harness.train_single(cfg, fold, checkpoint)
    except FileNotFoundError as exc:
        raise click.ClickException(str(exc))
    _fold_line(fr)


@main.command()
@_common
@click.option("--repeats", type=click.IntRange(min=1))
@click.option("--folds", type=click.IntRange(min=2))
def cv(config_spec, **flags):
    """Run (repeated) stratified k-fold cross-validation."""
    cfg = _build_config(config_spec, **flags)
    if not cfg.out_dir:
        cfg = replace(cfg, out_dir=str(Path("results") / f"{cfg.dataset}-{cfg.mode}"))
    try:
        report = harness.run_cross_validation(cfg, progress=_fold_line)
    except FileNotFoundError as exc:
        raise click.ClickException(str(exc))
    s = report.summary()
    click.echo(json.dumps({k: s[k] for k in ("dataset", "mode", "mean_accuracy", "se_folds",
                                              "se_repeats", "published_accuracy")}, indent=2))
    click.echo(f"results written to {cfg.out_dir}")


@main.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--csv", "csv_out", type=click.Path(), help="Also write the table as CSV.")
def report(run_dirs, csv_out):
    """Tabulate cached cv results against published accuracies."""
    try:
        click.echo(harness.render_report(run_dirs, csv_out))
    except (OSError, ValueError, KeyError) as exc:
        raise click.ClickException(str(exc))


@main.command("sweep-m")
@_common
def sweep_m_cmd(config_spec, **flags):
    """Cross-validate for M = 16, 24, ..., 64."""
    flags.pop("M", None)
    cfg = _build_config(config_spec, **flags)
    if not cfg.out_dir:
        cfg = replace(cfg, out_dir=str(Path("results") / f"{cfg.dataset}-sweep-m"))
    try:
        rows = harness.sweep_m(cfg, progress=lambda r: click.echo(
            f"M={r['M']}: accuracy {r['mean_accuracy']:.4f}"))
    except FileNotFoundError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"{len(rows)} rows written to {Path(cfg.out_dir) / 'sweep.csv'}")


if __name__ == "__main__":
    main()
