"""
Command-line interface for malmm-py.

This module provides the main CLI entry point: the scaling, timing,
ablation and bank-length benchmark commands, the verification suite, and
dataset, bank and configuration helpers.
"""

import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import click

from . import bench
from .config import ConfigManager, MalmmConfig, get_default_config_path
from .features import (
    DatasetItem,
    LabeledDataset,
    first_segment_recall_dataset,
    generate_synthetic,
    load_features,
    load_manifest,
    position_embed,
    save_manifest,
    segment_coverage_spec,
    write_features,
)
from .memory_bank import TIE_BREAKS, CompressionPolicy, MemoryBank, TokenGrid
from .pipeline import TrainingDivergedError
from .qformer import POSITION_EMBEDDINGS, SUBLAYER_ORDERS
from .utils import ensure_directory_exists, parse_int_list
from .verify import run_verification

logger = logging.getLogger(__name__)

PRESETS = ("toy", "tiny", "full-shape")

# Exit statuses of ``verify``; usage and configuration errors exit with 2
EXIT_OK = 0
EXIT_FAILURE = 1


def _configure_logging(verbose: bool, debug: bool) -> None:
    level = logging.DEBUG if debug else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
    logging.getLogger("malmm").setLevel(level)


def _int_list(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return parse_int_list(text)
    except ValueError as e:
        raise click.BadParameter(str(e))


def _policy_list(text: str) -> List[str]:
    return [p for p in text.split(",") if p.strip()]


def _emit(text: str, out: Optional[str], what: str) -> None:
    """Write ``text`` to ``out`` or stdout."""
    if out is None:
        click.echo(text, nl=not text.endswith("\n"))
        return
    Path(out).write_text(text, encoding="utf-8")
    click.echo(f"Wrote {what} to {out}", err=True)


def _run_report(build: Callable[[], bench.RunReport]) -> bench.RunReport:
    """Run a sweep, turning invalid arguments into usage errors."""
    try:
        return build()
    except TrainingDivergedError as e:
        logger.error("Training diverged: %s", e)
        raise click.ClickException(f"Training diverged: {e}")
    except ValueError as e:
        raise click.UsageError(str(e))


@click.group(invoke_without_command=True)
@click.option(
    "-f",
    "--config",
    "config_file",
    type=click.Path(exists=True, dir_okay=False),
    help="JSON configuration file (its values override flags)",
)
@click.option("--preset", type=click.Choice(PRESETS), help="Configuration preset")
@click.option("-v", "--verbose", is_flag=True, help="Enable verbose output")
@click.option("--debug", is_flag=True, help="Enable debug output")
@click.option("--seed", type=int, help="Seed (default: $MALMM_SEED or 0)")
@click.option("-L", "--num-blocks", type=int, help="Q-Former blocks")
@click.option("-N", "--num-queries", type=int, help="Learned query tokens")
@click.option("-C", "--channels", type=int, help="Channel width")
@click.option("-H", "--num-heads", type=int, help="Attention heads")
@click.option("--ffn-hidden", type=int, help="Feed-forward hidden width")
@click.option("-P", "--tokens-per-frame", type=int, help="Visual tokens per frame")
@click.option("-K", "--num-classes", type=int, help="Number of classes")
@click.option("-M", "--bank-size", type=int, help="Memory bank capacity")
@click.option("--policy", help="Bank policy: mbc, mbc_frame, fifo or none")
@click.option("--tie-break", type=click.Choice(TIE_BREAKS), help="Merge tie break")
@click.option(
    "--sublayer-order", type=click.Choice(SUBLAYER_ORDERS), help="Sublayer order"
)
@click.option(
    "--position-embedding",
    type=click.Choice(POSITION_EMBEDDINGS),
    help="Temporal position embedding",
)
@click.option("--optimizer", type=click.Choice(["sgd", "adamw"]), help="Optimizer")
@click.option("--workers", type=int, help="Worker threads for sweeps")
@click.pass_context
def cli(ctx, config_file, preset, **kwargs):
    """malmm-py: memory-augmented streaming Q-Former workbench."""
    manager = ConfigManager()
    try:
        if preset:
            manager.apply_preset(preset)
        manager.update_from_args({k: v for k, v in kwargs.items() if v is not None})
        if config_file:
            manager.overlay_file(Path(config_file))
        config = manager.get_config()
        config.to_qformer_config()
    except (ValueError, TypeError) as e:
        raise click.UsageError(f"Invalid configuration: {e}")

    _configure_logging(config.verbose, config.debug)
    logger.debug("Effective configuration: %s", config.to_dict())

    ctx.ensure_object(dict)
    ctx.obj["config"] = config
    ctx.obj["config_manager"] = manager

    # If no command specified, show help
    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


@cli.command()
@click.option("--policy", "policies", default="mbc,fifo,concat", help="Policies")
@click.option("--frames-list", help="Strictly increasing T values, e.g. 10,100,1000")
@click.option("--bank-size", type=int, help="Bank capacity M for this sweep")
@click.option("--out", type=click.Path(dir_okay=False), help="CSV output path")
@click.pass_context
def scaling(ctx, policies, frames_list, bank_size, out):
    """Downstream tokens and peak memory versus frame count (CSV)."""
    config: MalmmConfig = ctx.obj["config"]
    if bank_size is not None:
        config.bank.capacity = bank_size
    report = _run_report(
        lambda: bench.scaling(
            config,
            _policy_list(policies),
            _int_list(frames_list),
            workers=config.bench.workers,
        )
    )
    _emit(report.to_csv(), out, "scaling report")


@cli.command()
@click.option("--frames-list", default="50,100,200,400", help="T values")
@click.option("--repeats", type=int, help="Repeats per T (at least 3)")
@click.option("--policy", default="mbc", help="Bank policy or baseline")
@click.option("--out", type=click.Path(dir_okay=False), help="CSV output path")
@click.pass_context
def timing(ctx, frames_list, repeats, policy, out):
    """Median wall-clock per frame count with a linear fit (CSV)."""
    config: MalmmConfig = ctx.obj["config"]
    report = _run_report(
        lambda: bench.timing(config, _int_list(frames_list), repeats, policy)
    )
    _emit(report.to_csv(), out, "timing report")
    fit = report.summary
    click.echo(
        f"# linear fit: slope={fit['slope_ms_per_frame']:.4f} ms/frame, "
        f"intercept={fit['intercept_ms']:.4f} ms, r_squared={fit['r_squared']:.4f}"
    )


@cli.command()
@click.option(
    "--dataset",
    type=click.Path(exists=True, dir_okay=False),
    help="Dataset manifest (default: first-segment recall task)",
)
@click.option(
    "--policies", default="mbc,fifo,concat,avgpool,none", help="Policies to compare"
)
@click.option("--epochs", type=int, help="Training epochs")
@click.option("--learning-rate", type=float, help="Learning rate")
@click.option("--no-visual-bank", is_flag=True, help="Disable the visual memory bank")
@click.option("--no-query-bank", is_flag=True, help="Disable the query memory banks")
@click.option("--out", type=click.Path(dir_okay=False), help="JSON output path")
@click.pass_context
def ablate(
    ctx, dataset, policies, epochs, learning_rate, no_visual_bank, no_query_bank, out
):
    """Train and evaluate each temporal modeling policy (JSON)."""
    config: MalmmConfig = ctx.obj["config"]
    if no_visual_bank:
        config.bank.use_visual_bank = False
    if no_query_bank:
        config.bank.use_query_bank = False
    try:
        data = load_manifest(dataset) if dataset else None
    except (KeyError, ValueError) as e:
        raise click.UsageError(f"Invalid dataset manifest: {e}")
    report = _run_report(
        lambda: bench.ablate(
            config,
            data,
            _policy_list(policies),
            epochs,
            learning_rate,
            workers=config.bench.workers,
        )
    )
    _emit(report.to_json(), out, "ablation report")
    if out is not None:
        for row in report.records:
            click.echo(
                f"{row['policy']:>10}: eval accuracy {row['eval_accuracy']:.3f}, "
                f"tokens {row['downstream_token_rows']}, KV rows {row['peak_kv_rows']}"
            )


@cli.command("banklen-sweep")
@click.option("--lengths-list", help="Bank lengths M (default: 1..2K)")
@click.option(
    "--readout", type=click.Choice(bench.SWEEP_READOUTS), default="recall"
)
@click.option("--segments", type=int, default=5, help="Segments K of the task")
@click.option("--segment-length", type=int, default=4, help="Frames per segment")
@click.option("--epochs", type=int, help="Training epochs (trained readout)")
@click.option("--out", type=click.Path(dir_okay=False), help="CSV output path")
@click.pass_context
def banklen_sweep(ctx, lengths_list, readout, segments, segment_length, epochs, out):
    """Accuracy versus memory bank length (two-column CSV)."""
    config: MalmmConfig = ctx.obj["config"]
    lengths = _int_list(lengths_list) or list(range(1, 2 * segments + 1))
    report = _run_report(
        lambda: bench.banklen_sweep(
            config,
            lengths,
            readout,
            segments,
            segment_length,
            epochs=epochs,
            workers=config.bench.workers,
        )
    )
    _emit(report.to_csv(), out, "bank-length sweep")


@cli.command()
@click.option("--seeds", default=None, help="Comma-separated seeds (default: --seed)")
@click.option("--instances", type=int, default=1000, help="Oracle instances")
@click.option("--no-gradients", is_flag=True, help="Skip the gradient check")
@click.option(
    "--tie-break",
    type=click.Choice(TIE_BREAKS),
    help="Tie break of the bank under test (latest is a mutation check)",
)
@click.option("--out", type=click.Path(dir_okay=False), help="JSON output path")
@click.pass_context
def verify(ctx, seeds, instances, no_gradients, tie_break, out):
    """Run the oracle and property suite; exit 1 on any failure."""
    config: MalmmConfig = ctx.obj["config"]
    seed_list = _int_list(seeds) or [config.training.seed]
    if instances < 1:
        raise click.UsageError("--instances must be >= 1")

    reports = [
        run_verification(
            seed,
            instances,
            tie_break=tie_break or config.bank.tie_break,
            include_gradients=not no_gradients,
        )
        for seed in seed_list
    ]
    passed = all(r.passed for r in reports)
    detail: Dict[str, Any] = {
        "passed": passed,
        "seeds": seed_list,
        "reports": [r.to_dict() for r in reports],
    }
    _emit(json.dumps(detail, indent=2), out, "verification report")
    for report in reports:
        status = "PASS" if report.passed else "FAIL"
        failed = ", ".join(report.failed_suites) or "none"
        click.echo(f"seed {report.seed}: {status} (failed: {failed})", err=True)
    ctx.exit(EXIT_OK if passed else EXIT_FAILURE)


@cli.command("inspect-bank")
@click.option(
    "--input",
    "input_file",
    type=click.Path(exists=True, dir_okay=False),
    help="MAFB1 feature file (default: a synthetic segment stream)",
)
@click.option("--segments", type=int, default=5, help="Synthetic segments")
@click.option("--segment-length", type=int, default=4, help="Frames per segment")
@click.option("--noise", type=float, default=0.0, help="Synthetic noise sigma")
@click.option("--with-pe", is_flag=True, help="Add the temporal position embedding")
@click.option("--out", type=click.Path(dir_okay=False), help="JSON output path")
@click.pass_context
def inspect_bank(ctx, input_file, segments, segment_length, noise, with_pe, out):
    """Stream frames through one memory bank and dump it as JSON."""
    config: MalmmConfig = ctx.obj["config"]
    try:
        if input_file:
            stream = load_features(input_file)
        else:
            spec = segment_coverage_spec(
                segments,
                segment_length,
                config.model.visual_tokens_per_frame,
                noise=noise,
                seed=config.training.seed,
            )
            stream = generate_synthetic(spec)
        policy = CompressionPolicy.from_name(config.bank.policy, config.bank.tie_break)
    except ValueError as e:
        raise click.UsageError(str(e))

    bank = MemoryBank(
        config.bank.capacity, stream.num_positions, stream.channels, policy, "visual"
    )
    for t, frame in enumerate(stream, start=1):
        bank.append(TokenGrid.fresh(position_embed(frame, t) if with_pe else frame))
    _emit(json.dumps(bank.to_dict(), indent=2), out, "bank dump")


@cli.command("make-dataset")
@click.argument("output_dir", type=click.Path(file_okay=False))
@click.option("--items-per-class", type=int, default=1, help="Training items per class")
@click.option(
    "--eval-items-per-class", type=int, default=1, help="Eval items per class"
)
@click.option("--frames", type=int, help="Frames per stream (default: (L+1)*M+1)")
@click.option("--noise", type=float, default=0.0, help="Noise sigma")
@click.option(
    "--write-features",
    "as_features",
    is_flag=True,
    help="Write MAFB1 files instead of specs",
)
@click.pass_context
def make_dataset(
    ctx,
    output_dir,
    items_per_class,
    eval_items_per_class,
    frames,
    noise,
    as_features,
):
    """Write a first-segment recall dataset manifest."""
    config: MalmmConfig = ctx.obj["config"]
    model, capacity = config.model, config.bank.capacity
    try:
        dataset = first_segment_recall_dataset(
            num_classes=model.num_classes,
            items_per_class=items_per_class,
            num_frames=frames or (model.num_blocks + 1) * capacity + 1,
            bank_capacity=capacity,
            num_blocks=model.num_blocks,
            num_positions=model.visual_tokens_per_frame,
            channels=model.channels,
            noise=noise,
            seed=config.training.seed,
            eval_items_per_class=eval_items_per_class,
        )
    except ValueError as e:
        raise click.UsageError(str(e))

    directory = ensure_directory_exists(output_dir)
    if as_features:
        items = []
        for index, item in enumerate(dataset.items):
            name = f"item_{index:04d}.mafb"
            write_features(directory / name, item.stream())
            items.append(DatasetItem(Path(name), item.label, item.split))
        dataset = LabeledDataset(items, dataset.num_classes)
    manifest = directory / "manifest.json"
    save_manifest(dataset, manifest)
    click.echo(f"Wrote {len(dataset)} items to {manifest}")


@cli.command("create-config")
@click.option("--path", type=click.Path(dir_okay=False), help="Output path")
@click.pass_context
def create_config(ctx, path):
    """Write the effective configuration to a JSON file."""
    config = ctx.obj["config"]
    config_path = Path(path) if path else get_default_config_path()

    ctx.obj["config_manager"].save_config(config, config_path)
    click.echo(f"Configuration file created at {config_path}")


def main():
    """Main entry point for the CLI."""
    try:
        cli()
    except KeyboardInterrupt:
        click.echo("\nInterrupted by user", err=True)
        sys.exit(1)
    except Exception as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
