#!/usr/bin/env python3
"""
backmc CLI - run experiments, reproduce published tables, inspect chains
"""
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import click

from . import __version__
from .artifacts import dump_chain, render_table, write_csv, write_text
from .chain import sample_forward
from .config import config_summary, load_config
from .exceptions import BackMCError, ConfigurationError
from .generator import build_generator, default_grid, generator_report
from .reproduce import REPORTS, reproduce as run_report
from .rng import FORWARD_STREAM, stream
from .runner import ExperimentRunner
from .settings import Settings

logger = logging.getLogger(__name__)

EXIT_RUNTIME = 1
EXIT_CONFIG = 2

out_dir_option = click.option(
    "--out-dir", type=click.Path(file_okay=False, path_type=Path), default=None, help="Directory for CSV artifacts"
)
format_option = click.option(
    "--format", "fmt", type=click.Choice(["csv", "table"]), default="table", show_default=True,
    help="How results are printed",
)
threads_option = click.option("--threads", type=int, default=None, help="Worker threads (overrides BACKMC_THREADS)")
seed_option = click.option("--seed", type=int, default=None, help="Override the run seed")


def _fail(exc: BackMCError) -> None:
    click.echo(f"❌ Error: {exc}", err=True)
    sys.exit(EXIT_CONFIG if isinstance(exc, ConfigurationError) else EXIT_RUNTIME)


def _show(frame, fmt: str) -> None:
    if fmt == "csv":
        click.echo(frame.to_csv(index=False, float_format="%.10g"), nl=False)
    else:
        click.echo(render_table(frame))


def _elapsed(started: float) -> None:
    click.echo(f"\n⚡ Executed in {int((time.perf_counter() - started) * 1000)}ms")


@click.group()
@click.version_option(__version__, prog_name="backmc")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def cli(verbose: bool):
    """backmc - backward Monte Carlo pricing on quantized and generator-based chains"""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False, path_type=Path))
@seed_option
@threads_option
@out_dir_option
@format_option
@click.option("--dump-paths", type=int, default=0, help="Also write this many forward chain paths to paths.csv")
def run(config_path: Path, seed: Optional[int], threads: Optional[int], out_dir: Optional[Path], fmt: str, dump_paths: int):
    """Build the chain once and price every payoff with every estimator"""
    started = time.perf_counter()
    try:
        config = load_config(config_path)
        runner = ExperimentRunner(Settings(threads=threads), seed=seed)
        plan = runner.plan(config)
        click.echo(f"🌊 Running {config.name}: {plan.builder} chain, estimators {', '.join(plan.estimators)}")
        result = runner.execute(plan)
        frame = result.frame()
        _show(frame, fmt)
        if out_dir is not None:
            write_csv(frame, out_dir / "results.csv")
            for i, chain in enumerate(result.chains):
                dump_chain(chain, out_dir, prefix="chain" if len(result.chains) == 1 else f"chain{i}")
            summary = "\n".join(f"{k}: {v}" for k, v in config_summary(config).items())
            write_text(summary + "\n\n" + render_table(frame) + "\n", out_dir / "summary.txt")
            if dump_paths > 0:
                paths = sample_forward(result.chain, dump_paths, stream(plan.seed, FORWARD_STREAM))
                write_csv(paths.to_frame(), out_dir / "paths.csv")
            click.echo(f"\nArtifacts written to {out_dir}")
    except BackMCError as exc:
        _fail(exc)
    _elapsed(started)
    click.echo("\n✅ Run complete!")


@cli.command()
@click.argument("table", type=click.Choice(sorted(REPORTS)))
@click.option("--n-mc", type=int, default=10000, show_default=True, help="Path budget per estimator")
@click.option("--replications", type=int, default=1, show_default=True, help="Seeds used for the error ratio")
@click.option("--grid-size", "N", type=int, default=None, help="Quantizer / generator grid size")
@seed_option
@threads_option
@out_dir_option
@format_option
def reproduce(table: str, n_mc: int, replications: int, N: Optional[int], seed: Optional[int],
              threads: Optional[int], out_dir: Optional[Path], fmt: str):
    """Recompute a published table next to the published numbers"""
    started = time.perf_counter()
    try:
        settings = Settings(threads=threads)
        kwargs = dict(n_mc=n_mc, seed=seed or 0, replications=replications, threads=settings.threads)
        if N is not None:
            kwargs["N"] = N
        click.echo(f"🌊 Reproducing {table}")
        report = run_report(table, **kwargs)
        _show(report.frame, fmt)
        click.echo("")
        for name, ok in report.checks.items():
            click.echo(f"{'✅' if ok else '❌'} {name}")
        if out_dir is not None:
            write_csv(report.frame, out_dir / f"{report.name}.csv")
    except BackMCError as exc:
        _fail(exc)
    _elapsed(started)
    if not report.passed:
        click.echo(f"\n❌ {table}: some checks failed", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(f"\n✅ {table} complete!")


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False, path_type=Path))
@threads_option
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), default=Path("."), show_default=True)
def quantize(config_path: Path, threads: Optional[int], out_dir: Path):
    """Build the chain only and dump grids, transitions and solver diagnostics"""
    started = time.perf_counter()
    try:
        config = load_config(config_path)
        runner = ExperimentRunner(Settings(threads=threads))
        plan = runner.plan(config)
        plan.estimators = []
        click.echo(f"🌊 Building {plan.builder} chain for {config.name}")
        for i, model in enumerate(config.models):
            chain = runner.build_chain(plan, model)
            prefix = config.name if len(config.models) == 1 else f"{config.name}_{i}"
            for path in dump_chain(chain, out_dir, prefix=prefix):
                click.echo(str(path))
    except BackMCError as exc:
        _fail(exc)
    _elapsed(started)
    click.echo("\n✅ Chain dumped!")


@cli.command("expm-check")
@click.argument("config_path", type=click.Path(dir_okay=False, path_type=Path))
@out_dir_option
@format_option
def expm_check(config_path: Path, out_dir: Optional[Path], fmt: str):
    """Generator health per date interval: Courant step, scaling exponent, row and semigroup errors"""
    started = time.perf_counter()
    try:
        config = load_config(config_path)
        dates = config.time_grid.times
        grid = default_grid(config.model, float(dates[-1]), config.chain.N, config.chain.width)
        click.echo(f"🌊 Checking generators for {config.name} on {grid.size} nodes")
        report = generator_report(config.model, dates, grid)
        _show(report, fmt)
        if out_dir is not None:
            write_csv(report, out_dir / "expm_check.csv")
            for seg in sorted(set(report["segment"])):
                start = float(report.loc[report["segment"] == seg, "start"].iloc[0])
                write_csv(build_generator(config.model, start, grid).to_frame(), out_dir / f"generator_{seg}.csv")
    except BackMCError as exc:
        _fail(exc)
    _elapsed(started)
    click.echo("\n✅ Generator check complete!")


def main():
    """Main CLI entry point"""
    cli()


if __name__ == "__main__":
    main()
