"""``hots`` command line."""

from __future__ import annotations

import logging
import sys

import click

from .config import ConfigError, load_config, parse_config
from .pipeline import MissingArtifact, Pipeline, StageFailure

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_SOLVER = 4


def _run(stage: str, config: str | None, out: str | None, threads: int, verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(config) if config else load_config()
        pipe = Pipeline(cfg, out, threads)
        pipe.run_stage(stage)
    except (ConfigError, FileNotFoundError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except MissingArtifact as exc:
        click.echo(f"missing dependency: {exc}", err=True)
        sys.exit(EXIT_MISSING)
    except StageFailure as exc:
        click.echo(f"solver failure in {exc}", err=True)
        sys.exit(EXIT_SOLVER)
    for event in pipe.events:
        click.echo(event)
    click.echo(f"{stage}: artifacts in {pipe.out}")


@click.group()
def main() -> None:
    """Three-scale thermo-mechanical homogenization pipeline."""


def _stage_command(name: str, help_text: str):
    @main.command(name=name, help=help_text)
    @click.option("--config", "config", type=click.Path(), default=None, help="YAML run configuration (defaults when omitted).")
    @click.option("--out", "out", type=click.Path(), default=None, help="Output directory (overrides the config).")
    @click.option("--threads", type=click.IntRange(1), default=1, show_default=True, help="Worker threads for cell problems.")
    @click.option("-v", "--verbose", is_flag=True, help="Log progress.")
    def command(config, out, threads, verbose):
        _run(name, config, out, threads, verbose)

    return command


for _name, _help in (
    ("offline", "Solve unit-cell problems and tabulate coefficients (cached by config hash)."),
    ("online", "Time-step the homogenized macro problem."),
    ("reconstruct", "Sample the multiscale approximations along the configured line."),
    ("reference", "Solve the fully resolved problem."),
    ("compare", "Relative errors of every approximation against the reference."),
    ("all", "Run the configured stages in order."),
):
    _stage_command(_name, _help)


if __name__ == "__main__":
    main()
