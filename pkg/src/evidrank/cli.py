"""Command-line front end.

``evidrank pipeline --config cfg.json`` runs retrieve, rerank, verify and
evaluate end to end; each stage is also a subcommand that picks up from the
previous stage's artifact files.  Exit codes: 2 config, 3 input integrity,
4 oracle transport, 5 evaluation.
"""

from __future__ import annotations

import logging
import sys
from typing import Callable

import click

from .config import PipelineConfig, apply_overrides, load_config
from .errors import EvidrankError, exit_code_for
from .pipeline import STAGES, run_pipeline, run_stage

log = logging.getLogger("evidrank")


def _common_options(fn: Callable) -> Callable:
    options = [
        click.option("--config", "config_path", required=True, type=click.Path(), help="Pipeline config file (JSON)."),
        click.option("--strategy", default=None, help="Override the re-rank strategy (irs, gais_all, gais_yn, gais_yno)."),
        click.option("--k", default=None, type=int, help="Override K_evidence (evidence kept for verification)."),
        click.option("--lambda", "lam", default=None, type=float, help="Override the no-answer scoring constant."),
        click.option("--oracle-url", default=None, help="Override the oracle endpoint URL."),
        click.option("--mock-script", default=None, type=click.Path(), help="Scripted mock oracle responses (JSONL)."),
        click.option("--out-dir", default=None, type=click.Path(), help="Override the artifact output directory."),
        click.option("--jobs", default=None, type=int, help="Worker threads for per-claim parallel work."),
        click.option("--verbose", is_flag=True, help="Log stage progress to stderr."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _load(config_path: str, verbose: bool, **overrides) -> PipelineConfig:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s %(message)s",
    )
    config = load_config(config_path)
    return apply_overrides(config, **overrides)


def _run(action: Callable[[PipelineConfig], None], config_path: str, verbose: bool, **overrides) -> None:
    try:
        config = _load(config_path, verbose, **overrides)
        action(config)
    except EvidrankError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exit_code_for(exc))


@click.group()
def main() -> None:
    """Evidence retrieval, generative re-ranking, and claim verification."""


@main.command()
@_common_options
@click.option("--stage", default=None, type=click.Choice(STAGES), help="Run a single stage instead of all of them.")
@click.option("--csv", "write_csv", is_flag=True, help="Also export the retrieval report as CSV.")
def pipeline(config_path, strategy, k, lam, oracle_url, mock_script, out_dir, jobs, verbose, stage, write_csv):
    """Run every stage in order (or one stage with --stage)."""
    def action(config: PipelineConfig) -> None:
        if stage is None:
            run_pipeline(config, write_csv=write_csv)
        else:
            run_stage(config, stage, write_csv=write_csv)

    _run(action, config_path, verbose, strategy=strategy, k=k, lam=lam,
         oracle_url=oracle_url, mock_script=mock_script, out_dir=out_dir, jobs=jobs)


def _stage_command(stage_name: str, help_text: str) -> None:
    @main.command(name=stage_name, help=help_text)
    @_common_options
    def command(config_path, strategy, k, lam, oracle_url, mock_script, out_dir, jobs, verbose):
        _run(lambda config: run_stage(config, stage_name), config_path, verbose,
             strategy=strategy, k=k, lam=lam, oracle_url=oracle_url,
             mock_script=mock_script, out_dir=out_dir, jobs=jobs)

    command.__name__ = stage_name


_stage_command("ingest", "Validate inputs and write the normalized corpus/claims artifacts.")
_stage_command("retrieve", "Initial top-N retrieval per claim and modality.")
_stage_command("rerank", "Re-rank the retrieved pool with the relevance oracle.")
_stage_command("verify", "Predict a verdict per claim from the re-ranked evidence.")
_stage_command("evaluate", "Score retrieval and verification; write the report.")


if __name__ == "__main__":
    main()
