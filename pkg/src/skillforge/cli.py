"""Command-line entry points wrapping the pipeline stages.

The global flags (--config, --seed, --force, --client) are accepted both
before and after the subcommand name; the subcommand position wins.
"""

from __future__ import annotations

from pathlib import Path

import click

from .experiments import EXPERIMENTS, MissingArtifactError
from .pipeline import (
    STAGE_ORDER,
    ChecksumError,
    ConfigError,
    PipelineConfig,
    StageResult,
    load_config,
    run_all,
    run_stage,
)

_CLIENT_CHOICE = click.Choice(["stub", "http"])


def _global_options(fn):
    fn = click.option("--config", "-c", type=click.Path(), default=None,
                      help="TOML config file.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the configured seed.")(fn)
    fn = click.option("--force", is_flag=True, default=False,
                      help="Rerun even when artifacts are up to date.")(fn)
    fn = click.option("--client", type=_CLIENT_CHOICE, default=None,
                      help="Override the configured text-generation client.")(fn)
    return fn


def _merge_opts(ctx: click.Context, config, seed, force, client) -> dict:
    group = ctx.obj or {"config": None, "seed": None, "force": False, "client": None}
    return {
        "config": config if config is not None else group["config"],
        "seed": seed if seed is not None else group["seed"],
        "force": force or group["force"],
        "client": client if client is not None else group["client"],
    }


def _build_config(opts: dict) -> PipelineConfig:
    overrides: dict = {}
    if opts["seed"] is not None:
        overrides["seed"] = opts["seed"]
    if opts["client"] is not None:
        overrides["client"] = {"kind": opts["client"]}
    try:
        return load_config(opts["config"], overrides)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc


def _report(result: StageResult) -> None:
    if result.skipped:
        click.echo(f"{result.stage}: up to date, skipped")
        return
    click.echo(f"{result.stage}: done in {result.elapsed:.1f}s")
    for path in result.outputs:
        click.echo(f"  wrote {path}")


def _run(opts: dict, stage: str, **kwargs) -> None:
    config = _build_config(opts)
    try:
        _report(run_stage(stage, config, force=opts["force"], **kwargs))
    except (MissingArtifactError, ChecksumError, ConfigError) as exc:
        raise click.ClickException(str(exc)) from exc


@click.group()
@_global_options
@click.pass_context
def main(ctx: click.Context, config, seed, force, client):
    """Zero-shot skill extraction: synthesize data, train, index, and evaluate."""
    ctx.obj = {"config": config, "seed": seed, "force": force, "client": client}


def _stage_command(name: str, help_text: str):
    @main.command(name, help=help_text)
    @_global_options
    @click.pass_context
    def _cmd(ctx, config, seed, force, client):
        _run(_merge_opts(ctx, config, seed, force, client), name)

    return _cmd


_stage_command("generate", "Synthesize training sentences from the skill inventory.")
_stage_command("dedup", "Drop exact and near-duplicate sentences from the raw dataset.")
_stage_command("train-filter", "Train the sentence relevance filter.")
_stage_command("train-encoder", "Train the sentence/skill embedding model.")
_stage_command("build-index", "Embed every skill and save the retrieval index.")
_stage_command("tune-gamma", "Pick the similarity cutoff on dev postings.")


@main.command("index", hidden=True, help="Alias for build-index.")
@_global_options
@click.pass_context
def index_alias(ctx, config, seed, force, client):
    _run(_merge_opts(ctx, config, seed, force, client), "build-index")


@main.command()
@click.option(
    "--posting-file",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="JSONL of postings to predict on (defaults to the configured or held-out set).",
)
@_global_options
@click.pass_context
def predict(ctx, posting_file, config, seed, force, client):
    """Extract ranked skills for each posting."""
    opts = _merge_opts(ctx, config, seed, force, client)
    _run(opts, "predict", posting_file=Path(posting_file) if posting_file else None)


@main.command()
@click.option(
    "--experiment",
    "experiments",
    multiple=True,
    type=click.Choice(list(EXPERIMENTS)),
    help="Run only these experiments (repeatable). Defaults to the configured list.",
)
@_global_options
@click.pass_context
def evaluate(ctx, experiments, config, seed, force, client):
    """Run the evaluation experiments; write reports, tables, and figures."""
    opts = _merge_opts(ctx, config, seed, force, client)
    pipeline_config = _build_config(opts)
    if experiments:
        pipeline_config.data = dict(pipeline_config.data)
        pipeline_config.data["evaluate"] = dict(pipeline_config.data.get("evaluate", {}))
        pipeline_config.data["evaluate"]["experiments"] = list(experiments)
    try:
        _report(run_stage("evaluate", pipeline_config, force=opts["force"]))
    except (MissingArtifactError, ChecksumError, ConfigError) as exc:
        raise click.ClickException(str(exc)) from exc


@main.command("run-all")
@_global_options
@click.pass_context
def run_all_cmd(ctx, config, seed, force, client):
    """Run every stage in order."""
    opts = _merge_opts(ctx, config, seed, force, client)
    pipeline_config = _build_config(opts)
    try:
        for result in run_all(pipeline_config, force=opts["force"]):
            _report(result)
    except (MissingArtifactError, ChecksumError, ConfigError) as exc:
        raise click.ClickException(str(exc)) from exc


@main.command()
def stages():
    """List the stage order."""
    for name in STAGE_ORDER:
        click.echo(name)


if __name__ == "__main__":
    main()
