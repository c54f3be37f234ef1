import json

import pytest
from click.testing import CliRunner

from skillforge.cli import main as cli_main
from skillforge.experiments import MissingArtifactError
from skillforge.pipeline import (
    DEFAULT_CONFIG,
    ChecksumError,
    ConfigError,
    Manifest,
    Workspace,
    atomic_write_json,
    atomic_write_text,
    load_config,
    run_all,
    run_stage,
)
from skillforge.taxonomy import Skill, SkillTaxonomy, save_taxonomy

TAX = SkillTaxonomy(
    [
        Skill("A1", "python", "Writes python services and scripts.", "GA", "software"),
        Skill("A2", "sql", "Designs sql schemas and queries.", "GA", "software"),
        Skill("A3", "docker", "Packages applications into docker containers.", "GA", "software"),
        Skill("B1", "welding", "Performs mig and tig welding work.", "GB", "trades"),
        Skill("B2", "forklift", "Operates forklift trucks in a warehouse.", "GB", "trades"),
        Skill("B3", "painting", "Prepares and paints interior walls.", "GB", "trades"),
    ]
)

TINY_TOML = """
seed = 11

[paths]
workdir = "../run"
taxonomy = "../taxonomy.csv"

[generate]
per_skill = 2
constrained_pairs = 1
random_pairs = 1
per_pair = 1
none_count = 6

[filter]
epochs = 2
hash_dim = 4096
min_recall = 0.5

[encoder]
hidden_size = 8
lstm_hidden = 8
attention_dim = 8
embed_dim = 8
max_len = 48

[train]
epochs = 1
num_negatives = 2
batch_size = 8
learning_rate = 0.01

[retrieval]
budget = 10
gamma_grid_start = 0.0
gamma_grid_stop = 0.4
gamma_grid_step = 0.2

[evaluate]
experiments = ["filter_eval", "synthetic_holdout"]
"""


@pytest.fixture(scope="module")
def project(tmp_path_factory):
    """Config file in its own subdirectory so relative paths prove their base."""
    root = tmp_path_factory.mktemp("pipeline")
    save_taxonomy(TAX, root / "taxonomy.csv")
    cfg_dir = root / "cfg"
    cfg_dir.mkdir()
    config_path = cfg_dir / "pipeline.toml"
    config_path.write_text(TINY_TOML, encoding="utf-8")
    return root, config_path


@pytest.fixture(scope="module")
def pipeline(project):
    """One full run of every stage; later tests reuse its artifacts."""
    root, config_path = project
    config = load_config(config_path)
    results = run_all(config)
    return config, Workspace(config.workdir), results


# --- configuration -----------------------------------------------------------------


def test_load_config_defaults():
    config = load_config()
    assert config.seed == DEFAULT_CONFIG["seed"]
    assert config.data["train"]["margin"] == 0.5
    assert config.path("taxonomy") is None


def test_load_config_overlays_file_then_overrides(project):
    _, config_path = project
    config = load_config(config_path)
    assert config.seed == 11
    assert config.data["train"]["epochs"] == 1
    # keys not named in the file keep their defaults
    assert config.data["train"]["margin"] == DEFAULT_CONFIG["train"]["margin"]
    assert config.data["client"]["kind"] == "stub"
    merged = load_config(config_path, overrides={"seed": 7, "train": {"epochs": 9}})
    assert merged.seed == 7
    assert merged.data["train"]["epochs"] == 9
    assert merged.data["train"]["batch_size"] == 8  # file value survives the override


def test_load_config_resolves_paths_against_config_dir(project):
    root, config_path = project
    config = load_config(config_path)
    assert config.workdir == config_path.parent.resolve() / ".." / "run"
    assert config.path("taxonomy") == config_path.parent.resolve() / ".." / "taxonomy.csv"
    assert config.path("taxonomy").exists()
    absolute = load_config(config_path, overrides={"paths": {"postings": "/tmp/p.jsonl"}})
    assert str(absolute.path("postings")) == "/tmp/p.jsonl"


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.toml")


def test_load_config_parse_error(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = [unclosed", encoding="utf-8")
    with pytest.raises(ConfigError, match="bad.toml"):
        load_config(bad)


def test_workdir_must_be_set():
    config = load_config(overrides={"paths": {"workdir": ""}})
    with pytest.raises(ConfigError, match="workdir"):
        _ = config.workdir


# --- workspace and manifest -------------------------------------------------------


def test_workspace_layout(tmp_path):
    ws = Workspace(tmp_path / "run")
    assert ws.workdir.is_dir()
    assert ws.dataset.name == "dataset.jsonl"
    assert ws.encoder_ckpt.parent == ws.workdir
    assert ws.reports_dir == ws.workdir / "reports"


def test_atomic_writes_leave_no_temp_files(tmp_path):
    target = tmp_path / "out" / "data.json"
    atomic_write_json(target, {"a": 1})
    atomic_write_text(target.with_name("note.txt"), "hello")
    assert json.loads(target.read_text(encoding="utf-8")) == {"a": 1}
    leftovers = [p for p in target.parent.iterdir() if p.name.startswith(".")]
    assert leftovers == []


def test_manifest_append_last_and_hash_lookup(tmp_path):
    path = tmp_path / "manifest.jsonl"
    manifest = Manifest(path)
    assert manifest.last("generate") is None
    manifest.append({"stage": "generate", "params_hash": "h1", "outputs": {"x": "d1"}})
    manifest.append({"stage": "dedup", "params_hash": "h2", "outputs": {"y": "d2"}})
    manifest.append({"stage": "generate", "params_hash": "h3", "outputs": {"x": "d3"}})
    assert manifest.last("generate")["params_hash"] == "h3"
    assert manifest.recorded_output_hash(tmp_path / "nowhere") is None

    reloaded = Manifest(path)
    assert len(reloaded.records) == 3
    from pathlib import Path

    assert reloaded.recorded_output_hash(Path("x")) == "d3"  # newest record wins


# --- stage orchestration ----------------------------------------------------------


def test_run_stage_unknown_name(project):
    _, config_path = project
    with pytest.raises(ValueError, match="unknown stage"):
        run_stage("mystery", load_config(config_path))


def test_missing_upstream_artifact_names_producer(project, tmp_path):
    _, config_path = project
    config = load_config(config_path, overrides={"paths": {"workdir": str(tmp_path / "fresh")}})
    with pytest.raises(MissingArtifactError, match="run the 'generate' stage first"):
        run_stage("dedup", config)


def test_run_all_produces_artifacts(pipeline):
    config, ws, results = pipeline
    assert [r.stage for r in results] == [
        "generate",
        "dedup",
        "train-filter",
        "train-encoder",
        "build-index",
        "tune-gamma",
        "predict",
        "evaluate",
    ]
    assert not any(r.skipped for r in results)
    for path in (
        ws.dataset_raw,
        ws.build_report,
        ws.dataset,
        ws.filter_ckpt,
        ws.filter_eval_data,
        ws.encoder_ckpt,
        ws.holdout,
        ws.history_csv,
        ws.index_file,
        ws.gamma_file,
        ws.dev_postings,
        ws.test_postings,
        ws.predictions,
        ws.manifest_path,
    ):
        assert path.exists(), f"missing {path.name}"
    gamma = json.loads(ws.gamma_file.read_text(encoding="utf-8"))
    assert set(gamma) == {"gamma", "dev_f1_at_5", "all_zero", "budget"}
    for name in ("filter_eval", "synthetic_holdout"):
        report_dir = ws.reports_dir / name
        assert (report_dir / "report.json").exists()
        assert (report_dir / "metrics.csv").exists()
        assert list((report_dir / "figures").glob("*.png"))
    assert (ws.reports_dir / "training_history.png").exists()


def test_predictions_schema(pipeline):
    _, ws, _ = pipeline
    lines = [l for l in ws.predictions.read_text(encoding="utf-8").splitlines() if l]
    assert lines
    for line in lines:
        record = json.loads(line)
        assert set(record) == {"posting_id", "skill_ids", "per_sentence"}
        assert isinstance(record["skill_ids"], list)
        for sentence in record["per_sentence"]:
            assert set(sentence) == {"text", "skills"}
            for skill_id, sim in sentence["skills"]:
                assert skill_id in TAX.ids
                assert -1.0 <= sim <= 1.0 + 1e-9


def test_manifest_records_every_stage(pipeline):
    _, ws, _ = pipeline
    manifest = Manifest(ws.manifest_path)
    stages = {r["stage"] for r in manifest.records}
    assert stages >= {"generate", "dedup", "train-encoder", "predict", "evaluate"}
    for record in manifest.records:
        assert record["status"] == "ok"
        assert len(record["params_hash"]) == 64
        assert all(len(h) == 64 for h in record["outputs"].values())


def test_rerun_is_skipped_when_unchanged(pipeline):
    config, _, _ = pipeline
    results = run_all(config)
    assert all(r.skipped for r in results)
    assert all(r.elapsed == 0.0 for r in results)


def test_force_reruns_stage(pipeline):
    config, _, _ = pipeline
    result = run_stage("build-index", config, force=True)
    assert not result.skipped


def test_parameter_change_triggers_rerun_of_dependent_stage_only(pipeline):
    config, _, _ = pipeline
    changed = load_config(
        config.base_dir / "pipeline.toml", overrides={"retrieval": {"budget": 9}}
    )
    assert run_stage("dedup", changed).skipped  # budget is not a dedup parameter
    result = run_stage("tune-gamma", changed)
    assert not result.skipped


def test_corrupted_artifact_raises_checksum_error(pipeline):
    config, ws, _ = pipeline
    original = ws.dataset.read_bytes()
    ws.dataset.write_bytes(original + b"\n")
    try:
        with pytest.raises(ChecksumError, match="'dedup'"):
            run_stage("train-filter", config)
    finally:
        ws.dataset.write_bytes(original)
    assert run_stage("train-filter", config).skipped


def test_predict_with_posting_file_override(pipeline):
    config, ws, _ = pipeline
    custom = ws.workdir / "custom_postings.jsonl"
    rows = [
        {"posting_id": "ext-1", "text": TAX.description_of("A1")},
        {"posting_id": "ext-2", "text": TAX.description_of("B1")},
    ]
    custom.write_text(
        "\n".join(json.dumps(r, ensure_ascii=False) for r in rows) + "\n", encoding="utf-8"
    )
    result = run_stage("predict", config, force=True, posting_file=custom)
    assert not result.skipped
    ids = [json.loads(l)["posting_id"] for l in ws.predictions.read_text().splitlines() if l]
    assert ids == ["ext-1", "ext-2"]


def test_predict_without_any_posting_source(project, tmp_path):
    from skillforge.pipeline import stage_predict

    _, config_path = project
    config = load_config(config_path, overrides={"paths": {"workdir": str(tmp_path / "empty")}})
    with pytest.raises(MissingArtifactError, match="posting"):
        stage_predict(Workspace(config.workdir), config)


# --- command line ------------------------------------------------------------------


def test_cli_stages_lists_order():
    result = CliRunner().invoke(cli_main, ["stages"])
    assert result.exit_code == 0
    assert result.output.splitlines() == [
        "generate",
        "dedup",
        "train-filter",
        "train-encoder",
        "build-index",
        "tune-gamma",
        "predict",
        "evaluate",
    ]


def test_cli_flags_accepted_before_and_after_subcommand(pipeline):
    config, _, _ = pipeline
    config_arg = str(config.base_dir / "pipeline.toml")
    after = CliRunner().invoke(cli_main, ["dedup", "-c", config_arg])
    assert after.exit_code == 0, after.output
    assert "skipped" in after.output
    before = CliRunner().invoke(cli_main, ["-c", config_arg, "dedup"])
    assert before.exit_code == 0, before.output
    assert "skipped" in before.output


def test_cli_run_all_up_to_date(pipeline):
    config, _, _ = pipeline
    result = CliRunner().invoke(cli_main, ["run-all", "-c", str(config.base_dir / "pipeline.toml")])
    assert result.exit_code == 0, result.output
    assert result.output.count("skipped") >= 6  # most stages are already current


def test_cli_index_alias(pipeline):
    config, _, _ = pipeline
    result = CliRunner().invoke(cli_main, ["index", "-c", str(config.base_dir / "pipeline.toml")])
    assert result.exit_code == 0, result.output
    assert "build-index" in result.output


def test_cli_evaluate_experiment_subset(pipeline):
    config, ws, _ = pipeline
    result = CliRunner().invoke(
        cli_main,
        ["evaluate", "-c", str(config.base_dir / "pipeline.toml"), "--experiment", "filter_eval"],
    )
    assert result.exit_code == 0, result.output
    assert (ws.reports_dir / "filter_eval" / "report.json").exists()


def test_cli_evaluate_rejects_unknown_experiment(pipeline):
    config, _, _ = pipeline
    result = CliRunner().invoke(
        cli_main,
        ["evaluate", "-c", str(config.base_dir / "pipeline.toml"), "--experiment", "bogus"],
    )
    assert result.exit_code != 0
    assert "bogus" in result.output


def test_cli_config_parse_error_is_a_clean_error(tmp_path):
    bad = tmp_path / "broken.toml"
    bad.write_text("seed = [", encoding="utf-8")
    errored = CliRunner().invoke(cli_main, ["dedup", "-c", str(bad)])
    assert errored.exit_code != 0
    assert "Error" in errored.output


def test_cli_missing_upstream_artifact_message(tmp_path):
    save_taxonomy(TAX, tmp_path / "taxonomy.csv")
    fresh = tmp_path / "override.toml"
    fresh.write_text(
        TINY_TOML.replace('workdir = "../run"', f'workdir = "{tmp_path / "nothing"}"').replace(
            'taxonomy = "../taxonomy.csv"', f'taxonomy = "{tmp_path / "taxonomy.csv"}"'
        ),
        encoding="utf-8",
    )
    missing = CliRunner().invoke(cli_main, ["dedup", "-c", str(fresh)])
    assert missing.exit_code != 0
    assert "run the 'generate' stage first" in missing.output
