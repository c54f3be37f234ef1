"""Config-driven pipeline: ordered stages over a working directory.

Every stage reads named input artifacts, writes outputs atomically
(temp file + rename), and appends a manifest record with content hashes.
A rerun with unchanged parameters and inputs is skipped; ``force`` reruns.
A single lock file serializes concurrent runs against one working
directory.
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
from filelock import FileLock

from .checkpoint import sha256_file
from .encoder import BiEncoder, EncoderConfig, make_model
from .experiments import (
    EXPERIMENTS,
    MissingArtifactError,
    load_annotations,
    run_experiment,
    split_holdout,
)
from .figures import render_history, render_report_figures
from .index import (
    RetrievalParams,
    build_index,
    load_index,
    predict_posting,
    serialize_index,
    tune_gamma,
)
from .llm import make_client
from .prompts import DecodingParams
from .sentence_filter import FilterConfig, FilterModel, save_labeled_jsonl, train_filter
from .syngen import (
    DatasetCounts,
    QcParams,
    SyntheticDataset,
    build_dataset,
    dedup,
    load_samples_jsonl,
    save_samples_jsonl,
)
from .taxonomy import load_taxonomy
from .toydata import toy_postings
from .training import TrainConfig, load_history_csv, save_history_csv, train


class ConfigError(ValueError):
    """Unreadable or invalid configuration."""


class ChecksumError(RuntimeError):
    """An input artifact no longer matches the hash recorded when it was written."""


DEFAULT_CONFIG: dict = {
    "seed": 42,
    "paths": {"workdir": "runs/default", "taxonomy": "", "annotations": "", "postings": ""},
    "client": {"kind": "stub", "seed": 0, "paraphrase_rate": 0.5, "endpoint": "", "model": "",
               "api_key_env": "SKILLFORGE_API_KEY", "timeout": 60.0, "max_retries": 3},
    "generate": {"per_skill": 10, "constrained_pairs": 20, "random_pairs": 20, "per_pair": 4,
                 "none_count": 150, "decoding": "default", "retries": 2},
    "qc": {"dedup_cutoff": 0.95, "diversity_n": 4, "diversity_max_repeats": 3,
           "resample_budget": 3, "ambiguity_sim": 0.9, "ambiguity_neighbors": 20},
    "filter": {"epochs": 20, "learning_rate": 0.5, "batch_size": 64, "l2": 1e-4,
               "hash_dim": 16384, "ngram_lo": 1, "ngram_hi": 3, "val_fraction": 0.2,
               "min_recall": 0.8, "eval_fraction": 0.25, "positives": "combined"},
    "encoder": {"hidden_size": 48, "lstm_hidden": 64, "attention_dim": 48, "embed_dim": 64,
                "pooling": "attention", "use_bilstm": True, "token_mode": "char",
                "max_len": 128, "freeze_backbone": False},
    "train": {"margin": 0.5, "num_negatives": 5, "learning_rate": 0.005, "batch_size": 32,
              "epochs": 12, "optimizer": "adam", "holdout_fraction": 0.2,
              "label_refresh_batches": 1},
    "retrieval": {"budget": 50, "gamma_grid_start": 0.0, "gamma_grid_stop": 0.95,
                  "gamma_grid_step": 0.05, "sentences_per_posting": 3,
                  "relevance_threshold": -1.0},
    "evaluate": {"experiments": ["filter_eval", "synthetic_holdout", "end_to_end", "robustness"],
                 "noise_rates": [0.0, 0.1, 0.2]},
}


def _deep_merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


@dataclass
class PipelineConfig:
    data: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def section(self, name: str) -> dict:
        return dict(self.data.get(name, {}))

    def path(self, key: str) -> Path | None:
        """Resolve a [paths] entry against the config file's directory."""
        raw = self.data["paths"].get(key, "")
        if not raw:
            return None
        path = Path(raw)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def workdir(self) -> Path:
        path = self.path("workdir")
        if path is None:
            raise ConfigError("paths.workdir must be set")
        return path


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, overlaid by the TOML file, overlaid by CLI overrides."""
    data = DEFAULT_CONFIG
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with path.open("rb") as fh:
                file_data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        data = _deep_merge(data, file_data)
        base_dir = path.parent.resolve()
    if overrides:
        data = _deep_merge(data, overrides)
    return PipelineConfig(data=data, base_dir=base_dir)


class Workspace:
    """Fixed artifact layout under one working directory."""

    def __init__(self, workdir: Path):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)

    @property
    def dataset_raw(self) -> Path:
        return self.workdir / "dataset_raw.jsonl"

    @property
    def build_report(self) -> Path:
        return self.workdir / "build_report.json"

    @property
    def dataset(self) -> Path:
        return self.workdir / "dataset.jsonl"

    @property
    def dedup_report(self) -> Path:
        return self.workdir / "dedup_report.json"

    @property
    def filter_ckpt(self) -> Path:
        return self.workdir / "filter.ckpt"

    @property
    def filter_eval_data(self) -> Path:
        return self.workdir / "filter_eval.jsonl"

    @property
    def encoder_ckpt(self) -> Path:
        return self.workdir / "encoder.ckpt"

    @property
    def holdout(self) -> Path:
        return self.workdir / "holdout.jsonl"

    @property
    def history_csv(self) -> Path:
        return self.workdir / "history.csv"

    @property
    def index_file(self) -> Path:
        return self.workdir / "index.bin"

    @property
    def gamma_file(self) -> Path:
        return self.workdir / "gamma.json"

    @property
    def dev_postings(self) -> Path:
        return self.workdir / "dev_postings.jsonl"

    @property
    def test_postings(self) -> Path:
        return self.workdir / "test_postings.jsonl"

    @property
    def predictions(self) -> Path:
        return self.workdir / "predictions.jsonl"

    @property
    def reports_dir(self) -> Path:
        return self.workdir / "reports"

    @property
    def manifest_path(self) -> Path:
        return self.workdir / "manifest.jsonl"

    @property
    def lock_path(self) -> Path:
        return self.workdir / ".lock"


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


class Manifest:
    def __init__(self, path: Path):
        self.path = path
        self.records: list[dict] = []
        if path.exists():
            with path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self.records.append(json.loads(line))

    def last(self, stage: str) -> dict | None:
        for record in reversed(self.records):
            if record["stage"] == stage:
                return record
        return None

    def recorded_output_hash(self, path: Path) -> str | None:
        key = str(path)
        for record in reversed(self.records):
            if key in record.get("outputs", {}):
                return record["outputs"][key]
        return None

    def append(self, record: dict) -> None:
        self.records.append(record)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


@dataclass
class StageResult:
    stage: str
    skipped: bool
    outputs: list[Path]
    elapsed: float


# --- stage bodies -------------------------------------------------------------


def _client_from(config: PipelineConfig):
    section = config.section("client")
    kind = section.pop("kind", "stub")
    return make_client(kind, **section), kind


def _decoding_from(config: PipelineConfig) -> DecodingParams:
    name = config.section("generate").get("decoding", "default")
    if name == "default":
        return DecodingParams()
    if name == "high_diversity":
        return DecodingParams.high_diversity()
    raise ConfigError(f"generate.decoding must be 'default' or 'high_diversity', got {name!r}")


def _qc_from(config: PipelineConfig) -> QcParams:
    section = config.section("qc")
    return QcParams(
        dedup_cutoff=float(section["dedup_cutoff"]),
        diversity_n=int(section["diversity_n"]),
        diversity_max_repeats=int(section["diversity_max_repeats"]),
        resample_budget=int(section["resample_budget"]),
        ambiguity_sim=float(section["ambiguity_sim"]),
        ambiguity_neighbors=int(section["ambiguity_neighbors"]),
    )


def _encoder_config_from(config: PipelineConfig) -> EncoderConfig:
    section = config.section("encoder")
    return EncoderConfig(
        hidden_size=int(section["hidden_size"]),
        lstm_hidden=int(section["lstm_hidden"]),
        attention_dim=int(section["attention_dim"]),
        embed_dim=int(section["embed_dim"]),
        pooling=section["pooling"],
        use_bilstm=bool(section["use_bilstm"]),
        token_mode=section["token_mode"],
        max_len=int(section["max_len"]),
        freeze_backbone=bool(section["freeze_backbone"]),
        seed=config.seed,
    )


def _train_config_from(config: PipelineConfig) -> TrainConfig:
    section = config.section("train")
    return TrainConfig(
        margin=float(section["margin"]),
        num_negatives=int(section["num_negatives"]),
        learning_rate=float(section["learning_rate"]),
        batch_size=int(section["batch_size"]),
        epochs=int(section["epochs"]),
        optimizer=section["optimizer"],
        seed=config.seed,
        label_refresh_batches=int(section["label_refresh_batches"]),
    )


def _gamma_grid_from(config: PipelineConfig) -> list[float]:
    section = config.section("retrieval")
    start = float(section["gamma_grid_start"])
    stop = float(section["gamma_grid_stop"])
    step = float(section["gamma_grid_step"])
    if step <= 0 or stop < start:
        raise ConfigError("retrieval gamma grid must have step > 0 and stop >= start")
    count = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 10) for i in range(count)]


def _taxonomy_path(config: PipelineConfig) -> Path:
    path = config.path("taxonomy")
    if path is None:
        raise ConfigError("paths.taxonomy must be set")
    if not path.exists():
        raise MissingArtifactError(f"taxonomy file does not exist: {path}")
    return path


def stage_generate(ws: Workspace, config: PipelineConfig) -> list[Path]:
    taxonomy = load_taxonomy(_taxonomy_path(config))
    client, kind = _client_from(config)
    section = config.section("generate")
    counts = DatasetCounts(
        per_skill=int(section["per_skill"]),
        constrained_pairs=int(section["constrained_pairs"]),
        random_pairs=int(section["random_pairs"]),
        per_pair=int(section["per_pair"]),
        none_count=int(section["none_count"]),
    )
    dataset, report = build_dataset(
        taxonomy,
        client,
        counts,
        decoding=_decoding_from(config),
        qc=_qc_from(config),
        rng=np.random.default_rng(config.seed),
        source=kind,
    )
    tmp = ws.dataset_raw.with_suffix(".tmp")
    dataset.save_jsonl(tmp)
    os.replace(tmp, ws.dataset_raw)
    atomic_write_json(ws.build_report, report.to_dict())
    return [ws.dataset_raw, ws.build_report]


def stage_dedup(ws: Workspace, config: PipelineConfig) -> list[Path]:
    samples = load_samples_jsonl(ws.dataset_raw)
    kept, removed = dedup(samples, cutoff=float(config.section("qc")["dedup_cutoff"]))
    tmp = ws.dataset.with_suffix(".tmp")
    save_samples_jsonl(kept, tmp)
    os.replace(tmp, ws.dataset)
    atomic_write_json(ws.dedup_report, {"kept": len(kept), "removed": removed})
    return [ws.dataset, ws.dedup_report]


def stage_train_filter(ws: Workspace, config: PipelineConfig) -> list[Path]:
    dataset = SyntheticDataset.load_jsonl(ws.dataset)
    section = config.section("filter")
    positive_samples = dataset.positives if section["positives"] == "combined" else dataset.singles
    positives = [s.text for s in positive_samples]
    negatives = [s.text for s in dataset.nones]
    rng = np.random.default_rng(config.seed)
    eval_fraction = float(section["eval_fraction"])

    def carve(texts: list[str]) -> tuple[list[str], list[str]]:
        order = rng.permutation(len(texts))
        n_eval = max(1, int(round(eval_fraction * len(texts)))) if len(texts) > 3 else 0
        eval_idx = set(order[:n_eval].tolist())
        return (
            [t for i, t in enumerate(texts) if i not in eval_idx],
            [t for i, t in enumerate(texts) if i in eval_idx],
        )

    train_pos, eval_pos = carve(positives)
    train_neg, eval_neg = carve(negatives)
    filter_config = FilterConfig(
        seed=config.seed,
        epochs=int(section["epochs"]),
        learning_rate=float(section["learning_rate"]),
        batch_size=int(section["batch_size"]),
        l2=float(section["l2"]),
        hash_dim=int(section["hash_dim"]),
        ngram_lo=int(section["ngram_lo"]),
        ngram_hi=int(section["ngram_hi"]),
        val_fraction=float(section["val_fraction"]),
        min_recall=float(section["min_recall"]),
    )
    model = train_filter(train_pos, train_neg, filter_config)
    atomic_write_bytes(ws.filter_ckpt, model.to_bytes())
    labeled = [(t, 1) for t in eval_pos] + [(t, 0) for t in eval_neg]
    tmp = ws.filter_eval_data.with_suffix(".tmp")
    save_labeled_jsonl(labeled, tmp)
    os.replace(tmp, ws.filter_eval_data)
    return [ws.filter_ckpt, ws.filter_eval_data]


def stage_train_encoder(ws: Workspace, config: PipelineConfig) -> list[Path]:
    dataset = SyntheticDataset.load_jsonl(ws.dataset)
    taxonomy = load_taxonomy(_taxonomy_path(config))
    fraction = float(config.section("train")["holdout_fraction"])
    train_part, holdout = split_holdout(list(dataset.positives), fraction, config.seed)
    corpus = [s.text for s in train_part] + [s.description for s in taxonomy]
    model = make_model(_encoder_config_from(config), corpus)
    val_queries = [(s.text, frozenset(s.skill_ids)) for s in holdout][:64]
    history = train(model, train_part, taxonomy, _train_config_from(config), val_queries)
    atomic_write_bytes(ws.encoder_ckpt, model.checkpoint_bytes())
    tmp = ws.holdout.with_suffix(".tmp")
    save_samples_jsonl(holdout, tmp)
    os.replace(tmp, ws.holdout)
    tmp = ws.history_csv.with_suffix(".tmp")
    save_history_csv(history, tmp)
    os.replace(tmp, ws.history_csv)
    return [ws.encoder_ckpt, ws.holdout, ws.history_csv]


def stage_build_index(ws: Workspace, config: PipelineConfig) -> list[Path]:
    model = BiEncoder.load(ws.encoder_ckpt)
    taxonomy = load_taxonomy(_taxonomy_path(config))
    index = build_index(model, taxonomy)
    atomic_write_bytes(ws.index_file, serialize_index(index))
    return [ws.index_file]


def _split_postings(records: list[dict], seed: int) -> tuple[list[dict], list[dict]]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_dev = max(1, len(records) // 2)
    dev = [records[i] for i in order[:n_dev]]
    test = [records[i] for i in order[n_dev:]] or list(dev)
    return dev, test


def _write_postings(path: Path, records: list[dict]) -> None:
    lines = [
        json.dumps(
            {"posting_id": r["posting_id"], "text": r["text"], "skill_ids": list(r["skill_ids"])},
            ensure_ascii=False,
            separators=(",", ":"),
        )
        for r in records
    ]
    atomic_write_text(path, "\n".join(lines) + "\n" if lines else "")


def stage_tune_gamma(ws: Workspace, config: PipelineConfig) -> list[Path]:
    annotations_path = config.path("annotations")
    if annotations_path is not None and annotations_path.exists():
        records = load_annotations(annotations_path)
    else:
        # Self-contained runs: build pseudo-postings from held-out samples.
        holdout = load_samples_jsonl(ws.holdout)
        nones = SyntheticDataset.load_jsonl(ws.dataset).nones
        records = toy_postings(
            holdout,
            list(nones),
            sentences_per_posting=int(config.section("retrieval")["sentences_per_posting"]),
            seed=config.seed,
        )
    if not records:
        raise MissingArtifactError("no dev postings available for gamma tuning")
    dev, test = _split_postings(records, config.seed)
    _write_postings(ws.dev_postings, dev)
    _write_postings(ws.test_postings, test)
    model = BiEncoder.load(ws.encoder_ckpt)
    index = load_index(ws.index_file)
    filter_model = FilterModel.load(ws.filter_ckpt)
    budget = int(config.section("retrieval")["budget"])
    golds = [frozenset(r["skill_ids"]) for r in dev]

    def predictions_at(gamma: float):
        params = RetrievalParams(budget=budget, threshold=gamma)
        return [
            predict_posting(filter_model, model, index, r["text"], params=params).ranked
            for r in dev
        ]

    selection = tune_gamma(predictions_at, golds, grid=_gamma_grid_from(config))
    atomic_write_json(
        ws.gamma_file,
        {
            "gamma": selection.gamma,
            "dev_f1_at_5": selection.f1,
            "all_zero": selection.all_zero,
            "budget": budget,
        },
    )
    return [ws.gamma_file, ws.dev_postings, ws.test_postings]


def _load_posting_texts(path: Path) -> list[dict]:
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "posting_id" not in record or "text" not in record:
                raise ValueError(f"{path}: line {line_no}: need 'posting_id' and 'text'")
            records.append(record)
    return records


def stage_predict(ws: Workspace, config: PipelineConfig, posting_file: Path | None = None) -> list[Path]:
    source = posting_file or config.path("postings")
    if source is None or not Path(source).exists():
        source = ws.test_postings
    if not Path(source).exists():
        raise MissingArtifactError(
            f"no posting file to predict on (looked for {source}); "
            "pass --posting-file or configure paths.postings"
        )
    records = _load_posting_texts(Path(source))
    model = BiEncoder.load(ws.encoder_ckpt)
    index = load_index(ws.index_file)
    filter_model = FilterModel.load(ws.filter_ckpt)
    gamma = json.loads(ws.gamma_file.read_text(encoding="utf-8"))["gamma"]
    section = config.section("retrieval")
    params = RetrievalParams(budget=int(section["budget"]), threshold=float(gamma))
    relevance = float(section["relevance_threshold"])
    tau = None if relevance < 0 else relevance
    lines = []
    for record in records:
        prediction = predict_posting(
            filter_model, model, index, record["text"], relevance_threshold=tau, params=params
        )
        lines.append(
            json.dumps(
                {
                    "posting_id": record["posting_id"],
                    "skill_ids": [skill_id for skill_id, _ in prediction.ranked],
                    "per_sentence": [
                        {"text": s.text, "skills": [[skill_id, sim] for skill_id, sim in s.skills]}
                        for s in prediction.sentences
                    ],
                },
                ensure_ascii=False,
                separators=(",", ":"),
            )
        )
    atomic_write_text(ws.predictions, "\n".join(lines) + "\n" if lines else "")
    return [ws.predictions]


def stage_evaluate(ws: Workspace, config: PipelineConfig) -> list[Path]:
    requested = config.section("evaluate")["experiments"]
    unknown = [name for name in requested if name not in EXPERIMENTS]
    if unknown:
        raise ConfigError(f"unknown experiments in config: {unknown}")
    outputs: list[Path] = []
    gamma = None
    if ws.gamma_file.exists():
        gamma = json.loads(ws.gamma_file.read_text(encoding="utf-8"))["gamma"]
    for name in requested:
        exp_config: dict = {
            "seed": config.seed,
            "taxonomy": str(_taxonomy_path(config)),
            "dataset": str(ws.dataset),
            "encoder": str(ws.encoder_ckpt),
            "filter": str(ws.filter_ckpt),
            "index": str(ws.index_file),
            "holdout": str(ws.holdout),
            "labeled": str(ws.filter_eval_data),
            "postings": str(ws.test_postings),
            "budget": int(config.section("retrieval")["budget"]),
            "rates": [float(r) for r in config.section("evaluate")["noise_rates"]],
            "encoder_config": _encoder_config_from(config),
            "train_config": _train_config_from(config),
        }
        if name == "end_to_end" and gamma is not None:
            exp_config["gamma"] = float(gamma)
        report = run_experiment(name, exp_config)
        out_dir = ws.reports_dir / name
        report_path, csv_path = report.save(out_dir)
        outputs.extend([report_path, csv_path])
        outputs.extend(render_report_figures(report, out_dir / "figures"))
    if ws.history_csv.exists():
        history = load_history_csv(ws.history_csv)
        if history:
            outputs.extend(render_history(history, ws.reports_dir))
    return outputs


# --- orchestration --------------------------------------------------------------


@dataclass(frozen=True)
class StageDef:
    name: str
    inputs: Callable[[Workspace, PipelineConfig], list[Path]]
    params_sections: tuple[str, ...]
    run: Callable[[Workspace, PipelineConfig], list[Path]]


def _external_inputs(config: PipelineConfig) -> list[Path]:
    return [_taxonomy_path(config)]


STAGES: dict[str, StageDef] = {
    "generate": StageDef(
        "generate",
        lambda ws, c: _external_inputs(c),
        ("client", "generate", "qc"),
        stage_generate,
    ),
    "dedup": StageDef(
        "dedup", lambda ws, c: [ws.dataset_raw], ("qc",), stage_dedup
    ),
    "train-filter": StageDef(
        "train-filter", lambda ws, c: [ws.dataset], ("filter",), stage_train_filter
    ),
    "train-encoder": StageDef(
        "train-encoder",
        lambda ws, c: [ws.dataset] + _external_inputs(c),
        ("encoder", "train"),
        stage_train_encoder,
    ),
    "build-index": StageDef(
        "build-index",
        lambda ws, c: [ws.encoder_ckpt] + _external_inputs(c),
        ("encoder",),
        stage_build_index,
    ),
    "tune-gamma": StageDef(
        "tune-gamma",
        lambda ws, c: [ws.encoder_ckpt, ws.index_file, ws.filter_ckpt, ws.holdout, ws.dataset],
        ("retrieval",),
        stage_tune_gamma,
    ),
    "predict": StageDef(
        "predict",
        lambda ws, c: [ws.encoder_ckpt, ws.index_file, ws.filter_ckpt, ws.gamma_file],
        ("retrieval",),
        stage_predict,
    ),
    "evaluate": StageDef(
        "evaluate",
        lambda ws, c: [ws.dataset, ws.encoder_ckpt, ws.filter_ckpt, ws.index_file,
                       ws.holdout, ws.filter_eval_data] + _external_inputs(c),
        ("retrieval", "evaluate"),
        stage_evaluate,
    ),
}

STAGE_ORDER = (
    "generate",
    "dedup",
    "train-filter",
    "train-encoder",
    "build-index",
    "tune-gamma",
    "predict",
    "evaluate",
)

def _producer_of(ws: Workspace) -> dict[str, str]:
    return {
        str(ws.dataset_raw): "generate",
        str(ws.build_report): "generate",
        str(ws.dataset): "dedup",
        str(ws.dedup_report): "dedup",
        str(ws.filter_ckpt): "train-filter",
        str(ws.filter_eval_data): "train-filter",
        str(ws.encoder_ckpt): "train-encoder",
        str(ws.holdout): "train-encoder",
        str(ws.history_csv): "train-encoder",
        str(ws.index_file): "build-index",
        str(ws.gamma_file): "tune-gamma",
        str(ws.dev_postings): "tune-gamma",
        str(ws.test_postings): "tune-gamma",
    }


def _params_hash(config: PipelineConfig, stage: StageDef, input_hashes: dict[str, str]) -> str:
    from .checkpoint import sha256_bytes

    payload = {
        "seed": config.seed,
        "sections": {name: config.section(name) for name in stage.params_sections},
        "inputs": input_hashes,
    }
    return sha256_bytes(json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8"))


def run_stage(
    name: str, config: PipelineConfig, force: bool = False, posting_file: Path | None = None
) -> StageResult:
    """Run one stage with locking, checksum-verified inputs, and skip logic."""
    if name not in STAGES:
        raise ValueError(f"unknown stage {name!r}; expected one of {list(STAGES)}")
    stage = STAGES[name]
    ws = Workspace(config.workdir)
    with FileLock(str(ws.lock_path)):
        manifest = Manifest(ws.manifest_path)
        producers = _producer_of(ws)
        inputs = stage.inputs(ws, config)
        input_hashes: dict[str, str] = {}
        for path in inputs:
            if not Path(path).exists():
                producer = producers.get(str(path))
                hint = f"; run the '{producer}' stage first" if producer else ""
                raise MissingArtifactError(f"stage '{name}' requires missing artifact {path}{hint}")
            digest = sha256_file(path)
            recorded = manifest.recorded_output_hash(Path(path))
            if recorded is not None and recorded != digest:
                raise ChecksumError(
                    f"artifact {path} no longer matches the manifest hash recorded by "
                    f"'{producers.get(str(path), 'an earlier stage')}'"
                )
            input_hashes[str(path)] = digest
        params_hash = _params_hash(config, stage, input_hashes)
        last = manifest.last(name)
        if not force and last is not None and last.get("params_hash") == params_hash:
            outputs = last.get("outputs", {})
            if outputs and all(
                Path(p).exists() and sha256_file(p) == h for p, h in outputs.items()
            ):
                return StageResult(
                    stage=name, skipped=True, outputs=[Path(p) for p in outputs], elapsed=0.0
                )
        start = time.perf_counter()
        if name == "predict":
            produced = stage_predict(ws, config, posting_file=posting_file)
        else:
            produced = stage.run(ws, config)
        elapsed = time.perf_counter() - start
        manifest.append(
            {
                "stage": name,
                "status": "ok",
                "params_hash": params_hash,
                "inputs": input_hashes,
                "outputs": {str(p): sha256_file(p) for p in produced},
                "seed": config.seed,
                "elapsed": round(elapsed, 4),
            }
        )
        return StageResult(stage=name, skipped=False, outputs=list(produced), elapsed=elapsed)


def run_all(config: PipelineConfig, force: bool = False) -> list[StageResult]:
    return [run_stage(name, config, force=force) for name in STAGE_ORDER]
