"""Run configuration, data preparation, end-to-end runs and the grid runner."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

from .encoding import EncodedTrace, encode_log
from .errors import ConfigError, DataError, UserError
from .eventlog import (
    EventLog,
    FeatureStats,
    Split,
    Vocab,
    build_vocab,
    chronological_holdout,
    filter_short_cases,
    fit_log_stats,
    load_csv,
    parse_timestamp,
    read_manifest,
    unbiased_split,
    write_csv,
)
from .model import BackboneConfig, HeadConfig, InputLayerConfig, Model, init_model, load_checkpoint, transplant_backbone
from .peft import FreezeConfig, LoraConfig, PeftPartition, apply_peft, count_params
from .synthetic import ProcessGrammar, generate_log, reference_grammar
from .training import TrainConfig, TrainReport, evaluate, train

# -- strict config parsing ---------------------------------------------------


def _strict(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed {sorted(names)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DataSection:
    csv_path: str | None = None
    grammar_path: str | None = None
    n_cases: int | None = None
    test_fraction: float = 0.2
    horizon_days: float = 365.0
    max_len: int | None = None

    def __post_init__(self):
        if (self.csv_path is None) == (self.grammar_path is None):
            raise ConfigError("data: give exactly one of csv_path or grammar_path")
        if self.grammar_path is not None and not self.n_cases:
            raise ConfigError("data: grammar_path needs n_cases")


@dataclass
class InputSection:
    embed_dim: int | None = None
    proj_dim: int | None = None
    fusion: str = "sum"


@dataclass
class HeadsSection:
    tasks: list[str] | None = None


@dataclass
class ModelSection:
    input: InputSection = field(default_factory=InputSection)
    backbone: BackboneConfig | None = None
    heads: HeadsSection = field(default_factory=HeadsSection)


@dataclass
class OutputSection:
    directory: str = "runs/out"


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection | None = None
    model: ModelSection = field(default_factory=ModelSection)
    peft: FreezeConfig | LoraConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputSection = field(default_factory=OutputSection)
    # raw peft section as given, kept for round-tripping
    peft_raw: dict | None = None

    @property
    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed + 2)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": None if self.data is None else dataclasses.asdict(self.data),
            "model": {
                "input": dataclasses.asdict(self.model.input),
                "backbone": None if self.model.backbone is None else dataclasses.asdict(self.model.backbone),
                "heads": dataclasses.asdict(self.model.heads),
            },
            "peft": self.peft_raw,
            "train": {k: v for k, v in dataclasses.asdict(self.train).items() if k != "seed"},
            "output": dataclasses.asdict(self.output),
        }


def parse_peft(raw) -> FreezeConfig | LoraConfig | None:
    if raw is None or raw == "none" or raw == {"none": {}}:
        return None
    if not isinstance(raw, dict) or len(raw) != 1:
        raise ConfigError("peft: expected exactly one of {'freeze': {...}} or {'lora': {...}}")
    (kind, body), = raw.items()
    if kind == "freeze":
        body = dict(body or {})
        if "layers" in body:
            body["layers"] = tuple(body["layers"])
        return _strict(FreezeConfig, body, "peft.freeze")
    if kind == "lora":
        return _strict(LoraConfig, body, "peft.lora")
    if kind == "none":
        return None
    raise ConfigError(f"peft: unknown method {kind!r}; use 'freeze', 'lora' or 'none'")


def parse_run_config(raw: dict, require_data: bool = True) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {"seed", "data", "model", "peft", "train", "output"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}; allowed {sorted(top)}")
    model_raw = raw.get("model") or {}
    unknown = sorted(set(model_raw) - {"input", "backbone", "heads"})
    if unknown:
        raise ConfigError(f"model: unknown key(s) {unknown}")
    if "seed" in (raw.get("train") or {}):
        raise ConfigError("train.seed is not allowed; set the top-level seed")
    model = ModelSection(
        input=_strict(InputSection, model_raw.get("input"), "model.input"),
        backbone=None if model_raw.get("backbone") is None else _strict(BackboneConfig, model_raw["backbone"], "model.backbone"),
        heads=_strict(HeadsSection, model_raw.get("heads"), "model.heads"),
    )
    data = None if raw.get("data") is None else _strict(DataSection, raw["data"], "data")
    if require_data and data is None:
        raise ConfigError("data section is required")
    return RunConfig(
        seed=int(raw.get("seed", 0)),
        data=data,
        model=model,
        peft=parse_peft(raw.get("peft")),
        train=_strict(TrainConfig, raw.get("train"), "train"),
        output=_strict(OutputSection, raw.get("output"), "output"),
        peft_raw=copy.deepcopy(raw.get("peft")),
    )


def load_run_config(path, require_data: bool = True) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(raw, require_data)


# -- data preparation ---------------------------------------------------------


@dataclass
class PreparedData:
    vocab: Vocab
    stats: FeatureStats
    split: Split
    train_log: EventLog
    val_log: EventLog
    train: list[EncodedTrace]
    val: list[EncodedTrace]
    test: list[EncodedTrace]
    raw_summary: dict | None = None

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.split.write_manifest(d / "manifest.csv")
        self.vocab.save(d / "vocab.json")
        self.stats.save(d / "stats.json")
        write_csv(self.split.train, d / "train.csv")
        write_csv(self.split.test, d / "test.csv")
        summary = {
            "raw": self.raw_summary,
            "train": self.split.train.summary(),
            "test": self.split.test.summary(),
            "dropped": len(self.split.dropped),
            "split_time": self.split.split_time.isoformat(),
            "vocab_size": len(self.vocab),
        }
        (d / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def _from_split(split: Split, val_fraction: float, max_len: int | None, vocab=None, stats=None, raw_summary=None) -> PreparedData:
    if not split.train.cases:
        raise DataError("training partition is empty after the unbiased split")
    vocab = vocab or build_vocab(split.train)
    stats = stats or fit_log_stats(split.train)
    train_log, val_log = chronological_holdout(split.train, val_fraction)
    return PreparedData(
        vocab,
        stats,
        split,
        train_log,
        val_log,
        encode_log(train_log, vocab, stats, max_len),
        encode_log(val_log, vocab, stats, max_len),
        encode_log(split.test, vocab, stats, max_len),
        raw_summary,
    )


def prepare_data(log: EventLog, test_fraction: float = 0.2, val_fraction: float = 0.1, max_len: int | None = None) -> PreparedData:
    """Short-case filter, unbiased split, train-fitted vocab/stats, encoding."""
    raw = log.summary()
    log = filter_short_cases(log)
    if not log.cases:
        raise DataError("no cases with at least two events; nothing to train on")
    return _from_split(unbiased_split(log, test_fraction), val_fraction, max_len, raw_summary=raw)


def load_data_dir(directory, val_fraction: float = 0.1, max_len: int | None = None) -> PreparedData:
    d = Path(directory)
    for name in ("manifest.csv", "vocab.json", "stats.json", "train.csv", "test.csv"):
        if not (d / name).exists():
            raise DataError(f"{d}: missing {name}; run the preprocess command first")
    manifest = read_manifest(d / "manifest.csv")
    summary = json.loads((d / "summary.json").read_text()) if (d / "summary.json").exists() else {}
    split = Split(
        load_csv(d / "train.csv"),
        _load_optional(d / "test.csv"),
        [cid for cid, part in manifest.items() if part == "dropped"],
        parse_timestamp(summary["split_time"]) if "split_time" in summary else None,
    )
    return _from_split(split, val_fraction, max_len, Vocab.load(d / "vocab.json"), FeatureStats.load(d / "stats.json"), summary.get("raw"))


def _load_optional(path: Path) -> EventLog:
    try:
        return load_csv(path)
    except DataError:
        # an empty partition is written as a header-only file
        return EventLog([])


def load_log(section: DataSection, seed: int) -> EventLog:
    if section.csv_path is not None:
        if not Path(section.csv_path).exists():
            raise DataError(f"event log {section.csv_path} not found")
        return load_csv(section.csv_path)
    return generate_log(load_grammar(section.grammar_path), section.n_cases, seed, section.horizon_days * 86400.0)


def load_grammar(spec: str) -> ProcessGrammar:
    """A grammar file path, or ``builtin:g1`` / ``builtin:g2``."""
    if spec.startswith("builtin:"):
        return reference_grammar(spec.split(":", 1)[1])
    if not Path(spec).exists():
        raise DataError(f"grammar file {spec} not found")
    return ProcessGrammar.load(spec)


def prepare_from_config(cfg: RunConfig) -> PreparedData:
    return prepare_data(load_log(cfg.data, cfg.seed), cfg.data.test_fraction, cfg.train.val_fraction, cfg.data.max_len)


# -- runs -----------------------------------------------------------------------


@dataclass
class RunResult:
    model: Model
    partition: PeftPartition
    report: TrainReport
    val_metrics: dict
    test_metrics: dict | None
    counts: dict


def _tasks(cfg: RunConfig) -> tuple[str, ...]:
    tasks = tuple(cfg.model.heads.tasks) if cfg.model.heads.tasks else cfg.train.tasks
    return tasks


def build_model(cfg: RunConfig, vocab_size: int, backbone: Model | None = None) -> Model:
    """Fresh model, or fresh I/O layers around a transplanted backbone."""
    bb_cfg = backbone.backbone_cfg if backbone is not None else (cfg.model.backbone or BackboneConfig())
    if backbone is not None and cfg.model.backbone is not None and cfg.model.backbone != bb_cfg:
        raise ConfigError("model.backbone differs from the checkpoint's backbone; omit it when fine-tuning")
    default_e = backbone.backbone.in_dim if backbone is not None else bb_cfg.model_dim
    inp = cfg.model.input
    e = inp.embed_dim or default_e
    input_cfg = InputLayerConfig(vocab_size=vocab_size, embed_dim=e, num_numeric=2, proj_dim=inp.proj_dim or e, fusion=inp.fusion)
    head_cfg = HeadConfig(vocab_size, _tasks(cfg))
    if backbone is not None:
        return transplant_backbone(backbone, input_cfg, head_cfg, seed=cfg.seed)
    return init_model(input_cfg, bb_cfg, head_cfg, seed=cfg.seed)


def run(cfg: RunConfig, data: PreparedData, backbone: Model | None = None) -> RunResult:
    model = build_model(cfg, len(data.vocab), backbone)
    partition = apply_peft(model, cfg.peft, seed=cfg.seed + 1)
    report = train(model, partition, data.train, data.val, cfg.train_config)
    val = evaluate(model, data.val)
    test = evaluate(model, data.test) if data.test else None
    return RunResult(model, partition, report, val, test, count_params(model, partition))


# -- grid search ----------------------------------------------------------------

GRID_METRICS = (
    "val_loss",
    "val_na_acc",
    "val_rt_mse",
    "test_na_acc",
    "test_na_acc_no_eos",
    "test_rt_mse",
    "trainable_params",
    "total_params",
    "best_epoch",
    "epochs",
    "seconds",
)
DEFAULT_BUDGET = {"scratch": 25, "finetune": 10}


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(d.get(k), dict):
            d[k] = {}
        d = d[k]
    d[keys[-1]] = copy.deepcopy(value)


def expand_space(space: dict) -> list[tuple[dict, dict]]:
    """Cartesian product of ``space["grid"]`` applied onto ``space["base"]``.

    Returns ``(overrides, resolved_config_dict)`` pairs in a fixed order.
    """
    unknown = sorted(set(space) - {"base", "grid", "backbone"})
    if unknown:
        raise ConfigError(f"grid space: unknown key(s) {unknown}")
    grid = space.get("grid") or {}
    keys = list(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid space: {k!r} needs a non-empty list of values")
    out = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cfg = copy.deepcopy(space.get("base") or {})
        overrides = dict(zip(keys, values))
        for k, v in overrides.items():
            _set_path(cfg, k, v)
        out.append((overrides, cfg))
    if not out:
        raise ConfigError("grid space is empty")
    return out


def config_id(resolved: dict) -> str:
    return hashlib.sha1(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:12]


def _grid_job(resolved: dict, data: PreparedData, backbone_path: str | None, budget: dict) -> dict:
    t0 = time.perf_counter()
    cfg = parse_run_config(resolved, require_data=False)
    protocol = "finetune" if backbone_path else "scratch"
    cfg.train = dataclasses.replace(cfg.train, epochs=int(budget[protocol]))
    backbone = load_checkpoint(backbone_path) if backbone_path else None
    res = run(cfg, data, backbone)
    tc = cfg.train_config
    test = res.test_metrics or {}
    best = [r for r in res.report.rows if r["split"] == "val" and r["epoch"] == res.report.best_epoch]
    return {
        "val_loss": tc.selection_loss(best[0]) if best else None,
        "val_na_acc": res.val_metrics["na_acc"],
        "val_rt_mse": res.val_metrics["rt_mse"],
        "test_na_acc": test.get("na_acc"),
        "test_na_acc_no_eos": test.get("na_acc_no_eos"),
        "test_rt_mse": test.get("rt_mse"),
        "trainable_params": res.counts["trainable"],
        "total_params": res.counts["total"],
        "best_epoch": res.report.best_epoch,
        "epochs": cfg.train.epochs,
        "seconds": time.perf_counter() - t0,
    }


def _grid_columns(keys) -> list[str]:
    return ["config_id", "protocol", *keys, *GRID_METRICS, "status", "error"]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_grid_rows(rows: list[dict], keys, path, append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with path.open("a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(_grid_columns(keys))
        for r in rows:
            w.writerow(
                [r["config_id"], r["protocol"]]
                + [json.dumps(r["overrides"][k], sort_keys=True) for k in keys]
                + [_cell(r.get(m)) for m in GRID_METRICS]
                + [r["status"], r.get("error") or ""]
            )


def read_grid_rows(path) -> list[dict]:
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fixed = {"config_id", "protocol", "status", "error", *GRID_METRICS}
        keys = [c for c in reader.fieldnames if c not in fixed]
        for r in reader:
            row = {
                "config_id": r["config_id"],
                "protocol": r["protocol"],
                "overrides": {k: json.loads(r[k]) for k in keys},
                "status": r["status"],
                "error": r["error"] or None,
            }
            for m in GRID_METRICS:
                v = r[m]
                if v == "":
                    row[m] = None
                elif m in ("trainable_params", "total_params", "best_epoch", "epochs"):
                    row[m] = int(v)
                else:
                    row[m] = float(v)
            rows.append(row)
    return rows


def rank_rows(rows: list[dict]) -> list[dict]:
    def key(r):
        ok = r["status"] == "ok" and r["val_loss"] is not None
        return (0 if ok else 1, r["val_loss"] if ok else 0.0, r["config_id"])

    return sorted(rows, key=key)


def grid_search(
    space: dict,
    data: PreparedData,
    budget: dict | None = None,
    out_dir=None,
    jobs: int = 1,
) -> list[dict]:
    """Train and evaluate every configuration of ``space``; rank by validation loss.

    Rows are appended to ``out_dir/grid_results.csv`` as runs finish, and
    configurations already recorded there with status ``ok`` are skipped.
    Failed runs are recorded with their error and the grid continues.
    """
    budget = {**DEFAULT_BUDGET, **(budget or {})}
    backbone_path = space.get("backbone")
    entries = expand_space(space)
    keys = list((space.get("grid") or {}).keys())
    protocol = "finetune" if backbone_path else "scratch"
    results_path = Path(out_dir) / "grid_results.csv" if out_dir is not None else None
    done: dict[str, dict] = {}
    if results_path is not None:
        results_path.parent.mkdir(parents=True, exist_ok=True)
        if results_path.exists():
            done = {r["config_id"]: r for r in read_grid_rows(results_path) if r["status"] == "ok"}
    pending = []
    for overrides, resolved in entries:
        cid = config_id({"config": resolved, "protocol": protocol, "epochs": budget[protocol]})
        if cid not in done:
            pending.append((cid, overrides, resolved))

    def record(cid, overrides, metrics=None, error=None):
        row = {"config_id": cid, "protocol": protocol, "overrides": overrides, **(metrics or {})}
        row["status"] = "ok" if error is None else "failed"
        row["error"] = error
        if results_path is not None:
            write_grid_rows([row], keys, results_path, append=True)
        done[cid] = row

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_grid_job, r, data, backbone_path, budget): (cid, o) for cid, o, r in pending}
            for fut in as_completed(futures):
                cid, overrides = futures[fut]
                try:
                    record(cid, overrides, fut.result())
                except Exception as exc:  # noqa: BLE001 - recorded, grid continues
                    record(cid, overrides, error=f"{type(exc).__name__}: {exc}")
    else:
        for cid, overrides, resolved in pending:
            try:
                record(cid, overrides, _grid_job(resolved, data, backbone_path, budget))
            except (UserError, RuntimeError, ValueError) as exc:
                record(cid, overrides, error=f"{type(exc).__name__}: {exc}")
    ids = [config_id({"config": r, "protocol": protocol, "epochs": budget[protocol]}) for _, r in entries]
    ranked = rank_rows([done[c] for c in ids if c in done])
    if out_dir is not None:
        write_grid_rows(ranked, keys, Path(out_dir) / "grid_ranked.csv")
    return ranked
