"""Training loop, losses, metrics and curve export."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .encoding import EncodedBatch, EncodedTrace, make_batches
from .errors import ConfigError, TrainingError
from .eventlog import EOS_IDX
from .model import Model
from .peft import PeftPartition, count_params
from .substrate import AdamState, adam_step, clip_grad_norm, cross_entropy, mse

TASK_MODES = ("NA", "RT", "MULTI")
CURVE_COLUMNS = ("epoch", "split", "na_loss", "rt_loss", "na_acc", "rt_mse", "seconds")
RT_UNITS = "z-score of remaining seconds (train statistics)"


@dataclass
class TrainConfig:
    task_mode: str = "MULTI"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    w_na: float = 1.0
    w_rt: float = 1.0
    seed: int = 0
    grad_clip: float | None = None
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.task_mode not in TASK_MODES:
            raise ConfigError(f"task_mode must be one of {TASK_MODES}, got {self.task_mode!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.w_na < 0 or self.w_rt < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.task_mode == "MULTI" and self.w_na == 0 and self.w_rt == 0:
            raise ConfigError("MULTI mode needs at least one positive loss weight")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")

    @property
    def tasks(self) -> tuple[str, ...]:
        return ("NA", "RT") if self.task_mode == "MULTI" else (self.task_mode,)

    def selection_loss(self, row: dict) -> float:
        """Validation criterion: the task's own loss, or the unweighted sum."""
        if self.task_mode == "NA":
            return row["na_loss"]
        if self.task_mode == "RT":
            return row["rt_loss"]
        return row["na_loss"] + row["rt_loss"]


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    task_mode: str = "MULTI"
    total_params: int = 0
    trainable_params: int = 0
    wall_clock_hours: float = 0.0
    best_epoch: int | None = None
    rt_units: str = RT_UNITS

    def curve(self, split: str, column: str) -> list:
        return [r[column] for r in self.rows if r["split"] == split]

    def without_timing(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock_hours")
        d["rows"] = [{k: v for k, v in r.items() if k != "seconds"} for r in self.rows]
        return d

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def from_json(cls, path) -> "TrainReport":
        return cls(**json.loads(Path(path).read_text()))


def joint_loss(
    outputs: dict[str, torch.Tensor],
    batch: EncodedBatch,
    task_mode: str = "MULTI",
    w_na: float = 1.0,
    w_rt: float = 1.0,
) -> tuple[torch.Tensor, dict[str, torch.Tensor | None]]:
    """Weighted CE + MSE over real positions.

    Single-task modes and zero weights drop the corresponding term from the
    total; the component itself is still returned when the head exists.
    """
    parts: dict[str, torch.Tensor | None] = {"na": None, "rt": None}
    if "na_logits" in outputs:
        parts["na"] = cross_entropy(outputs["na_logits"], batch.y_act, batch.mask)
    if "rt_pred" in outputs:
        parts["rt"] = mse(outputs["rt_pred"].squeeze(-1), batch.y_rt.to(outputs["rt_pred"].dtype), batch.mask)
    terms = []
    if task_mode in ("NA", "MULTI") and w_na > 0:
        if parts["na"] is None:
            raise ConfigError(f"{task_mode} mode needs an NA head")
        terms.append(parts["na"] if w_na == 1.0 else w_na * parts["na"])
    if task_mode in ("RT", "MULTI") and w_rt > 0:
        if parts["rt"] is None:
            raise ConfigError(f"{task_mode} mode needs an RT head")
        terms.append(parts["rt"] if w_rt == 1.0 else w_rt * parts["rt"])
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, parts


class _Accumulator:
    """Position-weighted running sums for one split."""

    def __init__(self):
        self.n = 0
        self.n_no_eos = 0
        self.na_loss = 0.0
        self.rt_loss = 0.0
        self.correct = 0
        self.correct_no_eos = 0
        self.has_na = False
        self.has_rt = False

    @torch.no_grad()
    def add(self, outputs, parts, batch: EncodedBatch) -> None:
        n = int(batch.mask.sum())
        self.n += n
        if parts["na"] is not None:
            self.has_na = True
            self.na_loss += float(parts["na"]) * n
            hit = (outputs["na_logits"].argmax(-1) == batch.y_act) & batch.mask
            not_eos = batch.mask & (batch.y_act != EOS_IDX)
            self.correct += int(hit.sum())
            self.correct_no_eos += int((hit & not_eos).sum())
            self.n_no_eos += int(not_eos.sum())
        if parts["rt"] is not None:
            self.has_rt = True
            self.rt_loss += float(parts["rt"]) * n

    def metrics(self) -> dict:
        n = max(self.n, 1)
        return {
            "na_loss": self.na_loss / n if self.has_na else None,
            "rt_loss": self.rt_loss / n if self.has_rt else None,
            "na_acc": self.correct / n if self.has_na else None,
            "na_acc_no_eos": self.correct_no_eos / max(self.n_no_eos, 1) if self.has_na else None,
            "rt_mse": self.rt_loss / n if self.has_rt else None,
            "n_positions": self.n,
        }


def _mode_for(tasks) -> str:
    return "MULTI" if len(tasks) == 2 else tasks[0]


def _val(t):
    return None if t is None else float(t.detach())


@torch.no_grad()
def evaluate(model: Model, data: list[EncodedTrace], batch_size: int = 256) -> dict:
    """NA accuracy (``<eos>`` included, plus a variant without) and RT MSE.

    Runs with dropout disabled and restores the previous train/eval mode.
    """
    was_training = model.training
    model.eval()
    acc = _Accumulator()
    try:
        if data:
            for batch in make_batches(data, batch_size):
                out = model.forward_batch(batch)
                _, parts = joint_loss(out, batch, _mode_for(model.head_cfg.tasks))
                acc.add(out, parts, batch)
    finally:
        model.train(was_training)
    return acc.metrics()


def _row(epoch: int, split: str, m: dict, seconds: float) -> dict:
    return {
        "epoch": epoch,
        "split": split,
        "na_loss": m["na_loss"],
        "rt_loss": m["rt_loss"],
        "na_acc": m["na_acc"],
        "rt_mse": m["rt_mse"],
        "seconds": seconds,
    }


def _check_heads(model: Model, cfg: TrainConfig) -> None:
    missing = [t for t in cfg.tasks if t not in model.head_cfg.tasks]
    if missing:
        raise ConfigError(f"task_mode {cfg.task_mode} needs head(s) {missing}; model has {model.head_cfg.tasks}")


def train(
    model: Model,
    partition: PeftPartition | None,
    train_data: list[EncodedTrace],
    val_data: list[EncodedTrace],
    cfg: TrainConfig,
) -> TrainReport:
    """Adam over the trainable registry entries; keeps the best-validation weights.

    Deterministic for a fixed ``cfg.seed``: batch order and dropout masks
    come from seeded generators private to this run.
    """
    if not train_data:
        raise TrainingError("no training traces; check the split and short-case filter")
    _check_heads(model, cfg)
    registry = model.registry
    counts = count_params(model, partition)
    state = AdamState()
    model.dropout_generator = torch.Generator().manual_seed(int(cfg.seed))
    report = TrainReport(
        task_mode=cfg.task_mode, total_params=counts["total"], trainable_params=counts["trainable"]
    )
    best_loss, best_state = math.inf, None
    t_start = time.perf_counter()
    model.train()
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            acc = _Accumulator()
            for bi, batch in enumerate(make_batches(train_data, cfg.batch_size, shuffle_seed=cfg.seed * 100_003 + epoch)):
                out = model.forward_batch(batch)
                loss, parts = joint_loss(out, batch, cfg.task_mode, cfg.w_na, cfg.w_rt)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {bi}: na={_val(parts['na'])}, rt={_val(parts['rt'])}"
                    )
                for _, p in registry.items():
                    p.grad = None
                loss.backward()
                if cfg.grad_clip is not None:
                    clip_grad_norm(registry, cfg.grad_clip)
                adam_step(registry, {n: p.grad for n, p in registry.items()}, state, cfg.learning_rate)
                acc.add(out, parts, batch)
            report.rows.append(_row(epoch, "train", acc.metrics(), time.perf_counter() - t0))
            t0 = time.perf_counter()
            if val_data:
                vm = evaluate(model, val_data)
                vrow = _row(epoch, "val", vm, time.perf_counter() - t0)
                report.rows.append(vrow)
                sel = cfg.selection_loss(vrow)
            else:
                sel = cfg.selection_loss(report.rows[-1])
            if sel < best_loss:
                best_loss, report.best_epoch = sel, epoch
                best_state = registry.snapshot()
    finally:
        model.dropout_generator = None
        for _, p in registry.items():
            p.grad = None
    if best_state is not None:
        with torch.no_grad():
            for name, p in registry.items():
                p.copy_(best_state[name])
    model.eval()
    report.wall_clock_hours = (time.perf_counter() - t_start) / 3600.0
    return report


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def export_curves(report: TrainReport | list[dict], path) -> None:
    rows = report.rows if isinstance(report, TrainReport) else report
    if not rows:
        raise TrainingError("report has no rows to export")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in CURVE_COLUMNS])


def read_curves(path) -> list[dict]:
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            row = {"epoch": int(r["epoch"]), "split": r["split"]}
            for c in CURVE_COLUMNS[2:]:
                row[c] = float(r[c]) if r[c] != "" else None
            rows.append(row)
    return rows
