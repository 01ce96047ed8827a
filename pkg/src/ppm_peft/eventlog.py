"""Event-log ingestion, preprocessing and the chronological train/test split."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from dateutil.parser import isoparse

from .errors import DataError

REQUIRED_COLUMNS = ("case_id", "activity", "timestamp")
TIME_FEATURES = ("dt_prev", "dt_start")
RT_TARGET = "remaining_time"

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
SPECIALS = (PAD, EOS, UNK)
PAD_IDX, EOS_IDX, UNK_IDX = 0, 1, 2


@dataclass(frozen=True)
class Event:
    activity: str
    timestamp: datetime

    def __post_init__(self):
        if not self.activity:
            raise DataError("event activity must be non-empty")


@dataclass
class Case:
    id: str
    events: list[Event]

    def __len__(self) -> int:
        return len(self.events)

    @property
    def start(self) -> datetime:
        return self.events[0].timestamp

    @property
    def end(self) -> datetime:
        return self.events[-1].timestamp

    @property
    def activities(self) -> list[str]:
        return [e.activity for e in self.events]


@dataclass
class EventLog:
    cases: list[Case]
    activity_set: set[str] = field(default_factory=set)

    def __post_init__(self):
        ids = [c.id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate case ids in event log")
        self.activity_set = {e.activity for c in self.cases for e in c.events}

    def __len__(self) -> int:
        return len(self.cases)

    @property
    def n_events(self) -> int:
        return sum(len(c) for c in self.cases)

    def summary(self) -> dict:
        lengths = np.array([len(c) for c in self.cases], dtype=float)
        return {
            "cases": len(self.cases),
            "events": int(lengths.sum()) if len(lengths) else 0,
            "activities": len(self.activity_set),
            "trace_length_mean": float(lengths.mean()) if len(lengths) else 0.0,
            "trace_length_std": float(lengths.std()) if len(lengths) else 0.0,
        }

    def subset(self, ids) -> "EventLog":
        keep = set(ids)
        return EventLog([c for c in self.cases if c.id in keep])


def parse_timestamp(text: str) -> datetime:
    """ISO-8601 to an aware datetime; naive values are taken as UTC."""
    ts = isoparse(text.strip())
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts


def format_timestamp(ts: datetime) -> str:
    return ts.isoformat()


def _sorted_case(case_id: str, rows: list[tuple[int, Event]]) -> Case:
    # stable sort keeps file order on equal timestamps
    rows.sort(key=lambda r: (r[1].timestamp, r[0]))
    return Case(case_id, [e for _, e in rows])


def load_csv(path) -> EventLog:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing column(s): {', '.join(missing)}")
        grouped: dict[str, list[tuple[int, Event]]] = {}
        # row numbers count the header as row 1
        for rowno, row in enumerate(reader, start=2):
            try:
                ts = parse_timestamp(row["timestamp"] or "")
            except (ValueError, OverflowError) as exc:
                raise DataError(f"{path}: row {rowno}: unparseable timestamp {row['timestamp']!r}") from exc
            if not row["activity"]:
                raise DataError(f"{path}: row {rowno}: empty activity")
            grouped.setdefault(row["case_id"], []).append((rowno, Event(row["activity"], ts)))
    if not grouped:
        raise DataError(f"{path}: no event rows")
    return EventLog([_sorted_case(cid, rows) for cid, rows in grouped.items()])


def write_csv(log: EventLog, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REQUIRED_COLUMNS)
        for c in log.cases:
            for e in c.events:
                w.writerow((c.id, e.activity, format_timestamp(e.timestamp)))


def filter_short_cases(log: EventLog, min_events: int = 2) -> EventLog:
    return EventLog([c for c in log.cases if len(c) >= min_events])


def _seconds(case: Case) -> np.ndarray:
    t0 = case.events[0].timestamp
    return np.array([(e.timestamp - t0).total_seconds() for e in case.events], dtype=np.float64)


def derive_time_features(case: Case) -> tuple[np.ndarray, np.ndarray]:
    """Per-event ``[dt_prev, dt_start]`` (n x 2, seconds) and remaining time (n,)."""
    t = _seconds(case)
    dt_prev = np.diff(t, prepend=t[0])
    feats = np.stack([dt_prev, t], axis=1)
    remaining = t[-1] - t
    return feats, remaining


@dataclass
class FeatureStats:
    """Population mean/std per numeric column, fitted on one split."""

    mean: dict[str, float]
    std: dict[str, float]
    fitted_on: str = "train"

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "fitted_on": self.fitted_on}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(dict(d["mean"]), dict(d["std"]), d.get("fitted_on", "train"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "FeatureStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_zscore(columns: dict[str, np.ndarray], fitted_on: str = "train") -> FeatureStats:
    mean, std = {}, {}
    for name, values in columns.items():
        v = np.asarray(values, dtype=np.float64)
        mean[name] = float(v.mean()) if v.size else 0.0
        std[name] = float(v.std()) if v.size else 0.0
    return FeatureStats(mean, std, fitted_on)


def apply_zscore(values: np.ndarray, stats: FeatureStats, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    sd = stats.std[name]
    if sd == 0.0:
        return np.zeros_like(v)
    return (v - stats.mean[name]) / sd


def fit_log_stats(log: EventLog, fitted_on: str = "train") -> FeatureStats:
    """Stats for the time features and the remaining-time target of ``log``."""
    if not log.cases:
        raise DataError("cannot fit feature statistics on an empty log")
    feats, rts = zip(*(derive_time_features(c) for c in log.cases))
    f = np.concatenate(feats)
    columns = {name: f[:, i] for i, name in enumerate(TIME_FEATURES)}
    columns[RT_TARGET] = np.concatenate(rts)
    return fit_zscore(columns, fitted_on)


@dataclass
class Split:
    train: EventLog
    test: EventLog
    dropped: list[str]
    split_time: datetime

    def manifest_rows(self) -> list[tuple[str, str]]:
        rows = [(c.id, "train") for c in self.train.cases]
        rows += [(c.id, "test") for c in self.test.cases]
        rows += [(cid, "dropped") for cid in self.dropped]
        return rows

    def write_manifest(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("case_id", "partition"))
            w.writerows(self.manifest_rows())


def read_manifest(path) -> dict[str, str]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return {row["case_id"]: row["partition"] for row in csv.DictReader(fh)}


def unbiased_split(log: EventLog, test_fraction: float = 0.2) -> Split:
    """Chronological split that drops cases running across the split instant.

    The split instant is the latest case start such that at least
    ``test_fraction`` of all cases start at or after it. Cases ending before
    it train, cases starting at or after it test, the rest are dropped.
    """
    n = len(log.cases)
    if n < 2:
        raise DataError(f"unbiased split needs at least 2 cases, got {n}")
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    k = max(1, math.ceil(round(test_fraction * n, 9)))
    starts = sorted((c.start for c in log.cases), reverse=True)
    tau = starts[k - 1]
    train, test, dropped = [], [], []
    for c in log.cases:
        if c.start >= tau:
            test.append(c)
        elif c.end < tau:
            train.append(c)
        else:
            dropped.append(c.id)
    return Split(EventLog(train), EventLog(test), dropped, tau)


def chronological_holdout(log: EventLog, fraction: float = 0.1) -> tuple[EventLog, EventLog]:
    """Split off the last ``fraction`` of cases by start time (at least one)."""
    if len(log.cases) < 2:
        raise DataError("need at least 2 training cases to carve a validation set")
    ordered = sorted(log.cases, key=lambda c: (c.start, c.id))
    k = min(len(ordered) - 1, max(1, math.ceil(round(fraction * len(ordered), 9))))
    return EventLog(ordered[:-k]), EventLog(ordered[-k:])


class Vocab:
    """Activity label <-> index map with the three special tokens first."""

    def __init__(self, labels):
        self.itos = list(SPECIALS) + sorted(set(labels))
        self.stoi = {s: i for i, s in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def labels(self) -> list[str]:
        return self.itos[len(SPECIALS):]

    def index(self, label: str) -> int:
        return self.stoi.get(label, UNK_IDX)

    def encode(self, labels) -> list[int]:
        return [self.index(a) for a in labels]

    def decode(self, indices) -> list[str]:
        return [self.itos[int(i)] for i in indices]

    def as_dict(self) -> dict[str, int]:
        return dict(self.stoi)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"labels": self.labels}, indent=2))

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(json.loads(Path(path).read_text())["labels"])


def build_vocab(train: EventLog) -> Vocab:
    if not train.cases:
        raise DataError("cannot build a vocabulary from an empty training log")
    return Vocab(train.activity_set)
