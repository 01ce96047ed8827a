"""Teacher-forced trace encoding and padded batching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError
from .eventlog import (
    EOS_IDX,
    PAD_IDX,
    RT_TARGET,
    TIME_FEATURES,
    Case,
    EventLog,
    FeatureStats,
    Vocab,
    apply_zscore,
    derive_time_features,
)


@dataclass
class EncodedTrace:
    case_id: str
    x_act: np.ndarray  # (n,) int64
    x_num: np.ndarray  # (n, F_num) float32
    y_act: np.ndarray  # (n,) int64, shifted left with <eos> appended
    y_rt: np.ndarray  # (n,) float32, normalized remaining time

    @property
    def n(self) -> int:
        return len(self.x_act)


@dataclass
class EncodedBatch:
    x_act: torch.Tensor  # (B, L) long
    x_num: torch.Tensor  # (B, L, F) float32
    y_act: torch.Tensor  # (B, L) long
    y_rt: torch.Tensor  # (B, L) float32
    mask: torch.Tensor  # (B, L) bool

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.x_act.shape)


def encode_trace(case: Case, vocab: Vocab, stats: FeatureStats, max_len: int | None = None) -> EncodedTrace:
    feats, remaining = derive_time_features(case)
    x_act = np.array(vocab.encode(case.activities), dtype=np.int64)
    x_num = np.stack([apply_zscore(feats[:, i], stats, name) for i, name in enumerate(TIME_FEATURES)], axis=1)
    y_act = np.append(x_act[1:], EOS_IDX).astype(np.int64)
    y_rt = apply_zscore(remaining, stats, RT_TARGET)
    if max_len is not None and len(x_act) > max_len:
        # keep the tail so the <eos> target survives
        x_act, x_num, y_act, y_rt = x_act[-max_len:], x_num[-max_len:], y_act[-max_len:], y_rt[-max_len:]
    return EncodedTrace(case.id, x_act, x_num.astype(np.float32), y_act, y_rt.astype(np.float32))


def encode_log(log: EventLog, vocab: Vocab, stats: FeatureStats, max_len: int | None = None) -> list[EncodedTrace]:
    return [encode_trace(c, vocab, stats, max_len) for c in log.cases]


def collate(traces: list[EncodedTrace]) -> EncodedBatch:
    if not traces:
        raise DataError("cannot collate an empty batch")
    b = len(traces)
    length = max(t.n for t in traces)
    f = traces[0].x_num.shape[1]
    x_act = np.full((b, length), PAD_IDX, dtype=np.int64)
    y_act = np.full((b, length), PAD_IDX, dtype=np.int64)
    x_num = np.zeros((b, length, f), dtype=np.float32)
    y_rt = np.zeros((b, length), dtype=np.float32)
    mask = np.zeros((b, length), dtype=bool)
    for i, t in enumerate(traces):
        x_act[i, : t.n] = t.x_act
        y_act[i, : t.n] = t.y_act
        x_num[i, : t.n] = t.x_num
        y_rt[i, : t.n] = t.y_rt
        mask[i, : t.n] = True
    return EncodedBatch(
        torch.from_numpy(x_act),
        torch.from_numpy(x_num),
        torch.from_numpy(y_act),
        torch.from_numpy(y_rt),
        torch.from_numpy(mask),
    )


def make_batches(
    traces: list[EncodedTrace],
    batch_size: int,
    shuffle_seed: int | None = None,
) -> list[EncodedBatch]:
    """Group traces into padded batches; ``shuffle_seed=None`` keeps input order."""
    if not traces:
        raise DataError("no traces to batch")
    if batch_size < 1:
        raise DataError(f"batch size must be >= 1, got {batch_size}")
    order = np.arange(len(traces))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(traces))
    return [collate([traces[j] for j in order[i : i + batch_size]]) for i in range(0, len(order), batch_size)]
