from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
import torch

from ppm_peft.eventlog import Case, Event, EventLog
from ppm_peft.model import BackboneConfig, HeadConfig, InputLayerConfig, init_model

T0 = datetime(2021, 3, 1, tzinfo=timezone.utc)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def make_case(cid: str, acts, offsets) -> Case:
    return Case(cid, [Event(a, T0 + timedelta(seconds=float(s))) for a, s in zip(acts, offsets)])


def make_log(spec) -> EventLog:
    """``spec``: list of (case_id, activities, second offsets)."""
    return EventLog([make_case(*row) for row in spec])


def tiny_model(vocab=10, dim=8, blocks=2, kind="transformer", tasks=("NA", "RT"), seed=0, dropout=0.0, heads=2, max_len=16):
    return init_model(
        InputLayerConfig(vocab, dim),
        BackboneConfig(kind, blocks, dim, heads, 4, max_len, dropout),
        HeadConfig(vocab, tasks),
        seed,
    )


def random_batch(vocab, b=3, length=6, seed=0, lengths=None):
    from ppm_peft.encoding import EncodedTrace, collate

    rng = np.random.default_rng(seed)
    lengths = lengths or [int(rng.integers(2, length + 1)) for _ in range(b)]
    traces = [
        EncodedTrace(
            f"c{i}",
            rng.integers(3, vocab, n),
            rng.normal(size=(n, 2)).astype(np.float32),
            rng.integers(1, vocab, n),
            rng.normal(size=n).astype(np.float32),
        )
        for i, n in enumerate(lengths)
    ]
    return collate(traces)


def random_toy_log(rng: np.random.Generator, n_cases=None, n_acts=4) -> EventLog:
    """Small log with integer-second timestamps, so ties between cases are common."""
    n_cases = n_cases or int(rng.integers(2, 25))
    cases = []
    for i in range(n_cases):
        n = int(rng.integers(1, 7))
        start = int(rng.integers(0, 50))
        gaps = rng.integers(0, 10, n - 1)
        offsets = np.concatenate([[start], start + np.cumsum(gaps)])
        acts = [f"a{int(k)}" for k in rng.integers(0, n_acts, n)]
        cases.append(make_case(f"c{i:03d}", acts, offsets))
    return EventLog(cases)


def brute_force_split(log: EventLog, fraction: float):
    """Reference split by exhaustive search over candidate instants."""
    n = len(log.cases)
    starts = sorted({c.start for c in log.cases})
    # latest start with at least fraction * n cases starting at or after it
    tau = max(s for s in starts if sum(c.start >= s for c in log.cases) >= fraction * n - 1e-9)
    member = {}
    for c in log.cases:
        member[c.id] = "test" if c.start >= tau else ("train" if c.end < tau else "dropped")
    return tau, member


def block_param_count(d: int, ff_mult: int) -> int:
    """Closed-form size of one pre-norm transformer block."""
    h = ff_mult * d
    return 4 * (d * d + d) + (d * h + h) + (h * d + d) + 2 * (d + d)


def io_param_count(v: int, e: int, f_num: int = 2, d: int | None = None, tasks=("NA", "RT")) -> int:
    d = e if d is None else d
    n = v * e + f_num * e  # embedding + bias-free numeric projection
    if "NA" in tasks:
        n += d * v + v
    if "RT" in tasks:
        n += d + 1
    return n


def lora_param_count(r: int, shapes) -> int:
    """r(m + n) per adapted m x n matrix."""
    return sum(r * (m + n) for m, n in shapes)


def memo_grammar():
    """Zero-jitter grammar whose first activity fixes the whole remaining trace."""
    from ppm_peft.synthetic import ProcessGrammar

    paths = {"p1": ["a", "b", "c"], "p2": ["b", "a", "d", "c"], "p3": ["d", "d", "a"], "p4": ["c", "b", "b", "a", "d"]}
    durations = {"p1": [60, 0], "p2": [3600, 0], "p3": [600, 0], "p4": [7200, 0],
                 "a": [120, 0], "b": [1800, 0], "c": [300, 0], "d": [86400, 0]}
    rows = []
    for p, acts in paths.items():
        rows.append(["s0", p, f"{p}_0", 0.25])
        for i, a in enumerate(acts):
            rows.append([f"{p}_{i}", a, f"{p}_{i + 1}" if i + 1 < len(acts) else "end", 1.0])
    return ProcessGrammar.from_dict({"start": "s0", "end": "end", "transitions": rows, "durations": durations})


def encoded_log(log, max_len=None):
    from ppm_peft.encoding import encode_log
    from ppm_peft.eventlog import build_vocab, fit_log_stats

    vocab = build_vocab(log)
    return vocab, encode_log(log, vocab, fit_log_stats(log), max_len)
