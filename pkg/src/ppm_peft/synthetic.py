"""Event logs sampled from stochastic process grammars with known optimal accuracy.

Grammar files are JSON::

    {
      "start": "s0",
      "end": "end",
      "transitions": [["s0", "register", "s1", 1.0], ...],   # (state, activity, next, prob)
      "durations": {"register": [3600, 900], ...}           # activity -> (mean s, jitter s)
    }

An event's timestamp is the previous timestamp (or the case start) plus a
duration drawn uniformly from ``[mean - jitter, mean + jitter]``, rounded to
whole seconds and clamped at 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import GrammarError
from .eventlog import Case, Event, EventLog

ORIGIN = datetime(2020, 1, 1, tzinfo=timezone.utc)


@dataclass
class ProcessGrammar:
    start: str
    end: str
    transitions: dict[str, list[tuple[str, str, float]]]
    durations: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def states(self) -> list[str]:
        seen = [self.start]
        for s, outs in self.transitions.items():
            seen.append(s)
            seen.extend(nxt for _, nxt, _ in outs)
        seen.append(self.end)
        return list(dict.fromkeys(seen))

    @property
    def activities(self) -> list[str]:
        return sorted({a for outs in self.transitions.values() for a, _, _ in outs})

    def duration(self, activity: str) -> tuple[float, float]:
        return self.durations.get(activity, (60.0, 0.0))

    def validate(self) -> None:
        if self.end in self.transitions and self.transitions[self.end]:
            raise GrammarError(f"end state {self.end!r} must be absorbing")
        for s in self.states:
            if s == self.end:
                continue
            outs = self.transitions.get(s, [])
            if not outs:
                raise GrammarError(f"state {s!r} has no outgoing transitions")
            probs = [p for _, _, p in outs]
            if any(p <= 0 for p in probs):
                raise GrammarError(f"state {s!r} has a non-positive transition probability")
            if abs(sum(probs) - 1.0) > 1e-9:
                raise GrammarError(f"outgoing probabilities of {s!r} sum to {sum(probs)}")
        # reverse reachability from the end state
        reach = {self.end}
        changed = True
        while changed:
            changed = False
            for s, outs in self.transitions.items():
                if s not in reach and any(nxt in reach for _, nxt, _ in outs):
                    reach.add(s)
                    changed = True
        stuck = [s for s in self.states if s not in reach]
        if stuck:
            raise GrammarError(f"end state unreachable from {stuck}")

    def is_label_deterministic(self) -> bool:
        """True when each (state, activity) pair has a single successor."""
        return all(len({a for a, _, _ in outs}) == len(outs) for outs in self.transitions.values())

    def to_dict(self) -> dict:
        return {
            "start": self.start,
            "end": self.end,
            "transitions": [[s, a, n, p] for s, outs in self.transitions.items() for a, n, p in outs],
            "durations": {a: list(d) for a, d in self.durations.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProcessGrammar":
        unknown = set(d) - {"start", "end", "transitions", "durations"}
        if unknown:
            raise GrammarError(f"unknown grammar keys: {sorted(unknown)}")
        trans: dict[str, list[tuple[str, str, float]]] = {}
        for row in d["transitions"]:
            if len(row) != 4:
                raise GrammarError(f"transition rows need 4 fields (state, activity, next, prob), got {row}")
            s, a, n, p = row
            trans.setdefault(str(s), []).append((str(a), str(n), float(p)))
        durs = {str(a): (float(v[0]), float(v[1])) for a, v in d.get("durations", {}).items()}
        return cls(str(d["start"]), str(d["end"]), trans, durs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ProcessGrammar":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (KeyError, TypeError, ValueError) as exc:
            raise GrammarError(f"{path}: malformed grammar file ({exc})") from exc


def reference_grammar(name: str) -> ProcessGrammar:
    """One of the bundled grammars, ``"g1"`` or ``"g2"``."""
    text = resources.files("ppm_peft.data").joinpath(f"{name.lower()}.json").read_text()
    return ProcessGrammar.from_dict(json.loads(text))


def sample_trace(grammar: ProcessGrammar, rng: np.random.Generator, max_events: int = 10_000) -> list[tuple[str, float]]:
    """One random walk start -> end as ``(activity, duration_seconds)`` pairs."""
    out = []
    state = grammar.start
    while state != grammar.end:
        outs = grammar.transitions[state]
        k = rng.choice(len(outs), p=np.array([p for _, _, p in outs]) / sum(p for _, _, p in outs))
        act, state, _ = outs[k]
        mean, jitter = grammar.duration(act)
        d = rng.uniform(mean - jitter, mean + jitter) if jitter > 0 else mean
        out.append((act, float(max(1, round(d)))))
        if len(out) > max_events:
            raise GrammarError(f"trace exceeded {max_events} events")
    return out


def generate_log(
    grammar: ProcessGrammar,
    n_cases: int,
    seed: int = 0,
    horizon_seconds: float = 365 * 86400.0,
    origin: datetime = ORIGIN,
) -> EventLog:
    if n_cases < 1:
        raise GrammarError(f"n_cases must be >= 1, got {n_cases}")
    grammar.validate()
    cases = []
    for i in range(n_cases):
        rng = np.random.default_rng([int(seed), i])
        t = float(round(rng.uniform(0.0, horizon_seconds)))
        events = []
        for act, d in sample_trace(grammar, rng):
            t += d
            events.append(Event(act, origin + timedelta(seconds=t)))
        cases.append(Case(f"case_{i:06d}", events))
    return EventLog(cases)


def visit_mass(grammar: ProcessGrammar) -> dict[str, float]:
    """Expected number of visits to each non-end state per trace."""
    grammar.validate()
    states = [s for s in grammar.states if s != grammar.end]
    idx = {s: i for i, s in enumerate(states)}
    q = np.zeros((len(states), len(states)))
    for s, outs in grammar.transitions.items():
        for _, nxt, p in outs:
            if nxt != grammar.end:
                q[idx[s], idx[nxt]] += p
    e = np.zeros(len(states))
    e[idx[grammar.start]] = 1.0
    v = np.linalg.solve(np.eye(len(states)) - q.T, e)
    return {s: float(v[idx[s]]) for s in states}


def bayes_optimal_accuracy(grammar: ProcessGrammar, include_eos: bool = False) -> float:
    """Expected next-activity accuracy of the best predictor, per event.

    With ``include_eos=False`` every event, the first included, is a
    prediction made from the state it leaves. With ``include_eos=True`` the
    positions match teacher-forced evaluation: the first activity is given,
    and the final ``<eos>`` target is always predictable. Both need the
    state to be recoverable from the activity prefix.
    """
    if not grammar.is_label_deterministic():
        raise GrammarError("optimal accuracy needs a label-deterministic grammar")
    v = visit_mass(grammar)
    best = {s: max(p for _, _, p in grammar.transitions[s]) for s in v}
    expected_len = sum(v.values())
    if include_eos:
        hits = sum((v[s] - (s == grammar.start)) * best[s] for s in v) + 1.0
    else:
        hits = sum(v[s] * best[s] for s in v)
    return hits / expected_len


def optimal_predictions(grammar: ProcessGrammar, activities: list[str]) -> list[str | None]:
    """Teacher-forced argmax predictions after each event (``None`` means ``<eos>``)."""
    state = grammar.start
    preds = []
    for a in activities:
        state = next(n for act, n, _ in grammar.transitions[state] if act == a)
        if state == grammar.end:
            preds.append(None)
        else:
            preds.append(max(grammar.transitions[state], key=lambda t: t[2])[0])
    return preds
