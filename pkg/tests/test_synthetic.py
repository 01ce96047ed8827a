import math

import numpy as np
import pytest

from ppm_peft.errors import GrammarError
from ppm_peft.synthetic import (
    ProcessGrammar,
    bayes_optimal_accuracy,
    generate_log,
    optimal_predictions,
    reference_grammar,
    visit_mass,
)


def _grammar(rows, start="s0"):
    return ProcessGrammar.from_dict({"start": start, "end": "end", "transitions": rows})


LOOP = _grammar([["s0", "again", "s0", 0.7], ["s0", "stop", "end", 0.3]])
TWO_STATE = _grammar([
    ["s0", "a", "s1", 0.6], ["s0", "b", "s1", 0.4],
    ["s1", "c", "end", 0.9], ["s1", "d", "end", 0.1],
])


def enumerate_accuracy(grammar: ProcessGrammar, mass_cutoff: float = 1e-12) -> float:
    """Ratio of expected hits to expected length over all traces, by depth-first expansion."""
    hits = length = 0.0
    stack = [(grammar.start, 1.0, 0, 0)]
    while stack:
        state, p, h, n = stack.pop()
        if state == grammar.end:
            hits += p * h
            length += p * n
            continue
        if p < mass_cutoff:
            continue
        outs = grammar.transitions[state]
        best = max(range(len(outs)), key=lambda i: outs[i][2])
        for k, (_, nxt, q) in enumerate(outs):
            stack.append((nxt, p * q, h + (k == best), n + 1))
    return hits / length


@pytest.mark.parametrize("grammar, expected", [(LOOP, 0.7), (TWO_STATE, 0.75)])
def test_bayes_accuracy_worked_cases(grammar, expected):
    assert bayes_optimal_accuracy(grammar) == pytest.approx(expected, abs=1e-12)
    assert enumerate_accuracy(grammar) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("name", ["g1", "g2"])
def test_reference_grammars_match_enumeration(name):
    g = reference_grammar(name)
    g.validate()
    assert g.is_label_deterministic()
    assert bayes_optimal_accuracy(g) == pytest.approx(enumerate_accuracy(g), abs=1e-9)


def test_reference_grammar_values():
    assert bayes_optimal_accuracy(reference_grammar("g1")) == pytest.approx(0.971429, abs=1e-6)
    assert bayes_optimal_accuracy(reference_grammar("g2")) == pytest.approx(0.886792, abs=1e-6)
    assert sum(visit_mass(reference_grammar("g2")).values()) == pytest.approx(9.085714, abs=1e-6)


def _teacher_forced_hits(grammar, acts, include_eos):
    preds = optimal_predictions(grammar, acts)
    targets = acts[1:] + [None]
    hits = sum(p == t for p, t in zip(preds, targets))
    if include_eos:
        return hits, len(acts)
    # the first event is also predicted, from the start state; <eos> is not
    first = max(grammar.transitions[grammar.start], key=lambda t: t[2])[0]
    return hits - 1 + (acts[0] == first), len(acts)


@pytest.mark.parametrize("include_eos", [False, True])
@pytest.mark.parametrize("name", ["g1", "g2"])
def test_monte_carlo_agreement(name, include_eos):
    g = reference_grammar(name)
    log = generate_log(g, 10_000, seed=11)
    hits = total = 0
    for case in log.cases:
        h, n = _teacher_forced_hits(g, case.activities, include_eos)
        hits += h
        total += n
    p = bayes_optimal_accuracy(g, include_eos=include_eos)
    sigma = math.sqrt(p * (1 - p) / total)
    assert abs(hits / total - p) <= 3 * sigma + 1e-12


def test_bayes_needs_label_determinism():
    g = _grammar([["s0", "a", "s1", 0.5], ["s0", "a", "end", 0.5], ["s1", "b", "end", 1.0]])
    assert not g.is_label_deterministic()
    with pytest.raises(GrammarError):
        bayes_optimal_accuracy(g)


@pytest.mark.parametrize(
    "rows",
    [
        [["s0", "a", "s0", 1.0]],  # end unreachable
        [["s0", "a", "end", 0.5]],  # probabilities do not sum to one
        [["s0", "a", "end", 1.2], ["s0", "b", "end", -0.2]],
        [["s0", "a", "s1", 1.0]],  # s1 has no outgoing transitions
    ],
)
def test_grammar_validation(rows):
    with pytest.raises(GrammarError):
        _grammar(rows).validate()


def test_generate_log_deterministic_and_timed():
    g = reference_grammar("g2")
    a = generate_log(g, 50, seed=3, horizon_seconds=86400.0)
    b = generate_log(g, 50, seed=3, horizon_seconds=86400.0)
    assert [(c.id, c.activities, c.start) for c in a.cases] == [(c.id, c.activities, c.start) for c in b.cases]
    assert [c.activities for c in generate_log(g, 50, seed=4).cases] != [c.activities for c in a.cases]
    for case in a.cases:
        gaps = np.diff([e.timestamp.timestamp() for e in case.events])
        assert (gaps >= 1).all()
        for act, gap in zip(case.activities[1:], gaps):
            mean, jitter = g.duration(act)
            assert max(1, mean - jitter) - 0.5 <= gap <= mean + jitter + 0.5


def test_grammar_json_round_trip(tmp_path):
    g = reference_grammar("g1")
    g.save(tmp_path / "g.json")
    assert ProcessGrammar.load(tmp_path / "g.json") == g
    (tmp_path / "bad.json").write_text('{"start": "s0"}')
    with pytest.raises(GrammarError):
        ProcessGrammar.load(tmp_path / "bad.json")
