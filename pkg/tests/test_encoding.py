import numpy as np
import pytest
import torch

from conftest import make_case, make_log
from ppm_peft.errors import DataError
from ppm_peft.encoding import collate, encode_log, encode_trace, make_batches
from ppm_peft.eventlog import EOS_IDX, PAD_IDX, apply_zscore, build_vocab, fit_log_stats


@pytest.fixture
def setup():
    log = make_log([
        ("a", ["x", "y", "z"], [0, 10, 30]),
        ("b", ["y", "x"], [5, 6]),
        ("c", ["z", "z", "z", "x", "y"], [0, 1, 2, 3, 100]),
    ])
    return log, build_vocab(log), fit_log_stats(log)


def test_teacher_forced_shift(setup):
    log, vocab, stats = setup
    t = encode_trace(log.cases[0], vocab, stats)
    assert t.x_act.tolist() == vocab.encode(["x", "y", "z"])
    assert t.y_act.tolist() == vocab.encode(["y", "z"]) + [EOS_IDX]
    assert t.x_num.shape == (3, 2) and t.x_num.dtype == np.float32
    assert t.y_rt.tolist() == pytest.approx(apply_zscore(np.array([30.0, 20.0, 0.0]), stats, "remaining_time"))


def test_truncation_keeps_tail(setup):
    log, vocab, stats = setup
    full = encode_trace(log.cases[2], vocab, stats)
    cut = encode_trace(log.cases[2], vocab, stats, max_len=2)
    assert cut.x_act.tolist() == full.x_act[-2:].tolist()
    assert cut.y_act[-1] == EOS_IDX


def test_unseen_activity_maps_to_unk(setup):
    _, vocab, stats = setup
    t = encode_trace(make_case("n", ["x", "new"], [0, 1]), vocab, stats)
    assert t.x_act[1] == 2


def test_collate_pads(setup):
    log, vocab, stats = setup
    b = collate(encode_log(log, vocab, stats))
    assert b.shape == (3, 5)
    assert b.mask.sum(1).tolist() == [3, 2, 5]
    assert (b.x_act[1, 2:] == PAD_IDX).all() and (b.y_act[1, 2:] == PAD_IDX).all()
    assert (b.x_num[1, 2:] == 0).all() and (b.y_rt[1, 2:] == 0).all()
    assert b.x_act.dtype == torch.long and b.x_num.dtype == torch.float32


def test_make_batches_order_and_seed(setup):
    log, vocab, stats = setup
    traces = encode_log(log, vocab, stats) * 4
    plain = make_batches(traces, 5)
    assert [len(b.x_act) for b in plain] == [5, 5, 2]
    a = make_batches(traces, 5, shuffle_seed=7)
    b = make_batches(traces, 5, shuffle_seed=7)
    assert all(torch.equal(x.x_act, y.x_act) for x, y in zip(a, b))
    with pytest.raises(DataError):
        make_batches([], 4)
