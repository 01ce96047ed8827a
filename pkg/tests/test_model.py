import struct

import numpy as np
import pytest
import torch

from conftest import block_param_count, io_param_count, random_batch, tiny_model
from ppm_peft.errors import CheckpointError, ConfigError, DimensionError
from ppm_peft.model import (
    BackboneConfig,
    HeadConfig,
    InputLayerConfig,
    LoraSpec,
    attach_adapters,
    count_by_prefix,
    init_model,
    load_checkpoint,
    read_tensors,
    save_checkpoint,
    transplant_backbone,
    write_tensors,
)


def test_block_parameter_count_by_enumeration():
    m = tiny_model(dim=8, heads=2)
    assert count_by_prefix(m, "backbone.block0.") == block_param_count(8, 4) == 872


def test_total_parameter_count():
    v, d, n_blocks, max_len = 10, 8, 2, 16
    m = tiny_model(vocab=v, dim=d, blocks=n_blocks, max_len=max_len)
    expected = io_param_count(v, d) + n_blocks * block_param_count(d, 4) + max_len * d + 2 * d
    assert sum(p.numel() for p in m.parameters()) == expected


def test_zero_block_transformer_is_identity_backbone():
    m = tiny_model(blocks=0)
    names = [n for n, _ in m.named_parameters() if n.startswith("backbone.")]
    assert names == ["backbone.pos_embed"]


def test_output_shapes():
    m = tiny_model(vocab=10)
    b = random_batch(10, b=3, length=5)
    out = m.forward_batch(b)
    L = b.shape[1]
    assert out["na_logits"].shape == (3, L, 10)
    assert out["rt_pred"].shape == (3, L, 1)


def test_single_task_heads():
    m = tiny_model(tasks=("RT",))
    assert set(m.forward_batch(random_batch(10))) == {"rt_pred"}
    assert not any(n.startswith("head.na") for n, _ in m.named_parameters())


def test_input_errors():
    m = tiny_model(vocab=10)
    with pytest.raises(IndexError):
        m(torch.tensor([[3, 10]]), torch.zeros(1, 2, 2))
    with pytest.raises(DimensionError):
        m(torch.tensor([[3, 4]]), torch.zeros(1, 2, 3))
    with pytest.raises(DimensionError):
        m(torch.full((1, 17), 3), torch.zeros(1, 17, 2))


def test_config_errors():
    with pytest.raises(ConfigError):
        BackboneConfig(model_dim=10, n_heads=4)
    with pytest.raises(ConfigError):
        HeadConfig(5, ())
    with pytest.raises(DimensionError):
        init_model(InputLayerConfig(5, 16), BackboneConfig(model_dim=8, n_heads=2), HeadConfig(5))


def test_recurrent_backbone_allows_width_change():
    m = init_model(InputLayerConfig(6, 4), BackboneConfig("recurrent", 2, 8, dropout=0.0), HeadConfig(6))
    assert m.forward_batch(random_batch(6))["na_logits"].shape[-1] == 6


def test_init_is_seeded():
    a, b, c = tiny_model(seed=1), tiny_model(seed=1), tiny_model(seed=2)
    sa, sb, sc = (dict(m.named_parameters()) for m in (a, b, c))
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not torch.equal(sa["input.embed.weight"], sc["input.embed.weight"])
    assert sa["backbone.block0.ln1.weight"].eq(1).all()
    assert sa["backbone.block0.attn.q.bias"].eq(0).all()
    assert sa["input.embed.weight"].abs().max() <= 0.04 + 1e-7


@pytest.mark.parametrize("kind", ["transformer", "recurrent"])
def test_causal_prefix_invariance(kind):
    m = tiny_model(kind=kind, blocks=2)
    b = random_batch(10, b=1, length=8, lengths=[8])
    base = m.forward_batch(b)["na_logits"]
    x_act = b.x_act.clone()
    x_act[0, 5] = 3 if int(x_act[0, 5]) != 3 else 4
    x_num = b.x_num.clone()
    x_num[0, 5] += 1.0
    out = m(x_act, x_num)["na_logits"]
    assert torch.equal(out[0, :5], base[0, :5])
    assert not torch.equal(out[0, 5:], base[0, 5:])


def test_dropout_inactive_in_eval_and_seeded_in_train():
    m = tiny_model(dropout=0.5)
    b = random_batch(10)
    m.eval()
    assert torch.equal(m.forward_batch(b)["na_logits"], m.forward_batch(b)["na_logits"])
    m.train()
    m.dropout_generator = torch.Generator().manual_seed(0)
    x = m.forward_batch(b)["na_logits"]
    m.dropout_generator = torch.Generator().manual_seed(0)
    assert torch.equal(x, m.forward_batch(b)["na_logits"])


def test_checkpoint_round_trip_bitwise(tmp_path):
    m = tiny_model()
    with torch.no_grad():
        for p in m.parameters():
            p.add_(torch.randn_like(p))
    save_checkpoint(m, tmp_path / "m.ppmt")
    back = load_checkpoint(tmp_path / "m.ppmt")
    a, b = dict(m.named_parameters()), dict(back.named_parameters())
    assert list(a) == list(b)
    for k in a:
        assert a[k].detach().numpy().tobytes() == b[k].detach().numpy().tobytes()


def test_checkpoint_with_adapters_round_trip(tmp_path):
    m = tiny_model()
    attach_adapters(m, LoraSpec(2, 4.0), generator=torch.Generator().manual_seed(0))
    save_checkpoint(m, tmp_path / "m.ppmt")
    back = load_checkpoint(tmp_path / "m.ppmt")
    assert back.lora == m.lora
    b = random_batch(10)
    m.eval(), back.eval()
    assert torch.equal(m.forward_batch(b)["na_logits"], back.forward_batch(b)["na_logits"])


def test_checkpoint_layout(tmp_path):
    write_tensors({"w": torch.tensor([[1.0, 2.0]])}, tmp_path / "t.ppmt")
    raw = (tmp_path / "t.ppmt").read_bytes()
    assert raw[:4] == b"PPMT"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert np.frombuffer(raw[-12:-4], "<f4").tolist() == [1.0, 2.0]


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "t.ppmt"
    write_tensors({"w": torch.ones(3)}, p)
    raw = bytearray(p.read_bytes())

    def corrupt(data):
        p.write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            read_tensors(p)

    corrupt(b"XXXX" + raw[4:])
    bad_version = bytearray(raw)
    bad_version[4:8] = struct.pack("<I", 99)
    corrupt(bad_version)
    corrupt(raw[:-6])
    flipped = bytearray(raw)
    flipped[-6] ^= 0xFF
    corrupt(flipped)


def test_load_shape_mismatch_names_tensor(tmp_path):
    save_checkpoint(tiny_model(vocab=10), tmp_path / "a.ppmt")
    with pytest.raises(DimensionError, match="input.embed.weight"):
        load_checkpoint(tmp_path / "a.ppmt", tiny_model(vocab=11))


def test_transplant_copies_backbone_only():
    src = tiny_model(vocab=10, seed=1)
    dst = transplant_backbone(src, InputLayerConfig(7, 8), HeadConfig(7, ("NA",)), seed=5)
    s, d = dict(src.named_parameters()), dict(dst.named_parameters())
    for k in d:
        if k.startswith("backbone."):
            assert torch.equal(s[k], d[k])
    assert d["input.embed.weight"].shape == (7, 8)
    with pytest.raises(DimensionError):
        transplant_backbone(src, InputLayerConfig(7, 4), HeadConfig(7))
    attach_adapters(src, LoraSpec(2, 4.0))
    with pytest.raises(ConfigError):
        transplant_backbone(src, InputLayerConfig(7, 8), HeadConfig(7))
