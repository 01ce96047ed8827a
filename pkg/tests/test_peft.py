import warnings

import pytest
import torch

from conftest import block_param_count, io_param_count, lora_param_count, random_batch, tiny_model
from ppm_peft.errors import ConfigError
from ppm_peft.peft import (
    FreezeConfig,
    LoraConfig,
    apply_freeze,
    apply_lora,
    apply_peft,
    count_params,
    merge_lora,
    resolve_layers,
)
from ppm_peft.substrate import Adam
from ppm_peft.training import joint_loss


def test_spec_example_lora_count():
    m = tiny_model(vocab=10, dim=8, blocks=2)
    part = apply_lora(m, LoraConfig(rank=2))
    expected = io_param_count(10, 8) + lora_param_count(2, [(8, 8)] * 8)
    assert expected == 96 + 99 + 256 == 451
    assert count_params(m, part)["trainable"] == 451
    assert count_params(m)["trainable"] == 451


def test_full_freeze_trains_only_io():
    m = tiny_model()
    part = apply_freeze(m, FreezeConfig("full"))
    assert not part.trainable and not part.adapters
    assert all(n.startswith(("input.", "head.")) for n in part.io)
    assert count_params(m, part)["trainable"] == io_param_count(10, 8)


@pytest.mark.parametrize("layers, blocks", [((0,), {0}), ((-1,), {1}), ((0, 1), {0, 1}), ((-1, -2), {0, 1})])
def test_partial_freeze(layers, blocks):
    m = tiny_model()
    part = apply_freeze(m, FreezeConfig("partial", layers))
    assert {int(n.split(".")[1][5:]) for n in part.trainable} == blocks
    assert part.frozen.isdisjoint(part.trainable)
    assert count_params(m, part)["trainable"] == io_param_count(10, 8) + len(blocks) * block_param_count(8, 4)


def test_resolve_layers():
    assert resolve_layers([-1, 0, 2], 3) == (0, 2)
    with pytest.raises(ConfigError):
        resolve_layers([2], 2)
    with pytest.raises(ConfigError):
        resolve_layers([-3], 2)


def test_config_validation():
    with pytest.raises(ConfigError):
        FreezeConfig("partial", ())
    with pytest.raises(ConfigError):
        LoraConfig(rank=0)
    assert LoraConfig(rank=4).alpha == 8.0
    assert LoraConfig(rank=4, alpha=2).scaling == 0.5


def test_lora_rank_warning():
    m = tiny_model(dim=8)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        apply_lora(m, LoraConfig(rank=8))
    assert any("not low" in str(x.message) for x in w)


def test_lora_on_recurrent_backbone_rejected():
    with pytest.raises(ConfigError):
        apply_lora(tiny_model(kind="recurrent"), LoraConfig(rank=2))


def test_lora_ff_targets():
    m = tiny_model(dim=8)
    part = apply_lora(m, LoraConfig(rank=2, targets=("fc1", "fc2")))
    shapes = [(32, 8), (8, 32)] * 2
    assert count_params(m, part)["trainable"] == io_param_count(10, 8) + lora_param_count(2, shapes)


def test_lora_zero_init_and_merge():
    torch.manual_seed(0)
    m = tiny_model()
    m.eval()
    b = random_batch(10)
    base = m.forward_batch(b)["na_logits"]
    apply_lora(m, LoraConfig(rank=2), seed=3)
    assert torch.equal(m.forward_batch(b)["na_logits"], base)
    with torch.no_grad():
        for n, p in m.named_parameters():
            if n.endswith("lora_B"):
                p.normal_()
    adapted = m.forward_batch(b)["na_logits"]
    assert not torch.allclose(adapted, base)
    merge_lora(m)
    assert m.lora is None and not any("lora" in n for n, _ in m.named_parameters())
    assert (m.forward_batch(b)["na_logits"] - adapted).abs().max() < 1e-5
    with pytest.raises(ConfigError):
        merge_lora(m)


def test_frozen_tensors_unchanged_after_training_steps():
    m = tiny_model(dropout=0.1)
    part = apply_peft(m, LoraConfig(rank=2), seed=1)
    before = {n: p.detach().clone() for n, p in m.named_parameters()}
    opt = Adam(m.registry, lr=1e-2)
    m.train()
    for step in range(5):
        b = random_batch(10, seed=step)
        loss, _ = joint_loss(m.forward_batch(b), b)
        opt.zero_grad()
        loss.backward()
        opt.step()
    after = dict(m.named_parameters())
    for n in part.frozen:
        assert torch.equal(after[n], before[n]), n
    assert all(not torch.equal(after[n], before[n]) for n in part.io | {x for x in part.adapters if "lora_B" in x})
