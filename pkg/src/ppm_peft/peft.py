"""Full freezing, partial (block-wise) freezing and LoRA over a model's registry."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch

from .errors import ConfigError
from .model import ATTENTION_TARGETS, LoraSpec, Model, attach_adapters


@dataclass
class FreezeConfig:
    mode: str = "full"
    layers: tuple[int, ...] = ()

    def __post_init__(self):
        self.layers = tuple(int(i) for i in self.layers)
        if self.mode not in ("full", "partial"):
            raise ConfigError(f"freeze mode must be 'full' or 'partial', got {self.mode!r}")
        if self.mode == "partial" and not self.layers:
            raise ConfigError("partial freezing needs at least one layer index")
        if self.mode == "full" and self.layers:
            raise ConfigError("full freezing takes no layer indices")


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float | None = None  # defaults to 2 * rank
    targets: tuple[str, ...] = ATTENTION_TARGETS
    init_std: float = 0.02

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.rank <= 0:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.alpha is None:
            self.alpha = 2.0 * self.rank
        if self.alpha <= 0:
            raise ConfigError(f"LoRA alpha must be > 0, got {self.alpha}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass(frozen=True)
class PeftPartition:
    """Name sets: frozen backbone ``P_fr``, trainable backbone ``theta``,
    adapters ``phi`` and the always-trainable input/output layers."""

    frozen: frozenset = field(default_factory=frozenset)
    trainable: frozenset = field(default_factory=frozenset)
    adapters: frozenset = field(default_factory=frozenset)
    io: frozenset = field(default_factory=frozenset)

    @property
    def backbone(self) -> frozenset:
        return self.frozen | self.trainable

    @property
    def trainable_names(self) -> frozenset:
        return self.trainable | self.adapters | self.io


def _is_adapter(name: str) -> bool:
    return ".lora_A" in name or ".lora_B" in name


def resolve_layers(indices, n_blocks: int) -> tuple[int, ...]:
    """Map possibly negative block indices onto ``range(n_blocks)``."""
    out = set()
    for i in indices:
        j = i + n_blocks if i < 0 else i
        if not 0 <= j < n_blocks:
            raise ConfigError(f"layer index {i} outside a {n_blocks}-block backbone")
        out.add(j)
    return tuple(sorted(out))


def _apply_partition(model: Model, backbone_trainable: set[str]) -> PeftPartition:
    frozen, trainable, adapters, io = set(), set(), set(), set()
    for name, p in model.named_parameters():
        if _is_adapter(name):
            adapters.add(name)
            p.requires_grad_(True)
        elif name.startswith("backbone."):
            flag = name in backbone_trainable
            (trainable if flag else frozen).add(name)
            p.requires_grad_(flag)
        else:
            io.add(name)
            p.requires_grad_(True)
    return PeftPartition(frozenset(frozen), frozenset(trainable), frozenset(adapters), frozenset(io))


def _block_names(model: Model, blocks) -> set[str]:
    prefixes = tuple(model.block_prefix(i) for i in blocks)
    return {n for n, _ in model.named_parameters() if n.startswith(prefixes) and not _is_adapter(n)}


def apply_freeze(model: Model, cfg: FreezeConfig) -> PeftPartition:
    blocks = () if cfg.mode == "full" else resolve_layers(cfg.layers, model.backbone_cfg.n_blocks)
    return _apply_partition(model, _block_names(model, blocks))


def apply_lora(model: Model, cfg: LoraConfig, seed: int = 0, freeze: FreezeConfig | None = None) -> PeftPartition:
    """Attach ``A`` (r x n, normal) and ``B`` (m x r, zeros) to every target matrix.

    All original backbone tensors freeze; a partial ``freeze`` config may
    additionally unfreeze whole blocks alongside the adapters.
    """
    gen = torch.Generator().manual_seed(int(seed))
    mods = attach_adapters(model, LoraSpec(cfg.rank, float(cfg.alpha), cfg.targets), cfg.init_std, gen)
    for name, m in mods.items():
        if cfg.rank >= min(m.in_features, m.out_features):
            warnings.warn(f"LoRA rank {cfg.rank} is not low for {name} ({m.out_features}x{m.in_features})", stacklevel=2)
    keep: set[str] = set()
    if freeze is not None and freeze.mode == "partial":
        keep = _block_names(model, resolve_layers(freeze.layers, model.backbone_cfg.n_blocks))
    return _apply_partition(model, keep)


def merge_lora(model: Model) -> Model:
    """Fold ``scaling * B A`` into each adapted weight and drop the adapters."""
    mods = [m for m in model.modules() if getattr(m, "has_lora", False)]
    if not mods:
        raise ConfigError("model has no LoRA adapters to merge")
    for m in mods:
        m.merge_lora()
    model.lora = None
    return model


def no_peft(model: Model) -> PeftPartition:
    """Everything trainable (training from scratch)."""
    return _apply_partition(model, {n for n, _ in model.named_parameters() if n.startswith("backbone.")})


def apply_peft(model: Model, spec: FreezeConfig | LoraConfig | None, seed: int = 0) -> PeftPartition:
    if spec is None:
        return no_peft(model)
    if isinstance(spec, FreezeConfig):
        return apply_freeze(model, spec)
    return apply_lora(model, spec, seed)


def count_params(model: Model, partition: PeftPartition | None = None) -> dict:
    """Total and trainable element counts; ``trainable_pct`` is in percent."""
    params = dict(model.named_parameters())
    total = sum(p.numel() for p in params.values())
    if partition is None:
        trainable = sum(p.numel() for p in params.values() if p.requires_grad)
    else:
        trainable = sum(params[n].numel() for n in partition.trainable_names)
    return {"total": total, "trainable": trainable, "trainable_pct": 100.0 * trainable / total if total else 0.0}
