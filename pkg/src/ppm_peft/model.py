"""Input layer, block-structured backbone and task heads.

Parameter names are hierarchical and stable::

    input.embed.weight, input.proj.weight
    backbone.pos_embed, backbone.block{i}.{ln1,attn.{q,k,v,o},ln2,ff.{fc1,fc2}}.*, backbone.ln_f.*
    backbone.block{i}.lstm.*                       (recurrent kind)
    head.na.{weight,bias}, head.rt.{weight,bias}

LoRA adapters live next to the matrix they adapt (``...attn.q.lora_A``).
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F  # noqa: N812
from torch import nn

from .encoding import EncodedBatch
from .errors import CheckpointError, ConfigError, DimensionError
from .substrate import ParamRegistry, layer_norm, softmax

TASKS = ("NA", "RT")
ATTENTION_TARGETS = ("q", "k", "v", "o")
FF_TARGETS = ("fc1", "fc2")


@dataclass
class InputLayerConfig:
    vocab_size: int
    embed_dim: int = 32
    num_numeric: int = 2
    proj_dim: int | None = None
    fusion: str = "sum"

    def __post_init__(self):
        if self.proj_dim is None:
            self.proj_dim = self.embed_dim
        if self.fusion not in ("sum", "concat"):
            raise ConfigError(f"fusion must be 'sum' or 'concat', got {self.fusion!r}")
        if self.fusion == "sum" and self.proj_dim != self.embed_dim:
            raise ConfigError(f"sum fusion needs embed_dim == proj_dim ({self.embed_dim} != {self.proj_dim})")
        if self.vocab_size < 1 or self.embed_dim < 1 or self.num_numeric < 0:
            raise ConfigError("input layer sizes must be positive")

    @property
    def out_dim(self) -> int:
        return self.embed_dim if self.fusion == "sum" else self.embed_dim + self.proj_dim


@dataclass
class BackboneConfig:
    kind: str = "transformer"
    n_blocks: int = 2
    model_dim: int = 32
    n_heads: int = 4
    ff_multiplier: int = 4
    max_seq_len: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.kind not in ("transformer", "recurrent"):
            raise ConfigError(f"backbone kind must be 'transformer' or 'recurrent', got {self.kind!r}")
        if self.n_blocks < 0 or self.model_dim < 1:
            raise ConfigError("n_blocks must be >= 0 and model_dim >= 1")
        if self.kind == "transformer" and self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class HeadConfig:
    num_classes: int
    tasks: tuple[str, ...] = TASKS

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if not self.tasks or any(t not in TASKS for t in self.tasks) or len(set(self.tasks)) != len(self.tasks):
            raise ConfigError(f"tasks must be a non-empty subset of {TASKS}, got {self.tasks}")
        # fixed order keeps head.rt initialized after head.na
        self.tasks = tuple(t for t in TASKS if t in self.tasks)


@dataclass
class LoraSpec:
    """Adapter layout recorded on a model so checkpoints can rebuild it."""

    rank: int
    alpha: float
    targets: tuple[str, ...] = ATTENTION_TARGETS
    blocks: tuple[int, ...] | None = None


def _dropout(x: torch.Tensor, p: float, training: bool, gen: torch.Generator | None) -> torch.Tensor:
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


class Linear(nn.Module):
    """``y = x W^T + b`` with an optional low-rank ``scaling * B A`` path."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.empty(out_features)) if bias else None
        self.register_parameter("lora_A", None)
        self.register_parameter("lora_B", None)
        self.scaling = 0.0

    @property
    def has_lora(self) -> bool:
        return self.lora_A is not None

    def add_lora(self, rank: int, alpha: float, init_std: float = 0.02, generator=None) -> None:
        if self.has_lora:
            raise ConfigError("adapter already attached")
        a = torch.empty(rank, self.in_features, dtype=self.weight.dtype)
        a.normal_(0.0, init_std, generator=generator)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(self.out_features, rank, dtype=self.weight.dtype))
        self.scaling = alpha / rank

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * (self.lora_B @ self.lora_A)

    @torch.no_grad()
    def merge_lora(self) -> None:
        if not self.has_lora:
            raise ConfigError("no adapter to merge")
        self.weight.add_(self.delta_weight())
        self.lora_A = None
        self.lora_B = None
        self.scaling = 0.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.linear(x, self.weight, self.bias)
        if self.lora_A is not None:
            y = y + self.scaling * F.linear(F.linear(x, self.lora_A), self.lora_B)
        return y


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class InputLayer(nn.Module):
    def __init__(self, cfg: InputLayerConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        # no bias: under sum fusion the embedding already carries a per-token offset
        self.proj = Linear(cfg.num_numeric, cfg.proj_dim, bias=False)

    def forward(self, x_act: torch.Tensor, x_num: torch.Tensor) -> torch.Tensor:
        if x_act.numel() and (int(x_act.max()) >= self.cfg.vocab_size or int(x_act.min()) < 0):
            raise IndexError(f"activity index {int(x_act.max())} outside vocabulary of {self.cfg.vocab_size}")
        if x_num.shape[-1] != self.cfg.num_numeric:
            raise DimensionError(f"expected {self.cfg.num_numeric} numeric features, got {x_num.shape[-1]}")
        e = self.embed(x_act)
        p = self.proj(x_num.to(e.dtype))
        return e + p if self.cfg.fusion == "sum" else torch.cat([e, p], dim=-1)


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.o = Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, length, d = x.shape
        h = self.n_heads

        def split(t):
            return t.view(b, length, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        causal = torch.ones(length, length, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        out = softmax(scores, -1) @ v
        return self.o(out.transpose(1, 2).reshape(b, length, d))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.ln1 = LayerNorm(cfg.model_dim)
        self.attn = Attention(cfg.model_dim, cfg.n_heads)
        self.ln2 = LayerNorm(cfg.model_dim)
        self.ff = FeedForward(cfg.model_dim, cfg.ff_multiplier * cfg.model_dim)

    def forward(self, x, p, training, gen):
        x = x + _dropout(self.attn(self.ln1(x)), p, training, gen)
        return x + _dropout(self.ff(self.ln2(x)), p, training, gen)


class RecurrentBlock(nn.Module):
    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.lstm = nn.LSTM(in_dim, hidden, batch_first=True)

    def forward(self, x, p, training, gen):
        out, _ = self.lstm(x)
        return _dropout(out, p, training, gen)


class Backbone(nn.Module):
    """Pre-norm causal transformer or stacked LSTM, ``(B, L, E) -> (B, L, D)``.

    Transformer backbones need ``E == D``; the final layer norm is only
    present when there is at least one block.
    """

    def __init__(self, cfg: BackboneConfig, in_dim: int):
        super().__init__()
        self.cfg = cfg
        self.in_dim = in_dim
        if cfg.kind == "transformer":
            if in_dim != cfg.model_dim:
                raise DimensionError(f"input width E={in_dim} does not match transformer model_dim D={cfg.model_dim}")
            self.pos_embed = nn.Parameter(torch.empty(cfg.max_seq_len, cfg.model_dim))
            for i in range(cfg.n_blocks):
                self.add_module(f"block{i}", TransformerBlock(cfg))
            self.ln_f = LayerNorm(cfg.model_dim) if cfg.n_blocks else None
        else:
            if cfg.n_blocks == 0 and in_dim != cfg.model_dim:
                raise DimensionError(f"a 0-block recurrent backbone needs E == D ({in_dim} != {cfg.model_dim})")
            for i in range(cfg.n_blocks):
                self.add_module(f"block{i}", RecurrentBlock(in_dim if i == 0 else cfg.model_dim, cfg.model_dim))

    @property
    def blocks(self) -> list[nn.Module]:
        return [getattr(self, f"block{i}") for i in range(self.cfg.n_blocks)]

    def forward(self, x: torch.Tensor, gen: torch.Generator | None = None) -> torch.Tensor:
        p = self.cfg.dropout
        if self.cfg.kind == "transformer":
            length = x.shape[1]
            if length > self.cfg.max_seq_len:
                raise DimensionError(f"sequence length {length} exceeds positional table size {self.cfg.max_seq_len}")
            x = _dropout(x + self.pos_embed[:length], p, self.training, gen)
            for blk in self.blocks:
                x = blk(x, p, self.training, gen)
            return self.ln_f(x) if self.ln_f is not None else x
        for blk in self.blocks:
            x = blk(x, p, self.training, gen)
        return x


class Heads(nn.Module):
    def __init__(self, cfg: HeadConfig, dim: int):
        super().__init__()
        self.cfg = cfg
        if "NA" in cfg.tasks:
            self.na = Linear(dim, cfg.num_classes)
        if "RT" in cfg.tasks:
            self.rt = Linear(dim, 1)

    def forward(self, h: torch.Tensor) -> dict[str, torch.Tensor]:
        out = {}
        if "NA" in self.cfg.tasks:
            out["na_logits"] = self.na(h)
        if "RT" in self.cfg.tasks:
            out["rt_pred"] = self.rt(h)
        return out


class Model(nn.Module):
    """Input layer, backbone and heads with a named parameter registry."""

    def __init__(self, input_cfg: InputLayerConfig, backbone_cfg: BackboneConfig, head_cfg: HeadConfig):
        super().__init__()
        self.input_cfg = input_cfg
        self.backbone_cfg = backbone_cfg
        self.head_cfg = head_cfg
        self.input = InputLayer(input_cfg)
        self.backbone = Backbone(backbone_cfg, input_cfg.out_dim)
        self.head = Heads(head_cfg, backbone_cfg.model_dim)
        self.lora: LoraSpec | None = None
        self.dropout_generator: torch.Generator | None = None

    @property
    def registry(self) -> ParamRegistry:
        return ParamRegistry(self.named_parameters())

    def forward(self, x_act: torch.Tensor, x_num: torch.Tensor) -> dict[str, torch.Tensor]:
        e = self.input(x_act, x_num)
        h = self.backbone(e, self.dropout_generator)
        return self.head(h)

    def forward_batch(self, batch: EncodedBatch) -> dict[str, torch.Tensor]:
        return self(batch.x_act, batch.x_num)

    def block_prefix(self, i: int) -> str:
        return f"backbone.block{i}."

    def lora_modules(self, targets=ATTENTION_TARGETS, blocks=None) -> dict[str, Linear]:
        """Named adaptable matrices, e.g. ``backbone.block0.attn.q``."""
        if self.backbone_cfg.kind != "transformer":
            return {}
        chosen = range(self.backbone_cfg.n_blocks) if blocks is None else blocks
        found = {}
        for i in chosen:
            blk = getattr(self.backbone, f"block{i}")
            for t in targets:
                if t in ATTENTION_TARGETS:
                    found[f"backbone.block{i}.attn.{t}"] = getattr(blk.attn, t)
                elif t in FF_TARGETS:
                    found[f"backbone.block{i}.ff.{t}"] = getattr(blk.ff, t)
                else:
                    raise ConfigError(f"unknown LoRA target {t!r}; choose from {ATTENTION_TARGETS + FF_TARGETS}")
        return found

    def config_dict(self) -> dict:
        return {
            "input": asdict(self.input_cfg),
            "backbone": asdict(self.backbone_cfg),
            "heads": {"num_classes": self.head_cfg.num_classes, "tasks": list(self.head_cfg.tasks)},
            "lora": None
            if self.lora is None
            else {
                "rank": self.lora.rank,
                "alpha": self.lora.alpha,
                "targets": list(self.lora.targets),
                "blocks": None if self.lora.blocks is None else list(self.lora.blocks),
            },
        }


def _trunc_normal(t: torch.Tensor, gen: torch.Generator, std: float = 0.02) -> None:
    nn.init.trunc_normal_(t, mean=0.0, std=std, a=-2 * std, b=2 * std, generator=gen)


@torch.no_grad()
def reset_parameters(model: Model, seed: int) -> None:
    """Deterministic init in registry order.

    Truncated normal (std 0.02) for embeddings and linear weights, zeros for
    biases, ones for layer-norm gains, uniform(+-1/sqrt(H)) for LSTM weights.
    """
    gen = torch.Generator().manual_seed(int(seed))
    ln_params = {id(p) for m in model.modules() if isinstance(m, LayerNorm) for p in (m.weight,)}
    lstm_params = {id(p) for m in model.modules() if isinstance(m, nn.LSTM) for p in m.parameters()}
    for name, p in model.named_parameters():
        if ".lora_" in name:
            continue
        if id(p) in ln_params:
            p.fill_(1.0)
        elif id(p) in lstm_params:
            if "bias" in name:
                p.zero_()
            else:
                bound = 1.0 / math.sqrt(model.backbone_cfg.model_dim)
                p.uniform_(-bound, bound, generator=gen)
        elif name.endswith("bias"):
            p.zero_()
        else:
            _trunc_normal(p, gen)


def init_model(input_cfg: InputLayerConfig, backbone_cfg: BackboneConfig, head_cfg: HeadConfig, seed: int = 0) -> Model:
    model = Model(input_cfg, backbone_cfg, head_cfg)
    reset_parameters(model, seed)
    return model


def model_from_config(cfg: dict, seed: int = 0) -> Model:
    head = cfg["heads"]
    model = init_model(
        InputLayerConfig(**cfg["input"]),
        BackboneConfig(**cfg["backbone"]),
        HeadConfig(head["num_classes"], tuple(head["tasks"])),
        seed,
    )
    if cfg.get("lora"):
        lo = cfg["lora"]
        attach_adapters(model, LoraSpec(lo["rank"], lo["alpha"], tuple(lo["targets"]), _opt_tuple(lo.get("blocks"))))
    return model


def _opt_tuple(x):
    return None if x is None else tuple(x)


def attach_adapters(model: Model, spec: LoraSpec, init_std: float = 0.02, generator=None) -> dict[str, Linear]:
    mods = model.lora_modules(spec.targets, spec.blocks)
    if not mods:
        raise ConfigError(f"no LoRA target matrices {spec.targets} in a {model.backbone_cfg.kind} backbone")
    for m in mods.values():
        m.add_lora(spec.rank, spec.alpha, init_std, generator)
    model.lora = spec
    return mods


def count_by_prefix(model: Model, prefix: str) -> int:
    return sum(p.numel() for n, p in model.named_parameters() if n.startswith(prefix))


def transplant_backbone(source: Model, input_cfg: InputLayerConfig, head_cfg: HeadConfig, seed: int = 0) -> Model:
    """Fresh input layer and heads around a bitwise copy of ``source``'s backbone."""
    if source.lora is not None:
        raise ConfigError("merge LoRA adapters before transplanting a backbone")
    if input_cfg.out_dim != source.backbone.in_dim:
        raise DimensionError(
            f"new input layer width E={input_cfg.out_dim} does not match backbone input width {source.backbone.in_dim}"
        )
    target = init_model(input_cfg, source.backbone_cfg, head_cfg, seed)
    with torch.no_grad():
        src = dict(source.backbone.named_parameters())
        for name, p in target.backbone.named_parameters():
            p.copy_(src[name])
    return target


# -- checkpoint file -------------------------------------------------------

MAGIC = b"PPMT"
FORMAT_VERSION = 1
DTYPE_F32 = 0


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_tensors(tensors: dict[str, torch.Tensor], path) -> None:
    header = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    payload = []
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).numpy()
        header.append(struct.pack("<I", len(raw)) + raw)
        header.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        header.append(struct.pack("<I", DTYPE_F32))
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(payload)
    Path(path).write_bytes(b"".join(header) + body + struct.pack("<I", zlib.crc32(body)))


def read_tensors(path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated header")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    entries = []
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(data):
            raise CheckpointError(f"{path}: truncated header")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}Q")
        (dtype,) = take("<I")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype code {dtype}")
        entries.append((name, dims))
    sizes = [4 * int(np.prod(d, dtype=np.int64)) for _, d in entries]
    if len(data) != pos + sum(sizes) + 4:
        raise CheckpointError(f"{path}: truncated or oversized payload")
    body = data[pos : pos + sum(sizes)]
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    out, off = {}, 0
    for (name, dims), size in zip(entries, sizes):
        arr = np.frombuffer(body, dtype="<f4", count=size // 4, offset=off).reshape(dims)
        out[name] = torch.from_numpy(arr.astype(np.float32))
        off += size
    return out


def save_checkpoint(model: Model, path) -> None:
    """Binary tensor file plus a ``<path>.json`` sidecar holding the configs."""
    path = Path(path)
    write_tensors(dict(model.named_parameters()), path)
    _sidecar(path).write_text(json.dumps(model.config_dict(), indent=2, sort_keys=True))


@torch.no_grad()
def load_state(model: Model, tensors: dict[str, torch.Tensor]) -> Model:
    params = dict(model.named_parameters())
    missing = [n for n in params if n not in tensors]
    extra = [n for n in tensors if n not in params]
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        t = tensors[name]
        if tuple(t.shape) != tuple(p.shape):
            raise DimensionError(f"tensor {name!r}: checkpoint shape {tuple(t.shape)} vs model shape {tuple(p.shape)}")
        p.copy_(t)
    return model


def load_checkpoint(path, model: Model | None = None) -> Model:
    path = Path(path)
    tensors = read_tensors(path)
    if model is None:
        side = _sidecar(path)
        if not side.exists():
            raise CheckpointError(f"{path}: config sidecar {side.name} not found; pass a model to load into")
        model = model_from_config(json.loads(side.read_text()))
    return load_state(model, tensors)
