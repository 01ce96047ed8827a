"""Dense tensor ops, a named parameter registry and an Adam optimizer.

Tensors are plain ``torch.Tensor`` values (float32 by default); reverse-mode
differentiation is torch autograd. The ops below add the shape and index
checks the rest of the package relies on.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping

import torch

from .errors import DimensionError


class ParamRegistry:
    """Ordered ``name -> tensor`` map with a trainable flag per entry.

    The trainable flag is the tensor's ``requires_grad``; the registry holds
    references, so flipping a flag here affects the owning model.
    """

    def __init__(self, items: Iterable[tuple[str, torch.Tensor]] = ()):
        self._params: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, tensor in items:
            self.add(name, tensor)

    def add(self, name: str, tensor: torch.Tensor, trainable: bool | None = None) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        if trainable is not None:
            tensor.requires_grad_(trainable)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def is_trainable(self, name: str) -> bool:
        return bool(self._params[name].requires_grad)

    def set_trainable(self, name: str, flag: bool) -> None:
        self._params[name].requires_grad_(flag)

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._params.items() if t.requires_grad]

    def numel(self, trainable_only: bool = False) -> int:
        return sum(t.numel() for t in self._params.values() if t.requires_grad or not trainable_only)

    def snapshot(self) -> dict[str, torch.Tensor]:
        """Detached copies of every tensor, for bitwise comparisons."""
        return {n: t.detach().clone() for n, t in self._params.items()}


def _shape(t: torch.Tensor) -> tuple[int, ...]:
    return tuple(t.shape)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {_shape(a)} and {_shape(b)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {_shape(a)} @ {_shape(b)}")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return shifted - shifted.exp().sum(dim=axis, keepdim=True).log()


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"layer_norm gain/bias {_shape(gain)}/{_shape(bias)} do not match last axis {n}"
        )
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def _flat_mask(mask: torch.Tensor | None, n: int, device) -> torch.Tensor:
    if mask is None:
        return torch.ones(n, dtype=torch.bool, device=device)
    m = mask.reshape(-1).to(torch.bool)
    if m.numel() != n:
        raise DimensionError(f"mask has {m.numel()} entries, expected {n}")
    return m


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood over mask-selected rows.

    ``logits`` may carry leading batch axes; they are flattened against
    ``targets`` and ``mask``. An all-false mask gives a zero loss.
    """
    v = logits.shape[-1]
    flat = logits.reshape(-1, v)
    tgt = targets.reshape(-1).long()
    if tgt.numel() != flat.shape[0]:
        raise DimensionError(f"{tgt.numel()} targets for {flat.shape[0]} logit rows")
    m = _flat_mask(mask, flat.shape[0], flat.device)
    sel = tgt[m]
    if sel.numel() and (int(sel.max()) >= v or int(sel.min()) < 0):
        raise IndexError(f"target index out of range [0, {v}): min {int(sel.min())}, max {int(sel.max())}")
    safe = torch.where(m, tgt, torch.zeros_like(tgt))
    nll = -log_softmax(flat, -1).gather(1, safe.unsqueeze(1)).squeeze(1)
    w = m.to(flat.dtype)
    return (nll * w).sum() / w.sum().clamp(min=1.0)


def mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {_shape(pred)} vs {_shape(target)}")
    diff = (pred - target).reshape(-1)
    w = _flat_mask(mask, diff.numel(), diff.device).to(diff.dtype)
    return (diff * diff * w).sum() / w.sum().clamp(min=1.0)


@dataclass
class AdamState:
    """Moment buffers keyed by parameter name, plus the shared step count."""

    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(
    registry: ParamRegistry,
    grads: Mapping[str, torch.Tensor | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place, over trainable entries only.

    A trainable entry with no gradient is treated as having a zero gradient.
    Entries whose trainable flag is off are never touched.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in registry.items():
        if not p.requires_grad:
            continue
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state


class Adam:
    """Stateful wrapper around :func:`adam_step` bound to one registry."""

    def __init__(self, registry: ParamRegistry, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.registry = registry
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.registry.items() if p.requires_grad}
        adam_step(self.registry, grads, self.state, self.lr, *self.betas, eps=self.eps)

    def zero_grad(self) -> None:
        for _, p in self.registry.items():
            p.grad = None


def clip_grad_norm(registry: ParamRegistry, max_norm: float) -> float:
    grads = [p.grad for _, p in registry.items() if p.requires_grad and p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads)).item()
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g.mul_(scale)
    return total


def numeric_grad(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-3) -> torch.Tensor:
    """Central differences of scalar ``f`` at ``x``, evaluated in float64."""
    x64 = x.detach().to(torch.float64).clone()
    flat = x64.view(-1)
    out = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f(x64))
            flat[i] = orig - h
            fm = float(f(x64))
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.view_as(x64)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-7) -> float:
    """``|a - n|_2 / max(|a|_2, |n|_2, floor)``.

    The floor keeps gradients that vanish analytically (an attention key
    bias, say) from dividing float64 round-off by itself.
    """
    a = analytic.detach().to(torch.float64).reshape(-1)
    n = numeric.detach().to(torch.float64).reshape(-1)
    scale = max(a.norm().item(), n.norm().item(), floor)
    return (a - n).norm().item() / scale


def finite_diff_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-3) -> float:
    """Relative error between the autograd gradient of ``f`` and central differences.

    The reverse-mode gradient is taken at ``x`` in its own dtype; the
    finite-difference side always runs in float64.
    """
    xg = x.detach().clone().requires_grad_(True)
    y = f(xg)
    if y.numel() != 1:
        raise DimensionError(f"finite_diff_check needs a scalar function, got shape {_shape(y)}")
    (g,) = torch.autograd.grad(y, xg)
    return relative_error(g, numeric_grad(f, x, h))


def finite_diff_check_params(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-3,
) -> dict[str, float]:
    """Per-tensor gradient check of a closure over named leaf tensors.

    ``loss_fn`` reads the tensors in ``params`` (typically a float64 model's
    parameters). Each is perturbed in place for the numeric side.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    errors = {}
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            if g is None:
                g = torch.zeros_like(p)
            flat = p.view(-1)
            num = torch.empty(flat.numel(), dtype=torch.float64)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(loss_fn())
                flat[i] = orig - h
                fm = float(loss_fn())
                flat[i] = orig
                num[i] = (fp - fm) / (2 * h)
            errors[name] = relative_error(g, num)
    return errors
