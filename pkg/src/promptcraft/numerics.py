"""Tensor primitives, Adam, and a finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects; torch autograd supplies the
reverse-mode gradients.  Everything here keeps shapes explicit: the only
broadcasting allowed is the trailing bias/affine pattern.
"""

from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence, Union

import torch
import torch.nn.functional as F

from .errors import DeterminismError, DimensionError, EmptyLossError, OptimizerError

DETERMINISTIC_ENV = "PROMPTCRAFT_DETERMINISTIC"

_DTYPES = {"f32": torch.float32, "f64": torch.float64}
_current_dtype = torch.float32


def get_dtype() -> torch.dtype:
    return _current_dtype


def set_precision(name: str) -> None:
    """Switch the global floating-point mode (``"f32"`` or ``"f64"``)."""
    global _current_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _current_dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = {v: k for k, v in _DTYPES.items()}[_current_dtype]
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def configure_determinism(force: bool | None = None) -> bool:
    """Enable single-threaded bit-exact mode when requested.

    The mode is on when ``force`` is true or when the environment variable
    ``PROMPTCRAFT_DETERMINISTIC`` is set to a non-empty value other than ``0``.
    """
    enabled = force if force is not None else os.environ.get(DETERMINISTIC_ENV, "0") not in ("", "0")
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    return enabled


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    out = torch.as_tensor(data, dtype=_current_dtype).clone()
    out.requires_grad_(requires_grad)
    return out


def zeros(*shape: int) -> torch.Tensor:
    return torch.zeros(*shape, dtype=_current_dtype)


# ---------------------------------------------------------------------------
# Differentiable ops
# ---------------------------------------------------------------------------


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes; leading batch axes must agree exactly."""
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"batch extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if x.dim() == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    # torch's kernel subtracts the row max before exponentiating
    return torch.softmax(x, dim=axis)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if x.dim() == 0 or x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    return torch.log_softmax(x, dim=axis)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {tuple(gamma.shape)}/{tuple(beta.shape)} do not match width {d}"
        )
    return F.layer_norm(x, (d,), gamma, beta, eps)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d) + bias) v`` over [B, H, T, d] tensors.

    f64 (the checking precision) and single-query decoding use the explicit
    formulation, which batches under ``vmap`` and is faster for one row; other
    cases use the fused kernel.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    if q.dtype == torch.float64 or q.shape[-2] == 1:
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]) + bias
        return torch.softmax(scores, dim=-1) @ v
    return F.scaled_dot_product_attention(q, k, v, attn_mask=bias)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def token_log_probs(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Log-probability of ``targets`` under ``softmax(logits)`` along the last axis."""
    return log_softmax(logits, -1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood over unmasked positions.

    ``logits`` is [..., V]; ``targets`` and ``mask`` share the leading shape.
    """
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"targets shape {tuple(targets.shape)} does not match logits {tuple(logits.shape)}")
    V = logits.shape[-1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= V):
        raise DimensionError(f"target ids must lie in [0, {V})")
    if mask is None:
        mask = torch.ones_like(targets, dtype=torch.bool)
    if mask.shape != targets.shape:
        raise DimensionError("mask shape must match targets")
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("every position is masked; the loss is undefined")
    nll = -token_log_probs(logits, targets)
    return (nll * mask.to(nll.dtype)).sum() / count


# ---------------------------------------------------------------------------
# Parameters and Adam
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    name: str
    tensor: torch.Tensor
    trainable: bool = True


Schedule = Union[float, Callable[[int], float]]


@dataclass
class AdamState:
    """Bias-corrected Adam with decoupled weight decay.

    ``lr`` is either a constant or a callable mapping the (0-based) step
    index about to be taken to a learning rate.
    """

    lr: Schedule = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def current_lr(self) -> float:
        return float(self.lr(self.t)) if callable(self.lr) else float(self.lr)


def adam_step(
    params: Iterable[Parameter],
    state: AdamState,
    grads: dict[str, torch.Tensor] | None = None,
) -> float:
    """Apply one Adam update in place to every trainable parameter.

    Gradients come from ``grads`` when given, otherwise from each tensor's
    ``.grad`` (a missing ``.grad`` counts as zero).  Returns the learning rate
    used for the step.
    """
    params = list(params)
    updates = []
    for p in params:
        if not p.trainable:
            continue
        g = grads[p.name] if grads is not None and p.name in grads else p.tensor.grad
        if g is None:
            g = torch.zeros_like(p.tensor)
        if g.shape != p.tensor.shape:
            raise DimensionError(f"gradient for {p.name} has shape {tuple(g.shape)}, expected {tuple(p.tensor.shape)}")
        if not torch.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {p.name!r}")
        updates.append((p, g.detach()))

    lr = state.current_lr()
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for p, g in updates:
            m = state.m.get(p.name)
            if m is None:
                m = state.m[p.name] = torch.zeros_like(p.tensor)
                state.v[p.name] = torch.zeros_like(p.tensor)
            v = state.v[p.name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            if lr == 0.0:
                continue
            if state.weight_decay:
                p.tensor.mul_(1.0 - lr * state.weight_decay)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.tensor.addcdiv_(m / bc1, denom, value=-lr)
    return lr


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.tensor.grad for p in params if p.tensor.grad is not None]
    if not grads:
        return 0.0
    norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))
    if norm > max_norm:
        for g in grads:
            g.mul_(max_norm / (norm + 1e-12))
    return norm


def track_grads(params: Iterable[Parameter], flag: bool) -> None:
    for p in params:
        p.tensor.requires_grad_(flag)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    per_parameter: dict[str, float]
    n_coordinates: int

    @property
    def max_rel_error(self) -> float:
        return max(self.per_parameter.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol

    def format(self) -> str:
        width = max((len(n) for n in self.per_parameter), default=4)
        lines = [f"{name:<{width}}  {err:.3e}" for name, err in self.per_parameter.items()]
        lines.append(f"{'max':<{width}}  {self.max_rel_error:.3e}  ({self.n_coordinates} coordinates)")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[Parameter] | Sequence[torch.Tensor],
    eps: float = 1e-4,
    chunk: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and reads the given tensors; each tensor must
    be float64.  Only trainable parameters are checked.

    With ``chunk > 0`` and ``Parameter`` inputs, ``chunk`` perturbed copies
    of a tensor are evaluated at once under ``torch.func.vmap`` (``fn`` must
    then read parameters through their ``Parameter`` objects).  The numbers
    are the same central differences; only the evaluation is batched.
    """
    named: list[tuple[str, torch.Tensor]] = []
    for i, p in enumerate(params):
        if isinstance(p, Parameter):
            if p.trainable:
                named.append((p.name, p.tensor))
        else:
            named.append((f"param{i}", p))
    for name, t in named:
        if t.dtype != torch.float64:
            raise TypeError(f"grad_check needs float64 tensors; {name} is {t.dtype}")

    saved_flags = [t.requires_grad for _, t in named]
    for _, t in named:
        t.grad = None
        t.requires_grad_(True)
    try:
        base = fn()
        again = fn()
        if base.numel() != 1:
            raise DimensionError("grad_check needs a scalar-valued function")
        if base.item() != again.item():
            raise DeterminismError(f"fn is not deterministic: {base.item()!r} != {again.item()!r}")
        if base.requires_grad:
            base.backward()
        analytic = {name: (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)) for name, t in named}

        report: dict[str, float] = {}
        count = 0
        with torch.no_grad():
            by_name = {p.name: p for p in params if isinstance(p, Parameter)}
            for name, t in named:
                flat = t.view(-1)
                ana = analytic[name].view(-1)
                if chunk > 0 and name in by_name:
                    numeric = _batched_differences(fn, by_name[name], eps, chunk)
                    report[name] = max((relative_error(a, n) for a, n in zip(ana.tolist(), numeric.tolist())),
                                       default=0.0)
                    count += flat.numel()
                    continue
                worst = 0.0
                for j in range(flat.numel()):
                    orig = flat[j].item()
                    flat[j] = orig + eps
                    up = fn().item()
                    flat[j] = orig - eps
                    down = fn().item()
                    flat[j] = orig
                    numeric = (up - down) / (2.0 * eps)
                    worst = max(worst, relative_error(ana[j].item(), numeric))
                report[name] = worst
                count += flat.numel()
    finally:
        for (_, t), flag in zip(named, saved_flags):
            t.grad = None
            t.requires_grad_(flag)
    return GradCheckReport(report, count)


def _batched_differences(fn: Callable[[], torch.Tensor], param: Parameter, eps: float, chunk: int) -> torch.Tensor:
    base = param.tensor
    n = base.numel()

    def evaluate(perturbed: torch.Tensor) -> torch.Tensor:
        param.tensor = perturbed
        try:
            return fn()
        finally:
            param.tensor = base

    batched = torch.func.vmap(evaluate)
    out = torch.empty(n, dtype=torch.float64)
    flat = base.detach().reshape(-1)
    for start in range(0, n, chunk):
        idx = torch.arange(start, min(start + chunk, n))
        bump = torch.zeros(len(idx), n, dtype=base.dtype)
        bump[torch.arange(len(idx)), idx] = eps
        up = batched((flat + bump).view(len(idx), *base.shape))
        down = batched((flat - bump).view(len(idx), *base.shape))
        out[idx] = ((up - down) / (2.0 * eps)).double()
    return out
