"""Reverse-mode gradients, precision/determinism switches and a
finite-difference gradient checker.

The tape itself is torch's autograd graph; this module owns the contract
around it (scalar-only backward, zero fill for unreached parameters, an
explicit error for a consumed graph) and the independent central-difference
oracle used to audit it.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch


class GraphConsumedError(RuntimeError):
    pass


def set_precision(bits: int) -> torch.dtype:
    """Switch the default float dtype (32 for training, 64 for gradient tests)."""
    dtype = {32: torch.float32, 64: torch.float64}.get(bits)
    if dtype is None:
        raise ValueError(f"unsupported precision: {bits} bits")
    torch.set_default_dtype(dtype)
    return dtype


def set_deterministic(seed: int) -> torch.Generator:
    """Single-threaded, deterministic kernels, seeded global RNG."""
    os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` for every named parameter.

    Parameters the loss does not depend on get an explicit zero tensor,
    which covers a constant loss with no graph at all. The graph is freed afterwards; a second call raises GraphConsumedError.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    try:
        grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    except RuntimeError as exc:
        if "second time" in str(exc) or "freed" in str(exc):
            raise GraphConsumedError("computation graph already consumed by a previous backward") from exc
        raise
    return {
        n: (torch.zeros_like(t) if g is None else g)
        for n, t, g in zip(names, tensors, grads)
    }


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        worst = max(self.per_param, key=self.per_param.get) if self.per_param else "-"
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_error:.3e} (worst: {worst}, tol {self.tolerance:g})"


def numerical_grad(fn: Callable[[], torch.Tensor], param: torch.Tensor, eps: float = 1e-5,
                   coords=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``param`` entries.

    Returns an array shaped like ``param``; entries outside ``coords`` (flat
    indices) are left as NaN.
    """
    flat = param.data.view(-1)
    out = np.full(flat.numel(), np.nan)
    idx = range(flat.numel()) if coords is None else coords
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = float(fn())
            flat[i] = orig - eps
            minus = float(fn())
            flat[i] = orig
            out[i] = (plus - minus) / (2 * eps)
    return out.reshape(tuple(param.shape))


def grad_check(fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor], *,
               eps: float = 1e-5, tolerance: float = 1e-4, max_coords: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare autodiff gradients of ``fn`` against central differences.

    Relative error per parameter is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|, 1e-8)`` over the checked entries. With ``max_coords`` only a
    random subset of entries per parameter is perturbed.
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ValueError(f"grad_check needs 64-bit parameters; {name} is {p.dtype}")
    analytic = backward(fn(), params)
    rng = np.random.default_rng(seed)
    per_param = {}
    for name, p in params.items():
        n = p.numel()
        coords = None
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        num = numerical_grad(fn, p, eps, coords).reshape(-1)
        ana = analytic[name].detach().reshape(-1).cpu().numpy()
        sel = np.arange(n) if coords is None else coords
        diff = np.abs(ana[sel] - num[sel]).max()
        scale = max(np.abs(ana[sel]).max(), np.abs(num[sel]).max(), 1e-8)
        per_param[name] = float(diff / scale)
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, tolerance)
