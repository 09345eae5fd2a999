"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward
from .errors import CheckError


@dataclass
class GradCheckReport:
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.max_rel_err.items() if not v < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failed

    def summary(self) -> str:
        lines = [f"{'PASS' if v < self.tol else 'FAIL'} {k}: {v:.3e}" for k, v in self.max_rel_err.items()]
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest coordinate-wise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(f: Callable[[], Tensor], p: Tensor, h: float) -> np.ndarray:
    if not p.data.flags.c_contiguous:
        p.data = np.ascontiguousarray(p.data)
    out = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    o = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        o[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    analytic: dict[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` to central differences.

    ``f`` rebuilds the graph from the current parameter values on every call.
    ``analytic`` overrides the backprop gradient for named parameters, which is
    how negative controls inject a corrupted gradient.
    """
    if h <= 0:
        raise CheckError("h must be positive")
    base = f()
    if f().item() != base.item():
        raise CheckError("program is not deterministic")
    for p in params:
        p.grad = None
    backward(base)
    report = GradCheckReport(tol=tol)
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        a = p.grad if p.grad is not None else np.zeros_like(p.data)
        if analytic and name in analytic:
            a = analytic[name]
        n = numeric_grad(f, p, h)
        report.max_rel_err[name] = relative_error(a, n, floor)
    return report
