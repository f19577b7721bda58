"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradcheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    @property
    def failures(self) -> list[tuple[int, ...]]:
        return [tuple(int(i) for i in idx) for idx in np.argwhere(self.rel_error >= self.tol)]

    def __str__(self) -> str:
        status = "pass" if self.passed else f"FAIL ({len(self.failures)} elements)"
        return f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g})"


def relative_error(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    # floor keeps elements whose true gradient is ~0 from dividing by noise
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6, tol: float = 1e-4,
              floor: float = 1e-6) -> GradcheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    ``x.data`` is perturbed in place and restored afterwards.
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * eps)
    return GradcheckReport(analytic, numeric, relative_error(analytic, numeric, floor), tol)


def gradcheck_many(f: Callable[[], Tensor], tensors: Sequence[Tensor], **kw) -> dict[int, GradcheckReport]:
    """Gradcheck a closure over several inputs, one report per tensor position."""
    return {i: gradcheck(lambda _t: f(), t, **kw) for i, t in enumerate(tensors)}
