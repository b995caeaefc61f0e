"""Central finite-difference gradient checking.

Relative error for one tensor is ``max|analytic - numeric| / max(max|analytic|,
max|numeric|, floor)``: the error is measured against the gradient's own scale
rather than entry by entry, so entries that are zero up to rounding do not
produce spurious failures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad

DEFAULT_STEP = 1e-5
SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_abs_err: float
    max_rel_err: float
    n_checked: int
    grad_scale: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _select(size: int, max_entries: int | None, rng: np.random.Generator) -> np.ndarray:
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_entries, replace=False))


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, flat_indices, h: float = DEFAULT_STEP):
    """Central differences of ``fn()`` w.r.t. selected entries of ``t`` (modified in place)."""
    flat = t.data.reshape(-1)
    out = np.empty(len(flat_indices))
    with no_grad():
        for n, i in enumerate(flat_indices):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            out[n] = (fp - fm) / (2 * h)
    return out


def check_gradients(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = DEFAULT_STEP,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, GradCheckResult]:
    """Compare reverse-mode gradients of the scalar ``fn()`` with central differences.

    ``max_entries`` caps how many entries per tensor are probed (chosen with a
    seeded generator); ``None`` probes all of them.
    """
    for p in params.values():
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    rng = np.random.default_rng(seed)
    results = {}
    for name, p in params.items():
        idx = _select(p.size, max_entries, rng)
        num = numeric_grad(fn, p, idx, h)
        ana = analytic[name].reshape(-1)[idx]
        abs_err = float(np.max(np.abs(ana - num))) if len(idx) else 0.0
        scale = max(float(np.max(np.abs(ana), initial=0.0)),
                    float(np.max(np.abs(num), initial=0.0)))
        results[name] = GradCheckResult(
            name=name,
            max_abs_err=abs_err,
            max_rel_err=abs_err / max(scale, SCALE_FLOOR),
            n_checked=len(idx),
            grad_scale=scale,
        )
        p.grad = None
    return results


def overall_relative_error(results: Mapping[str, GradCheckResult]) -> float:
    """Worst absolute error over all tensors, relative to the largest gradient entry.

    Used for whole-model checks, where some tensors have a gradient that is
    exactly zero in theory (e.g. attention key biases) and only rounding noise
    in practice.
    """
    if not results:
        return 0.0
    err = max(r.max_abs_err for r in results.values())
    scale = max(r.grad_scale for r in results.values())
    return err / max(scale, SCALE_FLOOR)
