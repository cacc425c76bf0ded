"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import CELL_KINDS, make_cell
from .numeric import make_rng

FD_STEP = 1e-5
REL_TOL = 1e-4
KINK_MARGIN = 1e-3


def rel_error(a, f, floor: float = 1e-8):
    """``|a - f| / max(|a|, |f|, floor)``, elementwise."""
    a = np.asarray(a, dtype=float)
    f = np.asarray(f, dtype=float)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def numeric_grad(fn, arr: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (mutated in place, restored)."""
    grad = np.zeros_like(arr, dtype=float)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn()
        flat[i] = orig - step
        minus = fn()
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * step)
    return grad


@dataclass
class CheckResult:
    kind: str
    seed: int
    shape: tuple
    max_rel_error: dict

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())

    @property
    def passed(self) -> bool:
        return self.worst < REL_TOL


def _relu_preacts_clear(cell, trace) -> bool:
    if cell.kind not in ("li-gru", "vanilla-relu"):
        return True
    pre = trace.steps["pre"].transpose(1, 0, 2)[trace.mask]
    return bool(np.all(np.abs(pre) >= KINK_MARGIN))


def cell_instance(kind: str, seed: int, batch: int = 4, max_units: int = 8, max_dim: int = 6,
                  max_len: int = 12, bn=None, with_dropout=None):
    """Random small cell + padded input, avoiding ReLU kinks within ``KINK_MARGIN``.

    Returns ``(cell, x, mask, drop, upstream)``.
    """
    for attempt in range(1000):
        rng = make_rng(seed * 1000 + attempt)
        n = int(rng.integers(2, max_units + 1))
        d = int(rng.integers(2, max_dim + 1))
        T = int(rng.integers(2, max_len + 1))
        cell = make_cell(kind, d, n, rng, bn=bn)
        if cell.use_bn:
            # move gamma/beta off their init so their gradients are non-trivial
            for st in cell.bn.values():
                st.gamma[...] = rng.uniform(0.5, 1.5, n)
                st.beta[...] = rng.normal(0.0, 0.2, n)
        lengths = rng.integers(1, T + 1, size=batch)
        lengths[0] = T
        mask = np.arange(T)[None, :] < lengths[:, None]
        x = rng.normal(size=(batch, T, d)) * mask[:, :, None]
        use_drop = bool(rng.integers(0, 2)) if with_dropout is None else with_dropout
        drop = None
        if use_drop:
            drop = (rng.random((batch, n)) < 0.8) / 0.8
        upstream = rng.normal(size=(batch, T, n))
        _, trace = cell.forward(x, mask, "train", drop, update_stats=False)
        if _relu_preacts_clear(cell, trace):
            return cell, x, mask, drop, upstream
    raise RuntimeError("could not draw a kink-free instance")


def check_cell(kind: str, seed: int, **kw) -> CheckResult:
    """Compare every parameter and input gradient with central differences."""
    cell, x, mask, drop, upstream = cell_instance(kind, seed, **kw)

    def loss():
        states, _ = cell.forward(x, mask, "train", drop, update_stats=False)
        return float(np.sum(upstream * states))

    states, trace = cell.forward(x, mask, "train", drop, update_stats=False)
    dx, grads = cell.backward(upstream, trace)
    errors = {}
    for name, value in cell.params.items():
        num = numeric_grad(loss, value)
        errors[name] = float(rel_error(grads[name], num).max())
    num_x = numeric_grad(loss, x)
    errors["x"] = float(rel_error(dx, num_x).max())
    return CheckResult(kind, seed, (x.shape, cell.units), errors)


def run_suite(kinds=CELL_KINDS, seeds=range(10), **kw):
    """All cell kinds x seeds; returns the list of results."""
    return [check_cell(kind, seed, **kw) for kind in kinds for seed in seeds]
