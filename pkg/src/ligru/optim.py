"""Adam, the learning-rate halving rule and length-sorted batch plans."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numeric import ContractError


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place.

    No clipping of any kind.  A non-finite gradient, or an update that
    overflows, raises before anything is modified.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    staged = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for name, g in grads.items():
            p = params[name]
            m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
            v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * (g * g)
            new_p = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            if not (np.all(np.isfinite(v)) and np.all(np.isfinite(new_p))):
                raise NonFiniteGradientError(f"Adam update for {name} overflowed")
            staged[name] = (m.astype(p.dtype), v.astype(p.dtype), new_p)
    state.t = t
    for name, (m, v, new_p) in staged.items():
        state.m[name] = m
        state.v[name] = v
        params[name][...] = new_p


@dataclass
class LrSchedule:
    """Halve the rate whenever the dev error improves by less than ``threshold``.

    Improvement is the absolute decrease of the dev error rate (a fraction,
    lower is better) from the previous epoch.
    """

    lr: float
    threshold: float = 0.001
    history: list = field(default_factory=list)

    def update(self, dev_metric: float) -> float:
        if self.history:
            improvement = self.history[-1] - dev_metric
            if improvement < self.threshold:
                self.lr /= 2.0
        self.history.append(float(dev_metric))
        return self.lr


def schedule_update(sched: LrSchedule, dev_metric: float) -> float:
    return sched.update(dev_metric)


@dataclass
class BatchPlan:
    batches: list
    batch_size: int

    def __iter__(self):
        return iter(self.batches)

    def __len__(self):
        return len(self.batches)


def build_batch_plan(lengths, batch_size: int = 8) -> BatchPlan:
    """Sort ids by length (ties by id) and cut the order into consecutive batches."""
    if batch_size < 1:
        raise ContractError(f"batch size must be >= 1, got {batch_size}")
    lengths = list(lengths)
    if not lengths:
        raise ContractError("cannot plan batches for an empty dataset")
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return BatchPlan(batches, batch_size)


def padded_frames(plan_batches, lengths) -> int:
    """Total frames after padding each batch to its longest member."""
    return sum(len(b) * max(lengths[i] for i in b) for b in plan_batches)
