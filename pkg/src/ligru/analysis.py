"""Diagnostics: gate cross-correlation, gradient norms, parameter counts.

Cross-correlation convention: ``C(a, b)[k] = sum_t a[t + k] * b[t]`` with
zeros outside the series (``numpy.correlate(a, b, "full")``).  A peak at a
negative lag means ``b`` lags behind ``a``; for ``a=[1,0,0]`` and
``b=[0,1,0]`` the peak sits at ``k = -1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .batch import reverse_padded
from .network import Network, StackConfig
from .numeric import ContractError
from .optim import build_batch_plan
from .trainer import make_batch

MAX_LAG_CAP = 200


# ---------------------------------------------------------------------------
# cross-correlation
# ---------------------------------------------------------------------------


def cross_correlation(a, b, max_lag: int | None = None, mean_removed: bool = False):
    """Sliding dot product over lags ``-max_lag..max_lag``; returns ``(lags, values)``.

    Raw by default; ``mean_removed`` subtracts each series' mean first.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ContractError("cross-correlation of an empty series")
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"series must be 1-D and equal length, got {a.shape} and {b.shape}")
    L = a.size
    if max_lag is None:
        max_lag = min(L - 1, MAX_LAG_CAP)
    if mean_removed:
        a = a - a.mean()
        b = b - b.mean()
    full = np.correlate(a, b, mode="full")  # lags -(L-1)..(L-1)
    lags = np.arange(-max_lag, max_lag + 1)
    values = np.zeros(lags.size)
    inside = np.abs(lags) <= L - 1
    values[inside] = full[lags[inside] + L - 1]
    return lags, values


@dataclass
class GateTrace:
    utt_id: str
    z: np.ndarray  # mean update-gate activation per valid frame
    r: np.ndarray | None  # mean reset-gate activation (None for cells without one)


@dataclass
class CorrelationReport:
    lags: np.ndarray
    czr: np.ndarray  # averaged over utterances, raw
    czz: np.ndarray
    normalized_peak: float  # max_k C(z,r) / max_k C(z,z)
    peak_lag: int
    zz_peak_at_zero: list = field(default_factory=list)  # per utterance
    utterances: int = 0
    # Cauchy-Schwarz: |C(z,r)[k]| <= |z| |r| per utterance, so the normalized
    # peak never exceeds sum_u |z_u| |r_u| / max_k sum_u C_u(z,z)[k]
    peak_bound: float = 1.0

    @property
    def normalized_czr(self):
        return self.czr / self.czz.max()

    @property
    def normalized_czz(self):
        return self.czz / self.czz.max()

    def table(self) -> str:
        lines = ["lag\tC(z,r)\tC(z,z)"]
        for k, a, b in zip(self.lags, self.normalized_czr, self.normalized_czz):
            lines.append(f"{k}\t{a:.6f}\t{b:.6f}")
        return "\n".join(lines) + "\n"

    def write_series(self, prefix) -> list[Path]:
        """Plot-ready ``lag value`` files for C(z,r) and C(z,z), both normalized."""
        out = []
        for tag, vals in (("czr", self.normalized_czr), ("czz", self.normalized_czz)):
            p = Path(f"{prefix}.{tag}.txt")
            p.write_text("".join(f"{k} {v:.9g}\n" for k, v in zip(self.lags, vals)))
            out.append(p)
        return out

    def summary(self) -> dict:
        return {"normalized_peak": self.normalized_peak, "peak_lag": self.peak_lag,
                "utterances": self.utterances, "peak_bound": self.peak_bound,
                "zz_peak_at_zero_all": bool(all(self.zz_peak_at_zero))}


def gate_traces(net: Network, ds, layer: int | None = None, batch_size: int = 8) -> list[GateTrace]:
    """Neuron-averaged gate series per utterance (eval mode, time order restored).

    ``layer=None`` averages over every layer and direction.
    """
    if net.config.cell not in ("gru", "m-gru", "li-gru"):
        raise ContractError(f"{net.config.cell} cells have no update gate")
    layers = range(len(net.layers)) if layer is None else [layer]
    out = [None] * len(ds)
    for ids in build_batch_plan(ds.lengths, batch_size):
        batch, _ = make_batch(ds, ids, net.dtype)
        _, cache = net.forward(batch, mode="eval")
        sums = {"z": 0.0, "r": 0.0}
        count = 0
        for li in layers:
            traces, _ = cache["layers"][li]
            for di, tr in enumerate(traces):
                for g in ("z", "r"):
                    if g not in tr.steps:
                        continue
                    series = tr.steps[g].mean(axis=2).T[..., None]  # (B, T, 1)
                    if di == 1:
                        series = reverse_padded(series, batch.lengths)
                    sums[g] = sums[g] + series[..., 0]
                count += 1
        for row, i in enumerate(ids):
            L = batch.lengths[row]
            z = sums["z"][row, :L] / count
            r = sums["r"][row, :L] / count if net.config.cell == "gru" else None
            out[i] = GateTrace(ds.ids[i], z, r)
    return out


def gate_redundancy_report(net: Network, ds, max_lag: int | None = None, mean_removed: bool = False,
                           layer: int | None = None) -> CorrelationReport:
    """Per-utterance C(z,r) and C(z,z), averaged over utterances, normalized by max C(z,z)."""
    if net.config.cell != "gru":
        raise ContractError(f"redundancy report needs a reset gate; {net.config.cell} has none")
    traces = gate_traces(net, ds, layer)
    return correlation_report(traces, max_lag, mean_removed)


def correlation_report(traces, max_lag=None, mean_removed=False) -> CorrelationReport:
    if not traces:
        raise ContractError("no utterances to analyse")
    if max_lag is None:
        max_lag = min(max(len(t.z) for t in traces) - 1, MAX_LAG_CAP)
    czr = czz = 0.0
    cross_energy = 0.0
    at_zero = []
    for tr in traces:
        z, r = (tr.z - tr.z.mean(), tr.r - tr.r.mean()) if mean_removed else (tr.z, tr.r)
        cross_energy += float(np.linalg.norm(z) * np.linalg.norm(r))
        lags, zr = cross_correlation(tr.z, tr.r, max_lag, mean_removed)
        _, zz = cross_correlation(tr.z, tr.z, max_lag, mean_removed)
        at_zero.append(bool(zz[lags == 0][0] >= zz.max()))
        czr = czr + zr
        czz = czz + zz
    czr = czr / len(traces)
    czz = czz / len(traces)
    k = int(np.argmax(czr))
    bound = cross_energy / len(traces) / czz.max()
    return CorrelationReport(lags, czr, czz, float(czr[k] / czz.max()), int(lags[k]), at_zero,
                             len(traces), float(bound))


# ---------------------------------------------------------------------------
# gradient norms
# ---------------------------------------------------------------------------

NORM_ORDER = ("W_h", "W_z", "W_r", "U_h", "U_z", "U_r")


class GradNormAccumulator:
    """Running mean of per-batch L2 norms, per qualified parameter name."""

    def __init__(self):
        self.sums: dict[str, float] = {}
        self.batches = 0

    def __call__(self, grads: dict):
        for k, g in grads.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(np.linalg.norm(g))
        self.batches += 1

    def per_parameter(self) -> dict:
        return {k: v / max(self.batches, 1) for k, v in self.sums.items()}

    def per_kind(self) -> dict:
        """Average over layers and directions for each recurrent matrix kind, table order."""
        per = self.per_parameter()
        out = {}
        for leaf in NORM_ORDER:
            vals = [v for k, v in per.items() if k.rsplit(".", 1)[-1] == leaf]
            if vals:
                out[leaf] = float(np.mean(vals))
        return out

    def table(self) -> str:
        return "parameter\tmean_l2_norm\n" + "".join(f"{k}\t{v:.6g}\n" for k, v in self.per_kind().items())


def gradient_norms(trainer, epochs: int) -> GradNormAccumulator:
    """Train ``epochs`` epochs, averaging every batch's gradient norms."""
    acc = GradNormAccumulator()
    previous = trainer.grad_hook
    trainer.grad_hook = acc
    try:
        trainer.run(epochs)
    finally:
        trainer.grad_hook = previous
    return acc


# ---------------------------------------------------------------------------
# parameter counts
# ---------------------------------------------------------------------------

# Written out independently of the cell classes so the two can be cross-checked.
_GROUPS = {"vanilla-relu": ("h",), "lstm": ("i", "f", "o", "g"), "gru": ("z", "r", "h"),
           "m-gru": ("z", "h"), "li-gru": ("z", "h")}
_BN_DEFAULT = {"li-gru"}
_NO_BIAS_WITH_BN = {"li-gru"}


@dataclass
class ParamCount:
    total: int
    groups: list  # (layer, direction, group, W, U, bias, bn)
    head: int

    def by_group(self) -> dict:
        out = {}
        for _, _, g, w, u, b, bn in self.groups:
            out[g] = out.get(g, 0) + w + u + b + bn
        return out

    def table(self) -> str:
        lines = ["layer\tdirection\tgroup\tW\tU\tbias\tbn\ttotal"]
        for li, di, g, w, u, b, bn in self.groups:
            lines.append(f"{li}\t{di}\t{g}\t{w}\t{u}\t{b}\t{bn}\t{w + u + b + bn}")
        lines.append(f"head\t-\t-\t-\t-\t-\t-\t{self.head}")
        lines.append(f"total\t-\t-\t-\t-\t-\t-\t{self.total}")
        return "\n".join(lines) + "\n"


def param_count(config: StackConfig, input_dim: int, output_dim: int | None = None) -> ParamCount:
    """Exact trainable-parameter count; ``output_dim=None`` leaves out the output layer."""
    n = config.units
    use_bn = (config.cell in _BN_DEFAULT) if config.bn is None else bool(config.bn)
    with_bias = not use_bn or config.cell not in _NO_BIAS_WITH_BN
    dirs = ("fwd", "bwd") if config.bidirectional else ("fwd",)
    rows = []
    d = input_dim
    for li in range(config.layers):
        for di in dirs:
            for g in _GROUPS[config.cell]:
                rows.append((li, di, g, d * n, n * n, n if with_bias else 0, 2 * n if use_bn else 0))
        d = len(dirs) * n
    head = 0 if output_dim is None else d * output_dim + output_dim
    total = sum(w + u + b + bn for _, _, _, w, u, b, bn in rows) + head
    return ParamCount(total, rows, head)
