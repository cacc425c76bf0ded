"""Recurrent cells with exact backpropagation through time.

Five cell families share one layout: the feed-forward projections ``x W`` of
every gate group are computed for all frames at once (optionally batch
normalized over the valid frames), then a time loop applies the recurrent
part.  Row-vector convention throughout: ``x`` is (batch, d), ``W_g`` is
(d, n), ``U_g`` is (n, n) and ``h`` is (batch, n).

The single-step functions (``gru_step`` and friends) are straightforward
restatements of the cell equations for one frame; the fused sequence path in
the cell classes is tested against them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .batch import Minibatch
from .normreg import BatchNormState, bn_backward, bn_forward
from .numeric import ContractError, glorot_init, orthogonal_init, relu, sigmoid

CELL_KINDS = ("vanilla-relu", "lstm", "gru", "m-gru", "li-gru")


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------


def _check_step(x, h_prev, p, gates):
    d, n = p["W_" + gates[0]].shape
    if x.shape[-1] != d or h_prev.shape[-1] != n:
        raise ContractError(f"step shapes x={x.shape}, h={h_prev.shape} do not match W ({d}, {n})")


def gru_step(x, h_prev, p):
    """One GRU step. Returns ``(h_t, trace)`` with the gate values."""
    _check_step(x, h_prev, p, "zrh")
    z = sigmoid(x @ p["W_z"] + h_prev @ p["U_z"] + p["b_z"])
    r = sigmoid(x @ p["W_r"] + h_prev @ p["U_r"] + p["b_r"])
    cand = np.tanh(x @ p["W_h"] + (h_prev * r) @ p["U_h"] + p["b_h"])
    h = z * h_prev + (1.0 - z) * cand
    return h, {"z": z, "r": r, "cand": cand, "h": h}


def mgru_step(x, h_prev, p):
    """GRU step without the reset gate."""
    _check_step(x, h_prev, p, "zh")
    z = sigmoid(x @ p["W_z"] + h_prev @ p["U_z"] + p["b_z"])
    cand = np.tanh(x @ p["W_h"] + h_prev @ p["U_h"] + p["b_h"])
    h = z * h_prev + (1.0 - z) * cand
    return h, {"z": z, "cand": cand, "h": h}


def ligru_step(x, h_prev, p, bn_z: BatchNormState, bn_h: BatchNormState,
               mode: str = "eval", context=None):
    """Li-GRU step: single update gate, ReLU candidate, normalized inputs.

    In ``train`` mode the normalization statistics come from ``context``,
    the (frames, d) block of every valid input frame in the minibatch; ``x``
    is expected to be among them.  Running statistics are not updated here.
    """
    _check_step(x, h_prev, p, "zh")
    if mode == "train":
        if context is None or len(context) < 2:
            raise ContractError("train-mode Li-GRU step needs a batch context of >= 2 frames")
        stats = []
        for g, st in (("z", bn_z), ("h", bn_h)):
            a = context @ p["W_" + g]
            stats.append((a.mean(axis=0), a.var(axis=0), st))
    else:
        stats = [(bn_z.running_mean, bn_z.running_var, bn_z), (bn_h.running_mean, bn_h.running_var, bn_h)]

    def norm(a, mean, var, st):
        return st.gamma * (a - mean) / np.sqrt(var + st.eps) + st.beta

    az = norm(x @ p["W_z"], *stats[0])
    ah = norm(x @ p["W_h"], *stats[1])
    z = sigmoid(az + h_prev @ p["U_z"])
    cand = relu(ah + h_prev @ p["U_h"])
    h = z * h_prev + (1.0 - z) * cand
    return h, {"z": z, "cand": cand, "h": h}


def relu_rnn_step(x, h_prev, p):
    _check_step(x, h_prev, p, "h")
    h = relu(x @ p["W_h"] + h_prev @ p["U_h"] + p["b_h"])
    return h, {"h": h}


def lstm_step(x, state, p):
    """Peephole-free LSTM step; ``state`` is ``(h_prev, c_prev)``."""
    h_prev, c_prev = state
    _check_step(x, h_prev, p, "ifog")
    i = sigmoid(x @ p["W_i"] + h_prev @ p["U_i"] + p["b_i"])
    f = sigmoid(x @ p["W_f"] + h_prev @ p["U_f"] + p["b_f"])
    o = sigmoid(x @ p["W_o"] + h_prev @ p["U_o"] + p["b_o"])
    g = np.tanh(x @ p["W_g"] + h_prev @ p["U_g"] + p["b_g"])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c, {"i": i, "f": f, "o": o, "g": g, "c": c, "h": h}


# ---------------------------------------------------------------------------
# sequence cells
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Everything the backward pass (and gate analysis) needs.

    Per-step arrays are time-major, (T, batch, n).  ``states`` is the
    (batch, T, n) output with zeros at padded frames.
    """

    kind: str
    x: np.ndarray
    mask: np.ndarray
    drop: np.ndarray | None
    states: np.ndarray
    steps: dict = field(default_factory=dict)
    bn_caches: dict | None = None


class RecurrentCell:
    """Base class: parameter bookkeeping and the feed-forward half."""

    kind = ""
    groups: tuple = ()
    default_bn = False
    uses_bias_with_bn = True

    def __init__(self, input_dim: int, units: int, rng: np.random.Generator, bn: bool | None = None,
                 recurrent_init: str = "orthogonal", init_scale: float = 1.0,
                 gamma_init: float = 0.1, dtype=np.float64):
        if input_dim < 1 or units < 1:
            raise ContractError(f"cell needs positive sizes, got d={input_dim}, n={units}")
        self.input_dim = input_dim
        self.units = units
        self.dtype = np.dtype(dtype)
        self.use_bn = self.default_bn if bn is None else bool(bn)
        self.params: dict[str, np.ndarray] = {}
        self.bn: dict[str, BatchNormState] = {}
        for g in self.groups:
            self.params["W_" + g] = init_scale * glorot_init(input_dim, units, rng, dtype)
        for g in self.groups:
            if recurrent_init == "orthogonal":
                u = orthogonal_init(units, rng, dtype)
            elif recurrent_init == "glorot":
                u = glorot_init(units, units, rng, dtype)
            else:
                raise ContractError(f"unknown recurrent init {recurrent_init!r}")
            self.params["U_" + g] = init_scale * u
        if not self.use_bn or self.uses_bias_with_bn:
            for g in self.groups:
                self.params["b_" + g] = np.full(units, self._bias_init(g), dtype=dtype)
        if self.use_bn:
            for g in self.groups:
                st = BatchNormState.create(units, gamma=gamma_init, dtype=dtype)
                self.bn[g] = st
                self.params["gamma_" + g] = st.gamma
                self.params["beta_" + g] = st.beta

    def _bias_init(self, group: str) -> float:
        return 0.0

    @property
    def has_bias(self) -> bool:
        return "b_" + self.groups[0] in self.params

    def buffers(self) -> dict:
        """Non-trainable state (batch-norm running statistics)."""
        out = {}
        for g, st in self.bn.items():
            out["running_mean_" + g] = st.running_mean
            out["running_var_" + g] = st.running_var
        return out

    def _cat(self, prefix, groups=None):
        return np.concatenate([self.params[prefix + g] for g in (groups or self.groups)], axis=-1)

    # -- public API ---------------------------------------------------------

    def forward(self, x, mask=None, mode: str = "train", drop=None, update_stats: bool = True):
        """Run the cell over a padded (batch, T, d) block from a zero state."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[2] != self.input_dim:
            raise ContractError(f"expected (batch, T, {self.input_dim}) input, got {x.shape}")
        if mask is None:
            mask = np.ones(x.shape[:2], dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if drop is not None and drop.shape != (x.shape[0], self.units):
            raise ContractError(f"dropout mask shape {drop.shape} != {(x.shape[0], self.units)}")
        a, bn_caches = self._feedforward(x, mask, mode, update_stats)
        states, steps = self._recur(a, mask, drop)
        trace = ForwardTrace(self.kind, x, mask, drop, states, steps, bn_caches)
        return states, trace

    def backward(self, d_states, trace: ForwardTrace):
        """Exact BPTT. Returns ``(dx, grads)`` with ``grads`` keyed like ``params``."""
        if trace.kind != self.kind or d_states.shape != trace.states.shape:
            raise ContractError("trace does not belong to this cell / upstream shape mismatch")
        grads = {}
        da = self._recur_back(d_states, trace, grads)
        dx = self._feedforward_back(da, trace, grads)
        return dx, {k: grads[k] for k in self.params}

    # -- feed-forward part --------------------------------------------------

    def _feedforward(self, x, mask, mode, update_stats):
        B, T, d = x.shape
        n, k = self.units, len(self.groups)
        a = x.reshape(B * T, d) @ self._cat("W_")
        caches = None
        if self.use_bn:
            valid = mask.reshape(-1)
            av = a[valid]
            caches = {}
            outs = []
            for j, g in enumerate(self.groups):
                out, caches[g] = bn_forward(av[:, j * n:(j + 1) * n], self.bn[g], mode, update_stats)
                outs.append(out)
            a = np.zeros_like(a)
            a[valid] = np.concatenate(outs, axis=1)
        if self.has_bias:
            a = a + self._cat("b_")
        return a.reshape(B, T, k * n), caches

    def _feedforward_back(self, da, trace, grads):
        B, T, kn = da.shape
        n, d = self.units, self.input_dim
        flat = da.reshape(B * T, kn)
        if self.has_bias:
            db = flat.sum(axis=0)
            for j, g in enumerate(self.groups):
                grads["b_" + g] = db[j * n:(j + 1) * n]
        if self.use_bn:
            valid = trace.mask.reshape(-1)
            dv = flat[valid]
            draw = np.zeros_like(flat)
            parts = []
            for j, g in enumerate(self.groups):
                d_in, dgamma, dbeta = bn_backward(trace.bn_caches[g], dv[:, j * n:(j + 1) * n])
                parts.append(d_in)
                grads["gamma_" + g] = dgamma
                grads["beta_" + g] = dbeta
            draw[valid] = np.concatenate(parts, axis=1)
            flat = draw
        xf = trace.x.reshape(B * T, d)
        dW = xf.T @ flat
        for j, g in enumerate(self.groups):
            grads["W_" + g] = dW[:, j * n:(j + 1) * n]
        dx = flat @ self._cat("W_").T
        return dx.reshape(B, T, d)

    # -- recurrent part (per family) -----------------------------------------

    def _recur(self, a, mask, drop):
        raise NotImplementedError

    def _recur_back(self, d_states, trace, grads):
        raise NotImplementedError


class _GRUFamily(RecurrentCell):
    reset_gate = True
    candidate = "tanh"

    def _act(self, pre):
        return np.tanh(pre) if self.candidate == "tanh" else relu(pre)

    def _act_grad(self, pre, cand):
        return 1.0 - cand * cand if self.candidate == "tanh" else (pre > 0).astype(pre.dtype)

    def _recur(self, a, mask, drop):
        B, T, _ = a.shape
        n = self.units
        h = np.zeros((B, n), dtype=self.dtype)
        states = np.zeros((B, T, n), dtype=self.dtype)
        keys = ("h_prev", "hd", "z", "pre", "cand") + (("r", "hr") if self.reset_gate else ())
        steps = {k: np.empty((T, B, n), dtype=self.dtype) for k in keys}
        if self.reset_gate:
            U_zr = self._cat("U_", "zr")
            U_h = self.params["U_h"]
        else:
            U_zh = self._cat("U_", "zh")
        for t in range(T):
            at = a[:, t]
            hd = h if drop is None else h * drop
            if self.reset_gate:
                rec = hd @ U_zr
                z = sigmoid(at[:, :n] + rec[:, :n])
                r = sigmoid(at[:, n:2 * n] + rec[:, n:])
                hr = hd * r
                pre = at[:, 2 * n:] + hr @ U_h
                steps["r"][t] = r
                steps["hr"][t] = hr
            else:
                rec = hd @ U_zh
                z = sigmoid(at[:, :n] + rec[:, :n])
                pre = at[:, n:] + rec[:, n:]
            cand = self._act(pre)
            h_new = z * h + (1.0 - z) * cand
            steps["h_prev"][t] = h
            steps["hd"][t] = hd
            steps["z"][t] = z
            steps["pre"][t] = pre
            steps["cand"][t] = cand
            m = mask[:, t, None]
            states[:, t] = np.where(m, h_new, 0.0)
            h = np.where(m, h_new, h)
        return states, steps

    def _recur_back(self, d_states, trace, grads):
        s = trace.steps
        T, B, n = s["z"].shape
        k = len(self.groups)
        drop = trace.drop
        da = np.zeros((B, T, k * n), dtype=self.dtype)
        dgate = np.zeros((T, B, 2 * n), dtype=self.dtype)
        dcand_pre = np.zeros((T, B, n), dtype=self.dtype) if self.reset_gate else None
        if self.reset_gate:
            U_zr = self._cat("U_", "zr")
            U_h = self.params["U_h"]
        else:
            U_zh = self._cat("U_", "zh")
        carry = np.zeros((B, n), dtype=self.dtype)
        for t in range(T - 1, -1, -1):
            m = trace.mask[:, t, None]
            g = np.where(m, d_states[:, t] + carry, 0.0)
            z, cand, h_prev = s["z"][t], s["cand"][t], s["h_prev"][t]
            dz_pre = g * (h_prev - cand) * z * (1.0 - z)
            dpre = g * (1.0 - z) * self._act_grad(s["pre"][t], cand)
            if self.reset_gate:
                r, hd = s["r"][t], s["hd"][t]
                dhr = dpre @ U_h.T
                dr_pre = dhr * hd * r * (1.0 - r)
                dzr = np.concatenate([dz_pre, dr_pre], axis=1)
                dhd = dhr * r + dzr @ U_zr.T
                dgate[t] = dzr
                dcand_pre[t] = dpre
                da[:, t] = np.concatenate([dzr, dpre], axis=1)
            else:
                dzh = np.concatenate([dz_pre, dpre], axis=1)
                dhd = dzh @ U_zh.T
                dgate[t] = dzh
                da[:, t] = dzh
            if drop is not None:
                dhd = dhd * drop
            carry = g * z + dhd + np.where(m, 0.0, carry)
        hd_flat = s["hd"].reshape(T * B, n)
        dU = hd_flat.T @ dgate.reshape(T * B, 2 * n)
        if self.reset_gate:
            grads["U_z"], grads["U_r"] = dU[:, :n], dU[:, n:]
            grads["U_h"] = s["hr"].reshape(T * B, n).T @ dcand_pre.reshape(T * B, n)
        else:
            grads["U_z"], grads["U_h"] = dU[:, :n], dU[:, n:]
        return da


class GRUCell(_GRUFamily):
    kind = "gru"
    groups = ("z", "r", "h")


class MGRUCell(_GRUFamily):
    kind = "m-gru"
    groups = ("z", "h")
    reset_gate = False


class LiGRUCell(_GRUFamily):
    """Single update gate, ReLU candidate, batch norm on ``x W`` only.

    With batch norm the shift ``beta`` plays the role of the biases, so no
    ``b_*`` parameters exist.  Without batch norm biases are kept.
    """

    kind = "li-gru"
    groups = ("z", "h")
    reset_gate = False
    candidate = "relu"
    default_bn = True
    uses_bias_with_bn = False


class ReLURNNCell(RecurrentCell):
    """Ungated recurrent layer: ``h_t = ReLU(x W + h_{t-1} U + b)``."""

    kind = "vanilla-relu"
    groups = ("h",)

    def _recur(self, a, mask, drop):
        B, T, n = a.shape
        h = np.zeros((B, n), dtype=self.dtype)
        states = np.zeros((B, T, n), dtype=self.dtype)
        steps = {k: np.empty((T, B, n), dtype=self.dtype) for k in ("hd", "pre")}
        U = self.params["U_h"]
        for t in range(T):
            hd = h if drop is None else h * drop
            pre = a[:, t] + hd @ U
            h_new = relu(pre)
            steps["hd"][t] = hd
            steps["pre"][t] = pre
            m = mask[:, t, None]
            states[:, t] = np.where(m, h_new, 0.0)
            h = np.where(m, h_new, h)
        return states, steps

    def _recur_back(self, d_states, trace, grads):
        s = trace.steps
        T, B, n = s["pre"].shape
        da = np.zeros((B, T, n), dtype=self.dtype)
        U = self.params["U_h"]
        carry = np.zeros((B, n), dtype=self.dtype)
        for t in range(T - 1, -1, -1):
            m = trace.mask[:, t, None]
            g = np.where(m, d_states[:, t] + carry, 0.0)
            dpre = g * (s["pre"][t] > 0)
            da[:, t] = dpre
            dhd = dpre @ U.T
            if trace.drop is not None:
                dhd = dhd * trace.drop
            carry = dhd + np.where(m, 0.0, carry)
        grads["U_h"] = s["hd"].reshape(T * B, n).T @ da.transpose(1, 0, 2).reshape(T * B, n)
        return da


class LSTMCell(RecurrentCell):
    """Peephole-free LSTM; the forget-gate bias starts at 1."""

    kind = "lstm"
    groups = ("i", "f", "o", "g")

    def _bias_init(self, group):
        return 1.0 if group == "f" else 0.0

    def _recur(self, a, mask, drop):
        B, T, _ = a.shape
        n = self.units
        h = np.zeros((B, n), dtype=self.dtype)
        c = np.zeros((B, n), dtype=self.dtype)
        states = np.zeros((B, T, n), dtype=self.dtype)
        keys = ("hd", "c_prev", "i", "f", "o", "g", "tc")
        steps = {k: np.empty((T, B, n), dtype=self.dtype) for k in keys}
        U = self._cat("U_")
        for t in range(T):
            hd = h if drop is None else h * drop
            pre = a[:, t] + hd @ U
            i = sigmoid(pre[:, :n])
            f = sigmoid(pre[:, n:2 * n])
            o = sigmoid(pre[:, 2 * n:3 * n])
            g = np.tanh(pre[:, 3 * n:])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            for key, val in (("hd", hd), ("c_prev", c), ("i", i), ("f", f), ("o", o), ("g", g), ("tc", tc)):
                steps[key][t] = val
            m = mask[:, t, None]
            states[:, t] = np.where(m, h_new, 0.0)
            h = np.where(m, h_new, h)
            c = np.where(m, c_new, c)
        return states, steps

    def _recur_back(self, d_states, trace, grads):
        s = trace.steps
        T, B, n = s["i"].shape
        da = np.zeros((B, T, 4 * n), dtype=self.dtype)
        U = self._cat("U_")
        dh_carry = np.zeros((B, n), dtype=self.dtype)
        dc_carry = np.zeros((B, n), dtype=self.dtype)
        for t in range(T - 1, -1, -1):
            m = trace.mask[:, t, None]
            gh = np.where(m, d_states[:, t] + dh_carry, 0.0)
            i, f, o, g, tc = s["i"][t], s["f"][t], s["o"][t], s["g"][t], s["tc"][t]
            dc = np.where(m, dc_carry, 0.0) + gh * o * (1.0 - tc * tc)
            dpre = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * s["c_prev"][t] * f * (1.0 - f),
                gh * tc * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ], axis=1)
            da[:, t] = dpre
            dhd = dpre @ U.T
            if trace.drop is not None:
                dhd = dhd * trace.drop
            dh_carry = dhd + np.where(m, 0.0, dh_carry)
            dc_carry = dc * f + np.where(m, 0.0, dc_carry)
        dU = s["hd"].reshape(T * B, n).T @ da.transpose(1, 0, 2).reshape(T * B, 4 * n)
        for j, grp in enumerate(self.groups):
            grads["U_" + grp] = dU[:, j * n:(j + 1) * n]
        return da


_CELLS = {c.kind: c for c in (ReLURNNCell, LSTMCell, GRUCell, MGRUCell, LiGRUCell)}


def make_cell(kind: str, input_dim: int, units: int, rng: np.random.Generator, **kw) -> RecurrentCell:
    try:
        cls = _CELLS[kind]
    except KeyError:
        raise ContractError(f"unknown cell kind {kind!r}; choose from {CELL_KINDS}") from None
    return cls(input_dim, units, rng, **kw)


def sequence_forward(cell: RecurrentCell, batch: Minibatch, mode: str = "train", drop=None):
    """Run ``cell`` over a minibatch; returns ``(states, trace)``."""
    return cell.forward(batch.x, batch.mask, mode=mode, drop=drop)


def sequence_backward(cell: RecurrentCell, trace: ForwardTrace, d_states):
    """Gradients of a scalar loss given ``d loss / d states``."""
    return cell.backward(d_states, trace)
