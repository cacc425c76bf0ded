"""Bidirectional recurrent stacks with a framewise softmax or a CTC output layer."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .batch import Minibatch, reverse_padded
from .cells import CELL_KINDS, make_cell
from .ctc import ctc_loss
from .normreg import sample_dropout_mask
from .numeric import ContractError, glorot_init

HEADS = ("framewise", "ctc")


@dataclass
class StackConfig:
    cell: str = "li-gru"
    layers: int = 1
    units: int = 32
    bidirectional: bool = True
    keep_prob: float = 1.0
    bn: bool | None = None  # None: batch norm for li-gru only
    recurrent_init: str = "orthogonal"
    init_scale: float = 1.0
    gamma_init: float = 0.1

    def __post_init__(self):
        if self.cell not in CELL_KINDS:
            raise ContractError(f"unknown cell kind {self.cell!r}")
        if self.layers < 1 or self.units < 1:
            raise ContractError("layers and units must be >= 1")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ContractError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        if self.recurrent_init not in ("orthogonal", "glorot"):
            raise ContractError(f"unknown recurrent init {self.recurrent_init!r}")

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def output_width(self) -> int:
        return self.directions * self.units

    def to_dict(self) -> dict:
        return asdict(self)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_ce_head(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Mean negative log-likelihood over valid frames and its gradient w.r.t. ``logits``."""
    C = logits.shape[-1]
    targets = np.asarray(targets)
    valid = np.asarray(mask, dtype=bool)
    if np.any((targets[valid] < 0) | (targets[valid] >= C)):
        raise ContractError(f"framewise target outside [0, {C})")
    frames = int(valid.sum())
    if frames == 0:
        raise ContractError("no valid frames")
    lp = log_softmax(logits)
    safe = np.where(valid, targets, 0)
    picked = np.take_along_axis(lp, safe[..., None], axis=-1)[..., 0]
    loss = -float(picked[valid].sum()) / frames
    grad = np.exp(lp)
    np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
    grad *= valid[..., None] / frames
    return loss, grad


class Network:
    """Stacked (bi)directional recurrent layers plus a linear output layer.

    ``num_classes`` counts real labels; the CTC head adds one blank output at
    the last index.
    """

    def __init__(self, config: StackConfig, input_dim: int, num_classes: int, head: str = "framewise",
                 rng: np.random.Generator | None = None, dtype=np.float64):
        if head not in HEADS:
            raise ContractError(f"unknown head {head!r}")
        if rng is None:
            raise ContractError("an explicit random generator is required")
        self.config = config
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.head = head
        self.dtype = np.dtype(dtype)
        self.layers = []
        d = input_dim
        for _ in range(config.layers):
            cells = [
                make_cell(config.cell, d, config.units, rng, bn=config.bn,
                          recurrent_init=config.recurrent_init, init_scale=config.init_scale,
                          gamma_init=config.gamma_init, dtype=dtype)
                for _ in range(config.directions)
            ]
            self.layers.append(cells)
            d = config.output_width
        self.num_outputs = num_classes + (1 if head == "ctc" else 0)
        self.W_out = config.init_scale * glorot_init(d, self.num_outputs, rng, dtype)
        self.b_out = np.zeros(self.num_outputs, dtype=dtype)

    # -- parameter access ----------------------------------------------------

    def _named_cells(self):
        for li, cells in enumerate(self.layers):
            for di, cell in enumerate(cells):
                yield f"l{li}.{'fwd' if di == 0 else 'bwd'}", cell

    def parameters(self) -> dict:
        """Trainable arrays by qualified name; updating them in place updates the model."""
        out = {}
        for prefix, cell in self._named_cells():
            for k, v in cell.params.items():
                out[f"{prefix}.{k}"] = v
        out["out.W"] = self.W_out
        out["out.b"] = self.b_out
        return out

    def buffers(self) -> dict:
        out = {}
        for prefix, cell in self._named_cells():
            for k, v in cell.buffers().items():
                out[f"{prefix}.{k}"] = v
        return out

    def num_parameters(self) -> int:
        return sum(v.size for v in self.parameters().values())

    # -- forward / backward --------------------------------------------------

    def forward(self, batch: Minibatch, mode: str = "eval", rng: np.random.Generator | None = None,
                update_stats: bool = True):
        """Return ``(logits, cache)``; logits are (batch, T, num_outputs)."""
        if batch.x.shape[2] != self.input_dim:
            raise ContractError(f"input dimension {batch.x.shape[2]} != {self.input_dim}")
        cfg = self.config
        train = mode == "train"
        dropping = train and cfg.keep_prob < 1.0
        if dropping and rng is None:
            raise ContractError("dropout in train mode needs a random generator")
        x = batch.x.astype(self.dtype, copy=False)
        mask, lengths = batch.mask, batch.lengths
        B = x.shape[0]
        layer_caches = []
        for cells in self.layers:
            halves, traces = [], []
            for di, cell in enumerate(cells):
                drop = None
                if dropping:
                    drop = sample_dropout_mask(B, cell.units, cfg.keep_prob, rng, dtype=self.dtype).values
                xin = x if di == 0 else reverse_padded(x, lengths)
                states, trace = cell.forward(xin, mask, mode, drop, update_stats)
                halves.append(states if di == 0 else reverse_padded(states, lengths))
                traces.append(trace)
            x = np.concatenate(halves, axis=2) if len(halves) > 1 else halves[0]
            out_mask = None
            if dropping:
                out_mask = sample_dropout_mask(B, x.shape[2], cfg.keep_prob, rng, dtype=self.dtype).values
                x = x * out_mask[:, None, :]
            layer_caches.append((traces, out_mask))
        logits = x @ self.W_out + self.b_out
        return logits, {"layers": layer_caches, "top": x, "lengths": lengths, "mask": mask}

    def backward(self, d_logits: np.ndarray, cache) -> dict:
        """Parameter gradients keyed like ``parameters()``."""
        top = cache["top"]
        B, T, width = top.shape
        C = d_logits.shape[-1]
        grads = {
            "out.W": top.reshape(B * T, width).T @ d_logits.reshape(B * T, C),
            "out.b": d_logits.reshape(B * T, C).sum(axis=0),
        }
        d_x = d_logits @ self.W_out.T
        lengths = cache["lengths"]
        n = self.config.units
        for li in range(len(self.layers) - 1, -1, -1):
            traces, out_mask = cache["layers"][li]
            if out_mask is not None:
                d_x = d_x * out_mask[:, None, :]
            d_in = 0.0
            for di, cell in enumerate(self.layers[li]):
                prefix = f"l{li}.{'fwd' if di == 0 else 'bwd'}"
                d_half = d_x[:, :, di * n:(di + 1) * n]
                if di == 1:
                    d_half = reverse_padded(d_half, lengths)
                dx, g = cell.backward(d_half, traces[di])
                if di == 1:
                    dx = reverse_padded(dx, lengths)
                d_in = d_in + dx
                for k, v in g.items():
                    grads[f"{prefix}.{k}"] = v
            d_x = d_in
        return {k: grads[k] for k in self.parameters()}

    def loss(self, batch: Minibatch, targets, mode: str = "train", rng=None, need_grad: bool = True):
        """Loss on one minibatch.

        Framewise: mean cross-entropy over valid frames; ``targets`` is a
        (batch, T) integer array.  CTC: summed sequence losses; ``targets``
        is a list of label sequences.  Returns ``(loss, grads, stats)``.
        """
        logits, cache = self.forward(batch, mode, rng)
        mask = batch.mask
        if self.head == "framewise":
            loss, d_logits = softmax_ce_head(logits, targets, mask)
            pred = logits.argmax(axis=-1)
            stats = {"frames": batch.frames, "loss_sum": loss * batch.frames,
                     "correct": int(((pred == targets) & mask).sum())}
        else:
            lp = log_softmax(logits)
            loss, d_lp = ctc_loss(lp, targets, batch.lengths)
            d_logits = d_lp - np.exp(lp) * d_lp.sum(axis=-1, keepdims=True)
            d_logits *= mask[..., None]
            stats = {"frames": batch.frames, "loss_sum": loss, "sequences": batch.size}
        d_logits = d_logits.astype(self.dtype, copy=False)
        grads = self.backward(d_logits, cache) if need_grad else None
        return loss, grads, stats
