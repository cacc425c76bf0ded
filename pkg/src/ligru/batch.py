"""Padded minibatches of variable-length sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import ContractError


@dataclass
class Minibatch:
    """``x`` is (batch, T_max, d); frames at ``t >= lengths[b]`` are padding."""

    x: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.x.ndim != 3:
            raise ContractError(f"minibatch features must be 3-D, got shape {self.x.shape}")
        if self.lengths.shape != (self.x.shape[0],):
            raise ContractError("one length per sequence required")
        if np.any(self.lengths < 1) or np.any(self.lengths > self.x.shape[1]):
            raise ContractError(f"lengths {self.lengths.tolist()} outside [1, {self.x.shape[1]}]")

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.x.shape[1])[None, :] < self.lengths[:, None]

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def frames(self) -> int:
        return int(self.lengths.sum())


def pad_sequences(seqs, dtype=np.float64) -> Minibatch:
    """Stack (T_i, d) arrays into a zero-padded minibatch."""
    if not seqs:
        raise ContractError("cannot build an empty minibatch")
    lengths = np.array([len(s) for s in seqs])
    d = seqs[0].shape[1]
    x = np.zeros((len(seqs), int(lengths.max()), d), dtype=dtype)
    for b, s in enumerate(seqs):
        if s.shape[1] != d:
            raise ContractError(f"feature dimension mismatch: {s.shape[1]} vs {d}")
        x[b, : len(s)] = s
    return Minibatch(x, lengths)


def reversal_index(lengths, t_max: int) -> np.ndarray:
    """Per-sequence time index that reverses the valid prefix and fixes padding."""
    t = np.arange(t_max)[None, :]
    lengths = np.asarray(lengths)[:, None]
    return np.where(t < lengths, lengths - 1 - t, t)


def reverse_padded(x: np.ndarray, lengths) -> np.ndarray:
    """Reverse each sequence's valid frames in time; the map is its own inverse."""
    idx = reversal_index(lengths, x.shape[1])
    return np.take_along_axis(x, idx[:, :, None], axis=1)
