"""Batch normalization, time-shared dropout masks and weight noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import ContractError


@dataclass
class BatchNormState:
    """Affine parameters and running statistics for one normalized group.

    ``gamma`` and ``beta`` are trainable and updated in place by the
    optimizer; the running statistics are only touched by train-mode
    forward passes.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def create(cls, n: int, gamma: float = 0.1, beta: float = 0.0, dtype=np.float64, **kw):
        return cls(
            gamma=np.full(n, gamma, dtype=dtype),
            beta=np.full(n, beta, dtype=dtype),
            running_mean=np.zeros(n, dtype=dtype),
            running_var=np.ones(n, dtype=dtype),
            **kw,
        )

    def __post_init__(self):
        if self.eps < 0:
            raise ContractError(f"eps must be non-negative, got {self.eps}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ContractError(f"momentum must lie in [0, 1], got {self.momentum}")
        n = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (n,):
                raise ContractError(f"{name} has shape {getattr(self, name).shape}, expected ({n},)")


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str


def bn_forward(a: np.ndarray, state: BatchNormState, mode: str = "train", update_running: bool = True):
    """Normalize the rows of ``a`` (frames x features).

    In ``train`` mode the per-feature mean and biased variance of the given
    frames are used and the running statistics are moved towards them
    (``running <- momentum * running + (1 - momentum) * batch``).  In
    ``eval`` mode the running statistics replace the batch statistics.

    Only valid (unpadded) frames should be passed in.
    """
    if a.ndim != 2 or a.shape[1] != state.gamma.shape[0]:
        raise ContractError(f"bn_forward expects (frames, {state.gamma.shape[0]}), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("bn_forward received non-finite pre-activations")
    if mode == "train":
        if a.shape[0] < 2:
            raise ContractError(f"train-mode batch norm needs >= 2 frames, got {a.shape[0]}")
        mean = a.mean(axis=0)
        var = a.var(axis=0)
        if update_running:
            m = state.momentum
            state.running_mean[...] = m * state.running_mean + (1.0 - m) * mean
            state.running_var[...] = m * state.running_var + (1.0 - m) * var
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ContractError(f"unknown batch norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (a - mean) * inv_std
    out = state.gamma * xhat + state.beta
    return out, BNCache(xhat=xhat, inv_std=inv_std, gamma=state.gamma.copy(), mode=mode)


def bn_backward(cache: BNCache, dout: np.ndarray):
    """Gradients w.r.t. the pre-activations, gamma and beta.

    Train-mode caches include the dependence of the batch mean and variance
    on every frame; eval-mode caches give the plain affine derivative.
    """
    if dout.shape != cache.xhat.shape:
        raise ContractError(f"bn_backward upstream shape {dout.shape} != cache {cache.xhat.shape}")
    dgamma = np.sum(dout * cache.xhat, axis=0)
    dbeta = np.sum(dout, axis=0)
    dxhat = dout * cache.gamma
    if cache.mode == "eval":
        return dxhat * cache.inv_std, dgamma, dbeta
    n = dout.shape[0]
    da = (cache.inv_std / n) * (
        n * dxhat - dxhat.sum(axis=0) - cache.xhat * np.sum(dxhat * cache.xhat, axis=0)
    )
    return da, dgamma, dbeta


@dataclass
class DropoutMask:
    """One Bernoulli keep-mask per (sequence, unit), reused at every step."""

    keep_prob: float
    mask: np.ndarray
    scale: float

    @property
    def values(self) -> np.ndarray:
        return self.mask * self.scale


def sample_dropout_mask(batch: int, n: int, keep_prob: float, rng: np.random.Generator,
                        train: bool = True, dtype=np.float64) -> DropoutMask:
    if not 0.0 < keep_prob <= 1.0:
        raise ContractError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not train or keep_prob == 1.0:
        return DropoutMask(keep_prob, np.ones((batch, n), dtype=dtype), 1.0)
    mask = (rng.random((batch, n)) < keep_prob).astype(dtype)
    return DropoutMask(keep_prob, mask, 1.0 / keep_prob)


@dataclass
class WeightNoiseConfig:
    stddev: float = 0.01
    enabled: bool = True

    def __post_init__(self):
        if self.stddev < 0:
            raise ContractError(f"weight noise stddev must be >= 0, got {self.stddev}")


def is_weight_matrix(name: str, value: np.ndarray) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return value.ndim == 2 and leaf[:1] in ("W", "U")


def apply_weight_noise(params: dict, cfg: WeightNoiseConfig, rng: np.random.Generator) -> dict:
    """Return a copy of ``params`` with Gaussian noise added to every weight matrix.

    Biases and batch-norm parameters are left untouched.  Draw order follows
    the iteration order of ``params``.
    """
    out = {}
    for name, value in params.items():
        if cfg.enabled and cfg.stddev > 0 and is_weight_matrix(name, value):
            noise = rng.normal(0.0, cfg.stddev, size=value.shape)
            out[name] = (value + noise).astype(value.dtype)
        else:
            out[name] = value.copy()
    return out
