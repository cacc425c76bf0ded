"""Dense array helpers, seeded randomness and the elementwise maps.

Matrices are plain 2-D numpy arrays (float64 unless a caller asks for
float32).  Every random draw in the package goes through a
``numpy.random.Generator`` backed by the counter-based Philox bit generator,
so a seed fixes the draw sequence across runs and platforms.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "Philox"


class ContractError(ValueError):
    """Raised when an argument violates an operation's precondition."""


def make_rng(seed: int) -> np.random.Generator:
    """Return a fresh Philox-backed generator for ``seed``."""
    if seed < 0 or seed >= 2**64:
        raise ContractError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's position."""
    state = rng.bit_generator.state
    return _jsonify(state)


def restore_rng(state: dict) -> np.random.Generator:
    if state.get("bit_generator") != RNG_ALGORITHM:
        raise ContractError(f"unsupported bit generator {state.get('bit_generator')!r}")
    bg = np.random.Philox()
    bg.state = _unjsonify(state)
    return np.random.Generator(bg)


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__uint64__": [int(v) for v in obj.ravel()]}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _unjsonify(obj):
    if isinstance(obj, dict):
        if "__uint64__" in obj:
            return np.array(obj["__uint64__"], dtype=np.uint64)
        return {k: _unjsonify(v) for k, v in obj.items()}
    return obj


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed, sequential reduction order.

    ``out[i, j]`` is accumulated as ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``
    so the result is bit-identical to a naive triple loop.  This is the
    reference path; the training code uses ``@`` (BLAS) for throughput.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def glorot_init(rows: int, cols: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Uniform draws on [-L, L] with ``L = sqrt(6 / (rows + cols))``."""
    if rows < 1 or cols < 1:
        raise ContractError(f"glorot_init needs positive dimensions, got {rows}x{cols}")
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols)).astype(dtype)


def orthogonal_init(n: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Square orthogonal matrix from the QR factorization of a Gaussian draw.

    The columns of Q are sign-corrected so that diag(R) > 0, which makes the
    result uniformly (Haar) distributed.
    """
    if n < 1:
        raise ContractError(f"orthogonal_init needs n >= 1, got {n}")
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return (q * signs).astype(dtype)


def sigmoid(x):
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    return np.maximum(x, 0.0)


_UNARY = {"sigmoid": sigmoid, "tanh": np.tanh, "relu": relu}
_BINARY = {"mul": np.multiply, "add": np.add}


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Apply one of ``sigmoid``, ``tanh``, ``relu`` (unary) or ``mul``, ``add``."""
    a = np.asarray(a, dtype=float)
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} takes a single operand")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        b = np.asarray(b, dtype=float)
        if a.shape != b.shape:
            raise ContractError(f"elementwise {op} shape mismatch: {a.shape} vs {b.shape}")
        return _BINARY[op](a, b)
    raise ContractError(f"unknown elementwise op {op!r}")
