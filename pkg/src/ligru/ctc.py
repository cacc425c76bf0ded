"""Connectionist temporal classification: loss, best-path decoding, label maps.

The blank symbol is the last output index (``K`` for an alphabet of ``K``
labels).  All dynamic programming runs in log space.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .numeric import ContractError

NEG_INF = -np.inf


class CTCInfeasibleError(ValueError):
    """Target needs more frames than the sequence has."""


def min_frames(target) -> int:
    """Shortest input that can emit ``target``: one frame per label plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend(target, blank):
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _lse(*terms):
    out = terms[0]
    for t in terms[1:]:
        out = np.logaddexp(out, t)
    return out


def ctc_sequence(log_probs: np.ndarray, target, blank: int | None = None):
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``log_probs``.

    ``log_probs`` is (T, K+1).  The inputs need not be normalized; the
    returned gradient is ``-occupancy``, the posterior probability of being
    on each symbol at each frame, which is exact for any real input.
    """
    T, C = log_probs.shape
    blank = C - 1 if blank is None else blank
    target = np.asarray(target, dtype=np.int64)
    if np.any(target < 0) or np.any(target >= C) or np.any(target == blank):
        raise ContractError(f"target labels must lie in [0, {C}) and exclude blank {blank}")
    if T < min_frames(target):
        raise CTCInfeasibleError(f"target of length {len(target)} needs {min_frames(target)} frames, got {T}")
    ext = _extend(target, blank)
    S = len(ext)
    # s-2 -> s skip allowed onto a label that differs from the label two back
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]

    emit = log_probs[:, ext]  # (T, S)
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        s1 = np.full(S, NEG_INF)
        s1[1:] = prev[:-1]
        s2 = np.full(S, NEG_INF)
        s2[2:] = prev[:-2]
        s2[~skip] = NEG_INF
        alpha[t] = _lse(prev, s1, s2) + emit[t]

    # beta[t, s]: log prob of emitting the rest after frame t, given symbol s at t
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_next = np.zeros(S, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        n1 = np.full(S, NEG_INF)
        n1[:-1] = nxt[1:]
        n2 = np.full(S, NEG_INF)
        n2[:-2] = nxt[2:]
        n2[~skip_next] = NEG_INF
        beta[t] = _lse(nxt, n1, n2)

    log_p = _lse(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    if not np.isfinite(log_p):
        raise CTCInfeasibleError("target has zero probability under the given scores")
    occ = np.exp(alpha + beta - log_p)  # (T, S)
    grad = np.zeros_like(log_probs, dtype=float)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return float(-log_p), grad


def ctc_loss(log_probs: np.ndarray, targets, lengths):
    """Summed CTC loss over a padded (batch, T, K+1) block.

    Returns ``(loss, grad)``; gradients at padded frames are zero.  An
    infeasible target raises ``CTCInfeasibleError`` naming the sequence.
    """
    B, T, C = log_probs.shape
    grad = np.zeros_like(log_probs, dtype=float)
    total = 0.0
    for b in range(B):
        L = int(lengths[b])
        try:
            nll, g = ctc_sequence(log_probs[b, :L], targets[b])
        except CTCInfeasibleError as exc:
            raise CTCInfeasibleError(f"sequence {b}: {exc}") from None
        total += nll
        grad[b, :L] = g
    return total, grad


def collapse(seq, blank=None):
    """Merge consecutive repeats, then drop ``blank`` (if given)."""
    out = []
    prev = None
    for s in seq:
        s = int(s)
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def best_path_decode(log_probs: np.ndarray, blank: int | None = None) -> list[int]:
    """Framewise argmax (ties to the lowest index), collapse repeats, remove blanks."""
    log_probs = np.asarray(log_probs)
    blank = log_probs.shape[1] - 1 if blank is None else blank
    return collapse(np.argmax(log_probs, axis=1), blank)


# ---------------------------------------------------------------------------
# label maps
# ---------------------------------------------------------------------------


class LabelMap(dict):
    """Many-to-one map from training label ids to evaluation label ids."""

    def check_total(self, alphabet_size: int):
        missing = [i for i in range(alphabet_size) if i not in self]
        if missing:
            raise ContractError(f"label map has no entry for ids {missing}")


def read_label_map(path) -> LabelMap:
    """Parse ``<train-id> <eval-id>`` lines; blank lines and ``#`` comments are skipped."""
    lmap = LabelMap()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or not all(p.isdigit() for p in parts):
            raise ContractError(f"{path}:{lineno}: expected two non-negative integers, got {line!r}")
        src, dst = int(parts[0]), int(parts[1])
        if src in lmap and lmap[src] != dst:
            raise ContractError(f"{path}:{lineno}: id {src} mapped twice")
        lmap[src] = dst
    return lmap


def write_label_map(lmap, path):
    Path(path).write_text("".join(f"{k} {v}\n" for k, v in sorted(lmap.items())))


def map_labels(seq, lmap, collapse_duplicates: bool = True) -> list[int]:
    """Map each label; by default merge neighbours that became identical."""
    try:
        mapped = [lmap[int(s)] for s in seq]
    except KeyError as exc:
        raise ContractError(f"label {exc.args[0]} is not in the label map") from None
    return collapse(mapped) if collapse_duplicates else mapped


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance between two label sequences."""
    ref, hyp = list(ref), list(hyp)
    row = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        prev, row[0] = row[0], i
        for j, h in enumerate(hyp, 1):
            cur = min(row[j] + 1, row[j - 1] + 1, prev + (r != h))
            prev, row[j] = row[j], cur
    return row[-1]
