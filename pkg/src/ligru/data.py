"""Feature archives, target files and synthetic desk-scale tasks.

Archive layout (all little-endian)::

    "LGRU"  u32 version=1  u32 dim  u32 count
    repeated count times:
        u16 id_len  id bytes (utf-8)  u32 T  T*dim float32 (row-major)

Target files are text, one utterance per line: ``<id> <t1> <t2> ...`` for
framewise class ids, ``<id> | <l1> <l2> ...`` for CTC label sequences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import ContractError, make_rng

MAGIC = b"LGRU"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

SYNTH_TASKS = ("framewise-pattern", "delayed-echo", "ctc-spelling")


class ArchiveError(ValueError):
    pass


class BadMagicError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    def __init__(self, offset: int, needed: int):
        super().__init__(f"archive truncated at byte offset {offset} (needed {needed} more bytes)")
        self.offset = offset


class DimensionMismatchError(ArchiveError):
    pass


class NonFiniteFeatureError(ArchiveError):
    pass


@dataclass
class FeatureArchive:
    dim: int
    entries: list = field(default_factory=list)  # (utt_id, (T, dim) float32 array)

    def __post_init__(self):
        for uid, feats in self.entries:
            _check_entry(uid, feats, self.dim)

    @property
    def ids(self):
        return [uid for uid, _ in self.entries]

    def __len__(self):
        return len(self.entries)


def _check_entry(uid, feats, dim):
    if feats.ndim != 2 or feats.shape[1] != dim:
        raise DimensionMismatchError(f"utterance {uid!r} has shape {feats.shape}, archive dim is {dim}")
    if feats.shape[0] < 1:
        raise ArchiveError(f"utterance {uid!r} has no frames")
    if not np.all(np.isfinite(feats)):
        raise NonFiniteFeatureError(f"utterance {uid!r} contains NaN or Inf")


def archive_bytes(archive: FeatureArchive) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, archive.dim, len(archive.entries))]
    for uid, feats in archive.entries:
        _check_entry(uid, feats, archive.dim)
        raw_id = uid.encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise ArchiveError(f"utterance id too long ({len(raw_id)} bytes)")
        parts.append(_U16.pack(len(raw_id)))
        parts.append(raw_id)
        parts.append(_U32.pack(feats.shape[0]))
        parts.append(np.ascontiguousarray(feats, dtype="<f4").tobytes())
    return b"".join(parts)


def write_feature_archive(archive: FeatureArchive, path) -> None:
    Path(path).write_bytes(archive_bytes(archive))


def parse_archive(buf: bytes) -> FeatureArchive:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedArchiveError(pos, pos + n - len(buf))
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if len(buf) >= 4 and buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    magic, version, dim, count = _HEADER.unpack(take(_HEADER.size))
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    if dim < 1:
        raise DimensionMismatchError("archive dimension must be >= 1")
    entries = []
    for _ in range(count):
        (id_len,) = _U16.unpack(take(_U16.size))
        uid = take(id_len).decode("utf-8")
        (T,) = _U32.unpack(take(_U32.size))
        feats = np.frombuffer(take(4 * T * dim), dtype="<f4").reshape(T, dim).astype(np.float32)
        _check_entry(uid, feats, dim)
        entries.append((uid, feats))
    if pos != len(buf):
        raise DimensionMismatchError(
            f"{len(buf) - pos} trailing bytes after {count} utterances; frame sizes disagree with dim={dim}")
    return FeatureArchive(dim, entries)


def read_feature_archive(path) -> FeatureArchive:
    return parse_archive(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


def write_targets(targets: dict, kind: str, path) -> None:
    lines = []
    for uid, seq in targets.items():
        body = " ".join(str(int(v)) for v in seq)
        lines.append(f"{uid} | {body}".rstrip() if kind == "ctc" else f"{uid} {body}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_targets(path):
    """Return ``(kind, {utt_id: list of ints})``; ``kind`` is framewise or ctc."""
    kinds = set()
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        uid, rest = parts[0], parts[1:]
        if rest and rest[0] == "|":
            kinds.add("ctc")
            rest = rest[1:]
        else:
            kinds.add("framewise")
        try:
            out[uid] = [int(v) for v in rest]
        except ValueError:
            raise ContractError(f"{path}:{lineno}: non-integer target") from None
        if any(v < 0 for v in out[uid]):
            raise ContractError(f"{path}:{lineno}: negative target id")
    if len(kinds) > 1:
        raise ContractError(f"{path}: mixes framewise and CTC lines")
    return (kinds.pop() if kinds else "framewise"), out


# ---------------------------------------------------------------------------
# in-memory dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    ids: list
    features: list  # (T, d) float64 arrays
    targets: list  # framewise int arrays or label lists
    kind: str
    num_classes: int

    @property
    def dim(self) -> int:
        return self.features[0].shape[1]

    @property
    def lengths(self):
        return [len(f) for f in self.features]

    def __len__(self):
        return len(self.ids)


def make_dataset(archive: FeatureArchive, kind: str, targets: dict, num_classes: int | None = None) -> Dataset:
    """Join an archive with its targets, checking ids and framewise lengths."""
    ids, feats, tgts = [], [], []
    for uid, f in archive.entries:
        if uid not in targets:
            raise ContractError(f"no targets for utterance {uid!r}")
        t = targets[uid]
        if kind == "framewise":
            if len(t) != len(f):
                raise ContractError(f"utterance {uid!r}: {len(t)} targets for {len(f)} frames")
            t = np.asarray(t, dtype=np.int64)
        else:
            t = [int(v) for v in t]
        ids.append(uid)
        feats.append(np.asarray(f, dtype=np.float64))
        tgts.append(t)
    extra = set(targets) - set(ids)
    if extra:
        raise ContractError(f"targets for unknown utterances: {sorted(extra)[:5]}")
    if num_classes is None:
        num_classes = 1 + max((int(max(t)) for t in tgts if len(t)), default=0)
    return Dataset(ids, feats, tgts, kind, num_classes)


def load_dataset(features_path, targets_path, num_classes: int | None = None) -> Dataset:
    kind, targets = read_targets(targets_path)
    return make_dataset(read_feature_archive(features_path), kind, targets, num_classes)


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------


@dataclass
class SynthSplit:
    archive: FeatureArchive
    targets: dict
    kind: str
    num_classes: int

    def dataset(self) -> Dataset:
        return make_dataset(self.archive, self.kind, self.targets, self.num_classes)


def gen_synthetic(task: str, seed: int, num_train: int = 200, num_dev: int = 50, **params) -> dict:
    """Generate ``{"train": SynthSplit, "dev": SynthSplit}`` for a synthetic task.

    framewise-pattern
        Segments of 3-8 frames, each drawn around one of ``classes`` random
        Gaussian templates with additive noise ``noise``; the target is the
        template id of every frame.
    delayed-echo
        Every frame shows a random class (template plus noise); the target
        at ``t`` is the class shown at ``t - delay``, and an extra class
        ``classes`` before that.
    ctc-spelling
        Label sequences of 1..``max_labels`` symbols rendered as noisy
        segments separated by silence; targets are the label sequences.

    Templates are shared by both splits.
    """
    if task not in SYNTH_TASKS:
        raise ContractError(f"unknown synthetic task {task!r}; choose from {SYNTH_TASKS}")
    rng = make_rng(seed)
    gen = {"framewise-pattern": _framewise_pattern, "delayed-echo": _delayed_echo,
           "ctc-spelling": _ctc_spelling}[task]
    make_split = gen(rng, **params)
    return {"train": make_split("train", num_train), "dev": make_split("dev", num_dev)}


def _framewise_pattern(rng, classes=10, dim=13, min_len=20, max_len=60, noise=1.0, min_seg=3, max_seg=8):
    templates = rng.standard_normal((classes, dim))

    def make_split(prefix, count):
        entries, targets = [], {}
        for u in range(count):
            T = int(rng.integers(min_len, max_len + 1))
            labels = []
            while len(labels) < T:
                labels.extend([int(rng.integers(classes))] * int(rng.integers(min_seg, max_seg + 1)))
            labels = np.array(labels[:T])
            feats = templates[labels] + noise * rng.standard_normal((T, dim))
            uid = f"{prefix}-{u:05d}"
            entries.append((uid, feats.astype(np.float32)))
            targets[uid] = labels.tolist()
        return SynthSplit(FeatureArchive(dim, entries), targets, "framewise", classes)

    return make_split


def _delayed_echo(rng, classes=8, delay=20, dim=8, min_len=40, max_len=80, noise=0.3):
    if min_len <= delay:
        raise ContractError("sequences must be longer than the delay")
    templates = rng.standard_normal((classes, dim))

    def make_split(prefix, count):
        entries, targets = [], {}
        for u in range(count):
            T = int(rng.integers(min_len, max_len + 1))
            shown = rng.integers(classes, size=T)
            feats = templates[shown] + noise * rng.standard_normal((T, dim))
            tgt = np.full(T, classes)
            tgt[delay:] = shown[:T - delay]
            uid = f"{prefix}-{u:05d}"
            entries.append((uid, feats.astype(np.float32)))
            targets[uid] = tgt.tolist()
        return SynthSplit(FeatureArchive(dim, entries), targets, "framewise", classes + 1)

    return make_split


def _ctc_spelling(rng, classes=5, dim=10, max_labels=4, min_seg=2, max_seg=5, max_gap=3, noise=0.5):
    templates = rng.standard_normal((classes + 1, dim))  # last row: silence

    def make_split(prefix, count):
        entries, targets = [], {}
        for u in range(count):
            labels = rng.integers(classes, size=int(rng.integers(1, max_labels + 1))).tolist()
            frames = [classes] * int(rng.integers(1, max_gap + 1))
            for k, lab in enumerate(labels):
                if k > 0:
                    lo = 1 if labels[k - 1] == lab else 0
                    frames.extend([classes] * int(rng.integers(lo, max_gap + 1)))
                frames.extend([lab] * int(rng.integers(min_seg, max_seg + 1)))
            frames.extend([classes] * int(rng.integers(1, max_gap + 1)))
            frames = np.array(frames)
            feats = templates[frames] + noise * rng.standard_normal((len(frames), dim))
            uid = f"{prefix}-{u:05d}"
            entries.append((uid, feats.astype(np.float32)))
            targets[uid] = labels
        return SynthSplit(FeatureArchive(dim, entries), targets, "ctc", classes)

    return make_split
