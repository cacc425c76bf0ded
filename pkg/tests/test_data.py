import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ligru.ctc import min_frames
from ligru.data import (ArchiveError, BadMagicError, DimensionMismatchError, FeatureArchive,
                        NonFiniteFeatureError, TruncatedArchiveError, archive_bytes, gen_synthetic,
                        load_dataset, make_dataset, parse_archive, read_feature_archive, read_targets,
                        write_feature_archive, write_targets)
from ligru.network import softmax_ce_head
from ligru.numeric import ContractError, make_rng
from ligru.optim import AdamState, adam_step

ids = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=0, max_size=12)


@st.composite
def archives(draw):
    d = draw(st.integers(1, 6))
    n = draw(st.integers(0, 5))
    seed = draw(st.integers(0, 2**31))
    rng = make_rng(seed)
    entries = []
    for k in range(n):
        T = draw(st.integers(1, 9))
        scale = draw(st.sampled_from([1e-30, 1.0, 1e30]))
        entries.append((draw(ids), (scale * rng.normal(size=(T, d))).astype(np.float32)))
    return FeatureArchive(d, entries)


@given(archives())
def test_archive_roundtrip_property(arch):
    back = parse_archive(archive_bytes(arch))
    assert back.dim == arch.dim and back.ids == arch.ids
    for (_, a), (_, b) in zip(arch.entries, back.entries):
        assert a.tobytes() == b.tobytes()


def test_archive_file_roundtrip(tmp_path):
    rng = make_rng(0)
    arch = FeatureArchive(3, [("a", rng.normal(size=(4, 3)).astype(np.float32)),
                              ("b", rng.normal(size=(1, 3)).astype(np.float32))])
    write_feature_archive(arch, tmp_path / "x.lgru")
    back = read_feature_archive(tmp_path / "x.lgru")
    assert archive_bytes(back) == archive_bytes(arch)
    raw = (tmp_path / "x.lgru").read_bytes()
    assert raw[:4] == b"LGRU" and int.from_bytes(raw[4:8], "little") == 1


def test_archive_errors():
    arch = FeatureArchive(2, [("u1", np.ones((3, 2), np.float32)), ("u2", np.ones((2, 2), np.float32))])
    raw = archive_bytes(arch)
    with pytest.raises(BadMagicError):
        parse_archive(b"XXXX" + raw[4:])
    with pytest.raises(TruncatedArchiveError) as exc:
        parse_archive(raw[:-5])
    assert "byte offset" in str(exc.value) and exc.value.offset > 0
    with pytest.raises(TruncatedArchiveError):
        parse_archive(raw[:6])
    with pytest.raises(DimensionMismatchError):
        parse_archive(raw + b"\0" * 8)
    bad = bytearray(raw)
    bad[-4:] = np.array([np.nan], dtype="<f4").tobytes()
    with pytest.raises(NonFiniteFeatureError):
        parse_archive(bytes(bad))
    with pytest.raises(DimensionMismatchError):
        FeatureArchive(2, [("a", np.ones((2, 2), np.float32)), ("b", np.ones((2, 3), np.float32))])
    mixed = FeatureArchive(2, [("a", np.ones((2, 2), np.float32))])
    mixed.entries.append(("b", np.ones((2, 3), np.float32)))
    with pytest.raises(DimensionMismatchError):
        archive_bytes(mixed)
    with pytest.raises(ArchiveError):
        FeatureArchive(2, [("a", np.ones((0, 2), np.float32))])
    # distinct error types
    assert len({BadMagicError, TruncatedArchiveError, DimensionMismatchError, NonFiniteFeatureError}) == 4


def test_targets_roundtrip_and_validation(tmp_path):
    write_targets({"a": [1, 2, 2], "b": [0]}, "framewise", tmp_path / "f.txt")
    assert read_targets(tmp_path / "f.txt") == ("framewise", {"a": [1, 2, 2], "b": [0]})
    write_targets({"a": [3, 1], "b": []}, "ctc", tmp_path / "c.txt")
    assert (tmp_path / "c.txt").read_text() == "a | 3 1\nb |\n"
    assert read_targets(tmp_path / "c.txt") == ("ctc", {"a": [3, 1], "b": []})
    (tmp_path / "m.txt").write_text("a 1 2\nb | 3\n")
    with pytest.raises(ContractError):
        read_targets(tmp_path / "m.txt")
    arch = FeatureArchive(1, [("a", np.zeros((3, 1), np.float32))])
    with pytest.raises(ContractError):
        make_dataset(arch, "framewise", {"a": [0, 1]})
    with pytest.raises(ContractError):
        make_dataset(arch, "framewise", {"b": [0, 1, 1]})
    with pytest.raises(ContractError):
        make_dataset(arch, "framewise", {"a": [0, 0, 0], "zzz": [1]})
    ds = make_dataset(arch, "framewise", {"a": [0, 4, 1]})
    assert ds.num_classes == 5 and ds.features[0].dtype == np.float64


def test_load_dataset_from_disk(tmp_path):
    sp = gen_synthetic("ctc-spelling", seed=3, num_train=5, num_dev=2)["train"]
    write_feature_archive(sp.archive, tmp_path / "t.lgru")
    write_targets(sp.targets, sp.kind, tmp_path / "t.txt")
    ds = load_dataset(tmp_path / "t.lgru", tmp_path / "t.txt", sp.num_classes)
    assert ds.kind == "ctc" and len(ds) == 5 and ds.targets == [sp.targets[u] for u in ds.ids]


@pytest.mark.parametrize("task", ["framewise-pattern", "delayed-echo", "ctc-spelling"])
def test_synthetic_same_seed_identical(task):
    a = gen_synthetic(task, seed=7, num_train=6, num_dev=3)
    b = gen_synthetic(task, seed=7, num_train=6, num_dev=3)
    c = gen_synthetic(task, seed=8, num_train=6, num_dev=3)
    for split in ("train", "dev"):
        assert archive_bytes(a[split].archive) == archive_bytes(b[split].archive)
        assert a[split].targets == b[split].targets
    assert archive_bytes(a["train"].archive) != archive_bytes(c["train"].archive)


def test_unknown_task():
    with pytest.raises(ContractError):
        gen_synthetic("nope", 0)


def test_noiseless_pattern_is_nearest_template_separable():
    sp = gen_synthetic("framewise-pattern", seed=0, num_train=30, num_dev=10, noise=0.0)
    tr, dv = sp["train"].dataset(), sp["dev"].dataset()
    X = np.concatenate(tr.features)
    y = np.concatenate(tr.targets)
    templates = np.stack([X[y == k].mean(axis=0) for k in range(tr.num_classes)])
    Xd = np.concatenate(dv.features)
    yd = np.concatenate(dv.targets)
    pred = np.argmin(((Xd[:, None, :] - templates[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == yd) == 1.0
    for t, f in zip(tr.targets, tr.features):
        assert len(t) == len(f) and 20 <= len(t) <= 60


def _softmax_regression(tr, dv, steps=300):
    """Depth-0 classifier: logits = x W + b on single frames, trained with Adam."""
    X = np.concatenate(tr.features)[None]
    y = np.concatenate(tr.targets)[None]
    C = tr.num_classes
    rng = make_rng(0)
    p = {"W": 0.01 * rng.normal(size=(X.shape[2], C)), "b": np.zeros(C)}
    st_ = AdamState(lr=0.05)
    mask = np.ones(y.shape, bool)
    for _ in range(steps):
        _, g = softmax_ce_head(X @ p["W"] + p["b"], y, mask)
        adam_step(p, {"W": (X[0].T @ g[0]), "b": g[0].sum(0)}, st_)
    acc = []
    for f, t in zip(dv.features, dv.targets):
        acc.append((f @ p["W"] + p["b"]).argmax(1) == t)
    return acc


def test_delayed_echo_needs_memory():
    K = 8
    same = gen_synthetic("delayed-echo", seed=1, num_train=40, num_dev=20, classes=K, delay=0)
    acc = np.concatenate(_softmax_regression(same["train"].dataset(), same["dev"].dataset()))
    assert acc.mean() > 0.95

    far = gen_synthetic("delayed-echo", seed=1, num_train=40, num_dev=20, classes=K, delay=20)
    dv = far["dev"].dataset()
    per_utt = _softmax_regression(far["train"].dataset(), dv)
    late = np.concatenate([a[20:] for a in per_utt])  # frames whose target is an echo
    chance = 1.0 / K
    assert late.mean() <= chance + 3 * np.sqrt(chance * (1 - chance) / late.size)
    for t in dv.targets:
        assert np.all(t[:20] == K)


def test_ctc_spelling_targets_are_feasible():
    sp = gen_synthetic("ctc-spelling", seed=2, num_train=50, num_dev=5)["train"]
    ds = sp.dataset()
    assert ds.kind == "ctc" and ds.num_classes == 5
    for f, t in zip(ds.features, ds.targets):
        assert 1 <= len(t) <= 4 and all(0 <= v < 5 for v in t)
        assert len(f) >= min_frames(t)
