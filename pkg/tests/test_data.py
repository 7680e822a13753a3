import gzip

import numpy as np
import pytest

from immunekit import data
from immunekit.errors import ConsistencyError, FormatError, ParseError, UsageError

from conftest import idx_images, idx_labels, malformed_idx_streams


def test_hand_built_idx(tmp_path):
    imgs = data.parse_idx_images(idx_images())
    assert imgs.shape == (3, 2, 2) and imgs[2, 1, 1] == 11
    assert data.parse_idx_labels(idx_labels()).tolist() == [0, 1, 2]
    (tmp_path / "i").write_bytes(gzip.compress(idx_images()))
    (tmp_path / "l").write_bytes(idx_labels())
    ds = data.load_mnist_idx(tmp_path / "i", tmp_path / "l", n_classes=3)
    assert ds.x.shape == (3, 4) and ds.image_shape == (2, 2)
    assert ds.x[0, 1] == pytest.approx(1 / 255, abs=1e-15)


def test_write_idx_round_trip(tmp_path):
    gen = np.random.default_rng(0)
    imgs = gen.integers(0, 256, (5, 3, 4), dtype=np.uint8)
    labs = gen.integers(0, 10, 5, dtype=np.uint8)
    data.write_idx(tmp_path / "i", tmp_path / "l", imgs, labs)
    ds = data.load_mnist_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(np.round(ds.x * 255).astype(np.uint8).reshape(5, 3, 4), imgs)
    assert np.array_equal(ds.y, labs)


@pytest.mark.parametrize("name,kind,raw", malformed_idx_streams(), ids=lambda v: v if isinstance(v, str) else "")
def test_malformed_idx_rejected(tmp_path, name, kind, raw):
    good_i, good_l = idx_images(), idx_labels()
    (tmp_path / "i").write_bytes(raw if kind == "images" else good_i)
    (tmp_path / "l").write_bytes(raw if kind == "labels" else good_l)
    with pytest.raises((ParseError, FormatError, ConsistencyError)):
        data.load_mnist_idx(tmp_path / "i", tmp_path / "l", n_classes=3)


def test_count_mismatch_and_label_range(tmp_path):
    (tmp_path / "i").write_bytes(idx_images())
    (tmp_path / "l").write_bytes(idx_labels((0, 1)))
    with pytest.raises(ConsistencyError):
        data.load_mnist_idx(tmp_path / "i", tmp_path / "l")
    (tmp_path / "l").write_bytes(idx_labels((0, 1, 9)))
    with pytest.raises(ConsistencyError):
        data.load_mnist_idx(tmp_path / "i", tmp_path / "l", n_classes=3)


def test_split_properties():
    ds = data.Dataset(np.arange(360.0).reshape(90, 4), np.arange(90) % 3, (2, 2), 3)
    tr, va, te = data.split(ds, (0.7, 0.1, 0.2), seed=4)
    assert (len(tr), len(va), len(te)) == (63, 9, 18)
    ids = np.concatenate([tr.x[:, 0], va.x[:, 0], te.x[:, 0]])
    assert sorted(ids.tolist()) == ds.x[:, 0].tolist()
    again = data.split(ds, (0.7, 0.1, 0.2), seed=4)
    assert all(np.array_equal(a.x, b.x) for a, b in zip((tr, va, te), again))
    assert len(data.split(ds, (1.0, 0.0, 0.0), seed=0)[2]) == 0
    with pytest.raises(UsageError):
        data.split(ds, (0.5, 0.5, 0.5), seed=0)


def test_synthetic_determinism_and_spread():
    a = data.synth_dataset(3, 5, n=16, n_classes=4)
    b = data.synth_dataset(3, 5, n=16, n_classes=4)
    assert a.x.tobytes() == b.x.tobytes() and a.image_shape == (4, 4)
    flat = data.synth_dataset(3, 5, n=16, n_classes=4, spread=0.0)
    assert all(len(np.unique(flat.x[flat.y == c], axis=0)) == 1 for c in range(4))
    assert a.x.min() >= 0 and a.x.max() <= 1


def test_strokes():
    s = data.synth_strokes(0, 3, n_classes=3)
    t = data.synth_strokes(0, 3, n_classes=3)
    assert s.x.tobytes() == t.x.tobytes()
    assert s.x.shape == (9, 784) and s.y.tolist() == [0] * 3 + [1] * 3 + [2] * 3
    assert np.mean(s.x == 0) > 0.5 and s.x.max() == 1.0
    with pytest.raises(UsageError):
        data.synth_strokes(0, 3, n_classes=1)


def test_dataset_consistency():
    with pytest.raises(ConsistencyError):
        data.Dataset(np.zeros((2, 4)), np.zeros(3), (2, 2), 2)
    with pytest.raises(ConsistencyError):
        data.Dataset(np.zeros((2, 4)), np.zeros(2), (3, 3), 2)


def test_default_blobs_solved_by_softmax_regression():
    tr, _, te = data.split(data.synth_dataset(0, 90), (0.7, 0.0, 0.3), seed=0)
    # batch gradient descent on the multinomial logistic loss
    w = np.zeros((784, 10))
    onehot = np.eye(10)[tr.y]
    for _ in range(200):
        z = tr.x @ w
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        w -= 0.1 * tr.x.T @ (p - onehot) / len(tr)
    assert np.mean(np.argmax(te.x @ w, axis=1) == te.y) >= 0.99
