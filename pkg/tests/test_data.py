import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poisonprobe.architecture import ArchitectureSpec, SoftmaxHead
from poisonprobe.data import (DataFormatError, Dataset, balanced_counts, load_idx, save_idx, split_disjoint,
                              stratified_sample, subsample, synth_generate, synth_generate_counts)
from poisonprobe.models import build_model
from poisonprobe.training import TrainConfig, evaluate_accuracy, train


def _write_idx(tmp_path, pixels, labels, img_magic=0x803, lab_magic=0x801, n_labels=None):
    n, rows, cols = pixels.shape
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(struct.pack(">IIII", img_magic, n, rows, cols) + pixels.astype(np.uint8).tobytes())
    nl = len(labels) if n_labels is None else n_labels
    lp.write_bytes(struct.pack(">II", lab_magic, nl) + np.asarray(labels, dtype=np.uint8).tobytes())
    return ip, lp


def test_load_idx(tmp_path):
    pixels = np.random.default_rng(0).integers(0, 256, (5, 28, 28))
    pixels[0, 0, 0] = 255
    ip, lp = _write_idx(tmp_path, pixels, [0, 1, 2, 3, 4])
    ds = load_idx(ip, lp)
    assert ds.images.shape == (5, 28, 28, 1)
    assert ds.images[0, 0, 0, 0] == 1.0
    np.testing.assert_array_equal(ds.images[..., 0] * 255.0, pixels)


def test_load_idx_errors(tmp_path):
    pixels = np.zeros((3, 4, 4))
    ip, lp = _write_idx(tmp_path, pixels, [0, 1, 1, 0], n_labels=4)
    with pytest.raises(DataFormatError):
        load_idx(ip, lp)
    ip, lp = _write_idx(tmp_path, pixels, [0, 1, 1], img_magic=0x802)
    with pytest.raises(DataFormatError):
        load_idx(ip, lp)
    ip, lp = _write_idx(tmp_path, pixels, [0, 1, 1])
    ip.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(DataFormatError):
        load_idx(ip, lp)


def test_idx_round_trip(tmp_path, synth_small):
    save_idx(synth_small, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l", classes=10)
    np.testing.assert_array_equal(back.labels, synth_small.labels)
    assert np.abs(back.images - synth_small.images).max() <= 0.5 / 255 + 1e-12


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 3, 1)), [0], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 3, 3, 1)), [2], 2)
    with pytest.raises(ValueError):
        Dataset(np.full((1, 3, 3, 1), 1.5), [0], 2)


def test_synth_determinism_and_counts():
    a = synth_generate(3, 100, geometry_seed=4)
    b = synth_generate(3, 100, geometry_seed=4)
    assert a.images.tobytes() == b.images.tobytes()
    assert len(a) == 300 and list(a.class_counts()) == [100, 100, 100]
    assert a.image_shape == (16, 16, 1)


def test_synth_zero_noise_is_prototype():
    ds = synth_generate(4, 5, geometry_seed=1, noise=0.0)
    for c in range(4):
        imgs = ds.images[ds.labels == c]
        assert np.all(imgs == imgs[0])
    assert len({ds.images[ds.labels == c][0].tobytes() for c in range(4)}) == 4


def test_synth_counts_match_generator():
    a = synth_generate(5, 7, geometry_seed=2, noise_seed=9)
    b = synth_generate_counts([7] * 5, geometry_seed=2, noise_seed=9)
    assert a.images.tobytes() == b.images.tobytes()


def test_synth_classes_linearly_separable():
    ds = synth_generate(10, 100, geometry_seed=0, noise_seed=1)
    perm = np.random.default_rng(0).permutation(len(ds))
    cut = int(0.8 * len(ds))
    fit, held = ds.take(perm[:cut]), ds.take(perm[cut:])
    probe = build_model(ArchitectureSpec((16, 16, 1), (SoftmaxHead(10),)), 0)
    probe = train(probe, fit, TrainConfig(epochs=10, dropout=0.0))
    assert evaluate_accuracy(probe, held) >= 0.95


def test_balanced_counts():
    assert balanced_counts(10, 3) == [4, 3, 3]
    assert balanced_counts(5000, 10, {2: 300}) == [523, 523, 300] + [522] * 7
    with pytest.raises(ValueError):
        balanced_counts(5, 3, {0: 6})


def test_subsample_counts(synth_small):
    ds = synth_generate(2, 1000, geometry_seed=0)
    part = subsample(ds, 0.2, 1)
    assert list(part.class_counts()) == [200, 200]
    full = subsample(synth_small, 1.0, 3)
    assert sorted(full.images.reshape(len(full), -1).tolist()) == \
        sorted(synth_small.images.reshape(len(synth_small), -1).tolist())
    with pytest.raises(ValueError):
        subsample(synth_small, 0.0, 0)
    with pytest.raises(ValueError):
        subsample(synth_small, 0.001, 0)


def _rows(ds):
    return sorted(map(bytes, (img.tobytes() + bytes([lab]) for img, lab in zip(ds.images, ds.labels))))


@settings(max_examples=10, deadline=None)
@given(parts=st.integers(2, 5), seed=st.integers(0, 1000))
def test_split_disjoint_partitions(synth_small, parts, seed):
    pieces = split_disjoint(synth_small, parts, seed)
    assert len(pieces) == parts
    assert sum(len(p) for p in pieces) == len(synth_small)
    merged = sorted(r for p in pieces for r in _rows(p))
    assert merged == _rows(synth_small)
    for p in pieces:
        assert p.class_counts().max() - p.class_counts().min() <= 1


def test_split_three_equal_parts():
    ds = synth_generate(10, 60, geometry_seed=0)
    assert [len(p) for p in split_disjoint(ds, 3, 0)] == [200, 200, 200]
    with pytest.raises(ValueError):
        split_disjoint(synth_generate(2, 2, geometry_seed=0), 3, 0)


def test_stratified_sample_exact_count(synth_small):
    for count in (0, 7, 33, 300):
        part = stratified_sample(synth_small, count, 0)
        assert len(part) == count
        assert part.class_counts().max() - part.class_counts().min() <= 1
