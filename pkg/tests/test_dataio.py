import dataclasses
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from maskcluster.config import GeneratorSpec
from maskcluster.dataio import (
    UNLABELED,
    default_palette,
    fragment_masks,
    generate_dataset,
    generate_scene,
    read_checkpoint,
    read_dataset,
    write_checkpoint,
    write_dataset,
)
from maskcluster.errors import BadMagic, CorruptManifest, ShapeMismatch
from maskcluster.numerics import substream
from maskcluster.training import fit, init_state


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_single_class_scene():
    s = generate_scene(GeneratorSpec(num_classes=1, image_size=16), np.random.default_rng(0))
    assert len(s.gt_masks) == 1 and s.gt_masks[0].all()
    assert np.all(s.gt_labels == 0)


@pytest.mark.parametrize("seed", range(5))
def test_four_class_scene_contract(seed):
    s = generate_scene(GeneratorSpec(), np.random.default_rng(seed))
    assert s.image.shape == (64, 64, 3) and 0 <= s.image.min() and s.image.max() <= 1
    assert np.all(s.gt_labels != UNLABELED)
    assert np.all(s.gt_masks.sum(0) == 1)  # disjoint and covering
    for m, c in zip(s.gt_masks, s.gt_classes):
        np.testing.assert_array_equal(m, s.gt_labels == c)
    assert len(set(s.gt_classes.tolist())) == len(s.gt_classes)


def test_scene_deterministic():
    a = generate_scene(GeneratorSpec(), np.random.default_rng(3))
    b = generate_scene(GeneratorSpec(), np.random.default_rng(3))
    assert a.image.tobytes() == b.image.tobytes()
    assert a.unlabeled_masks.tobytes() == b.unlabeled_masks.tobytes()


def test_palette_names():
    names = [c.name for c in default_palette(4)]
    assert names == ["background", "circle", "rectangle", "triangle"]
    assert len(default_palette(9)) == 9


def test_fragment_examples():
    rng = np.random.default_rng(0)
    masks = np.zeros((2, 5, 5), bool)
    masks[0, :2] = True
    masks[1, 3:] = True
    np.testing.assert_array_equal(fragment_masks(masks, rng, (1, 1), "grid"), masks)
    tiny = np.ones((1, 2, 2), bool)
    out = fragment_masks(tiny, rng, (4, 4), "grid")
    assert len(out) == 4 and np.all(out.sum(axis=(1, 2)) == 1)
    with pytest.raises(ValueError):
        fragment_masks(tiny, rng, (0, 2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["grid", "voronoi"]), st.integers(1, 6), st.integers(0, 4))
def test_fragments_partition_each_mask(seed, mode, lo, extra):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, (12, 12))
    gt = np.stack([labels == c for c in range(3)])
    frags = fragment_masks(gt, rng, (lo, lo + extra), mode)
    assert np.all(frags.any(axis=(1, 2)))
    for g in gt:
        inside = [f for f in frags if (f & g).any()]
        # never crosses a class boundary
        assert all(not (f & ~g).any() for f in inside)
        stacked = np.stack(inside)
        np.testing.assert_array_equal(stacked.any(0), g)
        assert stacked.sum(0).max() == 1


def test_generated_fragments_respect_classes():
    for s in generate_dataset(GeneratorSpec(num_samples=5, seed=1)):
        for f in s.unlabeled_masks:
            assert len(np.unique(s.gt_labels[f])) == 1


def test_dataset_round_trip(tmp_path):
    samples = generate_dataset(GeneratorSpec(num_samples=10, image_size=32))
    write_dataset(samples, tmp_path, ["a", "b", "c", "d"])
    back, manifest = read_dataset(tmp_path)
    assert manifest["num_samples"] == 10 and manifest["class_names"] == ["a", "b", "c", "d"]
    for s, r in zip(samples, back):
        np.testing.assert_array_equal(s.image, r.image)
        np.testing.assert_array_equal(s.unlabeled_masks, r.unlabeled_masks)
        np.testing.assert_array_equal(s.gt_labels, r.gt_labels)
        np.testing.assert_array_equal(s.gt_masks, r.gt_masks)


def test_dataset_byte_identical(tmp_path):
    spec = GeneratorSpec(num_samples=4, image_size=32, seed=11)
    write_dataset(generate_dataset(spec), tmp_path / "a", ["x"] * 4)
    write_dataset(generate_dataset(spec), tmp_path / "b", ["x"] * 4)
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_truncated_and_corrupt_files(tmp_path):
    samples = generate_dataset(GeneratorSpec(num_samples=2, image_size=16))
    write_dataset(samples, tmp_path, ["a"] * 4)
    msk = tmp_path / "00001.msk"
    raw = msk.read_bytes()
    msk.write_bytes(raw[:-7])
    with pytest.raises((BadMagic, ShapeMismatch)):
        read_dataset(tmp_path)
    msk.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        read_dataset(tmp_path)


def test_empty_dir_is_corrupt(tmp_path):
    with pytest.raises(CorruptManifest):
        read_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(CorruptManifest):
        read_dataset(tmp_path)


def trained_state(small_dataset, steps):
    cfg = dataclasses.replace(tiny_config(), image_size=32, patch_size=4, upsample_factor=4, steps=steps, batch_size=3)
    return fit(init_state(cfg), small_dataset)


def test_checkpoint_round_trip(tmp_path, small_dataset):
    state, _ = trained_state(small_dataset, 3)
    write_checkpoint(state, tmp_path)
    back = read_checkpoint(tmp_path)
    assert back.step == 3 and back.config == state.config
    for name, t in state.tensors().items():
        np.testing.assert_array_equal(back.tensors()[name], t)


def test_checkpoint_mismatched_k(tmp_path, small_dataset):
    state, _ = trained_state(small_dataset, 1)
    write_checkpoint(state, tmp_path)
    with pytest.raises(ShapeMismatch, match="prompts.tokens"):
        read_checkpoint(tmp_path, dataclasses.replace(state.config, k=5))


def test_checkpoint_truncated_blob(tmp_path, small_dataset):
    state, _ = trained_state(small_dataset, 1)
    write_checkpoint(state, tmp_path)
    blob = tmp_path / "checkpoint.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises((ShapeMismatch, CorruptManifest)):
        read_checkpoint(tmp_path)


def test_resume_matches_uninterrupted(tmp_path, small_dataset):
    full, full_log = trained_state(small_dataset, 6)
    half, half_log = trained_state(small_dataset, 3)
    write_checkpoint(half, tmp_path)
    resumed = read_checkpoint(tmp_path)
    resumed, rest = fit(resumed, small_dataset, dataclasses.replace(resumed.config, steps=6))
    assert half_log + rest == full_log
    for name, t in full.tensors().items():
        np.testing.assert_array_equal(resumed.tensors()[name], t)


def test_dataset_substreams_independent():
    spec = GeneratorSpec(num_samples=3, image_size=16)
    a = generate_dataset(spec)
    b = [generate_scene(spec, substream(spec.seed, 2, i), substream(spec.seed, 3, i)) for i in range(3)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
