import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_config
from maskcluster.config import GeneratorSpec
from maskcluster.dataio import UNLABELED, generate_dataset
from maskcluster.evaluation import (
    classify_masks,
    evaluate,
    greedy_match,
    hungarian_match,
    infer_segmentation,
    miou,
    relabel_predictions,
)
from maskcluster.model import encode_class_prompts, encode_image, mask_pool, similarity_map
from maskcluster.training import init_state


def brute_force_match(A):
    k, c = A.shape
    if k <= c:
        return max(sum(A[i, p[i]] for i in range(k)) for p in itertools.permutations(range(c), k))
    return max(sum(A[p[j], j] for j in range(c)) for p in itertools.permutations(range(k), c))


def square_state(k=4):
    cfg = dataclasses.replace(tiny_config(k=k), image_size=32, patch_size=4, upsample_factor=4)
    return init_state(cfg)


def test_miou_examples():
    gt = np.random.default_rng(0).integers(0, 3, (6, 6))
    assert miou(gt, gt, 3)["miou"] == 1.0
    pred = np.zeros((4, 4), int)
    pred[:, :2] = 1
    g = np.zeros((4, 4), int)
    g[:2, :] = 1
    assert miou(pred, g, 2)["per_class_iou"][1] == pytest.approx(1 / 3, abs=0)
    a = np.zeros((2, 2), int); a[0, 0] = 1
    b = np.zeros((2, 2), int); b[1, 1] = 1
    assert miou(a, b, 2)["per_class_iou"][1] == 0.0


def test_miou_ignores_unlabeled():
    gt = np.array([[0, UNLABELED], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    assert miou(pred, gt, 2)["miou"] == 1.0


def test_hungarian_examples():
    pairs, total = hungarian_match([[0.9, 0.1], [0.2, 0.8]])
    assert pairs == {0: 0, 1: 1} and total == pytest.approx(1.7)
    pairs, total = hungarian_match([[0.1, 0.9], [0.8, 0.2]])
    assert pairs == {0: 1, 1: 0} and total == pytest.approx(1.7)
    pairs, _ = hungarian_match(np.random.default_rng(0).random((3, 2)))
    assert len(pairs) == 2 and len(set(pairs.values())) == 2


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(0, 1)))
def test_hungarian_optimal_and_beats_greedy(A):
    pairs, total = hungarian_match(A)
    assert len(pairs) == min(A.shape)
    assert total == pytest.approx(brute_force_match(A), abs=1e-12)
    assert total >= greedy_match(A)[1] - 1e-12


def set_class_features(state, features):
    """Make the class features equal (up to norm) to the given rows."""
    bank = state.prompts
    rows, d = bank.projection.shape
    bank.projection = np.eye(rows, d)
    bank.projection_bias = np.zeros(d)
    tokens = np.zeros((bank.k, rows))
    tokens[:, :d] = features
    bank.tokens = tokens.reshape(bank.tokens.shape)


def test_infer_segmentation_examples(rng):
    img = rng.random((32, 32, 3))
    assert not infer_segmentation(square_state(k=1), img).any()
    state = square_state(k=3)
    np.testing.assert_array_equal(infer_segmentation(state, img), infer_segmentation(state, img))
    f = encode_image(state.student, img)
    cell = f[3, 5]
    set_class_features(state, np.stack([-cell, rng.standard_normal(cell.shape), cell]))
    seg = infer_segmentation(state, img)
    assert seg.shape == (32, 32)
    assert np.all(seg[12:16, 20:24] == 2)


def test_classify_masks_examples(rng):
    state = square_state(k=3)
    img = rng.random((32, 32, 3))
    masks = np.zeros((2, 32, 32), bool)
    masks[0, :16] = True
    masks[1, 16:] = True
    fm = mask_pool(encode_image(state.student, img), masks)
    set_class_features(state, np.stack([-fm[1], fm[0], fm[1]]))
    np.testing.assert_array_equal(classify_masks(state, img, masks), [1, 2])
    full = np.ones((1, 32, 32), bool)
    f = encode_image(state.student, img)
    expected = np.argmax(similarity_map(f.mean(axis=(0, 1))[None], encode_class_prompts(state.prompts))[0])
    assert classify_masks(state, img, full)[0] == expected
    assert not classify_masks(square_state(k=1), img, masks).any()


def test_evaluate_totality_and_permutation_invariance():
    samples = generate_dataset(GeneratorSpec(num_samples=4, image_size=32, seed=2))
    state = square_state(k=6)
    rep = evaluate(state, samples, 4)
    assert 0.0 <= rep.miou <= 1.0 and rep.num_samples == 4
    assert set(rep.to_json_dict()) == {"miou", "per_class_iou", "matching", "mask_accuracy", "num_samples"}
    perm = np.random.default_rng(0).permutation(6)
    shuffled = dataclasses.replace(state, prompts=dataclasses.replace(state.prompts, tokens=state.prompts.tokens[perm]))
    assert evaluate(shuffled, samples, 4).miou == pytest.approx(rep.miou, abs=1e-15)


def test_evaluate_single_sample_equals_miou():
    sample = generate_dataset(GeneratorSpec(num_samples=1, image_size=32, seed=5))
    state = square_state(k=4)
    rep = evaluate(state, sample, 4)
    pred = relabel_predictions(infer_segmentation(state, sample[0].image), rep.matching, 4)
    assert rep.miou == pytest.approx(miou(pred, sample[0].gt_labels, 4)["miou"], abs=1e-15)


def test_evaluate_masks_from_gt():
    samples = generate_dataset(GeneratorSpec(num_samples=3, image_size=32, seed=4))
    rep = evaluate(square_state(k=4), samples, 4, masks_from_gt=True)
    assert rep.mask_accuracy is not None and 0 <= rep.mask_accuracy <= 1
