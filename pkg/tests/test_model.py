import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskcluster.errors import EmptyMaskAtFeatureScale, ShapeMismatch
from maskcluster.model import (
    ClassPromptBank,
    Decoder,
    ImageEncoder,
    decode,
    decode_backward,
    encode_class_prompts,
    encode_class_prompts_backward,
    encode_image,
    encode_image_backward,
    extract_patches,
    init_decoder,
    init_image_encoder,
    init_prompt_bank,
    mask_pool,
    mask_pool_weights,
    momentum_update,
    similarity_map,
    similarity_map_backward,
)
from maskcluster.numerics import finite_difference_gradient, relative_error

TOL = 1e-4


def fd(loss, x):
    """Central-difference gradient of ``loss`` w.r.t. array ``x`` (any shape)."""
    return finite_difference_gradient(lambda flat: loss(flat.reshape(x.shape)), x.ravel().copy()).reshape(x.shape)


def test_encode_image_examples(rng):
    enc = ImageEncoder(np.zeros((8 * 8 * 3, 5)), np.zeros(5), 8)
    f = encode_image(enc, rng.random((64, 64, 3)))
    assert f.shape == (8, 8, 5) and not f.any()
    with pytest.raises(ShapeMismatch):
        encode_image(enc, rng.random((60, 64, 3)))


def test_extract_patches_layout():
    img = np.arange(4 * 4 * 1, dtype=float).reshape(4, 4, 1)
    P = extract_patches(img, 2)
    np.testing.assert_array_equal(P[0, 1], [2, 3, 6, 7])


def test_encode_image_linear(rng):
    enc = init_image_encoder(rng, 2, 3, 4)
    enc.bias[:] = 0.0
    i1, i2 = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    a, b = 0.3, -1.7
    np.testing.assert_allclose(encode_image(enc, a * i1 + b * i2), a * encode_image(enc, i1) + b * encode_image(enc, i2),
                               atol=1e-12)


def test_encode_image_gradient(rng):
    enc = init_image_encoder(rng, 2, 3, 4)
    img = rng.random((8, 8, 3))
    patches = extract_patches(img, 2)
    gw, gb = encode_image_backward(patches, np.ones((4, 4, 4)))
    num = fd(lambda W: encode_image(ImageEncoder(W, enc.bias, 2), img).sum(), enc.weight)
    assert relative_error(gw, num) < TOL
    num_b = fd(lambda b: encode_image(ImageEncoder(enc.weight, b, 2), img).sum(), enc.bias)
    assert relative_error(gb, num_b) < TOL


def test_momentum_examples():
    s = ImageEncoder(np.zeros((1, 1)), np.zeros(1), 1)
    m = ImageEncoder(np.ones((1, 1)), np.ones(1), 1)
    assert momentum_update(s, m, 0.999).weight[0, 0] == pytest.approx(0.999, abs=1e-15)
    frozen = momentum_update(s, m, 1.0)
    assert frozen.weight[0, 0] == 1.0 and frozen.weight is not m.weight
    tracked = momentum_update(s, m, 0.0)
    np.testing.assert_array_equal(tracked.weight, s.weight)
    with pytest.raises(ValueError):
        momentum_update(s, m, 1.5)
    with pytest.raises(ShapeMismatch):
        momentum_update(ImageEncoder(np.zeros((2, 1)), np.zeros(1), 1), m, 0.5)


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.floats(0, 1))
def test_momentum_contracts_toward_student(seed, gamma):
    rng = np.random.default_rng(seed)
    s = ImageEncoder(rng.standard_normal((3, 2)), rng.standard_normal(2), 1)
    m = ImageEncoder(rng.standard_normal((3, 2)), rng.standard_normal(2), 1)
    new = momentum_update(s, m, gamma)
    assert new.weight.shape == m.weight.shape
    np.testing.assert_allclose(np.abs(new.weight - s.weight), gamma * np.abs(m.weight - s.weight), atol=1e-12)


def test_class_prompt_examples():
    bank = ClassPromptBank(np.array([[[3.0, 4.0]]]), np.eye(2), np.zeros(2))
    np.testing.assert_allclose(encode_class_prompts(bank), [[0.6, 0.8]])
    tokens = np.ones((2, 2, 3))
    bank = init_prompt_bank(np.random.default_rng(0), 2, 2, 3, 5)
    bank.tokens = tokens
    fc = encode_class_prompts(bank)
    np.testing.assert_array_equal(fc[0], fc[1])


def test_class_prompts_unit_and_gradient(rng):
    bank = init_prompt_bank(rng, 4, 2, 3, 6)
    fc = encode_class_prompts(bank)
    np.testing.assert_allclose(np.linalg.norm(fc, axis=1), 1.0, atol=1e-7)
    G = rng.standard_normal(fc.shape)
    analytic = encode_class_prompts_backward(bank, G)

    def loss(t):
        return float(np.sum(encode_class_prompts(ClassPromptBank(t, bank.projection, bank.projection_bias)) * G))

    assert relative_error(analytic, fd(loss, bank.tokens)) < TOL


def area_oracle(mask, h, w):
    """Exact overlap area of every mask pixel square with every feature cell square."""
    H, W = mask.shape
    out = np.zeros((h, w))
    for y, x in zip(*np.nonzero(mask)):
        py0, py1, px0, px1 = y / H, (y + 1) / H, x / W, (x + 1) / W
        for i in range(h):
            for j in range(w):
                dy = max(0.0, min(py1, (i + 1) / h) - max(py0, i / h))
                dx = max(0.0, min(px1, (j + 1) / w) - max(px0, j / w))
                out[i, j] += dy * dx * h * w
    return out


def test_mask_pool_weights_match_area_oracle(rng):
    for _ in range(5):
        mask = rng.random((16, 16)) < 0.3
        np.testing.assert_allclose(mask_pool_weights(mask[None], 4, 4)[0], area_oracle(mask, 4, 4), atol=1e-12)


def test_mask_pool_examples(rng):
    f = rng.standard_normal((4, 4, 3))
    tiny = np.zeros((1, 16, 16), bool)
    tiny[0, 5, 9] = True
    w = mask_pool_weights(tiny, 4, 4)
    assert w.sum() > 0 and w[0, 1, 2] == w.max()
    np.testing.assert_allclose(mask_pool(f, tiny)[0], f[1, 2])
    const = np.tile(np.array([1.0, -2.0, 0.5]), (4, 4, 1))
    m = rng.random((1, 16, 16)) < 0.5
    np.testing.assert_allclose(mask_pool(const, m)[0], [1.0, -2.0, 0.5])
    two = np.zeros((1, 4, 4), bool)
    two[0, 0, :2] = True
    np.testing.assert_allclose(mask_pool(f, two)[0], (f[0, 0] + f[0, 1]) / 2)
    np.testing.assert_allclose(mask_pool(f, np.ones((1, 16, 16), bool))[0], f.mean(axis=(0, 1)))
    with pytest.raises(EmptyMaskAtFeatureScale) as err:
        mask_pool(f, np.stack([m[0], np.zeros((16, 16), bool)]))
    assert err.value.index == 1


def test_similarity_map_examples_and_bounds(rng):
    f = rng.standard_normal((3, 3, 4))
    sim = similarity_map(f, f[1, 2][None])
    assert sim[1, 2, 0] == pytest.approx(1.0)
    assert np.all(np.abs(sim) <= 1 + 1e-9)
    g = np.zeros((2, 2, 2))
    g[..., 0] = 1.0
    assert not similarity_map(g, [[0.0, 1.0]]).any()


def test_similarity_map_gradients(rng):
    f = rng.standard_normal((4, 4, 5))
    refs = rng.standard_normal((3, 5))
    G = rng.standard_normal((4, 4, 3))
    gf, gr = similarity_map_backward(f, refs, G)
    assert relative_error(gf, fd(lambda x: float(np.sum(similarity_map(x, refs) * G)), f)) < TOL
    assert relative_error(gr, fd(lambda x: float(np.sum(similarity_map(f, x) * G)), refs)) < TOL


def test_decode_examples(rng):
    dec = init_decoder(3, 4)
    out = decode(dec, np.full((2, 2, 3), 0.7))
    assert out.shape == (8, 8, 3)
    np.testing.assert_allclose(out, 0.7, atol=1e-15)
    assert decode(init_decoder(2, 4), np.zeros((20, 20, 2))).shape == (80, 80, 2)
    with pytest.raises(ShapeMismatch):
        decode(dec, np.zeros((2, 2, 4)))


def test_decode_gradients(rng):
    k = 3
    dec = Decoder(rng.standard_normal((3, 3, k, k)) * 0.3, rng.standard_normal(k), 2)
    sim = rng.uniform(-1, 1, (4, 4, k))
    G = rng.standard_normal((8, 8, k))
    gs, gk, gb = decode_backward(dec, sim, G)
    assert relative_error(gk, fd(lambda x: float(np.sum(decode(Decoder(x, dec.bias, 2), sim) * G)), dec.kernel)) < TOL
    assert relative_error(gb, fd(lambda x: float(np.sum(decode(Decoder(dec.kernel, x, 2), sim) * G)), dec.bias)) < TOL
    assert relative_error(gs, fd(lambda x: float(np.sum(decode(dec, x) * G)), sim)) < TOL
