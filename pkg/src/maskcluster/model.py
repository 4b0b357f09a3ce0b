"""Toy differentiable model: patch encoder, class prompt bank, decoder.

Every differentiable forward function ``f`` has a ``f_backward`` partner
that maps the upstream gradient to gradients of its inputs/parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .errors import EmptyMaskAtFeatureScale, ShapeMismatch
from .numerics import (
    area_downsample_stack,
    bilinear_upsample,
    bilinear_upsample_backward,
    normalize_rows,
    normalize_rows_backward,
)

MIN_POOL_WEIGHT = 1e-9


@dataclass
class ImageEncoder:
    """Linear patch embedding: ``f(cell) = flatten(patch) @ weight + bias``."""

    weight: np.ndarray  # (p*p*channels) x d
    bias: np.ndarray  # d
    patch_size: int

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "ImageEncoder":
        return ImageEncoder(self.weight.copy(), self.bias.copy(), self.patch_size)


@dataclass
class ClassPromptBank:
    tokens: np.ndarray  # k x l x d_e, learnable
    projection: np.ndarray  # (l*d_e) x d, frozen
    projection_bias: np.ndarray  # d, frozen

    @property
    def k(self) -> int:
        return self.tokens.shape[0]


@dataclass
class Decoder:
    kernel: np.ndarray  # 3 x 3 x k x k
    bias: np.ndarray  # k
    factor: int = 4


def init_image_encoder(rng: np.random.Generator, patch_size: int, channels: int, dim: int) -> ImageEncoder:
    fan_in = patch_size * patch_size * channels
    weight = rng.standard_normal((fan_in, dim)) / np.sqrt(fan_in)
    # centre features on mid-grey input so cosine maps are not dominated by
    # the all-positive pixel mean
    bias = -0.5 * weight.sum(axis=0)
    return ImageEncoder(weight, bias, patch_size)


def init_prompt_bank(rng: np.random.Generator, k: int, length: int, token_dim: int, dim: int) -> ClassPromptBank:
    tokens = rng.standard_normal((k, length, token_dim))
    projection = rng.standard_normal((length * token_dim, dim)) / np.sqrt(length * token_dim)
    return ClassPromptBank(tokens, projection, np.zeros(dim))


def init_decoder(k: int, factor: int = 4) -> Decoder:
    kernel = np.zeros((3, 3, k, k))
    kernel[1, 1] = np.eye(k)
    return Decoder(kernel, np.zeros(k), factor)


def extract_patches(image, patch_size: int) -> np.ndarray:
    """``H x W x C`` image to ``h x w x (p*p*C)`` patch vectors."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeMismatch(f"expected H x W x C image, got {image.shape}")
    H, W, C = image.shape
    p = patch_size
    if H % p or W % p:
        raise ShapeMismatch(f"image {H}x{W} not divisible by patch size {p}")
    h, w = H // p, W // p
    return image.reshape(h, p, w, p, C).transpose(0, 2, 1, 3, 4).reshape(h, w, p * p * C)


def encode_image(params: ImageEncoder, image) -> np.ndarray:
    patches = extract_patches(image, params.patch_size)
    if patches.shape[-1] != params.weight.shape[0]:
        raise ShapeMismatch(f"patch length {patches.shape[-1]} != encoder fan-in {params.weight.shape[0]}")
    return patches @ params.weight + params.bias


def encode_image_backward(patches: np.ndarray, grad_features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    P = patches.reshape(-1, patches.shape[-1])
    G = grad_features.reshape(-1, grad_features.shape[-1])
    return P.T @ G, G.sum(axis=0)


def momentum_update(student: ImageEncoder, momentum: ImageEncoder, gamma: float) -> ImageEncoder:
    """``theta' <- gamma * theta' + (1 - gamma) * theta`` for every parameter."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if student.weight.shape != momentum.weight.shape or student.bias.shape != momentum.bias.shape:
        raise ShapeMismatch("student and momentum encoders differ in shape")
    if gamma == 1.0:
        return momentum.copy()
    return replace(
        momentum,
        weight=gamma * momentum.weight + (1.0 - gamma) * student.weight,
        bias=gamma * momentum.bias + (1.0 - gamma) * student.bias,
    )


def _project_prompts(bank: ClassPromptBank) -> np.ndarray:
    flat = bank.tokens.reshape(bank.k, -1)
    return flat @ bank.projection + bank.projection_bias


def encode_class_prompts(bank: ClassPromptBank) -> np.ndarray:
    """Unit-norm class features, one row per prompt."""
    unit, _ = normalize_rows(_project_prompts(bank))
    return unit


def encode_class_prompts_backward(bank: ClassPromptBank, grad_features: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the prompt tokens (the projection is frozen)."""
    unit, norms = normalize_rows(_project_prompts(bank))
    g_raw = normalize_rows_backward(grad_features, unit, norms)
    return (g_raw @ bank.projection.T).reshape(bank.tokens.shape)


def mask_pool_weights(masks, h: int, w: int) -> np.ndarray:
    """Soft ``N x h x w`` weights: exact area fraction of each cell under each mask."""
    masks = np.asarray(masks)
    if masks.ndim != 3:
        raise ShapeMismatch(f"expected N x H x W masks, got {masks.shape}")
    return area_downsample_stack(masks, h, w)


def mask_pool(features, masks) -> np.ndarray:
    """Area-weighted mean feature under each mask, ``N x d``."""
    features = np.asarray(features, dtype=np.float64)
    h, w, d = features.shape
    weights = mask_pool_weights(masks, h, w)
    totals = weights.sum(axis=(1, 2))
    empty = np.flatnonzero(totals < MIN_POOL_WEIGHT)
    if len(empty):
        raise EmptyMaskAtFeatureScale(int(empty[0]))
    pooled = weights.reshape(len(weights), -1) @ features.reshape(-1, d)
    return pooled / totals[:, None]


def similarity_map(features, references) -> np.ndarray:
    """Cosine similarity of every feature cell with every reference, ``h x w x c``."""
    fu, _ = normalize_rows(features)
    ru, _ = normalize_rows(np.atleast_2d(references))
    return fu @ ru.T


def similarity_map_backward(features, references, grad) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``similarity_map`` w.r.t. features and references."""
    fu, fn = normalize_rows(features)
    ru, rn = normalize_rows(np.atleast_2d(references))
    g_fu = grad @ ru
    g_ru = grad.reshape(-1, grad.shape[-1]).T @ fu.reshape(-1, fu.shape[-1])
    return normalize_rows_backward(g_fu, fu, fn), normalize_rows_backward(g_ru, ru, rn)


def decode(params: Decoder, simmap) -> np.ndarray:
    """Same-padded 3x3 conv over the class channels, then bilinear upsampling."""
    simmap = np.asarray(simmap, dtype=np.float64)
    if simmap.ndim != 3 or simmap.shape[2] != params.kernel.shape[2]:
        raise ShapeMismatch(f"decoder expects {params.kernel.shape[2]} channels, got map {simmap.shape}")
    hidden = _kernels.conv3x3_same(simmap, params.kernel, params.bias)
    return bilinear_upsample(hidden, params.factor)


def decode_backward(params: Decoder, simmap, grad_logits) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(d_simmap, d_kernel, d_bias)``."""
    g_hidden = bilinear_upsample_backward(grad_logits, params.factor)
    return _kernels.conv3x3_same_backward(np.asarray(simmap, dtype=np.float64), params.kernel, g_hidden)


def upsample_only(simmap, factor: int) -> np.ndarray:
    """Decoder path for maps whose channel count differs from the class count."""
    return bilinear_upsample(simmap, factor)
