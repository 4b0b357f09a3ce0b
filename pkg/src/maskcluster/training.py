"""Training loop: cluster-union targets, per-pixel BCE, manual backprop, AdamW.

One step:

1. pool mask features from the momentum encoder on the clean images
   (or from the student when the momentum encoder is disabled);
2. encode the class prompts and build the class-by-mask cosine affinity;
3. solve the balanced assignment, take the column argmax and union the
   masks of every cluster into one target map per class;
4. run the student on the augmented images, build the cosine map against
   the class features, decode and score it with per-pixel BCE;
5. backpropagate by hand into encoder, prompt tokens and decoder, apply
   AdamW per parameter group and move the momentum encoder.

Targets (and the assignment behind them) are constants for the gradient.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .clustering import class_mask_affinity, hard_assign, sinkhorn_solve, union_masks
from .config import TrainConfig
from .errors import NoSupervisedPixels, NonFiniteLoss, ShapeMismatch
from .model import (
    ClassPromptBank,
    Decoder,
    ImageEncoder,
    decode,
    decode_backward,
    encode_class_prompts,
    encode_class_prompts_backward,
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
    upsample_only,
)
from .numerics import (
    STREAM_AUGMENT,
    STREAM_INIT,
    STREAM_SHUFFLE,
    area_downsample_stack,
    bilinear_upsample_backward,
    substream,
)

log = logging.getLogger(__name__)

PARAM_GROUPS = {
    "encoder": ("encoder.weight", "encoder.bias"),
    "prompts": ("prompts.tokens",),
    "decoder": ("decoder.kernel", "decoder.bias"),
}
LEARNABLE = tuple(name for names in PARAM_GROUPS.values() for name in names)


# -- loss ---------------------------------------------------------------------

def bce_mask_loss(logits, targets, coverage=None, cover_only: bool = True,
                  supervise_empty: bool = True, scale: float = 10.0) -> tuple[float, np.ndarray]:
    """Mean per-pixel BCE of ``sigmoid(scale * logits)`` against binary targets.

    ``logits`` is ``h x w x c``; ``targets`` is ``c x h x w``. Returns the loss
    and its gradient w.r.t. ``logits``.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.moveaxis(np.asarray(targets, dtype=np.float64), 0, -1)
    if z.shape != t.shape:
        raise ShapeMismatch(f"logits {z.shape} vs targets {t.shape}")
    sup = np.ones(z.shape, dtype=bool)
    if cover_only and coverage is not None:
        sup &= np.asarray(coverage, dtype=bool)[..., None]
    if not supervise_empty:
        sup &= t.any(axis=(0, 1))[None, None, :]
    count = int(sup.sum())
    if count == 0:
        raise NoSupervisedPixels("every loss entry was masked out")
    x = scale * z
    per = np.maximum(x, 0.0) - t * x + np.log1p(np.exp(-np.abs(x)))
    loss = float(per[sup].sum() / count)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    grad = np.where(sup, scale * (sig - t) / count, 0.0)
    return loss, grad


def resize_targets(stack, out_h: int, out_w: int) -> np.ndarray:
    """Binary ``N x H x W`` maps to ``N x out_h x out_w``: area fraction >= 0.5."""
    stack = np.asarray(stack)
    _, H, W = stack.shape
    if out_h >= H and out_w >= W:
        if out_h % H or out_w % W:
            raise ShapeMismatch(f"cannot resize {H}x{W} targets to {out_h}x{out_w}")
        return np.repeat(np.repeat(stack.astype(bool), out_h // H, axis=1), out_w // W, axis=2)
    return area_downsample_stack(stack, out_h, out_w) >= 0.5


# -- optimizer ----------------------------------------------------------------

def adamw_step(param, grad, m, v, lr: float, weight_decay: float = 1e-4,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, step: int = 1):
    """One decoupled-weight-decay Adam update; returns ``(param, m, v)``."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not (param.shape == grad.shape == np.shape(m) == np.shape(v)):
        raise ShapeMismatch(f"param {param.shape}, grad {grad.shape}, moments {np.shape(m)}/{np.shape(v)}")
    if step < 1:
        raise ValueError("step counts from 1")
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1**step)
    vhat = v / (1.0 - b2**step)
    param = param - lr * weight_decay * param
    param = param - lr * mhat / (np.sqrt(vhat) + eps)
    return param, m, v


# -- augmentation -------------------------------------------------------------

def cutout_augment(image, rng: np.random.Generator, n_holes: int = 1, hole_frac: float = 0.25) -> np.ndarray:
    """Paint ``n_holes`` squares of side ``hole_frac * min(H, W)`` with the mean colour."""
    if not 0.0 < hole_frac < 1.0 and n_holes:
        raise ValueError("hole_frac must lie in (0, 1)")
    out = np.array(image, dtype=np.float64)
    if n_holes <= 0:
        return out
    H, W = out.shape[:2]
    side = max(1, int(hole_frac * min(H, W)))
    mean = out.reshape(-1, out.shape[2]).mean(axis=0)
    for _ in range(n_holes):
        y = int(rng.integers(0, H - side + 1))
        x = int(rng.integers(0, W - side + 1))
        out[y:y + side, x:x + side] = mean
    return out


def color_jitter(image, rng: np.random.Generator, max_scale: float = 0.1, max_shift: float = 0.05) -> np.ndarray:
    """Per-channel ``a * v + b``, clamped to ``[0, 1]``."""
    image = np.asarray(image, dtype=np.float64)
    C = image.shape[2]
    a = rng.uniform(1.0 - max_scale, 1.0 + max_scale, size=C)
    b = rng.uniform(-max_shift, max_shift, size=C)
    if max_scale == 0 and max_shift == 0:
        return image.copy()
    return np.clip(image * a + b, 0.0, 1.0)


def augment(image, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    out = color_jitter(image, rng, cfg.jitter_scale, cfg.jitter_shift)
    return cutout_augment(out, rng, cfg.cutout_holes, cfg.cutout_frac)


# -- state --------------------------------------------------------------------

@dataclass
class TrainState:
    student: ImageEncoder
    momentum: ImageEncoder
    prompts: ClassPromptBank
    decoder: Decoder
    moments: dict  # name -> (m, v)
    step: int
    config: TrainConfig

    def params(self) -> dict[str, np.ndarray]:
        return {
            "encoder.weight": self.student.weight,
            "encoder.bias": self.student.bias,
            "prompts.tokens": self.prompts.tokens,
            "decoder.kernel": self.decoder.kernel,
            "decoder.bias": self.decoder.bias,
        }

    def with_params(self, params: dict[str, np.ndarray]) -> "TrainState":
        p = {**self.params(), **params}
        return replace(
            self,
            student=replace(self.student, weight=p["encoder.weight"], bias=p["encoder.bias"]),
            prompts=replace(self.prompts, tokens=p["prompts.tokens"]),
            decoder=replace(self.decoder, kernel=p["decoder.kernel"], bias=p["decoder.bias"]),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        """Every array needed to resume, in a fixed declaration order."""
        out = dict(self.params())
        out["momentum.weight"] = self.momentum.weight
        out["momentum.bias"] = self.momentum.bias
        out["prompts.projection"] = self.prompts.projection
        out["prompts.projection_bias"] = self.prompts.projection_bias
        for name in LEARNABLE:
            m, v = self.moments[name]
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out


def expected_shapes(cfg: TrainConfig) -> dict[str, tuple[int, ...]]:
    fan_in = cfg.patch_size * cfg.patch_size * cfg.channels
    shapes = {
        "encoder.weight": (fan_in, cfg.dim),
        "encoder.bias": (cfg.dim,),
        "prompts.tokens": (cfg.k, cfg.prompt_length, cfg.token_dim),
        "decoder.kernel": (3, 3, cfg.k, cfg.k),
        "decoder.bias": (cfg.k,),
        "momentum.weight": (fan_in, cfg.dim),
        "momentum.bias": (cfg.dim,),
        "prompts.projection": (cfg.prompt_length * cfg.token_dim, cfg.dim),
        "prompts.projection_bias": (cfg.dim,),
    }
    for name in LEARNABLE:
        shapes[f"adam.m.{name}"] = shapes[name]
        shapes[f"adam.v.{name}"] = shapes[name]
    return shapes


def state_from_tensors(tensors: dict[str, np.ndarray], step: int, cfg: TrainConfig) -> TrainState:
    t = tensors
    return TrainState(
        student=ImageEncoder(t["encoder.weight"], t["encoder.bias"], cfg.patch_size),
        momentum=ImageEncoder(t["momentum.weight"], t["momentum.bias"], cfg.patch_size),
        prompts=ClassPromptBank(t["prompts.tokens"], t["prompts.projection"], t["prompts.projection_bias"]),
        decoder=Decoder(t["decoder.kernel"], t["decoder.bias"], cfg.upsample_factor),
        moments={n: (t[f"adam.m.{n}"], t[f"adam.v.{n}"]) for n in LEARNABLE},
        step=int(step),
        config=cfg,
    )


def init_state(cfg: TrainConfig) -> TrainState:
    rng = substream(cfg.seed, STREAM_INIT)
    student = init_image_encoder(rng, cfg.patch_size, cfg.channels, cfg.dim)
    prompts = init_prompt_bank(rng, cfg.k, cfg.prompt_length, cfg.token_dim, cfg.dim)
    state = TrainState(
        student=student,
        momentum=student.copy(),
        prompts=prompts,
        decoder=init_decoder(cfg.k, cfg.upsample_factor),
        moments={},
        step=0,
        config=cfg,
    )
    state.moments = {n: (np.zeros_like(p), np.zeros_like(p)) for n, p in state.params().items()}
    return state


# -- forward / backward -------------------------------------------------------

@dataclass
class PreparedImage:
    """Student input plus detached supervision for one image."""

    image: np.ndarray  # augmented H x W x C
    targets: np.ndarray  # c x h' x w' bool
    coverage: np.ndarray  # h' x w' bool
    references: np.ndarray | None = None  # per-mask features when clustering is off


@dataclass
class StepMetrics:
    step: int
    loss: float
    sinkhorn_marginal_error: float | None
    sinkhorn_iterations: int
    cluster_usage: list
    mean_affinity: float
    grad_norm: dict = field(default_factory=dict)
    num_masks: int = 0

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "loss": self.loss,
            "sinkhorn_marginal_error": self.sinkhorn_marginal_error,
            "sinkhorn_iterations": self.sinkhorn_iterations,
            "cluster_usage": list(self.cluster_usage),
            "mean_affinity": self.mean_affinity,
            "grad_norm": dict(self.grad_norm),
            "num_masks": self.num_masks,
        }


@dataclass
class Targets:
    prepared: list
    assignment: object | None
    affinity: np.ndarray
    cluster_of: np.ndarray


def _valid_masks(features: np.ndarray, masks: np.ndarray) -> np.ndarray:
    h, w, _ = features.shape
    weights = mask_pool_weights(masks, h, w)
    return masks[weights.sum(axis=(1, 2)) >= 1e-9]


def prepare_targets(state: TrainState, batch: Sequence, augmented: Sequence | None = None,
                    tol: float | None = None) -> Targets:
    """Steps 1-5 of the pipeline: detached targets for every image in ``batch``.

    ``batch`` holds ``(image, masks)`` pairs; ``augmented`` optionally
    replaces the student inputs (defaults to the clean images).
    """
    cfg = state.config
    pool_encoder = state.momentum if cfg.use_momentum_encoder else state.student
    out_size = cfg.output_size
    feats, kept, per_image = [], [], []
    for image, masks in batch:
        masks = np.asarray(masks, dtype=bool)
        f = extract_patches(image, pool_encoder.patch_size) @ pool_encoder.weight + pool_encoder.bias
        masks = _valid_masks(f, masks) if len(masks) else masks
        kept.append(masks)
        if len(masks):
            fm = mask_pool(f, masks)
            feats.append(fm)
            per_image.append(fm)
        else:
            per_image.append(None)
    if not feats:
        raise NoSupervisedPixels("no mask in the batch survives pooling")
    F = np.concatenate(feats)
    fc = encode_class_prompts(state.prompts)
    S = class_mask_affinity(F, fc)
    assignment = None
    if cfg.use_clustering:
        assignment = sinkhorn_solve(S, cfg.epsilon, tol if tol is not None else cfg.sinkhorn_tol,
                                    cfg.sinkhorn_max_iter)
        cluster_of = hard_assign(assignment)
    else:
        cluster_of = hard_assign(S)

    prepared, offset = [], 0
    for i, (image, _) in enumerate(batch):
        masks = kept[i]
        if not len(masks):
            continue
        n = len(masks)
        student_input = augmented[i] if augmented is not None else np.asarray(image, dtype=np.float64)
        if cfg.use_clustering:
            stack = union_masks(masks, cluster_of[offset:offset + n], cfg.k)
            targets, coverage = stack.targets, stack.coverage
            refs = None
        else:
            targets, coverage = masks, masks.any(axis=0)
            refs = per_image[i]
        offset += n
        prepared.append(PreparedImage(
            image=student_input,
            targets=resize_targets(targets, out_size, out_size),
            coverage=resize_targets(coverage[None], out_size, out_size)[0],
            references=refs,
        ))
    return Targets(prepared=prepared, assignment=assignment, affinity=S, cluster_of=cluster_of)


def loss_and_grads(state: TrainState, prepared: Sequence[PreparedImage]) -> tuple[float, dict[str, np.ndarray]]:
    """Batch-mean BCE loss and its analytic gradient for every learnable tensor."""
    cfg = state.config
    enc, dec = state.student, state.decoder
    grads = {name: np.zeros_like(p) for name, p in state.params().items()}
    fc = encode_class_prompts(state.prompts) if cfg.use_clustering else None
    g_fc = np.zeros_like(fc) if fc is not None else None
    total = 0.0
    B = len(prepared)
    if B == 0:
        raise NoSupervisedPixels("empty batch")
    for item in prepared:
        patches = extract_patches(item.image, enc.patch_size)
        f = patches @ enc.weight + enc.bias
        refs = fc if cfg.use_clustering else item.references
        sim = similarity_map(f, refs)
        logits = decode(dec, sim) if cfg.use_clustering else upsample_only(sim, dec.factor)
        loss, g_logits = bce_mask_loss(logits, item.targets, item.coverage, cfg.cover_only,
                                       cfg.supervise_empty, cfg.logit_scale)
        total += loss / B
        g_logits = g_logits / B
        if cfg.use_clustering:
            g_sim, g_kernel, g_dbias = decode_backward(dec, sim, g_logits)
            grads["decoder.kernel"] += g_kernel
            grads["decoder.bias"] += g_dbias
        else:
            g_sim = bilinear_upsample_backward(g_logits, dec.factor)
        g_f, g_refs = similarity_map_backward(f, refs, g_sim)
        if cfg.use_clustering:
            g_fc += g_refs
        g_w, g_b = encode_image_backward(patches, g_f)
        grads["encoder.weight"] += g_w
        grads["encoder.bias"] += g_b
    if cfg.use_clustering:
        grads["prompts.tokens"] = encode_class_prompts_backward(state.prompts, g_fc)
    return total, grads


def group_learning_rates(cfg: TrainConfig) -> dict[str, float]:
    lr = {"encoder": cfg.lr_encoder, "prompts": cfg.lr_prompts, "decoder": cfg.lr_decoder}
    return {name: lr[g] for g, names in PARAM_GROUPS.items() for name in names}


def apply_gradients(state: TrainState, grads: dict[str, np.ndarray]) -> TrainState:
    cfg = state.config
    step = state.step + 1
    rates = group_learning_rates(cfg)
    params = state.params()
    new_params, new_moments = {}, {}
    for name in LEARNABLE:
        m, v = state.moments[name]
        new_params[name], m, v = adamw_step(params[name], grads[name], m, v, rates[name], cfg.weight_decay,
                                            (cfg.beta1, cfg.beta2), cfg.adam_eps, step)
        new_moments[name] = (m, v)
    updated = state.with_params(new_params)
    momentum = momentum_update(updated.student, state.momentum, cfg.gamma)
    return replace(updated, momentum=momentum, moments=new_moments, step=step)


def train_step(state: TrainState, batch: Sequence, rng: np.random.Generator | None = None) -> tuple[TrainState, StepMetrics]:
    """One optimisation step on ``batch`` (a list of ``(image, masks)`` pairs)."""
    if not len(batch):
        raise ValueError("empty batch")
    cfg = state.config
    rng = rng if rng is not None else substream(cfg.seed, STREAM_AUGMENT, state.step)
    augmented = [augment(image, rng, cfg) for image, _ in batch]
    t = prepare_targets(state, batch, augmented)
    loss, grads = loss_and_grads(state, t.prepared)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss became {loss} at step {state.step + 1}")
    new_state = apply_gradients(state, grads)
    usage = np.bincount(t.cluster_of, minlength=cfg.k)
    metrics = StepMetrics(
        step=new_state.step,
        loss=loss,
        sinkhorn_marginal_error=t.assignment.marginal_error if t.assignment is not None else None,
        sinkhorn_iterations=t.assignment.iterations_used if t.assignment is not None else 0,
        cluster_usage=usage.tolist(),
        mean_affinity=float(t.affinity.mean()),
        grad_norm={g: float(np.sqrt(sum(np.sum(grads[n] ** 2) for n in names))) for g, names in PARAM_GROUPS.items()},
        num_masks=int(len(t.cluster_of)),
    )
    return new_state, metrics


# -- loop ---------------------------------------------------------------------

def _as_pairs(dataset: Iterable) -> list:
    pairs = []
    for item in dataset:
        if hasattr(item, "unlabeled_masks"):
            pairs.append((item.image, item.unlabeled_masks))
        else:
            image, masks = item
            pairs.append((image, masks))
    return pairs


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Dataset indices of the batch used at 0-based global ``step``.

    Each epoch is a fresh seeded permutation cut into ``n // batch_size``
    full batches; the mapping depends only on ``step`` so resumed runs see
    the same batches.
    """
    B = min(batch_size, n)
    per_epoch = n // B
    epoch, pos = divmod(step, per_epoch)
    perm = substream(seed, STREAM_SHUFFLE, epoch).permutation(n)
    return perm[pos * B:(pos + 1) * B]


def fit(state: TrainState, dataset, config: TrainConfig | None = None,
        on_step: Callable[[TrainState, StepMetrics], None] | None = None,
        on_checkpoint: Callable[[TrainState], None] | None = None) -> tuple[TrainState, list[dict]]:
    """Train until ``config.steps`` total steps; returns the state and the metrics log."""
    cfg = config or state.config
    if cfg is not state.config:
        state = replace(state, config=cfg)
    pairs = _as_pairs(dataset)
    if not pairs:
        raise ValueError("dataset is empty")
    history = []
    while state.step < cfg.steps:
        idx = batch_indices(state.step, len(pairs), cfg.batch_size, cfg.seed)
        state, metrics = train_step(state, [pairs[i] for i in idx])
        record = metrics.to_dict()
        history.append(record)
        if on_step is not None:
            on_step(state, metrics)
        if cfg.log_every and state.step % cfg.log_every == 0:
            log.info("step %d loss %.5f marginal %.2e", state.step, metrics.loss,
                     metrics.sinkhorn_marginal_error or 0.0)
        if on_checkpoint is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    return state, history
