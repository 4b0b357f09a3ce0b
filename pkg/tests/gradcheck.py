"""Shared full-loss finite-difference check used by unit and acceptance tests."""
import numpy as np

from maskcluster.numerics import finite_difference_gradient, relative_error
from maskcluster.training import init_state, loss_and_grads, prepare_targets

CHECKED = ("encoder.weight", "prompts.tokens", "decoder.kernel")


def random_instance(cfg, seed, n_images=2, masks_per_image=3):
    """``n_images`` random images, each partitioned into ``masks_per_image`` masks."""
    rng = np.random.default_rng(seed)
    state = init_state(cfg)
    k = cfg.k
    state.decoder.kernel = rng.standard_normal((3, 3, k, k)) * 0.3
    state.decoder.bias = rng.standard_normal(k) * 0.1
    S = cfg.image_size
    batch = []
    for _ in range(n_images):
        labels = rng.integers(0, masks_per_image, (S, S))
        labels.ravel()[:masks_per_image] = np.arange(masks_per_image)
        masks = np.stack([labels == i for i in range(masks_per_image)])
        batch.append((rng.random((S, S, cfg.channels)), masks))
    return state, batch


def gradient_errors(state, batch, names=CHECKED, h=1e-5):
    """Relative error between analytic and central-difference gradients, per tensor."""
    prepared = prepare_targets(state, batch).prepared
    _, grads = loss_and_grads(state, prepared)
    params = state.params()
    errors = {}
    for name in names:
        shape = params[name].shape

        def loss(flat, name=name, shape=shape):
            return loss_and_grads(state.with_params({name: flat.reshape(shape)}), prepared)[0]

        num = finite_difference_gradient(loss, params[name].ravel().copy(), h).reshape(shape)
        errors[name] = relative_error(grads[name], num)
    return errors
