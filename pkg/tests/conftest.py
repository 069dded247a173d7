import numpy as np
import pytest

from morphsdf import autodiff as ad
from morphsdf.networks import Model, ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(latent_dim=3, num_subjects=2, num_expressions=2, sdf_layers=3, sdf_width=8,
                uv_layers=3, uv_width=8, inv_layers=3, inv_width=8, color_layers=3, color_width=8,
                point_freqs=2, uv_freqs=2, uv_init_steps=0, latent_init_std=0.3)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=np.float64, **kw) -> Model:
    m = Model.create(tiny_config(**kw), seed)
    m.params = {k: v.astype(dtype) for k, v in m.params.items()}
    return m


def grad_check(loss_fn, params: dict, names, h=1e-6):
    """Max relative error (inf-norm) between tape gradients and central differences.

    ``loss_fn(view)`` maps a name -> Tensor dict to a scalar Tensor.
    """
    tape = ad.Tape()
    view = {k: (tape.leaf(v) if k in names else ad.Tensor(v)) for k, v in params.items()}
    grads = tape.backward(loss_fn(view))
    worst = 0.0
    for name in names:
        analytic = np.asarray(grads.of(view[name]), np.float64)
        numeric = np.zeros_like(analytic)
        base = params[name]
        for i in np.ndindex(base.shape):
            old = base[i]
            base[i] = old + h
            up = float(loss_fn({k: ad.Tensor(v) for k, v in params.items()}).data)
            base[i] = old - h
            down = float(loss_fn({k: ad.Tensor(v) for k, v in params.items()}).data)
            base[i] = old
            numeric[i] = (up - down) / (2 * h)
        scale = max(np.abs(numeric).max(), 1e-8)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
