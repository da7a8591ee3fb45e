import numpy as np
import pytest

from histocl import data, stain
from histocl.nncore import ConvBlock, ModelSpec, init_model, loss_and_backward


def make_mixture_patch(rng, side=8, class_id=0, key=""):
    """A patch rendered from a valid non-negative H&E mixture.

    Concentrations in [0.05, 0.8] keep every rendered channel inside
    [10, 245], the domain of the roundtrip contract.
    """
    c_h = rng.uniform(0.05, 0.8, size=(side, side))
    c_e = rng.uniform(0.05, 0.8, size=(side, side))
    planes = np.stack([c_h, c_e, np.zeros_like(c_h)], axis=-1)
    cmap = stain.ConcentrationMap(width=side, height=side, planes=planes)
    p = stain.remix(cmap, stain.DEFAULT_STAIN_MATRIX)
    return data.Patch(p.pixels, class_id=class_id, source_key=key or f"mix/{rng.integers(1 << 30)}")


def finite_difference_grads(params, spec, x, head_id, terms, eps=1e-3):
    """Central finite differences on the float32 parameters, with the loss
    evaluated in 64-bit accumulation. Independent of the backprop path."""
    fd = np.zeros(params.values.size, dtype=np.float64)
    vals = params.values
    for j in range(vals.size):
        orig = vals[j]
        vals[j] = np.float32(orig + eps)
        hi = float(vals[j])
        lp, _ = loss_and_backward(params, spec, x, head_id, terms, dtype=np.float64)
        vals[j] = np.float32(orig - eps)
        lo = float(vals[j])
        lm, _ = loss_and_backward(params, spec, x, head_id, terms, dtype=np.float64)
        vals[j] = orig
        fd[j] = (lp - lm) / (hi - lo)
    return fd


def max_relative_error(reference, candidate):
    """Max absolute deviation normalized by the reference gradient scale."""
    ref = np.asarray(reference, dtype=np.float64)
    cand = np.asarray(candidate, dtype=np.float64)
    denom = max(np.abs(ref).max(), 1e-12)
    return float(np.abs(ref - cand).max() / denom)


@pytest.fixture(scope="session")
def toy_spec():
    return ModelSpec(
        input_side=8,
        conv_blocks=(ConvBlock(2, 3, True), ConvBlock(3, 3, False)),
        heads=((0, 3), (1, 2)),
        init_seed=0,
    )


@pytest.fixture()
def toy_params(toy_spec):
    return init_model(toy_spec)


@pytest.fixture(scope="session")
def small_synth():
    return data.synth_generate(4, 20, side=16, seed=11)
