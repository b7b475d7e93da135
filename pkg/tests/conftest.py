"""Shared fixtures and parameter-space helpers for the test suite."""

import numpy as np
import pytest

from filver.models import ClassifierModel, ClassifierSpec, EncoderModel, EncoderSpec
from filver.numcore import ParamVector
from filver.rng import RngStream

from oracles import fd_flat


def fd_params(loss_fn, params: ParamVector, h=1e-6):
    """Central finite differences over every coordinate of a ParamVector."""
    flat = params.as_flat()
    return params.with_flat(fd_flat(lambda f: loss_fn(params.with_flat(f)), flat, h))


def jittered_params(model, rng: RngStream, scale=0.05) -> ParamVector:
    """Init params with every coordinate nudged off zero.

    Zero-initialized biases put ReLU pre-activations exactly on the kink,
    where finite differences are meaningless; the jitter moves them off it.
    """
    params = model.init_params(rng.child("init"))
    flat = params.as_flat() + scale * rng.child("jitter").normal(params.total_len)
    return params.with_flat(flat)


def min_abs_dense_pre(caches) -> float:
    """Smallest |pre-activation| across the dense caches of a layer stack."""
    low = np.inf
    for cache in caches:
        if isinstance(cache, tuple) and len(cache) == 4 and isinstance(cache[2], np.ndarray):
            low = min(low, float(np.abs(cache[2]).min()))
    return low


@pytest.fixture
def tiny_mlp_vee():
    spec = EncoderSpec("vee", (6,), embed_dim=4, arch="mlp", hidden=8)
    return EncoderModel(spec)


@pytest.fixture
def tiny_mlp_ebr():
    spec = EncoderSpec("ebr", (6,), embed_dim=4, arch="mlp", hidden=8)
    return EncoderModel(spec)


@pytest.fixture
def tiny_classifier():
    return ClassifierModel(ClassifierSpec(classes=3, hidden=8, layers=1), embed_dim=4)
