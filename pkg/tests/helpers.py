"""Shared builders for tests."""
import numpy as np

from flowaug.flow import CouplingLayer, build_flow


def jitter_flow(model, seed=0, gain=0.15):
    """Give every coupling subnet nonzero output weights so the flow is not the identity.

    Output weights get std ``gain / sqrt(hidden)``. Larger gains compound over
    deep stacks into latents of size 1e4 and more, where float64 round trips
    lose digits to conditioning rather than to any bug.
    """
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        if isinstance(layer, CouplingLayer):
            scale = gain / np.sqrt(layer.hidden)
            layer.w2.data[...] = rng.normal(0, scale, layer.w2.shape)
            layer.b1.data[...] = rng.normal(0, 0.3, layer.b1.shape)
            layer.b2.data[...] = rng.normal(0, scale, layer.b2.shape)
    return model


def random_flow(dim, blocks=12, seed=0, **kw):
    return jitter_flow(build_flow(dim, blocks=blocks, seed=seed, **kw), seed + 100)
