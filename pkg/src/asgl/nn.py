"""Parameter containers and initialisation shared by the branches."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def uniform(rng, fan_in, shape, name=None):
    """Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros(shape, name=None):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def linear_params(rng, prefix, d_in, d_out, bias=True):
    params = {f"{prefix}.weight": uniform(rng, d_in, (d_in, d_out), f"{prefix}.weight")}
    if bias:
        params[f"{prefix}.bias"] = zeros((d_out,), f"{prefix}.bias")
    return params
