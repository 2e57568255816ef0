"""Coordinate-wise activations with first and second derivatives."""

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special

from .errors import PreconditionError

_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


@dataclass(frozen=True)
class Activation:
    name: str
    fn: Callable
    d1: Callable
    d2: Optional[Callable]
    odd: bool

    def __call__(self, x):
        return self.fn(x)

    @property
    def twice_differentiable(self):
        return self.d2 is not None


def _ones(x):
    return np.ones_like(np.asarray(x, dtype=np.float64))


def _zeros(x):
    return np.zeros_like(np.asarray(x, dtype=np.float64))


def _tanh_d1(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _tanh_d2(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


def _erf_d1(x):
    x = np.asarray(x, dtype=np.float64)
    return _TWO_OVER_SQRT_PI * np.exp(-x * x)


def _erf_d2(x):
    x = np.asarray(x, dtype=np.float64)
    return -2.0 * x * _TWO_OVER_SQRT_PI * np.exp(-x * x)


def _hardtanh(x):
    return np.clip(x, -1.0, 1.0)


def _hardtanh_d1(x):
    x = np.asarray(x, dtype=np.float64)
    return (np.abs(x) < 1.0).astype(np.float64)


ACTIVATIONS = {
    "identity": Activation("identity", lambda x: np.asarray(x, dtype=np.float64), _ones, _zeros, True),
    "relu": Activation("relu", lambda x: np.maximum(x, 0.0),
                       lambda x: (np.asarray(x) > 0).astype(np.float64), None, False),
    "tanh": Activation("tanh", np.tanh, _tanh_d1, _tanh_d2, True),
    "erf": Activation("erf", special.erf, _erf_d1, _erf_d2, True),
    # second derivative is zero away from the kinks at +-1 (a measure-zero set)
    "hardtanh": Activation("hardtanh", _hardtanh, _hardtanh_d1, _zeros, True),
}


def get_activation(name):
    if isinstance(name, Activation):
        return name
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise PreconditionError(
            f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}"
        ) from None
