"""Entry-wise activation functions with the bounds the analysis uses.

``bound0``, ``bound1`` and ``bound2`` bound |sigma|, |sigma'| and |sigma''|
on the real line; ``lipschitz`` is the Lipschitz constant of sigma.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class ActFn:
    name: str
    f: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    d2f: Callable[[np.ndarray], np.ndarray]
    bound0: float
    bound1: float
    bound2: float
    lipschitz: float
    # sigma' written in terms of sigma(x), when that is cheaper
    df_of_f: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x):
        return self.f(x)

    def deriv(self, x, fx=None):
        """``sigma'(x)``, reusing ``fx = sigma(x)`` when given."""
        if fx is not None and self.df_of_f is not None:
            return self.df_of_f(fx)
        return self.df(x)


def _dtanh(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _d2tanh(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


TANH = ActFn(
    name="tanh",
    f=np.tanh,
    df=_dtanh,
    d2f=_d2tanh,
    bound0=1.0,
    bound1=1.0,
    bound2=4.0 / (3.0 * math.sqrt(3.0)),
    lipschitz=1.0,
    df_of_f=lambda t: 1.0 - t * t,
)

# Unbounded, so it fails the smoothness hypotheses; useful for convex toys.
LINEAR = ActFn(
    name="linear",
    f=lambda x: np.array(x, dtype=np.float64, copy=True),
    df=lambda x: np.ones_like(x, dtype=np.float64),
    d2f=lambda x: np.zeros_like(x, dtype=np.float64),
    bound0=math.inf,
    bound1=1.0,
    bound2=0.0,
    lipschitz=1.0,
)

ACTIVATIONS = {"tanh": TANH, "linear": LINEAR}


def get_activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None
