"""Leaky integrate-and-fire neurons with surrogate-gradient spiking."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import ShapeError, Tensor

SURROGATES = ("fast_sigmoid", "arctan")
RESETS = ("subtract", "subtract_detached")


@dataclass(frozen=True)
class SurrogateSpec:
    kind: str = "fast_sigmoid"
    alpha: float = 25.0

    def __post_init__(self):
        if self.kind not in SURROGATES:
            raise ValueError(f"unknown surrogate {self.kind!r}; expected one of {SURROGATES}")
        if not self.alpha > 0:
            raise ValueError("surrogate alpha must be positive")


@dataclass(frozen=True)
class LIFParams:
    beta: float = 0.9
    v_th: float = 1.0
    surrogate: SurrogateSpec = SurrogateSpec()
    reset: str = "subtract"

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.v_th > 0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")
        if self.reset not in RESETS:
            raise ValueError(f"unknown reset {self.reset!r}; expected one of {RESETS}")


@dataclass
class LIFState:
    v: Tensor

    @classmethod
    def zeros(cls, shape) -> "LIFState":
        return cls(Tensor(np.zeros(shape)))


def surrogate_grad(x, spec: SurrogateSpec) -> np.ndarray:
    """Derivative used in place of the Heaviside step during backward.

    fast_sigmoid: alpha / (1 + alpha|x|)^2
    arctan:       (alpha/2) / (1 + (pi/2 * alpha * x)^2)
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    a = x.dtype.type(spec.alpha) if np.issubdtype(x.dtype, np.floating) else spec.alpha
    if spec.kind == "fast_sigmoid":
        return a / (1.0 + a * np.abs(x)) ** 2
    return (a / 2) / (1.0 + (math.pi / 2 * a * x) ** 2)


def spike(x: Tensor, spec: SurrogateSpec) -> Tensor:
    """Heaviside step with Theta(0) = 1; backward uses the surrogate at ``x``."""
    xd = x.data
    return tc.from_op((xd >= 0).astype(xd.dtype), (x,), lambda g: (g * surrogate_grad(xd, spec),))


def lif_step(state: LIFState, inp: Tensor, params: LIFParams, decay_power: int = 1) -> tuple[Tensor, LIFState]:
    """One membrane update ``v' = beta**p * v + inp``, spike, subtract-reset.

    ``decay_power`` > 1 is the grouped update of temporal aggregation, where
    one step stands for ``p`` elapsed timesteps.
    """
    if state.v.shape != inp.shape:
        raise ShapeError(f"membrane shape {state.v.shape} != input shape {inp.shape}", "input")
    if decay_power < 1:
        raise ValueError("decay_power must be >= 1")
    v = tc.add(tc.scale(state.v, params.beta ** decay_power), inp)
    s = spike(tc.add_scalar(v, -params.v_th), params.surrogate)
    r = tc.detach(s) if params.reset == "subtract_detached" else s
    return s, LIFState(tc.sub(v, tc.scale(r, params.v_th)))
