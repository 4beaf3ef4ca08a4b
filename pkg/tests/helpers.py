"""Shared gradient-checking helpers."""

from tacsnn import tensor as tc
from tacsnn.tensor import Tape


def grad_of(fn, params):
    tape = Tape()
    with tape.recording():
        loss = fn()
    for p in params:
        p.grad = None
    tc.backward(tape, loss, params)
    return [p.grad.copy() for p in params]


def fd_check(fn, param, rng, probes=32, h=1e-6, rtol=1e-2):
    """Central differences at ``probes`` random coordinates of ``param``."""
    (analytic,) = grad_of(fn, [param])
    flat = param.data.reshape(-1)
    for idx in rng.choice(flat.size, size=min(probes, flat.size), replace=False):
        old = flat[idx]
        flat[idx] = old + h
        up = fn().item()
        flat[idx] = old - h
        down = fn().item()
        flat[idx] = old
        numeric = (up - down) / (2 * h)
        got = analytic.reshape(-1)[idx]
        assert abs(got - numeric) <= rtol * max(abs(numeric), 1e-3), (idx, got, numeric)
