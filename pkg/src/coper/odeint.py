"""Differentiable fixed-step ODE integration.

A dynamics function f(z, t) -> dz/dt (any callable producing a Tensor)
is advanced with fixed Euler or RK4 steps, entirely on the gradient
tape, so backward() differentiates through every solver step. Readouts
at query times take a shortened branch step off the trunk trajectory;
the trunk's step grid stays anchored at t0, so how query_times
partitions the span does not perturb the solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Mlp
from .tensor import Tensor, concat

__all__ = ["OdeDynamics", "SolveSpec", "ode_solve", "convergence_order", "default_step_size"]

_TIME_EPS = 1e-12


def default_step_size(grid_steps):
    """Default integration step in normalized time: a quarter grid interval."""
    return 1.0 / (4.0 * grid_steps)


class OdeDynamics:
    """Learned derivative net: concat(state, t) -> d(state)/dt.

    Time enters as one extra input column and is expected normalized to
    [0, 1] so the net sees well-scaled values.
    """

    def __init__(self, dim, hidden, rng, dropout_rate=0.0):
        self.dim = int(dim)
        self.net = Mlp([dim + 1] + list(hidden) + [dim], rng, dropout_rate=dropout_rate)

    def __call__(self, z, t, training=False, rng=None):
        tcol = Tensor(np.full((z.shape[0], 1), float(t)))
        return self.net(concat([z, tcol], axis=1), training=training, rng=rng)

    def bound(self, training=False, rng=None):
        """Close over mode flags so solvers see a plain f(z, t)."""
        return lambda z, t: self(z, t, training=training, rng=rng)

    def zero_output(self):
        """Force f == 0 by zeroing the final layer (diagnostics/tests)."""
        last = self.net.layers[-1]
        last.weight.data[...] = 0.0
        last.bias.data[...] = 0.0

    def parameters(self):
        return [(f"net.{name}", p) for name, p in self.net.parameters()]


def euler_step(f, z, t, dt):
    return z + f(z, t) * dt


def rk4_step(f, z, t, dt):
    k1 = f(z, t)
    k2 = f(z + k1 * (dt / 2.0), t + dt / 2.0)
    k3 = f(z + k2 * (dt / 2.0), t + dt / 2.0)
    k4 = f(z + k3 * dt, t + dt)
    return z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)


_STEPPERS = {"euler": euler_step, "rk4": rk4_step}


@dataclass
class SolveSpec:
    """How to integrate: method, fixed step size, and readout times."""

    step_size: float
    query_times: list = field(default_factory=list)
    method: str = "rk4"

    def validate(self, t0):
        if self.method not in _STEPPERS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {sorted(_STEPPERS)}")
        if not self.step_size > 0.0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        qt = list(self.query_times)
        if not qt:
            raise ValueError("query_times is empty")
        if any(b < a for a, b in zip(qt, qt[1:])):
            raise ValueError(f"query_times must be nondecreasing, got {qt}")
        if qt[0] < t0 - _TIME_EPS:
            raise ValueError(f"query time {qt[0]} precedes t0={t0}")
        return qt


def ode_solve(f, z0, t0, spec):
    """Advance z0 from t0 and read the state out at each query time.

    Returns a Tensor of shape (batch, len(query_times), dim). Full steps
    of spec.step_size run on a trunk anchored at t0; a query falling
    between trunk points is reached by one shortened branch step, which
    leaves the trunk untouched.
    """
    qt = spec.validate(t0)
    step = _STEPPERS[spec.method]
    h = float(spec.step_size)
    n, dim = z0.shape

    trunk = z0
    k = 0  # trunk sits at t0 + k*h
    outs = []
    for q in qt:
        while t0 + (k + 1) * h <= q + _TIME_EPS:
            trunk = step(f, trunk, t0 + k * h, h)
            k += 1
        tk = t0 + k * h
        rem = q - tk
        state = trunk if rem <= _TIME_EPS else step(f, trunk, tk, rem)
        outs.append(state.reshape(n, 1, dim))
    return concat(outs, axis=1)


def convergence_order(f, z0, t0, t1, exact, method="rk4", step_size=0.1):
    """Empirical order from errors at h and h/2: log2(e_h / e_h2).

    ``exact`` is the true state at t1 (ndarray). Returns None when either
    error is exactly zero (nothing to measure).
    """
    errs = []
    for h in (step_size, step_size / 2.0):
        out = ode_solve(f, z0, t0, SolveSpec(step_size=h, query_times=[t1], method=method))
        errs.append(float(np.max(np.abs(out.data[:, 0, :] - exact))))
    if errs[0] == 0.0 or errs[1] == 0.0:
        return None
    return float(np.log2(errs[0] / errs[1]))
