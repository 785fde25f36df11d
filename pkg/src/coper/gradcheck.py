"""Central-finite-difference gradient verification, exposed as a suite.

Every check builds a fresh scalar loss, runs one backward pass, then
compares sampled analytic partials against (f(x+h) - f(x-h)) / 2h with
the forward pass re-evaluated under no_grad. Primitives and layers are
held to relative error 1e-4; integrated ODE paths and the full model
graph to 1e-3 (solver steps compound rounding).
"""

from __future__ import annotations

import numpy as np

from .attention import AttentionConfig, PerceiverBlock, causal_mask, scaled_dot_attention
from .harness import bce_with_logits
from .layers import Linear, LstmStack, Mlp
from .models import CoperModel, IrregularSeriesBatch
from .odeint import OdeDynamics, SolveSpec, ode_solve
from .tensor import Tensor, concat, no_grad, where

__all__ = ["check_gradients", "run_gradient_suite", "CheckResult"]


def check_gradients(loss_fn, named_params, h=1e-5, samples=10, rng=None):
    """Max relative error between backprop and central differences.

    Samples up to ``samples`` coordinates per parameter tensor.
    """
    rng = rng or np.random.default_rng(0)
    loss = loss_fn()
    for _, p in named_params:
        p.grad = None
    loss.backward()
    worst = 0.0
    for _, p in named_params:
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        count = min(samples, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        for k in picks:
            orig = flat[k]
            flat[k] = orig + h
            with no_grad():
                fp = loss_fn().item()
            flat[k] = orig - h
            with no_grad():
                fm = loss_fn().item()
            flat[k] = orig
            numeric = (fp - fm) / (2.0 * h)
            analytic = gflat[k]
            scale = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst


class CheckResult:
    def __init__(self, name, max_err, tol):
        self.name = name
        self.max_err = max_err
        self.tol = tol
        self.passed = max_err < tol

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<36} max rel err {self.max_err:.3e} (tol {self.tol:.0e})"


def _primitive_checks(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    y = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    m = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    # keep relu inputs off the kink
    xr = Tensor(rng.standard_normal((3, 4)) + np.where(rng.random((3, 4)) > 0.5, 0.5, -0.5),
                requires_grad=True)
    mask = rng.random((3, 4)) > 0.5
    mask[0, 0] = True  # never fully masked
    cond = rng.random((3, 4)) > 0.5

    cases = {
        "add": ([("x", x), ("y", y)], lambda: (x + y).sum()),
        "sub": ([("x", x), ("y", y)], lambda: (x - y).sum()),
        "mul": ([("x", x), ("y", y)], lambda: (x * y).sum()),
        "scale": ([("x", x)], lambda: (x * 1.7).sum()),
        "matmul": ([("x", x), ("m", m)], lambda: ((x @ m) * (x @ m)).sum()),
        "exp": ([("x", x)], lambda: x.exp().sum()),
        "tanh": ([("x", x)], lambda: (x.tanh() * y.data).sum()),
        "sigmoid": ([("x", x)], lambda: (x.sigmoid() * y.data).sum()),
        "relu": ([("xr", xr)], lambda: (xr.relu() * y.data).sum()),
        "sum_axis": ([("x", x)], lambda: (x.sum(axis=1) * Tensor(rng.standard_normal(3))).sum()),
        "mean_axis": ([("x", x)], lambda: (x.mean(axis=0) * Tensor(rng.standard_normal(4))).sum()),
        "transpose": ([("x", x)], lambda: (x.transpose() * y.transpose()).sum()),
        "reshape": ([("x", x)], lambda: (x.reshape(2, 6) * Tensor(np.arange(12.0).reshape(2, 6))).sum()),
        "slice": ([("x", x)], lambda: (x[:, 1:3] * x[:, 1:3]).sum()),
        "concat": ([("x", x), ("y", y)], lambda: (concat([x, y], axis=1) * concat([y, x], axis=1)).sum()),
        "softmax": ([("x", x)], lambda: (x.softmax(axis=1) * y.data).sum()),
        "masked_fill": ([("x", x)], lambda: (x.masked_fill(mask, -np.inf).softmax(axis=1) * y.data).sum()),
        "where": ([("x", x), ("y", y)], lambda: (where(cond, x, y) * x.data).sum()),
        "expand_batch": ([("m", m)], lambda: (m.expand_batch(3) * Tensor(rng.standard_normal((3, 4, 5)))).sum()),
    }
    return [CheckResult(f"primitive/{name}", check_gradients(fn, ps, rng=rng), 1e-4)
            for name, (ps, fn) in cases.items()]


def _layer_checks(rng):
    out = []
    lin = Linear(5, 3, rng)
    xin = Tensor(rng.standard_normal((4, 5)))
    out.append(CheckResult("layers/linear",
                           check_gradients(lambda: (lin(xin) * lin(xin)).sum(), lin.parameters(), rng=rng),
                           1e-4))
    mlp = Mlp([4, 8, 8, 2], rng)
    xm = Tensor(rng.standard_normal((3, 4)))
    out.append(CheckResult("layers/mlp",
                           check_gradients(lambda: (mlp(xm) * mlp(xm)).sum(), mlp.parameters(), rng=rng),
                           1e-4))
    lstm = LstmStack(3, 4, 2, rng)
    xl = Tensor(rng.standard_normal((2, 5, 3)))
    out.append(CheckResult("layers/lstm",
                           check_gradients(lambda: (lstm(xl) * lstm(xl)).sum(), lstm.parameters(), rng=rng),
                           1e-4))
    return out


def _attention_checks(rng):
    cfg = AttentionConfig(context_dim=4, latent_dim=4, head_dim=4, dropout_rate=0.0, causal=True)
    block = PerceiverBlock(cfg, latent_count=5, rng=rng)
    x = Tensor(rng.standard_normal((2, 5, 4)))
    target = rng.standard_normal((2, 5, 4))
    loss_fn = lambda: ((block(x) - Tensor(target)) * (block(x) - Tensor(target))).sum()
    results = [CheckResult("attention/perceiver_block",
                           check_gradients(loss_fn, block.parameters(), rng=rng), 1e-4)]
    q = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    k = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    v = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    mask = causal_mask(3, 3)
    results.append(CheckResult(
        "attention/scaled_dot",
        check_gradients(lambda: (scaled_dot_attention(q, k, v, mask=mask) * q.data).sum(),
                        [("q", q), ("k", k), ("v", v)], rng=rng),
        1e-4))
    return results


def _ode_checks(rng):
    out = []
    dyn = OdeDynamics(3, (8,), rng)
    z0 = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    spec = SolveSpec(step_size=0.05, query_times=[0.4, 1.0])
    params = dyn.parameters() + [("z0", z0)]
    weight = rng.standard_normal((2, 2, 3))
    loss_fn = lambda: (ode_solve(dyn.bound(), z0, 0.0, spec) * Tensor(weight)).sum()
    out.append(CheckResult("odeint/rk4_path", check_gradients(loss_fn, params, rng=rng), 1e-3))
    spec_e = SolveSpec(step_size=0.05, query_times=[1.0], method="euler")
    loss_fn_e = lambda: ode_solve(dyn.bound(), z0, 0.0, spec_e).sum()
    out.append(CheckResult("odeint/euler_path", check_gradients(loss_fn_e, params, rng=rng), 1e-3))
    return out


def tiny_coper_setup(seed=0, n=2, t=6, i=3):
    """A COPER instance at test scale plus a matching irregular batch."""
    rng = np.random.default_rng(seed)
    model = CoperModel(feature_dim=i, embed_dim=4, latent_dim=4, head_dim=4,
                       grid_steps=t, ode_hidden=(8,), dropout_rate=0.0, seed=seed)
    present = np.ones((n, t), dtype=bool)
    present[:, 2] = False  # keep at least one gap so both ODE paths engage
    present[0, 4] = False
    batch = IrregularSeriesBatch(values=rng.standard_normal((n, t, i)),
                                 times=np.tile(np.arange(t, dtype=float), (n, 1)),
                                 present=present, window_hours=float(t))
    labels = rng.integers(0, 2, size=n)
    labels[0] = 0
    labels[-1] = 1
    return model, batch, labels


def _full_model_check(rng):
    model, batch, labels = tiny_coper_setup()
    loss_fn = lambda: bce_with_logits(model.forward(batch, query_time=1.0), labels)
    return [CheckResult("models/coper_end_to_end",
                        check_gradients(loss_fn, model.parameters(), samples=6, rng=rng), 1e-3)]


def run_gradient_suite(verbose=False):
    """Run every gradient check; returns the list of CheckResult."""
    rng = np.random.default_rng(1234)
    results = []
    for group in (_primitive_checks, _layer_checks, _attention_checks, _ode_checks,
                  _full_model_check):
        for res in group(rng):
            results.append(res)
            if verbose:
                print(res.line())
    return results
