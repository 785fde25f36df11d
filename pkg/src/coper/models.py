"""COPER and the two baseline classifiers over irregular series batches.

COPER pipeline per batch: per-step linear embedding of the observed
steps; a learned input ODE carries the embedded state across gaps and is
hard-reset to the observation's embedding whenever a step is observed,
yielding a complete regular grid; a causal perceiver block turns the
grid into per-step latents; a learned output ODE evolves the latent
anchored at the last grid step not after the query time up to the query
time; a linear classifier emits one raw logit per sample (the sigmoid
lives in the loss).

Baselines share the interface but require carry-forward-completed input:
a 2-layer LSTM read at the final step, and the same perceiver block
without either ODE read at the last latent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, PerceiverBlock
from .layers import Linear, LstmStack
from .odeint import _STEPPERS, OdeDynamics, SolveSpec, default_step_size, ode_solve
from .tensor import Tensor, concat, where

__all__ = [
    "IrregularSeriesBatch",
    "EmbeddedSeries",
    "RegularGridSeries",
    "ContinuousLatent",
    "CoperModel",
    "LstmBaseline",
    "PerceiverBaseline",
    "embed",
    "continuize_input",
]

_TOL = 1e-9


@dataclass
class IrregularSeriesBatch:
    """Per-sample observation sequences with timestamps and a presence mask.

    values: (n, t, i) float64, rows at absent steps are retained but masked.
    times:  (n, t) hours, nondecreasing per sample, within [0, window_hours].
    present:(n, t) bool; every sample needs at least one present step.
    """

    values: np.ndarray
    times: np.ndarray
    present: np.ndarray
    window_hours: float = 48.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        n, t, _ = self.values.shape
        if self.times.shape != (n, t) or self.present.shape != (n, t):
            raise ValueError(
                f"inconsistent batch shapes: values {self.values.shape}, times {self.times.shape}, present {self.present.shape}")
        if not self.present.any(axis=1).all():
            bad = int(np.argmin(self.present.any(axis=1)))
            raise ValueError(f"sample {bad} has zero present steps")
        if (self.times < -_TOL).any() or (self.times > self.window_hours + _TOL).any():
            raise ValueError(f"timestamps fall outside [0, {self.window_hours}] hours")
        if (np.diff(self.times, axis=1) < -_TOL).any():
            raise ValueError("timestamps must be nondecreasing per sample")

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def steps(self):
        return self.values.shape[1]

    @property
    def feature_dim(self):
        return self.values.shape[2]


@dataclass
class EmbeddedSeries:
    """Per-step embeddings of a batch; only present steps are meaningful."""

    values: Tensor            # (n, t, e)
    times: np.ndarray         # (n, t) hours
    present: np.ndarray       # (n, t)
    window_hours: float


@dataclass
class RegularGridSeries:
    """Gap-free embedded states on the regular grid, normalized times k/t'."""

    values: Tensor            # (n, t', e)
    grid_times: np.ndarray    # (t',) in normalized [0, 1) units


def embed(batch, f_emb):
    """Map every present step independently through the embedding layer."""
    if batch.feature_dim != f_emb.in_dim:
        raise ValueError(f"embedding expects {f_emb.in_dim} features, batch has {batch.feature_dim}")
    return EmbeddedSeries(values=f_emb(Tensor(batch.values)), times=batch.times,
                          present=batch.present, window_hours=batch.window_hours)


def continuize_input(emb, dynamics, grid_steps, method="rk4", step_size=None,
                     training=False, rng=None):
    """Complete an embedded irregular series onto a regular grid via the input ODE.

    The state starts at each sample's first present embedding and is
    integrated forward; at every present observation time it is hard-reset
    to that observation's embedding; grid points are read out from the
    evolving state (reset first when the times coincide). Grid points
    before a sample's first observation take its first embedding.
    """
    n, t, e = emb.values.shape
    g = int(grid_steps)
    h = float(step_size) if step_size is not None else default_step_size(g)
    f = dynamics.bound(training=training, rng=rng)
    step = _STEPPERS[method]

    taus = emb.times / emb.window_hours                  # (n, t) normalized
    grid_tau = np.arange(g) / g
    events = np.union1d(grid_tau, taus[emb.present])
    events = events[events <= grid_tau[-1] + _TOL]
    # collapse float near-duplicates from the merge
    keep = np.ones(events.size, dtype=bool)
    keep[1:] = np.diff(events) > _TOL
    events = events[keep]

    first_idx = np.argmax(emb.present, axis=1)
    first_tau = taus[np.arange(n), first_idx]
    first_emb = emb.values[np.arange(n), first_idx, :]   # (n, e)

    # which sample resets at each event, and with which step's embedding
    at_event = [np.abs(taus - ev) <= _TOL for ev in events]
    reset_mask = [(m & emb.present).any(axis=1) for m in at_event]
    reset_idx = [np.argmax(m & emb.present, axis=1) for m in at_event]
    grid_cursor = 0

    state = first_emb
    outs = []
    for j, ev in enumerate(events):
        if reset_mask[j].any():
            rows = emb.values[np.arange(n), reset_idx[j], :]
            state = where(np.broadcast_to(reset_mask[j][:, None], (n, e)), rows, state)
        if grid_cursor < g and abs(grid_tau[grid_cursor] - ev) <= _TOL:
            backfill = first_tau > ev + _TOL
            out = where(np.broadcast_to(backfill[:, None], (n, e)), first_emb, state) if backfill.any() else state
            outs.append(out.reshape(n, 1, e))
            grid_cursor += 1
        if j + 1 < events.size:
            if reset_mask[j + 1].all():
                continue  # next event overwrites every row; the segment is dead
            span = events[j + 1] - ev
            nfull = int(np.floor(span / h + _TOL))
            for s in range(nfull):
                state = step(f, state, ev + s * h, h)
            rem = span - nfull * h
            if rem > _TOL:
                state = step(f, state, ev + nfull * h, rem)

    if grid_cursor != g:
        raise AssertionError("grid readout incomplete; event merge failed")
    return RegularGridSeries(values=concat(outs, axis=1), grid_times=grid_tau)


@dataclass
class ContinuousLatent:
    """Perceiver latents plus the output ODE: a state queryable at any time."""

    anchors: Tensor           # (n, t'', d) latents at the grid steps
    dynamics: object          # bound f(z, t)
    grid_steps: int
    method: str = "rk4"
    step_size: float = None

    def at(self, query_time):
        """Latent evolved from the last grid anchor not after query_time."""
        if not 0.0 <= query_time <= 1.0:
            raise ValueError(f"query_time must lie in [0, 1], got {query_time}")
        g = self.grid_steps
        k = min(int(np.floor(query_time * g + _TOL)), g - 1)
        tk = k / g
        z = self.anchors[:, k, :]
        if query_time > tk + _TOL:
            h = self.step_size if self.step_size is not None else default_step_size(g)
            spec = SolveSpec(step_size=h, query_times=[query_time], method=self.method)
            z = ode_solve(self.dynamics, z, tk, spec)[:, 0, :]
        return z


class CoperModel:
    """Continuous-input, continuous-output perceiver classifier."""

    requires_full_grid = False

    def __init__(self, feature_dim, embed_dim=32, latent_dim=64, head_dim=128,
                 grid_steps=48, ode_hidden=(128, 128, 128), dropout_rate=0.5,
                 method="rk4", step_size=None, seed=0):
        rng = np.random.default_rng(seed)
        self.grid_steps = int(grid_steps)
        self.method = method
        self.step_size = step_size
        self.f_emb = Linear(feature_dim, embed_dim, rng)
        self.ode_in = OdeDynamics(embed_dim, ode_hidden, rng, dropout_rate=dropout_rate)
        self.perceiver = PerceiverBlock(
            AttentionConfig(context_dim=embed_dim, latent_dim=latent_dim, head_dim=head_dim,
                            dropout_rate=dropout_rate, causal=True),
            latent_count=grid_steps, rng=rng)
        self.ode_out = OdeDynamics(latent_dim, ode_hidden, rng, dropout_rate=dropout_rate)
        self.classifier = Linear(latent_dim, 1, rng)

    def continuous_latent(self, batch, training=False, rng=None):
        emb = embed(batch, self.f_emb)
        grid = continuize_input(emb, self.ode_in, self.grid_steps, method=self.method,
                                step_size=self.step_size, training=training, rng=rng)
        anchors = self.perceiver(grid.values, training=training, rng=rng)
        return ContinuousLatent(anchors=anchors,
                                dynamics=self.ode_out.bound(training=training, rng=rng),
                                grid_steps=self.grid_steps, method=self.method,
                                step_size=self.step_size)

    def forward(self, batch, training=False, rng=None, query_time=1.0):
        latent = self.continuous_latent(batch, training=training, rng=rng)
        return self.classifier(latent.at(query_time))

    def parameters(self):
        out = []
        for prefix, mod in (("f_emb", self.f_emb), ("ode_in", self.ode_in),
                            ("perceiver", self.perceiver), ("ode_out", self.ode_out),
                            ("classifier", self.classifier)):
            for name, p in mod.parameters():
                out.append((f"{prefix}.{name}", p))
        return out


def _require_full_grid(batch, model_name):
    if not batch.present.all():
        raise ValueError(f"{model_name} needs a carry-forward-completed batch (all steps present)")


class LstmBaseline:
    """2-layer LSTM over the completed grid, classified at the final step."""

    requires_full_grid = True

    def __init__(self, feature_dim, hidden_dim=50, num_layers=2, dropout_rate=0.5, seed=0):
        rng = np.random.default_rng(seed)
        self.lstm = LstmStack(feature_dim, hidden_dim, num_layers, rng, dropout_rate=dropout_rate)
        self.classifier = Linear(hidden_dim, 1, rng)

    def forward(self, batch, training=False, rng=None, query_time=None):
        _require_full_grid(batch, "LstmBaseline")
        seq = self.lstm(Tensor(batch.values), training=training, rng=rng)
        return self.classifier(seq[:, -1, :])

    def parameters(self):
        out = [(f"lstm.{name}", p) for name, p in self.lstm.parameters()]
        out += [(f"classifier.{name}", p) for name, p in self.classifier.parameters()]
        return out


class PerceiverBaseline:
    """Embedding + the causal perceiver block, classified at the last latent."""

    requires_full_grid = True

    def __init__(self, feature_dim, embed_dim=32, latent_dim=64, head_dim=128,
                 grid_steps=48, dropout_rate=0.5, seed=0):
        rng = np.random.default_rng(seed)
        self.f_emb = Linear(feature_dim, embed_dim, rng)
        self.perceiver = PerceiverBlock(
            AttentionConfig(context_dim=embed_dim, latent_dim=latent_dim, head_dim=head_dim,
                            dropout_rate=dropout_rate, causal=True),
            latent_count=grid_steps, rng=rng)
        self.classifier = Linear(latent_dim, 1, rng)

    def forward(self, batch, training=False, rng=None, query_time=None):
        _require_full_grid(batch, "PerceiverBaseline")
        x = self.f_emb(Tensor(batch.values))
        z = self.perceiver(x, training=training, rng=rng)
        return self.classifier(z[:, -1, :])

    def parameters(self):
        out = []
        for prefix, mod in (("f_emb", self.f_emb), ("perceiver", self.perceiver),
                            ("classifier", self.classifier)):
            for name, p in mod.parameters():
                out.append((f"{prefix}.{name}", p))
        return out
