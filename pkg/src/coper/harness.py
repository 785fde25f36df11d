"""Optimizer, loss, metrics, training loop with early stopping, experiment grid.

A run is a pure function of its ExperimentConfig: dataset generation,
parameter init, shuffling and dropout all derive from config.seed, so
rerunning a config reproduces every metric bit for bit on one machine.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .data import (ALLOWED_FRACTIONS, DatasetSplit, apply_removal_series, completed,
                   generate_synthetic, load_external, plan_removal)
from .layers import save_checkpoint
from .models import CoperModel, LstmBaseline, PerceiverBaseline
from .tensor import Tensor, no_grad, stable_sigmoid

__all__ = [
    "Adam",
    "EarlyStopper",
    "ExperimentConfig",
    "RunReport",
    "TrainingDiverged",
    "auroc",
    "bce_with_logits",
    "build_model",
    "evaluate_auroc",
    "load_dataset",
    "run_grid",
    "train",
    "format_table",
]

MODEL_NAMES = ("coper", "lstm", "perceiver")


class TrainingDiverged(RuntimeError):
    """Raised when a run produces NaN loss or gradients."""


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction over a list of (name, Tensor) parameters."""

    def __init__(self, named_params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self):
        self.t += 1
        for (name, p), m, v in zip(self.named_params, self.m, self.v):
            if p.grad is None:
                continue
            g = np.ascontiguousarray(p.grad, dtype=np.float64)
            if np.isnan(g).any():
                raise TrainingDiverged(f"NaN gradient in parameter {name!r}")
            kernels.adam_update(p.data.reshape(-1), g.reshape(-1),
                                m.reshape(-1), v.reshape(-1),
                                self.t, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# loss and metric
# ---------------------------------------------------------------------------

def bce_with_logits(logits, labels):
    """Mean binary cross-entropy on raw logits, log-sum-exp stable.

    Single fused graph node; the gradient is (sigmoid(z) - y) / n.
    """
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    z = logits.data.reshape(-1)
    if z.size != labels.size:
        raise ValueError(f"{z.size} logits vs {labels.size} labels")
    y = labels.astype(np.float64)
    x = -(2.0 * y - 1.0) * z
    per = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    data = np.array(per.mean())
    src_shape = logits.data.shape

    def bwd(g):
        gz = (stable_sigmoid(z) - y) / z.size
        return (float(g) * gz.reshape(src_shape),)

    return Tensor._result(data, (logits,), bwd)


def auroc(scores, labels):
    """Probability a random positive outranks a random negative, ties at 1/2."""
    scores = np.ascontiguousarray(scores, dtype=np.float64).reshape(-1)
    labels = np.ascontiguousarray(labels, dtype=np.int64).reshape(-1)
    if scores.size != labels.size:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    npos = int((labels == 1).sum())
    if npos == 0 or npos == labels.size:
        raise ValueError("AUROC needs both classes present")
    return float(kernels.rank_auc(scores, labels))


# ---------------------------------------------------------------------------
# configuration and reports
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Everything one run needs; fully serializable for provenance."""

    model: str
    removal: float = 0.0
    seed: int = 1
    data: str = "synthetic"
    lr: float = 1e-4
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 64
    dropout: float = 0.5
    n_samples: int = 1000
    features: int = 76
    steps: int = 48
    noise_sd: float = 0.3
    query_time: float = 1.0
    out_dir: str = None

    def __post_init__(self):
        if self.model not in MODEL_NAMES:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODEL_NAMES}")
        if not any(math.isclose(self.removal, f) for f in ALLOWED_FRACTIONS):
            raise ValueError(f"removal must be one of {ALLOWED_FRACTIONS}, got {self.removal}")
        for name in ("lr", "max_epochs", "patience", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self):
        return asdict(self)


@dataclass
class RunReport:
    """Per-run outcome: losses, validation curve, test AUROC, provenance."""

    config: dict
    train_loss: list
    val_auroc: list
    test_auroc: float
    best_epoch: int
    epochs_run: int
    wall_time_s: float
    auroc_drop_pct: float = None

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without improvement."""

    def __init__(self, patience):
        if patience <= 0:
            raise ValueError("patience must be positive")
        self.patience = int(patience)
        self.best = -np.inf
        self.best_epoch = 0
        self.since_best = 0

    def update(self, epoch, value):
        """Record an epoch's metric; returns True when it improved the best."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.since_best = 0
            return True
        self.since_best += 1
        return False

    @property
    def should_stop(self):
        return self.since_best >= self.patience


# ---------------------------------------------------------------------------
# model/dataset wiring
# ---------------------------------------------------------------------------

def build_model(config, feature_dim, seed=None):
    seed = config.seed if seed is None else seed
    if config.model == "coper":
        return CoperModel(feature_dim, grid_steps=config.steps,
                          dropout_rate=config.dropout, seed=seed)
    if config.model == "lstm":
        return LstmBaseline(feature_dim, dropout_rate=config.dropout, seed=seed)
    return PerceiverBaseline(feature_dim, grid_steps=config.steps,
                             dropout_rate=config.dropout, seed=seed)


def load_dataset(config):
    if config.data == "synthetic":
        return generate_synthetic(config.n_samples, t=config.steps, i=config.features,
                                  seed=config.seed, noise_sd=config.noise_sd)
    return load_external(config.data, seed=config.seed)


def _apply_protocol(split, config):
    plan = plan_removal(config.removal, split.train.steps)
    return DatasetSplit(train=apply_removal_series(split.train, plan),
                        validation=apply_removal_series(split.validation, plan),
                        test=apply_removal_series(split.test, plan),
                        meta=dict(split.meta, removal=config.removal))


def _scores(model, series, batch_size=256):
    out = []
    with no_grad():
        for start in range(0, series.n, batch_size):
            batch, _ = series.batch(np.arange(start, min(start + batch_size, series.n)))
            if model.requires_full_grid:
                batch = completed(batch)
            out.append(model.forward(batch, training=False).data.reshape(-1))
    return np.concatenate(out)


def evaluate_auroc(model, series, batch_size=256):
    return auroc(_scores(model, series, batch_size), series.labels)


def _param_snapshot(model):
    return {name: p.data.copy() for name, p in model.parameters()}


def _param_restore(model, snapshot):
    for name, p in model.parameters():
        p.data[...] = snapshot[name]


def train(config, dataset=None):
    """Minibatch Adam on BCE with AUROC-monitored early stopping.

    Returns a RunReport; with config.out_dir set, writes report.json and
    checkpoint.npz there. ``dataset`` short-circuits loading so a grid
    can reuse one dataset across fractions.
    """
    t_start = time.perf_counter()
    split = dataset if dataset is not None else load_dataset(config)
    split = _apply_protocol(split, config)
    model = build_model(config, split.feature_dim)
    opt = Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng([int(config.seed), 0x7EA1])
    stopper = EarlyStopper(config.patience)
    best_params = _param_snapshot(model)

    train_losses = []
    val_aurocs = []
    epochs_run = 0
    for epoch in range(1, config.max_epochs + 1):
        epochs_run = epoch
        perm = rng.permutation(split.train.n)
        total, seen = 0.0, 0
        for start in range(0, perm.size, config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch, labels = split.train.batch(idx)
            if model.requires_full_grid:
                batch = completed(batch)
            logits = model.forward(batch, training=True, rng=rng)
            loss = bce_with_logits(logits, labels)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * idx.size
            seen += idx.size
        train_losses.append(total / seen)

        val = evaluate_auroc(model, split.validation)
        val_aurocs.append(val)
        if stopper.update(epoch, val):
            best_params = _param_snapshot(model)
        if stopper.should_stop:
            break

    _param_restore(model, best_params)
    test = evaluate_auroc(model, split.test)
    report = RunReport(config=config.to_dict(), train_loss=train_losses,
                       val_auroc=val_aurocs, test_auroc=test,
                       best_epoch=stopper.best_epoch, epochs_run=epochs_run,
                       wall_time_s=time.perf_counter() - t_start)

    if config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "report.json")
        save_checkpoint(out / "checkpoint.npz", model.parameters())
    return report


# ---------------------------------------------------------------------------
# experiment grid
# ---------------------------------------------------------------------------

@dataclass
class GridResult:
    rows: list                 # one dict per (model, fraction)
    reports: dict              # (model, fraction, seed) -> RunReport
    failures: dict = field(default_factory=dict)
    observations: dict = field(default_factory=dict)

    @property
    def ok(self):
        return not self.failures


def run_grid(models, removals, seeds, base_config, out_dir=None):
    """Train every (model, removal, seed) cell and aggregate a comparison table.

    Per-cell failures are recorded and the grid continues. The table holds
    mean +- sd (ddof=1) of test AUROC over seeds per (model, removal), and
    the percentage drop relative to that model's 0%-removal mean when a 0%
    column exists. CSV, aligned text table and a summary JSON (with
    unasserted model-ordering observations) are written under out_dir.
    """
    reports = {}
    failures = {}
    datasets = {}
    for seed in seeds:
        cfg0 = _cell_config(base_config, models[0], removals[0], seed)
        datasets[seed] = load_dataset(cfg0)
    for model in models:
        for removal in removals:
            for seed in seeds:
                cfg = _cell_config(base_config, model, removal, seed)
                try:
                    reports[(model, removal, seed)] = train(cfg, dataset=datasets[seed])
                except Exception as exc:  # keep the grid going, record the cell
                    failures[(model, removal, seed)] = f"{type(exc).__name__}: {exc}"

    rows = []
    for model in models:
        ref_mean = None
        for removal in removals:
            cells = [reports[(model, removal, s)].test_auroc
                     for s in seeds if (model, removal, s) in reports]
            failed = len(cells) < len(seeds)
            mean = float(np.mean(cells)) if cells else float("nan")
            sd = float(np.std(cells, ddof=1)) if len(cells) > 1 else 0.0
            if removal == 0.0 and cells:
                ref_mean = mean
            drop = None
            if ref_mean is not None and cells:
                drop = (ref_mean - mean) / ref_mean * 100.0
            rows.append({"model": model, "removal": removal, "auroc_mean": mean,
                         "auroc_sd": sd, "drop_pct": drop, "seeds": len(cells),
                         "failed": failed})

    observations = _ordering_observations(rows, models, removals)
    result = GridResult(rows=rows, reports=reports, failures=failures,
                        observations=observations)
    if out_dir is not None:
        _write_grid_outputs(result, Path(out_dir), base_config)
    return result


def _cell_config(base, model, removal, seed):
    d = base.to_dict()
    d.update(model=model, removal=removal, seed=seed, out_dir=None)
    return ExperimentConfig(**d)


def _ordering_observations(rows, models, removals):
    """Model-vs-model comparisons; recorded for the report, never asserted."""
    table = {(r["model"], r["removal"]): r["auroc_mean"] for r in rows}
    obs = {}
    for removal in removals:
        ranked = sorted(models, key=lambda m: -table.get((m, removal), float("nan")))
        obs[f"ranking_at_{removal:g}"] = ranked
    if "coper" in models and "lstm" in models:
        for removal in (0.5, 0.75):
            if removal in removals:
                obs[f"coper_above_lstm_at_{removal:g}"] = bool(
                    table.get(("coper", removal), np.nan) >= table.get(("lstm", removal), np.nan))
    return obs


def format_table(rows):
    header = f"{'model':<10} {'removal':>8} {'auroc_mean':>11} {'auroc_sd':>9} {'drop_pct':>9} {'seeds':>6}"
    lines = [header, "-" * len(header)]
    for r in rows:
        drop = f"{r['drop_pct']:9.2f}" if r["drop_pct"] is not None else f"{'n/a':>9}"
        flag = "  FAILED" if r["failed"] else ""
        lines.append(f"{r['model']:<10} {r['removal']:>8.2f} {r['auroc_mean']:>11.4f} "
                     f"{r['auroc_sd']:>9.4f} {drop} {r['seeds']:>6d}{flag}")
    return "\n".join(lines)


def _write_grid_outputs(result, out_dir, base_config):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "table.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["model", "removal", "auroc_mean",
                                                "auroc_sd", "drop_pct", "seeds", "failed"])
        writer.writeheader()
        for row in result.rows:
            writer.writerow(row)
    (out_dir / "table.txt").write_text(format_table(result.rows) + "\n", encoding="utf-8")
    summary = {
        "base_config": base_config.to_dict(),
        "observations": result.observations,
        "failures": {f"{m}/{r:g}/s{s}": msg for (m, r, s), msg in result.failures.items()},
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    for (model, removal, seed), report in result.reports.items():
        run_dir = out_dir / f"run_{model}_r{removal:g}_s{seed}"
        run_dir.mkdir(exist_ok=True)
        report.save(run_dir / "report.json")
