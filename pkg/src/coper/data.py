"""Dataset generation, ingestion, the chunk-removal protocol, carry-forward.

Synthetic data: two latent classes, each a class-conditional smooth
trajectory per feature (sum of integer-frequency sinusoids with
class-specific amplitudes/phases plus a constant class offset on the
first half of the features) with per-sample jitter and optional white
noise. Integer frequencies make every sinusoid average to exactly zero
over the full grid, so with noise 0 the per-sample mean of any offset
feature equals the class offset and a threshold separates the classes
perfectly. Removing chunks of steps destroys both the zero-mean
cancellation and the shape information.

External dataset file format (one sample per record, line oriented,
'#' comments and blank lines ignored):

    features=<i> steps=<t> window_hours=<w>
    sample <id> label=<0|1>
    <time-hours> <present 0|1> <v1,...,vi>
    ... exactly <t> such rows per sample ...

A fixture lives at tests/fixtures/tiny_dataset.txt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .models import IrregularSeriesBatch

__all__ = [
    "LabeledSeries",
    "DatasetSplit",
    "RemovalPlan",
    "DatasetFormatError",
    "generate_synthetic",
    "plan_removal",
    "apply_removal",
    "apply_removal_series",
    "carry_forward",
    "completed",
    "load_external",
    "save_external",
    "read_samples",
]


class DatasetFormatError(ValueError):
    """Malformed external dataset file; message carries the line number."""


@dataclass
class LabeledSeries:
    """A set of labelled samples sharing one grid layout."""

    values: np.ndarray        # (N, t, i)
    times: np.ndarray         # (N, t) hours
    present: np.ndarray       # (N, t) bool
    labels: np.ndarray        # (N,) ints in {0, 1}
    ids: np.ndarray           # (N,) sample identifiers
    window_hours: float = 48.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def steps(self):
        return self.values.shape[1]

    @property
    def feature_dim(self):
        return self.values.shape[2]

    @property
    def prevalence(self):
        return float(self.labels.mean())

    def batch(self, idx=None):
        """Materialize (IrregularSeriesBatch, labels) for the given indices."""
        if idx is None:
            idx = np.arange(self.n)
        idx = np.asarray(idx)
        batch = IrregularSeriesBatch(values=self.values[idx], times=self.times[idx],
                                     present=self.present[idx], window_hours=self.window_hours)
        return batch, self.labels[idx]


@dataclass
class DatasetSplit:
    """Disjoint train/validation/test series with shared layout."""

    train: LabeledSeries
    validation: LabeledSeries
    test: LabeledSeries
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = {s.feature_dim for s in (self.train, self.validation, self.test)}
        if len(dims) != 1:
            raise ValueError(f"splits disagree on feature count: {sorted(dims)}")
        all_ids = np.concatenate([s.ids for s in (self.train, self.validation, self.test)])
        if len(np.unique(all_ids)) != len(all_ids):
            raise ValueError("splits share sample ids; they must be disjoint")

    @property
    def feature_dim(self):
        return self.train.feature_dim


def _stratified_split(labels, fractions, rng):
    """Index arrays for train/val/test, stratified by label."""
    labels = np.asarray(labels)
    parts = ([], [], [])
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(fractions[1] * idx.size))
        n_test = int(round(fractions[2] * idx.size))
        n_train = idx.size - n_val - n_test
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def generate_synthetic(n, t=48, i=8, seed=0, noise_sd=0.3, window_hours=None,
                       class_offset=1.0, split_fractions=(0.7, 0.15, 0.15)):
    """Two-class fully regular synthetic series, split 70/15/15 stratified.

    Pure function of its arguments: the same seed reproduces the dataset
    bit for bit. Features [0, ceil(i/2)) carry the class offset; all
    features carry class-specific sinusoid shapes.
    """
    if n < 10:
        raise ValueError(f"need at least 10 samples, got {n}")
    if i < 2:
        raise ValueError(f"need at least 2 features, got {i}")
    if t < 8:
        raise ValueError(f"need at least 8 steps, got {t}")
    window = float(window_hours) if window_hours is not None else float(t)
    rng = np.random.default_rng([int(seed), 0x5E1D])

    n_offset = (i + 1) // 2
    freqs = np.array([1.0, 2.0, 3.0])
    base_amp = rng.uniform(0.4, 1.0, size=(2, i, freqs.size))
    base_phase = rng.uniform(0.0, 2.0 * np.pi, size=(2, i, freqs.size))
    offsets = np.zeros((2, i))
    offsets[1, :n_offset] = class_offset

    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2:] = 1
    grid = np.arange(t) / t                                   # fraction of the window
    angle = 2.0 * np.pi * freqs[None, :] * grid[:, None]      # (t, K)

    values = np.empty((n, t, i))
    for s in range(n):
        c = labels[s]
        amp = base_amp[c] * (1.0 + 0.25 * rng.uniform(-1.0, 1.0, size=(i, freqs.size)))
        phase = base_phase[c] + 0.35 * rng.uniform(-1.0, 1.0, size=(i, freqs.size))
        # (t, i): sum over frequencies of amp*sin(angle + phase)
        traj = np.einsum("fk,tfk->tf", amp, np.sin(angle[:, None, :] + phase[None, :, :]))
        values[s] = offsets[c][None, :] + traj
    if noise_sd > 0.0:
        values += noise_sd * rng.standard_normal(size=values.shape)

    times = np.tile(np.arange(t, dtype=np.float64) * (window / t), (n, 1))
    present = np.ones((n, t), dtype=bool)
    ids = np.array([f"s{k:05d}" for k in range(n)])

    tr, va, te = _stratified_split(labels, split_fractions, rng)
    def take(idx):
        return LabeledSeries(values=values[idx], times=times[idx], present=present[idx],
                             labels=labels[idx], ids=ids[idx], window_hours=window)
    meta = {"seed": int(seed), "noise_sd": float(noise_sd),
            "offset_features": list(range(n_offset)), "class_offset": float(class_offset)}
    return DatasetSplit(train=take(tr), validation=take(va), test=take(te), meta=meta)


# ---------------------------------------------------------------------------
# chunk-removal irregularity protocol
# ---------------------------------------------------------------------------

ALLOWED_FRACTIONS = (0.0, 0.25, 0.5, 0.75)


@dataclass
class RemovalPlan:
    """Deterministic chunk positions for one removal fraction."""

    fraction: float
    steps: int
    chunks: list                # [(start, length), ...] in grid-step units

    @property
    def removed_steps(self):
        out = []
        for start, length in self.chunks:
            out.extend(range(start, start + length))
        return out


def plan_removal(fraction, t):
    """Three chunks: after the first observation, centred at t/2, ending at t-1.

    Total removed = round(fraction * t); chunk lengths differ by at most
    one, remainders going to earlier chunks. Step 0 is never removed.
    """
    if fraction >= 1.0 or fraction < 0.0:
        raise ValueError(f"removal fraction must lie in [0, 1), got {fraction}")
    total = int(round(fraction * t))
    if total == 0:
        return RemovalPlan(fraction=fraction, steps=t, chunks=[])
    base, rem = divmod(total, 3)
    lengths = [base + (1 if k < rem else 0) for k in range(3)]
    starts = [1, t // 2 - lengths[1] // 2, t - lengths[2]]
    chunks = list(zip(starts, lengths))
    prev_end = 1
    for start, length in chunks:
        if start < prev_end:
            raise ValueError(f"{t} steps are too few to host three disjoint chunks of {total} removed steps")
        prev_end = start + length
    if prev_end > t:
        raise ValueError(f"end chunk overruns the grid: {t} steps, fraction {fraction}")
    return RemovalPlan(fraction=fraction, steps=t, chunks=chunks)


def _removal_keep_mask(plan, t):
    if plan.steps != t:
        raise ValueError(f"plan was built for {plan.steps} steps, batch has {t}")
    keep = np.ones(t, dtype=bool)
    keep[plan.removed_steps] = False
    return keep


def apply_removal(batch, plan, seed=None):
    """Clear the presence mask at the plan's chunks; values stay in storage.

    ``seed`` is accepted for interface stability; the chunk protocol is
    fully deterministic and does not use it.
    """
    if not batch.present.all():
        raise ValueError("apply_removal expects a fully regular batch")
    keep = _removal_keep_mask(plan, batch.steps)
    return IrregularSeriesBatch(values=batch.values, times=batch.times,
                                present=batch.present & keep[None, :],
                                window_hours=batch.window_hours)


def apply_removal_series(series, plan, seed=None):
    """apply_removal over a whole LabeledSeries; returns a new object."""
    if not series.present.all():
        raise ValueError("apply_removal expects a fully regular series")
    keep = _removal_keep_mask(plan, series.steps)
    return LabeledSeries(values=series.values, times=series.times,
                         present=series.present & keep[None, :],
                         labels=series.labels, ids=series.ids,
                         window_hours=series.window_hours)


def carry_forward(batch):
    """Fill each absent step with the most recent present step's values.

    Requires step 0 present for every sample; returns an (n, t, i) array.
    """
    if not batch.present[:, 0].all():
        bad = int(np.argmin(batch.present[:, 0]))
        raise ValueError(f"carry-forward needs step 0 present; sample {bad} lacks it")
    return kernels.carry_forward_fill(np.ascontiguousarray(batch.values),
                                      np.ascontiguousarray(batch.present))


def completed(batch):
    """Carry-forward a batch into a fully present copy."""
    return IrregularSeriesBatch(values=carry_forward(batch), times=batch.times,
                                present=np.ones_like(batch.present),
                                window_hours=batch.window_hours)


# ---------------------------------------------------------------------------
# external file format
# ---------------------------------------------------------------------------

def _parse_header(token_line, lineno):
    fields = {}
    for tok in token_line.split():
        if "=" not in tok:
            raise DatasetFormatError(f"line {lineno}: malformed header token {tok!r}")
        key, val = tok.split("=", 1)
        fields[key] = val
    for key in ("features", "steps", "window_hours"):
        if key not in fields:
            raise DatasetFormatError(f"line {lineno}: header misses {key!r}")
    try:
        return int(fields["features"]), int(fields["steps"]), float(fields["window_hours"])
    except ValueError as exc:
        raise DatasetFormatError(f"line {lineno}: non-numeric header value ({exc})") from None


def read_samples(path):
    """Parse an external dataset file into one LabeledSeries (no split)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    content = [(k + 1, ln.strip()) for k, ln in enumerate(lines)
               if ln.strip() and not ln.strip().startswith("#")]
    if not content:
        raise DatasetFormatError(f"{path}: no samples (file is empty)")

    lineno, header = content[0]
    features, steps, window = _parse_header(header, lineno)

    values, times, present, labels, ids = [], [], [], [], []
    k = 1
    while k < len(content):
        lineno, line = content[k]
        parts = line.split()
        if len(parts) != 3 or parts[0] != "sample" or not parts[2].startswith("label="):
            raise DatasetFormatError(f"line {lineno}: expected 'sample <id> label=<0|1>', got {line!r}")
        sid = parts[1]
        raw_label = parts[2][len("label="):]
        if raw_label not in ("0", "1"):
            raise DatasetFormatError(f"line {lineno}: label must be 0 or 1, got {raw_label!r}")
        if sid in ids:
            raise DatasetFormatError(f"line {lineno}: duplicate sample id {sid!r}")
        k += 1
        if len(content) - k < steps:
            raise DatasetFormatError(f"line {lineno}: sample {sid!r} truncated; expected {steps} step rows")
        v = np.empty((steps, features))
        tm = np.empty(steps)
        pr = np.empty(steps, dtype=bool)
        for row in range(steps):
            lineno_r, line_r = content[k + row]
            cols = line_r.split()
            if len(cols) != 3:
                raise DatasetFormatError(
                    f"line {lineno_r}: expected '<time> <present> <comma-separated values>', got {line_r!r}")
            try:
                tm[row] = float(cols[0])
            except ValueError:
                raise DatasetFormatError(f"line {lineno_r}: bad timestamp {cols[0]!r}") from None
            if cols[1] not in ("0", "1"):
                raise DatasetFormatError(f"line {lineno_r}: present flag must be 0 or 1, got {cols[1]!r}")
            pr[row] = cols[1] == "1"
            vals = cols[2].split(",")
            if len(vals) != features:
                raise DatasetFormatError(
                    f"line {lineno_r}: expected {features} feature values, got {len(vals)}")
            try:
                v[row] = [float(x) for x in vals]
            except ValueError:
                raise DatasetFormatError(f"line {lineno_r}: non-numeric feature value") from None
            if not np.isfinite(v[row]).all():
                raise DatasetFormatError(f"line {lineno_r}: non-finite feature value")
        if (np.diff(tm) < 0).any():
            raise DatasetFormatError(f"line {lineno}: sample {sid!r} has non-monotone timestamps")
        if (tm < 0).any() or (tm > window).any():
            raise DatasetFormatError(f"line {lineno}: sample {sid!r} has timestamps outside [0, {window}]")
        values.append(v)
        times.append(tm)
        present.append(pr)
        labels.append(int(raw_label))
        ids.append(sid)
        k += steps

    return LabeledSeries(values=np.stack(values), times=np.stack(times),
                         present=np.stack(present), labels=np.array(labels),
                         ids=np.array(ids), window_hours=window)


def save_external(path, series):
    """Write a LabeledSeries in the documented line-oriented format."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"features={series.feature_dim} steps={series.steps} window_hours={series.window_hours:g}\n")
        for s in range(series.n):
            fh.write(f"sample {series.ids[s]} label={int(series.labels[s])}\n")
            for row in range(series.steps):
                vals = ",".join(repr(float(x)) for x in series.values[s, row])
                fh.write(f"{series.times[s, row]:g} {int(series.present[s, row])} {vals}\n")


def load_external(path, expected_features=None, split_fractions=(0.7, 0.15, 0.15), seed=0):
    """Read, validate, and stratified-split an external dataset file."""
    series = read_samples(path)
    if expected_features is not None and series.feature_dim != expected_features:
        raise DatasetFormatError(
            f"{path}: expected {expected_features} features, file declares {series.feature_dim}")
    if len(np.unique(series.labels)) < 2:
        raise DatasetFormatError(f"{path}: both classes must be present to split")
    rng = np.random.default_rng([int(seed), 0x10AD])
    tr, va, te = _stratified_split(series.labels, split_fractions, rng)
    def take(idx):
        return LabeledSeries(values=series.values[idx], times=series.times[idx],
                             present=series.present[idx], labels=series.labels[idx],
                             ids=series.ids[idx], window_hours=series.window_hours)
    meta = {"source": str(path), "seed": int(seed)}
    return DatasetSplit(train=take(tr), validation=take(va), test=take(te), meta=meta)
