"""Synthetic distribution-regression datasets and (mean, std) CSV ingestion.

Each sample pairs a feature vector with an annotated (mean, std) target,
from which a Gaussian target pmf on the label grid is materialized at
construction time.  Datasets are immutable and store column arrays (the
trainer's fast path); per-sample views are available through
:meth:`Dataset.samples`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .grid import LabelGrid, MIN_SIGMA_FACTOR, Pmf, TRUNCATION_SIGMAS

__all__ = [
    "Sample",
    "Dataset",
    "gen_synthetic",
    "load_csv",
    "save_csv",
    "split",
]

log = logging.getLogger(__name__)

# The deterministic smooth map behind gen_synthetic: an affine projection of
# the features plus a sinusoid of a second projection, min-max rescaled into
# the safe target range.  The sinusoid's amplitude is relative to the affine
# direction's norm and its frequency is in radians per unit of the second
# projection; together they set how hard the regression task is for a small
# network, which is what keeps desk-scale validation losses off the floor.
SINE_AMP_REL = 1.0
SINE_FREQ = 2.0

# Keep generated means at least this many max-sigmas inside the grid edges so
# target pmfs are not visibly truncated and moment recovery stays clean.
MEAN_EDGE_SIGMAS = 3.0


@dataclass(frozen=True)
class Sample:
    """One annotated sample: features plus (mean, std) and its target pmf."""

    features: np.ndarray
    target_mu: float
    target_sigma: float
    target_pmf: Pmf


@dataclass(frozen=True)
class Dataset:
    """Immutable column store of samples sharing one label grid.

    ``target_pmfs`` rows are the discretized Gaussian targets, materialized
    once at construction.  ``split`` labels which partition the rows belong
    to ("full", "train" or "val").
    """

    grid: LabelGrid
    ids: np.ndarray
    features: np.ndarray
    target_mu: np.ndarray
    target_sigma: np.ndarray
    target_pmfs: np.ndarray
    split: str = "full"

    def __post_init__(self):
        ids = np.array(self.ids, dtype=np.int64)
        feats = np.array(self.features, dtype=np.float64)
        mu = np.array(self.target_mu, dtype=np.float64)
        sigma = np.array(self.target_sigma, dtype=np.float64)
        pmfs = np.array(self.target_pmfs, dtype=np.float64)
        n = ids.size
        if n == 0:
            raise ValueError("dataset must not be empty")
        if feats.ndim != 2 or feats.shape[0] != n or feats.shape[1] < 1:
            raise ValueError(f"features must have shape ({n}, d_in >= 1), got {feats.shape}")
        if mu.shape != (n,) or sigma.shape != (n,):
            raise ValueError("target_mu and target_sigma must be one value per sample")
        if pmfs.shape != (n, len(self.grid)):
            raise ValueError(f"target_pmfs must have shape ({n}, {len(self.grid)}), got {pmfs.shape}")
        if not (np.all(np.isfinite(feats)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("dataset values must be finite")
        floor = MIN_SIGMA_FACTOR * (self.grid.spacing or 0.0)
        if np.any(sigma < floor):
            raise ValueError(f"target sigma below the {floor!r} floor")
        if np.any(mu < self.grid.lo) or np.any(mu > self.grid.hi):
            raise ValueError("target means must lie within the grid span")
        bad = np.abs(pmfs.sum(axis=1) - 1.0) > 1e-9
        if np.any(pmfs < 0) or bad.any():
            raise ValueError("target pmf rows must be non-negative and sum to 1")
        for arr, name in ((ids, "ids"), (feats, "features"), (mu, "target_mu"),
                          (sigma, "target_sigma"), (pmfs, "target_pmfs")):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return int(self.ids.size)

    @property
    def d_in(self) -> int:
        return int(self.features.shape[1])

    @cached_property
    def samples(self) -> tuple[Sample, ...]:
        """Per-sample views (built on first access; arrays are shared, not copied)."""
        return tuple(
            Sample(self.features[i], float(self.target_mu[i]),
                   float(self.target_sigma[i]), Pmf(self.target_pmfs[i]))
            for i in range(len(self))
        )

    def subset(self, indices: np.ndarray, split: str) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.grid,
            self.ids[idx],
            self.features[idx],
            self.target_mu[idx],
            self.target_sigma[idx],
            self.target_pmfs[idx],
            split=split,
        )


def _discretize_rows(mu: np.ndarray, sigma: np.ndarray, g: LabelGrid) -> np.ndarray:
    """Row-wise mirror of grid.discretize_gaussian (same ops, same bits)."""
    if g.spacing is None:
        raise ValueError("target discretization requires a uniform grid")
    floor = MIN_SIGMA_FACTOR * g.spacing
    bad = np.flatnonzero(sigma < floor)
    if bad.size:
        raise ValueError(f"sigma below floor {floor!r} at rows {bad[:10].tolist()}")
    bad = np.flatnonzero((mu < g.lo - TRUNCATION_SIGMAS * sigma) | (mu > g.hi + TRUNCATION_SIGMAS * sigma))
    if bad.size:
        raise ValueError(f"mean more than {TRUNCATION_SIGMAS} sigma outside the grid at rows {bad[:10].tolist()}")
    exponent = -((g.values - mu[:, np.newaxis]) ** 2) / (2.0 * sigma * sigma)[:, np.newaxis]
    w = np.exp(exponent - exponent.max(axis=-1, keepdims=True))
    return w / w.sum(axis=-1, keepdims=True)


def gen_synthetic(
    n: int,
    d_in: int,
    grid: LabelGrid,
    sigma_range: tuple[float, float],
    seed: int,
) -> Dataset:
    """Deterministic synthetic dataset of ``n`` samples with ``d_in`` features.

    Features are uniform on [-1, 1]^d_in.  The target mean is a
    deterministic smooth map of the features — an affine projection plus a
    sinusoidal mixture — min-max rescaled into
    [grid.lo + 3*sigma_max, grid.hi - 3*sigma_max] so no target is visibly
    truncated.  The target std is uniform in ``sigma_range``.  The draw
    order (features, affine direction, sinusoid direction, sigmas) is part
    of the format: a given seed always produces the identical dataset.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if d_in < 1:
        raise ValueError(f"d_in must be >= 1, got {d_in}")
    if grid.spacing is None:
        raise ValueError("gen_synthetic requires a uniform grid")
    sigma_lo, sigma_hi = float(sigma_range[0]), float(sigma_range[1])
    floor = MIN_SIGMA_FACTOR * grid.spacing
    if not (floor <= sigma_lo <= sigma_hi <= grid.span / 4.0):
        raise ValueError(
            f"sigma_range must satisfy {floor} <= lo <= hi <= {grid.span / 4.0}, got ({sigma_lo}, {sigma_hi})"
        )
    lo_t = grid.lo + MEAN_EDGE_SIGMAS * sigma_hi
    hi_t = grid.hi - MEAN_EDGE_SIGMAS * sigma_hi
    if lo_t >= hi_t:
        raise ValueError("sigma_range too wide for the grid: no room for target means")

    rng = np.random.default_rng(seed)
    features = rng.uniform(-1.0, 1.0, (n, d_in))
    affine_dir = rng.normal(size=d_in)
    sine_dir = rng.normal(size=d_in)
    raw = features @ affine_dir + (
        SINE_AMP_REL * np.linalg.norm(affine_dir)
    ) * np.sin(SINE_FREQ * (features @ sine_dir))
    span = raw.max() - raw.min()
    if span > 0:
        target_mu = lo_t + (raw - raw.min()) * ((hi_t - lo_t) / span)
    else:
        target_mu = np.full(n, 0.5 * (lo_t + hi_t))
    target_sigma = rng.uniform(sigma_lo, sigma_hi, n)
    pmfs = _discretize_rows(target_mu, target_sigma, grid)
    return Dataset(grid, np.arange(n, dtype=np.int64), features, target_mu, target_sigma, pmfs)


def _csv_header(d_in: int) -> list[str]:
    return ["id"] + [f"f{j}" for j in range(d_in)] + ["mean", "std"]


def save_csv(ds: Dataset, path) -> None:
    """Write a dataset in the CSV annotation schema (lossless float text)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_csv_header(ds.d_in))
        for i in range(len(ds)):
            row = [str(int(ds.ids[i]))]
            row += [repr(float(v)) for v in ds.features[i]]
            row += [repr(float(ds.target_mu[i])), repr(float(ds.target_sigma[i]))]
            writer.writerow(row)


def load_csv(path, grid: LabelGrid) -> Dataset:
    """Load an annotation CSV (header ``id,f0,...,f{d-1},mean,std``).

    Every row must satisfy the sample invariants (std at or above half the
    bin spacing, mean inside the grid span); offending rows fail the load
    with their file line numbers.  Rows whose mean sits within 3 sigma of a
    grid edge are accepted but counted in a truncation warning, since their
    pmfs are visibly clipped.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such annotation file: {path}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        d_in = len(header) - 3
        if d_in < 1 or header != _csv_header(d_in):
            raise ValueError(f"{path}: header must be id,f0,...,f{{d-1}},mean,std")
        ids, feats, mus, sigmas = [], [], [], []
        bad: list[str] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d_in + 3:
                bad.append(f"line {line_no}: expected {d_in + 3} fields, got {len(row)}")
                continue
            try:
                rid = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError:
                bad.append(f"line {line_no}: unparseable numeric field")
                continue
            mean, std = vals[-2], vals[-1]
            if not all(np.isfinite(v) for v in vals):
                bad.append(f"line {line_no}: non-finite value")
            elif std < MIN_SIGMA_FACTOR * (grid.spacing or 0.0):
                bad.append(f"line {line_no}: std {std!r} below the sigma floor")
            elif not (grid.lo <= mean <= grid.hi):
                bad.append(f"line {line_no}: mean {mean!r} outside the grid span")
            else:
                ids.append(rid)
                feats.append(vals[:-2])
                mus.append(mean)
                sigmas.append(std)
        if bad:
            shown = "; ".join(bad[:10])
            more = f" (+{len(bad) - 10} more)" if len(bad) > 10 else ""
            raise ValueError(f"{path}: {len(bad)} invalid row(s): {shown}{more}")
        if not ids:
            raise ValueError(f"{path}: no data rows")
    mu = np.array(mus)
    sigma = np.array(sigmas)
    truncated = int(np.sum((mu - grid.lo < MEAN_EDGE_SIGMAS * sigma) | (grid.hi - mu < MEAN_EDGE_SIGMAS * sigma)))
    if truncated:
        log.warning("%s: %d row(s) within 3 sigma of a grid edge; their pmfs are visibly truncated", path, truncated)
    pmfs = _discretize_rows(mu, sigma, grid)
    return Dataset(grid, np.array(ids, dtype=np.int64), np.array(feats), mu, sigma, pmfs)


def split(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle-then-partition into (train, val); disjoint and exhaustive."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction!r}")
    n = len(ds)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise ValueError(f"val_fraction {val_fraction!r} yields an empty split for {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return ds.subset(train_idx, "train"), ds.subset(val_idx, "val")
