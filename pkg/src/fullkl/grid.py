"""Label grids, probability mass functions, moments, and Gaussian discretization.

Shared numeric substrate for the distribution losses: a regression range is
discretized into ordered bins, targets and predictions live on that grid as
pmfs, and (mu, var) moments are read directly off a pmf.  Everything here is
a pure function of immutable values, so instances are safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LabelGrid",
    "Pmf",
    "Moments",
    "NumericPolicy",
    "DEFAULT_POLICY",
    "make_grid",
    "softmax",
    "softmax_probs",
    "moments",
    "pmf_moments",
    "discretize_gaussian",
]

PMF_SUM_TOL = 1e-9
UNIFORM_REL_TOL = 1e-12
MIN_SIGMA_FACTOR = 0.5    # narrower targets degenerate to a near-one-hot pmf
TRUNCATION_SIGMAS = 5.0   # beyond this the renormalized pmf stops resembling the Gaussian


def _readonly_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LabelGrid:
    """Ordered bin centers of a discretized regression range.

    ``spacing`` is the uniform step between neighbours; ``None`` marks a
    non-uniform grid, which :func:`moments` accepts but
    :func:`discretize_gaussian` rejects.
    """

    values: np.ndarray
    spacing: float | None = None

    def __post_init__(self):
        values = _readonly_vector(self.values, "grid values")
        object.__setattr__(self, "values", values)
        if values.size < 2:
            raise ValueError("label grid needs at least two bins")
        if not np.all(np.isfinite(values)):
            raise ValueError("label grid values must be finite")
        diffs = np.diff(values)
        if np.any(diffs <= 0):
            raise ValueError("label grid values must be strictly increasing")
        if self.spacing is not None:
            spacing = float(self.spacing)
            if spacing <= 0:
                raise ValueError("grid spacing must be positive")
            if np.any(np.abs(diffs - spacing) > UNIFORM_REL_TOL * spacing):
                raise ValueError("grid declared uniform but bin spacings deviate")
            object.__setattr__(self, "spacing", spacing)

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def lo(self) -> float:
        return float(self.values[0])

    @property
    def hi(self) -> float:
        return float(self.values[-1])

    @property
    def span(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class Pmf:
    """Probability mass function over a label grid: non-negative, sums to 1."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _readonly_vector(self.probs, "pmf probabilities")
        object.__setattr__(self, "probs", probs)
        if probs.size == 0:
            raise ValueError("pmf must not be empty")
        if not np.all(np.isfinite(probs)):
            raise ValueError("pmf entries must be finite")
        if np.any(probs < 0):
            raise ValueError("pmf entries must be non-negative")
        total = float(probs.sum())
        if abs(total - 1.0) > PMF_SUM_TOL:
            raise ValueError(f"pmf must sum to 1 within {PMF_SUM_TOL}, got {total!r}")

    def __len__(self) -> int:
        return int(self.probs.size)


@dataclass(frozen=True)
class Moments:
    """Expectation and variance of a pmf, in label units and label units squared."""

    mu: float
    var: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.var)):
            raise ValueError("moments must be finite")
        if self.var < 0:
            raise ValueError("variance must be non-negative")


@dataclass(frozen=True)
class NumericPolicy:
    """Floors for the numerically delicate spots the math leaves open.

    ``eps_log`` floors probabilities inside logarithms (both arguments of a
    log-ratio), so pmf entries at or below it behave like zero mass there.
    ``eps_var`` floors predicted variances in denominators and logs, in label
    units squared.  All logarithms are natural, so losses come out in nats.
    """

    eps_log: float = 1e-12
    eps_var: float = 1e-8

    def __post_init__(self):
        if not (self.eps_log > 0 and np.isfinite(self.eps_log)):
            raise ValueError("eps_log must be positive and finite")
        if not (self.eps_var > 0 and np.isfinite(self.eps_var)):
            raise ValueError("eps_var must be positive and finite")


DEFAULT_POLICY = NumericPolicy()


def make_grid(start: float, stop: float, step: float) -> LabelGrid:
    """Uniform grid from ``start`` to ``stop`` inclusive with bin width ``step``."""
    if not all(np.isfinite(v) for v in (start, stop, step)):
        raise ValueError("grid bounds and step must be finite")
    if step <= 0:
        raise ValueError(f"step must be positive, got {step!r}")
    if stop <= start:
        raise ValueError(f"stop must exceed start, got [{start!r}, {stop!r}]")
    n_steps = (stop - start) / step
    n = round(n_steps)
    if n < 1 or abs(n_steps - n) > 1e-9 * max(1.0, n_steps):
        raise ValueError(f"[{start!r}, {stop!r}] is not an integral number of {step!r} steps")
    return LabelGrid(np.linspace(start, stop, n + 1), spacing=float(step))


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis (raw-array form, batch friendly).

    The running maximum is subtracted before exponentiation, so the result is
    overflow free and bit-identical under any logit shift that is itself
    exactly representable.
    """
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits) -> Pmf:
    """Softmax of a logit vector, as a strictly positive pmf."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("softmax expects a non-empty logit vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax logits must be finite")
    return Pmf(softmax_probs(z))


def pmf_moments(probs: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance along the last axis: mu = sum(y p), var = sum((y-mu)^2 p)."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    mu = np.sum(p * y, axis=-1)
    dev = y - np.asarray(mu)[..., np.newaxis]
    var = np.sum(p * dev * dev, axis=-1)
    return mu, var


def moments(p: Pmf, g: LabelGrid) -> Moments:
    """Expectation and variance of ``p`` over the bin values of ``g``."""
    if len(p) != len(g):
        raise ValueError(f"pmf has {len(p)} bins but grid has {len(g)}")
    mu, var = pmf_moments(p.probs, g.values)
    return Moments(float(mu), float(var))


def discretize_gaussian(mu: float, sigma: float, g: LabelGrid) -> Pmf:
    """Normal density sampled at the bin centers of a uniform grid, renormalized.

    Requires ``sigma >= 0.5 * spacing`` (below that the pmf collapses towards
    one-hot and its variance stops tracking sigma^2) and ``mu`` no further
    than five sigma outside the grid span (beyond that most of the requested
    mass would be truncated away).
    """
    if g.spacing is None:
        raise ValueError("discretize_gaussian requires a uniform grid")
    if not (np.isfinite(mu) and np.isfinite(sigma)):
        raise ValueError("mu and sigma must be finite")
    floor = MIN_SIGMA_FACTOR * g.spacing
    if sigma < floor:
        raise ValueError(f"sigma={sigma!r} below floor {floor!r} (half the bin spacing)")
    if mu < g.lo - TRUNCATION_SIGMAS * sigma or mu > g.hi + TRUNCATION_SIGMAS * sigma:
        raise ValueError(
            f"mu={mu!r} lies more than {TRUNCATION_SIGMAS} sigma outside [{g.lo}, {g.hi}]"
        )
    exponent = -((g.values - mu) ** 2) / (2.0 * sigma * sigma)
    w = np.exp(exponent - exponent.max())
    return Pmf(w / w.sum())
