"""Independent oracles for the closed forms and analytic gradients.

Nothing here shares code with the losses it checks: the Gaussian-moment KL
is re-derived by brute-force quadrature, and every analytic gradient is
compared against central finite differences.  The trainer is only trusted
after this module's suite passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .grid import DEFAULT_POLICY, LabelGrid, Moments, NumericPolicy, Pmf, discretize_gaussian, make_grid, softmax
from .losses import (
    FAMILY_FULL_KL,
    FAMILY_REFERENCE,
    LossSpec,
    full_kl_grad,
    full_kl_loss,
    gaussian_kl,
    kl_div,
    reference_grad,
    reference_loss,
    smoothness,
)

__all__ = [
    "GradCheckReport",
    "SweepRow",
    "SweepResult",
    "FidelityResult",
    "CheckResult",
    "REL_ERROR_FLOOR",
    "fd_grad",
    "check_grad",
    "rel_norm_error",
    "numeric_gaussian_kl",
    "gaussian_kl_sweep",
    "random_instance",
    "gradient_fidelity",
    "affine_invariance_errors",
    "exact_zero_violations",
    "component_minima",
    "run_all_checks",
]

REL_ERROR_FLOOR = 1e-12  # absolute floor in relative-error denominators

MIN_QUADRATURE_POINTS = 10_000
MIN_SPAN_SIGMAS = 8.0


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of a per-coordinate analytic-vs-numeric gradient comparison."""

    max_rel_error: float
    worst_index: int
    passed: bool
    tolerance: float


def fd_grad(loss_fn: Callable[[np.ndarray], float], logits, h) -> np.ndarray:
    """Central-difference gradient (f(x+h e_i) - f(x-h e_i)) / (2h).

    ``h`` may be a positive scalar or a per-coordinate vector of steps (the
    randomized suites use h_i = 1e-5 * max(1, |x_i|)).  Exact to rounding on
    polynomials of degree <= 2.  Works for any real argument vector, not
    just logits.
    """
    x = np.array(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("fd_grad expects a non-empty vector")
    steps = np.broadcast_to(np.asarray(h, dtype=np.float64), x.shape)
    if not np.all(steps > 0):
        raise ValueError("finite-difference step must be positive")
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += steps[i]
        xm[i] -= steps[i]
        fp = float(loss_fn(xp))
        fm = float(loss_fn(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"loss_fn non-finite near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * steps[i])
    return grad


def check_grad(analytic, numeric, tol: float) -> GradCheckReport:
    """Per-coordinate relative comparison of two gradient vectors.

    The metric is max_i |a_i - n_i| / max(1e-12, |a_i| + |n_i|); the
    absolute floor keeps legitimately ~0 coordinates from failing on
    round-off noise.  ``passed`` holds iff the max does not exceed ``tol``.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape or a.ndim != 1 or a.size == 0:
        raise ValueError(f"gradient shapes must match and be non-empty vectors: {a.shape} vs {n.shape}")
    rel = np.abs(a - n) / np.maximum(REL_ERROR_FLOOR, np.abs(a) + np.abs(n))
    worst = int(np.argmax(rel))
    return GradCheckReport(float(rel[worst]), worst, bool(rel[worst] <= tol), float(tol))


def rel_norm_error(analytic, numeric) -> float:
    """||a - n||_2 / max(1e-12, ||a||_2 + ||n||_2) — the randomized-suite metric."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(REL_ERROR_FLOOR, np.linalg.norm(a) + np.linalg.norm(n)))


def _logsumexp(a: np.ndarray) -> float:
    m = float(np.max(a))
    return m + float(np.log(np.sum(np.exp(a - m))))


def numeric_gaussian_kl(
    target_m: Moments,
    pred_m: Moments,
    points: int = 100_000,
    span_sigmas: float = 8.0,
) -> float:
    """Quadrature oracle for the closed-form Gaussian-moment KL.

    Both densities are sampled on a shared uniform grid covering both means
    +- span_sigmas * max(sigma, sigma_hat), renormalized, and fed through
    the discrete KL sum.  All of it runs in log space (log-densities and a
    log-sum-exp normalizer), so extreme moment pairs — where one density
    underflows across most of the window — lose nothing to rounding.
    """
    if points < MIN_QUADRATURE_POINTS:
        raise ValueError(f"points must be >= {MIN_QUADRATURE_POINTS}, got {points}")
    if span_sigmas < MIN_SPAN_SIGMAS:
        raise ValueError(f"span_sigmas must be >= {MIN_SPAN_SIGMAS}, got {span_sigmas}")
    if target_m.var < DEFAULT_POLICY.eps_var or pred_m.var < DEFAULT_POLICY.eps_var:
        raise ValueError("variances must sit above the eps_var floor")
    reach = span_sigmas * math.sqrt(max(target_m.var, pred_m.var))
    lo = min(target_m.mu, pred_m.mu) - reach
    hi = max(target_m.mu, pred_m.mu) + reach
    x = np.linspace(lo, hi, points)
    log_t = -((x - target_m.mu) ** 2) / (2.0 * target_m.var)
    log_p = -((x - pred_m.mu) ** 2) / (2.0 * pred_m.var)
    log_t = log_t - _logsumexp(log_t)
    log_p = log_p - _logsumexp(log_p)
    return float(np.sum(np.exp(log_t) * (log_t - log_p)))


@dataclass(frozen=True)
class SweepRow:
    sigma_t: float
    sigma_p: float
    dmu: float
    closed: float
    numeric: float
    abs_err: float


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    max_abs_err: float

    @property
    def worst(self) -> SweepRow:
        return max(self.rows, key=lambda r: r.abs_err)


def gaussian_kl_sweep(
    sigmas: Sequence[float] = (0.5, 1.0, 2.0, 5.0, 10.0),
    dmus: Sequence[float] = (0.0, 1.0, 10.0),
    points: int = 100_000,
    span_sigmas: float = 8.0,
    closed_form: Callable[[float, float, float, float], float] | None = None,
    policy: NumericPolicy = DEFAULT_POLICY,
) -> SweepResult:
    """Closed form vs quadrature oracle over a moment-pair grid.

    ``closed_form(mu_t, var_t, mu_p, var_p)`` defaults to the library's
    gaussian_kl; it is injectable so a deliberately perturbed closed form
    can demonstrate that the sweep actually detects mutations.
    """
    if closed_form is None:
        def closed_form(mu_t, var_t, mu_p, var_p):
            return gaussian_kl(Moments(mu_t, var_t), Moments(mu_p, var_p), policy)

    rows = []
    for sigma_t in sigmas:
        for sigma_p in sigmas:
            for dmu in dmus:
                target_m = Moments(0.0, sigma_t * sigma_t)
                pred_m = Moments(float(dmu), sigma_p * sigma_p)
                closed = float(closed_form(target_m.mu, target_m.var, pred_m.mu, pred_m.var))
                numeric = numeric_gaussian_kl(target_m, pred_m, points, span_sigmas)
                rows.append(SweepRow(sigma_t, sigma_p, float(dmu), closed, numeric, abs(closed - numeric)))
    return SweepResult(tuple(rows), max(r.abs_err for r in rows))


# ---------------------------------------------------------------------------
# Randomized gradient fidelity
# ---------------------------------------------------------------------------


def random_instance(rng: np.random.Generator, g: LabelGrid) -> tuple[Pmf, np.ndarray]:
    """A random (target pmf, logits) pair on ``g``.

    Targets alternate between discretized Gaussians (the structured shapes
    the trainer sees) and softmax draws (arbitrary valid pmfs); logits are
    mild Gaussian draws, which keeps every softmax output well above the
    eps_log floor so the analytic gradients are exact, not subgradients.
    """
    n = len(g)
    logits = rng.normal(0.0, 2.0, n)
    if rng.random() < 0.5:
        target = softmax(rng.normal(0.0, 1.5, n))
    else:
        sigma_lo = 0.5 * g.spacing
        sigma_hi = max(sigma_lo, g.span / 4.0)
        target = discretize_gaussian(
            rng.uniform(g.lo, g.hi), rng.uniform(sigma_lo, sigma_hi), g
        )
    return target, logits


@dataclass(frozen=True)
class FidelityResult:
    family: str
    sizes: tuple[int, ...]
    n_instances: int
    max_rel_error: float
    worst_size: int
    worst_instance: int


def gradient_fidelity(
    spec: LossSpec,
    n_instances: int = 100,
    sizes: Sequence[int] = (2, 5, 101),
    seed: int = 20240,
    rel_step: float = 1e-5,
    policy: NumericPolicy = DEFAULT_POLICY,
) -> FidelityResult:
    """Analytic vs central-finite-difference gradients on random instances.

    Per instance the step is h_i = rel_step * max(1, |logit_i|) and the
    discrepancy is measured with :func:`rel_norm_error`.
    """
    rng = np.random.default_rng(seed)
    worst = (-1.0, 0, 0)
    for n in sizes:
        g = make_grid(0.0, float(n - 1), 1.0)
        for k in range(n_instances):
            target, logits = random_instance(rng, g)
            if spec.family == FAMILY_REFERENCE:
                cfg = spec.reference_cfg()

                def loss_fn(z, _t=target, _g=g, _c=cfg):
                    return reference_loss(_t, z, _g, _c, policy).total

                analytic = reference_grad(target, logits, g, cfg, policy)
            else:

                def loss_fn(z, _t=target, _g=g):
                    return full_kl_loss(_t, z, _g, policy).total

                analytic = full_kl_grad(target, logits, g, policy)
            h = rel_step * np.maximum(1.0, np.abs(logits))
            numeric = fd_grad(loss_fn, logits, h)
            err = rel_norm_error(analytic, numeric)
            if err > worst[0]:
                worst = (err, n, k)
    return FidelityResult(spec.family, tuple(sizes), n_instances, worst[0], worst[1], worst[2])


# ---------------------------------------------------------------------------
# Invariance suite
# ---------------------------------------------------------------------------


def affine_invariance_errors(
    n_instances: int = 100,
    seed: int = 20241,
    a: float = 3.0,
    b: float = 7.0,
    lam: float = 1.0,
    policy: NumericPolicy = DEFAULT_POLICY,
) -> dict[str, float]:
    """Deviations under the grid transform y -> a*y + b (a > 0), pmfs fixed.

    Returns the worst relative deviation of the full-KL total (expected 0
    within 1e-9), the worst relative deviation of the reference l_exp from
    an exact a-fold scaling (expected fp-exact, ~1e-16), and the worst
    absolute change of l_ld and l_smooth (expected exactly 0.0 — neither
    touches the grid values).
    """
    if a <= 0:
        raise ValueError("affine scale must be positive")
    rng = np.random.default_rng(seed)
    cfg = LossSpec(FAMILY_REFERENCE, lam).reference_cfg()
    out = {"full_total_rel": 0.0, "ref_scale_rel": 0.0, "unchanged_abs": 0.0}
    for _ in range(n_instances):
        n = int(rng.integers(2, 40))
        g1 = make_grid(0.0, float(n - 1), 1.0)
        g2 = LabelGrid(a * g1.values + b, spacing=a * g1.spacing)
        target, logits = random_instance(rng, g1)

        f1 = full_kl_loss(target, logits, g1, policy)
        f2 = full_kl_loss(target, logits, g2, policy)
        denom = max(REL_ERROR_FLOOR, abs(f1.total))
        out["full_total_rel"] = max(out["full_total_rel"], abs(f2.total - f1.total) / denom)
        out["unchanged_abs"] = max(
            out["unchanged_abs"], abs(f2.l_ld - f1.l_ld), abs(f2.l_smooth - f1.l_smooth)
        )

        r1 = reference_loss(target, logits, g1, cfg, policy)
        r2 = reference_loss(target, logits, g2, cfg, policy)
        denom = max(REL_ERROR_FLOOR, abs(a * r1.l_exp))
        out["ref_scale_rel"] = max(out["ref_scale_rel"], abs(r2.l_exp - a * r1.l_exp) / denom)
        out["unchanged_abs"] = max(out["unchanged_abs"], abs(r2.l_ld - r1.l_ld))
    return out


def exact_zero_violations(policy: NumericPolicy = DEFAULT_POLICY) -> dict[str, float]:
    """Identities that must hold exactly (0.0, not approximately).

    kl_div(p, p) = 0 for pmfs with entries at or above eps_log (or exactly
    zero); smoothness(uniform) = 0; gaussian_kl(m, m) = 0; and the full-KL
    loss and gradient vanish at the global minimum (uniform target, constant
    logits).  Returns the absolute deviations, all of which must be 0.0.
    """
    g = make_grid(0.0, 100.0, 1.0)
    uniform = Pmf(np.full(101, 1.0 / 101.0))
    smooth_target = discretize_gaussian(50.0, 20.0, g)
    spiky = Pmf(np.array([1.0, 0.0]))
    m = Moments(40.0, 25.0)

    out = {
        "kl_self_smooth": abs(kl_div(smooth_target, smooth_target, policy)),
        "kl_self_uniform": abs(kl_div(uniform, uniform, policy)),
        "kl_self_onehot": abs(kl_div(spiky, spiky, policy)),
        "smoothness_uniform": abs(smoothness(uniform, policy)),
        "gaussian_kl_self": abs(gaussian_kl(m, m, policy)),
    }
    breakdown = full_kl_loss(uniform, np.zeros(101), g, policy)
    out["full_kl_at_minimum"] = max(
        abs(breakdown.l_ld), abs(breakdown.l_exp), abs(breakdown.l_smooth), abs(breakdown.total)
    )
    grad = full_kl_grad(uniform, np.zeros(101), g, policy)
    out["full_kl_grad_at_minimum"] = float(np.max(np.abs(grad)))
    return out


def component_minima(
    n_instances: int = 10_000,
    seed: int = 20242,
    lam: float = 1.0,
    policy: NumericPolicy = DEFAULT_POLICY,
) -> dict[str, float]:
    """Minimum observed value of every loss component on random instances.

    All minima must be >= 0: l_ld, l_exp and l_smooth are KL divergences
    (the full-KL family) and the reference l_exp is an absolute value.
    """
    rng = np.random.default_rng(seed)
    cfg = LossSpec(FAMILY_REFERENCE, lam).reference_cfg()
    mins = {"l_ld": np.inf, "full_l_exp": np.inf, "l_smooth": np.inf, "ref_l_exp": np.inf}
    for _ in range(n_instances):
        n = int(rng.integers(2, 32))
        g = make_grid(0.0, float(n - 1), 1.0)
        target, logits = random_instance(rng, g)
        f = full_kl_loss(target, logits, g, policy)
        r = reference_loss(target, logits, g, cfg, policy)
        mins["l_ld"] = min(mins["l_ld"], f.l_ld, r.l_ld)
        mins["full_l_exp"] = min(mins["full_l_exp"], f.l_exp)
        mins["l_smooth"] = min(mins["l_smooth"], f.l_smooth)
        mins["ref_l_exp"] = min(mins["ref_l_exp"], r.l_exp)
    return {k: float(v) for k, v in mins.items()}


# ---------------------------------------------------------------------------
# Composed verification suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    max_error: float
    detail: str = ""


def run_all_checks(
    seed: int = 0,
    n_grad_instances: int = 100,
    n_nonneg_instances: int = 10_000,
    policy: NumericPolicy = DEFAULT_POLICY,
) -> tuple[CheckResult, ...]:
    """Every oracle check, as a flat pass/fail list with max error values."""
    checks: list[CheckResult] = []

    sweep = gaussian_kl_sweep(policy=policy)
    checks.append(
        CheckResult(
            "gaussian_kl_sweep",
            sweep.max_abs_err <= 1e-4,
            sweep.max_abs_err,
            f"75 moment pairs, worst at sigma=({sweep.worst.sigma_t},{sweep.worst.sigma_p}), dmu={sweep.worst.dmu}",
        )
    )

    hard_t, hard_p = Moments(0.0, 100.0), Moments(10.0, 0.25)
    closed = gaussian_kl(hard_t, hard_p, policy)
    err_lo = abs(numeric_gaussian_kl(hard_t, hard_p, 10_000) - closed)
    err_hi = abs(numeric_gaussian_kl(hard_t, hard_p, 100_000) - closed)
    checks.append(
        CheckResult(
            "quadrature_convergence",
            err_hi <= max(err_lo, 1e-9),
            max(err_lo, err_hi),
            f"hardest pair: err(1e4)={err_lo:.3g}, err(1e5)={err_hi:.3g}",
        )
    )

    for spec in (LossSpec(FAMILY_FULL_KL), LossSpec(FAMILY_REFERENCE, 1.0)):
        fid = gradient_fidelity(spec, n_grad_instances, seed=seed + 100, policy=policy)
        checks.append(
            CheckResult(
                f"grad_fidelity_{spec.family}",
                fid.max_rel_error <= 1e-6,
                fid.max_rel_error,
                f"{fid.n_instances} instances x n in {fid.sizes}, worst n={fid.worst_size}",
            )
        )

    aff = affine_invariance_errors(seed=seed + 200, policy=policy)
    checks.append(
        CheckResult(
            "affine_invariance",
            aff["full_total_rel"] <= 1e-9 and aff["ref_scale_rel"] <= 1e-12 and aff["unchanged_abs"] == 0.0,
            max(aff.values()),
            "full total invariant; reference l_exp scales by a; l_ld/l_smooth untouched",
        )
    )

    zeros = exact_zero_violations(policy)
    checks.append(
        CheckResult(
            "exact_zeros",
            max(zeros.values()) == 0.0,
            max(zeros.values()),
            "kl_div(p,p), smoothness(uniform), gaussian_kl(m,m), full-KL global minimum",
        )
    )

    minima = component_minima(n_nonneg_instances, seed=seed + 300, policy=policy)
    checks.append(
        CheckResult(
            "nonnegativity",
            min(minima.values()) >= 0.0,
            max(0.0, -min(minima.values())),
            f"{n_nonneg_instances} random instances, every component",
        )
    )

    return tuple(checks)
