"""Loss components and analytic logit gradients for both loss families.

The reference family combines the distribution KL with a lambda-weighted L1
penalty on the predicted expectation.  The full-KL family replaces the L1
term with a Gaussian-moment KL and adds a shift-KL smoothness penalty, so
all three components are KL divergences in nats and combine by a plain
unweighted sum — no weighting hyperparameter to tune.

Predictions enter every loss as raw logits and are converted internally via
softmax, which guarantees strictly positive pmfs.  Gradients are with
respect to the logits and are composed analytically with the softmax
Jacobian; no autodiff framework is involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (
    DEFAULT_POLICY,
    LabelGrid,
    Moments,
    NumericPolicy,
    Pmf,
    pmf_moments,
    softmax_probs,
)

__all__ = [
    "FAMILY_REFERENCE",
    "FAMILY_FULL_KL",
    "FAMILIES",
    "LossBreakdown",
    "ReferenceLossConfig",
    "LossSpec",
    "kl_div",
    "l1_expectation",
    "gaussian_kl",
    "smoothness",
    "reference_loss",
    "reference_grad",
    "full_kl_loss",
    "full_kl_grad",
    "batch_loss",
    "batch_loss_and_grad",
]

FAMILY_REFERENCE = "reference"
FAMILY_FULL_KL = "full_kl"
FAMILIES = (FAMILY_REFERENCE, FAMILY_FULL_KL)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-component loss record for either family.

    ``l_ld`` and ``l_smooth`` are in nats.  ``l_exp`` is in nats for the
    full-KL family and in label units (the raw, unweighted L1) for the
    reference family.  ``total`` is ``l_ld + lam*l_exp`` for the reference
    family and ``l_ld + l_exp + l_smooth`` for the full-KL family.
    ``l_smooth`` is ``None`` for the reference family, which has no
    smoothness term.
    """

    family: str
    l_ld: float
    l_exp: float
    l_smooth: float | None
    total: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}")
        fields = [self.l_ld, self.l_exp, self.total]
        if self.family == FAMILY_FULL_KL:
            if self.l_smooth is None:
                raise ValueError("full-KL breakdown requires l_smooth")
            fields.append(self.l_smooth)
        elif self.l_smooth is not None:
            raise ValueError("reference breakdown has no smoothness term")
        if not all(np.isfinite(v) for v in fields):
            raise ValueError("loss components must be finite")


@dataclass(frozen=True)
class ReferenceLossConfig:
    """Weighting of the reference family's L1 expectation term.

    ``lam`` is the lambda of ``total = l_ld + lam*l_exp``.  It has no
    principled default — exposing it reproduces exactly the tuning burden
    the full-KL family removes — so it must be given explicitly.
    """

    lam: float

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam!r}")


@dataclass(frozen=True)
class LossSpec:
    """Loss-family selector carried through configs and the trainer.

    ``lam`` is required for the reference family and must be omitted for
    the full-KL family (which by construction has nothing to weight).
    """

    family: str
    lam: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}; expected one of {FAMILIES}")
        if self.family == FAMILY_REFERENCE:
            if self.lam is None:
                raise ValueError("reference family requires lambda")
            ReferenceLossConfig(self.lam)
        elif self.lam is not None:
            raise ValueError("full_kl family takes no lambda")

    def reference_cfg(self) -> ReferenceLossConfig:
        if self.family != FAMILY_REFERENCE:
            raise ValueError("not a reference-family spec")
        return ReferenceLossConfig(self.lam)


# ---------------------------------------------------------------------------
# Input coercion
# ---------------------------------------------------------------------------


def _as_probs(p) -> np.ndarray:
    """Probabilities of a Pmf, or validate an array-like as a pmf."""
    if isinstance(p, Pmf):
        return p.probs
    return Pmf(np.asarray(p, dtype=np.float64)).probs


def _as_logits(logits, n: int) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size != n:
        raise ValueError(f"logits must be a vector of length {n}, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return z


# ---------------------------------------------------------------------------
# Batched kernels (last-axis semantics; also accept plain 1-D vectors)
# ---------------------------------------------------------------------------


def _kl_div_vals(targets: np.ndarray, preds: np.ndarray, eps_log: float) -> np.ndarray:
    # Terms with target_i = 0 contribute exactly 0 (0 ln 0 := 0); only the
    # prediction is floored inside the log.
    qf = np.maximum(preds, eps_log)
    ratio = np.where(targets > 0.0, targets, qf) / qf
    return np.sum(targets * np.log(ratio), axis=-1)


def _kl_div_grad(targets: np.ndarray, preds: np.ndarray) -> np.ndarray:
    # Standard softmax-KL identity; exact wherever the eps_log floor is
    # inactive, and the conventional subgradient elsewhere.
    return preds - targets


def _gaussian_kl_vals(mu_t, var_t, mu_p, var_p, policy: NumericPolicy) -> np.ndarray:
    if np.any(var_t < policy.eps_var):
        raise ValueError(f"target variance below the {policy.eps_var!r} floor")
    vf = np.maximum(var_p, policy.eps_var)
    dmu = mu_p - mu_t
    return 0.5 * np.log(vf / var_t) + (var_t + dmu * dmu) / (2.0 * vf) - 0.5


def _gaussian_kl_dldp(mu_t, var_t, mu_p, var_p, values, policy: NumericPolicy) -> np.ndarray:
    # d l_exp / d pred_i with the mu-dependence of the predicted variance
    # included; the variance is treated as constant at the eps_var floor
    # (subgradient choice).
    vf = np.maximum(var_p, policy.eps_var)
    dmu = mu_p - mu_t
    ratio = (var_t + dmu * dmu) / (2.0 * vf)
    a = dmu / vf
    b = np.where(var_p > policy.eps_var, (0.5 - ratio) / vf, 0.0)
    dev = values - np.asarray(mu_p)[..., np.newaxis]
    return np.asarray(a)[..., np.newaxis] * values + np.asarray(b)[..., np.newaxis] * dev * dev


def _smoothness_vals(preds: np.ndarray, eps_log: float) -> np.ndarray:
    lp = np.log(np.maximum(preds, eps_log))
    d = preds[..., :-1] - preds[..., 1:]
    big_l = lp[..., :-1] - lp[..., 1:]
    return 0.5 * np.sum(d * big_l, axis=-1)


def _smoothness_dldp(preds: np.ndarray, eps_log: float) -> np.ndarray:
    pf = np.maximum(preds, eps_log)
    lp = np.log(pf)
    d = preds[..., :-1] - preds[..., 1:]
    big_l = lp[..., :-1] - lp[..., 1:]
    # d log(max(p, eps)) / dp is 1/p above the floor and 0 below it.
    inv = np.where(preds > eps_log, 1.0 / pf, 0.0)
    out = np.zeros_like(preds)
    out[..., :-1] += 0.5 * (big_l + d * inv[..., :-1])
    out[..., 1:] -= 0.5 * (big_l + d * inv[..., 1:])
    return out


def _softmax_chain(preds: np.ndarray, dldp: np.ndarray) -> np.ndarray:
    # Compose d loss / d pred with the softmax Jacobian diag(p) - p p^T.
    inner = np.sum(dldp * preds, axis=-1, keepdims=True)
    return preds * (dldp - inner)


# ---------------------------------------------------------------------------
# Public per-sample API
# ---------------------------------------------------------------------------


def kl_div(target, pred, policy: NumericPolicy = DEFAULT_POLICY) -> float:
    """Discrete KL divergence sum_i target_i ln(target_i / pred_i) in nats.

    Prediction entries are floored at ``policy.eps_log`` inside the log;
    terms with ``target_i == 0`` contribute exactly 0.  Non-negative up to
    an eps_log-induced error below 1e-9 (only when the target itself has
    positive entries under the floor).
    """
    t = _as_probs(target)
    q = _as_probs(pred)
    if t.shape != q.shape:
        raise ValueError(f"pmf lengths differ: {t.size} vs {q.size}")
    return float(_kl_div_vals(t, q, policy.eps_log))


def l1_expectation(target_mu: float, pred_mu: float) -> float:
    """Absolute difference of expectations |pred_mu - target_mu|, in label units."""
    if not (np.isfinite(target_mu) and np.isfinite(pred_mu)):
        raise ValueError("expectations must be finite")
    return abs(float(pred_mu) - float(target_mu))


def gaussian_kl(target_m: Moments, pred_m: Moments, policy: NumericPolicy = DEFAULT_POLICY) -> float:
    """Closed-form KL(N(mu, var) || N(mu_hat, var_hat)) in nats.

    ``ln(sigma_hat/sigma) + (var + (mu_hat-mu)^2) / (2 var_hat) - 1/2`` with
    the predicted variance floored at ``policy.eps_var`` in both the log and
    the denominator.  The target variance must already sit at or above the
    floor (the dataset sigma floor guarantees this); the result is then
    non-negative for all inputs and zero exactly when the moments coincide.
    """
    return float(
        _gaussian_kl_vals(
            np.float64(target_m.mu), np.float64(target_m.var),
            np.float64(pred_m.mu), np.float64(pred_m.var), policy,
        )
    )


def smoothness(pred, policy: NumericPolicy = DEFAULT_POLICY) -> float:
    """Symmetrized shift-KL smoothness penalty of a pmf, in nats.

    ``(1/2) sum_{i=1}^{n-1} (p_i - p_{i+1}) ln(p_i / p_{i+1})`` over the
    n-1 adjacent index pairs, entries floored at ``policy.eps_log`` inside
    the logs.  Every summand is non-negative because the difference and the
    log-ratio share sign; the total is 0 exactly for a uniform pmf.
    """
    p = _as_probs(pred)
    if p.size < 2:
        raise ValueError("smoothness needs a pmf of length >= 2")
    return float(_smoothness_vals(p, policy.eps_log))


def reference_loss(
    target,
    logits,
    g: LabelGrid,
    cfg: ReferenceLossConfig,
    policy: NumericPolicy = DEFAULT_POLICY,
) -> LossBreakdown:
    """Reference-family loss: l_ld + lam * |mu_hat - mu|.

    ``l_exp`` in the returned breakdown is the raw L1 term in label units;
    lambda enters only the total.
    """
    t, z = _check_sample(target, logits, g)
    preds = softmax_probs(z)
    l_ld = _kl_div_vals(t, preds, policy.eps_log)
    mu_t, _ = pmf_moments(t, g.values)
    mu_p, _ = pmf_moments(preds, g.values)
    l_exp = l1_expectation(float(mu_t), float(mu_p))
    total = float(l_ld) + cfg.lam * l_exp
    return LossBreakdown(FAMILY_REFERENCE, float(l_ld), l_exp, None, total)


def reference_grad(
    target,
    logits,
    g: LabelGrid,
    cfg: ReferenceLossConfig,
    policy: NumericPolicy = DEFAULT_POLICY,
) -> np.ndarray:
    """Analytic gradient of the reference loss with respect to the logits.

    ``(pred - target) + lam * sign(mu_hat - mu) * dmu_hat/dlogits`` with the
    L1 subgradient at zero set to 0.
    """
    t, z = _check_sample(target, logits, g)
    return _reference_grad_vals(t, z, g.values, cfg.lam, policy)


def full_kl_loss(
    target,
    logits,
    g: LabelGrid,
    policy: NumericPolicy = DEFAULT_POLICY,
) -> LossBreakdown:
    """Full-KL loss: distribution KL + Gaussian-moment KL + shift-KL smoothness.

    The three components are summed unweighted.  Note the total is not
    generally zero at pred = target: the smoothness term penalizes the
    target's own roughness.
    """
    t, z = _check_sample(target, logits, g)
    l_ld, l_exp, l_smooth, total = _full_kl_vals(t, z, g.values, policy)
    return LossBreakdown(
        FAMILY_FULL_KL, float(l_ld), float(l_exp), float(l_smooth), float(total)
    )


def full_kl_grad(
    target,
    logits,
    g: LabelGrid,
    policy: NumericPolicy = DEFAULT_POLICY,
) -> np.ndarray:
    """Analytic gradient of the full-KL total with respect to the logits.

    The l_ld part contributes ``pred - target``; the l_exp part flows
    through both predicted moments (``dmu/dp_i = y_i`` and
    ``dvar/dp_i = (y_i - mu_hat)^2``, mu-dependence included); the
    smoothness part flows through adjacent prediction pairs; everything is
    composed with the softmax Jacobian.  At the eps_var floor the predicted
    variance is treated as constant (subgradient choice).
    """
    t, z = _check_sample(target, logits, g)
    return _full_kl_grad_vals(t, z, g.values, policy)


def _check_sample(target, logits, g: LabelGrid) -> tuple[np.ndarray, np.ndarray]:
    t = _as_probs(target)
    if t.size != len(g):
        raise ValueError(f"target pmf has {t.size} bins but grid has {len(g)}")
    z = _as_logits(logits, len(g))
    return t, z


# ---------------------------------------------------------------------------
# Shared value/gradient kernels (used by the per-sample API and the trainer)
# ---------------------------------------------------------------------------


def _full_kl_vals(targets, logits, values, policy):
    preds = softmax_probs(logits)
    l_ld = _kl_div_vals(targets, preds, policy.eps_log)
    mu_t, var_t = pmf_moments(targets, values)
    mu_p, var_p = pmf_moments(preds, values)
    l_exp = _gaussian_kl_vals(mu_t, var_t, mu_p, var_p, policy)
    l_smooth = _smoothness_vals(preds, policy.eps_log)
    return l_ld, l_exp, l_smooth, l_ld + l_exp + l_smooth


def _full_kl_grad_vals(targets, logits, values, policy):
    preds = softmax_probs(logits)
    mu_t, var_t = pmf_moments(targets, values)
    mu_p, var_p = pmf_moments(preds, values)
    dldp = _gaussian_kl_dldp(mu_t, var_t, mu_p, var_p, values, policy)
    dldp = dldp + _smoothness_dldp(preds, policy.eps_log)
    return _kl_div_grad(targets, preds) + _softmax_chain(preds, dldp)


def _reference_grad_vals(targets, logits, values, lam, policy):
    preds = softmax_probs(logits)
    mu_t, _ = pmf_moments(targets, values)
    mu_p, _ = pmf_moments(preds, values)
    sign = np.sign(mu_p - mu_t)
    dmu_dz = preds * (values - np.asarray(mu_p)[..., np.newaxis])
    return _kl_div_grad(targets, preds) + (lam * np.asarray(sign))[..., np.newaxis] * dmu_dz


def batch_loss(
    targets: np.ndarray,
    logits: np.ndarray,
    g: LabelGrid,
    spec: LossSpec,
    policy: NumericPolicy = DEFAULT_POLICY,
) -> dict[str, np.ndarray]:
    """Vectorized per-sample loss components without the gradient.

    Same contract and arithmetic as :func:`batch_loss_and_grad`, for
    evaluation passes where the gradient would be wasted work.
    """
    targets = np.asarray(targets, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if targets.shape != logits.shape or targets.shape[-1] != len(g):
        raise ValueError(
            f"targets {targets.shape} and logits {logits.shape} must share shape (..., {len(g)})"
        )
    values = g.values
    preds = softmax_probs(logits)
    l_ld = _kl_div_vals(targets, preds, policy.eps_log)
    mu_t, var_t = pmf_moments(targets, values)
    mu_p, var_p = pmf_moments(preds, values)
    if spec.family == FAMILY_FULL_KL:
        l_exp = _gaussian_kl_vals(mu_t, var_t, mu_p, var_p, policy)
        l_smooth = _smoothness_vals(preds, policy.eps_log)
        return {
            "l_ld": l_ld,
            "l_exp": l_exp,
            "l_smooth": l_smooth,
            "total": l_ld + l_exp + l_smooth,
            "pred_mu": mu_p,
        }
    l_exp = np.abs(mu_p - mu_t)
    return {
        "l_ld": l_ld,
        "l_exp": l_exp,
        "total": l_ld + spec.lam * l_exp,
        "pred_mu": mu_p,
    }


def batch_loss_and_grad(
    targets: np.ndarray,
    logits: np.ndarray,
    g: LabelGrid,
    spec: LossSpec,
    policy: NumericPolicy = DEFAULT_POLICY,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Vectorized per-sample components and logit gradients for a batch.

    ``targets`` and ``logits`` share shape (..., n) with n = len(g); rows of
    ``targets`` must already be valid pmfs (the dataset materialization
    guarantees this — rows are not re-validated here).  Returns a dict of
    per-sample arrays keyed ``l_ld``, ``l_exp``, ``total``, ``pred_mu``
    (plus ``l_smooth`` for the full-KL family) and the gradient array of the
    same shape as ``logits``.  Row i of the gradient is d total_i / d
    logits_i; identical arithmetic to the per-sample API, so results agree
    bit for bit.
    """
    targets = np.asarray(targets, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if targets.shape != logits.shape or targets.shape[-1] != len(g):
        raise ValueError(
            f"targets {targets.shape} and logits {logits.shape} must share shape (..., {len(g)})"
        )
    values = g.values
    if spec.family == FAMILY_FULL_KL:
        preds = softmax_probs(logits)
        l_ld = _kl_div_vals(targets, preds, policy.eps_log)
        mu_t, var_t = pmf_moments(targets, values)
        mu_p, var_p = pmf_moments(preds, values)
        l_exp = _gaussian_kl_vals(mu_t, var_t, mu_p, var_p, policy)
        l_smooth = _smoothness_vals(preds, policy.eps_log)
        dldp = _gaussian_kl_dldp(mu_t, var_t, mu_p, var_p, values, policy)
        dldp = dldp + _smoothness_dldp(preds, policy.eps_log)
        grad = _kl_div_grad(targets, preds) + _softmax_chain(preds, dldp)
        comps = {
            "l_ld": l_ld,
            "l_exp": l_exp,
            "l_smooth": l_smooth,
            "total": l_ld + l_exp + l_smooth,
            "pred_mu": mu_p,
        }
        return comps, grad
    lam = spec.lam
    preds = softmax_probs(logits)
    l_ld = _kl_div_vals(targets, preds, policy.eps_log)
    mu_t, _ = pmf_moments(targets, values)
    mu_p, _ = pmf_moments(preds, values)
    l_exp = np.abs(mu_p - mu_t)
    sign = np.sign(mu_p - mu_t)
    dmu_dz = preds * (values - np.asarray(mu_p)[..., np.newaxis])
    grad = _kl_div_grad(targets, preds) + (lam * np.asarray(sign))[..., np.newaxis] * dmu_dz
    comps = {
        "l_ld": l_ld,
        "l_exp": l_exp,
        "total": l_ld + lam * l_exp,
        "pred_mu": mu_p,
    }
    return comps, grad
