"""Loss families: values, analytic gradients, invariances, edge behavior.

Expected constants were computed independently at 30 significant digits and
frozen; agreement is asserted at 1e-13 relative (double rounding budget).
"""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fullkl.grid import LabelGrid, Moments, NumericPolicy, Pmf, make_grid, moments, softmax
from fullkl.losses import (
    FAMILY_FULL_KL,
    FAMILY_REFERENCE,
    LossBreakdown,
    LossSpec,
    ReferenceLossConfig,
    batch_loss,
    batch_loss_and_grad,
    full_kl_grad,
    full_kl_loss,
    gaussian_kl,
    kl_div,
    l1_expectation,
    reference_grad,
    reference_loss,
    smoothness,
)
from fullkl.verify import check_grad, fd_grad, rel_norm_error

APPROX = dict(rel=1e-13, abs=0.0)

TWO_BIN = make_grid(0.0, 1.0, 1.0)
HALF_HALF = Pmf(np.array([0.5, 0.5]))
LOGITS_1_3 = np.array([0.0, math.log(3.0)])  # softmax -> [0.25, 0.75]


def random_pmf(rng, n):
    return Pmf(rng.dirichlet(np.ones(n)))


# ---------------------------------------------------------------------------
# kl_div
# ---------------------------------------------------------------------------

class TestKlDiv:
    def test_frozen_value(self):
        assert kl_div(HALF_HALF, Pmf(np.array([0.25, 0.75]))) == pytest.approx(
            0.14384103622589045, **APPROX
        )

    def test_one_hot_target(self):
        # the zero-probability target bin contributes exactly 0
        assert kl_div(Pmf(np.array([1.0, 0.0])), HALF_HALF) == math.log(2.0)

    def test_self_divergence_is_exactly_zero(self):
        rng = np.random.default_rng(11)
        for n in (2, 5, 101):
            p = random_pmf(rng, n)
            assert kl_div(p, p) == 0.0

    def test_asymmetry(self):
        p = Pmf(np.array([0.9, 0.1]))
        q = Pmf(np.array([0.5, 0.5]))
        assert kl_div(p, q) != kl_div(q, p)

    def test_prediction_floor_keeps_value_finite(self):
        # prediction has an exact zero where the target has mass
        v = kl_div(Pmf(np.array([0.5, 0.5])), Pmf(np.array([1.0, 0.0])))
        assert math.isfinite(v)
        # floored at eps_log=1e-12: 0.5*ln(0.5/1) + 0.5*ln(0.5/1e-12)
        assert v == pytest.approx(0.5 * math.log(0.5) + 0.5 * math.log(0.5e12), **APPROX)

    def test_policy_floor_is_respected(self):
        loose = NumericPolicy(eps_log=1e-6)
        v_default = kl_div(HALF_HALF, Pmf(np.array([1.0, 0.0])))
        v_loose = kl_div(HALF_HALF, Pmf(np.array([1.0, 0.0])), loose)
        assert v_loose < v_default

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            kl_div(HALF_HALF, Pmf(np.array([0.2, 0.3, 0.5])))

    def test_array_inputs_validated(self):
        with pytest.raises(ValueError):
            kl_div(np.array([0.7, 0.7]), np.array([0.5, 0.5]))

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_nonnegative_up_to_documented_slack(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 40))
        t, p = random_pmf(rng, n), random_pmf(rng, n)
        # the prediction-only floor can shave at most ~n * eps_log/e below 0
        assert kl_div(t, p) >= -1e-9

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_zero_iff_equal(self, seed):
        rng = np.random.default_rng(seed)
        t = random_pmf(rng, 7)
        p = random_pmf(rng, 7)
        if not np.array_equal(t.probs, p.probs):
            assert kl_div(t, p) > 0.0


# ---------------------------------------------------------------------------
# l1_expectation / gaussian_kl
# ---------------------------------------------------------------------------

class TestL1Expectation:
    def test_absolute_difference(self):
        assert l1_expectation(40.0, 43.5) == 3.5
        assert l1_expectation(43.5, 40.0) == 3.5
        assert l1_expectation(40.0, 40.0) == 0.0


class TestGaussianKl:
    def test_spot_values(self):
        assert gaussian_kl(Moments(0.0, 1.0), Moments(1.0, 1.0)) == 0.5
        assert gaussian_kl(Moments(0.0, 1.0), Moments(0.0, 4.0)) == pytest.approx(
            0.3181471805599453, **APPROX
        )

    def test_self_is_exactly_zero(self):
        for m in (Moments(40.0, 25.0), Moments(-3.0, 1e-8), Moments(0.0, 1e6)):
            assert gaussian_kl(m, m) == 0.0

    def test_frozen_worked_value(self):
        # moments of [0.5, 0.5] and [0.25, 0.75] on the {0, 1} grid
        t = moments(HALF_HALF, TWO_BIN)
        p = moments(Pmf(np.array([0.25, 0.75])), TWO_BIN)
        assert gaussian_kl(t, p) == pytest.approx(0.18949229710744286, **APPROX)

    def test_asymmetric_in_arguments(self):
        a, b = Moments(0.0, 1.0), Moments(0.0, 4.0)
        assert gaussian_kl(a, b) != gaussian_kl(b, a)

    def test_target_variance_below_floor_rejected(self):
        with pytest.raises(ValueError, match="variance"):
            gaussian_kl(Moments(0.0, 1e-9), Moments(0.0, 1.0))

    def test_pred_variance_floored_not_rejected(self):
        v = gaussian_kl(Moments(0.0, 1.0), Moments(0.0, 0.0))
        assert math.isfinite(v) and v > 0.0
        # flooring makes every prediction variance below eps_var equivalent
        assert v == gaussian_kl(Moments(0.0, 1.0), Moments(0.0, 1e-12))

    def test_scale_invariance(self):
        # KL between Gaussians is invariant under y -> a*y + b
        a, b = 3.0, 7.0
        t, p = Moments(10.0, 4.0), Moments(12.0, 9.0)
        t2 = Moments(a * t.mu + b, a * a * t.var)
        p2 = Moments(a * p.mu + b, a * a * p.var)
        assert gaussian_kl(t2, p2) == pytest.approx(gaussian_kl(t, p), rel=1e-12)

    @given(
        mu_t=st.floats(-50.0, 50.0),
        mu_p=st.floats(-50.0, 50.0),
        var_t=st.floats(1e-8, 1e4),
        var_p=st.floats(0.0, 1e4),
    )
    def test_nonnegative(self, mu_t, mu_p, var_t, var_p):
        assert gaussian_kl(Moments(mu_t, var_t), Moments(mu_p, var_p)) >= 0.0


# ---------------------------------------------------------------------------
# smoothness
# ---------------------------------------------------------------------------

class TestSmoothness:
    def test_frozen_values(self):
        assert smoothness(Pmf(np.array([0.8, 0.2]))) == pytest.approx(
            0.4158883083359672, **APPROX
        )
        assert smoothness(Pmf(np.array([0.25, 0.75]))) == pytest.approx(
            0.27465307216702745, **APPROX
        )

    def test_uniform_is_exactly_zero(self):
        for n in (2, 5, 101):
            assert smoothness(Pmf(np.full(n, 1.0 / n))) == 0.0

    def test_symmetric_under_reversal(self):
        p = Pmf(np.array([0.1, 0.2, 0.3, 0.4]))
        q = Pmf(np.array([0.4, 0.3, 0.2, 0.1]))
        assert smoothness(p) == pytest.approx(smoothness(q), rel=1e-15)

    def test_spikier_is_larger(self):
        mild = Pmf(np.array([0.3, 0.4, 0.3]))
        spiky = Pmf(np.array([0.05, 0.9, 0.05]))
        assert smoothness(spiky) > smoothness(mild)

    def test_exact_zero_probabilities_stay_finite(self):
        v = smoothness(Pmf(np.array([1.0, 0.0, 0.0])))
        assert math.isfinite(v) and v > 0.0

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        assert smoothness(random_pmf(rng, int(rng.integers(2, 40)))) >= 0.0


# ---------------------------------------------------------------------------
# composite losses: frozen worked example
# ---------------------------------------------------------------------------

class TestWorkedExample:
    def test_full_kl_components(self):
        b = full_kl_loss(HALF_HALF, LOGITS_1_3, TWO_BIN)
        assert b.family == FAMILY_FULL_KL
        assert b.l_ld == pytest.approx(0.14384103622589045, **APPROX)
        assert b.l_exp == pytest.approx(0.18949229710744286, **APPROX)
        assert b.l_smooth == pytest.approx(0.27465307216702745, **APPROX)
        assert b.total == pytest.approx(0.6079864055003608, **APPROX)
        assert b.total == pytest.approx(b.l_ld + b.l_exp + b.l_smooth, rel=1e-15)

    def test_reference_components(self):
        b = reference_loss(HALF_HALF, LOGITS_1_3, TWO_BIN, ReferenceLossConfig(1.0))
        assert b.family == FAMILY_REFERENCE
        assert b.l_ld == pytest.approx(0.14384103622589045, **APPROX)
        assert b.l_exp == 0.25  # raw L1, unweighted
        assert b.l_smooth is None
        assert b.total == pytest.approx(0.39384103622589045, **APPROX)

    def test_lambda_weighs_total_not_l_exp(self):
        b2 = reference_loss(HALF_HALF, LOGITS_1_3, TWO_BIN, ReferenceLossConfig(2.0))
        assert b2.l_exp == 0.25
        assert b2.total == pytest.approx(b2.l_ld + 2.0 * 0.25, rel=1e-15)

    def test_lambda_zero_reduces_to_kl(self):
        b = reference_loss(HALF_HALF, LOGITS_1_3, TWO_BIN, ReferenceLossConfig(0.0))
        assert b.total == b.l_ld


# ---------------------------------------------------------------------------
# exact zeros and the global minimum
# ---------------------------------------------------------------------------

class TestExactZeros:
    def test_full_kl_at_global_minimum(self):
        g = make_grid(0.0, 100.0, 1.0)
        uniform = Pmf(np.full(101, 1.0 / 101.0))
        b = full_kl_loss(uniform, np.zeros(101), g)
        assert (b.l_ld, b.l_exp, b.l_smooth, b.total) == (0.0, 0.0, 0.0, 0.0)

    def test_full_kl_grad_at_global_minimum(self):
        g = make_grid(0.0, 100.0, 1.0)
        uniform = Pmf(np.full(101, 1.0 / 101.0))
        grad = full_kl_grad(uniform, np.zeros(101), g)
        assert np.all(grad == 0.0)

    def test_reference_grad_at_matched_distribution(self):
        g = make_grid(0.0, 4.0, 1.0)
        uniform = Pmf(np.full(5, 0.2))
        grad = reference_grad(uniform, np.zeros(5), g, ReferenceLossConfig(1.0))
        assert np.all(grad == 0.0)


# ---------------------------------------------------------------------------
# analytic gradients vs finite differences
# ---------------------------------------------------------------------------

class TestGradients:
    @pytest.mark.parametrize("n", [2, 5, 101])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_full_kl_grad_matches_fd(self, n, seed):
        rng = np.random.default_rng(seed)
        g = make_grid(0.0, float(n - 1), 1.0)
        target = random_pmf(rng, n)
        logits = rng.normal(0.0, 2.0, n)
        analytic = full_kl_grad(target, logits, g)
        numeric = fd_grad(
            lambda x: full_kl_loss(target, x, g).total,
            logits,
            1e-5 * np.maximum(1.0, np.abs(logits)),
        )
        assert rel_norm_error(analytic, numeric) <= 1e-6

    @pytest.mark.parametrize("n", [2, 5, 101])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_reference_grad_matches_fd(self, n, seed):
        rng = np.random.default_rng(seed)
        g = make_grid(0.0, float(n - 1), 1.0)
        cfg = ReferenceLossConfig(1.0)
        target = random_pmf(rng, n)
        logits = rng.normal(0.0, 2.0, n)
        analytic = reference_grad(target, logits, g, cfg)
        numeric = fd_grad(
            lambda x: reference_loss(target, x, g, cfg).total,
            logits,
            1e-5 * np.maximum(1.0, np.abs(logits)),
        )
        assert rel_norm_error(analytic, numeric) <= 1e-6

    def test_per_coordinate_check_on_fixed_instance(self):
        # away from softmax-gradient zero crossings even the per-coordinate
        # metric is tight
        g = make_grid(0.0, 4.0, 1.0)
        target = Pmf(np.array([0.1, 0.2, 0.4, 0.2, 0.1]))
        logits = np.array([0.5, -0.25, 1.0, 0.75, -1.5])
        analytic = full_kl_grad(target, logits, g)
        numeric = fd_grad(lambda x: full_kl_loss(target, x, g).total, logits, 1e-6)
        report = check_grad(analytic, numeric, tol=1e-6)
        assert report.passed, report

    def test_grad_shift_direction(self):
        # prediction mean above target mean: l_exp pushes probability mass
        # toward lower bins (positive gradient on high-bin logits)
        g = make_grid(0.0, 10.0, 1.0)
        target = Pmf(np.exp(-0.5 * (g.values - 3.0) ** 2) / np.exp(-0.5 * (g.values - 3.0) ** 2).sum())
        logits = -0.1 * (g.values - 8.0) ** 2  # prediction centered near 8
        grad = full_kl_grad(target, logits, g)
        assert grad[-1] > 0.0 and grad[0] < 0.0

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_gradient_property_random_instances(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 24))
        g = make_grid(0.0, float(n - 1), 1.0)
        target = random_pmf(rng, n)
        logits = rng.normal(0.0, 2.0, n)
        h = 1e-5 * np.maximum(1.0, np.abs(logits))
        full_a = full_kl_grad(target, logits, g)
        full_n = fd_grad(lambda x: full_kl_loss(target, x, g).total, logits, h)
        assert rel_norm_error(full_a, full_n) <= 1e-6


# ---------------------------------------------------------------------------
# invariances
# ---------------------------------------------------------------------------

class TestAffineInvariance:
    A, B = 3.0, 7.0

    def scaled(self, g):
        return LabelGrid(self.A * g.values + self.B, spacing=self.A * g.spacing)

    def test_full_kl_total_invariant(self):
        rng = np.random.default_rng(4)
        g = make_grid(0.0, 30.0, 1.0)
        target = random_pmf(rng, 31)
        logits = rng.normal(0.0, 2.0, 31)
        b1 = full_kl_loss(target, logits, g)
        b2 = full_kl_loss(target, logits, self.scaled(g))
        assert b2.total == pytest.approx(b1.total, rel=1e-9)
        # the grid-free components do not move at all
        assert b2.l_ld == b1.l_ld
        assert b2.l_smooth == b1.l_smooth

    def test_reference_l_exp_scales_by_a(self):
        rng = np.random.default_rng(5)
        g = make_grid(0.0, 30.0, 1.0)
        cfg = ReferenceLossConfig(1.0)
        target = random_pmf(rng, 31)
        logits = rng.normal(0.0, 2.0, 31)
        r1 = reference_loss(target, logits, g, cfg)
        r2 = reference_loss(target, logits, self.scaled(g), cfg)
        assert r2.l_exp == pytest.approx(self.A * r1.l_exp, rel=1e-12)
        assert r2.l_ld == r1.l_ld


# ---------------------------------------------------------------------------
# config dataclasses
# ---------------------------------------------------------------------------

class TestLossBreakdownValidation:
    def test_reference_must_omit_l_smooth(self):
        with pytest.raises(ValueError):
            LossBreakdown(FAMILY_REFERENCE, 1.0, 1.0, 0.5, 2.0)

    def test_full_kl_must_carry_l_smooth(self):
        with pytest.raises(ValueError):
            LossBreakdown(FAMILY_FULL_KL, 1.0, 1.0, None, 2.0)

    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError):
            LossBreakdown("other", 1.0, 1.0, None, 2.0)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            LossBreakdown(FAMILY_REFERENCE, math.nan, 1.0, None, 2.0)


class TestLossSpec:
    def test_reference_requires_lambda(self):
        with pytest.raises(ValueError, match="lambda"):
            LossSpec(FAMILY_REFERENCE)

    def test_full_kl_forbids_lambda(self):
        with pytest.raises(ValueError, match="lambda"):
            LossSpec(FAMILY_FULL_KL, 1.0)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            LossSpec(FAMILY_REFERENCE, -0.5)

    def test_reference_cfg(self):
        assert LossSpec(FAMILY_REFERENCE, 2.0).reference_cfg().lam == 2.0
        with pytest.raises(ValueError):
            LossSpec(FAMILY_FULL_KL).reference_cfg()

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            LossSpec("huber")


# ---------------------------------------------------------------------------
# batch kernels agree with the per-sample API bit for bit
# ---------------------------------------------------------------------------

class TestBatchEquivalence:
    def setup_method(self):
        rng = np.random.default_rng(17)
        self.n = 11
        self.g = make_grid(0.0, 10.0, 1.0)
        self.targets = rng.dirichlet(np.ones(self.n), size=7)
        self.logits = rng.normal(0.0, 2.0, (7, self.n))

    def test_full_kl_batch_bitwise(self):
        spec = LossSpec(FAMILY_FULL_KL)
        comps, grads = batch_loss_and_grad(self.targets, self.logits, self.g, spec)
        vals = batch_loss(self.targets, self.logits, self.g, spec)
        for i in range(7):
            b = full_kl_loss(Pmf(self.targets[i]), self.logits[i], self.g)
            assert comps["l_ld"][i] == b.l_ld
            assert comps["l_exp"][i] == b.l_exp
            assert comps["l_smooth"][i] == b.l_smooth
            assert comps["total"][i] == b.total
            np.testing.assert_array_equal(
                grads[i], full_kl_grad(Pmf(self.targets[i]), self.logits[i], self.g)
            )
        for key in comps:
            np.testing.assert_array_equal(comps[key], vals[key])

    def test_reference_batch_bitwise(self):
        spec = LossSpec(FAMILY_REFERENCE, 1.5)
        cfg = spec.reference_cfg()
        comps, grads = batch_loss_and_grad(self.targets, self.logits, self.g, spec)
        for i in range(7):
            b = reference_loss(Pmf(self.targets[i]), self.logits[i], self.g, cfg)
            assert comps["l_ld"][i] == b.l_ld
            assert comps["l_exp"][i] == b.l_exp
            assert comps["total"][i] == b.total
            np.testing.assert_array_equal(
                grads[i], reference_grad(Pmf(self.targets[i]), self.logits[i], self.g, cfg)
            )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            batch_loss(self.targets, self.logits[:, :5], self.g, LossSpec(FAMILY_FULL_KL))


# ---------------------------------------------------------------------------
# input validation on the per-sample API
# ---------------------------------------------------------------------------

class TestSampleValidation:
    def test_logit_length_must_match_grid(self):
        with pytest.raises(ValueError):
            full_kl_loss(HALF_HALF, np.zeros(3), TWO_BIN)

    def test_target_length_must_match_grid(self):
        with pytest.raises(ValueError):
            full_kl_loss(Pmf(np.array([0.2, 0.3, 0.5])), np.zeros(2), TWO_BIN)

    def test_non_finite_logits_rejected(self):
        with pytest.raises(ValueError):
            full_kl_loss(HALF_HALF, np.array([np.nan, 0.0]), TWO_BIN)

    def test_invalid_target_array_rejected(self):
        with pytest.raises(ValueError):
            reference_loss(np.array([0.7, 0.7]), np.zeros(2), TWO_BIN, ReferenceLossConfig(1.0))
