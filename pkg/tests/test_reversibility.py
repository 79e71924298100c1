import math

import numpy as np
import pytest

from revmap import maps, reversibility as rev
from revmap.errors import EstimationError, InputError, IntegrationError

from fields import AffineStateField, CubicBlowupField, LinearField, QuadraticGainField


def scn_model(seed=0, state_dim=3):
    return maps.build_model(
        "scn",
        state_dim=state_dim,
        space=maps.ActionSpace(n=2),
        seed=seed,
        hidden=8,
        feature_width=6,
    )


class TestRollout:
    def test_constant_field_hand_euler(self):
        field = LinearField(np.eye(2))
        traj = rev.rollout(field, [0.0, 0.0], [[1.0, 0.0], [1.0, 0.0]], rev.EulerConfig(0.5, 2))
        np.testing.assert_array_equal(
            traj.states, [[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]]
        )

    def test_zero_actions_on_odd_decoder_hold_state(self):
        model = scn_model(seed=1)
        x0 = np.array([0.2, -0.4, 0.9])
        traj = rev.rollout(model.decoder, x0, np.zeros((5, 2)), rev.EulerConfig(0.1, 5))
        assert np.all(traj.states == x0)

    def test_empty_rollout(self):
        field = LinearField(np.eye(2))
        traj = rev.rollout(field, [1.0, 2.0], [], rev.EulerConfig(0.1, 0))
        assert traj.states.shape == (1, 2)

    def test_action_count_mismatch(self):
        field = LinearField(np.eye(2))
        with pytest.raises(InputError):
            rev.rollout(field, [0.0, 0.0], np.zeros((3, 2)), rev.EulerConfig(0.1, 2))

    def test_nonfinite_state_reports_step(self):
        field = CubicBlowupField(1)
        with pytest.raises(IntegrationError, match="step"):
            rev.rollout(field, [3.0], np.zeros((40, 1)), rev.EulerConfig(1.0, 40))

    def test_timestamps(self):
        field = LinearField(np.eye(2))
        traj = rev.rollout(field, [0.0, 0.0], np.zeros((3, 2)), rev.EulerConfig(0.25, 3))
        np.testing.assert_allclose(traj.times, [0.0, 0.25, 0.5, 0.75])


class TestMirrorActions:
    def test_negate_and_reverse(self):
        out = rev.mirror_actions([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(out, [[0.0, -1.0], [-1.0, 0.0]])

    def test_empty(self):
        assert rev.mirror_actions(np.zeros((0, 2))).shape == (0, 2)

    def test_involution(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((17, 3))
        np.testing.assert_array_equal(rev.mirror_actions(rev.mirror_actions(a)), a)

    def test_preserves_norms(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((9, 2))
        np.testing.assert_array_equal(
            np.sort(np.linalg.norm(rev.mirror_actions(a), axis=1)),
            np.sort(np.linalg.norm(a, axis=1)),
        )


class TestReversalError:
    def test_state_independent_field_cancels(self):
        rng = np.random.default_rng(4)
        field = LinearField(rng.standard_normal((3, 2)))
        for T, nu in [(5, 0.5), (100, 0.01), (10_000, 1e-3)]:
            actions = rng.standard_normal((T, 2))
            actions /= np.linalg.norm(actions, axis=1, keepdims=True)
            err, traj = rev.reversal_error(field, np.zeros(3), actions, rev.EulerConfig(nu, T))
            assert err <= 1e-12
            assert traj.states.shape == (2 * T + 1, 3)

    def test_zero_actions_zero_error(self):
        model = scn_model(seed=5)
        err, _ = rev.reversal_error(
            model.decoder, np.ones(3), np.zeros((20, 2)), rev.EulerConfig(0.01, 20)
        )
        assert err == 0.0

    def test_scalar_quadratic_field_against_hand_recurrence(self):
        # f(x, a) = a (1 + x^2), nu = 0.1, T = 5, a = 1 held fixed
        field = QuadraticGainField(np.array([[1.0]]))
        nu, T = 0.1, 5
        actions = np.ones((T, 1))
        err, traj = rev.reversal_error(field, np.zeros(1), actions, rev.EulerConfig(nu, T))

        # independent oracle: scalar recurrence forward then mirrored
        x = 0.0
        states = [x]
        for _ in range(T):
            x = x + nu * (1.0 + x * x)
            states.append(x)
        for _ in range(T):
            x = x + nu * (-1.0) * (1.0 + x * x)
            states.append(x)
        np.testing.assert_allclose(traj.states[:, 0], states, rtol=1e-12)
        oracle_err = abs(states[-1] - states[0])
        assert err == pytest.approx(oracle_err, rel=1e-12)
        assert err > 0.0

        # the tight bound with M, L taken over the visited interval holds
        hull = (min(states), max(states))
        M = 1.0 + max(h * h for h in hull)
        L = 2.0 * max(abs(h) for h in hull)
        tight, expo = rev.bound_theorem2(nu, M, L, T)
        assert err <= tight <= expo


class TestBounds:
    def test_zero_steps(self):
        assert rev.bound_theorem2(0.001, 1.0, 1.0, 0) == (0.0, 0.0)

    def test_exponential_hand_value(self):
        tight, expo = rev.bound_theorem2(0.001, 1.0, 1.0, 1000)
        assert expo == pytest.approx(0.001 * (math.e - 1.0), rel=1e-12)
        assert expo == pytest.approx(1.718282e-3, rel=1e-6)

    def test_tight_below_exponential_randomized(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            nu = 10.0 ** rng.uniform(-4, -1)
            M = rng.uniform(0.0, 5.0)
            L = rng.uniform(1e-3, 5.0)
            T = int(rng.integers(1, 2000))
            tight, expo = rev.bound_theorem2(nu, M, L, T)
            assert tight <= expo * (1 + 1e-12)

    def test_degenerate_lipschitz_zero(self):
        assert rev.bound_theorem2(0.01, 3.0, 0.0, 500) == (0.0, 0.0)

    def test_corollary_reduces_to_theorem2(self):
        _, expo = rev.bound_theorem2(0.001, 1.0, 1.0, 1000)
        assert rev.bound_corollary(0.001, 1.0, 1.0, 0.0, 1000) == pytest.approx(expo, rel=1e-15)

    def test_corollary_hand_value(self):
        val = rev.bound_corollary(0.001, 1.0, 1.0, 0.01, 1000)
        assert val == pytest.approx(0.011 * (math.e - 1.0), rel=1e-12)
        assert val == pytest.approx(1.890110e-2, rel=1e-6)

    def test_corollary_monotone_in_residual(self):
        vals = [rev.bound_corollary(0.001, 1.0, 0.5, e, 100) for e in (0.0, 0.01, 0.1)]
        assert vals == sorted(vals)

    def test_corollary_requires_positive_lipschitz(self):
        with pytest.raises(InputError):
            rev.bound_corollary(0.001, 1.0, 0.0, 0.01, 10)


class TestEstimateBounds:
    BUDGET = rev.EstimationBudget(restarts=4, steps=40, probes=512, seed=0)

    def test_affine_field_lipschitz_exact(self):
        field = AffineStateField(2, c=2.0)
        box = rev.StateBox(-np.ones(2), np.ones(2))
        est = rev.estimate_bounds(field, box, maps.ActionSpace(n=2), self.BUDGET)
        assert est.L == pytest.approx(2.0, abs=1e-9)

    def test_strict_scn_residual_negligible(self):
        model = scn_model(seed=7)
        box = rev.StateBox(-np.ones(3), np.ones(3))
        est = rev.estimate_bounds(model.decoder, box, model.space, self.BUDGET)
        assert est.E <= 1e-9

    def test_estimates_dominate_random_probes(self):
        model = scn_model(seed=8)
        box = rev.StateBox(-np.ones(3), np.ones(3))
        space = model.space
        est = rev.estimate_bounds(
            model.decoder, box, space, rev.EstimationBudget(restarts=8, steps=80, probes=2048, seed=1)
        )
        rng = np.random.default_rng(99)
        X = box.sample(rng, 10_000)
        A = maps.clamp_action(space, rng.standard_normal((10_000, 2)))
        F = model.decoder.velocity(X, A)
        tol = 1e-6
        assert np.max(np.linalg.norm(F, axis=1)) <= est.M + tol
        sigmas = rev.batched_sigma_max(maps.batch_state_jacobians(model.decoder, X, A))
        assert np.max(sigmas) <= est.L + tol * 10

    def test_witnesses_returned(self):
        field = AffineStateField(2)
        box = rev.StateBox(-np.ones(2), np.ones(2))
        est = rev.estimate_bounds(field, box, maps.ActionSpace(n=2), self.BUDGET)
        assert est.witness_M is not None
        x, a = est.witness_M
        assert np.linalg.norm(field.velocity(x, a)) == pytest.approx(est.M, rel=1e-12)

    def test_budget_without_finite_evaluations(self):
        field = CubicBlowupField(1)

        class NanField:
            state_dim = 1
            action_dim = 1

            def velocity(self, x, a, tape=None):
                import revmap.autodiff as ad

                v = ad._value(x)
                return ad.scale(x, float("nan")) if tape is not None else v * np.nan

        box = rev.StateBox(np.array([1.0]), np.array([2.0]))
        with pytest.raises(EstimationError):
            rev.estimate_bounds(
                NanField(), box, maps.ActionSpace(n=1),
                rev.EstimationBudget(restarts=2, steps=4, probes=16),
            )


class TestSingleStepCheck:
    def test_state_independent_exact_undo(self):
        field = LinearField(np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]))
        lhs, rhs, ratio = rev.single_step_check(field, np.zeros(3), np.array([0.4, -0.3]), 0.05)
        assert lhs <= 1e-15
        assert rhs > 0

    def test_zero_action(self):
        model = scn_model(seed=9)
        lhs, rhs, ratio = rev.single_step_check(model.decoder, np.ones(3), np.zeros(2), 0.01)
        assert (lhs, rhs, ratio) == (0.0, 0.0, 0.0)

    def test_odd_decoder_contraction_bound(self):
        model = scn_model(seed=10)
        box = rev.StateBox(-np.ones(3), np.ones(3))
        est = rev.estimate_bounds(
            model.decoder, box, model.space,
            rev.EstimationBudget(restarts=6, steps=60, probes=1024, seed=2),
        )
        rng = np.random.default_rng(11)
        nu = 0.001
        for _ in range(200):
            x = rng.uniform(-1, 1, 3)
            a = maps.clamp_action(model.space, rng.standard_normal(2))
            lhs, rhs, _ = rev.single_step_check(model.decoder, x, a, nu)
            assert lhs <= est.L * nu * rhs + 1e-12


class TestConvergenceStudy:
    def test_state_independent_all_zero(self):
        field = LinearField(np.eye(2) * 0.5)
        res = rev.convergence_study(field, np.zeros(2), 1.0, [0.1, 0.05, 0.025], 2, trials=3)
        assert all(err <= 1e-12 for _, err in res)

    def test_first_order_ratio_on_smooth_field(self):
        rng = np.random.default_rng(12)
        field = QuadraticGainField(rng.standard_normal((2, 2)) * 0.3)
        res = rev.convergence_study(
            field, np.zeros(2), 1.0, [0.1, 0.05, 0.025, 0.0125], 2, trials=4, seed=3
        )
        errs = [e for _, e in res]
        for big, small in zip(errs, errs[1:]):
            assert 1.5 <= big / small <= 2.5

    def test_errors_nonincreasing(self):
        rng = np.random.default_rng(13)
        field = QuadraticGainField(rng.standard_normal((2, 2)) * 0.3)
        res = rev.convergence_study(
            field, np.zeros(2), 1.0, [0.1, 0.05, 0.025], 2, trials=4, seed=4
        )
        errs = [e for _, e in res]
        for big, small in zip(errs, errs[1:]):
            assert small <= big * 1.05

    def test_non_integral_horizon_rejected(self):
        field = LinearField(np.eye(2))
        with pytest.raises(InputError):
            rev.convergence_study(field, np.zeros(2), 1.0, [0.3], 2)


class TestReversibilityExperiment:
    def _reports(self, resample=False):
        rng = np.random.default_rng(14)
        field = QuadraticGainField(rng.standard_normal((3, 2)) * 0.2)
        starts = rng.uniform(-0.5, 0.5, (8, 3))
        box = rev.StateBox(-2 * np.ones(3), 2 * np.ones(3))
        est = rev.estimate_bounds(
            field, box, maps.ActionSpace(n=2),
            rev.EstimationBudget(restarts=4, steps=40, probes=1024, seed=5),
        )
        return rev.reversibility_experiment(
            field, est, starts, durations=(10, 50), nu=0.001, trials=20, seed=6,
            resample=resample,
        )

    def test_certification_on_smooth_field(self):
        reports = self._reports()
        for r in reports:
            assert r.satisfied_tight and r.satisfied_exponential and r.satisfied_corollary
            assert r.tight <= r.exponential
            assert r.observed_mean >= 0

    def test_deterministic_given_seed(self):
        a = self._reports()
        b = self._reports()
        assert [r.to_dict() for r in a] == [r.to_dict() for r in b]

    def test_resampled_actions_supported(self):
        reports = self._reports(resample=True)
        assert all(r.satisfied_exponential for r in reports)

    def test_csv_round_trip(self):
        import csv as csv_mod
        import io

        reports = self._reports()
        text = rev.reports_to_csv(reports)
        rows = list(csv_mod.DictReader(io.StringIO(text)))
        assert len(rows) == len(reports)
        assert set(rows[0]) == set(rev.CSV_COLUMNS)
        assert rows[0]["T"] == "10"
        assert rows[0]["satisfied"] == "True"


class TestLemmaInstantiation:
    def test_consecutive_velocity_gap_bounded(self):
        # along a rollout: ||f(x_k, a) - f(x_{k+1}, a)|| <= M L nu per step
        field = QuadraticGainField(np.array([[0.4, 0.1], [0.0, 0.3]]))
        nu, T = 0.01, 200
        rng = np.random.default_rng(15)
        actions = rng.standard_normal((T, 2))
        actions /= np.linalg.norm(actions, axis=1, keepdims=True)
        traj = rev.rollout(field, np.zeros(2), actions, rev.EulerConfig(nu, T))

        box_hi = np.max(np.abs(traj.states)) * 1.01
        box = rev.StateBox(-box_hi * np.ones(2), box_hi * np.ones(2))
        est = rev.estimate_bounds(
            field, box, maps.ActionSpace(n=2),
            rev.EstimationBudget(restarts=4, steps=60, probes=2048, seed=7),
        )
        for k in range(T):
            gap = np.linalg.norm(
                field.velocity(traj.states[k], actions[k])
                - field.velocity(traj.states[k + 1], actions[k])
            )
            assert gap <= est.M * est.L * nu + 1e-9
