import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_model
from sfosda.data import AugmentPolicy, augment_batch, strong_policy, weak_policy
from sfosda.errors import InvalidInputError
from sfosda import separation
from sfosda.model import ModelParams, init_target_models, predict_logits
from sfosda.numerics import Rng, softmax
from sfosda.separation import (
    LOG2,
    VAR_FLOOR,
    GmmFit,
    ce_criterion,
    compute_jsd,
    ensemble_pseudolabels,
    entropy_criterion,
    fit_gmm_1d,
    histogram,
    jsd_rows,
    onehot,
    posterior_known,
    read_diagnostics,
    read_histogram,
    separate,
    split_by_threshold,
    write_diagnostics,
    write_histogram,
)

mp.mp.dps = 40


def mp_kl(p, q):
    return sum(mp.mpf(a) * mp.log(mp.mpf(a) / mp.mpf(b)) for a, b in zip(p, q) if a > 0)


def mp_jsd(a, b):
    m = [(mp.mpf(x) + mp.mpf(y)) / 2 for x, y in zip(a, b)]
    return mp.mpf(0.5) * mp_kl(a, m) + mp.mpf(0.5) * mp_kl(b, m)


def identity_views(m):
    return [AugmentPolicy("weak")] + [AugmentPolicy("strong")] * (m - 1)


def toy_pair(seed=0, d=3, c_s=3):
    rng = np.random.default_rng(seed)
    source = random_model(rng, d, c_s)
    student, teacher = init_target_models(source)
    return rng, student, teacher


# ----------------------------------------------------------------------------
# pseudolabels
# ----------------------------------------------------------------------------

class TestEnsemble:
    def test_identical_views_reduce_to_single_softmax(self):
        rng, student, _ = toy_pair(1)
        x = rng.normal(size=(20, 3))
        labels, mean = ensemble_pseudolabels(student, x, identity_views(4), 3, Rng(0))
        single = softmax(predict_logits(student, x)[:, :3])
        np.testing.assert_allclose(mean, single, rtol=1e-12)
        np.testing.assert_array_equal(labels, np.argmax(single, axis=1))

    def test_average_not_vote(self, monkeypatch):
        # view argmaxes are 0 and 1 but the averaged probabilities favour 0
        net = ModelParams([np.array([[1.0], [0.0]])], [np.array([0.0, 0.25])], ["linear"])
        views = iter([np.array([[2.0]]), np.array([[0.1]])])
        monkeypatch.setattr(separation, "augment_batch", lambda feats, policy, rng: next(views))
        labels, mean = ensemble_pseudolabels(net, np.array([[2.0]]),
                                             [AugmentPolicy("weak"), AugmentPolicy("strong")], 2, Rng(0))
        view_probs = softmax(np.array([[2.0, 0.25], [0.1, 0.25]]))
        assert list(np.argmax(view_probs, axis=1)) == [0, 1]
        assert labels[0] == 0
        np.testing.assert_allclose(mean[0], view_probs.mean(axis=0), rtol=1e-12)

    def test_seeded_views_match_recomputation(self):
        rng, student, _ = toy_pair(2)
        x = rng.normal(size=(2, 3))
        std = x.std(axis=0) + 0.5
        policies = [weak_policy(std), strong_policy(std), strong_policy(std)]
        labels, mean = ensemble_pseudolabels(student, x, policies, 3, Rng(9))
        # brute force: replay the same stream one view at a time
        r = Rng(9)
        acc = np.zeros((2, 3))
        for p in policies:
            acc += softmax(predict_logits(student, augment_batch(x, p, r))[:, :3])
        np.testing.assert_allclose(mean, acc / 3, rtol=1e-12)
        np.testing.assert_array_equal(labels, np.argmax(acc, axis=1))

    def test_requires_one_weak_view(self):
        _, student, _ = toy_pair()
        x = np.zeros((3, 3))
        with pytest.raises(InvalidInputError):
            ensemble_pseudolabels(student, x, [AugmentPolicy("strong")], 3, Rng(0))
        with pytest.raises(InvalidInputError):
            ensemble_pseudolabels(student, x, [AugmentPolicy("weak")] * 2, 3, Rng(0))
        with pytest.raises(InvalidInputError):
            ensemble_pseudolabels(student, x, [], 3, Rng(0))


# ----------------------------------------------------------------------------
# JSD
# ----------------------------------------------------------------------------

class TestJsd:
    def test_identity(self):
        assert compute_jsd([0, 1, 0], [0, 1, 0]) == 0.0

    def test_disjoint(self):
        assert compute_jsd([1, 0, 0], [0, 0, 1]) == pytest.approx(math.log(2), abs=1e-15)

    def test_against_mpmath(self):
        expected = mp_jsd([1, 0, 0], [0.5, 0.3, 0.2])
        assert compute_jsd([1, 0, 0], [0.5, 0.3, 0.2]) == pytest.approx(float(expected), rel=1e-13)

    def test_random_against_mpmath(self, nprng):
        for _ in range(50):
            a = nprng.dirichlet(np.ones(4))
            b = nprng.dirichlet(np.ones(4))
            assert compute_jsd(a, b) == pytest.approx(float(mp_jsd(a, b)), rel=1e-10, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            compute_jsd([1, 0], [0.3, 0.3, 0.4])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 8))
    def test_symmetry_and_bounds(self, seed, c):
        rng = np.random.default_rng(seed)
        a = rng.dirichlet(np.ones(c) * 0.3)
        b = rng.dirichlet(np.ones(c) * 0.3)
        ab, ba = compute_jsd(a, b), compute_jsd(b, a)
        assert abs(ab - ba) <= 1e-12
        assert 0.0 <= ab <= LOG2 + 1e-12

    def test_rows_match_scalar(self, nprng):
        lab = nprng.integers(0, 5, size=30)
        p = nprng.dirichlet(np.ones(5), size=30)
        rows = jsd_rows(onehot(lab, 5), p)
        np.testing.assert_allclose(rows, [compute_jsd(onehot(lab[i:i + 1], 5)[0], p[i]) for i in range(30)])


# ----------------------------------------------------------------------------
# GMM
# ----------------------------------------------------------------------------

def reference_em(x, tol=1e-8, max_iter=500):
    """Independent equal-prior two-Gaussian EM written with plain Python loops."""
    xs = sorted(x)
    n = len(xs)

    def pct(q):
        pos = q * (n - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, n - 1)
        return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)

    mu = [pct(0.25), pct(0.75)]
    sq = [(v - mu[0]) ** 2 if abs(v - mu[0]) <= abs(v - mu[1]) else (v - mu[1]) ** 2 for v in x]
    var = [max(sum(sq) / n, VAR_FLOOR)] * 2

    def dens(v, m, s2):
        return math.exp(-0.5 * (v - m) ** 2 / s2) / math.sqrt(2 * math.pi * s2)

    def loglik():
        return sum(math.log(0.5 * dens(v, mu[0], var[0]) + 0.5 * dens(v, mu[1], var[1])) for v in x)

    ll = loglik()
    for _ in range(max_iter):
        r0 = [dens(v, mu[0], var[0]) / (dens(v, mu[0], var[0]) + dens(v, mu[1], var[1])) for v in x]
        for k, r in enumerate((r0, [1 - q for q in r0])):
            s = sum(r)
            mu[k] = sum(a * v for a, v in zip(r, x)) / s
            var[k] = max(sum(a * (v - mu[k]) ** 2 for a, v in zip(r, x)) / s, VAR_FLOOR)
        new = loglik()
        if abs(new - ll) < tol:
            break
        ll = new
    return sorted(mu)


class TestGmm:
    def test_separated_clusters(self, nprng):
        x = np.concatenate([0.1 + nprng.uniform(-1e-3, 1e-3, 50), 0.9 + nprng.uniform(-1e-3, 1e-3, 50)])
        fit = fit_gmm_1d(x)
        assert fit.mu_low == pytest.approx(0.1, abs=5e-3)
        assert fit.mu_high == pytest.approx(0.9, abs=5e-3)
        assert fit.converged and not fit.degenerate

    def test_identical_values_degenerate(self):
        fit = fit_gmm_1d(np.full(10, 0.3))
        assert fit.degenerate
        assert fit.mu_low == fit.mu_high == 0.3
        assert posterior_known(0.3, fit) == 1.0

    def test_recovers_generating_means(self, nprng):
        comp = nprng.random(2000) < 0.5
        x = np.where(comp, nprng.normal(0.2, 0.05, 2000), nprng.normal(0.6, 0.05, 2000))
        fit = fit_gmm_1d(x)
        assert fit.mu_low == pytest.approx(0.2, abs=0.02)
        assert fit.mu_high == pytest.approx(0.6, abs=0.02)

    def test_matches_reference_em(self, nprng):
        for _ in range(5):
            x = np.concatenate([nprng.normal(0.1, 0.05, 60), nprng.normal(0.45, 0.1, 40)])
            fit = fit_gmm_1d(x)
            ref = reference_em(list(x))
            assert fit.mu_low == pytest.approx(ref[0], abs=1e-6)
            assert fit.mu_high == pytest.approx(ref[1], abs=1e-6)

    def test_invariants(self, nprng):
        x = nprng.beta(0.5, 2.0, 300) * LOG2
        fit = fit_gmm_1d(x)
        assert fit.mu_low <= fit.mu_high
        assert min(fit.var_low, fit.var_high) >= VAR_FLOOR
        assert fit.prior == 0.5

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_loglik_monotone(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 200))
        x = np.concatenate([rng.normal(rng.uniform(0, 0.3), 0.05, n), rng.uniform(0, 0.7, int(rng.integers(0, 50)))])
        hist = np.array(fit_gmm_1d(x).history)
        assert np.all(np.diff(hist) >= -1e-9)

    def test_input_errors(self):
        with pytest.raises(InvalidInputError):
            fit_gmm_1d([0.1, 0.2, 0.3])
        with pytest.raises(InvalidInputError):
            fit_gmm_1d([0.1, 0.2, 0.3, np.nan])

    def test_warm_start_uses_init(self, nprng):
        x = np.concatenate([nprng.normal(0.1, 0.02, 100), nprng.normal(0.5, 0.02, 100)])
        cold = fit_gmm_1d(x)
        warm = fit_gmm_1d(x, init=cold)
        assert warm.iterations <= cold.iterations
        assert warm.mu_low == pytest.approx(cold.mu_low, abs=1e-6)


class TestPosterior:
    def test_low_mean_dominates(self):
        fit = GmmFit(0.1, 0.5, 0.01, 0.01, 1, True, 0.0)
        assert posterior_known(0.1, fit) > 0.5

    def test_midpoint_equal_variance(self):
        fit = GmmFit(0.25, 0.75, 0.0025, 0.0025, 1, True, 0.0)
        assert posterior_known(0.5, fit) == 0.5

    def test_density_ratio_oracle(self):
        fit = GmmFit(0.2, 0.6, 0.05 ** 2, 0.05 ** 2, 1, True, 0.0)

        def npdf(x, m, s):
            return mp.exp(-(mp.mpf(x) - m) ** 2 / (2 * mp.mpf(s) ** 2)) / (mp.sqrt(2 * mp.pi) * s)

        lo, hi = npdf(0.3, 0.2, 0.05), npdf(0.3, 0.6, 0.05)
        assert posterior_known(0.3, fit) == pytest.approx(float(lo / (lo + hi)), rel=1e-12)

    def test_unequal_variance_oracle(self):
        fit = GmmFit(0.1, 0.5, 0.01, 0.04, 1, True, 0.0)
        for v in (0.0, 0.25, 0.6):
            lo = mp.npdf(v, 0.1, 0.1)
            hi = mp.npdf(v, 0.5, 0.2)
            assert posterior_known(v, fit) == pytest.approx(float(lo / (lo + hi)), rel=1e-12)

    def test_far_tail_stays_finite(self):
        fit = GmmFit(0.0, 1.0, VAR_FLOOR, VAR_FLOOR, 1, True, 0.0)
        assert posterior_known(1.0, fit) == 0.0
        assert posterior_known(0.0, fit) == 1.0
        assert np.isfinite(fit.posterior_known(np.array([-5.0, 5.0]))).all()

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1, 1), st.floats(0, 1), st.floats(1e-6, 1), st.floats(1e-6, 1), st.floats(-1, 2))
    def test_posterior_complement(self, mu, gap, v1, v2, x):
        fit = GmmFit(mu, mu + gap, v1, v2, 1, True, 0.0)
        total = fit.posterior_known(np.array([x]))[0] + fit.posterior_unknown(np.array([x]))[0]
        assert abs(total - 1.0) <= 1e-12


# ----------------------------------------------------------------------------
# criteria for the ablations
# ----------------------------------------------------------------------------

class TestCriteria:
    def test_entropy(self):
        np.testing.assert_allclose(entropy_criterion(np.array([[1.0, 0, 0], [1 / 3] * 3]), 3), [0.0, 1.0], atol=1e-15)
        h = -(0.5 * mp.log(0.5) + 2 * 0.25 * mp.log(0.25)) / mp.log(3)
        assert entropy_criterion(np.array([[0.5, 0.25, 0.25]]), 3)[0] == pytest.approx(float(h), rel=1e-14)

    def test_ce(self):
        p = np.array([[1.0, 0.0], [1 / math.e, 1 - 1 / math.e]])
        np.testing.assert_allclose(ce_criterion(np.array([0, 0]), p), [0.0, 1.0], atol=1e-15)

    def test_ce_mixed_batch(self, nprng):
        p = nprng.dirichlet(np.ones(4), size=10)
        lab = nprng.integers(0, 4, size=10)
        expect = [float(-mp.log(p[i, lab[i]])) for i in range(10)]
        np.testing.assert_allclose(ce_criterion(lab, p), expect, rtol=1e-13)


# ----------------------------------------------------------------------------
# separate
# ----------------------------------------------------------------------------

def separated_result(seed=0, delta_t=0.8, **kw):
    rng, student, teacher = toy_pair(seed)
    # perturb the student so ensemble labels and teacher disagree on some samples
    student.weights[-1][:3] += rng.normal(0, 1.0, size=student.weights[-1][:3].shape)
    x = rng.normal(0, 2.0, size=(120, 3))
    std = x.std(axis=0)
    policies = [weak_policy(std)] + [strong_policy(std)] * 5
    return separate(x, student, teacher, 3, policies, Rng(seed), delta_t, **kw), (x, student, teacher, policies)


class TestSeparate:
    def test_all_known_when_w_is_one(self):
        known, unknown, pseudo, weights = split_by_threshold(np.ones(6), np.array([0, 1, 2, 0, 1, 2]), 0.8, 3)
        assert len(unknown) == 0 and len(known) == 6
        assert not np.any(pseudo == 3)
        np.testing.assert_array_equal(weights, 1.0)

    def test_delta_zero_all_known(self):
        res, _ = separated_result(delta_t=0.0)
        assert len(res.unknown_idx) == 0
        assert not np.any(res.pseudo == res.n_known)

    def test_delta_range(self):
        with pytest.raises(InvalidInputError):
            separated_result(delta_t=1.0)
        with pytest.raises(InvalidInputError):
            separated_result(delta_t=-0.1)

    def test_bad_options(self):
        with pytest.raises(InvalidInputError):
            separated_result(criterion="mahalanobis")
        with pytest.raises(InvalidInputError):
            separated_result(pseudolabel="oracle")

    @pytest.mark.parametrize("seed", range(6))
    def test_result_invariants(self, seed):
        res, _ = separated_result(seed)
        n = len(res.pseudo)
        assert set(res.known_idx).isdisjoint(res.unknown_idx)
        assert sorted(np.concatenate([res.known_idx, res.unknown_idx]).tolist()) == list(range(n))
        assert np.all((res.jsd >= 0) & (res.jsd <= LOG2 + 1e-12))
        assert np.all((res.w_known >= 0) & (res.w_known <= 1))
        known = res.is_known
        np.testing.assert_array_equal(known, res.w_known >= 0.8)
        np.testing.assert_array_equal(res.weights[known], res.w_known[known])
        np.testing.assert_array_equal(res.weights[~known], 1 - res.w_known[~known])
        assert np.all(res.pseudo[~known] == 3) and np.all(res.pseudo[known] < 3)

    def test_threshold_monotone(self):
        prev = None
        for d in (0.0, 0.2, 0.5, 0.8, 0.95, 0.999):
            res, _ = separated_result(3, delta_t=d)
            if prev is not None:
                assert set(res.known_idx) <= prev
            prev = set(res.known_idx)

    def test_teacher_scores_use_clean_input(self):
        res, (x, student, teacher, policies) = separated_result(4)
        # recompute the JSD with the same ensemble labels and an unaugmented teacher pass
        labels = np.where(res.is_known, res.pseudo, np.argmax(res.mean_probs, axis=1))
        p_t = softmax(predict_logits(teacher, x)[:, :3])
        np.testing.assert_allclose(res.jsd, jsd_rows(onehot(labels, 3), p_t), rtol=1e-12, atol=1e-15)

    def test_degenerate_fit_means_all_known(self):
        _, student, teacher = toy_pair(5)
        x = np.zeros((10, 3))  # identical samples give identical scores
        res = separate(x, student, teacher, 3, identity_views(2), Rng(0), 0.8)
        assert res.degenerate
        assert len(res.unknown_idx) == 0
        np.testing.assert_array_equal(res.w_known, 1.0)

    def test_custom_fit_fn(self):
        class Always:
            degenerate = False

            def posterior_known(self, v):
                return np.where(np.asarray(v) < 0.2, 1.0, 0.0)

        res, _ = separated_result(1, fit_fn=lambda v: Always())
        np.testing.assert_array_equal(res.is_known, res.jsd < 0.2)

    def test_alternative_criteria_run(self):
        for crit in ("entropy", "ce"):
            res, _ = separated_result(2, criterion=crit)
            assert len(res.known_idx) + len(res.unknown_idx) == 120
        res, _ = separated_result(2, pseudolabel="student_argmax")
        assert len(res.pseudo) == 120


class TestDiagnostics:
    def test_round_trip(self, tmp_path):
        res, _ = separated_result(0)
        hidden = np.arange(120) % 4
        write_diagnostics(tmp_path / "d.csv", res, hidden)
        back = read_diagnostics(tmp_path / "d.csv")
        np.testing.assert_array_equal(back["jsd"], res.jsd)
        np.testing.assert_array_equal(back["w_known"], res.w_known)
        np.testing.assert_array_equal(back["pseudo_class"], res.pseudo)
        np.testing.assert_array_equal(back["hidden_label"], hidden)
        write_diagnostics(tmp_path / "e.csv", res)
        assert np.all(read_diagnostics(tmp_path / "e.csv")["hidden_label"] == -1)

    def test_histogram(self, tmp_path):
        values = np.linspace(0, LOG2, 101)
        counts, edges = histogram(values)
        assert len(counts) == 50 and counts.sum() == 101
        write_histogram(tmp_path / "h.csv", values)
        table = read_histogram(tmp_path / "h.csv")
        assert table.shape == (50, 3)
        np.testing.assert_array_equal(table[:, 2], counts)
        assert table[0, 0] == 0.0 and table[-1, 1] == pytest.approx(LOG2)
