import numpy as np
import pytest

from dlab.diagnostics import (DiagnosticsRecord, block_structure_stats,
                              build_heatmaps, collect_records,
                              correlate_pt_omega, omega, prop1_ratio,
                              prop2_geometry_check, pt_histogram,
                              solve_fixed_feature_logits, write_histogram_csv,
                              write_records_csv)
from dlab.distill import (DistillConfig, Method, TeacherSignal, ce_loss_grad,
                          kd_loss_grad)
from dlab.mathcore import softmax_t


def logits_for(q):
    return np.log(np.asarray(q, dtype=np.float64))


def kd_cfg(lam=0.5, T=1.0):
    return DistillConfig(method=Method.KD, lam=lam, T=T)


def confident_teacher(q, t, gamma):
    """Teacher that moves mass from every class toward the truth; keeps the
    re-weighting identity's sign conditions satisfied at T=1."""
    y = np.zeros_like(q)
    y[t] = 1.0
    return (1.0 - gamma) * q + gamma * y


class TestOmega:
    def test_no_distillation_gives_unit_factors(self, rng):
        z = rng.normal(size=5)
        p = rng.dirichlet(np.ones(5))
        om, defined = omega(1, z, p, kd_cfg(lam=0.0))
        np.testing.assert_allclose(om[defined], 1.0, atol=1e-15)

    def test_reference_value(self):
        z = logits_for([0.6, 0.4])
        om, _ = omega(0, z, np.array([0.8, 0.2]), kd_cfg(lam=0.5, T=1.0))
        assert abs(om[0] - 0.75) < 1e-12

    def test_matched_teacher_gives_one_minus_lambda(self, rng):
        z = rng.normal(size=4)
        p = softmax_t(z)
        om, defined = omega(2, z, p, kd_cfg(lam=0.3, T=1.0))
        np.testing.assert_allclose(om[defined], 0.7, atol=1e-12)

    def test_closed_form_matches_gradient_ratio(self, rng):
        cfg = kd_cfg(lam=0.6, T=3.0)
        for _ in range(200):
            z = rng.normal(size=6) * 2
            t = int(rng.integers(6))
            p = rng.dirichlet(np.ones(6))
            _, g_kd = kd_loss_grad(t, z, TeacherSignal(p=p), cfg,
                                   t2_compensation=False)
            _, g_ce = ce_loss_grad(t, z)
            om, defined = omega(t, z, p, cfg)
            ratio = g_kd[defined] / g_ce[defined]
            np.testing.assert_allclose(om[defined], ratio, atol=1e-12)

    def test_binary_class_factors_are_equal(self, rng):
        # With two classes the two rescaling factors coincide. The identity
        # is resolvable at 1e-12 only away from softmax saturation, where the
        # CE denominator would amplify float rounding of the numerator.
        checked = 0
        while checked < 200:
            z = rng.normal(size=2)
            t = int(rng.integers(2))
            p = rng.dirichlet(np.ones(2))
            q = softmax_t(z)
            if min(q[0], q[1]) < 1e-3:
                continue
            om, defined = omega(t, z, p, kd_cfg(lam=0.7, T=2.0))
            assert defined.all()
            assert abs(om[0] - om[1]) < 1e-12
            checked += 1


class TestProp1:
    def test_reference_case(self):
        z = logits_for([0.6, 0.3, 0.1])
        res = prop1_ratio(0, z, np.array([0.8, 0.15, 0.05]), kd_cfg(lam=0.5, T=1.0))
        assert res.conditions_ok
        assert abs(res.lhs - 0.75) < 1e-12
        assert abs(res.rhs - 0.75) < 1e-12

    def test_lambda_zero(self, rng):
        z = rng.normal(size=4)
        p = rng.dirichlet(np.ones(4))
        res = prop1_ratio(1, z, p, kd_cfg(lam=0.0))
        assert abs(res.lhs - 1.0) < 1e-12 and abs(res.rhs - 1.0) < 1e-12

    def test_matched_teacher_boundary(self, rng):
        z = rng.normal(size=4)
        res = prop1_ratio(0, z, softmax_t(z), kd_cfg(lam=0.4))
        assert abs(res.rhs - 0.6) < 1e-12
        assert not res.conditions_ok  # c_tilde_t = 0 violates strict inequality

    def test_identity_and_balance_on_valid_instances(self, rng):
        cfg = kd_cfg(lam=0.7, T=2.0)
        checked = 0
        while checked < 500:
            K = int(rng.integers(3, 10))
            z = rng.normal(size=K) * 2
            t = int(rng.integers(K))
            p = confident_teacher(softmax_t(z), t, gamma=float(rng.uniform(0.05, 0.9)))
            res = prop1_ratio(t, z, p, cfg)
            if not res.conditions_ok:
                continue
            assert abs(res.lhs - res.rhs) < 1e-10
            assert res.balance_gap < 1e-12
            checked += 1


class TestCorrelation:
    def test_monotone_association_is_positive(self):
        records = [DiagnosticsRecord(i, 0.0, 0.0, p, np.exp(2 * p), 1.0, 0.0, True, True)
                   for i, p in enumerate(np.linspace(0.1, 0.9, 30))]
        res = correlate_pt_omega(records)
        assert not res.flagged and res.value > 0.99

    def test_constant_confidence_flagged(self):
        records = [DiagnosticsRecord(i, 0.0, 0.0, 0.5, 1.0 + 0.01 * i, 1.0, 0.0, True, True)
                   for i in range(10)]
        assert correlate_pt_omega(records).flagged

    def test_undefined_records_excluded(self):
        records = [DiagnosticsRecord(0, 0, 0, 0.5, np.nan, 1, 0, False, True),
                   DiagnosticsRecord(1, 0, 0, 0.6, -0.5, 1, 0, True, True)]
        assert correlate_pt_omega(records).flagged  # nothing usable


class TestProp2:
    def test_optimum_matches_scaled_teacher(self, rng):
        h = rng.normal(size=16)
        p = rng.dirichlet(np.ones(8))
        t, lam = 2, 0.5
        W = solve_fixed_feature_logits(h, p, t, lam, tol=1e-8)
        q = softmax_t(W @ h)
        target = lam * p
        others = np.arange(8) != t
        np.testing.assert_allclose(q[others], target[others], atol=1e-6)
        assert prop2_geometry_check(h, W, p, t)

    def test_uniform_incorrect_mass_gives_equal_distances(self, rng):
        h = rng.normal(size=12)
        K, t = 6, 3
        p = np.full(K, 0.12)
        p[t] = 1.0 - 0.12 * (K - 1)
        W = solve_fixed_feature_logits(h, p, t, lam=0.6, tol=1e-9)
        d2 = ((h[None, :] - W) ** 2).sum(axis=1)
        incorrect = np.arange(K) != t
        assert d2[incorrect].max() - d2[incorrect].min() < 1e-6
        assert prop2_geometry_check(h, W, p, t)

    def test_two_classes_vacuously_true(self, rng):
        h = rng.normal(size=4)
        assert prop2_geometry_check(h, rng.normal(size=(2, 4)), np.array([0.7, 0.3]), 0)

    def test_detects_wrong_ordering(self, rng):
        h = np.zeros(3)
        W = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])  # d2 = 0, 1, 4
        p = np.array([0.1, 0.2, 0.7])
        assert not prop2_geometry_check(h, W, p, t=0)


class TestRecordsAndOutputs:
    def test_collect_records_matches_scalar_ops(self, rng):
        K, n = 5, 40
        t = rng.integers(0, K, size=n)
        Z = rng.normal(size=(n, K)) * 2
        P = rng.dirichlet(np.ones(K), size=n)
        cfg = kd_cfg(lam=0.6, T=2.0)
        records = collect_records(t, Z, P, cfg)
        for i in (0, 7, 23):
            om, defined = omega(int(t[i]), Z[i], P[i], cfg)
            res = prop1_ratio(int(t[i]), Z[i], P[i], cfg)
            r = records[i]
            assert r.omega_defined == bool(defined[t[i]])
            if defined[t[i]]:
                assert abs(r.omega_t - om[t[i]]) < 1e-12
            assert abs(r.omega_sum_ratio - res.lhs) < 1e-12
            assert r.conditions_ok == res.conditions_ok

    def test_histogram_mass_placement(self):
        counts, edges = pt_histogram([0.5] * 10, bins=2)
        assert counts.tolist() == [0, 10]
        assert counts.sum() == 10

    def test_histogram_flat_for_uniform_draws(self, rng):
        counts, _ = pt_histogram(rng.uniform(size=20_000), bins=10)
        assert counts.sum() == 20_000
        assert np.abs(counts - 2000).max() < 5 * np.sqrt(2000 * 0.9)

    def test_histogram_rejects_no_bins(self):
        with pytest.raises(ValueError):
            pt_histogram([0.5], bins=0)

    def test_heatmaps_structure_and_permutation(self, rng):
        n, K = 60, 6
        P = rng.dirichlet(np.ones(K), size=n)
        W = rng.normal(size=(K, 4))
        order = np.array([3, 4, 5, 0, 1, 2])
        bundle = build_heatmaps(P, W, class_order=order)
        np.testing.assert_allclose(bundle.pearson, bundle.pearson.T, atol=1e-12)
        np.testing.assert_allclose(np.diag(bundle.pearson), 1.0)
        np.testing.assert_allclose(np.diag(bundle.cosine), 1.0)
        plain = build_heatmaps(P, W)
        np.testing.assert_allclose(bundle.pearson, plain.pearson[np.ix_(order, order)])

    def test_identical_rows_flagged_degenerate(self, rng):
        P = np.tile(rng.dirichlet(np.ones(4)), (10, 1))
        bundle = build_heatmaps(P, rng.normal(size=(4, 3)))
        assert bundle.degenerate.all()

    def test_block_structure_stats(self):
        M = np.array([[1.0, 0.8, 0.1, 0.1],
                      [0.8, 1.0, 0.1, 0.1],
                      [0.1, 0.1, 1.0, 0.9],
                      [0.1, 0.1, 0.9, 1.0]])
        intra, inter = block_structure_stats(M, [0, 0, 1, 1])
        assert abs(intra - 0.85) < 1e-12
        assert abs(inter - 0.1) < 1e-12

    def test_csv_writers(self, tmp_path, rng):
        records = collect_records(rng.integers(0, 4, size=6),
                                  rng.normal(size=(6, 4)),
                                  rng.dirichlet(np.ones(4), size=6),
                                  kd_cfg())
        write_records_csv(tmp_path / "records.csv", records)
        lines = (tmp_path / "records.csv").read_text().strip().splitlines()
        assert lines[0].startswith("example_id,") and len(lines) == 7
        counts, edges = pt_histogram(rng.uniform(size=50), bins=5)
        write_histogram_csv(tmp_path / "hist.csv", counts, edges)
        lines = (tmp_path / "hist.csv").read_text().strip().splitlines()
        assert lines[0] == "bin_left,bin_right,count" and len(lines) == 6
