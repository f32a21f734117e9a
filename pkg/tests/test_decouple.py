"""Tests of the ALS updates, stopping logic, reconstruction, and pipeline."""

import math

import numpy as np
import pytest

from polydecouple.basis import (
    PolyMap,
    basis_enumerate,
    coeff_vector,
    compose_branches,
    jacobian,
    poly_eval_many,
)
from polydecouple.covariance import (
    CoeffCovariance,
    DenseWeight,
    DiagonalWeight,
    SplitWeight,
    sigma_dense,
    sigma_slicewise,
    svd_split,
    weight_from,
)
from polydecouple.decouple import (
    AlsConfig,
    _step_size,
    als_update_unweighted,
    als_update_weighted_dense,
    als_update_weighted_fullrank,
    build_jacobian_tensor,
    decouple_pipeline,
    reconstruct_branches,
    run_wals,
    sample_points,
    weighted_cost,
)
from polydecouple.tensorops import (
    CpdFactors,
    cpd_reconstruct,
    khatri_rao,
    matricize,
    mode_permutation,
    vec,
)


def random_factors(rng, dims, r):
    n, m, N = dims
    return CpdFactors(
        rng.standard_normal((n, r)),
        rng.standard_normal((m, r)),
        rng.standard_normal((N, r)),
    )


def random_psd(rng, dim, rank=None):
    B = rng.standard_normal((dim, rank if rank is not None else dim))
    return B @ B.T


def synth_decoupled(rng, m=2, n=2, d=3, r=2):
    """An exactly decoupled polynomial map with well-separated projections."""
    basis = basis_enumerate(m, d)
    W = rng.standard_normal((n, r))
    while True:
        V = rng.standard_normal((m, r))
        V /= np.linalg.norm(V, axis=0)
        ok = all(
            abs(V[:, a] @ V[:, b]) < 0.95 for a in range(r) for b in range(a + 1, r)
        )
        if ok:
            break
    g = [rng.standard_normal(d + 1) for _ in range(r)]
    return compose_branches(W, V, g, basis), (W, V, g)


class TestSamplePoints:
    def test_deterministic(self):
        a = sample_points(3, 10, "normal", seed=42)
        b = sample_points(3, 10, "normal", seed=42)
        np.testing.assert_array_equal(a, b)

    def test_normal_mean(self):
        pts = sample_points(2, 1000, "normal", seed=0)
        assert np.all(np.abs(pts.mean(axis=0)) < 4 / math.sqrt(1000))

    def test_uniform_range(self):
        pts = sample_points(4, 200, "uniform", seed=1)
        assert pts.min() >= -1.0 and pts.max() <= 1.0


class TestBuildJacobianTensor:
    def test_slices_match_jacobian(self):
        rng = np.random.default_rng(0)
        basis = basis_enumerate(2, 2)
        f = PolyMap(basis=basis, coeffs=rng.standard_normal((3, basis.size)))
        pts = rng.standard_normal((5, 2))
        T = build_jacobian_tensor(f, pts)
        assert T.shape == (3, 2, 5)
        for k, u in enumerate(pts):
            np.testing.assert_array_equal(T[:, :, k], jacobian(f, u))

    def test_zero_map(self):
        basis = basis_enumerate(2, 2)
        f = PolyMap(basis=basis, coeffs=np.zeros((2, basis.size)))
        T = build_jacobian_tensor(f, np.ones((4, 2)))
        assert np.all(T == 0.0)

    def test_decoupled_map_gives_low_rank_tensor(self):
        rng = np.random.default_rng(1)
        f, _ = synth_decoupled(rng, r=2)
        T = build_jacobian_tensor(f, rng.standard_normal((20, 2)))
        for mode in (1, 2, 3):
            s = np.linalg.svd(matricize(T, mode), compute_uv=False)
            assert np.sum(s > 1e-10 * s[0]) <= 2


class TestUnweightedUpdate:
    def test_fixed_point_at_truth(self):
        rng = np.random.default_rng(2)
        F = random_factors(rng, (3, 2, 4), 2)
        T = cpd_reconstruct(F)
        for mode in (1, 2, 3):
            new, deficient = als_update_unweighted(T, F, mode)
            assert not deficient
            old = (F.W, F.V, F.H)[mode - 1]
            np.testing.assert_allclose(new, old, atol=1e-12)

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(3)
        T = rng.standard_normal((2, 2, 2))
        F = random_factors(rng, (2, 2, 2), 1)
        new, _ = als_update_unweighted(T, F, 1)
        K = khatri_rao(F.H, F.V)
        oracle = np.linalg.solve(K.T @ K, K.T @ matricize(T, 1).T).T
        np.testing.assert_allclose(new, oracle, atol=1e-10)

    def test_cost_never_increases(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            dims = tuple(rng.integers(2, 4, size=3))
            T = rng.standard_normal(dims)
            F = random_factors(rng, dims, 2)
            before = weighted_cost(T, F, None)
            for mode in (1, 2, 3):
                new, _ = als_update_unweighted(T, F, mode)
                parts = [F.W, F.V, F.H]
                parts[mode - 1] = new
                F = CpdFactors(*parts)
                after = weighted_cost(T, F, None)
                assert after <= before + 1e-12 * max(before, 1.0)
                before = after


class TestWeightedFullrankUpdate:
    def test_identity_weight_equals_unweighted(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            dims = (2, 3, 4)
            T = rng.standard_normal(dims)
            F = random_factors(rng, dims, 2)
            w = DiagonalWeight(np.ones(24))
            for mode in (1, 2, 3):
                perm = mode_permutation(mode, dims)
                a, _ = als_update_weighted_fullrank(T, F, mode, w, perm)
                b, _ = als_update_unweighted(T, F, mode)
                np.testing.assert_allclose(a, b, atol=1e-10)

    def test_matches_dense_normal_equations(self):
        # brute-force oracle: assemble B = I kron K and the permuted weight
        # densely, solve (B^T Wp B) x = B^T Wp vec(X^T)
        rng = np.random.default_rng(6)
        dims = (2, 2, 2)
        T = rng.standard_normal(dims)
        F = random_factors(rng, dims, 1)
        w = DiagonalWeight(rng.uniform(0.5, 2.0, 8))
        for mode in (1, 2, 3):
            perm = mode_permutation(mode, dims)
            mine, _ = als_update_weighted_fullrank(T, F, mode, w, perm)
            K = khatri_rao(*{
                1: (F.H, F.V),
                2: (F.H, F.W),
                3: (F.V, F.W),
            }[mode])
            reps = dims[mode - 1]
            B = np.kron(np.eye(reps), K)
            P = np.eye(8)[perm.index_map, :]
            Wp = P @ w.materialize() @ P.T
            y = vec(matricize(T, mode).T)
            x = np.linalg.solve(B.T @ Wp @ B, B.T @ Wp @ y)
            oracle = x.reshape(-1, reps, order="F").T
            np.testing.assert_allclose(mine, oracle, rtol=1e-9, atol=1e-10)

    def test_dense_spd_weight_matches_oracle(self):
        rng = np.random.default_rng(7)
        dims = (2, 2, 2)
        T = rng.standard_normal(dims)
        F = random_factors(rng, dims, 2)
        w = DenseWeight(random_psd(rng, 8) + 8 * np.eye(8))
        for mode in (1, 2, 3):
            perm = mode_permutation(mode, dims)
            mine, _ = als_update_weighted_fullrank(T, F, mode, w, perm)
            K = khatri_rao(*{
                1: (F.H, F.V),
                2: (F.H, F.W),
                3: (F.V, F.W),
            }[mode])
            reps = dims[mode - 1]
            B = np.kron(np.eye(reps), K)
            P = np.eye(8)[perm.index_map, :]
            Wp = P @ w.materialize() @ P.T
            y = vec(matricize(T, mode).T)
            x = np.linalg.solve(B.T @ Wp @ B, B.T @ Wp @ y)
            np.testing.assert_allclose(
                mine, x.reshape(-1, reps, order="F").T, rtol=1e-8, atol=1e-9
            )

    def test_permutation_equivalence(self):
        # solving with (weight, P) must equal solving the explicitly
        # pre-permuted problem with the identity permutation
        rng = np.random.default_rng(8)
        dims = (2, 2, 3)
        T = rng.standard_normal(dims)
        F = random_factors(rng, dims, 2)
        w = DenseWeight(random_psd(rng, 12) + 12 * np.eye(12))
        mode = 1
        perm = mode_permutation(mode, dims)
        mine, _ = als_update_weighted_fullrank(T, F, mode, w, perm)
        K = khatri_rao(F.H, F.V)
        B = np.kron(np.eye(2), K)
        Wp = perm.congruence(w.materialize())
        y = vec(matricize(T, mode).T)
        x = np.linalg.solve(B.T @ Wp @ B, B.T @ Wp @ y)
        np.testing.assert_allclose(mine, x.reshape(-1, 2, order="F").T, rtol=1e-9)


class TestWeightedDenseUpdate:
    def test_full_rank_split_equals_fullrank_path(self):
        rng = np.random.default_rng(9)
        dims = (2, 2, 2)
        T = rng.standard_normal(dims)
        F = random_factors(rng, dims, 1)
        S = random_psd(rng, 8) + 8 * np.eye(8)
        split = svd_split(S)
        assert split.U2.shape[1] == 0
        w = DenseWeight(np.linalg.inv(S))
        for mode in (1, 2, 3):
            perm = mode_permutation(mode, dims)
            a, _ = als_update_weighted_dense(T, F, mode, split, perm)
            b, _ = als_update_weighted_fullrank(T, F, mode, w, perm)
            np.testing.assert_allclose(a, b, rtol=1e-7, atol=1e-9)

    def test_exact_instance_zero_residual(self):
        # noiseless exactly decoupled tensor: the stacked system is solved
        # exactly at the true factor
        rng = np.random.default_rng(10)
        f, (W, V, g) = synth_decoupled(rng, m=2, n=2, d=2, r=2)
        pts = rng.standard_normal((3, 2))
        T = build_jacobian_tensor(f, pts)
        x = pts @ V
        H = np.column_stack(
            [
                np.polynomial.polynomial.polyval(
                    x[:, j], np.polynomial.polynomial.polyder(g[j])
                )
                for j in range(2)
            ]
        )
        F_true = CpdFactors(W, V, H)
        np.testing.assert_allclose(cpd_reconstruct(F_true), T, atol=1e-10)

        sigma_f = CoeffCovariance(random_psd(rng, 10))
        split = svd_split(sigma_dense(sigma_f, f.basis, 2, pts).materialize())
        assert split.U2.shape[1] > 0
        for mode in (1, 2, 3):
            perm = mode_permutation(mode, (2, 2, 3))
            new, _ = als_update_weighted_dense(T, F_true, mode, split, perm)
            truth = (F_true.W, F_true.V, F_true.H)[mode - 1]
            np.testing.assert_allclose(new, truth, rtol=1e-8, atol=1e-8)
            # null-space constraint of the residual at the updated factor
            parts = [F_true.W, F_true.V, F_true.H]
            parts[mode - 1] = new
            res = vec(T - cpd_reconstruct(CpdFactors(*parts)))
            assert np.abs(split.U2.T @ res).max() <= 1e-8

    def test_underdetermined_is_flagged(self):
        rng = np.random.default_rng(11)
        dims = (2, 2, 12)
        T = rng.standard_normal(dims)
        F = random_factors(rng, dims, 3)
        S = random_psd(rng, 48, rank=5)
        split = svd_split(S)
        perm = mode_permutation(3, dims)
        new, deficient = als_update_weighted_dense(T, F, 3, split, perm)
        assert new.shape == (12, 3)
        assert np.all(np.isfinite(new))


class TestWeightedCost:
    def test_exact_cpd_is_zero(self):
        rng = np.random.default_rng(12)
        F = random_factors(rng, (2, 3, 4), 2)
        T = cpd_reconstruct(F)
        assert weighted_cost(T, F, None) <= 1e-20 * np.sum(T**2)

    def test_identity_weight_equals_unweighted(self):
        rng = np.random.default_rng(13)
        dims = (2, 2, 3)
        T = rng.standard_normal(dims)
        F = random_factors(rng, dims, 2)
        w = DiagonalWeight(np.ones(12))
        assert weighted_cost(T, F, w) == pytest.approx(weighted_cost(T, F, None))

    def test_dense_seminorm_matches_pinv(self):
        rng = np.random.default_rng(14)
        basis = basis_enumerate(2, 2)
        sigma_f = CoeffCovariance(random_psd(rng, 10))
        pts = rng.standard_normal((3, 2))
        cov = sigma_dense(sigma_f, basis, 2, pts)
        S = cov.materialize()
        split = svd_split(S)
        w = SplitWeight(split)
        dims = (2, 2, 3)
        T = rng.standard_normal(dims)
        F = random_factors(rng, dims, 2)
        res = vec(T - cpd_reconstruct(F))
        oracle = res @ np.linalg.pinv(S, hermitian=True) @ res
        assert weighted_cost(T, F, w) == pytest.approx(oracle, rel=1e-7)

    def test_accepts_jac_covariance(self):
        rng = np.random.default_rng(15)
        basis = basis_enumerate(2, 2)
        sigma_f = CoeffCovariance(random_psd(rng, 10) + np.eye(10))
        pts = rng.standard_normal((3, 2))
        cov = sigma_slicewise(sigma_f, basis, 2, pts)
        dims = (2, 2, 3)
        T = rng.standard_normal(dims)
        F = random_factors(rng, dims, 2)
        direct = weighted_cost(T, F, weight_from(cov))
        assert weighted_cost(T, F, cov) == pytest.approx(direct)


class TestRunWals:
    def test_rank_one_exact_recovery(self):
        rng = np.random.default_rng(16)
        F = random_factors(rng, (3, 2, 5), 1)
        T = cpd_reconstruct(F)
        cfg = AlsConfig(r=1, max_iters=200, restarts=1, rng_seed=0)
        fitted, report = run_wals(T, None, cfg)
        assert report.final_cost <= 1e-16 * np.sum(T**2)
        assert report.iterations <= 200

    def test_max_iters_exit(self):
        rng = np.random.default_rng(17)
        T = rng.standard_normal((2, 2, 2))
        cfg = AlsConfig(r=1, max_iters=1, restarts=1)
        _, report = run_wals(T, None, cfg)
        assert report.exit_reason == "max_iters"
        assert report.iterations == 1
        assert len(report.cost_trace) == report.iterations + 1

    def test_zero_tolerance_runs_to_max_iters(self):
        rng = np.random.default_rng(18)
        F = random_factors(rng, (2, 2, 2), 1)
        T = cpd_reconstruct(F)
        cfg = AlsConfig(r=1, tol_rel_step=0.0, max_iters=7, restarts=1)
        _, report = run_wals(T, None, cfg)
        assert report.exit_reason == "max_iters"
        assert report.iterations == 7

    def test_seeded_at_exact_cpd_exits_fast(self):
        rng = np.random.default_rng(19)
        F = random_factors(rng, (2, 2, 4), 2)
        T = cpd_reconstruct(F)
        cfg = AlsConfig(r=2, restarts=1, rng_seed=0)
        _, report = run_wals(T, None, cfg, init_factors=F)
        assert report.exit_reason == "tolerance"
        assert report.iterations <= 2

    def test_weighted_cost_trace_non_increasing(self):
        rng = np.random.default_rng(20)
        for _ in range(20):
            dims = (2, 2, 2)
            T = rng.standard_normal(dims)
            w = DenseWeight(random_psd(rng, 8) + 8 * np.eye(8))
            cfg = AlsConfig(r=2, max_iters=40, restarts=1, rng_seed=int(rng.integers(1 << 31)))
            _, report = run_wals(T, w, cfg)
            trace = np.array(report.cost_trace)
            assert np.all(np.diff(trace) <= 1e-12 * max(trace[0], 1.0))

    def test_all_restarts_diverged_raises(self):
        rng = np.random.default_rng(21)
        T = rng.standard_normal((2, 2, 2)) * 1e200
        w = DiagonalWeight(np.full(8, 1e200))
        cfg = AlsConfig(r=1, max_iters=3, restarts=2)
        with pytest.raises(RuntimeError, match="diverged"):
            run_wals(T, w, cfg)

    def test_restart_costs_recorded(self):
        rng = np.random.default_rng(22)
        T = rng.standard_normal((2, 2, 3))
        cfg = AlsConfig(r=1, max_iters=30, restarts=3)
        _, report = run_wals(T, None, cfg)
        assert len(report.restart_costs) == 3
        assert report.final_cost == pytest.approx(min(report.restart_costs))


class TestStepSize:
    def test_hand_computed_value(self):
        old = CpdFactors(np.array([[1.0]]), np.array([[2.0]]), np.array([[2.0]]))
        new = CpdFactors(np.array([[2.0]]), np.array([[2.0]]), np.array([[4.0]]))
        # delta norms: 1, 0, 2 -> sqrt(5); new norms: 2, 2, 4 -> sqrt(24)
        assert _step_size(new, old) == pytest.approx(math.sqrt(5.0 / 24.0))


class TestReconstructBranches:
    def test_exact_recovery_of_known_branches(self):
        rng = np.random.default_rng(23)
        f, (W, V, g) = synth_decoupled(rng, d=3, r=2)
        pts = rng.standard_normal((40, 2))
        T = build_jacobian_tensor(f, pts)
        x = pts @ V
        H = np.column_stack(
            [
                np.polynomial.polynomial.polyval(
                    x[:, j], np.polynomial.polynomial.polyder(g[j])
                )
                for j in range(2)
            ]
        )
        model = reconstruct_branches(CpdFactors(W, V, H), f, pts)
        for j in range(2):
            np.testing.assert_allclose(model.g[j], g[j], rtol=1e-8, atol=1e-8)
        composed = model.compose(f.basis)
        delta = np.linalg.norm(coeff_vector(composed) - coeff_vector(f))
        assert delta <= 1e-8 * np.linalg.norm(coeff_vector(f))

    def test_scaling_indeterminacy_invariance(self):
        rng = np.random.default_rng(24)
        f, (W, V, g) = synth_decoupled(rng, d=3, r=2)
        pts = rng.standard_normal((40, 2))
        x = pts @ V
        H = np.column_stack(
            [
                np.polynomial.polynomial.polyval(
                    x[:, j], np.polynomial.polynomial.polyder(g[j])
                )
                for j in range(2)
            ]
        )
        base = reconstruct_branches(CpdFactors(W, V, H), f, pts).compose(f.basis)
        alpha = 2.5
        V2, H2 = V.copy(), H.copy()
        V2[:, 0] *= alpha
        # H holds derivative samples; rescaling the abscissae rescales them
        H2[:, 0] /= alpha
        other = reconstruct_branches(CpdFactors(W / 1.0, V2, H2), f, pts).compose(
            f.basis
        )
        np.testing.assert_allclose(base.coeffs, other.coeffs, rtol=1e-8, atol=1e-8)

    def test_constant_derivative_is_mean(self):
        rng = np.random.default_rng(25)
        basis = basis_enumerate(2, 1)
        W = np.array([[1.0], [0.5]])
        V = np.array([[1.0], [0.0]])
        f = compose_branches(W, V, [np.array([0.3, 2.0])], basis)
        pts = rng.standard_normal((10, 2))
        H = 2.0 * np.ones((10, 1)) + 0.0
        model = reconstruct_branches(CpdFactors(W, V, H), f, pts)
        assert model.g[0][1] == pytest.approx(np.mean(H[:, 0]))

    def test_zero_constants_give_zero_kappa(self):
        rng = np.random.default_rng(26)
        f, (W, V, g) = synth_decoupled(rng, d=2, r=2)
        # remove all constant contributions
        for j in range(2):
            g[j][0] = 0.0
        f = compose_branches(W, V, g, f.basis)
        pts = rng.standard_normal((30, 2))
        x = pts @ V
        H = np.column_stack(
            [
                np.polynomial.polynomial.polyval(
                    x[:, j], np.polynomial.polynomial.polyder(g[j])
                )
                for j in range(2)
            ]
        )
        model = reconstruct_branches(CpdFactors(W, V, H), f, pts)
        for j in range(2):
            assert abs(model.g[j][0] - g[j][0]) <= 1e-8

    def test_degenerate_branch_is_dropped_with_diagnostic(self):
        rng = np.random.default_rng(27)
        f, (W, V, g) = synth_decoupled(rng, d=2, r=2)
        pts = rng.standard_normal((20, 2))
        V0 = V.copy()
        V0[:, 1] = 0.0
        with pytest.warns(UserWarning, match="degenerate"):
            model = reconstruct_branches(CpdFactors(W, V0, np.ones((20, 2))), f, pts)
        assert model.r == 1

    def test_all_branches_degenerate_raises(self):
        rng = np.random.default_rng(50)
        f, (W, V, g) = synth_decoupled(rng, d=2, r=2)
        pts = rng.standard_normal((20, 2))
        with pytest.raises(RuntimeError, match="all branches"):
            reconstruct_branches(
                CpdFactors(W, np.zeros_like(V), np.ones((20, 2))), f, pts
            )

    def test_too_few_points(self):
        rng = np.random.default_rng(28)
        f, (W, V, g) = synth_decoupled(rng, d=3, r=2)
        pts = rng.standard_normal((3, 2))
        with pytest.raises(ValueError, match="distinct"):
            reconstruct_branches(CpdFactors(W, V, np.ones((3, 2))), f, pts)


class TestPipeline:
    def test_exact_recovery(self):
        rng = np.random.default_rng(29)
        f, _ = synth_decoupled(rng)
        cfg = AlsConfig(r=2, n_points=60, restarts=3, rng_seed=5)
        model, report = decouple_pipeline(f, None, cfg)
        assert report.coeff_rel_error <= 1e-6
        assert report.weighted_coeff_error is None

    def test_weighted_run_reports_both_metrics(self):
        rng = np.random.default_rng(30)
        f, _ = synth_decoupled(rng, d=2)
        dim = (f.basis.size - 1) * 2
        sigma_f = CoeffCovariance(random_psd(rng, dim) + np.eye(dim))
        cfg = AlsConfig(
            r=2, n_points=40, restarts=2, rng_seed=0, weight_kind="slice", max_iters=100
        )
        model, report = decouple_pipeline(f, sigma_f, cfg)
        assert report.coeff_rel_error is not None
        assert report.weighted_coeff_error is not None
        assert report.weight_kind == "slice"

    def test_weight_kind_requires_covariance(self):
        rng = np.random.default_rng(31)
        f, _ = synth_decoupled(rng, d=2)
        cfg = AlsConfig(r=2, weight_kind="dense")
        with pytest.raises(ValueError, match="covariance"):
            decouple_pipeline(f, None, cfg)

    def test_overparameterized_rank_not_worse(self):
        rng = np.random.default_rng(32)
        f, _ = synth_decoupled(rng, d=2, r=1)
        cfg1 = AlsConfig(r=1, n_points=40, restarts=2, rng_seed=1, max_iters=200)
        cfg2 = AlsConfig(r=2, n_points=40, restarts=2, rng_seed=1, max_iters=200)
        _, rep1 = decouple_pipeline(f, None, cfg1)
        _, rep2 = decouple_pipeline(f, None, cfg2)
        assert rep2.final_unweighted_cost <= rep1.final_unweighted_cost + 1e-10

    def test_dense_weight_pipeline_runs(self):
        rng = np.random.default_rng(33)
        f, _ = synth_decoupled(rng, d=2)
        dim = (f.basis.size - 1) * 2
        sigma_f = CoeffCovariance(random_psd(rng, dim) + np.eye(dim))
        cfg = AlsConfig(
            r=2, n_points=20, restarts=2, rng_seed=0, weight_kind="dense", max_iters=60
        )
        model, report = decouple_pipeline(f, sigma_f, cfg)
        assert np.isfinite(report.final_cost)
        assert np.isfinite(report.final_unweighted_cost)


class TestConfigValidation:
    def test_bad_weight_kind(self):
        with pytest.raises(ValueError):
            AlsConfig(weight_kind="banana")

    def test_bad_rank(self):
        with pytest.raises(ValueError):
            AlsConfig(r=0)

    def test_bad_sampling(self):
        with pytest.raises(ValueError):
            AlsConfig(sampling="cauchy")
