"""Tests for the group-lasso solver, selection paths and graph assembly."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fungcn.errors import ConfigError, ContractError, ConvergenceError, DegenerateError
from fungcn.graph import (
    GroupLassoProblem,
    KnowledgeGraph,
    SelectionPath,
    SolverConfig,
    build_adjacency,
    estimate_graph,
    feature_select_path,
    finalize,
    lambda_max,
    solve_group_lasso,
)


def random_instance(rng, n=30, n_groups=4, k=3, r=3, corr=0.0):
    """Target block and predictor blocks, optionally sharing a latent factor."""
    latent = rng.standard_normal((n, k))
    blocks = [rng.standard_normal((n, k)) + corr * latent for _ in range(n_groups)]
    y = blocks[0] @ rng.standard_normal((k, r)) + 0.5 * rng.standard_normal((n, r)) + corr * latent[:, :r]
    return y, blocks


def fista_oracle(y, blocks, lam, iters=20000):
    """Accelerated proximal gradient with group soft-thresholding."""
    x = np.hstack(blocks)
    k = [b.shape[1] for b in blocks]
    edges = np.cumsum([0] + k)
    step = 1.0 / np.linalg.norm(x, 2) ** 2
    beta = np.zeros((x.shape[1], y.shape[1]))
    z, t = beta.copy(), 1.0
    for _ in range(iters):
        g = x.T @ (x @ z - y)
        u = z - step * g
        new = np.zeros_like(u)
        for a, b in zip(edges[:-1], edges[1:]):
            nrm = np.linalg.norm(u[a:b])
            if nrm > step * lam:
                new[a:b] = (1 - step * lam / nrm) * u[a:b]
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = new + (t - 1) / t_new * (new - beta)
        beta, t = new, t_new
    return beta


def objective(y, blocks, coefs, lam):
    fit = y - sum(b @ c for b, c in zip(blocks, coefs))
    return 0.5 * np.sum(fit**2) + lam * sum(np.linalg.norm(c) for c in coefs)


class TestLambdaMax:
    def test_closed_form(self):
        rng = np.random.default_rng(0)
        y, blocks = random_instance(rng)
        expected = max(np.linalg.norm(b.T @ y) for b in blocks)
        assert lambda_max(y, blocks) == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_zero_above_nonzero_below(self, seed):
        rng = np.random.default_rng(seed)
        y, blocks = random_instance(rng, corr=1.0)
        lmax = lambda_max(y, blocks)
        above = solve_group_lasso(y, blocks, 1.001 * lmax)
        below = solve_group_lasso(y, blocks, 0.9 * lmax)
        assert all(not np.any(c) for c in above)
        assert any(np.any(c) for c in below)

    def test_zero_blocks_raise(self):
        with pytest.raises(DegenerateError):
            lambda_max(np.ones((5, 2)), [np.zeros((5, 2)), np.zeros((5, 3))])


class TestSolver:
    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("frac", [0.05, 0.3, 0.7])
    def test_matches_proximal_gradient(self, seed, frac):
        rng = np.random.default_rng(seed)
        y, blocks = random_instance(rng, corr=0.8)
        lam = frac * lambda_max(y, blocks)
        ours = solve_group_lasso(y, blocks, lam)
        oracle = fista_oracle(y, blocks, lam)
        k = blocks[0].shape[1]
        ref = [oracle[i * k:(i + 1) * k] for i in range(len(blocks))]
        f_ours, f_ref = objective(y, blocks, ours, lam), objective(y, blocks, ref, lam)
        assert f_ours <= f_ref + 1e-6 * abs(f_ref)
        assert abs(f_ours - f_ref) <= 1e-6 * abs(f_ref)

    def test_kkt(self):
        rng = np.random.default_rng(3)
        y, blocks = random_instance(rng, corr=0.5)
        prob = GroupLassoProblem.from_blocks(y, blocks)
        for frac in [0.9, 0.5, 0.1, 0.01]:
            beta = prob.solve(frac * prob.lambda_max)
            assert prob.kkt_violation(beta, frac * prob.lambda_max) < 1e-6

    def test_zero_penalty_is_least_squares(self):
        rng = np.random.default_rng(1)
        y, blocks = random_instance(rng, n=40)
        coefs = solve_group_lasso(y, blocks, 0.0, config=SolverConfig(tolerance=1e-12))
        ols = np.linalg.lstsq(np.hstack(blocks), y, rcond=None)[0]
        np.testing.assert_allclose(np.vstack(coefs), ols, atol=1e-8)

    def test_warm_start_agrees(self):
        rng = np.random.default_rng(2)
        y, blocks = random_instance(rng, corr=0.6)
        lam = 0.2 * lambda_max(y, blocks)
        cold = solve_group_lasso(y, blocks, lam)
        warm = solve_group_lasso(y, blocks, lam, warm_start=solve_group_lasso(y, blocks, 0.3 * lambda_max(y, blocks)))
        for a, b in zip(cold, warm):
            np.testing.assert_allclose(a, b, atol=1e-6)

    def test_duplicated_target_selected_first(self):
        rng = np.random.default_rng(4)
        blocks = [rng.standard_normal((50, 3)) for _ in range(5)]
        y = blocks[2].copy()
        prob = GroupLassoProblem.from_blocks(y, blocks)
        beta = prob.solve(0.95 * prob.lambda_max)
        assert prob.active(beta) == [2]

    def test_negative_penalty(self):
        rng = np.random.default_rng(0)
        y, blocks = random_instance(rng)
        with pytest.raises(ContractError):
            solve_group_lasso(y, blocks, -1.0)

    def test_iteration_cap(self):
        rng = np.random.default_rng(0)
        y, blocks = random_instance(rng, corr=2.0)
        with pytest.raises(ConvergenceError) as err:
            solve_group_lasso(y, blocks, 0.01 * lambda_max(y, blocks), config=SolverConfig(max_iters=1, tolerance=1e-14))
        assert err.value.kkt_violation > 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.02, 0.98))
    def test_kkt_property(self, seed, frac):
        rng = np.random.default_rng(seed)
        y, blocks = random_instance(rng, n=20, n_groups=3, k=2, r=2, corr=0.7)
        prob = GroupLassoProblem.from_blocks(y, blocks)
        lam = frac * prob.lambda_max
        assert prob.kkt_violation(prob.solve(lam), lam) < 1e-6


def correlated_tensor(rng, n=120, p=6, k=3, strength=2.0):
    """Features 0 and 1 share a latent block; the rest are noise."""
    x = rng.standard_normal((n, p, k))
    latent = rng.standard_normal((n, k))
    x[:, 0] += strength * latent
    x[:, 1] += strength * latent
    return (x - x.mean(0)) / x.std(0)


class TestSelectionPath:
    def test_partner_selected_first(self):
        x = correlated_tensor(np.random.default_rng(0))
        path = feature_select_path(0, x)
        assert path.features[0] == 1
        assert path.selections[0][1] > 0.8

    def test_values_non_increasing_and_capped(self):
        x = correlated_tensor(np.random.default_rng(1), p=9)
        for j in range(9):
            path = feature_select_path(j, x, SolverConfig(p_max=3))
            cs = [c for _, c in path.selections]
            assert len(cs) <= 3
            assert all(a >= b for a, b in zip(cs, cs[1:]))
            assert j not in path.features

    def test_p_max_zero_is_empty(self):
        x = correlated_tensor(np.random.default_rng(2))
        assert feature_select_path(0, x, SolverConfig(p_max=0)).selections == ()

    def test_invalid_target(self):
        x = correlated_tensor(np.random.default_rng(2))
        with pytest.raises(ContractError):
            feature_select_path(9, x)

    def test_zero_predictors(self):
        x = np.zeros((10, 3, 2))
        x[:, 0] = np.random.default_rng(0).standard_normal((10, 2))
        with pytest.raises(DegenerateError):
            feature_select_path(0, x)

    @pytest.mark.parametrize(
        "selections",
        [((1, 0.5), (1, 0.4)), ((0, 0.5),), ((1, 1.5),), ((1, 0.4), (2, 0.5))],
    )
    def test_invalid_paths(self, selections):
        with pytest.raises(ContractError):
            SelectionPath(0, selections)


class TestAssembly:
    def test_hand_example(self):
        g = finalize(np.array([[1.0, 0.8], [0.6, 1.0]]), theta=0.5)
        np.testing.assert_allclose(g.a_sym, [[1.0, 0.7], [0.7, 1.0]], atol=1e-15)
        np.testing.assert_allclose(g.a_norm, g.a_sym / 1.7, atol=1e-15)
        assert g.edges() == [(0, 1, pytest.approx(0.7))]

    def test_pruned_to_identity(self):
        g = finalize(np.array([[1.0, 0.8], [0.6, 1.0]]), theta=0.75)
        np.testing.assert_array_equal(g.a_norm, np.eye(2))
        assert g.edges() == []

    def test_theta_is_inclusive(self):
        g = finalize(np.array([[1.0, 0.5], [0.5, 1.0]]), theta=0.5)
        assert g.a_sym[0, 1] == 0.5

    @pytest.mark.parametrize("theta", [0.0, 1.0, -0.1, 1.5])
    def test_theta_range(self, theta):
        with pytest.raises(ConfigError):
            finalize(np.eye(3), theta=theta)

    def test_adjacency_from_paths(self):
        paths = [SelectionPath(0, ((2, 0.9), (1, 0.3))), SelectionPath(1, ()), SelectionPath(2, ((0, 0.8),))]
        a = build_adjacency(paths, 3)
        expected = np.array([[1.0, 0.3, 0.9], [0.0, 1.0, 0.0], [0.8, 0.0, 1.0]])
        np.testing.assert_array_equal(a, expected)

    def test_duplicate_targets(self):
        with pytest.raises(ContractError):
            build_adjacency([SelectionPath(0, ()), SelectionPath(0, ())], 2)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 10_000), st.floats(0.05, 0.95))
    def test_normalized_properties(self, p, seed, theta):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0, 1, (p, p)) * (rng.uniform(size=(p, p)) < 0.5)
        np.fill_diagonal(a, 1.0)
        g = finalize(a, theta)
        np.testing.assert_allclose(g.a_norm, g.a_norm.T, atol=1e-15)
        assert np.all(np.linalg.eigvalsh(g.a_norm) <= 1 + 1e-12)
        assert np.all((g.a_sym == 0) | (g.a_sym >= theta))


class TestEstimateGraph:
    def test_recovers_pair(self):
        from fungcn.embedding import GRAPH, EmbeddedTensor, Modality

        x = correlated_tensor(np.random.default_rng(5), p=6)
        names = tuple(f"f{i}" for i in range(6))
        tensor = EmbeddedTensor(
            x, GRAPH, 3, np.zeros((6, 3)), np.ones((6, 3)), names, (Modality.scalar(),) * 6,
            tuple(range(120)), {}, {}, 0,
        )
        g = estimate_graph(tensor, theta=0.7)
        assert isinstance(g, KnowledgeGraph)
        assert (0, 1) in [(i, j) for i, j, _ in g.edges()]
        assert g.feature_names == names
        g2 = estimate_graph(tensor, theta=0.7, n_jobs=2)
        np.testing.assert_array_equal(g.a_raw, g2.a_raw)
