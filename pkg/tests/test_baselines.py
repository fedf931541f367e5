import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctfs.baselines import (
    ConvergenceError,
    SinkhornConfig,
    marginal_residual,
    nearest_prototype,
    run_ot_uniform,
    sinkhorn_plan,
)
from ctfs.episodes import Episode, EpisodeSpec, SyntheticConfig, make_synthetic_episode
from ctfs.preprocess import PreprocessConfig, adapt_episode


def _episode(seed, alpha=2.0, sep=8.0, d=32, k=1):
    spec = EpisodeSpec(n_ways=5, k_shots=k, m_queries=75, dirichlet_alpha=alpha, feature_dim=d)
    return make_synthetic_episode(spec, SyntheticConfig(dim=d, class_separation=sep), np.random.default_rng(seed))


def _two_class(query):
    query = np.asarray(query, dtype=float)
    return Episode(support=np.array([[0.0, 0.0], [2.0, 0.0]]), support_labels=np.array([0, 1]), query=query,
                   query_labels=np.zeros(len(query), dtype=int), class_counts=np.array([len(query), 0]))


class TestNearest:
    def test_query_at_prototype(self):
        ep = _two_class([[2.0, 0.0], [0.0, 0.0]])
        assert nearest_prototype(ep).tolist() == [1, 0]

    def test_tie(self):
        assert nearest_prototype(_two_class([[1.0, 0.0]])).tolist() == [0]

    def test_separable(self):
        accs = [np.mean(nearest_prototype(ep) == ep.query_labels) for ep in (_episode(s) for s in range(200))]
        assert np.mean(accs) >= 0.95

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 1000))
    def test_cosine_scale_invariance(self, scale, seed):
        ep = _episode(seed, sep=2.0, d=8)
        scaled = Episode(ep.support * scale, ep.support_labels, ep.query * scale, ep.query_labels, ep.class_counts)
        assert np.array_equal(nearest_prototype(ep, "cosine"), nearest_prototype(scaled, "cosine"))


class TestSinkhorn:
    def test_constant_cost(self):
        plan = sinkhorn_plan(np.ones((4, 3)), np.full(4, 0.25), np.full(3, 1 / 3))
        assert np.allclose(plan, 1 / 12, rtol=0, atol=1e-12)

    def test_diagonal_concentration(self):
        cost = np.array([[0.0, 1.0], [1.0, 0.0]])
        plan = sinkhorn_plan(cost, [0.5, 0.5], [0.5, 0.5], SinkhornConfig(entropic_reg=0.05))
        assert plan[0, 0] >= 0.49 and plan[1, 1] >= 0.49
        # smaller regularisation moves strictly closer to the exact diagonal plan
        sharper = sinkhorn_plan(cost, [0.5, 0.5], [0.5, 0.5], SinkhornConfig(entropic_reg=0.02))
        assert sharper[0, 0] > plan[0, 0]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_residual_contract(self, m, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(n))
        plan = sinkhorn_plan(rng.uniform(0, 2, size=(m, n)), a, b)
        assert marginal_residual(plan, a, b) <= 1e-4

    def test_large_costs_finite(self):
        # cost / reg reaches 1e7: no overflow in the potentials or the plan
        cost = np.random.default_rng(1).uniform(0, 1e4, size=(6, 3))
        loose = SinkhornConfig(entropic_reg=1e-3, tol=2.0)
        plan = sinkhorn_plan(cost, np.full(6, 1 / 6), np.full(3, 1 / 3), loose)
        assert np.all(np.isfinite(plan)) and plan.sum() == pytest.approx(1.0)

    def test_large_structured_costs_converge(self):
        cost = 1e4 * (1 - np.kron(np.eye(3), np.ones((2, 1))))
        plan = sinkhorn_plan(cost, np.full(6, 1 / 6), np.full(3, 1 / 3), SinkhornConfig(entropic_reg=1e-3))
        assert marginal_residual(plan, np.full(6, 1 / 6), np.full(3, 1 / 3)) <= 1e-4
        assert np.allclose(plan, np.kron(np.eye(3), np.ones((2, 1))) / 6, atol=1e-12)

    def test_convergence_error(self):
        cost = np.random.default_rng(2).uniform(0, 1, size=(30, 5))
        cfg = SinkhornConfig(entropic_reg=1e-4, sinkhorn_iters=1, max_extension=1, tol=1e-12)
        with pytest.raises(ConvergenceError):
            sinkhorn_plan(cost, np.full(30, 1 / 30), np.full(5, 0.2), cfg)

    @pytest.mark.parametrize("kwargs", [dict(entropic_reg=0.0), dict(sinkhorn_iters=0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            SinkhornConfig(**kwargs)


class TestOtUniform:
    def test_uniform_column_mass(self):
        res = run_ot_uniform(adapt_episode(_episode(0), PreprocessConfig()))
        assert np.allclose(res.column_mass, 15.0, atol=1e-3)

    def test_balanced_separable(self):
        spec = EpisodeSpec(n_ways=5, k_shots=1, m_queries=75, dirichlet_alpha=None, feature_dim=32)
        accs = []
        for s in range(200):
            ep = make_synthetic_episode(spec, SyntheticConfig(dim=32, class_separation=8.0), np.random.default_rng(s))
            accs.append(run_ot_uniform(adapt_episode(ep, PreprocessConfig()), SinkhornConfig(refinement_steps=5))
                        .accuracy(ep.query_labels))
        assert np.mean(accs) >= 0.95

    def test_deterministic(self):
        ep = adapt_episode(_episode(3), PreprocessConfig())
        assert np.array_equal(run_ot_uniform(ep).forward, run_ot_uniform(ep).forward)
