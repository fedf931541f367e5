from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ctfs.episodes import EpisodeSpec, SyntheticConfig, make_synthetic_episode
from ctfs.preprocess import PreprocessConfig, adapt_episode, adapt_features


def test_identity_power():
    x = np.random.default_rng(0).uniform(0, 3, size=(6, 4))
    out = adapt_features(x, PreprocessConfig(beta=1.0, epsilon=0.0))
    assert np.allclose(out, x / np.linalg.norm(x, axis=1, keepdims=True), rtol=0, atol=1e-15)


def test_square_root_by_hand():
    out = adapt_features([[4.0, 0.0]], PreprocessConfig(beta=0.5, epsilon=0.0))
    assert out.tolist() == [[1.0, 0.0]]
    raw = adapt_features([[4.0, 0.0]], PreprocessConfig(beta=0.5, epsilon=0.0, l2_normalize=False))
    assert raw.tolist() == [[2.0, 0.0]]


def test_square_root_oracle():
    x = np.random.default_rng(1).uniform(0, 5, size=(10, 8))
    out = adapt_features(x, PreprocessConfig(beta=0.5, epsilon=1e-6, l2_normalize=False))
    for r in range(10):
        for c in range(8):
            assert out[r, c] == pytest.approx((x[r, c] + 1e-6) ** 0.5, rel=1e-14)


def test_log_transform():
    x = np.array([[0.0, np.e - 1]])
    out = adapt_features(x, PreprocessConfig(transform="log", l2_normalize=False))
    assert np.allclose(out, [[0.0, 1.0]])


def test_zero_row_kept_and_counted():
    diag = Counter()
    out = adapt_features(np.zeros((2, 3)), PreprocessConfig(transform="none"), diag)
    assert np.all(out == 0) and diag["zero_norm_rows"] == 2


def test_center_uses_episode_statistic():
    x = np.random.default_rng(2).uniform(size=(7, 3))
    out = adapt_features(x, PreprocessConfig(center=True, l2_normalize=False))
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)


def test_negative_inputs_shifted():
    out = adapt_features([[-2.0, 1.0]], PreprocessConfig(epsilon=0.0, l2_normalize=False))
    assert np.allclose(out, [[0.0, np.sqrt(3.0)]])


@pytest.mark.parametrize("kwargs", [dict(beta=0.0), dict(epsilon=-1.0), dict(transform="cube")])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        PreprocessConfig(**kwargs)


def test_episode_joint():
    spec = EpisodeSpec(n_ways=3, k_shots=2, m_queries=9, dirichlet_alpha=2.0, feature_dim=4)
    ep = make_synthetic_episode(spec, SyntheticConfig(dim=4), np.random.default_rng(3))
    cfg = PreprocessConfig(center=True)
    out = adapt_episode(ep, cfg)
    both = adapt_features(np.vstack([ep.support, ep.query]), cfg)
    assert np.array_equal(out.support, both[:6]) and np.array_equal(out.query, both[6:])
    assert np.array_equal(out.query_labels, ep.query_labels)


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=finite),
       st.sampled_from(["power", "log", "none"]), st.booleans())
def test_finite_and_unit_norm(x, transform, center):
    out = adapt_features(x, PreprocessConfig(transform=transform, center=center))
    assert np.all(np.isfinite(out))
    norms = np.linalg.norm(out, axis=1)
    assert np.all((norms == 0) | (np.abs(norms - 1) <= 1e-9))


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0.05, 1.0), st.sampled_from(["power", "log"]))
def test_monotone(v1, v2, beta, transform):
    lo, hi = sorted((v1, v2))
    cfg = PreprocessConfig(beta=beta, transform=transform, l2_normalize=False)
    out = adapt_features([[lo], [hi]], cfg)
    assert out[0, 0] <= out[1, 0]
