import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from flowplan import world as W
from flowplan.metrics import (
    FeatureStats,
    alignment_from_events,
    alignment_score,
    feature_stats,
    frechet_distance,
    inception_score,
    is_analog,
    kl_divergence,
    kl_event_divergence,
    pooled_features,
    psd_sqrt,
    recon_metrics,
    set_f1,
)
from flowplan.world import C_AC, K, T, PromptSpec


def stats1(mu, var):
    return FeatureStats(np.array([mu]), np.array([[var]]))


def scipy_fd(a: FeatureStats, b: FeatureStats) -> float:
    covmean = scipy.linalg.sqrtm(a.cov @ b.cov).real
    d = a.mean - b.mean
    return float(d @ d + np.trace(a.cov + b.cov - 2 * covmean))


def test_fd_one_dimensional_cases():
    assert frechet_distance(stats1(0, 1), stats1(0, 1)) == pytest.approx(0.0, abs=1e-6)
    assert frechet_distance(stats1(0, 1), stats1(1, 1)) == pytest.approx(1.0, abs=1e-6)
    assert frechet_distance(stats1(0, 4), stats1(0, 1)) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_fd_matches_scipy_sqrtm(seed):
    rng = np.random.default_rng(seed)
    a = feature_stats(rng.standard_normal((200, 6)))
    b = feature_stats(rng.standard_normal((150, 6)) * 1.7 + 0.3)
    assert frechet_distance(a, b) == pytest.approx(scipy_fd(a, b), rel=1e-6)


@given(st.integers(0, 10_000))
def test_fd_symmetric_and_zero_on_equal(seed):
    rng = np.random.default_rng(seed)
    a = feature_stats(rng.standard_normal((40, 32)))
    b = feature_stats(rng.standard_normal((40, 32)) + 0.1)
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) <= 1e-8
    assert frechet_distance(a, a) <= 1e-8
    assert frechet_distance(a, b) > 0


def test_rank_deficient_covariances_are_regularised():
    x = np.random.default_rng(0).standard_normal((10, 32))
    s = feature_stats(x)
    assert np.all(np.linalg.eigvalsh(s.cov) > 0)
    np.testing.assert_array_equal(s.cov, s.cov.T)
    assert frechet_distance(s, feature_stats(x + 1.0)) == pytest.approx(32.0, rel=1e-6)


def test_psd_sqrt_squares_back():
    m = np.random.default_rng(1).standard_normal((5, 5))
    m = m @ m.T
    r = psd_sqrt(m)
    np.testing.assert_allclose(r @ r, m, atol=1e-10)


def test_feature_stats_shape_check():
    with pytest.raises(ValueError):
        FeatureStats(np.zeros(3), np.eye(2))


def test_kl_examples():
    assert float(kl_divergence([0.9, 0.1], [0.5, 0.5])) == pytest.approx(0.368, abs=1e-3)
    assert float(kl_divergence([0.2, 0.8], [0.2, 0.8])) == pytest.approx(0.0, abs=1e-12)


@given(hnp.arrays(np.float64, 8, elements=st.floats(0, 1)), hnp.arrays(np.float64, 8, elements=st.floats(0, 1)))
def test_kl_non_negative(p, q):
    assert float(kl_divergence(p, q)) >= -1e-12


def clips(n=20, seed=0):
    rng = np.random.default_rng(seed)
    return np.stack([W.render_clip(W.realize_timeline(W.sample_prompt(rng), rng), rng).spectrogram for _ in range(n)])


def test_kl_event_divergence_paired_and_unpaired():
    ref = clips(10)
    assert kl_event_divergence(ref, ref) == pytest.approx(0.0, abs=1e-12)
    assert kl_event_divergence(ref, clips(10, 1)) > 0
    assert kl_event_divergence(ref, ref[::-1], paired=False) == pytest.approx(0.0, abs=1e-12)


def test_is_bounds_and_examples():
    same = np.tile(np.array([[0.7, 0.1, 0.1, 0.1, 0, 0, 0, 0]]), (12, 1))
    assert inception_score(same) == 1.0
    # the 1e-8 smoothing shaves a few parts per million off the ideal 8
    assert inception_score(np.eye(K)) == pytest.approx(8.0, rel=1e-5)
    spec = clips(1)
    assert is_analog(np.repeat(spec, 5, axis=0)) == 1.0


@given(st.integers(0, 1000))
def test_is_within_bounds(seed):
    p = np.random.default_rng(seed).dirichlet(np.full(K, 0.3), size=30)
    assert 1.0 - 1e-9 <= inception_score(p) <= 8.0 + 1e-9


def test_alignment_examples():
    assert alignment_from_events([1, 2], PromptSpec((2, 1))) == (1.0, 0.5)
    assert alignment_score(np.zeros((T, C_AC)), PromptSpec((3, 4))) == (0.0, 0.0)
    assert set_f1([], [1]) == 0.0
    rng = np.random.default_rng(4)
    ok = 0
    for _ in range(200):
        p = W.sample_prompt(rng)
        ok += alignment_score(W.render_clip(W.realize_timeline(p, rng), rng), p) == (1.0, 1.0)
    assert ok / 200 >= 0.99


def test_metrics_are_pure():
    x = clips(8)
    before = x.copy()
    assert is_analog(x) == is_analog(x)
    assert kl_event_divergence(x, x[::-1]) == kl_event_divergence(x, x[::-1])
    np.testing.assert_array_equal(x, before)


def test_pooled_features_shape():
    assert pooled_features(clips(3)).shape == (3, 32)


def test_recon_examples():
    ref = clips(2)
    assert recon_metrics(ref, ref) == (0.0, 0.0)
    mel, multi = recon_metrics(ref, ref + 0.1)
    assert mel == pytest.approx(0.1) and multi == pytest.approx(0.1)
    with pytest.raises(ValueError):
        recon_metrics(ref, ref[:1])
