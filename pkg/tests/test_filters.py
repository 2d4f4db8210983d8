import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drone_audition.filters import (BeamformerWeights, BlockPlan, CovarianceSet, DemixingSet,
                                    FilterParams, LowRankWarning, SingularCovarianceError,
                                    apply_weights, blockwise_enhance, bss_separate,
                                    estimate_covariances, mwf_weights, oracle_permutation_align,
                                    selection_weights)
from drone_audition.stft import Spectrogram, StftConfig, istft, stft
from drone_audition.synth import EgoNoiseModel, MixSpec, mix_at_snr, synth_ego_noise, \
    synth_speech_surrogate
from drone_audition.wavio import AudioBuffer

SMALL = StftConfig(window_length=8, hop=4, sample_rate=8000)   # 5 bins


def _spec(bins_ftm, cfg=SMALL):
    """Spectrogram from an array indexed (bin, frame, channel)."""
    F, T, M = bins_ftm.shape
    n = (T - 1) * cfg.hop - cfg.pad + 1
    return Spectrogram(np.transpose(bins_ftm, (2, 1, 0)), cfg, n)


def _rand_spec(rng, F=5, T=40, M=3, cfg=SMALL):
    return _spec(rng.standard_normal((F, T, M)) + 1j * rng.standard_normal((F, T, M)), cfg)


# -- covariances ----------------------------------------------------------------


def test_single_frame_outer_product():
    b = np.zeros((5, 3, 2), complex)
    b[:, 1, :] = [1, 1j]
    S = _spec(b)
    with pytest.warns(LowRankWarning):
        cov = estimate_covariances(S, S, block=range(1, 2))
    np.testing.assert_allclose(cov.Rss[0], [[1, -1j], [1j, 1]])
    assert cov.frame_count == 1


def test_white_noise_covariance_is_scaled_identity(rng):
    sigma2 = 2.5
    X = np.sqrt(sigma2 / 2) * (rng.standard_normal((5, 4000, 4)) + 1j * rng.standard_normal((5, 4000, 4)))
    cov = estimate_covariances(_spec(X), _spec(X))
    for R in cov.Rvv:
        assert np.max(np.abs(R - sigma2 * np.eye(4))) < 0.05 * sigma2


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), T=st.integers(2, 30), M=st.integers(1, 5))
def test_covariances_hermitian_psd(seed, T, M):
    r = np.random.default_rng(seed)
    S = _rand_spec(r, T=T, M=M)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowRankWarning)
        cov = estimate_covariances(S, _rand_spec(r, T=T, M=M))
    for R in (cov.Rss, cov.Rvv):
        np.testing.assert_allclose(R, np.conj(np.swapaxes(R, 1, 2)), atol=1e-10)
        tr = np.real(np.trace(R, axis1=1, axis2=2))
        assert np.all(np.linalg.eigvalsh(R) >= -1e-10 * tr[:, None])


def test_covariance_config_mismatch(rng):
    with pytest.raises(ValueError):
        estimate_covariances(_rand_spec(rng), _rand_spec(rng, M=2))


# -- MWF ----------------------------------------------------------------------------


def _cov(Rss, Rvv):
    return CovarianceSet(np.asarray(Rss, complex), np.asarray(Rvv, complex), 100)


def test_scalar_wiener_gain():
    ss, vv, d = 2.0, 0.5, 1e-3
    w = mwf_weights(_cov([[[ss]]], [[[vv]]]), loading=d).w
    assert abs(w[0, 0] - ss / (ss + vv + d * vv)) < 1e-9


def test_rank_one_parallel_to_steering(rng):
    M = 6
    d = rng.standard_normal(M) + 1j * rng.standard_normal(M)
    Rss = 3.0 * np.outer(d, d.conj())
    Rvv = 0.2 * np.eye(M)
    w = mwf_weights(_cov(Rss[None], Rvv[None]), reference=2).w[0]
    brute = np.linalg.lstsq(Rss + Rvv + 1e-3 * 0.2 * np.eye(M), Rss[:, 2], rcond=None)[0]
    cos = lambda a, b: abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
    assert cos(w, brute) > 0.999 and cos(w, d) > 0.999


def test_zero_target_gives_zero_weights():
    w = mwf_weights(_cov(np.zeros((3, 2, 2)), np.tile(np.eye(2), (3, 1, 1)))).w
    assert not w.any()


def test_noise_free_bins_use_minimum_norm_solution(rng):
    d = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    Rss = np.outer(d, d.conj())[None]
    w = mwf_weights(_cov(Rss, np.zeros((1, 3, 3)))).w[0]
    # passes the target through unchanged: w^H d = d[ref]
    assert np.vdot(w, d) == pytest.approx(d[0])


def test_singular_after_escalation_raises():
    Rss = np.diag([1.0, 0.0])[None]
    Rvv = np.diag([1e-30, 0.0])[None]
    with pytest.raises(SingularCovarianceError):
        mwf_weights(_cov(Rss, Rvv))


def test_loading_escalation_recovers():
    Rss = np.diag([1.0, 0.0])[None]
    Rvv = np.diag([2e-6, 0.0])[None]
    # loaded cond = (1 + 1e-9)/1e-9 at first, 1e8 after one escalation
    w = mwf_weights(_cov(Rss, Rvv), cond_limit=5e8).w
    assert np.all(np.isfinite(w))
    assert w[0, 0].real == pytest.approx(1 / (1 + 2e-6 + 1e-8), rel=1e-13)


def test_reference_out_of_range():
    with pytest.raises(ValueError):
        mwf_weights(_cov(np.eye(2)[None], np.eye(2)[None]), reference=2)


def test_mwf_not_worse_than_reference_channel(rng):
    """Empirical MSE against the reference target is at most that of passthrough."""
    M, T = 4, 5000
    d = rng.standard_normal((5, M)) + 1j * rng.standard_normal((5, M))
    s = rng.standard_normal((5, T)) + 1j * rng.standard_normal((5, T))
    S = d[:, None, :] * s[:, :, None]
    V = 0.8 * (rng.standard_normal((5, T, M)) + 1j * rng.standard_normal((5, T, M)))
    Ss, Vs = _spec(S), _spec(V)
    X = Ss.with_bins(Ss.bins + Vs.bins)
    w = mwf_weights(estimate_covariances(Ss, Vs), loading=0.0)
    target = Ss.bins[0]
    err_w = np.mean(np.abs(apply_weights(w, X).bins[0] - target) ** 2, axis=0)
    err_ref = np.mean(np.abs(X.bins[0] - target) ** 2, axis=0)
    assert np.all(err_w <= err_ref)


# -- apply --------------------------------------------------------------------------


def test_selection_filter_returns_channel(rng):
    X = _rand_spec(rng)
    y = apply_weights(selection_weights(5, 3, 1), X)
    np.testing.assert_array_equal(y.bins[0], X.bins[1])


def test_apply_is_linear(rng):
    A, B = _rand_spec(rng), _rand_spec(rng)
    w = BeamformerWeights(rng.standard_normal((5, 3)) + 1j * rng.standard_normal((5, 3)))
    lhs = apply_weights(w, A.with_bins(2 * A.bins - 1j * B.bins)).bins
    rhs = 2 * apply_weights(w, A).bins - 1j * apply_weights(w, B).bins
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_apply_shape_mismatch(rng):
    with pytest.raises(ValueError):
        apply_weights(selection_weights(5, 2), _rand_spec(rng))


# -- BSS ----------------------------------------------------------------------------


def _two_source_bins(rng, F=5, T=600, A=None):
    s = rng.gamma(0.3, 1.0, (2, F, T)) * np.exp(2j * np.pi * rng.random((2, F, T)))
    if A is None:
        A = rng.standard_normal((F, 2, 2)) + 1j * rng.standard_normal((F, 2, 2))
    img = [A[:, None, :, j] * s[j][:, :, None] for j in range(2)]   # (F, T, M)
    return s, A, img


def _sir(w, A, s):
    g = [np.abs(np.einsum("fm,fm->f", w.conj(), A[:, :, j])) ** 2 * np.mean(np.abs(s[j]) ** 2, 1)
         for j in range(2)]
    return 10 * np.log10(g[0] / g[1])


def test_bss_separates_and_aligns(rng):
    s, A, img = _two_source_bins(rng)
    X = _spec(img[0] + img[1])
    d = oracle_permutation_align(bss_separate(X, seed=1, n_components=2), X, _spec(img[0]))
    assert np.all(_sir(d.weights().w, A, s) > 20)
    # the chosen output tracks source 1
    y = apply_weights(d.weights(), X).bins[0]
    for f in range(5):
        assert np.corrcoef(np.abs(y[:, f]), np.abs(s[0, f]))[0, 1] > 0.9


def test_identity_mixture_stays_diagonal(rng):
    s, A, img = _two_source_bins(rng, A=np.tile(np.eye(2, dtype=complex), (5, 1, 1)))
    X = _spec(img[0] + img[1])
    d = bss_separate(X, seed=0, n_components=2)
    G = np.abs(d.W) ** 2
    dom = G.max(axis=2)
    assert np.all(10 * np.log10(dom / (G.sum(axis=2) - dom)) > 20)


def test_bss_deterministic(rng):
    X = _rand_spec(rng, T=100, M=3)
    a, b = bss_separate(X, seed=4), bss_separate(X, seed=4)
    np.testing.assert_array_equal(a.W, b.W)
    assert not np.array_equal(a.W, bss_separate(X, seed=5).W)


def test_bss_component_count_and_errors(rng):
    X = _rand_spec(rng, T=40, M=3)
    assert bss_separate(X).n_outputs == 3
    assert bss_separate(_rand_spec(rng, T=25, M=3)).n_outputs == 2
    with pytest.raises(ValueError):
        bss_separate(_rand_spec(rng, T=15, M=3))
    with pytest.raises(ValueError):
        bss_separate(_rand_spec(rng, M=1))


def test_alignment_invariant_to_row_permutation(rng):
    s, A, img = _two_source_bins(rng)
    X, S = _spec(img[0] + img[1]), _spec(img[0])
    d = bss_separate(X, seed=2, n_components=2)
    perm = np.array([rng.permutation(2) for _ in range(5)])
    shuffled = DemixingSet(np.take_along_axis(d.W, perm[:, :, None], axis=1), d.converged, d.n_iter)
    w1 = oracle_permutation_align(d, X, S).weights().w
    w2 = oracle_permutation_align(shuffled, X, S).weights().w
    np.testing.assert_allclose(w1, w2, atol=1e-12)


def test_minimal_distortion_with_identity_demixing(rng):
    _, _, img = _two_source_bins(rng)
    S = _spec(img[0])
    # channel 0 also picks up an independent interferer, so channel 1 is the clean match
    X = img[0].copy()
    X[:, :, 0] += rng.standard_normal(X.shape[:2]) + 1j * rng.standard_normal(X.shape[:2])
    X = _spec(X)
    eye = DemixingSet(np.tile(np.eye(2, dtype=complex), (5, 1, 1)), np.ones(5, bool), np.zeros(5, int))
    d = oracle_permutation_align(eye, X, S, reference=1)
    assert np.all(d.selected == 1)
    y = apply_weights(d.weights(1), X).bins[0]
    np.testing.assert_allclose(y, S.bins[1], atol=1e-6)


def test_silent_bin_reuses_previous_choice(rng):
    s, A, img = _two_source_bins(rng)
    X = _spec(img[0] + img[1])
    oracle = img[0].copy()
    oracle[3] = 0
    d = oracle_permutation_align(bss_separate(X, seed=1, n_components=2), X, _spec(oracle))
    assert d.selected[3] == d.selected[2]


def test_unaligned_set_has_no_weights(rng):
    with pytest.raises(ValueError):
        bss_separate(_rand_spec(rng, T=40, M=2)).weights()


# -- block processing ------------------------------------------------------------


def test_block_plan():
    plan = BlockPlan.for_signal(25 * 8000, 8000, 4.0)
    assert plan.n_blocks == 6 and plan.n_samples == 24 * 8000
    assert plan.blocks[0] == (0, 32000) and plan.blocks[-1] == (160000, 192000)
    assert all(b[1] == c[0] for b, c in zip(plan.blocks, plan.blocks[1:]))


@pytest.fixture(scope="module")
def scene():
    speech = synth_speech_surrogate(9.0, 8000, seed=2)
    noise = synth_ego_noise(EgoNoiseModel.hovering(), 9.0, 8000)
    return mix_at_snr(speech, noise, MixSpec(-10.0))


@pytest.mark.parametrize("method", ["mwf", "bss", "unprocessed"])
def test_shadow_additivity(scene, method):
    mix, s, v = scene
    r = blockwise_enhance(mix, s, v, method)
    assert r.enhanced.n_frames == 8 * 8000 and r.enhanced.channels == 1
    diff = r.enhanced.samples - r.shadow_speech.samples - r.shadow_noise.samples
    assert np.linalg.norm(diff) <= 1e-6 * np.linalg.norm(r.enhanced.samples)


def test_unprocessed_is_reference_channel(scene):
    mix, s, v = scene
    r = blockwise_enhance(mix, s, v, "unprocessed")
    np.testing.assert_allclose(r.enhanced.samples[0], mix.samples[0, :64000], atol=1e-12)


def test_mwf_without_noise_returns_reference_speech(scene):
    _, s, _ = scene
    zero = AudioBuffer(np.zeros_like(s.samples), 8000)
    r = blockwise_enhance(s, s, zero, "mwf")
    ref = s.samples[0, :64000]
    assert np.linalg.norm(r.enhanced.samples[0] - ref) <= 1e-3 * np.linalg.norm(ref)


@pytest.mark.parametrize("method", ["mwf", "bss"])
def test_block_locality(scene, method):
    mix, s, v = scene
    base = blockwise_enhance(mix, s, v, method)
    v2 = v.copy()
    v2.samples[:, 40000:41000] *= 3.0
    mix2 = AudioBuffer(s.samples + v2.samples, 8000)
    other = blockwise_enhance(mix2, s, v2, method)
    np.testing.assert_array_equal(other.enhanced.samples[0, :32000], base.enhanced.samples[0, :32000])
    assert not np.array_equal(other.enhanced.samples[0, 32000:], base.enhanced.samples[0, 32000:])


def test_short_blocks_are_skipped_with_warning(scene):
    mix, s, v = scene
    plan = BlockPlan.for_signal(mix.n_frames, 8000, 0.5)
    with pytest.warns(UserWarning, match="skipped"):
        r = blockwise_enhance(mix, s, v, "bss", plan)
    assert r.skipped_blocks == tuple(range(plan.n_blocks))
    assert not r.enhanced.samples.any()


def test_enhance_input_validation(scene):
    mix, s, v = scene
    with pytest.raises(ValueError):
        blockwise_enhance(mix, s, v, "magic")
    with pytest.raises(ValueError):
        blockwise_enhance(mix, s.slice(0, 100), v, "mwf")
    short = mix.slice(0, 1000)
    with pytest.raises(ValueError):
        blockwise_enhance(short, s.slice(0, 1000), v.slice(0, 1000), "mwf")


def test_filter_params_are_used(scene):
    mix, s, v = scene
    a = blockwise_enhance(mix, s, v, "bss", params=FilterParams(seed=0, bss_iterations=20))
    b = blockwise_enhance(mix, s, v, "bss", params=FilterParams(seed=0, bss_iterations=20))
    c = blockwise_enhance(mix, s, v, "bss", params=FilterParams(seed=9, bss_iterations=20))
    np.testing.assert_array_equal(a.enhanced.samples, b.enhanced.samples)
    assert not np.array_equal(a.enhanced.samples, c.enhanced.samples)
