"""Oracle spatial filters: multichannel Wiener beamformer and per-bin ICA.

Both filters reduce to one complex weight vector per frequency bin, applied
as ``Y(f, t) = w(f)^H X(f, t)``. Because the filter is linear, the same
weights can be run over the clean speech and noise components separately
("shadow" outputs), which is what makes the output SNR measurable exactly.

Processing is block-wise: the signal is cut into non-overlapping blocks
(4 s by default, trailing remainder dropped) and each block gets its own
filter.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .stft import Spectrogram, StftConfig, istft, stft
from .wavio import AudioBuffer

log = logging.getLogger(__name__)

METHODS = ("bss", "mwf", "unprocessed")


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


class LowRankWarning(UserWarning):
    pass


@dataclass
class CovarianceSet:
    """Per-bin target (``Rss``) and noise (``Rvv``) spatial correlation, shape (F, M, M)."""

    Rss: np.ndarray
    Rvv: np.ndarray
    frame_count: int

    @property
    def n_channels(self) -> int:
        return self.Rss.shape[-1]


@dataclass
class BeamformerWeights:
    w: np.ndarray          # (F, M) complex
    reference_channel: int = 0


@dataclass
class DemixingSet:
    """Per-bin demixing in the sensor domain.

    ``W[f]`` has shape (K, M): K outputs from M microphones (K < M when the
    block is too short for a full-size separation). ``selected`` and
    ``scale`` are filled in by :func:`oracle_permutation_align`.
    """

    W: np.ndarray                       # (F, K, M)
    converged: np.ndarray               # (F,) bool
    n_iter: np.ndarray                  # (F,) int
    selected: np.ndarray | None = None  # (F,) int
    scale: np.ndarray | None = None     # (F, K) complex

    @property
    def n_outputs(self) -> int:
        return self.W.shape[1]

    def weights(self, reference_channel: int = 0) -> BeamformerWeights:
        """Equivalent beamformer for the selected, rescaled output."""
        if self.selected is None or self.scale is None:
            raise ValueError("demixing set has not been aligned")
        f = np.arange(self.W.shape[0])
        row = self.W[f, self.selected, :] * self.scale[f, self.selected][:, None]
        return BeamformerWeights(np.conj(row), reference_channel)


@dataclass(frozen=True)
class BlockPlan:
    block_len: int
    blocks: tuple           # ((start, end), ...) in samples
    sample_rate: int

    @classmethod
    def for_signal(cls, n_samples: int, sample_rate: int, block_s: float = 4.0) -> "BlockPlan":
        block_len = int(round(block_s * sample_rate))
        if block_len < 1:
            raise ValueError("block shorter than one sample")
        n_blocks = n_samples // block_len
        blocks = tuple((i * block_len, (i + 1) * block_len) for i in range(n_blocks))
        return cls(block_len, blocks, sample_rate)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def n_samples(self) -> int:
        return self.n_blocks * self.block_len


def _frame_slice(block, n_frames) -> slice:
    if block is None:
        return slice(0, n_frames)
    if isinstance(block, slice):
        return block
    r = range(*block) if isinstance(block, tuple) else block
    return slice(r.start, r.stop)


def _by_bin(spec: Spectrogram, frames: slice) -> np.ndarray:
    """(F, M, T) view of a spectrogram's frames."""
    return np.transpose(spec.bins[:, frames, :], (2, 0, 1))


def spatial_covariance(X: np.ndarray) -> np.ndarray:
    """(1/T) sum_t x x^H for X of shape (F, M, T), Hermitian-symmetrised."""
    T = X.shape[-1]
    R = X @ np.conj(np.swapaxes(X, -1, -2)) / max(T, 1)
    return 0.5 * (R + np.conj(np.swapaxes(R, -1, -2)))


def estimate_covariances(speech_spec: Spectrogram, noise_spec: Spectrogram,
                         block=None) -> CovarianceSet:
    """Oracle correlation matrices from the speech-only and noise-only STFTs.

    ``block`` selects frames (a ``range``, ``slice`` or ``(start, stop)``);
    ``None`` uses all frames.
    """
    if speech_spec.config != noise_spec.config:
        raise ValueError("speech and noise spectrograms use different STFT configs")
    if speech_spec.bins.shape != noise_spec.bins.shape:
        raise ValueError("speech and noise spectrograms differ in shape")
    frames = _frame_slice(block, speech_spec.n_frames)
    S = _by_bin(speech_spec, frames)
    V = _by_bin(noise_spec, frames)
    T = S.shape[-1]
    M = S.shape[1]
    if T == 0:
        raise ValueError("block contains no frames")
    if T < M:
        warnings.warn(f"{T} frames for {M} channels: covariances are rank deficient",
                      LowRankWarning, stacklevel=2)
    return CovarianceSet(spatial_covariance(S), spatial_covariance(V), T)


def _solve_batched(A, B):
    return np.linalg.solve(A, B)


def mwf_weights(cov: CovarianceSet, reference: int = 0, loading: float = 1e-3,
                cond_limit: float = 1e12, max_escalations: int = 3) -> BeamformerWeights:
    """Multichannel Wiener filter for the speech image at ``reference``.

    Per bin, ``w = (Rss + Rvv + loading * tr(Rvv)/M * I)^-1 Rss e_ref``.
    Bins whose loaded matrix is still ill-conditioned get the loading raised
    x10, up to ``max_escalations`` times, before
    :class:`SingularCovarianceError` is raised. Bins with no noise energy at
    all take the minimum-norm (pseudo-inverse) solution, the zero-loading
    limit.
    """
    Rss, Rvv = cov.Rss, cov.Rvv
    F, M, _ = Rss.shape
    if not 0 <= reference < M:
        raise ValueError(f"reference channel {reference} out of range")
    eye = np.eye(M)
    rhs = Rss[:, :, reference]
    base = loading * np.real(np.trace(Rvv, axis1=1, axis2=2)) / M
    w = np.zeros((F, M), dtype=np.complex128)

    noiseless = base <= 0.0
    if noiseless.any():
        R = Rss[noiseless] + Rvv[noiseless]
        w[noiseless] = (np.linalg.pinv(R, hermitian=True) @ rhs[noiseless][:, :, None])[:, :, 0]

    todo = np.flatnonzero(~noiseless)
    factor = 1.0
    for attempt in range(max_escalations + 1):
        if todo.size == 0:
            break
        R = Rss[todo] + Rvv[todo] + (factor * base[todo])[:, None, None] * eye
        ok = np.linalg.cond(R) < cond_limit
        if ok.any():
            sel = todo[ok]
            w[sel] = _solve_batched(R[ok], rhs[sel][:, :, None])[:, :, 0]
        todo = todo[~ok]
        factor *= 10.0
    if todo.size:
        raise SingularCovarianceError(
            f"{todo.size} bins singular after {max_escalations} loading escalations "
            f"(first bin {todo[0]})")
    return BeamformerWeights(w, reference)


def selection_weights(n_bins: int, n_channels: int, reference: int = 0) -> BeamformerWeights:
    """Weights that pass the reference channel through unchanged."""
    w = np.zeros((n_bins, n_channels), dtype=np.complex128)
    w[:, reference] = 1.0
    return BeamformerWeights(w, reference)


def apply_weights(weights: BeamformerWeights, spec: Spectrogram) -> Spectrogram:
    """Single-channel output ``Y(f, t) = w(f)^H X(f, t)``."""
    w = weights.w
    if w.shape != (spec.config.n_bins, spec.channels):
        raise ValueError(f"weights shape {w.shape} does not match spectrogram "
                         f"({spec.config.n_bins} bins, {spec.channels} channels)")
    y = np.einsum("fm,mtf->tf", np.conj(w), spec.bins)
    return spec.with_bins(y[np.newaxis])


def _random_unitary(rng, n_freq, K):
    A = rng.standard_normal((n_freq, K, K)) + 1j * rng.standard_normal((n_freq, K, K))
    Q, R = np.linalg.qr(A)
    d = np.diagonal(R, axis1=1, axis2=2)
    return Q * (d / np.abs(d))[:, None, :]


def bss_separate(mixture_spec: Spectrogram, block=None, iterations: int = 200, seed: int = 0,
                 step: float = 0.1, n_components: int | None = None,
                 tol: float = 1e-6) -> DemixingSet:
    """Per-bin complex ICA of the mixture frames.

    Each bin is whitened (keeping the ``n_components`` strongest principal
    directions), rotated by a seeded random unitary matrix, and refined by
    natural-gradient ICA with a (smoothed) circular super-Gaussian score.
    When ``n_components`` is None it is ``min(M, frames // 10)`` so every
    separation has at least ten frames per output.
    """
    frames = _frame_slice(block, mixture_spec.n_frames)
    X = _by_bin(mixture_spec, frames)
    F, M, T = X.shape
    if M < 2:
        raise ValueError("BSS needs at least two channels")
    K = min(M, T // 10) if n_components is None else int(n_components)
    if K < 2 or K > M:
        raise ValueError(f"cannot separate {K} components from {M} channels and {T} frames")
    if T < 10 * K:
        warnings.warn(f"{T} frames for {K} components", LowRankWarning, stacklevel=2)

    C = spatial_covariance(X)
    lam, U = np.linalg.eigh(C)
    lam = lam[:, ::-1][:, :K]
    U = U[:, :, ::-1][:, :, :K]
    floor = np.maximum(lam[:, :1] * 1e-12, np.finfo(float).tiny)
    lam = np.maximum(lam, floor)
    V = np.conj(np.swapaxes(U, 1, 2)) / np.sqrt(lam)[:, :, None]   # (F, K, M)
    Z = V @ X

    rng = np.random.default_rng(seed)
    W0 = _random_unitary(rng, F, K)
    Wz, converged, n_iter = kernels.natural_gradient_ica(Z, W0, step, iterations, tol)
    if not converged.all():
        log.debug("ICA: %d of %d bins hit the iteration cap", int((~converged).sum()), F)
    return DemixingSet(Wz @ V, converged, n_iter)


def _envelope_corr(env_y: np.ndarray, env_s: np.ndarray) -> np.ndarray:
    """Pearson correlation of each row of env_y (K, T) with env_s (T,)."""
    ys = env_y - env_y.mean(axis=1, keepdims=True)
    ss = env_s - env_s.mean()
    den = np.sqrt(np.sum(ys ** 2, axis=1) * np.sum(ss ** 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (ys @ ss) / den
    return np.where(np.isfinite(r), r, -np.inf)


def oracle_permutation_align(demix: DemixingSet, mixture_spec: Spectrogram,
                             oracle_speech_spec: Spectrogram, reference: int = 0,
                             block=None) -> DemixingSet:
    """Pick, per bin, the output whose magnitude envelope best tracks the oracle speech.

    The oracle envelope is the reference channel's speech STFT magnitude.
    Scale is fixed by minimal distortion: every output is multiplied by its
    image coefficient at the reference microphone (row ``reference`` of
    ``pinv(W)``). A bin with no oracle energy reuses the previous bin's
    choice.
    """
    frames = _frame_slice(block, mixture_spec.n_frames)
    X = _by_bin(mixture_spec, frames)
    env_s_all = np.abs(oracle_speech_spec.bins[reference, frames, :]).T   # (F, T)
    Y = demix.W @ X
    F, K, _ = demix.W.shape
    selected = np.zeros(F, dtype=np.int64)
    prev = 0
    for f in range(F):
        env_s = env_s_all[f]
        if not np.any(env_s > 0):
            selected[f] = prev
            continue
        r = _envelope_corr(np.abs(Y[f]), env_s)
        selected[f] = prev if np.all(np.isneginf(r)) else int(np.argmax(r))
        prev = selected[f]
    A = np.linalg.pinv(demix.W)                     # (F, M, K)
    scale = A[:, reference, :]
    return DemixingSet(demix.W, demix.converged, demix.n_iter, selected, scale)


class EnhanceResult(NamedTuple):
    enhanced: AudioBuffer
    shadow_speech: AudioBuffer
    shadow_noise: AudioBuffer
    skipped_blocks: tuple


@dataclass(frozen=True)
class FilterParams:
    reference: int = 0
    loading: float = 1e-3
    bss_iterations: int = 200
    bss_step: float = 0.1
    seed: int = 0


def _fit_block(method, Xs, Ss, Vs, params: FilterParams, seed: int) -> BeamformerWeights:
    if method == "mwf":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LowRankWarning)
            cov = estimate_covariances(Ss, Vs)
        return mwf_weights(cov, params.reference, params.loading)
    if method == "bss":
        demix = bss_separate(Xs, iterations=params.bss_iterations, seed=seed,
                             step=params.bss_step)
        demix = oracle_permutation_align(demix, Xs, Ss, params.reference)
        return demix.weights(params.reference)
    if method == "unprocessed":
        return selection_weights(Xs.config.n_bins, Xs.channels, params.reference)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def blockwise_enhance(mixture: AudioBuffer, oracle_speech: AudioBuffer, oracle_noise: AudioBuffer,
                      method: str, plan: BlockPlan | None = None,
                      stft_config: StftConfig | None = None,
                      params: FilterParams = FilterParams()) -> EnhanceResult:
    """Fit a filter per block and run it over the mixture and both oracle components.

    Returns single-channel buffers covering ``plan.n_samples`` samples. A
    block that cannot be fitted is left silent and listed in
    ``skipped_blocks``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    bufs = (mixture, oracle_speech, oracle_noise)
    if len({b.samples.shape for b in bufs}) != 1 or len({b.sample_rate for b in bufs}) != 1:
        raise ValueError("mixture, speech and noise must share shape and sample rate")
    rate = mixture.sample_rate
    plan = plan or BlockPlan.for_signal(mixture.n_frames, rate)
    if plan.n_blocks == 0:
        raise ValueError("signal shorter than one block")
    cfg = stft_config or StftConfig.from_seconds(rate)

    out = np.zeros((3, plan.n_samples))
    skipped = []
    for b, (start, end) in enumerate(plan.blocks):
        specs = [stft(buf.slice(start, end), cfg) for buf in bufs]
        try:
            w = _fit_block(method, *specs, params, seed=params.seed + b)
        except (ValueError, np.linalg.LinAlgError) as exc:
            warnings.warn(f"block {b} skipped: {exc}", stacklevel=2)
            skipped.append(b)
            continue
        for i, spec in enumerate(specs):
            out[i, start:end] = istft(apply_weights(w, spec)).samples[0]
    enhanced, s, v = (AudioBuffer(out[i:i + 1], rate) for i in range(3))
    return EnhanceResult(enhanced, s, v, tuple(skipped))
