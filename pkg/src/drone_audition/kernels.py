"""Hot numeric loops, each with a numba and a pure-numpy implementation.

The public functions dispatch on :data:`drone_audition._accel.USE_JIT`.
Both paths compute the same quantities; they agree to floating-point
round-off, not bit for bit.
"""

import numpy as np

from . import _accel
from ._accel import njit

# ---------------------------------------------------------------------------
# harmonic synthesis
# ---------------------------------------------------------------------------


@njit(nogil=True)
def _harmonic_sum_numba(phase, coef):
    n_rot, n_samp = phase.shape
    n_chan, _, n_harm = coef.shape
    out = np.zeros((n_chan, n_samp))
    for r in range(n_rot):
        for n in range(n_samp):
            z1 = np.exp(1j * phase[r, n])
            z = z1
            for h in range(n_harm):
                for c in range(n_chan):
                    out[c, n] += (z * coef[c, r, h]).imag
                z = z * z1
    return out


def _harmonic_sum_numpy(phase, coef, chunk=8192):
    n_rot, n_samp = phase.shape
    n_chan, _, n_harm = coef.shape
    out = np.zeros((n_chan, n_samp))
    k = np.arange(1, n_harm + 1)
    for s in range(0, n_samp, chunk):
        e = min(s + chunk, n_samp)
        for r in range(n_rot):
            z = np.exp(1j * phase[r, s:e, None] * k)
            out[:, s:e] += (z @ coef[:, r, :].T).imag.T
    return out


def harmonic_sum(phase, coef):
    """Sum of harmonic series over rotors, per channel.

    ``out[c, n] = sum_r sum_h Im(exp(1j*(h+1)*phase[r, n]) * coef[c, r, h])``

    Parameters
    ----------
    phase : ndarray (rotors, samples)
        Instantaneous phase of each fundamental, radians.
    coef : complex ndarray (channels, rotors, harmonics)
        Complex amplitude of harmonic ``h+1`` of rotor ``r`` at channel ``c``.
    """
    phase = np.ascontiguousarray(phase, dtype=np.float64)
    coef = np.ascontiguousarray(coef, dtype=np.complex128)
    if _accel.USE_JIT:
        return _harmonic_sum_numba(phase, coef)
    return _harmonic_sum_numpy(phase, coef)


# ---------------------------------------------------------------------------
# harmonic comb scoring
# ---------------------------------------------------------------------------


@njit(nogil=True)
def _comb_scores_numba(sal, cand_bins, n_harm):
    n_frames, n_bins = sal.shape
    n_cand = cand_bins.shape[0]
    out = np.zeros((n_frames, n_cand))
    for f in range(n_frames):
        for c in range(n_cand):
            acc = 0.0
            for k in range(1, n_harm + 1):
                pos = k * cand_bins[c]
                i = int(pos)
                if i + 1 >= n_bins:
                    break
                frac = pos - i
                acc += (1.0 - frac) * sal[f, i] + frac * sal[f, i + 1]
            out[f, c] = acc / n_harm
    return out


def _comb_scores_numpy(sal, cand_bins, n_harm):
    n_bins = sal.shape[1]
    pos = cand_bins[:, None] * np.arange(1, n_harm + 1)[None, :]
    i = pos.astype(np.int64)
    valid = i + 1 < n_bins
    # a harmonic past Nyquist ends the comb, matching the loop version
    valid = np.cumprod(valid, axis=1).astype(bool)
    i = np.where(valid, i, 0)
    frac = np.where(valid, pos - i, 0.0)
    vals = (1.0 - frac) * sal[:, i] + frac * sal[:, i + 1]
    return np.where(valid, vals, 0.0).sum(axis=2) / n_harm


def comb_scores(sal, cand_bins, n_harm):
    """Mean of ``sal`` sampled at harmonics of each candidate (in bin units).

    ``sal`` has shape (frames, bins); ``cand_bins`` holds candidate
    fundamentals expressed in bins. Returns (frames, candidates).
    """
    sal = np.ascontiguousarray(sal, dtype=np.float64)
    cand_bins = np.ascontiguousarray(cand_bins, dtype=np.float64)
    if _accel.USE_JIT:
        return _comb_scores_numba(sal, cand_bins, int(n_harm))
    return _comb_scores_numpy(sal, cand_bins, int(n_harm))


# ---------------------------------------------------------------------------
# per-bin natural-gradient complex ICA
# ---------------------------------------------------------------------------

# smooths the score near y = 0; without it the iteration can settle into a 2-cycle
_SMOOTH = 1e-2


@njit(nogil=True)
def _ica_numba(Z, W0, mu, iterations, tol):
    n_freq, K, T = Z.shape
    W = W0.copy()
    converged = np.zeros(n_freq, dtype=np.bool_)
    n_iter = np.zeros(n_freq, dtype=np.int64)
    Y = np.empty((K, T), dtype=np.complex128)
    P = np.empty((K, T), dtype=np.complex128)
    G = np.empty((K, K), dtype=np.complex128)
    Wn = np.empty((K, K), dtype=np.complex128)
    for f in range(n_freq):
        Wf = W[f]
        Zf = Z[f]
        for it in range(iterations):
            for k in range(K):
                for t in range(T):
                    Y[k, t] = 0j
                for l in range(K):
                    wkl = Wf[k, l]
                    for t in range(T):
                        Y[k, t] += wkl * Zf[l, t]
                for t in range(T):
                    y = Y[k, t]
                    a = np.sqrt(y.real * y.real + y.imag * y.imag + _SMOOTH * _SMOOTH)
                    P[k, t] = y * (1.0 / a)
            norm = 0.0
            for k in range(K):
                for l in range(K):
                    re = 0.0
                    im = 0.0
                    for t in range(T):
                        p = P[k, t]
                        y = Y[l, t]
                        re += p.real * y.real + p.imag * y.imag
                        im += p.imag * y.real - p.real * y.imag
                    g = complex(-re / T, -im / T)
                    if k == l:
                        g += 1.0
                    G[k, l] = mu * g
                    norm += g.real * g.real + g.imag * g.imag
            for k in range(K):
                for l in range(K):
                    acc = Wf[k, l]
                    for m in range(K):
                        acc += G[k, m] * Wf[m, l]
                    Wn[k, l] = acc
            Wf[:, :] = Wn
            n_iter[f] = it + 1
            if mu * np.sqrt(norm) < tol:
                converged[f] = True
                break
    return W, converged, n_iter


def _ica_numpy(Z, W0, mu, iterations, tol):
    n_freq, K, T = Z.shape
    W = W0.copy()
    converged = np.zeros(n_freq, dtype=bool)
    n_iter = np.zeros(n_freq, dtype=np.int64)
    eye = np.eye(K)
    active = np.arange(n_freq)
    for it in range(iterations):
        if active.size == 0:
            break
        Wa = W[active]
        Y = Wa @ Z[active]
        P = Y / np.sqrt(Y.real ** 2 + Y.imag ** 2 + _SMOOTH ** 2)
        G = eye - (P @ np.conj(np.swapaxes(Y, 1, 2))) / T
        W[active] = Wa + (mu * G) @ Wa
        n_iter[active] = it + 1
        done = mu * np.sqrt(np.sum(np.abs(G) ** 2, axis=(1, 2))) < tol
        converged[active[done]] = True
        active = active[~done]
    return W, converged, n_iter


def natural_gradient_ica(Z, W0, mu=0.1, iterations=200, tol=1e-6):
    """Run natural-gradient ICA independently in every frequency bin.

    Update: ``W <- W + mu * (I - E[phi(y) y^H]) W`` with ``y = W z`` and the
    circular super-Gaussian score ``phi(y) = y / sqrt(|y|^2 + eps^2)``, a
    smoothed ``y / |y|`` (``eps`` = 0.01 on whitened, unit-power data).

    Parameters
    ----------
    Z : complex ndarray (bins, K, T)
        Whitened observations.
    W0 : complex ndarray (bins, K, K)
        Starting demixing matrices.

    Returns
    -------
    W : complex ndarray (bins, K, K)
    converged : bool ndarray (bins,)
    n_iter : int ndarray (bins,)
    """
    Z = np.ascontiguousarray(Z, dtype=np.complex128)
    W0 = np.ascontiguousarray(W0, dtype=np.complex128)
    if _accel.USE_JIT:
        return _ica_numba(Z, W0, float(mu), int(iterations), float(tol))
    return _ica_numpy(Z, W0, float(mu), int(iterations), float(tol))
