"""STFT analysis/synthesis and ego-noise frame statistics.

Framing: frame ``t`` starts at sample ``t * hop - pad`` with
``pad = window_length - hop`` (equal to half a window at 50 % overlap, so
frame centres sit at ``t * hop``). Enough frames are taken that every input
sample is covered by the full overlap-add sum, which makes the inverse
transform exact over the whole signal for any COLA window/hop pair.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import signal

from . import kernels
from .wavio import AudioBuffer

DB_FLOOR = -120.0


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 1024
    hop: int = 512
    window: str = "hann"
    sample_rate: int = 8000

    def __post_init__(self):
        if self.window_length < 2 or self.hop < 1 or self.hop > self.window_length:
            raise ValueError(f"invalid window_length/hop {self.window_length}/{self.hop}")
        if not signal.check_COLA(self.window_array(), self.window_length,
                                 self.window_length - self.hop):
            raise ValueError(f"window {self.window!r} is not COLA at hop {self.hop}")

    @classmethod
    def from_seconds(cls, sample_rate: int, window_s: float = 0.128,
                     overlap: float = 0.5, window: str = "hann") -> "StftConfig":
        length = int(round(window_s * sample_rate))
        return cls(length, int(round(length * (1.0 - overlap))), window, sample_rate)

    @property
    def n_bins(self) -> int:
        return self.window_length // 2 + 1

    @property
    def pad(self) -> int:
        return self.window_length - self.hop

    @property
    def bin_hz(self) -> float:
        return self.sample_rate / self.window_length

    def window_array(self) -> np.ndarray:
        # periodic (DFT-even) window
        return signal.get_window(self.window, self.window_length, fftbins=True)

    def n_frames(self, n_samples: int) -> int:
        if n_samples <= 0:
            return 0
        return (n_samples - 1 + self.pad) // self.hop + 1

    def frame_times(self, n_frames: int) -> np.ndarray:
        starts = np.arange(n_frames) * self.hop - self.pad
        return (starts + self.window_length / 2) / self.sample_rate

    def freqs(self) -> np.ndarray:
        return np.fft.rfftfreq(self.window_length, 1.0 / self.sample_rate)


@dataclass
class Spectrogram:
    """One-sided STFT coefficients indexed ``[channel, frame, bin]``."""

    bins: np.ndarray
    config: StftConfig
    n_samples: int
    frame_times: np.ndarray = field(init=False)

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.complex128)
        if self.bins.ndim != 3 or self.bins.shape[2] != self.config.n_bins:
            raise ValueError(f"bins shape {self.bins.shape} does not match config")
        if self.bins.shape[1] != self.config.n_frames(self.n_samples):
            raise ValueError("frame count inconsistent with n_samples")
        self.frame_times = self.config.frame_times(self.bins.shape[1])

    @property
    def channels(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]

    @property
    def freqs(self) -> np.ndarray:
        return self.config.freqs()

    def with_bins(self, bins) -> "Spectrogram":
        return Spectrogram(bins, self.config, self.n_samples)


def _frames(x: np.ndarray, config: StftConfig) -> np.ndarray:
    """Zero-padded frames, shape (channels, n_frames, window_length)."""
    n = x.shape[1]
    n_frames = config.n_frames(n)
    total = (n_frames - 1) * config.hop + config.window_length
    padded = np.zeros((x.shape[0], total))
    padded[:, config.pad:config.pad + n] = x
    view = np.lib.stride_tricks.sliding_window_view(padded, config.window_length, axis=1)
    return view[:, ::config.hop, :]


def stft(buffer: AudioBuffer, config: StftConfig) -> Spectrogram:
    if buffer.n_frames == 0:
        raise ValueError("cannot transform an empty signal")
    if buffer.sample_rate != config.sample_rate:
        raise ValueError(f"buffer rate {buffer.sample_rate} != config rate {config.sample_rate}")
    frames = _frames(buffer.samples, config) * config.window_array()
    return Spectrogram(np.fft.rfft(frames, axis=-1), config, buffer.n_frames)


def istft(spec: Spectrogram) -> AudioBuffer:
    """Overlap-add inverse normalised by the summed analysis window."""
    cfg = spec.config
    if spec.bins.shape[2] != cfg.n_bins:
        raise ValueError("spectrogram bins inconsistent with config")
    frames = np.fft.irfft(spec.bins, n=cfg.window_length, axis=-1)
    n_frames = spec.n_frames
    total = (n_frames - 1) * cfg.hop + cfg.window_length
    out = np.zeros((spec.channels, total))
    wsum = np.zeros(total)
    w = cfg.window_array()
    for t in range(n_frames):
        s = t * cfg.hop
        out[:, s:s + cfg.window_length] += frames[:, t, :]
        wsum[s:s + cfg.window_length] += w
    sl = slice(cfg.pad, cfg.pad + spec.n_samples)
    return AudioBuffer(out[:, sl] / wsum[sl], cfg.sample_rate)


class FramePowers(NamedTuple):
    """Frame centre times (s) and powers (dBFS)."""

    times: np.ndarray
    db: np.ndarray


def _to_db(p, floor=DB_FLOOR):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(p)
    return np.maximum(db, floor)


def _interior(config: StftConfig, n_samples: int, n_frames: int) -> np.ndarray:
    starts = np.arange(n_frames) * config.hop - config.pad
    return (starts >= 0) & (starts + config.window_length <= n_samples)


def frame_power_db(x, config: StftConfig | None = None) -> FramePowers:
    """Per-frame power in dBFS, averaged over channels.

    For an :class:`AudioBuffer` the power is the plain mean of squared
    samples within each frame; for a :class:`Spectrogram` it is the
    window-weighted mean recovered from the bins. Frames that reach into the
    zero padding are left out. Silent frames read -120 dB.
    """
    if isinstance(x, Spectrogram):
        cfg = x.config
        w = cfg.window_array()
        weight = np.full(cfg.n_bins, 2.0)
        weight[0] = 1.0
        if cfg.window_length % 2 == 0:
            weight[-1] = 1.0
        energy = (np.abs(x.bins) ** 2 * weight).sum(axis=-1) / cfg.window_length
        power = energy.mean(axis=0) / np.sum(w ** 2)
        keep = _interior(cfg, x.n_samples, x.n_frames)
        return FramePowers(x.frame_times[keep], _to_db(power[keep]))

    if not isinstance(x, AudioBuffer):
        raise TypeError("expected an AudioBuffer or Spectrogram")
    if x.n_frames == 0:
        raise ValueError("empty signal")
    cfg = config or StftConfig.from_seconds(x.sample_rate)
    frames = _frames(x.samples, cfg)
    keep = _interior(cfg, x.n_frames, frames.shape[1])
    if not keep.any():
        raise ValueError("signal shorter than one analysis window")
    power = np.mean(frames[:, keep, :] ** 2, axis=(0, 2))
    return FramePowers(cfg.frame_times(frames.shape[1])[keep], _to_db(power))


def power_stats(powers: FramePowers, t_start: float, t_end: float) -> tuple[float, float]:
    """Mean and standard deviation of frame powers (dB) with time in [t_start, t_end)."""
    times, db = np.asarray(powers[0]), np.asarray(powers[1])
    sel = (times >= t_start) & (times < t_end)
    if sel.sum() < 2:
        raise ValueError(f"fewer than 2 frames in [{t_start}, {t_end})")
    return float(np.mean(db[sel])), float(np.std(db[sel]))


def magnitude_db(spec: Spectrogram, frame: int) -> np.ndarray:
    """Amplitude spectra (channels, bins) scaled so a full-scale sine reads 0 dB."""
    scale = 2.0 / np.sum(spec.config.window_array())
    return 20.0 * np.log10(np.maximum(np.abs(spec.bins[:, frame, :]) * scale, 1e-6))


def nearest_frame(spec: Spectrogram, t: float) -> int:
    if not 0.0 <= t <= spec.n_samples / spec.config.sample_rate:
        raise ValueError(f"time {t} s outside the signal")
    return int(np.argmin(np.abs(spec.frame_times - t)))


def spectrum_at(spec: Spectrogram, t: float, channel: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(frequency Hz, magnitude dBFS) of the frame centred nearest ``t``."""
    frame = nearest_frame(spec, t)
    return spec.freqs, magnitude_db(spec, frame)[channel]


@dataclass(frozen=True)
class CombConfig:
    f0_min: float = 50.0
    f0_max: float = 300.0
    f0_step: float = 0.5
    n_harmonics: int = 10
    min_separation: float = 2.0
    # mean salience (dB above the spectral median) a comb needs to count as a pitch
    threshold_db: float = 6.0

    def grid(self) -> np.ndarray:
        n = int(round((self.f0_max - self.f0_min) / self.f0_step)) + 1
        return self.f0_min + self.f0_step * np.arange(n)


def salience(spec: Spectrogram, frame: int) -> np.ndarray:
    """Spectral peaks in dB above the median level; zero off-peak.

    Channel powers are averaged first. Because levels are relative to the
    median, a global gain leaves the result unchanged.
    """
    power = np.mean(np.abs(spec.bins[:, frame, :]) ** 2, axis=0)
    ref = np.median(power)
    if ref <= 0.0:
        ref = 1e-12 * np.max(power)
        if ref <= 0.0:
            return np.zeros_like(power)
    with np.errstate(divide="ignore"):
        db = np.maximum(10.0 * np.log10(power / ref), 0.0)
    peak = np.zeros(db.shape, dtype=bool)
    peak[1:-1] = (db[1:-1] >= db[:-2]) & (db[1:-1] > db[2:])
    return np.where(peak, db, 0.0)


def comb_scores(spec: Spectrogram, frames, comb: CombConfig = CombConfig()) -> np.ndarray:
    """Harmonic-comb score of every f0 candidate, shape (len(frames), n_candidates).

    A candidate's score is the mean salience sampled (linear interpolation
    between bins) at its first ``n_harmonics`` multiples.
    """
    frames = np.atleast_1d(np.asarray(frames, dtype=np.int64))
    sal = np.stack([salience(spec, int(f)) for f in frames])
    return kernels.comb_scores(sal, comb.grid() / spec.config.bin_hz, comb.n_harmonics)


def _cancel_harmonics(sal: np.ndarray, f0_bins: float):
    idx = np.arange(sal.size)
    for pos in f0_bins * np.arange(1, int((sal.size - 1) / f0_bins) + 1):
        sal[np.abs(idx - pos) < 1.0] = 0.0


def estimate_fundamentals(spec: Spectrogram, frame: int, max_sources: int = 4,
                          comb: CombConfig = CombConfig()) -> list[float]:
    """Up to ``max_sources`` fundamentals (Hz) present in one frame.

    Iterative estimate-and-cancel: take the best-scoring candidate, remove
    the spectral peaks lying on its harmonics (up to Nyquist), rescore. The
    loop stops when the best remaining score falls below
    ``comb.threshold_db``, so a frame without harmonic structure yields an
    empty list.
    """
    if max_sources < 1:
        raise ValueError("max_sources must be >= 1")
    grid = comb.grid()
    cand = grid / spec.config.bin_hz
    sal = salience(spec, frame)
    found: list[float] = []
    for _ in range(max_sources):
        scores = kernels.comb_scores(sal[np.newaxis, :], cand, comb.n_harmonics)[0]
        for f in found:
            scores[np.abs(grid - f) < comb.min_separation] = -np.inf
        i = int(np.argmax(scores))
        if scores[i] < comb.threshold_db:
            break
        found.append(float(grid[i]))
        _cancel_harmonics(sal, cand[i])
    return sorted(found)


def track_fundamentals(spec: Spectrogram, max_sources: int = 4,
                       comb: CombConfig = CombConfig()) -> list[tuple[float, list[float]]]:
    """Fundamentals for every frame as ``(time, [f0, ...])`` pairs."""
    return [(float(spec.frame_times[i]), estimate_fundamentals(spec, i, max_sources, comb))
            for i in range(spec.n_frames)]


def write_two_column_csv(path, header, xs, ys):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in zip(xs, ys):
            w.writerow([f"{x:.6f}", f"{y:.6f}"])


def write_power_csv(path, powers: FramePowers):
    write_two_column_csv(path, ["time_s", "power_db"], powers.times, powers.db)


def write_spectrum_csv(path, freqs, mag_db):
    write_two_column_csv(path, ["freq_hz", "mag_db"], freqs, mag_db)
