"""Parametric multichannel ego-noise, a speech surrogate, and SNR-controlled mixing.

The ego-noise model is a quadcopter caricature: four harmonic series (one
per rotor) with slightly different fundamentals, a per-channel random phase
for every harmonic, near-unit per-channel gains, and a spatially white noise
floor. The default numbers are picked to give dense low-frequency harmonic
stacks around -30 dBFS; they are not measured rotor data.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels
from .wavio import AudioBuffer

SPEED_OF_SOUND = 343.0


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform circular array; 8 mics on a 16.5 cm diameter by default."""

    n_mics: int = 8
    diameter_m: float = 0.165

    def positions(self) -> np.ndarray:
        ang = 2 * np.pi * np.arange(self.n_mics) / self.n_mics
        r = self.diameter_m / 2
        return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)

    def farfield_delays(self, azimuth_rad: float, sample_rate: int) -> np.ndarray:
        """Non-negative integer sample delays of a plane wave from ``azimuth_rad``."""
        direction = np.array([np.cos(azimuth_rad), np.sin(azimuth_rad)])
        lead = self.positions() @ direction / SPEED_OF_SOUND
        d = np.rint((lead.max() - lead) * sample_rate).astype(np.int64)
        return d - d.min()


@dataclass(frozen=True)
class EgoNoiseModel:
    rotor_fundamentals: tuple = (95.0, 98.0, 102.0, 105.0)
    harmonic_count: int = 30
    harmonic_rolloff_db: float = 6.0
    # white floor power relative to the power of one rotor's first harmonic
    broadband_floor_db: float = -40.0
    # 0 -> hovering (constant pitch); > 0 -> moving, shared drift at this rate (Hz/s)
    drift_rate: float = 0.0
    drift_bound: float = 20.0
    drift_dwell_s: float = 4.0
    channels: int = 8
    gain_jitter_db: float = 1.0
    level_dbfs: float = -30.0
    seed: int = 0

    def __post_init__(self):
        f0 = tuple(float(f) for f in self.rotor_fundamentals)
        object.__setattr__(self, "rotor_fundamentals", f0)
        if len(f0) < 1:
            raise ValueError("need at least one rotor")
        if len(set(f0)) != len(f0):
            raise ValueError("rotor fundamentals must be distinct")
        if min(f0) <= 0:
            raise ValueError("fundamentals must be positive")
        if self.harmonic_count < 1 or self.channels < 1:
            raise ValueError("harmonic_count and channels must be >= 1")
        if self.drift_rate < 0:
            raise ValueError("drift_rate must be >= 0")

    @classmethod
    def hovering(cls, **kw) -> "EgoNoiseModel":
        return cls(drift_rate=0.0, **kw)

    @classmethod
    def moving(cls, drift_rate: float = 2.0, **kw) -> "EgoNoiseModel":
        return cls(drift_rate=drift_rate, **kw)

    @property
    def is_moving(self) -> bool:
        return self.drift_rate > 0

    @classmethod
    def from_dict(cls, d: dict) -> "EgoNoiseModel":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ego-noise parameters: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EgoNoiseModel":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rotor_fundamentals"] = list(self.rotor_fundamentals)
        return d


def _pitch_tracks(model: EgoNoiseModel, n: int, rate: int, rng) -> np.ndarray:
    """Fundamental frequency of each rotor per sample, shape (rotors, n)."""
    base = np.asarray(model.rotor_fundamentals)[:, None]
    if not model.is_moving:
        return np.repeat(base, n, axis=1)

    # control-rate trajectory: shared telegraph-velocity drift (flight manoeuvres)
    # reflected at +-drift_bound, plus a small independent wander per rotor
    dt = 0.01
    m = int(np.ceil(n / rate / dt)) + 2
    flips = rng.random(m) < dt / model.drift_dwell_s
    sign = 1.0 if rng.random() < 0.5 else -1.0
    shared = np.empty(m)
    pos = 0.0
    for i in range(m):
        if flips[i]:
            sign = -sign
        pos += sign * model.drift_rate * dt
        if abs(pos) > model.drift_bound:
            pos = np.sign(pos) * (2 * model.drift_bound - abs(pos))
            sign = -sign
        shared[i] = pos
    n_rot = len(model.rotor_fundamentals)
    wander_bound = model.drift_bound / 4
    wander = np.cumsum(rng.normal(0, 0.2 * model.drift_rate * np.sqrt(dt), (n_rot, m)), axis=1)
    wander = np.clip(wander, -wander_bound, wander_bound)
    t_ctrl = np.arange(m) * dt
    t = np.arange(n) / rate
    tracks = np.empty((n_rot, n))
    for r in range(n_rot):
        tracks[r] = base[r, 0] + np.interp(t, t_ctrl, shared + wander[r])
    return np.maximum(tracks, 1.0)


def synth_ego_noise(model: EgoNoiseModel, duration: float, rate: int) -> AudioBuffer:
    """Render ``duration`` seconds of multichannel ego-noise at ``rate`` Hz.

    Harmonics whose frequency would reach Nyquist at any instant are left
    out. Output is scaled so the mean power over all channels equals
    ``model.level_dbfs``. Equal (model, duration, rate) give bit-identical
    output.
    """
    if duration <= 0 or rate <= 0:
        raise ValueError("duration and rate must be positive")
    n = int(round(duration * rate))
    rng = np.random.default_rng(model.seed)
    n_rot = len(model.rotor_fundamentals)
    H, C = model.harmonic_count, model.channels

    tracks = _pitch_tracks(model, n, rate, rng)
    phase = 2 * np.pi * np.cumsum(tracks, axis=1) / rate
    phase -= phase[:, :1]

    h = np.arange(1, H + 1)
    amp = 10.0 ** (-model.harmonic_rolloff_db * (h - 1) / 20.0)
    amp = np.broadcast_to(amp, (n_rot, H)).copy()
    amp[tracks.max(axis=1)[:, None] * h[None, :] >= rate / 2] = 0.0

    chan_phase = rng.uniform(0, 2 * np.pi, (C, n_rot, H))
    chan_gain = 10.0 ** (rng.normal(0, model.gain_jitter_db, (C, n_rot, 1)) / 20.0)
    coef = amp[None, :, :] * chan_gain * np.exp(1j * chan_phase)

    x = kernels.harmonic_sum(phase, coef)
    floor_power = 0.5 * 10.0 ** (model.broadband_floor_db / 10.0)
    x += rng.normal(0.0, np.sqrt(floor_power), (C, n))

    p = np.mean(x ** 2)
    if p > 0:
        x *= np.sqrt(10.0 ** (model.level_dbfs / 10.0) / p)
    return AudioBuffer(x, rate)


@dataclass(frozen=True)
class SpeechSurrogateConfig:
    band_hz: tuple = (300.0, 3400.0)
    syllable_rate_hz: float = 4.0
    active_s: tuple = (0.6, 0.9)
    pause_s: tuple = (0.35, 0.55)
    ramp_s: float = 0.04
    level_dbfs: float = -50.0
    azimuth_deg: float = 30.0
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry)


def _gate(n: int, rate: int, cfg: SpeechSurrogateConfig, rng) -> np.ndarray:
    """Word-level on/off gate with raised-cosine ramps."""
    gate = np.zeros(n)
    ramp = max(1, int(round(cfg.ramp_s * rate)))
    t = int(round(rng.uniform(*cfg.pause_s) * rate / 2))
    while t < n:
        on = int(round(rng.uniform(*cfg.active_s) * rate))
        seg = np.ones(on)
        r = min(ramp, on // 2)
        if r:
            rise = 0.5 * (1 - np.cos(np.pi * np.arange(r) / r))
            seg[:r] = rise
            seg[on - r:] = rise[::-1]
        end = min(n, t + on)
        gate[t:end] = seg[:end - t]
        t = end + int(round(rng.uniform(*cfg.pause_s) * rate))
    return gate


def synth_speech_surrogate(duration: float, rate: int, channels: int = 8, seed: int = 0,
                           config: SpeechSurrogateConfig = SpeechSurrogateConfig()) -> AudioBuffer:
    """Band-limited noise with a 4 Hz syllabic envelope and silent pauses.

    The same source signal reaches every channel with an integer-sample
    far-field delay computed from the array geometry, imitating a coherent
    loudspeaker. Deterministic given ``seed``.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * rate))
    rng = np.random.default_rng(seed)
    geom = config.geometry
    if channels != geom.n_mics:
        geom = ArrayGeometry(channels, geom.diameter_m)
    delays = geom.farfield_delays(np.deg2rad(config.azimuth_deg), rate)
    n_src = n + int(delays.max())

    white = rng.standard_normal(n_src)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n_src, 1.0 / rate)
    lo, hi = config.band_hz
    # stay clear of the band edges so envelope sidebands remain in band
    guard = 50.0
    spec[(f < lo + guard) | (f > hi - guard)] = 0.0
    src = np.fft.irfft(spec, n=n_src)

    t = np.arange(n_src) / rate
    syllables = 0.25 + 0.75 * 0.5 * (1 - np.cos(2 * np.pi * config.syllable_rate_hz * t
                                                + rng.uniform(0, 2 * np.pi)))
    src *= syllables * _gate(n_src, rate, config, rng)

    active = np.abs(src) > 0
    p = np.mean(src[active] ** 2) if active.any() else 0.0
    if p > 0:
        src *= np.sqrt(10.0 ** (config.level_dbfs / 10.0) / p)

    x = np.empty((channels, n))
    for c in range(channels):
        d = int(delays[c])
        x[c] = src[n_src - n - d:n_src - d]
    return AudioBuffer(x, rate)


@dataclass(frozen=True)
class MixSpec:
    input_snr_db: float
    # which component the gain is applied to
    reference: str = "scale-noise"
    duration_s: float | None = None
    sample_rate: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.input_snr_db):
            raise ValueError("input_snr_db must be finite")
        if self.reference not in ("scale-noise", "scale-speech"):
            raise ValueError(f"reference must be 'scale-noise' or 'scale-speech', got {self.reference!r}")
        if self.duration_s is not None and self.duration_s <= 0:
            raise ValueError("duration_s must be positive")


def mix_at_snr(speech: AudioBuffer, noise: AudioBuffer, spec: MixSpec):
    """Scale one component so the energy ratio over all channels hits the target.

    Returns ``(mixture, scaled_speech, scaled_noise)`` with
    ``mixture = scaled_speech + scaled_noise``. Unequal lengths are truncated
    to the shorter one (and to ``spec.duration_s`` when given).
    """
    if speech.channels != noise.channels:
        raise ValueError(f"channel mismatch: {speech.channels} vs {noise.channels}")
    if speech.sample_rate != noise.sample_rate:
        raise ValueError(f"rate mismatch: {speech.sample_rate} vs {noise.sample_rate}")
    if spec.sample_rate is not None and spec.sample_rate != speech.sample_rate:
        raise ValueError(f"signals are at {speech.sample_rate} Hz, spec asks {spec.sample_rate} Hz")
    n = min(speech.n_frames, noise.n_frames)
    if spec.duration_s is not None:
        n = min(n, int(round(spec.duration_s * speech.sample_rate)))
    s = speech.samples[:, :n]
    v = noise.samples[:, :n]
    es = float(np.sum(s ** 2))
    ev = float(np.sum(v ** 2))
    if es == 0.0 or ev == 0.0:
        raise ValueError("speech and noise must both have non-zero energy")
    current = 10.0 * np.log10(es / ev)
    if spec.reference == "scale-noise":
        s = s.copy()
        v = v * 10.0 ** ((current - spec.input_snr_db) / 20.0)
    else:
        s = s * 10.0 ** ((spec.input_snr_db - current) / 20.0)
        v = v.copy()
    rate = speech.sample_rate
    return AudioBuffer(s + v, rate), AudioBuffer(s, rate), AudioBuffer(v, rate)
