"""Multichannel 16-bit PCM WAV reading/writing and rate conversion.

Samples are held as float64 arrays of shape ``(channels, frames)``. Channel
``i`` in a file is microphone ``i`` (0-based). Conversion to and from PCM16
uses the fixed-point scale 32768, so ``read_wav`` followed by ``write_wav``
reproduces the data chunk byte for byte.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

log = logging.getLogger(__name__)

PCM16_SCALE = 32768.0
BIT_DEPTH = 16
HEADER_BYTES = 44
WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
MAX_CHANNELS = 8


class WavFormatError(ValueError):
    """Malformed or unsupported RIFF/WAVE content."""


class TruncatedWavError(WavFormatError):
    """The data chunk is shorter than its header claims.

    ``frames_recovered`` whole frames were decoded and are available as
    ``buffer``.
    """

    def __init__(self, path, frames_recovered, buffer):
        super().__init__(
            f"{path}: data chunk truncated, {frames_recovered} frames recovered")
        self.frames_recovered = frames_recovered
        self.buffer = buffer


@dataclass
class AudioBuffer:
    """Multichannel sampled signal.

    Parameters
    ----------
    samples : ndarray, shape (channels, frames)
        Real amplitudes, nominally in [-1, 1]. A 1-D array is treated as a
        single channel.
    sample_rate : int
        Sampling rate in Hz.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[np.newaxis, :]
        if x.ndim != 2:
            raise ValueError(f"samples must be 1-D or 2-D, got shape {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("buffer needs at least one channel")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        self.samples = x
        self.sample_rate = int(self.sample_rate)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_frames(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_frames / self.sample_rate

    def __len__(self):
        return self.n_frames

    def copy(self) -> "AudioBuffer":
        return AudioBuffer(self.samples.copy(), self.sample_rate)

    def slice(self, start: int, stop: int) -> "AudioBuffer":
        return AudioBuffer(self.samples[:, start:stop], self.sample_rate)

    def quantized(self) -> "AudioBuffer":
        """The buffer as it would read back after a PCM16 round trip."""
        return AudioBuffer(from_pcm16(to_pcm16(self.samples)), self.sample_rate)


@dataclass(frozen=True)
class WavSpec:
    channels: int
    sample_rate: int
    bit_depth: int = BIT_DEPTH
    encoding: str = "pcm"

    def __post_init__(self):
        if self.bit_depth != BIT_DEPTH or self.encoding != "pcm":
            raise WavFormatError("only 16-bit integer PCM is supported")
        if self.channels < 1:
            raise WavFormatError(f"invalid channel count {self.channels}")
        if self.sample_rate <= 0:
            raise WavFormatError(f"invalid sample rate {self.sample_rate}")

    @property
    def block_align(self) -> int:
        return self.channels * BIT_DEPTH // 8


def to_pcm16(x, return_clips=False):
    """Quantize float amplitudes to int16, clamping (never wrapping)."""
    scaled = np.rint(np.asarray(x, dtype=np.float64) * PCM16_SCALE)
    clipped = np.clip(scaled, -32768, 32767)
    out = clipped.astype(np.int16)
    if return_clips:
        return out, int(np.count_nonzero(clipped != scaled))
    return out


def from_pcm16(q):
    return np.asarray(q, dtype=np.float64) / PCM16_SCALE


def wav_header(spec: WavSpec, n_frames: int) -> bytes:
    data_bytes = n_frames * spec.block_align
    return struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + data_bytes, b"WAVE",
        b"fmt ", 16, WAVE_FORMAT_PCM, spec.channels, spec.sample_rate,
        spec.sample_rate * spec.block_align, spec.block_align, BIT_DEPTH,
        b"data", data_bytes,
    )


class WavWriter:
    """Append-only PCM16 WAV writer that keeps its header consistent.

    The header is rewritten after every append, so the file on disk is
    always a valid WAV describing exactly the frames written so far.
    ``exclusive=True`` refuses to open an existing path.
    """

    def __init__(self, path, spec: WavSpec, exclusive=False):
        self.path = Path(path)
        self.spec = spec
        self.frames = 0
        self.clip_count = 0
        self._fh = open(self.path, "xb" if exclusive else "wb")
        try:
            self._fh.write(wav_header(spec, 0))
            self._fh.flush()
        except BaseException:
            self._fh.close()
            self.path.unlink(missing_ok=True)
            raise

    @property
    def closed(self) -> bool:
        return self._fh.closed

    def write_interleaved(self, frames_i16: np.ndarray) -> int:
        """Append interleaved int16 samples; returns frames appended."""
        data = np.ascontiguousarray(frames_i16, dtype="<i2").reshape(-1)
        if data.size % self.spec.channels:
            raise ValueError("sample count is not a multiple of the channel count")
        n = data.size // self.spec.channels
        if n == 0:
            return 0
        self._fh.seek(0, os.SEEK_END)
        self._fh.write(data.tobytes())
        self.frames += n
        self._patch_header()
        return n

    def write_float(self, samples) -> int:
        """Append float samples, shape (channels, frames) or interleaved 1-D."""
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim == 2:
            x = x.T
        q, clips = to_pcm16(x, return_clips=True)
        self.clip_count += clips
        return self.write_interleaved(q)

    def _patch_header(self):
        self._fh.seek(0)
        self._fh.write(wav_header(self.spec, self.frames))
        self._fh.seek(0, os.SEEK_END)
        self._fh.flush()

    def sync(self):
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self):
        if self._fh.closed:
            return
        try:
            self._patch_header()
            self.sync()
        finally:
            self._fh.close()
        if self.clip_count:
            log.warning("%s: %d samples clipped", self.path, self.clip_count)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_wav(buffer: AudioBuffer, path) -> int:
    """Write ``buffer`` as interleaved PCM16 little-endian; returns frames written.

    Amplitudes outside [-1, 1) are clamped and the clip count is logged. On
    failure the partial file is removed.
    """
    path = Path(path)
    spec = WavSpec(buffer.channels, buffer.sample_rate)
    q, clips = to_pcm16(buffer.samples.T, return_clips=True)
    if clips:
        log.warning("%s: clamped %d samples to full scale", path, clips)
    try:
        with open(path, "wb") as fh:
            fh.write(wav_header(spec, buffer.n_frames))
            fh.write(np.ascontiguousarray(q, dtype="<i2").tobytes())
    except BaseException:
        path.unlink(missing_ok=True)
        raise
    return buffer.n_frames


def _parse_fmt(body: bytes, path) -> WavSpec:
    if len(body) < 16:
        raise WavFormatError(f"{path}: fmt chunk too short")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", body[:16])
    if tag == WAVE_FORMAT_EXTENSIBLE:
        if len(body) < 40:
            raise WavFormatError(f"{path}: truncated WAVE_FORMAT_EXTENSIBLE fmt chunk")
        tag = struct.unpack("<H", body[24:26])[0]
    if tag != WAVE_FORMAT_PCM:
        raise WavFormatError(f"{path}: unsupported encoding (format tag {tag:#06x})")
    if bits != BIT_DEPTH:
        raise WavFormatError(f"{path}: unsupported bit depth {bits}")
    if channels < 1 or block_align != channels * 2:
        raise WavFormatError(f"{path}: inconsistent channels/block_align")
    return WavSpec(channels, rate)


def read_wav(path, strict=True) -> AudioBuffer:
    """Read a 16-bit PCM WAV file into an :class:`AudioBuffer`.

    A data chunk shorter than declared raises :class:`TruncatedWavError`
    (carrying the recovered frames) when ``strict``; otherwise the recovered
    frames are returned with a warning.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    spec = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = struct.unpack("<4sI", raw[pos:pos + 8])
        body_start = pos + 8
        if cid == b"fmt ":
            spec = _parse_fmt(raw[body_start:body_start + size], path)
        elif cid == b"data":
            if spec is None:
                raise WavFormatError(f"{path}: data chunk before fmt chunk")
            available = len(raw) - body_start
            n_bytes = min(size, available)
            n_frames = n_bytes // spec.block_align
            q = np.frombuffer(raw, dtype="<i2", count=n_frames * spec.channels,
                              offset=body_start)
            buf = AudioBuffer(from_pcm16(q.reshape(n_frames, spec.channels).T),
                              spec.sample_rate)
            if size > available:
                if strict:
                    raise TruncatedWavError(path, n_frames, buf)
                log.warning("%s: data chunk truncated, %d frames recovered", path, n_frames)
            return buf
        pos = body_start + size + (size & 1)

    if spec is None:
        raise WavFormatError(f"{path}: missing fmt chunk")
    raise WavFormatError(f"{path}: missing data chunk")


def decimation_filter(up: int, down: int, source_rate: int, target_rate: int,
                      stopband_db: float = 70.0) -> np.ndarray:
    """Kaiser-windowed sinc low-pass for a rational rate change.

    Designed at the intermediate rate ``source_rate * up``. The cutoff sits at
    0.45 x the lower of the two rates; the transition band ends at that
    rate's Nyquist frequency.
    """
    fs_mid = source_rate * up
    low_rate = min(source_rate, target_rate)
    cutoff = 0.45 * low_rate
    width = 2.0 * (0.5 * low_rate - cutoff)
    numtaps, beta = signal.kaiserord(stopband_db, width / (0.5 * fs_mid))
    numtaps |= 1
    return signal.firwin(numtaps, cutoff, window=("kaiser", beta), fs=fs_mid)


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Change the sampling rate with an anti-aliasing polyphase filter.

    Output length is ``round(n_frames * target_rate / sample_rate)``; each
    channel is processed independently. 48 kHz to 8 kHz is an exact 1/6
    decimation.
    """
    if int(target_rate) != target_rate or target_rate <= 0:
        raise ValueError(f"target_rate must be a positive integer, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == buffer.sample_rate:
        return buffer.copy()
    ratio = Fraction(target_rate, buffer.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    n_out = int(round(buffer.n_frames * target_rate / buffer.sample_rate))
    if buffer.n_frames == 0:
        return AudioBuffer(np.zeros((buffer.channels, 0)), target_rate)

    h = decimation_filter(up, down, buffer.sample_rate, target_rate)
    y = signal.resample_poly(buffer.samples, up, down, axis=1, window=h)
    if y.shape[1] >= n_out:
        y = y[:, :n_out]
    else:
        y = np.pad(y, ((0, 0), (0, n_out - y.shape[1])))
    return AudioBuffer(y, target_rate)
