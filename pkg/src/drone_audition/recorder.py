"""Real-time capture to WAV through a bounded single-producer/single-consumer queue.

A producer (the audio callback, or a source thread standing in for one)
pushes interleaved blocks with :func:`push_block`; it never waits. A writer
calls :func:`drain` to move queued samples into the WAV file. When the queue
is full the newest block is dropped and counted.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import queue
import re
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .synth import EgoNoiseModel, synth_ego_noise
from .wavio import HEADER_BYTES, MAX_CHANNELS, WavSpec, WavWriter, read_wav, resample

log = logging.getLogger(__name__)

# queued samples are float64 so quantization happens once, in the writer
SAMPLE_BYTES = 8
MAX_NAME_ATTEMPTS = 1000
PREFETCH_CHUNK_S = 0.05
PREFETCH_DEPTH = 80


class SessionState(str, enum.Enum):
    IDLE = "Idle"
    RECORDING = "Recording"
    CLOSED = "Closed"


class SessionClosedError(RuntimeError):
    pass


@dataclass(frozen=True)
class RecorderConfig:
    channels: int = 8
    sample_rate: int = 48000
    block_frames: int = 4
    queue_capacity_bytes: int = 65536
    output_dir: str = "."
    base_filename: str = "audioCh.wav"

    def __post_init__(self):
        if not 1 <= self.channels <= MAX_CHANNELS:
            raise ValueError(f"channels must be in 1..{MAX_CHANNELS}, got {self.channels}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.block_frames < 1:
            raise ValueError("block_frames must be >= 1")
        if self.queue_capacity_bytes < self.block_bytes:
            raise ValueError(f"queue_capacity_bytes ({self.queue_capacity_bytes}) is smaller "
                             f"than one block ({self.block_bytes} bytes)")
        if not self.base_filename.lower().endswith(".wav") or "/" in self.base_filename:
            raise ValueError(f"base_filename must be a plain *.wav name, got {self.base_filename!r}")

    @property
    def block_samples(self) -> int:
        return self.block_frames * self.channels

    @property
    def block_bytes(self) -> int:
        return self.block_samples * SAMPLE_BYTES

    @classmethod
    def from_dict(cls, d: dict) -> "RecorderConfig":
        """Accepts the recorder keys either at top level or under ``"recorder"``."""
        if "recorder" in d and isinstance(d["recorder"], dict):
            d = d["recorder"]
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown recorder config keys: {sorted(unknown)}")
        d = dict(d)
        if "output_dir" in d:
            d["output_dir"] = str(d["output_dir"])
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "RecorderConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def generate_unique_filename(directory, base: str = "audioCh.wav") -> Path:
    """``base`` if unused, else its stem plus the smallest free positive integer.

    ``audioCh.wav`` -> ``audioCh1.wav`` -> ``audioCh2.wav`` ...
    """
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    if not os.access(d, os.W_OK | os.X_OK):
        raise PermissionError(f"{d} is not writable")
    stem, ext = os.path.splitext(base)
    if not (d / base).exists():
        return d / base
    taken = set()
    pat = re.compile(re.escape(stem) + r"([1-9][0-9]*)" + re.escape(ext) + r"\Z")
    for name in os.listdir(d):
        m = pat.match(name)
        if m:
            taken.add(int(m.group(1)))
    n = 1
    while n in taken or (d / f"{stem}{n}{ext}").exists():
        n += 1
    return d / f"{stem}{n}{ext}"


class SpscRing:
    """Fixed-size sample ring for exactly one writer thread and one reader thread.

    Indices only grow; each is written by one side and read by the other,
    and the producer publishes its index after the data copy, so the reader
    never sees half-written samples.
    """

    def __init__(self, capacity_samples: int):
        if capacity_samples < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity_samples)
        self._buf = np.zeros(self.capacity, dtype=np.float64)
        self._head = 0   # total samples written (producer)
        self._tail = 0   # total samples read (consumer)

    def __len__(self):
        return self._head - self._tail

    @property
    def free(self) -> int:
        return self.capacity - (self._head - self._tail)

    def try_push(self, data: np.ndarray) -> bool:
        n = data.shape[0]
        head = self._head
        if n > self.capacity - (head - self._tail):
            return False
        i = head % self.capacity
        first = min(n, self.capacity - i)
        self._buf[i:i + first] = data[:first]
        if first < n:
            self._buf[:n - first] = data[first:]
        self._head = head + n
        return True

    def pop_all(self, multiple_of: int = 1) -> np.ndarray:
        tail = self._tail
        n = self._head - tail
        n -= n % multiple_of
        if n == 0:
            return self._buf[:0].copy()
        i = tail % self.capacity
        first = min(n, self.capacity - i)
        out = np.concatenate((self._buf[i:i + first], self._buf[:n - first]))
        self._tail = tail + n
        return out


@dataclass(frozen=True)
class PushResult:
    accepted: bool
    dropped_frames: int = 0


@dataclass
class StatusReport:
    state: str
    current_path: str | None
    frames_written: int
    frames_dropped: int
    elapsed_s: float
    file_size_bytes: int
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RecordingSession:
    config: RecorderConfig
    path: Path | None = None
    state: SessionState = SessionState.IDLE
    frames_written: int = 0
    frames_dropped: int = 0
    frames_pushed: int = 0
    started_at: float | None = None
    error: str | None = None
    _ring: SpscRing | None = field(default=None, repr=False)
    _writer: WavWriter | None = field(default=None, repr=False)
    _accepting: bool = field(default=False, repr=False)
    _t0: float = field(default=0.0, repr=False)
    _t_end: float | None = field(default=None, repr=False)

    def status(self) -> StatusReport:
        """Snapshot for observers; never touches the queue or the file handle."""
        written = self.frames_written
        dropped = self.frames_dropped
        if self.path is not None and self.path.exists():
            size = self.path.stat().st_size
        else:
            size = 0
        end = self._t_end if self._t_end is not None else time.monotonic()
        elapsed = end - self._t0 if self.started_at is not None else 0.0
        return StatusReport(self.state.value, str(self.path) if self.path else None,
                            written, dropped, elapsed, size, self.error)


def open_session(config: RecorderConfig) -> RecordingSession:
    """Create a uniquely named WAV file and return a session ready for pushes."""
    session = RecordingSession(config)
    spec = WavSpec(config.channels, config.sample_rate)
    for _ in range(MAX_NAME_ATTEMPTS):
        path = generate_unique_filename(config.output_dir, config.base_filename)
        try:
            writer = WavWriter(path, spec, exclusive=True)
        except FileExistsError:
            # lost a race with another creator; take the next suffix
            continue
        break
    else:
        raise FileExistsError(f"no free filename for {config.base_filename} in {config.output_dir}")
    cap = config.queue_capacity_bytes // SAMPLE_BYTES
    cap -= cap % config.channels
    session.path = path
    session._writer = writer
    session._ring = SpscRing(cap)
    session.started_at = time.time()
    session._t0 = time.monotonic()
    session._accepting = True
    session.state = SessionState.RECORDING
    log.info("recording to %s", path)
    return session


def push_block(session: RecordingSession, block) -> PushResult:
    """Enqueue one interleaved block of ``block_frames`` frames; never waits.

    ``block`` is either flat interleaved or shaped (frames, channels).
    """
    cfg = session.config
    data = np.asarray(block).reshape(-1)
    if data.shape[0] != cfg.block_samples:
        raise ValueError(f"block has {data.shape[0]} samples, expected {cfg.block_samples}")
    if not session._accepting:
        if session.error is not None:
            # writer failed: keep the producer running and account for the loss
            session.frames_pushed += cfg.block_frames
            session.frames_dropped += cfg.block_frames
            return PushResult(False, cfg.block_frames)
        raise SessionClosedError(f"session is {session.state.value}")
    session.frames_pushed += cfg.block_frames
    if session._ring.try_push(data):
        return PushResult(True)
    session.frames_dropped += cfg.block_frames
    return PushResult(False, cfg.block_frames)


def _fail(session: RecordingSession, exc: BaseException):
    log.error("recording to %s failed: %s", session.path, exc)
    session.error = str(exc) or type(exc).__name__
    session._accepting = False
    # whatever is still queued will never reach the file
    lost = len(session._ring) // session.config.channels
    session._ring.pop_all()
    session.frames_dropped += lost
    try:
        session._writer.close()
    except OSError:
        pass
    session._t_end = time.monotonic()
    session.state = SessionState.CLOSED


def drain(session: RecordingSession) -> int:
    """Move everything queued into the file; returns frames written."""
    if session.state is SessionState.IDLE:
        raise SessionClosedError("session was never opened")
    if session._writer is None or session._writer.closed:
        return 0
    data = session._ring.pop_all(multiple_of=session.config.channels)
    if data.size == 0:
        return 0
    try:
        n = session._writer.write_float(data)
    except OSError as exc:
        session.frames_dropped += data.size // session.config.channels
        _fail(session, exc)
        return 0
    session.frames_written += n
    return n


def close_session(session: RecordingSession) -> RecordingSession:
    """Stop accepting pushes, flush the queue, finalize the header. Idempotent.

    The producer must have stopped pushing before this is called.
    """
    if session.state is SessionState.CLOSED:
        return session
    if session.state is SessionState.IDLE:
        session.state = SessionState.CLOSED
        return session
    session._accepting = False
    drain(session)
    if session.state is SessionState.CLOSED:
        return session
    try:
        session._writer.close()
    except OSError as exc:
        _fail(session, exc)
        return session
    session._t_end = time.monotonic()
    session.state = SessionState.CLOSED
    log.info("%s written and closed (%d frames, %d dropped)", session.path,
             session.frames_written, session.frames_dropped)
    return session


# ---------------------------------------------------------------------------
# sources and the threaded recorder
# ---------------------------------------------------------------------------


class SynthSource:
    """Endless synthetic ego-noise rendered in fixed segments.

    Segment ``k`` uses seed ``seed + k``, so the stream is reproducible.
    """

    def __init__(self, channels: int, sample_rate: int, seed: int = 0, segment_s: float = 2.0,
                 model: EgoNoiseModel | None = None):
        self.channels = channels
        self.sample_rate = sample_rate
        self.seed = seed
        self.segment_s = segment_s
        self.model = model or EgoNoiseModel.hovering()
        self._segment = 0
        self._buf = np.zeros((0, channels))
        self._pos = 0

    def _next_segment(self):
        m = EgoNoiseModel.from_dict({**self.model.to_dict(), "channels": self.channels,
                                     "seed": self.seed + self._segment})
        self._segment += 1
        return synth_ego_noise(m, self.segment_s, self.sample_rate).samples.T

    def read(self, n_frames: int) -> np.ndarray | None:
        while self._buf.shape[0] - self._pos < n_frames:
            self._buf = np.concatenate((self._buf[self._pos:], self._next_segment()))
            self._pos = 0
        out = self._buf[self._pos:self._pos + n_frames]
        self._pos += n_frames
        return out


class FileSource:
    """Plays back a WAV file (resampled if needed); ends when the file does."""

    def __init__(self, path, channels: int, sample_rate: int):
        buf = read_wav(path)
        if buf.channels != channels:
            raise ValueError(f"{path} has {buf.channels} channels, recorder expects {channels}")
        if buf.sample_rate != sample_rate:
            buf = resample(buf, sample_rate)
        self.channels = channels
        self.sample_rate = sample_rate
        self._data = buf.samples.T.copy()
        self._pos = 0

    @property
    def n_frames(self) -> int:
        return self._data.shape[0]

    def read(self, n_frames: int) -> np.ndarray | None:
        """Up to ``n_frames`` frames; fewer near the end, None once exhausted."""
        if self._pos >= self._data.shape[0]:
            return None
        out = self._data[self._pos:self._pos + n_frames]
        self._pos += n_frames
        return out


class Recorder:
    """One producer thread feeding a source into the session, one writer thread draining it.

    ``realtime=True`` paces the producer to the wall clock, and a slow writer
    then causes counted drops. ``realtime=False`` runs as fast as possible
    and waits for queue space instead of dropping, which is lossless.
    """

    def __init__(self, config: RecorderConfig, source, duration_s: float | None = None,
                 realtime: bool = True, poll_s: float = 0.001):
        self.config = config
        self.source = source
        self.duration_s = duration_s
        self.realtime = realtime
        self.poll_s = poll_s
        self.session: RecordingSession | None = None
        self.truncated = False
        self._stop = threading.Event()
        self._producer_done = threading.Event()
        self._threads = []
        self._lock = threading.Lock()
        self._chunks = queue.Queue(maxsize=PREFETCH_DEPTH)
        self._pending = np.zeros((0, config.channels))
        self._source_done = False

    @property
    def running(self) -> bool:
        return self.session is not None and self.session.state is SessionState.RECORDING

    def start(self) -> RecordingSession:
        with self._lock:
            if self.session is not None:
                raise RuntimeError("recorder already started")
            self.session = open_session(self.config)
            self._threads = [threading.Thread(target=self._prefetch, name="source", daemon=True),
                             threading.Thread(target=self._produce, name="producer", daemon=True),
                             threading.Thread(target=self._consume, name="writer", daemon=True)]
            for t in self._threads:
                t.start()
            return self.session

    def _limit(self):
        if self.duration_s is None:
            return None
        n = int(round(self.duration_s * self.config.sample_rate))
        return n - n % self.config.block_frames

    def _prefetch(self):
        # source reads (synthesis, resampling) stay off the paced thread
        bf = self.config.block_frames
        chunk = max(bf, int(self.config.sample_rate * PREFETCH_CHUNK_S) // bf * bf)
        limit = self._limit()
        queued = 0
        while not self._stop.is_set() and (limit is None or queued < limit):
            n = chunk if limit is None else min(chunk, limit - queued)
            data = self.source.read(n)
            if data is None or data.shape[0] == 0:
                break
            if not self._put(np.ascontiguousarray(data)):
                return
            queued += data.shape[0]
            if data.shape[0] < n:
                break
        self.truncated = limit is not None and queued < limit
        self._put(None)

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._chunks.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def _take(self, n: int):
        """Next ``n`` frames from the prefetch queue; None once the source is done."""
        while self._pending.shape[0] < n:
            if self._source_done:
                return None
            try:
                item = self._chunks.get(timeout=0.05)
            except queue.Empty:
                if self._stop.is_set():
                    return None
                continue
            if item is None:
                self._source_done = True
            else:
                self._pending = np.concatenate((self._pending, item))
        out, self._pending = self._pending[:n], self._pending[n:]
        return out

    def _produce(self):
        s = self.session
        bf = self.config.block_frames
        try:
            # wait for the first chunk so start-up latency is not counted as lateness
            if not self._fill_first():
                return
            t0 = time.monotonic()
            sent = 0
            while not self._stop.is_set():
                if self.realtime:
                    due = int((time.monotonic() - t0) * self.config.sample_rate)
                    if due - sent < bf:
                        time.sleep(0.002)
                        continue
                    n_blocks = (due - sent) // bf
                else:
                    if s._ring.free < self.config.block_samples and s.error is None:
                        time.sleep(self.poll_s / 2)
                        continue
                    n_blocks = 1
                chunk = self._take(n_blocks * bf)
                if chunk is None:
                    if self._stop.is_set():
                        break
                    # hand over what is left as whole blocks
                    chunk = self._pending[:self._pending.shape[0] // bf * bf]
                    self._pending = self._pending[:0]
                    n_blocks = chunk.shape[0] // bf
                for k in range(n_blocks):
                    push_block(s, chunk[k * bf:(k + 1) * bf])
                sent += n_blocks * bf
                if self._source_done and self._pending.shape[0] < bf:
                    break
        finally:
            self._producer_done.set()

    def _fill_first(self) -> bool:
        while self._pending.shape[0] == 0:
            if self._source_done or self._stop.is_set():
                return False
            try:
                item = self._chunks.get(timeout=0.05)
            except queue.Empty:
                continue
            if item is None:
                self._source_done = True
            else:
                self._pending = item
        return True

    def _consume(self):
        s = self.session
        while s.state is SessionState.RECORDING:
            done = self._producer_done.is_set()
            drain(s)
            if done:
                # the writer owns the file, so it also finalizes it
                close_session(s)
                break
            time.sleep(self.poll_s)

    def wait(self, timeout: float | None = None) -> bool:
        """Block until the source is exhausted or the duration reached."""
        return self._producer_done.wait(timeout)

    def stop(self) -> StatusReport:
        with self._lock:
            if self.session is None:
                raise RuntimeError("recorder was never started")
            self._stop.set()
            for t in self._threads:
                t.join()
            # no-op when the writer already closed it
            close_session(self.session)
            if self.truncated:
                log.warning("source ended after %d frames", self.session.frames_written)
            return self.session.status()

    def status(self) -> StatusReport:
        return self.session.status() if self.session else idle_status()


def idle_status() -> StatusReport:
    return StatusReport(SessionState.IDLE.value, None, 0, 0, 0.0, 0)


def expected_file_size(frames: int, channels: int) -> int:
    return HEADER_BYTES + frames * channels * 2
