"""SNR metric, block-averaged output SNR and the input-SNR sweep."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .filters import METHODS, BlockPlan, FilterParams, blockwise_enhance
from .stft import StftConfig
from .synth import MixSpec, mix_at_snr
from .wavio import AudioBuffer, resample

log = logging.getLogger(__name__)

REPORT_FLOOR_DB = 120.0
CSV_COLUMNS = ("input_snr_db", "method", "output_snr_db", "block_index", "block_snr_db")


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)


def snr(speech, noise) -> float:
    """Energy ratio in dB, summed over all samples and channels.

    Returns ``+inf`` for zero noise and ``-inf`` for zero speech.
    """
    s, v = _samples(speech), _samples(noise)
    if s.shape != v.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {v.shape}")
    es = float(np.sum(s * s))
    ev = float(np.sum(v * v))
    if es == 0.0 and ev == 0.0:
        raise ValueError("speech and noise are both silent")
    if ev == 0.0:
        return math.inf
    if es == 0.0:
        return -math.inf
    return 10.0 * math.log10(es / ev)


def report_db(x: float) -> float:
    """Clamp to +/-120 dB for printing and files."""
    return float(np.clip(x, -REPORT_FLOOR_DB, REPORT_FLOOR_DB))


@dataclass
class BlockSnr:
    mean_db: float
    per_block: list          # dB, included blocks only
    block_indices: list
    excluded: int


def block_output_snr(shadow_speech, shadow_noise, plan: BlockPlan) -> BlockSnr:
    """Per-block SNR of the shadow components and their arithmetic mean in dB.

    Blocks without speech energy are left out and counted in ``excluded``.
    """
    s, v = _samples(shadow_speech), _samples(shadow_noise)
    if s.shape != v.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {v.shape}")
    if s.shape[-1] < plan.n_samples:
        raise ValueError("shadow components shorter than the block plan")
    values, idx, excluded = [], [], 0
    for b, (start, end) in enumerate(plan.blocks):
        sb, vb = s[..., start:end], v[..., start:end]
        if not np.any(sb):
            excluded += 1
            continue
        values.append(snr(sb, vb) if np.any(vb) else math.inf)
        idx.append(b)
    if excluded:
        log.info("%d silent block(s) excluded from the output SNR", excluded)
    mean = float(np.mean(values)) if values else math.nan
    return BlockSnr(mean, values, idx, excluded)


@dataclass
class SnrPoint:
    input_snr_db: float
    method: str
    output_snr_db: float
    per_block_snrs: list = field(default_factory=list)
    block_indices: list = field(default_factory=list)
    excluded_blocks: int = 0
    skipped_blocks: tuple = ()
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def improvement_db(self) -> float:
        return self.output_snr_db - self.input_snr_db


@dataclass(frozen=True)
class SweepConfig:
    processing_rate: int = 8000
    duration_s: float | None = 25.0
    block_s: float = 4.0
    window_s: float = 0.128
    overlap: float = 0.5
    reference: int = 0
    loading: float = 1e-3
    bss_iterations: int = 200
    bss_step: float = 0.1
    seed: int = 0
    mix_reference: str = "scale-noise"

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sweep config keys: {sorted(unknown)}")
        return cls(**d)

    def filter_params(self) -> FilterParams:
        return FilterParams(self.reference, self.loading, self.bss_iterations,
                            self.bss_step, self.seed)

    def stft_config(self) -> StftConfig:
        return StftConfig.from_seconds(self.processing_rate, self.window_s, self.overlap)


@dataclass
class SweepResult:
    points: list
    config: dict

    def methods(self) -> list:
        return sorted({p.method for p in self.points})

    def grid(self) -> list:
        return sorted({p.input_snr_db for p in self.points})

    def by_method(self, method: str) -> list:
        return sorted((p for p in self.points if p.method == method),
                      key=lambda p: p.input_snr_db)

    def summary(self) -> dict:
        out = {}
        for m in self.methods():
            pts = self.by_method(m)
            good = [p for p in pts if p.ok and math.isfinite(p.output_snr_db)]
            imp = [p.improvement_db for p in good]
            out[m] = {
                "mean_improvement_db": float(np.mean(imp)) if imp else None,
                "min_improvement_db": float(np.min(imp)) if imp else None,
                "points": len(pts),
                "failed_points": len(pts) - len(good),
                "output_snr_db": {f"{p.input_snr_db:g}": report_db(p.output_snr_db) for p in good},
            }
        return {"methods": out, "config": self.config}


def parse_grid(text: str) -> list:
    """``"a:step:b"`` to the inclusive list ``[a, a+step, ..., b]``."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"grid must look like a:step:b, got {text!r}")
    try:
        a, step, b = (float(p) for p in parts)
    except ValueError:
        raise ValueError(f"grid must look like a:step:b, got {text!r}") from None
    if step == 0 or (b - a) / step < 0:
        raise ValueError(f"grid step {step:g} does not lead from {a:g} to {b:g}")
    n = (b - a) / step
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"grid range {a:g}..{b:g} is not a multiple of {step:g}")
    return [a + i * step for i in range(int(round(n)) + 1)]


DEFAULT_GRID = tuple(float(x) for x in range(-35, 1, 5))


def prepare_inputs(speech: AudioBuffer, noise: AudioBuffer, config: SweepConfig):
    """Resample both signals to the processing rate and trim to a common length."""
    if speech.channels != noise.channels:
        raise ValueError(f"channel mismatch: {speech.channels} vs {noise.channels}")
    speech = resample(speech, config.processing_rate)
    noise = resample(noise, config.processing_rate)
    n = min(speech.n_frames, noise.n_frames)
    if config.duration_s is not None:
        n = min(n, int(round(config.duration_s * config.processing_rate)))
    return speech.slice(0, n), noise.slice(0, n)


def evaluate_point(speech, noise, input_snr_db, methods, config: SweepConfig) -> list:
    try:
        mixture, s, v = mix_at_snr(speech, noise, MixSpec(input_snr_db, config.mix_reference))
        plan = BlockPlan.for_signal(mixture.n_frames, mixture.sample_rate, config.block_s)
    except (ValueError, ArithmeticError) as exc:
        return [SnrPoint(input_snr_db, m, math.nan, error=str(exc)) for m in methods]
    points = []
    for m in methods:
        try:
            r = blockwise_enhance(mixture, s, v, m, plan, config.stft_config(),
                                  config.filter_params())
            bs = block_output_snr(r.shadow_speech, r.shadow_noise, plan)
            points.append(SnrPoint(input_snr_db, m, bs.mean_db, bs.per_block, bs.block_indices,
                                   bs.excluded, r.skipped_blocks))
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            log.warning("sweep point %g dB / %s failed: %s", input_snr_db, m, exc)
            points.append(SnrPoint(input_snr_db, m, math.nan, error=str(exc)))
    return points


def sweep(speech: AudioBuffer, noise: AudioBuffer, grid=DEFAULT_GRID, methods=("bss", "mwf"),
          config: SweepConfig = SweepConfig()) -> SweepResult:
    """Mix, enhance and score every (input SNR, method) pair.

    Failures are recorded on the affected points instead of aborting.
    """
    methods = sorted(set(methods))
    if not methods:
        raise ValueError("no methods requested")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}; expected a subset of {METHODS}")
    speech, noise = prepare_inputs(speech, noise, config)
    if speech.n_frames < int(round(config.block_s * config.processing_rate)):
        raise ValueError("signals are shorter than one processing block")
    points = []
    for x in sorted(float(g) for g in grid):
        points.extend(evaluate_point(speech, noise, x, methods, config))
    snapshot = asdict(config)
    snapshot.update(grid=sorted(float(g) for g in grid), methods=methods)
    return SweepResult(points, snapshot)


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{report_db(x):.6f}"


def emit_csv(result: SweepResult, path) -> int:
    """Write one row per (input, method, block); returns the number of data rows."""
    if not result.points:
        raise ValueError("sweep result is empty")
    rows = []
    for p in result.points:
        if p.ok and p.per_block_snrs:
            for b, val in zip(p.block_indices, p.per_block_snrs):
                rows.append((p.input_snr_db, p.method, b, p.output_snr_db, val))
        else:
            rows.append((p.input_snr_db, p.method, -1, p.output_snr_db, math.nan))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for x, m, b, out, val in rows:
            w.writerow([f"{x:g}", m, _fmt(out), "" if b < 0 else b, _fmt(val)])
    return len(rows)


def write_summary(result: SweepResult, path) -> dict:
    data = result.summary()
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return data
