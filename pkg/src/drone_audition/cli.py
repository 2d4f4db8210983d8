"""``drone-audition`` command line.

Numeric settings come from one JSON file (``--config``) with sections
``recorder``, ``sweep``, ``ego_noise`` and ``analysis``; command-line flags
override the file, which overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, data
from .control import ControlClient, serve, stop_server
from .evaluation import (DEFAULT_GRID, SweepConfig, block_output_snr, emit_csv, parse_grid,
                         snr, sweep, write_summary)
from .filters import BlockPlan, blockwise_enhance
from .recorder import FileSource, Recorder, RecorderConfig, SynthSource
from .stft import (CombConfig, StftConfig, frame_power_db, power_stats, spectrum_at, stft,
                   track_fundamentals, write_power_csv, write_spectrum_csv)
from .synth import (EgoNoiseModel, MixSpec, SpeechSurrogateConfig, mix_at_snr, synth_ego_noise,
                    synth_speech_surrogate)
from .wavio import AudioBuffer, read_wav, resample, write_wav

log = logging.getLogger("drone_audition")


class CliError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must be a JSON object")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise CliError(f"config section {name!r} must be an object")
    return dict(sec)


def _seed(args, cfg: dict, default: int = 0) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", default))


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(args, obj):
    print(json.dumps(obj, indent=None if args.json else 2, sort_keys=True))


def _parse_hostport(text: str):
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise CliError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


# -- inputs -------------------------------------------------------------------


def _noise_model(args, cfg: dict, moving: bool = False) -> EgoNoiseModel:
    params = _section(cfg, "ego_noise")
    if moving and not params.get("drift_rate"):
        params["drift_rate"] = 2.0
    params["seed"] = _seed(args, cfg, params.get("seed", 0))
    return EgoNoiseModel.from_dict(params)


def _resolve_signal(spec: str, kind: str, args, cfg: dict, duration: float, rate: int) -> AudioBuffer:
    """A WAV path, ``synth`` / ``synth-moving``, or a cached recording name."""
    if spec in ("synth", "synth-moving"):
        if kind == "speech":
            return synth_speech_surrogate(duration, rate, seed=_seed(args, cfg) + 1)
        return synth_ego_noise(_noise_model(args, cfg, spec == "synth-moving"), duration, rate)
    if spec in data.RECORDINGS:
        p = data.recording_path(spec)
        if p is None:
            raise CliError(f"recording {spec!r} not found in {data.data_dir()} "
                           f"(set {data.ENV_VAR})")
        return read_wav(p)
    return read_wav(spec)


# -- subcommands ----------------------------------------------------------------


def cmd_record(args, cfg):
    rc = _section(cfg, "recorder")
    if args.out:
        rc["output_dir"] = str(_out_dir(args))
    for key in ("channels", "sample_rate", "block_frames"):
        if getattr(args, key) is not None:
            rc[key] = getattr(args, key)
    config = RecorderConfig.from_dict(rc)
    if args.source == "synth":
        source = SynthSource(config.channels, config.sample_rate, seed=_seed(args, cfg))
    else:
        if not args.input:
            raise CliError("--source file needs --input")
        source = FileSource(args.input, config.channels, config.sample_rate)
    rec = Recorder(config, source, duration_s=args.duration, realtime=args.realtime)
    rec.start()
    try:
        rec.wait()
    finally:
        report = rec.stop()
    out = report.to_dict()
    if rec.truncated:
        out["note"] = "source ended before the requested duration"
    _emit(args, out)
    return 0 if report.error is None else 1


def cmd_serve(args, cfg):
    rc = _section(cfg, "recorder")
    rc["output_dir"] = str(_out_dir(args))
    config = RecorderConfig.from_dict(rc)
    try:
        server = serve(_parse_hostport(args.bind), config, background=True)
    except OSError as exc:
        raise CliError(f"cannot bind {args.bind}: {exc}") from exc

    def _terminate(signum, frame):
        raise SystemExit(0)

    signal.signal(signal.SIGTERM, _terminate)
    host, port = server.server_address[:2]
    print(json.dumps({"listening": f"{host}:{port}"}), flush=True)
    try:
        signal.pause() if hasattr(signal, "pause") else server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        stop_server(server)
    return 0


def cmd_analyze(args, cfg):
    ac = _section(cfg, "analysis")
    buf = read_wav(args.input)
    rate = args.rate or ac.get("sample_rate", 8000)
    buf = resample(buf, rate)
    scfg = StftConfig.from_seconds(rate, ac.get("window_s", 0.128), ac.get("overlap", 0.5))
    spec = stft(buf, scfg)
    powers = frame_power_db(buf, scfg)
    t0 = args.start if args.start is not None else 0.0
    t1 = args.end if args.end is not None else buf.duration
    mean, std = power_stats(powers, t0, t1)
    t_spec = args.at if args.at is not None else 0.5 * (t0 + t1)
    freqs, mag = spectrum_at(spec, t_spec, args.channel)

    out = _out_dir(args)
    write_power_csv(out / "power.csv", powers)
    write_spectrum_csv(out / "spectrum.csv", freqs, mag)
    comb = CombConfig(**ac.get("comb", {}))
    tracks = track_fundamentals(spec, args.max_sources, comb)
    with open(out / "fundamentals.csv", "w") as fh:
        fh.write("time_s,f0_hz\n")
        for t, f0s in tracks:
            for f in f0s:
                fh.write(f"{t:.6f},{f:.1f}\n")
    stats = {"input": str(args.input), "t_start": t0, "t_end": t1,
             "mean_db": mean, "std_db": std}
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    _emit(args, stats)
    return 0


def cmd_synth(args, cfg):
    out = _out_dir(args)
    seed = _seed(args, cfg)
    if args.kind == "speech":
        buf = synth_speech_surrogate(args.duration, args.rate, args.channels, seed=seed,
                                     config=SpeechSurrogateConfig(**_section(cfg, "speech")))
    else:
        model = _noise_model(args, cfg, moving=args.kind == "moving")
        model = replace(model, channels=args.channels)
        buf = synth_ego_noise(model, args.duration, args.rate)
    path = out / (args.name or f"{args.kind}.wav")
    write_wav(buf, path)
    _emit(args, {"path": str(path), "frames": buf.n_frames, "channels": buf.channels,
                 "sample_rate": buf.sample_rate})
    return 0


def _mixed(args, cfg, rate: int):
    sweep_cfg = _sweep_config(args, cfg)
    speech = _resolve_signal(args.speech, "speech", args, cfg, sweep_cfg.duration_s or 25.0, rate)
    noise = _resolve_signal(args.noise, "noise", args, cfg, sweep_cfg.duration_s or 25.0, rate)
    speech, noise = resample(speech, rate), resample(noise, rate)
    return sweep_cfg, mix_at_snr(speech, noise, MixSpec(args.snr, sweep_cfg.mix_reference,
                                                        sweep_cfg.duration_s))


def cmd_mix(args, cfg):
    out = _out_dir(args)
    _, (mixture, s, v) = _mixed(args, cfg, args.rate)
    for name, buf in (("mixture", mixture), ("speech", s), ("noise", v)):
        write_wav(buf, out / f"{name}.wav")
    _emit(args, {"input_snr_db": snr(s, v), "frames": mixture.n_frames,
                 "out": str(out)})
    return 0


def cmd_enhance(args, cfg):
    out = _out_dir(args)
    sc, (mixture, s, v) = _mixed(args, cfg, 8000)
    method = "mwf" if args.method == "all" else args.method
    plan = BlockPlan.for_signal(mixture.n_frames, mixture.sample_rate, sc.block_s)
    r = blockwise_enhance(mixture, s, v, method, plan, sc.stft_config(), sc.filter_params())
    # keep the enhanced signal at the input's level; clipping would spoil listening
    peak = float(np.max(np.abs(r.enhanced.samples))) if r.enhanced.n_frames else 0.0
    write_wav(r.enhanced if peak < 1.0 else AudioBuffer(r.enhanced.samples / peak, 8000),
              out / f"enhanced_{method}.wav")
    write_wav(mixture.slice(0, plan.n_samples), out / "mixture.wav")
    bs = block_output_snr(r.shadow_speech, r.shadow_noise, plan)
    _emit(args, {"method": method, "input_snr_db": args.snr, "output_snr_db": bs.mean_db,
                 "per_block_snr_db": bs.per_block, "skipped_blocks": list(r.skipped_blocks)})
    return 0


def _sweep_config(args, cfg) -> SweepConfig:
    sc = _section(cfg, "sweep")
    sc["seed"] = _seed(args, cfg, sc.get("seed", 0))
    if getattr(args, "duration", None) is not None:
        sc["duration_s"] = args.duration
    try:
        return SweepConfig.from_dict(sc)
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from exc


def cmd_eval(args, cfg):
    out = _out_dir(args)
    sc = _sweep_config(args, cfg)
    grid_text = args.grid or cfg.get("grid")
    try:
        grid = parse_grid(grid_text) if grid_text else list(DEFAULT_GRID)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    methods = ["bss", "mwf"] if args.method == "all" else [args.method]
    dur = sc.duration_s or 25.0
    speech = _resolve_signal(args.speech, "speech", args, cfg, dur, sc.processing_rate)
    noise = _resolve_signal(args.noise, "noise", args, cfg, dur, sc.processing_rate)
    result = sweep(speech, noise, grid, methods, sc)
    rows = emit_csv(result, out / "sweep.csv")
    summary = write_summary(result, out / "summary.json")
    _emit(args, {"csv": str(out / "sweep.csv"), "rows": rows,
                 "mean_improvement_db": {m: v["mean_improvement_db"]
                                         for m, v in summary["methods"].items()}})
    failed = sum(v["failed_points"] for v in summary["methods"].values())
    return 0 if failed == 0 else 1


def cmd_fetch(args, cfg):
    host, port = _parse_hostport(args.connect)
    out = _out_dir(args)
    with ControlClient(host, port) as client:
        names = [args.name] if args.name else [f["name"] for f in client.call("LIST")["files"]
                                                if not f["open"]]
        fetched = []
        for name in names:
            payload = client.fetch(name)
            (out / name).write_bytes(payload)
            fetched.append({"name": name, "size": len(payload)})
    _emit(args, {"fetched": fetched})
    return 0


# -- parser -------------------------------------------------------------------


class UsageError(CliError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--json", action="store_true", help="compact JSON output and JSON errors")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="drone-audition", description="Drone ego-noise recording and enhancement tools.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("record", parents=[common], help="record a WAV through the capture pipeline")
    r.add_argument("--source", choices=("synth", "file"), default="synth")
    r.add_argument("--input", help="WAV file for --source file")
    r.add_argument("--duration", type=float, default=5.0, help="seconds (default 5)")
    r.add_argument("--channels", type=int)
    r.add_argument("--sample-rate", dest="sample_rate", type=int)
    r.add_argument("--block-frames", dest="block_frames", type=int)
    r.add_argument("--realtime", action="store_true", help="pace the source to the wall clock")
    r.set_defaults(func=cmd_record)

    s = sub.add_parser("serve", parents=[common], help="run the TCP control service")
    s.add_argument("--bind", default="127.0.0.1:8765", help="host:port (default 127.0.0.1:8765)")
    s.set_defaults(func=cmd_serve)

    a = sub.add_parser("analyze", parents=[common], help="power, spectrum and fundamentals CSVs")
    a.add_argument("input", help="WAV file")
    a.add_argument("--start", type=float, help="stats window start, s")
    a.add_argument("--end", type=float, help="stats window end, s")
    a.add_argument("--at", type=float, help="spectrum time, s (default: middle of the window)")
    a.add_argument("--channel", type=int, default=0)
    a.add_argument("--rate", type=int, help="analysis rate, Hz (default 8000)")
    a.add_argument("--max-sources", dest="max_sources", type=int, default=4)
    a.set_defaults(func=cmd_analyze)

    y = sub.add_parser("synth", parents=[common], help="write synthetic ego-noise or speech")
    y.add_argument("kind", choices=("hovering", "moving", "speech"))
    y.add_argument("--duration", type=float, default=25.0)
    y.add_argument("--rate", type=int, default=48000)
    y.add_argument("--channels", type=int, default=8)
    y.add_argument("--name", help="output file name (default <kind>.wav)")
    y.set_defaults(func=cmd_synth)

    signal_help = "WAV path, 'synth', 'synth-moving', or a cached recording name"
    for name, func, helptext in (("mix", cmd_mix, "mix speech and noise at an input SNR"),
                                 ("enhance", cmd_enhance, "run one spatial filter block-wise")):
        m = sub.add_parser(name, parents=[common], help=helptext)
        m.add_argument("--speech", default="synth", help=signal_help)
        m.add_argument("--noise", default="synth", help=signal_help)
        m.add_argument("--snr", type=float, default=-20.0, help="input SNR, dB (default -20)")
        m.add_argument("--duration", type=float, help="seconds (default 25)")
        if name == "mix":
            m.add_argument("--rate", type=int, default=8000)
        else:
            m.add_argument("--method", choices=("mwf", "bss", "unprocessed", "all"), default="mwf")
        m.set_defaults(func=func)

    e = sub.add_parser("eval", parents=[common], help="input-SNR sweep to CSV and summary JSON")
    e.add_argument("--speech", default="synth", help=signal_help)
    e.add_argument("--noise", default="synth", help=signal_help)
    e.add_argument("--grid", help="a:step:b in dB (default -35:5:0)")
    e.add_argument("--method", choices=("mwf", "bss", "all"), default="all")
    e.add_argument("--duration", type=float, help="seconds (default 25)")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fetch", parents=[common], help="download recordings from a control service")
    f.add_argument("--connect", default="127.0.0.1:8765", help="host:port")
    f.add_argument("name", nargs="?", help="file to fetch (default: every closed file)")
    f.set_defaults(func=cmd_fetch)
    return p


def _report_error(json_errors: bool, exc: Exception, kind: str = "error"):
    if json_errors:
        sys.stderr.write(json.dumps({"error": str(exc), "type": kind}) + "\n")
    else:
        sys.stderr.write(f"drone-audition: {kind}: {exc}\n")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    # a grid such as -35:5:0 starts with '-' and would be taken for an option
    for i in range(len(argv) - 1):
        if argv[i] == "--grid":
            argv[i:i + 2] = [f"--grid={argv[i + 1]}"]
            break
    json_errors = "--json" in argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _report_error(json_errors, exc, "usage")
        return 2
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        _report_error(args.json, exc, "usage")
        return 2
    except (CliError, ValueError, OSError, RuntimeError, np.linalg.LinAlgError) as exc:
        _report_error(args.json, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
