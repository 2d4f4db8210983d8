import csv
import json
import socket
import subprocess
import sys
import time

import numpy as np
import pytest

from drone_audition.cli import main
from drone_audition.control import ControlClient
from drone_audition.wavio import AudioBuffer, read_wav, write_wav


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_synth_writes_requested_frames(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "hovering", "--duration", 0.5, "--rate", 8000,
                       "--channels", 4, "--out", tmp_path, "--json", "--seed", 2)
    assert code == 0
    info = json.loads(out)
    buf = read_wav(info["path"])
    assert (buf.n_frames, buf.channels, buf.sample_rate) == (4000, 4, 8000)


def test_synth_seeded(tmp_path, capsys):
    for d in ("a", "b"):
        run(capsys, "synth", "moving", "--duration", 0.3, "--rate", 8000, "--channels", 2,
            "--out", tmp_path / d, "--seed", 5)
    assert (tmp_path / "a/moving.wav").read_bytes() == (tmp_path / "b/moving.wav").read_bytes()


def test_record_twice_gives_distinct_files(tmp_path, capsys):
    reports = []
    for _ in range(2):
        code, out, _ = run(capsys, "record", "--duration", 0.5, "--channels", 2,
                           "--sample-rate", 8000, "--out", tmp_path, "--json")
        assert code == 0
        reports.append(json.loads(out))
    assert [r["frames_written"] for r in reports] == [4000, 4000]
    assert {p.name for p in tmp_path.iterdir()} == {"audioCh.wav", "audioCh1.wav"}


def test_record_from_file(tmp_path, capsys, rng):
    src = tmp_path / "src.wav"
    write_wav(AudioBuffer(rng.uniform(-0.5, 0.5, (2, 800)), 8000), src)
    code, out, _ = run(capsys, "record", "--source", "file", "--input", src, "--channels", 2,
                       "--sample-rate", 8000, "--duration", 1, "--out", tmp_path / "o", "--json")
    info = json.loads(out)
    assert code == 0 and info["frames_written"] == 800 and "note" in info
    np.testing.assert_array_equal(read_wav(info["current_path"]).samples, read_wav(src).samples)


def test_record_file_source_needs_input(tmp_path, capsys):
    code, _, err = run(capsys, "record", "--source", "file", "--out", tmp_path)
    assert code == 1 and "--input" in err


def test_analyze_outputs(tmp_path, capsys):
    run(capsys, "synth", "hovering", "--duration", 2, "--rate", 8000, "--channels", 2,
        "--out", tmp_path)
    code, out, _ = run(capsys, "analyze", tmp_path / "hovering.wav", "--out", tmp_path / "an",
                       "--json")
    assert code == 0
    stats = json.loads(out)
    assert np.isfinite(stats["mean_db"]) and stats["std_db"] >= 0
    with open(tmp_path / "an/power.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) > 10
    with open(tmp_path / "an/spectrum.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 513
    assert (tmp_path / "an/fundamentals.csv").read_text().startswith("time_s,f0_hz")
    assert json.loads((tmp_path / "an/stats.json").read_text()) == stats


def test_analyze_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "analyze", tmp_path / "nope.wav", "--out", tmp_path)
    assert code == 1 and "nope.wav" in err


def test_json_errors_on_stderr(tmp_path, capsys):
    code, out, err = run(capsys, "analyze", tmp_path / "nope.wav", "--json")
    assert code == 1 and out == ""
    assert json.loads(err)["type"] == "error"


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["synth", "drone"],
                                  ["eval", "--grid", "a:b"], ["eval", "--grid", "0:-5:10"],
                                  ["eval", "--grid", "0:0:10"], ["record", "--duration", "x"]])
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    code, _, err = run(capsys, *argv, "--out", tmp_path) if argv else run(capsys)
    assert code == 2 and err


def test_usage_error_as_json(capsys):
    code, _, err = run(capsys, "eval", "--grid", "x", "--json")
    assert code == 2 and json.loads(err)["type"] == "usage"


def test_missing_cached_recording(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DRONE_AUDITION_DATA", str(tmp_path / "empty"))
    code, _, err = run(capsys, "mix", "--noise", "hovering", "--out", tmp_path)
    assert code == 1 and "DRONE_AUDITION_DATA" in err


def test_bad_config(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{not json")
    code, _, err = run(capsys, "synth", "speech", "--config", tmp_path / "c.json")
    assert code == 1 and "config" in err
    (tmp_path / "c.json").write_text('{"sweep": {"bogus": 1}}')
    code, _, _ = run(capsys, "eval", "--config", tmp_path / "c.json", "--out", tmp_path)
    assert code == 1


def test_mix_hits_requested_snr(tmp_path, capsys):
    code, out, _ = run(capsys, "mix", "--snr", -15, "--duration", 3, "--out", tmp_path, "--json")
    assert code == 0
    info = json.loads(out)
    assert info["input_snr_db"] == pytest.approx(-15, abs=1e-9)
    m, s, v = (read_wav(tmp_path / f"{n}.wav") for n in ("mixture", "speech", "noise"))
    assert m.n_frames == s.n_frames == v.n_frames == 24000


def test_enhance(tmp_path, capsys):
    code, out, _ = run(capsys, "enhance", "--method", "mwf", "--snr", -20, "--duration", 8,
                       "--out", tmp_path, "--json")
    assert code == 0
    info = json.loads(out)
    assert len(info["per_block_snr_db"]) == 2 and info["output_snr_db"] > 0
    assert read_wav(tmp_path / "enhanced_mwf.wav").n_frames == 64000


def test_eval_negative_grid_and_determinism(tmp_path, capsys):
    outs = []
    for d in ("a", "b"):
        code, out, _ = run(capsys, "eval", "--grid", "-10:5:-5", "--duration", 8, "--method",
                           "mwf", "--seed", 3, "--out", tmp_path / d, "--json")
        assert code == 0
        outs.append((tmp_path / d / "sweep.csv").read_bytes())
    assert outs[0] == outs[1]
    with open(tmp_path / "a/sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {float(r["input_snr_db"]) for r in rows} == {-10.0, -5.0}
    assert len(rows) == 2 * 2
    summary = json.loads((tmp_path / "a/summary.json").read_text())
    assert summary["methods"]["mwf"]["failed_points"] == 0


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_bind_failure(capsys):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        port = s.getsockname()[1]
        code, _, err = run(capsys, "serve", "--bind", f"127.0.0.1:{port}")
    assert code == 1 and "bind" in err


def test_serve_malformed_bind(capsys):
    code, _, err = run(capsys, "serve", "--bind", "nowhere")
    assert code == 1 and "host:port" in err


def test_serve_and_fetch_subprocess(tmp_path, capsys):
    port = _free_port()
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"recorder": {"channels": 2, "sample_rate": 8000}}))
    proc = subprocess.Popen([sys.executable, "-m", "drone_audition", "serve", "--bind",
                             f"127.0.0.1:{port}", "--out", tmp_path / "srv", "--config", cfg],
                            stdout=subprocess.PIPE, text=True)
    try:
        hello = json.loads(proc.stdout.readline())
        assert hello["listening"].endswith(str(port))
        with ControlClient("127.0.0.1", port) as c:
            c.call("START", duration_s=0.3, realtime=False)
            assert list(c.monitor(interval=0.05))[-1]["frames_written"] == 2400
        code, out, _ = run(capsys, "fetch", "--connect", f"127.0.0.1:{port}",
                           "--out", tmp_path / "dl", "--json")
        assert code == 0 and json.loads(out)["fetched"][0]["name"] == "audioCh.wav"
        assert ((tmp_path / "dl/audioCh.wav").read_bytes()
                == (tmp_path / "srv/audioCh.wav").read_bytes())
    finally:
        proc.terminate()
        assert proc.wait(10) == 0


def test_console_entry_point_version():
    r = subprocess.run([sys.executable, "-m", "drone_audition", "--version"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
