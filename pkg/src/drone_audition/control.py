"""Newline-delimited JSON control protocol for a recorder, over TCP.

Request: ``{"verb": "...", "args": {...}}``. Response: ``{"ok": true, "data": {...}}``
or ``{"ok": false, "error": "..."}``. ``FETCH`` answers with a header
carrying ``size`` and ``sha256`` followed by exactly ``size`` raw bytes.
``STATUS`` with ``{"follow": true}`` turns the reply into a stream of reports,
one per ``interval`` seconds, ending with a report flagged ``"final": true``
once the session is closed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import socket
import socketserver
import threading
import time
from dataclasses import replace
from pathlib import Path

from .recorder import (FileSource, Recorder, RecorderConfig, SessionState, SynthSource,
                       idle_status)

log = logging.getLogger(__name__)

VERBS = ("START", "STOP", "STATUS", "LIST", "FETCH")
DEFAULT_INTERVAL_S = 1.0
MAX_LINE = 1 << 20


class ProtocolError(Exception):
    pass


class ControlService:
    """Holds at most one active recording; shared by all client connections."""

    def __init__(self, base_config: RecorderConfig):
        self.base_config = base_config
        self.output_dir = Path(base_config.output_dir)
        self.recorder: Recorder | None = None
        self._mutate = threading.Lock()

    # -- verbs ---------------------------------------------------------------

    def start(self, args: dict) -> dict:
        with self._mutate:
            if self.recorder is not None and self.recorder.running:
                raise ProtocolError("already recording; STOP first")
            overrides = dict(args.get("config") or {})
            overrides.pop("output_dir", None)
            cfg = RecorderConfig.from_dict({**self.base_config.to_dict(), **overrides})
            source_kind = args.get("source", "synth")
            if source_kind == "synth":
                source = SynthSource(cfg.channels, cfg.sample_rate, seed=int(args.get("seed", 0)))
            elif source_kind == "file":
                if "path" not in args:
                    raise ProtocolError("file source needs a 'path'")
                source = FileSource(args["path"], cfg.channels, cfg.sample_rate)
            else:
                raise ProtocolError(f"unknown source {source_kind!r}")
            duration = args.get("duration_s")
            rec = Recorder(cfg, source, duration_s=None if duration is None else float(duration),
                           realtime=bool(args.get("realtime", True)))
            rec.start()
            self.recorder = rec
            return rec.status().to_dict()

    def stop(self, args: dict) -> dict:
        """Stop the current recording; after it has ended, repeat its final report."""
        with self._mutate:
            if self.recorder is None:
                raise ProtocolError("not recording")
            return self.recorder.stop().to_dict()

    def status(self) -> dict:
        rec = self.recorder
        return (rec.status() if rec is not None else idle_status()).to_dict()

    def session_closed(self) -> bool:
        rec = self.recorder
        return rec is None or rec.session is None or rec.session.state is SessionState.CLOSED

    def list_files(self) -> dict:
        current = self._open_path()
        files = []
        for p in sorted(self.output_dir.glob("*.wav")):
            if p.is_file():
                files.append({"name": p.name, "size": p.stat().st_size,
                              "open": current is not None and p.resolve() == current})
        return {"files": files}

    def _open_path(self):
        rec = self.recorder
        if rec is not None and rec.running and rec.session.path is not None:
            return rec.session.path.resolve()
        return None

    def resolve_fetch(self, args: dict) -> Path:
        name = args.get("name")
        if not isinstance(name, str) or not name or Path(name).name != name:
            raise ProtocolError("FETCH needs a plain file 'name'")
        path = self.output_dir / name
        if not path.is_file():
            raise ProtocolError(f"no such file: {name}")
        if path.resolve() == self._open_path():
            raise ProtocolError(f"{name} is still being recorded")
        return path

    def shutdown(self):
        with self._mutate:
            if self.recorder is not None and self.recorder.running:
                self.recorder.stop()


def _encode(obj) -> bytes:
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")


def ok(data) -> bytes:
    return _encode({"ok": True, "data": data})


def err(message: str) -> bytes:
    return _encode({"ok": False, "error": message})


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        service: ControlService = self.server.service
        while True:
            try:
                line = self.rfile.readline(MAX_LINE)
            except OSError:
                return
            if not line:
                return
            if not line.strip():
                continue
            try:
                self._dispatch(service, line)
            except (BrokenPipeError, ConnectionResetError):
                return

    def _dispatch(self, service, line):
        try:
            req = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            self.wfile.write(err(f"malformed JSON: {exc}"))
            return
        if not isinstance(req, dict) or not isinstance(req.get("verb"), str):
            self.wfile.write(err("request must be an object with a 'verb'"))
            return
        verb = req["verb"].upper()
        args = req.get("args") or {}
        if not isinstance(args, dict):
            self.wfile.write(err("'args' must be an object"))
            return
        if verb not in VERBS:
            self.wfile.write(err(f"unknown verb {req['verb']!r}; expected one of {list(VERBS)}"))
            return
        try:
            if verb == "START":
                self.wfile.write(ok(service.start(args)))
            elif verb == "STOP":
                self.wfile.write(ok(service.stop(args)))
            elif verb == "LIST":
                self.wfile.write(ok(service.list_files()))
            elif verb == "FETCH":
                path = service.resolve_fetch(args)
                payload = path.read_bytes()
                self.wfile.write(ok({"name": path.name, "size": len(payload),
                                     "sha256": hashlib.sha256(payload).hexdigest()}))
                self.wfile.write(payload)
            elif args.get("follow"):
                self._follow(service, float(args.get("interval", DEFAULT_INTERVAL_S)))
            else:
                self.wfile.write(ok(service.status()))
        except (ProtocolError, ValueError, OSError) as exc:
            if isinstance(exc, (BrokenPipeError, ConnectionResetError)):
                raise
            self.wfile.write(err(str(exc)))

    def _follow(self, service, interval):
        if interval <= 0:
            raise ProtocolError("interval must be positive")
        while True:
            closed = service.session_closed()
            report = service.status()
            report["final"] = closed
            self.wfile.write(ok(report))
            self.wfile.flush()
            if closed:
                return
            time.sleep(interval)


class ControlServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, service: ControlService):
        self.service = service
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve(bind_address, base_config: RecorderConfig, background: bool = False) -> ControlServer:
    """Bind and run the control service. With ``background`` the loop runs in a thread."""
    server = ControlServer(bind_address, ControlService(base_config))
    log.info("control service on %s:%d", *server.server_address[:2])
    if background:
        t = threading.Thread(target=server.serve_forever, name="control", daemon=True)
        t.start()
    else:
        server.serve_forever()
    return server


def stop_server(server: ControlServer):
    server.shutdown()
    server.service.shutdown()
    server.server_close()


class ControlClient:
    """Blocking client for the control protocol."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._r = self.sock.makefile("rb")

    def close(self):
        try:
            self._r.close()
        finally:
            self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def send(self, verb: str, **args):
        self.sock.sendall(_encode({"verb": verb, "args": args}))

    def send_raw(self, line: bytes):
        self.sock.sendall(line)

    def read_response(self) -> dict:
        line = self._r.readline(MAX_LINE)
        if not line:
            raise ConnectionError("server closed the connection")
        return json.loads(line)

    def request(self, verb: str, **args) -> dict:
        self.send(verb, **args)
        return self.read_response()

    def call(self, verb: str, **args) -> dict:
        """Like :meth:`request` but returns ``data`` and raises on an error reply."""
        resp = self.request(verb, **args)
        if not resp.get("ok"):
            raise ProtocolError(resp.get("error", "unknown error"))
        return resp["data"]

    def fetch(self, name: str) -> bytes:
        head = self.call("FETCH", name=name)
        size = int(head["size"])
        payload = self._r.read(size)
        if len(payload) != size:
            raise ConnectionError(f"short transfer: {len(payload)} of {size} bytes")
        if hashlib.sha256(payload).hexdigest() != head["sha256"]:
            raise ProtocolError("checksum mismatch")
        return payload

    def monitor(self, interval: float = DEFAULT_INTERVAL_S):
        """Yield status reports until the server sends the final one."""
        self.send("STATUS", follow=True, interval=interval)
        while True:
            resp = self.read_response()
            if not resp.get("ok"):
                raise ProtocolError(resp.get("error"))
            yield resp["data"]
            if resp["data"].get("final"):
                return


def with_output_dir(config: RecorderConfig, output_dir) -> RecorderConfig:
    return replace(config, output_dir=str(output_dir))
