"""Location of the published-recordings cache.

The recordings are not downloaded automatically. Put ``hovering.wav``,
``moving.wav`` and ``speech.wav`` in a directory and point
``DRONE_AUDITION_DATA`` at it (default ``~/.cache/drone_audition``).
"""

from __future__ import annotations

import os
from pathlib import Path

ENV_VAR = "DRONE_AUDITION_DATA"
RECORDINGS = ("hovering", "moving", "speech")


def data_dir() -> Path:
    env = os.environ.get(ENV_VAR)
    if env:
        return Path(env).expanduser()
    return Path.home() / ".cache" / "drone_audition"


def recording_path(name: str) -> Path | None:
    """Path of a cached recording, or None when it is not there."""
    if name not in RECORDINGS:
        raise ValueError(f"unknown recording {name!r}; expected one of {RECORDINGS}")
    p = data_dir() / f"{name}.wav"
    return p if p.is_file() else None


def have_recordings() -> bool:
    return all(recording_path(n) is not None for n in RECORDINGS)
