"""Multichannel sound acquisition and drone-audition benchmark toolkit."""

from .wavio import AudioBuffer, read_wav, resample, write_wav

__version__ = "0.1.0"

__all__ = ["AudioBuffer", "read_wav", "write_wav", "resample", "__version__"]
