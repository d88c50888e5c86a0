"""16-bit PCM WAV reading/writing with mono downmix and resampling."""

from __future__ import annotations

import os
import tempfile
import wave
from math import gcd
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import MediaUnreadable

TARGET_SR = 16_000


def read_wav(path, target_sr: int | None = TARGET_SR) -> tuple[np.ndarray, int]:
    """Return (float32 mono waveform in [-1, 1], sample rate)."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            sr = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (OSError, EOFError, wave.Error) as exc:
        raise MediaUnreadable(f"cannot read {path}: {exc}") from exc
    if width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    elif width == 4:
        data = np.frombuffer(raw, dtype="<i4").astype(np.float32) / 2147483648.0
    elif width == 1:
        data = (np.frombuffer(raw, dtype=np.uint8).astype(np.float32) - 128.0) / 128.0
    else:
        raise MediaUnreadable(f"{path}: unsupported sample width {width}")
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    if target_sr is not None and sr != target_sr:
        data = resample(data, sr, target_sr)
        sr = target_sr
    return data, sr


def resample(data: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    g = gcd(sr_in, sr_out)
    return resample_poly(data, sr_out // g, sr_in // g).astype(np.float32)


def to_pcm16(data: np.ndarray) -> bytes:
    clipped = np.clip(np.asarray(data, dtype=np.float64), -1.0, 32767 / 32768)
    return np.round(clipped * 32768.0).astype("<i2").tobytes()


def write_wav(path, data: np.ndarray, sr: int = TARGET_SR) -> None:
    """Write mono 16-bit PCM atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        with wave.open(tmp, "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(sr)
            wf.writeframes(to_pcm16(data))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def slice_seconds(data: np.ndarray, sr: int, start: float, end: float) -> np.ndarray:
    i0 = int(round(start * sr))
    i1 = int(round(end * sr))
    return data[max(i0, 0):min(i1, len(data))]
