"""WAV reading/writing. Every waveform leaves here as 16 kHz mono float64."""

from __future__ import annotations

import warnings
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import DataError
from .signal_core import SAMPLE_RATE, Waveform


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    return data.astype(np.float64)


def wav_info(path) -> tuple[int, int, int]:
    """``(sample_rate, channels, frames)`` without resampling."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(str(path), mmap=True)
    except Exception as exc:  # scipy raises ValueError, OSError, struct.error...
        raise DataError(f"cannot read {path}: {exc}") from exc
    channels = 1 if data.ndim == 1 else data.shape[1]
    return int(rate), channels, int(data.shape[0])


def resample(x: np.ndarray, orig_rate: int, target_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Windowed-sinc polyphase resampling; output has ``round(n * target / orig)`` samples."""
    if orig_rate == target_rate:
        return x
    ratio = Fraction(target_rate, orig_rate)
    y = resample_poly(x, ratio.numerator, ratio.denominator)
    return y[: int(round(x.shape[0] * target_rate / orig_rate))]


def load_wav(path, source_id: str | None = None) -> Waveform:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(str(path))
    except Exception as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    x = _to_float(np.asarray(data))
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise DataError(f"{path} contains no samples")
    x = resample(x, int(rate))
    return Waveform(x, SAMPLE_RATE, source_id or Path(path).stem)


def write_wav(path, w: Waveform | np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """16-bit PCM export; amplitudes are clamped to [-1, 1] only here."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    pcm = np.round(np.clip(x, -1.0, 1.0) * 32767.0).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), sample_rate, pcm)
