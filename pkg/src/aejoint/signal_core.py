"""Deterministic signal mathematics: STFT, mel/MFCC features, SNR mixing and SDR losses.

Everything here is a pure function of its arguments. Heavy lifting is done in
torch so the same code path serves both evaluation (float64, numpy in/out) and
training (batched tensors with autograd).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional, Union

import numpy as np
import torch

from .errors import DegenerateInput, InvalidConfig, InvalidInput, InvalidSignal

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10

ArrayLike = Union["Waveform", np.ndarray, torch.Tensor]


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidSignal(f"waveform must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidSignal(f"waveform {self.source_id!r} contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_length: int
    hop_length: int
    fft_size: int
    window: str = "hann"

    def __post_init__(self):
        if self.window not in ("hann", "rect"):
            raise InvalidConfig(f"unknown window {self.window!r}")
        if not 0 < self.hop_length <= self.window_length <= self.fft_size:
            raise InvalidConfig(
                "need 0 < hop_length <= window_length <= fft_size, got "
                f"{self.hop_length}/{self.window_length}/{self.fft_size}"
            )
        w = self.window_array()
        overlap = np.zeros(self.hop_length)
        for start in range(0, self.window_length, self.hop_length):
            seg = w[start:start + self.hop_length]
            overlap[: seg.shape[0]] += seg
        if overlap.max() - overlap.min() > 1e-9 * overlap.mean():
            raise InvalidConfig(
                f"{self.window} window of {self.window_length} with hop {self.hop_length} "
                "violates constant overlap-add"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_array(self) -> np.ndarray:
        if self.window == "rect":
            return np.ones(self.window_length)
        n = np.arange(self.window_length)
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / self.window_length)

    def window_tensor(self, dtype=torch.float64, device=None) -> torch.Tensor:
        return torch.as_tensor(self.window_array(), dtype=dtype, device=device)

    def n_frames(self, length):
        """Frames for ``length`` samples; works on ints and integer tensors.

        Normally ``1 + length // hop``. When frames barely overlap (for instance
        a rectangular window with hop equal to its length) extra frames are
        added so the last sample still falls under a non-zero window weight.
        """
        base = 1 + length // self.hop_length
        cover = (length - 1 - self.window_length // 2) // self.hop_length + 2
        if isinstance(length, torch.Tensor):
            return torch.maximum(base, cover)
        return max(base, cover)

    @classmethod
    def from_ms(cls, window_ms: float, hop_ms: float, fft_size: Optional[int] = None,
                window: str = "hann", sample_rate: int = SAMPLE_RATE) -> "StftConfig":
        win = int(round(window_ms * sample_rate / 1000))
        hop = int(round(hop_ms * sample_rate / 1000))
        if fft_size is None:
            fft_size = 1 << (win - 1).bit_length()
        return cls(win, hop, fft_size, window)


# 32 ms / 8 ms for the enhancer; 20 ms / 10 ms speech features; 64 ms / 16 ms scenes.
AE_STFT = StftConfig(512, 128, 512)
SPEECH_STFT = StftConfig.from_ms(20, 10)
SCENE_STFT = StftConfig.from_ms(64, 16)


@dataclass
class ComplexSpectrogram:
    values: np.ndarray
    config: StftConfig
    original_length: int

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


@dataclass
class MixtureSample:
    """One clean/noise/mixture triple.

    ``snr_db`` is always ``measure_snr(clean, noise)``. ``grid_snr_db`` is the
    evaluation tag under the task's convention; it differs only for scene
    classification where speech is the nominal signal.
    """

    clean: Waveform
    noise: Waveform
    mixture: Waveform
    snr_db: float
    noise_gain: float
    label: Any = None
    grid_snr_db: Optional[float] = None
    item_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.grid_snr_db is None:
            self.grid_snr_db = self.snr_db


def _samples(w: ArrayLike) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    if isinstance(w, torch.Tensor):
        return w.detach().cpu().numpy().astype(np.float64)
    return np.asarray(w, dtype=np.float64)


def _check_signal(x: np.ndarray) -> None:
    if x.size == 0:
        raise InvalidSignal("empty waveform")
    if not np.all(np.isfinite(x)):
        raise InvalidSignal("waveform contains non-finite samples")


# --------------------------------------------------------------------------
# STFT
# --------------------------------------------------------------------------

def stft_tensor(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Batched STFT of ``x[..., T]`` -> complex ``[..., bins, frames]``.

    Frames are centred with zero padding, so frame ``t`` is centred on sample
    ``t * hop``.
    """
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    padded = (cfg.n_frames(x.shape[-1]) - 1) * cfg.hop_length
    if padded > flat.shape[-1]:
        flat = torch.nn.functional.pad(flat, (0, padded - flat.shape[-1]))
    spec = torch.stft(
        flat,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_length,
        win_length=cfg.window_length,
        window=cfg.window_tensor(x.dtype, x.device),
        center=True,
        pad_mode="constant",
        return_complex=True,
    )
    return spec.reshape(*lead, spec.shape[-2], spec.shape[-1])


def istft_tensor(spec: torch.Tensor, cfg: StftConfig, length: int) -> torch.Tensor:
    lead = spec.shape[:-2]
    flat = spec.reshape(-1, spec.shape[-2], spec.shape[-1])
    real_dtype = torch.float64 if flat.dtype == torch.complex128 else torch.float32
    out = torch.istft(
        flat,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_length,
        win_length=cfg.window_length,
        window=cfg.window_tensor(real_dtype, spec.device),
        center=True,
        length=length,
    )
    return out.reshape(*lead, length)


def stft(w: ArrayLike, cfg: StftConfig) -> ComplexSpectrogram:
    x = _samples(w)
    _check_signal(x)
    values = stft_tensor(torch.from_numpy(x), cfg).numpy()
    return ComplexSpectrogram(values, cfg, x.shape[0])


def istft(spec: ComplexSpectrogram, cfg: Optional[StftConfig] = None) -> Waveform:
    if cfg is not None and cfg != spec.config:
        raise InvalidConfig("spectrogram was produced with a different StftConfig")
    cfg = spec.config
    values = np.asarray(spec.values)
    if values.ndim != 2 or values.shape[0] != cfg.n_bins:
        raise InvalidConfig(f"expected {cfg.n_bins} frequency bins, got shape {values.shape}")
    if values.shape[1] != cfg.n_frames(spec.original_length):
        raise InvalidConfig(
            f"{values.shape[1]} frames incompatible with length {spec.original_length}"
        )
    y = istft_tensor(torch.from_numpy(values.astype(np.complex128)), cfg, spec.original_length)
    return Waveform(y.numpy())


# --------------------------------------------------------------------------
# Mel features
# --------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, cfg: StftConfig, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """Unnormalised triangular filters (peak 1), shape ``[n_mels, bins]``.

    Between the first and last centre frequency the filters sum to exactly one.
    """
    if n_mels < 1:
        raise InvalidConfig("n_mels must be >= 1")
    if n_mels > cfg.n_bins:
        raise InvalidConfig(f"n_mels={n_mels} exceeds {cfg.n_bins} frequency bins")
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(cfg.n_bins) * sample_rate / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise InvalidConfig(
            f"mel filters {empty.tolist()} cover no FFT bin; use fewer bands or a longer FFT"
        )
    return fb


def dct_matrix(n_mels: int, n_coeffs: int) -> np.ndarray:
    """Orthonormal DCT-II basis, shape ``[n_coeffs, n_mels]``."""
    if n_coeffs > n_mels:
        raise InvalidConfig(f"n_coeffs={n_coeffs} exceeds n_mels={n_mels}")
    k = np.arange(n_coeffs)[:, None]
    m = np.arange(n_mels)[None, :]
    basis = np.cos(np.pi * k * (2 * m + 1) / (2 * n_mels)) * np.sqrt(2.0 / n_mels)
    basis[0] /= np.sqrt(2.0)
    return basis


def mel_tensor(x: torch.Tensor, fb: torch.Tensor, cfg: StftConfig, log_scale: bool) -> torch.Tensor:
    spec = stft_tensor(x, cfg)
    # |z|^2 via components keeps the gradient finite at zero bins
    power = spec.real.pow(2) + spec.imag.pow(2)
    mel = torch.matmul(fb.to(power.dtype), power)
    return torch.log(mel + LOG_FLOOR) if log_scale else mel


def mel_spectrogram(w: ArrayLike, n_mels: int, cfg: StftConfig, log_scale: bool = False) -> np.ndarray:
    x = _samples(w)
    _check_signal(x)
    fb = torch.from_numpy(mel_filterbank(n_mels, cfg))
    return mel_tensor(torch.from_numpy(x), fb, cfg, log_scale).numpy()


def mfcc(w: ArrayLike, n_mels: int, n_coeffs: int, cfg: StftConfig) -> np.ndarray:
    basis = dct_matrix(n_mels, n_coeffs)
    return basis @ mel_spectrogram(w, n_mels, cfg, log_scale=True)


# --------------------------------------------------------------------------
# SNR
# --------------------------------------------------------------------------

def measure_snr(signal: ArrayLike, noise: ArrayLike) -> float:
    s, n = _samples(signal), _samples(noise)
    if s.shape != n.shape:
        raise InvalidInput(f"length mismatch: {s.shape} vs {n.shape}")
    en = float(np.dot(n, n))
    if en == 0.0:
        raise DegenerateInput("noise has zero energy")
    return 10.0 * math.log10(float(np.dot(s, s)) / en)


def fit_noise_length(noise: np.ndarray, length: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Loop (random circular offset) or crop (random start) ``noise`` to ``length``."""
    n = noise.shape[0]
    if n == length:
        return noise.copy()
    if n > length:
        start = int(rng.integers(n - length + 1)) if rng is not None else 0
        return noise[start:start + length].copy()
    offset = int(rng.integers(n)) if rng is not None else 0
    return noise[(offset + np.arange(length)) % n]


def mix_at_snr(clean: ArrayLike, noise: ArrayLike, snr_db: float,
               rng: Optional[np.random.Generator] = None, label: Any = None) -> MixtureSample:
    x = _samples(clean)
    _check_signal(x)
    raw = _samples(noise)
    _check_signal(raw)
    ex = float(np.dot(x, x))
    if ex == 0.0:
        raise DegenerateInput("clean signal is silent")
    fitted = fit_noise_length(raw, x.shape[0], rng)
    en = float(np.dot(fitted, fitted))
    if en == 0.0:
        raise DegenerateInput("noise segment is silent")
    gain = math.sqrt(ex / (en * 10.0 ** (snr_db / 10.0)))
    scaled = gain * fitted
    sid = clean.source_id if isinstance(clean, Waveform) else ""
    return MixtureSample(
        clean=Waveform(x, source_id=sid),
        noise=Waveform(scaled),
        mixture=Waveform(x + scaled),
        snr_db=float(snr_db),
        noise_gain=gain,
        label=label,
    )


# --------------------------------------------------------------------------
# SDR losses
# --------------------------------------------------------------------------

def _as_tensors(*args):
    numpy_in = not any(isinstance(a, torch.Tensor) for a in args)
    out = []
    for a in args:
        if isinstance(a, torch.Tensor):
            out.append(a)
        else:
            out.append(torch.as_tensor(_samples(a)))
    return numpy_in, out


def _safe_norm(sq: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(torch.where(sq > 0, sq, torch.ones_like(sq)))


def _sdr(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    sx = (x * x).sum(-1)
    sh = (x_hat * x_hat).sum(-1)
    inner = (x * x_hat).sum(-1)
    nonzero = (sx > 0) & (sh > 0)
    val = -inner / (_safe_norm(sx) * _safe_norm(sh))
    val = torch.where(nonzero, val, torch.zeros_like(val))
    return val.clamp(-1.0, 1.0)


def sdr_loss(x, x_hat):
    """Negative normalised inner product over the last axis; 0 if either side is zero."""
    numpy_in, (x, x_hat) = _as_tensors(x, x_hat)
    if x.shape != x_hat.shape:
        raise InvalidInput(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    out = _sdr(x, x_hat)
    return float(out) if numpy_in and out.dim() == 0 else out


def wsdr_loss(x, x_hat, y):
    """Weighted SDR: ``a * sdr(x, x_hat) + (1 - a) * sdr(y - x, y - x_hat)``.

    ``a = |x|^2 / (|x|^2 + |y - x|^2)``. Batched over leading axes.
    """
    numpy_in, (x, x_hat, y) = _as_tensors(x, x_hat, y)
    if not (x.shape == x_hat.shape == y.shape):
        raise InvalidInput("x, x_hat and y must share a shape")
    n = y - x
    n_hat = y - x_hat
    ex = (x * x).sum(-1)
    en = (n * n).sum(-1)
    total = ex + en
    if bool((total == 0).any()):
        raise DegenerateInput("clean and noise are both zero; wSDR weight undefined")
    alpha = ex / total
    out = alpha * _sdr(x, x_hat) + (1 - alpha) * _sdr(n, n_hat)
    return float(out) if numpy_in and out.dim() == 0 else out
