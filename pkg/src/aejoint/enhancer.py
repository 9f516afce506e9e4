"""U-Net ratio-mask enhancer operating on STFT magnitudes.

The network pools along frequency only, so any number of frames goes in and
the same number comes out. The mask multiplies the noisy magnitude and the
noisy phase is reused for reconstruction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfig, InvalidInput
from .signal_core import (
    AE_STFT,
    MixtureSample,
    StftConfig,
    Waveform,
    istft_tensor,
    stft_tensor,
    wsdr_loss,
)


@dataclass
class UNetConfig:
    depth: int = 4
    base_channels: int = 16
    channel_growth: int = 2
    freq_pool: int = 2
    time_pool: int = 1
    kernel_size: int = 3
    mask_activation: str = "sigmoid"
    stft: StftConfig = field(default_factory=lambda: AE_STFT)

    def __post_init__(self):
        if isinstance(self.stft, dict):
            self.stft = StftConfig(**self.stft)
        if self.time_pool != 1:
            raise InvalidConfig("time pooling must stay 1 so any clip length is accepted")
        if self.depth < 1 or self.base_channels < 1 or self.channel_growth < 1:
            raise InvalidConfig("depth, base_channels and channel_growth must be positive")
        if self.freq_pool < 1 or self.kernel_size % 2 != 1:
            raise InvalidConfig("freq_pool must be >= 1 and kernel_size odd")
        if self.mask_activation not in ("sigmoid", "hardtanh01"):
            raise InvalidConfig(f"unknown mask activation {self.mask_activation!r}")
        if self.freq_padding >= self.stft.n_bins:
            raise InvalidConfig(
                f"{self.stft.n_bins} frequency bins cannot be reflect-padded to a multiple "
                f"of {self.freq_pool ** self.depth}"
            )

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * self.channel_growth ** i for i in range(self.depth)]

    @property
    def freq_padding(self) -> int:
        unit = self.freq_pool ** self.depth
        return (-self.stft.n_bins) % unit

    def to_dict(self) -> dict:
        return asdict(self)


def unet_parameter_count(cfg: UNetConfig) -> int:
    """Closed-form trainable-parameter count of :class:`MaskEstimator`."""
    k2 = cfg.kernel_size ** 2
    ch = cfg.channels

    def conv_bn(cin, cout):
        return cin * cout * k2 + cout + 2 * cout

    total = 0
    prev = 1
    for c in ch:
        total += conv_bn(prev, c)
        prev = c
    total += conv_bn(ch[-1], ch[-1])
    for level in range(cfg.depth):
        c = ch[level]
        total += c * c * cfg.freq_pool + c  # transposed up-sampling
        total += conv_bn(2 * c, ch[level - 1] if level > 0 else ch[0])
    total += ch[0] + 1  # 1x1 head
    return total


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, k):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, k, padding=k // 2)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class MaskEstimator(nn.Module):
    """Maps ``magnitude[B, F, T]`` to a mask in ``[0, 1]`` of the same shape."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.config = cfg
        k, p = cfg.kernel_size, cfg.freq_pool
        ch = cfg.channels
        self.encoders = nn.ModuleList()
        prev = 1
        for c in ch:
            self.encoders.append(ConvBlock(prev, c, k))
            prev = c
        self.pool = nn.MaxPool2d((p, 1))
        self.bottleneck = ConvBlock(ch[-1], ch[-1], k)
        self.ups = nn.ModuleList(nn.ConvTranspose2d(c, c, (p, 1), stride=(p, 1)) for c in ch)
        self.decoders = nn.ModuleList(
            ConvBlock(2 * ch[i], ch[i - 1] if i > 0 else ch[0], k) for i in range(cfg.depth)
        )
        self.head = nn.Conv2d(ch[0], 1, 1)

    @property
    def stft_config(self) -> StftConfig:
        return self.config.stft

    def forward(self, magnitude: torch.Tensor) -> torch.Tensor:
        if magnitude.dim() != 3 or magnitude.shape[1] != self.config.stft.n_bins:
            raise InvalidInput(
                f"expected magnitude [batch, {self.config.stft.n_bins}, frames], "
                f"got {tuple(magnitude.shape)}"
            )
        n_bins = magnitude.shape[1]
        x = torch.log1p(magnitude).unsqueeze(1)
        pad = self.config.freq_padding
        if pad:
            x = F.pad(x, (0, 0, 0, pad), mode="reflect")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for level in reversed(range(self.config.depth)):
            x = self.ups[level](x)
            x = self.decoders[level](torch.cat([x, skips[level]], dim=1))
        logits = self.head(x)[:, 0, :n_bins, :]
        if self.config.mask_activation == "sigmoid":
            return torch.sigmoid(logits)
        return F.hardtanh(logits, 0.0, 1.0)


class FixedMask(nn.Module):
    """Constant mask; stands in for a trained model in tests and ablations."""

    def __init__(self, value: float, stft: StftConfig = AE_STFT):
        super().__init__()
        self.value = float(value)
        self.config = UNetConfig(depth=1, stft=stft)

    @property
    def stft_config(self) -> StftConfig:
        return self.config.stft

    def forward(self, magnitude):
        return torch.full_like(magnitude, self.value)


def build_unet(cfg: Optional[UNetConfig] = None, seed: int = 0) -> MaskEstimator:
    cfg = cfg or UNetConfig()
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = MaskEstimator(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def _model_dtype(model: nn.Module, default=torch.float64):
    p = next(model.parameters(), None)
    return p.dtype if p is not None else default


def model_device(model: nn.Module) -> torch.device:
    p = next(model.parameters(), None)
    return p.device if p is not None else torch.device("cpu")


def estimate_mask(model: nn.Module, magnitude) -> np.ndarray | torch.Tensor:
    if isinstance(magnitude, torch.Tensor):
        return model(magnitude)
    mag = np.asarray(magnitude, dtype=np.float64)
    if mag.ndim != 2:
        raise InvalidInput("magnitude must be [frequency_bins, frames]")
    if np.any(mag < 0):
        raise InvalidInput("magnitude must be nonnegative")
    with torch.no_grad():
        out = model(torch.as_tensor(mag, dtype=_model_dtype(model), device=model_device(model)).unsqueeze(0))
    return out[0].double().cpu().numpy()


def enhance_tensor(model: nn.Module, noisy: torch.Tensor) -> torch.Tensor:
    """Batched enhancement of ``noisy[B, T]``; output has the same shape."""
    cfg = model.stft_config
    spec = stft_tensor(noisy, cfg)
    magnitude = spec.abs()
    mask = model(magnitude)
    return istft_tensor(spec * mask, cfg, noisy.shape[-1])


def enhance(model: nn.Module, noisy: Waveform) -> Waveform:
    dtype = _model_dtype(model)
    with torch.no_grad():
        x = torch.as_tensor(noisy.samples, dtype=dtype, device=model_device(model)).unsqueeze(0)
        out = enhance_tensor(model, x)[0]
    return Waveform(out.double().cpu().numpy(), noisy.sample_rate, noisy.source_id)


def pad_batch(signals: Sequence[np.ndarray], dtype=torch.float32,
              device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-pad to the longest item; returns ``(batch[B, T], lengths[B])``."""
    lengths = torch.tensor([len(s) for s in signals], dtype=torch.long)
    out = torch.zeros(len(signals), int(lengths.max()), dtype=dtype)
    for i, s in enumerate(signals):
        out[i, : len(s)] = torch.as_tensor(s, dtype=dtype)
    if device is not None:
        out, lengths = out.to(device), lengths.to(device)
    return out, lengths


def length_mask(lengths: torch.Tensor, size: int, dtype=torch.float32) -> torch.Tensor:
    return (torch.arange(size, device=lengths.device)[None, :] < lengths[:, None]).to(dtype)


def batch_wsdr(clean: torch.Tensor, estimate: torch.Tensor, noisy: torch.Tensor,
               lengths: torch.Tensor) -> torch.Tensor:
    """Per-item wSDR restricted to each item's valid samples."""
    m = length_mask(lengths, clean.shape[-1], clean.dtype)
    return wsdr_loss(clean * m, estimate * m, noisy * m)


def ae_loss_per_sample(model: nn.Module, batch: Sequence[MixtureSample]) -> torch.Tensor:
    """One wSDR value per mixture, differentiable w.r.t. the model parameters."""
    if not batch:
        raise InvalidInput("empty batch")
    dtype = _model_dtype(model, torch.float32)
    device = model_device(model)
    clean, lengths = pad_batch([s.clean.samples for s in batch], dtype, device)
    noisy, _ = pad_batch([s.mixture.samples for s in batch], dtype, device)
    est = enhance_tensor(model, noisy)
    return batch_wsdr(clean, est, noisy, lengths)
