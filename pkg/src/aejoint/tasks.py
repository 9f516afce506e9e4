"""Downstream audio models, their feature front-ends and per-sample losses.

Four task kinds are supported:

* ``scr`` - command recognition, M5-style 1-D CNN on the raw waveform
* ``asr`` - residual 2-D CNN + bidirectional GRU over MFCCs, trained with CTC
* ``ser`` - 4-block CNN over a 32-band log-mel spectrogram
* ``asc`` - dual-path residual CNN over the lower/upper halves of 128 log-mel bands

All models take a zero-padded waveform batch plus per-item lengths, so that the
enhancer output can be fed straight in and gradients flow back through the
features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .errors import InfeasibleTarget, InvalidConfig, InvalidInput
from .signal_core import SCENE_STFT, SPEECH_STFT, StftConfig, dct_matrix, mel_filterbank, mel_tensor

ASR_ALPHABET = "abcdefghijklmnopqrstuvwxyz '"
BLANK = 0
NEG_INF = -1e30


@dataclass(frozen=True)
class TaskKind:
    name: str
    feature: str
    metric: str
    loss: str

    @property
    def lower_is_better(self) -> bool:
        return self.metric == "wer"


TASKS = {
    "scr": TaskKind("scr", "raw", "accuracy", "cross_entropy"),
    "asr": TaskKind("asr", "mfcc40", "wer", "ctc"),
    "ser": TaskKind("ser", "mel32", "uar", "cross_entropy"),
    "asc": TaskKind("asc", "logmel128", "accuracy", "cross_entropy"),
}


def get_task(name) -> TaskKind:
    if isinstance(name, TaskKind):
        return name
    try:
        return TASKS[str(name).lower()]
    except KeyError:
        raise InvalidConfig(f"unknown task {name!r}; expected one of {sorted(TASKS)}") from None


@dataclass
class TaskModelConfig:
    """Capacity knobs. Defaults are desk-scale presets, not the published sizes."""

    channels: int = 32
    rnn_dim: int = 64
    rnn_layers: int = 2
    res_blocks: int = 3
    dropout: float = 0.1
    n_mels: Optional[int] = None
    n_coeffs: Optional[int] = None
    stft: Optional[StftConfig] = None

    def __post_init__(self):
        if isinstance(self.stft, dict):
            self.stft = StftConfig(**self.stft)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Feature front-ends
# --------------------------------------------------------------------------

class FeatureFrontEnd(nn.Module):
    """Differentiable waveform -> feature map. ``raw`` passes samples through."""

    def __init__(self, kind: str, n_mels: Optional[int] = None, n_coeffs: Optional[int] = None,
                 stft: Optional[StftConfig] = None):
        super().__init__()
        self.kind = kind
        if kind == "raw":
            self.stft = None
            return
        defaults = {"mfcc40": (40, SPEECH_STFT), "mel32": (32, SPEECH_STFT), "logmel128": (128, SCENE_STFT)}
        if kind not in defaults:
            raise InvalidConfig(f"unknown feature kind {kind!r}")
        d_mels, d_stft = defaults[kind]
        self.n_mels = n_mels or d_mels
        self.stft = stft or d_stft
        self.register_buffer("fb", torch.from_numpy(mel_filterbank(self.n_mels, self.stft)).float())
        if kind == "mfcc40":
            self.n_coeffs = n_coeffs or self.n_mels
            self.register_buffer("dct", torch.from_numpy(dct_matrix(self.n_mels, self.n_coeffs)).float())

    @property
    def n_features(self) -> int:
        if self.kind == "raw":
            return 1
        return self.n_coeffs if self.kind == "mfcc40" else self.n_mels

    def frame_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        if self.stft is None:
            return lengths.clone()
        return self.stft.n_frames(lengths)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        if self.kind == "raw":
            return wave.unsqueeze(1)
        feats = mel_tensor(wave, self.fb.to(wave.dtype), self.stft, log_scale=True)
        if self.kind == "mfcc40":
            feats = torch.matmul(self.dct.to(wave.dtype), feats)
        return feats


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------

class M5(nn.Module):
    """1-D CNN on raw audio: four conv/pool stages, global average pool, linear head."""

    def __init__(self, n_classes: int, channels: int = 32, stride: int = 4):
        super().__init__()
        c = channels
        self.conv1 = nn.Conv1d(1, c, 80, stride=stride)
        self.bn1 = nn.BatchNorm1d(c)
        self.conv2 = nn.Conv1d(c, c, 3)
        self.bn2 = nn.BatchNorm1d(c)
        self.conv3 = nn.Conv1d(c, 2 * c, 3)
        self.bn3 = nn.BatchNorm1d(2 * c)
        self.conv4 = nn.Conv1d(2 * c, 2 * c, 3)
        self.bn4 = nn.BatchNorm1d(2 * c)
        self.fc = nn.Linear(2 * c, n_classes)

    def forward(self, x, frame_lengths=None):
        for conv, bn in ((self.conv1, self.bn1), (self.conv2, self.bn2),
                         (self.conv3, self.bn3), (self.conv4, self.bn4)):
            x = F.max_pool1d(F.relu(bn(conv(x))), 4, ceil_mode=True)
        return self.fc(x.mean(dim=-1))


class _ResidualBlock2d(nn.Module):
    """Two (batch-norm, GeLU, dropout, conv) units with an identity skip."""

    def __init__(self, channels, dropout):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        h = self.conv1(self.drop(F.gelu(self.bn1(x)))) * mask
        h = self.conv2(self.drop(F.gelu(self.bn2(h)))) * mask
        return x + h


class SpeechRecognizer(nn.Module):
    """Residual CNN -> layer norm -> BiGRU -> per-frame character logits.

    Frames are never down-sampled, and every layer output is zeroed beyond the
    item's valid frames, so padding a batch never changes a valid item's output
    (in eval mode).
    """

    def __init__(self, n_feats: int, n_tokens: int, channels=16, res_blocks=3,
                 rnn_dim=64, rnn_layers=2, dropout=0.1):
        super().__init__()
        self.stem = nn.Conv2d(1, channels, 3, padding=1)
        self.blocks = nn.ModuleList(_ResidualBlock2d(channels, dropout) for _ in range(res_blocks))
        self.proj = nn.Linear(channels * n_feats, rnn_dim)
        self.norm = nn.LayerNorm(rnn_dim)
        self.rnn = nn.GRU(rnn_dim, rnn_dim, num_layers=rnn_layers, batch_first=True,
                          bidirectional=True, dropout=dropout if rnn_layers > 1 else 0.0)
        self.drop = nn.Dropout(dropout)
        self.classifier = nn.Linear(2 * rnn_dim, n_tokens)

    def forward(self, feats, frame_lengths):
        B, _, T = feats.shape
        tmask = (torch.arange(T, device=feats.device)[None, :] < frame_lengths[:, None]).to(feats.dtype)
        mask4 = tmask[:, None, None, :]
        x = self.stem(feats.unsqueeze(1) * mask4) * mask4
        for block in self.blocks:
            x = block(x, mask4)
        x = x.flatten(1, 2).transpose(1, 2)  # [B, T, C*F]
        x = self.drop(F.gelu(self.norm(self.proj(x))))
        packed = nn.utils.rnn.pack_padded_sequence(x, frame_lengths.cpu(), batch_first=True,
                                                   enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=T)
        return self.classifier(self.drop(out))


class EmotionCNN(nn.Module):
    """Four (conv, batch-norm, ReLU, max-pool, dropout) stages, global pool, dense head."""

    def __init__(self, n_classes: int, channels=32, dropout=0.1):
        super().__init__()
        widths = [channels // 2, channels // 2, channels, channels]
        layers = []
        prev = 1
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(),
                       nn.MaxPool2d(2, ceil_mode=True), nn.Dropout(dropout)]
            prev = w
        self.input_norm = nn.BatchNorm2d(1)
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(prev, n_classes)

    def forward(self, feats, frame_lengths=None):
        x = self.features(self.input_norm(feats.unsqueeze(1)))
        return self.fc(x.mean(dim=(2, 3)))


class _PreActBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv(F.relu(self.bn(x)))


class _ScenePath(nn.Module):
    def __init__(self, channels, n_blocks=8):
        super().__init__()
        self.input_norm = nn.BatchNorm2d(1)
        self.stem = nn.Conv2d(1, channels, 3, padding=1)
        self.blocks = nn.ModuleList(_PreActBlock(channels) for _ in range(n_blocks))

    def forward(self, x):
        x = self.stem(self.input_norm(x))
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i % 2 == 1 and i < len(self.blocks) - 1:
                x = F.max_pool2d(x, 2, ceil_mode=True)
        return x


class DualPathSceneNet(nn.Module):
    """Separate residual paths for low and high mel bands, fused late by 1x1 convs."""

    def __init__(self, n_mels: int, n_classes: int, channels=16, n_blocks=8):
        super().__init__()
        if n_mels % 2:
            raise InvalidConfig(f"dual-path scene model needs an even mel count, got {n_mels}")
        self.split = n_mels // 2
        self.low = _ScenePath(channels, n_blocks)
        self.high = _ScenePath(channels, n_blocks)
        self.fuse_bn = nn.BatchNorm2d(channels)
        self.fuse1 = nn.Conv2d(channels, 2 * channels, 1)
        self.fuse_bn2 = nn.BatchNorm2d(2 * channels)
        self.fuse2 = nn.Conv2d(2 * channels, n_classes, 1)

    def forward(self, feats, frame_lengths=None):
        x = feats.unsqueeze(1)
        low = self.low(x[:, :, : self.split])
        high = self.high(x[:, :, self.split:])
        h = torch.cat([low, high], dim=2)  # concatenated along frequency
        h = self.fuse1(F.relu(self.fuse_bn(h)))
        h = self.fuse2(F.relu(self.fuse_bn2(h)))
        return h.mean(dim=(2, 3))


# --------------------------------------------------------------------------
# Task model wrapper
# --------------------------------------------------------------------------

class TaskModel(nn.Module):
    def __init__(self, kind: TaskKind, label_space: Sequence[str], cfg: TaskModelConfig):
        super().__init__()
        self.kind = kind
        self.label_space = list(label_space)
        self.config = cfg
        self.frontend = FeatureFrontEnd(kind.feature, cfg.n_mels, cfg.n_coeffs, cfg.stft)
        n_out = self.output_size
        if kind.name == "scr":
            self.net = M5(n_out, cfg.channels)
        elif kind.name == "asr":
            self.net = SpeechRecognizer(self.frontend.n_features, n_out, cfg.channels // 2,
                                        cfg.res_blocks, cfg.rnn_dim, cfg.rnn_layers, cfg.dropout)
        elif kind.name == "ser":
            self.net = EmotionCNN(n_out, cfg.channels, cfg.dropout)
        else:
            self.net = DualPathSceneNet(self.frontend.n_features, n_out, cfg.channels // 2)

    @property
    def output_size(self) -> int:
        return len(self.label_space) + (1 if self.kind.loss == "ctc" else 0)

    def features(self, wave: torch.Tensor, lengths: Optional[torch.Tensor] = None):
        if lengths is None:
            lengths = torch.full((wave.shape[0],), wave.shape[-1], dtype=torch.long)
        return self.frontend(wave), self.frontend.frame_lengths(lengths)

    def forward_features(self, feats: torch.Tensor, frame_lengths: torch.Tensor) -> torch.Tensor:
        expected = self.frontend.n_features
        if feats.dim() != 3 or feats.shape[1] != expected:
            raise InvalidInput(f"expected features [batch, {expected}, time], got {tuple(feats.shape)}")
        return self.net(feats, frame_lengths)

    def forward(self, wave: torch.Tensor, lengths: Optional[torch.Tensor] = None):
        """Returns ``(logits, output_lengths)``; lengths are only meaningful for CTC."""
        if wave.dim() != 2:
            raise InvalidInput(f"expected waveform batch [batch, samples], got {tuple(wave.shape)}")
        feats, frame_lengths = self.features(wave, lengths)
        return self.forward_features(feats, frame_lengths), frame_lengths


def build_task_model(kind, label_space: Sequence[str], cfg: Optional[TaskModelConfig] = None,
                     seed: int = 0) -> TaskModel:
    kind = get_task(kind)
    cfg = cfg or TaskModelConfig()
    if kind.loss == "ctc" and BLANK != 0:
        raise InvalidConfig("blank must be index 0")
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = TaskModel(kind, label_space, cfg)
    finally:
        torch.random.set_rng_state(state)
    return model


def task_forward(model: TaskModel, wave: torch.Tensor, lengths: Optional[torch.Tensor] = None):
    return model(wave, lengths)


# --------------------------------------------------------------------------
# Targets and losses
# --------------------------------------------------------------------------

def encode_transcript(text: str, alphabet: str = ASR_ALPHABET) -> list[int]:
    """Characters -> token ids; id 0 is reserved for the CTC blank."""
    ids = []
    for ch in text.lower():
        pos = alphabet.find(ch)
        if pos < 0:
            raise InvalidInput(f"character {ch!r} not in alphabet")
        ids.append(pos + 1)
    return ids


def decode_tokens(ids: Sequence[int], alphabet: str = ASR_ALPHABET) -> str:
    return "".join(alphabet[i - 1] for i in ids if i != BLANK)


def ctc_min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per token plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss_tensor(log_probs: torch.Tensor, targets: Sequence[Sequence[int]],
                    input_lengths: torch.Tensor, blank: int = BLANK) -> torch.Tensor:
    """Per-item CTC negative log-likelihood by the log-space forward recursion.

    ``log_probs`` is ``[B, T, K]`` (already log-softmaxed). Differentiable in
    ``log_probs``.
    """
    B, T, _ = log_probs.shape
    dev, dt = log_probs.device, log_probs.dtype
    lens = [len(t) for t in targets]
    S = 2 * max(lens, default=0) + 1
    ext = torch.full((B, S), blank, dtype=torch.long)
    for b, tgt in enumerate(targets):
        if tgt:
            ext[b, 1: 2 * len(tgt): 2] = torch.as_tensor(list(tgt), dtype=torch.long)
    skip = torch.zeros(B, S, dtype=torch.bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    ext, skip = ext.to(dev), skip.to(dev)
    input_lengths = torch.as_tensor(input_lengths, device=dev)
    emit = log_probs.gather(2, ext[:, None, :].expand(B, T, S))  # [B, T, S]
    neg = torch.full((B, S), NEG_INF, dtype=dt, device=dev)
    init = neg.clone()
    init[:, 0] = 0.0
    if S > 1:
        has_label = torch.tensor([n > 0 for n in lens], device=dev)
        init[:, 1] = torch.where(has_label, torch.zeros(B, dtype=dt, device=dev), init[:, 1])
    alpha = init + emit[:, 0]
    pad1 = torch.full((B, 1), NEG_INF, dtype=dt, device=dev)
    pad2 = torch.full((B, 2), NEG_INF, dtype=dt, device=dev)
    for t in range(1, T):
        a1 = torch.cat([pad1, alpha], dim=1)[:, :S]
        a2 = torch.where(skip, torch.cat([pad2, alpha], dim=1)[:, :S], neg)
        nxt = torch.logsumexp(torch.stack([alpha, a1, a2]), dim=0) + emit[:, t]
        active = (t < input_lengths)[:, None]
        alpha = torch.where(active, nxt, alpha)
    idx_last = torch.tensor([2 * n for n in lens], device=dev)
    last = alpha.gather(1, idx_last[:, None])[:, 0]
    prev = alpha.gather(1, (idx_last - 1).clamp(min=0)[:, None])[:, 0]
    prev = torch.where(idx_last > 0, prev, torch.full_like(prev, NEG_INF))
    return -torch.logaddexp(last, prev)


def _check_ctc_feasible(targets, input_lengths):
    for b, tgt in enumerate(targets):
        need = ctc_min_frames(tgt)
        have = int(input_lengths[b])
        if need > have:
            raise InfeasibleTarget(f"item {b}: target needs {need} frames, only {have} available")


def per_sample_loss(model: TaskModel, logits: torch.Tensor, targets, output_lengths=None,
                    differentiable: bool = True) -> torch.Tensor:
    """Cross-entropy or CTC loss per batch item, no reduction.

    With ``differentiable=False`` CTC is scored by the compiled kernel on
    detached float64 log-probabilities (used where losses only serve as
    weights).
    """
    if model.kind.loss == "cross_entropy":
        tgt = torch.as_tensor(targets, dtype=torch.long, device=logits.device)
        if tgt.shape[0] != logits.shape[0]:
            raise InvalidInput("one target per item required")
        if int(tgt.min()) < 0 or int(tgt.max()) >= logits.shape[-1]:
            raise InvalidInput("target class out of range")
        out = F.cross_entropy(logits, tgt, reduction="none")
        return out if differentiable else out.detach()
    if output_lengths is None:
        output_lengths = torch.full((logits.shape[0],), logits.shape[1], dtype=torch.long)
    _check_ctc_feasible(targets, output_lengths)
    log_probs = F.log_softmax(logits, dim=-1)
    if differentiable:
        return ctc_loss_tensor(log_probs, targets, output_lengths)
    lp = log_probs.detach().double().cpu().numpy()
    vals = [kernels.ctc_nll(lp[b, : int(output_lengths[b])], list(targets[b]), BLANK)
            for b in range(lp.shape[0])]
    return torch.tensor(vals, dtype=logits.dtype, device=logits.device)


def ctc_greedy_decode(logits, valid_frames=None, alphabet: str = ASR_ALPHABET) -> list[str]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    logits = torch.as_tensor(logits)
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
    best = logits.argmax(dim=-1).cpu().numpy()
    if valid_frames is None:
        valid_frames = [best.shape[1]] * best.shape[0]
    out = []
    for b in range(best.shape[0]):
        seq = best[b, : int(valid_frames[b])]
        ids = [int(s) for i, s in enumerate(seq) if s != BLANK and (i == 0 or s != seq[i - 1])]
        out.append(decode_tokens(ids, alphabet))
    return out


def predict(model: TaskModel, logits: torch.Tensor, output_lengths=None):
    """Class indices for classifiers, decoded strings for CTC."""
    if model.kind.loss == "ctc":
        return ctc_greedy_decode(logits, output_lengths)
    return logits.argmax(dim=-1).tolist()
