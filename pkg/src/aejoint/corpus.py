"""Corpus construction: synthetic desk-scale corpora, WAV ingestion and SNR-grid mixtures.

Synthetic corpora are rendered from parametric archetypes so that every class
is learnable by construction and every file is a pure function of the seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Sequence

import numpy as np

from .audio_io import load_wav, wav_info, write_wav
from .errors import ConfigError, DataError, DegenerateInput
from .signal_core import SAMPLE_RATE, MixtureSample, Waveform, mix_at_snr
from .tasks import ASR_ALPHABET, TaskKind, get_task

SPLITS = ("train", "dev", "test")
SPEECH_EVAL_SNRS = (25.0, 20.0, 15.0, 10.0, 5.0, 0.0)
SCENE_EVAL_SNRS = (-25.0, -20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0)

SR = SAMPLE_RATE


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    path: str
    label: Any
    split: str
    duration: float
    sample_rate: int = SR
    channels: int = 1

    @property
    def needs_resample(self) -> bool:
        return self.sample_rate != SR or self.channels != 1


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Optional[str] = None
    rejects: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def labels(self, split: Optional[str] = None) -> list:
        return [e.label for e in self.entries if split is None or e.split == split]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = Path(self.root) / p
        return p

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"entry {e.id}: unknown split {e.split!r}")
            if e.id in seen:
                raise DataError(f"duplicate id {e.id!r} (splits {seen[e.id]} and {e.split})")
            seen[e.id] = e.split

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(json.dumps(asdict(e), sort_keys=True).encode())
        return h.hexdigest()[:16]

    def write(self, path, header: Optional[dict] = None) -> Path:
        """One JSON record per line; an optional leading ``{"header": ...}`` record."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        lines = [json.dumps({"header": header}, sort_keys=True)] if header is not None else []
        for e in self.entries:
            rec = asdict(e)
            full = self.resolve(e).resolve()
            try:
                rec["path"] = str(full.relative_to(base))
            except ValueError:
                rec["path"] = str(full)
            lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        entries = []
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if n == 1 and set(rec) == {"header"}:
                    continue
                entries.append(ManifestEntry(**rec))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"{path}:{n}: bad manifest record ({exc})") from exc
        m = cls(entries, root=str(path.parent))
        m.validate()
        return m


@dataclass
class Clip:
    id: str
    wave: Waveform
    label: Any = None


def load_clips(manifest: Manifest, split: str) -> list[Clip]:
    return [Clip(e.id, load_wav(manifest.resolve(e), e.id), e.label) for e in manifest.split(split)]


# --------------------------------------------------------------------------
# Synthetic archetypes
# --------------------------------------------------------------------------

def _envelope(n: int, attack: float = 0.02, release: float = 0.04) -> np.ndarray:
    t = np.arange(n) / SR
    dur = n / SR
    a = np.clip(t / attack, 0, 1)
    r = np.clip((dur - t) / release, 0, 1)
    return a * r


def _formant_complex(dur: float, f0_start: float, f0_end: float, formants: Sequence[float],
                     bandwidth: float, rng: np.random.Generator, tilt: float = 1.0) -> np.ndarray:
    """Harmonic tone with a gliding pitch and resonant (formant-shaped) harmonic amplitudes."""
    n = max(int(dur * SR), 16)
    f0 = np.linspace(f0_start, f0_end, n)
    phase = 2 * np.pi * np.cumsum(f0) / SR
    out = np.zeros(n)
    n_harm = int(min(7000.0 / max(f0_start, f0_end), 40))
    for h in range(1, n_harm + 1):
        fh = h * 0.5 * (f0_start + f0_end)
        amp = sum(1.0 / (1.0 + ((fh - fc) / bandwidth) ** 2) for fc in formants) / h ** (0.5 * tilt)
        out += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    return out * _envelope(n)


def _normalize(x: np.ndarray, peak: float) -> np.ndarray:
    m = np.max(np.abs(x))
    return x * (peak / m) if m > 0 else x


def _jitter(rng, value, rel):
    return value * (1.0 + rng.uniform(-rel, rel))


def _bandpass_noise(n: int, lo: float, hi: float, rng: np.random.Generator, tilt: float = 0.0) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / SR)
    shape = ((f >= lo) & (f <= hi)).astype(float)
    shape *= np.power(np.maximum(f, 20.0) / 1000.0, -tilt / 2.0)
    return np.fft.irfft(spec * shape, n)


class CommandArchetypes:
    """Each "word" is a sequence of 2-3 formant syllables with a class-specific pitch contour."""

    def __init__(self, n_classes: int, rng: np.random.Generator):
        self.classes = []
        for _ in range(n_classes):
            n_syl = int(rng.integers(2, 4))
            syls = []
            for _ in range(n_syl):
                syls.append(dict(
                    dur=rng.uniform(0.14, 0.24),
                    f0=rng.uniform(110, 240),
                    glide=rng.uniform(-0.35, 0.35),
                    formants=(rng.uniform(300, 900), rng.uniform(1000, 2600), rng.uniform(2700, 3800)),
                ))
            self.classes.append(syls)

    def render(self, label: int, rng: np.random.Generator, length: int = SR) -> np.ndarray:
        pitch = rng.uniform(0.88, 1.12)
        formant_shift = rng.uniform(0.93, 1.07)
        rate = rng.uniform(0.9, 1.1)
        parts = []
        for s in self.classes[label]:
            f0 = s["f0"] * pitch
            seg = _formant_complex(
                s["dur"] * rate, f0, f0 * (1 + s["glide"]),
                [fc * formant_shift for fc in s["formants"]], 120.0, rng,
            )
            parts.append(seg)
            parts.append(np.zeros(int(rng.uniform(0.02, 0.06) * SR)))
        word = np.concatenate(parts)[:length]
        out = np.zeros(length)
        start = int(rng.integers(0, max(length - word.shape[0], 0) + 1))
        out[start:start + word.shape[0]] = word
        return _normalize(out, rng.uniform(0.3, 0.9))


class CharacterArchetypes:
    """Per-character formant units for transcribed utterances; space is a pause."""

    def __init__(self, rng: np.random.Generator, alphabet: str = ASR_ALPHABET):
        self.units = {}
        for ch in alphabet:
            if ch == " ":
                continue
            self.units[ch] = dict(
                f1=rng.uniform(250, 950), f2=rng.uniform(950, 2800),
                glide=rng.uniform(-0.3, 0.3), dur=rng.uniform(0.07, 0.1),
            )

    def render(self, text: str, rng: np.random.Generator) -> np.ndarray:
        speaker_f0 = rng.uniform(100, 220)
        shift = rng.uniform(0.94, 1.06)
        parts = [np.zeros(int(0.05 * SR))]
        for ch in text:
            if ch == " ":
                parts.append(np.zeros(int(rng.uniform(0.06, 0.1) * SR)))
                continue
            u = self.units[ch]
            f0 = _jitter(rng, speaker_f0, 0.05)
            parts.append(_formant_complex(_jitter(rng, u["dur"], 0.1), f0, f0 * (1 + u["glide"]),
                                          [u["f1"] * shift, u["f2"] * shift, 3200.0], 110.0, rng))
        parts.append(np.zeros(int(0.05 * SR)))
        return _normalize(np.concatenate(parts), rng.uniform(0.3, 0.9))


ASR_VOCAB = ("go", "stop", "left", "right", "up", "down", "yes", "no", "on", "off",
             "red", "blue", "can't", "zero")


class EmotionArchetypes:
    """Prosodic classes: pitch level and range, syllable rate, loudness and spectral tilt."""

    PRESETS = (
        dict(name="neutral", f0=140, f0_range=0.08, rate=4.0, tilt=1.6, peak=0.5),
        dict(name="happy", f0=220, f0_range=0.35, rate=5.5, tilt=1.0, peak=0.7),
        dict(name="sad", f0=110, f0_range=0.05, rate=2.3, tilt=2.4, peak=0.3),
        dict(name="angry", f0=180, f0_range=0.20, rate=6.5, tilt=0.5, peak=0.9),
        dict(name="fear", f0=260, f0_range=0.45, rate=7.0, tilt=1.3, peak=0.45),
        dict(name="surprise", f0=240, f0_range=0.6, rate=3.5, tilt=1.0, peak=0.75),
    )

    def __init__(self, n_classes: int):
        if n_classes > len(self.PRESETS):
            raise ConfigError(f"at most {len(self.PRESETS)} synthetic emotion classes")
        self.classes = self.PRESETS[:n_classes]

    def render(self, label: int, rng: np.random.Generator, duration: float) -> np.ndarray:
        p = self.classes[label]
        parts = []
        total = 0
        n_target = int(duration * SR)
        while total < n_target:
            syl = _jitter(rng, 1.0 / p["rate"], 0.25) * 0.7
            f0 = _jitter(rng, p["f0"], 0.08)
            glide = rng.uniform(-p["f0_range"], p["f0_range"])
            formants = (rng.uniform(350, 850), rng.uniform(1000, 2500))
            seg = _formant_complex(syl, f0, f0 * (1 + glide), formants, 140.0, rng, tilt=p["tilt"])
            gap = np.zeros(int(_jitter(rng, 0.3 / p["rate"], 0.3) * SR))
            parts += [seg, gap]
            total += seg.shape[0] + gap.shape[0]
        out = np.concatenate(parts)[:n_target]
        return _normalize(out, _jitter(rng, p["peak"], 0.15))


class SceneArchetypes:
    """Coloured-noise beds with class-specific sparse events."""

    PRESETS = (
        dict(name="park", band=(300, 7000), tilt=1.0, event="chirp"),
        dict(name="street", band=(50, 4000), tilt=1.6, event="horn"),
        dict(name="metro", band=(40, 2500), tilt=2.0, event="hum"),
        dict(name="mall", band=(150, 6000), tilt=0.6, event="clack"),
        dict(name="beach", band=(80, 7500), tilt=0.2, event="swell"),
        dict(name="office", band=(500, 5000), tilt=1.2, event="beep"),
    )

    def __init__(self, n_classes: int):
        if n_classes > len(self.PRESETS):
            raise ConfigError(f"at most {len(self.PRESETS)} synthetic scene classes")
        self.classes = self.PRESETS[:n_classes]

    def render(self, label: int, rng: np.random.Generator, duration: float) -> np.ndarray:
        p = self.classes[label]
        n = int(duration * SR)
        t = np.arange(n) / SR
        lo, hi = p["band"]
        bed = _bandpass_noise(n, _jitter(rng, lo, 0.1), _jitter(rng, hi, 0.05), rng, p["tilt"])
        bed = _normalize(bed, 1.0) * 0.4
        ev = np.zeros(n)
        kind = p["event"]
        if kind == "hum":
            f = _jitter(rng, 100.0, 0.05)
            ev = sum(np.sin(2 * np.pi * f * k * t + rng.uniform(0, 6.28)) / k for k in range(1, 6))
        elif kind == "swell":
            ev = bed * (0.5 + 0.5 * np.sin(2 * np.pi * _jitter(rng, 0.4, 0.2) * t))
        else:
            for _ in range(int(rng.integers(2, 5))):
                start = int(rng.integers(0, max(n - SR // 4, 1)))
                length = int({"chirp": 0.12, "horn": 0.3, "clack": 0.03, "beep": 0.15}[kind] * SR)
                tt = np.arange(min(length, n - start)) / SR
                if kind == "chirp":
                    f0 = rng.uniform(3000, 5000)
                    seg = np.sin(2 * np.pi * (f0 * tt + 8000 * tt ** 2))
                elif kind == "horn":
                    f0 = rng.uniform(350, 450)
                    seg = np.sign(np.sin(2 * np.pi * f0 * tt)) * 0.5
                elif kind == "clack":
                    seg = rng.standard_normal(tt.shape[0]) * np.exp(-tt / 0.005)
                else:
                    seg = np.sin(2 * np.pi * rng.uniform(900, 1100) * tt)
                ev[start:start + seg.shape[0]] += seg * _envelope(seg.shape[0], 0.005, 0.01)
        ev = _normalize(ev, 1.0) * rng.uniform(0.3, 0.6)
        return _normalize(bed + ev, rng.uniform(0.4, 0.8))


def _babble(n: int, rng: np.random.Generator) -> np.ndarray:
    """Several overlapping talkers made of random formant syllables."""
    out = np.zeros(n)
    for _ in range(int(rng.integers(3, 7))):
        pos = int(rng.integers(-SR // 4, SR // 8))
        f0 = rng.uniform(95, 250)
        while pos < n:
            dur = rng.uniform(0.1, 0.25)
            seg = _formant_complex(dur, f0 * rng.uniform(0.9, 1.1), f0 * rng.uniform(0.85, 1.15),
                                   (rng.uniform(300, 900), rng.uniform(1000, 2600), rng.uniform(2700, 3800)),
                                   120.0, rng)
            seg = seg / (np.max(np.abs(seg)) + 1e-12)
            lo, hi = max(pos, 0), min(pos + seg.shape[0], n)
            if hi > lo:
                out[lo:hi] += seg[lo - pos:hi - pos] * rng.uniform(0.4, 1.0)
            pos += seg.shape[0] + int(rng.uniform(0.01, 0.08) * SR)
    return out


def render_noise_texture(rng: np.random.Generator, duration: float) -> np.ndarray:
    """Interference texture: band-limited, coloured, chirp, modulated or babble noise."""
    n = int(duration * SR)
    t = np.arange(n) / SR
    kind = int(rng.integers(5))
    if kind == 0:
        center = rng.uniform(200, 6000)
        width = rng.uniform(0.3, 1.5) * center
        x = _bandpass_noise(n, max(center - width / 2, 20), center + width / 2, rng)
    elif kind == 1:
        x = _bandpass_noise(n, 20, 8000, rng, tilt=rng.uniform(0.5, 2.0))
    elif kind == 2:
        f_lo, f_hi = sorted(rng.uniform(150, 5000, size=2))
        period = rng.uniform(0.3, 1.2)
        frac = (t % period) / period
        inst = f_lo + (f_hi - f_lo) * frac
        x = np.sin(2 * np.pi * np.cumsum(inst) / SR) + 0.3 * _bandpass_noise(n, 20, 8000, rng)
    elif kind == 3:
        x = _bandpass_noise(n, 100, 7000, rng, tilt=1.0)
        x *= 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 6.0) * t + rng.uniform(0, 6.28))
    else:
        x = _babble(n, rng)
    return _normalize(x, rng.uniform(0.4, 0.9))


# --------------------------------------------------------------------------
# synth_corpus
# --------------------------------------------------------------------------

DEFAULT_CLASSES = {"scr": 10, "ser": 4, "asc": 5}


def _item_rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _split_code(split: str) -> int:
    return {"train": 0, "dev": 1, "test": 2, "noise": 7}.get(split, 9)


def synth_corpus(task, sizes: dict, seed: int, out_dir, n_classes: Optional[int] = None) -> Manifest:
    """Render a synthetic corpus to ``out_dir`` and write ``out_dir/manifest.jsonl``.

    ``sizes`` maps split -> items per class (classifier tasks) or utterances
    (``asr``). ``task="noise"`` renders an interference corpus.
    """
    out_dir = Path(out_dir)
    name = task if task == "noise" else get_task(task).name
    entries = []
    for split in SPLITS:
        count = int(sizes.get(split, 0))
        if count < 0:
            raise ConfigError("sizes must be nonnegative")
        items = _plan_items(name, count, n_classes)
        for idx, label in enumerate(items):
            rng = _item_rng(seed, _split_code(split), idx)
            x = _render(name, label, rng, arche_rng_seed=seed, n_classes=n_classes)
            item_id = f"{name}-{split}-{idx:05d}"
            rel = Path(split) / f"{item_id}.wav"
            write_wav(out_dir / rel, x)
            entries.append(ManifestEntry(item_id, str(rel), _label_name(name, label, n_classes), split,
                                         round(x.shape[0] / SR, 6)))
    manifest = Manifest(entries, root=str(out_dir))
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


def _plan_items(name: str, count: int, n_classes: Optional[int]) -> list:
    if name in ("asr", "noise"):
        return list(range(count))
    k = n_classes or DEFAULT_CLASSES[name]
    return [c for _ in range(count) for c in range(k)]


_ARCHETYPE_CACHE: dict = {}


def _archetypes(name: str, seed: int, n_classes: Optional[int]):
    key = (name, seed, n_classes)
    if key not in _ARCHETYPE_CACHE:
        rng = _item_rng(seed, 1000)
        if name == "scr":
            obj = CommandArchetypes(n_classes or DEFAULT_CLASSES["scr"], rng)
        elif name == "asr":
            obj = CharacterArchetypes(rng)
        elif name == "ser":
            obj = EmotionArchetypes(n_classes or DEFAULT_CLASSES["ser"])
        elif name == "asc":
            obj = SceneArchetypes(n_classes or DEFAULT_CLASSES["asc"])
        else:
            obj = None
        _ARCHETYPE_CACHE[key] = obj
    return _ARCHETYPE_CACHE[key]


def class_names(task, n_classes: Optional[int] = None) -> list[str]:
    name = get_task(task).name
    if name == "asr":
        return list(ASR_ALPHABET)
    k = n_classes or DEFAULT_CLASSES[name]
    if name == "ser":
        return [p["name"] for p in EmotionArchetypes.PRESETS[:k]]
    if name == "asc":
        return [p["name"] for p in SceneArchetypes.PRESETS[:k]]
    return [f"cmd{c:02d}" for c in range(k)]


def _label_name(name: str, label, n_classes):
    if name == "noise":
        return "noise"
    if name == "asr":
        return label
    return class_names(name, n_classes)[label]


def _render(name: str, label, rng: np.random.Generator, arche_rng_seed: int, n_classes) -> np.ndarray:
    arche = _archetypes(name, arche_rng_seed, n_classes)
    if name == "scr":
        return arche.render(label, rng)
    if name == "ser":
        return arche.render(label, rng, rng.uniform(1.0, 4.0))
    if name == "asc":
        return arche.render(label, rng, 2.0)
    if name == "noise":
        return render_noise_texture(rng, 2.0)
    raise AssertionError(name)


def synth_asr_corpus(sizes: dict, seed: int, out_dir) -> Manifest:
    """Transcribed utterances of 1-4 s drawn from a small vocabulary."""
    out_dir = Path(out_dir)
    arche = _archetypes("asr", seed, None)
    entries = []
    for split in SPLITS:
        for idx in range(int(sizes.get(split, 0))):
            rng = _item_rng(seed, _split_code(split), idx)
            target = rng.uniform(1.0, 4.0)
            words = []
            while True:
                words.append(ASR_VOCAB[int(rng.integers(len(ASR_VOCAB)))])
                # ~0.085 s per character plus pauses
                est = 0.1 + sum(len(w) * 0.085 + 0.08 for w in words)
                if est >= target or len(words) >= 12:
                    break
            text = " ".join(words)
            x = arche.render(text, rng)
            item_id = f"asr-{split}-{idx:05d}"
            rel = Path(split) / f"{item_id}.wav"
            write_wav(out_dir / rel, x)
            entries.append(ManifestEntry(item_id, str(rel), text, split, round(x.shape[0] / SR, 6)))
    manifest = Manifest(entries, root=str(out_dir))
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


def synth_speech_interference(sizes: dict, seed: int, out_dir) -> Manifest:
    """Speech-like interferers (for scene tasks, where speech is the unwanted part)."""
    out_dir = Path(out_dir)
    arche = CommandArchetypes(24, _item_rng(seed, 2000))
    entries = []
    for split in SPLITS:
        for idx in range(int(sizes.get(split, 0))):
            rng = _item_rng(seed, 50 + _split_code(split), idx)
            x = np.concatenate([arche.render(int(rng.integers(24)), rng) for _ in range(2)])
            item_id = f"speech-{split}-{idx:05d}"
            rel = Path(split) / f"{item_id}.wav"
            write_wav(out_dir / rel, x)
            entries.append(ManifestEntry(item_id, str(rel), "speech", split, round(x.shape[0] / SR, 6)))
    manifest = Manifest(entries, root=str(out_dir))
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


def synth_task_corpora(task, sizes: dict, noise_sizes: dict, seed: int, out_dir,
                       n_classes: Optional[int] = None) -> tuple[Manifest, Manifest]:
    """Clean corpus plus matching interference corpus for ``task``."""
    name = get_task(task).name
    out_dir = Path(out_dir)
    if name == "asr":
        clean = synth_asr_corpus(sizes, seed, out_dir / "clean")
    else:
        clean = synth_corpus(name, sizes, seed, out_dir / "clean", n_classes)
    if name == "asc":
        noise = synth_speech_interference(noise_sizes, seed, out_dir / "noise")
    else:
        noise = synth_corpus("noise", noise_sizes, seed, out_dir / "noise")
    return clean, noise


# --------------------------------------------------------------------------
# ingest_corpus
# --------------------------------------------------------------------------

def _hash_split(item_id: str) -> str:
    v = int(hashlib.sha1(item_id.encode()).hexdigest()[:8], 16) % 10
    return "train" if v < 8 else ("dev" if v == 8 else "test")


def ingest_corpus(root, labeling: str = "directory") -> Manifest:
    """Index every WAV under ``root``.

    ``labeling="directory"`` takes the parent directory name as the label;
    ``"transcript"`` reads a sidecar ``<stem>.txt``. A leading ``train``/``dev``/
    ``test`` path component fixes the split, otherwise a stable hash of the id
    does. Unreadable files are listed in ``manifest.rejects``.
    """
    root = Path(root)
    if labeling not in ("directory", "transcript"):
        raise ConfigError(f"unknown labeling rule {labeling!r}")
    if not root.is_dir():
        raise DataError(f"corpus root {root} is not a directory")
    wavs = sorted(p for p in root.rglob("*") if p.suffix.lower() == ".wav" and p.is_file())
    if not wavs:
        warnings.warn(f"no WAV files under {root}; manifest is empty", stacklevel=2)
    entries, rejects = [], []
    for p in wavs:
        rel = p.relative_to(root)
        item_id = str(rel.with_suffix("")).replace(os.sep, "/")
        try:
            rate, channels, frames = wav_info(p)
            if frames == 0:
                raise DataError("no samples")
        except DataError as exc:
            rejects.append((str(rel), str(exc)))
            continue
        if labeling == "directory":
            label = p.parent.name if p.parent != root else ""
            if label in SPLITS:
                label = ""
            if not label:
                rejects.append((str(rel), "no class directory"))
                continue
        else:
            side = p.with_suffix(".txt")
            if not side.exists():
                rejects.append((str(rel), "missing transcript"))
                continue
            label = " ".join(side.read_text(encoding="utf-8").split())
        split = rel.parts[0] if len(rel.parts) > 1 and rel.parts[0] in SPLITS else _hash_split(item_id)
        entries.append(ManifestEntry(item_id, str(p.resolve()), label, split,
                                     round(frames / rate, 6), rate, channels))
    for path, reason in rejects:
        warnings.warn(f"rejected {path}: {reason}", stacklevel=2)
    m = Manifest(entries, root=str(root), rejects=rejects)
    m.validate()
    return m


# --------------------------------------------------------------------------
# Mixture sets
# --------------------------------------------------------------------------

@dataclass
class MixturePlanSpec:
    train_snr_range: tuple[float, float] = (0.0, 25.0)
    eval_snrs: tuple[float, ...] = SPEECH_EVAL_SNRS
    seed: int = 0
    noise_policy: str = "loop_or_crop"
    speech_is_interference: bool = False

    def __post_init__(self):
        self.train_snr_range = tuple(float(v) for v in self.train_snr_range)
        self.eval_snrs = tuple(float(v) for v in self.eval_snrs)
        lo, hi = self.train_snr_range
        if lo > hi:
            raise ConfigError(f"train SNR range {self.train_snr_range} is not ordered")
        if self.noise_policy != "loop_or_crop":
            raise ConfigError(f"unknown noise policy {self.noise_policy!r}")

    @classmethod
    def for_task(cls, task, seed: int = 0) -> "MixturePlanSpec":
        kind = get_task(task)
        if kind.name == "asc":
            return cls((-25.0, 10.0), SCENE_EVAL_SNRS, seed, speech_is_interference=True)
        return cls((0.0, 25.0), SPEECH_EVAL_SNRS, seed)

    def matches_convention(self, task) -> bool:
        return self.eval_snrs == MixturePlanSpec.for_task(task).eval_snrs

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _mix(clip: Clip, noise: Clip, tag: float, rng, plan: MixturePlanSpec) -> MixtureSample:
    # scene tasks: the scene is the enhancement target, speech the interferer,
    # but the SNR tag keeps speech as the nominal signal.
    snr = -tag if plan.speech_is_interference else tag
    s = mix_at_snr(clip.wave, noise.wave, snr, rng, label=clip.label)
    s.grid_snr_db = float(tag)
    s.item_id = clip.id
    s.meta = {"noise_id": noise.id}
    return s


def _as_clips(data, split: str) -> list[Clip]:
    if isinstance(data, Manifest):
        return load_clips(data, split)
    return list(data)


def build_mixture_set(clean, noise, plan: MixturePlanSpec, split: str, epoch: int = 0) -> Iterator[MixtureSample]:
    """Stream mixtures for ``split``.

    ``train``: one mixture per clean clip, SNR ~ U(train range), random noise
    clip; ``epoch`` selects a fresh seeded draw. Other splits: one full pass
    per evaluation SNR with clean-noise pairing and crop offsets fixed by seed,
    identical across SNR levels.
    """
    clean_clips = _as_clips(clean, split)
    noise_clips = _as_clips(noise, split)
    if not clean_clips or not noise_clips:
        raise DataError(f"split {split!r} needs both clean and noise clips")
    code = _split_code(split)
    if split == "train":
        rng = _item_rng(plan.seed, code, 10_000 + epoch)
        lo, hi = plan.train_snr_range
        for clip in clean_clips:
            tag = float(rng.uniform(lo, hi))
            nz = noise_clips[int(rng.integers(len(noise_clips)))]
            try:
                yield _mix(clip, nz, tag, rng, plan)
            except DegenerateInput as exc:
                warnings.warn(f"skipping {clip.id}: {exc}", stacklevel=2)
        return
    pair_rng = _item_rng(plan.seed, code, 20_000)
    pairing = pair_rng.integers(len(noise_clips), size=len(clean_clips))
    for tag in plan.eval_snrs:
        for i, clip in enumerate(clean_clips):
            rng = _item_rng(plan.seed, code, 30_000, i)
            try:
                yield _mix(clip, noise_clips[int(pairing[i])], tag, rng, plan)
            except DegenerateInput as exc:
                warnings.warn(f"skipping {clip.id}: {exc}", stacklevel=2)


def eval_set_id(clean_manifest: Manifest, noise_manifest: Manifest, plan: MixturePlanSpec, split: str) -> str:
    h = hashlib.sha256()
    for part in (clean_manifest.content_hash(), noise_manifest.content_hash(), plan.digest(), split):
        h.update(part.encode())
    return h.hexdigest()[:16]
