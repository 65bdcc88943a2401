"""Unit-to-waveform synthesis, band-energy features and duration expansion."""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import LanguagePair, UnitSequence, hard_expand

SAMPLE_RATE = 16000
SAMPLES_PER_FRAME = 640
AMPLITUDE = 0.3

__all__ = [
    "Waveform", "AudioFeatureTrack", "synthesize_waveform", "extract_audio_features",
    "soft_expand", "soft_expand_weights", "hard_expand", "unit_feature_table",
    "write_wav", "read_wav", "dump_features", "load_features",
]


@dataclass
class Waveform:
    samples: np.ndarray
    rate: int = SAMPLE_RATE

    @property
    def n_frames(self) -> int:
        return len(self.samples) // SAMPLES_PER_FRAME


@dataclass
class AudioFeatureTrack:
    frames: np.ndarray  # T x 16, log(1 + band magnitude)

    def __len__(self) -> int:
        return len(self.frames)


def _unit_segment(amps: np.ndarray, freqs: np.ndarray, n_frames: int) -> np.ndarray:
    n = n_frames * SAMPLES_PER_FRAME
    t = np.arange(n) / SAMPLE_RATE
    tone = AMPLITUDE * (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :])).sum(axis=0)
    return tone * np.hanning(n + 2)[1:-1]


def synthesize_waveform(seq: UnitSequence, pair: LanguagePair) -> Waveform:
    table = pair.acoustics(seq.lang)
    if len(seq) and (seq.units.min() < 0 or seq.units.max() >= len(table)):
        bad = seq.units[(seq.units < 0) | (seq.units >= len(table))][0]
        raise ValueError(f"unknown unit id {int(bad)}")
    # a segment depends only on (unit, duration): cache the distinct ones
    cache: dict[tuple[int, int], np.ndarray] = {}
    parts = []
    for u, d in zip(seq.units.tolist(), seq.durations.tolist()):
        key = (u, d)
        if key not in cache:
            cache[key] = _unit_segment(table[u], pair.band_freqs, d)
        parts.append(cache[key])
    samples = np.concatenate(parts) if parts else np.zeros(0)
    return Waveform(samples)


def _projection_basis(freqs: np.ndarray) -> np.ndarray:
    n = np.arange(SAMPLES_PER_FRAME)
    return np.exp(-2j * np.pi * freqs[:, None] * n[None, :] / SAMPLE_RATE)


def extract_audio_features(wav: Waveform, pair: LanguagePair) -> AudioFeatureTrack:
    """Single-bin Fourier magnitude per band per 40 ms frame, ``log(1 + E)``.

    ``E_k = |X_k| / sqrt(N)`` (orthonormal DFT magnitude) is proportional to the
    band-``k`` amplitude inside the frame, so a steady unit maps to features
    ``log(1 + c * A[u])``.
    """
    T = len(wav.samples) // SAMPLES_PER_FRAME
    frames = wav.samples[: T * SAMPLES_PER_FRAME].reshape(T, SAMPLES_PER_FRAME)
    basis = _projection_basis(pair.band_freqs)
    energy = np.abs(frames @ basis.T) / np.sqrt(SAMPLES_PER_FRAME)
    return AudioFeatureTrack(np.log1p(energy))


def unit_feature_table(pair: LanguagePair, lang: str, frames_per_unit: int = 4) -> np.ndarray:
    """Per-unit steady-state audio feature rows (mean over interior frames).

    Used as the acoustic embedding that soft expansion spreads over frames
    during duration fine-tuning.
    """
    table = pair.acoustics(lang)
    rows = []
    for u in range(len(table)):
        wav = Waveform(_unit_segment(table[u], pair.band_freqs, frames_per_unit))
        feats = extract_audio_features(wav, pair).frames
        rows.append(feats[1:-1].mean(axis=0) if frames_per_unit > 2 else feats.mean(axis=0))
    return np.array(rows)


# ---------------------------------------------------------------- expansion

def soft_expand_weights(log_durations, total_frames: int, sigma: float = 1.0):
    """T x L Gaussian attention weights over cumulative duration centers."""
    ld = torch.as_tensor(log_durations, dtype=torch.float64)
    if not torch.all(torch.isfinite(ld)):
        raise ValueError("log durations must be finite")
    if total_frames < 1 or ld.numel() < 1:
        raise ValueError("need at least one unit and one frame")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = torch.exp(ld)
    centers = torch.cumsum(d, 0) - d / 2
    t = torch.arange(total_frames, dtype=torch.float64) + 0.5
    logits = -((t[:, None] - centers[None, :]) ** 2) / (2 * sigma ** 2)
    return torch.softmax(logits, dim=1)


def soft_expand(embeddings, log_durations, total_frames: int, sigma: float = 1.0):
    """Differentiable duration expansion (torch in, torch out; numpy in, numpy out)."""
    as_numpy = isinstance(embeddings, np.ndarray) and isinstance(log_durations, np.ndarray)
    emb = torch.as_tensor(embeddings, dtype=torch.float64)
    out = soft_expand_weights(log_durations, total_frames, sigma) @ emb
    return out.detach().numpy() if as_numpy else out


# ---------------------------------------------------------------- file formats

def write_wav(path: str | Path, wav: Waveform) -> None:
    """PCM16 mono, round-to-nearest, no dither."""
    pcm = np.clip(np.rint(wav.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wav.rate)
        f.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError("expected mono PCM16")
        rate = f.getframerate()
        data = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return Waveform(data.astype(np.float64) / 32767.0, rate)


def dump_features(path: str | Path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f8")
    rows, cols = frames.shape
    Path(path).write_bytes(struct.pack("<II", rows, cols) + frames.tobytes())


def load_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    rows, cols = struct.unpack_from("<II", data, 0)
    return np.frombuffer(data, dtype="<f8", offset=8, count=rows * cols).reshape(rows, cols).copy()
