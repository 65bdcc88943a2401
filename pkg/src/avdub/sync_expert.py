"""Toy SyncNet: paired window encoders and the synchronization loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import N_BANDS, LanguagePair, Sample, UnitSequence, render_lip_track
from .nn_core import (OptimizerState, ParameterSet, TrainLog, as_tensors, init_parameters,
                      optimizer_step, value_and_grad)
from .vocoder import Waveform, _unit_segment, extract_audio_features

log = logging.getLogger(__name__)

WINDOW = 5
EMBED_DIM = 32
HIDDEN = 64
P_MIN = 1e-6


@dataclass
class SyncExpertModel:
    params: ParameterSet
    window_frames: int = WINDOW
    embed_dim: int = EMBED_DIM
    log: TrainLog = field(default_factory=TrainLog)

    @property
    def meta(self) -> dict:
        return {"kind": "sync_expert", "window": self.window_frames, "dim": self.embed_dim}


def expert_layout(window: int = WINDOW, dim: int = EMBED_DIM) -> list[tuple[str, tuple[int, ...]]]:
    d_in = window * N_BANDS
    layout = []
    for m in ("video", "audio"):
        layout += [(f"{m}.w1", (HIDDEN, d_in)), (f"{m}.b1", (HIDDEN,)),
                   (f"{m}.w2", (dim, HIDDEN)), (f"{m}.b2", (dim,))]
    return layout


def init_sync_expert(seed: int) -> SyncExpertModel:
    return SyncExpertModel(init_parameters(expert_layout(), seed))


def encode(p: dict[str, torch.Tensor], modality: str, windows: torch.Tensor) -> torch.Tensor:
    """Batch of flattened windows (B x 80) -> unit-norm embeddings (B x 32)."""
    h = torch.relu(windows @ p[f"{modality}.w1"].T + p[f"{modality}.b1"])
    z = h @ p[f"{modality}.w2"].T + p[f"{modality}.b2"]
    return z / torch.linalg.vector_norm(z, dim=-1, keepdim=True)


def embed_window(model: SyncExpertModel, modality: str, window: np.ndarray) -> np.ndarray:
    if modality not in ("video", "audio"):
        raise ValueError(f"modality must be 'video' or 'audio', got {modality!r}")
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (model.window_frames, N_BANDS):
        raise ValueError(f"window must have shape {(model.window_frames, N_BANDS)}, got {window.shape}")
    with torch.no_grad():
        e = encode(as_tensors(model.params), modality, torch.tensor(window.reshape(1, -1)))
    return e[0].numpy()


def sync_probability(v, a):
    """``(1 + cos) / 2`` clamped into ``[1e-6, 1 - 1e-6]``; works on numpy or torch."""
    if isinstance(v, torch.Tensor) or isinstance(a, torch.Tensor):
        return torch.clamp((1.0 + (v * a).sum(-1)) / 2.0, P_MIN, 1.0 - P_MIN)
    return np.clip((1.0 + np.sum(np.asarray(v) * np.asarray(a), axis=-1)) / 2.0, P_MIN, 1.0 - P_MIN)


def window_stack(frames, starts, window: int = WINDOW):
    """Stack flattened windows ``frames[s:s+window]`` for each start (numpy or torch)."""
    idx = np.asarray(starts)[:, None] + np.arange(window)[None, :]
    if isinstance(frames, torch.Tensor):
        return frames[torch.as_tensor(idx)].reshape(len(idx), -1)
    return np.asarray(frames)[idx].reshape(len(idx), -1)


def window_starts(T: int, num_windows: int | None = None, window: int = WINDOW) -> np.ndarray:
    """Evenly spaced window starts; all ``T - window + 1`` starts when ``num_windows`` is None."""
    if T < window:
        raise ValueError(f"need at least {window} frames, got {T}")
    n_all = T - window + 1
    if num_windows is None or num_windows >= n_all:
        return np.arange(n_all)
    return np.unique(np.round(np.linspace(0, n_all - 1, max(1, num_windows))).astype(np.int64))


def sync_loss_torch(p: dict[str, torch.Tensor], lip: torch.Tensor | np.ndarray, audio: torch.Tensor,
                    num_windows: int | None = None, video_emb: torch.Tensor | None = None) -> torch.Tensor:
    """Negative mean log sync probability over windows (differentiable in ``audio``)."""
    T = audio.shape[0]
    if lip.shape[0] != T:
        raise ValueError(f"lip track has {lip.shape[0]} frames but audio has {T}")
    starts = window_starts(T, num_windows)
    if video_emb is None:
        video_emb = encode(p, "video", window_stack(torch.as_tensor(lip), starts))
    a = encode(p, "audio", window_stack(audio, starts))
    return -torch.log(sync_probability(video_emb, a)).mean()


def sync_loss(model: SyncExpertModel, lip_track: np.ndarray, audio_frames: np.ndarray,
              num_windows: int | None = None) -> float:
    with torch.no_grad():
        out = sync_loss_torch(as_tensors(model.params), np.asarray(lip_track, dtype=np.float64),
                              torch.as_tensor(audio_frames, dtype=torch.float64), num_windows)
    return float(out)


# ---------------------------------------------------------------- data

class FeatureCache:
    """Audio features of a unit sequence, assembled from cached per-segment features.

    Segments span whole 640-sample frames, so the feature track of a sequence is
    exactly the concatenation of its segments' tracks.
    """

    def __init__(self, pair: LanguagePair):
        self.pair = pair
        self._seg: dict[tuple[str, int, int], np.ndarray] = {}

    def segment(self, lang: str, unit: int, dur: int) -> np.ndarray:
        key = (lang, unit, dur)
        if key not in self._seg:
            amps = self.pair.acoustics(lang)[unit]
            wav = Waveform(_unit_segment(amps, self.pair.band_freqs, dur))
            self._seg[key] = extract_audio_features(wav, self.pair).frames
        return self._seg[key]

    def features(self, seq: UnitSequence) -> np.ndarray:
        return np.concatenate([self.segment(seq.lang, u, d)
                               for u, d in zip(seq.units.tolist(), seq.durations.tolist())])


@dataclass
class AlignedTrack:
    lip: np.ndarray
    audio: np.ndarray


def aligned_tracks(samples: list[Sample], pair: LanguagePair, cache: FeatureCache | None = None,
                   languages: tuple[str, ...] = ("src", "tgt")) -> list[AlignedTrack]:
    """Lip track + matching audio features, for each sample's source and canonical target."""
    cache = cache or FeatureCache(pair)
    out = []
    for s in samples:
        for seq in (s.source, s.target):
            if seq.lang not in languages:
                continue
            lip = render_lip_track(seq, pair, seed=s.sample_seed).frames
            out.append(AlignedTrack(lip, cache.features(seq)))
    return out


def _draw_batch(tracks: list[AlignedTrack], rng: np.random.Generator, batch: int,
                offset_range: tuple[int, int] = (5, 15)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo, hi = offset_range
    v_rows, a_rows, labels = [], [], []
    for b in range(batch):
        tr = tracks[int(rng.integers(len(tracks)))]
        T = len(tr.lip)
        positive = b % 2 == 0
        if positive:
            t = int(rng.integers(T - WINDOW + 1))
            v_rows.append(tr.lip[t:t + WINDOW])
            a_rows.append(tr.audio[t:t + WINDOW])
        elif rng.random() < 0.5 and T - WINDOW + 1 > lo:
            # same sequence, shifted audio
            while True:
                t = int(rng.integers(T - WINDOW + 1))
                o = int(rng.integers(lo, hi + 1)) * (1 if rng.random() < 0.5 else -1)
                if 0 <= t + o <= T - WINDOW:
                    break
            v_rows.append(tr.lip[t:t + WINDOW])
            a_rows.append(tr.audio[t + o:t + o + WINDOW])
        else:
            other = tracks[int(rng.integers(len(tracks)))]
            t = int(rng.integers(T - WINDOW + 1))
            s = int(rng.integers(len(other.audio) - WINDOW + 1))
            v_rows.append(tr.lip[t:t + WINDOW])
            a_rows.append(other.audio[s:s + WINDOW])
        labels.append(1.0 if positive else 0.0)
    shape = (batch, WINDOW * N_BANDS)
    return np.array(v_rows).reshape(shape), np.array(a_rows).reshape(shape), np.array(labels)


def _bce(p: dict[str, torch.Tensor], v: np.ndarray, a: np.ndarray, y: np.ndarray) -> torch.Tensor:
    prob = sync_probability(encode(p, "video", torch.as_tensor(v)), encode(p, "audio", torch.as_tensor(a)))
    y = torch.as_tensor(y)
    return -(y * torch.log(prob) + (1 - y) * torch.log(1 - prob)).mean()


def train_sync_expert(samples: list[Sample], pair: LanguagePair, steps: int = 3000, batch: int = 32,
                      lr: float = 1e-3, seed: int = 0, weight_decay: float = 0.0,
                      log_every: int = 50) -> SyncExpertModel:
    if len(samples) < 50:
        raise ValueError(f"corpus too small to train a sync expert ({len(samples)} < 50 samples)")
    tracks = aligned_tracks(samples, pair)
    model = init_sync_expert(seed)
    params = model.params
    state = OptimizerState.create(params, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    for step in range(steps + 1):
        v, a, y = _draw_batch(tracks, rng, batch)
        loss, grads = value_and_grad(lambda p: _bce(p, v, a, y), params)
        if step % log_every == 0 or step == steps:
            model.log.add(step, loss)
        if step == steps:
            break
        params, state = optimizer_step(params, grads, state)
    log.info("sync expert trained: loss %.4f -> %.4f", model.log.losses[0], model.log.losses[-1])
    model.params = params
    return model


def separation(model: SyncExpertModel, tracks: list[AlignedTrack], offset: int = 8,
               per_track: int = 8, seed: int = 0) -> tuple[float, float]:
    """Mean P over aligned windows and over windows with audio shifted by ``±offset``."""
    rng = np.random.default_rng(seed)
    p = as_tensors(model.params)
    pos, neg = [], []
    for tr in tracks:
        T = len(tr.lip)
        if T < WINDOW + offset:
            continue
        ts = rng.integers(0, T - WINDOW + 1, size=per_track)
        signs = np.where(rng.random(per_track) < 0.5, 1, -1)
        shifted = ts + signs * offset
        ok = (shifted >= 0) & (shifted <= T - WINDOW)
        shifted = np.where(ok, shifted, ts - signs * offset)
        with torch.no_grad():
            v = encode(p, "video", torch.as_tensor(window_stack(tr.lip, ts)))
            a_pos = encode(p, "audio", torch.as_tensor(window_stack(tr.audio, ts)))
            a_neg = encode(p, "audio", torch.as_tensor(window_stack(tr.audio, shifted)))
        pos.append(sync_probability(v, a_pos).numpy())
        neg.append(sync_probability(v, a_neg).numpy())
    return float(np.concatenate(pos).mean()), float(np.concatenate(neg).mean())
