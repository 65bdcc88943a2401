"""Lip-sync error metrics, a log-spectral quality proxy, and unit-level BLEU."""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import UnitSequence, render_lip_track
from .duration import expand_durations
from .nn_core import as_tensors
from .sync_expert import WINDOW, SyncExpertModel, encode, window_stack
from .translator import translate_batch
from .vocoder import extract_audio_features, synthesize_waveform

REPORT_SCHEMA = "avs2s-report-v1"
METRIC_KEYS = ("lse_d", "lse_c", "lsd", "unit_bleu")


def embed_track(expert: SyncExpertModel, modality: str, frames: np.ndarray, window: int = WINDOW,
                params=None) -> np.ndarray:
    """Embeddings of every ``window``-frame window of a track (one row per start)."""
    p = params if params is not None else as_tensors(expert.params)
    starts = np.arange(len(frames) - window + 1)
    with torch.no_grad():
        return encode(p, modality, torch.as_tensor(window_stack(frames, starts, window))).numpy()


def offset_curve_from_embeddings(ev: np.ndarray, ea: np.ndarray, max_offset: int = 15) -> np.ndarray:
    """``D(o)`` for ``o = -max_offset..max_offset``: mean distance of video window t to audio window t+o."""
    curve = np.empty(2 * max_offset + 1)
    for k, o in enumerate(range(-max_offset, max_offset + 1)):
        lo = max(0, -o)
        hi = min(len(ev), len(ea) - o)
        if hi <= lo:
            curve[k] = np.nan
            continue
        curve[k] = np.linalg.norm(ev[lo:hi] - ea[lo + o:hi + o], axis=1).mean()
    return curve


def offset_curve(expert: SyncExpertModel, lip: np.ndarray, audio: np.ndarray, window: int = WINDOW,
                 max_offset: int = 15, video_expert: bool = False) -> np.ndarray:
    need = window + max_offset
    if len(lip) < need or len(audio) < need:
        raise ValueError(f"tracks too short for LSE: need >= {need} frames, "
                         f"got lip={len(lip)} audio={len(audio)}")
    p = as_tensors(expert.params)
    ev = embed_track(expert, "video", lip, window, p)
    ea = embed_track(expert, "video" if video_expert else "audio", audio, window, p)
    return offset_curve_from_embeddings(ev, ea, max_offset)


def lse_from_curve(curve: np.ndarray) -> tuple[float, float]:
    d = float(np.nanmin(curve))
    return d, float(np.nanmedian(curve)) - d


def lse_metrics(expert: SyncExpertModel, lip: np.ndarray, audio: np.ndarray, window: int = WINDOW,
                max_offset: int = 15, video_expert: bool = False) -> tuple[float, float]:
    """(LSE-D, LSE-C): min and median-minus-min of the offset-distance curve.

    ``video_expert`` routes audio through the video encoder; only useful as a
    test rig where both streams are lip frames.
    """
    return lse_from_curve(offset_curve(expert, lip, audio, window, max_offset, video_expert))


def best_offset(curve: np.ndarray, max_offset: int = 15) -> int:
    return int(np.nanargmin(curve)) - max_offset


# ---------------------------------------------------------------- quality proxy

def _log_spectra(x: np.ndarray, frame: int, hop: int, eps: float) -> np.ndarray:
    n = 1 + max(0, (len(x) - frame)) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    mag = np.abs(np.fft.rfft(x[idx], axis=1))
    return 20.0 * np.log10(mag + eps)


def log_spectral_distance(a, b, rate: int = 16000, eps: float = 1e-8) -> float:
    """Mean over 25 ms / 10 ms frames of the RMS dB difference of magnitude spectra."""
    a = np.asarray(getattr(a, "samples", a), dtype=np.float64)
    b = np.asarray(getattr(b, "samples", b), dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("log spectral distance of empty audio")
    n = max(len(a), len(b))
    frame, hop = int(0.025 * rate), int(0.010 * rate)
    n = max(n, frame)
    a = np.pad(a, (0, n - len(a)))
    b = np.pad(b, (0, n - len(b)))
    diff = _log_spectra(a, frame, hop, eps) - _log_spectra(b, frame, hop, eps)
    return float(np.mean(np.sqrt(np.mean(diff ** 2, axis=1))))


# ---------------------------------------------------------------- unit BLEU

def _ngrams(seq: list[int], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def unit_bleu(hyp, refs, max_n: int = 4) -> float:
    """Sentence BLEU over unit ids: add-one smoothing for n >= 2, closest-length brevity penalty."""
    hyp = [int(u) for u in hyp]
    refs = [[int(u) for u in r] for r in refs]
    if not refs:
        raise ValueError("unit_bleu needs at least one reference")
    if not hyp:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        h = _ngrams(hyp, n)
        max_ref: Counter = Counter()
        for r in refs:
            max_ref |= _ngrams(r, n)
        clipped = sum(min(c, max_ref[g]) for g, c in h.items())
        total = max(0, len(hyp) - n + 1)
        if n == 1:
            if clipped == 0:
                return 0.0
            p = clipped / total
        else:
            p = (clipped + 1) / (total + 1)
        log_p += math.log(p) / max_n
    c = len(hyp)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


# ---------------------------------------------------------------- reports

@dataclass
class MetricReport:
    system: str
    seed: int
    samples: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        out = {}
        for key in METRIC_KEYS:
            vals = np.array([s[key] for s in self.samples], dtype=np.float64)
            out[key] = {"mean": float(vals.mean()) if len(vals) else float("nan"),
                        "std": float(vals.std()) if len(vals) else float("nan")}
        drift = [abs(s["total_frames_gen"] - s["total_frames_src"]) / s["total_frames_src"]
                 for s in self.samples]
        out["length_drift"] = {"mean": float(np.mean(drift)) if drift else float("nan"),
                               "std": float(np.std(drift)) if drift else float("nan")}
        return out

    def mean(self, key: str) -> float:
        return self.aggregate()[key]["mean"]

    def to_dict(self) -> dict:
        return {"system": self.system, "seed": int(self.seed), "samples": self.samples,
                "failures": self.failures, "aggregate": self.aggregate(), "notes": self.notes,
                "schema": REPORT_SCHEMA}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"expected report schema {REPORT_SCHEMA!r}")
        return cls(d["system"], int(d["seed"]), list(d["samples"]), list(d.get("failures", [])),
                   dict(d.get("notes", {})))


def markdown_table(reports: list[MetricReport], keys=("lse_c", "lse_d", "lsd", "unit_bleu")) -> str:
    """One row per metric, one column per system (the lip-sync results layout)."""
    names = {"lse_c": "LSE-C ↑", "lse_d": "LSE-D ↓", "lsd": "LSD (dB) ↓", "unit_bleu": "unit-BLEU ↑",
             "length_drift": "length drift ↓"}
    aggs = [r.aggregate() for r in reports]
    head = "| | " + " | ".join(f"{r.system} (seed {r.seed})" for r in reports) + " |"
    sep = "|---" * (len(reports) + 1) + "|"
    rows = [head, sep]
    for k in keys:
        rows.append(f"| {names.get(k, k)} | " + " | ".join(f"{a[k]['mean']:.4f}" for a in aggs) + " |")
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- system evaluation

@dataclass
class EvalOptions:
    """How a system produces its dubbed audio.

    ``unit_source``: "translator" | "ground_truth" | "source" (the source's own speech).
    ``duration_source``: "model" | "ground_truth" (canonical target durations).
    """
    unit_source: str = "translator"
    duration_source: str = "model"
    duration_mode: str = "free"
    window: int = WINDOW
    max_offset: int = 15
    keep_curves: int = 0


def overlay(audio: np.ndarray, n_frames: int) -> np.ndarray:
    """Fit an audio feature track to the video length: silence-pad or truncate."""
    if len(audio) >= n_frames:
        return audio[:n_frames]
    return np.concatenate([audio, np.zeros((n_frames - len(audio), audio.shape[1]))])


def units_digest(units) -> str:
    return hashlib.sha1(np.asarray(units, dtype="<i8").tobytes()).hexdigest()[:16]


def evaluate_system(samples, pair, translator, duration_model, expert: SyncExpertModel,
                    options: EvalOptions | None = None, system: str = "system", seed: int = 0,
                    translations=None) -> MetricReport:
    """Dub every test sample and score it against the source video.

    Per sample: pick target units, assign durations, synthesize, extract
    features, overlay onto the source video length, then score LSE against the
    source lip track, LSD against the canonical target rendered with its own
    durations, and unit BLEU against the canonical target. A sample whose
    pipeline raises is recorded as a failure and left out of the aggregates.
    """
    options = options or EvalOptions()
    report = MetricReport(system, seed, notes={
        "unit_source": options.unit_source, "duration_source": options.duration_source,
        "duration_mode": options.duration_mode, "window": options.window,
        "max_offset": options.max_offset,
        "quality_proxy": "log-spectral distance to the canonical target rendered with ground-truth "
                         "durations (stand-in for PESQ, whose reference signal is unspecified)",
    })
    if options.unit_source == "translator" and translations is None:
        translations = translate_batch(translator, [s.source for s in samples])
    curves = {}
    p_expert = as_tensors(expert.params)
    for k, s in enumerate(samples):
        try:
            T_s = s.source.total_frames
            if options.unit_source == "source":
                seq = s.source
            else:
                if options.unit_source == "translator":
                    units = translations[k].sequence.units
                elif options.unit_source == "ground_truth":
                    units = s.target.units
                else:
                    raise ValueError(f"unknown unit_source {options.unit_source!r}")
                if len(units) == 0:
                    raise ValueError("empty translation")
                if options.duration_source == "ground_truth":
                    if len(units) != len(s.target.units):
                        raise ValueError("ground-truth durations need canonical-length units")
                    durs = s.target.durations
                else:
                    durs = expand_durations(duration_model, units, T_s, options.duration_mode)
                seq = UnitSequence(s.target.lang, units, durs)
            wav = synthesize_waveform(seq, pair)
            audio = overlay(extract_audio_features(wav, pair).frames, T_s)
            lip = render_lip_track(s.source, pair, seed=s.sample_seed).frames
            need = options.window + options.max_offset
            if T_s < need:
                raise ValueError(f"tracks too short for LSE: need >= {need} frames, got {T_s}")
            ev = embed_track(expert, "video", lip, options.window, p_expert)
            ea = embed_track(expert, "audio", audio, options.window, p_expert)
            curve = offset_curve_from_embeddings(ev, ea, options.max_offset)
            lse_d, lse_c = lse_from_curve(curve)
            if len(curves) < options.keep_curves:
                curves[s.id] = curve.tolist()
            reference = synthesize_waveform(s.target, pair)
            report.samples.append({
                "id": s.id, "lse_d": lse_d, "lse_c": lse_c,
                "lsd": log_spectral_distance(wav, reference),
                "unit_bleu": unit_bleu(seq.units, [s.target.units]) if seq.lang == s.target.lang else 0.0,
                "total_frames_src": int(T_s), "total_frames_gen": int(seq.total_frames),
                "hyp_digest": units_digest(seq.units),
            })
        except Exception as e:  # noqa: BLE001 - per-sample failures are reported, not raised
            report.failures.append({"id": s.id, "error": f"{type(e).__name__}: {e}"})
    report.notes["failures"] = len(report.failures)
    if curves:
        report.notes["offset_curves"] = curves
    return report
