"""Synthetic bilingual audio-visual unit world.

Two toy languages share one viseme inventory: target unit ``perm[u]`` looks
exactly like source unit ``u`` on the lips but sounds different. Durations are
kept on the 25 fps video clock (one unit spans an integer number of frames).
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn_core import keyed_rng

FPS = 25
N_BANDS = 16
SCHEMA = "avs2s-corpus-v1"
PAIR_SCHEMA = "avs2s-pair-v1"
SRC, TGT = "src", "tgt"
FILLER = 0


@dataclass
class LanguagePair:
    vocab_size: int
    perm: np.ndarray              # source unit -> target unit
    duration_scale: np.ndarray    # per source unit, in [0.6, 1.6]
    viseme_src: np.ndarray        # U x 16
    viseme_tgt: np.ndarray        # U x 16, viseme_tgt[perm[u]] == viseme_src[u]
    acoustic_src: np.ndarray      # U x 16, rows sum to 1
    acoustic_tgt: np.ndarray
    band_freqs: np.ndarray        # 16 Hz values
    synonym_classes: list[list[int]]  # partition of the target vocab
    pair_seed: int

    @property
    def inverse_perm(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.vocab_size)
        return inv

    def visemes(self, lang: str) -> np.ndarray:
        return self.viseme_src if lang == SRC else self.viseme_tgt

    def acoustics(self, lang: str) -> np.ndarray:
        return self.acoustic_src if lang == SRC else self.acoustic_tgt

    def synonym_class_of(self) -> np.ndarray:
        out = np.empty(self.vocab_size, dtype=np.int64)
        for ci, members in enumerate(self.synonym_classes):
            out[members] = ci
        return out

    def to_json(self) -> str:
        def enc(a: np.ndarray) -> dict:
            a = np.ascontiguousarray(a)
            dtype = "<f8" if a.dtype.kind == "f" else "<i8"
            return {"dtype": dtype, "shape": list(a.shape),
                    "data": base64.b64encode(a.astype(dtype).tobytes()).decode("ascii")}
        doc = {
            "schema": PAIR_SCHEMA,
            "pair_seed": int(self.pair_seed),
            "vocab_size": int(self.vocab_size),
            "perm": enc(self.perm),
            "duration_scale": enc(self.duration_scale),
            "viseme_src": enc(self.viseme_src),
            "viseme_tgt": enc(self.viseme_tgt),
            "acoustic_src": enc(self.acoustic_src),
            "acoustic_tgt": enc(self.acoustic_tgt),
            "band_freqs": enc(self.band_freqs),
            "synonym_classes": [list(map(int, c)) for c in self.synonym_classes],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LanguagePair":
        doc = json.loads(text)
        if doc.get("schema") != PAIR_SCHEMA:
            raise ValueError(f"expected schema {PAIR_SCHEMA!r}, got {doc.get('schema')!r}")

        def dec(d: dict) -> np.ndarray:
            a = np.frombuffer(base64.b64decode(d["data"]), dtype=d["dtype"]).reshape(d["shape"])
            return a.astype(np.float64 if d["dtype"] == "<f8" else np.int64)
        return cls(
            vocab_size=int(doc["vocab_size"]), perm=dec(doc["perm"]),
            duration_scale=dec(doc["duration_scale"]), viseme_src=dec(doc["viseme_src"]),
            viseme_tgt=dec(doc["viseme_tgt"]), acoustic_src=dec(doc["acoustic_src"]),
            acoustic_tgt=dec(doc["acoustic_tgt"]), band_freqs=dec(doc["band_freqs"]),
            synonym_classes=[list(c) for c in doc["synonym_classes"]], pair_seed=int(doc["pair_seed"]),
        )


@dataclass
class UnitSequence:
    lang: str
    units: np.ndarray
    durations: np.ndarray

    def __post_init__(self):
        self.units = np.asarray(self.units, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        if self.units.shape != self.durations.shape:
            raise ValueError("units and durations differ in length")
        if np.any(self.durations < 1):
            raise ValueError("every duration must be >= 1 frame")

    @property
    def total_frames(self) -> int:
        return int(self.durations.sum())

    def __len__(self) -> int:
        return len(self.units)

    def to_dict(self) -> dict:
        return {"lang": self.lang, "units": self.units.tolist(), "durations": self.durations.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "UnitSequence":
        return cls(d["lang"], d["units"], d["durations"])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, UnitSequence):
            return NotImplemented
        return (self.lang == other.lang and np.array_equal(self.units, other.units)
                and np.array_equal(self.durations, other.durations))


@dataclass
class Sample:
    id: str
    sample_seed: int
    source: UnitSequence
    target: UnitSequence
    paraphrases: list[UnitSequence] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"id": self.id, "seed": int(self.sample_seed), "src": self.source.to_dict(),
                "tgt": self.target.to_dict(), "paraphrases": [p.to_dict() for p in self.paraphrases],
                "schema": SCHEMA}

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        return cls(d["id"], int(d["seed"]), UnitSequence.from_dict(d["src"]),
                   UnitSequence.from_dict(d["tgt"]), [UnitSequence.from_dict(p) for p in d["paraphrases"]])

    @property
    def targets(self) -> list[UnitSequence]:
        """Canonical target followed by the paraphrases."""
        return [self.target, *self.paraphrases]


@dataclass
class LipTrack:
    frames: np.ndarray

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------- generation

def build_language_pair(vocab_size: int = 40, seed: int = 0) -> LanguagePair:
    if vocab_size < 8 or vocab_size % 2:
        raise ValueError(f"vocab_size must be an even integer >= 8, got {vocab_size}")
    U = vocab_size
    perm = keyed_rng(seed, "perm").permutation(U)
    scale = keyed_rng(seed, "duration_scale").uniform(0.6, 1.6, size=U)

    # synonym classes of size 2-4 covering the target vocab
    rng = keyed_rng(seed, "synonyms")
    order = rng.permutation(U)
    classes, i = [], 0
    while i < U:
        left = U - i
        size = int(rng.integers(2, 5))
        if left - size == 1 or size > left:
            size = left if left <= 4 else 2
        classes.append(sorted(int(u) for u in order[i:i + size]))
        i += size

    # one viseme row per synonym class; source inherits through the permutation
    rows = keyed_rng(seed, "visemes").standard_normal((len(classes), N_BANDS))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    viseme_tgt = np.empty((U, N_BANDS))
    for ci, members in enumerate(classes):
        viseme_tgt[members] = rows[ci]
    viseme_src = viseme_tgt[perm].copy()

    acoustic_src = keyed_rng(seed, "acoustic_src").dirichlet(np.full(N_BANDS, 0.3), size=U)
    acoustic_tgt = keyed_rng(seed, "acoustic_tgt").dirichlet(np.full(N_BANDS, 0.3), size=U)
    acoustic_src /= acoustic_src.sum(axis=1, keepdims=True)
    acoustic_tgt /= acoustic_tgt.sum(axis=1, keepdims=True)
    freqs = 200.0 + 150.0 * np.arange(N_BANDS)

    return LanguagePair(U, perm, scale, viseme_src, viseme_tgt, acoustic_src, acoustic_tgt,
                        freqs, classes, int(seed))


def _sample_rng(pair: LanguagePair, seed: int, what: str) -> np.random.Generator:
    return keyed_rng(pair.pair_seed * 1_000_003 + int(seed), what)


def generate_sample(pair: LanguagePair, seed: int, sample_id: str | None = None,
                    length_range: tuple[int, int] = (20, 80), duration_range: tuple[int, int] = (1, 4),
                    with_paraphrases: bool = True) -> Sample:
    rng = _sample_rng(pair, seed, "sample")
    L = int(rng.integers(length_range[0], length_range[1] + 1))
    units = rng.integers(0, pair.vocab_size, size=L)
    durs = rng.integers(duration_range[0], duration_range[1] + 1, size=L)
    tgt_durs = np.maximum(1, np.rint(durs * pair.duration_scale[units])).astype(np.int64)
    sample = Sample(sample_id or f"s{seed:06d}", int(seed), UnitSequence(SRC, units, durs),
                    UnitSequence(TGT, pair.perm[units], tgt_durs))
    if with_paraphrases:
        sample.paraphrases = generate_paraphrases(sample, pair, seed)
    return sample


def _paraphrase(target: UnitSequence, pair: LanguagePair, rng: np.random.Generator, bias: str,
                substitute: bool = True, edit: bool = True, jitter: bool = True) -> UnitSequence:
    units = target.units.copy()
    durs = target.durations.copy()
    L = len(units)

    if substitute:
        cls_of = pair.synonym_class_of()
        n_sub = int(round(0.2 * L))
        for pos in rng.choice(L, size=n_sub, replace=False):
            members = [m for m in pair.synonym_classes[cls_of[units[pos]]] if m != units[pos]]
            units[pos] = members[int(rng.integers(len(members)))]

    if edit:
        cap = max(1, int(0.1 * L))
        if bias == "short":
            op, n = "delete", int(rng.integers(1, cap + 1))
        elif bias == "long":
            op, n = "insert", int(rng.integers(1, cap + 1))
        else:
            op = ("delete", "insert", "none")[int(rng.integers(3))]
            n = int(rng.integers(1, max(1, cap // 2) + 1))
        if op == "delete" and L - n >= 1:
            # fillers go first, then arbitrary positions
            fillers = np.flatnonzero(units == FILLER)
            others = np.setdiff1d(np.arange(len(units)), fillers)
            chosen = list(rng.permutation(fillers)[:n])
            if len(chosen) < n:
                chosen += list(rng.choice(others, size=n - len(chosen), replace=False))
            keep = np.setdiff1d(np.arange(len(units)), chosen)
            units, durs = units[keep], durs[keep]
        elif op == "insert":
            for _ in range(n):
                pos = int(rng.integers(0, len(units) + 1))
                units = np.insert(units, pos, FILLER)
                durs = np.insert(durs, pos, int(rng.integers(1, 3)))

    if jitter:
        durs = np.maximum(1, durs + rng.integers(-1, 2, size=len(durs)))
    return UnitSequence(TGT, units, durs)


def generate_paraphrases(sample: Sample, pair: LanguagePair, seed: int,
                         substitute: bool = True, edit: bool = True,
                         jitter: bool = True) -> list[UnitSequence]:
    """Three rule-based rewrites of the canonical target, biased short / neutral / long."""
    out = []
    for bias in ("short", "neutral", "long"):
        rng = _sample_rng(pair, seed, f"paraphrase/{bias}")
        out.append(_paraphrase(sample.target, pair, rng, bias, substitute, edit, jitter))
    return out


def hard_expand(units, durations, table: np.ndarray) -> np.ndarray:
    durations = np.asarray(durations, dtype=np.int64)
    if np.any(durations < 1):
        raise ValueError("durations must be >= 1")
    return np.repeat(table[np.asarray(units, dtype=np.int64)], durations, axis=0)


def moving_average3(frames: np.ndarray) -> np.ndarray:
    """Centered width-3 moving average with edge replication."""
    padded = np.concatenate([frames[:1], frames, frames[-1:]], axis=0)
    mid = padded[1:-1]
    # residual form keeps constant runs bit-exact
    return mid + ((padded[:-2] - mid) + (padded[2:] - mid)) / 3.0


def render_lip_track(seq: UnitSequence, pair: LanguagePair, seed: int = 0, noise: float = 0.05,
                     smooth: bool = True) -> LipTrack:
    frames = hard_expand(seq.units, seq.durations, pair.visemes(seq.lang))
    if smooth:
        frames = moving_average3(frames)
    if noise > 0:
        frames = frames + noise * _sample_rng(pair, seed, f"lip/{seq.lang}").standard_normal(frames.shape)
    return LipTrack(frames)


@dataclass
class Corpus:
    train: list[Sample]
    test: list[Sample]


def generate_corpus(pair: LanguagePair, n_train: int = 2000, n_test: int = 200,
                    length_range: tuple[int, int] = (20, 80), base_seed: int = 0) -> Corpus:
    """Disjoint train/test splits; sample seeds are consecutive from ``base_seed``."""
    seeds = range(base_seed, base_seed + n_train + n_test)
    samples = [generate_sample(pair, s, length_range=length_range) for s in seeds]
    return Corpus(samples[:n_train], samples[n_train:])


# ---------------------------------------------------------------- persistence

def dumps_corpus(samples: list[Sample]) -> str:
    return "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in samples)


def save_corpus(samples: list[Sample], path: str | Path) -> None:
    Path(path).write_text(dumps_corpus(samples), encoding="utf-8")


def load_corpus(path: str | Path) -> list[Sample]:
    out = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: malformed JSON on line {lineno}: {e.msg}") from None
        if doc.get("schema") != SCHEMA:
            raise ValueError(f"{path}: line {lineno} has schema {doc.get('schema')!r}, expected {SCHEMA!r}")
        try:
            out.append(Sample.from_dict(doc))
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}: invalid sample on line {lineno}: {e}") from None
    return out


def save_pair(pair: LanguagePair, path: str | Path) -> None:
    Path(path).write_text(pair.to_json(), encoding="utf-8")


def load_pair(path: str | Path) -> LanguagePair:
    return LanguagePair.from_json(Path(path).read_text(encoding="utf-8"))
