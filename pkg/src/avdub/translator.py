"""Unit-to-unit encoder-decoder with language tokens, plus paraphrase fine-tuning.

Vocabulary (size ``2U + 4``): source units ``[0, U)``, target units
``[U, 2U)``, then EOS, PAD and the two language tokens. The decoder starts
from the target-language token, so no separate BOS is needed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import SRC, TGT, Sample, UnitSequence
from .nn_core import (OptimizerState, ParameterSet, TrainLog, as_tensors, init_parameters,
                      optimizer_step, value_and_grad)

log = logging.getLogger(__name__)

D_MODEL = 32
N_HEADS = 2
D_FF = 64
N_LAYERS = 2


@dataclass
class Vocab:
    units: int

    @property
    def size(self) -> int:
        return 2 * self.units + 4

    @property
    def eos(self) -> int:
        return 2 * self.units

    @property
    def pad(self) -> int:
        return 2 * self.units + 1

    def lang_token(self, lang: str) -> int:
        return 2 * self.units + (2 if lang == SRC else 3)

    def offset(self, lang: str) -> int:
        return 0 if lang == SRC else self.units

    def encode(self, seq_units, lang: str) -> list[int]:
        return [int(u) + self.offset(lang) for u in seq_units]


@dataclass
class Seq2SeqModel:
    params: ParameterSet
    vocab: Vocab
    log: TrainLog = field(default_factory=TrainLog)

    @property
    def meta(self) -> dict:
        return {"kind": "translator", "vocab": self.vocab.size}


@dataclass
class Translation:
    sequence: UnitSequence
    truncated: bool = False


def translator_layout(vocab_size: int) -> list[tuple[str, tuple[int, ...]]]:
    D = D_MODEL
    layout = [("embed", (vocab_size, D))]

    def attn(prefix):
        return [(f"{prefix}.{n}", (D, D)) for n in ("wq", "wk", "wv", "wo")] + [(f"{prefix}.bo", (D,))]

    def norm(prefix):
        return [(f"{prefix}.g", (D,)), (f"{prefix}.b", (D,))]

    def ffn(prefix):
        return [(f"{prefix}.w1", (D_FF, D)), (f"{prefix}.b1", (D_FF,)),
                (f"{prefix}.w2", (D, D_FF)), (f"{prefix}.b2", (D,))]

    for i in range(N_LAYERS):
        layout += norm(f"enc{i}.ln1") + attn(f"enc{i}.self") + norm(f"enc{i}.ln2") + ffn(f"enc{i}.ffn")
    layout += norm("enc.ln")
    for i in range(N_LAYERS):
        layout += (norm(f"dec{i}.ln1") + attn(f"dec{i}.self") + norm(f"dec{i}.ln2") + attn(f"dec{i}.cross")
                   + norm(f"dec{i}.ln3") + ffn(f"dec{i}.ffn"))
    layout += norm("dec.ln") + [("out.w", (vocab_size, D)), ("out.b", (vocab_size,))]
    return layout


def init_translator(units: int, seed: int) -> Seq2SeqModel:
    vocab = Vocab(units)
    params = init_parameters(translator_layout(vocab.size), seed)
    # layer norms start as identity
    entries = []
    for name, value in params.items():
        if name.endswith(".g"):
            value = np.ones_like(value)
        elif ".ln" in name and name.endswith(".b"):
            value = np.zeros_like(value)
        entries.append((name, value))
    return Seq2SeqModel(ParameterSet(entries), vocab)


# ---------------------------------------------------------------- forward

def _positions(n: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, D_MODEL, 2, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, i / D_MODEL)
    pe = torch.zeros(n, D_MODEL)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)
    return pe


def _layer_norm(p, prefix, x):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + 1e-5) * p[f"{prefix}.g"] + p[f"{prefix}.b"]


def _attention(p, prefix, q_in, kv_in, mask):
    B, Tq, _ = q_in.shape
    Tk = kv_in.shape[1]
    hd = D_MODEL // N_HEADS

    def split(x, T):
        return x.reshape(B, T, N_HEADS, hd).transpose(1, 2)

    q = split(q_in @ p[f"{prefix}.wq"].T, Tq)
    k = split(kv_in @ p[f"{prefix}.wk"].T, Tk)
    v = split(kv_in @ p[f"{prefix}.wv"].T, Tk)
    scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
    scores = scores.masked_fill(~mask[:, None], -1e9)
    out = torch.softmax(scores, -1) @ v
    out = out.transpose(1, 2).reshape(B, Tq, D_MODEL)
    return out @ p[f"{prefix}.wo"].T + p[f"{prefix}.bo"]


def _ffn(p, prefix, x):
    return torch.relu(x @ p[f"{prefix}.w1"].T + p[f"{prefix}.b1"]) @ p[f"{prefix}.w2"].T + p[f"{prefix}.b2"]


def encode_source(p, vocab: Vocab, src: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``src`` is B x S token ids (PAD-padded). Returns memory and key mask."""
    keep = src != vocab.pad
    x = p["embed"][src] * math.sqrt(D_MODEL) + _positions(src.shape[1])
    mask = keep[:, None, :].expand(-1, src.shape[1], -1)
    for i in range(N_LAYERS):
        h = _layer_norm(p, f"enc{i}.ln1", x)
        x = x + _attention(p, f"enc{i}.self", h, h, mask)
        x = x + _ffn(p, f"enc{i}.ffn", _layer_norm(p, f"enc{i}.ln2", x))
    return _layer_norm(p, "enc.ln", x), keep


def decode_logits(p, vocab: Vocab, memory: torch.Tensor, src_keep: torch.Tensor,
                  tgt_in: torch.Tensor) -> torch.Tensor:
    B, T = tgt_in.shape
    x = p["embed"][tgt_in] * math.sqrt(D_MODEL) + _positions(T)
    causal = torch.tril(torch.ones(T, T, dtype=torch.bool))[None].expand(B, -1, -1)
    cross = src_keep[:, None, :].expand(-1, T, -1)
    for i in range(N_LAYERS):
        h = _layer_norm(p, f"dec{i}.ln1", x)
        x = x + _attention(p, f"dec{i}.self", h, h, causal)
        x = x + _attention(p, f"dec{i}.cross", _layer_norm(p, f"dec{i}.ln2", x), memory, cross)
        x = x + _ffn(p, f"dec{i}.ffn", _layer_norm(p, f"dec{i}.ln3", x))
    x = _layer_norm(p, "dec.ln", x)
    return x @ p["out.w"].T + p["out.b"]


def _pad(rows: list[list[int]], pad: int) -> torch.Tensor:
    n = max(len(r) for r in rows)
    return torch.tensor([r + [pad] * (n - len(r)) for r in rows], dtype=torch.int64)


def make_batch(vocab: Vocab, pairs: list[tuple[UnitSequence, UnitSequence]]):
    """Teacher-forcing tensors for (source, target) sequence pairs."""
    src = [[vocab.lang_token(s.lang)] + vocab.encode(s.units, s.lang) for s, _ in pairs]
    tgt = [vocab.encode(t.units, t.lang) for _, t in pairs]
    tgt_in = [[vocab.lang_token(t.lang)] + y for (_, t), y in zip(pairs, tgt)]
    tgt_out = [y + [vocab.eos] for y in tgt]
    return _pad(src, vocab.pad), _pad(tgt_in, vocab.pad), _pad(tgt_out, vocab.pad)


def sequence_cross_entropy(p, vocab: Vocab, batch) -> torch.Tensor:
    """Token cross-entropy, averaged per sequence, then over sequences."""
    src, tgt_in, tgt_out = batch
    memory, keep = encode_source(p, vocab, src)
    logits = decode_logits(p, vocab, memory, keep, tgt_in)
    logp = torch.log_softmax(logits, -1)
    valid = (tgt_out != vocab.pad).to(torch.float64)
    nll = -logp.gather(-1, tgt_out.clamp(max=vocab.size - 1)[..., None])[..., 0] * valid
    return (nll.sum(1) / valid.sum(1)).mean()


# ---------------------------------------------------------------- training

@dataclass
class TranslatorConfig:
    steps: int = 4000
    batch: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    log_every: int = 50
    finetune_steps: int = 500
    finetune_lr: float = 3e-4
    groups_per_batch: int = 4
    crop_prob: float = 0.25


def aligned_crop(src: UnitSequence, tgt: UnitSequence, rng: np.random.Generator
                 ) -> tuple[UnitSequence, UnitSequence]:
    """Cut the same random span from a position-aligned pair.

    Training lengths start well above one unit, so without short spans the
    model never learns to stop early on tiny inputs.
    """
    n = len(src.units)
    k = int(rng.integers(1, n + 1))
    a = int(rng.integers(0, n - k + 1))
    cut = lambda s: UnitSequence(s.lang, s.units[a:a + k], s.durations[a:a + k])
    return cut(src), cut(tgt)


def _train_loop(model: Seq2SeqModel, draw, steps: int, lr: float, weight_decay: float,
                log_every: int) -> Seq2SeqModel:
    params = model.params
    state = OptimizerState.create(params, lr=lr, weight_decay=weight_decay)
    out_log = TrainLog()
    for step in range(steps + 1):
        batch = draw(step)
        loss, grads = value_and_grad(lambda p: sequence_cross_entropy(p, model.vocab, batch), params)
        if step % log_every == 0 or step == steps:
            out_log.add(step, loss)
        if step == steps:
            break
        params, state = optimizer_step(params, grads, state)
    return Seq2SeqModel(params, model.vocab, out_log)


def train_translator(samples: list[Sample], units: int, config: TranslatorConfig | None = None,
                     seed: int = 0) -> Seq2SeqModel:
    """Teacher-forced training on (source, canonical target) pairs."""
    if not samples:
        raise ValueError("cannot train a translator on an empty corpus")
    config = config or TranslatorConfig()
    model = init_translator(units, seed)
    rng = np.random.default_rng(seed)

    def draw(step):
        idx = rng.integers(len(samples), size=config.batch)
        crop = rng.random(config.batch) < config.crop_prob
        pairs = []
        for i, c in zip(idx, crop):
            pair = (samples[i].source, samples[i].target)
            pairs.append(aligned_crop(*pair, rng) if c else pair)
        return make_batch(model.vocab, pairs)

    trained = _train_loop(model, draw, config.steps, config.lr, config.weight_decay, config.log_every)
    log.info("translator trained: loss %.4f -> %.4f", trained.log.losses[0], trained.log.losses[-1])
    return trained


def paraphrase_batches(samples: list[Sample], groups_per_batch: int, rng: np.random.Generator):
    """Yield lists of (sample id, source, target) where each source contributes all 4 targets."""
    while True:
        idx = rng.integers(len(samples), size=groups_per_batch)
        yield [(samples[i].id, samples[i].source, t) for i in idx for t in samples[i].targets]


def finetune_paraphrase(model: Seq2SeqModel, samples: list[Sample], config: TranslatorConfig | None = None,
                        seed: int = 0) -> Seq2SeqModel:
    """Continue training with every batch holding the canonical target and 3 paraphrases per source."""
    config = config or TranslatorConfig()
    for s in samples:
        if len(s.paraphrases) != 3:
            raise ValueError(f"sample {s.id} has {len(s.paraphrases)} paraphrases, expected 3")
    batches = paraphrase_batches(samples, config.groups_per_batch, np.random.default_rng(seed))

    def draw(step):
        group = next(batches)
        return make_batch(model.vocab, [(src, tgt) for _, src, tgt in group])

    return _train_loop(model, draw, config.finetune_steps, config.finetune_lr, config.weight_decay,
                       config.log_every)


def finetune_on_targets(model: Seq2SeqModel, pairs: list[tuple[UnitSequence, UnitSequence]],
                        config: TranslatorConfig | None = None, seed: int = 0) -> Seq2SeqModel:
    """Plain continued training on one chosen target per source (the length-match arm)."""
    config = config or TranslatorConfig()
    rng = np.random.default_rng(seed)
    n_per = config.groups_per_batch * 4

    def draw(step):
        idx = rng.integers(len(pairs), size=n_per)
        return make_batch(model.vocab, [pairs[i] for i in idx])

    return _train_loop(model, draw, config.finetune_steps, config.finetune_lr, config.weight_decay,
                       config.log_every)


# ---------------------------------------------------------------- decoding

def translate_batch(model: Seq2SeqModel, sources: list[UnitSequence], tgt_lang: str = TGT,
                    chunk: int = 256) -> list[Translation]:
    """Greedy decoding restricted to ``tgt_lang`` units and EOS."""
    out: list[Translation] = []
    for start in range(0, len(sources), chunk):
        out += _greedy(model, sources[start:start + chunk], tgt_lang)
    return out


def translate(model: Seq2SeqModel, src: UnitSequence, tgt_lang: str = TGT) -> Translation:
    return translate_batch(model, [src], tgt_lang)[0]


def _greedy(model: Seq2SeqModel, sources: list[UnitSequence], tgt_lang: str) -> list[Translation]:
    vocab = model.vocab
    p = as_tensors(model.params)
    src = _pad([[vocab.lang_token(s.lang)] + vocab.encode(s.units, s.lang) for s in sources], vocab.pad)
    max_len = [2 * len(s) + 5 for s in sources]
    allowed = torch.full((vocab.size,), -math.inf)
    lo = vocab.offset(tgt_lang)
    allowed[lo:lo + vocab.units] = 0.0
    allowed[vocab.eos] = 0.0
    B = len(sources)
    seqs = [[vocab.lang_token(tgt_lang)] for _ in range(B)]
    done = [False] * B
    truncated = [False] * B
    with torch.no_grad():
        memory, keep = encode_source(p, vocab, src)
        for _ in range(max(max_len) + 1):
            active = [b for b in range(B) if not done[b]]
            if not active:
                break
            tgt_in = torch.tensor([seqs[b] for b in range(B)], dtype=torch.int64)
            logits = decode_logits(p, vocab, memory, keep, tgt_in)[:, -1] + allowed
            nxt = torch.argmax(logits, -1).tolist()
            for b in range(B):
                if done[b]:
                    seqs[b].append(vocab.pad)
                    continue
                if nxt[b] == vocab.eos:
                    done[b] = True
                    seqs[b].append(vocab.pad)
                elif len(seqs[b]) - 1 >= max_len[b]:
                    done[b] = truncated[b] = True
                    seqs[b].append(vocab.pad)
                else:
                    seqs[b].append(nxt[b])
    results = []
    for b in range(B):
        toks = [t for t in seqs[b][1:] if t != vocab.pad]
        units = np.array([t - lo for t in toks], dtype=np.int64)
        results.append(Translation(UnitSequence(tgt_lang, units, np.ones(len(units), dtype=np.int64)),
                                   truncated[b]))
    return results


def unit_accuracy(model: Seq2SeqModel, samples: list[Sample]) -> float:
    """Fraction of samples whose greedy translation equals the canonical target exactly."""
    outs = translate_batch(model, [s.source for s in samples])
    return float(np.mean([np.array_equal(o.sequence.units, s.target.units) for o, s in zip(outs, samples)]))


def matches_any_reference(model: Seq2SeqModel, samples: list[Sample]) -> float:
    outs = translate_batch(model, [s.source for s in samples])
    return float(np.mean([any(np.array_equal(o.sequence.units, t.units) for t in s.targets)
                          for o, s in zip(outs, samples)]))


def select_length_match(candidates: list[UnitSequence], src: UnitSequence) -> int:
    """Index of the candidate whose unit count is closest to the source (lowest index on ties)."""
    if not candidates:
        raise ValueError("select_length_match needs at least one candidate")
    gaps = [abs(len(c.units) - len(src.units)) for c in candidates]
    return int(np.argmin(gaps))
