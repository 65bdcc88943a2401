"""Duration predictor, its losses, and synchrony-aware fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import LanguagePair, Sample, UnitSequence, render_lip_track
from .nn_core import (OptimizerState, ParameterSet, TrainLog, as_tensors, init_parameters,
                      optimizer_step, value_and_grad)
from .sync_expert import SyncExpertModel, encode, sync_loss_torch, window_stack, window_starts
from .vocoder import soft_expand, unit_feature_table

log = logging.getLogger(__name__)

EMBED = 32
HIDDEN = 64
LOSS_MODES = ("sync+dur", "sync_only", "dur_only")
INIT_MODES = ("pretrained", "scratch")


@dataclass
class DurationPredictor:
    params: ParameterSet
    vocab_size: int
    meta: dict = field(default_factory=dict)
    log: TrainLog = field(default_factory=TrainLog)

    def checkpoint_meta(self) -> dict:
        return {"kind": "duration", **self.meta}


def duration_layout(vocab_size: int) -> list[tuple[str, tuple[int, ...]]]:
    return [("unit_embedding", (vocab_size, EMBED)),
            ("w1", (HIDDEN, EMBED + 2)), ("b1", (HIDDEN,)),
            ("w2", (1, HIDDEN)), ("b2", (1,))]


def init_duration_predictor(vocab_size: int, seed: int) -> DurationPredictor:
    return DurationPredictor(init_parameters(duration_layout(vocab_size), seed), vocab_size,
                             meta={"init": "scratch"})


def predictor_inputs(units: np.ndarray, source_frames: int) -> tuple[torch.Tensor, torch.Tensor]:
    L = len(units)
    cond = np.stack([np.full(L, source_frames / 100.0), np.arange(L) / L], axis=1)
    return torch.as_tensor(np.asarray(units, dtype=np.int64)), torch.as_tensor(cond)


def predict_log_durations_torch(p: dict[str, torch.Tensor], units: torch.Tensor,
                                cond: torch.Tensor) -> torch.Tensor:
    x = torch.cat([p["unit_embedding"][units], cond], dim=1)
    h = torch.relu(x @ p["w1"].T + p["b1"])
    return (h @ p["w2"].T + p["b2"])[:, 0]


def predict_log_durations(model: DurationPredictor, units, source_frames: int) -> np.ndarray:
    with torch.no_grad():
        out = predict_log_durations_torch(as_tensors(model.params), *predictor_inputs(units, source_frames))
    return out.numpy()


# ---------------------------------------------------------------- integer allocation

def largest_remainder(values, total: int) -> np.ndarray:
    """Round nonnegative reals to integers summing to ``total`` (ties: lower index first).

    Entries that round to zero are lifted to one frame, taken from the largest
    entries, so the sum stays exact.
    """
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if total < n:
        raise ValueError(f"cannot fit one frame per unit: total {total} < {n} units")
    scaled = values * (total / values.sum())
    floors = np.floor(scaled).astype(np.int64)
    frac = np.round(scaled - floors, 12)
    return _distribute(floors, frac, total)


def _distribute(floors: np.ndarray, frac: np.ndarray, total: int) -> np.ndarray:
    out = floors.copy()
    extra = int(total - out.sum())
    order = np.lexsort((np.arange(len(frac)), -frac))
    out[order[:extra]] += 1
    for i in np.flatnonzero(out == 0):
        j = int(np.argmax(out))
        out[j] -= 1
        out[i] = 1
    return out


def reference_durations(target: UnitSequence | np.ndarray, source_frames: int) -> np.ndarray:
    """Target durations rescaled to exactly ``source_frames`` frames (exact integer arithmetic)."""
    d = np.asarray(target.durations if isinstance(target, UnitSequence) else target, dtype=np.int64)
    if source_frames < len(d):
        raise ValueError(f"cannot fit one frame per unit: {source_frames} frames < {len(d)} units")
    S = int(d.sum())
    num = d * int(source_frames)
    floors = num // S
    return _distribute(floors, (num % S) / S, int(source_frames))


def expand_durations(model: DurationPredictor, target_units, source_frames: int,
                     mode: str = "length_locked") -> np.ndarray:
    log_d = predict_log_durations(model, target_units, source_frames)
    return durations_from_log(log_d, source_frames, mode)


def durations_from_log(log_d: np.ndarray, source_frames: int, mode: str = "length_locked") -> np.ndarray:
    d = np.exp(np.asarray(log_d, dtype=np.float64))
    if mode == "free":
        return np.maximum(1, np.floor(d + 0.5)).astype(np.int64)
    if mode == "length_locked":
        return largest_remainder(d, source_frames)
    raise ValueError(f"unknown expansion mode {mode!r}")


# ---------------------------------------------------------------- losses

def duration_loss(pred_log_d, ref_d):
    """Mean squared log-duration error; torch in -> torch out, else float."""
    if len(pred_log_d) != len(ref_d):
        raise ValueError(f"length mismatch: {len(pred_log_d)} predictions vs {len(ref_d)} references")
    if isinstance(pred_log_d, torch.Tensor):
        return ((pred_log_d - torch.log(torch.as_tensor(ref_d, dtype=torch.float64))) ** 2).mean()
    diff = np.asarray(pred_log_d, dtype=np.float64) - np.log(np.asarray(ref_d, dtype=np.float64))
    return float(np.mean(diff ** 2))


def total_loss(l_sync, l_dur, lam: float):
    return l_sync + lam * l_dur


# ---------------------------------------------------------------- training

@dataclass
class PretrainConfig:
    steps: int = 2000
    batch: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    reference: str = "source_projected"


@dataclass
class FinetuneConfig:
    lam: float = 10.0
    lr: float = 2e-4
    accumulation: int = 32
    steps: int = 5000
    init: str = "pretrained"
    losses: str = "sync+dur"
    seed: int = 0
    sigma: float = 1.0
    weight_decay: float = 0.01
    target_source: str = "ground_truth"   # or "translator"
    reference: str = "source_projected"   # or "target"
    num_windows: int | None = None
    log_every: int = 10

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.accumulation < 1:
            raise ValueError("accumulation must be >= 1")
        if self.losses not in LOSS_MODES:
            raise ValueError(f"losses must be one of {LOSS_MODES}, got {self.losses!r}")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.target_source not in ("ground_truth", "translator"):
            raise ValueError(f"unknown target_source {self.target_source!r}")
        if self.reference not in ("source_projected", "target"):
            raise ValueError(f"unknown reference {self.reference!r}")


def sample_reference(target: UnitSequence, source_frames: int, reference: str) -> np.ndarray:
    if reference == "target":
        return target.durations.copy()
    return reference_durations(target, source_frames)


def _pretrain_batch_loss(p, items) -> torch.Tensor:
    units = torch.cat([it[0] for it in items])
    cond = torch.cat([it[1] for it in items])
    log_ref = torch.cat([it[2] for it in items])
    weight = torch.cat([torch.full((len(it[0]),), 1.0 / (len(it[0]) * len(items))) for it in items])
    pred = predict_log_durations_torch(p, units, cond)
    return (weight * (pred - log_ref) ** 2).sum()


def _dur_items(samples: list[Sample], reference: str):
    items = []
    for s in samples:
        T_s = s.source.total_frames
        u, c = predictor_inputs(s.target.units, T_s)
        ref = sample_reference(s.target, T_s, reference)
        items.append((u, c, torch.log(torch.as_tensor(ref, dtype=torch.float64))))
    return items


def mean_duration_loss(model: DurationPredictor, samples: list[Sample],
                       reference: str = "source_projected") -> float:
    with torch.no_grad():
        return float(_pretrain_batch_loss(as_tensors(model.params), _dur_items(samples, reference)))


def pretrain_duration(samples: list[Sample], pair: LanguagePair, config: PretrainConfig | None = None,
                      seed: int = 0) -> DurationPredictor:
    """Duration-loss-only training from random init (the baseline and the FT init)."""
    config = config or PretrainConfig()
    model = init_duration_predictor(pair.vocab_size, seed)
    items = _dur_items(samples, config.reference)
    rng = np.random.default_rng(seed)
    params = model.params
    state = OptimizerState.create(params, lr=config.lr, weight_decay=config.weight_decay)
    for step in range(config.steps + 1):
        batch = [items[i] for i in rng.integers(len(items), size=config.batch)]
        loss, grads = value_and_grad(lambda p: _pretrain_batch_loss(p, batch), params)
        if step % 50 == 0 or step == config.steps:
            model.log.add(step, loss)
        if step == config.steps:
            break
        params, state = optimizer_step(params, grads, state)
    model.params = params
    model.meta = {"init": "scratch", "losses": "dur_only", "lambda": 0.0, "seed": int(seed),
                  "reference": config.reference}
    return model


@dataclass
class FinetuneItem:
    """Everything the fine-tuning loss needs for one training sample."""
    units: torch.Tensor
    cond: torch.Tensor
    log_ref: torch.Tensor
    acoustic: torch.Tensor   # L x 16 acoustic embedding rows of the target units
    lip: np.ndarray          # source lip track, T_s x 16
    video_emb: torch.Tensor | None = None

    @property
    def source_frames(self) -> int:
        return len(self.lip)


def build_finetune_items(samples: list[Sample], pair: LanguagePair, config: FinetuneConfig,
                         expert: SyncExpertModel | None = None, translator=None) -> list[FinetuneItem]:
    table = unit_feature_table(pair, "tgt")
    units_for = None
    if config.target_source == "translator":
        if translator is None:
            raise ValueError("target_source='translator' needs a translator")
        from .translator import translate_batch
        units_for = translate_batch(translator, [s.source for s in samples])
    expert_p = as_tensors(expert.params) if expert is not None else None
    items = []
    for k, s in enumerate(samples):
        T_s = s.source.total_frames
        target = s.target
        if units_for is not None:
            target = target_with_reference(units_for[k].units, s.target, T_s)
        u, c = predictor_inputs(target.units, T_s)
        ref = sample_reference(target, T_s, config.reference)
        lip = render_lip_track(s.source, pair, seed=s.sample_seed).frames
        video_emb = None
        if expert_p is not None:
            with torch.no_grad():
                video_emb = encode(expert_p, "video",
                                   torch.as_tensor(window_stack(lip, window_starts(T_s, config.num_windows))))
        items.append(FinetuneItem(u, c, torch.log(torch.as_tensor(ref, dtype=torch.float64)),
                                  torch.as_tensor(table[target.units]), lip, video_emb))
    return items


def target_with_reference(units: np.ndarray, canonical: UnitSequence, source_frames: int) -> UnitSequence:
    """Attach reference durations to translator output units.

    Matching length: canonical durations carry over. Otherwise the source
    length is spread evenly over the decoded units.
    """
    units = np.asarray(units, dtype=np.int64)
    if len(units) == len(canonical.units):
        return UnitSequence(canonical.lang, units, canonical.durations)
    n = max(1, min(len(units), source_frames))
    units = units[:n] if len(units) else canonical.units[:1]
    return UnitSequence(canonical.lang, units, largest_remainder(np.ones(len(units)), source_frames))


def sample_losses(p: dict[str, torch.Tensor], expert_p: dict[str, torch.Tensor] | None,
                  item: FinetuneItem, config: FinetuneConfig) -> tuple[torch.Tensor, torch.Tensor | None]:
    """(L_dur, L_sync) for one sample; L_sync is None when the sync loss is switched off."""
    log_d = predict_log_durations_torch(p, item.units, item.cond)
    l_dur = duration_loss(log_d, torch.exp(item.log_ref))
    if config.losses == "dur_only":
        return l_dur, None
    audio = soft_expand(item.acoustic, log_d, item.source_frames, config.sigma)
    l_sync = sync_loss_torch(expert_p, item.lip, audio, config.num_windows, video_emb=item.video_emb)
    return l_dur, l_sync


def sample_total_loss(p, expert_p, item: FinetuneItem, config: FinetuneConfig) -> torch.Tensor:
    l_dur, l_sync = sample_losses(p, expert_p, item, config)
    if config.losses == "dur_only":
        return l_dur
    if config.losses == "sync_only":
        return l_sync
    return total_loss(l_sync, l_dur, config.lam)


def accumulated_gradient(params: ParameterSet, expert: SyncExpertModel | None, items: list[FinetuneItem],
                         config: FinetuneConfig) -> tuple[float, float, float, ParameterSet]:
    """Process samples one at a time, accumulating gradients of the mean loss.

    Returns (mean total loss, mean L_dur, mean L_sync, summed gradients).
    """
    tensors = as_tensors(params, requires_grad=True)
    expert_p = as_tensors(expert.params) if expert is not None else None
    n = len(items)
    tot = dur = syn = 0.0
    for item in items:
        l_dur, l_sync = sample_losses(tensors, expert_p, item, config)
        if config.losses == "dur_only":
            loss = l_dur
        elif config.losses == "sync_only":
            loss = l_sync
        else:
            loss = total_loss(l_sync, l_dur, config.lam)
        (loss / n).backward()
        tot += loss.item() / n
        dur += l_dur.item() / n
        syn += (l_sync.item() if l_sync is not None else float("nan")) / n
    grads = ParameterSet((k, t.grad.numpy().copy() if t.grad is not None else np.zeros(t.shape))
                         for k, t in tensors.items())
    return tot, dur, syn, grads


def finetune_duration(init_model: DurationPredictor | None, expert: SyncExpertModel | None,
                      samples: list[Sample], pair: LanguagePair, config: FinetuneConfig,
                      translator=None, items: list[FinetuneItem] | None = None) -> DurationPredictor:
    """Fine-tune with L_sync + lambda * L_dur, one optimizer step per ``accumulation`` samples.

    The sync expert (and translator, if used) are only read, never updated.
    """
    config.validate()
    if config.losses != "dur_only" and expert is None:
        raise ValueError("sync loss requested but no sync expert given")
    if config.init == "pretrained":
        if init_model is None:
            raise ValueError("init='pretrained' needs an initial model")
        if init_model.vocab_size != pair.vocab_size:
            raise ValueError("duration model and language pair disagree on vocabulary size")
        params = init_model.params.copy()
    else:
        params = init_duration_predictor(pair.vocab_size, config.seed).params
    if items is None:
        items = build_finetune_items(samples, pair, config, expert, translator)
    rng = np.random.default_rng(config.seed)
    state = OptimizerState.create(params, lr=config.lr, weight_decay=config.weight_decay)
    model = DurationPredictor(params, pair.vocab_size)
    for step in range(config.steps):
        batch = [items[i] for i in rng.integers(len(items), size=config.accumulation)]
        tot, dur, syn, grads = accumulated_gradient(params, expert, batch, config)
        if step % config.log_every == 0 or step == config.steps - 1:
            model.log.add(step, tot, dur=dur, sync=syn)
        params, state = optimizer_step(params, grads, state)
    model.params = params
    model.meta = {"init": config.init, "losses": config.losses, "lambda": float(config.lam),
                  "seed": int(config.seed), "steps": int(config.steps), "reference": config.reference,
                  "target_source": config.target_source}
    return model


def length_drift(durations: list[np.ndarray], source_frames: list[int]) -> float:
    """Mean relative total-length error ``|sum(d) - T_s| / T_s``."""
    return float(np.mean([abs(int(d.sum()) - T) / T for d, T in zip(durations, source_frames)]))
