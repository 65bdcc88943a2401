"""Strict JSON experiment configuration."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    vocab_size: int = 40
    n_train: int = 2000
    n_test: int = 200
    min_len: int = 20
    max_len: int = 80
    pair_seed: int = 0
    base_seed: int = 0


@dataclass
class SyncExpertSection:
    steps: int = 3000
    batch: int = 32
    lr: float = 1e-3


@dataclass
class TranslatorSection:
    steps: int = 1000
    batch: int = 16
    lr: float = 1e-3
    finetune_steps: int = 500
    finetune_lr: float = 3e-4
    groups_per_batch: int = 4
    crop_prob: float = 0.25


@dataclass
class DurationSection:
    pretrain_steps: int = 2000
    pretrain_batch: int = 32
    pretrain_lr: float = 1e-3
    lam: float = 10.0
    lr: float = 2e-4
    accumulation: int = 32
    steps: int = 1000
    sigma: float = 1.0
    target_source: str = "ground_truth"
    reference: str = "source_projected"


@dataclass
class EvalSection:
    window: int = 5
    max_offset: int = 15
    duration_mode: str = "free"
    n_test: int | None = None
    plots: int = 3


@dataclass
class ExperimentConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    sync_expert: SyncExpertSection = field(default_factory=SyncExpertSection)
    translator: TranslatorSection = field(default_factory=TranslatorSection)
    duration: DurationSection = field(default_factory=DurationSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["duration"]["lambda"] = d["duration"].pop("lam")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


_SECTIONS = {
    "corpus": CorpusSection, "sync_expert": SyncExpertSection, "translator": TranslatorSection,
    "duration": DurationSection, "eval": EvalSection,
}


def _build_section(cls, name: str, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    raw = dict(raw)
    if cls is DurationSection and "lambda" in raw:
        raw["lam"] = raw.pop("lambda")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    out = cls()
    for key, value in raw.items():
        default = getattr(out, key)
        if isinstance(default, bool) or (default is not None and not isinstance(value, type(default))
                                         and not (isinstance(default, float) and isinstance(value, int))):
            if not (default is None and (value is None or isinstance(value, int))):
                raise ConfigError(f"{name}.{key}: expected {type(default).__name__}, got {value!r}")
        setattr(out, key, float(value) if isinstance(default, float) else value)
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = set(_SECTIONS) | {"seeds", "output_dir"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = ExperimentConfig()
    for name, cls in _SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _build_section(cls, name, raw[name]))
    if "seeds" in raw:
        seeds = raw["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        cfg.seeds = list(seeds)
    if "output_dir" in raw:
        if not isinstance(raw["output_dir"], str):
            raise ConfigError("output_dir must be a string")
        cfg.output_dir = raw["output_dir"]
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    c = cfg.corpus
    if c.vocab_size < 8 or c.vocab_size % 2:
        raise ConfigError("corpus.vocab_size must be an even integer >= 8")
    if not 1 <= c.min_len <= c.max_len:
        raise ConfigError("corpus length range must satisfy 1 <= min_len <= max_len")
    if c.n_train < 1 or c.n_test < 1:
        raise ConfigError("corpus splits must be non-empty")
    if not 0.0 <= cfg.translator.crop_prob <= 1.0:
        raise ConfigError("translator.crop_prob must lie in [0, 1]")
    d = cfg.duration
    if d.lam < 0:
        raise ConfigError("duration.lambda must be >= 0")
    if d.accumulation < 1:
        raise ConfigError("duration.accumulation must be >= 1")
    if d.target_source not in ("ground_truth", "translator"):
        raise ConfigError("duration.target_source must be 'ground_truth' or 'translator'")
    if d.reference not in ("source_projected", "target"):
        raise ConfigError("duration.reference must be 'source_projected' or 'target'")
    if cfg.eval.duration_mode not in ("free", "length_locked"):
        raise ConfigError("eval.duration_mode must be 'free' or 'length_locked'")


def load_config(path: str | Path | None, env: dict | None = None) -> ExperimentConfig:
    """Read a config file (or defaults when ``path`` is None); ``AVS2S_SEED`` overrides the seeds."""
    if path is None:
        cfg = ExperimentConfig()
    else:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        cfg = config_from_dict(raw)
    env = os.environ if env is None else env
    if env.get("AVS2S_SEED"):
        try:
            cfg.seeds = [int(env["AVS2S_SEED"])]
        except ValueError:
            raise ConfigError(f"AVS2S_SEED must be an integer, got {env['AVS2S_SEED']!r}") from None
    return cfg
