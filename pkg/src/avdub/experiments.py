"""Config-driven experiment pipelines: training stages, system matrix, summaries."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import ExperimentConfig
from .corpus import Corpus, LanguagePair, build_language_pair, generate_corpus
from .duration import (DurationPredictor, FinetuneConfig, PretrainConfig, finetune_duration,
                       pretrain_duration)
from .metrics import EvalOptions, MetricReport, evaluate_system, markdown_table
from .nn_core import load_checkpoint, save_checkpoint
from .sync_expert import SyncExpertModel, aligned_tracks, separation, train_sync_expert
from .translator import (Seq2SeqModel, TranslatorConfig, Vocab, finetune_on_targets, finetune_paraphrase,
                         select_length_match, train_translator, translate_batch)

log = logging.getLogger(__name__)

SEED_STRIDE = 100_000

# system name -> (init, losses); the fine-tuned rows of the ablation matrix
ABLATION_SYSTEMS = {
    "LS+D FT": ("pretrained", "sync+dur"),
    "LS+D": ("scratch", "sync+dur"),
    "LS FT": ("pretrained", "sync_only"),
}
PARAPHRASE_ARMS = ("Ours", "Ours + Updated TM", "Length Match", "Original Translation")


# ---------------------------------------------------------------- world and stage configs

def build_world(cfg: ExperimentConfig, seed: int) -> tuple[LanguagePair, Corpus]:
    """The language pair is fixed by the config; each run seed draws its own corpus."""
    c = cfg.corpus
    pair = build_language_pair(c.vocab_size, c.pair_seed)
    corpus = generate_corpus(pair, c.n_train, c.n_test, (c.min_len, c.max_len),
                             base_seed=c.base_seed + SEED_STRIDE * seed)
    ids = {s.id for s in corpus.train}
    assert not ids & {s.id for s in corpus.test}, "train/test ids overlap"
    return pair, corpus


def translator_config(cfg: ExperimentConfig) -> TranslatorConfig:
    t = cfg.translator
    return TranslatorConfig(steps=t.steps, batch=t.batch, lr=t.lr, finetune_steps=t.finetune_steps,
                            finetune_lr=t.finetune_lr, groups_per_batch=t.groups_per_batch,
                            crop_prob=t.crop_prob)


def pretrain_config(cfg: ExperimentConfig) -> PretrainConfig:
    d = cfg.duration
    return PretrainConfig(steps=d.pretrain_steps, batch=d.pretrain_batch, lr=d.pretrain_lr,
                          reference=d.reference)


def finetune_config(cfg: ExperimentConfig, seed: int, init: str = "pretrained", losses: str = "sync+dur",
                    lam: float | None = None, steps: int | None = None) -> FinetuneConfig:
    d = cfg.duration
    return FinetuneConfig(lam=d.lam if lam is None else lam, lr=d.lr, accumulation=d.accumulation,
                          steps=d.steps if steps is None else steps, init=init, losses=losses, seed=seed,
                          sigma=d.sigma, target_source=d.target_source, reference=d.reference)


def eval_options(cfg: ExperimentConfig, **overrides) -> EvalOptions:
    e = cfg.eval
    opts = EvalOptions(duration_mode=e.duration_mode, window=e.window, max_offset=e.max_offset,
                       keep_curves=e.plots)
    for k, v in overrides.items():
        setattr(opts, k, v)
    return opts


# ---------------------------------------------------------------- checkpoints

def save_model(path: str | Path, model) -> None:
    if isinstance(model, DurationPredictor):
        meta = {**model.checkpoint_meta(), "vocab_size": model.vocab_size}
    else:
        meta = model.meta
    save_checkpoint(path, model.params, meta)


def load_model(path: str | Path, expect: str | None = None):
    """Rebuild a model from a checkpoint, dispatching on the manifest's ``kind``."""
    params, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if expect is not None and kind != expect:
        raise ValueError(f"{path}: expected a {expect} checkpoint, found {kind!r}")
    if kind == "sync_expert":
        return SyncExpertModel(params, meta["window"], meta["dim"])
    if kind == "translator":
        return Seq2SeqModel(params, Vocab((meta["vocab"] - 4) // 2))
    if kind == "duration":
        rest = {k: v for k, v in meta.items() if k not in ("kind", "vocab_size")}
        return DurationPredictor(params, int(meta["vocab_size"]), rest)
    raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")


def file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: str | Path, status: str = "ok", error: str | None = None) -> Path:
    """List every file under ``out_dir`` with its sha256 (MANIFEST.json itself excluded)."""
    out = Path(out_dir)
    files = {p.relative_to(out).as_posix(): file_sha256(p)
             for p in sorted(out.rglob("*")) if p.is_file() and p.name != "MANIFEST.json"}
    doc = {"status": status, "files": files}
    if error is not None:
        doc["error"] = error
    path = out / "MANIFEST.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- per-seed run

@dataclass
class SeedRun:
    """Lazily trains and caches every model one seed needs; optionally saves checkpoints."""
    cfg: ExperimentConfig
    seed: int
    out_dir: Path | None = None
    cache: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)
        self.pair, self.corpus = build_world(self.cfg, self.seed)
        n = self.cfg.eval.n_test
        self.test = self.corpus.test if n is None else self.corpus.test[:n]

    def _get(self, key: str, build):
        if key not in self.cache:
            t0 = time.perf_counter()
            self.cache[key] = build()
            self.timings[key] = time.perf_counter() - t0
            log.info("seed %d: %s ready in %.1fs", self.seed, key, self.timings[key])
            if self.out_dir is not None and hasattr(self.cache[key], "params"):
                d = self.out_dir / f"seed{self.seed}"
                d.mkdir(parents=True, exist_ok=True)
                name = key.replace(" ", "_").replace("+", "p")
                save_model(d / f"{name}.ckpt", self.cache[key])
                (d / f"{name}_loss.csv").write_text(self.cache[key].log.to_csv(), encoding="utf-8")
        return self.cache[key]

    # -- trained components
    def expert(self) -> SyncExpertModel:
        s = self.cfg.sync_expert
        return self._get("sync_expert", lambda: train_sync_expert(
            self.corpus.train, self.pair, steps=s.steps, batch=s.batch, lr=s.lr, seed=self.seed))

    def expert_separation(self, offset: int = 8) -> tuple[float, float]:
        return self._get(f"separation_{offset}", lambda: separation(
            self.expert(), aligned_tracks(self.test, self.pair), offset=offset, seed=self.seed))

    def translator(self) -> Seq2SeqModel:
        return self._get("translator", lambda: train_translator(
            self.corpus.train, self.pair.vocab_size, translator_config(self.cfg), seed=self.seed))

    def translator_updated(self) -> Seq2SeqModel:
        return self._get("translator_paraphrase", lambda: finetune_paraphrase(
            self.translator(), self.corpus.train, translator_config(self.cfg), seed=self.seed))

    def translator_length_match(self) -> Seq2SeqModel:
        def build():
            pairs = []
            for s in self.corpus.train:
                k = select_length_match(s.paraphrases, s.source)
                pairs.append((s.source, s.paraphrases[k]))
            return finetune_on_targets(self.translator(), pairs, translator_config(self.cfg), seed=self.seed)
        return self._get("translator_length_match", build)

    def pretrained(self) -> DurationPredictor:
        return self._get("duration_pretrained", lambda: pretrain_duration(
            self.corpus.train, self.pair, pretrain_config(self.cfg), seed=self.seed))

    def finetuned(self, system: str = "LS+D FT") -> DurationPredictor:
        init, losses = ABLATION_SYSTEMS[system]

        def build():
            config = finetune_config(self.cfg, self.seed, init, losses)
            translator = self.translator() if config.target_source == "translator" else None
            start = self.pretrained() if init == "pretrained" else None
            return finetune_duration(start, self.expert(), self.corpus.train, self.pair, config, translator)
        return self._get(f"duration {system}", build)

    def translations(self, which: str = "base"):
        model = {"base": self.translator, "updated": self.translator_updated,
                 "length_match": self.translator_length_match}[which]
        return self._get(f"translations_{which}", lambda: translate_batch(model(), [s.source for s in self.test]))

    # -- evaluated systems
    def report(self, system: str) -> MetricReport:
        return self._get(f"report {system}", lambda: self._evaluate(system))

    def _evaluate(self, system: str) -> MetricReport:
        expert = self.expert()
        if system == "Source":
            return evaluate_system(self.test, self.pair, None, None, expert,
                                   eval_options(self.cfg, unit_source="source"), system, self.seed)
        if system == "Original Translation":
            return evaluate_system(self.test, self.pair, None, None, expert,
                                   eval_options(self.cfg, unit_source="ground_truth",
                                                duration_source="ground_truth"), system, self.seed)
        if system == "Dur-only":
            return evaluate_system(self.test, self.pair, self.translator(), self.pretrained(), expert,
                                   eval_options(self.cfg), system, self.seed, self.translations("base"))
        if system in ABLATION_SYSTEMS or system == "Ours":
            model = self.finetuned("LS+D FT" if system == "Ours" else system)
            return evaluate_system(self.test, self.pair, self.translator(), model, expert,
                                   eval_options(self.cfg), system, self.seed, self.translations("base"))
        if system == "Ours + Updated TM":
            return evaluate_system(self.test, self.pair, self.translator_updated(), self.finetuned(), expert,
                                   eval_options(self.cfg), system, self.seed, self.translations("updated"))
        if system == "Length Match":
            return evaluate_system(self.test, self.pair, self.translator_length_match(), self.finetuned(),
                                   expert, eval_options(self.cfg), system, self.seed,
                                   self.translations("length_match"))
        raise ValueError(f"unknown system {system!r}")


# ---------------------------------------------------------------- pipelines

def headline(run: SeedRun) -> dict:
    """Dur-only baseline vs the sync-aware fine-tuned system, same frozen translator."""
    base, ours = run.report("Dur-only"), run.report("Ours")
    b, o = base.mean("lse_d"), ours.mean("lse_d")
    digests_equal = ([s["hyp_digest"] for s in base.samples] == [s["hyp_digest"] for s in ours.samples]
                     and [s["id"] for s in base.samples] == [s["id"] for s in ours.samples])
    return {"seed": run.seed, "baseline_lse_d": b, "ours_lse_d": o,
            "relative_reduction": (b - o) / b, "translations_identical": digests_equal}


def ablation_rows(run: SeedRun) -> dict:
    out = {}
    for name in ABLATION_SYSTEMS:
        agg = run.report(name).aggregate()
        out[name] = {"lse_c": agg["lse_c"]["mean"], "lse_d": agg["lse_d"]["mean"],
                     "length_drift": agg["length_drift"]["mean"]}
    return out


def run_ablation_table3(cfg: ExperimentConfig, runs: list[SeedRun] | None = None) -> dict:
    runs = runs or [SeedRun(cfg, s) for s in cfg.seeds]
    return {r.seed: ablation_rows(r) for r in runs}


def ablation_markdown(table: dict) -> str:
    lines = ["| Seed | System | LSE-C ↑ | LSE-D ↓ | length drift ↓ |", "|---|---|---|---|---|"]
    for seed, rows in table.items():
        for name, m in rows.items():
            lines.append(f"| {seed} | {name} | {m['lse_c']:.4f} | {m['lse_d']:.4f} | {m['length_drift']:.4f} |")
    return "\n".join(lines) + "\n"


def paraphrase_arms(run: SeedRun) -> list[MetricReport]:
    return [run.report(name) for name in PARAPHRASE_ARMS]


def majority(flags: list[bool]) -> bool:
    return sum(flags) >= (len(flags) // 2 + 1)


def directional_checks(runs: list[SeedRun]) -> list[tuple[str, bool, str]]:
    """(claim, passed, detail) for each directional comparison across seeds."""
    checks = []
    heads = [headline(r) for r in runs]
    red = [h["relative_reduction"] for h in heads]
    checks.append(("Sync-aware fine-tuning lowers LSE-D by >= 5% vs dur-only (seed majority)",
                   majority([x >= 0.05 for x in red]),
                   "reductions: " + ", ".join(f"{100 * x:.2f}%" for x in red)))
    checks.append(("Translator outputs identical across duration systems",
                   all(h["translations_identical"] for h in heads), ""))
    best, drift = [], []
    for r in runs:
        rows = ablation_rows(r)
        best.append(min(rows, key=lambda k: rows[k]["lse_d"]) == "LS+D FT")
        drift.append(max(rows, key=lambda k: rows[k]["length_drift"]) == "LS FT")
    checks.append(("LS+D FT has the lowest LSE-D of the ablation systems (seed majority)", majority(best),
                   f"{sum(best)}/{len(best)} seeds"))
    checks.append(("LS FT has the largest length drift of the ablation systems (seed majority)",
                   majority(drift), f"{sum(drift)}/{len(drift)} seeds"))
    src_best = []
    for r in runs:
        src = r.report("Source").mean("lse_d")
        others = [r.report(n).mean("lse_d") for n in ("Dur-only", *ABLATION_SYSTEMS, *PARAPHRASE_ARMS)]
        src_best.append(all(src < o for o in others))
    checks.append(("Source audio has the lowest LSE-D of all systems (every seed)", all(src_best), ""))
    return checks


def summary_markdown(cfg: ExperimentConfig, runs: list[SeedRun]) -> str:
    parts = ["# Audio-visual dubbing: experiment summary", "",
             f"Seeds: {', '.join(str(r.seed) for r in runs)}; test samples per seed: {len(runs[0].test)}.", ""]
    parts += ["## Directional checks", ""]
    for claim, ok, detail in directional_checks(runs):
        parts.append(f"- **{'PASS' if ok else 'FAIL'}** {claim}" + (f" ({detail})" if detail else ""))
    parts += ["", "## Sync expert separation (P aligned vs P offset 8)", ""]
    for r in runs:
        pos, neg = r.expert_separation()
        parts.append(f"- seed {r.seed}: {pos:.4f} vs {neg:.4f} (gap {pos - neg:.4f})")
    for r in runs:
        parts += ["", f"## Seed {r.seed}", "", "### Lip-sync results", ""]
        parts.append(markdown_table([r.report(n) for n in ("Source", "Dur-only", "Ours")],
                                    keys=("lse_c", "lse_d", "lsd", "unit_bleu", "length_drift")))
        h = headline(r)
        parts.append(f"Relative LSE-D reduction vs dur-only: {100 * h['relative_reduction']:.2f}%.")
        parts += ["", "### Loss ablation", ""]
        parts.append(ablation_markdown({r.seed: ablation_rows(r)}))
        parts += ["### Translation variations", ""]
        parts.append(markdown_table(paraphrase_arms(r), keys=("lse_d", "lse_c", "lsd", "unit_bleu")))
    return "\n".join(parts).rstrip() + "\n"


def write_reports(run: SeedRun, names, out_dir: Path) -> None:
    d = out_dir / f"seed{run.seed}" / "reports"
    d.mkdir(parents=True, exist_ok=True)
    for name in names:
        slug = name.lower().replace(" + ", "_plus_").replace("+", "p").replace(" ", "_").replace("-", "_")
        (d / f"{slug}.json").write_text(run.report(name).to_json(), encoding="utf-8")


ALL_SYSTEMS = ("Source", "Dur-only", *ABLATION_SYSTEMS, *PARAPHRASE_ARMS)


def run_paper(cfg: ExperimentConfig, out_dir: str | Path | None = None,
              runs: list[SeedRun] | None = None) -> tuple[str, list[SeedRun]]:
    """Every stage for every configured seed; returns the summary markdown."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    runs = runs or [SeedRun(cfg, s, out) for s in cfg.seeds]
    for r in runs:
        write_reports(r, ALL_SYSTEMS, out)
    text = summary_markdown(cfg, runs)
    (out / "summary.md").write_text(text, encoding="utf-8")
    write_manifest(out)
    return text, runs

