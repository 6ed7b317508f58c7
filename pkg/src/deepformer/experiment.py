"""Run-level plumbing shared by the CLI, the acceptance suite and the demos:
build a model from a RunConfig, profile it, train it, write the run directory,
decode a split and compare systems."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .admin import OmegaProfile, admin_initialize
from .architecture import Transformer
from .checkpoint import save_checkpoint
from .config import RunConfig
from .corpus import ParallelCorpus, Vocab, gen_task, make_batches
from .evalmetrics import EvalReport, corpus_stats, evaluate
from .training import TrainRecord, sequence_accuracy, train_loop


@dataclass
class RunResult:
    config: RunConfig
    model: Transformer
    record: TrainRecord
    profile: OmegaProfile | None
    seconds: float

    @property
    def diverged(self) -> bool:
        return self.record.diverged

    def result_line(self) -> str:
        if self.record.diverged:
            return f"RESULT=diverge reason={self.record.reason} step={len(self.record.steps)}"
        return f"RESULT=ok final_dev_ppl={self.record.final_dev_ppl()!r} best_dev_ppl={self.record.best_dev_ppl()!r}"


def model_dtype(cfg: RunConfig):
    return np.float64 if cfg.run.f64 else np.float32


def corpus_for(cfg: RunConfig) -> ParallelCorpus:
    return gen_task(cfg.task, cfg.run.data_seed)


def build_model(cfg: RunConfig) -> Transformer:
    return Transformer(cfg.model, seed=cfg.run.seed, dtype=model_dtype(cfg))


def profiling_batch(cfg: RunConfig, corpus: ParallelCorpus):
    return make_batches(corpus.train, cfg.run.profile_tokens, cfg.run.seed)[0]


def profile_model(cfg: RunConfig, corpus: ParallelCorpus | None = None) -> tuple[Transformer, OmegaProfile]:
    """Default-initialised admin model with omegas installed."""
    corpus = corpus or corpus_for(cfg)
    model = build_model(cfg)
    profile = admin_initialize(model, profiling_batch(cfg, corpus), cfg.run.per_feature_omega)
    return model, profile


def train_run(cfg: RunConfig, out_dir=None, corpus: ParallelCorpus | None = None,
              log: Callable[[str], None] | None = None) -> RunResult:
    """Profile (admin only), train and, when ``out_dir`` is given, write the
    self-describing run directory."""
    cfg.validate()
    corpus = corpus or corpus_for(cfg)
    start = time.perf_counter()
    if cfg.run.init_mode == "admin":
        model, profile = profile_model(cfg, corpus)
    else:
        model, profile = build_model(cfg), None
    record, model = train_loop(model, corpus.train, corpus.dev, cfg.schedule, cfg.run.epochs,
                               cfg.run.seed, cfg.train, log)
    result = RunResult(cfg, model, record, profile, time.perf_counter() - start)
    if out_dir is not None:
        write_run(result, out_dir, corpus.vocab)
    return result


def write_run(result: RunResult, out_dir, vocab: Vocab) -> Path:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    result.config.save(d / "config.ini")
    if result.profile is not None:
        (d / "profile.json").write_text(result.profile.to_json() + "\n")
    result.record.write_csv(d / "steps.csv", d / "epochs.csv")
    save_checkpoint(result.model, d / "checkpoint", init_mode=result.config.run.init_mode,
                    profile=result.profile, step=len(result.record.steps), vocab=vocab,
                    run_config=result.config.to_dict())
    (d / "result.txt").write_text(result.result_line() + "\n")
    return d


def decode_split(model: Transformer, pairs, vocab: Vocab, chunk: int = 256) -> tuple[list[str], list[str]]:
    """Greedy hypotheses and references as whitespace-joined token strings."""
    hyps, refs = [], []
    for i in range(0, len(pairs), chunk):
        part = pairs[i: i + chunk]
        max_len = max(len(s) for s, _ in part) + 8
        for h, (_, t) in zip(model.greedy_decode([s for s, _ in part], max_len), part):
            hyps.append(vocab.decode(h))
            refs.append(vocab.decode(t))
    return hyps, refs


def evaluate_model(model: Transformer, corpus: ParallelCorpus, split: str = "test") -> tuple[EvalReport, list[str], list[str]]:
    pairs = corpus.split(split)
    hyps, refs = decode_split(model, pairs, corpus.vocab)
    train_refs = [corpus.vocab.decode(t) for _, t in corpus.train]
    return evaluate(hyps, refs, train_refs), hyps, refs


def held_out_sequence_accuracy(model: Transformer, corpus: ParallelCorpus, split: str = "test") -> float:
    return sequence_accuracy(model, corpus.split(split))


def sentence_stat_rows(hyps, refs) -> np.ndarray:
    return corpus_stats(hyps, refs)


def finite_or_none(x: float):
    return x if math.isfinite(x) else None


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")
