"""``deepformer`` command line.

Exit codes: 0 when the command ran (a diverged training run included),
2 for usage or configuration errors, 3 for anything unexpected.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import math
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .admin import FoldError, ProfilingError, check_profile, fold_omega
from .architecture import ConfigurationError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, SweepCell, load_config, packaged_config
from .corpus import DataError, SpecError, Vocab, gen_task, make_batches, read_split, write_corpus
from .evalmetrics import DataError as EvalDataError
from .evalmetrics import bleu_bootstrap, compare_symbol, corpus_stats
from . import experiment as ex

EXIT_OK, EXIT_USAGE, EXIT_INTERNAL = 0, 2, 3
USAGE_ERRORS = (ConfigurationError, SpecError, DataError, EvalDataError, CheckpointError,
                FoldError, ProfilingError, FileNotFoundError)


class UsageError(Exception):
    pass


def _threads(args) -> int | None:
    if os.environ.get("DEEPFORMER_DETERMINISTIC") == "1":
        return 1
    return args.threads


@contextlib.contextmanager
def _thread_limit(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


def _load_run_config(args) -> RunConfig:
    path = args.config or packaged_config("acceptance.ini")
    cfg = load_config(path)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if getattr(args, "f64", False):
        cfg.run.f64 = True
    if getattr(args, "init", None):
        cfg.run.init_mode = args.init
        cfg.model.block_mode = "admin" if args.init == "admin" else "postln"
    if getattr(args, "epochs", None) is not None:
        cfg.run.epochs = args.epochs
    if args.out:
        cfg.run.out_dir = args.out
    return cfg.validate()


def _print_profile(profile, branches, out=sys.stdout):
    print(f"{'branch':>6} {'kind':>10} {'layer':>5} {'variance':>14} {'omega':>12}", file=out)
    for br in branches:
        v = profile.branch_variances[br.index]
        w = profile.omegas[br.index]
        v = float(np.mean(v))
        w = float(np.mean(w))
        print(f"{br.index:>6} {br.kind:>10} {br.layer:>5} {v:>14.6g} {w:>12.6g}", file=out)


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out or "data")
    corpus = gen_task(cfg.task, cfg.run.data_seed if args.seed is None else args.seed)
    write_corpus(out, corpus)
    print(f"wrote {len(corpus.train)}/{len(corpus.dev)}/{len(corpus.test)} train/dev/test pairs to {out}")
    return EXIT_OK


def cmd_profile(args) -> int:
    cfg = _load_run_config(args)
    cfg.run.init_mode = "admin"
    cfg.model.block_mode = "admin"
    cfg.validate()
    model, profile = ex.profile_model(cfg)
    check_profile(profile)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "profile.json").write_text(profile.to_json() + "\n")
    _print_profile(profile, model.branches)
    print(f"wrote {out / 'profile.json'} ({len(profile.omegas)} branches)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.run.out_dir)
    result = ex.train_run(cfg, out, log=None if args.quiet else print)
    print(result.result_line())
    return EXIT_OK


def _eval_corpus(args, meta) -> tuple:
    vocab = Vocab(meta["vocab"]) if meta.get("vocab") else None
    if args.data:
        data_vocab = Vocab.load(Path(args.data) / "vocab.txt")
        if vocab is not None and data_vocab != vocab:
            raise UsageError("checkpoint vocabulary does not match the corpus vocabulary")
        pairs = read_split(Path(args.data) / args.split, data_vocab)
        train = read_split(Path(args.data) / "train", data_vocab) if (Path(args.data) / "train.tgt").exists() else None
        return data_vocab, pairs, train
    if not meta.get("run_config"):
        raise UsageError("checkpoint has no stored run config; pass --data")
    cfg = RunConfig.from_dict(meta["run_config"]).validate()
    corpus = ex.corpus_for(cfg)
    if vocab is not None and corpus.vocab != vocab:
        raise UsageError("checkpoint vocabulary does not match the regenerated corpus")
    return corpus.vocab, corpus.split(args.split), corpus.train


def cmd_eval(args) -> int:
    from .evalmetrics import evaluate
    model, meta = load_checkpoint(args.checkpoint)
    vocab, pairs, train = _eval_corpus(args, meta)
    if len(vocab) != model.config.tgt_vocab:
        raise UsageError(f"corpus vocabulary size {len(vocab)} != model vocabulary {model.config.tgt_vocab}")
    hyps, refs = ex.decode_split(model, pairs, vocab)
    train_refs = None if train is None else [vocab.decode(t) for _, t in train]
    report = evaluate(hyps, refs, train_refs)
    doc = report.to_dict()
    doc.pop("sentence_stats")
    if args.compare:
        other, other_meta = load_checkpoint(args.compare)
        if other_meta.get("vocab") and Vocab(other_meta["vocab"]) != vocab:
            raise UsageError("comparison checkpoint uses a different vocabulary")
        hyps_b, _ = ex.decode_split(other, pairs, vocab)
        bs = bleu_bootstrap(hyps, hyps_b, refs, n_samples=args.samples, seed=args.seed or 0)
        doc["bootstrap"] = {"p_value": bs.p_value, "win_rate": bs.win_rate, "tie_rate": bs.tie_rate,
                            "bleu_a": bs.score_a, "bleu_b": bs.score_b, "n_samples": bs.n_samples}
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval.json"
    ex.dump_json(doc, out)
    if args.hyps:
        Path(args.hyps).write_text("\n".join(hyps) + "\n")
    print(report.table())
    if args.compare:
        b = doc["bootstrap"]
        print(f"bootstrap: p={b['p_value']:.4f} win_rate={b['win_rate']:.4f} (A={b['bleu_a']:.2f} B={b['bleu_b']:.2f})")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_fold(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    if meta.get("init_mode") != "admin" or model.config.block_mode != "admin":
        raise UsageError("fold needs a checkpoint trained with init_mode=admin (already folded?)")
    folded = fold_omega(model)
    vocab = Vocab(meta["vocab"]) if meta.get("vocab") else None
    if meta.get("run_config"):
        cfg = RunConfig.from_dict(meta["run_config"]).validate()
        probe = make_batches(ex.corpus_for(cfg).dev[:64], 1e9, 0)[0]
        src, tgt_in = probe.src, probe.tgt_in
    else:
        rng = np.random.default_rng(0)
        V = model.config.src_vocab
        src = rng.integers(4, V, size=(8, 12))
        tgt_in = np.concatenate([np.ones((8, 1), dtype=np.int64), rng.integers(4, V, size=(8, 11))], axis=1)
    dev = float(np.max(np.abs(model.forward(src, tgt_in).data.astype(np.float64)
                              - folded.forward(src, tgt_in).data.astype(np.float64))))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "folded"
    save_checkpoint(folded, out, init_mode="folded", profile=None, step=meta.get("step", 0),
                    vocab=vocab, run_config=meta.get("run_config"),
                    extra={"folded_from": str(args.checkpoint)})
    print(f"max logit deviation on probe batch: {dev:.3e}")
    print(f"wrote folded post-LN checkpoint to {out}")
    return EXIT_OK


def _sweep_worker(job):
    cfg_dict, cell_label, seed, out_dir, threads = job
    with _thread_limit(threads):
        base = RunConfig.from_dict(cfg_dict)
        cfg = base.with_cell(SweepCell.parse(cell_label), seed, out_dir)
        corpus = ex.corpus_for(cfg)
        result = ex.train_run(cfg, out_dir, corpus)
        hyps, refs = ex.decode_split(result.model, corpus.test, corpus.vocab)
    Path(out_dir, "test.hyp").write_text("\n".join(hyps) + "\n")
    return {
        "cell": cell_label, "seed": seed,
        "result": "diverge" if result.diverged else "ok",
        "final_dev_ppl": result.record.final_dev_ppl(),
        "best_dev_ppl": result.record.best_dev_ppl(),
        "hyps": hyps, "refs": refs,
    }


def run_sweep(cfg: RunConfig, out: Path, workers: int = 1, threads: int | None = 1,
              samples: int = 1000, log=print) -> dict:
    """Train every (cell, seed), then build the +/-/= matrix over cells.

    Each cell's test hypotheses from all seeds are concatenated (aligned by
    seed) and compared with paired bootstrap BLEU at p < 0.05.
    """
    if not cfg.sweep_cells:
        raise ConfigurationError("sweep needs [sweep] cells")
    seeds = cfg.sweep_seeds or [cfg.run.seed]
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.to_dict(), c.label, s, str(out / f"{c.label.replace(':', '_')}_s{s}"), threads)
            for c in cfg.sweep_cells for s in seeds]
    rows = []
    partial = out / "results.partial.csv"
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for r in pool.map(_sweep_worker, jobs):
                    rows.append(r)
        else:
            for job in jobs:
                rows.append(_sweep_worker(job))
                if log:
                    r = rows[-1]
                    log(f"{r['cell']} seed {r['seed']}: {r['result']} dev_ppl {r['final_dev_ppl']:.4f}")
    except Exception:
        _write_results(partial, rows)
        raise
    _write_results(out / "results.csv", rows)
    labels = [c.label for c in cfg.sweep_cells]
    pooled = {}
    for lab in labels:
        mine = sorted((r for r in rows if r["cell"] == lab), key=lambda r: r["seed"])
        hyps = [h for r in mine for h in r["hyps"]]
        refs = [x for r in mine for x in r["refs"]]
        pooled[lab] = corpus_stats(hyps, refs)
    matrix = [[compare_symbol(pooled[a], pooled[b], samples, 0) if a != b else "="
               for b in labels] for a in labels]
    lines = [" " * 14 + " ".join(f"{lab:>14}" for lab in labels)]
    for lab, row in zip(labels, matrix):
        lines.append(f"{lab:>14}" + " ".join(f"{s:>14}" for s in row))
    (out / "matrix.txt").write_text("\n".join(lines) + "\n")
    summary = {}
    for lab in labels:
        mine = [r for r in rows if r["cell"] == lab]
        ppl = [r["final_dev_ppl"] for r in mine]
        summary[lab] = {"dev_ppl": ppl, "diverged": sum(r["result"] == "diverge" for r in mine)}
    ex.dump_json({"cells": labels, "seeds": seeds, "matrix": matrix,
                  "summary": {k: {"dev_ppl": [ex.finite_or_none(x) for x in v["dev_ppl"]],
                                  "diverged": v["diverged"]} for k, v in summary.items()}},
                 out / "matrix.json")
    return {"labels": labels, "matrix": matrix, "rows": rows, "summary": summary, "table": "\n".join(lines)}


def _write_results(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "seed", "result", "final_dev_ppl", "best_dev_ppl"])
        for r in rows:
            w.writerow([r["cell"], r["seed"], r["result"], repr(r["final_dev_ppl"]), repr(r["best_dev_ppl"])])


def cmd_sweep(args) -> int:
    path = args.config or packaged_config("depth_sweep.ini")
    cfg = load_config(path)
    if args.seed is not None:
        cfg.sweep_seeds = [args.seed]
    if args.f64:
        cfg.run.f64 = True
    out = Path(args.out or cfg.run.out_dir)
    res = run_sweep(cfg, out, args.workers, _threads(args) or 1, args.samples)
    for lab in res["labels"]:
        s = res["summary"][lab]
        ppl = ", ".join("diverge" if not math.isfinite(x) else f"{x:.4f}" for x in s["dev_ppl"])
        print(f"{lab:>14}  dev ppl [{ppl}]  diverged {s['diverged']}")
    print(res["table"])
    print(f"wrote {out / 'results.csv'} and {out / 'matrix.txt'}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (INI or JSON); defaults to the packaged acceptance config")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory (or file for eval)")
    common.add_argument("--threads", type=int, help="BLAS/OpenMP thread cap")
    common.add_argument("--f64", action="store_true", help="64-bit verification mode")

    p = argparse.ArgumentParser(prog="deepformer", description="Deep post-LN transformers with ADMIN initialisation.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write the synthetic corpus to disk").set_defaults(fn=cmd_gen_data)
    sub.add_parser("profile", parents=[common], help="profile branch variances and write omegas").set_defaults(fn=cmd_profile)

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--init", choices=("default", "admin"), help="override init_mode")
    t.add_argument("--epochs", type=int, help="override epochs")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="greedy-decode a split and score it")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="corpus directory written by gen-data (default: regenerate from the checkpoint's config)")
    e.add_argument("--split", default="test", choices=("train", "dev", "test"))
    e.add_argument("--compare", help="second checkpoint for a paired bootstrap")
    e.add_argument("--samples", type=int, default=1000)
    e.add_argument("--hyps", help="also write hypotheses to this file")
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("fold", parents=[common], help="fold omegas into a plain post-LN checkpoint")
    f.add_argument("checkpoint")
    f.set_defaults(fn=cmd_fold)

    s = sub.add_parser("sweep", parents=[common], help="train a grid of depth cells and compare them")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--samples", type=int, default=1000)
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        with _thread_limit(_threads(args)):
            return args.fn(args)
    except (UsageError, *USAGE_ERRORS) as e:
        print(f"deepformer {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
