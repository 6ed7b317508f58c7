"""Corpus BLEU (multi-bleu.perl semantics), paired bootstrap resampling and
frequency/length bucketed analyses.

Inputs are pre-tokenised: strings are split on whitespace, nothing else.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_ORDER = 4
FREQ_BUCKETS = (("1-4", 1, 4), ("5-9", 5, 9), ("10-99", 10, 99), ("100-999", 100, 999),
                ("1000+", 1000, math.inf))
LENGTH_BUCKETS = (("<10", 0, 9), ("10-19", 10, 19), ("20-29", 20, 29), ("30+", 30, math.inf))


class DataError(ValueError):
    pass


def _tokens(s) -> list:
    return s.split() if isinstance(s, str) else list(s)


def _ngrams(toks, n) -> Counter:
    return Counter(tuple(toks[i: i + n]) for i in range(len(toks) - n + 1))


def sentence_stats(hyp, ref) -> np.ndarray:
    """``[match_1..4, total_1..4, hyp_len, ref_len]`` for one pair."""
    h, r = _tokens(hyp), _tokens(ref)
    out = np.zeros(2 * MAX_ORDER + 2, dtype=np.int64)
    for n in range(1, MAX_ORDER + 1):
        hc, rc = _ngrams(h, n), _ngrams(r, n)
        out[n - 1] = sum(min(c, rc[g]) for g, c in hc.items())
        out[MAX_ORDER + n - 1] = max(len(h) - n + 1, 0)
    out[-2], out[-1] = len(h), len(r)
    return out


def corpus_stats(hyps, refs) -> np.ndarray:
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        return np.zeros((0, 2 * MAX_ORDER + 2), dtype=np.int64)
    return np.stack([sentence_stats(h, r) for h, r in zip(hyps, refs)])


def bleu_from_stats(stats: np.ndarray) -> np.ndarray:
    """Unsmoothed BLEU (0-100) from summed stats; vectorised over leading axes.

    Any zero n-gram precision, or an empty hypothesis side, scores 0.
    """
    stats = np.asarray(stats, dtype=np.float64)
    match, total = stats[..., :MAX_ORDER], stats[..., MAX_ORDER: 2 * MAX_ORDER]
    c, r = stats[..., -2], stats[..., -1]
    ok = (match > 0).all(axis=-1) & (c > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(ok[..., None], np.log(np.where(match > 0, match, 1.0))
                        - np.log(np.where(total > 0, total, 1.0)), 0.0).mean(axis=-1)
        bp = np.where(c < r, 1.0 - r / np.where(c > 0, c, 1.0), 0.0)
    return np.where(ok, 100.0 * np.exp(logp + bp), 0.0)


def smoothed_sentence_bleu(stats: np.ndarray) -> float:
    """Add-one smoothing for orders >= 2; bookkeeping only, never reported as BLEU."""
    s = np.asarray(stats, dtype=np.float64)
    match = s[:MAX_ORDER].copy()
    total = s[MAX_ORDER: 2 * MAX_ORDER].copy()
    c, r = s[-2], s[-1]
    if c == 0 or match[0] == 0:
        return 0.0
    match[1:] += 1
    total[1:] += 1
    logp = np.mean(np.log(match / total))
    bp = 0.0 if c >= r else 1.0 - r / c
    return float(100.0 * math.exp(logp + bp))


@dataclass
class EvalReport:
    bleu: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    sentence_bleu: list = field(default_factory=list)
    sentence_stats: list = field(default_factory=list)
    buckets: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def table(self) -> str:
        lines = [f"BLEU = {self.bleu:.2f}, "
                 + "/".join(f"{100 * p:.1f}" for p in self.precisions)
                 + f" (BP={self.brevity_penalty:.3f}, hyp_len={self.hyp_len}, ref_len={self.ref_len})"]
        freq = self.buckets.get("word_accuracy_by_frequency", {})
        if freq:
            lines.append(f"{'train freq':>12} {'ref toks':>9} {'accuracy':>9}")
            for name, row in freq.items():
                lines.append(f"{name:>12} {row['ref_tokens']:>9d} {row['accuracy']:>9.4f}")
        length = self.buckets.get("bleu_by_length", {})
        if length:
            lines.append(f"{'ref length':>12} {'sents':>9} {'BLEU':>9}")
            for name, row in length.items():
                lines.append(f"{name:>12} {row['sentences']:>9d} {row['bleu']:>9.2f}")
        return "\n".join(lines)


def bleu_corpus(hypotheses: Sequence, references: Sequence) -> EvalReport:
    """Corpus BLEU with clipped n-gram counts summed before dividing."""
    stats = corpus_stats(hypotheses, references)
    tot = stats.sum(axis=0)
    match, total = tot[:MAX_ORDER], tot[MAX_ORDER: 2 * MAX_ORDER]
    c, r = int(tot[-2]), int(tot[-1])
    precisions = [float(m / t) if t else 0.0 for m, t in zip(match, total)]
    bp = 1.0 if c >= r else (math.exp(1.0 - r / c) if c else 0.0)
    score = float(bleu_from_stats(tot))
    return EvalReport(
        bleu=round(score, 2),
        precisions=precisions,
        brevity_penalty=bp,
        hyp_len=c,
        ref_len=r,
        sentence_bleu=[smoothed_sentence_bleu(s) for s in stats],
        sentence_stats=stats.tolist(),
    )


# -- significance -----------------------------------------------------------

@dataclass
class BootstrapResult:
    p_value: float
    win_rate: float
    tie_rate: float
    score_a: float
    score_b: float
    n_samples: int


def _mean_metric(summed: np.ndarray, n: int) -> np.ndarray:
    return summed[..., 0] / n


def paired_bootstrap(stats_a, stats_b, n_samples: int = 1000, seed: int = 0,
                     metric: Callable[[np.ndarray], np.ndarray] | None = None) -> BootstrapResult:
    """One-sided paired bootstrap: is system A better than system B?

    ``stats_*`` are aligned per-sentence statistics, either a score list or
    rows of sufficient statistics. Each sample draws sentence indices with
    replacement and applies ``metric`` to the summed rows (default: the
    mean, i.e. sum / n). For BLEU pass the n-gram count rows and
    ``metric=bleu_from_stats`` so every sample is a genuine corpus BLEU.

    ``p_value`` is the fraction of samples with ``B >= A``; ``win_rate`` the
    fraction with ``A > B`` strictly.
    """
    a = np.asarray(stats_a, dtype=np.float64)
    b = np.asarray(stats_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DataError("bootstrap needs non-empty statistics")
    if a.shape != b.shape:
        raise DataError(f"unaligned statistics: {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    n = a.shape[0]
    if metric is None:
        metric = lambda s: _mean_metric(s, n)  # noqa: E731
    rng = np.random.default_rng(seed)
    counts = np.zeros((n_samples, n))
    draws = rng.integers(0, n, size=(n_samples, n))
    np.add.at(counts, (np.repeat(np.arange(n_samples), n), draws.reshape(-1)), 1.0)
    sa = metric(counts @ a)
    sb = metric(counts @ b)
    return BootstrapResult(
        p_value=float(np.mean(sb >= sa)),
        win_rate=float(np.mean(sa > sb)),
        tie_rate=float(np.mean(sa == sb)),
        score_a=float(metric(a.sum(axis=0))),
        score_b=float(metric(b.sum(axis=0))),
        n_samples=n_samples,
    )


def bleu_bootstrap(hyps_a, hyps_b, refs, n_samples: int = 1000, seed: int = 0) -> BootstrapResult:
    return paired_bootstrap(corpus_stats(hyps_a, refs), corpus_stats(hyps_b, refs),
                            n_samples, seed, metric=bleu_from_stats)


def compare_symbol(stats_a, stats_b, n_samples: int = 1000, seed: int = 0,
                   alpha: float = 0.05) -> str:
    """``+`` if A significantly beats B, ``-`` if B beats A, else ``=``."""
    if np.array_equal(np.asarray(stats_a), np.asarray(stats_b)):
        return "="
    if paired_bootstrap(stats_a, stats_b, n_samples, seed, bleu_from_stats).p_value < alpha:
        return "+"
    if paired_bootstrap(stats_b, stats_a, n_samples, seed, bleu_from_stats).p_value < alpha:
        return "-"
    return "="


# -- fine-grained buckets ---------------------------------------------------

def _bucket(value, table):
    for name, lo, hi in table:
        if lo <= value <= hi:
            return name
    return None


def fine_grained_report(hypotheses: Sequence, references: Sequence, training_targets: Sequence) -> dict:
    """Word accuracy by training frequency and BLEU by reference length.

    Accuracy is recall-style: per sentence a reference token counts as
    matched up to the number of times it also occurs in the hypothesis.
    Buckets without reference tokens are omitted.
    """
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    freq = Counter()
    for sent in training_targets:
        freq.update(_tokens(sent))

    names = [b[0] for b in FREQ_BUCKETS] + ["unseen"]
    matched = dict.fromkeys(names, 0)
    seen = dict.fromkeys(names, 0)
    for hyp, ref in zip(hypotheses, references):
        hc, rc = Counter(_tokens(hyp)), Counter(_tokens(ref))
        for w, cnt in rc.items():
            f = freq.get(w, 0)
            name = "unseen" if f == 0 else _bucket(f, FREQ_BUCKETS)
            seen[name] += cnt
            matched[name] += min(cnt, hc.get(w, 0))
    by_freq = {k: {"ref_tokens": seen[k], "matched": matched[k], "accuracy": matched[k] / seen[k]}
               for k in names if seen[k]}

    stats = corpus_stats(hypotheses, references)
    by_len = {}
    for name, lo, hi in LENGTH_BUCKETS:
        idx = [i for i, r in enumerate(references) if lo <= len(_tokens(r)) <= hi]
        if not idx:
            continue
        tot = stats[idx].sum(axis=0)
        by_len[name] = {
            "sentences": len(idx),
            "bleu": round(float(bleu_from_stats(tot)), 2),
            "matches": tot[:MAX_ORDER].tolist(),
            "totals": tot[MAX_ORDER: 2 * MAX_ORDER].tolist(),
        }
    return {"word_accuracy_by_frequency": by_freq, "bleu_by_length": by_len}


def evaluate(hypotheses, references, training_targets=None) -> EvalReport:
    report = bleu_corpus(hypotheses, references)
    if training_targets is not None:
        report.buckets = fine_grained_report(hypotheses, references, training_targets)
    return report
