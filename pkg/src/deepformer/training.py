"""RAdam, warmup/inverse-sqrt schedule, divergence detection and the
training loop that produces learning curves."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .architecture import PAD, Transformer
from .corpus import Batch, make_batches
from .numerics import DivergenceError, Parameter, Tape


@dataclass
class Schedule:
    warmup_steps: int = 4000
    peak_lr: float = 1e-3

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be positive")


def lr_at_step(t: int, schedule: Schedule) -> float:
    """Linear warmup to ``peak_lr``, then inverse square-root decay."""
    if t < 1:
        raise ValueError("steps are 1-based")
    w = schedule.warmup_steps
    return schedule.peak_lr * min(t / w, math.sqrt(w / t))


class RAdam:
    """Rectified Adam.

    While the variance of the adaptive rate is intractable
    (``rho_t <= rectify_threshold``, 4 by default) the update falls back to
    bias-corrected momentum ``theta -= lr * m_hat``. Common library versions
    use 5 here, which only changes whether step 5 is rectified.
    """

    def __init__(self, params: Sequence[Parameter], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, rectify_threshold: float = 4.0):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.rectify_threshold = rectify_threshold
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.rho_inf = 2.0 / (1.0 - self.beta2) - 1.0

    def rho(self, t: int) -> float:
        b2t = self.beta2 ** t
        return self.rho_inf - 2.0 * t * b2t / (1.0 - b2t)

    def step(self, lr: float) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise DivergenceError(f"non-finite gradient reached the optimizer ({p.name})")
        self.t += 1
        t, b1, b2 = self.t, self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        rho_t = self.rho(t)
        rect = None
        if rho_t > self.rectify_threshold:
            ri = self.rho_inf
            rect = math.sqrt((rho_t - 4) * (rho_t - 2) * ri / ((ri - 4) * (ri - 2) * rho_t))
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            m_hat = m / bc1
            if rect is None:
                p.data -= (lr * m_hat).astype(p.dtype, copy=False)
            else:
                denom = np.sqrt(v / bc2) + self.eps
                p.data -= (lr * rect * m_hat / denom).astype(p.dtype, copy=False)


# -- records ----------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    grad_norm: float
    nan_flag: bool


@dataclass
class EpochRecord:
    epoch: int
    train_ppl: float
    dev_ppl: float


@dataclass
class TrainRecord:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    diverged: bool = False
    reason: str = ""

    def best_dev_ppl(self) -> float:
        finite = [e.dev_ppl for e in self.epochs if math.isfinite(e.dev_ppl)]
        return min(finite) if finite else math.inf

    def final_dev_ppl(self) -> float:
        return self.epochs[-1].dev_ppl if self.epochs else math.nan

    def write_csv(self, step_path, epoch_path) -> None:
        with open(step_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "lr", "loss", "grad_norm", "nan_flag"])
            for s in self.steps:
                w.writerow([s.step, repr(s.lr), repr(s.loss), repr(s.grad_norm), int(s.nan_flag)])
        with open(epoch_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_ppl", "dev_ppl"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_ppl), repr(e.dev_ppl)])

    @classmethod
    def read_csv(cls, step_path, epoch_path) -> "TrainRecord":
        rec = cls()
        with open(step_path) as fh:
            for row in csv.DictReader(fh):
                rec.steps.append(StepRecord(int(row["step"]), float(row["lr"]), float(row["loss"]),
                                            float(row["grad_norm"]), bool(int(row["nan_flag"]))))
        with open(epoch_path) as fh:
            for row in csv.DictReader(fh):
                rec.epochs.append(EpochRecord(int(row["epoch"]), float(row["train_ppl"]),
                                              float(row["dev_ppl"])))
        return rec


# -- divergence -------------------------------------------------------------

class DivergenceMonitor:
    """Incremental form of :func:`detect_divergence`."""

    def __init__(self, factor: float = 10.0, window: int = 200):
        self.factor = factor
        self.window = window
        self.best = math.inf
        self.run = 0

    def update(self, loss: float, grad_norm: float) -> tuple[bool, str]:
        if not math.isfinite(loss):
            return True, "nan-loss"
        if not math.isfinite(grad_norm):
            return True, "nan-grad"
        self.best = min(self.best, loss)
        if loss > self.factor * self.best:
            self.run += 1
            if self.run >= self.window:
                return True, "loss-explosion"
        else:
            self.run = 0
        return False, ""


def detect_divergence(steps: Sequence[StepRecord], factor: float = 10.0,
                      window: int = 200) -> tuple[bool, str]:
    """True if any loss/grad-norm is non-finite, or the loss stays above
    ``factor`` times its running minimum for ``window`` consecutive steps."""
    mon = DivergenceMonitor(factor, window)
    for s in steps:
        hit, why = mon.update(s.loss, s.grad_norm)
        if hit:
            return True, why
    return False, ""


# -- loop -------------------------------------------------------------------

@dataclass
class TrainOptions:
    batch_tokens: float = 1024
    accum_steps: int = 1
    clip_norm: float | None = None
    divergence_factor: float = 10.0
    divergence_window: int = 200
    max_steps: int | None = None
    eval_batch_tokens: float = 4096


def accumulate_gradients(model: Transformer, batches: Sequence[Batch],
                         smoothing: float | None = None) -> tuple[float, float, int]:
    """Add gradients of the token-weighted mean loss over ``batches``.

    Returns ``(mean smoothed loss, summed unsmoothed NLL, token count)``.
    Gradients equal those of one batch holding every sentence.
    """
    eps = model.config.label_smoothing if smoothing is None else smoothing
    total = sum(b.n_tokens for b in batches)
    loss_sum = nll_sum = 0.0
    for b in batches:
        with Tape() as tape:
            logits = model.forward(b.src, b.tgt_in)
            part = nx.cross_entropy_ls(logits, b.labels, eps, PAD, reduction="sum")
            scaled = nx.mul(part, 1.0 / total)
        tape.backward(scaled)
        loss_sum += float(part.data)
        logp = nx.log_softmax_np(logits.data.astype(np.float64))
        nll = -np.take_along_axis(logp, b.labels[..., None], axis=-1)[..., 0]
        nll_sum += float((nll * (b.labels != PAD)).sum())
    return loss_sum / total, nll_sum, total


def evaluate_perplexity(model: Transformer, pairs, batch_tokens: float = 4096) -> float:
    """``exp`` of the mean unsmoothed token NLL, dropout off."""
    if not pairs:
        raise ValueError("cannot evaluate perplexity on an empty corpus")
    was = model.training
    model.eval()
    total = n = 0.0
    try:
        with nx.no_grad():
            for b in make_batches(pairs, batch_tokens, 0):
                logits = model.forward(b.src, b.tgt_in)
                total += float(nx.cross_entropy_ls(logits, b.labels, 0.0, PAD, "sum").data)
                n += b.n_tokens
    finally:
        model.train(was)
    mean = total / n
    return math.exp(mean) if math.isfinite(mean) and mean < 700 else math.inf


def token_accuracy(model: Transformer, pairs, batch_tokens: float = 4096) -> float:
    """Teacher-forced argmax accuracy over non-pad target tokens."""
    was = model.training
    model.eval()
    hit = n = 0
    try:
        with nx.no_grad():
            for b in make_batches(pairs, batch_tokens, 0):
                pred = model.forward(b.src, b.tgt_in).data.argmax(axis=-1)
                keep = b.labels != PAD
                hit += int(((pred == b.labels) & keep).sum())
                n += int(keep.sum())
    finally:
        model.train(was)
    return hit / n


def sequence_accuracy(model: Transformer, pairs, chunk: int = 256) -> float:
    """Fraction of sources whose greedy decode equals the reference exactly."""
    hit = 0
    for i in range(0, len(pairs), chunk):
        part = pairs[i: i + chunk]
        max_len = max(len(t) for _, t in part) + 2
        hyps = model.greedy_decode([s for s, _ in part], max_len)
        hit += sum(h == list(t) for h, (_, t) in zip(hyps, part))
    return hit / len(pairs)


def train_loop(model: Transformer, train, dev, schedule: Schedule, epochs: int, seed: int,
               options: TrainOptions | None = None,
               log: Callable[[str], None] | None = None) -> tuple[TrainRecord, Transformer]:
    """Train in place; stop early (and flag the record) on divergence."""
    opts = options or TrainOptions()
    record = TrainRecord()
    if epochs <= 0:
        return record, model
    if not train:
        raise ValueError("training corpus is empty")
    opt = RAdam(model.parameters())
    monitor = DivergenceMonitor(opts.divergence_factor, opts.divergence_window)
    model.dropout_rng = np.random.default_rng([seed, 2])
    model.train()
    step = 0
    for epoch in range(1, epochs + 1):
        batches = make_batches(train, opts.batch_tokens, seed * 100003 + epoch)
        nll_total = tok_total = 0.0
        stop = False
        for i in range(0, len(batches), opts.accum_steps):
            step += 1
            lr = lr_at_step(step, schedule)
            model.zero_grad()
            with np.errstate(all="ignore"):
                loss, nll, ntok = accumulate_gradients(model, batches[i: i + opts.accum_steps])
            gnorm = nx.global_norm(p.grad for p in model.parameters())
            nan = not (math.isfinite(loss) and math.isfinite(gnorm))
            record.steps.append(StepRecord(step, lr, loss, gnorm, nan))
            nll_total += nll
            tok_total += ntok
            hit, why = monitor.update(loss, gnorm)
            if hit:
                record.diverged, record.reason = True, why
                stop = True
                break
            if opts.clip_norm is not None and gnorm > opts.clip_norm:
                scale = opts.clip_norm / gnorm
                for p in model.parameters():
                    p.grad *= scale
            opt.step(lr)
            if opts.max_steps is not None and step >= opts.max_steps:
                stop = True
                break
        with np.errstate(all="ignore"):
            train_ppl = math.exp(nll_total / tok_total) if nll_total / tok_total < 700 else math.inf
            dev_ppl = evaluate_perplexity(model, dev, opts.eval_batch_tokens) if dev else math.nan
        record.epochs.append(EpochRecord(epoch, train_ppl, dev_ppl))
        if log is not None:
            log(f"epoch {epoch} step {step} train_ppl {train_ppl:.4f} dev_ppl {dev_ppl:.4f}"
                + (f" DIVERGED ({record.reason})" if record.diverged else ""))
        if stop:
            break
    model.eval()
    return record, model
