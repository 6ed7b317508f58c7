"""Encoder-decoder Transformer with post-LN, pre-LN and ADMIN residual blocks."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
BLOCK_MODES = ("postln", "preln", "admin")


class ConfigurationError(ValueError):
    pass


class AttentionMaskError(ValueError):
    """Some query row has no key it is allowed to attend to."""


@dataclass
class ModelConfig:
    n_enc_layers: int = 6
    n_dec_layers: int = 6
    d_model: int = 64
    d_ff: int = 128
    n_heads: int = 2
    src_vocab: int = 64
    tgt_vocab: int = 64
    dropout: float = 0.1
    block_mode: str = "postln"
    label_smoothing: float = 0.1
    max_len: int = 256
    ln_eps: float = 1e-5
    tie_embeddings: bool = False

    def validate(self) -> "ModelConfig":
        if self.n_enc_layers < 1 or self.n_dec_layers < 1:
            raise ConfigurationError("need at least one encoder and one decoder layer")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.block_mode not in BLOCK_MODES:
            raise ConfigurationError(f"block_mode must be one of {BLOCK_MODES}, got {self.block_mode!r}")
        if min(self.src_vocab, self.tgt_vocab) < 5:
            raise ConfigurationError("vocabularies must hold the reserved ids plus content tokens")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError("dropout and label_smoothing must lie in [0, 1)")
        if self.ln_eps <= 0:
            raise ConfigurationError("ln_eps must be positive")
        if self.tie_embeddings and self.src_vocab != self.tgt_vocab:
            raise ConfigurationError("tie_embeddings needs equal source and target vocabularies")
        return self

    @property
    def n_branches(self) -> int:
        return 2 * self.n_enc_layers + 3 * self.n_dec_layers

    @classmethod
    def transformer_base(cls, **overrides) -> "ModelConfig":
        """The 512/2048/8 base widths used for the full-size experiments."""
        base = dict(d_model=512, d_ff=2048, n_heads=8, dropout=0.1, label_smoothing=0.1)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class ResidualBranch:
    kind: str          # self-attention | masked-self-attention | cross-attention | feed-forward
    layer: int
    index: int         # global, 0-based: encoder branches first, then decoder
    prefix: str        # parameter-name prefix, e.g. "enc.3.attn"

    @property
    def side(self) -> str:
        return "enc" if self.prefix.startswith("enc.") else "dec"

    @property
    def ln_name(self) -> str:
        return self.prefix + "_ln"

    @property
    def out_proj(self) -> tuple[str, str]:
        """Names of the final weight and bias of the branch."""
        if self.kind == "feed-forward":
            return self.prefix + ".w2", self.prefix + ".b2"
        return self.prefix + ".wo", self.prefix + ".bo"


def enumerate_branches(n_enc: int, n_dec: int) -> list[ResidualBranch]:
    out = []
    for l in range(n_enc):
        out.append(ResidualBranch("self-attention", l, len(out), f"enc.{l}.attn"))
        out.append(ResidualBranch("feed-forward", l, len(out), f"enc.{l}.ffn"))
    for l in range(n_dec):
        out.append(ResidualBranch("masked-self-attention", l, len(out), f"dec.{l}.self_attn"))
        out.append(ResidualBranch("cross-attention", l, len(out), f"dec.{l}.cross_attn"))
        out.append(ResidualBranch("feed-forward", l, len(out), f"dec.{l}.ffn"))
    return out


def sinusoid_table(n_pos: int, d: int, dtype=np.float64) -> np.ndarray:
    """``pe[t, 2k] = sin(t / 10000^(2k/d))``, ``pe[t, 2k+1] = cos(...)``."""
    pos = np.arange(n_pos, dtype=np.float64)[:, None]
    k = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, k / d)
    pe = np.zeros((n_pos, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe.astype(dtype)


# -- functional pieces ------------------------------------------------------

def multi_head_attention(q_in: Tensor, kv_in: Tensor, p: dict, n_heads: int,
                         mask: np.ndarray | None = None,
                         probe: Callable[[np.ndarray], None] | None = None) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` heads.

    ``q_in`` is ``[B, Lq, d]``, ``kv_in`` is ``[B, Lk, d]``; ``p`` holds
    ``wq, bq, wk, bk, wv, bv, wo, bo``. ``mask`` broadcasts to
    ``[B, 1, Lq, Lk]`` and is True where attending is allowed.
    """
    B, Lq, d = q_in.shape
    Lk = kv_in.shape[1]
    dh = d // n_heads

    def heads(x, L):
        return nx.transpose(nx.reshape(x, (B, L, n_heads, dh)), (0, 2, 1, 3))

    q = heads(nx.linear(q_in, p["wq"], p["bq"]), Lq)
    k = heads(nx.linear(kv_in, p["wk"], p["bk"]), Lk)
    v = heads(nx.linear(kv_in, p["wv"], p["bv"]), Lk)
    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, mask.shape[:-1] + (Lk,)).any(axis=-1).all():
            raise AttentionMaskError("attention mask leaves a query row with no allowed key")
        scores = nx.masked_fill(scores, mask, -np.inf)
    probs = nx.softmax(scores, axis=-1)
    if probe is not None:
        probe(probs.data)
    ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (B, Lq, d))
    return nx.linear(ctx, p["wo"], p["bo"])


def feed_forward(x: Tensor, p: dict) -> Tensor:
    """``relu(x @ w1 + b1) @ w2 + b2``."""
    return nx.linear(nx.relu(nx.linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def block_forward(x: Tensor, f: Callable[[Tensor], Tensor], gain: Tensor, bias: Tensor,
                  mode: str, omega: Tensor | None = None, eps: float = 1e-5,
                  post_branch: Callable[[Tensor], Tensor] | None = None,
                  hook: Callable[[Tensor], None] | None = None) -> Tensor:
    """One residual block.

    postln: ``LN(x + f(x))``; preln: ``x + f(LN(x))``;
    admin: ``LN(x * omega + f(x))``. ``post_branch`` (dropout) is applied to
    the branch output after ``hook`` has seen it.
    """
    if mode == "preln":
        h = f(nx.layer_norm(x, gain, bias, eps))
    else:
        h = f(x)
    if hook is not None:
        hook(h)
    if post_branch is not None:
        h = post_branch(h)
    if mode == "postln":
        return nx.layer_norm(nx.add(x, h), gain, bias, eps)
    if mode == "preln":
        return nx.add(x, h)
    if mode == "admin":
        if omega is None:
            raise ConfigurationError("admin block needs an omega vector")
        if not (omega.data > 0).all():
            raise ConfigurationError("omega must be strictly positive")
        return nx.layer_norm(nx.add(nx.mul(x, omega), h), gain, bias, eps)
    raise ConfigurationError(f"unknown block mode {mode!r}")


# -- the model --------------------------------------------------------------

class Transformer:
    """Parameters plus forward passes for one encoder-decoder model.

    Inputs are padded id matrices ``[B, L]`` (pad id 0). ``omegas`` is a
    ``[n_branches, d_model]`` array used only when ``block_mode == "admin"``.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config.validate()
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.training = False
        self.dropout_rng = np.random.default_rng([seed, 1])
        self.branches = enumerate_branches(config.n_enc_layers, config.n_dec_layers)
        self.omegas: np.ndarray | None = None
        self.ln_eps: dict[str, float] = {}
        self.branch_hook: Callable[[ResidualBranch, Tensor], None] | None = None
        self.attention_probe: Callable[[str, np.ndarray], None] | None = None
        self.params: dict[str, Parameter] = {}
        self._pe = sinusoid_table(config.max_len, config.d_model, self.dtype)
        self._init_default(np.random.default_rng(seed))

    # construction

    def _add(self, name, value):
        self.params[name] = Parameter(np.asarray(value, dtype=self.dtype), name=name)

    def _xavier(self, rng, name, fan_in, fan_out):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        self._add(name, rng.uniform(-a, a, size=(fan_in, fan_out)))

    def _attn(self, rng, prefix):
        d = self.config.d_model
        for w in ("q", "k", "v", "o"):
            self._xavier(rng, f"{prefix}.w{w}", d, d)
            self._add(f"{prefix}.b{w}", np.zeros(d))

    def _ffn(self, rng, prefix):
        c = self.config
        self._xavier(rng, f"{prefix}.w1", c.d_model, c.d_ff)
        self._add(f"{prefix}.b1", np.zeros(c.d_ff))
        self._xavier(rng, f"{prefix}.w2", c.d_ff, c.d_model)
        self._add(f"{prefix}.b2", np.zeros(c.d_model))

    def _ln(self, name):
        d = self.config.d_model
        self._add(f"{name}.gain", np.ones(d))
        self._add(f"{name}.bias", np.zeros(d))

    def _init_default(self, rng):
        # Xavier-uniform linear maps, zero biases, embeddings ~ N(0, var=d^-1/2).
        c = self.config
        std = c.d_model ** -0.25
        self._add("src_embed.weight", rng.normal(0.0, std, size=(c.src_vocab, c.d_model)))
        if not c.tie_embeddings:
            self._add("tgt_embed.weight", rng.normal(0.0, std, size=(c.tgt_vocab, c.d_model)))
        for br in self.branches:
            if br.kind == "feed-forward":
                self._ffn(rng, br.prefix)
            else:
                self._attn(rng, br.prefix)
            self._ln(br.ln_name)
        if c.block_mode == "preln":
            self._ln("enc.final_ln")
            self._ln("dec.final_ln")
        if not c.tie_embeddings:
            self._xavier(rng, "out_proj.weight", c.d_model, c.tgt_vocab)
        self._add("out_proj.bias", np.zeros(c.tgt_vocab))

    # helpers

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Transformer":
        self.training = mode
        return self

    def eval(self) -> "Transformer":
        return self.train(False)

    def set_omegas(self, omegas) -> None:
        """Install per-branch skip scalings (scalars or d-vectors)."""
        om = np.asarray(omegas, dtype=np.float64)
        n, d = self.config.n_branches, self.config.d_model
        if om.ndim == 1:
            om = np.repeat(om[:, None], d, axis=1)
        if om.shape != (n, d):
            raise ConfigurationError(f"expected {n} omega entries of width {d}, got {om.shape}")
        if not (om > 0).all():
            raise ConfigurationError("omega must be strictly positive")
        self.omegas = om.astype(self.dtype)

    def _sub(self, prefix) -> dict:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def _eps(self, ln_name) -> float:
        return self.ln_eps.get(ln_name, self.config.ln_eps)

    def _dropout(self, x):
        return nx.dropout(x, self.config.dropout, self.dropout_rng, self.training)

    def _check_ready(self):
        if self.config.block_mode == "admin" and self.omegas is None:
            raise ConfigurationError("admin mode needs an omega profile; run profiling first")

    # forward

    def embed(self, ids, side: str = "src") -> Tensor:
        """Token embedding * sqrt(d_model) + sinusoidal position encoding.

        Accepts ``[B, L]`` or a single ``[L]`` sequence.
        """
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        L = ids.shape[1]
        if L > self.config.max_len:
            raise ConfigurationError(f"sequence length {L} exceeds max_len={self.config.max_len}")
        name = "src_embed.weight" if side == "src" or self.config.tie_embeddings else "tgt_embed.weight"
        e = nx.embedding(self.params[name], ids)
        x = nx.add(nx.mul(e, math.sqrt(self.config.d_model)), Tensor(self._pe[:L]))
        if single:
            return nx.reshape(x, (L, self.config.d_model))
        return x

    def _block(self, x, br: ResidualBranch, f):
        mode = self.config.block_mode
        omega = None
        if mode == "admin":
            omega = Tensor(self.omegas[br.index])
        hook = None
        if self.branch_hook is not None:
            hook = lambda h, br=br: self.branch_hook(br, h)  # noqa: E731
        ln = br.ln_name
        return block_forward(x, f, self.params[ln + ".gain"], self.params[ln + ".bias"], mode,
                             omega, self._eps(ln), post_branch=self._dropout, hook=hook)

    def _attn_fn(self, br, kv, mask):
        p = self._sub(br.prefix)
        probe = None
        if self.attention_probe is not None:
            probe = lambda a, name=br.prefix: self.attention_probe(name, a)  # noqa: E731
        if kv is None:
            return lambda h: multi_head_attention(h, h, p, self.config.n_heads, mask, probe)
        return lambda h: multi_head_attention(h, kv, p, self.config.n_heads, mask, probe)

    def encoder_forward(self, src) -> Tensor:
        """``[B, Ls]`` ids -> ``[B, Ls, d]`` memory."""
        self._check_ready()
        src = np.asarray(src, dtype=np.int64)
        key_mask = (src != PAD)[:, None, None, :]
        x = self._dropout(self.embed(src, "src"))
        for br in self.branches[: 2 * self.config.n_enc_layers]:
            if br.kind == "feed-forward":
                f = lambda h, p=self._sub(br.prefix): feed_forward(h, p)  # noqa: E731
            else:
                f = self._attn_fn(br, None, key_mask)
            x = self._block(x, br, f)
        if self.config.block_mode == "preln":
            x = nx.layer_norm(x, self.params["enc.final_ln.gain"], self.params["enc.final_ln.bias"],
                              self._eps("enc.final_ln"))
        return x

    def decoder_forward(self, tgt_in, memory: Tensor, src) -> Tensor:
        """``[B, Lt]`` ids + encoder memory -> ``[B, Lt, V]`` logits."""
        self._check_ready()
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        src = np.asarray(src, dtype=np.int64)
        Lt = tgt_in.shape[1]
        causal = np.tril(np.ones((Lt, Lt), dtype=bool))
        self_mask = causal[None, None] & (tgt_in != PAD)[:, None, None, :]
        cross_mask = (src != PAD)[:, None, None, :]
        x = self._dropout(self.embed(tgt_in, "tgt"))
        for br in self.branches[2 * self.config.n_enc_layers:]:
            if br.kind == "feed-forward":
                f = lambda h, p=self._sub(br.prefix): feed_forward(h, p)  # noqa: E731
            elif br.kind == "masked-self-attention":
                f = self._attn_fn(br, None, self_mask)
            else:
                f = self._attn_fn(br, memory, cross_mask)
            x = self._block(x, br, f)
        if self.config.block_mode == "preln":
            x = nx.layer_norm(x, self.params["dec.final_ln.gain"], self.params["dec.final_ln.bias"],
                              self._eps("dec.final_ln"))
        if self.config.tie_embeddings:
            w = nx.transpose(self.params["src_embed.weight"], (1, 0))
        else:
            w = self.params["out_proj.weight"]
        return nx.linear(x, w, self.params["out_proj.bias"])

    def forward(self, src, tgt_in) -> Tensor:
        src = np.asarray(src, dtype=np.int64)
        return self.decoder_forward(tgt_in, self.encoder_forward(src), src)

    def loss(self, batch, smoothing: float | None = None, reduction: str = "mean") -> Tensor:
        eps = self.config.label_smoothing if smoothing is None else smoothing
        logits = self.forward(batch.src, batch.tgt_in)
        return nx.cross_entropy_ls(logits, batch.labels, eps, PAD, reduction)

    def greedy_decode(self, src: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
        """Argmax decoding of raw source id lists; hypotheses exclude bos/eos."""
        if max_len <= 0:
            raise ConfigurationError("max_len must be positive")
        if len(src) == 0:
            return []
        # sources carry a trailing eos, as in training batches
        L = max(len(s) for s in src) + 1
        src_arr = np.full((len(src), L), PAD, dtype=np.int64)
        for i, s in enumerate(src):
            src_arr[i, : len(s) + 1] = list(s) + [EOS]
        was_training = self.training
        self.eval()
        try:
            with nx.no_grad():
                memory = self.encoder_forward(src_arr)
                ys = np.full((len(src), 1), BOS, dtype=np.int64)
                done = np.zeros(len(src), dtype=bool)
                for _ in range(max_len):
                    logits = self.decoder_forward(ys, memory, src_arr)
                    nxt = logits.data[:, -1, :].argmax(axis=-1)
                    nxt = np.where(done, PAD, nxt)
                    ys = np.concatenate([ys, nxt[:, None]], axis=1)
                    done |= nxt == EOS
                    if done.all():
                        break
        finally:
            self.train(was_training)
        out = []
        for row in ys[:, 1:]:
            hyp = []
            for t in row:
                if t == EOS or t == PAD:
                    break
                hyp.append(int(t))
            out.append(hyp)
        return out

    def clone(self) -> "Transformer":
        other = Transformer.__new__(Transformer)
        other.__dict__.update(self.__dict__)
        other.config = dataclasses.replace(self.config)
        other.params = {k: Parameter(v.data.copy(), name=k) for k, v in self.params.items()}
        other.omegas = None if self.omegas is None else self.omegas.copy()
        other.ln_eps = dict(self.ln_eps)
        other.dropout_rng = np.random.default_rng([self.seed, 1])
        other.branch_hook = None
        other.attention_probe = None
        return other

    def astype(self, dtype) -> "Transformer":
        other = self.clone()
        other.dtype = np.dtype(dtype)
        other.params = {k: Parameter(v.data.astype(dtype), name=k) for k, v in self.params.items()}
        other._pe = sinusoid_table(self.config.max_len, self.config.d_model, other.dtype)
        if other.omegas is not None:
            other.omegas = other.omegas.astype(dtype)
        return other

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())
