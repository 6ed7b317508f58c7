"""ADMIN initialisation: profile residual-branch variances, derive skip
scalings, and fold the scalings back into a plain post-LN model.

The skip path of branch ``i`` is scaled by ``omega_i`` where, within each
chain (encoder, decoder), ``omega_1 = 1`` and
``omega_i = sqrt(sum_{j<i} Var[f_j])``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .architecture import PAD, ConfigurationError, Transformer


class ProfilingError(ValueError):
    pass


class FoldError(ValueError):
    pass


@dataclass
class OmegaProfile:
    branch_variances: list
    omegas: list = field(default_factory=list)
    profiling_tokens: int = 0
    chain_layout: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "branch_variances": self.branch_variances,
            "omegas": self.omegas,
            "profiling_tokens": self.profiling_tokens,
            "chain_layout": self.chain_layout,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "OmegaProfile":
        return cls(list(d["branch_variances"]), list(d.get("omegas", [])),
                   int(d.get("profiling_tokens", 0)), dict(d.get("chain_layout", {})))

    @classmethod
    def from_json(cls, text: str) -> "OmegaProfile":
        return cls.from_dict(json.loads(text))

    def chains(self) -> list[tuple[int, int]]:
        n_enc = self.chain_layout["encoder"]
        n_dec = self.chain_layout["decoder"]
        return [(0, n_enc), (n_enc, n_enc + n_dec)]


def _branch_mask(batch, side: str) -> np.ndarray:
    return batch.src != PAD if side == "enc" else batch.tgt_in != PAD


def profile_variances(model: Transformer, batch, per_feature: bool = False) -> OmegaProfile:
    """One forward pass with all omegas at 1, recording ``Var[f_i(x)]``.

    The variance of each branch output is taken over every non-pad position
    and every feature (population variance). With ``per_feature`` a variance
    is kept per feature instead. Parameters are left untouched and dropout
    is off for the pass.
    """
    cfg = model.config
    if cfg.block_mode != "admin":
        raise ConfigurationError("profiling needs a model built in admin mode")
    if model.omegas is not None and not np.all(model.omegas == 1):
        raise ConfigurationError("profiling needs every omega equal to 1")
    if batch is None or len(batch) == 0 or not (batch.src != PAD).any() or batch.n_tokens == 0:
        raise ProfilingError("profiling batch is empty or all padding")

    variances: list = [None] * cfg.n_branches

    def hook(br, h):
        vals = h.data[_branch_mask(batch, br.side)].astype(np.float64)
        if per_feature:
            variances[br.index] = vals.var(axis=0).tolist()
        else:
            variances[br.index] = float(vals.var())

    saved = (model.omegas, model.branch_hook, model.training)
    model.set_omegas(np.ones(cfg.n_branches))
    model.branch_hook = hook
    model.eval()
    try:
        with nx.no_grad():
            model.forward(batch.src, batch.tgt_in)
    finally:
        model.omegas, model.branch_hook = saved[0], saved[1]
        model.train(saved[2])
    if any(v is None for v in variances):
        raise ProfilingError("some residual branch was not visited during profiling")
    return OmegaProfile(variances, [], batch.n_tokens,
                        {"encoder": 2 * cfg.n_enc_layers, "decoder": 3 * cfg.n_dec_layers})


def compute_omega(variances) -> list:
    """Skip scalings for one chain of branch variances in forward order.

    ``omega_1 = 1``; ``omega_i = sqrt(sum_{j<i} v_j)``, falling back to 1
    when the running sum is zero. Works elementwise on per-feature entries.
    """
    v = np.asarray(variances, dtype=np.float64)
    if v.size and (v < 0).any():
        raise ValueError("branch variances must be non-negative")
    out = np.ones_like(v)
    running = np.cumsum(v, axis=0)
    for i in range(1, len(v)):
        s = running[i - 1]
        out[i] = np.where(s > 0, np.sqrt(np.where(s > 0, s, 1.0)), 1.0)
    return out.tolist()


def finalize_profile(profile: OmegaProfile) -> OmegaProfile:
    """Fill ``profile.omegas`` chain by chain (encoder and decoder restart)."""
    omegas = []
    for lo, hi in profile.chains():
        omegas.extend(compute_omega(profile.branch_variances[lo:hi]))
    profile.omegas = omegas
    return profile


def check_profile(profile: OmegaProfile, tol: float = 1e-9) -> None:
    """Raise if the omegas break the running-sum construction."""
    v, om = profile.branch_variances, profile.omegas
    n = profile.chain_layout["encoder"] + profile.chain_layout["decoder"]
    if not len(v) == len(om) == n:
        raise ValueError(f"expected {n} branches, got {len(v)} variances / {len(om)} omegas")
    for lo, hi in profile.chains():
        running = 0.0
        for i in range(lo, hi):
            w = np.asarray(om[i], dtype=np.float64)
            if not np.all(w > 0) or not np.all(np.isfinite(w)):
                raise ValueError(f"omega[{i}] not positive and finite")
            if i == lo:
                if not np.all(w == 1.0):
                    raise ValueError(f"first omega of a chain must be 1, got {om[i]}")
            else:
                expect = np.where(running > 0, running, 1.0)
                if np.max(np.abs(w * w - expect)) > tol:
                    raise ValueError(f"omega[{i}]^2 deviates from the running variance sum")
            running = running + np.asarray(v[i], dtype=np.float64)


def admin_initialize(model: Transformer, batch, per_feature: bool = False) -> OmegaProfile:
    """Profile ``model`` on ``batch`` and install the resulting omegas."""
    profile = finalize_profile(profile_variances(model, batch, per_feature))
    model.set_omegas(profile.omegas)
    return profile


def fold_omega(model: Transformer) -> Transformer:
    """Return an equivalent post-LN model with the omegas absorbed.

    ``LN(x*w + f(x)) == LN(x + f(x)/w)`` for a uniform scale ``w`` once the
    layer-norm epsilon is divided by ``w**2``; the branch's final projection
    (weight and bias) is divided by ``w``.
    """
    if model.config.block_mode != "admin":
        raise FoldError(f"only admin models can be folded (got {model.config.block_mode})")
    if model.omegas is None:
        raise FoldError("model has no omega profile to fold")
    folded = model.clone()
    for br in model.branches:
        w = model.omegas[br.index]
        if not np.all(w == w[0]):
            raise FoldError(f"branch {br.index} has a non-uniform omega vector; cannot fold")
        scale = float(w[0])
        if scale == 1.0:
            continue
        wname, bname = br.out_proj
        for name in (wname, bname):
            p = folded.params[name]
            p.data = p.data / np.asarray(scale, dtype=p.dtype)
            p.zero_grad()
        folded.ln_eps[br.ln_name] = model._eps(br.ln_name) / (scale * scale)
    folded.config.block_mode = "postln"
    folded.omegas = None
    return folded

