"""Checkpoints: a JSON metadata sidecar plus a raw little-endian float blob.

Layout of a checkpoint directory::

    meta.json    format version, endianness, dtype, model config, init mode,
                 omega profile, layer-norm eps overrides, step count, and a
                 table of (name, shape, offset) for every parameter
    params.bin   parameters back to back, little-endian, in ``dtype``
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .architecture import ModelConfig, Transformer

FORMAT_VERSION = 1
INIT_SCHEME = "xavier_uniform linear maps, zero biases, normal(0, variance=d_model^-1/2) embeddings"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Transformer, directory, *, init_mode: str, profile=None,
                    step: int = 0, vocab=None, run_config: dict | None = None,
                    extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    le = model.dtype.newbyteorder("<")
    table, offset, chunks = [], 0, []
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype=le).tobytes()
        table.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    meta = {
        "format_version": FORMAT_VERSION,
        "endianness": "little",
        "dtype": model.dtype.name,
        "config": dataclasses.asdict(model.config),
        "seed": model.seed,
        "init_mode": init_mode,
        "init_scheme": INIT_SCHEME,
        "omega_profile": None if profile is None else profile.to_dict(),
        "omegas": None if model.omegas is None else model.omegas.astype(np.float64).tolist(),
        "ln_eps": model.ln_eps,
        "step": step,
        "vocab": None if vocab is None else list(vocab.itos),
        "run_config": run_config,
        "params": table,
    }
    if extra:
        meta.update(extra)
    (d / "params.bin").write_bytes(b"".join(chunks))
    (d / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    return d


def read_meta(directory) -> dict:
    path = Path(directory) / "meta.json"
    if not path.exists():
        raise CheckpointError(f"{directory} is not a checkpoint (no meta.json)")
    meta = json.loads(path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format_version')}")
    if meta.get("endianness") != "little":
        raise CheckpointError("only little-endian parameter blobs are supported")
    return meta


def load_checkpoint(directory) -> tuple[Transformer, dict]:
    d = Path(directory)
    meta = read_meta(d)
    dtype = np.dtype(meta["dtype"])
    config = ModelConfig(**meta["config"])
    model = Transformer(config, seed=meta.get("seed", 0), dtype=dtype)
    blob = (d / "params.bin").read_bytes()
    le = dtype.newbyteorder("<")
    names = set()
    for entry in meta["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in model.params:
            raise CheckpointError(f"checkpoint parameter {name} unknown to the model")
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype=le, count=count, offset=entry["offset"])
        p = model.params[name]
        if p.shape != shape:
            raise CheckpointError(f"{name}: shape {shape} vs model {p.shape}")
        p.data = arr.astype(dtype).reshape(shape)
        p.zero_grad()
        names.add(name)
    missing = set(model.params) - names
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    if meta.get("omegas") is not None:
        model.set_omegas(meta["omegas"])
    model.ln_eps = {k: float(v) for k, v in (meta.get("ln_eps") or {}).items()}
    return model, meta
