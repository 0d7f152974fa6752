"""On-disk layout of a trained meta-state.

A checkpoint directory holds::

    manifest.json      configs, counters, tensor index per namespace
    learner.bin        current learner weights
    encoder.bin        current encoder weights (timl mode only)
    best_learner.bin   best-validation learner weights
    best_encoder.bin
    optimizer.bin      Adam first and second moments
    forgetfulness.csv  per-epoch task metrics and forget decisions

Binary files are raw little-endian float64 in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .adgraph import ParamSet
from .encoder import EncoderSpec
from .forget import MemorizationTracker
from .metatrain import Adam, Checkpoint, MetaConfig, MetaState
from .models import ModelSpec

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def _write_arrays(path: Path, arrays: dict[str, np.ndarray]) -> list[dict]:
    index = []
    offset = 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=_DTYPE)
            fh.write(arr.tobytes())
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    return index


def _read_arrays(path: Path, index: list[dict]) -> dict[str, np.ndarray]:
    flat = np.fromfile(path, dtype=_DTYPE)
    out = {}
    for entry in index:
        size = int(np.prod(entry["shape"], dtype=int))
        chunk = flat[entry["offset"] : entry["offset"] + size]
        if chunk.size != size:
            raise ValueError(f"{path.name} is truncated at {entry['name']}")
        out[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float64)
    return out


def _adam_arrays(opt: Adam, prefix: str) -> dict[str, np.ndarray]:
    out = {f"{prefix}.m.{k}": v for k, v in opt.m.items()}
    out.update({f"{prefix}.v.{k}": v for k, v in opt.v.items()})
    return out


def _restore_adam(meta: dict, arrays: dict[str, np.ndarray], prefix: str) -> Adam:
    opt = Adam(beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"], t=meta["t"])
    for key, arr in arrays.items():
        head, kind, name = key.split(".", 2)
        if head == prefix:
            getattr(opt, kind)[name] = arr
    return opt


def save_state(state: MetaState, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {"learner": _write_arrays(d / "learner.bin", state.learner.arrays())}
    if state.encoder is not None:
        tensors["encoder"] = _write_arrays(d / "encoder.bin", state.encoder.arrays())
    best = None
    if state.best is not None:
        tensors["best_learner"] = _write_arrays(d / "best_learner.bin", state.best.learner)
        if state.best.encoder is not None:
            tensors["best_encoder"] = _write_arrays(d / "best_encoder.bin", state.best.encoder)
        best = {"epoch": state.best.epoch, "metric": state.best.metric}
    opt_arrays = _adam_arrays(state.learner_opt, "learner")
    opt_arrays.update(_adam_arrays(state.encoder_opt, "encoder"))
    tensors["optimizer"] = _write_arrays(d / "optimizer.bin", opt_arrays)
    state.tracker.write_log(d / "forgetfulness.csv")
    manifest = {
        "version": FORMAT_VERSION,
        "config": state.config.to_dict(),
        "model_spec": state.model_spec.to_dict(),
        "encoder_spec": None if state.encoder_spec is None else state.encoder_spec.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "lr": state.lr,
        "best": best,
        "validation_ids": state.validation_ids,
        "optimizers": {
            "learner": state.learner_opt.state_dict(),
            "encoder": state.encoder_opt.state_dict(),
        },
        "tracker": state.tracker.state_dict(),
        "tensors": tensors,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_state(directory: str | Path) -> MetaState:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    tensors = manifest["tensors"]

    def load(ns):
        return _read_arrays(d / f"{ns}.bin", tensors[ns]) if ns in tensors else None

    config = MetaConfig(**manifest["config"])
    enc_spec = manifest["encoder_spec"]
    encoder_arrays = load("encoder")
    opt_arrays = load("optimizer") or {}
    best = None
    if manifest["best"] is not None:
        best = Checkpoint(
            epoch=manifest["best"]["epoch"],
            metric=manifest["best"]["metric"],
            learner=load("best_learner"),
            encoder=load("best_encoder"),
        )
    encoder = None
    if encoder_arrays is not None:
        encoder = ParamSet.from_arrays(encoder_arrays, requires_grad=config.train_encoder)
    return MetaState(
        config=config,
        model_spec=ModelSpec.from_dict(manifest["model_spec"]),
        encoder_spec=None if enc_spec is None else EncoderSpec.from_dict(enc_spec),
        learner=ParamSet.from_arrays(load("learner")),
        encoder=encoder,
        learner_opt=_restore_adam(manifest["optimizers"]["learner"], opt_arrays, "learner"),
        encoder_opt=_restore_adam(manifest["optimizers"]["encoder"], opt_arrays, "encoder"),
        epoch=manifest["epoch"],
        step=manifest["step"],
        lr=manifest["lr"],
        tracker=MemorizationTracker.from_state_dict(manifest["tracker"]),
        best=best,
        validation_ids=list(manifest["validation_ids"]),
    )
