"""Experiment orchestration: config -> bundles -> meta-training -> held-out eval -> RunRecord.

Configs are flat YAML mappings. Every key and its default lives in
``DEFAULTS`` (run keys) plus the fields of ``MetaConfig`` and ``SynthSpec``.
The results directory layout is described in ``docs/results_schema.md``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from collections.abc import Mapping
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import save_state
from .geotasks import Task, TaskBundle, load_bundle
from .metatrain import BatchSpec, MetaConfig, evaluate, finetune, meta_train, zero_shot_eval
from .metrics import mean_se
from .models import ModelSpec
from .synthbench import SynthSpec, generate

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"

DEFAULTS: dict = {
    "name": "experiment",
    "out_dir": "results",
    "repeats": 1,
    "workers": 1,
    # data: a synthetic family, or bundle directories on disk
    "bundle": None,
    "heldout_bundle": None,
    "heldout_tasks": 40,
    "data_seed": None,
    # learner
    "model_kind": "mlp",
    "hidden_dims": [40, 40],
    "hidden_size": 64,
    "timesteps": 1,
    # held-out evaluation
    "eval_shots": 10,
    "finetune_pos": 10,
    "finetune_neg": 10,
    "finetune_batch": 10,
    "zero_shot": False,
    "sweep_sizes": None,
    "save_checkpoints": False,
}

# SynthSpec.seed is driven by the run seed (or data_seed), never set directly
_SYNTH_KEYS = {f.name for f in fields(SynthSpec)} - {"seed"}
_META_KEYS = {f.name for f in fields(MetaConfig)}
KNOWN_KEYS = set(DEFAULTS) | _SYNTH_KEYS | _META_KEYS


def load_config(path_or_mapping) -> dict:
    """Read a flat config and fill defaults. Unknown keys are an error."""
    if isinstance(path_or_mapping, Mapping):
        raw = dict(path_or_mapping)
    else:
        raw = yaml.safe_load(Path(path_or_mapping).read_text()) or {}
    if not isinstance(raw, dict):
        raise ValueError("experiment config must be a flat key-value mapping")
    unknown = sorted(set(raw) - KNOWN_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"config must be flat; nested values under {nested}")
    cfg = dict(DEFAULTS)
    cfg.update(raw)
    if cfg["repeats"] < 1:
        raise ValueError("repeats must be at least 1")
    # build once so bad values fail before any work starts
    MetaConfig.from_flat(cfg)
    if cfg["bundle"] is None:
        SynthSpec.from_flat(cfg)
    elif cfg["heldout_bundle"] is None:
        raise ValueError("a bundle on disk needs a heldout_bundle")
    return cfg


# ---------------------------------------------------------------------------
# record types


@dataclass
class RunRecord:
    name: str
    config: dict
    seeds: list[int]
    per_task: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    training: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    timestamp: str = ""
    artifact_hash: str = ""
    results_dir: str = ""
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def comparable(self) -> dict:
        """Everything except timestamps and wall-clock time."""
        d = self.to_dict()
        for key in ("wall_clock", "timestamp", "artifact_hash", "results_dir"):
            d.pop(key)
        d["training"] = [{k: v for k, v in t.items() if k != "seconds"} for t in d["training"]]
        return d


def artifact_hash(payload: Mapping) -> str:
    """Git blob id of the canonical JSON encoding."""
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def _metric_names(rows: list[dict]) -> list[str]:
    names = []
    for row in rows:
        for k in row.get("metrics", {}):
            if k not in names:
                names.append(k)
    return names


def aggregate(rows: list[dict], seeds: list[int]) -> dict:
    """Per metric: task mean within each repeat, then mean and SE over repeats."""
    out = {}
    for metric in _metric_names(rows):
        per_repeat = []
        for seed in seeds:
            vals = [r["metrics"][metric] for r in rows if r["seed"] == seed and metric in r["metrics"]]
            if vals:
                per_repeat.append(float(np.mean(vals)))
        if per_repeat:
            mean, se = mean_se(per_repeat)
            out[metric] = {"mean": mean, "se": se, "per_repeat": per_repeat}
    return out


# ---------------------------------------------------------------------------
# stages


def _bundles(cfg: dict, seed: int) -> tuple[TaskBundle, TaskBundle]:
    if cfg["bundle"] is not None:
        return load_bundle(cfg["bundle"]), load_bundle(cfg["heldout_bundle"])
    data_seed = seed if cfg["data_seed"] is None else cfg["data_seed"]
    n_train = cfg.get("num_tasks", SynthSpec.num_tasks)
    spec_args = {k: cfg[k] for k in _SYNTH_KEYS if k in cfg}
    spec_args["num_tasks"] = n_train + cfg["heldout_tasks"]
    full = generate(SynthSpec(seed=data_seed, **spec_args))
    train = TaskBundle(full.name, full.tasks[:n_train], full.meta)
    held = TaskBundle(full.name + "-heldout", full.tasks[n_train:], full.meta)
    return train, held


def model_spec_for(cfg: dict, bundle: TaskBundle) -> ModelSpec:
    task = bundle.tasks[0]
    output = "binary-logit" if task.kind == "classification" else "scalar-regression"
    if cfg["model_kind"] == "lstm":
        channels = task.x.shape[-1] if task.x.ndim == 3 else task.x.shape[1] // cfg["timesteps"]
        return ModelSpec("lstm", channels, hidden_size=cfg["hidden_size"], timesteps=cfg["timesteps"], output=output)
    return ModelSpec("mlp", task.x.shape[1], tuple(cfg["hidden_dims"]), output=output)


def heldout_rows(task: Task, shots: int, pool: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(fine-tune rows, evaluation rows) for one held-out task.

    Classification takes the first ``shots`` rows of each class; regression
    the first ``shots`` rows. Evaluation rows start after ``pool`` (default
    ``shots``) so a sweep over sizes shares one evaluation set.
    """
    pool = shots if pool is None else pool
    if task.kind == "classification":
        pos, neg = task.positives, task.negatives
        if len(pos) <= pool or len(neg) <= pool:
            raise ValueError(f"task {task.id} has too few rows of one class for {pool} shots plus evaluation")
        return np.r_[pos[:shots], neg[:shots]], np.r_[pos[pool:], neg[pool:]]
    if len(task) <= pool:
        raise ValueError(f"task {task.id} has {len(task)} rows; {pool} are reserved for fine-tuning")
    return np.arange(shots), np.arange(pool, len(task))


def _eval_task(state, cfg: dict, task: Task, index: int, seed: int, shots: int, pool: int) -> dict:
    ft_rows, eval_rows = heldout_rows(task, shots, pool)
    batch = BatchSpec(cfg["finetune_pos"], cfg["finetune_neg"], cfg["finetune_batch"])
    params = finetune(
        state,
        task.subset(ft_rows),
        state.config.finetune_steps,
        batch,
        lr=state.config.finetune_lr,
        seed=int(np.random.SeedSequence([seed, 11, index]).generate_state(1)[0]),
    )
    metrics = evaluate(state, task.subset(eval_rows), params)
    if cfg["zero_shot"]:
        zs = zero_shot_eval(state, task.subset(eval_rows))
        metrics.update({f"zs_{k}": v for k, v in zs.items() if k != "zero_shot"})
    return metrics


def run_repeat(cfg: dict, seed: int, out: Path | None = None) -> dict:
    """One seed: train and evaluate. Stage failures are caught and reported."""
    result = {"seed": seed, "per_task": [], "training": [], "errors": [], "sweep": {}}
    stage = "data"
    try:
        train, held = _bundles(cfg, seed)
        stage = "meta_train"
        meta_cfg = MetaConfig.from_flat({**cfg, "seed": seed})
        spec = model_spec_for(cfg, train)
        t0 = time.perf_counter()
        state = meta_train(meta_cfg, spec, train)
        result["training"] = [{"seed": seed, **h} for h in state.history]
        if result["training"]:
            result["training"][-1]["seconds"] = time.perf_counter() - t0
        result["best_epoch"] = None if state.best is None else state.best.epoch
        result["forgotten"] = list(state.tracker.forgotten)
        result["events"] = list(state.events)
        if out is not None:
            state.tracker.write_log(out / f"forgetfulness_seed{seed}.csv")
            if cfg["save_checkpoints"]:
                stage = "checkpoint"
                save_state(state, out / f"checkpoint_seed{seed}")
        stage = "evaluate"
        shots = cfg["eval_shots"]
        sizes = cfg["sweep_sizes"]
        for i, task in enumerate(held.tasks):
            tags = dict(task.tags)
            if sizes:
                pool = max(sizes) // 2 if task.kind == "classification" else max(sizes)
                for size in sizes:
                    k = size // 2 if task.kind == "classification" else size
                    metrics = _eval_task(state, cfg, task, i, seed, k, pool)
                    result["per_task"].append(
                        {"seed": seed, "task_id": task.id, "subset_size": size, "tags": tags, "metrics": metrics}
                    )
            else:
                metrics = _eval_task(state, cfg, task, i, seed, shots, shots)
                result["per_task"].append(
                    {"seed": seed, "task_id": task.id, "subset_size": None, "tags": tags, "metrics": metrics}
                )
    except Exception as exc:  # noqa: BLE001 - recorded, partial results kept
        log.error("seed %d failed in %s: %s", seed, stage, exc)
        result["errors"].append(
            {"seed": seed, "stage": stage, "error": f"{type(exc).__name__}: {exc}",
             "trace": traceback.format_exc(limit=3)}
        )
    return result


def _results_dir(cfg: dict) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    base = Path(cfg["out_dir"]) / f"{cfg['name']}-{stamp}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def build_record(cfg: dict, results: list[dict]) -> RunRecord:
    seeds = [r["seed"] for r in results]
    rows = [row for r in results for row in r["per_task"]]
    record = RunRecord(name=cfg["name"], config=_jsonable(cfg), seeds=seeds)
    record.per_task = rows
    record.training = [t for r in results for t in r["training"]]
    record.errors = [e for r in results for e in r["errors"]]
    sizes = sorted({row["subset_size"] for row in rows if row["subset_size"] is not None})
    if sizes:
        record.sweep = {str(s): aggregate([r for r in rows if r["subset_size"] == s], seeds) for s in sizes}
    else:
        record.aggregate = aggregate(rows, seeds)
        groups = sorted({row["tags"].get("difficulty") for row in rows} - {None})
        record.groups = {
            g: aggregate([r for r in rows if r["tags"].get("difficulty") == g], seeds) for g in groups
        }
    return record


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_outputs(record: RunRecord, out: Path) -> None:
    (out / "run_record.json").write_text(json.dumps(_jsonable(record.to_dict()), indent=2, sort_keys=True))
    metric_cols = _metric_names(record.per_task)
    tag_cols = sorted({k for row in record.per_task for k in row["tags"]})
    with open(out / "per_task.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "task_id", "subset_size", *tag_cols, *metric_cols])
        for row in record.per_task:
            size = "" if row["subset_size"] is None else row["subset_size"]
            w.writerow(
                [row["seed"], row["task_id"], size]
                + [row["tags"].get(k, "") for k in tag_cols]
                + [repr(row["metrics"][m]) if m in row["metrics"] else "" for m in metric_cols]
            )
    cols = ["seed", "epoch", "lr", "train_loss", "val_metric", "active_tasks", "forgotten"]
    with open(out / "learning_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for t in record.training:
            w.writerow([repr(t[c]) if isinstance(t[c], float) else t[c] for c in cols])


def run_experiment(config_path, out_dir: str | Path | None = None) -> RunRecord:
    """Run every repeat of a config and write the results directory.

    Returns the RunRecord; its ``artifact_hash`` covers everything but
    timestamps and wall-clock time, so identical configs hash identically.
    """
    cfg = load_config(config_path)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    t0 = time.perf_counter()
    out = _results_dir(cfg)
    seeds = [int(cfg.get("seed", 0)) + r for r in range(cfg["repeats"])]
    if cfg["workers"] > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            results = list(pool.map(run_repeat, [cfg] * len(seeds), seeds, [out] * len(seeds)))
    else:
        results = [run_repeat(cfg, s, out) for s in seeds]
    record = build_record(cfg, results)
    record.wall_clock = time.perf_counter() - t0
    record.timestamp = datetime.now(timezone.utc).isoformat()
    record.artifact_hash = artifact_hash(_jsonable(record.comparable()))
    record.results_dir = str(out)
    write_outputs(record, out)
    return record


def load_record(path: str | Path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "run_record.json"
    return json.loads(p.read_text())


def recompute_aggregate(per_task_csv: str | Path) -> dict:
    """Rebuild the aggregate block from a persisted per-task CSV."""
    with open(per_task_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    fixed = {"seed", "task_id", "subset_size"}
    metric_cols = [c for c in rows[0] if c not in fixed and c.split("_")[-1] in {"auc", "f1", "rmse", "mse"}]
    parsed, seeds = [], []
    for r in rows:
        seed = int(r["seed"])
        if seed not in seeds:
            seeds.append(seed)
        parsed.append({"seed": seed, "metrics": {m: float(r[m]) for m in metric_cols if r[m] != ""}})
    return aggregate(parsed, seeds)
