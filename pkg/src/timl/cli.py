"""Command-line entry point: ``timl <command>``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import adgraph as ad
from .checkpoint import load_state, save_state
from .geotasks import load_bundle, save_bundle, validate_bundle
from .gpbaseline import GPConfig, gp_fit_predict
from .harness import heldout_rows, load_config, load_record, model_spec_for, run_experiment
from .metatrain import (
    BatchSpec,
    MetaConfig,
    evaluate,
    finetune,
    inner_adapt,
    meta_train,
    predict,
    zero_shot_eval,
)
from .models import ModelSpec, forward, init_params, loss_fn
from .synthbench import SynthSpec, generate


def _kv(pairs: list[str]) -> dict:
    """``key=value`` pairs, values parsed as YAML scalars."""
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"expected key=value, got {item!r}")
        out[key] = yaml.safe_load(value)
    return out


def cmd_synth_gen(args) -> int:
    spec = SynthSpec.from_flat({"family": args.family, "seed": args.seed, **_kv(args.set)})
    bundle = generate(spec)
    save_bundle(bundle, args.out)
    print(f"wrote {len(bundle)} {spec.family} tasks to {args.out}")
    return 0


def cmd_tasks_validate(args) -> int:
    problems = validate_bundle(args.bundle)
    for p in problems:
        print(p)
    print("ok" if not problems else f"{len(problems)} problem(s)")
    return 1 if problems else 0


def cmd_train(args) -> int:
    raw = yaml.safe_load(Path(args.config).read_text()) or {} if args.config else {}
    cfg = load_config({**raw, "bundle": args.bundle, "heldout_bundle": args.bundle})
    bundle = load_bundle(args.bundle)
    state = meta_train(MetaConfig.from_flat(cfg), model_spec_for(cfg, bundle), bundle)
    save_state(state, args.out)
    best = "none" if state.best is None else f"epoch {state.best.epoch} ({state.best.metric:.4f})"
    print(f"trained {len(state.history)} epochs; best checkpoint {best}; saved to {args.out}")
    return 0


def _write_metrics(rows: list[dict], path: str | None) -> None:
    cols = sorted({k for r in rows for k in r} - {"task_id"})
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", *cols])
        for r in rows:
            w.writerow([r["task_id"], *(r.get(c, "") for c in cols)])
    finally:
        if path:
            fh.close()


def cmd_finetune(args) -> int:
    state = load_state(args.checkpoint)
    bundle = load_bundle(args.bundle)
    batch = BatchSpec(args.pos, args.neg, args.batch)
    steps = state.config.finetune_steps if args.steps is None else args.steps
    rows = []
    for task in bundle.tasks:
        ft, ev = heldout_rows(task, args.shots)
        params = finetune(state, task.subset(ft), steps, batch, lr=args.lr, seed=args.seed)
        rows.append({"task_id": task.id, **evaluate(state, task.subset(ev), params)})
    _write_metrics(rows, args.out)
    return 0


def cmd_eval(args) -> int:
    state = load_state(args.checkpoint)
    bundle = load_bundle(args.bundle)
    if args.dump_hidden:
        _dump_hidden(state, bundle, args.dump_hidden)
    rows = []
    for task in bundle.tasks:
        result = zero_shot_eval(state, task) if args.zero_shot else evaluate(state, task)
        rows.append({"task_id": task.id, **result})
    _write_metrics(rows, args.out)
    return 0


def _dump_hidden(state, bundle, path: str) -> None:
    """Final hidden features per row, with location and year when the bundle has them."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = None
        for task in bundle.tasks:
            _, hidden = predict(state, task, return_hidden=True)
            if header is None:
                header = ["task_id", "row", "lat", "lon", "year", "label"] + [f"h{i}" for i in range(hidden.shape[1])]
                w.writerow(header)
            lat, lon = task.centroid or (np.nan, np.nan)
            meta = task.row_meta
            for i in range(len(task)):
                w.writerow(
                    [task.id, i, repr(float(meta["lat"][i])) if "lat" in meta else repr(lat),
                     repr(float(meta["lon"][i])) if "lon" in meta else repr(lon),
                     repr(float(meta["year"][i])) if "year" in meta else "0.0", repr(float(task.y[i]))]
                    + [repr(float(v)) for v in hidden[i]]
                )


def _read_hidden(path: str):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    hcols = [c for c in rows[0] if c.startswith("h") and c[1:].isdigit()]
    g_l = np.array([[float(r["lat"]), float(r["lon"])] for r in rows])
    g_y = np.array([float(r["year"]) for r in rows])
    h = np.array([[float(r[c]) for c in hcols] for r in rows])
    y = np.array([float(r["label"]) for r in rows])
    if not np.isfinite(g_l).all():
        raise SystemExit(f"{path}: rows without lat/lon; the GP baseline needs locations")
    return rows, g_l, g_y, h, y


def cmd_gp(args) -> int:
    config = GPConfig.from_flat(_kv(args.set))
    _, g_l, g_y, h, y = _read_hidden(args.train)
    test_rows, tg_l, tg_y, th, ty = _read_hidden(args.test)
    preds = gp_fit_predict((g_l, g_y, h, y), (tg_l, tg_y, th), config)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "row", "label", "prediction"])
        for r, p in zip(test_rows, preds):
            w.writerow([r["task_id"], r["row"], r["label"], repr(float(p))])
    rmse = float(np.sqrt(np.mean((preds - ty) ** 2)))
    print(f"wrote {len(preds)} predictions to {args.out}; rmse {rmse:.4f}")
    return 0


GRADCHECK_TOL = {"meta_gradient": 1e-4}


def gradcheck_report() -> list[tuple[str, float, float]]:
    """(case, max relative error, tolerance) for each primitive, an MLP with BCE
    loss, and a one-inner-step meta-gradient."""
    rng = np.random.default_rng(0)
    a = rng.uniform(-3, 3, (3, 4))
    y = (rng.random(3) > 0.5).astype(float)
    w = rng.normal(size=(3, 4))

    def norm(p):
        return ad.sum(ad.group_norm(p["a"], 2, 1e-5, p["scale"], p["shift"]) * w)

    cases = {
        "matmul": (lambda p: ad.sum(p["a"] @ p["b"]), {"a": a, "b": rng.uniform(-3, 3, (4, 2))}),
        "add": (lambda p: ad.sum((p["a"] + p["c"]) * p["a"]), {"a": a, "c": rng.normal(size=4)}),
        "subtract": (lambda p: ad.sum((p["a"] - p["c"]) * p["a"]), {"a": a, "c": rng.normal(size=4)}),
        "multiply": (lambda p: ad.sum(p["a"] * p["a"] * p["c"]), {"a": a, "c": rng.normal(size=4)}),
        "sigmoid": (lambda p: ad.sum(ad.sigmoid(p["a"])), {"a": a}),
        "tanh": (lambda p: ad.sum(ad.tanh(p["a"])), {"a": a}),
        "gelu": (lambda p: ad.sum(ad.gelu(p["a"])), {"a": a}),
        "concatenate": (lambda p: ad.sum(ad.concatenate([p["a"], p["a"] * p["a"]]) * 0.5), {"a": a}),
        "mean": (lambda p: ad.mean(p["a"] * p["a"], axis=0)[1], {"a": a}),
        "group_norm": (norm, {"a": a, "scale": rng.normal(size=4), "shift": rng.normal(size=4)}),
        "bce_with_logits": (lambda p: ad.bce_with_logits(p["z"], y), {"z": rng.uniform(-3, 3, 3)}),
        "squared_error": (lambda p: ad.squared_error(p["z"], y), {"z": rng.uniform(-3, 3, 3)}),
    }
    spec = ModelSpec("mlp", 4, (8, 8), output="binary-logit")
    mlp = init_params(spec, 0).arrays()
    cases["mlp_bce"] = (lambda p: loss_fn(spec, forward(spec, p, a), y), mlp)

    xs, ys = rng.normal(size=(5, 4)), (rng.random(5) > 0.5).astype(float)
    xq, yq = rng.normal(size=(5, 4)), (rng.random(5) > 0.5).astype(float)

    def meta_loss(p):
        adapted = inner_adapt(spec, p, None, (xs, ys), 0.1, 1, first_order=False)
        return loss_fn(spec, forward(spec, adapted, xq), yq)

    cases["meta_gradient"] = (meta_loss, mlp)
    out = []
    for name, (f, params) in cases.items():
        err = ad.finite_diff_check(f, ad.ParamSet.from_arrays(params))
        out.append((name, err, GRADCHECK_TOL.get(name, 1e-5)))
    return out


def cmd_gradcheck(args) -> int:
    failed = 0
    for name, err, tol in gradcheck_report():
        tol = tol if args.tol is None else args.tol
        ok = err < tol
        failed += not ok
        print(f"{name:16s} max rel err {err:.2e}  {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_run(args) -> int:
    record = run_experiment(args.config, out_dir=args.out_dir)
    print(f"results in {record.results_dir} (hash {record.artifact_hash[:12]})")
    _print_record(record.to_dict())
    return 1 if record.errors else 0


def _print_record(rec: dict) -> None:
    blocks = {"all": rec["aggregate"]} if rec["aggregate"] else {}
    blocks.update(rec.get("groups", {}))
    blocks.update({f"size {k}": v for k, v in rec.get("sweep", {}).items()})
    for label, agg in blocks.items():
        cells = ", ".join(f"{m} {v['mean']:.4f} ± {v['se']:.4f}" for m, v in agg.items())
        print(f"  {rec['name']} [{label}] n={len(rec['seeds'])}: {cells}")
    for err in rec.get("errors", []):
        print(f"  error in {err['stage']} (seed {err['seed']}): {err['error']}")


def cmd_report(args) -> int:
    for path in args.runs:
        rec = load_record(path)
        if args.json:
            print(json.dumps({"name": rec["name"], "aggregate": rec["aggregate"], "groups": rec["groups"]}))
        else:
            _print_record(rec)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="timl", description="Task-informed meta-learning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="synthetic task bundles").add_subparsers(dest="synth_cmd", required=True)
    gen = synth.add_parser("gen", help="generate a bundle")
    gen.add_argument("--family", default="sine_regression")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("set", nargs="*", help="extra SynthSpec fields as key=value")
    gen.set_defaults(func=cmd_synth_gen)

    tasks = sub.add_parser("tasks", help="task bundle utilities").add_subparsers(dest="tasks_cmd", required=True)
    val = tasks.add_parser("validate", help="check a bundle directory")
    val.add_argument("bundle")
    val.set_defaults(func=cmd_tasks_validate)

    train = sub.add_parser("train", help="meta-train on a bundle and save a checkpoint")
    train.add_argument("--bundle", required=True)
    train.add_argument("--config")
    train.add_argument("--out", required=True)
    train.set_defaults(func=cmd_train)

    ft = sub.add_parser("finetune", help="fine-tune a checkpoint on each task and report metrics")
    ft.add_argument("--checkpoint", required=True)
    ft.add_argument("--bundle", required=True)
    ft.add_argument("--shots", type=int, default=10)
    ft.add_argument("--steps", type=int)
    ft.add_argument("--lr", type=float)
    ft.add_argument("--pos", type=int, default=10)
    ft.add_argument("--neg", type=int, default=10)
    ft.add_argument("--batch", type=int, default=10)
    ft.add_argument("--seed", type=int, default=0)
    ft.add_argument("--out")
    ft.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("eval", help="evaluate a checkpoint without fine-tuning")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--bundle", required=True)
    ev.add_argument("--zero-shot", action="store_true")
    ev.add_argument("--dump-hidden", metavar="CSV")
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    gp = sub.add_parser("gp", help="GP residual baseline on dumped hidden features")
    gp.add_argument("--train", required=True)
    gp.add_argument("--test", required=True)
    gp.add_argument("--out", required=True)
    gp.add_argument("set", nargs="*", help="GPConfig fields as key=value")
    gp.set_defaults(func=cmd_gp)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    gc.add_argument("--tol", type=float, help="override every per-case tolerance")
    gc.set_defaults(func=cmd_gradcheck)

    run = sub.add_parser("run", help="run an experiment config end to end")
    run.add_argument("config")
    run.add_argument("--out-dir")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="summarize results directories")
    rep.add_argument("runs", nargs="+")
    rep.add_argument("--json", action="store_true")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
