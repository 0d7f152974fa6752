"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line through the ``report`` fixture; the
lines are repeated in an "acceptance" block at the end of the session.
"""

import time
from dataclasses import replace

import mpmath
import numpy as np
import pytest
import yaml

from timl import adgraph as ad
from timl.adgraph import Tensor
from timl.cli import gradcheck_report
from timl.forget import Decision, MemorizationTracker
from timl.geotasks import FAO_CLASSES, TaskBundle, crop_task_info, latlon_to_cartesian, yield_task_info
from timl.gpbaseline import GPConfig, gp_fit_predict, kernel
from timl.harness import run_experiment
from timl.metatrain import BatchSpec, MetaConfig, finetune, meta_train, predict
from timl.metrics import auc_roc, f1_at_half, mse
from timl.models import ModelSpec
from timl.synthbench import SynthSpec, gen_sine_tasks, generate


def test_criterion_1_autodiff(report):
    t0 = time.perf_counter()
    results = gradcheck_report()
    theta = Tensor(np.array(1.0), True)
    # L = theta^2, one step at 0.1 gives 0.8 theta, so d/dtheta (0.8 theta)^2 = 1.28 at theta = 1
    inner = ad.grad(theta * theta, {"t": theta}, create_graph=True)["t"]
    adapted = theta - 0.1 * inner
    meta = ad.grad(adapted * adapted, {"t": theta})["t"].item()
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r[1] / r[2])
    ok = all(err < tol for _, err, tol in results) and abs(meta - 1.28) < 1e-10 and elapsed < 10
    report(1, ok, f"{len(results)} gradchecks, worst {worst[0]} {worst[1]:.1e} (tol {worst[2]:.0e}); "
                  f"scalar meta-gradient {meta!r}; {elapsed:.1f}s")
    assert ok


def test_criterion_2_maml_reduction(report):
    t0 = time.perf_counter()
    bundle = generate(SynthSpec(num_tasks=20, points_per_task=20, seed=3))
    spec = ModelSpec("mlp", 1, (16, 16), output="scalar-regression")
    base = dict(inner_lr=0.01, outer_lr=1e-3, outer_lr_min=1e-4, epochs=12, meta_batch_size=4, seed=3,
                forgetfulness=False)
    trajectories = {}
    for mode in ("maml", "timl"):
        steps = []
        cfg = MetaConfig(mode=mode, train_encoder=False, **base)
        meta_train(cfg, spec, bundle, on_step=lambda s: steps.append(s.learner.arrays()))
        trajectories[mode] = steps
    a, b = trajectories["maml"], trajectories["timl"]
    identical = len(a) == len(b) and all(
        all(np.array_equal(x[k], y[k]) for k in x) for x, y in zip(a, b)
    )
    moved = not all(np.array_equal(a[0][k], a[-1][k]) for k in a[0])
    elapsed = time.perf_counter() - t0
    ok = identical and moved and len(a) >= 50 and elapsed < 60
    report(2, ok, f"{len(a)} outer steps bit-identical={identical}; {elapsed:.1f}s")
    assert ok


def _sine_arm(mode, informative, seed, epochs=15):
    full = gen_sine_tasks(SynthSpec(num_tasks=240, points_per_task=30, metadata_informative=informative, seed=seed))
    train, held = TaskBundle(full.name, full.tasks[:200]), full.tasks[200:]
    spec = ModelSpec("mlp", 1, (40, 40), output="scalar-regression")
    cfg = MetaConfig(mode=mode, inner_lr=0.01, outer_lr=1e-3, outer_lr_min=1e-4, epochs=epochs, seed=seed,
                     forgetfulness=False)
    state = meta_train(cfg, spec, train)
    errs = []
    for i, task in enumerate(held):
        support, query = task.subset(range(10)), task.subset(range(10, 30))
        params = finetune(state, support, 10, BatchSpec(size=10), lr=0.01, seed=i)
        errs.append(mse(predict(state, query, params), query.y))
    return float(np.mean(errs))


@pytest.mark.slow
def test_criterion_3_task_information_helps(report):
    t0 = time.perf_counter()
    seeds = range(5)
    # plain MAML never reads the metadata and both arms share data, so one MAML run serves both
    maml = np.array([_sine_arm("maml", True, s) for s in seeds])
    informed = np.array([_sine_arm("timl", True, s) for s in seeds])
    blind = np.array([_sine_arm("timl", False, s) for s in seeds])
    wins = int(np.sum(informed < maml))
    improvement = float(np.mean((maml - informed) / maml))
    diff = blind - maml
    se = float(np.std(diff, ddof=1) / np.sqrt(len(diff)))
    indistinct = abs(float(np.mean(diff))) <= se
    elapsed = time.perf_counter() - t0
    ok = wins >= 4 and improvement >= 0.20 and indistinct and elapsed < 600
    report(3, ok, f"informative wins {wins}/5, mean improvement {improvement:.1%}; "
                  f"uninformative gap {np.mean(diff):+.4f} (SE {se:.4f}); {elapsed:.0f}s")
    assert ok


FORGET_EPOCHS = 60
FORGET_SPEC = dict(family="imbalanced_mix", num_tasks=100, points_per_task=60, feature_dim=4,
                   easy_fraction=0.9, hard_margin=0.05, hard_label_noise=0.05, easy_label_noise=0.03)


def _forget_arm(seed, forgetfulness):
    spec = SynthSpec(seed=seed, **FORGET_SPEC)
    train = generate(spec)
    hard = generate(replace(spec, seed=seed + 1000, rule_seed=seed, easy_fraction=0.0, num_tasks=20, id_prefix="eh"))
    easy = generate(replace(spec, seed=seed + 2000, rule_seed=seed, easy_fraction=1.0, num_tasks=20, id_prefix="ee"))
    cfg = MetaConfig(inner_lr=0.01, outer_lr=1e-3, outer_lr_min=1e-4, epochs=FORGET_EPOCHS, seed=seed,
                     forgetfulness=forgetfulness)
    state = meta_train(cfg, ModelSpec("mlp", 4, (32, 32), output="binary-logit"), train)

    def held_out_auc(bundle):
        aucs = []
        for i, task in enumerate(bundle.tasks):
            shots = np.r_[task.positives[:10], task.negatives[:10]]
            rest = np.r_[task.positives[10:], task.negatives[10:]]
            params = finetune(state, task.subset(shots), 10, BatchSpec(10, 10), lr=cfg.inner_lr, seed=i)
            query = task.subset(rest)
            aucs.append(auc_roc(predict(state, query, params), query.y))
        return float(np.mean(aucs))

    return held_out_auc(hard), held_out_auc(easy)


@pytest.mark.slow
def test_criterion_4_forgetfulness_helps_hard_tasks(report):
    t0 = time.perf_counter()
    hard_gain, easy_drop = [], []
    for seed in range(5):
        hard_off, easy_off = _forget_arm(seed, False)
        hard_on, easy_on = _forget_arm(seed, True)
        hard_gain.append(hard_on - hard_off)
        easy_drop.append(easy_off - easy_on)
    improved = sum(g > 0 for g in hard_gain)
    worst_easy = max(easy_drop)
    elapsed = time.perf_counter() - t0
    ok = improved >= 4 and worst_easy < 0.02 and elapsed < 600
    gains = " ".join(f"{g:+.4f}" for g in hard_gain)
    report(4, ok, f"hard AUC improved in {improved}/5 seeds ({gains}); worst easy drop {worst_easy:+.4f}; "
                  f"{elapsed:.0f}s")
    assert ok


def test_criterion_5_forget_bookkeeping(report):
    t0 = time.perf_counter()
    checks = []

    def run(tracker, values):
        return [tracker.record_and_prune("t", v, e) for e, v in enumerate(values)]

    c = run(MemorizationTracker.for_classification(), [0.95] * 20)
    checks.append(c[:19] == [Decision.KEEP] * 19 and c[19] is Decision.FORGET)
    checks.append(run(MemorizationTracker.for_classification(), [0.96] * 19 + [0.9499])[-1] is Decision.KEEP)
    tr = MemorizationTracker.for_classification()
    run(tr, [0.96] * 10 + [0.5])
    # the dip resets the streak: it takes twenty good epochs after it
    checks.append(all(tr.record_and_prune("t", 0.99) is Decision.KEEP for _ in range(19)))
    checks.append(tr.record_and_prune("t", 0.99) is Decision.FORGET)
    checks.append(run(MemorizationTracker.for_regression(), [4.0] * 20)[-1] is Decision.FORGET)
    checks.append(run(MemorizationTracker.for_regression(), [3.0] * 19 + [4.001])[-1] is Decision.KEEP)
    checks.append(run(MemorizationTracker.for_classification(), [0.1] + [0.99] * 20)[-1] is Decision.FORGET)
    elapsed = time.perf_counter() - t0
    ok = all(checks) and elapsed < 1
    report(5, ok, f"{sum(checks)}/{len(checks)} window cases; {elapsed * 1000:.1f}ms")
    assert ok


def test_criterion_6_task_info_encodings(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    checks = {}
    maize = np.zeros(13)
    maize[0] = 1.0
    maize[3 + FAO_CLASSES.index("cereals")] = 1.0
    checks["maize"] = np.allclose(crop_task_info("maize", 0, 0), maize, atol=1e-15, rtol=0)
    spread = crop_task_info("crop_vs_noncrop", 10, 20)
    checks["one_ninth"] = np.allclose(spread[3:12], 1 / 9, atol=1e-15, rtol=0) and spread[12] == 0.0
    checks["pole"] = np.allclose(latlon_to_cartesian(90, 123), [0, 0, 1], atol=1e-15, rtol=0)
    mpmath.mp.dps = 30
    la, lo = mpmath.radians(45), mpmath.radians(-120)
    ref = [float(mpmath.cos(la) * mpmath.cos(lo)), float(mpmath.cos(la) * mpmath.sin(lo)), float(mpmath.sin(la))]
    checks["45,-120"] = np.allclose(latlon_to_cartesian(45, -120), ref, atol=1e-15, rtol=0)
    lats, lons = rng.uniform(-90, 90, 500), rng.uniform(-180, 180, 500)
    checks["unit_norm"] = all(
        abs(np.linalg.norm(latlon_to_cartesian(a, b)) - 1) <= 1e-12 for a, b in zip(lats, lons)
    )
    checks["wraparound"] = all(
        np.linalg.norm(latlon_to_cartesian(a, 179.9) - latlon_to_cartesian(a, -179.9))
        < np.linalg.norm(latlon_to_cartesian(a, 0) - latlon_to_cartesian(a, 10))
        for a in rng.uniform(-89, 89, 200)
    )
    y = yield_task_info(41.9, -93.6, 3, 11)
    checks["yield"] = y.shape == (14,) and np.array_equal(y[3:], np.eye(11)[3])
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 1
    failed = [k for k, v in checks.items() if not v]
    report(6, ok, f"{sum(checks.values())}/{len(checks)} encoding checks{' failed: ' + ','.join(failed) if failed else ''}; "
                  f"{elapsed * 1000:.0f}ms")
    assert ok


def _dense_gp(train, test, cfg):
    mpmath.mp.dps = 40
    gl, gy, h, y = train
    n = len(y)

    def k(a, ay, b, by):
        d = sum((mpmath.mpf(a[i]) - mpmath.mpf(b[i])) ** 2 for i in range(2))
        dy = (mpmath.mpf(ay) - mpmath.mpf(by)) ** 2
        return cfg.sigma2 * mpmath.exp(-d / (2 * mpmath.mpf(cfg.r_l)) - dy / (2 * mpmath.mpf(cfg.r_y)))

    K = mpmath.matrix(n, n)
    for i in range(n):
        for j in range(n):
            K[i, j] = k(gl[i], gy[i], gl[j], gy[j]) + (cfg.noise if i == j else 0)
    Ki = K**-1
    H, Y = mpmath.matrix(h.tolist()), mpmath.matrix(y.tolist())
    beta = (H.T * Ki * H) ** -1 * (H.T * Ki * Y)
    alpha = Ki * (Y - H * beta)
    tl, ty, th = test
    return np.array([
        float(sum(mpmath.mpf(th[a, c]) * beta[c] for c in range(h.shape[1]))
              + sum(k(tl[a], ty[a], gl[i], gy[i]) * alpha[i] for i in range(n)))
        for a in range(len(ty))
    ])


def test_criterion_7_gp_baseline(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    cfg = GPConfig()
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(5, 31))

        def pts(m):
            return (rng.uniform(-2, 2, (m, 2)), rng.integers(2010, 2016, m).astype(float),
                    np.c_[np.ones(m), rng.normal(size=(m, 2))])

        gl, gy, h = pts(n)
        train, test = (gl, gy, h, rng.normal(size=n)), pts(4)
        worst = max(worst, float(np.max(np.abs(gp_fit_predict(train, test, cfg) - _dense_gp(train, test, cfg)))))
    limit = kernel([0.3, -0.2], 2014, [0.3, -0.2], 2014, cfg) == cfg.sigma2 + cfg.noise
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and limit and elapsed < 5
    report(7, ok, f"20 instances, max |diff| {worst:.1e}; zero-distance limit exact={limit}; {elapsed:.1f}s")
    assert ok


def test_criterion_8_metric_oracles(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        labels = np.r_[0, 1, rng.integers(0, 2, n - 2)]
        scores = rng.integers(0, 8, n) / 8.0  # coarse grid forces ties
        pos, neg = scores[labels == 1], scores[labels == 0]
        diff = pos[:, None] - neg[None, :]
        brute = (np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size
        worst = max(worst, abs(auc_roc(scores, labels) - brute))
    zero = f1_at_half([0.1, 0.2, 0.4], [1, 1, 0]) == 0.0
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and zero and elapsed < 5
    report(8, ok, f"1000 AUC instances, max |diff| {worst:.1e}; f1 zero convention={zero}; {elapsed:.1f}s")
    assert ok


def test_criterion_9_run_determinism(report, tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(yaml.safe_dump({
        "name": "determinism", "family": "imbalanced_mix", "num_tasks": 20, "heldout_tasks": 6,
        "points_per_task": 40, "hidden_dims": [16, 16], "epochs": 5, "meta_batch_size": 4, "inner_lr": 0.01,
        "outer_lr": 1e-3, "outer_lr_min": 1e-4, "finetune_steps": 5, "eval_shots": 5, "finetune_pos": 5,
        "finetune_neg": 5, "finetune_batch": 5, "repeats": 2,
    }))
    t0 = time.perf_counter()
    first = run_experiment(cfg, tmp_path / "out")
    second = run_experiment(cfg, tmp_path / "out")
    total = time.perf_counter() - t0
    same = first.comparable() == second.comparable() and first.artifact_hash == second.artifact_hash
    ok = same and not first.errors
    report(9, ok, f"identical records={same} (hash {first.artifact_hash[:12]}); "
                  f"two runs {total:.1f}s vs {first.wall_clock:.1f}s + {second.wall_clock:.1f}s")
    assert ok
