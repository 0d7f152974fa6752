"""Synthetic task distributions for desk-scale experiments.

Informative and uninformative metadata arms of a family share identical
(x, y) data; only the task-information vectors differ.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .geotasks import Task, TaskBundle, latlon_to_cartesian

FAMILIES = ("sine_regression", "sphere_classification", "imbalanced_mix")

AMPLITUDE_RANGE = (0.1, 5.0)
PHASE_RANGE = (0.0, np.pi)
X_RANGE = (-5.0, 5.0)


@dataclass(frozen=True)
class SynthSpec:
    family: str = "sine_regression"
    num_tasks: int = 100
    points_per_task: int = 20
    metadata_informative: bool = True
    noise_sd: float = 0.01
    seed: int = 0
    feature_dim: int = 4
    margin: float = 0.1
    label_noise: float = 0.0
    easy_fraction: float = 0.9
    easy_margin: float = 1.0
    easy_label_noise: float = 0.0
    hard_margin: float = 0.05
    hard_label_noise: float = 0.05
    id_prefix: str = "task"
    rule_seed: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.num_tasks < 1 or self.points_per_task < 2:
            raise ValueError("need at least one task and two points per task")
        if not 0.0 <= self.easy_fraction <= 1.0:
            raise ValueError("easy_fraction must lie in [0, 1]")

    @classmethod
    def from_flat(cls, values) -> SynthSpec:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def generate(spec: SynthSpec) -> TaskBundle:
    return {
        "sine_regression": gen_sine_tasks,
        "sphere_classification": gen_sphere_classification,
        "imbalanced_mix": gen_imbalanced_mix,
    }[spec.family](spec)


def _bundle(spec: SynthSpec, tasks: list[Task], spatial: bool) -> TaskBundle:
    meta = {"synth": spec.to_dict(), "spatial_info": spatial and spec.metadata_informative}
    return TaskBundle(f"synth-{spec.family}-{spec.seed}", tasks, meta)


def _task_id(spec: SynthSpec, i: int) -> str:
    return f"{spec.id_prefix}{i:04d}"


def sine_target(x, amplitude: float, phase: float) -> np.ndarray:
    return amplitude * np.sin(np.asarray(x) + phase)


def gen_sine_tasks(spec: SynthSpec) -> TaskBundle:
    """Tasks ``y = A sin(x + phi) + noise`` with info ``[A, sin phi, cos phi]``."""
    rng = np.random.default_rng(spec.seed)
    tasks = []
    for i in range(spec.num_tasks):
        amp = rng.uniform(*AMPLITUDE_RANGE)
        phase = rng.uniform(*PHASE_RANGE)
        x = rng.uniform(*X_RANGE, size=(spec.points_per_task, 1))
        y = sine_target(x[:, 0], amp, phase) + rng.normal(0.0, spec.noise_sd, spec.points_per_task)
        info = np.array([amp, np.sin(phase), np.cos(phase)]) if spec.metadata_informative else np.zeros(3)
        tasks.append(
            Task(
                id=_task_id(spec, i),
                kind="regression",
                info=info,
                x=x,
                y=y,
                tags={"amplitude": repr(amp), "phase": repr(phase)},
            )
        )
    return _bundle(spec, tasks, spatial=False)


def _random_center(rng: np.random.Generator) -> tuple[float, float]:
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    lat = float(np.degrees(np.arcsin(np.clip(v[2], -1.0, 1.0))))
    lon = float(np.degrees(np.arctan2(v[1], v[0])))
    return lat, lon


def _rule_seed(spec: SynthSpec) -> int:
    # held-out bundles share the rules of their training bundle via rule_seed
    return spec.seed if spec.rule_seed is None else spec.rule_seed


def rule_matrix(spec: SynthSpec) -> np.ndarray:
    """Fixed linear map from a task's unit-sphere center to its rule weights."""
    rng = np.random.default_rng([_rule_seed(spec), 7919])
    return rng.normal(size=(spec.feature_dim, 3))


def shared_rule(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng([_rule_seed(spec), 104729])
    w = rng.normal(size=spec.feature_dim)
    return w / np.linalg.norm(w)


def center_rule(spec: SynthSpec, center_xyz: np.ndarray) -> np.ndarray:
    """Unit weight vector of a task's decision rule; smooth in the center."""
    w = rule_matrix(spec) @ np.asarray(center_xyz, dtype=float)
    return w / np.linalg.norm(w)


def _balanced_points(
    rng: np.random.Generator, w: np.ndarray, n: int, margin: float, label_noise: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian points with ``|w.x| >= margin``, half on each side of the rule.

    Returns (x, observed labels, rule labels); observed labels flip with
    probability ``label_noise``.
    """
    n_pos = n // 2
    need = {1: n_pos, 0: n - n_pos}
    xs: list[np.ndarray] = []
    ys: list[int] = []
    while need[0] or need[1]:
        cand = rng.normal(size=(4 * n, len(w)))
        s = cand @ w
        for row, val in zip(cand, s):
            if abs(val) < margin:
                continue
            label = int(val > 0)
            if need[label]:
                xs.append(row)
                ys.append(label)
                need[label] -= 1
    x = np.array(xs)
    rule = np.array(ys, dtype=float)
    flip = rng.random(n) < label_noise
    observed = np.where(flip, 1.0 - rule, rule)
    # keep both classes observable after flipping
    if observed.min() == observed.max():
        observed = rule.copy()
    return x, observed, rule


def gen_sphere_classification(spec: SynthSpec) -> TaskBundle:
    """Task centers on the sphere; the decision rule varies smoothly with the center."""
    rng = np.random.default_rng(spec.seed)
    tasks = []
    for i in range(spec.num_tasks):
        lat, lon = _random_center(rng)
        xyz = latlon_to_cartesian(lat, lon)
        w = center_rule(spec, xyz)
        x, y, _ = _balanced_points(rng, w, spec.points_per_task, spec.margin, spec.label_noise)
        info = xyz if spec.metadata_informative else np.zeros(3)
        tasks.append(
            Task(
                id=_task_id(spec, i),
                kind="classification",
                info=info,
                x=x,
                y=y,
                bbox=_box(lat, lon),
                tags={"lat": repr(lat), "lon": repr(lon)},
            )
        )
    return _bundle(spec, tasks, spatial=True)


def _box(lat: float, lon: float, half: float = 1.0) -> tuple[float, float, float, float]:
    return (max(lat - half, -90.0), min(lat + half, 90.0), max(lon - half, -180.0), min(lon + half, 180.0))


def gen_imbalanced_mix(spec: SynthSpec) -> TaskBundle:
    """Mostly easy tasks sharing one large-margin rule, plus task-specific hard ones.

    Easy tasks may carry label noise: they still clear the forgetting
    threshold but keep contributing gradient.

    Info is the center's Cartesian triple followed by a two-entry category
    block (easy, hard). Task ids are tagged with ``difficulty``.
    """
    rng = np.random.default_rng(spec.seed)
    n_easy = int(round(spec.easy_fraction * spec.num_tasks))
    w_easy = shared_rule(spec)
    difficulty = ["easy"] * n_easy + ["hard"] * (spec.num_tasks - n_easy)
    order = rng.permutation(spec.num_tasks)
    tasks = []
    for i in range(spec.num_tasks):
        kind = difficulty[order[i]]
        lat, lon = _random_center(rng)
        xyz = latlon_to_cartesian(lat, lon)
        if kind == "easy":
            w, margin, noise = w_easy, spec.easy_margin, spec.easy_label_noise
        else:
            w, margin, noise = center_rule(spec, xyz), spec.hard_margin, spec.hard_label_noise
        x, y, _ = _balanced_points(rng, w, spec.points_per_task, margin, noise)
        category = np.array([1.0, 0.0]) if kind == "easy" else np.array([0.0, 1.0])
        info = np.concatenate([xyz, category]) if spec.metadata_informative else np.zeros(5)
        tasks.append(
            Task(
                id=_task_id(spec, i),
                kind="classification",
                info=info,
                x=x,
                y=y,
                bbox=_box(lat, lon),
                tags={"difficulty": kind, "lat": repr(lat), "lon": repr(lon)},
            )
        )
    return _bundle(spec, tasks, spatial=True)


def task_rule(spec: SynthSpec, task: Task) -> np.ndarray:
    """The generating weight vector of a sphere or mix task."""
    if task.tags.get("difficulty") == "easy":
        return shared_rule(spec)
    lat, lon = float(task.tags["lat"]), float(task.tags["lon"])
    return center_rule(spec, latlon_to_cartesian(lat, lon))


def rule_accuracy(spec: SynthSpec, task: Task) -> float:
    """Accuracy of the generating rule on the task's observed labels."""
    pred = (task.x @ task_rule(spec, task) > 0).astype(float)
    return float(np.mean(pred == task.y))
