"""Spatially defined tasks, their task-information vectors, and bundle I/O.

A bundle is a directory holding ``manifest.json`` plus one CSV per task with
header ``f0..f{d-1},label`` (time series flattened timestep-major). Optional
per-row columns (``point_id``, ``lat``, ``lon``, ``year``) follow ``label``.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

BUNDLE_VERSION = 1
TASK_KINDS = ("classification", "regression")
ROW_META_COLUMNS = ("point_id", "lat", "lon", "year")


def _load_fao_table() -> dict:
    with resources.files("timl.data").joinpath("fao_classes.json").open() as fh:
        return json.load(fh)


FAO_TABLE = _load_fao_table()
FAO_CLASSES: tuple[str, ...] = tuple(FAO_TABLE["classes"])
NUM_CROP_CLASSES = len(FAO_CLASSES) - 1  # last entry is non-crop
CROP_INFO_DIM = 3 + len(FAO_CLASSES)


@dataclass
class Task:
    """One task: a labelled dataset plus metadata constant across its rows.

    ``x`` is (rows, features) or (rows, timesteps, channels). ``bbox`` is
    ``(min_lat, max_lat, min_lon, max_lon)`` or None for non-spatial tasks.
    ``row_meta`` holds optional per-row arrays keyed by ROW_META_COLUMNS.
    """

    id: str
    kind: str
    info: np.ndarray
    x: np.ndarray
    y: np.ndarray
    bbox: tuple[float, float, float, float] | None = None
    row_meta: dict[str, np.ndarray] = field(default_factory=dict)
    tags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.info = np.asarray(self.info, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if len(self.x) != len(self.y):
            raise ValueError(f"task {self.id}: {len(self.x)} feature rows but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def centroid(self) -> tuple[float, float] | None:
        if self.bbox is None:
            return None
        min_lat, max_lat, min_lon, max_lon = self.bbox
        return (0.5 * (min_lat + max_lat), 0.5 * (min_lon + max_lon))

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.y == 1)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.y == 0)

    def subset(self, rows) -> Task:
        rows = np.asarray(rows, dtype=int)
        return replace(
            self,
            x=self.x[rows],
            y=self.y[rows],
            row_meta={k: np.asarray(v)[rows] for k, v in self.row_meta.items()},
        )


@dataclass
class TaskBundle:
    name: str
    tasks: list[Task]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def by_id(self) -> dict[str, Task]:
        return {t.id: t for t in self.tasks}

    def split(self, ids: Iterable[str]) -> tuple[TaskBundle, TaskBundle]:
        """(tasks whose id is in ``ids``, the rest), order preserved."""
        ids = set(ids)
        inside = [t for t in self.tasks if t.id in ids]
        outside = [t for t in self.tasks if t.id not in ids]
        return TaskBundle(self.name, inside, dict(self.meta)), TaskBundle(self.name, outside, dict(self.meta))


# ---------------------------------------------------------------------------
# task information


def latlon_to_cartesian(lat: float, lon: float) -> np.ndarray:
    """Unit vector for a point given in degrees; nearby points map nearby."""
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise ValueError(f"coordinates out of range: lat={lat}, lon={lon}")
    la, lo = math.radians(lat), math.radians(lon)
    return np.array([math.cos(la) * math.cos(lo), math.cos(la) * math.sin(lo), math.sin(la)])


def fao_class_of(name: str) -> str:
    """FAO group for a crop name, or the group itself if ``name`` is one."""
    key = name.strip().lower().replace(" ", "_").replace("-", "_")
    if key in FAO_CLASSES:
        return key
    try:
        return FAO_TABLE["crops"][key]
    except KeyError:
        raise ValueError(f"unknown crop or FAO class {name!r}") from None


def crop_task_info(task_kind: str, lat: float, lon: float) -> np.ndarray:
    """13-dim vector: spatial triple, then the FAO category block.

    ``task_kind`` is ``"crop_vs_noncrop"`` (1/9 on every crop class) or a
    crop / FAO class name (one-hot).
    """
    category = np.zeros(len(FAO_CLASSES))
    if task_kind == "crop_vs_noncrop":
        category[:NUM_CROP_CLASSES] = 1.0 / NUM_CROP_CLASSES
    else:
        category[FAO_CLASSES.index(fao_class_of(task_kind))] = 1.0
    return np.concatenate([latlon_to_cartesian(lat, lon), category])


def yield_task_info(lat: float, lon: float, state_index: int, num_states: int) -> np.ndarray:
    """Spatial triple followed by a one-hot block naming the county's state."""
    if not 0 <= state_index < num_states:
        raise ValueError(f"state index {state_index} out of range for {num_states} states")
    onehot = np.zeros(num_states)
    onehot[state_index] = 1.0
    return np.concatenate([latlon_to_cartesian(lat, lon), onehot])


# ---------------------------------------------------------------------------
# augmentation and batching


@dataclass(frozen=True)
class CandidatePoint:
    point_id: str
    lat: float
    lon: float
    features: np.ndarray
    label: float


def in_box(lat: float, lon: float, bbox, margin: float = 0.0) -> bool:
    """Closed-box membership after expanding every side by ``margin`` degrees."""
    min_lat, max_lat, min_lon, max_lon = bbox
    return (min_lat - margin <= lat <= max_lat + margin) and (min_lon - margin <= lon <= max_lon + margin)


def bbox_augment(task: Task, candidates: Sequence[CandidatePoint], margin: float) -> Task:
    """Add candidate points that fall in the task's box grown by ``margin``."""
    if task.bbox is None:
        raise ValueError(f"task {task.id} has no bounding box")
    existing = set(map(str, task.row_meta.get("point_id", [])))
    picked: list[CandidatePoint] = []
    for cand in candidates:
        if cand.point_id in existing or not in_box(cand.lat, cand.lon, task.bbox, margin):
            continue
        existing.add(cand.point_id)
        picked.append(cand)
    if not picked:
        return task
    x = np.concatenate([task.x, np.stack([np.asarray(c.features, dtype=float) for c in picked])])
    y = np.concatenate([task.y, [c.label for c in picked]])
    n_old = len(task)
    meta = {}
    for col, values in (
        ("point_id", [c.point_id for c in picked]),
        ("lat", [c.lat for c in picked]),
        ("lon", [c.lon for c in picked]),
    ):
        old = task.row_meta.get(col)
        if old is None:
            old = np.full(n_old, "" if col == "point_id" else np.nan, dtype=object if col == "point_id" else float)
        meta[col] = np.concatenate([np.asarray(old), np.asarray(values, dtype=old.dtype)])
    for col, old in task.row_meta.items():
        if col not in meta:
            meta[col] = np.concatenate([old, np.full(len(picked), np.nan)])
    return replace(task, x=x, y=y, row_meta=meta)


def sample_balanced_batch(
    task: Task, n_pos: int, n_neg: int, seed: int | np.random.Generator
) -> np.ndarray:
    """Row indices: ``n_pos`` positives then ``n_neg`` negatives.

    A class with fewer rows than requested is sampled with replacement;
    otherwise without.
    """
    pos, neg = task.positives, task.negatives
    if len(pos) == 0 or len(neg) == 0:
        missing = "positive" if len(pos) == 0 else "negative"
        raise ValueError(f"task {task.id} has no {missing} examples")
    rng = np.random.default_rng(seed)
    return np.concatenate([_draw(rng, pos, n_pos), _draw(rng, neg, n_neg)])


def _draw(rng: np.random.Generator, pool: np.ndarray, n: int) -> np.ndarray:
    return rng.choice(pool, size=n, replace=len(pool) < n)


# ---------------------------------------------------------------------------
# bundle I/O and validation


def _feature_layout(task: Task) -> dict:
    if task.x.ndim == 3:
        return {"kind": "timeseries", "timesteps": task.x.shape[1], "channels": task.x.shape[2], "order": "timestep-major"}
    return {"kind": "flat", "features": task.x.shape[1]}


def save_bundle(bundle: TaskBundle, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for task in bundle.tasks:
        data_file = f"{task.id}.csv"
        flat = task.x.reshape(len(task), -1)
        extra = [c for c in ROW_META_COLUMNS if c in task.row_meta]
        with open(directory / data_file, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"f{i}" for i in range(flat.shape[1])] + ["label"] + extra)
            for r in range(len(task)):
                row = [repr(float(v)) for v in flat[r]] + [repr(float(task.y[r]))]
                row += [_fmt_meta(task.row_meta[c][r]) for c in extra]
                writer.writerow(row)
        entries.append(
            {
                "id": task.id,
                "kind": task.kind,
                "info": [float(v) for v in task.info],
                "bbox": None if task.bbox is None else [float(v) for v in task.bbox],
                "data_file": data_file,
                "layout": _feature_layout(task),
                "tags": dict(task.tags),
            }
        )
    manifest = {"version": BUNDLE_VERSION, "name": bundle.name, "meta": bundle.meta, "tasks": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def _fmt_meta(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def load_bundle(directory: str | Path) -> TaskBundle:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tasks = []
    for entry in manifest["tasks"]:
        with open(directory / entry["data_file"], newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        label_col = header.index("label")
        extra = header[label_col + 1 :]
        values = np.array([[float(v) for v in r[: label_col + 1]] for r in body], dtype=float).reshape(
            len(body), label_col + 1
        )
        x, y = values[:, :label_col], values[:, label_col]
        layout = entry.get("layout", {"kind": "flat"})
        if layout["kind"] == "timeseries":
            x = x.reshape(len(body), layout["timesteps"], layout["channels"])
        row_meta = {}
        for j, col in enumerate(extra):
            raw = [r[label_col + 1 + j] for r in body]
            row_meta[col] = np.array(raw, dtype=object) if col == "point_id" else np.array(raw, dtype=float)
        tasks.append(
            Task(
                id=entry["id"],
                kind=entry["kind"],
                info=np.array(entry["info"], dtype=float),
                x=x,
                y=y,
                bbox=None if entry["bbox"] is None else tuple(entry["bbox"]),
                row_meta=row_meta,
                tags=entry.get("tags", {}),
            )
        )
    return TaskBundle(manifest.get("name", directory.name), tasks, manifest.get("meta", {}))


def validate_task(task: Task, info_dim: int | None = None, spatial: bool | None = None) -> list[str]:
    """Human-readable invariant violations for one task (empty when valid)."""
    problems = []
    tid = task.id
    if task.kind == "classification" and not np.isin(task.y, (0.0, 1.0)).all():
        problems.append(f"{tid}: classification labels must be 0 or 1")
    if not np.isfinite(task.x).all() or not np.isfinite(task.y).all():
        problems.append(f"{tid}: non-finite values in data")
    if info_dim is not None and task.info.shape != (info_dim,):
        problems.append(f"{tid}: info length {task.info.size} differs from {info_dim}")
    if task.bbox is not None:
        min_lat, max_lat, min_lon, max_lon = task.bbox
        if not (-90 <= min_lat <= max_lat <= 90):
            problems.append(f"{tid}: latitude bounds {min_lat}..{max_lat} invalid")
        if not (-180 <= min_lon <= max_lon <= 180):
            problems.append(f"{tid}: longitude bounds {min_lon}..{max_lon} invalid")
    for col in ("lat", "lon"):
        if col in task.row_meta:
            vals = np.asarray(task.row_meta[col], dtype=float)
            vals = vals[np.isfinite(vals)]
            limit = 90 if col == "lat" else 180
            if (np.abs(vals) > limit).any():
                problems.append(f"{tid}: row {col} out of range")
    if spatial and task.info.size >= 3:
        norm = float(np.linalg.norm(task.info[:3]))
        if abs(norm - 1.0) > 1e-12:
            problems.append(f"{tid}: spatial triple has norm {norm}")
    return problems


def validate_bundle(bundle: TaskBundle | str | Path) -> list[str]:
    if not isinstance(bundle, TaskBundle):
        bundle = load_bundle(bundle)
    if not bundle.tasks:
        return ["bundle has no tasks"]
    info_dim = bundle.tasks[0].info.size
    spatial = bool(bundle.meta.get("spatial_info", False))
    problems = []
    seen = set()
    for task in bundle.tasks:
        if task.id in seen:
            problems.append(f"duplicate task id {task.id}")
        seen.add(task.id)
        problems += validate_task(task, info_dim, spatial)
    return problems


def info_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def as_row_meta(rows: Mapping[str, Sequence]) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=object if k == "point_id" else float) for k, v in rows.items()}
