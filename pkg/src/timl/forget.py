"""Forgetful meta-learning: drop training tasks once they are memorized.

A task is memorized when its per-epoch metric has met the threshold in each
of the last ``window`` recorded epochs, with no gap.
"""

from __future__ import annotations

import csv
import enum
from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

AUC_THRESHOLD = 0.95
RMSE_THRESHOLD = 4.0
WINDOW = 20


class Decision(str, enum.Enum):
    KEEP = "keep"
    FORGET = "forget"


@dataclass
class MemorizationTracker:
    threshold: float
    higher_is_better: bool
    window: int = WINDOW
    enabled: bool = True
    history: dict[str, deque] = field(default_factory=dict)
    forgotten: list[str] = field(default_factory=list)
    log: list[tuple[int, str, float, bool]] = field(default_factory=list)

    @classmethod
    def for_classification(cls, **kwargs) -> MemorizationTracker:
        return cls(threshold=AUC_THRESHOLD, higher_is_better=True, **kwargs)

    @classmethod
    def for_regression(cls, **kwargs) -> MemorizationTracker:
        return cls(threshold=RMSE_THRESHOLD, higher_is_better=False, **kwargs)

    @classmethod
    def for_task_kind(cls, kind: str, **kwargs) -> MemorizationTracker:
        if kind == "classification":
            return cls.for_classification(**kwargs)
        return cls.for_regression(**kwargs)

    def meets(self, metric: float) -> bool:
        return metric >= self.threshold if self.higher_is_better else metric <= self.threshold

    def is_forgotten(self, task_id: str) -> bool:
        return task_id in self.forgotten

    def record_and_prune(self, task_id: str, epoch_metric: float, epoch: int = -1) -> Decision:
        if task_id in self.forgotten:
            raise ValueError(f"task {task_id} was already forgotten")
        buf = self.history.setdefault(task_id, deque(maxlen=self.window))
        buf.append(float(epoch_metric))
        forget = self.enabled and len(buf) == self.window and all(self.meets(m) for m in buf)
        if forget:
            self.forgotten.append(task_id)
        self.log.append((epoch, task_id, float(epoch_metric), forget))
        return Decision.FORGET if forget else Decision.KEEP

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "task_id", "metric", "forgotten"])
            for epoch, task_id, metric, flag in self.log:
                writer.writerow([epoch, task_id, repr(metric), int(flag)])

    def state_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "higher_is_better": self.higher_is_better,
            "window": self.window,
            "enabled": self.enabled,
            "history": {k: list(v) for k, v in self.history.items()},
            "forgotten": list(self.forgotten),
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> MemorizationTracker:
        tracker = cls(d["threshold"], d["higher_is_better"], d["window"], d["enabled"])
        tracker.history = {k: deque(v, maxlen=tracker.window) for k, v in d["history"].items()}
        tracker.forgotten = list(d["forgotten"])
        return tracker


def record_and_prune(tracker: MemorizationTracker, task_id: str, epoch_metric: float) -> Decision:
    return tracker.record_and_prune(task_id, epoch_metric)


def active_tasks(tracker: MemorizationTracker, all_tasks: Sequence) -> list:
    """Tasks not yet forgotten, in their original order.

    Items may be task ids or objects with an ``id`` attribute.
    """
    gone = set(tracker.forgotten)
    return [t for t in all_tasks if getattr(t, "id", t) not in gone]
