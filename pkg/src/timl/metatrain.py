"""Bilevel training: MAML inner adaptation with TIML's encoder in the outer loop.

Trainer modes:

* ``timl``: learner modulated by the task encoder; both trained in the outer loop.
* ``maml``: the same loop with no encoder (identity modulation).
* ``pretrain``: ordinary supervised training on the union of all training
  tasks, then fine-tuning.
* ``scratch``: random initialization, fine-tuning only.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import adgraph as ad
from .adgraph import NonFiniteError, ParamSet, Tensor
from .encoder import EncoderSpec, TaskEmbedding, encode, init_encoder, sample_dropout_masks
from .forget import MemorizationTracker, active_tasks
from .geotasks import Task, TaskBundle, sample_balanced_batch
from .metrics import auc_roc, f1_at_half, rmse, sigmoid
from .models import ModelSpec, forward, init_params, loss_fn

log = logging.getLogger(__name__)

MODES = ("timl", "maml", "pretrain", "scratch")

# independent random streams, so e.g. adding an encoder never shifts the
# batches a learner sees
_STREAM_LEARNER, _STREAM_ENCODER, _STREAM_SPLIT, _STREAM_ORDER, _STREAM_BATCH, _STREAM_DROPOUT = range(6)


class AdaptationError(RuntimeError):
    """Inner-loop adaptation hit a non-finite loss."""


@dataclass
class MetaConfig:
    mode: str = "timl"
    inner_lr: float = 1e-4
    inner_steps: int = 1
    outer_lr: float = 1e-4
    outer_lr_min: float = 1e-5
    epochs: int = 1000
    meta_batch_size: int = 8
    first_order: bool = False
    seed: int = 0
    shots: int = 10
    grad_clip: float = 10.0
    validation_fraction: float = 0.1
    validation_cap: int = 50
    forgetfulness: bool = True
    forget_window: int = 20
    forget_threshold: float | None = None
    train_encoder: bool = True
    encoder_hidden: int = 64
    encoder_depth: int = 2
    encoder_groups: int = 4
    encoder_dropout: float = 0.1
    encoder_head_bias: bool = False
    finetune_lr: float | None = None
    finetune_steps: int = 250

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.inner_lr <= 0 or self.outer_lr <= 0 or self.outer_lr_min <= 0:
            raise ValueError("learning rates must be positive")
        if self.outer_lr_min > self.outer_lr:
            raise ValueError("outer_lr_min must not exceed outer_lr")
        if self.epochs < 0 or self.inner_steps < 0 or self.meta_batch_size < 1:
            raise ValueError("epochs, inner_steps >= 0 and meta_batch_size >= 1 required")

    @property
    def uses_encoder(self) -> bool:
        return self.mode == "timl"

    @classmethod
    def from_flat(cls, values: Mapping) -> MetaConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(epoch: int, epochs: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from ``lr_max`` at epoch 0 to ``lr_min`` at the last epoch."""
    if epochs <= 1:
        return lr_max
    frac = min(max(epoch, 0), epochs - 1) / (epochs - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = {}
        for name, p in params.items():
            g = grads[name].data
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[name] = Tensor(p.data - update, requires_grad=p.requires_grad)
        return ParamSet(out)

    def state_dict(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def clip_global_norm(grads: ParamSet, max_norm: float) -> tuple[ParamSet, float]:
    norm = math.sqrt(float(np.sum([np.sum(g.data * g.data) for g in grads.values()])))
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return ParamSet({k: Tensor(g.data * scale) for k, g in grads.items()}), norm


@dataclass
class Checkpoint:
    epoch: int
    metric: float
    learner: dict[str, np.ndarray]
    encoder: dict[str, np.ndarray] | None


@dataclass
class MetaState:
    config: MetaConfig
    model_spec: ModelSpec
    encoder_spec: EncoderSpec | None
    learner: ParamSet
    encoder: ParamSet | None
    learner_opt: Adam = field(default_factory=Adam)
    encoder_opt: Adam = field(default_factory=Adam)
    epoch: int = 0
    step: int = 0
    lr: float = 0.0
    tracker: MemorizationTracker | None = None
    best: Checkpoint | None = None
    validation_ids: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    audit: list[tuple[int, str]] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    encode_calls: int = 0
    last_loss: float = float("nan")
    last_learner_grad: ParamSet | None = None
    last_encoder_grad: ParamSet | None = None

    @property
    def task_kind(self) -> str:
        return self.model_spec.task_kind

    @property
    def higher_is_better(self) -> bool:
        return self.task_kind == "classification"

    def best_params(self) -> tuple[ParamSet, ParamSet | None]:
        """Learner and encoder at the best validation epoch (current if none)."""
        if self.best is None:
            return self.learner, self.encoder
        enc = None if self.best.encoder is None else ParamSet.from_arrays(self.best.encoder, False)
        return ParamSet.from_arrays(self.best.learner, False), enc


def init_state(
    config: MetaConfig, model_spec: ModelSpec, info_dim: int | None = None
) -> MetaState:
    learner = init_params(model_spec, _rng(config.seed, _STREAM_LEARNER))
    encoder_spec = encoder = None
    if config.uses_encoder:
        if info_dim is None:
            raise ValueError("timl mode needs the task-information width")
        encoder_spec = EncoderSpec(
            info_dim=info_dim,
            points=model_spec.point_pairs,
            hidden_width=config.encoder_hidden,
            depth=config.encoder_depth,
            groups=config.encoder_groups,
            dropout=config.encoder_dropout,
            head_bias=config.encoder_head_bias,
        )
        encoder = init_encoder(encoder_spec, _rng(config.seed, _STREAM_ENCODER))
        if not config.train_encoder:
            encoder = encoder.detached(requires_grad=False)
    tracker = MemorizationTracker.for_task_kind(
        model_spec.task_kind, window=config.forget_window, enabled=config.forgetfulness
    )
    if config.forget_threshold is not None:
        tracker.threshold = config.forget_threshold
    return MetaState(
        config=config,
        model_spec=model_spec,
        encoder_spec=encoder_spec,
        learner=learner,
        encoder=encoder,
        lr=cosine_lr(0, config.epochs, config.outer_lr, config.outer_lr_min),
        tracker=tracker,
    )


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, key)])


# ---------------------------------------------------------------------------
# embeddings and batches


def task_embedding(
    state: MetaState,
    info,
    encoder: ParamSet | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> TaskEmbedding | None:
    """Encoder output for one task, or None when the mode has no encoder."""
    encoder = state.encoder if encoder is None else encoder
    if encoder is None or state.encoder_spec is None:
        return None
    state.encode_calls += 1
    masks = None
    if dropout_rng is not None and state.encoder_spec.dropout > 0:
        masks = sample_dropout_masks(state.encoder_spec, dropout_rng)
    return encode(info, encoder, state.encoder_spec, masks)


@dataclass
class BatchSpec:
    """How fine-tuning batches are drawn.

    Classification draws ``n_pos`` positives and ``n_neg`` negatives;
    regression draws ``size`` rows.
    """

    n_pos: int = 10
    n_neg: int = 10
    size: int = 10

    def draw(self, task: Task, rng: np.random.Generator) -> np.ndarray:
        if task.kind == "classification":
            return sample_balanced_batch(task, self.n_pos, self.n_neg, rng)
        n = len(task)
        if n == 0:
            raise ValueError(f"task {task.id} has no rows")
        return rng.choice(n, size=self.size, replace=n < self.size)


CROP_FINETUNE = {"steps": 250, "batch_spec": BatchSpec(n_pos=10, n_neg=10)}
YIELD_FINETUNE = {"steps": 15, "batch_spec": BatchSpec(size=10)}


@dataclass
class TaskSample:
    """Support and query rows for one task in one epoch."""

    task_id: str
    info: np.ndarray
    support: tuple[np.ndarray, np.ndarray]
    query: tuple[np.ndarray, np.ndarray]


def support_query_split(task: Task, shots: int, rng: np.random.Generator) -> TaskSample:
    """Disjoint support/query halves, then one batch from each half.

    Classification halves are stratified and batches hold ``shots`` rows per
    class; regression batches hold ``shots`` rows.
    """
    if task.kind == "classification":
        halves = ([], [])
        for pool in (task.positives, task.negatives):
            if len(pool) < 2:
                raise ValueError(f"task {task.id} needs two rows of each class for a support/query split")
            perm = rng.permutation(pool)
            cut = len(perm) // 2
            halves[0].append(perm[:cut])
            halves[1].append(perm[cut:])
        rows = []
        for pos, neg in halves:
            rows.append(
                np.concatenate(
                    [rng.choice(pos, shots, replace=len(pos) < shots), rng.choice(neg, shots, replace=len(neg) < shots)]
                )
            )
    else:
        if len(task) < 2:
            raise ValueError(f"task {task.id} needs at least two rows")
        perm = rng.permutation(len(task))
        cut = len(perm) // 2
        rows = [
            rng.choice(half, shots, replace=len(half) < shots) if len(half) != shots else half
            for half in (perm[:cut], perm[cut:])
        ]
    s, q = rows
    return TaskSample(task.id, task.info, (task.x[s], task.y[s]), (task.x[q], task.y[q]))


# ---------------------------------------------------------------------------
# inner and outer loops


def inner_adapt(
    model_spec: ModelSpec,
    params: ParamSet,
    embedding: TaskEmbedding | None,
    support: tuple[np.ndarray, np.ndarray],
    alpha: float,
    steps: int,
    first_order: bool = False,
) -> ParamSet:
    """``steps`` gradient steps on the support batch with the embedding fixed.

    Unless ``first_order``, the result stays differentiable with respect to
    the starting parameters (and, through the embedding, the encoder).
    """
    x, y = support
    if len(y) == 0:
        raise ValueError("empty support set")
    for step in range(steps):
        try:
            loss = loss_fn(model_spec, forward(model_spec, params, x, embedding), y)
        except NonFiniteError as exc:
            raise AdaptationError(f"non-finite support loss at inner step {step}: {exc}") from exc
        g = ad.grad(loss, params, create_graph=not first_order)
        params = ParamSet({k: params[k] - alpha * g[k] for k in params})
    return params


def task_metric(kind: str, outputs: np.ndarray, targets: np.ndarray) -> float:
    """AUC ROC for classification, RMSE for regression."""
    if kind == "classification":
        return auc_roc(outputs, targets)
    return rmse(outputs, targets)


def outer_step(
    state: MetaState,
    batch: Sequence[TaskSample],
    detach_embeddings: bool = False,
) -> dict[str, float]:
    """One meta-update of the learner (and encoder) from a batch of tasks.

    Returns each task's post-adaptation query metric. A non-finite outer loss
    skips the update and records an event.
    """
    cfg = state.config
    spec = state.model_spec
    train_encoder = state.encoder is not None and cfg.train_encoder and not detach_embeddings
    dropout_rng = _rng(cfg.seed, _STREAM_DROPOUT, state.step)
    total = None
    metrics: dict[str, float] = {}
    try:
        for sample in batch:
            embedding = task_embedding(state, sample.info, dropout_rng=dropout_rng)
            if embedding is not None and detach_embeddings:
                embedding = embedding.detached()
            adapted = inner_adapt(
                spec, state.learner, embedding, sample.support, cfg.inner_lr, cfg.inner_steps, cfg.first_order
            )
            out = forward(spec, adapted, sample.query[0], embedding)
            loss = loss_fn(spec, out, sample.query[1])
            total = loss if total is None else total + loss
            metrics[sample.task_id] = task_metric(spec.task_kind, out.data, sample.query[1])
            state.audit.append((state.epoch, sample.task_id))
    except (AdaptationError, NonFiniteError) as exc:
        state.events.append(f"epoch {state.epoch} step {state.step}: skipped ({exc})")
        log.warning("outer step skipped: %s", exc)
        state.step += 1
        return metrics

    wrt = dict(state.learner.prefixed("m."))
    if state.encoder is not None:
        wrt.update(state.encoder.prefixed("e."))
    grads = ad.grad(total, wrt, allow_unused=True)
    g_learner = ParamSet({k: grads["m." + k] for k in state.learner})
    state.last_learner_grad = g_learner
    g_learner, _ = clip_global_norm(g_learner, cfg.grad_clip)
    state.learner = state.learner_opt.step(state.learner, g_learner, state.lr)
    if state.encoder is not None:
        g_encoder = ParamSet({k: grads["e." + k] for k in state.encoder})
        state.last_encoder_grad = g_encoder
        if train_encoder:
            g_encoder, _ = clip_global_norm(g_encoder, cfg.grad_clip)
            state.encoder = state.encoder_opt.step(state.encoder, g_encoder, state.lr)
    state.last_loss = float(total.data)
    state.step += 1
    return metrics


# ---------------------------------------------------------------------------
# validation and the training driver


def validation_count(n_tasks: int, fraction: float = 0.1, cap: int = 50) -> int:
    return min(math.ceil(fraction * n_tasks), cap)


def post_adaptation_metric(
    state: MetaState, task: Task, rng: np.random.Generator, learner=None, encoder=None
) -> float:
    cfg = state.config
    learner = state.learner if learner is None else learner
    sample = support_query_split(task, cfg.shots, rng)
    embedding = task_embedding(state, task.info, encoder=encoder)
    adapted = inner_adapt(state.model_spec, learner, embedding, sample.support, cfg.inner_lr, cfg.inner_steps, True)
    with ad.no_grad():
        out = forward(state.model_spec, adapted, sample.query[0], embedding)
    return task_metric(state.task_kind, out.data, sample.query[1])


def validate(state: MetaState, tasks: Sequence[Task]) -> float:
    if not tasks:
        return float("nan")
    # the same support/query draw every epoch, so epochs are comparable
    vals = [
        post_adaptation_metric(state, t, _rng(state.config.seed, _STREAM_SPLIT, 1, i))
        for i, t in enumerate(tasks)
    ]
    return float(np.mean(vals))


def _improved(state: MetaState, metric: float) -> bool:
    if not np.isfinite(metric):
        return False
    if state.best is None:
        return True
    # ties go to the later, longer-trained epoch (AUC often saturates at 1)
    return metric >= state.best.metric if state.higher_is_better else metric <= state.best.metric


def _checkpoint(state: MetaState, metric: float) -> None:
    state.best = Checkpoint(
        epoch=state.epoch,
        metric=metric,
        learner=state.learner.arrays(),
        encoder=None if state.encoder is None else state.encoder.arrays(),
    )


def split_validation(config: MetaConfig, bundle: TaskBundle) -> tuple[list[Task], list[Task]]:
    """(training tasks, validation tasks); validation never enters meta-training."""
    n = len(bundle)
    n_val = validation_count(n, config.validation_fraction, config.validation_cap)
    rng = _rng(config.seed, _STREAM_SPLIT, 0)
    val_idx = set(rng.choice(n, size=n_val, replace=False).tolist()) if n_val else set()
    train = [t for i, t in enumerate(bundle.tasks) if i not in val_idx]
    val = [t for i, t in enumerate(bundle.tasks) if i in val_idx]
    return train, val


def meta_train(
    config: MetaConfig,
    model_spec: ModelSpec,
    bundle: TaskBundle,
    on_step: Callable[[MetaState], None] | None = None,
) -> MetaState:
    """Train per ``config.mode`` and keep the best-validation checkpoint."""
    if len(bundle) < 2:
        raise ValueError("meta-training needs at least two tasks")
    info_dim = bundle.tasks[0].info.size
    state = init_state(config, model_spec, info_dim)
    train, val = split_validation(config, bundle)
    state.validation_ids = [t.id for t in val]
    if config.mode == "scratch":
        return state
    if config.mode == "pretrain":
        return _pretrain(state, train, val, on_step)

    index = {t.id: i for i, t in enumerate(bundle.tasks)}
    for epoch in range(config.epochs):
        state.epoch = epoch
        state.lr = cosine_lr(epoch, config.epochs, config.outer_lr, config.outer_lr_min)
        pool = active_tasks(state.tracker, train)
        if not pool:
            state.events.append(f"epoch {epoch}: every training task forgotten; stopping")
            log.info("all training tasks forgotten at epoch %d", epoch)
            break
        order = _rng(config.seed, _STREAM_ORDER, epoch).permutation(len(pool))
        losses = []
        for start in range(0, len(order), config.meta_batch_size):
            chunk = [pool[i] for i in order[start : start + config.meta_batch_size]]
            batch = [
                support_query_split(t, config.shots, _rng(config.seed, _STREAM_BATCH, epoch, index[t.id]))
                for t in chunk
            ]
            metrics = outer_step(state, batch)
            losses.append(state.last_loss)
            for task_id, metric in metrics.items():
                state.tracker.record_and_prune(task_id, metric, epoch)
            if on_step is not None:
                on_step(state)
        val_metric = validate(state, val)
        if _improved(state, val_metric):
            _checkpoint(state, val_metric)
        state.history.append(
            {
                "epoch": epoch,
                "lr": state.lr,
                "train_loss": float(np.mean(losses)) if losses else float("nan"),
                "val_metric": val_metric,
                "active_tasks": len(pool),
                "forgotten": len(state.tracker.forgotten),
            }
        )
    return state


def _pretrain(state, train, val, on_step):
    cfg = state.config
    spec = state.model_spec
    x = np.concatenate([t.x for t in train])
    y = np.concatenate([t.y for t in train])
    batch = 2 * cfg.shots
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        state.lr = cosine_lr(epoch, cfg.epochs, cfg.outer_lr, cfg.outer_lr_min)
        perm = _rng(cfg.seed, _STREAM_ORDER, epoch).permutation(len(y))
        losses = []
        for start in range(0, len(perm), batch):
            rows = perm[start : start + batch]
            loss = loss_fn(spec, forward(spec, state.learner, x[rows]), y[rows])
            grads, _ = clip_global_norm(ad.grad(loss, state.learner), cfg.grad_clip)
            state.learner = state.learner_opt.step(state.learner, grads, state.lr)
            state.step += 1
            losses.append(float(loss.data))
            if on_step is not None:
                on_step(state)
        val_metric = validate(state, val)
        if _improved(state, val_metric):
            _checkpoint(state, val_metric)
        state.history.append(
            {"epoch": epoch, "lr": state.lr, "train_loss": float(np.mean(losses)), "val_metric": val_metric,
             "active_tasks": len(train), "forgotten": 0}
        )
    return state


# ---------------------------------------------------------------------------
# fine-tuning and evaluation


def finetune(
    state: MetaState,
    task: Task,
    steps: int,
    batch_spec: BatchSpec,
    lr: float | None = None,
    seed: int | None = None,
    batch_log: list | None = None,
) -> ParamSet:
    """Plain SGD from the best meta-initialization on one task's data.

    The embedding is computed once from the task information and frozen.
    """
    if task.kind == "classification" and len(task.positives) == 0:
        raise ValueError(
            f"task {task.id} has no positive examples; use zero_shot_eval or a batch "
            "composition without positives"
        )
    cfg = state.config
    if lr is None:
        lr = cfg.finetune_lr if cfg.finetune_lr is not None else cfg.inner_lr
    learner, encoder = state.best_params()
    params = learner.detached()
    with ad.no_grad():
        embedding = task_embedding(state, task.info, encoder=encoder)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    for _ in range(steps):
        rows = batch_spec.draw(task, rng)
        if batch_log is not None:
            batch_log.append(rows)
        loss = loss_fn(state.model_spec, forward(state.model_spec, params, task.x[rows], embedding), task.y[rows])
        g = ad.grad(loss, params)
        params = ParamSet({k: Tensor(params[k].data - lr * g[k].data, True) for k in params})
    return params


def predict(
    state: MetaState, task: Task, params: ParamSet | None = None, x: np.ndarray | None = None,
    return_hidden: bool = False,
):
    """Raw model outputs for ``x`` (defaults to the task's rows)."""
    learner, encoder = state.best_params()
    params = learner if params is None else params
    x = task.x if x is None else x
    with ad.no_grad():
        embedding = task_embedding(state, task.info, encoder=encoder)
        result = forward(state.model_spec, params, x, embedding, return_hidden=return_hidden)
    if return_hidden:
        return result[0].data, result[1].data
    return result.data


def score(kind: str, outputs: np.ndarray, targets: np.ndarray) -> dict[str, float]:
    if kind == "classification":
        probs = sigmoid(outputs)
        out = {"f1": f1_at_half(probs, targets)}
        if 0 < np.sum(targets == 1) < len(targets):
            out["auc"] = auc_roc(probs, targets)
        return out
    return {"rmse": rmse(outputs, targets), "mse": rmse(outputs, targets) ** 2}


def evaluate(state: MetaState, task: Task, params: ParamSet | None = None) -> dict[str, float]:
    return score(task.kind, predict(state, task, params), task.y)


def zero_shot_eval(state: MetaState, task: Task) -> dict:
    """Metrics of the encoder-modulated meta-model with no gradient steps."""
    if len(task) == 0:
        raise ValueError(f"task {task.id} has no evaluation rows")
    result: dict = evaluate(state, task)
    result["zero_shot"] = True
    return result
