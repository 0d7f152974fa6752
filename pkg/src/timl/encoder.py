"""Task encoder: task-information vector -> per-layer FiLM (gamma, beta)."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import adgraph as ad
from .adgraph import ParamSet, Tensor


@dataclass(frozen=True)
class EncoderSpec:
    """Encoder shape. ``points`` are ``(name, width)`` pairs of the learner."""

    info_dim: int
    points: tuple[tuple[str, int], ...]
    hidden_width: int = 64
    depth: int = 2
    groups: int = 4
    dropout: float = 0.1
    eps: float = 1e-5
    head_bias: bool = False

    def __post_init__(self):
        if self.hidden_width % self.groups:
            raise ValueError(
                f"encoder hidden width {self.hidden_width} not divisible by {self.groups} groups"
            )
        object.__setattr__(self, "points", tuple((str(n), int(w)) for n, w in self.points))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["points"] = [list(p) for p in self.points]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> EncoderSpec:
        d = dict(d)
        d["points"] = tuple(tuple(p) for p in d["points"])
        return cls(**d)


@dataclass
class TaskEmbedding:
    """FiLM pairs keyed by modulation-point name."""

    gammas: dict[str, Tensor]
    betas: dict[str, Tensor]

    @classmethod
    def identity(cls, points: Sequence[tuple[str, int]]) -> TaskEmbedding:
        return cls(
            {name: Tensor(np.ones(w)) for name, w in points},
            {name: Tensor(np.zeros(w)) for name, w in points},
        )

    def detached(self) -> TaskEmbedding:
        return TaskEmbedding(
            {k: v.detach() for k, v in self.gammas.items()},
            {k: v.detach() for k, v in self.betas.items()},
        )

    def widths(self) -> dict[str, int]:
        return {k: v.shape[-1] for k, v in self.gammas.items()}


def film_modulate(h: Tensor, t_gamma: Tensor, t_beta: Tensor) -> Tensor:
    """``(t_gamma * h) + t_beta`` over the last axis of ``h``."""
    h, t_gamma, t_beta = ad.tensor(h), ad.tensor(t_gamma), ad.tensor(t_beta)
    width = h.shape[-1]
    if t_gamma.shape != (width,) or t_beta.shape != (width,):
        raise ValueError(
            f"FiLM width mismatch: hidden {width}, gamma {t_gamma.shape}, beta {t_beta.shape}"
        )
    return t_gamma * h + t_beta


def init_encoder(spec: EncoderSpec, seed: int | np.random.Generator) -> ParamSet:
    """Trunk weights uniform in +-1/sqrt(fan_in); heads start at zero.

    Heads carry no bias unless ``spec.head_bias``: an all-zero information
    vector is then a fixed point of training and always gives identity
    modulation.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    fan_in = spec.info_dim
    for i in range(spec.depth):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"trunk{i}.weight"] = rng.uniform(-bound, bound, (fan_in, spec.hidden_width))
        params[f"trunk{i}.bias"] = np.zeros(spec.hidden_width)
        params[f"trunk{i}.norm_scale"] = np.ones(spec.hidden_width)
        params[f"trunk{i}.norm_shift"] = np.zeros(spec.hidden_width)
        fan_in = spec.hidden_width
    for name, width in spec.points:
        params[f"head.{name}.weight"] = np.zeros((spec.hidden_width, 2 * width))
        if spec.head_bias:
            params[f"head.{name}.bias"] = np.zeros(2 * width)
    return ParamSet.from_arrays(params)


def sample_dropout_masks(spec: EncoderSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """Inverted-dropout masks for each trunk block, drawn outside the tape."""
    keep = 1.0 - spec.dropout
    return [(rng.random(spec.hidden_width) < keep) / keep for _ in range(spec.depth)]


def encode(
    task_info,
    params: ParamSet,
    spec: EncoderSpec,
    dropout_masks: Sequence[np.ndarray] | None = None,
) -> TaskEmbedding:
    """Run the trunk (linear, GeLU, group norm, dropout) then one head per point."""
    info = np.asarray(task_info.data if isinstance(task_info, Tensor) else task_info, dtype=float)
    if info.shape != (spec.info_dim,):
        raise ValueError(f"task info has shape {info.shape}, encoder expects ({spec.info_dim},)")
    h = Tensor(info.reshape(1, -1))
    for i in range(spec.depth):
        h = ad.gelu(h @ params[f"trunk{i}.weight"] + params[f"trunk{i}.bias"])
        h = ad.group_norm(
            h, spec.groups, spec.eps, params[f"trunk{i}.norm_scale"], params[f"trunk{i}.norm_shift"]
        )
        if dropout_masks is not None:
            h = h * dropout_masks[i]
    gammas, betas = {}, {}
    for name, width in spec.points:
        out = h @ params[f"head.{name}.weight"]
        if spec.head_bias:
            out = out + params[f"head.{name}.bias"]
        gammas[name] = out[0, :width] + 1.0
        betas[name] = out[0, width:]
    return TaskEmbedding(gammas, betas)
