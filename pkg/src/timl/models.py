"""Learner architectures: an MLP and a 1-layer LSTM with a linear head.

Both expose named modulation points whose hidden vectors are FiLM-modulated
when a task embedding is supplied.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import adgraph as ad
from .adgraph import ParamSet, Tensor
from .encoder import TaskEmbedding, film_modulate

KINDS = ("mlp", "lstm")
OUTPUTS = ("binary-logit", "scalar-regression")


@dataclass(frozen=True)
class ModulationPoint:
    name: str
    width: int


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    hidden_size: int = 0
    timesteps: int = 0
    output: str = "binary-logit"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.output not in OUTPUTS:
            raise ValueError(f"unknown output {self.output!r}")
        if self.kind == "mlp" and not self.hidden_dims:
            raise ValueError("an mlp needs at least one hidden layer to modulate")
        if self.kind == "lstm" and (self.hidden_size <= 0 or self.timesteps <= 0):
            raise ValueError("an lstm needs hidden_size and timesteps")

    @property
    def modulation_points(self) -> tuple[ModulationPoint, ...]:
        if self.kind == "mlp":
            return tuple(ModulationPoint(f"hidden{i}", w) for i, w in enumerate(self.hidden_dims))
        return (ModulationPoint("lstm_out", self.hidden_size),)

    @property
    def point_pairs(self) -> tuple[tuple[str, int], ...]:
        return tuple((p.name, p.width) for p in self.modulation_points)

    @property
    def task_kind(self) -> str:
        return "classification" if self.output == "binary-logit" else "regression"

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelSpec:
        d = dict(d)
        d["hidden_dims"] = tuple(d.get("hidden_dims", ()))
        return cls(**d)


def init_params(spec: ModelSpec, seed: int | np.random.Generator) -> ParamSet:
    """Weights uniform in +-1/sqrt(fan_in), zero biases, LSTM forget bias 1."""
    rng = np.random.default_rng(seed)

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape)

    params: dict[str, np.ndarray] = {}
    if spec.kind == "mlp":
        fan_in = spec.input_dim
        for i, width in enumerate(spec.hidden_dims):
            params[f"layer{i}.weight"] = uniform(fan_in, (fan_in, width))
            params[f"layer{i}.bias"] = np.zeros(width)
            fan_in = width
    else:
        h = spec.hidden_size
        params["lstm.w_ih"] = uniform(spec.input_dim, (spec.input_dim, 4 * h))
        params["lstm.w_hh"] = uniform(h, (h, 4 * h))
        bias = np.zeros(4 * h)
        bias[h : 2 * h] = 1.0  # gate order: input, forget, cell, output
        params["lstm.bias"] = bias
        fan_in = h
    params["head.weight"] = uniform(fan_in, (fan_in, 1))
    params["head.bias"] = np.zeros(1)
    return ParamSet.from_arrays(params)


def _check_embedding(spec: ModelSpec, embedding: TaskEmbedding) -> None:
    for point in spec.modulation_points:
        if point.name not in embedding.gammas or point.name not in embedding.betas:
            raise ValueError(f"embedding has no entry for modulation point {point.name!r}")
        got = embedding.gammas[point.name].shape[-1]
        if got != point.width:
            raise ValueError(
                f"embedding width {got} does not match modulation point "
                f"{point.name!r} of width {point.width}"
            )


def _modulate(h: Tensor, name: str, embedding: TaskEmbedding | None) -> Tensor:
    if embedding is None:
        return h
    return film_modulate(h, embedding.gammas[name], embedding.betas[name])


def forward(
    spec: ModelSpec,
    params: ParamSet,
    x,
    embedding: TaskEmbedding | None = None,
    dropout_mask: Mapping[str, np.ndarray] | None = None,
    return_hidden: bool = False,
):
    """Model output of shape (batch,): raw logits or regression values.

    With ``return_hidden`` also returns the final hidden vector that feeds the
    linear head.
    """
    x = ad.tensor(x)
    if embedding is not None:
        _check_embedding(spec, embedding)
    if spec.kind == "mlp":
        if x.ndim != 2 or x.shape[1] != spec.input_dim:
            raise ValueError(f"mlp expects (batch, {spec.input_dim}) input, got {x.shape}")
        h = x
        for i, point in enumerate(spec.modulation_points):
            z = h @ params[f"layer{i}.weight"] + params[f"layer{i}.bias"]
            h = ad.gelu(_modulate(z, point.name, embedding))
            if dropout_mask is not None and point.name in dropout_mask:
                h = h * dropout_mask[point.name]
    else:
        h = _lstm(spec, params, x)
        h = _modulate(h, "lstm_out", embedding)
        if dropout_mask is not None and "lstm_out" in dropout_mask:
            h = h * dropout_mask["lstm_out"]
    out = h @ params["head.weight"] + params["head.bias"]
    out = ad.reshape(out, (out.shape[0],))
    return (out, h) if return_hidden else out


def _lstm(spec: ModelSpec, params: ParamSet, x: Tensor) -> Tensor:
    if x.ndim == 2 and x.shape[1] == spec.timesteps * spec.input_dim:
        x = ad.reshape(x, (x.shape[0], spec.timesteps, spec.input_dim))
    if x.ndim != 3 or x.shape[1:] != (spec.timesteps, spec.input_dim):
        raise ValueError(
            f"lstm expects (batch, {spec.timesteps}, {spec.input_dim}) input, got {x.shape}"
        )
    n, hs = x.shape[0], spec.hidden_size
    w_ih, w_hh, bias = params["lstm.w_ih"], params["lstm.w_hh"], params["lstm.bias"]
    h = c = None
    for t in range(spec.timesteps):
        z = x[:, t, :] @ w_ih + bias
        if h is not None:
            z = z + h @ w_hh
        i = ad.sigmoid(z[:, :hs])
        f = ad.sigmoid(z[:, hs : 2 * hs])
        g = ad.tanh(z[:, 2 * hs : 3 * hs])
        o = ad.sigmoid(z[:, 3 * hs :])
        c = i * g if c is None else f * c + i * g
        h = o * ad.tanh(c)
    if h is None:
        h = Tensor(np.zeros((n, hs)))
    return h


def loss_fn(spec: ModelSpec, outputs: Tensor, targets) -> Tensor:
    if spec.output == "binary-logit":
        return ad.bce_with_logits(outputs, targets)
    return ad.squared_error(outputs, targets)
