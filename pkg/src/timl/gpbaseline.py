"""Gaussian-process residual baseline over (location, year).

The mean is linear in the learner's final hidden features, ``h(x) @ beta``,
with ``beta`` fit by generalized least squares under the kernel covariance.
Residuals are interpolated by the GP posterior mean.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve


class GPConfigError(ValueError):
    """The kernel matrix could not be factorized even at the largest jitter."""


@dataclass(frozen=True)
class GPConfig:
    """Kernel hyperparameters. The defaults are desk-scale choices, not tuned values."""

    sigma2: float = 1.0
    r_l: float = 0.5
    r_y: float = 1.5
    noise: float = 0.01
    jitter: float = 1e-6

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"GPConfig.{f.name} must be strictly positive")

    @classmethod
    def from_flat(cls, values) -> GPConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: float(v) for k, v in values.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def kernel(g_l, g_y, g_l2, g_y2, config: GPConfig, same_point: bool | None = None) -> float:
    """Covariance of two (location, year) points.

    ``sigma2 * exp(-|dl|^2 / (2 r_l) - dy^2 / (2 r_y))``, plus the noise
    variance when both arguments are the same datapoint. Without an explicit
    ``same_point`` flag, identical coordinates and year count as the same point.
    """
    a, b = np.asarray(g_l, dtype=float), np.asarray(g_l2, dtype=float)
    dl2 = float(np.sum((a - b) ** 2))
    dy2 = (float(g_y) - float(g_y2)) ** 2
    k = config.sigma2 * np.exp(-dl2 / (2 * config.r_l) - dy2 / (2 * config.r_y))
    if same_point is None:
        same_point = dl2 == 0.0 and dy2 == 0.0
    return float(k + config.noise) if same_point else float(k)


def gram(g_l, g_y, g_l2, g_y2, config: GPConfig) -> np.ndarray:
    """Noise-free cross-covariance matrix between two point sets."""
    a = np.asarray(g_l, dtype=float).reshape(-1, 2)
    b = np.asarray(g_l2, dtype=float).reshape(-1, 2)
    ya = np.asarray(g_y, dtype=float).reshape(-1, 1)
    yb = np.asarray(g_y2, dtype=float).reshape(1, -1)
    dl2 = np.sum(a**2, 1)[:, None] + np.sum(b**2, 1)[None, :] - 2 * a @ b.T
    dl2 = np.maximum(dl2, 0.0)
    return config.sigma2 * np.exp(-dl2 / (2 * config.r_l) - (ya - yb) ** 2 / (2 * config.r_y))


def _train_cov(g_l, g_y, config: GPConfig) -> np.ndarray:
    k = gram(g_l, g_y, g_l, g_y, config)
    k = 0.5 * (k + k.T)
    return k + config.noise * np.eye(len(k))


def _cholesky(k: np.ndarray, max_jitter: float):
    jitter = 0.0
    while True:
        try:
            return cho_factor(k + jitter * np.eye(len(k)), lower=True), jitter
        except LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 10
            if jitter > max_jitter:
                raise GPConfigError(
                    f"kernel matrix not positive definite with jitter up to {max_jitter:g}"
                ) from None


@dataclass
class GPFit:
    g_l: np.ndarray
    g_y: np.ndarray
    hidden: np.ndarray
    chol: tuple
    beta: np.ndarray
    alpha: np.ndarray
    jitter: float
    config: GPConfig

    def predict(self, g_l, g_y, hidden) -> np.ndarray:
        h = np.asarray(hidden, dtype=float)
        if h.ndim != 2 or h.shape[1] != self.hidden.shape[1]:
            raise ValueError(f"test features need {self.hidden.shape[1]} columns, got shape {h.shape}")
        k_star = gram(g_l, g_y, self.g_l, self.g_y, self.config)
        return h @ self.beta + k_star @ self.alpha


def gp_fit(g_l, g_y, hidden, y, config: GPConfig | None = None) -> GPFit:
    config = GPConfig() if config is None else config
    g_l = np.asarray(g_l, dtype=float).reshape(-1, 2)
    g_y = np.asarray(g_y, dtype=float).reshape(-1)
    h = np.asarray(hidden, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = len(y)
    if n < 1:
        raise ValueError("GP fit needs at least one training point")
    if h.ndim != 2 or len(h) != n or len(g_l) != n or len(g_y) != n:
        raise ValueError("locations, years, features and labels must have one row per point")
    chol, jitter = _cholesky(_train_cov(g_l, g_y, config), config.jitter)
    kinv_h = cho_solve(chol, h)
    kinv_y = cho_solve(chol, y)
    # lstsq keeps the GLS solve defined when features outnumber points
    beta = np.linalg.lstsq(h.T @ kinv_h, h.T @ kinv_y, rcond=None)[0]
    alpha = cho_solve(chol, y - h @ beta)
    return GPFit(g_l, g_y, h, chol, beta, alpha, jitter, config)


def gp_fit_predict(train, test, config: GPConfig | None = None) -> np.ndarray:
    """``train = (g_l, g_y, H, y)``, ``test = (g_l, g_y, H)``; returns test predictions."""
    fit = gp_fit(*train, config=config)
    return fit.predict(*test)
