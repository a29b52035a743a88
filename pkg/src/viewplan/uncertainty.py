"""Logistic-normal colour model.

Each RGB channel value ``c`` in (0, 1) is modelled as the sigmoid of a
Gaussian variable: ``logit(c) ~ N(mu, sigma^2)``. The density is

    p(c; mu, sigma) = 1 / (sigma sqrt(2 pi)) * 1 / (c (1 - c))
                      * exp(-(logit(c) - mu)^2 / (2 sigma^2))

Training minimises the negative log-likelihood of the ground-truth channel
values under this model; deployment converts predicted (mu, sigma) into an
RGB estimate and a bounded per-channel variance by Monte-Carlo sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

GT_CLAMP_LO = 0.001
GT_CLAMP_HI = 0.999
DEFAULT_MC_SAMPLES = 100
MAX_CHANNEL_VARIANCE = 0.25


@dataclass(frozen=True)
class LogisticNormalParams:
    """Per-channel logit-space mean and standard deviation."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape:
            raise ValueError(f"mu/sigma shape mismatch: {mu.shape} vs {sigma.shape}")
        if not (sigma > 0).all():
            raise ValueError("sigma must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True)
class RGBWithUncertainty:
    """Channel means in [0, 1] and channel variances in [0, 0.25]."""

    c: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64)
        u = np.asarray(self.u, dtype=np.float64)
        if c.min() < 0.0 or c.max() > 1.0:
            raise ValueError("channel means must lie in [0, 1]")
        if u.min() < 0.0 or u.max() > MAX_CHANNEL_VARIANCE + 1e-12:
            raise ValueError("channel variances must lie in [0, 0.25]")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "u", u)


@dataclass(frozen=True)
class UncertaintyMap:
    """Per-pixel, per-channel variance map, elementwise in [0, 0.25]."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.min() < 0.0 or values.max() > MAX_CHANNEL_VARIANCE + 1e-12:
            raise ValueError("uncertainty values must lie in [0, 0.25]")
        object.__setattr__(self, "values", values)

    @property
    def mean(self) -> float:
        return float(self.values.mean())


def np_sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable elementwise sigmoid."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def np_logit(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.log(c / (1.0 - c))


def logistic_normal_pdf(c, mu, sigma):
    """Density of the logistic-normal distribution, elementwise.

    ``c`` must lie strictly inside (0, 1); the endpoints are outside the
    support and raise.
    """
    c = np.asarray(c, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if not (sigma > 0).all():
        raise ValueError("sigma must be strictly positive")
    if not ((c > 0.0) & (c < 1.0)).all():
        raise ValueError("c must lie strictly inside (0, 1)")
    norm = 1.0 / (sigma * math.sqrt(2.0 * math.pi)) / (c * (1.0 - c))
    return norm * np.exp(-((np_logit(c) - mu) ** 2) / (2.0 * sigma ** 2))


def nll_terms(y: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Per-channel negative log-likelihood terms (differentiable).

    Ground truth is clamped to [0.001, 0.999] before the logit for numerical
    stability. Summing the last axis gives the per-pixel loss.
    """
    y = y.clamp(GT_CLAMP_LO, GT_CLAMP_HI)
    logit_y = torch.log(y / (1.0 - y))
    return (0.5 * torch.log(sigma ** 2)
            + torch.log(y * (1.0 - y))
            + (logit_y - mu) ** 2 / (2.0 * sigma ** 2))


def nll_loss(y, params: LogisticNormalParams) -> float:
    """Negative log-likelihood of one RGB value under the channel model,
    summed over channels."""
    mu = torch.as_tensor(params.mu, dtype=torch.float64)
    sigma = torch.as_tensor(params.sigma, dtype=torch.float64)
    if not (torch.isfinite(mu).all() and torch.isfinite(sigma).all()):
        raise ValueError("non-finite distribution parameters")
    y_t = torch.as_tensor(np.asarray(y, dtype=np.float64))
    return float(nll_terms(y_t, mu, sigma).sum())


def mc_moments(params: LogisticNormalParams,
               n_samples: int = DEFAULT_MC_SAMPLES,
               rng: np.random.Generator | None = None) -> RGBWithUncertainty:
    """Monte-Carlo channel mean and variance.

    Draws ``n_samples`` Gaussian samples per channel, passes them through a
    sigmoid, and returns the sample mean and population variance (clipped to
    the attainable [0, 0.25] range). Deterministic for a seeded ``rng``.
    """
    if rng is None:
        rng = np.random.default_rng()
    eps = rng.standard_normal((n_samples,) + params.mu.shape)
    samples = np_sigmoid(params.mu[None] + params.sigma[None] * eps)
    c = samples.mean(axis=0)
    u = np.clip(samples.var(axis=0), 0.0, MAX_CHANNEL_VARIANCE)
    return RGBWithUncertainty(c=np.clip(c, 0.0, 1.0), u=u)


def uncertainty_map(rendered, n_samples: int = DEFAULT_MC_SAMPLES,
                    rng: np.random.Generator | None = None):
    """Per-pixel RGB prediction and uncertainty for a rendered view.

    ``rendered`` is any object with HxWx3 ``mu`` and ``sigma`` maps (see
    :class:`viewplan.renderer.RenderedView`). Returns the RGB map and the
    :class:`UncertaintyMap`, both HxWx3.
    """
    params = LogisticNormalParams(mu=rendered.mu, sigma=rendered.sigma)
    moments = mc_moments(params, n_samples=n_samples, rng=rng)
    return moments.c, UncertaintyMap(values=moments.u)
