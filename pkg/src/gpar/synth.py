"""Synthetic multi-output generators and evaluation metrics.

Two families of tasks, both on a 1-D input grid:

* ``functional``: three outputs chained through nonlinear formulas, so
  later outputs are deterministic functions of earlier *noisy* outputs
  plus fresh noise. Good data for testing whether a model exploits
  dependence between outputs.
* ``noise1``/``noise2``/``noise3``: two outputs sharing a noise
  realisation in three different ways (input-varying mixing, nonlinear
  warping, heteroscedastic scaling). The underlying smooth functions
  are fixed; only the noise structure differs.

Generators are pure functions of their config: the RNG is numpy's
PCG64 (``default_rng``), and draws happen in a fixed, documented order
(input jitter first, then the noise columns left to right), so the
streams are platform-stable and independent of downstream masking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MultiOutputDataset
from .errors import DataError, SpecError

TASKS = ("functional", "noise1", "noise2", "noise3")


@dataclass
class SynthConfig:
    task: str = "functional"
    n: int = 40
    lo: float = 0.0
    hi: float = 1.0
    seed: int = 0
    # coefficients of the oscillatory part of the second noise-task
    # function: amplitude/frequency pairs (a1, w1, a2, w2)
    theta: tuple[float, float, float, float] = (1.0, 5.0, 1.0, 3.0)

    def __post_init__(self):
        if self.task not in TASKS:
            raise SpecError(f"unknown task {self.task!r}; expected one of "
                            f"{TASKS}")
        if self.n < 1:
            raise SpecError(f"n must be >= 1, got {self.n}")
        if not self.lo < self.hi:
            raise SpecError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if self.task != "functional":
            if self.lo <= -0.5 <= self.hi:
                raise DataError("input range contains -0.5, where the first "
                                "noise-task function has a pole")
            if self.lo < 0.0:
                raise DataError("noise tasks need x >= 0 (sqrt(2x) term)")


def _input_grid(cfg, rng):
    """Equally spaced points with a small uniform jitter, clipped to range."""
    base = np.linspace(cfg.lo, cfg.hi, cfg.n)
    step = (cfg.hi - cfg.lo) / max(cfg.n - 1, 1)
    x = base + rng.uniform(-0.45, 0.45, size=cfg.n) * step
    return np.clip(x, cfg.lo, cfg.hi)


def _f1_quotient(x):
    return -np.sin(10.0 * np.pi * (x + 1.0)) / (2.0 * x + 1.0) - x ** 4


def _f2_oscillatory(x, theta):
    a1, w1, a2, w2 = theta
    return (np.exp(2.0 * x) / 5.0
            * (a1 * np.cos(w1 * np.pi * x) + a2 * np.cos(w2 * np.pi * x))
            + np.sqrt(2.0 * x))


def gen_functional(cfg: SynthConfig):
    """Three chained outputs; returns ``(dataset, truth_dataset)``.

    The truth dataset carries the noise-free chain (all noise terms set
    to zero), evaluated at the same inputs.
    """
    rng = np.random.default_rng(cfg.seed)
    x = _input_grid(cfg, rng)
    e1 = rng.standard_normal(cfg.n)
    e2 = rng.standard_normal(cfg.n)
    e3 = rng.standard_normal(cfg.n)

    f1 = -np.sin(10.0 * np.pi * (x + 1.0)) * (2.0 * x + 1.0) - x ** 4
    y1 = f1 + e1
    y2 = np.cos(y1) ** 2 + np.sin(3.0 * x) + e2
    y3 = y2 * y1 ** 2 + 3.0 * x + e3

    t1 = f1
    t2 = np.cos(t1) ** 2 + np.sin(3.0 * x)
    t3 = t2 * t1 ** 2 + 3.0 * x

    xcol = x[:, None]
    ds = MultiOutputDataset.from_arrays(
        xcol, np.column_stack([y1, y2, y3]),
        output_names=("y1", "y2", "y3"), input_names=("x",))
    truth = MultiOutputDataset.from_arrays(
        xcol, np.column_stack([t1, t2, t3]),
        output_names=("f1", "f2", "f3"), input_names=("x",))
    return ds, truth


def gen_noise_scheme(scheme: int, cfg: SynthConfig):
    """Two outputs with a shared noise draw; returns ``(dataset, truth)``.

    Scheme 1 mixes the two noise sources with input-dependent weights,
    scheme 2 warps the shared noise nonlinearly, scheme 3 scales it
    heteroscedastically. The first output is always the smooth function
    plus the shared noise.
    """
    if scheme not in (1, 2, 3):
        raise SpecError(f"noise scheme must be 1, 2, or 3, got {scheme}")
    rng = np.random.default_rng(cfg.seed)
    x = _input_grid(cfg, rng)
    e1 = rng.standard_normal(cfg.n)
    e2 = rng.standard_normal(cfg.n)

    f1 = _f1_quotient(x)
    f2 = _f2_oscillatory(x, cfg.theta)
    y1 = f1 + e1
    if scheme == 1:
        y2 = f2 + np.sin(2.0 * np.pi * x) ** 2 * e1 \
            + np.cos(2.0 * np.pi * x) ** 2 * e2
    elif scheme == 2:
        y2 = f2 + np.sin(np.pi * e1) + e2
    else:
        y2 = f2 + np.sin(np.pi * x) * e1 + e2

    xcol = x[:, None]
    ds = MultiOutputDataset.from_arrays(
        xcol, np.column_stack([y1, y2]),
        output_names=("y1", "y2"), input_names=("x",))
    truth = MultiOutputDataset.from_arrays(
        xcol, np.column_stack([f1, f2]),
        output_names=("f1", "f2"), input_names=("x",))
    return ds, truth


def generate(cfg: SynthConfig):
    """Dispatch on ``cfg.task``."""
    if cfg.task == "functional":
        return gen_functional(cfg)
    return gen_noise_scheme(int(cfg.task[-1]), cfg)


# ---------------------------------------------------------------------------
# Metrics


def _check_lengths(*arrays):
    arrays = [np.asarray(a, dtype=float).ravel() for a in arrays]
    n = arrays[0].size
    if n < 1:
        raise DataError("metrics need at least one point")
    if any(a.size != n for a in arrays):
        raise DataError(f"length mismatch: {[a.size for a in arrays]}")
    return arrays


def smse(pred_means, truths) -> float:
    """Mean squared error divided by the test targets' population variance."""
    mu, y = _check_lengths(pred_means, truths)
    var = float(np.var(y))
    if var == 0.0:
        raise DataError("smse undefined: test targets have zero variance")
    return float(np.mean((y - mu) ** 2)) / var


def mae(pred_means, truths) -> float:
    mu, y = _check_lengths(pred_means, truths)
    return float(np.mean(np.abs(y - mu)))


def mll(pred_means, pred_variances, truths) -> float:
    """Mean negative log Gaussian predictive density."""
    mu, var, y = _check_lengths(pred_means, pred_variances, truths)
    if np.any(var <= 0):
        raise DataError("mll needs strictly positive predictive variances")
    return float(np.mean(0.5 * np.log(2.0 * np.pi * var)
                         + 0.5 * (y - mu) ** 2 / var))
