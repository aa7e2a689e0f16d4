"""Randomized quasi-Monte Carlo with reproducible seeding.

Every estimate is the mean over ``replicates`` independently scrambled Sobol
sets; the spread of the replicate means gives the standard error.  Replicate
seeds are spawned from one root seed, so results depend only on
``(seed, points, replicates)`` and never on how many workers are used.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import qmc

__all__ = ["MeasureEstimate", "sobol", "replicate_seeds", "qmc_mean", "combine"]


@dataclass(frozen=True)
class MeasureEstimate:
    value: float
    std_error: float
    samples: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "std_error", float(self.std_error))
        if self.std_error < 0:
            raise ValueError("std_error must be nonnegative")

    def __float__(self):
        return float(self.value)

    def scale(self, c: float) -> "MeasureEstimate":
        return MeasureEstimate(c * self.value, abs(c) * self.std_error, self.samples, self.seed)

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, float) else v) for k, v in asdict(self).items()}

    def z_score(self, other: "MeasureEstimate") -> float:
        s = np.hypot(self.std_error, other.std_error)
        diff = self.value - other.value
        if s == 0:
            return 0.0 if diff == 0 else float(np.copysign(np.inf, diff))
        return float(diff / s)


def _log2_ceil(points: int) -> int:
    return max(int(np.ceil(np.log2(max(points, 2)))), 1)


def sobol(dim: int, points: int, seed) -> np.ndarray:
    """Scrambled Sobol points in ``[0,1)^dim``; ``points`` is rounded up to a power of two."""
    if dim == 0:
        return np.zeros((2 ** _log2_ceil(points), 0))
    eng = qmc.Sobol(dim, scramble=True, seed=np.random.default_rng(seed))
    return eng.random_base2(_log2_ceil(points))


def replicate_seeds(seed: int, replicates: int) -> list:
    return np.random.SeedSequence(seed).spawn(replicates)


def qmc_mean(func, dim: int, points: int, replicates: int, seed: int, workers: int = 1) -> MeasureEstimate:
    """Estimate ``∫_{[0,1)^dim} func`` by randomized QMC.

    ``func`` maps an ``(N, dim)`` array to ``N`` values.  Replicates run on up
    to ``workers`` threads; their order of combination is fixed.
    """
    seeds = replicate_seeds(seed, replicates)

    def one(ss):
        u = sobol(dim, points, ss)
        return float(np.mean(func(u))), len(u)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, seeds))
    else:
        results = [one(ss) for ss in seeds]
    means = np.array([r[0] for r in results])
    n = sum(r[1] for r in results)
    se = float(np.std(means, ddof=1) / np.sqrt(len(means))) if len(means) > 1 else float("nan")
    return MeasureEstimate(float(np.mean(means)), se, n, int(seed))


def combine(estimates, weights=None, seed=None) -> MeasureEstimate:
    """Weighted sum of independent estimates."""
    estimates = list(estimates)
    w = np.ones(len(estimates)) if weights is None else np.asarray(weights, dtype=float)
    value = float(sum(wi * e.value for wi, e in zip(w, estimates)))
    se = float(np.sqrt(sum((wi * e.std_error) ** 2 for wi, e in zip(w, estimates))))
    n = int(sum(e.samples for e in estimates))
    s = estimates[0].seed if seed is None and estimates else (seed or 0)
    return MeasureEstimate(value, se, n, int(s))
