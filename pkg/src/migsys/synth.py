"""Planted migration systems with known ground truth, and recovery scoring."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import FactorModel, MaskSpec, compose

log = logging.getLogger(__name__)

# Value written into every diagonal cell by synth_tensor.
POISON = 1e6


@dataclass
class PlantSpec:
    I: int
    J: int
    K: int
    F: int
    origin_support: int = 3
    dest_support: int = 3
    overlap: bool = False
    noise_sigma: float = 0.0
    seed: int = 0
    # Random-walk step relative to a unit baseline for the temporal profiles.
    walk_step: float = 0.15

    def __post_init__(self):
        if min(self.I, self.J, self.K, self.F) < 1:
            raise ValueError("dimensions and F must be positive")
        if not 1 <= self.origin_support <= self.I:
            raise ValueError(f"origin_support must be in 1..{self.I}")
        if not 1 <= self.dest_support <= self.J:
            raise ValueError(f"dest_support must be in 1..{self.J}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.overlap:
            if self.F * self.origin_support > self.I:
                raise ValueError("disjoint origin supports do not fit in I")
            if self.F * self.dest_support > self.J:
                raise ValueError("disjoint destination supports do not fit in J")

    @classmethod
    def from_dict(cls, d: dict) -> "PlantSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown plant spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _supports(rng, n, size, F, overlap):
    if overlap:
        return [np.sort(rng.choice(n, size, replace=False)) for _ in range(F)]
    perm = rng.permutation(n)
    return [np.sort(perm[f * size:(f + 1) * size]) for f in range(F)]


def _dest_supports(rng, spec, origins, tries=1000):
    # Each component's destinations avoid its own origins whenever that is
    # possible; otherwise a component whose block is mostly diagonal is not
    # identifiable once the diagonal is masked.
    if spec.origin_support + spec.dest_support > min(spec.I, spec.J):
        return _supports(rng, spec.J, spec.dest_support, spec.F, spec.overlap)
    if spec.overlap:
        out = []
        for o in origins:
            free = np.setdiff1d(np.arange(spec.J), o)
            out.append(np.sort(rng.choice(free, spec.dest_support, replace=False)))
        return out
    for _ in range(tries):
        cand = _supports(rng, spec.J, spec.dest_support, spec.F, spec.overlap)
        if all(np.intersect1d(o, d).size == 0 for o, d in zip(origins, cand)):
            return cand
    raise ValueError("could not draw destination supports disjoint from origins")


def plant_model(spec: PlantSpec) -> FactorModel:
    """Sparse nonnegative ground-truth model.

    Memberships are Uniform(0.5, 1.5) on supports drawn without replacement
    (a component's destinations avoid its own origins when the dimensions
    allow),
    profiles are a unit baseline plus a Uniform(-step, step) random walk
    clipped at zero, all columns are unit norm and weights are log-uniform
    on [1, 10].
    """
    rng = np.random.default_rng(spec.seed)
    I, J, K, F = spec.I, spec.J, spec.K, spec.F
    A = np.zeros((I, F))
    B = np.zeros((J, F))
    origins = _supports(rng, I, spec.origin_support, F, spec.overlap)
    for f, idx in enumerate(origins):
        A[idx, f] = rng.uniform(0.5, 1.5, idx.size)
    for f, idx in enumerate(_dest_supports(rng, spec, origins)):
        B[idx, f] = rng.uniform(0.5, 1.5, idx.size)
    steps = rng.uniform(-spec.walk_step, spec.walk_step, (K, F))
    steps[0] = 0.0
    C = np.maximum(1.0 + np.cumsum(steps, axis=0), 0.0)
    w = 10.0 ** rng.uniform(0.0, 1.0, F)
    for f in range(F):
        # A component living only on masked cells would be invisible.
        if np.count_nonzero(np.outer(A[:, f], B[:, f]) * (1 - _diag(I, J))) == 0:
            raise ValueError(f"component {f} lies entirely on the diagonal; pick larger supports")
    A /= np.linalg.norm(A, axis=0)
    B /= np.linalg.norm(B, axis=0)
    C /= np.linalg.norm(C, axis=0)
    return FactorModel(A, B, C, w)


def _diag(I, J):
    D = np.zeros((I, J))
    n = min(I, J)
    D[np.arange(n), np.arange(n)] = 1.0
    return D


def synth_tensor(model: FactorModel, noise_sigma: float = 0.0, seed: int = 0,
                 poison: float = POISON):
    """Noisy observation of ``model`` with a poisoned diagonal.

    Off-diagonal cells are compose(model) * (1 + N(0, sigma^2)) clipped at 0;
    diagonal cells hold ``poison``. Returns (X, diagonal-off mask).
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if np.any(model.A < 0) or np.any(model.B < 0) or np.any(model.C < 0) or np.any(model.weights < 0):
        raise ValueError("synth_tensor needs a nonnegative model")
    X = compose(model)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        X = np.maximum(X * (1.0 + noise_sigma * rng.standard_normal(X.shape)), 0.0)
    n = min(X.shape[0], X.shape[1])
    X[np.arange(n), np.arange(n), :] = poison
    return X, MaskSpec.diagonal_off(X.shape)


def inject_spike(model: FactorModel, f: int, period: int, amplitude: float) -> FactorModel:
    """Multiply c_f(period) by ``amplitude``, keeping c_f unit norm.

    The weight absorbs the renormalization, so weight * c_f is unchanged on
    every other period.
    """
    if amplitude <= 0:
        raise ValueError("amplitude must be positive")
    if not 0 <= f < model.rank:
        raise ValueError(f"component {f} out of range")
    if not 0 <= period < model.C.shape[0]:
        raise ValueError(f"period {period} out of range")
    out = model.copy()
    if amplitude == 1.0:
        return out
    c = out.C[:, f].copy()
    old = np.linalg.norm(c)
    c[period] *= amplitude
    new = np.linalg.norm(c)
    out.C[:, f] = c * (old / new) if new > 0 else c
    out.weights[f] *= new / old if old > 0 else 1.0
    return out


def congruence_score(truth: FactorModel, estimate: FactorModel) -> float:
    """Mean congruence of the optimally matched component pairs."""
    from .selection import match_components

    if truth.rank != estimate.rank:
        log.warning("rank mismatch (%d vs %d); scoring the best %d pairs",
                    truth.rank, estimate.rank, min(truth.rank, estimate.rank))
    m = match_components(truth, estimate)
    return float(np.mean(m.congruences))
