"""Choosing the number of systems and checking component stability across ranks."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .solver import FitOptions, fit
from .tensor import FactorModel

log = logging.getLogger(__name__)

# Enumerate assignments only when there are at most this many.
_EXHAUSTIVE_LIMIT = 500_000


@dataclass
class RankCurve:
    ranks: list
    residuals: list       # best relative masked residual per rank
    seeds: list           # seed of the winning restart per rank
    models: list | None = None

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.ranks, self.ranks[1:])):
            raise ValueError("ranks must be strictly increasing")

    def rows(self):
        return list(zip(self.ranks, self.residuals, self.seeds))


@dataclass
class ComponentMatching:
    pairs: list           # (index in P, index in Q)
    congruences: list     # one per pair, same order
    threshold: float = 0.95

    @property
    def permutation(self) -> dict:
        return dict(self.pairs)

    @property
    def total(self) -> float:
        return float(sum(self.congruences))

    @property
    def stable(self) -> bool:
        return all(c >= self.threshold for c in self.congruences)


def _unit_columns(U):
    n = np.linalg.norm(U, axis=0)
    out = np.zeros_like(U, dtype=float)
    ok = n > 0
    out[:, ok] = U[:, ok] / n[ok]
    return out


def congruence_matrix(P: FactorModel, Q: FactorModel) -> np.ndarray:
    """Entry (p, q) is |cos a_p,a_q| * |cos b_p,b_q| * |cos c_p,c_q|."""
    if P.shape != Q.shape:
        raise ValueError(f"model shapes differ: {P.shape} vs {Q.shape}")
    S = np.ones((P.rank, Q.rank))
    for U, V in zip(P.factors, Q.factors):
        S *= np.abs(_unit_columns(U).T @ _unit_columns(V))
    return np.clip(S, 0.0, 1.0)


def _exhaustive(S):
    n_p, n_q = S.shape
    best, best_pairs = -1.0, None
    if n_p <= n_q:
        for perm in itertools.permutations(range(n_q), n_p):
            tot = sum(S[p, q] for p, q in enumerate(perm))
            if tot > best + 1e-15:
                best, best_pairs = tot, list(enumerate(perm))
    else:
        for perm in itertools.permutations(range(n_p), n_q):
            tot = sum(S[p, q] for q, p in enumerate(perm))
            if tot > best + 1e-15:
                best, best_pairs = tot, sorted((p, q) for q, p in enumerate(perm))
    return best_pairs


def match_components(P: FactorModel, Q: FactorModel, threshold: float = 0.95) -> ComponentMatching:
    """Assignment of P's components to Q's maximizing total congruence.

    Small problems are solved by enumeration; larger ones by the Hungarian
    method, which is also optimal.
    """
    S = congruence_matrix(P, Q)
    n_p, n_q = S.shape
    lo, hi = min(n_p, n_q), max(n_p, n_q)
    if lo <= 8 and math.perm(hi, lo) <= _EXHAUSTIVE_LIMIT:
        pairs = _exhaustive(S)
    else:
        rows, cols = linear_sum_assignment(S, maximize=True)
        pairs = list(zip(rows.tolist(), cols.tolist()))
    pairs = sorted((int(p), int(q)) for p, q in pairs)
    return ComponentMatching(pairs, [float(S[p, q]) for p, q in pairs], threshold)


def rank_scan(X, mask, max_rank: int, opts: FitOptions, keep_models: bool = False) -> RankCurve:
    """Independent fits for F = 1..max_rank, each with ``opts`` but its own rank."""
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    ranks, res, seeds, models = [], [], [], []
    for F in range(1, max_rank + 1):
        result = fit(X, mask, replace(opts, rank=F))
        ranks.append(F)
        res.append(result.relative_residual)
        seeds.append(result.seed_used)
        models.append(result.model)
        log.info("rank %d: relative residual %.3e", F, result.relative_residual)
    return RankCurve(ranks, res, seeds, models if keep_models else None)


def select_rank(curve: RankCurve, tau: float = 0.01) -> int:
    """Smallest F after which every consecutive improvement is below ``tau``."""
    if not curve.ranks:
        raise ValueError("empty rank curve")
    r = curve.residuals
    chosen = curve.ranks[-1]
    for idx in range(len(r) - 2, -1, -1):
        if r[idx] - r[idx + 1] >= tau:
            break
        chosen = curve.ranks[idx]
    return chosen


def stability_check(X, mask, rank: int, extra: int, opts: FitOptions,
                    threshold: float = 0.95) -> list:
    """Match fits at rank+1..rank+extra back onto the rank-``rank`` fit."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if extra < 1:
        raise ValueError("extra must be >= 1")
    base = fit(X, mask, replace(opts, rank=rank)).model
    out = []
    for F in range(rank + 1, rank + extra + 1):
        bigger = fit(X, mask, replace(opts, rank=F)).model
        out.append(match_components(base, bigger, threshold))
    return out
