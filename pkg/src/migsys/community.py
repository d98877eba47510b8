"""Turn a fitted CP model into ranked migration systems.

Component indices ``f`` are 0-based throughout the Python API. Partition
labels and the ``system`` column of exported tables are 1-based.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import FactorModel

log = logging.getLogger(__name__)

SIDES = ("origin", "destination")


@dataclass
class Partition:
    side: str
    labels: dict          # node id -> community label in 1..F
    source_rank: int
    flagged: list = field(default_factory=list)   # ids of all-zero membership rows
    modularity: float | None = None               # set by graph partitions

    def sizes(self) -> dict:
        out = {}
        for lab in self.labels.values():
            out[lab] = out.get(lab, 0) + 1
        return dict(sorted(out.items()))

    def members(self, label) -> list:
        return [n for n, lab in self.labels.items() if lab == label]


@dataclass
class CommunityReport:
    system_index: int
    rank_by_lambda: int
    weight: float
    top_origins: list          # (node id, membership), non-increasing
    top_destinations: list
    association: np.ndarray    # rows: top origins, cols: top destinations
    profile: np.ndarray        # weight * c_f
    shock_flags: list

    def to_dict(self, periods=None) -> dict:
        labels = list(periods) if periods is not None else list(range(len(self.profile)))
        return {
            "system": self.system_index + 1,
            "rank": self.rank_by_lambda,
            "weight": self.weight,
            "top_origins": [{"id": n, "membership": v} for n, v in self.top_origins],
            "top_destinations": [{"id": n, "membership": v} for n, v in self.top_destinations],
            "association": self.association.tolist(),
            "profile": [{"period": p, "intensity": float(v)} for p, v in zip(labels, self.profile)],
            "shock_periods": [labels[k] for k in self.shock_flags],
        }


def _check_f(model: FactorModel, f: int) -> int:
    if not 0 <= f < model.rank:
        raise ValueError(f"component {f} out of range for rank {model.rank}")
    return int(f)


def _first_active(c: np.ndarray) -> int:
    # First period reaching half of the profile's peak.
    peak = c.max() if c.size else 0.0
    if peak <= 0:
        return len(c)
    return int(np.argmax(c >= 0.5 * peak))


def rank_communities(model: FactorModel) -> np.ndarray:
    """Component order by decreasing weight.

    Ties go to the component whose profile first reaches half its peak
    earlier, then to the lower original index.
    """
    keys = [(-model.weights[f], _first_active(model.C[:, f]), f) for f in range(model.rank)]
    return np.array([k[2] for k in sorted(keys)], dtype=int)


def sort_model(model: FactorModel) -> FactorModel:
    return model.permute(rank_communities(model))


def _ids(ids, n):
    if ids is None:
        return [str(i) for i in range(n)]
    ids = list(ids)
    if len(ids) != n:
        raise ValueError(f"expected {n} node ids, got {len(ids)}")
    return ids


def top_k_members(model: FactorModel, f: int, k: int, side: str = "origin", ids=None) -> list:
    """The ``k`` largest memberships of component ``f`` as (id, value) pairs.

    Ties keep the lower node index first.
    """
    f = _check_f(model, f)
    U = _side_factor(model, side)
    if not 1 <= k <= U.shape[0]:
        raise ValueError(f"k must be in 1..{U.shape[0]}, got {k}")
    ids = _ids(ids, U.shape[0])
    col = U[:, f]
    order = np.argsort(-col, kind="stable")[:k]
    return [(ids[i], float(col[i])) for i in order]


def _side_factor(model, side):
    if side == "origin":
        return model.A
    if side == "destination":
        return model.B
    raise ValueError(f"side must be one of {SIDES}, got {side!r}")


def spatial_association(model: FactorModel, f: int, k: int) -> np.ndarray:
    """k x k block of a_f b_f^T restricted to the top-k origins and destinations."""
    a = np.array([v for _, v in top_k_members(model, f, k, "origin")])
    b = np.array([v for _, v in top_k_members(model, f, k, "destination")])
    return np.outer(a, b)


def temporal_profile(model: FactorModel, f: int) -> np.ndarray:
    f = _check_f(model, f)
    return model.weights[f] * model.C[:, f]


def hard_partition(model: FactorModel, side: str = "origin", ids=None,
                   smooth_k: int = 0) -> Partition:
    """Label each node with the component of its largest membership.

    All-zero rows go to the highest-weight component and are flagged. With
    ``smooth_k > 0`` every node is then reassigned to the majority label of
    its ``smooth_k`` nearest neighbours (Euclidean, in membership space);
    ties keep the node's own label when it is among the tied ones, else the
    smallest tied label.
    """
    U = _side_factor(model, side)
    n, F = U.shape
    ids = _ids(ids, n)
    labels = np.argmax(U, axis=1)
    zero = ~np.any(U > 0, axis=1)
    if np.any(zero):
        labels[zero] = int(np.argmax(model.weights))
        log.warning("%d %s nodes have no membership; assigned to the top component",
                    int(zero.sum()), side)
    if smooth_k > 0 and n > 1:
        k = min(smooth_k, n - 1)
        d = np.linalg.norm(U[:, None, :] - U[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        smoothed = labels.copy()
        for i in range(n):
            nbrs = np.argsort(d[i], kind="stable")[:k]
            counts = np.bincount(labels[nbrs], minlength=F)
            tied = np.flatnonzero(counts == counts.max())
            smoothed[i] = labels[i] if labels[i] in tied else tied[0]
        labels = smoothed
    return Partition(
        side=side,
        labels={ids[i]: int(labels[i]) + 1 for i in range(n)},
        source_rank=F,
        flagged=[ids[i] for i in np.flatnonzero(zero)],
    )


def detect_shock(profile, z: float = 3.0) -> list:
    """Periods with an abnormal jump in a temporal profile.

    First differences d[k] = p[k] - p[k-1] are robust z-scored against their
    median, with scale 1.4826 * MAD. A difference is abnormal when its
    deviation exceeds ``z`` scales (any nonzero deviation when the MAD is 0).
    Abnormal jump at k followed by an abnormal jump of opposite sign at k+1
    is a one-period spike and is reported once, at k. Any other abnormal
    jump reports the period it lands in.
    """
    p = np.asarray(profile, dtype=float).reshape(-1)
    if p.size < 4:
        raise ValueError("shock detection needs at least 4 periods")
    d = np.diff(p)
    dev = d - np.median(d)
    scale = 1.4826 * np.median(np.abs(dev))
    tiny = 1e-12 * max(np.abs(p).max(), 1.0)
    if scale > tiny:
        hit = np.abs(dev) > z * scale
    else:
        hit = np.abs(dev) > tiny
    flags = []
    m = 0
    while m < d.size:
        if hit[m]:
            flags.append(m + 1)
            if m + 1 < d.size and hit[m + 1] and np.sign(dev[m + 1]) == -np.sign(dev[m]):
                m += 2
                continue
        m += 1
    return flags


def build_report(model: FactorModel, f: int, k: int, origin_ids=None, dest_ids=None,
                 z: float = 3.0) -> CommunityReport:
    """Report for component ``f`` of a weight-sorted model."""
    f = _check_f(model, f)
    order = rank_communities(model)
    rank = int(np.flatnonzero(order == f)[0]) + 1
    origins = top_k_members(model, f, k, "origin", origin_ids)
    dests = top_k_members(model, f, k, "destination", dest_ids)
    prof = temporal_profile(model, f)
    flags = detect_shock(prof, z) if prof.size >= 4 else []
    return CommunityReport(
        system_index=f,
        rank_by_lambda=rank,
        weight=float(model.weights[f]),
        top_origins=origins,
        top_destinations=dests,
        association=np.outer([v for _, v in origins], [v for _, v in dests]),
        profile=prof,
        shock_flags=flags,
    )
