"""Nonnegative CP fitting under a binary weight mask by alternating HALS sweeps.

The objective is ``|| W * (X - sum_f lambda_f a_f o b_f o c_f) ||_F``. Each
block update is an exact nonnegative coordinate descent sweep over the
columns of one factor, so the masked loss never increases.

Two mask strategies are supported:

``exact-masked``
    Every row of the unfolded problem gets its own Gram matrix with the
    masked columns removed. For the diagonal-off mask these are rank-one
    corrections of the usual Hadamard-product Gram, so the cost is close to
    an unmasked sweep.
``em-impute``
    Masked cells are filled with the current reconstruction, then a plain
    unmasked sweep is run. This is a majorize-minimize step and is therefore
    also monotone, but it converges more slowly.
"""

from __future__ import annotations

import contextvars
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import NumericalError
from .tensor import FactorModel, MaskSpec, as_flow_tensor, compose, masked_residual, mttkrp

log = logging.getLogger(__name__)

MASK_STRATEGIES = ("exact-masked", "em-impute")

# "uniform": every restart starts from init_factors.
# "residual": every restart starts from residual_init.
# "mixed": the first restart uses residual_init, the others init_factors.
INIT_SCHEMES = ("mixed", "uniform", "residual")

# Scale of the noise used to revive a dead component column.
_RESET_SCALE = 1e-2
# No escape attempts once the relative masked residual is this small.
_ESCAPE_FLOOR = 1e-10
# A merge counts as loss-neutral below this relative residual.
_MERGE_SLACK = 1e-13


@dataclass
class FitOptions:
    rank: int
    max_outer_iters: int = 500
    tol: float = 1e-7
    restarts: int = 5
    seed: int = 0
    mask_strategy: str = "exact-masked"
    inner_iters: int = 1
    threads: int = 1
    init: str = "mixed"
    # Local-minimum escape rounds per restart, and HALS iterations per trial.
    escapes: int = 3
    escape_iters: int = 100
    # Components whose columns in one mode agree to this cosine are
    # candidates for merging into one.
    merge_cos: float = 0.99

    def __post_init__(self):
        if int(self.rank) < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if int(self.restarts) < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if int(self.max_outer_iters) < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if int(self.inner_iters) < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ValueError(f"mask_strategy must be one of {MASK_STRATEGIES}")
        if int(self.threads) < 1:
            raise ValueError("threads must be >= 1")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}")


@dataclass
class FitResult:
    model: FactorModel
    loss_trace: list
    converged: bool
    iterations_used: int
    seed_used: int
    relative_residual: float
    # One loss trace per restart, in restart order.
    restart_traces: list = field(default_factory=list, repr=False)
    restart_seeds: list = field(default_factory=list, repr=False)


def init_factors(I: int, J: int, K: int, F: int, seed: int) -> FactorModel:
    """Uniform(0, 1) factors from numpy's PCG64 generator seeded with ``seed``.

    A, then B, then C are drawn from the same stream; weights are all one.
    """
    if min(I, J, K, F) < 1:
        raise ValueError("dimensions and rank must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    A = rng.random((I, F))
    B = rng.random((J, F))
    C = rng.random((K, F))
    return FactorModel(A, B, C, np.ones(F))


def _rank_one_fit(R, mask, W, rng, power_iters=10, refine_iters=30):
    """Masked nonnegative rank-one fit of a residual ``R`` (already masked).

    Power iterations on max(R, 0) from a seeded random start, refined by
    masked HALS sweeps. Returns column vectors (a, b, c), or None when no
    nonnegative rank-one term reduces ``||W * R||``.
    """
    I, J, K = R.shape
    Rp = np.maximum(R, 0.0)
    a, b, c = rng.random(I), rng.random(J), rng.random(K)
    for _ in range(power_iters):
        a = np.einsum("ijk,j,k->i", Rp, b, c)
        a /= np.linalg.norm(a) or 1.0
        b = np.einsum("ijk,i,k->j", Rp, a, c)
        b /= np.linalg.norm(b) or 1.0
        c = np.einsum("ijk,i,j->k", Rp, a, b)
        c /= np.linalg.norm(c) or 1.0
    T = mask.apply(np.einsum("i,j,k->ijk", a, b, c))
    tt = float(np.vdot(T, T))
    step = float(np.vdot(R, T)) / tt if tt > 0 else 0.0
    if step <= 0:
        return None
    s = step ** (1.0 / 3.0)
    piece = [(s * a)[:, None], (s * b)[:, None], (s * c)[:, None]]
    for _ in range(refine_iters):
        for mode in (1, 2, 3):
            _update(R, mask, W, piece, mode, "exact-masked", rng, 1)
        _rebalance(piece)
    a, b, c = (U[:, 0] for U in piece)
    if not (np.any(a > 0) and np.any(b > 0) and np.any(c > 0)):
        return None
    return a, b, c


def residual_init(Xw, mask: MaskSpec, F: int, seed: int) -> FactorModel:
    """Greedy start: component f is a masked nonnegative rank-one fit of the
    residual left by components 0..f-1.

    ``Xw`` must already be masked. A component that cannot reduce the
    residual is seeded with small Uniform(0, 1) columns instead.
    """
    I, J, K = Xw.shape
    rng = np.random.Generator(np.random.PCG64(seed))
    W = None if mask.is_diagonal else mask.dense()
    A, B, C = np.zeros((I, F)), np.zeros((J, F)), np.zeros((K, F))
    current = np.zeros_like(Xw)
    for f in range(F):
        piece = _rank_one_fit(Xw - mask.apply(current), mask, W, rng)
        if piece is None:
            log.info("residual start: component %d seeded with noise", f)
            scale = 0.1 * (np.abs(Xw).max() or 1.0) ** (1.0 / 3.0)
            piece = scale * rng.random(I), scale * rng.random(J), scale * rng.random(K)
        A[:, f], B[:, f], C[:, f] = piece
        current += np.einsum("i,j,k->ijk", *piece)
    return FactorModel(A, B, C)


def normalize(model: FactorModel) -> FactorModel:
    """Scale every factor column to unit norm, moving the scale into the weights.

    Components with a zero column get weight 0 and keep their zero column;
    the event is logged.
    """
    A, B, C = (U.copy() for U in model.factors)
    w = model.weights.copy()
    for f in range(model.rank):
        norms = [np.linalg.norm(U[:, f]) for U in (A, B, C)]
        if min(norms) == 0.0:
            log.warning("component %d has a zero factor column; weight set to 0", f)
            w[f] = 0.0
            for U, n in zip((A, B, C), norms):
                if n == 0.0:
                    U[:, f] = 0.0
            continue
        for U, n in zip((A, B, C), norms):
            U[:, f] /= n
        w[f] *= norms[0] * norms[1] * norms[2]
    return FactorModel(A, B, C, w)


def _rebalance(factors):
    # Equalize column norms across modes; leaves the model unchanged.
    norms = np.stack([np.linalg.norm(U, axis=0) for U in factors])
    ok = np.all(norms > 0, axis=0)
    if not np.any(ok):
        return
    target = np.prod(norms[:, ok], axis=0) ** (1.0 / 3.0)
    for U, n in zip(factors, norms):
        U[:, ok] *= target / n[ok]


def _excluded_outer_sums(U, rows):
    """E[i] = sum_{j != i} outer(U[j], U[j]) for i < len(U), full sum beyond.

    Prefix and suffix sums avoid the cancellation of ``total - outer(U[i])``
    when row i dominates its column.
    """
    n, F = U.shape
    outer = np.einsum("jf,jg->jfg", U, U)
    prefix = np.zeros((n + 1, F, F))
    np.cumsum(outer, axis=0, out=prefix[1:])
    suffix = np.zeros((n + 1, F, F))
    np.cumsum(outer[::-1], axis=0, out=suffix[1:])
    suffix = suffix[::-1]
    E = np.empty((rows, F, F))
    m = min(rows, n)
    E[:m] = prefix[:m] + suffix[1:m + 1]
    E[m:] = prefix[n]
    return E


def _gram_diag_off(mode, A, B, C):
    """Gram matrices for the diagonal-off mask.

    Modes 1 and 2 get one (F, F) matrix per row, built from the other
    spatial factor with the row's own index left out. Mode 3 gets one shared
    (F, F) matrix since every period drops the same cells.
    """
    if mode == 3:
        return np.einsum("if,ig,ifg->fg", A, A, _excluded_outer_sums(B, A.shape[0]))
    other = B if mode == 1 else A
    rows = A.shape[0] if mode == 1 else B.shape[0]
    return _excluded_outer_sums(other, rows) * (C.T @ C)


def _gram_explicit(mode, W, A, B, C):
    if mode == 1:
        return np.einsum("ijk,jf,kf,jg,kg->ifg", W, B, C, B, C, optimize=True)
    if mode == 2:
        return np.einsum("ijk,if,kf,ig,kg->jfg", W, A, C, A, C, optimize=True)
    return np.einsum("ijk,if,jf,ig,jg->kfg", W, A, B, A, B, optimize=True)


def _gram_plain(mode, A, B, C):
    if mode == 1:
        return (B.T @ B) * (C.T @ C)
    if mode == 2:
        return (A.T @ A) * (C.T @ C)
    return (A.T @ A) * (B.T @ B)


def _hals_sweep(U, M, G, rng, mode, sweeps):
    """In-place nonnegative coordinate descent over the columns of U.

    ``G`` is either one (F, F) Gram shared by all rows or a (rows, F, F)
    stack of per-row Grams.
    """
    F = U.shape[1]
    shared = G.ndim == 2
    for _ in range(sweeps):
        for f in range(F):
            if shared:
                gff = G[f, f]
                if gff <= 0.0:
                    _reset_column(U, f, rng, mode)
                    continue
                step = (M[:, f] - U @ G[:, f]) / gff
                U[:, f] = np.maximum(0.0, U[:, f] + step)
            else:
                gff = G[:, f, f]
                live = gff > 0.0
                if not np.any(live):
                    _reset_column(U, f, rng, mode)
                    continue
                num = M[:, f] - np.einsum("ig,ig->i", U, G[:, :, f])
                step = np.zeros_like(num)
                step[live] = num[live] / gff[live]
                U[:, f] = np.maximum(0.0, U[:, f] + step)
                # Entries that only touch masked cells are unobservable; park them at 0.
                U[~live, f] = 0.0


# Per-call reset counter so one summary warning replaces a warning per sweep.
_RESETS = contextvars.ContextVar("migsys_resets", default=None)


def _reset_column(U, f, rng, mode):
    # The other two factors annihilate this component, so any value is loss-neutral.
    log.debug("degenerate component %d in mode %d; column re-seeded with noise", f, mode)
    box = _RESETS.get()
    if box is not None:
        box[0] += 1
    scale = _RESET_SCALE * (np.abs(U).max() if U.size and np.abs(U).max() > 0 else 1.0)
    U[:, f] = scale * rng.random(U.shape[0])


def _update(Xw, mask, W, factors, mode, strategy, rng, sweeps):
    """Update factors[mode - 1] in place. ``factors`` carry the weights already."""
    A, B, C = factors
    U = factors[mode - 1]
    work = FactorModel(A, B, C)
    if strategy == "em-impute":
        Xhat = compose(work)
        filled = Xw + (Xhat - mask.apply(Xhat))
        M = mttkrp(filled, work, mode)
        G = _gram_plain(mode, A, B, C)
    else:
        M = mttkrp(Xw, work, mode)
        if mask.is_diagonal:
            G = _gram_diag_off(mode, A, B, C)
        else:
            G = _gram_explicit(mode, W, A, B, C)
    _hals_sweep(U, M, G, rng, mode, sweeps)


def update_factor(X, mask: MaskSpec, model: FactorModel, mode: int,
                  strategy: str = "exact-masked", sweeps: int = 1, seed: int = 0) -> np.ndarray:
    """One HALS block update of factor ``mode`` (1=A, 2=B, 3=C).

    The model's weights are held fixed; the returned matrix is the new factor
    such that ``model.with_factor(mode, result)`` has masked loss no larger
    than ``model``.
    """
    X = as_flow_tensor(X)
    if X.shape != model.shape or mask.shape != X.shape:
        raise ValueError("tensor, mask and model shapes must agree")
    if strategy not in MASK_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    w = model.weights
    scale = np.where(w > 0, w, 1.0)
    factors = [U.copy() for U in model.factors]
    factors[mode - 1] = factors[mode - 1] * scale
    W = None if mask.is_diagonal else mask.dense()
    box = [0]
    token = _RESETS.set(box)
    try:
        _update(mask.apply(X), mask, W, factors, mode, strategy,
                np.random.default_rng(seed), sweeps)
    finally:
        _RESETS.reset(token)
    if box[0]:
        log.warning("degenerate component in mode %d; %d column(s) re-seeded with noise",
                    mode, box[0])
    return factors[mode - 1] / scale


def _masked_loss(Xw, mask, factors):
    return float(np.linalg.norm(mask.apply(Xw - compose(FactorModel(*factors)))))


def _descend(Xw, mask, W, factors, opts, rng, start_loss, max_iters, trace=None):
    """HALS outer iterations until the relative loss change drops below tol.

    Appends each iteration's loss to ``trace`` when given. Returns
    (final loss, converged, iterations run).
    """
    prev = start_loss
    for it in range(max_iters):
        for mode in (1, 2, 3):
            _update(Xw, mask, W, factors, mode, opts.mask_strategy, rng, opts.inner_iters)
        _rebalance(factors)
        cur = _masked_loss(Xw, mask, factors)
        if not np.isfinite(cur):
            raise NumericalError(f"non-finite loss after {it + 1} iterations")
        if trace is not None:
            trace.append(cur)
        done = cur == 0.0 or (prev - cur) <= opts.tol * prev
        prev = cur
        if done:
            return cur, True, it + 1
    return prev, False, max_iters


def _escape(Xw, mask, W, factors, opts, rng, loss):
    """Try to leave a local minimum by swapping one component for a rank-one
    fit of the residual.

    Candidates are tried weakest component first. Each trial is descended on
    a copy and accepted only if it ends strictly below ``loss``. Returns the
    accepted (factors, loss) or None.
    """
    R = Xw - mask.apply(compose(FactorModel(*factors)))
    piece = _rank_one_fit(R, mask, W, rng)
    if piece is None:
        return None
    strength = np.prod([np.linalg.norm(U, axis=0) for U in factors], axis=0)
    for f in np.argsort(strength, kind="stable"):
        trial = [U.copy() for U in factors]
        for U, v in zip(trial, piece):
            U[:, f] = v
        start = _masked_loss(Xw, mask, trial)
        end, _, _ = _descend(Xw, mask, W, trial, opts, rng, start, opts.escape_iters)
        if end < loss * (1.0 - 1e-9):
            return trial, end
    return None


def _unit(U):
    n = np.linalg.norm(U, axis=0)
    return np.divide(U, n, out=np.zeros_like(U), where=n > 0), n


def _merge_candidates(factors, cos_min, limit=4):
    """Groups of components that share one mode's column direction.

    Every connected group (cosine >= ``cos_min`` in that mode) is a
    candidate, larger groups first, followed by the pairs inside groups of
    three or more. Returns at most ``limit`` (members, shared mode) tuples.
    """
    F = factors[0].shape[1]
    if F < 2:
        return []
    groups, pairs = [], []
    for mode, U in enumerate(factors):
        V, n = _unit(U)
        close = (V.T @ V) >= cos_min
        close &= np.outer(n > 0, n > 0)
        np.fill_diagonal(close, False)
        _, labels = connected_components(close.astype(int), directed=False)
        for lab in np.unique(labels):
            members = np.flatnonzero(labels == lab)
            if members.size < 2:
                continue
            groups.append((tuple(int(m) for m in members), mode))
            if members.size > 2:
                pairs += [((int(p), int(q)), mode) for p, q in zip(*np.nonzero(np.triu(close)))
                          if p in members and q in members]
    groups.sort(key=lambda g: (-len(g[0]), g[0], g[1]))
    out = []
    for cand in groups + pairs:
        if cand not in out:
            out.append(cand)
    return out[:limit]


def _merge(factors, members, shared):
    """Replace ``members`` by one component.

    The shared mode gets the norm-weighted mean direction; the other two
    modes get the leading singular pair of the members' summed contribution
    (nonnegative for a nonnegative matrix). The first member keeps the
    merged column; the others are dropped. Exact when the summed
    contribution is rank one.
    """
    out = [U.copy() for U in factors]
    m1, m2 = [m for m in range(3) if m != shared]
    V, n = _unit(factors[shared])
    M = sum(n[q] * np.outer(factors[m1][:, q], factors[m2][:, q]) for q in members)
    u, sv, vt = np.linalg.svd(M, full_matrices=False)
    direction = sum(n[q] * V[:, q] for q in members)
    direction /= np.linalg.norm(direction)
    p = members[0]
    out[shared][:, p] = direction
    out[m1][:, p] = np.sqrt(sv[0]) * np.abs(u[:, 0])
    out[m2][:, p] = np.sqrt(sv[0]) * np.abs(vt[0])
    keep = [f for f in range(out[0].shape[1]) if f not in members[1:]]
    return [U[:, keep] for U in out]


def _try_merge(Xw, mask, W, factors, opts, rng, loss, data_norm):
    """Collapse components that model the same system.

    Each candidate group is merged and the smaller model polished. If it is
    no worse than ``loss`` the freed columns are offered to the residual
    (see ``_escape``) and otherwise left at zero. Failing every candidate,
    the first one's freed column is offered to the residual against
    ``loss``. Returns the accepted (factors, loss) or None.
    """
    fallback = None
    for members, shared in _merge_candidates(factors, opts.merge_cos):
        merged = _merge(factors, members, shared)
        start = _masked_loss(Xw, mask, merged)
        end, _, _ = _descend(Xw, mask, W, merged, opts, rng, start, opts.escape_iters)
        full = merged
        for q in sorted(members[1:]):
            full = [np.insert(U, q, 0.0, axis=1) for U in full]
        if end <= max(loss, _MERGE_SLACK * data_norm):
            while end > _ESCAPE_FLOOR * data_norm and _has_empty_column(full):
                moved = _escape(Xw, mask, W, full, opts, rng, end)
                if moved is None:
                    break
                full, end = moved
            if _has_empty_column(full):
                log.info("components %s described one system; merged", list(members))
            return full, end
        if fallback is None:
            fallback = full
    if fallback is None:
        return None
    return _escape(Xw, mask, W, fallback, opts, rng, loss)


def _has_empty_column(factors):
    return bool(np.any(np.all(factors[0] == 0.0, axis=0)))


def _run(Xw, mask, W, opts, seed, data_norm, residual_start):
    I, J, K = Xw.shape
    if residual_start:
        start = residual_init(Xw, mask, opts.rank, seed)
    else:
        start = init_factors(I, J, K, opts.rank, seed)
        # Match the initial model's masked norm to the data.
        model_norm = np.linalg.norm(mask.apply(compose(start)))
        if data_norm > 0 and model_norm > 0:
            s = (data_norm / model_norm) ** (1.0 / 3.0)
            start = FactorModel(start.A * s, start.B * s, start.C * s)
    factors = [start.A, start.B, start.C]
    rng = np.random.default_rng(seed)

    trace = [_masked_loss(Xw, mask, factors)]
    budget = opts.max_outer_iters
    escapes = opts.escapes
    while True:
        cur, converged, used = _descend(Xw, mask, W, factors, opts, rng, trace[-1], budget, trace)
        budget -= used
        # Merges and escapes are tried at convergence and also when the
        # budget runs out on a slow plateau.
        if escapes == 0:
            break
        moved = _try_merge(Xw, mask, W, factors, opts, rng, cur, data_norm)
        if moved is None and cur > _ESCAPE_FLOOR * data_norm:
            moved = _escape(Xw, mask, W, factors, opts, rng, cur)
        if moved is None:
            break
        escapes -= 1
        factors, cur = moved
        trace.append(cur)
        if budget == 0:
            converged = False
        if _has_empty_column(factors):
            # The merge already offered the freed column to the residual;
            # more HALS would only re-seed it with noise.
            break
    return FactorModel(*factors), trace, converged


def fit(X, mask: MaskSpec, opts: FitOptions) -> FitResult:
    """Best-of-``restarts`` masked nonnegative CP fit.

    Restart ``r`` is seeded with ``opts.seed + r`` and started according
    to ``opts.init``. The returned model is
    normalized and sorted by decreasing weight; ties in final loss go to the
    lowest seed.
    """
    try:
        X = as_flow_tensor(X)
    except ValueError as exc:
        raise ValueError(f"invalid flow tensor: {exc}") from None
    if mask.shape != X.shape:
        raise ValueError(f"mask shape {mask.shape} does not match tensor {X.shape}")
    I, J, K = X.shape
    if opts.rank >= min(I * J, I * K, J * K):
        raise ValueError(
            f"rank {opts.rank} over-parameterizes a {I}x{J}x{K} tensor"
        )
    Xw = mask.apply(X)
    W = None if mask.is_diagonal else mask.dense()
    data_norm = float(np.linalg.norm(Xw))
    seeds = [int(opts.seed) + r for r in range(opts.restarts)]

    def job(r):
        residual_start = opts.init == "residual" or (opts.init == "mixed" and r == 0)
        return _run(Xw, mask, W, opts, seeds[r], data_norm, residual_start)

    box = [0]
    token = _RESETS.set(box)
    try:
        if opts.threads > 1 and len(seeds) > 1:
            ctx = contextvars.copy_context()
            with ThreadPoolExecutor(max_workers=opts.threads) as pool:
                runs = list(pool.map(lambda r: ctx.copy().run(job, r), range(len(seeds))))
        else:
            runs = [job(r) for r in range(len(seeds))]
    finally:
        _RESETS.reset(token)
    # Routine during restarts; a column that stays dead is warned about by normalize().
    if box[0]:
        log.info("%d degenerate component column(s) were re-seeded with noise during the fit",
                 box[0])

    best = min(range(len(runs)), key=lambda r: (runs[r][1][-1], seeds[r]))
    model, trace, converged = runs[best]
    # Local import: community analysis depends on this module's normalize().
    from .community import sort_model

    model = sort_model(normalize(model))
    final = masked_residual(X, model, mask)
    rel = final / data_norm if data_norm > 0 else 0.0
    return FitResult(
        model=model,
        loss_trace=trace,
        converged=converged,
        iterations_used=len(trace) - 1,
        seed_used=seeds[best],
        relative_residual=rel,
        restart_traces=[r[1] for r in runs],
        restart_seeds=seeds,
    )


def default_threads() -> int:
    """Thread count from ``MIGSYS_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("MIGSYS_THREADS", "1")))
    except ValueError:
        return 1
