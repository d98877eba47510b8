"""Dense third-order tensor kernels used by the masked CP solver.

Index order is always (origin i, destination j, period k). Unfoldings use the
k-major column convention::

    mode 1:  X1[i, k*J + j] = X[i, j, k]     (I x JK)
    mode 2:  X2[j, k*I + i] = X[i, j, k]     (J x IK)
    mode 3:  X3[k, j*I + i] = X[i, j, k]     (K x IJ)

so that ``unfold(X, 1) == A @ khatri_rao(C, B).T`` for a weightless CP model,
and analogously ``khatri_rao(C, A)`` for mode 2 and ``khatri_rao(B, A)`` for
mode 3. Modes are 1-based to match that notation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def as_flow_tensor(X) -> np.ndarray:
    """Validate and return ``X`` as a float64 origin x destination x period array."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 3:
        raise ValueError(f"flow tensor must be 3-way, got ndim={X.ndim}")
    if min(X.shape) < 1:
        raise ValueError(f"flow tensor dims must be positive, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("flow tensor contains non-finite values")
    if np.any(X < 0):
        raise ValueError("flow tensor contains negative values")
    return np.ascontiguousarray(X)


@dataclass
class MaskSpec:
    """Binary participation weights for the fit.

    ``kind="diagonal-off"`` is the compact rule W(i, j, k) = 0 iff i == j.
    ``kind="explicit"`` carries an arbitrary 0/1 array in ``weights``.
    """

    shape: tuple
    kind: str = "diagonal-off"
    weights: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"bad mask shape {self.shape}")
        if self.kind == "diagonal-off":
            if self.weights is not None:
                raise ValueError("diagonal-off mask takes no explicit weights")
        elif self.kind == "explicit":
            W = np.asarray(self.weights, dtype=float)
            if W.shape != self.shape:
                raise ValueError(f"weights shape {W.shape} != {self.shape}")
            if not np.all((W == 0) | (W == 1)):
                raise ValueError("mask weights must be 0 or 1")
            self.weights = W
        else:
            raise ValueError(f"unknown mask kind {self.kind!r}")

    @classmethod
    def diagonal_off(cls, shape) -> "MaskSpec":
        return cls(tuple(shape), "diagonal-off")

    @classmethod
    def explicit(cls, weights) -> "MaskSpec":
        weights = np.asarray(weights, dtype=float)
        return cls(weights.shape, "explicit", weights)

    @property
    def is_diagonal(self) -> bool:
        return self.kind == "diagonal-off"

    def dense(self) -> np.ndarray:
        if self.kind == "explicit":
            return self.weights
        I, J, K = self.shape
        W = np.ones(self.shape)
        n = min(I, J)
        W[np.arange(n), np.arange(n), :] = 0.0
        return W

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Return a copy of ``X`` with masked entries set to zero."""
        if X.shape != self.shape:
            raise ValueError(f"tensor shape {X.shape} does not match mask {self.shape}")
        if self.kind == "explicit":
            return X * self.weights
        out = np.array(X, dtype=float, copy=True)
        n = min(self.shape[0], self.shape[1])
        out[np.arange(n), np.arange(n), :] = 0.0
        return out


@dataclass
class FactorModel:
    """Nonnegative CP model: sum_f weights[f] * A[:, f] o B[:, f] o C[:, f]."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        for name, U in zip("ABC", self.factors):
            if U.ndim != 2:
                raise ValueError(f"factor {name} must be a matrix")
        F = self.A.shape[1]
        if self.B.shape[1] != F or self.C.shape[1] != F:
            raise ValueError(
                f"factor column counts disagree: {self.A.shape[1]}, "
                f"{self.B.shape[1]}, {self.C.shape[1]}"
            )
        if self.weights is None:
            self.weights = np.ones(F)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.weights.shape != (F,):
            raise ValueError(f"weights must have length {F}")

    @property
    def factors(self) -> tuple:
        return self.A, self.B, self.C

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def shape(self) -> tuple:
        return self.A.shape[0], self.B.shape[0], self.C.shape[0]

    def copy(self) -> "FactorModel":
        return FactorModel(self.A.copy(), self.B.copy(), self.C.copy(), self.weights.copy())

    def permute(self, order) -> "FactorModel":
        order = np.asarray(order, dtype=int)
        return FactorModel(
            self.A[:, order], self.B[:, order], self.C[:, order], self.weights[order]
        )

    def with_factor(self, mode: int, U: np.ndarray) -> "FactorModel":
        facs = list(self.factors)
        facs[_check_mode(mode) - 1] = U
        return FactorModel(*facs, weights=self.weights.copy())


def _check_mode(mode) -> int:
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    return int(mode)


def rank_one(a, b, c) -> np.ndarray:
    """Outer product a o b o c."""
    a, b, c = (np.asarray(v, dtype=float).reshape(-1) for v in (a, b, c))
    if min(a.size, b.size, c.size) == 0:
        raise ValueError("rank_one vectors must be non-empty")
    return np.einsum("i,j,k->ijk", a, b, c)


def compose(model: FactorModel) -> np.ndarray:
    """Dense reconstruction of a CP model."""
    I, J, K = model.shape
    AB = ((model.A * model.weights)[:, None, :] * model.B[None, :, :]).reshape(I * J, -1)
    return (AB @ model.C.T).reshape(I, J, K)


def masked_residual(X, model: FactorModel, mask: MaskSpec) -> float:
    """Frobenius norm of W * (X - compose(model))."""
    X = np.asarray(X, dtype=float)
    if X.shape != model.shape:
        raise ValueError(f"tensor shape {X.shape} does not match model {model.shape}")
    if mask.shape != X.shape:
        raise ValueError(f"mask shape {mask.shape} does not match tensor {X.shape}")
    return float(np.linalg.norm(mask.apply(X - compose(model))))


def unfold(X, mode: int) -> np.ndarray:
    """Mode-n matricization with k-major columns (see module docstring)."""
    X = np.asarray(X)
    if X.ndim != 3:
        raise ValueError("unfold expects a 3-way array")
    mode = _check_mode(mode)
    I, J, K = X.shape
    if mode == 1:
        return X.transpose(0, 2, 1).reshape(I, K * J)
    if mode == 2:
        return X.transpose(1, 2, 0).reshape(J, K * I)
    return X.transpose(2, 1, 0).reshape(K, J * I)


def fold(M, mode: int, shape) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    M = np.asarray(M)
    mode = _check_mode(mode)
    I, J, K = shape
    if mode == 1:
        return M.reshape(I, K, J).transpose(0, 2, 1)
    if mode == 2:
        return M.reshape(J, K, I).transpose(2, 0, 1)
    return M.reshape(K, J, I).transpose(2, 1, 0)


def khatri_rao(U, V) -> np.ndarray:
    """Column-wise Kronecker product; column f is kron(U[:, f], V[:, f])."""
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    if U.ndim != 2 or V.ndim != 2:
        raise ValueError("khatri_rao expects matrices")
    if U.shape[1] != V.shape[1]:
        raise ValueError(f"column counts differ: {U.shape[1]} vs {V.shape[1]}")
    m, F = U.shape
    n = V.shape[0]
    return (U[:, None, :] * V[None, :, :]).reshape(m * n, F)


def _other_factors(model: FactorModel, mode: int):
    A, B, C = model.factors
    if mode == 1:
        return C, B
    if mode == 2:
        return C, A
    return B, A


def mttkrp(X, model: FactorModel, mode: int) -> np.ndarray:
    """unfold(X, mode) @ khatri_rao(<other factors>), weights ignored.

    Evaluated by contraction rather than by forming the Khatri-Rao product.
    """
    X = np.asarray(X, dtype=float)
    mode = _check_mode(mode)
    if X.shape != model.shape:
        raise ValueError(f"tensor shape {X.shape} does not match model {model.shape}")
    A, B, C = model.factors
    I, J, K = X.shape
    flat = X.reshape(I * J, K)
    if mode == 3:
        return flat.T @ (A[:, None, :] * B[None, :, :]).reshape(I * J, -1)
    T = (flat @ C).reshape(I, J, -1)
    if mode == 1:
        return np.einsum("ijf,jf->if", T, B)
    return np.einsum("ijf,if->jf", T, A)


def mttkrp_dense(X, model: FactorModel, mode: int) -> np.ndarray:
    """Reference MTTKRP through the explicit unfolding and Khatri-Rao product."""
    mode = _check_mode(mode)
    return unfold(X, mode) @ khatri_rao(*_other_factors(model, mode))
