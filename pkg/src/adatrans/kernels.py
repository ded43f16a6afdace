"""Base kernels, transfer factors and transferable Gram matrices.

A transferable kernel multiplies the base similarity of two points by a
factor that depends only on the populations the points come from::

    kappa(u@a, v@b) = Lambda[a, b] * k(u, v),   Lambda[a, a] = 1

``Lambda`` is the Gram matrix of unit vectors with non-negative entries, so
it is PSD with entries in [0, 1] and every transferable Gram is the Schur
product of two PSD matrices.  Row ``a`` of the factor is built by
stick-breaking from ``a`` logits; its first coordinate is ``sigmoid`` of the
first logit, which makes the target/source factor ``Lambda[0, a]`` exactly
``sigmoid(logit)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit

from .errors import DimMismatch

JITTER = 1e-6

L1_LAMBDA = "L1_lambda"
L2_DELTA = "L2_delta"
L3_ETA = "L3_eta"


@dataclass(frozen=True)
class BaseKernelSpec:
    family: str = "rbf"
    lengthscale: float = 1.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.family not in ("rbf", "linear"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not (self.lengthscale > 0 and self.amplitude > 0):
            raise ValueError("lengthscale and amplitude must be positive")

    def with_lengthscale(self, ls: float) -> "BaseKernelSpec":
        return BaseKernelSpec(self.family, float(ls), self.amplitude)


def base_eval(spec: BaseKernelSpec, u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise DimMismatch(f"points have shapes {u.shape} and {v.shape}")
    if spec.family == "rbf":
        d2 = float(np.sum((u - v) ** 2))
        return spec.amplitude * float(np.exp(-d2 / (2.0 * spec.lengthscale ** 2)))
    return spec.amplitude * (float(u @ v) + 1.0)


def sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at zero."""
    a2 = np.einsum("ij,ij->i", A, A)
    b2 = np.einsum("ij,ij->i", B, B)
    d2 = a2[:, None] + b2[None, :] - 2.0 * (A @ B.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def base_gram(spec: BaseKernelSpec, A: np.ndarray, B: np.ndarray,
              d2: Optional[np.ndarray] = None) -> np.ndarray:
    if A.shape[1] != B.shape[1]:
        raise DimMismatch(f"point dims {A.shape[1]} and {B.shape[1]} differ")
    if spec.family == "rbf":
        if d2 is None:
            d2 = sqdist(A, B)
        return spec.amplitude * np.exp(d2 * (-0.5 / spec.lengthscale ** 2))
    return spec.amplitude * (A @ B.T + 1.0)


# ---------------------------------------------------------------- transfer factors


def n_free_factors(m: int) -> int:
    return m * (m + 1) // 2


def _logit_index(a: int, k: int) -> int:
    # row a (1..m) owns logits for coordinates k = 0..a-1
    return (a - 1) * a // 2 + k


@dataclass(frozen=True, eq=False)
class TransferFactors:
    """Cross-population coefficients for one transfer level.

    ``logits`` has ``m(m+1)/2`` entries.  ``fixed`` pins every off-diagonal
    value: 1 (pool everything), 0 (no transfer) or any explicit matrix.
    """

    level: str
    n_pops: int
    logits: Optional[np.ndarray] = None
    fixed: Optional[np.ndarray] = None

    def __post_init__(self):
        m = self.n_pops - 1
        if self.fixed is not None:
            F = np.asarray(self.fixed, dtype=float)
            if F.ndim == 0:
                F = np.full((self.n_pops, self.n_pops), float(F))
                np.fill_diagonal(F, 1.0)
            if F.shape != (self.n_pops, self.n_pops) or not np.allclose(F, F.T) \
                    or np.any(np.diag(F) != 1.0) or np.any(F < 0) or np.any(F > 1):
                raise ValueError("fixed factors must be symmetric in [0,1] with unit diagonal")
            object.__setattr__(self, "fixed", F)
            object.__setattr__(self, "logits", None)
        else:
            th = np.zeros(n_free_factors(m)) if self.logits is None else \
                np.asarray(self.logits, dtype=float).reshape(-1)
            if th.shape != (n_free_factors(m),):
                raise ValueError(f"expected {n_free_factors(m)} logits, got {th.shape}")
            object.__setattr__(self, "logits", th)

    @classmethod
    def pinned(cls, level: str, n_pops: int, value: float) -> "TransferFactors":
        return cls(level, n_pops, fixed=np.asarray(float(value)))

    @property
    def learnable(self) -> bool:
        return self.fixed is None

    @property
    def n_free(self) -> int:
        return n_free_factors(self.n_pops - 1)

    def with_logits(self, logits) -> "TransferFactors":
        return TransferFactors(self.level, self.n_pops, logits=logits)

    def rows(self) -> Tuple[np.ndarray, np.ndarray]:
        """Unit row vectors ``R`` (Lambda = R R^T) and their logit Jacobian.

        Jacobian has shape ``(n_free, n_pops, n_pops)``: entry ``[t, a, j]``
        is the derivative of ``R[a, j]`` with respect to logit ``t``.
        """
        P = self.n_pops
        R = np.zeros((P, P))
        dR = np.zeros((self.n_free, P, P))
        R[0, 0] = 1.0
        for a in range(1, P):
            s = expit(self.logits[_logit_index(a, 0):_logit_index(a, 0) + a])
            ds = s * (1.0 - s)
            c = np.sqrt(np.clip((1.0 - s) * (1.0 + s), 0.0, None))
            # dc/dlogit = -s * ds / c = -s^2 sqrt((1-s)/(1+s))
            dc = -s * s * np.sqrt(np.clip((1.0 - s) / (1.0 + s), 0.0, None))
            prefix = np.ones(a + 1)
            for k in range(1, a + 1):
                prefix[k] = prefix[k - 1] * c[k - 1]
            R[a, :a] = prefix[:a] * s
            R[a, a] = prefix[a]
            for t in range(a):
                g = np.zeros(P)
                # coordinate t carries s_t; later coordinates carry c_t
                g[t] = prefix[t] * ds[t]
                if c[t] > 0:
                    for k in range(t + 1, a):
                        g[k] = prefix[k] / c[t] * dc[t] * s[k]
                    g[a] = prefix[a] / c[t] * dc[t]
                else:
                    for k in range(t + 1, a):
                        g[k] = np.prod(c[:k][np.arange(k) != t]) * dc[t] * s[k]
                    g[a] = np.prod(c[:a][np.arange(a) != t]) * dc[t]
                dR[_logit_index(a, t), a] = g
        return R, dR

    def matrix(self) -> np.ndarray:
        if self.fixed is not None:
            return self.fixed
        R, _ = self.rows()
        M = R @ R.T
        np.fill_diagonal(M, 1.0)
        return np.clip(M, 0.0, 1.0)

    def jacobian(self) -> np.ndarray:
        """d Lambda / d logits, shape ``(n_free, n_pops, n_pops)``."""
        R, dR = self.rows()
        J = np.einsum("taj,bj->tab", dR, R)
        return J + J.transpose(0, 2, 1)

    def value(self, d1: int, d2: int) -> float:
        return 1.0 if d1 == d2 else float(self.matrix()[d1, d2])

    def target_source(self) -> np.ndarray:
        """Factors between the target (index 0) and each source."""
        return self.matrix()[0, 1:].copy()


def transfer_eval(spec: BaseKernelSpec, factors: TransferFactors, u, d1: int, v, d2: int) -> float:
    k = base_eval(spec, u, v)
    return k if d1 == d2 else factors.value(d1, d2) * k


@dataclass(frozen=True, eq=False)
class TaggedPoints:
    points: np.ndarray
    pop_index: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        idx = np.asarray(self.pop_index, dtype=int).reshape(-1)
        if idx.shape[0] != pts.shape[0]:
            raise DimMismatch("pop_index length must match the number of points")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "pop_index", idx)

    def __len__(self):
        return self.points.shape[0]


def factor_mask(factors: Optional[TransferFactors], pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Matrix of Lambda[pa_i, pb_j]."""
    if factors is None:
        return np.ones((pa.shape[0], pb.shape[0]))
    return factors.matrix()[np.ix_(pa, pb)]


def gram(spec: BaseKernelSpec, factors: Optional[TransferFactors], A: TaggedPoints,
         B: TaggedPoints, jitter: bool = False) -> np.ndarray:
    """Transferable Gram matrix between tagged point sets.

    ``jitter`` adds ``1e-6 * amplitude`` to the diagonal (square inputs only).
    """
    if A.points.shape[1] != B.points.shape[1]:
        raise DimMismatch(f"point dims {A.points.shape[1]} and {B.points.shape[1]} differ")
    if factors is not None and max(A.pop_index.max(initial=0), B.pop_index.max(initial=0)) >= factors.n_pops:
        raise ValueError("pop_index exceeds the number of populations")
    K = base_gram(spec, A.points, B.points) * factor_mask(factors, A.pop_index, B.pop_index)
    if jitter:
        if K.shape[0] != K.shape[1]:
            raise DimMismatch("jitter requires a square Gram")
        K[np.diag_indices_from(K)] += JITTER * spec.amplitude
    return K


def factor_grad(G_weighted: np.ndarray, pa: np.ndarray, pb: np.ndarray, n_pops: int) -> np.ndarray:
    """Sum ``G_weighted`` into a (n_pops x n_pops) matrix by population pair."""
    out = np.zeros((n_pops, n_pops))
    Pa = np.zeros((pa.shape[0], n_pops))
    Pa[np.arange(pa.shape[0]), pa] = 1.0
    Pb = np.zeros((pb.shape[0], n_pops))
    Pb[np.arange(pb.shape[0]), pb] = 1.0
    out += Pa.T @ G_weighted @ Pb
    return out


def logit_grad(factors: TransferFactors, dLambda: np.ndarray) -> np.ndarray:
    """Chain ``dJ/dLambda`` (diagonal ignored) into ``dJ/dlogits``."""
    if not factors.learnable or factors.n_free == 0:
        return np.zeros(factors.n_free)
    D = dLambda.copy()
    np.fill_diagonal(D, 0.0)
    return np.einsum("tab,ab->t", factors.jacobian(), D)


class BlockLayout:
    """Population blocks of a Gram whose rows and columns are sorted by tag.

    Applying the factors and collecting their gradient then reduce to
    scaling and summing contiguous blocks, with no per-entry indexing.
    """

    def __init__(self, row_tags: np.ndarray, col_tags: np.ndarray, n_pops: int):
        for t in (row_tags, col_tags):
            if t.size and np.any(np.diff(t) < 0):
                raise ValueError("tags must be sorted for a block layout")
        self.n_pops = n_pops
        self.rows = [self._bounds(row_tags, k) for k in range(n_pops)]
        self.cols = [self._bounds(col_tags, k) for k in range(n_pops)]

    @staticmethod
    def _bounds(tags: np.ndarray, k: int) -> slice:
        return slice(int(np.searchsorted(tags, k, "left")), int(np.searchsorted(tags, k, "right")))

    def apply(self, B: np.ndarray, Lam: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
        """``Lam[tag_i, tag_j] * B_ij`` (writes into ``out`` when given)."""
        K = B.copy() if out is None else out
        if out is not None and out is not B:
            K[...] = B
        for a, ra in enumerate(self.rows):
            for b, cb in enumerate(self.cols):
                if a != b and ra.stop > ra.start and cb.stop > cb.start:
                    K[ra, cb] *= Lam[a, b]
        return K

    def block_sums(self, G: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_pops, self.n_pops))
        for a, ra in enumerate(self.rows):
            for b, cb in enumerate(self.cols):
                if ra.stop > ra.start and cb.stop > cb.start:
                    out[a, b] = float(G[ra, cb].sum())
        return out

    def offdiag_grad(self, dK: np.ndarray, B: np.ndarray) -> np.ndarray:
        """``sum(dK * B)`` over each off-diagonal block: the gradient of a
        scalar with respect to ``Lam`` given ``dK`` = its gradient in ``K``."""
        out = np.zeros((self.n_pops, self.n_pops))
        for a, ra in enumerate(self.rows):
            for b, cb in enumerate(self.cols):
                if a != b and ra.stop > ra.start and cb.stop > cb.start:
                    out[a, b] = float(np.vdot(dK[ra, cb], B[ra, cb]))
        return out
