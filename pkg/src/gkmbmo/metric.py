"""Weighted linear algebra under a positive-definite metric H.

Every operator in this package certifies its Lipschitz properties with
respect to an inner product ``<u, H v>`` induced by a positive-definite
matrix H.  This module holds the matrix representation, the induced
inner product / norm, projections onto simple sets, and the spectral
estimates used by step-size bounds.

Vectors may be passed as shape ``(dim,)`` or batched as ``(dim, B)``;
batched norms reduce over all entries (the metric of the stacked state
is block diagonal with identical blocks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CapabilityError, ContractError, NumericsError

SYMMETRY_TOL = 1e-12
_POWER_SEED = 20240915
_POWER_CAP = 10000


def _check_dim(dim, u):
    if u.shape[0] != dim:
        raise ContractError(f"dimension mismatch: metric dim {dim}, vector dim {u.shape[0]}")


@dataclass(frozen=True)
class MetricMatrix:
    """Positive-definite H stored by kind.

    kind:
        "identity"  -- entries is None, optionally scaled (scale field)
        "diagonal"  -- entries is the (dim,) diagonal
        "block"     -- entries is a tuple of MetricMatrix blocks
        "dense"     -- entries is a symmetric (dim, dim) array
    """

    kind: str
    dim: int
    entries: object = None
    scale: float = 1.0

    def __post_init__(self):
        if self.dim <= 0:
            raise ContractError("metric dimension must be positive")
        if self.kind == "identity":
            if self.scale <= 0:
                raise ContractError("identity metric scale must be positive")
        elif self.kind == "diagonal":
            d = np.asarray(self.entries, dtype=float)
            if d.shape != (self.dim,):
                raise ContractError("diagonal entries must have shape (dim,)")
            if np.any(d <= 0):
                raise ContractError("diagonal metric requires strictly positive entries")
            object.__setattr__(self, "entries", d)
        elif self.kind == "block":
            blocks = tuple(self.entries)
            if sum(b.dim for b in blocks) != self.dim:
                raise ContractError("block dims do not tile the metric dimension")
            object.__setattr__(self, "entries", blocks)
        elif self.kind == "dense":
            a = np.asarray(self.entries, dtype=float)
            if a.shape != (self.dim, self.dim):
                raise ContractError("dense entries must be (dim, dim)")
            if not np.all(np.isfinite(a)):
                raise ContractError("dense metric has non-finite entries")
            sym_err = np.max(np.abs(a - a.T)) / max(1.0, np.max(np.abs(a)))
            if sym_err > SYMMETRY_TOL * 100:
                raise ContractError(f"dense metric not symmetric (relative error {sym_err:.2e})")
            a = 0.5 * (a + a.T)
            object.__setattr__(self, "entries", a)
            if min_eigen_estimate(self) <= 0:
                raise ContractError("dense metric is not positive definite")
        else:
            raise ContractError(f"unknown metric kind {self.kind!r}")

    # -- constructors ---------------------------------------------------
    @staticmethod
    def identity(dim, scale=1.0):
        return MetricMatrix("identity", dim, scale=scale)

    @staticmethod
    def diagonal(diag):
        diag = np.asarray(diag, dtype=float)
        return MetricMatrix("diagonal", diag.shape[0], diag)

    @staticmethod
    def block_diagonal(blocks):
        blocks = tuple(blocks)
        return MetricMatrix("block", sum(b.dim for b in blocks), blocks)

    @staticmethod
    def dense(mat):
        mat = np.asarray(mat, dtype=float)
        return MetricMatrix("dense", mat.shape[0], mat)

    # -- application ----------------------------------------------------
    def apply(self, u):
        """H @ u, columnwise for batched input."""
        u = np.asarray(u, dtype=float)
        _check_dim(self.dim, u)
        if self.kind == "identity":
            return self.scale * u
        if self.kind == "diagonal":
            return (self.entries.T * u.T).T if u.ndim > 1 else self.entries * u
        if self.kind == "dense":
            return self.entries @ u
        out = np.empty_like(u, dtype=float)
        off = 0
        for b in self.entries:
            out[off:off + b.dim] = b.apply(u[off:off + b.dim])
            off += b.dim
        return out

    def solve(self, u):
        """H^{-1} @ u."""
        u = np.asarray(u, dtype=float)
        _check_dim(self.dim, u)
        if self.kind == "identity":
            return u / self.scale
        if self.kind == "diagonal":
            return (u.T / self.entries).T if u.ndim > 1 else u / self.entries
        if self.kind == "dense":
            return np.linalg.solve(self.entries, u)
        out = np.empty_like(u, dtype=float)
        off = 0
        for b in self.entries:
            out[off:off + b.dim] = b.solve(u[off:off + b.dim])
            off += b.dim
        return out

    def sqrt_apply(self, u):
        """H^{1/2} @ u; supported for identity and diagonal metrics."""
        u = np.asarray(u, dtype=float)
        _check_dim(self.dim, u)
        if self.kind == "identity":
            return math.sqrt(self.scale) * u
        if self.kind == "diagonal":
            r = np.sqrt(self.entries)
            return (r.T * u.T).T if u.ndim > 1 else r * u
        raise CapabilityError(f"sqrt_apply unsupported for {self.kind!r} metric")

    def inv_sqrt_apply(self, u):
        u = np.asarray(u, dtype=float)
        _check_dim(self.dim, u)
        if self.kind == "identity":
            return u / math.sqrt(self.scale)
        if self.kind == "diagonal":
            r = np.sqrt(self.entries)
            return (u.T / r).T if u.ndim > 1 else u / r
        raise CapabilityError(f"inv_sqrt_apply unsupported for {self.kind!r} metric")

    def matrix(self):
        """Dense representation (desk scale only)."""
        if self.kind == "identity":
            return self.scale * np.eye(self.dim)
        if self.kind == "diagonal":
            return np.diag(self.entries)
        if self.kind == "dense":
            return self.entries.copy()
        blocks = [b.matrix() for b in self.entries]
        out = np.zeros((self.dim, self.dim))
        off = 0
        for b in blocks:
            n = b.shape[0]
            out[off:off + n, off:off + n] = b
            off += n
        return out


@dataclass(frozen=True)
class DomainDescriptor:
    """Feasible set for the training variable: full space, box, or ball."""

    kind: str
    dim: int
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: float = 0.0

    def __post_init__(self):
        if self.kind == "full":
            return
        if self.kind == "box":
            lo = np.asarray(self.lower, dtype=float)
            hi = np.asarray(self.upper, dtype=float)
            if lo.shape != (self.dim,) or hi.shape != (self.dim,):
                raise ContractError("box bounds must have shape (dim,)")
            if np.any(lo > hi):
                raise ContractError("box requires lower <= upper componentwise")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
        elif self.kind == "ball":
            c = np.asarray(self.center, dtype=float)
            if c.shape != (self.dim,):
                raise ContractError("ball center must have shape (dim,)")
            if self.radius <= 0:
                raise ContractError("ball radius must be positive")
            object.__setattr__(self, "center", c)
        else:
            raise ContractError(f"unknown domain kind {self.kind!r}")

    @staticmethod
    def full_space(dim):
        return DomainDescriptor("full", dim)

    @staticmethod
    def box(lower, upper):
        lower = np.asarray(lower, dtype=float)
        return DomainDescriptor("box", lower.shape[0], lower=lower, upper=np.asarray(upper, dtype=float))

    @staticmethod
    def ball(center, radius):
        center = np.asarray(center, dtype=float)
        return DomainDescriptor("ball", center.shape[0], center=center, radius=float(radius))

    def contains(self, u, tol=1e-12):
        u = np.asarray(u, dtype=float)
        if self.kind == "full":
            return True
        if self.kind == "box":
            lo, hi = self.lower, self.upper
            if u.ndim > 1:
                lo, hi = lo[:, None], hi[:, None]
            return bool(np.all(u >= lo - tol) and np.all(u <= hi + tol))
        d = np.linalg.norm(u - (self.center[:, None] if u.ndim > 1 else self.center), axis=0)
        return bool(np.all(d <= self.radius + tol))


def h_inner(H, u, v):
    """<u, H v>; symmetric in u and v.  Batched inputs reduce over all entries."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ContractError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.sum(u * H.apply(v)))


def h_norm(H, u):
    """Induced norm sqrt(<u, H u>)."""
    val = h_inner(H, u, u)
    return math.sqrt(max(val, 0.0))


def h_project(H, U, u):
    """Projection onto U in the H-metric, for the supported (H, U) pairings.

    full space -> identity; box with identity/diagonal H -> componentwise
    clamp; ball with identity H -> radial scaling.  Anything else (a
    general quadratic program) is rejected rather than silently
    approximated.
    """
    u = np.asarray(u, dtype=float)
    _check_dim(U.dim, u)
    if U.kind == "full":
        return u.copy()
    if U.kind == "box":
        if H.kind not in ("identity", "diagonal"):
            raise CapabilityError("box projection requires an identity or diagonal metric")
        lo, hi = U.lower, U.upper
        if u.ndim > 1:
            lo, hi = lo[:, None], hi[:, None]
        return np.clip(u, lo, hi)
    if U.kind == "ball":
        if H.kind != "identity":
            raise CapabilityError("ball projection requires the identity metric")
        c = U.center[:, None] if u.ndim > 1 else U.center
        d = u - c
        nrm = np.linalg.norm(d, axis=0)
        factor = np.minimum(1.0, U.radius / np.maximum(nrm, 1e-300))
        return c + d * factor
    raise CapabilityError(f"unsupported projection pairing ({H.kind}, {U.kind})")


def projection_jacobian_diag(U, u):
    """Almost-everywhere derivative of the supported projections, as a mask.

    Full space -> ones; box -> indicator of inactive coordinates.  Ball is
    rejected (its derivative is not diagonal off-center).
    """
    u = np.asarray(u, dtype=float)
    if U.kind == "full":
        return np.ones_like(u)
    if U.kind == "box":
        lo, hi = U.lower, U.upper
        if u.ndim > 1:
            lo, hi = lo[:, None], hi[:, None]
        return ((u > lo) & (u < hi)).astype(float)
    raise CapabilityError("projection derivative supported for full space and box only")


def min_eigen_estimate(H, tol=1e-8, max_iter=_POWER_CAP):
    """Smallest eigenvalue of H.

    Exact read-off for identity/diagonal/blocks thereof; inverse power
    iteration for dense blocks.  Raises NumericsError if the iteration
    cap is hit without reaching the relative tolerance.
    """
    if H.kind == "identity":
        return float(H.scale)
    if H.kind == "diagonal":
        return float(np.min(H.entries))
    if H.kind == "block":
        return min(min_eigen_estimate(b, tol=tol, max_iter=max_iter) for b in H.entries)
    a = H.entries
    if a.shape == (1, 1):
        return float(a[0, 0])
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        # not PD: report the smallest eigenvalue via a dense solve fallback
        return float(np.min(np.linalg.eigvalsh(a)))
    rng = np.random.default_rng(_POWER_SEED)
    v = rng.standard_normal(H.dim)
    v /= np.linalg.norm(v)
    lam_prev = None
    for _ in range(max_iter):
        w = _chol_solve(chol, v)
        nw = np.linalg.norm(w)
        v = w / nw
        lam = float(v @ (a @ v))
        if lam_prev is not None and abs(lam - lam_prev) <= tol * max(abs(lam), 1e-300):
            return lam
        lam_prev = lam
    raise NumericsError(f"inverse power iteration did not converge in {max_iter} iterations")


def _chol_solve(chol, b):
    y = np.linalg.solve(chol, b)
    return np.linalg.solve(chol.T, y)


def spectral_norm_estimate(A, tol=1e-6, max_iter=_POWER_CAP, seed=_POWER_SEED):
    """Largest singular value of A by power iteration on A^T A."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if not np.all(np.isfinite(A)):
        raise ContractError("spectral_norm_estimate requires finite entries")
    if A.size == 0 or not np.any(A):
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma_prev = None
    for _ in range(max_iter):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            v = rng.standard_normal(A.shape[1])
            v /= np.linalg.norm(v)
            continue
        z = A.T @ (w / nw)
        sigma = np.linalg.norm(z)
        if sigma == 0.0:
            return 0.0
        v = z / sigma
        # successive-change stopping understates the true error near
        # clustered singular values; stop an order tighter than tol
        if sigma_prev is not None and abs(sigma - sigma_prev) <= 0.1 * tol * sigma:
            return float(sigma)
        sigma_prev = sigma
    raise NumericsError(f"power iteration did not converge in {max_iter} iterations")
