"""Parameterized fixed-point operators and the averaging wrapper T.

Each operator is a non-expansive self-map ``D(state, omega)`` in its own
metric H(omega):

* ``PgOperator``      -- linearized gradient step + weighted shrinkage,
                         non-expansive w.r.t. the diagonal metric G(omega).
* ``AlmOperator``     -- proximal augmented-Lagrangian step on the joint
                         primal/dual state, firmly non-expansive w.r.t.
                         blockdiag(G, (1/beta) I).
* ``DladmmOperator``  -- the three-line linearized ADMM update for
                         ``min k1|u1|_1 + k2|u2|_1 s.t. Q u1 + u2 = b``,
                         non-expansive w.r.t.
                         blockdiag(rho1 I - beta Q^T Q, rho2 I, 1/(gamma beta) I)
                         whenever rho1 > beta |Q|^2, rho2 >= beta, gamma <= 1.
* ``NetOperator``     -- dense layers with 1-Lipschitz nonlinearities,
                         spectrally normalized to a target budget.
* ``CompositeOperator`` -- right-to-left composition sharing one metric.

States are numpy arrays of shape ``(dim,)`` or ``(dim, B)``; every apply
is vectorized over trailing batch columns.  All operators expose an
analytic vector-Jacobian product used by the unrolled differentiation
tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import CapabilityError, ContractError
from .metric import MetricMatrix, spectral_norm_estimate

PARAM_ROLES = frozenset(
    {"step-size", "penalty", "threshold", "metric-diagonal", "layer-matrix", "layer-bias"}
)

_POSITIVE_ROLES = frozenset({"step-size", "penalty"})


# ---------------------------------------------------------------------------
# hyper-training variables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamSlice:
    name: str
    offset: int
    shape: tuple
    role: str

    @property
    def size(self):
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass(frozen=True)
class HyperParams:
    """Flat hyper-training vector with a structural layout.

    The layout tiles ``values`` exactly: slices are contiguous, ordered,
    and leave no gaps.  Slices carrying step sizes or penalties must be
    strictly positive (the box constraints on the feasible set keep them
    that way during training).
    """

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).copy()
        layout = tuple(self.layout)
        off = 0
        for s in layout:
            if s.role not in PARAM_ROLES:
                raise ContractError(f"unknown slice role {s.role!r}")
            if s.offset != off:
                raise ContractError(f"slice {s.name!r} leaves a gap or overlaps at offset {off}")
            off += s.size
        if off != vals.shape[0]:
            raise ContractError(f"layout covers {off} entries but values has {vals.shape[0]}")
        names = [s.name for s in layout]
        if len(set(names)) != len(names):
            raise ContractError("duplicate slice names in layout")
        for s in layout:
            if s.role in _POSITIVE_ROLES and np.any(vals[s.offset:s.offset + s.size] <= 0):
                raise ContractError(f"slice {s.name!r} ({s.role}) must be strictly positive")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "layout", layout)

    @property
    def dim(self):
        return self.values.shape[0]

    def slice_for(self, name):
        for s in self.layout:
            if s.name == name:
                return s
        raise ContractError(f"no slice named {name!r} in layout")

    def view(self, name):
        s = self.slice_for(name)
        return self.values[s.offset:s.offset + s.size].reshape(s.shape)

    def scalar(self, name):
        v = self.view(name)
        if v.size != 1:
            raise ContractError(f"slice {name!r} is not a scalar")
        return float(v.reshape(()))

    def with_values(self, values):
        return HyperParams(np.asarray(values, dtype=float), self.layout)

    def replace_slice(self, name, new):
        s = self.slice_for(name)
        vals = self.values.copy()
        vals[s.offset:s.offset + s.size] = np.asarray(new, dtype=float).reshape(-1)
        return self.with_values(vals)


def make_hyperparams(parts):
    """Build HyperParams from ``[(name, array_or_scalar, role), ...]``."""
    vals, layout, off = [], [], 0
    for name, value, role in parts:
        arr = np.atleast_1d(np.asarray(value, dtype=float))
        layout.append(ParamSlice(name, off, arr.shape, role))
        vals.append(arr.reshape(-1))
        off += arr.size
    return HyperParams(np.concatenate(vals) if vals else np.zeros(0), tuple(layout))


@dataclass(frozen=True)
class OmegaBox:
    """Per-coordinate box for the compact hyper-parameter set."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ContractError("omega box requires lower <= upper of equal shape")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def clamp(self, values):
        return np.clip(values, self.lower, self.upper)

    def contains(self, values, tol=1e-12):
        return bool(np.all(values >= self.lower - tol) and np.all(values <= self.upper + tol))


# ---------------------------------------------------------------------------
# shared primitives
# ---------------------------------------------------------------------------

def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _col(v, ref):
    """Broadcast a (d,) vector against a (d,) or (d, B) reference."""
    return v[:, None] if ref.ndim > 1 else v


def _match_b(b, ref):
    """Align a data vector/batch against the state's batch shape."""
    if b.ndim == 1:
        return b[:, None] if ref.ndim > 1 else b
    if ref.ndim == 1:
        if b.shape[1] == 1:
            return b[:, 0]
        raise ContractError("batched operator requires states with matching batch columns")
    if b.shape[1] not in (1, ref.shape[1]):
        raise ContractError("batch size mismatch between data and state")
    return b


def _resolve(omega, spec, default=None):
    if isinstance(spec, str):
        return omega.scalar(spec)
    if spec is None:
        return default
    return float(spec)


def _acc_scalar(grad, omega, spec, value):
    if isinstance(spec, str):
        s = omega.slice_for(spec)
        grad[s.offset] += value


def _acc_vector(grad, omega, name, value):
    s = omega.slice_for(name)
    grad[s.offset:s.offset + s.size] += np.asarray(value, dtype=float).reshape(-1)


class _SpectralCache:
    """Memoize sigma_max(W) keyed by the array bytes."""

    def __init__(self):
        self._store = {}

    def sigma(self, W):
        key = (W.shape, W.tobytes())
        if key not in self._store:
            if len(self._store) > 256:
                self._store.clear()
            self._store[key] = spectral_norm_estimate(W)
        return self._store[key]


_sigma_cache = _SpectralCache()


# ---------------------------------------------------------------------------
# GKM averaging
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GkmConfig:
    alpha: float

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ContractError("averaging weight alpha must lie in (0, 1)")


def apply_T(op, state, omega, cfg):
    """T(u) = u + alpha (D(u) - u): the averaged fixed-point update."""
    return state + cfg.alpha * (op.apply(state, omega) - state)


def apply_T_vjp(op, state, omega, cfg, cot):
    cs, co = op.apply_vjp(state, omega, cfg.alpha * cot)
    return (1.0 - cfg.alpha) * cot + cs, co


# ---------------------------------------------------------------------------
# proximal gradient operator
# ---------------------------------------------------------------------------

@dataclass
class PgOperator:
    """One linearized proximal step for f quadratic, g a weighted l1 norm.

    f(u) = 1/2 u^T P u + q^T u (either part optional), g(u) = sum_i w_i |u_i|.
    The step minimizes the f-linearization plus g plus (1/2 gamma)|u - u^k|²_G,
    i.e. a gradient step in the G-metric followed by shrinkage.
    """

    dim: int
    quad: Optional[np.ndarray] = None
    lin: Optional[np.ndarray] = None
    l1_weights: Optional[np.ndarray] = None
    gamma: Union[float, str] = 1.0
    gdiag: Union[np.ndarray, str, None] = None
    thresh: Union[float, str, None] = None

    def __post_init__(self):
        if self.quad is not None:
            self.quad = np.asarray(self.quad, dtype=float)
            if self.quad.shape != (self.dim, self.dim):
                raise ContractError("quadratic term must be (dim, dim)")
        if self.lin is not None:
            self.lin = np.asarray(self.lin, dtype=float).reshape(self.dim)
        if self.l1_weights is not None:
            self.l1_weights = np.asarray(self.l1_weights, dtype=float).reshape(self.dim)
            if np.any(self.l1_weights < 0):
                raise ContractError("l1 weights must be nonnegative")
        if isinstance(self.gdiag, np.ndarray):
            self.gdiag = np.asarray(self.gdiag, dtype=float).reshape(self.dim)

    # internals -------------------------------------------------------
    def _g(self, omega):
        if self.gdiag is None:
            return np.ones(self.dim)
        if isinstance(self.gdiag, str):
            g = omega.view(self.gdiag).reshape(-1)
            if g.size == 1:
                return np.full(self.dim, float(g[0]))
            return g.astype(float)
        return self.gdiag

    def _weights(self, omega):
        if self.l1_weights is None:
            return None
        c = _resolve(omega, self.thresh, 1.0)
        return self.l1_weights * c

    def _grad_f(self, u):
        g = np.zeros_like(u)
        if self.quad is not None:
            g = self.quad @ u
        if self.lin is not None:
            g = g + _col(self.lin, u)
        return g

    def lipschitz_f(self):
        if self.quad is None:
            return 0.0
        return _sigma_cache.sigma(self.quad)

    # contract --------------------------------------------------------
    def validate_omega(self, omega):
        gam = _resolve(omega, self.gamma)
        g = self._g(omega)
        if np.any(g <= 0):
            raise ContractError("metric diagonal G(omega) must be positive definite")
        lf = self.lipschitz_f()
        if gam <= 0:
            raise ContractError("step gamma must be positive")
        if lf > 0 and gam >= 2.0 * float(np.min(g)) / lf:
            raise ContractError(
                f"gamma={gam:g} outside (0, 2 lambda_min(G)/L_f) with "
                f"lambda_min={np.min(g):g}, L_f={lf:g}")
        w = self._weights(omega)
        if w is not None and np.any(w < 0):
            raise ContractError("threshold weights must be nonnegative")

    def contraction_factor(self, omega):
        return 1.0

    # evaluation ------------------------------------------------------
    def apply(self, state, omega):
        gam = _resolve(omega, self.gamma)
        g = self._g(omega)
        x = state - gam * self._grad_f(state) / _col(g, state)
        w = self._weights(omega)
        if w is None:
            return x
        return soft_threshold(x, _col(gam * w / g, x))

    def apply_vjp(self, state, omega, cot):
        gam = _resolve(omega, self.gamma)
        g = self._g(omega)
        gcol = _col(g, state)
        grad = self._grad_f(state)
        x = state - gam * grad / gcol
        go = np.zeros(omega.dim)
        w = self._weights(omega)
        if w is None:
            dx = np.asarray(cot, dtype=float)
        else:
            thr = _col(gam * w / g, x)
            mask = (np.abs(x) > thr).astype(float)
            dx = mask * cot
            dthr = -np.sign(x) * mask * cot
            dthr_vec = dthr.sum(axis=-1) if dthr.ndim > 1 else dthr
            # thr_i = gam * w0_i * c / g_i
            if isinstance(self.thresh, str):
                _acc_scalar(go, omega, self.thresh,
                            float(np.sum(dthr_vec * gam * self.l1_weights / g)))
            c = _resolve(omega, self.thresh, 1.0)
            _acc_scalar(go, omega, self.gamma,
                        float(np.sum(dthr_vec * self.l1_weights * c / g)))
            if isinstance(self.gdiag, str):
                gslice = -dthr_vec * gam * self.l1_weights * c / g ** 2
                s = omega.slice_for(self.gdiag)
                if s.size == 1:
                    go[s.offset] += float(np.sum(gslice))
                else:
                    go[s.offset:s.offset + s.size] += gslice
        # x = u - gam * grad / g
        cs = dx.copy()
        hinv = dx / gcol
        if self.quad is not None:
            cs -= gam * (self.quad @ hinv)
        _acc_scalar(go, omega, self.gamma, float(-np.sum(dx * grad / gcol)))
        if isinstance(self.gdiag, str):
            gg = (dx * grad).sum(axis=-1) if dx.ndim > 1 else dx * grad
            gslice = gam * gg / g ** 2
            s = omega.slice_for(self.gdiag)
            if s.size == 1:
                go[s.offset] += float(np.sum(gslice))
            else:
                go[s.offset:s.offset + s.size] += gslice
        return cs, go

    # metric ----------------------------------------------------------
    def metric(self, omega):
        if self.gdiag is None:
            return MetricMatrix.identity(self.dim)
        return MetricMatrix.diagonal(self._g(omega))

    def metric_quad_vjp(self, omega, x, y):
        go = np.zeros(omega.dim)
        if isinstance(self.gdiag, str):
            prod = x * y
            if prod.ndim > 1:
                prod = prod.sum(axis=-1)
            s = omega.slice_for(self.gdiag)
            if s.size == 1:
                go[s.offset] += float(np.sum(prod))
            else:
                go[s.offset:s.offset + s.size] += prod
        return go


# ---------------------------------------------------------------------------
# proximal ALM operator
# ---------------------------------------------------------------------------

@dataclass
class AlmOperator:
    """Proximal augmented-Lagrangian step on the joint state (u, lambda).

    Solves one primal argmin of

        f(u) + <lam, A u - b> + beta/2 |A u - b|^2 + 1/2 |u - u^k|^2_G

    in closed form for the supported family (f quadratic plus a weighted
    l1 norm whose coordinates decouple in the total quadratic), then the
    dual ascent  lam <- lam + beta (A u+ - b).

    ``gmode`` selects the prox metric G:
      * "fixed": a constant diagonal (gdiag array) or identity;
      * "slice": diagonal read from an omega slice;
      * "rho-lin": G = sum_j rho_j diag(mask_j) - beta A^T A, which turns
        the augmented quadratic into a plain per-block prox (the
        linearized splitting form) while keeping the exact-resolvent
        certificate.
    """

    nprimal: int
    ndual: int
    A: np.ndarray
    bvec: np.ndarray
    quad: Optional[np.ndarray] = None
    lin: Optional[np.ndarray] = None
    l1_weights: Optional[np.ndarray] = None
    beta: Union[float, str] = 1.0
    gmode: str = "fixed"
    gdiag: Union[np.ndarray, str, None] = None
    rho_groups: tuple = ()
    thresh_groups: tuple = ()

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        if self.A.shape != (self.ndual, self.nprimal):
            raise ContractError("constraint matrix must be (ndual, nprimal)")
        self.bvec = np.asarray(self.bvec, dtype=float)
        if self.quad is not None:
            self.quad = np.asarray(self.quad, dtype=float)
        if self.lin is not None:
            self.lin = np.asarray(self.lin, dtype=float).reshape(self.nprimal)
        if self.l1_weights is not None:
            self.l1_weights = np.asarray(self.l1_weights, dtype=float).reshape(self.nprimal)
        if isinstance(self.gdiag, np.ndarray):
            self.gdiag = np.asarray(self.gdiag, dtype=float).reshape(self.nprimal)
        if self.gmode not in ("fixed", "slice", "rho-lin"):
            raise ContractError(f"unknown prox-metric mode {self.gmode!r}")
        self.rho_groups = tuple((name, self._as_mask(mask)) for name, mask in self.rho_groups)
        self.thresh_groups = tuple((name, self._as_mask(mask)) for name, mask in self.thresh_groups)
        self._AtA = self.A.T @ self.A
        self._smooth = None
        self._l1 = None
        self._split()
        self._cache = {}

    def _as_mask(self, mask):
        m = np.asarray(mask)
        if m.dtype != bool:
            out = np.zeros(self.nprimal, dtype=bool)
            out[m.astype(int)] = True
            return out
        if m.shape != (self.nprimal,):
            raise ContractError("group masks must cover the primal block")
        return m

    @property
    def dim(self):
        return self.nprimal + self.ndual

    def _split(self):
        w = self.l1_weights
        if w is None:
            self._l1 = np.zeros(0, dtype=int)
            self._smooth = np.arange(self.nprimal)
        else:
            self._l1 = np.flatnonzero(w > 0)
            self._smooth = np.flatnonzero(w == 0)

    # internals -------------------------------------------------------
    def _weights(self, omega):
        if self.l1_weights is None:
            return None
        w = self.l1_weights.copy()
        for name, mask in self.thresh_groups:
            w[mask] = w[mask] * omega.scalar(name)
        return w

    def _rho_diag(self, omega):
        d = np.zeros(self.nprimal)
        for name, mask in self.rho_groups:
            d[mask] += omega.scalar(name)
        return d

    def _G_matrix(self, omega, beta):
        if self.gmode == "rho-lin":
            return np.diag(self._rho_diag(omega)) - beta * self._AtA
        if self.gmode == "slice":
            return np.diag(omega.view(self.gdiag).reshape(-1).astype(float))
        if self.gdiag is None:
            return np.eye(self.nprimal)
        return np.diag(self.gdiag)

    def _total_quad(self, omega, beta):
        """K = quad + beta A^T A + G; rho-lin cancels the penalty Hessian."""
        if self.gmode == "rho-lin":
            K = np.diag(self._rho_diag(omega))
        else:
            K = beta * self._AtA + self._G_matrix(omega, beta)
        if self.quad is not None:
            K = K + self.quad
        return K

    def prepare(self, omega):
        key = omega.values.tobytes()
        if key in self._cache:
            return self._cache[key]
        beta = _resolve(omega, self.beta)
        K = self._total_quad(omega, beta)
        w = self._weights(omega)
        S, L = self._smooth, self._l1
        if L.size:
            off = K[np.ix_(L, L)].copy()
            np.fill_diagonal(off, 0.0)
            if np.max(np.abs(off)) > 1e-12 or np.max(np.abs(K[np.ix_(S, L)]), initial=0.0) > 1e-12:
                raise CapabilityError(
                    "l1 coordinates do not decouple in the total quadratic; "
                    "no closed-form primal step for this configuration")
        ctx = {
            "beta": beta,
            "K": K,
            "w": w,
            "Kss": K[np.ix_(S, S)],
            "dL": np.diag(K)[L],
            "G": self._G_matrix(omega, beta),
        }
        if len(self._cache) > 8:
            self._cache.clear()
        self._cache[key] = ctx
        return ctx

    def validate_omega(self, omega):
        beta = _resolve(omega, self.beta)
        if beta <= 0:
            raise ContractError("penalty beta must be positive")
        ctx = self.prepare(omega)
        if "g_min_eig" not in ctx:
            G = ctx["G"]
            ctx["g_min_eig"] = float(np.linalg.eigvalsh(0.5 * (G + G.T))[0])
        if ctx["g_min_eig"] <= 0:
            raise ContractError(
                f"prox metric G(omega) not positive definite (lambda_min={ctx['g_min_eig']:.3e})")
        w = ctx["w"]
        if w is not None and np.any(w < 0):
            raise ContractError("l1 weights must be nonnegative")

    def contraction_factor(self, omega):
        return 1.0

    # evaluation ------------------------------------------------------
    def split_state(self, state):
        return state[:self.nprimal], state[self.nprimal:]

    def _bcol(self, ref):
        return _match_b(self.bvec, ref)

    def apply(self, state, omega, ctx=None):
        if ctx is None:
            ctx = self.prepare(omega)
        beta, w = ctx["beta"], ctx["w"]
        u, lam = self.split_state(state)
        b = self._bcol(lam)
        Gu = ctx["G"] @ u
        c = self.A.T @ lam - beta * (self.A.T @ b) - Gu
        if self.lin is not None:
            c = c + _col(self.lin, u)
        up = np.empty_like(u)
        S, L = self._smooth, self._l1
        if S.size:
            up[S] = np.linalg.solve(ctx["Kss"], -c[S])
        if L.size:
            d = ctx["dL"]
            dc = _col(d, u[L])
            up[L] = soft_threshold(-c[L] / dc, _col(w[L] / d, u[L]))
        lamp = lam + beta * (self.A @ up - b)
        return np.concatenate([up, lamp], axis=0)

    def apply_vjp(self, state, omega, cot, ctx=None):
        if ctx is None:
            ctx = self.prepare(omega)
        beta, w = ctx["beta"], ctx["w"]
        u, lam = self.split_state(state)
        b = self._bcol(lam)
        Gu = ctx["G"] @ u
        c = self.A.T @ lam - beta * (self.A.T @ b) - Gu
        if self.lin is not None:
            c = c + _col(self.lin, u)
        S, L = self._smooth, self._l1
        up = np.empty_like(u)
        if S.size:
            up[S] = np.linalg.solve(ctx["Kss"], -c[S])
        xL = tL = None
        if L.size:
            d = ctx["dL"]
            xL = -c[L] / _col(d, u[L])
            tL = w[L] / d
            up[L] = soft_threshold(xL, _col(tL, xL))

        cu_out, clam_out = cot[:self.nprimal], cot[self.nprimal:]
        go = np.zeros(omega.dim)
        res = self.A @ up - b
        # lam+ = lam + beta (A u+ - b)
        clam = clam_out.copy()
        cup = cu_out + beta * (self.A.T @ clam_out)
        _acc_scalar(go, omega, self.beta, float(np.sum(clam_out * res)))

        dc = np.zeros_like(u)
        dbeta_extra = 0.0
        drho = {}
        if S.size:
            ws = np.linalg.solve(ctx["Kss"], cup[S])
            dc[S] = -ws
            # dK_ss contributions: K = quad + diag(rho)  (rho-lin)  or
            #                      quad + beta A^T A + G (other modes)
            upS = up[S]
            if self.gmode == "rho-lin":
                prod = ws * upS
                if prod.ndim > 1:
                    prod = prod.sum(axis=-1)
                for name, mask in self.rho_groups:
                    sel = mask[S]
                    drho[name] = drho.get(name, 0.0) - float(np.sum(prod[sel]))
            else:
                AuS = self.A[:, S]
                quadform = np.sum((AuS @ ws) * (AuS @ upS))
                dbeta_extra -= float(quadform)
                if self.gmode == "slice":
                    prod = ws * upS
                    if prod.ndim > 1:
                        prod = prod.sum(axis=-1)
                    sl = omega.slice_for(self.gdiag)
                    full = np.zeros(self.nprimal)
                    full[S] = -prod
                    go[sl.offset:sl.offset + sl.size] += full
        if L.size:
            d = ctx["dL"]
            mask = (np.abs(xL) > _col(tL, xL)).astype(float)
            dxL = mask * cup[L]
            dthr = -np.sign(xL) * mask * cup[L]
            dthr_v = dthr.sum(axis=-1) if dthr.ndim > 1 else dthr
            dc[L] = -dxL / _col(d, u[L])
            # x_i = -c_i / d_i, t_i = w_i / d_i
            cL_v = (dxL * c[L]).sum(axis=-1) if dxL.ndim > 1 else dxL * c[L]
            dd = cL_v / d ** 2 - dthr_v * w[L] / d ** 2
            # d_i = rho_i (+ quad diagonal); thresh: w_i = base * c_group
            if self.gmode == "rho-lin":
                for name, gmask in self.rho_groups:
                    sel = gmask[L]
                    drho[name] = drho.get(name, 0.0) + float(np.sum(dd[sel]))
            for name, gmask in self.thresh_groups:
                sel = gmask[L]
                base = self.l1_weights[L][sel]
                _acc_scalar(go, omega, name, float(np.sum((dthr_v[sel] / d[sel]) * base)))
        for name, val in drho.items():
            _acc_scalar(go, omega, name, val)

        # c = A^T lam - beta A^T b - G u (+ lin)
        clam += self.A @ dc
        _acc_scalar(go, omega, self.beta, float(-np.sum(dc * (self.A.T @ b))))
        cu = -(ctx["G"].T @ dc)
        # G depends on omega for slice / rho-lin modes: d(-G u) terms
        if self.gmode == "rho-lin":
            prod = dc * u
            if prod.ndim > 1:
                prod = prod.sum(axis=-1)
            for name, gmask in self.rho_groups:
                _acc_scalar(go, omega, name, float(-np.sum(prod[gmask])))
            # -beta A^T A inside G: d/dbeta (-G u) = +A^T A u
            _acc_scalar(go, omega, self.beta, float(np.sum(dc * (self._AtA @ u))))
        elif self.gmode == "slice":
            prod = dc * u
            if prod.ndim > 1:
                prod = prod.sum(axis=-1)
            sl = omega.slice_for(self.gdiag)
            go[sl.offset:sl.offset + sl.size] += -prod
        _acc_scalar(go, omega, self.beta, dbeta_extra)
        return np.concatenate([cu, clam], axis=0), go

    # metric ----------------------------------------------------------
    def metric(self, omega):
        beta = _resolve(omega, self.beta)
        if self.gmode == "slice":
            gblock = MetricMatrix.diagonal(omega.view(self.gdiag).reshape(-1))
        elif self.gmode == "fixed":
            gblock = (MetricMatrix.identity(self.nprimal) if self.gdiag is None
                      else MetricMatrix.diagonal(self.gdiag))
        else:
            gblock = MetricMatrix.dense(self._G_matrix(omega, beta))
        return MetricMatrix.block_diagonal([gblock, MetricMatrix.identity(self.ndual, scale=1.0 / beta)])

    def metric_quad_vjp(self, omega, x, y):
        go = np.zeros(omega.dim)
        beta = _resolve(omega, self.beta)
        xu, xl = self.split_state(x)
        yu, yl = self.split_state(y)
        prod_u = (xu * yu).sum(axis=-1) if xu.ndim > 1 else xu * yu
        lam_ip = float(np.sum(xl * yl))
        _acc_scalar(go, omega, self.beta, -lam_ip / beta ** 2)
        if self.gmode == "rho-lin":
            for name, gmask in self.rho_groups:
                _acc_scalar(go, omega, name, float(np.sum(prod_u[gmask])))
            quadform = float(np.sum((self.A @ xu) * (self.A @ yu)))
            _acc_scalar(go, omega, self.beta, -quadform)
        elif self.gmode == "slice":
            sl = omega.slice_for(self.gdiag)
            go[sl.offset:sl.offset + sl.size] += prod_u
        return go


# ---------------------------------------------------------------------------
# differentiable linearized ADMM operator
# ---------------------------------------------------------------------------

@dataclass
class DladmmOperator:
    """Three-block linearized ADMM update for kappa-weighted l1 recovery.

    State columns are (u1, u2, lam) with u1 in R^n, u2 and lam in R^m:

        u1+  = S(u1 - (beta/rho1) Q^T r,   kappa1/rho1),  r = Q u1 + u2 - b + lam/beta
        u2+  = S(u2 - (beta/rho2) r2,       kappa2/rho2),  r2 = Q u1+ + u2 - b + lam/beta
        lam+ = lam + gamma beta (Q u1+ + u2+ - b)
    """

    Q: np.ndarray
    bvec: np.ndarray
    beta: Union[float, str] = 0.1
    gamma: Union[float, str] = 1.0
    rho1: Union[float, str] = None
    rho2: Union[float, str] = None
    kappa1: Union[float, str] = 1.0
    kappa2: Union[float, str] = 1.0

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.bvec = np.asarray(self.bvec, dtype=float)
        self.m, self.n = self.Q.shape
        self._LQ = spectral_norm_estimate(self.Q)
        self._QtQ = self.Q.T @ self.Q

    @property
    def dim(self):
        return self.n + 2 * self.m

    @property
    def lipschitz_Q(self):
        return self._LQ

    def _params(self, omega):
        return (_resolve(omega, self.beta), _resolve(omega, self.gamma),
                _resolve(omega, self.rho1), _resolve(omega, self.rho2),
                _resolve(omega, self.kappa1), _resolve(omega, self.kappa2))

    def validate_omega(self, omega):
        beta, gamma, rho1, rho2, k1, k2 = self._params(omega)
        if beta <= 0:
            raise ContractError("beta must be positive")
        if not (0.0 < gamma <= 1.0):
            raise ContractError("dual step gamma must lie in (0, 1]")
        if rho1 is None or rho2 is None:
            raise ContractError("rho1 and rho2 are required")
        if rho1 < beta * self._LQ ** 2 * (1.0 - 1e-12):
            raise ContractError(
                f"rho1={rho1:g} below the certified bound beta L_Q^2 = {beta * self._LQ**2:g}")
        if rho2 < beta * (1.0 - 1e-12):
            raise ContractError(f"rho2={rho2:g} below the certified bound beta = {beta:g}")
        if k1 < 0 or k2 < 0:
            raise ContractError("kappa weights must be nonnegative")

    def contraction_factor(self, omega):
        return 1.0

    def split_state(self, state):
        n, m = self.n, self.m
        return state[:n], state[n:n + m], state[n + m:]

    def _bcol(self, ref):
        return _match_b(self.bvec, ref)

    def apply(self, state, omega, ctx=None):
        beta, gamma, rho1, rho2, k1, k2 = self._params(omega)
        u1, u2, lam = self.split_state(state)
        b = self._bcol(lam)
        r = self.Q @ u1 + u2 - b + lam / beta
        v1 = soft_threshold(u1 - (beta / rho1) * (self.Q.T @ r), k1 / rho1)
        r2 = self.Q @ v1 + u2 - b + lam / beta
        v2 = soft_threshold(u2 - (beta / rho2) * r2, k2 / rho2)
        lamp = lam + gamma * beta * (self.Q @ v1 + v2 - b)
        return np.concatenate([v1, v2, lamp], axis=0)

    def apply_vjp(self, state, omega, cot, ctx=None):
        beta, gamma, rho1, rho2, k1, k2 = self._params(omega)
        u1, u2, lam = self.split_state(state)
        b = self._bcol(lam)
        e = lam / beta
        r = self.Q @ u1 + u2 - b + e
        Qtr = self.Q.T @ r
        x1 = u1 - (beta / rho1) * Qtr
        t1 = k1 / rho1
        v1 = soft_threshold(x1, t1)
        r2 = self.Q @ v1 + u2 - b + e
        x2 = u2 - (beta / rho2) * r2
        t2 = k2 / rho2
        v2 = soft_threshold(x2, t2)
        feas = self.Q @ v1 + v2 - b

        c1, c2, cl = (cot[:self.n], cot[self.n:self.n + self.m], cot[self.n + self.m:])
        go = np.zeros(omega.dim)

        dlam = cl.copy()
        dv2 = c2 + gamma * beta * cl
        dv1 = c1 + gamma * beta * (self.Q.T @ cl)
        ip_feas = float(np.sum(cl * feas))
        _acc_scalar(go, omega, self.gamma, beta * ip_feas)
        _acc_scalar(go, omega, self.beta, gamma * ip_feas)

        m2 = (np.abs(x2) > t2).astype(float)
        dx2 = m2 * dv2
        s2 = float(np.sum(-np.sign(x2) * m2 * dv2))
        _acc_scalar(go, omega, self.kappa2, s2 / rho2)
        _acc_scalar(go, omega, self.rho2, -s2 * k2 / rho2 ** 2)
        du2 = dx2.copy()
        dr2 = -(beta / rho2) * dx2
        _acc_scalar(go, omega, self.beta, float(-np.sum(dx2 * r2) / rho2))
        _acc_scalar(go, omega, self.rho2, float(np.sum(dx2 * r2) * beta / rho2 ** 2))
        dv1 += self.Q.T @ dr2
        du2 += dr2
        de = dr2.copy()

        m1 = (np.abs(x1) > t1).astype(float)
        dx1 = m1 * dv1
        s1 = float(np.sum(-np.sign(x1) * m1 * dv1))
        _acc_scalar(go, omega, self.kappa1, s1 / rho1)
        _acc_scalar(go, omega, self.rho1, -s1 * k1 / rho1 ** 2)
        du1 = dx1.copy()
        dr = -(beta / rho1) * (self.Q @ dx1)
        _acc_scalar(go, omega, self.beta, float(-np.sum(dx1 * Qtr) / rho1))
        _acc_scalar(go, omega, self.rho1, float(np.sum(dx1 * Qtr) * beta / rho1 ** 2))

        du1 += self.Q.T @ dr
        du2 += dr
        de += dr
        dlam += de / beta
        _acc_scalar(go, omega, self.beta, float(-np.sum(de * lam) / beta ** 2))
        return np.concatenate([du1, du2, dlam], axis=0), go

    # metric ----------------------------------------------------------
    def metric(self, omega):
        beta, gamma, rho1, rho2, _, _ = self._params(omega)
        top = rho1 * np.eye(self.n) - beta * self._QtQ
        return MetricMatrix.block_diagonal([
            MetricMatrix.dense(top),
            MetricMatrix.identity(self.m, scale=rho2),
            MetricMatrix.identity(self.m, scale=1.0 / (gamma * beta)),
        ])

    def metric_quad_vjp(self, omega, x, y):
        go = np.zeros(omega.dim)
        beta, gamma, rho1, rho2, _, _ = self._params(omega)
        x1, x2, xl = self.split_state(x)
        y1, y2, yl = self.split_state(y)
        ip11 = float(np.sum(x1 * y1))
        ipQQ = float(np.sum((self.Q @ x1) * (self.Q @ y1)))
        ip22 = float(np.sum(x2 * y2))
        ipll = float(np.sum(xl * yl))
        _acc_scalar(go, omega, self.rho1, ip11)
        _acc_scalar(go, omega, self.rho2, ip22)
        _acc_scalar(go, omega, self.beta, -ipQQ - ipll / (gamma * beta ** 2))
        _acc_scalar(go, omega, self.gamma, -ipll / (gamma ** 2 * beta))
        return go


# ---------------------------------------------------------------------------
# spectrally-normalized network operator
# ---------------------------------------------------------------------------

_NONLINEARITIES = {
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(float)),
    "satlin": (lambda z: np.clip(z, -1.0, 1.0), lambda z: (np.abs(z) < 1.0).astype(float)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


@dataclass
class NetOperator:
    """Stack of affine layers with a 1-Lipschitz componentwise nonlinearity.

    Layer matrices live in omega slices (role layer-matrix) and are
    expected spectrally normalized so each sigma_max(W_l) <= rho_bar^(1/L);
    apply() checks the cached certificates and rejects unnormalized
    layers unless ``enforce_certificate`` is switched off (the
    normalization-ablation mode).  With ``conjugate`` set -- a fixed
    metric or the name of a metric-diagonal omega slice -- the whole map
    is conjugated as H^{-1/2} D H^{1/2} so it is non-expansive in the
    H-metric.
    """

    dim: int
    weight_names: tuple
    bias_names: tuple
    widths: tuple
    nonlinearity: str = "identity"
    rho_bar: float = 1.0
    conjugate: Union[MetricMatrix, str, None] = None
    enforce_certificate: bool = True

    def __post_init__(self):
        if not (0.0 < self.rho_bar <= 1.0):
            raise ContractError("target Lipschitz rho_bar must lie in (0, 1]")
        if self.nonlinearity not in _NONLINEARITIES:
            raise ContractError(f"unsupported nonlinearity {self.nonlinearity!r}")
        if len(self.weight_names) != len(self.bias_names):
            raise ContractError("need one bias per layer")
        if len(self.widths) != len(self.weight_names) + 1:
            raise ContractError("widths must list input and every layer output")
        if self.widths[0] != self.dim or self.widths[-1] != self.dim:
            raise ContractError("network must be a self-map on the state space")

    @property
    def nlayers(self):
        return len(self.weight_names)

    def _layers(self, omega):
        out = []
        for wn, bn, win, wout in zip(self.weight_names, self.bias_names,
                                     self.widths[:-1], self.widths[1:]):
            W = omega.view(wn).reshape(wout, win)
            bb = omega.view(bn).reshape(wout)
            out.append((W, bb))
        return out

    def _conj_diag(self, omega):
        if self.conjugate is None:
            return None
        if isinstance(self.conjugate, str):
            return omega.view(self.conjugate).reshape(-1).astype(float)
        if self.conjugate.kind == "identity":
            return np.full(self.dim, self.conjugate.scale)
        if self.conjugate.kind == "diagonal":
            return self.conjugate.entries
        raise CapabilityError("network conjugation supports diagonal metrics only")

    def validate_omega(self, omega):
        if not self.enforce_certificate:
            return
        budget = self.rho_bar ** (1.0 / self.nlayers)
        for W, _ in self._layers(omega):
            sig = _sigma_cache.sigma(W)
            if sig > budget + 1e-8:
                raise ContractError(
                    f"layer sigma_max={sig:g} exceeds the per-layer budget {budget:g}; "
                    "call normalize_net first")

    def contraction_factor(self, omega):
        f = 1.0
        for W, _ in self._layers(omega):
            f *= _sigma_cache.sigma(W)
        return f

    def apply(self, state, omega, ctx=None):
        self.validate_omega(omega)
        g = self._conj_diag(omega)
        phi, _ = _NONLINEARITIES[self.nonlinearity]
        z = state
        if g is not None:
            z = _col(np.sqrt(g), z) * z
        for W, bb in self._layers(omega):
            z = phi(W @ z + _col(bb, z))
        if g is not None:
            z = z / _col(np.sqrt(g), z)
        return z

    def apply_vjp(self, state, omega, cot, ctx=None):
        phi, dphi = _NONLINEARITIES[self.nonlinearity]
        g = self._conj_diag(omega)
        r = np.sqrt(g) if g is not None else None
        z = state
        if r is not None:
            z = _col(r, z) * z
        pre, acts = [], [z]
        for W, bb in self._layers(omega):
            a = W @ z + _col(bb, z)
            pre.append(a)
            z = phi(a)
            acts.append(z)
        go = np.zeros(omega.dim)
        cz = cot
        if r is not None:
            # out = y / r: cotangent into y, plus d(1/r)/dg on the slice
            cz = cot / _col(r, cot)
            if isinstance(self.conjugate, str):
                y = acts[-1]
                prod = cot * y
                if prod.ndim > 1:
                    prod = prod.sum(axis=-1)
                _acc_vector(go, omega, self.conjugate, -0.5 * prod / (g * r))
        layers = self._layers(omega)
        for idx in range(self.nlayers - 1, -1, -1):
            W, bb = layers[idx]
            da = dphi(pre[idx]) * cz
            dbias = da.sum(axis=-1) if da.ndim > 1 else da
            _acc_vector(go, omega, self.bias_names[idx], dbias)
            zin = acts[idx]
            dW = da @ zin.T if da.ndim > 1 else np.outer(da, zin)
            _acc_vector(go, omega, self.weight_names[idx], dW)
            cz = W.T @ da
        if r is not None:
            # x = r * u: cotangent into u, plus d(r)/dg on the slice
            if isinstance(self.conjugate, str):
                prod = cz * state
                if prod.ndim > 1:
                    prod = prod.sum(axis=-1)
                _acc_vector(go, omega, self.conjugate, 0.5 * prod / r)
            cz = _col(r, cz) * cz
        return cz, go

    def metric(self, omega):
        if self.conjugate is None:
            return MetricMatrix.identity(self.dim)
        if isinstance(self.conjugate, str):
            return MetricMatrix.diagonal(self._conj_diag(omega))
        return self.conjugate

    def metric_quad_vjp(self, omega, x, y):
        go = np.zeros(omega.dim)
        if isinstance(self.conjugate, str):
            prod = x * y
            if prod.ndim > 1:
                prod = prod.sum(axis=-1)
            _acc_vector(go, omega, self.conjugate, prod)
        return go


def normalize_net(omega, rho_bar):
    """Rescale every layer-matrix slice so the composition is rho_bar-Lipschitz.

    Each W becomes W * min(1, rho_bar^(1/L) / sigma_max(W)) where L counts the
    layer-matrix slices; already-contractive layers are left untouched.
    Non-layer slices are copied through unchanged.
    """
    if not (0.0 < rho_bar <= 1.0):
        raise ContractError("target Lipschitz rho_bar must lie in (0, 1]")
    names = [s.name for s in omega.layout if s.role == "layer-matrix"]
    if not names:
        return omega
    budget = rho_bar ** (1.0 / len(names))
    out = omega
    for name in names:
        W = out.view(name)
        W2 = W.reshape(W.shape[0], -1) if W.ndim > 1 else W.reshape(1, -1)
        sig = spectral_norm_estimate(W2)
        if sig > budget:
            out = out.replace_slice(name, W * (budget / sig))
    return out


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

@dataclass
class CompositeOperator:
    """Right-to-left composition: members[0] is the outermost map.

    The composite metric is the outermost numerical member's metric; Net
    members must either be conjugated to that metric or the metric must
    be the identity, otherwise the certificate does not compose.
    """

    members: tuple

    def __post_init__(self):
        self.members = tuple(self.members)
        if not self.members:
            raise ContractError("composite needs at least one member")
        dims = {m.dim for m in self.members}
        if len(dims) != 1:
            raise ContractError("composite members disagree on state dimension")

    @property
    def dim(self):
        return self.members[0].dim

    def _metric_owner(self):
        for m in self.members:
            if not isinstance(m, NetOperator):
                return m
        return None

    def metric(self, omega):
        owner = self._metric_owner()
        if owner is None:
            return MetricMatrix.identity(self.dim)
        return owner.metric(omega)

    def validate_omega(self, omega):
        owner = self._metric_owner()
        H = self.metric(omega)
        for m in self.members:
            m.validate_omega(omega)
            if isinstance(m, NetOperator) and owner is not None and H.kind != "identity":
                if m.conjugate is None:
                    raise ContractError(
                        "network member must be conjugated to the numerical member's metric")

    def contraction_factor(self, omega):
        f = 1.0
        for m in self.members:
            f *= m.contraction_factor(omega)
        return f

    def apply(self, state, omega, ctx=None):
        z = state
        for m in reversed(self.members):
            z = m.apply(z, omega)
        return z

    def apply_vjp(self, state, omega, cot, ctx=None):
        inter = [state]
        z = state
        for m in reversed(self.members):
            z = m.apply(z, omega)
            inter.append(z)
        go = np.zeros(omega.dim)
        cz = cot
        order = list(reversed(self.members))
        for idx in range(len(order) - 1, -1, -1):
            cz, g = order[idx].apply_vjp(inter[idx], omega, cz)
            go += g
        return cz, go

    def metric_quad_vjp(self, omega, x, y):
        owner = self._metric_owner()
        if owner is None:
            return np.zeros(omega.dim)
        return owner.metric_quad_vjp(omega, x, y)


def renormalize_for(op, omega):
    """Re-run spectral normalization for every network member of ``op``.

    Called after each hyper-parameter update so the per-layer Lipschitz
    certificates stay valid during training.  Operators without network
    members return omega unchanged.
    """
    if isinstance(op, NetOperator):
        nets = [op]
    elif isinstance(op, CompositeOperator):
        nets = [m for m in op.members if isinstance(m, NetOperator)]
    else:
        return omega
    out = omega
    for net in nets:
        budget = net.rho_bar ** (1.0 / net.nlayers)
        for wn in net.weight_names:
            W = out.view(wn)
            W2 = W if W.ndim > 1 else W.reshape(1, -1)
            sig = spectral_norm_estimate(W2)
            if sig > budget:
                out = out.replace_slice(wn, W * (budget / sig))
    return out


# ---------------------------------------------------------------------------
# spec-facing wrappers
# ---------------------------------------------------------------------------

def metric_of(op, omega):
    return op.metric(omega)


def apply_pg(op, u, omega):
    if not isinstance(op, PgOperator):
        raise ContractError("apply_pg expects a PgOperator")
    op.validate_omega(omega)
    return op.apply(u, omega)


def apply_alm(op, state, omega):
    if not isinstance(op, AlmOperator):
        raise ContractError("apply_alm expects an AlmOperator")
    op.validate_omega(omega)
    return op.apply(state, omega)


def apply_dladmm(op, state, omega):
    if not isinstance(op, DladmmOperator):
        raise ContractError("apply_dladmm expects a DladmmOperator")
    op.validate_omega(omega)
    return op.apply(state, omega)


def apply_net(op, u, omega):
    if not isinstance(op, NetOperator):
        raise ContractError("apply_net expects a NetOperator")
    return op.apply(u, omega)


def apply_composite(op, state, omega):
    if not isinstance(op, CompositeOperator):
        raise ContractError("apply_composite expects a CompositeOperator")
    op.validate_omega(omega)
    return op.apply(state, omega)
