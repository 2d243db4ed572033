"""Inner iteration, differentiation tape, and hypergradients.

The inner loop interleaves the averaged fixed-point update with a
metric-scaled descent step on the upper loss,

    v_l = T(u, omega)
    v_u = u - s_k H(omega)^{-1} dl/du(u, omega),   s_k = s / (k + 1)
    u'  = Proj_U( mu v_u + (1 - mu) v_l ),

records every step on a tape, and the reverse sweep accumulates the
total derivative of l(u^K(omega), omega) with respect to omega.  A
central-difference oracle over the same forward path validates the
reverse rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DivergenceError
from .metric import (DomainDescriptor, MetricMatrix, h_norm, h_project,
                     min_eigen_estimate, projection_jacobian_diag,
                     spectral_norm_estimate)
from .operators import HyperParams

DIVERGENCE_LIMIT = 1e12


# ---------------------------------------------------------------------------
# upper-level losses (quadratic family, exact derivatives)
# ---------------------------------------------------------------------------

@dataclass
class LossDescriptor:
    """Convex quadratic-family upper loss with analytic derivatives.

    kind "squared_error": l(u) = scale/2 * sum w (u - target)^2
    kind "feasibility":   l(u) = 1/(2B) |Q u1 + u2 - b|_F^2 on a stacked
                          (u1, u2, lam) state; the dual block carries no loss
    kind "quadratic":     l(u) = 1/2 u^T P u + q^T u + const
    """

    kind: str
    dim: int
    target: Optional[np.ndarray] = None
    scale: float = 1.0
    weight: Optional[np.ndarray] = None
    Q: Optional[np.ndarray] = None
    bmat: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    const: float = 0.0

    def __post_init__(self):
        if self.kind not in ("squared_error", "feasibility", "quadratic"):
            raise ContractError(f"unsupported loss kind {self.kind!r}")
        if self.kind == "squared_error":
            if self.target is None:
                self.target = np.zeros(self.dim)
            self.target = np.asarray(self.target, dtype=float)
            if self.scale <= 0:
                raise ContractError("squared error scale must be positive")
            if self.weight is not None:
                self.weight = np.asarray(self.weight, dtype=float).reshape(-1)
                if np.any(self.weight < 0):
                    raise ContractError("loss weights must be nonnegative")
        elif self.kind == "feasibility":
            self.Q = np.asarray(self.Q, dtype=float)
            self.bmat = np.asarray(self.bmat, dtype=float)
        else:
            self.P = np.asarray(self.P, dtype=float)
            if self.q is not None:
                self.q = np.asarray(self.q, dtype=float).reshape(-1)

    # helpers -----------------------------------------------------------
    def _se_terms(self, u):
        t = self.target
        if t.ndim == 1 and u.ndim > 1:
            t = t[:, None]
        d = u - t
        if self.weight is not None:
            w = self.weight[:, None] if u.ndim > 1 else self.weight
            return d, w
        return d, 1.0

    def _feas_parts(self, u):
        n = self.Q.shape[1]
        m = self.Q.shape[0]
        u1, u2 = u[:n], u[n:n + m]
        b = self.bmat
        if b.ndim == 1 and u.ndim > 1:
            b = b[:, None]
        elif b.ndim > 1 and u.ndim == 1:
            b = b[:, 0]
        B = u.shape[1] if u.ndim > 1 else 1
        r = (self.Q @ u1 + u2 - b) / B
        return u1, u2, r, B

    # interface ----------------------------------------------------------
    def value(self, u, omega=None):
        u = np.asarray(u, dtype=float)
        if self.kind == "squared_error":
            d, w = self._se_terms(u)
            return float(0.5 * self.scale * np.sum(w * d * d))
        if self.kind == "feasibility":
            _, _, r, B = self._feas_parts(u)
            return float(0.5 * B * np.sum(r * r))
        quad = 0.5 * float(np.sum(u * (self.P @ u)))
        linear = float(np.sum(self.q[:, None] * u)) if (self.q is not None and u.ndim > 1) \
            else (float(self.q @ u) if self.q is not None else 0.0)
        return quad + linear + self.const

    def grad_u(self, u, omega=None):
        u = np.asarray(u, dtype=float)
        if self.kind == "squared_error":
            d, w = self._se_terms(u)
            return self.scale * w * d
        if self.kind == "feasibility":
            _, _, r, _ = self._feas_parts(u)
            g = np.zeros_like(u)
            n, m = self.Q.shape[1], self.Q.shape[0]
            g[:n] = self.Q.T @ r
            g[n:n + m] = r
            return g
        g = self.P @ u
        if self.q is not None:
            g = g + (self.q[:, None] if u.ndim > 1 else self.q)
        return g

    def grad_omega(self, u, omega):
        return np.zeros(omega.dim)

    def hess_vec(self, u, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "squared_error":
            if self.weight is not None:
                w = self.weight[:, None] if v.ndim > 1 else self.weight
                return self.scale * w * v
            return self.scale * v
        if self.kind == "feasibility":
            n, m = self.Q.shape[1], self.Q.shape[0]
            B = v.shape[1] if v.ndim > 1 else 1
            rv = (self.Q @ v[:n] + v[n:n + m]) / B
            out = np.zeros_like(v)
            out[:n] = self.Q.T @ rv
            out[n:n + m] = rv
            return out
        return self.P @ v

    def smoothness(self):
        return estimate_L_ell(self)


def loss_value_and_grad(loss, u, omega=None):
    """(value, dl/du, dl/domega) for the supported quadratic family."""
    if omega is None:
        gom = np.zeros(0)
    else:
        gom = loss.grad_omega(u, omega)
    return loss.value(u, omega), loss.grad_u(u, omega), gom


def estimate_L_ell(loss):
    """Largest eigenvalue of the u-Hessian of the supported quadratic family."""
    if loss.kind == "squared_error":
        if loss.weight is not None:
            return loss.scale * float(np.max(loss.weight))
        return loss.scale
    if loss.kind == "feasibility":
        m, n = loss.Q.shape
        stacked = np.hstack([loss.Q, np.eye(m)])
        B = loss.bmat.shape[1] if loss.bmat.ndim > 1 else 1
        return spectral_norm_estimate(stacked) ** 2 / B
    return spectral_norm_estimate(loss.P)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class TapeStep:
    k: int
    s_k: float
    u_prev: np.ndarray
    grad: np.ndarray
    hinv_grad: np.ndarray
    v_l: np.ndarray
    v_u: np.ndarray
    pre_proj: np.ndarray
    u_next: np.ndarray


@dataclass
class InnerRecord:
    k: int
    residual_hlb_sq: float
    rel_step: float
    loss: float


@dataclass
class Tape:
    """Unrolled record of one inner loop; forward replay is bit-exact."""

    op: object
    loss: LossDescriptor
    omega: HyperParams
    alpha: float
    mu: float
    s: float
    K: int
    domain: DomainDescriptor
    metric: MetricMatrix
    grad_through_metric: bool
    u0: np.ndarray
    steps: list
    uK: np.ndarray
    loss_value: float

    def replay(self):
        u = self.u0.copy()
        for st in self.steps:
            du = self.op.apply(u, self.omega)
            v_l = u + self.alpha * (du - u)
            g = self.loss.grad_u(u, self.omega)
            v_u = u - st.s_k * self.metric.solve(g)
            u = h_project(self.metric, self.domain, self.mu * v_u + (1.0 - self.mu) * v_l)
        return u


# ---------------------------------------------------------------------------
# inner loop
# ---------------------------------------------------------------------------

def _step_bound(h_lb, loss):
    L = loss.smoothness()
    if L <= 0:
        return math.inf
    return min_eigen_estimate(h_lb) / L


def _rel_step(u, u_prev):
    denom = float(np.linalg.norm(u_prev))
    if denom == 0.0:
        denom = 1.0
    return float(np.linalg.norm(u - u_prev)) / denom


def inner_loop(op, loss, omega, cfg, u0=None, h_lb=None, build_tape=True, record=True):
    """Run K inner steps; return (uK, tape, records).

    cfg supplies alpha, mu, s, K, and the domain U.  ``h_lb`` is the
    metric lower bound used for recorded residuals (defaults to the
    current H(omega)).  Raises ContractError when mu or s violate their
    admissible ranges and DivergenceError on non-finite iterates.
    """
    if not (0.0 < cfg.mu < 1.0):
        raise ContractError("aggregation weight mu must lie strictly inside (0, 1)")
    if not (0.0 < cfg.alpha < 1.0):
        raise ContractError("averaging weight alpha must lie in (0, 1)")
    if cfg.K < 0:
        raise ContractError("inner iteration count K must be nonnegative")
    op.validate_omega(omega)
    H = op.metric(omega)
    hlb = h_lb if h_lb is not None else (cfg.h_lb if cfg.h_lb is not None else H)
    bound = _step_bound(hlb, loss)
    if not (0.0 < cfg.s < bound):
        raise ContractError(
            f"inner step s={cfg.s:g} outside (0, lambda_min(H_lb)/L_ell) = (0, {bound:g})")
    domain = cfg.domain if cfg.domain is not None else DomainDescriptor.full_space(op.dim)

    u = np.zeros(op.dim) if u0 is None else np.array(u0, dtype=float)
    u0_copy = u.copy()
    steps = []
    records = []
    u_hist_prev = None
    for k in range(1, cfg.K + 1):
        s_k = cfg.s / (k + 1)
        du = op.apply(u, omega)
        v_l = u + cfg.alpha * (du - u)
        if record and k >= 2:
            # v_l = T(u^{k-1}): residual for the previous iterate
            records.append(InnerRecord(
                k - 1,
                h_norm(hlb, u - v_l) ** 2,
                _rel_step(u, u_hist_prev),
                loss.value(u, omega)))
        g = loss.grad_u(u, omega)
        hg = H.solve(g)
        v_u = u - s_k * hg
        pre = cfg.mu * v_u + (1.0 - cfg.mu) * v_l
        u_next = h_project(H, domain, pre)
        if not np.all(np.isfinite(u_next)) or np.max(np.abs(u_next)) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"inner iterate diverged at k={k}", inner_step=k)
        if build_tape:
            steps.append(TapeStep(k, s_k, u.copy(), g, hg, v_l, v_u, pre, u_next.copy()))
        u_hist_prev = u
        u = u_next
    if record and cfg.K >= 1:
        du = op.apply(u, omega)
        v_l = u + cfg.alpha * (du - u)
        records.append(InnerRecord(
            cfg.K,
            h_norm(hlb, u - v_l) ** 2,
            _rel_step(u, u_hist_prev),
            loss.value(u, omega)))
    tape = None
    if build_tape:
        tape = Tape(op, loss, omega, cfg.alpha, cfg.mu, cfg.s, cfg.K, domain, H,
                    getattr(cfg, "grad_through_metric", True),
                    u0_copy, steps, u.copy(), loss.value(u, omega))
    return u, tape, records


def km_iterate(op, omega, cfg, u0, K, h_lb=None, loss=None):
    """Plain averaged fixed-point iteration u <- T(u); diagnostics only.

    This is the mu = 0 path: no loss-descent direction is mixed in, so
    the limit depends on the initial point when the fixed-point set is
    not a singleton.
    """
    op.validate_omega(omega)
    H = op.metric(omega)
    hlb = h_lb if h_lb is not None else H
    u = np.array(u0, dtype=float)
    records = []
    prev = None
    for k in range(1, K + 1):
        du = op.apply(u, omega)
        v_l = u + cfg.alpha * (du - u)
        if k >= 2:
            records.append(InnerRecord(
                k - 1, h_norm(hlb, u - v_l) ** 2, _rel_step(u, prev),
                loss.value(u, omega) if loss is not None else math.nan))
        if not np.all(np.isfinite(v_l)) or np.max(np.abs(v_l)) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"KM iterate diverged at k={k}", inner_step=k)
        prev = u
        u = v_l
    if K >= 1:
        du = op.apply(u, omega)
        v_l = u + cfg.alpha * (du - u)
        records.append(InnerRecord(
            K, h_norm(hlb, u - v_l) ** 2, _rel_step(u, prev),
            loss.value(u, omega) if loss is not None else math.nan))
    return u, records


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

def hypergradient(tape, loss=None, omega=None, corrupt_rule=False):
    """Total derivative d l(u^K(omega), omega) / d omega by a reverse sweep.

    ``corrupt_rule`` deliberately mis-scales one reverse rule (the
    loss-Hessian term of the descent direction); it exists so the
    finite-difference harness can prove it would catch a broken rule.
    """
    loss = loss if loss is not None else tape.loss
    omega = omega if omega is not None else tape.omega
    H = tape.metric
    cu = loss.grad_u(tape.uK, omega)
    go = loss.grad_omega(tape.uK, omega).astype(float)
    hess_scale = 0.5 if corrupt_rule else 1.0
    for st in reversed(tape.steps):
        if tape.domain.kind != "full":
            cu = projection_jacobian_diag(tape.domain, st.pre_proj) * cu
        cvu = tape.mu * cu
        cvl = (1.0 - tape.mu) * cu
        cs, g_op = tape.op.apply_vjp(st.u_prev, omega, tape.alpha * cvl)
        cu = (1.0 - tape.alpha) * cvl + cs
        hv = H.solve(cvu)
        cu = cu + cvu - hess_scale * st.s_k * loss.hess_vec(st.u_prev, hv)
        go += g_op
        if tape.grad_through_metric:
            go += st.s_k * tape.op.metric_quad_vjp(omega, hv, st.hinv_grad)
    return go


def fd_hypergradient(op, loss, omega, cfg, u0=None, h=None):
    """Central-difference oracle for d phi_K / d omega, coordinate by coordinate."""
    base = omega.values
    if h is None:
        h = 1e-6 * (np.abs(base) + 1.0)
    else:
        h = np.broadcast_to(np.asarray(h, dtype=float), base.shape).copy()
    out = np.zeros_like(base)
    for i in range(base.shape[0]):
        for sgn in (+1.0, -1.0):
            vals = base.copy()
            vals[i] += sgn * h[i]
            u, _, _ = inner_loop(op, loss, omega.with_values(vals), cfg, u0=u0,
                                 build_tape=False, record=False)
            out[i] += sgn * loss.value(u, omega.with_values(vals))
        out[i] /= 2.0 * h[i]
    return out
