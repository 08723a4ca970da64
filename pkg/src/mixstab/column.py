"""
Nonlinear single-column solver for the momentum and density diffusion system
on ``-h <= z <= 0``.

Nodes ``z_k = -h + k*dz`` (k = 0..N).  The bottom node holds the Dirichlet
values, the surface node is a half cell closed by the prescribed fluxes
``nu1 du/dz = rho_a Vx / rho0``, ``nu1 dv/dz = rho_a Vy / rho0`` and
``nu2 drho/dz = Q``.  Viscosities live on faces and are evaluated at the face
Richardson number from centred differences.

Two treatments of the nonlinearity are available:

``"linearized"`` (default)
    the implicit step is solved by Newton's method: face fluxes are
    linearised about the latest iterate, ``F(g) ~ F(g_i) + J (g - g_i)``
    with J the local 3x3 flux Jacobian, and each iteration is one
    block-tridiagonal solve.
``"lagged"``
    viscosities frozen at the old level, one solve per step.  Cheaper, but
    it amplifies short waves at many linearly stable equilibria.

Diffusion is theta-implicit (``theta_scheme = 1`` is backward Euler).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from numba import njit
from scipy.linalg import solve_continuous_lyapunov

from .closures import ClosureModel, PhysicalConstants
from .equilibrium import Equilibrium, Forcing
from .errors import NegativeDiffusivityError, PoleError
from .stability import assemble_matrix

__all__ = [
    "Grid",
    "ColumnState",
    "SimConfig",
    "Verdict",
    "PerturbationRun",
    "step",
    "advance",
    "face_richardson",
    "l2_norm",
    "perturbation_shape",
    "run_perturbation_experiment",
    "steadiness_residual",
    "mode_decay_rate",
    "energy_weight",
]

ZERO_SHEAR = 1e-14
_STATUS_OK, _STATUS_NEGATIVE, _STATUS_POLE, _STATUS_NEWTON = 0, 1, 2, 3


@njit(cache=True)
def _copy(src, dst):
    """dst[...] = src for C-contiguous arrays of equal size."""
    a = src.reshape(src.size)
    b = dst.reshape(dst.size)
    for i in range(a.size):
        b[i] = a[i]


@njit(cache=True)
def _closure(kind, a1, b1, a2, b2, R):
    c = 10.0 if kind == 1 else 5.0
    x = 1.0 + c * R
    x2 = x * x
    f1 = a1 + b1 / x2
    d1 = -2.0 * c * b1 / (x2 * x)
    if kind == 0:
        f2 = a2 + a1 / x + b1 / (x2 * x)
        d2 = -c * a1 / x2 - 3.0 * c * b1 / (x2 * x2)
    elif kind == 1:
        f2 = a2 + b2 / (x2 * x)
        d2 = -3.0 * c * b2 / (x2 * x2)
    elif kind == 2:
        f2 = a2 + a1 / x2 + b1 / (x2 * x2)
        d2 = -2.0 * c * a1 / (x2 * x) - 4.0 * c * b1 / (x2 * x2 * x)
    else:
        f2 = a2 + b2 / x2
        d2 = -2.0 * c * b2 / (x2 * x)
    return x, f1, f2, d1, d2


@njit(cache=True)
def _inv3(M, out, k):
    """out[k] = inverse of the 3x3 matrix M (cofactor formula)."""
    a, b, c = M[0, 0], M[0, 1], M[0, 2]
    d, e, f = M[1, 0], M[1, 1], M[1, 2]
    g, h, i = M[2, 0], M[2, 1], M[2, 2]
    A = e * i - f * h
    B = -(d * i - f * g)
    C = d * h - e * g
    inv = 1.0 / (a * A + b * B + c * C)
    out[k, 0, 0] = A * inv
    out[k, 1, 0] = B * inv
    out[k, 2, 0] = C * inv
    out[k, 0, 1] = -(b * i - c * h) * inv
    out[k, 1, 1] = (a * i - c * g) * inv
    out[k, 2, 1] = -(a * h - b * g) * inv
    out[k, 0, 2] = (b * f - c * e) * inv
    out[k, 1, 2] = -(a * f - c * d) * inv
    out[k, 2, 2] = (a * e - b * d) * inv


@njit(cache=True)
def _faces(Y, dz, linearized, kind, a1, b1, a2, b2, g_rho0, R_clamp, J, F, G):
    """Face gradients G, fluxes F and flux Jacobians J of the state Y.

    Returns ``(status, R)`` with status 0 when every face is admissible.
    """
    N = Y.shape[0] - 1
    for j in range(N):
        for m in range(3):
            G[j, m] = (Y[j + 1, m] - Y[j, m]) / dz
        S = G[j, 0] * G[j, 0] + G[j, 1] * G[j, 1]
        clamped = False
        if S < 1e-14:
            R = R_clamp if G[j, 2] <= 0.0 else -R_clamp
            clamped = True
        else:
            R = -g_rho0 * G[j, 2] / S
            if R > R_clamp:
                R = R_clamp
                clamped = True
            elif R < -R_clamp:
                R = -R_clamp
                clamped = True
        x, f1, f2, d1, d2 = _closure(kind, a1, b1, a2, b2, R)
        if abs(x) < 1e-9:
            return _STATUS_POLE, R
        if f2 < 0.0:
            return _STATUS_NEGATIVE, R
        for p in range(3):
            for q in range(3):
                J[j, p, q] = 0.0
        J[j, 0, 0] = f1
        J[j, 1, 1] = f1
        J[j, 2, 2] = f2
        if linearized and not clamped:
            # rank-one part: (g_p dnu_p/dR) (dR/dg_q)
            uu0 = G[j, 0] * d1
            uu1 = G[j, 1] * d1
            uu2 = G[j, 2] * d2
            w0 = -2.0 * G[j, 0] * R / S
            w1 = -2.0 * G[j, 1] * R / S
            w2 = -g_rho0 / S
            J[j, 0, 0] += uu0 * w0
            J[j, 0, 1] += uu0 * w1
            J[j, 0, 2] += uu0 * w2
            J[j, 1, 0] += uu1 * w0
            J[j, 1, 1] += uu1 * w1
            J[j, 1, 2] += uu1 * w2
            J[j, 2, 0] += uu2 * w0
            J[j, 2, 1] += uu2 * w1
            J[j, 2, 2] += uu2 * w2
        F[j, 0] = f1 * G[j, 0]
        F[j, 1] = f1 * G[j, 1]
        F[j, 2] = f2 * G[j, 2]
    return _STATUS_OK, 0.0


@njit(cache=True)
def _block_solve(X, Xold, J, E, dz, dt, r, Fs, Dinv, rp, D, M, rhs, tmp):
    """Solve the block-tridiagonal system of one implicit step into X.

    Row k (interior) reads ``X_k - r (J_k (X_{k+1}-X_k) - J_{k-1} (X_k-X_{k-1}))
    = Xold_k + dt/dz (E_k - E_{k-1})``; the surface row is the half-cell
    version closed by the flux Fs.  X[0] holds the Dirichlet values.
    """
    N = X.shape[0] - 1
    for k in range(1, N + 1):
        if k < N:
            for p in range(3):
                rhs[p] = Xold[k, p] + dt / dz * (E[k, p] - E[k - 1, p])
                for q in range(3):
                    D[p, q] = r * (J[k, p, q] + J[k - 1, p, q])
                D[p, p] += 1.0
            lower = r
        else:
            for p in range(3):
                rhs[p] = Xold[N, p] + 2.0 * dt / dz * (Fs[p] - E[N - 1, p])
                for q in range(3):
                    D[p, q] = 2.0 * r * J[N - 1, p, q]
                D[p, p] += 1.0
            lower = 2.0 * r
        # lower block is -lower * J[k-1]
        if k == 1:
            for p in range(3):
                acc = 0.0
                for q in range(3):
                    acc += J[0, p, q] * X[0, q]
                rhs[p] += lower * acc
        else:
            # M = L_k Dinv_{k-1};  D <- D - M U_{k-1} with U_{k-1} = -r J[k-1]
            for p in range(3):
                for q in range(3):
                    acc = 0.0
                    for s in range(3):
                        acc += -lower * J[k - 1, p, s] * Dinv[k - 1, s, q]
                    M[p, q] = acc
            for p in range(3):
                for q in range(3):
                    acc = 0.0
                    for s in range(3):
                        acc += M[p, s] * J[k - 1, s, q]
                    D[p, q] += r * acc
                acc = 0.0
                for s in range(3):
                    acc += M[p, s] * rp[k - 1, s]
                rhs[p] -= acc
        _inv3(D, Dinv, k)
        for p in range(3):
            rp[k, p] = rhs[p]

    for p in range(3):
        acc = 0.0
        for q in range(3):
            acc += Dinv[N, p, q] * rp[N, q]
        X[N, p] = acc
    for k in range(N - 1, 0, -1):
        for p in range(3):
            acc = rp[k, p]
            for q in range(3):
                acc += r * J[k, p, q] * X[k + 1, q]
            tmp[p] = acc
        for p in range(3):
            acc = 0.0
            for q in range(3):
                acc += Dinv[k, p, q] * tmp[q]
            X[k, p] = acc


@njit(cache=True)
def _residual(X, Xold, F, Fold, theta, dt, dz, Fs, inv_scale):
    """Max and 2-norm of the implicit-step residual, each field divided by its range."""
    N = X.shape[0] - 1
    rmax = 0.0
    r2 = 0.0
    for k in range(1, N + 1):
        for p in range(3):
            if k < N:
                flux = theta * (F[k, p] - F[k - 1, p]) + (1.0 - theta) * (Fold[k, p] - Fold[k - 1, p])
                v = X[k, p] - Xold[k, p] - dt / dz * flux
            else:
                below = theta * F[N - 1, p] + (1.0 - theta) * Fold[N - 1, p]
                v = X[N, p] - Xold[N, p] - 2.0 * dt / dz * (Fs[p] - below)
            v = abs(v) * inv_scale[p]
            rmax = max(rmax, v)
            r2 += v * v
    return rmax, np.sqrt(r2)


@njit(cache=True)
def _implicit_step(X, Xold, dt, dz, theta, linearized, kind, a1, b1, a2, b2, g_rho0, Fs, R_clamp,
                   max_iter, tol, bottom_flux, w, one_pass, stats, guess_is_old, faces_ready):
    """Solve ``X - Xold = dt * div(theta F(X) + (1-theta) F(Xold))`` for X.

    X holds the initial guess on entry.  With ``linearized`` the solve is a
    damped Newton iteration: the new-level flux is linearised about the
    latest iterate, the block system is solved and the step is halved until
    the residual (each field divided by its range) decreases.  It stops once
    the update or the residual is below ``tol``, raised if necessary to the
    rounding level of the step's largest flux terms.  Otherwise the viscosities
    are lagged at the old level and one linear solve is made.  ``one_pass``
    stops after the first linearised solve (linearly implicit Euler).
    ``guess_is_old`` says X equals Xold on entry, ``faces_ready`` that the
    face arrays in ``w`` already hold the faces of Xold.

    Returns ``(status, R, faces_valid)`` with the status codes of
    :func:`_advance`; ``faces_valid`` tells whether the face arrays belong
    to the accepted X.
    """
    J, F, G, Jt, Ft, Gt, Fold, E, Xnew, Xt, Dinv, rp, D, M, rhs, tmp, inv_scale = w
    N = X.shape[0] - 1
    r = theta * dt / (dz * dz)
    smax = 0.0
    for p in range(3):
        lo = Xold[0, p]
        hi = Xold[0, p]
        for k in range(1, N + 1):
            lo = min(lo, Xold[k, p])
            hi = max(hi, Xold[k, p])
        inv_scale[p] = hi - lo
        smax = max(smax, hi - lo)
    for p in range(3):
        inv_scale[p] = 1.0 / max(inv_scale[p], 1e-12 * smax, 1e-300)

    if faces_ready:
        _copy(F, Fold)
    else:
        status, R = _faces(Xold, dz, linearized, kind, a1, b1, a2, b2, g_rho0, R_clamp, J, Fold, G)
        if status != _STATUS_OK:
            return status, R, False
    # the residual cannot be resolved below the rounding of its largest terms
    jmax = 0.0
    for j in range(N):
        for p in range(3):
            for q in range(3):
                jmax = max(jmax, abs(J[j, p, q]))
    tol = max(tol, 64.0 * 2.220446049250313e-16 * (1.0 + 4.0 * dt * jmax / (dz * dz)))
    if guess_is_old:
        _copy(Fold, F)
    else:
        status, R = _faces(X, dz, linearized, kind, a1, b1, a2, b2, g_rho0, R_clamp, J, F, G)
        if status != _STATUS_OK:
            return status, R, False
    from_faces = False
    converged = False
    for newton in range(max_iter if linearized else 1):
        # explicit part of the face flux: theta (F - J g) + (1 - theta) Fold
        for j in range(N):
            for p in range(3):
                acc = 0.0
                for q in range(3):
                    acc += J[j, p, q] * G[j, q]
                E[j, p] = theta * (F[j, p] - acc) + (1.0 - theta) * Fold[j, p]
        for p in range(3):
            Xnew[0, p] = X[0, p]
        _block_solve(Xnew, Xold, J, E, dz, dt, r, Fs, Dinv, rp, D, M, rhs, tmp)
        stats[2] += 1
        dmax = 0.0
        for k in range(1, N + 1):
            for p in range(3):
                dmax = max(dmax, abs(Xnew[k, p] - X[k, p]) * inv_scale[p])
        if not linearized or one_pass or dmax <= tol:
            _copy(Xnew, X)
            from_faces = False
            converged = True
            break
        # full Newton step first; its residual often settles the step
        st, Rt = _faces(Xnew, dz, linearized, kind, a1, b1, a2, b2, g_rho0, R_clamp, Jt, Ft, Gt)
        rtmax = np.inf
        rt = np.inf
        if st == _STATUS_OK:
            rtmax, rt = _residual(Xnew, Xold, Ft, Fold, theta, dt, dz, Fs, inv_scale)
        if rtmax <= tol:
            _copy(Xnew, Xt)
        else:
            r0max, r0 = _residual(X, Xold, F, Fold, theta, dt, dz, Fs, inv_scale)
            lam = 1.0
            accepted = rt <= (1.0 - 1e-4) * r0
            while not accepted and lam > 1e-10:
                lam *= 0.5
                for k in range(N + 1):
                    for p in range(3):
                        Xt[k, p] = X[k, p] + lam * (Xnew[k, p] - X[k, p])
                st, Rt = _faces(Xt, dz, linearized, kind, a1, b1, a2, b2, g_rho0, R_clamp, Jt, Ft, Gt)
                if st == _STATUS_OK:
                    rtmax, rt = _residual(Xt, Xold, Ft, Fold, theta, dt, dz, Fs, inv_scale)
                    accepted = rt <= (1.0 - 1e-4 * lam) * r0
            if not accepted:
                if r0max <= 1e3 * tol:
                    # already at the round-off floor of the residual
                    from_faces = True
                    converged = True
                    break
                return _STATUS_NEWTON, 0.0, False
            if lam == 1.0:
                _copy(Xnew, Xt)
        _copy(Xt, X)
        _copy(Jt, J)
        _copy(Ft, F)
        _copy(Gt, G)
        from_faces = True
        if rtmax <= tol:
            converged = True
            break
    if not converged:
        return _STATUS_NEWTON, 0.0, False

    # flux through the bottom face belonging to the accepted state
    for p in range(3):
        if from_faces:
            bottom_flux[p] = theta * F[0, p] + (1.0 - theta) * Fold[0, p]
        else:
            acc = E[0, p]
            for q in range(3):
                acc += theta * J[0, p, q] * (X[1, q] - X[0, q]) / dz
            bottom_flux[p] = acc
    return _STATUS_OK, 0.0, from_faces


@njit(cache=True)
def _advance(X, dz, dt, theta, nsteps, linearized, kind, a1, b1, a2, b2,
             g_rho0, Fs, R_clamp, bottom_flux, max_iter, tol, max_levels, counters):
    """Advance X (shape (N+1, 3): u, v, rho) in place by ``nsteps`` steps.

    Every step is one solve of the theta scheme with step ``dt``.  When
    Newton fails from the old state, a starting guess is built by marching
    ``2**m`` sub-steps (m = 1 .. ``max_levels``) and the full step is solved
    again from there; the accepted state always solves the ``dt`` equation.
    If no guess works the equation has no reachable solution, as happens
    where the linearised problem is anti-diffusive; the step is then the
    linearly implicit Euler step and ``counters[0]`` is incremented.

    Returns ``(status, R, steps_done)``; status 1 means a face had f2 < 0,
    status 2 a face sat on the closure pole (R is the offending value).
    """
    N = X.shape[0] - 1
    w = (np.zeros((N, 3, 3)), np.zeros((N, 3)), np.zeros((N, 3)),
         np.zeros((N, 3, 3)), np.zeros((N, 3)), np.zeros((N, 3)),
         np.zeros((N, 3)), np.zeros((N, 3)), np.empty_like(X), np.empty_like(X),
         np.zeros((N + 1, 3, 3)), np.zeros((N + 1, 3)), np.zeros((3, 3)), np.zeros((3, 3)),
         np.zeros(3), np.zeros(3), np.zeros(3))
    Xold = np.empty_like(X)
    Xsub = np.empty_like(X)
    sub_flux = np.zeros(3)
    ready = False
    for it in range(nsteps):
        _copy(X, Xold)
        status, R, ready = _implicit_step(X, Xold, dt, dz, theta, linearized, kind, a1, b1, a2, b2,
                                          g_rho0, Fs, R_clamp, max_iter, tol, bottom_flux, w, False,
                                          counters, True, ready)
        if status == _STATUS_NEWTON:
            counters[1] += 1
            for m in range(1, max_levels + 1):
                n_sub = 2**m
                _copy(Xold, X)
                ok = True
                for i in range(n_sub):
                    _copy(X, Xsub)
                    st, Rs, _ = _implicit_step(X, Xsub, dt / n_sub, dz, theta, linearized, kind, a1, b1,
                                               a2, b2, g_rho0, Fs, R_clamp, max_iter, tol, sub_flux, w,
                                               False, counters, True, False)
                    if st != _STATUS_OK:
                        ok = False
                        break
                if not ok:
                    continue
                status, R, ready = _implicit_step(X, Xold, dt, dz, theta, linearized, kind, a1, b1, a2,
                                                  b2, g_rho0, Fs, R_clamp, max_iter, tol, bottom_flux, w,
                                                  False, counters, False, False)
                if status != _STATUS_NEWTON:
                    break
        if status == _STATUS_NEWTON:
            _copy(Xold, X)
            status, R, ready = _implicit_step(X, Xold, dt, dz, theta, linearized, kind, a1, b1, a2, b2,
                                              g_rho0, Fs, R_clamp, max_iter, tol, bottom_flux, w, True,
                                              counters, True, False)
            counters[0] += 1
        if status != _STATUS_OK:
            _copy(Xold, X)
            return status, R, it
    return _STATUS_OK, 0.0, nsteps


@dataclass(frozen=True)
class Grid:
    """Uniform vertical grid with N cells on [-h, 0]."""

    h: float = 50.0
    N: int = 200

    def __post_init__(self):
        if self.N < 8:
            raise ValueError(f"need N >= 8 cells, got {self.N}")
        if not self.h > 0:
            raise ValueError("depth h must be > 0")

    @property
    def dz(self) -> float:
        return self.h / self.N

    @property
    def z(self) -> np.ndarray:
        return np.linspace(-self.h, 0.0, self.N + 1)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid weights; the Dirichlet bottom node carries none."""
        w = np.full(self.N + 1, self.dz)
        w[0] = 0.0
        w[-1] = 0.5 * self.dz
        return w


@dataclass(frozen=True, eq=False)
class ColumnState:
    grid: Grid
    u: np.ndarray
    v: np.ndarray
    rho: np.ndarray
    t: float = 0.0
    fallback_steps: int = 0

    @classmethod
    def from_equilibrium(cls, eq: Equilibrium, grid: Grid | None = None):
        grid = grid or Grid(h=eq.boundary.h)
        if not math.isclose(grid.h, eq.boundary.h):
            raise ValueError(f"grid depth {grid.h} differs from equilibrium depth {eq.boundary.h}")
        z = grid.z
        return cls(grid, eq.u(z), eq.v(z), eq.rho(z))

    def stacked(self) -> np.ndarray:
        return np.column_stack([self.u, self.v, self.rho])

    def with_fields(self, X: np.ndarray, t: float) -> "ColumnState":
        return replace(self, u=X[:, 0].copy(), v=X[:, 1].copy(), rho=X[:, 2].copy(), t=t)


@dataclass(frozen=True)
class SimConfig:
    dt: float
    t_end: float
    model: ClosureModel
    forcing: Forcing
    theta_scheme: float = 1.0
    coupling: str = "linearized"
    R_clamp: float = 1e6
    newton_max_iter: int = 30
    newton_tol: float = 1e-10
    guess_levels: int = 8

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not 0.0 <= self.theta_scheme <= 1.0:
            raise ValueError("theta_scheme must lie in [0, 1]")
        if self.coupling not in ("linearized", "lagged"):
            raise ValueError(f"unknown coupling {self.coupling!r}")
        if self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def surface_fluxes(self) -> np.ndarray:
        mu, mv = self.forcing.momentum_flux
        return np.array([mu, mv, self.forcing.Q])


def advance(state: ColumnState, cfg: SimConfig, nsteps: int = 1, bottom_flux: np.ndarray | None = None):
    """``nsteps`` time steps from ``state``; the input is not modified.

    Raises :class:`NegativeDiffusivityError` if a face reaches f2 < 0 and
    :class:`PoleError` if a face sits on the closure singularity.  Steps
    taken with the linearly implicit fallback are added to
    ``fallback_steps`` of the returned state.
    """
    X = np.array(state.stacked(), dtype=np.float64)
    # The equations only see gradients, so step the departure from the
    # bottom values: this keeps rho ~ 1000 from swamping small contrasts.
    base = X[0].copy()
    X -= base
    flux = np.zeros(3) if bottom_flux is None else bottom_flux
    counters = np.zeros(3, dtype=np.int64)
    k = cfg.forcing.constants
    kind, a1, b1, a2, b2 = cfg.model.kernel_args()
    status, R, done = _advance(
        X, state.grid.dz, cfg.dt, cfg.theta_scheme, int(nsteps), cfg.coupling == "linearized",
        kind, a1, b1, a2, b2, k.g / k.rho0, cfg.surface_fluxes(), cfg.R_clamp, flux,
        int(cfg.newton_max_iter), float(cfg.newton_tol), int(cfg.guess_levels), counters,
    )
    t = state.t + done * cfg.dt
    if status == _STATUS_NEGATIVE:
        raise NegativeDiffusivityError(R, t)
    if status == _STATUS_POLE:
        raise PoleError(R, cfg.model.pole)
    return replace(state.with_fields(X + base, t), fallback_steps=state.fallback_steps + int(counters[0]))


def step(state: ColumnState, cfg: SimConfig) -> ColumnState:
    """One time step."""
    return advance(state, cfg, 1)


def face_richardson(state: ColumnState, cfg: SimConfig) -> np.ndarray:
    """Face Richardson numbers with the solver's zero-shear clamp."""
    dz = state.grid.dz
    th, be, ps = (np.diff(f) / dz for f in (state.u, state.v, state.rho))
    S = th * th + be * be
    k = cfg.forcing.constants
    with np.errstate(divide="ignore", invalid="ignore"):
        R = -(k.g / k.rho0) * ps / S
    R = np.where(S < ZERO_SHEAR, np.where(ps <= 0, cfg.R_clamp, -cfg.R_clamp), R)
    return np.clip(R, -cfg.R_clamp, cfg.R_clamp)


def l2_norm(values: np.ndarray, grid: Grid) -> float:
    return float(np.sqrt(np.sum(grid.weights * values * values)))


def perturbation_shape(grid: Grid, shape: str = "lowest_mode", rng=None, n_modes: int = 16):
    """Unit-amplitude profile vanishing at z=-h with zero slope at z=0.

    ``lowest_mode`` is ``sin(pi (z+h) / (2h))``; ``random`` a random
    combination of the first ``n_modes`` such modes, scaled to max |.| = 1.
    """
    s = (grid.z + grid.h) / grid.h
    if shape == "lowest_mode":
        return np.sin(0.5 * np.pi * s)
    if shape == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        j = np.arange(1, n_modes + 1)
        coef = rng.standard_normal(n_modes) / j
        prof = np.sin(np.outer(s, (2 * j - 1) * 0.5 * np.pi)) @ coef
        return prof / np.abs(prof).max()
    raise ValueError(f"unknown perturbation shape {shape!r}")


class Verdict(str, Enum):
    DECAY = "decay"
    GROWTH = "growth"
    ZONE_EXIT = "zone-exit"
    NEUTRAL = "neutral"
    UNPERTURBED = "unperturbed"


@dataclass(eq=False)
class PerturbationRun:
    t: np.ndarray
    norm_u: np.ndarray
    norm_v: np.ndarray
    norm_rho: np.ndarray
    norm: np.ndarray
    R_surface: np.ndarray
    R_min: np.ndarray
    R_max: np.ndarray
    valid: np.ndarray
    verdict: Verdict
    growth_factor: float
    late_ratio: float
    decay_rate: float
    final_state: ColumnState | None = None
    fallback_steps: int = 0
    exit_R: float | None = None
    message: str = ""

    def rows(self):
        """Time-series rows (t, norm_u, norm_v, norm_rho, R_surface, R_min, R_max, valid)."""
        return zip(self.t, self.norm_u, self.norm_v, self.norm_rho,
                   self.R_surface, self.R_min, self.R_max, self.valid)


def _contrasts(eq: Equilibrium):
    h = eq.boundary.h
    return np.abs(np.array([eq.theta, eq.beta, eq.psi])) * h


def energy_weight(eq: Equilibrium, model: ClosureModel, constants=None) -> np.ndarray:
    """Weight P for the perturbation energy ``int y^T P y dz``.

    ``y`` is the deviation with each field divided by its contrast.  When the
    scaled matrix ``As`` of the linearised system has all eigenvalues in the
    right half plane, P solves ``As^T P + P As = I``; the energy then falls
    monotonically for small perturbations even when ``As`` is far from
    normal.  Otherwise (or if the matrix cannot be built) P is the identity.
    """
    scale = _contrasts(eq)
    active = scale > 0
    P = np.eye(3)
    try:
        A = np.asarray(assemble_matrix(eq, model, constants or PhysicalConstants()).entries)
    except (ArithmeticError, ValueError):
        return P[np.ix_(active, active)]
    D = scale[active]
    As = A[np.ix_(active, active)] * D[None, :] / D[:, None]
    if not np.all(np.isfinite(As)) or np.linalg.eigvals(As).real.min() <= 0:
        return P[np.ix_(active, active)]
    W = solve_continuous_lyapunov(-As.T, -np.eye(len(D)))
    W = 0.5 * (W + W.T)
    if np.linalg.eigvalsh(W).min() <= 0:
        return P[np.ix_(active, active)]
    return W / np.linalg.eigvalsh(W).max()


def run_perturbation_experiment(eq: Equilibrium, amplitude: float = 1e-3, shape: str = "lowest_mode",
                                cfg: SimConfig | None = None, grid: Grid | None = None, seed: int = 0,
                                sample_every: int = 100, late_fraction: float = 0.2,
                                growth_threshold: float = 10.0, blowup: float = 1e8,
                                floor: float = 1e-3, initial: np.ndarray | None = None):
    """Evolve a perturbed equilibrium and judge whether the perturbation decays.

    Each field is perturbed by a profile from :func:`perturbation_shape`
    scaled so that its largest slope is ``amplitude`` times the field's
    equilibrium slope; the closures respond to gradients, so this is what
    keeps a perturbation small.  Alternatively
    ``initial`` gives the starting (u, v, rho) columns on the grid nodes; its
    bottom row is replaced by the boundary values.  Norms are the
    trapezoid L2 norms of the deviation from the equilibrium; ``norm`` is the
    square root of the energy from :func:`energy_weight`.

    Verdicts: ``zone-exit`` if a face leaves the valid closure range,
    ``growth`` if the combined norm grew by ``growth_threshold`` (the run stops
    early past ``blowup``), ``decay`` if it ends below its start and still
    falls over the last ``late_fraction`` of the run (or has dropped below
    ``floor`` times its start, where round-off takes over), else ``neutral``.
    """
    if cfg is None:
        raise ValueError("a SimConfig is required")
    grid = grid or Grid(h=eq.boundary.h)
    # evolve departures from the bottom values so that rounding is relative
    # to the contrasts rather than to rho ~ 1000
    b = eq.boundary
    offset = np.array([b.u_b, b.v_b, b.rho_b])
    base = ColumnState.from_equilibrium(replace(eq, boundary=replace(b, u_b=0.0, v_b=0.0, rho_b=0.0)), grid)
    ref = base.stacked()
    scale = _contrasts(eq)
    rng = np.random.default_rng(seed)
    if initial is not None:
        X = np.array(initial, dtype=float) - offset
        if X.shape != ref.shape:
            raise ValueError(f"initial profile has shape {X.shape}, grid needs {ref.shape}")
    else:
        X = ref.copy()
        for f in range(3):
            if scale[f] > 0 and amplitude != 0:
                prof = perturbation_shape(grid, shape, rng)
                slope = np.abs(np.diff(prof)).max() / grid.dz
                X[:, f] += amplitude * (scale[f] / grid.h) * prof / slope
    X[0] = ref[0]
    state = base.with_fields(X, 0.0)

    nsteps = cfg.n_steps
    sample_every = max(1, min(sample_every, nsteps))
    active = scale > 0
    P = energy_weight(eq, cfg.model, cfg.forcing.constants)
    w = grid.weights
    series = []

    def record(st):
        d = st.stacked() - ref
        norms = [l2_norm(d[:, f], grid) for f in range(3)]
        y = d[:, active] / scale[active]
        comb = math.sqrt(max(float(np.einsum("k,ki,ij,kj->", w, y, P, y)), 0.0))
        R = face_richardson(st, cfg)
        with np.errstate(all="ignore"):
            ok = bool(np.all(cfg.model.f2(R[np.abs(1 + cfg.model.kind.c * R) > 1e-9]) > 0))
        series.append((st.t, *norms, comb, R[-1], R.min(), R.max(), ok))
        return comb

    n0 = record(state)
    verdict = None
    exit_R = None
    message = ""
    done = 0
    while done < nsteps:
        chunk = min(sample_every, nsteps - done)
        try:
            state = advance(state, cfg, chunk)
        except (NegativeDiffusivityError, PoleError) as exc:
            verdict, exit_R, message = Verdict.ZONE_EXIT, exc.R, str(exc)
            break
        done += chunk
        n = record(state)
        if not math.isfinite(n) or (n0 > 0 and n > blowup * n0):
            verdict, message = Verdict.GROWTH, "perturbation blew up"
            break

    cols = list(zip(*series))
    t = np.array(cols[0])
    norm = np.array(cols[4])
    growth = float(np.nanmax(norm) / n0) if n0 > 0 else math.nan
    late = t >= t[-1] - late_fraction * (t[-1] - t[0])
    i_late = int(np.argmax(late)) if late.sum() >= 2 else max(0, len(t) - 2)
    late_ratio = float(norm[-1] / norm[i_late]) if norm[i_late] > 0 else math.nan
    span = t[-1] - t[i_late]
    rate = -math.log(late_ratio) / span if span > 0 and late_ratio > 0 else math.nan
    if verdict is None:
        if n0 == 0:
            verdict = Verdict.UNPERTURBED
        elif growth >= growth_threshold:
            verdict = Verdict.GROWTH
        elif norm[-1] < n0 and (late_ratio < 1.0 or norm[-1] < floor * n0):
            verdict = Verdict.DECAY
        else:
            verdict = Verdict.NEUTRAL
    return PerturbationRun(
        t, np.array(cols[1]), np.array(cols[2]), np.array(cols[3]), norm,
        np.array(cols[5]), np.array(cols[6]), np.array(cols[7]), np.array(cols[8], dtype=bool),
        verdict, growth, late_ratio, rate, state.with_fields(state.stacked() + offset, state.t),
        state.fallback_steps, exit_R, message,
    )


def steadiness_residual(eq: Equilibrium, cfg: SimConfig, grid: Grid | None = None, nsteps: int | None = None):
    """``max|state(t) - state(0)| / max|state(0)|`` starting from the equilibrium profiles."""
    s0 = ColumnState.from_equilibrium(eq, grid)
    s1 = advance(s0, cfg, cfg.n_steps if nsteps is None else nsteps)
    X0, X1 = s0.stacked(), s1.stacked()
    return float(np.abs(X1 - X0).max() / np.abs(X0).max())


def mode_decay_rate(state: ColumnState, cfg: SimConfig, nsteps: int, field: int = 0, reference=None):
    """Continuous-time decay rate implied by the last step of an ``nsteps`` run.

    With per-step norm ratio q, the theta scheme gives
    ``lambda = (1 - q) / (dt * (theta*q + 1 - theta))``, which removes the time
    discretisation error and leaves the spatial one.
    """
    ref = state.stacked()[0, field] if reference is None else reference
    s = advance(state, cfg, nsteps - 1)
    n_prev = l2_norm(s.stacked()[:, field] - ref, s.grid)
    s = advance(s, cfg, 1)
    q = l2_norm(s.stacked()[:, field] - ref, s.grid) / n_prev
    th = cfg.theta_scheme
    return (1.0 - q) / (cfg.dt * (th * q + 1.0 - th))
