"""
Steady states of the column.

Integrating the steady equations once gives constant fluxes, so the
viscosities are depth-independent and the Richardson number satisfies the
scalar fixed-point problem ``k(R) = C * R`` with ``k = f1**2 / f2`` and
``C = -rho_a**2 * (Vx**2 + Vy**2) / (g * Q * rho0)``.  Each root fixes linear
profiles for u, v and rho anchored at the bottom boundary values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize_scalar

from .closures import EPS_POLE, ClosureModel, PhysicalConstants, negative_intervals
from .errors import (
    DiffusivityZeroError,
    InvalidEquilibriumError,
    NoRootError,
    ZeroFluxError,
    ZeroWindError,
)

__all__ = [
    "Forcing",
    "Boundary",
    "FixedPointProblem",
    "Root",
    "Equilibrium",
    "fixed_point_constant",
    "k_curve",
    "solve_fixed_points",
    "build_equilibrium",
    "equilibrium_at",
]

DEFAULT_WINDOW = (-10.0, 10.0)
DEFAULT_SAMPLES = 20_000
DEDUP_TOL = 1e-7
GRAZING_TOL = 1e-12
DIFFUSIVITY_EPS = 1e-300


@dataclass(frozen=True)
class Forcing:
    """Surface forcing: wind forcings Vx, Vy (m^2/s^2) and density flux Q.

    Q is the prescribed value of ``nu2 * drho/dz`` at z = 0.
    """

    Vx: float
    Vy: float
    Q: float
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)

    @classmethod
    def from_wind(cls, u_a, v_a, Q, C_D=1.3e-3, constants=None):
        """Forcing from air velocity with ``Vx = C_D*|u_a|**2``, ``Vy = C_D*|v_a|**2``."""
        return cls(C_D * abs(u_a) ** 2, C_D * abs(v_a) ** 2, Q, constants or PhysicalConstants())

    @property
    def V2(self) -> float:
        return self.Vx**2 + self.Vy**2

    @property
    def momentum_flux(self):
        """Surface values of nu1*du/dz and nu1*dv/dz."""
        r = self.constants.rho_a / self.constants.rho0
        return r * self.Vx, r * self.Vy


def fixed_point_constant(f: Forcing) -> float:
    if f.Q == 0:
        raise ZeroFluxError("Q = 0: the fixed-point slope C is infinite")
    if f.V2 == 0:
        raise ZeroWindError("Vx = Vy = 0: equilibrium shear is undefined")
    k = f.constants
    return -(k.rho_a**2) * f.V2 / (k.g * f.Q * k.rho0)


def forcing_for_constant(C, Vx, Vy, constants=None) -> Forcing:
    """Inverse of :func:`fixed_point_constant` at fixed wind forcing."""
    if C == 0:
        raise ValueError("C = 0 corresponds to an infinite surface flux Q")
    k = constants or PhysicalConstants()
    Q = -(k.rho_a**2) * (Vx**2 + Vy**2) / (k.g * C * k.rho0)
    return Forcing(Vx, Vy, Q, k)


def k_curve(model: ClosureModel, R):
    """k(R) = f1(R)**2 / f2(R)."""
    f1 = model.f1(R)
    f2 = model.f2(R)
    if np.any(np.abs(f2) < DIFFUSIVITY_EPS):
        raise DiffusivityZeroError(f"f2 vanishes near R={R!r}")
    return f1 * f1 / f2


@dataclass(frozen=True)
class FixedPointProblem:
    model: ClosureModel
    C: float

    @classmethod
    def from_forcing(cls, model, forcing):
        return cls(model, fixed_point_constant(forcing))

    def residual(self, R):
        """f1**2 - C*R*f2: continuous wherever the closure is, zero exactly at roots."""
        f1 = self.model.f1(R)
        return f1 * f1 - self.C * R * self.model.f2(R)

    def gap(self, R):
        """k(R) - C*R."""
        return k_curve(self.model, R) - self.C * R


@dataclass(frozen=True)
class Root:
    R: float
    valid: bool
    grazing: bool = False


@lru_cache(maxsize=64)
def _breakpoints(model):
    """Points where the scan must be split: the pole and the zeros of f2."""
    pts = {model.pole}
    for lo, hi in negative_intervals(model, per_unit=200, tol=1e-13):
        pts.update(p for p in (lo, hi) if math.isfinite(p))
    return tuple(sorted(pts))


def _scan_points(window, samples, breakpoints, extend):
    lo, hi = window
    parts = [np.linspace(lo, hi, samples + 1)]
    if extend:
        tail = np.geomspace(max(abs(lo), 1.0), 1e12, 600)
        parts += [-tail, np.geomspace(max(abs(hi), 1.0), 1e12, 600)]
    offsets = np.logspace(-1, -9, 33)
    for b in breakpoints:
        scale = max(1.0, abs(b))
        parts += [b - offsets * scale, b + offsets * scale]
    R = np.unique(np.concatenate(parts))
    if not extend:
        R = R[(R >= lo) & (R <= hi)]
    return R


def _bisect(F, a, b, fa, max_iter=200):
    for _ in range(max_iter):
        m = 0.5 * (a + b)
        if m == a or m == b:
            break
        fm = F(m)
        if fm == 0:
            return m
        if (fm < 0) == (fa < 0):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)


def solve_fixed_points(
    p: FixedPointProblem,
    window=DEFAULT_WINDOW,
    samples: int = DEFAULT_SAMPLES,
    extend: bool = True,
    raise_on_empty: bool = True,
):
    """All intersections of k(R) with the line C*R, sorted ascending.

    The window is sampled uniformly (``samples`` intervals), refined
    geometrically towards the pole and the zeros of f2 and, with ``extend``,
    continued geometrically out to |R| = 1e12 so that far roots of small |C|
    are caught.  Sign changes of ``f1**2 - C*R*f2`` between neighbouring
    samples of the same smooth piece are bisected to machine precision.
    Roots with f2 <= 0 are kept with ``valid=False``.  Near-tangencies without
    a sign change are reported with ``grazing=True``.
    """
    model = p.model
    bps = _breakpoints(model)
    R = _scan_points(window, samples, bps, extend)
    R = R[np.abs(1.0 + model.kind.c * R) >= EPS_POLE]
    F = p.residual(R)
    piece = np.searchsorted(bps, R)
    same_piece = piece[1:] == piece[:-1]

    found = []
    sign = np.sign(F)
    exact = np.flatnonzero(F == 0)
    found.extend(float(R[i]) for i in exact)
    change = np.flatnonzero(same_piece & (sign[1:] * sign[:-1] < 0))
    for i in change:
        found.append(_bisect(p.residual, float(R[i]), float(R[i + 1]), float(F[i])))

    grazing = []
    if p.C != 0:
        f2 = model.f2(R)
        ok = np.abs(f2) > DIFFUSIVITY_EPS
        gap = np.full_like(R, np.inf)
        gap[ok] = np.abs(model.f1(R[ok]) ** 2 / f2[ok] - p.C * R[ok])
        cand = np.flatnonzero(
            (gap[1:-1] <= gap[:-2]) & (gap[1:-1] <= gap[2:]) & (gap[1:-1] < 1e-8)
            & same_piece[:-1] & same_piece[1:]
            & (sign[:-2] == sign[1:-1]) & (sign[1:-1] == sign[2:])
        ) + 1
        for i in cand:
            res = minimize_scalar(
                lambda r: abs(p.gap(r)), bounds=(R[i - 1], R[i + 1]), method="bounded",
                options={"xatol": 1e-14},
            )
            if res.fun < GRAZING_TOL:
                grazing.append(float(res.x))

    roots = []
    for r in sorted(found):
        if roots and abs(r - roots[-1].R) <= DEDUP_TOL:
            continue
        roots.append(Root(r, bool(model.f2(r) > 0)))
    for r in grazing:
        if all(abs(r - q.R) > DEDUP_TOL for q in roots):
            roots.append(Root(r, bool(model.f2(r) > 0), grazing=True))
    roots.sort(key=lambda q: q.R)
    if not roots and raise_on_empty:
        raise NoRootError(f"{model.name}: no fixed point for C={p.C!r} in the scanned range")
    return roots


@dataclass(frozen=True)
class Boundary:
    """Bottom Dirichlet values and layer depth h (m)."""

    u_b: float = 0.0
    v_b: float = 0.0
    rho_b: float = 1026.0
    h: float = 50.0


@dataclass(frozen=True)
class Equilibrium:
    """Steady state: constant viscosities and linear profiles in depth."""

    Re: float
    nu1e: float
    nu2e: float
    theta: float
    beta: float
    psi: float
    boundary: Boundary = field(default_factory=Boundary)

    @property
    def valid(self) -> bool:
        return self.nu2e > 0

    def u(self, z):
        return self.boundary.u_b + self.theta * (np.asarray(z) + self.boundary.h)

    def v(self, z):
        return self.boundary.v_b + self.beta * (np.asarray(z) + self.boundary.h)

    def rho(self, z):
        return self.boundary.rho_b + self.psi * (np.asarray(z) + self.boundary.h)


def build_equilibrium(model: ClosureModel, f: Forcing, R_star: float, boundary: Boundary = Boundary()):
    nu1 = model.f1(R_star)
    nu2 = model.f2(R_star)
    if not nu2 > 0:
        raise InvalidEquilibriumError(f"{model.name}: f2({R_star:.6g}) = {nu2:.3g} <= 0")
    mu, mv = f.momentum_flux
    return Equilibrium(R_star, nu1, nu2, mu / nu1, mv / nu1, f.Q / nu2, boundary)


def equilibrium_at(model: ClosureModel, R: float, Vx: float, Vy: float,
                   constants: PhysicalConstants = PhysicalConstants(), boundary: Boundary = Boundary()):
    """Equilibrium with prescribed Richardson number R under wind forcing (Vx, Vy).

    Q is chosen so that R solves the fixed-point equation,
    ``Q = -rho_a**2 * V**2 * R / (g * rho0 * k(R))``.  The density slope is
    built as ``-rho_a**2 V**2 R / (g rho0 f1**2)`` which stays finite where f2
    vanishes, so the returned state may be physically invalid (check
    ``.valid``).  Returns ``(equilibrium, forcing)``.
    """
    if Vx == 0 and Vy == 0:
        raise ZeroWindError("prescribing R needs non-zero wind forcing")
    k = constants
    nu1 = model.f1(R)
    nu2 = model.f2(R)
    V2 = Vx * Vx + Vy * Vy
    r = k.rho_a / k.rho0
    psi = -(k.rho_a**2) * V2 * R / (k.g * k.rho0 * nu1 * nu1)
    eq = Equilibrium(R, nu1, nu2, r * Vx / nu1, r * Vy / nu1, psi, boundary)
    return eq, Forcing(Vx, Vy, nu2 * psi, k)
