r"""
Richardson-number closures for the vertical eddy viscosity and diffusivity.

Each closure gives the momentum viscosity and density diffusivity as

.. math::
    \nu_1 = f_1(R), \qquad \nu_2 = f_2(R)

with :math:`f_1(R) = \alpha_1 + \beta_1/(1 + cR)^2` and one of four
diffusivity laws (``x = 1 + cR``):

=========  ====  ===============================================
name       c     f2
=========  ====  ===============================================
R-2-1-3    5     alpha2 + alpha1/x + beta1/x**3  (Pacanowski-Philander)
R-2-3      10    alpha2 + beta2/x**3             (Gent)
R-2-2-4    5     alpha2 + alpha1/x**2 + beta1/x**4
R-2-2      5     alpha2 + beta2/x**2
=========  ====  ===============================================

The gradient Richardson number is
:math:`R = -(g/\rho_0)\,\partial_z\rho / ((\partial_z u)^2 + (\partial_z v)^2)`.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import PoleError, ZeroShearError

__all__ = [
    "EPS_POLE",
    "ModelKind",
    "Coefficients",
    "PRESETS",
    "ClosureModel",
    "PhysicalConstants",
    "ShearState",
    "richardson",
    "richardson_gradient",
    "invalid_interval",
]

#: minimum |1 + cR| accepted before a PoleError is raised
EPS_POLE = 1e-9

# left edge of the R-2-3 invalid band used to calibrate its beta2
GENT_INVALID_EDGE = -2.25


class ModelKind(str, Enum):
    R213 = "R-2-1-3"
    R23 = "R-2-3"
    R224 = "R-2-2-4"
    R22 = "R-2-2"

    @property
    def c(self) -> float:
        """Coefficient multiplying R in the denominators."""
        return 10.0 if self is ModelKind.R23 else 5.0

    @property
    def uses_beta2(self) -> bool:
        return self in (ModelKind.R23, ModelKind.R22)

    @property
    def code(self) -> int:
        """Integer tag used by the compiled column kernel."""
        return _KIND_CODES[self]

    @classmethod
    def parse(cls, name) -> "ModelKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown closure {name!r} (expected one of {valid})") from None


_KIND_CODES = {ModelKind.R213: 0, ModelKind.R23: 1, ModelKind.R224: 2, ModelKind.R22: 3}


@dataclass(frozen=True)
class Coefficients:
    """Closure coefficients, all in m^2/s.

    ``beta2`` is only read by R-2-3 and R-2-2; ``None`` means "use the
    model's default" (see :func:`default_beta2`).  The amplitudes may be zero,
    which turns a closure into constant-coefficient diffusion.
    """

    alpha1: float
    beta1: float
    alpha2: float
    beta2: float | None = None

    def __post_init__(self):
        for name in ("alpha1", "alpha2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)!r}")
        if not self.beta1 >= 0:
            raise ValueError(f"beta1 must be >= 0, got {self.beta1!r}")
        if self.beta2 is not None and not self.beta2 >= 0:
            raise ValueError(f"beta2 must be >= 0, got {self.beta2!r}")


PRESETS = {
    "PP81": Coefficients(alpha1=1e-4, beta1=1e-2, alpha2=1e-5),
    "OPA": Coefficients(alpha1=1e-6, beta1=1e-2, alpha2=1e-7),
}


def default_beta2(kind: ModelKind, coeffs: Coefficients) -> float | None:
    """beta2 used when none is given explicitly.

    R-2-2 mirrors beta1.  R-2-3 is calibrated so that f2 changes sign at
    R = -2.25, i.e. ``beta2 = -alpha2 * (1 + 10 * (-2.25))**3``.
    """
    if kind is ModelKind.R22:
        return coeffs.beta1
    if kind is ModelKind.R23:
        return -coeffs.alpha2 * (1.0 + kind.c * GENT_INVALID_EDGE) ** 3
    return None


@dataclass(frozen=True)
class PhysicalConstants:
    g: float = 9.81
    rho0: float = 1025.0
    rho_a: float = 1.2

    def __post_init__(self):
        for name in ("g", "rho0", "rho_a"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


@dataclass(frozen=True)
class ClosureModel:
    """One of the four closures with its coefficient set.

    Evaluation methods accept scalars or arrays and raise :class:`PoleError`
    if any ``|1 + cR| < EPS_POLE``.
    """

    kind: ModelKind
    coeffs: Coefficients

    def __post_init__(self):
        kind = ModelKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind.uses_beta2 and self.coeffs.beta2 is None:
            object.__setattr__(self, "coeffs", replace(self.coeffs, beta2=default_beta2(kind, self.coeffs)))

    @classmethod
    def named(cls, kind, preset: str = "PP81", **overrides) -> "ClosureModel":
        """Build from string names, e.g. ``ClosureModel.named("R-2-2-4", "OPA")``."""
        try:
            coeffs = PRESETS[preset]
        except KeyError:
            raise ValueError(f"unknown coefficient preset {preset!r} (expected PP81 or OPA)") from None
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return cls(ModelKind.parse(kind), replace(coeffs, **overrides))

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def pole(self) -> float:
        return -1.0 / self.kind.c

    @property
    def beta2(self) -> float:
        return self.coeffs.beta2

    def _x(self, R):
        R = np.asarray(R, dtype=float)
        x = 1.0 + self.kind.c * R
        if np.any(np.abs(x) < EPS_POLE):
            bad = R[np.abs(x) < EPS_POLE] if R.ndim else R
            raise PoleError(float(np.ravel(bad)[0]), self.pole)
        return x

    def f1(self, R):
        """Eddy viscosity nu_1 = f1(R)."""
        x = self._x(R)
        a = self.coeffs
        return _out(a.alpha1 + a.beta1 / x**2)

    def f2(self, R):
        """Eddy diffusivity nu_2 = f2(R)."""
        x = self._x(R)
        a = self.coeffs
        kind = self.kind
        if kind is ModelKind.R213:
            val = a.alpha2 + a.alpha1 / x + a.beta1 / x**3
        elif kind is ModelKind.R23:
            val = a.alpha2 + a.beta2 / x**3
        elif kind is ModelKind.R224:
            val = a.alpha2 + a.alpha1 / x**2 + a.beta1 / x**4
        else:
            val = a.alpha2 + a.beta2 / x**2
        return _out(val)

    def df1_dR(self, R):
        x = self._x(R)
        return _out(-2.0 * self.kind.c * self.coeffs.beta1 / x**3)

    def df2_dR(self, R):
        x = self._x(R)
        a = self.coeffs
        c = self.kind.c
        kind = self.kind
        if kind is ModelKind.R213:
            val = -c * a.alpha1 / x**2 - 3.0 * c * a.beta1 / x**4
        elif kind is ModelKind.R23:
            val = -3.0 * c * a.beta2 / x**4
        elif kind is ModelKind.R224:
            val = -2.0 * c * a.alpha1 / x**3 - 4.0 * c * a.beta1 / x**5
        else:
            val = -2.0 * c * a.beta2 / x**3
        return _out(val)

    def kernel_args(self):
        """Flat numeric arguments for the compiled column kernel."""
        a = self.coeffs
        return (self.kind.code, a.alpha1, a.beta1, a.alpha2, a.beta2 if a.beta2 is not None else 0.0)

    def invalid_interval(self, **kwargs):
        return invalid_interval(self, **kwargs)


def _bisect_sign(f, lo, hi, tol):
    flo = f(lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        fm = f(mid)
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def negative_intervals(model: ClosureModel, scan_width=100.0, per_unit=10_000, tol=1e-6):
    """All open R-intervals in [-scan_width, scan_width] on which f2 < 0.

    Interval ends that touch the pole are returned as the pole itself; the
    others are sign changes of f2 refined by bisection to ``tol``.
    """
    pole = model.pole
    n = int(2 * scan_width * per_unit) + 1
    R = np.linspace(-scan_width, scan_width, n)
    R = R[np.abs(1.0 + model.kind.c * R) >= 10 * EPS_POLE]
    neg = model.f2(R) < 0
    if not neg.any():
        return []

    def f2(r):
        return model.f2(r)

    # runs of negative samples R[s:e]
    d = np.diff(np.concatenate(([0], neg.astype(np.int8), [0])))
    starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    intervals = []
    for s, e in zip(starts, ends):
        if s == 0:
            lo = -np.inf
        elif R[s - 1] < pole < R[s]:
            lo = pole
        else:
            lo = _bisect_sign(f2, R[s - 1], R[s], tol)
        if e == len(R):
            hi = np.inf
        elif R[e - 1] < pole < R[e]:
            hi = pole
        else:
            hi = _bisect_sign(f2, R[e - 1], R[e], tol)
        intervals.append((float(lo), float(hi)))
    return intervals


def invalid_interval(model: ClosureModel, **kwargs):
    """Open interval where the closure's diffusivity is negative, or None.

    >>> lo, hi = invalid_interval(ClosureModel.named("R-2-1-3"))
    >>> round(lo, 2), hi
    (-3.13, -0.2)
    """
    found = negative_intervals(model, **kwargs)
    if not found:
        return None
    if len(found) > 1:
        raise ValueError(f"{model.name}: f2 negative on several intervals {found}")
    return found[0]


@dataclass(frozen=True)
class ShearState:
    """Vertical gradients (du/dz, dv/dz, drho/dz)."""

    theta: float
    beta: float
    psi: float

    @property
    def S(self) -> float:
        return self.theta**2 + self.beta**2


def richardson(s: ShearState, k: PhysicalConstants = PhysicalConstants()) -> float:
    S = s.S
    if S == 0:
        raise ZeroShearError("Richardson number undefined for zero shear")
    return -(k.g / k.rho0) * s.psi / S


def richardson_gradient(s: ShearState, k: PhysicalConstants = PhysicalConstants()):
    """(dR/dtheta, dR/dbeta, dR/dpsi) at ``s``."""
    S = s.S
    R = richardson(s, k)
    return np.array([-2.0 * s.theta * R / S, -2.0 * s.beta * R / S, -(k.g / k.rho0) / S])
