"""
Linear stability of the steady states.

Perturbing an equilibrium and keeping first-order terms gives
``dV/dt = A d2V/dz2`` for V = (u', v', rho') with

    A = diag(nu1, nu1, nu2) + u w^T,
    u = (theta f1'(R), beta f1'(R), psi f2'(R)),   w = grad R(theta, beta, psi).

Perturbations decay iff every eigenvalue of A has positive real part.  nu1 is
always an eigenvalue (any (x1, x2, 0) orthogonal to w), the other two come from
an invariant 2x2 block whose trace and determinant depend on R only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .closures import ClosureModel, PhysicalConstants, ShearState, richardson_gradient
from .equilibrium import (
    Boundary,
    Equilibrium,
    FixedPointProblem,
    build_equilibrium,
    equilibrium_at,
    fixed_point_constant,
    forcing_for_constant,
    solve_fixed_points,
)
from .errors import ZeroFluxError, ZeroShearError

__all__ = [
    "Classification",
    "PerturbationMatrix",
    "PerturbationState",
    "StabilityReport",
    "MapRow",
    "assemble_matrix",
    "characteristic_coefficients",
    "structured_coefficients",
    "cubic_roots",
    "eigenvalues",
    "classify",
    "stability_map",
    "stability_zones",
]

DISC_TOL = 1e-13
MARGIN_REL = 1e-12


class Classification(str, Enum):
    STABLE = "Stable"
    UNSTABLE = "Unstable"
    INVALID = "PhysicallyInvalid"
    MARGINAL = "Marginal"


@dataclass(frozen=True)
class PerturbationState:
    """Deviation (u', v', rho') from an equilibrium, nodal arrays or scalars."""

    uPrime: object
    vPrime: object
    rhoPrime: object


@dataclass(frozen=True, eq=False)
class PerturbationMatrix:
    """Linearised diffusion matrix with the pieces it was built from.

    ``partials[k][j]`` is d nu_{k+1} / d(theta, beta, psi)[j] at the
    equilibrium, ``dnu_dR`` is (f1'(R), f2'(R)) and ``R_grad`` the gradient
    of R with respect to (theta, beta, psi).
    """

    entries: np.ndarray
    slopes: tuple
    nu1e: float
    nu2e: float
    dnu_dR: tuple
    R_grad: np.ndarray
    partials: np.ndarray

    @property
    def rank_one_factors(self):
        """(u, w) such that entries == diag(nu1, nu1, nu2) + outer(u, w)."""
        theta, beta, psi = self.slopes
        d1, d2 = self.dnu_dR
        return np.array([theta * d1, beta * d1, psi * d2]), self.R_grad

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)


def assemble_matrix(eq: Equilibrium, model: ClosureModel,
                    k: PhysicalConstants = PhysicalConstants()) -> PerturbationMatrix:
    """Matrix of the linearised perturbation system at ``eq``.

    Row i is ``nu_i * e_i + g_i * d nu_i / d(theta, beta, psi)`` with g the
    equilibrium gradient of the i-th field; the partials are chain-rule
    products ``f_i'(R) * dR/dx``.
    """
    s = ShearState(eq.theta, eq.beta, eq.psi)
    if s.S == 0:
        raise ZeroShearError("equilibrium has zero shear")
    dR = richardson_gradient(s, k)
    df = (model.df1_dR(eq.Re), model.df2_dR(eq.Re))
    partials = np.array([[df[0] * dR[j] for j in range(3)], [df[1] * dR[j] for j in range(3)]])
    grads = (eq.theta, eq.beta, eq.psi)
    nus = (eq.nu1e, eq.nu1e, eq.nu2e)
    rows = (0, 0, 1)  # velocity rows use nu1, density row nu2
    A = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            A[i, j] = grads[i] * partials[rows[i], j] + (nus[i] if i == j else 0.0)
    return PerturbationMatrix(A, grads, eq.nu1e, eq.nu2e, df, dR, partials)


def characteristic_coefficients(A):
    """(trace, trace of the adjugate, determinant) of a 3x3 matrix."""
    A = np.asarray(A, dtype=float)
    tr = A[0, 0] + A[1, 1] + A[2, 2]
    tr_adj = (A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
              + A[0, 0] * A[2, 2] - A[0, 2] * A[2, 0]
              + A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
    det = (A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
           - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
           + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))
    return float(tr), float(tr_adj), float(det)


def _polish(b, c, d, x, iters=3):
    """Newton steps on x^3 + b x^2 + c x + d, kept only while they help."""
    px = ((x + b) * x + c) * x + d
    for _ in range(iters):
        dp = (3.0 * x + 2.0 * b) * x + c
        if dp == 0:
            break
        y = x - px / dp
        py = ((y + b) * y + c) * y + d
        if abs(py) >= abs(px):
            break
        x, px = y, py
    return x


def _quadratic(sigma, pi):
    """Roots of x^2 - sigma x + pi."""
    disc = 0.25 * sigma * sigma - pi
    if disc >= 0:
        q = 0.5 * sigma + math.copysign(math.sqrt(disc), sigma)
        if q == 0:
            return 0j, 0j
        return complex(q), complex(pi / q)
    im = math.sqrt(-disc)
    return complex(0.5 * sigma, im), complex(0.5 * sigma, -im)


def cubic_roots(b, c, d):
    """Roots of the monic cubic x^3 + b x^2 + c x + d in closed form.

    Uses the trigonometric form when the discriminant says three real roots,
    Cardano's hyperbolic form for one real root plus a complex pair and a
    deflation for (near-)repeated roots.  Real roots get a few Newton steps.
    """
    s = max(abs(b), math.sqrt(abs(c)), abs(d) ** (1.0 / 3.0))
    if s == 0:
        return [0j, 0j, 0j]
    B, C, D = b / s, c / s**2, d / s**3
    shift = -B / 3.0
    p = C - B * B / 3.0
    q = 2.0 * B**3 / 27.0 - B * C / 3.0 + D
    disc = -(4.0 * p**3 + 27.0 * q * q)

    def deflate(r):
        sigma = -B - r
        pi = -D / r if abs(r) > 0.5 else C - r * sigma
        return _quadratic(sigma, pi)

    if abs(disc) <= DISC_TOL:
        if abs(p) <= DISC_TOL:
            roots = [complex(shift)] * 3
        else:
            r = _polish(B, C, D, 3.0 * q / p + shift)
            roots = [complex(r), *deflate(r)]
    elif disc > 0:
        m = 2.0 * math.sqrt(-p / 3.0)
        arg = max(-1.0, min(1.0, 3.0 * q / (p * m)))
        phi = math.acos(arg) / 3.0
        roots = [complex(_polish(B, C, D, m * math.cos(phi - 2.0 * math.pi * j / 3.0) + shift))
                 for j in range(3)]
    else:
        if p < 0:
            a = math.sqrt(-p / 3.0)
            t = -2.0 * math.copysign(1.0, q) * a * math.cosh(math.acosh(abs(q) / (2.0 * a**3)) / 3.0)
        elif p > 0:
            a = math.sqrt(p / 3.0)
            t = -2.0 * a * math.sinh(math.asinh(q / (2.0 * a**3)) / 3.0)
        else:
            t = -math.copysign(abs(q) ** (1.0 / 3.0), q)
        r = _polish(B, C, D, t + shift)
        roots = [complex(r), *deflate(r)]
    return [z * s for z in roots]


def _sort_key(z):
    return (-z.real, -z.imag)


def structured_coefficients(A: PerturbationMatrix, shift: float = 0.0):
    """(trace, trace of the adjugate, determinant) of ``A - shift*I`` from the rank-one factors.

    With a = u1 w1 + u2 w2, b = u3 w3 and d_i = nu_i - shift the characteristic
    polynomial is ``(x - d1) (x**2 - (d1 + d2 + a + b) x + d1 d2 + a d2 + b d1)``.
    Expanding it avoids the cancellation between large rank-one entries that
    the entrywise formulas suffer near the closure pole.
    """
    u, w = A.rank_one_factors
    d1, d2 = A.nu1e - shift, A.nu2e - shift
    a = u[0] * w[0] + u[1] * w[1]
    b = u[2] * w[2]
    s = d1 + d2 + a + b
    p = d1 * d2 + a * d2 + b * d1
    return float(d1 + s), float(d1 * s + p), float(d1 * p)


def _coefficients(A):
    if isinstance(A, PerturbationMatrix):
        return structured_coefficients(A)
    return characteristic_coefficients(A)


def eigenvalues(A) -> np.ndarray:
    """Eigenvalues of a 3x3 matrix via its characteristic cubic, largest real part first.

    The cubic is formed for ``A - s I`` and its roots shifted back.  For a
    :class:`PerturbationMatrix` s is the mean of (nu1, nu1, nu2) and the
    coefficients come from :func:`structured_coefficients`; for a plain matrix
    s is the mean diagonal entry.  With clustered eigenvalues the shifted
    diagonal is small and exact, so the coefficients keep the digits that the
    unshifted ones lose to cancellation.
    """
    if isinstance(A, PerturbationMatrix):
        s = (2.0 * A.nu1e + A.nu2e) / 3.0
        tr, tr_adj, det = structured_coefficients(A, s)
    else:
        M = np.array(A, dtype=float)
        s = float(np.trace(M)) / 3.0
        M[np.diag_indices(3)] -= s
        tr, tr_adj, det = characteristic_coefficients(M)
    roots = [s + z for z in cubic_roots(-tr, tr_adj, -det)]
    return np.array(sorted(roots, key=_sort_key), dtype=complex)


@dataclass(frozen=True, eq=False)
class StabilityReport:
    eigenvalues: np.ndarray
    det: float
    trace: float
    trace_adj: float
    classification: Classification
    coefficient_criteria_pass: bool
    routh_hurwitz_pass: bool
    criteria_agree: bool

    @property
    def all_real(self) -> bool:
        return bool(np.all(np.abs(self.eigenvalues.imag) < 1e-12 * max(1.0, np.abs(self.eigenvalues).max())))


def classify(A, f2_at_Re: float) -> StabilityReport:
    """Classify by the sign of the eigenvalue real parts.

    Also evaluates det, tr, tr(adj) > 0 and the full Routh-Hurwitz set
    (which adds tr * tr(adj) > det); ``criteria_agree`` records whether the
    first triple gives the same verdict as the eigenvalues.
    """
    M = np.asarray(A, dtype=float)
    tr, tr_adj, det = _coefficients(A)
    lam = eigenvalues(A)
    margin = MARGIN_REL * np.linalg.norm(M)
    re = lam.real
    if not f2_at_Re > 0:
        cls = Classification.INVALID
    elif np.all(re > margin):
        cls = Classification.STABLE
    elif np.any(re < -margin):
        cls = Classification.UNSTABLE
    else:
        cls = Classification.MARGINAL
    triple = det > 0 and tr > 0 and tr_adj > 0
    rh = triple and tr * tr_adj > det
    eig_positive = bool(np.all(re > 0))
    return StabilityReport(lam, det, tr, tr_adj, cls, bool(triple), bool(rh), bool(triple) == eig_positive)


@dataclass(frozen=True)
class MapRow:
    model: str
    R_e: float
    Q: float
    C: float
    report: StabilityReport | None = None
    nu1e: float = math.nan
    error: str | None = None

    @property
    def classification(self) -> str:
        """Class label, or ``"Pole"`` / ``"Failed"`` for rows that could not be analysed."""
        if self.report is not None:
            return self.report.classification.value
        return "Pole" if (self.error or "").startswith("PoleError") else "Failed"


def _safe_C(forcing):
    try:
        return fixed_point_constant(forcing)
    except ZeroFluxError:
        return math.nan


def _row_for_R(model, R, Vx, Vy, constants, boundary):
    try:
        eq, forcing = equilibrium_at(model, R, Vx, Vy, constants, boundary)
        A = assemble_matrix(eq, model, constants)
        return MapRow(model.name, float(R), forcing.Q, _safe_C(forcing), classify(A, eq.nu2e), eq.nu1e)
    except (ArithmeticError, ValueError) as exc:
        return MapRow(model.name, float(R), math.nan, math.nan, error=f"{type(exc).__name__}: {exc}")


def _rows_for_C(model, C, Vx, Vy, constants, boundary, **solver):
    try:
        forcing = forcing_for_constant(C, Vx, Vy, constants)
    except ValueError as exc:
        return [MapRow(model.name, math.nan, math.nan, C, error=f"{type(exc).__name__}: {exc}")]
    try:
        roots = solve_fixed_points(FixedPointProblem(model, C), **solver)
    except LookupError as exc:
        return [MapRow(model.name, math.nan, forcing.Q, C, error=f"{type(exc).__name__}: {exc}")]
    rows = []
    for root in roots:
        try:
            if root.valid:
                eq = build_equilibrium(model, forcing, root.R, boundary)
            else:
                eq, _ = equilibrium_at(model, root.R, Vx, Vy, constants, boundary)
            A = assemble_matrix(eq, model, constants)
            rows.append(MapRow(model.name, root.R, forcing.Q, C, classify(A, eq.nu2e), eq.nu1e))
        except (ArithmeticError, ValueError) as exc:
            rows.append(MapRow(model.name, root.R, forcing.Q, C, error=f"{type(exc).__name__}: {exc}"))
    return rows


def stability_map(model: ClosureModel, R_grid=None, C_grid=None, Vx=0.1, Vy=0.05,
                  constants: PhysicalConstants = PhysicalConstants(),
                  boundary: Boundary = Boundary(), **solver):
    """Classify equilibria over a grid of Richardson numbers or of C values.

    Sweeping R holds (Vx, Vy) fixed and picks Q so that each R is an exact
    equilibrium.  Sweeping C re-solves the fixed-point problem per value and
    emits one row per root.  Failures (poles, missing roots) become rows with
    ``error`` set instead of aborting the sweep.
    """
    if (R_grid is None) == (C_grid is None):
        raise ValueError("give exactly one of R_grid or C_grid")
    if R_grid is not None:
        grid = np.atleast_1d(np.asarray(R_grid, dtype=float))
        if grid.size == 0:
            raise ValueError("empty R grid")
        return [_row_for_R(model, R, Vx, Vy, constants, boundary) for R in grid]
    grid = np.atleast_1d(np.asarray(C_grid, dtype=float))
    if grid.size == 0:
        raise ValueError("empty C grid")
    rows = []
    for C in grid:
        rows.extend(_rows_for_C(model, C, Vx, Vy, constants, boundary, **solver))
    return rows


def _class_at(model, R, Vx, Vy, constants):
    row = _row_for_R(model, R, Vx, Vy, constants, Boundary())
    return row.classification


def stability_zones(model: ClosureModel, lo: float, hi: float, n: int = 4001, Vx=0.1, Vy=0.05,
                    constants: PhysicalConstants = PhysicalConstants(), tol: float = 1e-12,
                    pole_gap: float = 1e-3):
    """Contiguous classification zones on [lo, hi] with bisected edges.

    Returns ``[(R_start, R_end, classification), ...]``.  Samples closer than
    ``pole_gap`` to the pole are skipped: there A is so ill-conditioned that
    its small eigenvalues are round-off.  A zone change across the pole is
    placed exactly at the pole, other edges are bisected to ``tol``.
    """
    R = np.linspace(lo, hi, n)
    R = R[np.abs(R - model.pole) >= pole_gap]
    labels = [_class_at(model, r, Vx, Vy, constants) for r in R]
    zones = []
    start = float(R[0])
    for i in range(1, len(R)):
        if labels[i] == labels[i - 1]:
            continue
        a, b = float(R[i - 1]), float(R[i])
        left = labels[i - 1]
        if a < model.pole < b:
            edge = model.pole
        else:
            while b - a > tol:
                m = 0.5 * (a + b)
                if m in (a, b):
                    break
                if _class_at(model, m, Vx, Vy, constants) == left:
                    a = m
                else:
                    b = m
            edge = 0.5 * (a + b)
        zones.append((start, edge, left))
        start = edge
    zones.append((start, float(R[-1]), labels[-1]))
    return zones
