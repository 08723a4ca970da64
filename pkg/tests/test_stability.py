import numpy as np
import pytest

from mixstab.closures import ClosureModel, PhysicalConstants
from mixstab.equilibrium import Boundary, Equilibrium, equilibrium_at
from mixstab.errors import ZeroShearError
from mixstab.stability import (
    Classification,
    PerturbationState,
    assemble_matrix,
    characteristic_coefficients,
    classify,
    cubic_roots,
    eigenvalues,
    stability_map,
    stability_zones,
    structured_coefficients,
)

from .conftest import MODEL_NAMES, PRESET_NAMES, load_fixture


def rank_one_oracle(eq, model, k):
    """Independent assembly: diag(nu1, nu1, nu2) + u w^T written out by hand."""
    R = eq.Re
    S = eq.theta**2 + eq.beta**2
    w = np.array([-2 * eq.theta * R / S, -2 * eq.beta * R / S, -(k.g / k.rho0) / S])
    u = np.array([eq.theta * model.df1_dR(R), eq.beta * model.df1_dR(R), eq.psi * model.df2_dR(R)])
    return np.diag([eq.nu1e, eq.nu1e, eq.nu2e]) + np.outer(u, w)


def random_equilibria(rng, n, valid_only=True):
    out = []
    while len(out) < n:
        name = MODEL_NAMES[rng.integers(4)]
        m = ClosureModel.named(name, PRESET_NAMES[rng.integers(2)])
        R = rng.uniform(-4, 6)
        if abs(1 + m.kind.c * R) < 1e-3:
            continue
        Vx, Vy = rng.uniform(-0.3, 0.3, 2)
        eq, _ = equilibrium_at(m, R, Vx, Vy)
        if valid_only and not eq.valid:
            continue
        out.append((m, eq))
    return out


# ---------------------------------------------------------------- assembly

def test_constant_coefficients_give_diagonal(constants):
    m = ClosureModel.named("R-2-2", beta1=0.0, beta2=0.0)
    eq, _ = equilibrium_at(m, 0.4, 0.1, 0.05, constants)
    A = assemble_matrix(eq, m, constants)
    np.testing.assert_array_equal(A.entries, np.diag([m.coeffs.alpha1, m.coeffs.alpha1, m.coeffs.alpha2]))


def test_zero_meridional_forcing_row(constants):
    m = ClosureModel.named("R-2-2-4")
    eq, _ = equilibrium_at(m, 0.3, 0.1, 0.0, constants)
    A = assemble_matrix(eq, m, constants).entries
    assert A[1, 0] == 0.0 and A[1, 2] == 0.0
    assert A[1, 1] == eq.nu1e


def test_matches_rank_one_oracle(rng, constants):
    for m, eq in random_equilibria(rng, 100, valid_only=False):
        A = assemble_matrix(eq, m, constants)
        ref = rank_one_oracle(eq, m, constants)
        np.testing.assert_allclose(A.entries, ref, rtol=1e-14, atol=1e-14 * np.abs(ref).max())
        u, w = A.rank_one_factors
        np.testing.assert_allclose(np.diag([A.nu1e, A.nu1e, A.nu2e]) + np.outer(u, w), A.entries,
                                   rtol=1e-14, atol=1e-14 * np.abs(ref).max())


def test_partials_are_chain_rule(constants):
    m = ClosureModel.named("R-2-1-3")
    eq, _ = equilibrium_at(m, 0.25, 0.1, 0.05, constants)
    A = assemble_matrix(eq, m, constants)
    np.testing.assert_allclose(A.partials[0], m.df1_dR(eq.Re) * A.R_grad, rtol=1e-15)
    np.testing.assert_allclose(A.partials[1], m.df2_dR(eq.Re) * A.R_grad, rtol=1e-15)


def test_zero_shear_rejected():
    eq = Equilibrium(0.0, 1e-3, 1e-4, 0.0, 0.0, -1e-3)
    with pytest.raises(ZeroShearError):
        assemble_matrix(eq, ClosureModel.named("R-2-2"))


def test_perturbation_state_holds_fields():
    p = PerturbationState(1.0, 2.0, 3.0)
    assert (p.uPrime, p.vPrime, p.rhoPrime) == (1.0, 2.0, 3.0)


# ---------------------------------------------------------------- eigenvalues

def test_cubic_known_roots():
    r = sorted(z.real for z in cubic_roots(-6.0, 11.0, -6.0))
    np.testing.assert_allclose(r, [1, 2, 3], rtol=1e-14)


def test_cubic_complex_pair():
    # (x - 2)(x^2 + 2x + 5): roots 2, -1 +- 2i
    r = sorted(cubic_roots(0.0, 1.0, -10.0), key=lambda z: (z.real, z.imag))
    np.testing.assert_allclose(r, [-1 - 2j, -1 + 2j, 2], atol=1e-13)


def test_cubic_triple_root():
    r = cubic_roots(-3.0, 3.0, -1.0)
    np.testing.assert_allclose(r, [1, 1, 1], atol=1e-5)


def test_cubic_scaled_coefficients():
    s = 1e-5
    r = sorted(z.real for z in cubic_roots(-6.0 * s, 11.0 * s * s, -6.0 * s**3))
    np.testing.assert_allclose(r, [s, 2 * s, 3 * s], rtol=1e-12)


def test_diagonal_eigenvalues():
    lam = eigenvalues(np.diag([3.0, 3.0, 1.0]))
    np.testing.assert_allclose(lam, [3, 3, 1], atol=1e-7)


def test_sorted_by_real_part(rng):
    for _ in range(50):
        lam = eigenvalues(rng.standard_normal((3, 3)))
        assert np.all(np.diff(lam.real) <= 1e-12)


def test_against_dense_solver_on_random_matrices(rng):
    for _ in range(200):
        M = rng.standard_normal((3, 3))
        ours = np.sort_complex(eigenvalues(M))
        ref = np.sort_complex(np.linalg.eigvals(M))
        np.testing.assert_allclose(ours, ref, atol=1e-10 * np.abs(ref).max())


def test_nu1_is_eigenvalue_and_dense_solver_agrees(rng, constants):
    for m, eq in random_equilibria(rng, 100):
        A = assemble_matrix(eq, m, constants)
        lam = eigenvalues(A)
        assert np.min(np.abs(lam - eq.nu1e)) <= 1e-10 * eq.nu1e
        ref = np.linalg.eigvals(A.entries)
        for z in lam:
            assert np.min(np.abs(ref - z)) <= 1e-8 * np.abs(ref).max()


@pytest.mark.parametrize("R", [0.0, 0.05, 0.5, 3.0, 10.0])
def test_r224_nonnegative_R_positive_real_parts(R, constants):
    m = ClosureModel.named("R-2-2-4")
    eq, _ = equilibrium_at(m, R, 0.1, 0.05, constants)
    assert np.all(eigenvalues(assemble_matrix(eq, m, constants)).real > 0)


# ---------------------------------------------------------------- classification

def test_identity_like_is_stable():
    rep = classify(np.diag([1e-3, 1e-3, 1e-4]), 1e-4)
    assert rep.classification is Classification.STABLE
    assert rep.coefficient_criteria_pass and rep.routh_hurwitz_pass and rep.criteria_agree


def test_invalid_when_diffusivity_not_positive(constants):
    m = ClosureModel.named("R-2-1-3")
    eq, _ = equilibrium_at(m, -1.0, 0.1, 0.05, constants)
    rep = classify(assemble_matrix(eq, m, constants), eq.nu2e)
    assert rep.classification is Classification.INVALID


def test_marginal_on_zero_eigenvalue():
    rep = classify(np.diag([1.0, 1.0, 0.0]), 1.0)
    assert rep.classification is Classification.MARGINAL


def test_unstable_on_negative_eigenvalue():
    rep = classify(np.diag([1.0, 1.0, -0.5]), 1.0)
    assert rep.classification is Classification.UNSTABLE
    assert not rep.coefficient_criteria_pass


def test_triple_is_not_sufficient_in_general():
    # eigenvalues 1 and -0.1 +- 3i: det, tr, tr(adj) are all positive
    lam = [1.0, -0.1 + 3j, -0.1 - 3j]
    poly = np.poly(lam).real
    C = np.array([[0, 0, -poly[3]], [1, 0, -poly[2]], [0, 1, -poly[1]]])
    rep = classify(C, 1.0)
    assert rep.coefficient_criteria_pass
    assert not rep.routh_hurwitz_pass
    assert rep.classification is Classification.UNSTABLE
    assert not rep.criteria_agree


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_every_model_has_unstable_negative_R(name):
    rows = stability_map(ClosureModel.named(name), R_grid=np.linspace(-5, -1e-3, 500))
    assert any(r.classification == "Unstable" for r in rows)


def test_symmetric_functions_match(rng, constants):
    for m, eq in random_equilibria(rng, 100):
        rep = classify(assemble_matrix(eq, m, constants), eq.nu2e)
        lam = rep.eigenvalues
        e1 = lam.sum()
        e2 = lam[0] * lam[1] + lam[0] * lam[2] + lam[1] * lam[2]
        e3 = lam.prod()
        assert abs(e1 - rep.trace) <= 1e-9 * abs(rep.trace)
        assert abs(e2 - rep.trace_adj) <= 1e-9 * max(abs(rep.trace_adj), abs(lam).max() ** 2)
        assert abs(e3 - rep.det) <= 1e-9 * max(abs(rep.det), abs(lam).max() ** 3)


def test_real_spectrum_triple_equivalence(constants):
    for name in MODEL_NAMES:
        m = ClosureModel.named(name)
        for row in stability_map(m, R_grid=np.linspace(-5, 10, 301)):
            rep = row.report
            if rep is None or not np.all(np.abs(rep.eigenvalues.imag) < 1e-12):
                continue
            assert rep.coefficient_criteria_pass == bool(np.all(rep.eigenvalues.real > 0))


def test_classification_invariant_under_wind_swap(constants):
    for name in MODEL_NAMES:
        m = ClosureModel.named(name)
        for R in [-0.15, -0.05, 0.3]:
            a, _ = equilibrium_at(m, R, 0.1, 0.05, constants)
            b, _ = equilibrium_at(m, R, 0.05, 0.1, constants)
            la = np.sort_complex(eigenvalues(assemble_matrix(a, m, constants)))
            lb = np.sort_complex(eigenvalues(assemble_matrix(b, m, constants)))
            np.testing.assert_allclose(la, lb, rtol=1e-12, atol=1e-12 * abs(la).max())


# ---------------------------------------------------------------- maps

def test_nonnegative_R_all_stable():
    for name in MODEL_NAMES:
        rows = stability_map(ClosureModel.named(name), R_grid=np.linspace(0, 10, 101))
        assert all(r.classification == "Stable" for r in rows)


def test_invalid_band_rows():
    rows = stability_map(ClosureModel.named("R-2-1-3"), R_grid=np.linspace(-3.1, -0.21, 50))
    assert all(r.classification == "PhysicallyInvalid" for r in rows)


def test_single_point_replicates_classify(constants):
    m = ClosureModel.named("R-2-2")
    (row,) = stability_map(m, R_grid=[-0.1])
    eq, f = equilibrium_at(m, -0.1, 0.1, 0.05, constants)
    rep = classify(assemble_matrix(eq, m, constants), eq.nu2e)
    assert row.classification == rep.classification.value
    np.testing.assert_array_equal(row.report.eigenvalues, rep.eigenvalues)
    assert row.Q == f.Q


def test_pole_rows_flagged_neighbours_unaffected():
    m = ClosureModel.named("R-2-2")
    fine = stability_map(m, R_grid=np.linspace(-0.3, -0.1, 21))
    coarse = stability_map(m, R_grid=np.linspace(-0.3, -0.1, 11))
    pole = [r for r in fine if r.classification == "Pole"]
    assert len(pole) == 1 and pole[0].R_e == pytest.approx(-0.2)
    assert pole[0].error.startswith("PoleError")
    for r in coarse:
        twin = [q for q in fine if q.R_e == r.R_e]
        assert twin and twin[0].classification == r.classification


def test_C_sweep_rows_per_root():
    m = ClosureModel.named("R-2-2")
    rows = stability_map(m, C_grid=[-1.0, 0.5])
    assert len([r for r in rows if r.C == -1.0]) == 3
    assert len([r for r in rows if r.C == 0.5]) == 1
    assert all(r.report is not None for r in rows)


def test_C_sweep_records_missing_roots():
    m = ClosureModel.named("R-2-2-4")
    rows = stability_map(m, C_grid=[1e-6], window=(-1, 1), samples=100, extend=False)
    assert len(rows) == 1 and rows[0].classification == "Failed"
    assert rows[0].error.startswith("NoRootError")


def test_map_requires_one_grid():
    m = ClosureModel.named("R-2-2")
    with pytest.raises(ValueError):
        stability_map(m)
    with pytest.raises(ValueError):
        stability_map(m, R_grid=[])


@pytest.mark.parametrize("preset", PRESET_NAMES)
@pytest.mark.parametrize("name", MODEL_NAMES)
def test_frozen_zone_edges(name, preset):
    frozen = load_fixture("zones.json")[f"{name}/{preset}"]
    zones = stability_zones(ClosureModel.named(name, preset), -5.0, -1e-9, n=5001)
    assert [z[2] for z in zones] == [z[2] for z in frozen]
    for (a, b, _), (fa, fb, _) in zip(zones, frozen):
        assert a == pytest.approx(fa, abs=1e-9) and b == pytest.approx(fb, abs=1e-9)


def test_boundary_does_not_change_classification():
    m = ClosureModel.named("R-2-2-4")
    a = stability_map(m, R_grid=[-0.3, 0.2])
    b = stability_map(m, R_grid=[-0.3, 0.2], boundary=Boundary(1.0, -1.0, 1020.0, 80.0),
                      constants=PhysicalConstants(9.8, 1020.0, 1.25))
    assert [r.classification for r in a] == [r.classification for r in b]


def test_C_sweep_at_zero_gives_error_row():
    rows = stability_map(ClosureModel.named("R-2-2"), C_grid=[0.0])
    assert len(rows) == 1 and rows[0].error and "infinite" in rows[0].error


def test_structured_coefficients_match_entrywise(rng, constants):
    for m, eq in random_equilibria(rng, 100, valid_only=False):
        A = assemble_matrix(eq, m, constants)
        lam = np.linalg.eigvals(np.asarray(A))
        scale = np.abs(lam).max()
        ours = structured_coefficients(A)
        ref = characteristic_coefficients(A)
        for k, (x, y) in enumerate(zip(ours, ref)):
            assert abs(x - y) <= 1e-9 * scale ** (k + 1)


def test_structured_coefficients_with_shift_match_shifted_matrix(rng, constants):
    for m, eq in random_equilibria(rng, 20):
        A = assemble_matrix(eq, m, constants)
        s = 0.5 * eq.nu1e
        B = np.asarray(A) - s * np.eye(3)
        scale = np.abs(np.linalg.eigvals(B)).max()
        for k, (x, y) in enumerate(zip(structured_coefficients(A, s), characteristic_coefficients(B))):
            assert abs(x - y) <= 1e-9 * scale ** (k + 1)


@pytest.mark.parametrize("name,preset,R", [
    ("R-2-2-4", "OPA", -0.21),    # eigenvalues spread over five decades next to the pole
    ("R-2-2", "OPA", 0.0),        # clustered eigenvalues
    ("R-2-2-4", "PP81", 0.0),
])
def test_nu1_resolved_in_hard_cases(name, preset, R, constants):
    m = ClosureModel.named(name, preset)
    eq, _ = equilibrium_at(m, R, 0.1, 0.05)
    lam = eigenvalues(assemble_matrix(eq, m, constants))
    assert np.min(np.abs(lam - eq.nu1e)) <= 1e-10 * eq.nu1e


def test_plain_matrix_with_clustered_eigenvalues():
    P = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 3.0], [1.0, 0.0, 1.0]])
    D = np.diag([1.0, 1.0 + 1e-6, 1.0 + 2e-6])
    M = P @ D @ np.linalg.inv(P)
    lam = np.sort(eigenvalues(M).real)
    np.testing.assert_allclose(lam, [1.0, 1.0 + 1e-6, 1.0 + 2e-6], rtol=0, atol=1e-11)
