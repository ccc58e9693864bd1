import numpy as np
import pytest

from heavyq.base_solver import RationalLST, solve_base
from heavyq.heavytail import abate_whitt, phase_type_tail
from heavyq.model import build_marp, build_mmpp
from heavyq.perturbation import (
    compute_delta,
    k_matrix,
    k_vectors,
    perturb,
    verify_delta_identity,
)
from heavyq.symbolic_kernel import eval_E, xi_polys


def erlang2_model(lam=1.0):
    return build_marp([[-lam, lam], [0.0, -lam]], [[0.0, 0.0], [lam, 0.0]])


def mmpp2_model():
    return build_mmpp([10.0, 0.5], [8.0 / 9.0, 3.0 / 100.0])


@pytest.fixture(scope="module")
def toy():
    # running configuration: lam=1, exp(3) phase-type part, kappa=2 heavy tail
    sol = solve_base(erlang2_model(), RationalLST.exponential(3.0), column_choice=1)
    return sol, abate_whitt(2.0)


def test_k_matrix_structure_toy(toy):
    sol, ht = toy
    k = k_matrix(sol, ht, "replace")
    for s in (0.5, 2.0, 1.0 + 0.7j):
        mat = k(s)
        assert mat[0, 0] == 0 and mat[0, 1] == 0 and mat[1, 1] == 0
        lam = 1.0
        want = s * lam * (sol.pt.mean * sol.pt.excess(s) - ht.mean * ht.excess_lst(s))
        assert mat[1, 0] == pytest.approx(complex(want), rel=1e-12)


def test_k_matrix_vanishes_at_zero(toy):
    sol, ht = toy
    for variant in ("replace", "discard"):
        mat = k_matrix(sol, ht, variant)(0.0)
        assert np.max(np.abs(mat)) == 0.0


def test_k_matrix_diagonal_for_mmpp():
    sol = solve_base(mmpp2_model(), RationalLST.exponential(3.0))
    ht = abate_whitt(2.0)
    k = k_matrix(sol, ht, "replace")(1.3)
    assert abs(k[0, 1]) == 0 and abs(k[1, 0]) == 0
    m = sol.model
    for i in range(2):
        want = 1.3 * (sol.pt.mean * sol.pt.excess(1.3) - ht.mean * ht.excess_lst(1.3)) \
            * m.q_real[i, i] * m.trans[i, i] * m.rates[i]
        assert k[i, i] == pytest.approx(complex(want), rel=1e-12)


def test_delta_toy_closed_form(toy):
    sol, ht = toy
    lam, nu = 1.0, 3.0
    rho2 = sol.rho_pos[0]
    d1, d2 = compute_delta(sol, ht, 0, "replace")
    factor = sol.pt.mean * sol.pt.excess(rho2) - ht.mean * complex(ht.excess_lst(rho2))
    gprime = -nu / (nu + rho2) ** 2
    want = -rho2 * lam ** 2 * factor / (2 * (rho2 - lam) - lam ** 2 * gprime)
    assert d1 == pytest.approx(complex(want), rel=1e-10)
    assert d2 == pytest.approx(complex(want), rel=1e-7)


def test_delta_zero_for_identical_tail(toy):
    sol, _ = toy
    ht = phase_type_tail(sol.pt)
    d1, d2 = compute_delta(sol, ht, 0, "replace")
    assert abs(d1) < 1e-14 and abs(d2) < 1e-14


def test_delta_against_root_tracking():
    # move the service transform by eps*K and track the positive root of the
    # perturbed determinant numerically
    sol = solve_base(mmpp2_model(), RationalLST.exponential(3.0))
    ht = abate_whitt(2.0)
    delta = compute_delta(sol, ht, 0, "replace")[0]
    eps = 1e-6
    rho = sol.rho_pos[0]

    def det_eps(s):
        kmat = k_matrix(sol, ht, "replace")(s)
        return np.linalg.det(eval_E(sol.model, s, sol.pt(s)) + eps * kmat)

    x = rho
    for _ in range(60):
        h = 1e-8 * max(1.0, abs(x))
        d = (det_eps(x + h) - det_eps(x - h)) / (2 * h)
        step = det_eps(x) / d
        x = x - step
        if abs(step) < 1e-13:
            break
    fd = (rho - x) / eps
    assert fd == pytest.approx(delta, rel=1e-4)


def test_k_vector_zero_toy(toy):
    # with the second adjugate column the toy correction vector vanishes
    sol, ht = toy
    assert sol.column_choice == (1,)
    k2 = k_vectors(sol, ht, 0, "replace")
    np.testing.assert_allclose(np.abs(k2), 0.0, atol=1e-14)


def test_k_vector_first_column_formula(toy):
    # m = 1 (first column): k_2 = (K22(rho2), -K21(rho2))
    sol_m0 = solve_base(erlang2_model(), RationalLST.exponential(3.0), column_choice=0)
    ht = abate_whitt(2.0)
    k2 = k_vectors(sol_m0, ht, 0, "replace")
    km = k_matrix(sol_m0, ht, "replace")(sol_m0.rho_pos[0])
    np.testing.assert_allclose(k2, [km[1, 1], -km[1, 0]], atol=1e-13)


def test_perturbed_eigenvector_residual():
    # w = a - eps delta a' + eps k kills (E + eps K) at the shifted root up
    # to O(eps^2)
    sol = solve_base(mmpp2_model(), RationalLST.exponential(3.0))
    ht = abate_whitt(2.0)
    delta = compute_delta(sol, ht, 0, "replace")[0]
    kvec = k_vectors(sol, ht, 0, "replace")
    rho = sol.rho_pos[0]
    a = sol.a_vectors[0]
    aprime = sol.a_derivs[0]
    resids = []
    for eps in (1e-3, 1e-4):
        w = a - eps * delta * aprime + eps * kvec
        s = rho - eps * delta
        mat = eval_E(sol.model, s, sol.pt(s)) + eps * k_matrix(sol, ht, "replace")(s)
        resids.append(np.linalg.norm(mat @ w))
    # one decade of eps should give roughly two decades of residual
    assert resids[1] <= 0.02 * resids[0]
    assert resids[0] <= 1e-4 * np.linalg.norm(a)


def test_z_toy_closed_form(toy):
    sol, ht = toy
    lam, nu = 1.0, 3.0
    mp, mh = sol.pt.mean, ht.mean
    rho2 = complex(sol.rho_pos[0])
    pdata = perturb(sol, ht, "replace")
    delta2 = pdata.delta[0]
    pref = lam / rho2
    want = np.array([
        pref * (0.5 * (mp - mh) * (rho2 - lam) - (1 - lam * mp / 2) * delta2 / rho2),
        pref * (lam / 2 * (mp - mh) + (1 - lam * mp / 2) * delta2 / rho2),
    ])
    np.testing.assert_allclose(pdata.z, want.real, rtol=1e-9)


def test_z_zero_for_identical_tail(toy):
    sol, _ = toy
    pdata = perturb(sol, phase_type_tail(sol.pt), "replace")
    np.testing.assert_allclose(pdata.z, 0.0, atol=1e-12)
    np.testing.assert_allclose(np.abs(pdata.delta), 0.0, atol=1e-13)


def test_discard_equals_replace_with_zeroed_tail(toy):
    # formally removing the heavy part of the replace factor reproduces the
    # discard quantities exactly
    sol, ht = toy

    class _Zeroed:
        mean = 0.0
        excess_lst = staticmethod(lambda s: 0.0 * np.asarray(s, dtype=complex))

    rep = perturb(sol, _Zeroed(), "replace")
    dis = perturb(sol, ht, "discard")
    np.testing.assert_allclose(rep.z, dis.z, rtol=1e-12)
    np.testing.assert_allclose(np.asarray(rep.delta), np.asarray(dis.delta), rtol=1e-12)


def test_z_matches_exact_resolve():
    # oracle: full mixture re-solve at small eps, finite difference of u
    from heavyq.oracle import exact_solve
    model = mmpp2_model()
    pt = RationalLST.exponential(3.0)
    ht = abate_whitt(2.0)
    sol = solve_base(model, pt)
    pdata = perturb(sol, ht, "replace")
    eps = 1e-5
    exact = exact_solve(model, pt, ht, eps, base=sol, deltas=pdata.delta)
    fd = (exact.u_eps - sol.u) / eps
    np.testing.assert_allclose(fd, pdata.z, rtol=1e-3)


def test_delta_identity_closes_through_z():
    model = mmpp2_model()
    pt = RationalLST.exponential(3.0)
    ht = abate_whitt(2.0)
    sol = solve_base(model, pt)
    xi = xi_polys(model, pt, sol.r)
    for variant in ("replace", "discard"):
        pdata = perturb(sol, ht, variant)
        verify_delta_identity(sol, pdata, ht, xi)


def test_dual_delta_randomised():
    # acceptance-style sweep at module scale: random stable models, random
    # rational service, random kappa
    rng = np.random.default_rng(99)
    done = 0
    while done < 10:
        n = int(rng.integers(2, 5))
        d1 = rng.uniform(0, 2, (n, n))
        np.fill_diagonal(d1, 0.0)
        d2 = rng.uniform(0, 2, (n, n))
        d1[np.diag_indices(n)] = -(d1.sum(axis=1) + d2.sum(axis=1))
        model = build_marp(d1, d2)
        pt = RationalLST.erlang(rng.uniform(4.0, 8.0), int(rng.integers(1, 3)))
        ht = abate_whitt(rng.uniform(1.5, 4.0))
        from heavyq.model import stability_report
        if stability_report(model, pt.mean)["load"] > 0.9:
            continue
        sol = solve_base(model, pt)
        for idx in range(len(sol.rho_pos)):
            compute_delta(sol, ht, idx, "replace")  # raises on disagreement
        done += 1
