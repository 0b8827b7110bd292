import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from afree.convexity import (
    AfreeParam,
    aqc_objective,
    aqc_test,
    envelope_fit,
    excess,
    excess_bounds_check,
    excess_integral,
    garding_adversary,
    garding_verify,
    lambda_convexity_check,
    quadratic_aqc_value,
    quadratic_garding_check,
    tilde_shift,
)
from afree.densities import (
    convex_quartic,
    det_squared,
    double_well,
    frobenius_det,
    quadratic,
    v_squared,
)
from afree.opsym import grad_op
from afree.projection import NotAFreeError, primitive
from afree.spectral import (
    Grid,
    PeriodicField,
    afree_residual,
    apply_operator,
    lp_norm,
    random_afree_field,
    random_field,
)
from afree.statics import second_variation

GRAD22 = grad_op(2, 2)
vec4 = hnp.arrays(np.float64, 4, elements=st.floats(-3, 3))


def afree_family(op, grid, n, band=4, amplitude=1.0, seed=0):
    return [random_afree_field(op, grid, band, seed=seed + i, amplitude=amplitude)
            for i in range(n)]


def test_excess_quadratic_and_zero():
    W = quadratic(N=3)
    a, z = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.1, -4.0])
    assert excess(W, a, z) == pytest.approx(0.5 * z @ z)
    assert excess(W, a, np.zeros(3)) == 0.0


def test_excess_quartic_hand_value():
    W = convex_quartic(1.0, 0.0, N=2)
    e1 = np.array([1.0, 0.0])
    assert excess(W, e1, e1) == pytest.approx(11.0)


@pytest.mark.parametrize("W", [det_squared(0.5, 2.0), double_well(1.0, 1.0, N=4),
                               frobenius_det(1.0, 3.0)], ids=lambda W: W.name)
@given(a=vec4, z=vec4)
def test_excess_matches_integral_form(W, a, z):
    exact = excess(W, a, z)
    quad = excess_integral(W, a, z)
    assert abs(exact - quad) <= 1e-8 * max(1.0, abs(exact))


@given(a=vec4, z=vec4)
def test_excess_nonnegative_for_convex(a, z):
    for W in (convex_quartic(0.25, 0.5, N=4), v_squared(4, 3.0), quadratic(N=4)):
        assert excess(W, a, z) >= -1e-12 * (1 + np.sum(z * z) ** 2)


def test_excess_bounds_quadratic_branch_d():
    gamma = 3.0
    rep = excess_bounds_check(quadratic(N=2, scale=gamma), K=1.0, n_samples=2000, seed=1)
    assert rep.gamma_min == pytest.approx(gamma)
    assert rep.C_d == pytest.approx(gamma / 4, abs=1e-6)
    assert rep.zero_rows_ok


def test_excess_bounds_double_well():
    rep = excess_bounds_check(double_well(1.0, 1.0, N=2), K=2.0, n_samples=3000, seed=2)
    assert math.isfinite(rep.C_a_lipschitz) and math.isfinite(rep.C_a_V)
    assert rep.C_c is not None and rep.C_c[0] > 0 and math.isfinite(rep.C_c[1])
    assert rep.C_d is None
    R = [r for _, r in rep.R_of_delta]
    assert all(r1 <= r2 for r1, r2 in zip(R, R[1:]))
    assert rep.zero_rows_ok
    json.dumps(rep.to_dict())


def test_excess_bounds_rejects_nonpositive_K():
    with pytest.raises(ValueError):
        excess_bounds_check(quadratic(N=1), K=0.0)


def test_lambda_convexity_examples(curl22):
    M = frobenius_det(1.0, 4.0).hess(np.zeros(4))
    assert np.linalg.eigvalsh(M).min() == pytest.approx(-2.0)
    rep = lambda_convexity_check(M, curl22, n_dirs=400)
    assert rep.is_lambda_convex
    assert rep.min_quadratic_on_cone == pytest.approx(2.0)
    assert not lambda_convexity_check(-np.eye(4), curl22, n_dirs=50).is_lambda_convex
    ident = lambda_convexity_check(np.eye(4), curl22, n_dirs=50)
    assert ident.is_lambda_convex and ident.min_quadratic_on_cone == pytest.approx(1.0)


def test_lambda_convexity_rejects_asymmetric(curl22):
    with pytest.raises(ValueError):
        lambda_convexity_check(np.triu(np.ones((4, 4))), curl22)


@pytest.mark.parametrize("seed", range(5))
def test_quadratic_aqc_plancherel(curl22, grid17, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((4, 4))
    M = A + A.T
    psi = random_afree_field(curl22, grid17, 6, seed=seed)
    direct = float(np.mean(np.einsum("...i,ij,...j->...", psi.samples, M, psi.samples)))
    assert quadratic_aqc_value(M, curl22, psi) == pytest.approx(direct, abs=1e-10)


def test_quadratic_aqc_identity_and_cone(curl22, grid17):
    psi = random_afree_field(curl22, grid17, 4, seed=9)
    assert quadratic_aqc_value(np.eye(4), curl22, psi) == pytest.approx(lp_norm(psi) ** 2)
    M = frobenius_det(1.0, 4.0).hess(np.zeros(4))
    vals = [quadratic_aqc_value(M, curl22, f) / lp_norm(f) ** 2
            for f in afree_family(curl22, grid17, 50, band=5)]
    assert min(vals) >= -1e-9


def test_quadratic_aqc_single_wave_det_is_zero(curl22, grid17):
    # F = grad of (sin(2 pi x1), 0): rank-one wave a (x) e1
    x = grid17.points()
    pot = np.stack([np.sin(2 * np.pi * x[..., 0]), np.zeros(grid17.shape)], axis=-1)
    psi = apply_operator(GRAD22, PeriodicField(grid17, pot))
    Mdet = frobenius_det(0.0, 1.0).hess(np.zeros(4))
    assert abs(quadratic_aqc_value(Mdet, curl22, psi)) < 1e-12


def test_quadratic_aqc_rejects_non_afree(curl22, grid17):
    with pytest.raises(NotAFreeError):
        quadratic_aqc_value(np.eye(4), curl22, random_field(grid17, 4, band=3, seed=1))


@given(lam=vec4, seed=st.integers(0, 10_000))
def test_determinant_is_null_lagrangian(curl22, lam, seed):
    grid = Grid(2, 9)
    param = AfreeParam(curl22, grid, 3)
    fg = aqc_objective(frobenius_det(0.0, 1.0), lam, param)
    g = random_field(grid, 4, band=3, seed=seed, amplitude=2.0).samples
    val, _ = fg(g)
    assert abs(val) < 1e-9


@pytest.mark.parametrize("W,c0", [(det_squared(0.5, 1.0), 0.0), (double_well(1, 1, N=4), 0.1),
                                  (convex_quartic(0.25, 0.5, N=4), 0.0)])
def test_aqc_gradient_matches_finite_differences(curl22, W, c0):
    grid = Grid(2, 9)
    param = AfreeParam(curl22, grid, 3)
    fg = aqc_objective(W, np.array([0.3, -0.2, 0.5, 0.1]), param, c0)
    rng = np.random.default_rng(4)
    g = rng.standard_normal(grid.shape + (4,)) * 0.5
    d = rng.standard_normal(g.shape)
    _, grad = fg(g)
    h = 1e-5
    fd = (fg(g + h * d)[0] - fg(g - h * d)[0]) / (2 * h)
    assert np.sum(grad * d) == pytest.approx(fd, rel=1e-5)


def test_aqc_convex_density_no_violation(curl22):
    rep = aqc_test(convex_quartic(0.25, 0.5, N=4), np.array([1.0, 0, 0, 1.0]), curl22,
                   Grid(2, 9), n_random=2, n_descent_steps=30)
    assert rep.min_gap >= -1e-8 and not rep.violated and rep.certificate_field is None


def test_aqc_determinant_gap_zero(curl22):
    rep = aqc_test(frobenius_det(0.0, 1.0), np.array([1.0, 2.0, -1.0, 0.5]), curl22,
                   Grid(2, 9), n_random=2, n_descent_steps=20)
    assert abs(rep.min_gap) < 1e-9 and not rep.violated


def test_aqc_negative_frobenius_certificate(curl22):
    W = quadratic(N=4, scale=-2.0)
    rep = aqc_test(W, np.zeros(4), curl22, Grid(2, 9), n_random=2, n_descent_steps=10)
    assert rep.violated and rep.min_gap < 0
    cert = rep.certificate_field
    assert afree_residual(curl22, cert) < 1e-10
    assert np.abs(cert.mean()).max() < 1e-12


def test_tilde_shift_edges():
    W = quadratic(N=2, scale=3.0)
    assert tilde_shift(W, 0.0) is W
    with pytest.raises(ValueError):
        tilde_shift(W, -1.0)


def test_tilde_shift_quadratic_stays_convex():
    gamma = 3.0
    Wt = tilde_shift(quadratic(N=2, scale=gamma), 0.5)
    z = np.random.default_rng(0).standard_normal((100, 2)) * 3
    assert np.linalg.eigvalsh(Wt.hess(z)).min() == pytest.approx(gamma - 4 * 0.5)
    assert Wt.growth_constants["c_lower"] is not None


def test_tilde_shift_warns_when_coercivity_lost():
    with pytest.warns(RuntimeWarning):
        Wt = tilde_shift(quadratic(N=2, scale=1.0), 1.0)
    assert Wt.notes


@given(a=vec4, z=vec4, c2=st.floats(0.01, 2.0))
def test_tilde_shift_excess_identity(a, z, c2):
    W = det_squared(0.5, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        Wt = tilde_shift(W, c2)
    lhs = excess(Wt, a, z)
    rhs = excess(W, a, z) - c2 * excess(v_squared(4, 4.0), a, z)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(excess(W, a, z)))


def test_envelope_fit_hand_lp():
    # rows: 2 <= C0 + C1, 1 <= C1
    assert envelope_fit([2, 1], [1, 0], [1, 1], slack=0) == (1.0, 1.0)
    assert envelope_fit([0.0], [1.0], [1.0]) == (0.0, 0.0)
    assert envelope_fit([], [], []) == (0.0, 0.0)


@given(st.lists(st.tuples(st.floats(0, 10), st.floats(-5, 10), st.floats(0.1, 5)),
                min_size=1, max_size=12))
def test_envelope_fit_against_brute_force(rows):
    lhs, exc, pen = (np.array(c) for c in zip(*rows))
    C0, C1 = envelope_fit(lhs, exc, pen, slack=0)
    assert np.all(lhs <= C0 * exc + C1 * pen + 1e-9)
    grid = np.linspace(0, 50, 20001)
    brute = np.maximum(0, ((lhs[:, None] - grid[None] * exc[:, None]) / pen[:, None]).max(0))
    assert C1 <= brute.min() + 1e-9


def test_garding_quadratic_exact(curl22, grid17):
    W = quadratic(N=4)
    Ubar = random_afree_field(curl22, grid17, 2, seed=5)
    rep = garding_verify(W, Ubar, curl22, afree_family(curl22, grid17, 12))
    assert rep.C0_fit == pytest.approx(4.0, abs=1e-8)
    assert rep.C1_fit == 0.0
    assert rep.holds()
    assert rep.n_fields == 12
    assert rep.epsilon0_estimate == pytest.approx(max(r["w_minus1_p"] for r in rep.rows))
    json.dumps(rep.to_dict())


def test_garding_small_amplitude_limit(curl22, grid17):
    # rows at shrinking amplitude approach the second-order ratio set by D^2W(Ubar)
    W = convex_quartic(0.25, 0.5, N=4)
    Ubar = random_afree_field(curl22, grid17, 2, seed=5, amplitude=0.5)
    base = random_afree_field(curl22, grid17, 3, seed=6)
    ratios = []
    for t in (1e-1, 1e-2, 1e-3):
        r = garding_verify(W, Ubar, curl22, [base * t]).rows[0]
        ratios.append(r["lhs"] / r["excess"])
    H = W.hess(Ubar.samples)
    # p = 4: |V(z)|^2 = |z|^2 + O(|z|^4)
    limit = np.mean(np.sum(base.samples**2, -1)) / (
        0.5 * np.mean(np.einsum("...i,...ij,...j->...", base.samples, H, base.samples)))
    errs = [abs(r - limit) for r in ratios]
    assert errs[2] < errs[1] < errs[0] and errs[2] < 1e-2 * limit


def test_garding_errors(curl22, grid17):
    W = quadratic(N=4)
    Ubar = random_afree_field(curl22, grid17, 2, seed=5)
    with pytest.raises(ValueError, match="no test fields"):
        garding_verify(W, Ubar, curl22, [])
    with pytest.raises(NotAFreeError):
        garding_verify(W, Ubar, curl22, [random_field(grid17, 4, band=3, seed=1)])
    shifted = random_afree_field(curl22, grid17, 3, seed=2) + 1.0
    with pytest.raises(NotAFreeError):
        garding_verify(W, Ubar, curl22, [shifted])


def test_garding_csv(tmp_path, curl22, grid17):
    rep = garding_verify(quadratic(N=4), PeriodicField(grid17, np.zeros(grid17.shape + (4,))),
                         curl22, afree_family(curl22, grid17, 3))
    path = tmp_path / "rows.csv"
    rep.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "id,lhs,excess,penalty,w_minus1_p,bound" and len(lines) == 4


def test_garding_adversary_quadratic(curl22):
    grid = Grid(2, 9)
    W = quadratic(N=4)
    Ubar = PeriodicField(grid, np.zeros(grid.shape + (4,)))
    rep = garding_adversary(W, Ubar, curl22, 4.0, 0.0, n_random=2, n_descent_steps=20)
    assert not rep.violated and rep.min_ratio == pytest.approx(1.0)
    # a pair below the identity is caught
    assert garding_adversary(W, Ubar, curl22, 3.0, 0.0, n_random=1,
                             n_descent_steps=5).violated


def _oscillating_background(grid, amp, freq=1):
    x = grid.points()
    pot = np.stack([np.sin(2 * np.pi * freq * x[..., 0]),
                    np.sin(2 * np.pi * freq * x[..., 1])], axis=-1) * amp / (2 * np.pi * freq)
    return apply_operator(GRAD22, PeriodicField(grid, pot))


def test_quadratic_garding_constant_background(grid17):
    W = det_squared(0.5, 1.0)
    Ubar = PeriodicField(grid17, np.broadcast_to([1.0, 0.5, -0.3, 2.0], grid17.shape + (4,)))
    phis = [random_field(grid17, 2, band=b, seed=b) for b in (1, 2, 4)]
    phis.append(PeriodicField(grid17, np.zeros(grid17.shape + (2,))))
    rep = quadratic_garding_check(W, Ubar, GRAD22, phis)
    assert rep.c1_fit == 0.0
    assert rep.c0_delta_fit == pytest.approx(0.9 * rep.c0_frozen)
    zero = rep.rows[-1]
    assert zero["quadratic"] == zero["l2"] == zero["lower_order"] == 0.0
    assert rep.modulus == 0.0


def test_quadratic_garding_oscillating_background(curl22, grid17):
    # the weakest field is the lowest mode of the second variation; it is not
    # locally rank-one, so the frozen constant misses it and c1 must absorb it
    W = det_squared(0.5, 1.0)
    c1, mod = [], []
    for amp in (0.0, 1.0, 2.0):
        Ubar = _oscillating_background(grid17, amp)
        psi = second_variation(W, Ubar, curl22, iters=500, band=4).field
        phi = primitive(GRAD22, psi, curl22).phi
        rep = quadratic_garding_check(W, Ubar, GRAD22, [phi])
        c1.append(rep.c1_fit)
        mod.append(rep.modulus)
    assert c1[0] == 0.0 and 0 < c1[1] < c1[2]
    assert mod[0] < mod[1] < mod[2]
