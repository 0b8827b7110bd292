"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line
in the terminal summary.  Run alone with ``pytest tests/test_acceptance.py``."""

import json
import time

import numpy as np
import pytest

from afree.cli import run
from afree.convexity import (
    excess_bounds_check,
    garding_adversary,
    garding_verify,
    lambda_convexity_check,
    quadratic_aqc_value,
)
from afree.densities import (
    convex_quartic,
    det2,
    det_squared,
    double_well,
    frobenius_det,
    quadratic,
)
from afree.dynamics import (
    elasticity2d,
    evolve,
    psystem1d,
    smooth_state,
    weak_strong_monitor,
)
from afree.opsym import constant_rank_check, make_operator, potential_compat_check, potential_of
from afree.projection import (
    primitive,
    primitive_bounds_report,
    project_afree,
    projection_constant_fit,
)
from afree.spectral import (
    Grid,
    PeriodicField,
    afree_residual,
    apply_operator,
    lp_norm,
    random_afree_field,
    random_field,
)
from afree.statics import (
    euler_lagrange_residual,
    frozen_second_variation,
    minimality_check,
    second_variation_min,
)

PAIRS = {
    "curl/grad": make_operator("curl", d=2, m=2),
    "div3/curl": make_operator("div", d=3),
    "curlcurl/symgrad": make_operator("curlcurl", d=2),
}
CURL = PAIRS["curl/grad"]


def test_criterion_1_symbols_and_potentials(criterion):
    with criterion(1, "symbol/potential compatibility, constant rank"):
        start = time.perf_counter()
        for name, A in PAIRS.items():
            B = potential_of(A)
            rep = potential_compat_check(A, B, n_samples=10_000, tol=1e-10, seed=1)
            assert rep.max_product_residual <= 1e-10, name
            assert rep.rank_defect_count == 0, name
            assert constant_rank_check(A, 10_000, seed=1).is_constant_rank, name
        assert time.perf_counter() - start < 10


def test_criterion_2_primitive_roundtrip(criterion):
    with criterion(2, "primitive round-trip and band-uniform bound ratios"):
        bands = list(range(4, 17))
        for name, A in PAIRS.items():
            B = potential_of(A)
            grid = Grid(A.d, 33)
            worst = {b: np.zeros(3) for b in bands}
            for i in range(100):
                band = bands[i % len(bands)]
                psi = random_afree_field(A, grid, band, seed=1000 + i)
                pair = primitive(B, psi, A)
                err = lp_norm(apply_operator(B, pair.phi) - psi)
                assert err <= 1e-9 * lp_norm(psi), name
                c = primitive_bounds_report(pair)
                worst[band] = np.maximum(worst[band], [c.c_ii, c.c_iii, c.c_iv])
            table = np.array([worst[b] for b in bands])
            assert np.all(table.max(axis=0) / table.min(axis=0) <= 3), name


def test_criterion_3_projection(criterion):
    with criterion(3, "projection idempotence, A-freeness, stable projection constant"):
        for name, A in PAIRS.items():
            grid = Grid(A.d, 9 if A.d == 3 else 17)
            fits = []
            for offset in (0, 10_000):
                fields = [random_field(grid, A.N, band=4, seed=offset + i) for i in range(200)]
                for v in fields[:20]:
                    Pv = project_afree(A, v)
                    scale = lp_norm(Pv)
                    assert afree_residual(A, Pv) <= 1e-9, name
                    assert lp_norm(project_afree(A, Pv) - Pv) <= 1e-9 * scale, name
                fit = projection_constant_fit(A, fields)
                assert np.all(fit.ratios <= fit.C), name
                fits.append(fit.C)
            assert abs(fits[0] - fits[1]) <= 0.1 * max(fits), name


def test_criterion_4_null_lagrangian(criterion):
    with criterion(4, "null Lagrangian and Lambda-convexity"):
        W = frobenius_det(1.0, 4.0)
        M = W.hess(np.zeros(4))
        assert np.linalg.eigvalsh(M).min() == pytest.approx(-2.0)
        assert lambda_convexity_check(M, CURL, n_dirs=2000).is_lambda_convex
        grid = Grid(2, 9)
        for i in range(1000):
            psi = random_afree_field(CURL, grid, 1 + i % 4, seed=i, amplitude=1.0 + i % 3)
            nrm2 = lp_norm(psi) ** 2
            assert quadratic_aqc_value(M, CURL, psi) >= -1e-9 * nrm2
            assert abs(float(np.mean(det2(psi.samples)))) <= 1e-9


def test_criterion_5_garding(criterion):
    with criterion(5, "Garding fit and adversarial search"):
        grid = Grid(2, 17)
        W = quadratic(N=4)
        backgrounds = [PeriodicField(grid, np.zeros(grid.shape + (4,))),
                       random_afree_field(CURL, grid, 2, seed=3, amplitude=2.0)]
        for k, Ubar in enumerate(backgrounds):
            for amp in (1e-3, 1.0, 30.0):
                tests = [random_afree_field(CURL, grid, 1 + i % 6, seed=100 * k + i, amplitude=amp)
                         for i in range(10)]
                rep = garding_verify(W, Ubar, CURL, tests)
                assert rep.C0_fit == pytest.approx(4.0, abs=1e-8)
                assert rep.C1_fit == 0.0

        W = frobenius_det(1.0, 4.0)
        Ubar = random_afree_field(CURL, grid, 2, seed=4, amplitude=1.0)
        tests = [random_afree_field(CURL, grid, 1 + i % 6, seed=500 + i, amplitude=0.1 + i % 3)
                 for i in range(12)]
        rep = garding_verify(W, Ubar, CURL, tests)
        assert np.isfinite(rep.C0_fit) and np.isfinite(rep.C1_fit) and rep.holds()
        adv = garding_adversary(W, Ubar, CURL, rep.C0_fit, rep.C1_fit, n_random=4,
                                n_descent_steps=250, seed=9001)
        assert not adv.violated


def test_criterion_6_excess_bounds(criterion):
    with criterion(6, "excess-function bounds"):
        rep = excess_bounds_check(double_well(1.0, 1.0, N=2), K=2.0, n_samples=10_000, seed=0)
        assert np.isfinite(rep.C_a_lipschitz) and np.isfinite(rep.C_a_V)
        assert rep.C_c is not None and all(np.isfinite(rep.C_c))
        R = [r for _, r in rep.R_of_delta]
        assert all(a <= b for a, b in zip(R, R[1:]))
        for gamma in (0.5, 1.0, 3.0):
            q = excess_bounds_check(quadratic(N=3, scale=gamma), K=2.0, n_samples=10_000)
            assert q.C_d == pytest.approx(gamma / 4, abs=1e-6)


def test_criterion_7_dynamics(criterion):
    with criterion(7, "dynamics: exact wave, involution, monitor fits"):
        start = time.perf_counter()
        grid = Grid(1, 65)
        x = grid.points()[..., 0]

        def mode(t):
            s = np.sin(2 * np.pi * (x + t))
            return PeriodicField(grid, np.stack([s, s], -1))

        traj = evolve(psystem1d([0.0, 1.0]), mode(0.0), 1e-3, 1.0, stride=1000)
        assert np.abs(traj.states[-1].samples - mode(1.0).samples).max() <= 1e-6

        elast = elasticity2d({"name": "det_squared", "params": {"c": 0.5, "kappa": 0.5}})
        g2 = Grid(2, 17)
        traj = evolve(elast, smooth_state(elast, g2, amplitude=0.3, seed=2), 2e-3, 1.0, stride=50)
        assert max(traj.drift) <= 1e-8 and not traj.blew_up

        cubic = psystem1d([0.0, 1.0, 0.0, 1.0])
        g1 = Grid(1, 33)
        U0 = smooth_state(cubic, g1, amplitude=0.2, seed=5)
        same = weak_strong_monitor(cubic, U0, U0, 1e-3, 1.0, stride=50)
        assert same.v_distance.max() <= 1e-8

        for seed in (11, 12):
            Ub = smooth_state(cubic, g1, amplitude=0.3, band=2, seed=seed)
            U = Ub + smooth_state(cubic, g1, amplitude=0.03, band=4, seed=seed + 100)
            a, b = (weak_strong_monitor(cubic, U, Ub, 1e-3, 1.0, viscosity_weak=1e-3, stride=50)
                    for _ in range(2))
            assert a.fit_valid and a.holds() and not a.blew_up
            assert (a.C1, a.C2) == (b.C1, b.C2)
            assert np.array_equal(a.v_distance, b.v_distance)
        assert time.perf_counter() - start < 180


def test_criterion_8_statics(criterion):
    with criterion(8, "statics: quadratic minimality, frozen-coefficient oracle"):
        grid = Grid(2, 9)
        const = PeriodicField(grid, np.broadcast_to([0.5, -1.0, 0.2, 1.0], grid.shape + (4,)).copy())
        W = quadratic(N=4)
        assert euler_lagrange_residual(W, const, CURL) <= 1e-12
        assert second_variation_min(W, const, CURL) == pytest.approx(1.0, abs=1e-8)
        assert minimality_check(W, const, CURL, n_samples=10).C_fit == pytest.approx(0.25, abs=1e-8)
        lam = np.array([0.4, 0.1, -0.3, 0.6])
        Ubar = PeriodicField(grid, np.broadcast_to(lam, grid.shape + (4,)).copy())
        for W in (frobenius_det(0.5, 2.0), det_squared(0.5, 1.0), convex_quartic(0.25, 0.5, N=4)):
            assert second_variation_min(W, Ubar, CURL) == pytest.approx(
                frozen_second_variation(W, lam, CURL, grid), abs=1e-7)


SUITES = {
    "symbol": {"command": "symbol", "operator": {"tag": "curlcurl", "d": 2},
               "params": {"n_samples": 500}},
    "primitive": {"command": "primitive", "operator": {"tag": "div", "d": 3},
                  "grid": {"d": 3, "n": 9}, "params": {"n_fields": 4}},
    "decompose": {"command": "decompose", "operator": {"tag": "curl", "d": 2, "m": 2},
                  "grid": {"d": 2, "n": 17}, "params": {"n_fields": 4}},
    "garding": {"command": "garding", "operator": {"tag": "curl", "d": 2, "m": 2},
                "grid": {"d": 2, "n": 9},
                "density": {"name": "frobenius_det", "params": {"c": 1, "gamma": 4}},
                "params": {"n_fields": 8, "adversary": True, "n_descent_steps": 20}},
    "aqc": {"command": "aqc", "operator": {"tag": "curl", "d": 2, "m": 2},
            "grid": {"d": 2, "n": 9}, "density": {"name": "det_squared"},
            "params": {"n_random": 2, "n_descent_steps": 20, "lambda": [1, 0, 0, 1]}},
    "dynamics": {"command": "dynamics", "grid": {"d": 2, "n": 9},
                 "system": {"tag": "linelast2d"},
                 "params": {"mode": "monitor", "dt": 0.002, "T": 0.1, "stride": 10}},
    "statics": {"command": "statics", "operator": {"tag": "curl", "d": 2, "m": 2},
                "grid": {"d": 2, "n": 9}, "density": {"name": "convex_quartic",
                                                    "params": {"N": 4}},
                "params": {"n_samples": 5, "background": [1, 0, 0, 1]}},
}


def test_criterion_9_determinism(criterion, tmp_path):
    with criterion(9, "byte-identical CSV output on repeated seeded runs"):
        for name, spec in SUITES.items():
            spec = json.loads(json.dumps({**spec, "seed": 3}))
            codes = [run(spec, tmp_path / name / tag, quiet=True) for tag in ("a", "b")]
            assert codes[0] == codes[1] and codes[0] in (0, 2), name
            a, b = ((tmp_path / name / tag / "rows.csv").read_bytes() for tag in ("a", "b"))
            assert a == b and a.count(b"\n") > 1, name
