"""Excess functions, A-quasiconvexity probes and Garding inequality fits."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .densities import EnergyDensity, estimate_growth, v_squared
from .opsym import DEFAULT_RANK_TOL, DiffOp, _svd_rank, sphere_samples
from .projection import NotAFreeError
from .spectral import (
    FieldError,
    Grid,
    PeriodicField,
    afree_residual,
    apply_operator,
    band_mask,
    lp_norm,
    mixed_negative_norm,
    projector_grid,
    random_afree_field,
    sobolev_multiplier,
    sobolev_norm,
    v_energy,
)

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(32)


def excess(W: EnergyDensity, a, z) -> np.ndarray:
    """``W(a + z | a) = W(a + z) - W(a) - DW(a).z`` (vectorized)."""
    a = np.asarray(a, dtype=float)
    z = np.asarray(z, dtype=float)
    return W.value(a + z) - W.value(a) - np.sum(W.grad(a) * z, axis=-1)


def excess_integral(W: EnergyDensity, a, z) -> np.ndarray:
    """``int_0^1 (1 - s) D^2W(a + s z) z.z ds`` by 32-point Gauss-Legendre."""
    a = np.asarray(a, dtype=float)
    z = np.asarray(z, dtype=float)
    s = 0.5 * (_GL_NODES + 1.0)
    w = 0.5 * _GL_WEIGHTS
    total = 0.0
    for si, wi in zip(s, w):
        H = W.hess(a + si * z)
        total = total + wi * (1 - si) * np.einsum("...i,...ij,...j->...", z, H, z)
    return total


def _vsq(z, p):
    s = np.sum(z * z, axis=-1)
    return s + s ** (p / 2)


def field_excess(W: EnergyDensity, Ubar: PeriodicField, psi: PeriodicField) -> float:
    """Grid mean of ``W(Ubar + psi | Ubar)``."""
    return float(np.mean(excess(W, Ubar.samples, psi.samples)))


# ---------------------------------------------------------------------------
# bounds on the excess function
# ---------------------------------------------------------------------------

@dataclass
class ExcessBoundsReport:
    K: float
    p: float
    C_a_lipschitz: float
    C_a_V: float
    R_of_delta: list            # [(delta, R)]
    C_c: tuple | None           # (C, C_tilde)
    gamma_min: float
    C_d: float | None
    zero_rows_ok: bool
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "K": self.K, "p": self.p,
            "C_a_lipschitz": self.C_a_lipschitz, "C_a_V": self.C_a_V,
            "R_of_delta": [[float(d), float(r)] for d, r in self.R_of_delta],
            "C_c": None if self.C_c is None else list(self.C_c),
            "gamma_min": self.gamma_min,
            "C_d": self.C_d,
            "zero_rows_ok": self.zero_rows_ok,
            "n_samples": self.n_samples,
        }


def _ball(rng, n, N, K):
    u = rng.standard_normal((n, N))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = K * rng.uniform(0, 1, n) ** (1.0 / N)
    return u * r[:, None]


def excess_bounds_check(W: EnergyDensity, K: float, n_samples: int = 10_000,
                        seed: int = 0, z_radii=None, deltas=None) -> ExcessBoundsReport:
    """Fit the constants of the standard excess-function bounds on ``|lambda| <= K``.

    (a) ``|f(l+z1|l) - f(l+z2|l)| <= C (|z1|+|z2|+|z1|^{p-1}+|z2|^{p-1}) |z1-z2|``
        and ``|f(l+z|l)| <= C |V(z)|^2``;
    (b) the table ``delta -> R(delta)``: every sampled pair with
        ``|l1 - l2| < R`` has ``|f(l1+z|l1) - f(l2+z|l2)| <= delta |V(z)|^2``;
    (c) ``f(l+z|l) >= C |z|^p - C~ |z|^2``;
    (d) ``f(l+z|l) >= C |V(z)|^2`` when the sampled Hessians are uniformly positive.
    """
    if K <= 0:
        raise ValueError("K must be positive")
    rng = np.random.default_rng(seed)
    N, p = W.N, W.p
    if z_radii is None:
        z_radii = np.geomspace(1e-3, 10.0 * max(K, 1.0), 40)
    if deltas is None:
        deltas = np.geomspace(1e-3, 10.0, 13)
    n = int(n_samples)
    lam = _ball(rng, n, N, K)

    def rand_z():
        u = rng.standard_normal((n, N))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return u * rng.choice(z_radii, n)[:, None]

    z1, z2 = rand_z(), rand_z()
    f1, f2 = excess(W, lam, z1), excess(W, lam, z2)
    n1, n2 = np.linalg.norm(z1, axis=1), np.linalg.norm(z2, axis=1)
    weight = (n1 + n2 + n1 ** (p - 1) + n2 ** (p - 1)) * np.linalg.norm(z1 - z2, axis=1)
    pos = weight > 0
    C_lip = float(np.max(np.abs(f1 - f2)[pos] / weight[pos]))
    v1 = _vsq(z1, p)
    C_V = float(np.max(np.abs(f1) / v1))

    # (b): pairs of base points at controlled separation
    sep = rng.choice(np.geomspace(1e-4, 2 * K, 30), n)
    u = rng.standard_normal((n, N))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    lam2 = lam + sep[:, None] * u
    big = np.linalg.norm(lam2, axis=1) > K
    lam2[big] *= (K / np.linalg.norm(lam2[big], axis=1))[:, None]
    dist = np.linalg.norm(lam - lam2, axis=1)
    Q = np.abs(excess(W, lam, z1) - excess(W, lam2, z1)) / v1
    table = []
    for dl in deltas:
        bad = Q > dl
        R = float(dist[bad].min()) if np.any(bad) else float(dist.max())
        table.append((float(dl), R))

    # (c)
    r_big = np.quantile(n1, 0.75)
    far = n1 >= r_big
    C_c = None
    lower = np.min(f1[far] / n1[far] ** p)
    if lower > 0:
        C = 0.5 * float(lower)
        C_tilde = max(0.0, float(np.max((C * n1**p - f1) / n1**2)))
        C_c = (C, C_tilde)

    # (d)
    pts = np.concatenate([lam, lam + z1])
    gamma = float(np.min(np.linalg.eigvalsh(W.hess(pts))))
    C_d = float(np.min(f1 / v1)) if gamma > 0 else None

    zero = excess(W, lam[:16], np.zeros((min(16, n), N)))
    return ExcessBoundsReport(
        K=float(K), p=float(p), C_a_lipschitz=C_lip, C_a_V=C_V, R_of_delta=table,
        C_c=C_c, gamma_min=gamma, C_d=C_d,
        zero_rows_ok=bool(np.all(zero == 0)), n_samples=n,
    )


# ---------------------------------------------------------------------------
# quadratic forms on the wave cone
# ---------------------------------------------------------------------------

def _kernel_bases(op: DiffOp, xis, tol=DEFAULT_RANK_TOL):
    """Group unit directions by kernel dimension; yields real bases (n, N, r)."""
    _, vh, ranks = _svd_rank(op.real_symbol(xis), tol)
    for r in np.unique(ranks):
        sel = ranks == r
        if op.N - r > 0:
            yield np.swapaxes(vh[sel, r:, :], -1, -2)


def cone_minimum(M, op: DiffOp, xis) -> float:
    """``min`` of ``M l.l`` over unit ``l`` in ``ker A(xi)`` for the given ``xi``."""
    M = np.asarray(M, dtype=float)
    vals = [np.linalg.eigvalsh(np.swapaxes(V, -1, -2) @ M @ V)[:, 0]
            for V in _kernel_bases(op, xis)]
    return float(np.min(np.concatenate(vals))) if vals else math.inf


@dataclass(frozen=True)
class LambdaConvexityReport:
    min_quadratic_on_cone: float
    is_lambda_convex: bool
    n_dirs: int

    def to_dict(self) -> dict:
        return {"min_quadratic_on_cone": self.min_quadratic_on_cone,
                "is_lambda_convex": self.is_lambda_convex, "n_dirs": self.n_dirs}


def lambda_convexity_check(Mform, opA: DiffOp, n_dirs: int = 2000, seed: int = 0,
                           tol: float = 1e-10) -> LambdaConvexityReport:
    """Whether ``l -> M l.l`` is nonnegative on the sampled wave cone.

    For each sampled direction the minimum over the unit sphere of the kernel
    is the smallest eigenvalue of the form restricted to the kernel.
    """
    M = np.asarray(Mform, dtype=float)
    if M.shape != (opA.N, opA.N) or not np.allclose(M, M.T):
        raise ValueError("Mform must be a symmetric N x N matrix")
    half = max(n_dirs // 2, 1)
    xis = sphere_samples(opA.d, n_random=n_dirs - half, n_lattice=half, seed=seed)
    m = cone_minimum(M, opA, xis)
    return LambdaConvexityReport(m, bool(m >= -tol), len(xis))


def quadratic_aqc_value(Mform, opA: DiffOp, psi: PeriodicField, tol: float = 1e-8) -> float:
    """``int M psi.psi`` evaluated as ``sum_xi M c(xi).conj(c(xi))``."""
    M = np.asarray(Mform, dtype=float)
    if afree_residual(opA, psi) > tol:
        raise NotAFreeError("psi is not A-free")
    g = psi.grid
    c = np.fft.fftn(psi.samples, axes=g.axes) / g.size
    return float(np.real(np.sum(np.conj(c) * (c @ M.T))))


# ---------------------------------------------------------------------------
# parameterized descent over A-free fields
# ---------------------------------------------------------------------------

class AfreeParam:
    """``psi = P g`` with ``P`` the band-limited A-free projection; ``P`` is a
    real symmetric operator on sample arrays, so gradients pull back by ``P``."""

    def __init__(self, opA: DiffOp, grid: Grid, band: int | None = None):
        self.opA, self.grid = opA, grid
        P = np.array(projector_grid(opA, grid))
        if band is not None:
            P = P * band_mask(grid, band)[..., None, None]
        self.P = P

    def __call__(self, g: np.ndarray) -> np.ndarray:
        ax = self.grid.axes
        c = np.fft.fftn(g, axes=ax)
        return np.fft.ifftn(np.einsum("...ij,...j->...i", self.P, c), axes=ax).real


def descend(fun_grad, g0: np.ndarray, steps: int, step0: float = 1.0,
            max_abs: float = 1e12):
    """Gradient descent with Armijo backtracking.

    ``fun_grad(g) -> (value, gradient)``.  Returns ``(g, value, history,
    rejected)``; non-finite trial values are rejected and the step shrunk.
    """
    g = g0
    val, grad = fun_grad(g)
    history = [val]
    rejected = 0
    step = step0
    for _ in range(steps):
        gn2 = float(np.sum(grad * grad))
        if gn2 == 0 or not math.isfinite(val) or abs(val) > max_abs:
            break
        accepted = False
        for _ in range(40):
            trial = g - step * grad
            tv, tg = fun_grad(trial)
            if math.isfinite(tv) and tv <= val - 1e-4 * step * gn2:
                accepted = True
                break
            if not math.isfinite(tv):
                rejected += 1
            step *= 0.5
        if not accepted:
            break
        g, val, grad = trial, tv, tg
        history.append(val)
        step *= 2.0
    return g, val, history, rejected


@dataclass
class AQCReport:
    min_gap: float
    certificate_field: PeriodicField | None
    violated: bool
    n_starts: int
    rejected_steps: int
    c0_probe: float
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"min_gap": self.min_gap, "violated": self.violated,
                "n_starts": self.n_starts, "rejected_steps": self.rejected_steps,
                "c0_probe": self.c0_probe, "notes": list(self.notes)}


def aqc_objective(W: EnergyDensity, lam, param: AfreeParam, c0_probe: float = 0.0):
    """``G(g) = mean[W(lam + psi) - W(lam)] - c0 mean|V(psi)|^2`` with ``psi = P g``,
    together with its gradient in ``g``."""
    lam = np.asarray(lam, dtype=float)
    W0 = float(W.value(lam))
    size = param.grid.size
    p = W.p
    vs = v_squared(W.N, p)

    def fun_grad(g):
        psi = param(g)
        with np.errstate(over="ignore", invalid="ignore"):
            val = float(np.mean(W.value(lam + psi))) - W0
            dpsi = W.grad(lam + psi)
            if c0_probe:
                val -= c0_probe * float(np.mean(_vsq(psi, p)))
                dpsi = dpsi - c0_probe * vs.grad(psi)
        return val, param(dpsi / size)

    return fun_grad


def aqc_test(W: EnergyDensity, lam, opA: DiffOp, grid: Grid, n_random: int = 4,
             n_descent_steps: int = 100, band: int = 3, c0_probe: float = 0.0,
             amplitudes=(0.1, 1.0), seed: int = 0, tol: float = 1e-8,
             max_abs: float = 1e6) -> AQCReport:
    """Search for an A-free zero-mean field with negative quasiconvexity gap.

    Only falsifies: a nonnegative ``min_gap`` is evidence, not a certificate.
    """
    param = AfreeParam(opA, grid, band)
    fg = aqc_objective(W, lam, param, c0_probe)
    best, best_psi, rejected, starts = math.inf, None, 0, 0
    for i in range(n_random):
        amp = amplitudes[i % len(amplitudes)]
        g0 = random_afree_field(opA, grid, band, seed=seed * 7919 + i, amplitude=amp).samples
        g, val, hist, rej = descend(fg, g0, n_descent_steps, step0=1.0, max_abs=max_abs)
        rejected += rej
        starts += 1
        # the start value and every accepted iterate are admissible test fields
        # descent is monotone, so the last iterate is the best of this start
        if val < best:
            best = val
            best_psi = param(g)
    violated = best < -tol
    cert = PeriodicField(grid, best_psi) if violated else None
    return AQCReport(best, cert, violated, starts, rejected, c0_probe,
                     notes=["one-sided test: quasiconvexity is falsified, never certified"])


# ---------------------------------------------------------------------------
# shifted density
# ---------------------------------------------------------------------------

def tilde_shift(W: EnergyDensity, c2: float) -> EnergyDensity:
    """``W~(z) = W(z) - c2 |V(z)|^2`` with derivatives assembled analytically."""
    if c2 < 0:
        raise ValueError("c2 must be non-negative")
    if c2 == 0:
        return W
    V = v_squared(W.N, W.p)
    Wt = EnergyDensity(
        W.N, W.p,
        lambda z: W.value(z) - c2 * V.value(z),
        lambda z: W.grad(z) - c2 * V.grad(z),
        lambda z: W.hess(z) - c2 * V.hess(z),
        name=f"{W.name}~",
        growth_constants={"c_upper": 0.0, "c_lower": None},
    )
    growth = estimate_growth(Wt)
    object.__setattr__(Wt, "growth_constants", growth)
    if growth["c_lower"] is None:
        msg = f"tilde_shift(c2={c2}): sampled p-coercivity of the shifted density fails"
        Wt.notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return Wt


# ---------------------------------------------------------------------------
# Garding fits
# ---------------------------------------------------------------------------

def envelope_fit(lhs, exc, pen, slack: float = 1e-12) -> tuple[float, float]:
    """Pareto-minimal ``(C0, C1)`` with ``lhs_i <= C0 exc_i + C1 pen_i`` for all rows.

    Rows are majorized up to a relative ``slack`` so that rounding in exact
    identities (e.g. null Lagrangians) does not leave a spurious ``C1 ~ 1e-13``.

    ``C1(C0) = max(0, max_i (lhs_i - C0 exc_i) / pen_i)`` is convex and
    piecewise linear; the fit takes its minimum and, among minimizers, the
    smallest ``C0``.  Candidates are ``C0 = 0`` and the crossings of
    decreasing rows with non-decreasing rows (the zero line included).
    """
    lhs, exc, pen = (np.asarray(a, dtype=float) for a in (lhs, exc, pen))
    keep = pen > 0
    if np.any((~keep) & (lhs > 0)):
        raise FieldError("row with zero penalty but positive left-hand side")
    b = lhs[keep] * (1 - slack) / pen[keep]
    s = -exc[keep] / pen[keep]
    if b.size == 0:
        return 0.0, 0.0
    neg = s < 0
    bp = np.concatenate([[0.0], b[~neg]])
    sp = np.concatenate([[0.0], s[~neg]])
    bn, sn = b[neg], s[neg]
    cand = [np.zeros(1)]
    if bn.size:
        x = (bp[None, :] - bn[:, None]) / (sn[:, None] - sp[None, :])
        cand.append(x.ravel())
    cand = np.concatenate(cand)
    cand = np.unique(cand[np.isfinite(cand) & (cand >= 0)])

    def h(x):
        out = np.zeros_like(x)
        for i in range(0, len(b), 512):
            blk = b[i:i + 512, None] + s[i:i + 512, None] * x[None, :]
            out = np.maximum(out, blk.max(axis=0))
        return out

    vals = h(cand)
    i = int(np.argmax(vals <= vals.min()))
    C0 = float(cand[i])
    C1 = float(max(0.0, h(np.array([C0]))[0]))
    return C0, C1


@dataclass
class GardingReport:
    C0_fit: float
    C1_fit: float
    worst_ratio_field_id: int
    n_fields: int
    epsilon0_estimate: float
    rows: list
    K: float
    modulus: float
    p: float

    def to_dict(self) -> dict:
        return {
            "C0_fit": self.C0_fit, "C1_fit": self.C1_fit,
            "worst_ratio_field_id": self.worst_ratio_field_id,
            "n_fields": self.n_fields, "epsilon0_estimate": self.epsilon0_estimate,
            "K": self.K, "modulus": self.modulus, "p": self.p,
            "rows": self.rows,
        }

    def holds(self, rtol: float = 1e-10) -> bool:
        return all(r["lhs"] * (1 - rtol) <= self.C0_fit * r["excess"] + self.C1_fit * r["penalty"]
                   for r in self.rows)

    def write_csv(self, path) -> None:
        cols = ["id", "lhs", "excess", "penalty", "w_minus1_p", "bound"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["id"]] + [repr(float(r[c])) for c in cols[1:]])


def discrete_modulus(U: PeriodicField) -> float:
    """Largest jump of ``U`` between grid neighbours (modulus at spacing 1/n)."""
    s = U.samples
    return float(max(np.linalg.norm(np.roll(s, -1, axis=a) - s, axis=-1).max()
                     for a in U.grid.axes))


def _check_test_field(opA, psi, tol, i):
    if afree_residual(opA, psi) > tol:
        raise NotAFreeError(f"test field {i} is not A-free")
    if np.linalg.norm(psi.mean()) > tol * (lp_norm(psi) + 1e-300):
        raise NotAFreeError(f"test field {i} does not have zero mean")


def garding_verify(W: EnergyDensity, Ubar: PeriodicField, opA: DiffOp, test_fields,
                   p: float | None = None, tol: float = 1e-8) -> GardingReport:
    """Fit ``int|V(psi)|^2 <= C0 int W(Ubar+psi|Ubar) + C1 ||psi||^2_{W^-1,(2,p)}``.

    ``(C0, C1)`` comes from :func:`envelope_fit`.  ``epsilon0_estimate`` is the
    largest ``W^{-1,p}`` level below which every tested row is majorized by
    the excess term alone.
    """
    test_fields = list(test_fields)
    if not test_fields:
        raise ValueError("no test fields")
    p = W.p if p is None else p
    rows = []
    for i, psi in enumerate(test_fields):
        _check_test_field(opA, psi, tol, i)
        e = field_excess(W, Ubar, psi)
        if not math.isfinite(e):
            raise FloatingPointError(f"excess is not finite for test field {i}")
        rows.append({
            "id": i,
            "lhs": v_energy(psi, p),
            "excess": e,
            "penalty": mixed_negative_norm(psi, p) ** 2,
            "w_minus1_p": sobolev_norm(psi, -1, p),
        })
    lhs = np.array([r["lhs"] for r in rows])
    exc = np.array([r["excess"] for r in rows])
    pen = np.array([r["penalty"] for r in rows])
    C0, C1 = envelope_fit(lhs, exc, pen)
    bound = C0 * exc + C1 * pen
    for r, bnd in zip(rows, bound):
        r["bound"] = float(bnd)
    ratio = np.where(bound > 0, lhs / np.where(bound > 0, bound, 1.0), np.where(lhs > 0, np.inf, 0))
    worst = int(np.argmax(ratio))

    norms = np.array([r["w_minus1_p"] for r in rows])
    order = np.argsort(norms, kind="stable")
    ok = lhs[order] * (1 - 1e-11) <= C0 * exc[order]
    eps0 = 0.0
    for idx, good in zip(order, ok):
        if not good:
            break
        eps0 = float(norms[idx])
    return GardingReport(C0, C1, worst, len(rows), eps0, rows,
                         K=float(np.linalg.norm(Ubar.samples, axis=-1).max()),
                         modulus=discrete_modulus(Ubar), p=float(p))


@dataclass
class AdversaryReport:
    min_ratio: float
    violated: bool
    worst_field: PeriodicField | None
    n_starts: int

    def to_dict(self) -> dict:
        return {"min_ratio": self.min_ratio, "violated": self.violated,
                "n_starts": self.n_starts}


def garding_adversary(W: EnergyDensity, Ubar: PeriodicField, opA: DiffOp, C0: float,
                      C1: float, n_random: int = 4, n_descent_steps: int = 250,
                      band: int = 3, amplitudes=(0.3, 1.0), seed: int = 0,
                      p: float | None = None, rtol: float = 1e-9) -> AdversaryReport:
    """Minimize ``(C0 excess + C1 penalty) / int|V|^2`` over A-free fields.

    A ratio below ``1 - rtol`` is a field violating the fitted pair.
    """
    p = W.p if p is None else p
    grid = Ubar.grid
    param = AfreeParam(opA, grid, band)
    size = grid.size
    m = sobolev_multiplier(grid, -1)[..., None]
    U = Ubar.samples
    DWU = W.grad(U)
    WU = W.value(U)
    vs = v_squared(W.N, p)

    def mult(a):
        c = np.fft.fftn(a, axes=grid.axes)
        return np.fft.ifftn(c * m, axes=grid.axes).real

    def fun_grad(g):
        psi = param(g)
        exc = float(np.mean(W.value(U + psi) - WU - np.sum(DWU * psi, axis=-1)))
        d_exc = (W.grad(U + psi) - DWU) / size
        lhs = float(np.mean(_vsq(psi, p)))
        d_lhs = vs.grad(psi) / size
        u = mult(psi)
        su = np.sum(u * u, axis=-1)
        pen = float(np.mean(su) + np.mean(su ** (p / 2)))
        d_pen = mult(2 * u + p * (su ** ((p - 2) / 2))[..., None] * u) / size
        num = C0 * exc + C1 * pen
        d_num = C0 * d_exc + C1 * d_pen
        if lhs == 0:
            return math.inf, np.zeros_like(g)
        r = num / lhs
        return r, param((d_num - r * d_lhs) / lhs)

    best, worst = math.inf, None
    for i in range(n_random):
        amp = amplitudes[i % len(amplitudes)]
        g0 = random_afree_field(opA, grid, band, seed=seed * 104729 + i, amplitude=amp).samples
        # scale the step to the field amplitude so the ratio landscape is explored
        g, val, hist, _ = descend(fun_grad, g0, n_descent_steps, step0=amp**2)
        if min(hist) < best:
            best = min(hist)
            worst = PeriodicField(grid, param(g))
    return AdversaryReport(float(best), bool(best < 1 - rtol), worst, n_random)


def frozen_cone_constant(H_stack: np.ndarray, bases) -> float:
    """``min`` over background values and frequencies of the smallest eigenvalue
    of each Hessian restricted to each basis (columns)."""
    best = math.inf
    for V in bases:
        R = np.einsum("fia,xij,fjb->xfab", V, H_stack, V)
        best = min(best, float(np.linalg.eigvalsh(R)[..., 0].min()))
    return best


def _range_bases(opB: DiffOp, xis, tol=DEFAULT_RANK_TOL):
    u, _, ranks = _svd_full(opB.real_symbol(xis), tol)
    for r in np.unique(ranks):
        sel = ranks == r
        if r:
            yield u[sel, :, :r]


def _svd_full(mats, tol):
    u, s, vh = np.linalg.svd(mats)
    smax = s[..., :1]
    ranks = np.sum((s >= tol * smax) & (smax > 0), axis=-1)
    return u, s, ranks


def subsample_values(U: PeriodicField, limit: int = 64) -> np.ndarray:
    vals = np.unique(U.flat(), axis=0)
    if len(vals) > limit:
        idx = np.linspace(0, len(vals) - 1, limit).round().astype(int)
        vals = vals[idx]
    return vals


@dataclass
class QuadraticGardingReport:
    c0_frozen: float
    c0_delta_fit: float
    c1_fit: float
    delta: float
    c2: float
    modulus: float
    rows: list

    def to_dict(self) -> dict:
        return {"c0_frozen": self.c0_frozen, "c0_delta_fit": self.c0_delta_fit,
                "c1_fit": self.c1_fit, "delta": self.delta, "c2": self.c2,
                "modulus": self.modulus, "rows": self.rows}


def quadratic_garding_check(W: EnergyDensity, Ubar: PeriodicField, opB: DiffOp, phis,
                            c2: float = 0.0, delta: float = 0.1,
                            max_background_values: int = 64) -> QuadraticGardingReport:
    """Fit ``int D^2W~(Ubar) Bphi.Bphi >= c0 (1-delta) int |Bphi|^2 - c1 sum_i int|grad^{l-i} phi|^2``.

    ``c0`` is the frozen-coefficient constant: the smallest eigenvalue of
    ``D^2W~(Ubar(x))`` on ``im B(xi)`` over (subsampled) background values and
    all grid frequencies.  ``c1`` is the smallest value making every row hold.
    """
    Wt = tilde_shift(W, c2)
    grid = Ubar.grid
    l = opB.k
    xis = grid.frequencies().reshape(-1, grid.d)
    xis = xis[np.any(xis != 0, axis=1)]
    vals = subsample_values(Ubar, max_background_values)
    c0 = frozen_cone_constant(Wt.hess(vals), _range_bases(opB, xis))
    kappa = c0 * (1 - delta)
    H = Wt.hess(Ubar.samples)
    rows = []
    for i, phi in enumerate(phis):
        psi = apply_operator(opB, phi)
        a = float(np.mean(np.einsum("...i,...ij,...j->...", psi.samples, H, psi.samples)))
        b = float(np.mean(np.sum(psi.samples**2, axis=-1)))
        c = float(sum(sobolev_norm(phi, j, 2) ** 2 for j in range(l)))
        rows.append({"id": i, "quadratic": a, "l2": b, "lower_order": c})
    need = [(kappa * r["l2"] - r["quadratic"]) / r["lower_order"]
            for r in rows if r["lower_order"] > 0]
    c1 = max([0.0] + need)
    return QuadraticGardingReport(c0, kappa, float(c1), delta, c2,
                                  discrete_modulus(Ubar), rows)


__all__ = [
    "excess", "excess_integral", "field_excess", "excess_bounds_check",
    "lambda_convexity_check", "quadratic_aqc_value", "aqc_test", "aqc_objective",
    "tilde_shift", "envelope_fit", "garding_verify", "garding_adversary",
    "quadratic_garding_check", "frozen_cone_constant", "AfreeParam", "descend",
    "GardingReport", "AQCReport", "AdversaryReport", "QuadraticGardingReport",
]
