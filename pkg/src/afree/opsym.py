"""Symbols of homogeneous constant-coefficient differential operators.

An operator ``A psi = sum_{|alpha|=k} A_alpha d^alpha psi`` acting on
``R^N``-valued fields over ``R^d`` is stored as a table of ``M x N`` real
matrices keyed by multi-indices.  Its principal symbol at a frequency ``xi`` is

    A(xi) = (2 pi i)^k sum_alpha A_alpha xi^alpha

Because the coefficients are real, the symbol is a fixed complex scalar times
a real matrix; kernels, projectors and pseudo-inverses are therefore computed
from the real polynomial part, which keeps kernel bases real.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

DEFAULT_RANK_TOL = 1e-10

MultiIndex = tuple[int, ...]


class OperatorError(ValueError):
    """Raised for malformed operator tables or unknown built-in tags."""


def multi_index(entries: Sequence[int]) -> MultiIndex:
    alpha = tuple(int(a) for a in entries)
    if any(a < 0 for a in alpha):
        raise OperatorError(f"multi-index entries must be non-negative: {alpha}")
    return alpha


def multi_indices(d: int, k: int) -> list[MultiIndex]:
    """All d-multi-indices of order exactly k, in lexicographic order."""
    out = []
    for combo in itertools.combinations_with_replacement(range(d), k):
        alpha = [0] * d
        for axis in combo:
            alpha[axis] += 1
        out.append(tuple(alpha))
    return sorted(set(out), reverse=True)


@dataclass(frozen=True, eq=False)
class DiffOp:
    """Homogeneous k-th order operator ``R^N -> R^M`` on d-dimensional fields.

    Instances compare and hash by identity so they can key symbol caches.
    """

    d: int
    N: int
    M: int
    k: int
    coeffs: Mapping[MultiIndex, np.ndarray]
    name: str | None = None
    partner: str | None = None
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1 or self.N < 1 or self.M < 1 or self.k < 0:
            raise OperatorError("dimensions must be positive and order non-negative")
        clean = {}
        for alpha, mat in self.coeffs.items():
            alpha = multi_index(alpha)
            if len(alpha) != self.d:
                raise OperatorError(f"multi-index {alpha} has length != d={self.d}")
            if sum(alpha) != self.k:
                raise OperatorError("coefficient order mismatch")
            mat = np.array(mat, dtype=float)
            if mat.shape != (self.M, self.N):
                raise OperatorError(
                    f"coefficient for {alpha} has shape {mat.shape}, expected {(self.M, self.N)}"
                )
            mat.setflags(write=False)
            if alpha in clean:
                mat = clean[alpha] + mat
            clean[alpha] = mat
        if not clean or all(not np.any(m) for m in clean.values()):
            raise OperatorError("all-zero coefficients")
        object.__setattr__(self, "coeffs", clean)

    def __repr__(self):
        tag = self.name or "table"
        return f"DiffOp({tag}, d={self.d}, N={self.N}, M={self.M}, k={self.k})"

    def real_symbol(self, xis) -> np.ndarray:
        """``sum_alpha A_alpha xi^alpha`` for a stack of frequencies (..., d)."""
        xis = np.asarray(xis, dtype=float)
        out = np.zeros(xis.shape[:-1] + (self.M, self.N))
        for alpha, mat in self.coeffs.items():
            mono = np.prod(xis ** np.array(alpha, dtype=float), axis=-1)
            out += mono[..., None, None] * mat
        return out

    def symbol_matrix(self, xis) -> np.ndarray:
        """Full complex symbol ``(2 pi i)^k sum A_alpha xi^alpha`` (unnormalized)."""
        return (2j * np.pi) ** self.k * self.real_symbol(xis)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "N": self.N,
            "M": self.M,
            "k": self.k,
            "name": self.name,
            "coeffs": [
                {"alpha": list(alpha), "matrix": mat.tolist()}
                for alpha, mat in sorted(self.coeffs.items(), reverse=True)
            ],
        }


def _unit(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    norm = np.linalg.norm(xi, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("xi must be nonzero")
    return xi / norm


# ---------------------------------------------------------------------------
# built-in operators
# ---------------------------------------------------------------------------

def _levi_civita(d: int) -> np.ndarray:
    eps = np.zeros((d,) * d)
    for perm in itertools.permutations(range(d)):
        sign = np.linalg.det(np.eye(d)[list(perm)])
        eps[perm] = round(sign)
    return eps


def sym_basis(d: int) -> np.ndarray:
    """Frobenius-orthonormal basis of symmetric d x d matrices, shape (d(d+1)/2, d, d)."""
    basis = []
    for i in range(d):
        for j in range(i, d):
            S = np.zeros((d, d))
            if i == j:
                S[i, i] = 1.0
            else:
                S[i, j] = S[j, i] = 1.0 / math.sqrt(2.0)
            basis.append(S)
    return np.array(basis)


def _e(d: int, *axes: int) -> MultiIndex:
    alpha = [0] * d
    for a in axes:
        alpha[a] += 1
    return tuple(alpha)


def _add(table: dict, alpha: MultiIndex, row: int, col: int, value: float, shape):
    mat = table.setdefault(alpha, np.zeros(shape))
    mat[row, col] += value


def grad_op(d: int, m: int = 1) -> DiffOp:
    """Gradient of an R^m-valued map; output is the m x d Jacobian, row-major."""
    table: dict = {}
    for i in range(m):
        for j in range(d):
            _add(table, _e(d, j), i * d + j, i, 1.0, (m * d, m))
    return DiffOp(d, m, m * d, 1, table, name="grad", partner="curl", params={"d": d, "m": m})


def curl_op(d: int, m: int = 1) -> DiffOp:
    """Row-wise curl of an m x d matrix field (flattened row-major).

    d=2: each row maps to the scalar ``d_2 F_{i1} - d_1 F_{i2}``.
    d=3: each row maps to the usual vector curl.
    d>3: each row maps to the antisymmetric pairs ``d_l F_{ij} - d_j F_{il}``, j<l.
    """
    table: dict = {}
    N = m * d
    if d == 2:
        M = m
        for i in range(m):
            _add(table, _e(d, 1), i, i * d + 0, 1.0, (M, N))
            _add(table, _e(d, 0), i, i * d + 1, -1.0, (M, N))
    elif d == 3:
        M = 3 * m
        eps = _levi_civita(3)
        for i in range(m):
            for a, b, c in itertools.product(range(3), repeat=3):
                if eps[a, b, c]:
                    # (curl F_i)_a = eps_abc d_b F_ic
                    _add(table, _e(d, b), i * 3 + a, i * d + c, eps[a, b, c], (M, N))
    elif d > 3:
        pairs = list(itertools.combinations(range(d), 2))
        M = m * len(pairs)
        for i in range(m):
            for r, (j, l) in enumerate(pairs):
                _add(table, _e(d, l), i * len(pairs) + r, i * d + j, 1.0, (M, N))
                _add(table, _e(d, j), i * len(pairs) + r, i * d + l, -1.0, (M, N))
    else:
        raise OperatorError("curl needs d >= 2")
    partner = "grad"
    return DiffOp(d, N, M, 1, table, name="curl", partner=partner, params={"d": d, "m": m})


def div_op(d: int, m: int = 1) -> DiffOp:
    """Row-wise divergence of an m x d matrix field."""
    table: dict = {}
    for i in range(m):
        for j in range(d):
            _add(table, _e(d, j), i, i * d + j, 1.0, (m, m * d))
    partner = "curl" if d == 3 and m == 1 else None
    return DiffOp(d, m * d, m, 1, table, name="div", partner=partner, params={"d": d, "m": m})


def symgrad_op(d: int) -> DiffOp:
    """Symmetric gradient of a vector field, in orthonormal Sym(d) coordinates."""
    S = sym_basis(d)
    table: dict = {}
    for a in range(len(S)):
        for i in range(d):
            for j in range(d):
                if S[a, i, j]:
                    # (sym grad u)_a = S_a : grad u,  (grad u)_ij = d_j u_i
                    _add(table, _e(d, j), a, i, S[a, i, j], (len(S), d))
    return DiffOp(d, d, len(S), 1, table, name="symgrad", partner="curlcurl", params={"d": d})


def curlcurl_op(d: int) -> DiffOp:
    """Saint-Venant incompatibility ``curl curl E`` on symmetric matrices.

    Input and output use orthonormal Sym(d) coordinates (d = 2 gives a scalar
    output).  Its kernel at every xi is the image of the symmetric gradient.
    """
    S = sym_basis(d)
    table: dict = {}
    if d == 2:
        eps = _levi_civita(2)
        shape = (1, len(S))
        for a in range(len(S)):
            for k, mm, l, n in itertools.product(range(2), repeat=4):
                c = eps[k, l] * eps[mm, n] * S[a, l, n]
                if c:
                    _add(table, _e(d, k, mm), 0, a, c, shape)
    elif d == 3:
        eps = _levi_civita(3)
        shape = (len(S), len(S))
        for b in range(len(S)):
            for a in range(len(S)):
                for i, j, k, l, mm, n in itertools.product(range(3), repeat=6):
                    c = S[b, i, j] * eps[i, k, l] * eps[j, mm, n] * S[a, l, n]
                    if c:
                        _add(table, _e(d, k, mm), b, a, c, shape)
    else:
        raise OperatorError("curlcurl is built in for d = 2, 3 only")
    return DiffOp(d, len(S), shape[0], 2, table, name="curlcurl", partner="symgrad", params={"d": d})


_BUILTINS = {
    "grad": grad_op,
    "curl": curl_op,
    "div": div_op,
    "symgrad": symgrad_op,
    "curlcurl": curlcurl_op,
}

# constraint tag -> potential tag, given the constraint's parameters
POTENTIAL_PAIRS = {"curl": "grad", "div": "curl", "curlcurl": "symgrad"}


def operator_from_table(table: Mapping[str, Any]) -> DiffOp:
    try:
        d, N, M, k = (int(table[key]) for key in ("d", "N", "M", "k"))
        entries = table["coeffs"]
    except KeyError as exc:
        raise OperatorError(f"operator table missing key {exc}") from None
    orders = {sum(e["alpha"]) for e in entries}
    if len(orders) > 1 or (orders and orders != {k}):
        raise OperatorError("coefficient order mismatch")
    coeffs: dict = {}
    for e in entries:
        alpha = multi_index(e["alpha"])
        mat = np.array(e["matrix"], dtype=float)
        coeffs[alpha] = coeffs.get(alpha, 0) + mat
    return DiffOp(d, N, M, k, coeffs, name=table.get("name"))


def make_operator(spec, **params) -> DiffOp:
    """Build an operator from a built-in tag or an explicit coefficient table.

    ``spec`` may be a tag (``"curl"`` plus keyword parameters ``d``, ``m``),
    a mapping ``{"tag": ..., **params}``, or a coefficient table in the JSON
    layout ``{"d", "N", "M", "k", "coeffs": [{"alpha", "matrix"}, ...]}``.
    """
    if isinstance(spec, DiffOp):
        return spec
    if isinstance(spec, Mapping):
        if "tag" in spec:
            spec = dict(spec)
            tag = spec.pop("tag")
            return make_operator(tag, **{**spec, **params})
        return operator_from_table(spec)
    if not isinstance(spec, str):
        raise OperatorError(f"cannot build an operator from {spec!r}")
    try:
        factory = _BUILTINS[spec]
    except KeyError:
        raise OperatorError(f"unknown operator tag {spec!r}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise OperatorError(f"bad parameters for {spec!r}: {exc}") from None


def load_operator(path) -> DiffOp:
    return operator_from_table(json.loads(Path(path).read_text()))


def potential_of(op: DiffOp) -> DiffOp:
    """The registered potential partner of a built-in constraint operator."""
    if op.name not in POTENTIAL_PAIRS or op.partner is None:
        raise OperatorError(f"no registered potential for {op!r}")
    d = op.params["d"]
    if op.name == "curl":
        return grad_op(d, op.params.get("m", 1))
    if op.name == "div":
        if d != 3 or op.params.get("m", 1) != 1:
            raise OperatorError("div has a registered potential only for d=3 vector fields")
        return curl_op(3, 1)
    return symgrad_op(d)


def embed_operator(op: DiffOp, n_total: int, columns: Sequence[int]) -> DiffOp:
    """Extend ``op`` to act on the listed components of a larger state vector."""
    columns = list(columns)
    if len(columns) != op.N:
        raise OperatorError("column map does not match operator source dimension")
    coeffs = {}
    for alpha, mat in op.coeffs.items():
        big = np.zeros((op.M, n_total))
        big[:, columns] = mat
        coeffs[alpha] = big
    return DiffOp(op.d, n_total, op.M, op.k, coeffs, name=op.name, params=dict(op.params))


# ---------------------------------------------------------------------------
# symbol analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymbolSample:
    xi: np.ndarray
    matrix: np.ndarray
    rank: int
    kernel_basis: np.ndarray  # columns
    singular_values: np.ndarray


def _svd_rank(real_mats: np.ndarray, tol: float):
    """Batched SVD; returns (singular values, Vh, ranks)."""
    _, s, vh = np.linalg.svd(real_mats)
    smax = s[..., :1] if s.shape[-1] else np.zeros(s.shape[:-1] + (1,))
    ranks = np.sum(s >= tol * np.maximum(smax, np.finfo(float).tiny), axis=-1)
    ranks = np.where(smax[..., 0] > 0, ranks, 0)
    return s, vh, ranks


def symbol(op: DiffOp, xi, tol: float = DEFAULT_RANK_TOL) -> SymbolSample:
    """Symbol at ``xi/|xi|`` with its rank, kernel and singular values."""
    u = _unit(xi)
    real = op.real_symbol(u)
    s, vh, rank = _svd_rank(real, tol)
    rank = int(rank)
    kernel = vh[rank:].T.astype(complex)
    scale = (2 * np.pi) ** op.k
    return SymbolSample(
        xi=u,
        matrix=op.symbol_matrix(u),
        rank=rank,
        kernel_basis=kernel,
        singular_values=scale * s,
    )


def real_kernel_basis(op: DiffOp, xi, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Real orthonormal kernel basis (columns) of the symbol at ``xi``."""
    return symbol(op, xi, tol).kernel_basis.real.copy()


def sphere_samples(d: int, n_random: int = 0, n_lattice: int = 0, seed: int = 0,
                   lattice_radius: int = 2) -> np.ndarray:
    """Deterministic coverage of S^{d-1}: axes, integer lattice directions,
    a Fibonacci-type spiral (d = 2, 3) and seeded uniform samples."""
    pts = [np.eye(d), -np.eye(d)]
    if lattice_radius > 0:
        rng = range(-lattice_radius, lattice_radius + 1)
        lat = np.array([p for p in itertools.product(rng, repeat=d) if any(p)], dtype=float)
        pts.append(lat)
    if n_lattice > 0:
        if d == 2:
            theta = 2 * np.pi * (np.arange(n_lattice) + 0.5) / n_lattice
            pts.append(np.stack([np.cos(theta), np.sin(theta)], axis=1))
        elif d == 3:
            i = np.arange(n_lattice) + 0.5
            z = 1 - 2 * i / n_lattice
            r = np.sqrt(1 - z**2)
            phi = np.pi * (1 + 5**0.5) * i
            pts.append(np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1))
    if n_random > 0 or (n_lattice > 0 and d > 3):
        g = np.random.default_rng(seed).standard_normal((max(n_random, n_lattice), d))
        pts.append(g)
    return _unit(np.concatenate(pts, axis=0))


@dataclass(frozen=True)
class RankReport:
    min_rank: int
    max_rank: int
    sample_count: int
    tol: float
    is_constant_rank: bool
    witness_xis: list

    def to_dict(self) -> dict:
        return {
            "min_rank": self.min_rank,
            "max_rank": self.max_rank,
            "sample_count": self.sample_count,
            "tol": self.tol,
            "is_constant_rank": self.is_constant_rank,
            "witness_xis": [list(map(float, x)) for x in self.witness_xis],
        }


def constant_rank_check(op: DiffOp, n_samples: int = 1000, tol: float = DEFAULT_RANK_TOL,
                        seed: int = 0) -> RankReport:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not 0 < tol < 1:
        raise ValueError("tol must lie in (0, 1)")
    half = max(n_samples // 2, 1)
    xis = sphere_samples(op.d, n_random=n_samples - half, n_lattice=half, seed=seed)
    _, _, ranks = _svd_rank(op.real_symbol(xis), tol)
    lo, hi = int(ranks.min()), int(ranks.max())
    witnesses = [xis[int(np.argmin(ranks))], xis[int(np.argmax(ranks))]]
    return RankReport(lo, hi, len(xis), tol, lo == hi, witnesses)


def wave_cone_sample(op: DiffOp, xis, tol: float = DEFAULT_RANK_TOL) -> list:
    """(xi, real kernel basis) for each sampled direction."""
    out = []
    for xi in xis:
        out.append((_unit(xi), real_kernel_basis(op, xi, tol)))
    return out


def _pinv_real(mats: np.ndarray, tol: float) -> np.ndarray:
    u, s, vh = np.linalg.svd(mats, full_matrices=False)
    smax = s[..., :1]
    keep = (s >= tol * smax) & (smax > 0)
    inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return np.einsum("...ji,...j,...kj->...ik", vh, inv, u)


def pseudo_inverse_symbol(op: DiffOp, xi, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of the (unnormalized) symbol at ``xi``."""
    xi = np.asarray(xi, dtype=float)
    if not np.any(xi):
        raise ValueError("xi must be nonzero")
    return _pinv_real(op.real_symbol(xi), tol) / (2j * np.pi) ** op.k


def pseudo_inverse_symbols(op: DiffOp, xis, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Batched pseudo-inverse; rows with ``xi = 0`` map to zero."""
    xis = np.asarray(xis, dtype=float)
    zero = ~np.any(xis, axis=-1)
    safe = np.where(zero[..., None], 1.0, xis)
    out = _pinv_real(op.real_symbol(safe), tol) / (2j * np.pi) ** op.k
    out[zero] = 0
    return out


def projector_symbols(op: DiffOp, xis, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Real orthogonal projectors onto ker A(xi) for a stack of frequencies.

    The symbol is 0-homogeneous in xi, so directions are normalized first.
    Rows with ``xi = 0`` get the zero matrix.
    """
    xis = np.asarray(xis, dtype=float)
    zero = ~np.any(xis, axis=-1)
    safe = np.where(zero[..., None], 1.0, xis)
    safe = safe / np.linalg.norm(safe, axis=-1, keepdims=True)
    _, vh, ranks = _svd_rank(op.real_symbol(safe), tol)
    idx = np.arange(op.N)
    mask = (idx >= ranks[..., None]).astype(float)
    P = np.einsum("...ji,...j,...jk->...ik", vh, mask, vh)
    P[zero] = 0
    return P


def projector_symbol(op: DiffOp, xi, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthogonal projector onto ker A(xi), as a complex N x N matrix."""
    xi = np.asarray(xi, dtype=float)
    if not np.any(xi):
        raise ValueError("xi must be nonzero")
    return projector_symbols(op, xi[None], tol)[0].astype(complex)


@dataclass(frozen=True)
class CompatReport:
    max_product_residual: float
    rank_defect_count: int
    sample_count: int
    tol: float

    @property
    def compatible(self) -> bool:
        return self.max_product_residual <= self.tol and self.rank_defect_count == 0

    def to_dict(self) -> dict:
        return {
            "max_product_residual": self.max_product_residual,
            "rank_defect_count": self.rank_defect_count,
            "sample_count": self.sample_count,
            "tol": self.tol,
            "compatible": self.compatible,
        }


def potential_compat_check(opA: DiffOp, opB: DiffOp, n_samples: int = 1000,
                           tol: float = 1e-10, seed: int = 0,
                           rank_tol: float = DEFAULT_RANK_TOL) -> CompatReport:
    """Check ``im B(xi) = ker A(xi)`` on sampled unit frequencies.

    The product residual is relative: ``|A(xi)B(xi)| / (|A(xi)| |B(xi)|)`` in
    the spectral norm, which is invariant under rescaling either operator.
    """
    if opB.M != opA.N or opA.d != opB.d:
        raise OperatorError(
            f"dimension mismatch: potential maps into R^{opB.M}, constraint acts on R^{opA.N}"
        )
    half = max(n_samples // 2, 1)
    xis = sphere_samples(opA.d, n_random=n_samples - half, n_lattice=half, seed=seed)
    a = opA.real_symbol(xis)
    b = opB.real_symbol(xis)
    prod = np.linalg.norm(a @ b, ord=2, axis=(-2, -1))
    scale = np.linalg.norm(a, ord=2, axis=(-2, -1)) * np.linalg.norm(b, ord=2, axis=(-2, -1))
    residual = prod / np.where(scale > 0, scale, 1.0)
    _, _, rank_a = _svd_rank(a, rank_tol)
    _, _, rank_b = _svd_rank(b, rank_tol)
    defects = int(np.sum(rank_b != opA.N - rank_a))
    return CompatReport(float(residual.max()), defects, len(xis), tol)
