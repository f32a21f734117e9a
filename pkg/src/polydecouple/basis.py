"""Multivariate polynomial maps over a graded-lexicographic monomial basis.

A polynomial vector function with m inputs and n outputs is stored as an
n x ell coefficient matrix over the monomial basis of total degree <= d,
where ell = binom(m + d, m).  The basis is ordered by total degree first,
then lexicographically with u1 ranked above u2 above ... above um, e.g.
for m = d = 2: [1, u1, u2, u1^2, u1*u2, u2^2].

The module also builds the linearization A(u) that maps the stacked
non-constant coefficients to the vectorized Jacobian at a point u, which
is the bridge between coefficient covariance and Jacobian covariance.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from ._validation import as_float_array, check_positive_int

__all__ = [
    "MonomialBasis",
    "PolyMap",
    "basis_enumerate",
    "poly_eval",
    "poly_eval_many",
    "jacobian",
    "a_matrix",
    "coeff_vector",
    "coeff_insert",
    "compose_branches",
    "poly_to_dict",
    "poly_from_dict",
    "save_poly",
    "load_poly",
    "write_json_atomic",
]


def _exponents_of_degree(m: int, total: int):
    """Yield exponent tuples of exact total degree, lexicographically descending."""
    if m == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _exponents_of_degree(m - 1, total - first):
            yield (first,) + rest


@dataclass(frozen=True)
class MonomialBasis:
    """Ordered monomial basis of all m-variate monomials with degree <= d.

    ``exponents`` is an (ell, m) integer array; row j gives the per-variable
    exponents of the j-th monomial.  Row 0 is the constant monomial.
    """

    m: int
    d: int
    exponents: np.ndarray

    @property
    def size(self) -> int:
        return self.exponents.shape[0]

    def monomials(self, u: np.ndarray) -> np.ndarray:
        """Values of all basis monomials at a single point, shape (ell,)."""
        return np.prod(u[None, :] ** self.exponents, axis=1)

    def monomials_many(self, points: np.ndarray) -> np.ndarray:
        """Values of all basis monomials at each row of ``points``, shape (N, ell)."""
        return np.prod(points[:, None, :] ** self.exponents[None, :, :], axis=2)

    def derivative_values(self, u: np.ndarray) -> np.ndarray:
        """Partial derivatives of every monomial at ``u``.

        Returns an (m, ell) array D with D[k, j] = d(monomial j)/d(u_k)
        evaluated at u, computed from the exponent table (exact, no
        differencing).
        """
        ell = self.size
        D = np.zeros((self.m, ell))
        for k in range(self.m):
            e_k = self.exponents[:, k]
            active = e_k > 0
            if not np.any(active):
                continue
            dexp = self.exponents[active].copy()
            dexp[:, k] -= 1
            D[k, active] = e_k[active] * np.prod(u[None, :] ** dexp, axis=1)
        return D


def basis_enumerate(m: int, d: int) -> MonomialBasis:
    """Enumerate the monomial basis for m variables up to total degree d.

    Raises ValueError when m or d is not a positive integer.
    """
    m = check_positive_int(m, "m")
    d = check_positive_int(d, "d")
    rows = []
    for total in range(d + 1):
        rows.extend(_exponents_of_degree(m, total))
    exponents = np.array(rows, dtype=int)
    assert exponents.shape[0] == math.comb(m + d, m)
    return MonomialBasis(m=m, d=d, exponents=exponents)


@dataclass(frozen=True)
class PolyMap:
    """A coupled polynomial vector function as coefficients over a basis.

    ``coeffs`` has shape (n, ell); row i holds the coefficients of the i-th
    output in basis order (constant term first).
    """

    basis: MonomialBasis
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = as_float_array(self.coeffs, "coeffs", ndim=2)
        if coeffs.shape[1] != self.basis.size:
            raise ValueError(
                f"coeffs has {coeffs.shape[1]} columns, basis has {self.basis.size} monomials"
            )
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    @property
    def m(self) -> int:
        return self.basis.m

    @property
    def d(self) -> int:
        return self.basis.d


def poly_eval(f: PolyMap, u) -> np.ndarray:
    """Evaluate f at a single point u, returning the n output values."""
    u = as_float_array(u, "u", ndim=1)
    if u.shape[0] != f.m:
        raise ValueError(f"u has length {u.shape[0]}, expected {f.m}")
    return f.coeffs @ f.basis.monomials(u)


def poly_eval_many(f: PolyMap, points) -> np.ndarray:
    """Evaluate f at each row of ``points``; returns shape (N, n)."""
    points = as_float_array(points, "points", ndim=2)
    if points.shape[1] != f.m:
        raise ValueError(f"points have {points.shape[1]} columns, expected {f.m}")
    return f.basis.monomials_many(points) @ f.coeffs.T


def jacobian(f: PolyMap, u) -> np.ndarray:
    """Jacobian of f at u, shape (n, m), by exact symbolic differentiation."""
    u = as_float_array(u, "u", ndim=1)
    if u.shape[0] != f.m:
        raise ValueError(f"u has length {u.shape[0]}, expected {f.m}")
    return f.coeffs @ f.basis.derivative_values(u).T


def a_matrix(basis: MonomialBasis, n: int, u) -> np.ndarray:
    """Linear map from non-constant coefficients to the vectorized Jacobian.

    Returns A(u) of shape (m*n, (ell-1)*n) such that for every PolyMap f
    over ``basis`` with n outputs::

        vec(jacobian(f, u)) == a_matrix(basis, n, u) @ coeff_vector(f)

    vec is column-major, so rows are ordered with the output index fastest
    (J11, J21, ..., Jn1, J12, ...).  Columns follow coeff_vector order:
    the (ell-1) non-constant coefficients of output 1, then output 2, etc.
    """
    n = check_positive_int(n, "n")
    u = as_float_array(u, "u", ndim=1)
    if u.shape[0] != basis.m:
        raise ValueError(f"u has length {u.shape[0]}, expected {basis.m}")
    m, ell = basis.m, basis.size
    D = basis.derivative_values(u)  # (m, ell)
    A = np.zeros((m * n, (ell - 1) * n))
    for i in range(n):
        # rows i, i+n, i+2n, ... are the entries dfi/du1, dfi/du2, ...
        A[i::n, (ell - 1) * i : (ell - 1) * (i + 1)] = D[:, 1:]
    return A


def coeff_vector(f: PolyMap) -> np.ndarray:
    """Stack the non-constant coefficients output-major into one vector.

    The constant terms are dropped; length is (ell-1)*n.
    """
    return f.coeffs[:, 1:].reshape(-1)


def coeff_insert(basis: MonomialBasis, n: int, values, constants) -> PolyMap:
    """Rebuild a PolyMap from a coeff_vector and the n constant terms."""
    n = check_positive_int(n, "n")
    values = as_float_array(values, "values", ndim=1)
    constants = as_float_array(constants, "constants", ndim=1)
    ell = basis.size
    if values.shape[0] != (ell - 1) * n:
        raise ValueError(
            f"values has length {values.shape[0]}, expected {(ell - 1) * n}"
        )
    if constants.shape[0] != n:
        raise ValueError(f"constants has length {constants.shape[0]}, expected {n}")
    coeffs = np.empty((n, ell))
    coeffs[:, 0] = constants
    coeffs[:, 1:] = values.reshape(n, ell - 1)
    return PolyMap(basis=basis, coeffs=coeffs)


# ---------------------------------------------------------------------------
# Composition of a decoupled model back into basis coefficients
# ---------------------------------------------------------------------------

def _poly_mul(a: dict, b: dict) -> dict:
    out: dict = {}
    for ea, ca in a.items():
        for eb, cb in b.items():
            key = tuple(x + y for x, y in zip(ea, eb))
            out[key] = out.get(key, 0.0) + ca * cb
    return out


def compose_branches(W, V, g_coeffs, basis: MonomialBasis) -> PolyMap:
    """Expand W @ g(V^T u) into coefficients over ``basis``.

    ``g_coeffs`` is a sequence of r one-dimensional arrays, branch j holding
    the coefficients of the univariate polynomial g_j in ascending powers.
    Each g_j must have degree <= basis.d; the composed map then stays inside
    the basis and the expansion is exact.
    """
    W = as_float_array(W, "W", ndim=2)
    V = as_float_array(V, "V", ndim=2)
    n, r = W.shape
    if V.shape != (basis.m, r):
        raise ValueError(f"V has shape {V.shape}, expected {(basis.m, r)}")
    if len(g_coeffs) != r:
        raise ValueError(f"got {len(g_coeffs)} branch polynomials, expected {r}")

    index_of = {tuple(e): j for j, e in enumerate(basis.exponents)}
    coeffs = np.zeros((n, basis.size))
    zero = (0,) * basis.m
    for j in range(r):
        g = as_float_array(g_coeffs[j], f"g[{j}]", ndim=1)
        if g.shape[0] > basis.d + 1:
            raise ValueError(
                f"branch {j} has degree {g.shape[0] - 1}, basis only holds degree {basis.d}"
            )
        # linear form v_j^T u as an exponent->coefficient dict
        lin = {}
        for k in range(basis.m):
            if V[k, j] != 0.0:
                e = [0] * basis.m
                e[k] = 1
                lin[tuple(e)] = V[k, j]
        branch = {zero: g[0]} if g[0] != 0.0 else {}
        power = {zero: 1.0}
        for t in range(1, g.shape[0]):
            power = _poly_mul(power, lin) if lin else {}
            if g[t] == 0.0:
                continue
            for e, c in power.items():
                branch[e] = branch.get(e, 0.0) + g[t] * c
        col = np.zeros(basis.size)
        for e, c in branch.items():
            col[index_of[e]] = c
        coeffs += np.outer(W[:, j], col)
    return PolyMap(basis=basis, coeffs=coeffs)


# ---------------------------------------------------------------------------
# JSON interchange
# ---------------------------------------------------------------------------

def poly_to_dict(f: PolyMap) -> dict:
    return {"m": f.m, "d": f.d, "n": f.n, "coeffs": f.coeffs.tolist()}


def poly_from_dict(data: dict) -> PolyMap:
    for key in ("m", "d", "n", "coeffs"):
        if key not in data:
            raise ValueError(f"polynomial JSON is missing key {key!r}")
    basis = basis_enumerate(data["m"], data["d"])
    rows = data["coeffs"]
    if len(rows) != data["n"]:
        raise ValueError(f"expected {data['n']} coefficient rows, got {len(rows)}")
    for i, row in enumerate(rows):
        if len(row) != basis.size:
            raise ValueError(
                f"coefficient row {i} has length {len(row)}, expected {basis.size}"
            )
    return PolyMap(basis=basis, coeffs=np.array(rows, dtype=float))


def write_json_atomic(path: str, data: dict) -> None:
    """Write JSON via a temp file and rename, so readers never see partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(data, fh, indent=2)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_poly(path: str, f: PolyMap) -> None:
    write_json_atomic(path, poly_to_dict(f))


def load_poly(path: str) -> PolyMap:
    with open(path) as fh:
        return poly_from_dict(json.load(fh))
