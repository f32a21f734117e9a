"""Propagation of coefficient covariance to Jacobian-tensor covariance.

Given the covariance Sigma_f of a polynomial map's non-constant
coefficients, the covariance of the vectorized Jacobian stack is the
congruence A Sigma_f A^T, where A stacks the per-point linearizations
a_matrix(u_k).  Three structural forms are supported:

* element-wise: only the variances (a diagonal matrix),
* slice-wise: one (m*n) x (m*n) block per sampling point,
* dense: the full (m*n*N) x (m*n*N) matrix, which is rank-deficient
  whenever m*n*N exceeds (ell-1)*n and therefore cannot be inverted.

The dense form is kept factored and only materialized for its SVD.  The
SVD split powers the whitening transform (Q below) and the null-space
equations used by the rank-deficient weighted solver.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_float_array, check_positive_int
from .basis import MonomialBasis, a_matrix
from .tensorops import PermutationSpec

__all__ = [
    "CoeffCovariance",
    "JacCovariance",
    "SvdSplit",
    "sigma_elementwise",
    "sigma_slicewise",
    "sigma_dense",
    "svd_split",
    "q_factor",
    "q_transform_solve",
    "nullspace_solve",
    "weight_from",
    "DiagonalWeight",
    "BlockDiagonalWeight",
    "DenseWeight",
    "SplitWeight",
    "load_coeff_covariance",
    "save_coeff_covariance",
]


@dataclass(frozen=True)
class CoeffCovariance:
    """Covariance of the stacked non-constant coefficients (coeff_vector order).

    The input is symmetrized when the asymmetry is within ``sym_tol`` and
    rejected otherwise.  Slightly indefinite inputs (from rounding) are
    rejected unless ``clip_negative_eigenvalues`` is set, in which case the
    matrix is projected onto the PSD cone.
    """

    matrix: np.ndarray
    sym_tol: float = 1e-10
    psd_tol: float = 1e-8
    clip_negative_eigenvalues: bool = False

    def __post_init__(self):
        S = as_float_array(self.matrix, "matrix", ndim=2)
        if S.shape[0] != S.shape[1]:
            raise ValueError(f"covariance must be square, got {S.shape}")
        scale = max(np.abs(S).max(), 1.0)
        asym = np.abs(S - S.T).max()
        if asym > self.sym_tol * scale:
            raise ValueError(
                f"covariance asymmetry {asym:.3g} exceeds tolerance "
                f"{self.sym_tol * scale:.3g}"
            )
        S = 0.5 * (S + S.T)
        eigvals = np.linalg.eigvalsh(S)
        floor = -self.psd_tol * max(eigvals[-1], 0.0)
        if eigvals[0] < floor:
            if not self.clip_negative_eigenvalues:
                raise ValueError(
                    f"covariance is not PSD: min eigenvalue {eigvals[0]:.3g} "
                    f"(max {eigvals[-1]:.3g})"
                )
            vals, vecs = np.linalg.eigh(S)
            S = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
            S = 0.5 * (S + S.T)
        object.__setattr__(self, "matrix", S)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def _a_stack(basis: MonomialBasis, n: int, points: np.ndarray) -> np.ndarray:
    """Stack A(u_k) row blocks for all sampling points, (m*n*N) x ((ell-1)*n)."""
    return np.vstack([a_matrix(basis, n, u) for u in points])


def _check_cov_dims(sigma_f: CoeffCovariance, basis: MonomialBasis, n: int):
    expected = (basis.size - 1) * n
    if sigma_f.dim != expected:
        raise ValueError(
            f"covariance is {sigma_f.dim}x{sigma_f.dim}, expected "
            f"{expected}x{expected} for ell={basis.size}, n={n}"
        )


@dataclass(frozen=True)
class JacCovariance:
    """Covariance of vec(Jacobian tensor) in one of three structural forms.

    kind 'element' stores the (m*n*N,) variance vector, 'slice' stores N
    blocks of shape (m*n, m*n), and 'dense' stores the factored pair
    (A_stack, Sigma_f) so the full product is only formed on demand.
    """

    kind: str
    dims: tuple
    variances: np.ndarray | None = None
    blocks: np.ndarray | None = None
    a_stack: np.ndarray | None = None
    sigma_f: CoeffCovariance | None = None

    def materialize(self) -> np.ndarray:
        """Dense (m*n*N) x (m*n*N) matrix of this covariance."""
        n, m, N = self.dims
        total = n * m * N
        if self.kind == "element":
            return np.diag(self.variances)
        if self.kind == "slice":
            out = np.zeros((total, total))
            mn = m * n
            for k in range(N):
                out[k * mn : (k + 1) * mn, k * mn : (k + 1) * mn] = self.blocks[k]
            return out
        return self.a_stack @ self.sigma_f.matrix @ self.a_stack.T

    def diagonal(self) -> np.ndarray:
        if self.kind == "element":
            return self.variances.copy()
        if self.kind == "slice":
            return np.concatenate([np.diag(b) for b in self.blocks])
        return np.einsum(
            "ij,jk,ik->i", self.a_stack, self.sigma_f.matrix, self.a_stack
        )


def sigma_elementwise(
    sigma_f: CoeffCovariance, basis: MonomialBasis, n: int, points
) -> JacCovariance:
    """Variances of every Jacobian element, ordered like vec(tensor)."""
    points = as_float_array(points, "points", ndim=2)
    _check_cov_dims(sigma_f, basis, n)
    A = _a_stack(basis, n, points)
    variances = np.einsum("ij,jk,ik->i", A, sigma_f.matrix, A)
    # tiny negative values can appear through rounding of PSD inputs
    variances = np.clip(variances, 0.0, None)
    return JacCovariance(
        kind="element", dims=(n, basis.m, points.shape[0]), variances=variances
    )


def sigma_slicewise(
    sigma_f: CoeffCovariance, basis: MonomialBasis, n: int, points
) -> JacCovariance:
    """Per-point Jacobian covariance blocks A(u_k) Sigma_f A(u_k)^T."""
    points = as_float_array(points, "points", ndim=2)
    _check_cov_dims(sigma_f, basis, n)
    blocks = []
    for u in points:
        A = a_matrix(basis, n, u)
        B = A @ sigma_f.matrix @ A.T
        blocks.append(0.5 * (B + B.T))
    return JacCovariance(
        kind="slice", dims=(n, basis.m, points.shape[0]), blocks=np.array(blocks)
    )


def sigma_dense(
    sigma_f: CoeffCovariance, basis: MonomialBasis, n: int, points
) -> JacCovariance:
    """Full covariance of vec(tensor), kept factored as (A_stack, Sigma_f).

    Its rank never exceeds (ell-1)*n, so for enough sampling points the
    materialized matrix is singular by construction.
    """
    points = as_float_array(points, "points", ndim=2)
    _check_cov_dims(sigma_f, basis, n)
    return JacCovariance(
        kind="dense",
        dims=(n, basis.m, points.shape[0]),
        a_stack=_a_stack(basis, n, points),
        sigma_f=sigma_f,
    )


# ---------------------------------------------------------------------------
# SVD split of a (possibly singular) covariance and derived solvers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SvdSplit:
    """SVD of a symmetric PSD matrix split at its numerical rank.

    U1 spans the range (rank columns), U2 the null space, d1 holds the
    retained singular values.  Sigma is recovered as U1 diag(d1) U1^T.
    """

    U1: np.ndarray
    U2: np.ndarray
    d1: np.ndarray
    threshold: float

    @property
    def rank(self) -> int:
        return self.d1.shape[0]

    @property
    def dim(self) -> int:
        return self.U1.shape[0]

    def q_matrix(self) -> np.ndarray:
        """Whitening map Q = diag(d1)^(-1/2) U1^T with Q^T Q = pinv(Sigma)."""
        return self.U1.T / np.sqrt(self.d1)[:, None]


def svd_split(sigma: np.ndarray, rel_threshold: float = 1e-10) -> SvdSplit:
    """Split a symmetric PSD matrix into range and null space by SVD.

    Singular values above ``rel_threshold`` times the largest are kept.
    Raises ValueError when the input is not symmetric.
    """
    S = as_float_array(sigma, "sigma", ndim=2)
    if S.shape[0] != S.shape[1]:
        raise ValueError(f"matrix must be square, got {S.shape}")
    scale = max(np.abs(S).max(), 1.0)
    if np.abs(S - S.T).max() > 1e-8 * scale:
        raise ValueError("matrix is not symmetric")
    S = 0.5 * (S + S.T)
    U, s, _ = np.linalg.svd(S, hermitian=True)
    if s[0] <= 0.0:
        raise ValueError("matrix is identically zero; no usable weight")
    cut = rel_threshold * s[0]
    rank = int(np.sum(s > cut))
    return SvdSplit(U1=U[:, :rank], U2=U[:, rank:], d1=s[:rank], threshold=cut)


def q_factor(split: SvdSplit, perm: PermutationSpec | None = None) -> np.ndarray:
    """Q such that Q^T Q equals the pseudo-inverse of P Sigma P^T.

    With no permutation this is the plain whitener of the split; with one,
    the columns of Q are permuted to match the permuted covariance.
    """
    Q = split.q_matrix()
    if perm is None:
        return Q
    # Q P^T: column p of the result is column index_map[p] of Q
    return Q[:, perm.index_map]


def q_transform_solve(split: SvdSplit, A: np.ndarray, y: np.ndarray):
    """Weighted least squares via whitening: argmin ||y - A x||_W, W = pinv(Sigma).

    Returns (x, rank_of_QA).  Reduces the weighted problem to an ordinary
    least squares solve of (Q A) x = Q y.
    """
    Q = split.q_matrix()
    x, _, rank, _ = np.linalg.lstsq(Q @ A, Q @ y, rcond=None)
    return x, rank


def nullspace_solve(split: SvdSplit, A: np.ndarray, y: np.ndarray):
    """Estimate x from the exactly-satisfied null-space equations U2^T y = U2^T A x.

    For noise confined to the range of Sigma, U2^T annihilates it, so these
    equations hold without error and determine x whenever U2^T A has full
    column rank.  Returns (x, rank_of_U2A).
    """
    M = split.U2.T @ A
    x, _, rank, _ = np.linalg.lstsq(M, split.U2.T @ y, rcond=None)
    return x, rank


# ---------------------------------------------------------------------------
# Weight operators (pseudo-)inverting each covariance form
# ---------------------------------------------------------------------------

class DiagonalWeight:
    """Diagonal weight 1/var for the element-wise covariance."""

    def __init__(self, values: np.ndarray):
        self.values = as_float_array(values, "values", ndim=1)
        if np.any(self.values < 0):
            raise ValueError("weights must be non-negative")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def materialize(self) -> np.ndarray:
        return np.diag(self.values)

    def whitener(self) -> np.ndarray:
        """M with M^T M equal to the weight matrix."""
        return np.diag(np.sqrt(self.values))

    def quadratic(self, residual: np.ndarray) -> float:
        return float(np.sum(self.values * residual**2))


class BlockDiagonalWeight:
    """Block-diagonal weight with per-slice inverse covariance blocks."""

    def __init__(self, blocks: np.ndarray):
        self.blocks = as_float_array(blocks, "blocks", ndim=3)
        self._whitener = None

    @property
    def dim(self) -> int:
        return self.blocks.shape[0] * self.blocks.shape[1]

    def materialize(self) -> np.ndarray:
        size = self.blocks.shape[1]
        out = np.zeros((self.dim, self.dim))
        for k, b in enumerate(self.blocks):
            out[k * size : (k + 1) * size, k * size : (k + 1) * size] = b
        return out

    def whitener(self) -> np.ndarray:
        if self._whitener is None:
            self._whitener = _psd_sqrt(self.materialize())
        return self._whitener

    def quadratic(self, residual: np.ndarray) -> float:
        size = self.blocks.shape[1]
        res = residual.reshape(-1, size)
        return float(np.einsum("ki,kij,kj->", res, self.blocks, res))


class DenseWeight:
    """A full-rank SPD weight matrix given directly."""

    def __init__(self, matrix: np.ndarray):
        M = as_float_array(matrix, "matrix", ndim=2)
        if M.shape[0] != M.shape[1] or np.abs(M - M.T).max() > 1e-10 * max(
            np.abs(M).max(), 1.0
        ):
            raise ValueError("weight must be a symmetric square matrix")
        # Cholesky doubles as the SPD check
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError as exc:
            raise ValueError("weight matrix is not positive definite") from exc
        self.matrix = 0.5 * (M + M.T)
        self._whitener = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def materialize(self) -> np.ndarray:
        return self.matrix.copy()

    def whitener(self) -> np.ndarray:
        if self._whitener is None:
            self._whitener = np.linalg.cholesky(self.matrix).T
        return self._whitener

    def quadratic(self, residual: np.ndarray) -> float:
        return float(residual @ self.matrix @ residual)


class SplitWeight:
    """Rank-deficient weight handled through the SVD split of Sigma.

    The effective weight is pinv(Sigma) = Q^T Q; the null-space basis U2
    supplies the extra equations of the rank-deficient solver.
    """

    def __init__(self, split: SvdSplit, nullspace_scale: float = 1.0):
        self.split = split
        self.nullspace_scale = float(nullspace_scale)

    @property
    def dim(self) -> int:
        return self.split.dim

    def quadratic(self, residual: np.ndarray) -> float:
        return float(np.sum((self.split.q_matrix() @ residual) ** 2))


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    """Factor M = R^T R for symmetric PSD M, via Cholesky with eigh fallback."""
    try:
        return np.linalg.cholesky(M).T
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
        vals = np.clip(vals, 0.0, None)
        return (vecs * np.sqrt(vals)).T


def weight_from(cov: JacCovariance, strict: bool = False):
    """Build the weight operator (pseudo-)inverting a Jacobian covariance.

    Element-wise covariances invert entrywise; zero variances raise in
    strict mode and otherwise receive weight zero with a warning.
    Slice-wise covariances invert per block with a pseudo-inverse fallback
    for singular blocks.  Dense covariances are not inverted here; the
    SVD-split path in the decoupling solver handles them.
    """
    if cov.kind == "element":
        var = cov.variances
        zero = var <= 0.0
        if np.any(zero):
            if strict:
                raise ValueError(
                    f"{int(zero.sum())} zero variances make the weight singular"
                )
            warnings.warn(
                f"{int(zero.sum())} zero variances; their residuals get weight 0",
                stacklevel=2,
            )
        values = np.zeros_like(var)
        values[~zero] = 1.0 / var[~zero]
        return DiagonalWeight(values)
    if cov.kind == "slice":
        inv_blocks = []
        for k, block in enumerate(cov.blocks):
            try:
                inv = np.linalg.inv(block)
                # reject inverses of numerically singular blocks
                if not np.all(np.isfinite(inv)) or np.linalg.cond(block) > 1e12:
                    raise np.linalg.LinAlgError
            except np.linalg.LinAlgError:
                if strict:
                    raise ValueError(f"slice block {k} is singular") from None
                warnings.warn(
                    f"slice block {k} is singular; using its pseudo-inverse",
                    stacklevel=2,
                )
                inv = np.linalg.pinv(block, hermitian=True)
            inv_blocks.append(0.5 * (inv + inv.T))
        return BlockDiagonalWeight(np.array(inv_blocks))
    if cov.kind == "dense":
        return SplitWeight(svd_split(cov.materialize()))
    raise ValueError(f"unknown covariance kind {cov.kind!r}")


# ---------------------------------------------------------------------------
# JSON interchange
# ---------------------------------------------------------------------------

def save_coeff_covariance(path: str, cov: CoeffCovariance) -> None:
    from .basis import write_json_atomic

    write_json_atomic(path, {"order": "coeffvector", "matrix": cov.matrix.tolist()})


def load_coeff_covariance(
    path: str, expected_dim: int | None = None, **kwargs
) -> CoeffCovariance:
    """Load a covariance JSON, optionally checking the dimension.

    ``expected_dim`` should be (ell-1)*n of the paired polynomial file.
    """
    with open(path) as fh:
        data = json.load(fh)
    if data.get("order") != "coeffvector":
        raise ValueError("covariance JSON must declare \"order\": \"coeffvector\"")
    M = np.array(data["matrix"], dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"covariance matrix must be square, got shape {M.shape}")
    if expected_dim is not None and M.shape[0] != expected_dim:
        raise ValueError(
            f"covariance is {M.shape[0]}x{M.shape[0]}, but the polynomial "
            f"requires {expected_dim}x{expected_dim}"
        )
    return CoeffCovariance(M, **kwargs)
