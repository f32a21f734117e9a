"""Dense order-3 tensor kernels: CP reconstruction, unfoldings, permutations.

All vectorizations in this package are column-major; a tensor element
(i, j, k) of an (n, m, N) tensor sits at linear position i + j*n + k*n*m.
Matricizations follow the Kolda-Bader ordering, which makes the identity

    matricize(T, 1) == W @ khatri_rao(H, V).T

hold exactly for T = cpd_reconstruct(W, V, H), and likewise for modes 2
and 3 with khatri_rao(H, W) and khatri_rao(V, W).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_float_array

__all__ = [
    "CpdFactors",
    "PermutationSpec",
    "stack_jacobians",
    "cpd_reconstruct",
    "matricize",
    "khatri_rao",
    "kron",
    "vec",
    "mode_permutation",
]

# Kronecker product: numpy's definition matches the convention used here.
kron = np.kron


@dataclass(frozen=True)
class CpdFactors:
    """Factor matrices of a rank-r CP decomposition of an (n, m, N) tensor."""

    W: np.ndarray  # (n, r)
    V: np.ndarray  # (m, r)
    H: np.ndarray  # (N, r)

    def __post_init__(self):
        W = as_float_array(self.W, "W", ndim=2)
        V = as_float_array(self.V, "V", ndim=2)
        H = as_float_array(self.H, "H", ndim=2)
        if not (W.shape[1] == V.shape[1] == H.shape[1]) or W.shape[1] < 1:
            raise ValueError(
                f"factor column counts differ: {W.shape[1]}, {V.shape[1]}, {H.shape[1]}"
            )
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "H", H)

    @property
    def r(self) -> int:
        return self.W.shape[1]

    @property
    def dims(self) -> tuple:
        return (self.W.shape[0], self.V.shape[0], self.H.shape[0])


def vec(x: np.ndarray) -> np.ndarray:
    """Column-major vectorization of a matrix or tensor."""
    return np.asarray(x).reshape(-1, order="F")


def stack_jacobians(slices) -> np.ndarray:
    """Stack N equal-shaped (n, m) matrices into an (n, m, N) tensor."""
    slices = [as_float_array(s, f"slice {k}", ndim=2) for k, s in enumerate(slices)]
    if not slices:
        raise ValueError("need at least one slice")
    shape = slices[0].shape
    for k, s in enumerate(slices):
        if s.shape != shape:
            raise ValueError(f"slice {k} has shape {s.shape}, expected {shape}")
    return np.stack(slices, axis=2)


def cpd_reconstruct(factors: CpdFactors) -> np.ndarray:
    """Sum of rank-one terms: T[i,j,k] = sum_q W[i,q] V[j,q] H[k,q]."""
    return np.einsum("iq,jq,kq->ijk", factors.W, factors.V, factors.H)


def matricize(T: np.ndarray, mode: int) -> np.ndarray:
    """Mode-n unfolding of an (n, m, N) tensor (Kolda-Bader ordering).

    Element (i, j, k) maps to (i, j + k*m) in mode 1, (j, i + k*n) in
    mode 2 and (k, i + j*n) in mode 3.
    """
    n, m, N = T.shape
    if mode == 1:
        return T.reshape(n, m * N, order="F")
    if mode == 2:
        return np.moveaxis(T, 1, 0).reshape(m, n * N, order="F")
    if mode == 3:
        return np.moveaxis(T, 2, 0).reshape(N, n * m, order="F")
    raise ValueError(f"mode must be 1, 2 or 3, got {mode}")


def khatri_rao(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product of (p, r) and (q, r) matrices."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"column counts differ: {A.shape[1]} vs {B.shape[1]}")
    p, r = A.shape
    q = B.shape[0]
    return (A[:, None, :] * B[None, :, :]).reshape(p * q, r)


@dataclass(frozen=True)
class PermutationSpec:
    """Permutation P aligning vec(T) with vec(matricize(T, mode).T).

    Stored as a gather map: (P x)[p] = x[index_map[p]].  Mode 3 yields the
    identity map.  ``congruence`` applies P S P^T by index gathering, never
    materializing the dense permutation matrix.
    """

    mode: int
    dims: tuple
    index_map: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        """P @ x for a vector of length n*m*N."""
        return np.asarray(x)[self.index_map]

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        """P^T @ x (the inverse permutation)."""
        out = np.empty_like(np.asarray(x))
        out[self.index_map] = x
        return out

    def congruence(self, S: np.ndarray) -> np.ndarray:
        """P @ S @ P^T for a square matrix."""
        return S[np.ix_(self.index_map, self.index_map)]

    def scatter_rows(self, B: np.ndarray) -> np.ndarray:
        """P^T @ B: move row p of B to row index_map[p] of the result."""
        out = np.empty_like(B)
        out[self.index_map] = B
        return out


def mode_permutation(mode: int, dims: tuple) -> PermutationSpec:
    """Build the permutation with P @ vec(T) == vec(matricize(T, mode).T)."""
    n, m, N = dims
    linear = np.arange(n * m * N).reshape(dims, order="F")
    index_map = vec(matricize(linear, mode).T)
    return PermutationSpec(mode=mode, dims=tuple(dims), index_map=index_map)
