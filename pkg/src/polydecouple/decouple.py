"""Weighted alternating least squares decoupling of polynomial maps.

The decoupling rewrites an m-input, n-output polynomial map f as
W g(V^T u): a linear mix W of r univariate branches g_j applied to
projections V^T u.  The factors come from a (weighted) CP decomposition
of the tensor that stacks the Jacobians of f at N sampling points, and
the branch polynomials are recovered by fitting the third factor's
columns as sampled derivatives and integrating.

Weights enter through the covariance of the Jacobian elements:

* full-rank weights (element-wise, slice-wise, or any SPD matrix) turn
  each ALS subproblem into a weighted least squares solve, handled here
  by whitening with a square root of the weight;
* the dense covariance is rank-deficient, so its pseudo-inverse weight
  alone underdetermines the update.  The solver then stacks the whitened
  equations with exact null-space constraints obtained from the zero
  singular value subspace of the covariance.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from ._validation import as_float_array, check_positive_int
from .basis import (
    MonomialBasis,
    PolyMap,
    compose_branches,
    coeff_vector,
    jacobian,
    poly_eval_many,
    write_json_atomic,
)
from .covariance import (
    CoeffCovariance,
    JacCovariance,
    SplitWeight,
    sigma_dense,
    sigma_elementwise,
    sigma_slicewise,
    svd_split,
    weight_from,
)
from .tensorops import (
    CpdFactors,
    PermutationSpec,
    cpd_reconstruct,
    khatri_rao,
    matricize,
    mode_permutation,
    stack_jacobians,
    vec,
)

__all__ = [
    "AlsConfig",
    "FitReport",
    "DecoupledModel",
    "sample_points",
    "build_jacobian_tensor",
    "als_update_unweighted",
    "als_update_weighted_fullrank",
    "als_update_weighted_dense",
    "weighted_cost",
    "run_wals",
    "reconstruct_branches",
    "decouple_pipeline",
]

WEIGHT_KINDS = ("none", "element", "slice", "dense")


@dataclass
class AlsConfig:
    """Settings of the alternating least squares decoupling run.

    ``n_points`` defaults to ten times the basis size when left None.
    ``weight_kind`` selects which covariance structure drives the weight;
    'none' runs the plain unweighted decomposition.
    """

    r: int = 1
    n_points: int | None = None
    tol_rel_step: float = 1e-8
    max_iters: int = 500
    restarts: int = 5
    rng_seed: int = 0
    weight_kind: str = "none"
    sampling: str = "normal"
    init: str = "normal"
    line_search: bool = True
    nullspace_scale: float = 1.0
    dense_rank_tol: float = 1e-10

    def __post_init__(self):
        check_positive_int(self.r, "r")
        if self.n_points is not None:
            check_positive_int(self.n_points, "n_points")
        if not self.tol_rel_step >= 0.0:
            raise ValueError("tol_rel_step must be >= 0")
        check_positive_int(self.max_iters, "max_iters")
        check_positive_int(self.restarts, "restarts")
        if self.weight_kind not in WEIGHT_KINDS:
            raise ValueError(f"weight_kind must be one of {WEIGHT_KINDS}")
        if self.sampling not in ("normal", "uniform"):
            raise ValueError("sampling must be 'normal' or 'uniform'")
        if self.init not in ("normal", "uniform"):
            raise ValueError("init must be 'normal' or 'uniform'")


@dataclass
class FitReport:
    """Diagnostics of one decoupling run."""

    iterations: int = 0
    final_cost: float = math.nan
    final_unweighted_cost: float = math.nan
    rel_step: float = math.nan
    exit_reason: str = ""
    restart_costs: list = field(default_factory=list)
    cost_trace: list = field(default_factory=list)
    rank_deficient_updates: int = 0
    weight_kind: str = "none"
    config: dict = field(default_factory=dict)
    coeff_rel_error: float | None = None
    weighted_coeff_error: float | None = None
    constants_abs_error: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DecoupledModel:
    """The fitted decoupled representation u -> W g(V^T u)."""

    W: np.ndarray  # (n, r)
    V: np.ndarray  # (m, r)
    g: list  # r coefficient arrays, ascending powers, constant included

    def __post_init__(self):
        object.__setattr__(self, "W", as_float_array(self.W, "W", ndim=2))
        object.__setattr__(self, "V", as_float_array(self.V, "V", ndim=2))
        object.__setattr__(
            self, "g", [as_float_array(gj, f"g[{j}]", ndim=1) for j, gj in enumerate(self.g)]
        )
        if len(self.g) != self.W.shape[1] or self.V.shape[1] != self.W.shape[1]:
            raise ValueError("branch counts of W, V and g are inconsistent")

    @property
    def r(self) -> int:
        return self.W.shape[1]

    def evaluate(self, points) -> np.ndarray:
        """Evaluate the decoupled map at each row of ``points``; shape (N, n)."""
        U = as_float_array(points, "points", ndim=2)
        X = U @ self.V
        Z = np.column_stack(
            [np.polynomial.polynomial.polyval(X[:, j], self.g[j]) for j in range(self.r)]
        )
        return Z @ self.W.T

    def compose(self, basis: MonomialBasis) -> PolyMap:
        """Expand the decoupled map into coefficients over ``basis``."""
        return compose_branches(self.W, self.V, self.g, basis)

    def to_dict(self, report: FitReport | None = None) -> dict:
        data = {
            "W": self.W.tolist(),
            "V": self.V.tolist(),
            "g": [gj.tolist() for gj in self.g],
        }
        if report is not None:
            data["report"] = report.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "DecoupledModel":
        return cls(
            W=np.array(data["W"], dtype=float),
            V=np.array(data["V"], dtype=float),
            g=[np.array(gj, dtype=float) for gj in data["g"]],
        )

    def save(self, path: str, report: FitReport | None = None) -> None:
        write_json_atomic(path, self.to_dict(report))


# ---------------------------------------------------------------------------
# Sampling and tensor assembly
# ---------------------------------------------------------------------------

def sample_points(m: int, n_points: int, sampling: str = "normal", seed: int = 0):
    """Draw the Jacobian sampling points, (n_points, m)."""
    check_positive_int(m, "m")
    check_positive_int(n_points, "n_points")
    rng = np.random.default_rng(seed)
    if sampling == "normal":
        return rng.standard_normal((n_points, m))
    if sampling == "uniform":
        return rng.uniform(-1.0, 1.0, (n_points, m))
    raise ValueError("sampling must be 'normal' or 'uniform'")


def build_jacobian_tensor(f: PolyMap, points) -> np.ndarray:
    """Stack jacobian(f, u_k) over all sampling points into (n, m, N)."""
    points = as_float_array(points, "points", ndim=2)
    return stack_jacobians([jacobian(f, u) for u in points])


# ---------------------------------------------------------------------------
# Factor updates
# ---------------------------------------------------------------------------

def _mode_parts(factors: CpdFactors, mode: int):
    """Khatri-Rao matrix and repetition count of the block design for a mode."""
    if mode == 1:
        return khatri_rao(factors.H, factors.V), factors.W.shape[0]
    if mode == 2:
        return khatri_rao(factors.H, factors.W), factors.V.shape[0]
    if mode == 3:
        return khatri_rao(factors.V, factors.W), factors.H.shape[0]
    raise ValueError(f"mode must be 1, 2 or 3, got {mode}")


def _design_in_tensor_order(K: np.ndarray, reps: int, perm: PermutationSpec):
    """Rows of blkdiag(K, ..., K) scattered back into vec(tensor) ordering."""
    return perm.scatter_rows(np.kron(np.eye(reps), K))


def _replace(factors: CpdFactors, mode: int, F: np.ndarray) -> CpdFactors:
    if mode == 1:
        return CpdFactors(F, factors.V, factors.H)
    if mode == 2:
        return CpdFactors(factors.W, F, factors.H)
    return CpdFactors(factors.W, factors.V, F)


def als_update_unweighted(T: np.ndarray, factors: CpdFactors, mode: int):
    """Exact least squares update of one factor, others fixed.

    Returns (new_factor, rank_deficient).  A rank-deficient Khatri-Rao
    design falls back to the minimum-norm solution.
    """
    K, _ = _mode_parts(factors, mode)
    sol, _, rank, _ = np.linalg.lstsq(K, matricize(T, mode).T, rcond=None)
    return sol.T, rank < K.shape[1]


def als_update_weighted_fullrank(
    T: np.ndarray, factors: CpdFactors, mode: int, weight, perm: PermutationSpec
):
    """Weighted least squares update of one factor under a full-rank weight.

    ``weight`` is a DiagonalWeight, BlockDiagonalWeight or DenseWeight in
    vec(tensor) ordering; the permutation aligning it with the unfolded
    subproblem is supplied by ``perm`` and applied implicitly.  Whitening
    by a square root of the weight reduces the subproblem to an ordinary
    least squares solve; singular designs fall back to the minimum-norm
    solution.  Returns (new_factor, rank_deficient).
    """
    K, reps = _mode_parts(factors, mode)
    C = _design_in_tensor_order(K, reps, perm)
    M = weight.whitener()
    x, _, rank, _ = np.linalg.lstsq(M @ C, M @ vec(T), rcond=None)
    return x.reshape(-1, reps, order="F").T, rank < C.shape[1]


def als_update_weighted_dense(
    T: np.ndarray,
    factors: CpdFactors,
    mode: int,
    split,
    perm: PermutationSpec,
    nullspace_scale: float = 1.0,
):
    """Factor update under a rank-deficient (dense covariance) weight.

    Solves, in one stacked least squares problem, the whitened equations
    Q C x = Q vec(T) together with the null-space constraints
    U2^T C x = U2^T vec(T), where C is the block Khatri-Rao design in
    vec(tensor) ordering and (Q, U2) come from the SVD split of the dense
    covariance.  Returns (new_factor, rank_deficient).
    """
    K, reps = _mode_parts(factors, mode)
    C = _design_in_tensor_order(K, reps, perm)
    y = vec(T)
    Q = split.q_matrix()
    top = Q @ C
    top_rhs = Q @ y
    if split.U2.shape[1]:
        bottom = nullspace_scale * (split.U2.T @ C)
        bottom_rhs = nullspace_scale * (split.U2.T @ y)
        A = np.vstack([top, bottom])
        b = np.concatenate([top_rhs, bottom_rhs])
    else:
        A, b = top, top_rhs
    x, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    return x.reshape(-1, reps, order="F").T, rank < C.shape[1]


def weighted_cost(T: np.ndarray, factors: CpdFactors, weight=None) -> float:
    """Cost of the CP fit: plain, weighted, or Q-seminorm residual.

    ``weight`` may be None, a JacCovariance (converted on the fly), or a
    weight operator.  For the rank-deficient dense weight the value is the
    seminorm induced by the pseudo-inverse covariance.
    """
    residual = vec(T - cpd_reconstruct(factors))
    if weight is None:
        return float(residual @ residual)
    if isinstance(weight, JacCovariance):
        weight = weight_from(weight)
    return weight.quadratic(residual)


# ---------------------------------------------------------------------------
# The iteration
# ---------------------------------------------------------------------------

def _factor_norm(factors: CpdFactors) -> float:
    return math.sqrt(
        np.linalg.norm(factors.W) ** 2
        + np.linalg.norm(factors.V) ** 2
        + np.linalg.norm(factors.H) ** 2
    )


def _step_size(new: CpdFactors, old: CpdFactors) -> float:
    num = math.sqrt(
        np.linalg.norm(new.W - old.W) ** 2
        + np.linalg.norm(new.V - old.V) ** 2
        + np.linalg.norm(new.H - old.H) ** 2
    )
    den = _factor_norm(new)
    return num / den if den > 0 else math.inf


def _random_factors(dims, r, rng, init: str) -> CpdFactors:
    if init == "normal":
        draw = lambda shape: rng.standard_normal(shape)
    else:
        draw = lambda shape: rng.uniform(0.0, 1.0, shape)
    n, m, N = dims
    return CpdFactors(draw((n, r)), draw((m, r)), draw((N, r)))


class _DivergedError(RuntimeError):
    """Internal marker: a factor update produced non-finite values."""


def _balance_columns(factors: CpdFactors) -> CpdFactors:
    """Equalize the three norms of each rank-1 term, leaving it unchanged.

    Removes the scaling indeterminacy drift between sweeps so that the
    relative-step stopping criterion can settle; the reconstruction and
    therefore the cost are untouched.
    """
    W, V, H = factors.W.copy(), factors.V.copy(), factors.H.copy()
    for q in range(factors.r):
        norms = np.array(
            [np.linalg.norm(W[:, q]), np.linalg.norm(V[:, q]), np.linalg.norm(H[:, q])]
        )
        if not np.all(np.isfinite(norms)) or np.any(norms < 1e-300):
            continue
        target = norms.prod() ** (1.0 / 3.0)
        W[:, q] *= target / norms[0]
        V[:, q] *= target / norms[1]
        H[:, q] *= target / norms[2]
    return CpdFactors(W, V, H)


def run_wals(T: np.ndarray, weight=None, config: AlsConfig | None = None,
             init_factors: CpdFactors | None = None):
    """Best-of-restarts weighted alternating least squares CP fit.

    ``weight`` is None, a JacCovariance, or a prepared weight operator
    (including SplitWeight for the rank-deficient dense path).  When
    ``init_factors`` is given it seeds the first restart instead of a
    random draw.  Returns (CpdFactors, FitReport).
    """
    T = as_float_array(T, "T", ndim=3)
    cfg = config if config is not None else AlsConfig()
    if isinstance(weight, JacCovariance):
        weight = weight_from(weight)

    dims = T.shape
    perms = {mode: mode_permutation(mode, dims) for mode in (1, 2, 3)}
    dense_split = weight.split if isinstance(weight, SplitWeight) else None
    cost_weight = weight

    def update(factors: CpdFactors, mode: int):
        if weight is None:
            return als_update_unweighted(T, factors, mode)
        if dense_split is not None:
            return als_update_weighted_dense(
                T, factors, mode, dense_split, perms[mode], weight.nullspace_scale
            )
        return als_update_weighted_fullrank(T, factors, mode, weight, perms[mode])

    def sweep(factors: CpdFactors):
        flags = 0
        for mode in (1, 2, 3):
            F, deficient = update(factors, mode)
            if not np.all(np.isfinite(F)):
                raise _DivergedError
            flags += int(deficient)
            factors = _replace(factors, mode, F)
        return factors, flags

    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.restarts)
    best = None
    restart_costs = []
    for restart in range(cfg.restarts):
        rng = np.random.default_rng(seeds[restart])
        if restart == 0 and init_factors is not None:
            factors = init_factors
        else:
            factors = _random_factors(dims, cfg.r, rng, cfg.init)
        factors = _balance_columns(factors)
        trace = [weighted_cost(T, factors, cost_weight)]
        rank_flags = 0
        exit_reason = "max_iters"
        rel_step = math.inf
        iters = 0
        previous = None
        beta = 1.0
        for iteration in range(1, cfg.max_iters + 1):
            start = factors
            try:
                swept, flags = sweep(factors)
            except _DivergedError:
                trace.append(math.inf)
                iters = iteration
                exit_reason = "diverged"
                break
            cost = weighted_cost(T, swept, cost_weight)
            if cfg.line_search and previous is not None:
                # momentum extrapolation with accept-if-better, which keeps
                # the full-rank cost descent exact while escaping the slow
                # "swamp" regime of plain alternating updates
                extrapolated = CpdFactors(
                    factors.W + beta * (factors.W - previous.W),
                    factors.V + beta * (factors.V - previous.V),
                    factors.H + beta * (factors.H - previous.H),
                )
                try:
                    swept_ex, flags_ex = sweep(extrapolated)
                    cost_ex = weighted_cost(T, swept_ex, cost_weight)
                except _DivergedError:
                    cost_ex = math.inf
                if np.isfinite(cost_ex) and cost_ex < cost:
                    swept, cost, flags = swept_ex, cost_ex, flags_ex
                    beta = min(beta * 2.0, 256.0)
                else:
                    beta = max(beta / 2.0, 1.0)
            factors = _balance_columns(swept)
            rank_flags += flags
            trace.append(cost)
            iters = iteration
            rel_step = _step_size(factors, start)
            previous = start
            if not np.isfinite(cost):
                exit_reason = "diverged"
                break
            if rel_step < cfg.tol_rel_step:
                exit_reason = "tolerance"
                break
        final_cost = trace[-1]
        restart_costs.append(final_cost)
        if not np.isfinite(final_cost):
            continue
        if best is None or final_cost < best[0]:
            best = (final_cost, factors, iters, rel_step, exit_reason, trace, rank_flags)

    if best is None:
        raise RuntimeError(
            f"all {cfg.restarts} restarts diverged (costs: {restart_costs}); "
            "the tensor or weight is likely ill-conditioned"
        )
    final_cost, factors, iters, rel_step, exit_reason, trace, rank_flags = best
    report = FitReport(
        iterations=iters,
        final_cost=final_cost,
        final_unweighted_cost=weighted_cost(T, factors, None),
        rel_step=rel_step,
        exit_reason=exit_reason,
        restart_costs=restart_costs,
        cost_trace=trace,
        rank_deficient_updates=rank_flags,
        weight_kind=cfg.weight_kind,
        config=asdict(cfg),
    )
    return factors, report


# ---------------------------------------------------------------------------
# Branch reconstruction and the full pipeline
# ---------------------------------------------------------------------------

def reconstruct_branches(
    factors: CpdFactors, f: PolyMap, points, degree: int | None = None
) -> DecoupledModel:
    """Recover the univariate branch polynomials from the CP factors.

    For branch j the third-factor column holds sampled derivative values
    g_j'(v_j^T u_k); a degree-(d-1) polynomial is fitted to them over the
    projected abscissae, integrated analytically, and the integration
    constants are then determined jointly by least squares against the
    function values of f at the sampling points.

    A branch whose projected abscissae are degenerate (projection column
    numerically zero) cannot carry a univariate fit; it is dropped with a
    warning rather than producing a spurious polynomial.
    """
    points = as_float_array(points, "points", ndim=2)
    d = f.d if degree is None else check_positive_int(degree, "degree")
    W, V, H = factors.W, factors.V, factors.H
    N = points.shape[0]
    if H.shape[0] != N:
        raise ValueError(f"H has {H.shape[0]} rows but there are {N} points")

    g = []
    kept = []
    for j in range(factors.r):
        x = points @ V[:, j]
        spread = np.ptp(x)
        if spread <= 1e-12 * (1.0 + np.abs(x).max()):
            warnings.warn(
                f"branch {j} has degenerate abscissae (projection column is "
                "numerically zero) and was dropped",
                stacklevel=2,
            )
            continue
        if np.unique(np.round(x, 12)).size < d + 1:
            raise ValueError(
                f"branch {j} has fewer than {d + 1} distinct abscissae; "
                "increase the number of sampling points"
            )
        vand = np.polynomial.polynomial.polyvander(x, d - 1)
        if np.linalg.cond(vand) > 1e12:
            raise RuntimeError(
                f"branch {j} Vandermonde system is ill-conditioned; "
                "use more sampling points or a lower degree"
            )
        deriv, *_ = np.linalg.lstsq(vand, H[:, j], rcond=None)
        g.append(np.polynomial.polynomial.polyint(deriv))
        kept.append(j)

    if not kept:
        raise RuntimeError("all branches have degenerate abscissae")
    W, V = W[:, kept], V[:, kept]

    # joint least squares for the surviving integration constants
    X = points @ V
    Z = np.column_stack(
        [np.polynomial.polynomial.polyval(X[:, j], g[j]) for j in range(len(kept))]
    )
    residual = poly_eval_many(f, points) - Z @ W.T
    kappa, *_ = np.linalg.lstsq(np.tile(W, (N, 1)), residual.reshape(-1), rcond=None)
    for j in range(len(kept)):
        g[j] = g[j].copy()
        g[j][0] += kappa[j]
    return DecoupledModel(W=W, V=V, g=g)


def _build_weight(f: PolyMap, sigma_f: CoeffCovariance | None, points, cfg: AlsConfig):
    if cfg.weight_kind == "none":
        return None
    if sigma_f is None:
        raise ValueError(
            f"weight_kind={cfg.weight_kind!r} requires a coefficient covariance"
        )
    if cfg.weight_kind == "element":
        return weight_from(sigma_elementwise(sigma_f, f.basis, f.n, points))
    if cfg.weight_kind == "slice":
        return weight_from(sigma_slicewise(sigma_f, f.basis, f.n, points))
    cov = sigma_dense(sigma_f, f.basis, f.n, points)
    split = svd_split(cov.materialize(), rel_threshold=cfg.dense_rank_tol)
    return SplitWeight(split, nullspace_scale=cfg.nullspace_scale)


def decouple_pipeline(
    f: PolyMap, sigma_f: CoeffCovariance | None = None, config: AlsConfig | None = None
):
    """Run the full decoupling: sample, stack, weight, decompose, reconstruct.

    Returns (DecoupledModel, FitReport).  The report carries the
    coefficient-space error of the composed model against f, plus the
    covariance-weighted error when a coefficient covariance is given.
    """
    cfg = config if config is not None else AlsConfig()
    n_points = cfg.n_points if cfg.n_points is not None else 10 * f.basis.size
    points = sample_points(f.m, n_points, cfg.sampling, cfg.rng_seed)
    T = build_jacobian_tensor(f, points)
    weight = _build_weight(f, sigma_f, points, cfg)
    factors, report = run_wals(T, weight, cfg)
    model = reconstruct_branches(factors, f, points)

    composed = model.compose(f.basis)
    delta = coeff_vector(composed) - coeff_vector(f)
    ref = np.linalg.norm(coeff_vector(f))
    report.coeff_rel_error = float(np.linalg.norm(delta) / ref) if ref > 0 else float(
        np.linalg.norm(delta)
    )
    report.constants_abs_error = float(
        np.linalg.norm(composed.coeffs[:, 0] - f.coeffs[:, 0])
    )
    if sigma_f is not None:
        W_f = np.linalg.pinv(sigma_f.matrix, hermitian=True)
        report.weighted_coeff_error = float(np.sqrt(delta @ W_f @ delta))
    return model, report
