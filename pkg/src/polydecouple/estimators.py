"""Scikit-learn style estimator wrappers around the decoupling pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import as_float_array
from .basis import PolyMap
from .covariance import CoeffCovariance
from .decouple import AlsConfig, decouple_pipeline, run_wals

__all__ = ["PolynomialDecoupler", "WeightedCPD"]


class PolynomialDecoupler(BaseEstimator):
    """Fit a decoupled representation W g(V^T u) to a polynomial map.

    Parameters follow the pipeline configuration: ``r`` is the branch
    count, ``weight`` one of 'none', 'element', 'slice', 'dense' (the
    last three need a coefficient covariance at fit time).

    After ``fit`` the attributes ``W_``, ``V_`` and ``g_`` hold the mixing
    matrices and branch polynomial coefficients, ``model_`` the decoupled
    model and ``report_`` the fit diagnostics.
    """

    def __init__(
        self,
        r: int = 1,
        weight: str = "none",
        n_points: int | None = None,
        tol: float = 1e-8,
        max_iters: int = 500,
        restarts: int = 5,
        random_state: int = 0,
        sampling: str = "normal",
        nullspace_scale: float = 1.0,
        dense_rank_tol: float = 1e-10,
    ):
        self.r = r
        self.weight = weight
        self.n_points = n_points
        self.tol = tol
        self.max_iters = max_iters
        self.restarts = restarts
        self.random_state = random_state
        self.sampling = sampling
        self.nullspace_scale = nullspace_scale
        self.dense_rank_tol = dense_rank_tol

    def _config(self) -> AlsConfig:
        return AlsConfig(
            r=self.r,
            n_points=self.n_points,
            tol_rel_step=self.tol,
            max_iters=self.max_iters,
            restarts=self.restarts,
            rng_seed=self.random_state,
            weight_kind=self.weight,
            sampling=self.sampling,
            nullspace_scale=self.nullspace_scale,
            dense_rank_tol=self.dense_rank_tol,
        )

    def fit(self, poly: PolyMap, cov: CoeffCovariance | None = None):
        """Decouple ``poly``, optionally weighting by a coefficient covariance."""
        if not isinstance(poly, PolyMap):
            raise TypeError("fit expects a PolyMap")
        self.model_, self.report_ = decouple_pipeline(poly, cov, self._config())
        self.W_ = self.model_.W
        self.V_ = self.model_.V
        self.g_ = self.model_.g
        return self

    def predict(self, U) -> np.ndarray:
        """Evaluate the fitted decoupled map at each row of ``U``."""
        if not hasattr(self, "model_"):
            raise NotFittedError("PolynomialDecoupler is not fitted yet")
        return self.model_.evaluate(U)

    def score(self, poly: PolyMap | None = None) -> float:
        """Negative coefficient-space relative error of the last fit."""
        if not hasattr(self, "report_"):
            raise NotFittedError("PolynomialDecoupler is not fitted yet")
        return -self.report_.coeff_rel_error


class WeightedCPD(BaseEstimator):
    """Weighted canonical polyadic decomposition of an order-3 tensor.

    ``fit(T, weight=...)`` accepts None (plain CP), a JacCovariance, or a
    prepared weight operator.  Fitted factor matrices land in ``W_``,
    ``V_`` and ``H_``; diagnostics in ``report_``.
    """

    def __init__(
        self,
        rank: int = 1,
        tol: float = 1e-8,
        max_iters: int = 500,
        restarts: int = 5,
        random_state: int = 0,
        init: str = "normal",
    ):
        self.rank = rank
        self.tol = tol
        self.max_iters = max_iters
        self.restarts = restarts
        self.random_state = random_state
        self.init = init

    def fit(self, T, weight=None):
        T = as_float_array(T, "T", ndim=3)
        config = AlsConfig(
            r=self.rank,
            tol_rel_step=self.tol,
            max_iters=self.max_iters,
            restarts=self.restarts,
            rng_seed=self.random_state,
            init=self.init,
        )
        self.factors_, self.report_ = run_wals(T, weight, config)
        self.W_ = self.factors_.W
        self.V_ = self.factors_.V
        self.H_ = self.factors_.H
        return self

    def reconstruct(self) -> np.ndarray:
        """The fitted sum of rank-one terms as a dense tensor."""
        if not hasattr(self, "factors_"):
            raise NotFittedError("WeightedCPD is not fitted yet")
        from .tensorops import cpd_reconstruct

        return cpd_reconstruct(self.factors_)
