"""Decoupling of noisy multivariate polynomial maps via weighted tensor decomposition."""

from .basis import (
    MonomialBasis,
    PolyMap,
    a_matrix,
    basis_enumerate,
    coeff_insert,
    coeff_vector,
    compose_branches,
    jacobian,
    load_poly,
    poly_eval,
    poly_eval_many,
    save_poly,
)
from .covariance import (
    CoeffCovariance,
    JacCovariance,
    SvdSplit,
    load_coeff_covariance,
    nullspace_solve,
    q_factor,
    q_transform_solve,
    save_coeff_covariance,
    sigma_dense,
    sigma_elementwise,
    sigma_slicewise,
    svd_split,
    weight_from,
)
from .decouple import (
    AlsConfig,
    DecoupledModel,
    FitReport,
    build_jacobian_tensor,
    decouple_pipeline,
    reconstruct_branches,
    run_wals,
    sample_points,
    weighted_cost,
)
from .estimators import PolynomialDecoupler, WeightedCPD
from .tensorops import (
    CpdFactors,
    cpd_reconstruct,
    khatri_rao,
    matricize,
    mode_permutation,
    stack_jacobians,
    vec,
)

__version__ = "0.1.0"

__all__ = [
    "AlsConfig",
    "CoeffCovariance",
    "CpdFactors",
    "DecoupledModel",
    "FitReport",
    "JacCovariance",
    "MonomialBasis",
    "PolyMap",
    "PolynomialDecoupler",
    "SvdSplit",
    "WeightedCPD",
    "a_matrix",
    "basis_enumerate",
    "build_jacobian_tensor",
    "coeff_insert",
    "coeff_vector",
    "compose_branches",
    "cpd_reconstruct",
    "decouple_pipeline",
    "jacobian",
    "khatri_rao",
    "load_coeff_covariance",
    "load_poly",
    "matricize",
    "mode_permutation",
    "nullspace_solve",
    "poly_eval",
    "poly_eval_many",
    "q_factor",
    "q_transform_solve",
    "reconstruct_branches",
    "run_wals",
    "sample_points",
    "save_coeff_covariance",
    "save_poly",
    "sigma_dense",
    "sigma_elementwise",
    "sigma_slicewise",
    "stack_jacobians",
    "svd_split",
    "vec",
    "weight_from",
    "weighted_cost",
]
