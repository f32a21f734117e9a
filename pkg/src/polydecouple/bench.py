"""The two benchmark studies of the weighted decomposition.

The first study decomposes random 2x2x2 tensors under an almost diagonal
SPD weight whose single off-diagonal pair couples tensor elements 2 and
5, and shows that the fit errors of the coupled pair are correlated
while those of an uncoupled pair (3 and 8) are not.

The second study decouples a fixed noisy cubic polynomial four ways
(no weight, element-wise, slice-wise, dense) and compares the resulting
models both in coefficient space and by driving a filtered two-branch
system with a random-phase multisine.  The surrounding low-pass filters
are synthetic stand-ins (first order, poles 0.7 and 0.75): only their
qualitative role matters, and the reported numbers are relative across
methods.
"""

from __future__ import annotations

import csv
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sp_signal

from ._sysid_data import CORR_WEIGHT, F1_COEFFS, F2_COEFFS, sigma_f_matrix
from ._validation import as_float_array, check_positive_int
from .basis import PolyMap, basis_enumerate, coeff_vector, poly_eval_many, write_json_atomic
from .covariance import CoeffCovariance, DenseWeight
from .decouple import AlsConfig, decouple_pipeline, run_wals
from .tensorops import cpd_reconstruct, vec

__all__ = [
    "CorrExperimentSpec",
    "CorrExperimentResult",
    "SysIdSpec",
    "SysIdResult",
    "benchmark_corr_weight",
    "benchmark_polynomial",
    "benchmark_coeff_covariance",
    "multisine",
    "simulate_filtered_system",
    "run_corr_experiment",
    "run_sysid_comparison",
    "write_corr_csv",
    "write_corr_scatter_json",
    "write_sysid_csv",
    "write_sysid_spectra_json",
]

METHODS = ("none", "element", "slice", "dense")


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("POLYDECOUPLE_THREADS", "1")))
    except ValueError:
        return 1


def benchmark_corr_weight() -> np.ndarray:
    """The 8x8 SPD weight with the coupled (2,5) pair, 1-based indexing."""
    return np.array(CORR_WEIGHT)


def benchmark_polynomial() -> PolyMap:
    """The fixed noisy cubic with two inputs and two outputs."""
    basis = basis_enumerate(2, 3)
    coeffs = np.zeros((2, basis.size))
    coeffs[0, 1:] = F1_COEFFS
    coeffs[1, 1:] = F2_COEFFS
    return PolyMap(basis=basis, coeffs=coeffs)


def benchmark_coeff_covariance() -> CoeffCovariance:
    """The 18x18 coefficient covariance of the benchmark polynomial.

    The table is printed at one decimal, which leaves the matrix slightly
    indefinite; negative eigenvalues are clipped to zero on load.
    """
    return CoeffCovariance(
        sigma_f_matrix(), sym_tol=0.15, clip_negative_eigenvalues=True
    )


# ---------------------------------------------------------------------------
# Correlated-error experiment
# ---------------------------------------------------------------------------

@dataclass
class CorrExperimentSpec:
    """Settings of the correlated-error study on random 2x2x2 tensors.

    The solver settings are desk-scale defaults; the source experiment
    does not state the rank or iteration policy it used.
    """

    weight: np.ndarray = field(default_factory=benchmark_corr_weight)
    trials: int = 500
    seed: int = 0
    r: int = 2
    tol_rel_step: float = 1e-7
    max_iters: int = 150
    restarts: int = 1

    def __post_init__(self):
        self.weight = as_float_array(self.weight, "weight", ndim=2)
        if self.weight.shape != (8, 8):
            raise ValueError(f"weight must be 8x8, got {self.weight.shape}")
        # SPD check via Cholesky happens in DenseWeight
        DenseWeight(self.weight)
        check_positive_int(self.trials, "trials")


@dataclass
class CorrExperimentResult:
    errors: np.ndarray  # (trials, 8), columns are e1..e8 in vec order
    rho_correlated: float  # Pearson correlation of (e2, e5)
    rho_uncorrelated: float  # Pearson correlation of (e3, e8)


def run_corr_experiment(spec: CorrExperimentSpec) -> CorrExperimentResult:
    """Decompose random tensors under the coupled weight and record errors.

    Each trial draws a uniform(-1, 1) tensor, fits a rank-r weighted CPD
    (uniform random initialization), and records e_q = t_q - that_q in the
    element numbering of the weight.  Trials run independently; the
    POLYDECOUPLE_THREADS environment variable caps the worker count.
    """
    weight = DenseWeight(spec.weight)
    children = np.random.SeedSequence(spec.seed).spawn(spec.trials)

    def one_trial(child):
        rng = np.random.default_rng(child)
        T = rng.uniform(-1.0, 1.0, (2, 2, 2))
        cfg = AlsConfig(
            r=spec.r,
            tol_rel_step=spec.tol_rel_step,
            max_iters=spec.max_iters,
            restarts=spec.restarts,
            rng_seed=int(child.generate_state(1)[0]),
            init="uniform",
        )
        factors, _ = run_wals(T, weight, cfg)
        return vec(T) - vec(cpd_reconstruct(factors))

    workers = _worker_count()
    errors = np.zeros((spec.trials, 8))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for t, err in enumerate(pool.map(one_trial, children)):
                errors[t] = err
    else:
        for t, child in enumerate(children):
            errors[t] = one_trial(child)

    rho = np.corrcoef(errors, rowvar=False)
    return CorrExperimentResult(
        errors=errors,
        rho_correlated=float(rho[1, 4]),
        rho_uncorrelated=float(rho[2, 7]),
    )


# ---------------------------------------------------------------------------
# Multisine excitation and the filtered two-branch system
# ---------------------------------------------------------------------------

def multisine(lines: int, band, seed: int = 0, n_samples: int = 1024) -> np.ndarray:
    """Random-phase multisine: equal-amplitude cosines on a frequency grid.

    ``band`` is a (low, high) pair of frequencies normalized to the
    sampling rate; the excited bins are ``lines`` DFT lines spread evenly
    across the band.  Each cosine has unit amplitude and an independent
    uniform random phase, so the magnitude spectrum is flat on the
    excited lines and zero elsewhere.
    """
    check_positive_int(lines, "lines")
    check_positive_int(n_samples, "n_samples")
    lo, hi = float(band[0]), float(band[1])
    if not (0.0 <= lo < hi <= 0.5):
        raise ValueError(f"band must lie inside (0, 0.5], got ({lo}, {hi})")
    k_lo = max(1, int(np.ceil(lo * n_samples)))
    k_hi = int(np.floor(hi * n_samples))
    if k_hi < k_lo:
        raise ValueError("band contains no DFT lines at this sample count")
    bins = np.unique(np.round(np.linspace(k_lo, k_hi, lines)).astype(int))
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, bins.size)
    t = np.arange(n_samples)
    return np.cos(2.0 * np.pi * bins[:, None] * t[None, :] / n_samples + phases[:, None]).sum(axis=0)


def _lowpass(x: np.ndarray, pole: float) -> np.ndarray:
    """First-order discrete low-pass with unit DC gain."""
    return sp_signal.lfilter([1.0 - pole], [1.0, -pole], x)


def simulate_filtered_system(evaluate, excitation, input_poles, output_poles,
                             settle: int = 64) -> np.ndarray:
    """Drive input filters, a static two-in two-out map, and output filters.

    ``evaluate`` maps an (S, 2) array of filter outputs to an (S, 2) array
    of nonlinearity outputs; the two filtered branch outputs are summed.
    The first ``settle`` samples (filter transients) are discarded.
    """
    excitation = as_float_array(excitation, "excitation", ndim=1)
    u = np.column_stack([_lowpass(excitation, p) for p in input_poles])
    y = evaluate(u)
    z = sum(_lowpass(y[:, i], p) for i, p in enumerate(output_poles))
    return z[settle:]


# ---------------------------------------------------------------------------
# Four-way weighted decoupling comparison
# ---------------------------------------------------------------------------

@dataclass
class SysIdSpec:
    """Settings of the weighted-versus-unweighted decoupling comparison."""

    r: int = 2
    n_points: int = 50
    seeds: tuple = tuple(range(20))
    tol_rel_step: float = 1e-8
    max_iters: int = 120
    restarts: int = 2
    excitation_lines: int = 12
    excitation_band: tuple = (0.01, 0.12)
    excitation_seed: int = 0
    n_samples: int = 1024
    input_poles: tuple = (0.7, 0.75)
    output_poles: tuple = (0.7, 0.75)

    def __post_init__(self):
        check_positive_int(self.r, "r")
        check_positive_int(self.n_points, "n_points")
        if not self.seeds:
            raise ValueError("need at least one seed")
        for p in tuple(self.input_poles) + tuple(self.output_poles):
            if not abs(p) < 1.0:
                raise ValueError(f"filter pole {p} is unstable")


@dataclass
class SysIdResult:
    methods: tuple
    rms_output_error: dict  # method -> (n_seeds,) array
    coeff_rel_error: dict
    weighted_coeff_error: dict
    models: dict  # method -> DecoupledModel of the first seed
    reference_output: np.ndarray
    error_signals: dict  # method -> output error signal of the first seed

    def summary_rows(self):
        rows = []
        for method in self.methods:
            rows.append(
                {
                    "method": method,
                    "rms_output_error": float(np.mean(self.rms_output_error[method])),
                    "coeff_rel_error": float(np.mean(self.coeff_rel_error[method])),
                    "weighted_coeff_error": float(
                        np.mean(self.weighted_coeff_error[method])
                    ),
                }
            )
        return rows


def run_sysid_comparison(spec: SysIdSpec | None = None) -> SysIdResult:
    """Decouple the benchmark cubic four ways and score each method.

    For every seed the polynomial is decoupled with each weight kind; the
    coefficient errors come from the fit reports and the output error from
    driving the filtered system with a shared multisine excitation.
    """
    spec = spec if spec is not None else SysIdSpec()
    f = benchmark_polynomial()
    sigma_f = benchmark_coeff_covariance()
    excitation = multisine(
        spec.excitation_lines,
        spec.excitation_band,
        seed=spec.excitation_seed,
        n_samples=spec.n_samples,
    )
    reference = simulate_filtered_system(
        lambda U: poly_eval_many(f, U), excitation, spec.input_poles, spec.output_poles
    )

    rms = {m: np.zeros(len(spec.seeds)) for m in METHODS}
    coeff = {m: np.zeros(len(spec.seeds)) for m in METHODS}
    wcoeff = {m: np.zeros(len(spec.seeds)) for m in METHODS}
    models = {}
    error_signals = {}
    for s, seed in enumerate(spec.seeds):
        for method in METHODS:
            cfg = AlsConfig(
                r=spec.r,
                n_points=spec.n_points,
                tol_rel_step=spec.tol_rel_step,
                max_iters=spec.max_iters,
                restarts=spec.restarts,
                rng_seed=int(seed),
                weight_kind=method,
            )
            model, report = decouple_pipeline(f, sigma_f, cfg)
            out = simulate_filtered_system(
                model.evaluate, excitation, spec.input_poles, spec.output_poles
            )
            rms[method][s] = float(np.sqrt(np.mean((out - reference) ** 2)))
            coeff[method][s] = report.coeff_rel_error
            wcoeff[method][s] = report.weighted_coeff_error
            if s == 0:
                models[method] = model
                error_signals[method] = out - reference
    return SysIdResult(
        methods=METHODS,
        rms_output_error=rms,
        coeff_rel_error=coeff,
        weighted_coeff_error=wcoeff,
        models=models,
        reference_output=reference,
        error_signals=error_signals,
    )


# ---------------------------------------------------------------------------
# Machine-readable outputs
# ---------------------------------------------------------------------------

def _write_csv_atomic(path: str, header, rows):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_corr_csv(result: CorrExperimentResult, path: str) -> None:
    """Per-trial error records: trial,e2,e5,e3,e8."""
    rows = [
        [t, e[1], e[4], e[2], e[7]]
        for t, e in enumerate(result.errors)
    ]
    _write_csv_atomic(path, ["trial", "e2", "e5", "e3", "e8"], rows)


def write_corr_scatter_json(result: CorrExperimentResult, path: str) -> None:
    write_json_atomic(
        path,
        {
            "correlated_pair": {
                "x": result.errors[:, 1].tolist(),
                "y": result.errors[:, 4].tolist(),
                "pearson": result.rho_correlated,
            },
            "uncorrelated_pair": {
                "x": result.errors[:, 2].tolist(),
                "y": result.errors[:, 7].tolist(),
                "pearson": result.rho_uncorrelated,
            },
        },
    )


def write_sysid_csv(result: SysIdResult, path: str) -> None:
    """Method comparison table: method,rms_output_error,coeff_rel_error,weighted_coeff_error."""
    rows = [
        [r["method"], r["rms_output_error"], r["coeff_rel_error"], r["weighted_coeff_error"]]
        for r in result.summary_rows()
    ]
    _write_csv_atomic(
        path,
        ["method", "rms_output_error", "coeff_rel_error", "weighted_coeff_error"],
        rows,
    )


def write_sysid_spectra_json(result: SysIdResult, path: str) -> None:
    """Error spectra of the first-seed models: frequency and magnitude in dB."""
    n = result.reference_output.shape[0]
    freq = np.fft.rfftfreq(n)
    data = {"frequency": freq.tolist(), "magnitude_db": {}}
    ref_mag = 20.0 * np.log10(np.abs(np.fft.rfft(result.reference_output)) + 1e-300)
    data["magnitude_db"]["reference"] = ref_mag.tolist()
    for method, err in result.error_signals.items():
        mag = 20.0 * np.log10(np.abs(np.fft.rfft(err)) + 1e-300)
        data["magnitude_db"][method] = mag.tolist()
    write_json_atomic(path, data)
