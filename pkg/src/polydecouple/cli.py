"""Command-line front end: synthesis, decoupling, and the two experiments.

Exit codes: 0 when the decomposition stopped on the step tolerance, 2 when
it stopped on the iteration cap, 1 on any error.  Scripted sweeps can use
this to tell convergence trouble from hard failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .basis import (
    basis_enumerate,
    compose_branches,
    load_poly,
    save_poly,
    write_json_atomic,
)
from .bench import (
    CorrExperimentSpec,
    SysIdSpec,
    run_corr_experiment,
    run_sysid_comparison,
    write_corr_csv,
    write_corr_scatter_json,
    write_sysid_csv,
    write_sysid_spectra_json,
)
from .covariance import load_coeff_covariance
from .decouple import AlsConfig, DecoupledModel, decouple_pipeline

CONFIG_FIELDS = (
    "r",
    "n_points",
    "tol_rel_step",
    "max_iters",
    "restarts",
    "rng_seed",
    "weight_kind",
    "sampling",
    "nullspace_scale",
)


def _build_config(args) -> AlsConfig:
    """Assemble the run configuration: CLI flag > config file > default."""
    values = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(CONFIG_FIELDS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    overrides = {
        "r": args.r,
        "n_points": args.n_points,
        "tol_rel_step": args.tol,
        "max_iters": args.max_iters,
        "restarts": args.restarts,
        "rng_seed": args.seed,
        "weight_kind": getattr(args, "weight", None),
        "sampling": args.sampling,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    return AlsConfig(**values)


def _add_config_flags(parser, include_weight=True):
    parser.add_argument("--r", type=int, default=None, help="branch count")
    parser.add_argument("--n-points", dest="n_points", type=int, default=None,
                        help="number of Jacobian sampling points")
    parser.add_argument("--tol", type=float, default=None,
                        help="relative step tolerance")
    parser.add_argument("--max-iters", dest="max_iters", type=int, default=None)
    parser.add_argument("--restarts", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--sampling", choices=("normal", "uniform"), default=None)
    parser.add_argument("--config", default=None,
                        help="JSON file with configuration fields")
    if include_weight:
        parser.add_argument(
            "--weight", choices=("none", "element", "slice", "dense"), default=None
        )


def cmd_synth(args) -> int:
    """Write an exactly decoupled random polynomial plus its ground truth."""
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    basis = basis_enumerate(args.m, args.d)
    W = rng.standard_normal((args.n, args.r))
    while True:
        V = rng.standard_normal((args.m, args.r))
        V /= np.linalg.norm(V, axis=0)
        separated = all(
            abs(V[:, a] @ V[:, b]) < 0.95
            for a in range(args.r)
            for b in range(a + 1, args.r)
        )
        if separated:
            break
    g = [rng.standard_normal(args.d + 1) for _ in range(args.r)]
    f = compose_branches(W, V, g, basis)
    save_poly(args.out + ".poly.json", f)
    truth = DecoupledModel(W=W, V=V, g=g)
    truth.save(args.out + ".truth.json")
    print(f"wrote {args.out}.poly.json and {args.out}.truth.json")
    return 0


def cmd_decouple(args) -> int:
    cfg = _build_config(args)
    f = load_poly(args.poly)
    sigma_f = None
    if args.cov is not None:
        expected = (f.basis.size - 1) * f.n
        sigma_f = load_coeff_covariance(
            args.cov, expected_dim=expected, sym_tol=args.cov_sym_tol,
            clip_negative_eigenvalues=args.cov_clip,
        )
    elif cfg.weight_kind != "none":
        raise ValueError(
            f"weight_kind={cfg.weight_kind!r} needs a covariance file (--cov)"
        )
    model, report = decouple_pipeline(f, sigma_f, cfg)
    model.save(args.out, report)
    print(
        f"wrote {args.out}: exit={report.exit_reason} iters={report.iterations} "
        f"coeff_rel_error={report.coeff_rel_error:.3e}"
    )
    return 0 if report.exit_reason == "tolerance" else 2


def cmd_corr_exp(args) -> int:
    spec_kwargs = {}
    if args.trials is not None:
        spec_kwargs["trials"] = args.trials
    if args.seed is not None:
        spec_kwargs["seed"] = args.seed
    if args.spec is not None:
        with open(args.spec) as fh:
            data = json.load(fh)
        if "weight" in data:
            data["weight"] = np.array(data["weight"], dtype=float)
        data.update(spec_kwargs)
        spec = CorrExperimentSpec(**data)
    else:
        spec = CorrExperimentSpec(**spec_kwargs)
    result = run_corr_experiment(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    write_corr_csv(result, os.path.join(args.out_dir, "corr_trials.csv"))
    write_corr_scatter_json(result, os.path.join(args.out_dir, "corr_scatter.json"))
    print(
        f"rho(e2,e5)={result.rho_correlated:+.4f} "
        f"rho(e3,e8)={result.rho_uncorrelated:+.4f} "
        f"({spec.trials} trials)"
    )
    return 0


def cmd_sysid_demo(args) -> int:
    kwargs = {}
    if args.n_seeds is not None:
        kwargs["seeds"] = tuple(range(args.n_seeds))
    spec = SysIdSpec(**kwargs)
    result = run_sysid_comparison(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    write_sysid_csv(result, os.path.join(args.out_dir, "sysid_methods.csv"))
    write_sysid_spectra_json(
        result, os.path.join(args.out_dir, "sysid_spectra.json")
    )
    for row in result.summary_rows():
        print(
            f"{row['method']:8s} rms_output_error={row['rms_output_error']:.4f} "
            f"weighted_coeff_error={row['weighted_coeff_error']:.4f}"
        )
    return 0


class _Parser(argparse.ArgumentParser):
    # exit code 2 is reserved for the iteration-cap exit; usage errors are 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="polydecouple",
        description="Decouple noisy multivariate polynomials via weighted tensor decomposition",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate an exactly decoupled polynomial")
    p_synth.add_argument("--m", type=int, required=True)
    p_synth.add_argument("--n", type=int, required=True)
    p_synth.add_argument("--d", type=int, required=True)
    p_synth.add_argument("--r", type=int, required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True, help="output path prefix")
    p_synth.set_defaults(func=cmd_synth)

    p_dec = sub.add_parser("decouple", help="decouple a polynomial JSON file")
    p_dec.add_argument("poly", help="polynomial JSON path")
    p_dec.add_argument("--cov", default=None, help="coefficient covariance JSON path")
    p_dec.add_argument("--cov-sym-tol", type=float, default=1e-10,
                       help="symmetry tolerance when loading the covariance")
    p_dec.add_argument("--cov-clip", action="store_true",
                       help="clip negative covariance eigenvalues instead of rejecting")
    p_dec.add_argument("--out", required=True, help="model JSON output path")
    _add_config_flags(p_dec)
    p_dec.set_defaults(func=cmd_decouple)

    p_corr = sub.add_parser("corr-exp", help="correlated-error experiment")
    p_corr.add_argument("--spec", default=None, help="JSON spec file (optional)")
    p_corr.add_argument("--trials", type=int, default=None)
    p_corr.add_argument("--seed", type=int, default=None)
    p_corr.add_argument("--out-dir", required=True)
    p_corr.set_defaults(func=cmd_corr_exp)

    p_sys = sub.add_parser("sysid-demo", help="weighted-vs-unweighted comparison")
    p_sys.add_argument("--n-seeds", type=int, default=None,
                       help="number of decoupling seeds (default 20)")
    p_sys.add_argument("--out-dir", required=True)
    p_sys.set_defaults(func=cmd_sysid_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # argparse errors exit(2) before this
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
