"""Command-line entry point.

Subcommands: simulate (replication harness), fit (one dataset), bootstrap
(resampling inference + tests), effects (ATE/HTE artifacts), validate
(Laplace-vs-quadrature error table). Structured results go to JSON, tables
to CSV; every artifact embeds the resolved semantic settings and the seed so
a rerun reproduces it byte-for-byte. Standard output carries only data,
standard error only logs. Exit codes: 0 ok, 2 config error, 3 harness
failure, 4 data validation, 5 non-convergence, 6 bootstrap unstable,
7 tolerance breach.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import effects, em, inference, initialization, laplace, panel_data, runtime, sim
from .em import FitConfig, FitResult
from .inference import BootstrapResult
from .laplace import NumericalError, PosteriorSummary, Theta
from .panel_data import DataValidationError, SchemaConfig, SchemaError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_HARNESS = 3
EXIT_VALIDATION = 4
EXIT_NONCONVERGED = 5
EXIT_BOOT_UNSTABLE = 6
EXIT_TOLERANCE = 7

_SCHEMA_KEYS = {"outcome", "treatment", "id_col", "z_cols", "x_cols"}
_FIT_KEYS = {"max_em_iters", "em_tol", "newton_max_iters", "newton_tol",
             "step_halving_max"}
_GRID_KEYS = {"varying", "grid", "conditioning", "fixed", "allow_fractional"}


def _log(*parts):
    print(*parts, file=sys.stderr)


def read_kv_config(path):
    """key=value lines; '#' comments and blanks skipped; quotes stripped."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            value = value.strip()
            if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
                value = value[1:-1]
            out[key.strip()] = value
    return out


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _echo_comments(echo):
    return ("config: " + json.dumps(echo, sort_keys=True),)


def _split_config(mapping, allowed):
    unknown = set(mapping) - allowed
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return {k: mapping[k] for k in mapping}


def _fit_config(mapping):
    kwargs = {}
    for key in _FIT_KEYS & set(mapping):
        value = mapping[key]
        kwargs[key] = int(value) if "iters" in key or key == "step_halving_max" \
            else float(value)
    return FitConfig(**kwargs)


def _resolve_schema(args, mapping):
    schema_part = {k: v for k, v in mapping.items() if k in _SCHEMA_KEYS}
    if schema_part:
        return SchemaConfig.from_mapping(schema_part)
    if args.generic:
        p1, p2 = (int(v) for v in args.generic.split(","))
        return SchemaConfig.generic(p1, p2)
    raise SchemaError("no schema: give schema keys in --config or use --generic P1,P2")


def _load_dataset(args, mapping):
    schema = _resolve_schema(args, mapping)
    ds = panel_data.load_csv(args.data, schema)
    issues = panel_data.validate(ds)
    errors = [d for d in issues if d.severity == "error"]
    for diag in issues:
        _log(str(diag))
    if errors:
        raise DataValidationError(f"{len(errors)} validation errors in {args.data}")
    return ds, schema


# --------------------------------------------------------------------------
# artifact (de)serialization
# --------------------------------------------------------------------------

def _fit_payload(res: FitResult, report, design, echo):
    names = Theta.param_names(res.theta.p)
    vec = res.theta.as_vector()
    payload = {
        "config": echo,
        "p": res.theta.p,
        "theta": {name: float(v) for name, v in zip(names, vec)},
        "theta_vector": [float(v) for v in vec],
        "converged": res.converged,
        "n_iters": res.n_iters,
        "loglik": res.loglik,
        "loglik_trace": [float(v) for v in res.loglik_trace],
        "posterior": [
            {"b_mode": s.b_mode, "precision": s.precision, "mean": s.mean,
             "variance": s.variance, "second_moment": s.second_moment}
            for s in res.posterior
        ],
        "diagnostics": list(res.diagnostics),
        "feature_names": list(design.feature_names),
    }
    if report is not None:
        payload["init"] = {
            "candidates": [
                {"theta_vector": [float(v) for v in th.as_vector()],
                 "loglik": score}
                for th, score in report.candidates_tried
            ],
            "notes": list(report.notes),
        }
    return payload


def load_fit_json(path) -> FitResult:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    theta = Theta.from_vector(np.array(obj["theta_vector"]), obj["p"])
    posterior = [PosteriorSummary(**entry) for entry in obj["posterior"]]
    return FitResult(theta=theta, converged=obj["converged"], n_iters=obj["n_iters"],
                     loglik_trace=np.array(obj["loglik_trace"]), loglik=obj["loglik"],
                     posterior=posterior, diagnostics=list(obj["diagnostics"]))


def _write_replicates_csv(boot: BootstrapResult, path, p, echo):
    names = list(Theta.param_names(p)) + ["ate"]
    with open(path, "w", encoding="utf-8") as fh:
        for line in _echo_comments(echo):
            fh.write(f"# {line}\n")
        fh.write(",".join(["replicate"] + names) + "\n")
        for k, (theta, ate_r, _) in enumerate(boot.replicates):
            vec = np.append(theta.as_vector(), ate_r)
            fh.write(",".join([str(k)] + [repr(float(v)) for v in vec]) + "\n")


def load_replicates_csv(path, p) -> BootstrapResult:
    replicates = []
    with open(path, encoding="utf-8") as fh:
        header = None
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line
                continue
            cells = line.split(",")
            vec = np.array([float(v) for v in cells[1:]])
            replicates.append((Theta.from_vector(vec[:-1], p), float(vec[-1]), True))
    return BootstrapResult(B=len(replicates), replicates=replicates,
                           seed=0, n_failed=0)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    try:
        mapping = read_kv_config(args.config) if args.config else {}
        if args.paper_defaults and mapping:
            raise ValueError("--paper-defaults conflicts with a --config file")
        if args.m is not None:
            mapping = dict(mapping, m=str(args.m))
        dgp = sim.DgpConfig.from_mapping(mapping)
        if args.reps < 1:
            raise ValueError("--reps must be at least 1")
        threads = runtime.resolve_threads(args.threads)
        os.makedirs(args.out, exist_ok=True)
    except (ValueError, OSError) as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG

    echo = {"command": "simulate", "seed": args.seed, "reps": args.reps,
            "dgp": {"beta": list(dgp.beta), "omega": dgp.omega, "sigma": dgp.sigma,
                    "eta": list(dgp.eta), "xi": dgp.xi, "sigma_b": dgp.sigma_b,
                    "m": dgp.m, "n_range": list(dgp.n_range),
                    "z_marginals": list(dgp.z_marginals), "z_corr": dgp.z_corr,
                    "x_ar1_corr": dgp.x_ar1_corr}}
    try:
        table = sim.run_replications(dgp, args.reps, args.seed, _fit_config({}),
                                     threads=threads)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        _log(f"harness failure: {exc}")
        return EXIT_HARNESS
    table.write_csv(os.path.join(args.out, "table1.csv"),
                    header_comments=_echo_comments(echo))
    _write_json(os.path.join(args.out, "table1.json"),
                dict(table.to_jsonable(), config=echo))
    if args.emit_data:
        ds = sim.gen_dataset(dgp, args.seed, replicate=0)
        panel_data.write_csv(ds, os.path.join(args.out, "data.csv"),
                             header_comments=_echo_comments(echo))
    _log(f"simulate: {args.reps} replications, "
         f"convergence rate {table.convergence_rate:.3f}")
    return EXIT_OK


def cmd_fit(args) -> int:
    try:
        mapping = read_kv_config(args.config) if args.config else {}
        mapping = _split_config(mapping, _SCHEMA_KEYS | _FIT_KEYS)
        cfg = _fit_config(mapping)
        os.makedirs(args.out, exist_ok=True)
    except (ValueError, OSError) as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    try:
        ds, schema = _load_dataset(args, mapping)
    except (SchemaError, DataValidationError, OSError) as exc:
        _log(f"data error: {exc}")
        return EXIT_VALIDATION

    design = panel_data.expand_design(ds)
    echo = {"command": "fit", "seed": args.seed, "data": os.path.basename(args.data),
            "schema": {"outcome": schema.outcome, "treatment": schema.treatment,
                       "id_col": schema.id_col, "z_cols": list(schema.z_cols),
                       "x_cols": list(schema.x_cols)}}
    try:
        report = initialization.initialize(design, cfg)
        res = em.fit(design, report.theta0, cfg)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        _log(f"fit aborted: {exc}")
        return EXIT_NONCONVERGED
    _write_json(os.path.join(args.out, "fit.json"),
                _fit_payload(res, report, design, echo))
    if not res.converged:
        _log(f"fit did not converge in {res.n_iters} iterations")
        return EXIT_NONCONVERGED
    _log(f"fit converged in {res.n_iters} iterations, loglik {res.loglik:.6f}")
    return EXIT_OK


def _parse_groups(text):
    groups = []
    for chunk in text.split(";"):
        names = [g.strip() for g in chunk.split(",") if g.strip()]
        if names:
            groups.append(names)
    return groups


def cmd_bootstrap(args) -> int:
    try:
        mapping = read_kv_config(args.config) if args.config else {}
        mapping = _split_config(mapping, _SCHEMA_KEYS | _FIT_KEYS)
        cfg = _fit_config(mapping)
        if args.B < 20:
            raise ValueError("--B must be at least 20 (the summary needs 20 "
                             "retained replicates)")
        if not 0.0 < args.level < 1.0:
            raise ValueError("--level must lie in (0, 1)")
        groups = _parse_groups(args.groups) if args.groups else []
        threads = runtime.resolve_threads(args.threads)
        os.makedirs(args.out, exist_ok=True)
    except (ValueError, OSError) as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    try:
        ds, schema = _load_dataset(args, mapping)
    except (SchemaError, DataValidationError, OSError) as exc:
        _log(f"data error: {exc}")
        return EXIT_VALIDATION

    design = panel_data.expand_design(ds)
    echo = {"command": "bootstrap", "seed": args.seed, "B": args.B,
            "level": args.level, "data": os.path.basename(args.data),
            "groups": groups, "lrt": bool(args.lrt),
            "warm_start": bool(args.warm_start),
            "drop": args.drop.split(",") if args.drop else []}
    try:
        if args.fit_json:
            res = load_fit_json(args.fit_json)
        else:
            res = em.fit(design, initialization.initialize(design, cfg).theta0, cfg)
        if not res.converged:
            _log("warning: point fit not converged; bootstrapping it anyway")
        boot = inference.cluster_bootstrap(
            design, cfg, args.B, args.seed, threads=threads,
            warm_start=res.theta if args.warm_start else None)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        _log(f"bootstrap failed: {exc}")
        return EXIT_BOOT_UNSTABLE

    try:
        lrt = inference.lrt_sigma_b(design, cfg, full_fit=res) if args.lrt else None
        sensitivity = None
        if args.sensitivity:
            reduced = inference.fit_reduced(design, cfg)
            sensitivity = {
                "cll_full": inference.conditional_loglik(res, design, "posterior_mean"),
                "cll_reduced": inference.conditional_loglik(reduced, design, "zero"),
                "cll_variants": inference.sensitivity_drops(
                    ds, echo["drop"], cfg) if args.drop else {},
            }
        report = inference.report_dict(res, design, boot, level=args.level,
                                       groups=groups, lrt=lrt, sensitivity=sensitivity)
    except (NumericalError, ValueError, np.linalg.LinAlgError) as exc:
        _log(f"inference failed: {exc}")
        return EXIT_BOOT_UNSTABLE
    report["config"] = echo
    report["n_failed"] = boot.n_failed
    _write_json(os.path.join(args.out, "inference.json"), report)
    _write_replicates_csv(boot, os.path.join(args.out, "replicates.csv"),
                          res.theta.p, echo)
    _log(f"bootstrap: {len(boot.replicates)} of {args.B} replicates retained")
    return EXIT_OK


def _parse_grid_spec(mapping):
    try:
        varying = mapping["varying"]
        grid = tuple(float(v) for v in mapping["grid"].split(","))
    except KeyError as exc:
        raise ValueError(f"grid spec needs {exc.args[0]!r}") from None
    conditioning = {}
    for chunk in mapping.get("conditioning", "").split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        name, _, stat = chunk.partition(":")
        stats = stat.split("|")
        conditioning[name.strip()] = stats[0] if len(stats) == 1 else stats
    fixed = {}
    for chunk in mapping.get("fixed", "").split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        name, _, value = chunk.partition(":")
        fixed[name.strip()] = float(value)
    allow = mapping.get("allow_fractional", "false").lower() in ("1", "true", "yes")
    return effects.HteGridSpec(varying=varying, grid=grid, conditioning=conditioning,
                               fixed=fixed, allow_fractional=allow)


def cmd_effects(args) -> int:
    try:
        mapping = read_kv_config(args.config) if args.config else {}
        mapping = _split_config(mapping, _SCHEMA_KEYS | _GRID_KEYS)
        grid_part = {k: v for k, v in mapping.items() if k in _GRID_KEYS}
        spec = _parse_grid_spec(grid_part) if grid_part else None
        if not 0.0 < args.level < 1.0:
            raise ValueError("--level must lie in (0, 1)")
        os.makedirs(args.out, exist_ok=True)
    except (ValueError, OSError) as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    try:
        ds, schema = _load_dataset(args, mapping)
        res = load_fit_json(args.fit_json)
        boot = load_replicates_csv(args.replicates, res.theta.p) \
            if args.replicates else None
    except (SchemaError, DataValidationError, OSError, KeyError) as exc:
        _log(f"data error: {exc}")
        return EXIT_VALIDATION

    design = panel_data.expand_design(ds)
    echo = {"command": "effects", "seed": args.seed, "level": args.level,
            "data": os.path.basename(args.data),
            "fit_json": os.path.basename(args.fit_json),
            "grid": dict(grid_part) if grid_part else None}

    ate_value = effects.ate(res, design)
    lo_q, hi_q = (1.0 - args.level) / 2.0, (1.0 + args.level) / 2.0
    with open(os.path.join(args.out, "ate.csv"), "w", encoding="utf-8") as fh:
        for line in _echo_comments(echo):
            fh.write(f"# {line}\n")
        if boot is not None and boot.replicates:
            draws = np.array([a for _, a, _ in boot.replicates])
            fh.write("estimate,ci_lo,ci_hi\n")
            fh.write(f"{ate_value!r},{float(np.quantile(draws, lo_q))!r},"
                     f"{float(np.quantile(draws, hi_q))!r}\n")
        else:
            fh.write("estimate\n")
            fh.write(f"{ate_value!r}\n")

    if spec is not None:
        try:
            rows = effects.hte_grid(res, design, spec, boot, level=args.level)
        except ValueError as exc:
            _log(f"config error: {exc}")
            return EXIT_CONFIG
        effects.write_grid_csv(rows, os.path.join(args.out, "hte_grid.csv"),
                               header_comments=_echo_comments(echo))
    _log(f"effects: ate {ate_value:.6f}")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        if args.data and not args.fit_json:
            raise ValueError("--data needs --fit-json for the parameter values")
        if args.tol <= 0 or args.tol_loglik <= 0:
            raise ValueError("tolerances must be positive")
        mapping = read_kv_config(args.config) if args.config else {}
        if args.data:
            mapping = _split_config(mapping, _SCHEMA_KEYS)
        else:
            # no dataset: config keys describe the generating process instead
            if args.m is not None:
                mapping = dict(mapping, m=str(args.m))
            mapping.setdefault("m", "50")
            dgp = sim.DgpConfig.from_mapping(mapping)
    except (ValueError, OSError) as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    try:
        if args.data:
            ds, _ = _load_dataset(args, mapping)
            design = panel_data.expand_design(ds)
            th = load_fit_json(args.fit_json).theta
        else:
            design = panel_data.expand_design(sim.gen_dataset(dgp, args.seed))
            th = dgp.true_theta()
    except (SchemaError, DataValidationError, OSError) as exc:
        _log(f"data error: {exc}")
        return EXIT_VALIDATION

    breaches = 0
    worst = {"mean": 0.0, "variance": 0.0, "loglik": 0.0}
    print("subject,mean_rel_err,var_rel_err,loglik_abs_err")
    for i in range(design.m):
        sub = design.subject(i)
        ps = laplace.posterior_moments(sub, th)
        qs = laplace.quadrature_moments(sub, th, nodes=args.nodes)
        ll = laplace.observed_loglik(sub, th)
        sd_q = float(np.sqrt(qs.variance))
        mean_err = abs(ps.mean - qs.mean) / max(abs(qs.mean), sd_q)
        var_err = abs(ps.variance - qs.variance) / qs.variance
        ll_err = abs(ll - qs.log_normalizer)
        worst["mean"] = max(worst["mean"], mean_err)
        worst["variance"] = max(worst["variance"], var_err)
        worst["loglik"] = max(worst["loglik"], ll_err)
        if mean_err > args.tol or var_err > args.tol or ll_err > args.tol_loglik:
            breaches += 1
        print(f"{design.subject_ids[i]},{mean_err!r},{var_err!r},{ll_err!r}")
    _log(f"validate: worst mean {worst['mean']:.3e}, variance "
         f"{worst['variance']:.3e}, loglik {worst['loglik']:.3e}; "
         f"{breaches} of {design.m} subjects out of tolerance")
    return EXIT_TOLERANCE if breaches else EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confound-em",
        description="Panel treatment-effect estimation with a latent subject confounder")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=None)

    p_sim = sub.add_parser("simulate", parents=[common],
                           help="replication harness over the synthetic generator")
    p_sim.add_argument("--paper-defaults", action="store_true",
                       help="use the built-in generator settings")
    p_sim.add_argument("--m", type=int, default=None, help="subjects per replication")
    p_sim.add_argument("--reps", type=int, default=200)
    p_sim.add_argument("--emit-data", action="store_true",
                       help="also write one generated dataset")
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", parents=[common], help="fit one panel CSV")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--generic", help="P1,P2 schema shortcut (y,d,z*,x*,id)")
    p_fit.set_defaults(func=cmd_fit)

    p_boot = sub.add_parser("bootstrap", parents=[common],
                            help="cluster bootstrap, tests, sensitivity")
    p_boot.add_argument("--data", required=True)
    p_boot.add_argument("--generic", help="P1,P2 schema shortcut")
    p_boot.add_argument("--fit-json", help="reuse a previous fit artifact")
    p_boot.add_argument("--B", type=int, default=200)
    p_boot.add_argument("--level", type=float, default=0.95)
    p_boot.add_argument("--groups", help="semicolon-separated coefficient groups")
    p_boot.add_argument("--lrt", action="store_true",
                        help="likelihood-ratio test for the latent variance")
    p_boot.add_argument("--sensitivity", action="store_true",
                        help="conditional log-likelihood comparison")
    p_boot.add_argument("--drop", help="comma-separated covariates for refit variants")
    p_boot.add_argument("--warm-start", action="store_true",
                        help="start replicates at the point estimate")
    p_boot.set_defaults(func=cmd_bootstrap)

    p_eff = sub.add_parser("effects", parents=[common],
                           help="ATE summary and HTE grid artifacts")
    p_eff.add_argument("--data", required=True)
    p_eff.add_argument("--generic", help="P1,P2 schema shortcut")
    p_eff.add_argument("--fit-json", required=True)
    p_eff.add_argument("--replicates", help="replicates.csv for interval bands")
    p_eff.add_argument("--level", type=float, default=0.95)
    p_eff.set_defaults(func=cmd_effects)

    p_val = sub.add_parser("validate", parents=[common],
                           help="per-subject Laplace vs quadrature error table")
    p_val.add_argument("--data")
    p_val.add_argument("--generic", help="P1,P2 schema shortcut")
    p_val.add_argument("--fit-json")
    p_val.add_argument("--m", type=int, default=None,
                       help="subjects when simulating (default 50)")
    p_val.add_argument("--nodes", type=int, default=50)
    p_val.add_argument("--tol", type=float, default=1e-2,
                       help="relative tolerance on posterior moments")
    p_val.add_argument("--tol-loglik", type=float, default=0.05,
                       help="absolute tolerance on per-subject log-likelihood")
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
