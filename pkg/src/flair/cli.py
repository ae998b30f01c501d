"""Command-line entry point: ``flair {simulate,select-k,fit,evaluate,replicate}``.

Every option can also be given in a flat ``key = value`` config file passed
with ``--config``; flags on the command line win over file values, which win
over the built-in defaults. The fully resolved configuration is echoed into
each JSON output.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage/validation.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FlairError, ValidationError
from .fileio import read_config, read_csv, read_matrix, write_binary, write_csv, write_json, write_matrix
from .initialization import jic_path
from .model import Dataset, FitOptions
from .numcore import get_link, make_rng
from .pipeline import fit_flair
from .posterior import credible_intervals, posterior_mean_sigma, sample_posterior
from .simeval import (
    SimConfig,
    auc,
    coverage_rows,
    empirical_coverage,
    make_holdout_mask,
    rel_frob_error_B,
    rel_frob_error_lambda_outer,
    run_replication,
    simulate_dataset,
)

SCHEMA = 1


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"cannot read {v!r} as a boolean")


def _opt_int(v):
    if v is None or str(v).strip().lower() in ("", "none", "auto"):
        return None
    return int(v)


def _threads_default():
    return os.cpu_count() or 1


# name -> (type, default, help); shared by several subcommands
_OPTIONS = {
    "seed": (int, 0, "master random seed"),
    "threads": (int, None, "worker threads (default: available cores)"),
    "link": (str, "logit", "link function: logit or probit"),
    "format": (str, "csv", "matrix output format: csv or bin"),
    "out": (str, None, "output directory (file for evaluate)"),
    "data": (str, None, "directory holding Y.csv, X.csv and optionally mask.csv"),
    "y": (str, None, "path of Y.csv (overrides --data)"),
    "x": (str, None, "path of X.csv (overrides --data)"),
    "mask": (str, None, "path of mask.csv, 1 = held out (overrides --data)"),
    "n": (int, 500, "number of samples"),
    "p": (int, 200, "number of outcomes"),
    "k": (_opt_int, None, "latent dimension"),
    "q": (int, 2, "number of covariates including the intercept"),
    "sigma2": (float, 1.0, "slab variance of the true parameters"),
    "spike_prob": (float, 0.5, "probability that a true parameter is exactly zero"),
    "bound": (float, 5.0, "true parameters are truncated to [-bound, bound]"),
    "holdout_fraction": (float, 0.0, "fraction of cells held out (0 = none)"),
    "stratified": (_bool, True, "stratify the holdout by outcome value"),
    "k_max": (int, 5, "largest latent dimension tried by JIC"),
    "auto_k": (_bool, False, "choose k by JIC"),
    "c_lambda": (float, 10.0, "box bound on loadings"),
    "c_b": (float, 10.0, "box bound on coefficients"),
    "nu_outcome": (float, 0.3, "Newton step size for outcome updates"),
    "nu_factor": (float, 1.0, "Newton step size for factor updates"),
    "inner_tol": (float, 1e-3, "stop a Newton subproblem when the update norm is below this"),
    "outer_tol": (float, 1e-3, "stop alternating when the relative log-posterior gain is below this"),
    "max_inner": (int, 100, "Newton steps per subproblem"),
    "max_outer": (int, 100, "alternating sweeps"),
    "svd": (str, "auto", "SVD for initialization: auto, exact or randomized"),
    "n_mc": (int, 2000, "Monte Carlo draws for Lam Lam^T intervals"),
    "alpha": (float, 0.05, "credible intervals have level 1 - alpha"),
    "submatrix": (int, 100, "Lam Lam^T intervals on a random principal submatrix of this size"),
    "sigma_max_p": (int, 2000, "write the full Sigma_tilde only when p is at most this"),
    "save_samples": (int, 0, "also write this many posterior draws of theta (binary)"),
    "rho_subsample": (_opt_int, None, "scan pairs for rho from this many outcomes only"),
    "fit": (str, None, "directory written by `flair fit`"),
    "truth": (str, None, "directory holding Lambda0.csv and B0.csv"),
    "replicates": (int, 10, "number of simulated replicates"),
}

_COMMANDS = {
    "simulate": ["out", "n", "p", "k", "q", "sigma2", "spike_prob", "bound", "link",
                 "holdout_fraction", "stratified", "seed", "format"],
    "select-k": ["data", "y", "x", "mask", "k_max", "link", "svd", "seed", "out"],
    "fit": ["data", "y", "x", "mask", "out", "k", "auto_k", "k_max", "link", "c_lambda", "c_b",
            "nu_outcome", "nu_factor", "inner_tol", "outer_tol", "max_inner", "max_outer", "svd",
            "n_mc", "alpha", "submatrix", "sigma_max_p", "save_samples", "rho_subsample", "seed",
            "threads", "format"],
    "evaluate": ["fit", "truth", "data", "y", "x", "mask", "out"],
    "replicate": ["n", "p", "k", "q", "sigma2", "spike_prob", "bound", "link", "replicates",
                  "auto_k", "k_max", "n_mc", "alpha", "holdout_fraction", "submatrix", "seed",
                  "threads", "out", "nu_outcome", "nu_factor", "inner_tol", "outer_tol",
                  "max_inner", "max_outer"],
}

_HELP = {
    "simulate": "draw a synthetic dataset and its true parameters",
    "select-k": "tabulate JIC over k = 1..k_max",
    "fit": "fit the model and write estimates, intervals and the trace",
    "evaluate": "score a fit against truth files and/or held-out cells",
    "replicate": "run a simulation study and write the aggregate table",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flair", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"flair {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, names in _COMMANDS.items():
        sp = sub.add_parser(cmd, help=_HELP[cmd])
        sp.add_argument("--config", default=None, help="key=value file; flags override it")
        for name in names:
            typ, default, text = _OPTIONS[name]
            flag = "--" + name.replace("_", "-")
            extra = {"nargs": "?", "const": "true"} if typ is _bool else {}
            sp.add_argument(flag, dest=name, default=argparse.SUPPRESS,
                            help=f"{text} (default: {default})", **extra)
    return parser


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags, all type-checked."""
    names = _COMMANDS[command]
    resolved = {name: _OPTIONS[name][1] for name in names}
    if command == "replicate":
        resolved["k"] = 2
    raw = {}
    config_path = getattr(ns, "config", None)
    if config_path:
        for key, value in read_config(config_path).items():
            if key not in resolved:
                raise ValidationError(f"{config_path}: unknown key {key!r} for {command}")
            raw[key] = value
    for name in names:
        if hasattr(ns, name):
            raw[name] = getattr(ns, name)
    for key, value in raw.items():
        typ = _OPTIONS[key][0]
        try:
            resolved[key] = typ(value) if value is not None else None
        except (TypeError, ValueError):
            raise ValidationError(f"invalid value {value!r} for {key}") from None
    if "threads" in resolved and resolved["threads"] is None:
        resolved["threads"] = _threads_default()
    if command == "replicate" and "seed" not in raw:
        raise ValidationError("replicate requires an explicit --seed")
    return resolved


def _provenance(command, cfg):
    return {"schema": SCHEMA, "version": __version__, "command": command, "config": cfg}


def _input_paths(cfg):
    base = Path(cfg["data"]) if cfg.get("data") else None

    def pick(key, name, required=True):
        if cfg.get(key):
            return Path(cfg[key])
        if base is not None:
            path = base / name
            if path.exists() or required:
                return path
            return None
        if required:
            raise ValidationError(f"give --data or --{key}")
        return None

    return pick("y", "Y.csv"), pick("x", "X.csv"), pick("mask", "mask.csv", required=False)


def load_dataset(cfg) -> Dataset:
    y_path, x_path, mask_path = _input_paths(cfg)
    Y, names = read_csv(y_path, with_header=True)
    X = read_csv(x_path)
    mask = read_csv(mask_path).astype(bool) if mask_path is not None else None
    return Dataset(Y=Y, X=X, mask=mask, names=names)


def _out_dir(cfg) -> Path:
    if not cfg.get("out"):
        raise ValidationError("--out is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _names(prefix, count):
    return [f"{prefix}{j + 1}" for j in range(count)]


def cmd_simulate(cfg) -> int:
    out = _out_dir(cfg)
    sim = SimConfig(n=cfg["n"], p=cfg["p"], k=cfg["k"] or 2, q=cfg["q"], sigma2=cfg["sigma2"],
                    spike_prob=cfg["spike_prob"], bounds=(-cfg["bound"], cfg["bound"]),
                    link=cfg["link"], seed=cfg["seed"])
    rng = make_rng(sim.seed)
    data, truth = simulate_dataset(sim, rng)
    fmt = cfg["format"]
    write_matrix(out, "Y", data.Y, _names("y", sim.p), fmt)
    write_matrix(out, "X", data.X, ["intercept"] + [f"x{j + 2}" for j in range(sim.q - 1)], fmt)
    write_matrix(out, "Lambda0", truth.Lam0, _names("lambda", sim.k), fmt)
    write_matrix(out, "B0", truth.B0, _names("beta", sim.q), fmt)
    write_matrix(out, "M0", truth.M0, _names("eta", sim.k), fmt)
    if cfg["holdout_fraction"] > 0:
        mask = make_holdout_mask(data.Y, cfg["holdout_fraction"], cfg["stratified"], rng)
        write_matrix(out, "mask", mask.astype(float), _names("y", sim.p), fmt)
    meta = _provenance("simulate", cfg)
    meta["sim_config"] = sim.to_dict()
    write_json(out / "meta.json", meta)
    print(f"wrote simulated data ({sim.n} x {sim.p}) to {out}")
    return 0


def cmd_select_k(cfg) -> int:
    data = load_dataset(cfg)
    k_max = cfg["k_max"]
    if k_max + data.q > min(data.n, data.p):
        raise ValidationError(f"k_max + q = {k_max + data.q} exceeds min(n, p) = {min(data.n, data.p)}")
    values = jic_path(data, k_max, cfg["link"], cfg["svd"], seed=cfg["seed"])
    best = int(np.argmin(values)) + 1
    print("k,jic")
    for k, v in enumerate(values, 1):
        print(f"{k},{v:.6f}")
    print(f"selected k = {best}")
    if cfg.get("out"):
        report = _provenance("select-k", cfg)
        report.update(jic=[{"k": k, "jic": float(v)} for k, v in enumerate(values, 1)], k_selected=best)
        out = Path(cfg["out"])
        if out.suffix != ".json":
            out.mkdir(parents=True, exist_ok=True)
            out = out / "select_k.json"
        write_json(out, report)
    return 0


def _fit_options(cfg) -> FitOptions:
    return FitOptions(
        nu_outcome=cfg["nu_outcome"], nu_factor=cfg["nu_factor"], inner_tol=cfg["inner_tol"],
        outer_tol=cfg["outer_tol"], max_inner=cfg["max_inner"], max_outer=cfg["max_outer"],
        link=cfg["link"], seed=cfg["seed"],
    )


def cmd_fit(cfg) -> int:
    out = _out_dir(cfg)
    data = load_dataset(cfg)
    k = None if cfg["auto_k"] else cfg["k"]
    if k is None and not cfg["auto_k"]:
        raise ValidationError("give --k or --auto-k")
    if k is not None and k + data.q > min(data.n, data.p):
        raise ValidationError(f"k + q = {k + data.q} exceeds min(n, p) = {min(data.n, data.p)}")
    opts = _fit_options(cfg)
    fit = fit_flair(data, k, k_max=cfg["k_max"], opts=opts, c_lambda=cfg["c_lambda"], c_B=cfg["c_b"],
                    svd_method=cfg["svd"], rho_subsample=cfg["rho_subsample"])
    post = fit.posterior
    fmt = cfg["format"]
    p, q, k = post.p, post.q, fit.k
    x_names = _names("beta", q)
    write_matrix(out, "Lambda_tilde", post.Lam, _names("lambda", k), fmt)
    write_matrix(out, "B_tilde", post.B, x_names, fmt)
    write_matrix(out, "M_tilde", fit.state.M, _names("eta", k), fmt)
    Sigma, _ = posterior_mean_sigma(post)
    write_matrix(out, "D_tilde", np.diag(Sigma - post.Lam @ post.Lam.T)[:, None], ["d"], fmt)
    write_matrix(out, "V_tilde", post.V.reshape(p, -1),
                 [f"v{a + 1}_{b + 1}" for a in range(q + k) for b in range(q + k)], fmt)

    rng = make_rng(cfg["seed"])
    rows = coverage_rows(p, rng, cfg["submatrix"])
    if p <= cfg["sigma_max_p"]:
        write_matrix(out, "Sigma_tilde", Sigma, _names("y", p), fmt)
    else:
        write_matrix(out, "Sigma_tilde", Sigma[np.ix_(rows, rows)], [f"y{j + 1}" for j in rows], fmt)
    (out / "rho.txt").write_text("%.17g\n" % post.rho)

    alpha = cfg["alpha"]
    iB = credible_intervals(post, "B", alpha)
    write_matrix(out, "B_lower", iB.lower, x_names, fmt)
    write_matrix(out, "B_upper", iB.upper, x_names, fmt)
    iL = credible_intervals(post, "LambdaOuter", alpha, n_mc=cfg["n_mc"], seed=cfg["seed"], rows=rows)
    row_names = [f"y{j + 1}" for j in rows]
    write_matrix(out, "LambdaOuter_lower", iL.lower, row_names, fmt)
    write_matrix(out, "LambdaOuter_upper", iL.upper, row_names, fmt)
    write_csv(out / "LambdaOuter_rows.csv", rows[:, None], ["row"])

    write_json(out / "trace.json", fit.trace.to_dict())
    summary = _provenance("fit", cfg)
    summary.update(
        n=data.n, p=p, q=q, k=k, rho=post.rho,
        jic=None if fit.jic is None else [float(v) for v in fit.jic],
        log_posterior=fit.trace.log_posterior[-1], outer_iterations=fit.trace.n_outer,
        timings=fit.timings, submatrix_rows=rows,
    )
    if cfg["save_samples"] > 0:
        draws = sample_posterior(post, cfg["save_samples"], seed=cfg["seed"])
        theta = np.concatenate([draws.B, draws.Lam], axis=2).reshape(-1, q + k)
        write_binary(out / "theta_samples.bin", theta)
        summary["theta_samples"] = {
            "file": "theta_samples.bin", "draws": cfg["save_samples"],
            "layout": "row = draw * p + outcome; columns = (beta_1..beta_q, lambda_1..lambda_k)",
        }
    write_json(out / "fit.json", summary)
    print(f"k = {k}, rho = {post.rho:.4f}, {fit.trace.n_outer} sweeps, {fit.timings['total']:.2f} s")
    return 0


def cmd_evaluate(cfg) -> int:
    if not cfg.get("fit"):
        raise ValidationError("--fit is required")
    fit_dir = Path(cfg["fit"])
    has_data = bool(cfg.get("data") or cfg.get("mask"))
    if not cfg.get("truth") and not has_data:
        raise ValidationError("evaluate needs --truth and/or held-out data (--data with mask.csv)")
    Lam = read_matrix(fit_dir, "Lambda_tilde")
    B = read_matrix(fit_dir, "B_tilde")
    report = _provenance("evaluate", cfg)
    metrics = {}
    if cfg.get("truth"):
        truth_dir = Path(cfg["truth"])
        Lam0 = read_matrix(truth_dir, "Lambda0")
        B0 = read_matrix(truth_dir, "B0")
        try:
            D = read_matrix(fit_dir, "D_tilde")[:, 0]
        except FileNotFoundError:
            D = np.zeros(Lam.shape[0])
        Sigma = Lam @ Lam.T + np.diag(D)
        metrics["rel_err_lambda_outer"] = rel_frob_error_lambda_outer(Sigma, Lam0)
        metrics["rel_err_B"] = rel_frob_error_B(B, B0)
        if (fit_dir / "B_lower.csv").exists() or (fit_dir / "B_lower.bin").exists():
            metrics["coverage_B"] = empirical_coverage(
                read_matrix(fit_dir, "B_lower"), read_matrix(fit_dir, "B_upper"), B0)
        if (fit_dir / "LambdaOuter_rows.csv").exists():
            rows = read_csv(fit_dir / "LambdaOuter_rows.csv")[:, 0].astype(int)
            truth_sub = (Lam0 @ Lam0.T)[np.ix_(rows, rows)]
            metrics["coverage_lambda_outer"] = empirical_coverage(
                read_matrix(fit_dir, "LambdaOuter_lower"), read_matrix(fit_dir, "LambdaOuter_upper"),
                truth_sub)
    if has_data:
        data = load_dataset(cfg)
        if data.mask is None:
            raise ValidationError("AUC needs a holdout mask (mask.csv)")
        M = read_matrix(fit_dir, "M_tilde")
        link_name = "logit"
        fit_json = fit_dir / "fit.json"
        if fit_json.exists():
            link_name = json.loads(fit_json.read_text()).get("config", {}).get("link", "logit")
        probs = get_link(link_name).h(data.X @ B.T + M @ Lam.T)
        held = data.mask
        metrics["auc"] = auc(probs[held], data.Y[held])
        obs = ~held
        rate = (data.Y * obs).sum(axis=0) / obs.sum(axis=0)
        metrics["auc_baseline"] = auc(np.broadcast_to(rate, data.Y.shape)[held], data.Y[held])
    report["report"] = metrics
    if cfg.get("out"):
        write_json(cfg["out"], report)
    for key, value in metrics.items():
        print(f"{key}: {value:.6f}")
    return 0


TABLE_COLUMNS = [
    "n", "p", "k", "q", "sigma2", "spike_prob", "replicates",
    "err_lambda_outer_x100", "err_lambda_outer_se_x100", "err_B_x100", "err_B_se_x100",
    "coverage_lambda_outer_pct", "coverage_B_pct",
    "coverage_lambda_outer_uncorrected_pct", "coverage_B_uncorrected_pct",
    "auc_pct", "k_selected_mean", "rho_mean", "time_s_mean",
]


def replication_row(result) -> dict:
    """One aggregate row; errors x 100 and coverage in percent."""
    m, se, c = result.mean, result.se, result.config

    def pct(v):
        return None if v is None else 100.0 * v

    return {
        "n": c.n, "p": c.p, "k": c.k, "q": c.q, "sigma2": c.sigma2, "spike_prob": c.spike_prob,
        "replicates": len(result.reports),
        "err_lambda_outer_x100": pct(m["rel_err_lambda_outer"]),
        "err_lambda_outer_se_x100": pct(se["rel_err_lambda_outer"]),
        "err_B_x100": pct(m["rel_err_B"]),
        "err_B_se_x100": pct(se["rel_err_B"]),
        "coverage_lambda_outer_pct": pct(m["coverage_lambda_outer"]),
        "coverage_B_pct": pct(m["coverage_B"]),
        "coverage_lambda_outer_uncorrected_pct": pct(m["coverage_lambda_outer_uncorrected"]),
        "coverage_B_uncorrected_pct": pct(m["coverage_B_uncorrected"]),
        "auc_pct": pct(m["auc"]),
        "k_selected_mean": m["k_selected"],
        "rho_mean": m["rho"],
        "time_s_mean": result.wall_time_mean,
    }


def cmd_replicate(cfg) -> int:
    out = _out_dir(cfg)
    sim = SimConfig(n=cfg["n"], p=cfg["p"], k=cfg["k"] or 2, q=cfg["q"], sigma2=cfg["sigma2"],
                    spike_prob=cfg["spike_prob"], bounds=(-cfg["bound"], cfg["bound"]),
                    link=cfg["link"], seed=cfg["seed"])
    opts = _fit_options(cfg)
    result = run_replication(
        sim, cfg["replicates"], opts, auto_k=cfg["auto_k"], k_max=cfg["k_max"], alpha=cfg["alpha"],
        n_mc=cfg["n_mc"], holdout_fraction=cfg["holdout_fraction"] or None, threads=cfg["threads"],
        submatrix=cfg["submatrix"],
    )
    row = replication_row(result)
    with open(out / "replicate.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        writer.writerow({k: ("" if v is None else ("%.6g" % v if isinstance(v, float) else v))
                         for k, v in row.items()})
    payload = _provenance("replicate", cfg)
    payload.update(table=row, result=result.to_dict())
    write_json(out / "replicate.json", payload)
    for key in TABLE_COLUMNS[7:]:
        v = row[key]
        if v is not None:
            print(f"{key}: {v:.4g}" if isinstance(v, float) else f"{key}: {v}")
    return 0


_DISPATCH = {
    "simulate": cmd_simulate,
    "select-k": cmd_select_k,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "replicate": cmd_replicate,
}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve_config(ns.command, ns)
        return _DISPATCH[ns.command](cfg)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"flair {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FlairError, OSError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"flair {ns.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
