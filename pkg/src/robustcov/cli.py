"""Command-line front end.

Subcommands: estimate, qq, simulate, weights, calibrate. Every command
honors --seed deterministically (reports never embed timestamps, and the
thread count cannot change results), flags override --config values, and
the effective configuration is echoed into every report.

Exit codes: 0 ok, 2 usage, 3 data, 4 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .errors import DataError, RobustcovError
from .estimators import EstimatorConfig, Family, fit
from .linalg import chi2_quantile, mahalanobis, validate_data
from .rho import bisquare, optimal
from .simulate import Scenario, run_scenario
from .starts import StartConfig
from .tuning import calibrate_efficiency

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4


class UsageError(Exception):
    pass


def read_csv_matrix(path: str) -> np.ndarray:
    """Read a numeric CSV ('.' decimal), autodetecting a single header row.

    Non-numeric cells anywhere else are hard errors reported with their
    line number; missing values are not imputed.
    """
    rows: list[list[float]] = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        width = None
        for lineno, row in enumerate(reader, start=1):
            if not row or all(cell.strip() == "" for cell in row):
                continue
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                if lineno == 1 and not rows:
                    continue  # header row
                bad = next(c for c in row if not _is_float(c))
                raise DataError(f"line {lineno}: non-numeric cell {bad!r}") from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DataError(
                    f"line {lineno}: expected {width} columns, got {len(values)}"
                )
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no numeric rows")
    return np.array(rows, dtype=float)


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def _write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _tsv(rows) -> str:
    return "".join("\t".join(_cell(v) for v in row) + "\n" for row in rows)


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _merge_config(args: argparse.Namespace, keys: list[str]) -> dict:
    """Effective option values: flag if given, else config-file value, else
    the parser default (stored under 'default_<key>')."""
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"config {args.config}: invalid JSON ({exc})") from None
        if not isinstance(file_cfg, dict):
            raise DataError(f"config {args.config}: expected a JSON object")
    eff = {}
    for key in keys:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            eff[key] = flag_val
        elif key in file_cfg:
            eff[key] = file_cfg[key]
        else:
            eff[key] = getattr(args, f"default_{key}", None)
    return eff


_RHO_BUILDERS = {"bisquare": bisquare, "optimal": optimal}


def _estimator_config(eff: dict) -> EstimatorConfig:
    family = Family(eff["family"])
    rho_name = eff["rho"]
    if rho_name not in _RHO_BUILDERS:
        raise UsageError(f"unknown rho family {rho_name!r}")
    return EstimatorConfig(
        family=family,
        rho=_RHO_BUILDERS[rho_name](),
        tuning=eff["tuning"],
        delta=eff["delta"],
        max_iter=eff["max_iter"],
        tol=eff["tol"],
        start=eff["start"],
    )


def _run_estimate(eff: dict) -> dict:
    X = read_csv_matrix(eff["input"])
    try:
        X = validate_data(X)
    except DataError:
        raise
    cfg = _estimator_config(eff)
    res = fit(X, cfg, seed=eff["seed"])
    est = res.estimate
    p = est.p
    d = mahalanobis(X, est, use_size=True)
    cutoff = chi2_quantile(p, 0.975)
    flags = d > cutoff
    meta = {
        "family": eff["family"],
        "start": eff["start"],
        "rho": eff["rho"],
        "seed": eff["seed"],
        "tuning": res.metadata.get("c", res.metadata.get("gamma", eff["tuning"])),
        "iterations": res.iterations,
        "converged": res.converged,
    }
    return {
        "config": {k: eff[k] for k in sorted(eff)},
        "mu": est.mu.tolist(),
        "shape": est.shape.tolist(),
        "size": est.size,
        "scatter": est.scatter.tolist(),
        "distances": d.tolist(),
        "outlier_cutoff": cutoff,
        "outlier_flags": flags.astype(int).tolist(),
        "n_flagged": int(flags.sum()),
        "metadata": meta,
    }


def cmd_estimate(args) -> int:
    keys = ["input", "family", "rho", "start", "tuning", "delta", "max_iter",
            "tol", "seed", "format", "output"]
    eff = _merge_config(args, keys)
    if eff["input"] is None:
        raise UsageError("estimate requires --input")
    report = _run_estimate(eff)
    if eff["format"] == "json":
        _write_text(eff["output"], _json_dumps(report))
    else:
        rows = [["key", "value"]]
        rows += [["mu", " ".join(repr(v) for v in report["mu"])]]
        rows += [["size", repr(report["size"])]]
        for i, r in enumerate(report["scatter"]):
            rows += [[f"scatter_{i}", " ".join(repr(v) for v in r)]]
        rows += [["outlier_cutoff", repr(report["outlier_cutoff"])],
                 ["n_flagged", str(report["n_flagged"])]]
        rows += [["index", "distance", "flag"]]
        for i, (di, fi) in enumerate(zip(report["distances"], report["outlier_flags"])):
            rows += [[str(i), repr(di), str(fi)]]
        _write_text(eff["output"], _tsv(rows))
    return EXIT_OK


def cmd_qq(args) -> int:
    keys = ["input", "estimate", "family", "rho", "start", "tuning", "delta",
            "max_iter", "tol", "seed", "format", "output"]
    eff = _merge_config(args, keys)
    if eff["estimate"] is not None:
        with open(eff["estimate"]) as fh:
            report = json.load(fh)
        mu = np.array(report["mu"], dtype=float)
        scatter = np.array(report["scatter"], dtype=float)
        if eff["input"] is None:
            d = np.array(report["distances"], dtype=float)
        else:
            X = read_csv_matrix(eff["input"])
            Z = np.linalg.solve(np.linalg.cholesky(scatter), (X - mu).T)
            d = np.einsum("ij,ij->j", Z, Z)
        p = mu.shape[0]
    else:
        if eff["input"] is None:
            raise UsageError("qq requires --input or --estimate")
        report = _run_estimate(eff)
        d = np.array(report["distances"], dtype=float)
        p = len(report["mu"])
    n = d.shape[0]
    d_sorted = np.sort(d)
    quantiles = [chi2_quantile(p, (i - 0.5) / n) for i in range(1, n + 1)]
    rows = [["distance", "chi2_quantile"]]
    rows += [[float(a), float(b)] for a, b in zip(d_sorted, quantiles)]
    _write_text(eff["output"], _tsv(rows))
    return EXIT_OK


_WEIGHT_FAMILIES = ("bisquare", "optimal", "rocke-biflat")


def cmd_weights(args) -> int:
    keys = ["family", "c", "alpha", "gamma", "p", "t_max", "points", "format", "output"]
    eff = _merge_config(args, keys)
    fam = eff["family"]
    if fam not in _WEIGHT_FAMILIES:
        raise UsageError(f"--family must be one of {_WEIGHT_FAMILIES}")
    from .rho import RhoSpec, rocke_biflat, scaled, weight

    if fam == "rocke-biflat":
        if eff["gamma"] is not None:
            spec = rocke_biflat(gamma=eff["gamma"])
        elif eff["alpha"] is not None and eff["p"] is not None:
            spec = rocke_biflat(p=eff["p"], alpha=eff["alpha"])
        else:
            raise UsageError("rocke-biflat needs --gamma or both --alpha and --p")
    else:
        spec = _RHO_BUILDERS[fam]()
    if eff["c"] is not None:
        spec = scaled(spec, eff["c"])
    grid = np.linspace(0.0, eff["t_max"], eff["points"])
    w = weight(spec, grid)
    rows = [["t", "weight"]] + [[float(t), float(v)] for t, v in zip(grid, w)]
    _write_text(eff["output"], _tsv(rows))
    return EXIT_OK


_PRESETS = {
    "tabresumen-lite": {
        "p_list": [5, 10],
        "epsilon": 0.1,
        "gamma_c": 0.0,
        "k_grid": list(range(1, 13)),
        "replicates": 100,
        "estimators": ["mm:optimal:ksd", "tau:optimal:ksd",
                       "stahel-donoho:optimal:ksd", "s:bisquare:ksd"],
    },
}


def _parse_estimator(tag: str) -> tuple[str, EstimatorConfig]:
    parts = tag.split(":")
    fam = parts[0]
    rho_name = parts[1] if len(parts) > 1 and parts[1] else "optimal"
    start = parts[2] if len(parts) > 2 and parts[2] else "ksd"
    if rho_name not in _RHO_BUILDERS:
        raise UsageError(f"unknown rho family {rho_name!r} in {tag!r}")
    try:
        family = Family(fam)
    except ValueError:
        raise UsageError(f"unknown estimator family {fam!r} in {tag!r}") from None
    cfg = EstimatorConfig(family=family, rho=_RHO_BUILDERS[rho_name](), start=start)
    return tag, cfg


def _report_to_dict(report) -> dict:
    sc = report.scenario
    out = {
        "scenario": {
            "p": sc.p, "n": sc.n, "epsilon": sc.epsilon, "gamma_c": sc.gamma_c,
            "k_grid": list(sc.k_grid), "replicates": sc.replicates, "seed": sc.seed,
            "estimators": [label for label, _ in sc.estimators],
        },
        "cov_clean_scatter": report.cov_clean_scatter,
        "cov_clean_location": report.cov_clean_location,
        "estimators": {},
    }
    for label, er in report.estimators.items():
        out["estimators"][label] = {
            "per_k_scatter": {str(k): v for k, v in er.per_k_scatter.items()},
            "per_k_location": {str(k): v for k, v in er.per_k_location.items()},
            "per_k_failures": {str(k): v for k, v in er.per_k_failures.items()},
            "max_scatter": er.max_scatter,
            "max_location": er.max_location,
            "clean_scatter": er.clean_scatter,
            "clean_location": er.clean_location,
            "clean_failures": er.clean_failures,
            "efficiency_scatter": er.efficiency_scatter,
            "efficiency_location": er.efficiency_location,
        }
    return out


def _report_to_tsv(report) -> str:
    sc = report.scenario
    ks = list(sc.k_grid)
    header = (["estimator", "eff_scatter", "eff_location"]
              + [f"scatter_K{k}" for k in ks] + ["scatter_max"]
              + [f"location_K{k}" for k in ks] + ["location_max", "failures"])
    rows = [header]
    for label, er in report.estimators.items():
        nfail = er.clean_failures + sum(er.per_k_failures.values())
        rows.append(
            [label, er.efficiency_scatter, er.efficiency_location]
            + [er.per_k_scatter.get(k, float("nan")) for k in ks]
            + [er.max_scatter]
            + [er.per_k_location.get(k, float("nan")) for k in ks]
            + [er.max_location, nfail]
        )
    return _tsv(rows)


def cmd_simulate(args) -> int:
    keys = ["preset", "p", "n", "epsilon", "gamma_c", "k_grid", "replicates",
            "estimator", "seed", "threads", "format", "output"]
    eff = _merge_config(args, keys)
    if eff["replicates"] is not None and eff["replicates"] < 1:
        raise UsageError("--replicates must be >= 1")

    jobs = []
    if eff["preset"] is not None:
        if eff["preset"] not in _PRESETS:
            raise UsageError(f"unknown preset {eff['preset']!r}")
        ps = _PRESETS[eff["preset"]]
        for p in ps["p_list"]:
            jobs.append(dict(
                p=p, n=10 * p, epsilon=ps["epsilon"], gamma_c=ps["gamma_c"],
                k_grid=ps["k_grid"],
                replicates=eff["replicates"] or ps["replicates"],
                estimators=ps["estimators"],
            ))
    else:
        if eff["p"] is None or eff["n"] is None:
            raise UsageError("simulate requires --preset or both --p and --n")
        if not eff["estimator"]:
            raise UsageError("simulate requires at least one --estimator")
        k_grid = eff["k_grid"]
        if isinstance(k_grid, str):
            k_grid = [float(x) for x in k_grid.split(",") if x]
        jobs.append(dict(
            p=eff["p"], n=eff["n"], epsilon=eff["epsilon"] or 0.0,
            gamma_c=eff["gamma_c"] or 0.0,
            k_grid=k_grid or list(range(1, 13)),
            replicates=eff["replicates"] or 100,
            estimators=eff["estimator"],
        ))

    outputs = []
    for job in jobs:
        estimators = tuple(_parse_estimator(tag) for tag in job["estimators"])
        sc = Scenario(
            p=job["p"], n=job["n"], epsilon=job["epsilon"], gamma_c=job["gamma_c"],
            k_grid=tuple(job["k_grid"]), replicates=job["replicates"],
            seed=eff["seed"], estimators=estimators,
        )
        report = run_scenario(sc, threads=eff["threads"])
        outputs.append(report)

    if eff["format"] == "json":
        payload = {"config": {k: eff[k] for k in sorted(eff) if k != "estimator"},
                   "runs": [_report_to_dict(r) for r in outputs]}
        payload["config"]["estimators"] = eff["estimator"]
        _write_text(eff["output"], _json_dumps(payload))
    else:
        blocks = []
        for report in outputs:
            sc = report.scenario
            blocks.append(f"# p={sc.p} n={sc.n} epsilon={sc.epsilon} "
                          f"gamma_c={sc.gamma_c} replicates={sc.replicates} seed={sc.seed}\n"
                          + _report_to_tsv(report))
        _write_text(eff["output"], "".join(blocks))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    keys = ["family", "start", "rho", "p", "n", "target", "replicates",
            "seed", "format", "output"]
    eff = _merge_config(args, keys)
    if eff["p"] is None or eff["n"] is None:
        raise UsageError("calibrate requires --p and --n")
    if eff["replicates"] is not None and eff["replicates"] < 1:
        raise UsageError("--replicates must be >= 1")
    res = calibrate_efficiency(
        family=eff["family"], start=eff["start"], rho=eff["rho"],
        p=eff["p"], n=eff["n"], target_eff=eff["target"],
        replicates=eff["replicates"] or 100, seed=eff["seed"],
    )
    payload = {
        "config": {k: eff[k] for k in sorted(eff)},
        "constant": res.constant,
        "efficiency": res.efficiency,
        "attainable": res.attainable,
        "evaluations": [[c, e] for c, e in res.evaluations],
    }
    if eff["format"] == "json":
        _write_text(eff["output"], _json_dumps(payload))
    else:
        rows = [["constant", "efficiency", "attainable"],
                [res.constant, res.efficiency, str(res.attainable)]]
        _write_text(eff["output"], _tsv(rows))
    return EXIT_OK


def _add_common(sp, fmt_default="json"):
    sp.add_argument("--config", help="JSON config file; flags override its values")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(default_seed=0)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(default_threads=1)
    sp.add_argument("--format", choices=["tsv", "json"], default=None)
    sp.set_defaults(default_format=fmt_default)
    sp.add_argument("--output", "-o", default=None,
                    help="output path; '-' or omitted writes to stdout")
    sp.set_defaults(default_output=None)


def _add_estimator_flags(sp):
    sp.add_argument("--family", default=None,
                    choices=[f.value for f in Family])
    sp.set_defaults(default_family="mm")
    sp.add_argument("--rho", default=None, choices=["bisquare", "optimal"])
    sp.set_defaults(default_rho="optimal")
    sp.add_argument("--start", default=None, choices=["mve", "ksd", "subsampling"])
    sp.set_defaults(default_start="ksd")
    sp.add_argument("--tuning", type=float, default=None)
    sp.set_defaults(default_tuning=None)
    sp.add_argument("--delta", type=float, default=None)
    sp.set_defaults(default_delta=None)
    sp.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    sp.set_defaults(default_max_iter=200)
    sp.add_argument("--tol", type=float, default=None)
    sp.set_defaults(default_tol=1e-7)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="robustcov",
        description="Robust multivariate location/scatter estimation and evaluation",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("estimate", help="fit an estimator to a CSV dataset")
    sp.add_argument("--input", "-i", default=None)
    _add_estimator_flags(sp)
    _add_common(sp)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("qq", help="ordered squared distances vs chi-square quantiles")
    sp.add_argument("--input", "-i", default=None)
    sp.add_argument("--estimate", default=None,
                    help="JSON report from 'estimate'; skips refitting")
    sp.set_defaults(default_estimate=None)
    _add_estimator_flags(sp)
    _add_common(sp, fmt_default="tsv")
    sp.set_defaults(func=cmd_qq)

    sp = sub.add_parser("weights", help="sample a weight function on a grid")
    sp.add_argument("--family", default=None, choices=list(_WEIGHT_FAMILIES))
    sp.set_defaults(default_family="bisquare")
    sp.add_argument("--c", type=float, default=None)
    sp.set_defaults(default_c=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.set_defaults(default_alpha=None)
    sp.add_argument("--gamma", type=float, default=None)
    sp.set_defaults(default_gamma=None)
    sp.add_argument("--p", type=int, default=None)
    sp.set_defaults(default_p=None)
    sp.add_argument("--t-max", dest="t_max", type=float, default=None)
    sp.set_defaults(default_t_max=20.0)
    sp.add_argument("--points", type=int, default=None)
    sp.set_defaults(default_points=201)
    _add_common(sp, fmt_default="tsv")
    sp.set_defaults(func=cmd_weights)

    sp = sub.add_parser("simulate", help="run a contamination scenario")
    sp.add_argument("--preset", default=None, choices=list(_PRESETS))
    sp.set_defaults(default_preset=None)
    sp.add_argument("--p", type=int, default=None)
    sp.set_defaults(default_p=None)
    sp.add_argument("--n", type=int, default=None)
    sp.set_defaults(default_n=None)
    sp.add_argument("--epsilon", type=float, default=None)
    sp.set_defaults(default_epsilon=0.0)
    sp.add_argument("--gamma-c", dest="gamma_c", type=float, default=None)
    sp.set_defaults(default_gamma_c=0.0)
    sp.add_argument("--k-grid", dest="k_grid", default=None,
                    help="comma-separated outlier sizes (default 1..12)")
    sp.set_defaults(default_k_grid=None)
    sp.add_argument("--replicates", type=int, default=None)
    sp.set_defaults(default_replicates=None)
    sp.add_argument("--estimator", action="append", default=None,
                    help="family[:rho[:start]], repeatable")
    sp.set_defaults(default_estimator=None)
    _add_common(sp, fmt_default="tsv")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("calibrate", help="Monte Carlo tuning-constant search")
    sp.add_argument("--family", default=None,
                    choices=["mm", "tau", "rocke", "stahel-donoho"])
    sp.set_defaults(default_family="mm")
    sp.add_argument("--start", default=None, choices=["mve", "ksd", "subsampling"])
    sp.set_defaults(default_start="ksd")
    sp.add_argument("--rho", default=None, choices=["bisquare", "optimal"])
    sp.set_defaults(default_rho="optimal")
    sp.add_argument("--p", type=int, default=None)
    sp.set_defaults(default_p=None)
    sp.add_argument("--n", type=int, default=None)
    sp.set_defaults(default_n=None)
    sp.add_argument("--target", type=float, default=None)
    sp.set_defaults(default_target=0.90)
    sp.add_argument("--replicates", type=int, default=None)
    sp.set_defaults(default_replicates=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_calibrate)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RobustcovError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
