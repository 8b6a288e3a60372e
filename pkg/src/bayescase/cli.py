"""Command-line front end.

Each subcommand loads its inputs, runs one or more independently seeded
chains, and writes CSV outputs plus ``manifest.json`` to the output directory.

Exit codes: 0 success, 1 invalid input or configuration, 2 sampler failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import dlm, gp, spatial, species
from .mcmc import BoundedTransform, ChainSpec, RwmKernel, SamplerError, ValidationError, split_rhat, summarize
from .tables import as_float, as_int, read_table, write_columns, write_csv

SCHEMA_VERSION = 1
OUTPUT_ENV = "BAYESCASE_OUTPUT_DIR"
DEFAULT_OUTPUT = "bayescase-out"

COMMON = {"seed": None, "chains": 1, "output": None, "config": None}
DEFAULTS: dict[str, dict] = {
    "gp-sim": {"n": 100, "sigma": 0.2},
    "gp-fit": {"input": None, "iterations": 6000, "burn_in": 1000, "thin": 2, "alpha": 1.0,
               "step_size": 1.0, "a_phi": 0.1, "b_phi": 10.0},
    "ar-fit": {"input": None, "p": 3, "draws": 25000},
    "dlm-fit": {"input": None, "p": 3, "iterations": 3000, "burn_in": 1000, "thin": 1,
                "outlier_prob": 0.2, "obs_var_base": 0.01, "outlier_var_add": 0.1, "b_phi": 0.25,
                "a_omega": 2.0, "b_omega": None},
    "spatial-fit": {"panel": None, "covariates": None, "adjacency": None, "region_adjacency": None,
                    "intercept": True, "iterations": 5000, "burn_in": 1000, "thin": 2,
                    "sigma2_0": 100.0, "nu_0": 2, "a_tau": 2.0, "b_tau": 2.0, "a_lambda": 2.0,
                    "b_lambda": None},
    "species-fit": {"input": None, "process": "crp", "iterations": 6000, "burn_in": 1000, "thin": 50,
                    "a_theta": None, "b_theta": None, "a_sigma": 1.0, "b_sigma": 1.0,
                    "step_theta": None, "step_sigma": 0.2},
}
DEFAULTS["species-predict"] = dict(DEFAULTS["species-fit"], trace=None, n_star=50, method="both",
                                   replicates=1000)
SPECIES_PROCESS_DEFAULTS = {"crp": {"a_theta": 1.0, "b_theta": 1.0, "step_theta": 0.1},
                            "pyp": {"a_theta": 723.0, "b_theta": 100.0, "step_theta": 0.2}}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _chain_flags(p):
    p.add_argument("--iterations", type=int, help="total iterations including burn-in")
    p.add_argument("--burn-in", type=int)
    p.add_argument("--thin", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bayescase", description="Seeded MCMC case studies.",
                     argument_default=argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of option values; flags take precedence")
        p.add_argument("--seed", type=int, help="master seed (drawn from entropy and printed if absent)")
        p.add_argument("--chains", type=int, help="independently seeded chains run in parallel")
        p.add_argument("--output", help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
        return p

    p = add("gp-sim", "simulate the regression test-bed data")
    p.add_argument("--n", type=int)
    p.add_argument("--sigma", type=float)

    p = add("gp-fit", "Gaussian-process regression sampler")
    p.add_argument("--input", help="CSV with columns x,y")
    _chain_flags(p)
    p.add_argument("--alpha", type=float, help="power-exponential exponent in (0, 2]")
    p.add_argument("--step-size", type=float, help="initial proposal sd for logit phi")
    p.add_argument("--a-phi", type=float)
    p.add_argument("--b-phi", type=float)

    p = add("ar-fit", "AR(p) posterior by direct sampling")
    p.add_argument("--input", help="CSV with columns t,y")
    p.add_argument("--p", type=int)
    p.add_argument("--draws", type=int)

    p = add("dlm-fit", "AR(p) state-space model with additive outliers")
    p.add_argument("--input", help="CSV with columns t,y")
    p.add_argument("--p", type=int)
    _chain_flags(p)
    for flag in ("outlier-prob", "obs-var-base", "outlier-var-add", "b-phi", "a-omega", "b-omega"):
        p.add_argument(f"--{flag}", type=float)

    p = add("spatial-fit", "spatiotemporal CAR probit-t model")
    p.add_argument("--panel", help="CSV unit,t,y")
    p.add_argument("--covariates", help="CSV unit,x1..xK[,region]")
    p.add_argument("--adjacency", help="CSV unit_a,unit_b")
    p.add_argument("--region-adjacency", help="CSV region_a,region_b")
    p.add_argument("--no-intercept", dest="intercept", action="store_false")
    _chain_flags(p)
    p.add_argument("--sigma2-0", type=float)
    p.add_argument("--nu-0", type=int)
    for flag in ("a-tau", "b-tau", "a-lambda", "b-lambda"):
        p.add_argument(f"--{flag}", type=float)

    for name, help_ in (("species-fit", "CRP / Pitman-Yor posterior from abundance data"),
                        ("species-predict", "predict new species in a further sample")):
        p = add(name, help_)
        p.add_argument("--input", help="CSV with columns size,count")
        p.add_argument("--process", choices=("crp", "pyp"))
        _chain_flags(p)
        for flag in ("a-theta", "b-theta", "a-sigma", "b-sigma", "step-theta", "step-sigma"):
            p.add_argument(f"--{flag}", type=float)
        if name == "species-predict":
            p.add_argument("--trace", help="trace.csv from species-fit (fitted afresh if absent)")
            p.add_argument("--n-star", type=int)
            p.add_argument("--method", choices=("sim", "closed", "both"))
            p.add_argument("--replicates", type=int, help="simulation runs per posterior draw")
    return parser


def parse_config(argv, environ=None) -> dict:
    """Merge defaults, an optional JSON config file, then explicit flags."""
    environ = os.environ if environ is None else environ
    ns = vars(build_parser().parse_args(argv))
    cmd = ns.pop("subcommand")
    allowed = dict(COMMON, **DEFAULTS[cmd])
    cfg = dict(allowed)
    if ns.get("config"):
        path = Path(ns["config"])
        if not path.is_file():
            raise ValidationError(f"config: file not found: {path}")
        try:
            file_vals = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config: invalid JSON ({exc})") from None
        if not isinstance(file_vals, dict):
            raise ValidationError("config: top level must be an object")
        for key, val in file_vals.items():
            k = key.replace("-", "_")
            if k not in allowed or k == "config":
                raise ValidationError(f"config: unknown option {key!r} for {cmd}")
            cfg[k] = val
    cfg.update(ns)
    cfg["subcommand"] = cmd
    if cfg["output"] is None:
        cfg["output"] = environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
    if cmd.startswith("species"):
        if cfg["process"] not in SPECIES_PROCESS_DEFAULTS:
            raise ValidationError(f"process: expected crp or pyp, got {cfg['process']!r}")
        for k, v in SPECIES_PROCESS_DEFAULTS[cfg["process"]].items():
            if cfg[k] is None:
                cfg[k] = v
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if not isinstance(cfg["chains"], int) or cfg["chains"] < 1:
        raise ValidationError("chains: must be a positive integer")
    if cfg["seed"] is not None and (not isinstance(cfg["seed"], int) or cfg["seed"] < 0):
        raise ValidationError("seed: must be a non-negative integer")
    if "iterations" in cfg:
        try:
            ChainSpec(cfg["iterations"], cfg["burn_in"], cfg["thin"])
        except (ValidationError, TypeError) as exc:
            raise ValidationError(f"chain: {exc}") from None
    for key in ("input", "panel", "covariates", "adjacency", "region_adjacency", "trace"):
        val = cfg.get(key)
        if key in cfg and val is not None and not Path(val).is_file():
            raise ValidationError(f"{key}: file not found: {val}")
    for key in ("input", "panel", "covariates", "adjacency"):
        if key in cfg and cfg[key] is None:
            raise ValidationError(f"{key}: required for {cfg['subcommand']}")
    out = Path(cfg["output"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"output: cannot create {out} ({exc.strerror})") from None
    if not os.access(out, os.W_OK | os.X_OK):
        raise ValidationError(f"output: directory {out} is not writable")


def chain_seeds(seed: int, n: int) -> list[int]:
    if n == 1:
        return [seed]
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _chain(cfg, seed) -> ChainSpec:
    return ChainSpec(cfg["iterations"], cfg["burn_in"], cfg["thin"], seed)


# Data loading -----------------------------------------------------------------


def load_xy(path) -> gp.GpData:
    cols = read_table(path, ["x", "y"])
    return gp.GpData(as_float(cols["x"], "x", path), as_float(cols["y"], "y", path))


def load_series(path) -> np.ndarray:
    cols = read_table(path, ["t", "y"])
    t = as_int(cols["t"], "t", path)
    if np.any(np.diff(t) != 1):
        raise ValidationError(f"{path}: column 't' must be consecutive increasing integers")
    return as_float(cols["y"], "y", path)


def load_abundance(path) -> species.AbundanceData:
    cols = read_table(path, ["size", "count"])
    return species.AbundanceData.from_frequencies(as_int(cols["size"], "size", path),
                                                  as_int(cols["count"], "count", path))


def _edge_pairs(path, index: dict[str, int], what: str) -> np.ndarray:
    cols = read_table(path, [])
    names = list(cols)
    if len(names) < 2:
        raise ValidationError(f"{path}: need two columns of {what} labels")
    a, b = cols[names[0]], cols[names[1]]
    try:
        return np.array([[index[u], index[v]] for u, v in zip(a, b)], dtype=int).reshape(-1, 2)
    except KeyError as exc:
        raise ValidationError(f"{path}: unknown {what} {exc.args[0]!r}") from None


def load_spatial(cfg) -> tuple[spatial.PanelData, spatial.Lattice, list[str], list[str], list[str]]:
    cpath = cfg["covariates"]
    cols = read_table(cpath, ["unit"])
    units = cols["unit"]
    if len(set(units)) != len(units):
        raise ValidationError(f"{cpath}: duplicate unit")
    index = {u: i for i, u in enumerate(units)}
    xnames = [c for c in cols if c not in ("unit", "region")]
    X = np.column_stack([as_float(cols[c], c, cpath) for c in xnames]) if xnames else np.zeros((len(units), 0))
    if cfg["intercept"]:
        X = np.column_stack([np.ones(len(units)), X])
        xnames = ["intercept"] + xnames
    if X.shape[1] == 0:
        raise ValidationError("covariates: no covariates and no intercept")
    regions: list[str] = []
    region = None
    if "region" in cols:
        regions = list(dict.fromkeys(cols["region"]))
        rindex = {r: i for i, r in enumerate(regions)}
        region = np.array([rindex[r] for r in cols["region"]])
    edges = _edge_pairs(cfg["adjacency"], index, "unit")
    redges = ()
    if cfg["region_adjacency"] is not None:
        if not regions:
            raise ValidationError("region_adjacency: covariates file has no region column")
        redges = _edge_pairs(cfg["region_adjacency"], {r: i for i, r in enumerate(regions)}, "region")
    lattice = spatial.Lattice.from_edges(edges, len(units), region=region, region_edges=redges,
                                         n_regions=len(regions))
    ppath = cfg["panel"]
    pc = read_table(ppath, ["unit", "t", "y"])
    t = as_int(pc["t"], "t", ppath)
    yv = as_int(pc["y"], "y", ppath)
    T = int(t.max())
    if t.min() < 1:
        raise ValidationError(f"{ppath}: t must start at 1")
    y = np.full((len(units), T), -1)
    for u, ti, yi in zip(pc["unit"], t, yv):
        if u not in index:
            raise ValidationError(f"{ppath}: unknown unit {u!r}")
        if y[index[u], ti - 1] != -1:
            raise ValidationError(f"{ppath}: duplicate row for unit {u!r}, t={ti}")
        y[index[u], ti - 1] = yi
    if np.any(y < 0):
        raise ValidationError(f"{ppath}: panel is incomplete (every unit needs every t)")
    return spatial.PanelData(y, X, lattice.Z()), lattice, units, xnames, regions


# Per-chain runners (module level so they can be sent to worker processes) ----


def _run_gp(cfg, data, seed):
    hyper = gp.empirical_bayes(data, cfg["alpha"])
    hyper = gp.GpHyper(**{**hyper.__dict__, "a_phi": cfg["a_phi"], "b_phi": cfg["b_phi"]})
    fit = gp.fit_gp(data, hyper, _chain(cfg, seed), cfg["step_size"])
    return {"traces": fit.scalar_traces(), "acceptance": {"phi": fit.phi_acceptance},
            "theta": fit.theta}


def _run_ar(cfg, y, seed):
    fit = dlm.ar_fit_direct(y, cfg["p"], cfg["draws"], seed)
    traces = {f"phi{j + 1}": fit.phi_draws[:, j] for j in range(cfg["p"])}
    traces["v"] = fit.v_draws
    return {"traces": traces, "acceptance": {}}


def _dlm_spec(cfg) -> dlm.OutlierDlmSpec:
    return dlm.OutlierDlmSpec(p=cfg["p"], outlier_prob=cfg["outlier_prob"], obs_var_base=cfg["obs_var_base"],
                              outlier_var_add=cfg["outlier_var_add"], b_phi=cfg["b_phi"],
                              a_omega=cfg["a_omega"], b_omega=cfg["b_omega"])


def _run_dlm(cfg, y, seed):
    fit = dlm.fit_outlier_dlm(y, _dlm_spec(cfg), _chain(cfg, seed))
    return {"traces": fit.scalar_traces(), "acceptance": {},
            "per_t": {"prob_outlier": fit.prob_outlier, "alpha_mean": fit.alpha_mean,
                      "x_mean": fit.x_mean, "fitted_mean": fit.fitted_mean}}


def _spatial_hyper(cfg, lattice) -> spatial.SpatialHyper:
    kw = {k: cfg[k] for k in ("sigma2_0", "nu_0", "a_tau", "b_tau", "a_lambda")}
    if cfg["b_lambda"] is not None:
        kw["b_lambda"] = cfg["b_lambda"]
    return spatial.SpatialHyper.default(lattice, **kw)


def _run_spatial(cfg, payload, seed):
    data, lattice, _units, xnames, regions = payload
    fit = spatial.fit_spatial(data, lattice, _spatial_hyper(cfg, lattice), _chain(cfg, seed))
    traces = {f"beta_{n}": fit.beta[:, k] for k, n in enumerate(xnames)}
    traces.update({f"gamma_{r}": fit.gamma[:, l] for l, r in enumerate(regions)})
    traces["xi"] = fit.xi
    for name, arr in (("kappa", fit.kappa), ("tau", fit.tau), ("lambda", fit.lam)):
        traces.update({f"{name}_{t + 1}": arr[:, t] for t in range(arr.shape[1])})
    return {"traces": traces, "acceptance": {}, "random_effects": fit.random_effects_mean,
            "max_abs_phi_sum": fit.max_abs_phi_sum}


def _run_species(cfg, data, seed):
    chain = _chain(cfg, seed)
    if cfg["process"] == "crp":
        kernel = RwmKernel(BoundedTransform.log_lower(0.0), step_size=cfg["step_theta"])
        fit = species.fit_crp(data, species.CrpPrior(cfg["a_theta"], cfg["b_theta"]), chain, kernel)
    else:
        prior = species.PypPrior(cfg["a_sigma"], cfg["b_sigma"], cfg["a_theta"], cfg["b_theta"])
        fit = species.fit_pyp(data, prior, chain, cfg["step_sigma"], cfg["step_theta"])
    return {"traces": fit.scalar_traces(), "acceptance": fit.acceptance}


RUNNERS = {"gp-fit": _run_gp, "ar-fit": _run_ar, "dlm-fit": _run_dlm, "spatial-fit": _run_spatial,
           "species-fit": _run_species, "species-predict": _run_species}


def _run_chains(cmd, cfg, payload, seeds) -> list[dict]:
    fn = RUNNERS[cmd]
    if len(seeds) == 1:
        return [fn(cfg, payload, seeds[0])]
    with ProcessPoolExecutor(max_workers=min(len(seeds), os.cpu_count() or 1)) as pool:
        futures = [pool.submit(fn, cfg, payload, s) for s in seeds]
        return [f.result() for f in futures]


# Outputs ------------------------------------------------------------------------


def _write_traces(out: Path, results: list[dict]) -> None:
    if len(results) == 1:
        write_columns(out / "trace.csv", results[0]["traces"])
        return
    for c, res in enumerate(results, start=1):
        write_columns(out / f"trace_chain{c}.csv", res["traces"])


def pooled_summaries(results: list[dict]) -> dict[str, dict]:
    out = {}
    for name in results[0]["traces"]:
        chains = [np.asarray(r["traces"][name]) for r in results]
        s = summarize(np.concatenate(chains)).as_dict()
        if len(chains) > 1:
            s["ess"] = float(sum(summarize(c).ess for c in chains))
            s["split_rhat"] = split_rhat(chains)
        out[name] = s
    return out


def _acceptance(results):
    out = {}
    for key in results[0]["acceptance"]:
        out[key] = [float(r["acceptance"][key]) for r in results]
    return out


def _summary_csv(path: Path, summaries: dict[str, dict]) -> None:
    write_csv(path, ["parameter", "mean", "sd", "q025", "q50", "q975", "ess"],
              ([k, s["mean"], s["sd"], s["q025"], s["q50"], s["q975"], s["ess"]] for k, s in summaries.items()))


def _outputs_gp_sim(cfg, out, seed) -> dict:
    data, f = gp.synth_gp_data(cfg["n"], cfg["sigma"], seed)
    write_columns(out / "data.csv", {"x": data.x, "y": data.y})
    write_columns(out / "truth.csv", {"x": data.x, "f": f})
    return {"files": ["data.csv", "truth.csv"]}


def _outputs_gp(cfg, out, results, data) -> dict:
    theta = np.vstack([r["theta"] for r in results])
    band = gp.posterior_band(data.x, theta)
    write_columns(out / "band.csv", {k: band[k] for k in ("x", "f_mean", "f_q025", "f_q975")})
    return {"files": ["band.csv"]}


def _outputs_dlm(cfg, out, results, y) -> dict:
    avg = {k: np.mean([r["per_t"][k] for r in results], axis=0) for k in results[0]["per_t"]}
    t = np.arange(1, y.size + 1)
    write_columns(out / "outliers.csv", {"t": t, "prob_outlier": avg["prob_outlier"], "alpha_mean": avg["alpha_mean"]})
    write_columns(out / "fit.csv", {"t": t, "x_mean": avg["x_mean"], "fitted_mean": avg["fitted_mean"]})
    return {"files": ["outliers.csv", "fit.csv"], "flagged_t": [int(v) for v in t[avg["prob_outlier"] > 0.5]]}


def _outputs_spatial(cfg, out, results, payload, summaries) -> dict:
    data, _lat, units, _x, _r = payload
    effects = {k: v for k, v in summaries.items() if k.startswith(("beta_", "gamma_")) or k == "xi"}
    write_csv(out / "effects.csv", ["parameter", "mean", "q025", "q975"],
              ([k, s["mean"], s["q025"], s["q975"]] for k, s in effects.items()))
    re = np.mean([r["random_effects"] for r in results], axis=0)
    I, T = re.shape
    write_csv(out / "random_effects.csv", ["unit", "t", "theta_plus_phi_mean"],
              ([units[i], t + 1, re[i, t]] for i in range(I) for t in range(T)))
    return {"files": ["effects.csv", "random_effects.csv"],
            "max_abs_phi_sum": max(r["max_abs_phi_sum"] for r in results)}


def _load_trace(path, process) -> tuple[np.ndarray, np.ndarray | None]:
    cols = read_table(path, ["theta"])
    theta = as_float(cols["theta"], "theta", path)
    sigma = as_float(cols["sigma"], "sigma", path) if "sigma" in cols else None
    if process == "crp" and sigma is not None:
        raise ValidationError(f"trace: {path} holds a Pitman-Yor trace but process is crp")
    if process == "pyp" and sigma is None:
        raise ValidationError(f"trace: {path} has no sigma column but process is pyp")
    return theta, sigma


def _outputs_predict(cfg, out, data, theta, sigma, seed) -> dict:
    methods = ["sim", "closed"] if cfg["method"] == "both" else [cfg["method"]]
    if "closed" in methods and sigma is not None:
        raise ValidationError("method: the closed-form predictor is available for the CRP only")
    if cfg["n_star"] < 0:
        raise ValidationError("n_star: must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    preds = []
    for method in methods:
        if method == "sim":
            pred = species.predict_new_species_sim(data, theta, cfg["n_star"], rng, sigma, cfg["replicates"])
        else:
            pred = species.predict_new_species_closed(data, theta, cfg["n_star"], rng)
        (out / method).mkdir(exist_ok=True)
        write_columns(out / method / "prediction.csv", {"k": np.arange(cfg["n_star"] + 1), "probability": pred.pmf})
        preds.append(pred)
    rows = [p.summary() for p in preds]
    write_csv(out / "prediction_summary.csv", ["method", "n_star", "mean", "sd", "q025", "q50", "q975"],
              ([r[k] for k in ("method", "n_star", "mean", "sd", "q025", "q50", "q975")] for r in rows))
    for r in rows:
        print(f"{r['method']}: mean {r['mean']:.3f}  sd {r['sd']:.3f}  95% [{r['q025']}, {r['q975']}]")
    files = [f"{m}/prediction.csv" for m in methods] + ["prediction_summary.csv"]
    extra = {"files": files, "prediction": rows}
    if len(preds) == 2:
        extra["total_variation"] = species.total_variation(preds[0].pmf, preds[1].pmf)
    return extra


def run(cfg: dict) -> dict:
    """Execute a parsed configuration and return the manifest (also written to disk)."""
    start = time.perf_counter()
    cmd = cfg["subcommand"]
    out = Path(cfg["output"])
    seed = cfg["seed"]
    manifest = {"schema_version": SCHEMA_VERSION, "library_version": __version__, "subcommand": cmd,
                "seed": seed, "config": {k: v for k, v in cfg.items() if k != "config"}}
    seeds = chain_seeds(seed, cfg["chains"])
    manifest["chain_seeds"] = seeds
    extra: dict = {}
    results: list[dict] = []
    if cmd == "gp-sim":
        extra = _outputs_gp_sim(cfg, out, seed)
    else:
        if cmd == "gp-fit":
            payload = load_xy(cfg["input"])
        elif cmd in ("ar-fit", "dlm-fit"):
            payload = load_series(cfg["input"])
        elif cmd == "spatial-fit":
            payload = load_spatial(cfg)
        else:
            payload = load_abundance(cfg["input"])
        if cmd == "species-predict" and cfg["trace"] is not None:
            theta, sigma = _load_trace(cfg["trace"], cfg["process"])
            results = [{"traces": {"theta": theta} | ({"sigma": sigma} if sigma is not None else {}),
                        "acceptance": {}}]
        else:
            results = _run_chains(cmd, cfg, payload, seeds)
            _write_traces(out, results)
        summaries = pooled_summaries(results)
        manifest["parameters"] = summaries
        manifest["acceptance"] = _acceptance(results)
        _summary_csv(out / "summary.csv", summaries)
        if cmd == "gp-fit":
            extra = _outputs_gp(cfg, out, results, payload)
        elif cmd == "dlm-fit":
            extra = _outputs_dlm(cfg, out, results, payload)
        elif cmd == "spatial-fit":
            extra = _outputs_spatial(cfg, out, results, payload, summaries)
        elif cmd == "species-predict":
            pooled = {k: np.concatenate([r["traces"][k] for r in results]) for k in results[0]["traces"]}
            extra = _outputs_predict(cfg, out, payload, pooled["theta"], pooled.get("sigma"), seed)
    manifest.update(extra)
    manifest["wall_clock_seconds"] = time.perf_counter() - start
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n",
                                       encoding="utf-8")
    return manifest


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
        if cfg["seed"] is None:
            cfg["seed"] = int(np.random.SeedSequence().generate_state(1)[0])
            print(f"seed: {cfg['seed']}")
        run(cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SamplerError as exc:
        print(f"sampler failure: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {cfg['output']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
