"""Command-line interface: ``bayespk {fit,simulate,ppc,loo,summary}``.

Settings resolve as built-in defaults, then an INI config file
(``--config``), then command-line flags.  Failures print one line
``ERROR <Class>: message`` to stderr and exit with 2 (invalid input),
3 (numerical failure) or 4 (file access).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import (config_hash, file_sha256, read_draws_csv, read_manifest, write_draws_csv,
                        write_manifest)
from .designs import fk_rows, multiple_dose_rows, population_rows, random_weights
from .events import EventValidationError, parse_events, read_events_csv
from .ivp import IntegrationError, OdeControls
from .linpk import ScheduleError
from .mcstats import KHAT_THRESHOLD, loo_compare, psis_loo, summarize, write_summary_csv
from .models import ConstraintViolation, get_model
from .models.fk import FKModel
from .models.population import POP_NAMES, TwoCptPopModel
from .nuts import SamplerConfig, SamplerInitError, nuts_sample

log = logging.getLogger("bayespk")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


class CliError(Exception):
    exit_code = EXIT_VALIDATION


class ArtifactMismatch(CliError):
    pass


class MissingArtifact(CliError):
    exit_code = EXIT_IO


@dataclass
class RunConfig:
    command: str
    model: str = "twocpt"
    data: str | None = None
    config: str | None = None
    out: str = "."
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    ode: OdeControls = field(default_factory=OdeControls)
    solver: str = "coupled"
    priors: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    init_file: str | None = None

    def model_kwargs(self) -> dict:
        kw = {"priors": self.priors or None}
        if self.model in ("fk", "fk_pkpd"):
            kw.update(solver=self.solver, ctrl=self.ode)
        return kw

    def hashable(self) -> dict:
        d = {"model": self.model, "sampler": asdict(self.sampler), "ode": asdict(self.ode),
             "solver": self.solver, "priors": self.priors}
        return d


# -- configuration ------------------------------------------------------------------

_SAMPLER_KEYS = {"chains": ("n_chains", int), "warmup": ("iter_warmup", int),
                 "sampling": ("iter_sampling", int), "seed": ("seed", int),
                 "target_accept": ("target_accept", float), "max_treedepth": ("max_treedepth", int),
                 "init": ("init", str)}
_ODE_KEYS = {"rtol": ("rtol", float), "atol": ("atol", float), "max_steps": ("max_num_step", int)}


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _parse_param_value(text: str):
    vals = _floats(text)
    return vals[0] if len(vals) == 1 else np.array(vals)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the optional INI file and command-line flags."""
    ini = configparser.ConfigParser()
    ini.optionxform = str  # parameter names are case-sensitive
    if getattr(args, "config", None):
        if not Path(args.config).is_file():
            raise FileNotFoundError(f"config file {args.config} not found")
        ini.read(args.config)
    samp: dict = {}
    ode: dict = {}
    if ini.has_section("sampler"):
        for k, v in ini.items("sampler"):
            if k not in _SAMPLER_KEYS:
                raise CliError(f"unknown [sampler] key {k!r}")
            name, typ = _SAMPLER_KEYS[k]
            samp[name] = typ(v)
    if ini.has_section("ode"):
        for k, v in ini.items("ode"):
            if k not in _ODE_KEYS:
                raise CliError(f"unknown [ode] key {k!r}")
            name, typ = _ODE_KEYS[k]
            ode[name] = typ(v)
    for flag, (name, _) in _SAMPLER_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            samp[name] = v
    for flag, (name, _) in _ODE_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            ode[name] = v
    init_file = None
    if samp.get("init", "prior") not in ("prior", "uniform"):
        init_file = samp.pop("init")
    model = getattr(args, "model", None) or (ini.get("model", "name") if ini.has_option("model", "name") else "twocpt")
    solver = getattr(args, "solver", None) or (ini.get("model", "solver") if ini.has_option("model", "solver") else "coupled")
    priors = {k: _floats(v) for k, v in ini.items("priors")} if ini.has_section("priors") else {}
    params = {k: _parse_param_value(v) for k, v in ini.items("params")} if ini.has_section("params") else {}
    for item in getattr(args, "param", None) or []:
        if "=" not in item:
            raise CliError(f"--param expects NAME=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        params[k.strip()] = _parse_param_value(v)
    cfg = RunConfig(command=args.command, model=model, data=getattr(args, "data", None),
                    config=getattr(args, "config", None), out=getattr(args, "out", None) or ".",
                    ode=OdeControls(**ode), solver=solver, priors=priors, params=params)
    cfg.sampler = SamplerConfig(**samp)
    cfg.init_file = init_file
    return cfg


def _load_init(path: str, names: list[str]) -> tuple:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"init file {path} not found")
    raw = json.loads(p.read_text())
    vals = []
    for n in names:
        if n in raw:
            vals.append(float(raw[n]))
            continue
        base, _, idx = n.partition(".")
        if base in raw:
            arr = np.asarray(raw[base], dtype=float)
            vals.append(float(arr[tuple(int(i) - 1 for i in idx.split("."))]) if idx else float(arr))
            continue
        raise CliError(f"init file {path} has no value for {n}")
    return tuple(vals)


# -- commands -----------------------------------------------------------------------

def _prepare(cfg: RunConfig, require_dv: bool = True):
    if not cfg.data:
        raise CliError("--data is required")
    model = get_model(cfg.model, **cfg.model_kwargs())
    schedule = read_events_csv(cfg.data, n_cmt=model.n_cmt)
    data = model.prepare(schedule, require_dv=require_dv)
    return model, schedule, data


def _gq_rng(seed: int, chain: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, chain, iteration])


def cmd_fit(cfg: RunConfig) -> int:
    model, _, data = _prepare(cfg)
    if data.n_obs == 0:
        raise CliError("the dataset has no usable observations")
    names = model.param_names(data)
    samp = cfg.sampler
    if cfg.init_file is not None:
        samp = SamplerConfig(**{**asdict(samp), "init": "values",
                                "init_values": _load_init(cfg.init_file, names)})
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("fitting %s: %d observations, %d parameters, %d chains x (%d + %d)", model.name,
             data.n_obs, len(names), samp.n_chains, samp.iter_warmup, samp.iter_sampling)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        draws = nuts_sample(model, data, samp)
    for w in caught:
        # floating-point warnings from rejected trial points during warmup are noise
        (log.debug if issubclass(w.category, RuntimeWarning) else log.warning)("%s", w.message)
    ll = np.zeros((draws.n_chains, draws.n_iter, data.n_obs))
    for c in range(draws.n_chains):
        for i in range(draws.n_iter):
            ll[c, i] = model.generated_quantities(data, draws.values[c, i], _gq_rng(samp.seed, c, i))["log_lik"]
    write_draws_csv(out / "draws.csv", draws, ll, data.obs_id)
    lines = []
    if samp.iter_sampling == 0:
        (out / "summary.csv").unlink(missing_ok=True)
        lines.append("WARNING no sampling iterations were run; draws.csv holds warmup draws only")
    else:
        rows = summarize(draws)
        write_summary_csv(rows, out / "summary.csv")
        for r in rows:
            if r.rhat is not None and r.rhat > 1.01:
                lines.append(f"RHAT {r.variable} {r.rhat:.4f} > 1.01")
        for r in rows:
            for label, v in (("ESS_BULK", r.ess_bulk), ("ESS_TAIL", r.ess_tail)):
                if v is not None and v < 100:
                    lines.append(f"{label} {r.variable} {v:.1f} < 100")
        ndiv = draws.divergences()
        if ndiv:
            lines.append(f"DIVERGENT {ndiv} transitions after warmup")
        hits = draws.treedepth_hits(samp.max_treedepth)
        if hits:
            lines.append(f"TREEDEPTH {hits} transitions hit max_treedepth={samp.max_treedepth}")
    (out / "diagnostics.txt").write_text("".join(l + "\n" for l in lines))
    manifest = {
        "model": model.name, "seed": samp.seed, "config_hash": config_hash(cfg.hashable()),
        "config": cfg.hashable(), "param_names": names, "data": str(Path(cfg.data).resolve()),
        "data_sha256": file_sha256(cfg.data), "obs_id": [int(i) for i in data.obs_id],
        "n_chains": draws.n_chains, "iter_warmup": samp.iter_warmup,
        "iter_sampling": samp.iter_sampling, "stepsize": [float(s) for s in draws.stepsize],
        "version": __version__,
    }
    write_manifest(out / "manifest.json", manifest)
    for l in lines:
        log.warning("%s", l)
    log.info("wrote %s", out)
    return EXIT_OK


def _sim_theta(model, data, params: dict, rng) -> dict:
    names = [b.name for b in model.blocks(data)]
    theta = {}
    for b in model.blocks(data):
        n = b.name
        if n in params:
            v = np.asarray(params[n], dtype=float)
            if v.size != int(np.prod(b.shape or ())):
                raise CliError(f"parameter {n} needs {int(np.prod(b.shape or ()))} values, got {v.size}")
            theta[n] = float(v) if not b.shape else v.reshape(b.shape)
        elif isinstance(model, TwoCptPopModel) and n == "theta":
            for _ in range(1000):
                x = model.sample_prior_block("theta", (data.n_subjects, 5), theta, data, rng)
                try:
                    model.unconstrain(data, {**theta, "theta": x})
                except ConstraintViolation:
                    continue
                theta["theta"] = x
                break
            else:
                raise ConstraintViolation("could not draw subject parameters above the ka bound")
        else:
            raise CliError(f"simulate needs a value for parameter {n!r} (use --param {n}=...)")
    extra = set(params) - set(names)
    if extra:
        raise CliError(f"unknown parameters for model {model.name}: {sorted(extra)}")
    return theta


def _design_rows(name: str, n_subjects: int, rng) -> list[dict]:
    if name == "twocpt":
        return multiple_dose_rows()
    if name == "population":
        return population_rows(n_subjects, random_weights(n_subjects, rng))
    if name == "fk":
        return fk_rows()
    raise CliError(f"unknown design {name!r}; choose twocpt, population or fk")


def cmd_simulate(cfg: RunConfig, design: str | None = None, n_subjects: int = 10) -> int:
    rng = np.random.default_rng(cfg.sampler.seed)
    model = get_model(cfg.model, **cfg.model_kwargs())
    if cfg.data:
        with open(cfg.data, newline="") as fh:
            rows = list(csv.DictReader(fh))
    else:
        rows = _design_rows(design or {"twocpt_pop": "population", "fk": "fk", "fk_pkpd": "fk"}
                            .get(cfg.model, "twocpt"), n_subjects, np.random.default_rng([cfg.sampler.seed, 1]))
    rows = [{k.strip().upper(): v for k, v in r.items()} for r in rows]
    for r in rows:
        if "DV" in r and str(r.get("EVID", "0")).strip() in ("0", "0.0"):
            r["DV"] = "."
    schedule = parse_events(rows, n_cmt=model.n_cmt)
    if any(r.addl for r in schedule):
        raise CliError("simulate templates must list every dose explicitly (ADDL=0)")
    data = model.prepare(schedule, require_dv=False)
    theta = _sim_theta(model, data, cfg.params, rng)
    dv = model.simulate(data, theta, rng)
    by_row = {}
    obs_rows = [r.origin_row for r in data.schedule.records if r.evid == 0]
    for oid, v in zip(data.obs_id, dv):
        by_row[obs_rows[oid - 1]] = v
    out = Path(cfg.out)
    if out.suffix.lower() != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "simulated.csv"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys())
    if "DV" not in cols:
        cols.append("DV")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i, r in enumerate(rows):
            r = dict(r)
            if i in by_row:
                r["DV"] = repr(float(by_row[i]))
            elif "DV" not in r or r["DV"] in (None, ""):
                r["DV"] = "."
            w.writerow([r.get(c, "") for c in cols])
    log.info("wrote %s", out)
    return EXIT_OK


def _load_fit(fit_dir: str, data_override: str | None = None):
    d = Path(fit_dir)
    for f in ("manifest.json", "draws.csv"):
        if not (d / f).is_file():
            raise MissingArtifact(f"{d / f} not found; run 'bayespk fit' first")
    man = read_manifest(d / "manifest.json")
    table = read_draws_csv(d / "draws.csv")
    if table.param_names != man["param_names"]:
        raise ArtifactMismatch("draws.csv parameter columns do not match manifest.json")
    return man, table


def _model_from_manifest(man: dict, data_path: str | None):
    conf = man.get("config", {})
    kw = {"priors": conf.get("priors") or None}
    if man["model"] == "fk":
        kw.update(solver=conf.get("solver", "coupled"), ctrl=OdeControls(**conf.get("ode", {})))
    model = get_model(man["model"], **kw)
    path = data_path or man["data"]
    schedule = read_events_csv(path, n_cmt=model.n_cmt)
    data = model.prepare(schedule, require_dv=True)
    names = model.param_names(data)
    if names != man["param_names"]:
        raise ArtifactMismatch(f"model {model.name} on {path} has parameters {names[:6]}..., "
                               f"but the fit stored {man['param_names'][:6]}...")
    return model, data


def cmd_ppc(cfg: RunConfig, fit_dir: str) -> int:
    man, table = _load_fit(fit_dir)
    model, data = _model_from_manifest(man, cfg.data)
    keep = ~table.warmup if (~table.warmup).any() else np.ones(len(table.chain), bool)
    vals = table.columns(man["param_names"])[keep]
    chains, iters = table.chain[keep], table.iter[keep]
    is_pop = isinstance(model, TwoCptPopModel)
    reps = np.zeros((len(vals), data.n_obs))
    new = np.zeros_like(reps) if is_pop else None
    for s in range(len(vals)):
        gq = model.generated_quantities(data, vals[s], _gq_rng(man["seed"], chains[s] - 1, iters[s] - 1))
        reps[s] = gq["cObsPred"]
        if is_pop:
            new[s] = gq["cObsNewPred"]
    q = np.quantile(reps, [0.05, 0.5, 0.95], axis=0)
    header = ["obs_id", "subject_id", "time", "cmt", "observed", "q5", "q50", "q95"]
    if is_pop:
        qn = np.nanquantile(new, [0.05, 0.5, 0.95], axis=0)
        header += ["new_q5", "new_q50", "new_q95"]
    out = Path(cfg.out) if cfg.out != "." else Path(fit_dir)
    out.mkdir(parents=True, exist_ok=True)
    sids = [sd.subject_id for sd in data.subjects]
    with open(out / "ppc.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(data.n_obs):
            row = [int(data.obs_id[k]), sids[data.obs_subject[k]], repr(float(data.obs_time[k])),
                   int(data.obs_cmt[k]), repr(float(data.obs_dv[k]))] + [repr(float(v)) for v in q[:, k]]
            if is_pop:
                row += [repr(float(v)) for v in qn[:, k]]
            w.writerow(row)
    inside = np.mean((data.obs_dv >= q[0]) & (data.obs_dv <= q[2]))
    log.info("90%% interval coverage %.3f over %d observations; wrote %s", inside, data.n_obs, out / "ppc.csv")
    return EXIT_OK


def _loo_for(fit_dir: str):
    man, table = _load_fit(fit_dir)
    names = table.log_lik_names
    if not names:
        raise MissingArtifact(f"{fit_dir}/draws.csv has no log_lik columns; the log_lik generated "
                              "quantity is written by 'bayespk fit'")
    keep = ~table.warmup if (~table.warmup).any() else np.ones(len(table.chain), bool)
    ll = table.columns(names)[keep]
    ids = [int(n.split(".", 1)[1]) for n in names]
    return man, ids, psis_loo(ll)


def cmd_loo(cfg: RunConfig, fits: list[str]) -> int:
    if not 1 <= len(fits) <= 2:
        raise CliError("loo takes one or two --fit directories")
    results = [_loo_for(f) for f in fits]
    out = Path(cfg.out) if cfg.out != "." else Path(fits[0])
    out.mkdir(parents=True, exist_ok=True)
    man, ids, res = results[0]
    with open(out / "loo.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["obs_id", "elpd_i", "khat"])
        for i, e, k in zip(ids, res.pointwise, res.pareto_k):
            w.writerow([i, repr(float(e)), repr(float(k))])
    print(f"elpd_loo={res.elpd_loo:.3f} se={res.se:.3f} p_loo={res.p_loo:.3f} n_bad={res.n_bad}")
    for i, k in zip(ids, res.pareto_k):
        if k > KHAT_THRESHOLD:
            log.warning("obs_id=%d khat=%.3f > %.1f; the LOO estimate for this observation is unreliable",
                        i, k, KHAT_THRESHOLD)
    if len(results) == 2:
        man2, ids2, res2 = results[1]
        if ids != ids2:
            raise ArtifactMismatch("the two fits cover different observations")
        cmp = loo_compare(res, res2)
        with open(out / "loo_compare.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model_a", "model_b", "elpd_a", "elpd_b", "elpd_diff", "se_diff"])
            w.writerow([man["model"], man2["model"], repr(res.elpd_loo), repr(res2.elpd_loo),
                        repr(cmp["elpd_diff"]), repr(cmp["se_diff"])])
        print(f"elpd_diff={cmp['elpd_diff']:.3f} se_diff={cmp['se_diff']:.3f} "
              f"({man['model']} minus {man2['model']})")
    return EXIT_OK


def cmd_summary(cfg: RunConfig, fit_dir: str) -> int:
    man, table = _load_fit(fit_dir)
    draws = table.to_draws()
    if draws.warmup_included == draws.n_iter:
        raise CliError("the fit has no sampling draws to summarize")
    rows = summarize(draws)
    out = Path(cfg.out) if cfg.out != "." else Path(fit_dir)
    write_summary_csv(rows, out / "summary.csv")
    fmt = lambda v: "NA" if v is None else f"{v:.4g}"
    print(f"{'variable':>12} " + " ".join(f"{h:>9}" for h in ("mean", "median", "sd", "mad", "q5", "q95",
                                                                 "rhat", "ess_bulk", "ess_tail")))
    for r in rows:
        print(f"{r.variable:>12} " + " ".join(f"{fmt(v):>9}" for v in r.as_tuple()[1:]))
    return EXIT_OK


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bayespk", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="INI file with [sampler], [ode], [model], [priors], [params]")
        if data:
            p.add_argument("--data", help="event CSV (ID,TIME,AMT,RATE,II,EVID,CMT,ADDL,SS,DV)")
        p.add_argument("--out", help="output directory (or .csv path for simulate)")

    def sampler_flags(p):
        p.add_argument("--model", choices=["twocpt", "onecpt", "twocpt_pop", "fk", "fk_pkpd"])
        p.add_argument("--solver", choices=["coupled", "numeric"], help="fk model ODE path")
        p.add_argument("--chains", type=int)
        p.add_argument("--warmup", type=int)
        p.add_argument("--sampling", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--target-accept", dest="target_accept", type=float)
        p.add_argument("--max-treedepth", dest="max_treedepth", type=int)
        p.add_argument("--init", help="prior, uniform, or a JSON file of constrained values")
        p.add_argument("--rtol", type=float)
        p.add_argument("--atol", type=float)
        p.add_argument("--max-steps", dest="max_steps", type=int)

    p = sub.add_parser("fit", help="sample the posterior with NUTS")
    common(p)
    sampler_flags(p)

    p = sub.add_parser("simulate", help="simulate DV for a dosing design")
    common(p)
    sampler_flags(p)
    p.add_argument("--design", choices=["twocpt", "population", "fk"],
                   help="built-in design when --data is not given")
    p.add_argument("--n-subjects", dest="n_subjects", type=int, default=10)
    p.add_argument("--param", action="append", help="NAME=VALUE (vector blocks: NAME=v1,v2,...)")

    p = sub.add_parser("ppc", help="posterior predictive intervals from a fit")
    common(p)
    p.add_argument("--fit", required=True, help="fit output directory")

    p = sub.add_parser("loo", help="PSIS-LOO for one fit, or a comparison of two")
    common(p, data=False)
    p.add_argument("--fit", action="append", required=True, help="fit directory (repeat to compare)")

    p = sub.add_parser("summary", help="recompute the posterior summary table")
    common(p, data=False)
    p.add_argument("--fit", required=True)
    return ap


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, CliError):
        return exc.exit_code
    if isinstance(exc, (IntegrationError, SamplerInitError, FloatingPointError, ArithmeticError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (OSError, csv.Error, json.JSONDecodeError)):
        return EXIT_IO
    if isinstance(exc, (EventValidationError, ScheduleError, ConstraintViolation, ValueError, KeyError,
                        configparser.Error)):
        return EXIT_VALIDATION
    return EXIT_NUMERICAL


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.design, args.n_subjects)
        if args.command == "ppc":
            return cmd_ppc(cfg, args.fit)
        if args.command == "loo":
            return cmd_loo(cfg, args.fit)
        return cmd_summary(cfg, args.fit)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        msg = str(exc).replace("\n", " ")
        if isinstance(exc, KeyError):
            msg = str(exc.args[0]) if exc.args else msg
        print(f"ERROR {type(exc).__name__}: {msg}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
