"""Command-line entry point: fit, se, simulate, predict, summarize.

Every command reads an optional YAML config; command-line flags override the
matching config keys. Outputs are deterministic functions of the inputs,
the config and the seed, whatever the thread count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import warnings
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .analytics import DEFAULT_CLUSTER_THRESHOLDS, cluster_pmf, predict_intensity, season_summaries
from .data_model import SegmentTable, format_float, read_dataset, write_dataset
from .errors import DomainError, InvalidInputError, NumericalError
from .inference import FitResult, McemConfig, initial_spec, louis_se, mcem_fit
from .process_model import (HOT_CUTS, REGULAR_CUTS, ModelSpec, Segment, model_a, model_b, model_c,
                            model_d)
from .simulate import MatchSchedule, SimConfig, simulate_season

log = logging.getLogger("tauhawkes")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_NOT_CONVERGED, EXIT_IO = 0, 2, 3, 4, 5
VARIANTS = ("a", "b", "c", "d")


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one CLI run (config file merged with flags)."""

    command: str
    model: str = "a"
    covariates: tuple[str, ...] = ("X2",)
    regular_cuts: tuple[float, ...] = REGULAR_CUTS
    hot_cuts: tuple[float, ...] = HOT_CUTS
    seed: int | None = None
    threads: int = 1
    data: str | None = None
    out: str = "out"
    fit: str | None = None
    mcem: dict = dataclasses.field(default_factory=dict)
    truth: dict = dataclasses.field(default_factory=dict)
    simulate: dict = dataclasses.field(default_factory=dict)
    predict: dict = dataclasses.field(default_factory=dict)
    summarize: dict = dataclasses.field(default_factory=dict)
    se: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.model not in VARIANTS:
            raise InvalidInputError(f"model must be one of {VARIANTS}, got {self.model!r}")
        if self.model in ("c", "d") and not self.regular_cuts:
            raise InvalidInputError(f"model {self.model} needs regular cut points")
        if self.model == "d" and not self.hot_cuts:
            raise InvalidInputError("model d needs hot-state cut points")
        if self.command in ("fit", "simulate") and self.seed is None:
            raise InvalidInputError(f"{self.command} needs a seed (--seed or 'seed' in the config)")
        if self.threads < 1:
            raise InvalidInputError("threads must be >= 1")

    def template(self) -> ModelSpec:
        """Model skeleton with placeholder values; fits and parameter files fill it in."""
        p = len(self.covariates)
        cov = dict(covariate_names=self.covariates)
        if self.model == "a":
            return model_a(0.1, 0.0, (0.0,) * p, **cov)
        if self.model == "b":
            return model_b((math.log(0.1), -0.5, 0.1, 1.0), 0.0, (0.0,) * p, **cov)
        if self.model == "c":
            return model_c((0.1,) * len(self.regular_cuts), 0.0, (0.0,) * p, cuts=self.regular_cuts, **cov)
        return model_d((0.1,) * len(self.regular_cuts), (0.1,) * len(self.hot_cuts), (0.0,) * p, (0.0,) * p,
                       cuts0=self.regular_cuts, cuts1=self.hot_cuts, **cov)

    def mcem_config(self) -> McemConfig:
        opts = dict(self.mcem)
        if "fixed" in opts:
            opts["fixed"] = tuple(opts["fixed"])
        known = {f.name for f in dataclasses.fields(McemConfig)}
        unknown = set(opts) - known
        if unknown:
            raise InvalidInputError(f"unknown mcem settings: {sorted(unknown)}")
        return McemConfig(**{**opts, "seed": self.seed if self.seed is not None else 0, "threads": self.threads})


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise InvalidInputError(f"config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise InvalidInputError(f"config {path}: top level must be a mapping")
    return doc


def resolve_config(args: argparse.Namespace) -> RunConfig:
    doc = load_config(args.config)
    for key in ("model", "seed", "threads", "data", "out", "fit"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    cuts = doc.pop("cuts", {}) or {}
    if "regular" in cuts:
        doc["regular_cuts"] = cuts["regular"]
    if "hot" in cuts:
        doc["hot_cuts"] = cuts["hot"]
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"command"}
    unknown = set(doc) - known
    if unknown:
        raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
    for key in ("covariates", "regular_cuts", "hot_cuts"):
        if key in doc:
            doc[key] = tuple(doc[key] or ())
    if "model" in doc:
        doc["model"] = str(doc["model"])
    if doc.get("seed") is not None:
        doc["seed"] = int(doc["seed"])
    return RunConfig(command=args.command, **doc)


# --------------------------------------------------------------------------
# parameter files
# --------------------------------------------------------------------------


def spec_from_parameters(template: ModelSpec, params: dict[str, float]) -> ModelSpec:
    """Fill a model skeleton from natural-scale parameter values keyed by name."""
    names = template.parameter_names()
    missing = [n for n in names if n not in params]
    if missing:
        raise InvalidInputError(f"missing parameter values: {missing}")
    extra = sorted(set(params) - set(names))
    if extra:
        raise InvalidInputError(f"unknown parameters for this model: {extra}")
    nat = np.array([float(params[n]) for n in names])
    logged = template.log_mask()
    if np.any(nat[logged] <= 0) or not np.all(np.isfinite(nat)):
        bad = [n for n, v, lg in zip(names, nat, logged) if not np.isfinite(v) or (lg and v <= 0)]
        raise InvalidInputError(f"parameters must be finite and positive where required: {bad}")
    with np.errstate(divide="ignore"):
        x = np.where(logged, np.log(np.where(logged, nat, 1.0)), nat)
    return template.with_unconstrained(x)


def _jsonable(v: float):
    return None if not np.isfinite(v) else float(v)


def fit_document(cfg: RunConfig, fit: FitResult) -> dict:
    spec = fit.theta_hat
    last = fit.trace[-1] if fit.trace else None
    return {
        "model": cfg.model,
        "covariates": list(cfg.covariates),
        "cuts": {"regular": list(cfg.regular_cuts), "hot": list(cfg.hot_cuts)},
        "seed": cfg.seed,
        "converged": fit.converged,
        "message": fit.message,
        "iterations": len(fit.trace),
        "fixed": list(fit.fixed),
        "fixed_tau": fit.fixed_tau,
        "loglik": None if last is None else _jsonable(last.loglik),
        "parameters": {k: float(v) for k, v in fit.estimates().items()},
        "standard_errors": {k: _jsonable(v) for k, v in fit.standard_errors.items()},
        "tau": {"mean": spec.tau_dist.mean, "sd": spec.tau_dist.sd},
    }


def load_fit(path: str, cfg: RunConfig) -> tuple[RunConfig, ModelSpec, dict]:
    """Model spec from a fit file; the file's model, covariates and cuts win over the config."""
    try:
        doc = json.loads(Path(path).read_text())
        cfg = dataclasses.replace(cfg, model=doc["model"], covariates=tuple(doc["covariates"]),
                                  regular_cuts=tuple(doc["cuts"]["regular"]),
                                  hot_cuts=tuple(doc["cuts"]["hot"]))
        params = doc["parameters"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed fit file {path}: {exc}") from None
    return cfg, spec_from_parameters(cfg.template(), params), doc


def _model_spec(cfg: RunConfig) -> ModelSpec:
    if cfg.fit is not None:
        return load_fit(cfg.fit, cfg)[1]
    if not cfg.truth:
        raise InvalidInputError("need model parameters: 'truth' in the config or --fit")
    return spec_from_parameters(cfg.template(), cfg.truth)


# --------------------------------------------------------------------------
# table writers
# --------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "NA" if not np.isfinite(v) else format_float(v)
    return str(v)


def write_tsv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    """Tab-separated table; every row is checked against the header before anything is written."""
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise NumericalError(f"{path.name}: row {i} has {len(r)} fields, header has {len(header)}")
    lines = ["\t".join(header)] + ["\t".join(_cell(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def write_aligned(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]],
                  title: str = "", footer: Sequence[str] = ()) -> None:
    table = [list(header)] + [list(r) for r in rows]
    widths = [max(len(r[j]) for r in table) for j in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(r, widths)))
    lines = ([title, ""] if title else []) + [fmt(table[0]), "-" * len(fmt(table[0]))]
    lines += [fmt(r) for r in table[1:]] + list(footer)
    path.write_text("\n".join(lines).rstrip() + "\n")


def _fmt(v: float, digits: int = 4) -> str:
    return "NA" if v is None or not np.isfinite(v) else f"{v:.{digits}f}"


def write_parameter_tables(out: Path, cfg: RunConfig, spec: ModelSpec, est: dict, se: dict,
                           title: str, stem: str = "params") -> None:
    """Estimates and SEs in the layout of the published tables plus a machine-readable copy."""
    names = spec.parameter_names()
    write_tsv(out / f"{stem}.tsv", ["parameter", "estimate", "se"],
              [[n, float(est[n]), float(se.get(n, float("nan")))] for n in names])
    rows = [[n, _fmt(est[n]), _fmt(se.get(n, float("nan")))] for n in names]
    d = spec.tau_dist
    footer = ["",
              f"tau ~ Gamma(shape = {d.shape:.3f}, rate = {d.rate:.3f})",
              f"tau mean (sd) = {d.mean:.3f} ({d.sd:.3f}) min"]
    write_aligned(out / f"{stem}.txt", ["parameter", "estimate", "SE"], rows, title, footer)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _need_data(cfg: RunConfig) -> SegmentTable:
    if cfg.data is None:
        raise InvalidInputError(f"{cfg.command} needs --data")
    return read_dataset(cfg.data)


def _design(table: SegmentTable, cfg: RunConfig) -> list[Segment]:
    return table.design(cfg.covariates)


def cmd_fit(cfg: RunConfig, out: Path) -> int:
    table = _need_data(cfg)
    segments = _design(table, cfg)
    mcfg = cfg.mcem_config()
    init = initial_spec(cfg.template(), segments)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = mcem_fit(segments, init, mcfg)
    for w in caught:
        log.warning("%s", w.message)
    doc = fit_document(cfg, fit)
    doc["warnings"] = sorted({str(w.message) for w in caught})
    (out / "fit.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    names = fit.theta_hat.parameter_names()
    write_tsv(out / "trace.tsv", ["iteration", "draws", "q_value", "q_previous", "rel_change", "loglik", *names],
              [[r.iteration, r.draws, r.q_value, r.q_previous, r.rel_change, r.loglik,
                *(r.params[n] for n in names)] for r in fit.trace])
    status = "converged" if fit.converged else f"not converged ({fit.message})"
    title = f"Model ({cfg.model}), {len(segments)} segments, {table.n_events} events; {status} after {len(fit.trace)} iterations"
    write_parameter_tables(out, cfg, fit.theta_hat, fit.estimates(), fit.standard_errors, title)
    if not fit.converged:
        log.error("MCEM did not converge: %s", fit.message)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_se(cfg: RunConfig, out: Path) -> int:
    if cfg.fit is None:
        raise InvalidInputError("se needs --fit")
    cfg2, spec, doc = load_fit(cfg.fit, cfg)
    table = _need_data(cfg)
    segments = _design(table, cfg2)
    draws = int(cfg.se.get("draws", 4000))
    fixed_tau = doc.get("fixed_tau")
    fit = FitResult(spec, (), bool(doc.get("converged", False)), tuple(doc.get("fixed", ())), fixed_tau)
    seed = cfg.seed if cfg.seed is not None else (doc.get("seed") or 0)
    res = louis_se(fit, segments, draws, seed, allow_unconverged=True, threads=cfg.threads,
                   step=float(cfg.se.get("fd_step", 1e-5)))
    se = dict(fit.standard_errors)
    se.update(res.as_dict())
    if not res.positive_definite:
        log.warning("information matrix not positive definite; some SEs unavailable")
    title = f"Louis standard errors, Model ({cfg2.model}), {draws} posterior draws per segment"
    write_parameter_tables(out, cfg2, spec, fit.estimates(), se, title, stem="se")
    return EXIT_OK


def _schedule(plan: dict) -> MatchSchedule:
    known = {f.name for f in dataclasses.fields(MatchSchedule)}
    unknown = set(plan) - known
    if unknown:
        raise InvalidInputError(f"unknown schedule settings: {sorted(unknown)}")
    if "stoppage" in plan:
        plan = {**plan, "stoppage": tuple(float(s) for s in plan["stoppage"])}
    return MatchSchedule(**plan)


def _summary_rows(rows):
    return [[r.statistic, r.mean, r.lower, r.upper] for r in rows]


def _write_summaries(out: Path, rows, n_rep: int) -> None:
    write_tsv(out / "summary.tsv", ["statistic", "mean", "p2.5", "p97.5"], _summary_rows(rows))
    write_aligned(out / "summary.txt", ["statistic", "mean", "95% band"],
                  [[r.statistic, f"{r.mean:.2f}", r.band] for r in rows],
                  f"Season summaries over {n_rep} replication(s)")


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    spec = _model_spec(cfg)
    if cfg.fit is not None:
        cfg = load_fit(cfg.fit, cfg)[0]
    opts = dict(cfg.simulate)
    plan_opts = opts.pop("plan", None)
    if plan_opts is not None:
        plan = _schedule(dict(plan_opts))
    elif cfg.data is not None:
        table = read_dataset(cfg.data)
        plan = SegmentTable(tuple(Segment(s.end, (), s.covariates, s.match_id, s.index) for s in table),
                            table.columns)
    else:
        plan = MatchSchedule()
    known = {"replications", "tau_mode", "tau"}
    if set(opts) - known:
        raise InvalidInputError(f"unknown simulate settings: {sorted(set(opts) - known)}")
    sim = SimConfig(spec, plan, columns=cfg.covariates, seed=cfg.seed, threads=cfg.threads, **opts)
    reps = simulate_season(sim)
    width = max(3, len(str(len(reps))))
    for r, table in enumerate(reps, start=1):
        write_dataset(table, out / f"sim_{r:0{width}d}.csv")
    _write_summaries(out, season_summaries(reps), len(reps))
    return EXIT_OK


def _prediction_grid(end: float, step: float) -> np.ndarray:
    n = max(int(math.ceil(end / step - 1e-9)), 1)
    return end * np.arange(1, n + 1) / n


def cmd_predict(cfg: RunConfig, out: Path) -> int:
    spec = _model_spec(cfg)
    if cfg.fit is not None:
        cfg = load_fit(cfg.fit, cfg)[0]
    table = _need_data(cfg)
    segs = _design(table, cfg)
    opts = cfg.predict
    mid = opts.get("match_id")
    sidx = int(opts.get("segment_index", 0))
    if mid is None:
        seg = segs[0] if segs else None
    else:
        seg = next((s for s in segs if s.match_id == str(mid) and s.index == sidx), None)
    if seg is None:
        raise InvalidInputError(f"segment ({mid}, {sidx}) not in the dataset")
    times = [float(t) for t in opts.get("times", [seg.end / 2])]
    for t in times:
        if not 0 <= t <= seg.end:
            raise InvalidInputError(f"query time {t} outside segment [0, {seg.end}]")
    grid = _prediction_grid(seg.end, float(opts.get("grid_step", 0.1)))
    tau = opts.get("tau")
    write_tsv(out / "events.tsv", ["time"], [[t] for t in seg.times.tolist()])
    for t in times:
        curve = predict_intensity(spec, seg, t, grid, tau=None if tau is None else float(tau))
        write_tsv(out / f"curve_t{format_float(t)}.tsv", ["time", "intensity", "part"], curve.rows())
    return EXIT_OK


def cmd_summarize(cfg: RunConfig, out: Path) -> int:
    paths = cfg.summarize.get("datasets") or ([cfg.data] if cfg.data else [])
    if not paths:
        raise InvalidInputError("summarize needs --data or summarize.datasets")
    tables = [read_dataset(p) for p in paths]
    thresholds = [float(t) for t in cfg.summarize.get("thresholds", DEFAULT_CLUSTER_THRESHOLDS)]
    rows = []
    for th in thresholds:
        segs = [s for t in tables for s in t.segments]
        pmf = cluster_pmf(segs, th)
        rows += [[th, size, p, pmf.n_clusters] for size, p in pmf.pmf.items()]
    write_tsv(out / "clusters.tsv", ["threshold", "size", "probability", "n_clusters"], rows)
    _write_summaries(out, season_summaries(tables, float(cfg.summarize.get("early", 10.0))), len(tables))
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "se": cmd_se, "simulate": cmd_simulate, "predict": cmd_predict,
            "summarize": cmd_summarize}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tauhawkes", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--data", help="segment dataset (.csv or .json)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--model", choices=VARIANTS)
        p.add_argument("--threads", type=int)
        p.add_argument("--fit", help="fit.json from a previous fit")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[cfg.command](cfg, out)
    except (InvalidInputError, DomainError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID
    except (TypeError, ValueError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
