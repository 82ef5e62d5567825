"""Command-line experiment driver.

Each run writes ``<out>/<experiment>.json`` (configuration echo, claim,
report and checks), ``<experiment>.csv`` (plot data) and ``<experiment>.gp``
(a gnuplot script for the CSV).  Exit status is 0 when every check passes,
1 when one fails, 2 for an invalid configuration and 3 when the requested
graph exceeds the cell budget.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import carpet as cp
from . import estimates as es
from . import form as fm
from . import inequalities as iq
from . import timechange as tc
from .scaling import ScalingFunction, psi

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

log = logging.getLogger("carpetlab")

EXPERIMENTS = ("build", "vd", "spectrum", "exit-times", "ondiag", "dg", "fk", "csa",
               "cacciopoli", "stability", "timechange", "scom")

DEFAULTS = {"experiment": None, "dim": 2, "gen": 4, "seed": 0, "p": None, "radii": None,
            "times": None, "out": "results", "threads": 1, "budget_cells": cp.DEFAULT_CELL_BUDGET}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class ExperimentConfig:
    experiment: str
    dim: int = 2
    gen: int = 4
    seed: int = 0
    p: float | None = None
    radii: list | None = None
    times: list | None = None
    out: str = "results"
    threads: int = 1
    budget_cells: int = cp.DEFAULT_CELL_BUDGET

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS + ("all",):
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from "
                              f"{', '.join(EXPERIMENTS + ('all',))}")
        if self.dim < 2:
            raise ConfigError("--dim must be >= 2")
        if self.gen < 1:
            raise ConfigError("--gen must be >= 1")
        if self.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if self.budget_cells < 1:
            raise ConfigError("--budget-cells must be positive")
        if self.p is not None and self.p < 0:
            raise ConfigError("--p must be >= 0")
        for name in ("radii", "times"):
            vals = getattr(self, name)
            if vals is not None and (not vals or any(v <= 0 for v in vals)):
                raise ConfigError(f"--{name} must be a non-empty list of positive numbers")


def _float_list(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="carpetlab", description=__doc__.splitlines()[0])
    ap.add_argument("command", nargs="?", default="run", choices=["run"])
    ap.add_argument("--config", help="TOML file with defaults; flags override it")
    ap.add_argument("--experiment")
    ap.add_argument("--dim", type=int)
    ap.add_argument("--gen", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--p", type=float)
    ap.add_argument("--radii", type=_float_list)
    ap.add_argument("--times", type=_float_list)
    ap.add_argument("--out")
    ap.add_argument("--threads", type=int)
    ap.add_argument("--budget-cells", dest="budget_cells", type=int)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    values = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        data = {k.replace("-", "_"): v for k, v in data.items()}
        unknown = set(data) - set(values)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(data)
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if values["experiment"] is None:
        raise ConfigError("--experiment is required")
    try:
        cfg = ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


# experiment helpers ------------------------------------------------------------
class Context:
    """Lazily built graph, form and fitted walk dimension shared by one run."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.spec = cp.CarpetSpec(cfg.dim, cfg.gen)
        if self.spec.cell_count > cfg.budget_cells:
            raise cp.BudgetExceeded(f"{self.spec.cell_count} cells exceed the budget of {cfg.budget_cells}")
        self._g = self._df = self._dw = None

    @property
    def g(self) -> cp.CarpetGraph:
        if self._g is None:
            self._g = cp.build_precarpet(self.spec, budget=self.cfg.budget_cells)
        return self._g

    @property
    def df(self) -> fm.DirichletForm:
        if self._df is None:
            self._df = fm.DirichletForm(self.g)
        return self._df

    def default_radii(self) -> list:
        return [3**k - 1 for k in range(1, self.cfg.gen) if 3**k - 1 <= (2 * 3**self.cfg.gen) / 3][-4:]

    @property
    def dw(self) -> float:
        if self._dw is None:
            radii = self.default_radii()
            if len(radii) < 3:
                raise ConfigError("walk dimension fit needs --gen >= 4")
            ref = fm.DirichletForm(cp.build_lattice(self.cfg.dim, self.spec.side))
            self._dw = es.fit_walk_dimension(self.df, self.g.origin, radii, reference=ref).exponent
        return self._dw

    @property
    def sf(self) -> ScalingFunction:
        return ScalingFunction(2.0, max(2.0, self.dw))


def _fit_rows(rep: es.FitReport):
    return ["abscissa", "ordinate", "fit_residual"], rep.rows()


def exp_build(ctx: Context):
    g = ctx.g
    report = {"cells": g.num_vertices, "expected": ctx.spec.cell_count, "edges": int(len(g.edges)),
              "side": ctx.spec.side, "d_f": ctx.spec.d_f, "connected": g.is_connected()}
    checks = {"cell_count": g.num_vertices == ctx.spec.cell_count, "connected": report["connected"]}
    rows = [[v] + [int(x) for x in g.coords[v]] + [int(g.degrees[v])] for v in range(g.num_vertices)]
    header = ["id"] + [f"x{k}" for k in range(ctx.cfg.dim)] + ["degree"]
    return "carpet cell count equals (3^d - 1)^n", report, checks, (header, rows)


def exp_vd(ctx: Context):
    g = ctx.g
    radii = ctx.cfg.radii or [r for r in (9, 27, 81, 243) if r < ctx.spec.side / 2]
    prof = cp.volume_profile(g, g.origin, radii)
    fit = es.loglog_fit(radii, prof)
    vd = cp.vd_scan(g, 64, [r for r in (1, 2, 4, 8, 16) if 2 * r < ctx.spec.side], seed=ctx.cfg.seed)
    report = {"volume_fit": dataclasses.asdict(fit), "d_f": ctx.spec.d_f, "vd": dataclasses.asdict(vd)}
    checks = {"volume_slope_near_d_f": abs(fit.exponent - ctx.spec.d_f) <= 0.1}
    return "volume growth r^d_f and volume doubling", report, checks, _fit_rows(fit)


def exp_spectrum(ctx: Context):
    g, df = ctx.g, ctx.df
    radii = ctx.cfg.radii or ctx.default_radii()
    d = g.distances_from(g.origin, metric="sup")
    lams = [fm.lambda1_dirichlet(df, np.flatnonzero(d <= r)) for r in radii]
    fit = es.loglog_fit(np.asarray(radii) + 1.0, lams)
    report = {"radii": radii, "lambda1": lams, "fit": dataclasses.asdict(fit)}
    checks = {"lambda1_decreasing": bool(np.all(np.diff(lams) < 0)), "exponent_below_minus_2": fit.exponent < -2}
    return "Dirichlet eigenvalue of balls scales like 1/Psi(r)", report, checks, _fit_rows(fit)


def exp_exit_times(ctx: Context):
    radii = ctx.cfg.radii or ctx.default_radii()
    fit = es.fit_walk_dimension(ctx.df, ctx.g.origin, radii)
    report = {"fit": dataclasses.asdict(fit), "d_f": ctx.spec.d_f}
    checks = {"walk_dimension_above_2": fit.exponent > 2.0,
              "walk_dimension_below_d_f_plus_1": fit.exponent < ctx.spec.d_f + 1}
    return "mean exit time E tau_B(x,r) ~ r^d_w", report, checks, _fit_rows(fit)


def exp_ondiag(ctx: Context):
    times = ctx.cfg.times or list(np.logspace(1, math.log10(3e4), 10))
    fit = es.ondiag_fit(ctx.df, ctx.g.origin, times)
    dw = ctx.dw
    target = -ctx.spec.d_f / dw
    report = {"fit": dataclasses.asdict(fit), "d_w": dw, "predicted_slope": target}
    checks = {"slope_matches_d_f_over_d_w": abs(fit.exponent - target) <= 0.1}
    return "on-diagonal decay p_t(x,x) ~ t^(-d_f/d_w)", report, checks, _fit_rows(fit)


def exp_dg(ctx: Context):
    g = ctx.g
    sf = ctx.sf
    radii = ctx.cfg.radii or ([16, 24, 32, 48, 64] if ctx.spec.side >= 243 else [8, 12, 16, 24, 32])
    pairs = es.dg_pairs(g, g.origin, [int(r) for r in radii], np.linspace(1, 10, 6), sf)
    rep = es.dg_check(ctx.df, sf, pairs)
    report = dataclasses.asdict(rep)
    checks = {"enough_pairs": len(rep.points) >= 30, "positive_slope": rep.slope > 0,
              "r_squared": rep.r_squared >= 0.9}
    rows = [(p[0], p[1], p[2]) for p in rep.points]
    return "Davies-Gaffney decay exp(-c Phi(R,t))", report, checks, (["phi", "minus_log_overlap", "R"], rows)


def exp_fk(ctx: Context):
    sf = ctx.sf
    nu = ctx.dw / ctx.spec.d_f
    rep = iq.fk_scan(ctx.df, sf, nu, 201, seed=ctx.cfg.seed)
    report = dataclasses.asdict(rep)
    checks = {"positive_constant": rep.c_f_estimate > 0}
    return "Faber-Krahn lower bound on Dirichlet eigenvalues", report, checks, (
        ["nu", "c_f"], [(nu, rep.c_f_estimate)])


def _csa_data(ctx: Context, radii):
    df, g, sf = ctx.df, ctx.g, ctx.sf
    R = 27.0
    lin = iq.csa_scan(df, sf, [g.origin], [(R, r) for r in radii],
                      lambda x, R_, r: iq.cutoff_linear(g, x, R_, r), seed=ctx.cfg.seed)
    res = iq.csa_scan(df, sf, [g.origin], [(R, r) for r in radii],
                      lambda x, R_, r: iq.cutoff_resolvent(df, sf, x, R_, r), seed=ctx.cfg.seed)
    return lin, res


def exp_csa(ctx: Context):
    radii = ctx.cfg.radii or [r for r in (27.0, 81.0, 243.0) if 27.0 + r < ctx.spec.side]
    if len(radii) < 2:
        raise ConfigError("csa needs at least two annulus widths; use --gen >= 5")
    lin, res = _csa_data(ctx, radii)
    stab = [c for r, c in zip(res["r"], res["C_S_by_r"]) if r in (27.0, 81.0)] or res["C_S_by_r"]
    report = {"linear": {k: v for k, v in lin.items() if k != "reports"},
              "resolvent": {k: v for k, v in res.items() if k != "reports"}, "d_w": ctx.dw,
              "predicted_gap": ctx.dw - 2.0}
    checks = {"resolvent_steeper_than_linear": res["exponent"] <= lin["exponent"] - 0.1,
              "C_S_stable": max(stab) / min(stab) <= 4.0}
    rows = [(r, a, b) for r, a, b in zip(lin["r"], lin["theta_max"], res["theta_max"])]
    return "cutoff-Sobolev constant on annuli scales like 1/Psi(r)", report, checks, (
        ["r", "theta_linear", "theta_resolvent"], rows)


def _ball_cutoff(ctx: Context, r: float):
    g, df, sf = ctx.g, ctx.df, ctx.sf
    x0 = g.vertex_at(tuple([ctx.spec.side // 2] + [0] * (ctx.cfg.dim - 1)))
    phi = iq.cutoff_resolvent(df, sf, x0, r, r)
    fam = iq.test_family(df, phi, psi(sf, r) / 10, seed=ctx.cfg.seed)
    return phi, fam


def exp_cacciopoli(ctx: Context):
    r = 12.0
    phi, fam = _ball_cutoff(ctx, r)
    theta = iq.csd_theta(ctx.df, phi, fam).theta_star
    rep = iq.cacciopoli_check(ctx.df, phi, theta, T=psi(ctx.sf, r), level=0.05, trials=20, seed=ctx.cfg.seed)
    checks = {"ratio_within_slack": rep["max_ratio"] <= iq.DEFAULT_SLACK}
    rows = [(k, v) for k, v in enumerate(rep["ratios"])]
    return "Cacciopoli inequality for caloric functions", rep, checks, (["trial", "ratio"], rows)


def exp_stability(ctx: Context):
    r = 12.0
    phi, fam = _ball_cutoff(ctx, r)
    rng = np.random.default_rng(ctx.cfg.seed)
    factors = np.exp(rng.uniform(math.log(0.5), math.log(2.0), len(ctx.df.c)))
    rep = iq.stability_check(ctx.df, factors, 2.0, phi, fam, psi(ctx.sf, r))
    checks = {"c1": rep["c1_perturbed"] <= 4 * rep["c1"] * 1.01,
              "c2": rep["c2_perturbed"] <= 2 * rep["c2"] * 1.01 + 1e-15}
    return "cutoff-Sobolev constants are stable under conductance changes", rep, checks, (
        ["quantity", "base", "perturbed"], [("c1", rep["c1"], rep["c1_perturbed"]),
                                            ("c2", rep["c2"], rep["c2_perturbed"])])


def _trend_dict(t: tc.SweepTrend) -> dict:
    return dataclasses.asdict(t)


def exp_timechange(ctx: Context):
    g = ctx.g
    p = ctx.cfg.p if ctx.cfg.p is not None else 1.0
    spec = tc.TimeChangeSpec(p)
    vgc = tc.vgc_classify(g, spec)
    report = {"p": p, "vgc": dataclasses.asdict(vgc),
              "m_a": {k: (v if not isinstance(v, tc.SweepTrend) else _trend_dict(v))
                      for k, v in tc.ma_profile(g, spec).items()}}
    radii = ctx.cfg.radii or [r for r in (9, 27, 81) if 2 * r <= g.distances_from(g.origin).max()]
    if len(radii) >= 2:
        fit = tc.rho_shell_fit(g, spec, radii)
        report["rho_shell_fit"] = dataclasses.asdict(fit)
        report["rho_shell_predicted"] = 1 - p / 2
    checks = {"vgc_matches_regimes": _vgc_expected(p, ctx.spec.d_f, vgc.classification)}
    if ctx.cfg.dim >= 3:
        ref = fm.DirichletForm(cp.build_lattice(ctx.cfg.dim, ctx.spec.side))
        green = tc.a_infty_green(ctx.df, spec, list(range(2, ctx.cfg.gen + 1)), reference=ref)
        green["trend"] = _trend_dict(green["trend"])
        report["green"] = green
    rows = [(r, v) for r, v in vgc.integrand]
    return "time change: intrinsic metric, m_a volume and VGC regimes", report, checks, (
        ["rho_radius", "vgc_integrand"], rows)


def _vgc_expected(p: float, d_f: float, label: str) -> bool:
    if label == "inconclusive":
        return True
    expected = "holds" if (p <= 2 or p > d_f) else "fails"
    return label == expected


def exp_scom(ctx: Context):
    p = ctx.cfg.p if ctx.cfg.p is not None else max(ctx.dw - 1, 0.0)
    rep = tc.scom_check(ctx.df, ctx.sf, tc.TimeChangeSpec(p), 3.0, max(ctx.cfg.gen - 1, 1), seed=ctx.cfg.seed)
    ev = rep.evidence
    checks = {"not_contradicting_theory": rep.classification != "complete" or p <= ctx.dw + 1e-12}
    rows = [(n, t, m, s) for n, t, m, s in zip(ev["n"], ev["theta"], ev["m_a_U"],
                                               ev.get("criterion_a_sequence", [float("nan")] * len(ev["n"])))]
    return "ring criteria for stochastic completeness", {"classification": rep.classification,
                                                         "evidence": ev}, checks, (
        ["ring", "theta", "m_a_U", "criterion_a_term"], rows)


RUNNERS = {"build": exp_build, "vd": exp_vd, "spectrum": exp_spectrum, "exit-times": exp_exit_times,
           "ondiag": exp_ondiag, "dg": exp_dg, "fk": exp_fk, "csa": exp_csa, "cacciopoli": exp_cacciopoli,
           "stability": exp_stability, "timechange": exp_timechange, "scom": exp_scom}


# output ----------------------------------------------------------------------------
def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def _gnuplot(name: str, header: list) -> str:
    cols = len(header)
    lines = [f"# plot script for {name}.csv", "set datafile separator ','",
             "set key autotitle columnhead"]
    if header[0] == "id":  # vertex tables: draw the cells by their first two coordinates
        lines.append("set size ratio -1")
        plots = [f"'{name}.csv' using 2:3 with points pt 5 ps 0.3"]
    else:
        lines.append(f"set xlabel '{header[0]}'")
        plots = [f"'{name}.csv' using 1:{k} with linespoints" for k in range(2, cols + 1)] or \
                [f"'{name}.csv' using 0:1 with points"]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def write_outputs(outdir: Path, name: str, cfg: ExperimentConfig, claim: str, report, checks, table):
    outdir.mkdir(parents=True, exist_ok=True)
    header, rows = table
    doc = {"experiment": name, "config": dataclasses.asdict(cfg), "claim": claim,
           "checks": checks, "passed": all(checks.values()), "report": report}
    (outdir / f"{name}.json").write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    with open(outdir / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    (outdir / f"{name}.gp").write_text(_gnuplot(name, header))


def run(cfg: ExperimentConfig) -> int:
    ctx = Context(cfg)
    names = EXPERIMENTS if cfg.experiment == "all" else (cfg.experiment,)
    ok = True
    for name in names:
        log.info("running %s", name)
        claim, report, checks, table = RUNNERS[name](ctx)
        checks = {k: bool(v) for k, v in checks.items()}
        write_outputs(Path(cfg.out), name, cfg, claim, report, checks, table)
        ok = ok and all(checks.values())
        print(f"{name}: {'PASS' if all(checks.values()) else 'FAIL'} {checks}")
    return 0 if ok else 1


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    os.environ.setdefault("OMP_NUM_THREADS", str(cfg.threads))
    try:
        return run(cfg)
    except cp.BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
