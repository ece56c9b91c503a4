"""Command-line interface: ``mlmgof {fit,gof,simulate,catalog}``.

Exit codes: 0 success, 1 goodness-of-fit test failed to produce a p-value,
2 usage error, 3 data or estimation error. Every error exit writes one line
starting with ``error:`` to standard error.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import LevelEffects, ModelSpec, RandomEffectsSpec, read_csv
from .errors import DataError, MlmGofError, SpecError
from .estimator import DEFAULT_NODES, FitOptions, FittedModel, _Layout, fit
from .gof import format_report, rule_label, run_test, write_records
from .simlab import (SIM_NODES, default_jobs, find_scenarios, run_scenario,
                     scenario_catalog, write_scenario_csv)

EXIT_OK, EXIT_GOF_FAILED, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3
SEED_ENV = "MLMGOF_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class RunConfig:
    command: str
    data_path: str | None = None
    outcome: str = "y"
    id2: str = "id2"
    id3: str = "id3"
    fixed: tuple = ()
    random: RandomEffectsSpec = field(default_factory=RandomEffectsSpec)
    nodes: int = DEFAULT_NODES
    groups: str = "data_driven"
    part: int | None = None
    scenarios: tuple = ()
    reps: int | None = None
    seed: int | None = None
    jobs: int = 1
    out: str | None = None


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mlmgof", description="Mixed-effects logistic models and "
                "the grouped Wald goodness-of-fit test.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_args(sp):
        sp.add_argument("--data", required=True, help="input CSV")
        sp.add_argument("--outcome", default="y")
        sp.add_argument("--id2", default="id2", help="level-2 cluster column")
        sp.add_argument("--id3", default="id3", help="level-3 cluster column")
        sp.add_argument("--fixed", default="", help="comma-separated fixed covariates")
        sp.add_argument("--re", action="append", default=[], metavar="COL:TERMS[:COV]",
                        help="random effects, e.g. id2:intercept+x2 or "
                             "id3:intercept+visit:unstructured")
        sp.add_argument("--nodes", type=int, default=DEFAULT_NODES)

    model_args(sub.add_parser("fit", help="fit a model and print the estimates"))
    g = sub.add_parser("gof", help="run the goodness-of-fit test")
    model_args(g)
    g.add_argument("--groups", default="auto", help="'auto' or a forced count 2..50")
    g.add_argument("--out", help="write the result record to this CSV")

    s = sub.add_parser("simulate", help="run catalog scenarios")
    s.add_argument("--part", type=int, choices=(1, 2, 3))
    s.add_argument("--scenario", action="append", default=[],
                   help="scenario id or id prefix (repeatable)")
    s.add_argument("--reps", type=int, required=True)
    s.add_argument("--seed", type=int, help=f"master seed (default ${SEED_ENV})")
    s.add_argument("--jobs", type=int, default=None)
    s.add_argument("--nodes", type=int, default=SIM_NODES)
    s.add_argument("--out", required=True, help="scenario results CSV")

    c = sub.add_parser("catalog", help="list the simulation scenarios")
    c.add_argument("--part", type=int, choices=(1, 2, 3))
    return p


def _parse_re(clauses, id2, id3):
    levels = {}
    for clause in clauses:
        parts = clause.split(":")
        if len(parts) not in (2, 3) or not parts[1]:
            raise UsageError(f"bad --re clause {clause!r}; expected COL:TERMS[:COV]")
        col, terms = parts[0], parts[1].split("+")
        cov = parts[2] if len(parts) == 3 else "independent"
        if col == id2:
            key = "level2"
        elif col == id3:
            key = "level3"
        else:
            raise UsageError(f"--re column {col!r} is neither {id2!r} nor {id3!r}")
        if key in levels:
            raise UsageError(f"duplicate --re clause for {col!r}")
        slopes = tuple(t for t in terms if t != "intercept")
        try:
            levels[key] = LevelEffects("intercept" in terms, slopes, cov)
        except SpecError as exc:
            raise UsageError(str(exc)) from None
    return RandomEffectsSpec(levels.get("level2"), levels.get("level3"))


def parse_args(argv) -> RunConfig:
    """Parse and validate a command line; raises :class:`UsageError`."""
    ns = _parser().parse_args(argv)
    cmd = ns.command
    if cmd == "catalog":
        return RunConfig(cmd, part=ns.part)
    if cmd == "simulate":
        seed = ns.seed
        if seed is None and os.environ.get(SEED_ENV):
            try:
                seed = int(os.environ[SEED_ENV])
            except ValueError:
                raise UsageError(f"${SEED_ENV} is not an integer") from None
        if seed is None:
            raise UsageError(f"simulate needs --seed or ${SEED_ENV}")
        if ns.reps < 1:
            raise UsageError("--reps must be at least 1")
        jobs = default_jobs() if ns.jobs is None else ns.jobs
        if jobs < 1:
            raise UsageError("--jobs must be at least 1")
        if ns.part is None and not ns.scenario:
            raise UsageError("simulate needs --part and/or --scenario")
        return RunConfig(cmd, nodes=ns.nodes, part=ns.part, scenarios=tuple(ns.scenario),
                         reps=ns.reps, seed=seed, jobs=jobs, out=ns.out)
    fixed = tuple(c for c in ns.fixed.split(",") if c)
    random = _parse_re(ns.re, ns.id2, ns.id3)
    groups = "data_driven"
    if cmd == "gof" and ns.groups != "auto":
        try:
            G = int(ns.groups)
        except ValueError:
            raise UsageError(f"--groups must be 'auto' or an integer, got {ns.groups!r}") from None
        if not 2 <= G <= 50:
            raise UsageError("--groups must lie in 2..50")
        groups = rule_label(G)
    if not 1 <= ns.nodes <= 50:
        raise UsageError("--nodes must lie in 1..50")
    return RunConfig(cmd, ns.data, ns.outcome, ns.id2, ns.id3, fixed, random, ns.nodes,
                     groups, out=getattr(ns, "out", None))


# -- reporting ---------------------------------------------------------------

def _pval(p):
    return "<0.001" if p < 0.001 else f"{p:.3f}"


def _term(name):
    return "intercept" if name == "_cons" else name


def _vc_rows(fm: FittedModel):
    """(label, estimate, se, lo, hi, p) rows for SDs and correlations.

    Standard errors come from the delta method on the unconstrained
    parameters; SD intervals are Wald intervals on the log scale and
    correlation intervals on the Fisher-z scale.
    """
    spec = fm.spec
    p = fm.beta_hat.size
    levels = [("Level-2", spec.random.level2, fm.vc.level2),
              ("Level-3", spec.random.level3, fm.vc.level3)]
    dims = [vc.cov.shape[0] if vc is not None else 0 for _, _, vc in levels]
    covs = [lv.covariance if lv is not None else "independent" for _, lv, _ in levels]
    layout = _Layout(p, dims[0], covs[0], dims[1], covs[1])

    # reported quantities per level: log-SDs, then Fisher-z of each correlation
    def summary(theta):
        out = []
        for L, cov in zip(layout.factors(theta), covs):
            om = L @ L.T
            sd = np.sqrt(np.diag(om))
            out += list(np.log(np.maximum(sd, 1e-300)))
            if cov == "unstructured":
                for a in range(len(sd)):
                    for b in range(a):
                        r = om[a, b] / (sd[a] * sd[b]) if sd[a] * sd[b] > 0 else 0.0
                        out.append(math.atanh(np.clip(r, -1 + 1e-12, 1 - 1e-12)))
        return np.array(out)

    vals = summary(fm.theta)
    se = np.full(vals.size, np.nan)
    cov = fm.theta_cov
    if cov is not None:
        ok = np.isfinite(np.diag(cov))
        J = np.zeros((vals.size, fm.theta.size))
        h = 1e-6
        for j in np.flatnonzero(ok):
            e = np.zeros_like(fm.theta)
            e[j] = h
            J[:, j] = (summary(fm.theta + e) - summary(fm.theta - e)) / (2 * h)
        Jk = J[:, ok]
        se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", Jk, cov[np.ix_(ok, ok)], Jk), 0))
        # a floored SD has no standard error
        floored = ~np.isfinite(np.diag(cov))
        touched = np.abs(J[:, floored]).sum(axis=1) > 0 if floored.any() else np.zeros(vals.size, bool)
        se[touched] = np.nan

    blocks, k = [], 0
    for (lvname, lv, vc), d, c in zip(levels, dims, covs):
        rows = []
        if d:
            for a, nm in enumerate(vc.names):
                z, s = vals[k], se[k]
                term = "intercept" if nm == "_cons" else f"slope ({nm})"
                flag = " [boundary]" if vc.boundary[a] else ""
                rows.append((f"{lvname}: {term}{flag}", math.exp(z), math.exp(z) * s,
                             math.exp(z - 1.96 * s), math.exp(z + 1.96 * s), None))
                k += 1
            if c == "unstructured":
                for a in range(d):
                    for b in range(a):
                        z, s = vals[k], se[k]
                        r = math.tanh(z)
                        pv = 2 * norm.sf(abs(z / s)) if s > 0 else float("nan")
                        rows.append((f"{lvname}: corr({_term(vc.names[b])}, {_term(vc.names[a])})", r,
                                     (1 - r * r) * s, math.tanh(z - 1.96 * s),
                                     math.tanh(z + 1.96 * s), pv))
                        k += 1
        blocks.append(rows)
    # highest level first, as in the usual mixed-model layout
    return blocks[1] + blocks[0]


def format_fit(fm: FittedModel, n_obs: int) -> str:
    """Coefficient table: odds ratios, SEs (delta method), Wald 95% CIs."""
    lines = [f"Mixed-effects logistic regression (N = {n_obs}, "
             f"log-likelihood = {fm.loglik:.4f}, nodes = {fm.nodes})",
             f"{'Parameter':<34}{'OR':>9}{'SE':>9}  {'95% CI (Wald)':<20}{'p':>8}",
             "Fixed effects"]
    se = fm.se
    order = list(range(1, fm.beta_hat.size)) + [0]
    for j in order:
        b, s = fm.beta_hat[j], se[j]
        name = "Intercept (baseline odds)" if fm.names[j] == "_cons" else fm.names[j]
        orr = math.exp(b)
        ci = f"({math.exp(b - 1.96 * s):.3f}, {math.exp(b + 1.96 * s):.3f})"
        pv = 2 * norm.sf(abs(b / s))
        lines.append(f"  {name:<32}{orr:9.3f}{orr * s:9.3f}  {ci:<20}{_pval(pv):>8}")
    rows = _vc_rows(fm)
    if rows:
        lines.append("Random effects (SD; intervals are Wald on log-SD / Fisher-z scale)")
        for label, est, s, lo, hi, pv in rows:
            ci = f"({lo:.3f}, {hi:.3f})" if np.isfinite(s) else "(.)"
            pv = "---" if pv is None else _pval(pv)
            s = f"{s:9.3f}" if np.isfinite(s) else f"{'.':>9}"
            lines.append(f"  {label:<32}{est:9.3f}{s}  {ci:<20}{pv:>8}")
    if not fm.converged:
        lines.append("warning: optimizer did not converge")
    return "\n".join(lines)


# -- execution ---------------------------------------------------------------

def _load(cfg: RunConfig):
    ds = read_csv(cfg.data_path, outcome=cfg.outcome, id2=cfg.id2, id3=cfg.id3)
    spec = ModelSpec(cfg.fixed, cfg.random)
    for c in spec.fixed + tuple(s for lv in (spec.random.level2, spec.random.level3)
                                if lv is not None for s in lv.slopes):
        ds.column(c)
    return ds, spec


def execute(cfg: RunConfig, out=None) -> int:
    """Run a parsed command; returns the process exit code."""
    out = out or sys.stdout
    if cfg.command == "catalog":
        for sc in scenario_catalog():
            if cfg.part is None or sc.part == cfg.part:
                sizes = (f"sizes={min(sc.sizes)}..{max(sc.sizes)}" if sc.sizes
                         else f"J={sc.J} K={sc.K} n={sc.n}")
                print(f"{sc.id:<26} part={sc.part} {sizes} icc={sc.icc:g} "
                      f"misspec={sc.misspec} param={sc.param:g} rule={sc.gof_rule} "
                      f"fitted={sc.fitted_levels}", file=out)
        return EXIT_OK
    if cfg.command == "simulate":
        scs = find_scenarios(cfg.part, cfg.scenarios)
        if not scs:
            raise UsageError("no scenario matches the selection")
        opts = FitOptions(nodes=cfg.nodes)
        sums = []
        for sc in scs:
            s = run_scenario(sc, cfg.reps, cfg.seed, jobs=cfg.jobs, options=opts)
            sums.append(s)
            print(f"{sc.id}: rejection_rate={s.rejection_rate:.3f} failure_rate="
                  f"{s.failure_rate:.3f} mc=[{s.mc_lower:.3f}, {s.mc_upper:.3f}]", file=out)
        write_scenario_csv(sums, cfg.out)
        return EXIT_OK

    ds, spec = _load(cfg)
    opts = FitOptions(nodes=cfg.nodes)
    if cfg.command == "fit":
        fm = fit(ds, spec, nodes=cfg.nodes)
        print(format_fit(fm, ds.n_obs), file=out)
        return EXIT_OK
    res = run_test(ds, spec, cfg.groups, opts)
    print(format_report(res), file=out)
    if cfg.out:
        write_records([res], cfg.out)
    return EXIT_OK if res.ok else EXIT_GOF_FAILED


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    stage = cfg.command
    try:
        return execute(cfg)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SpecError, OSError) as exc:
        print(f"error: data: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MlmGofError as exc:
        print(f"error: {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
