"""Monte Carlo studies of the goodness-of-fit test.

Data come from a three-level random-intercept/random-slope logistic model

    logit p = b0 + b1*x1 + b2*x2 + v_j + u_kj + w_kj*x2

with ``x1 ~ U(-3, 3)`` and ``x2 ~ Bernoulli(0.5)``, optionally distorted by
a quadratic term, an interaction, or an extra cluster-level intercept that
the fitted model leaves out. :func:`run_scenario` replicates generate-fit-test
and counts rejections and failures.
"""
from __future__ import annotations

import csv
import math
import os
import zlib
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import LevelEffects, ModelSpec, RandomEffectsSpec, from_arrays
from .errors import BadIcc
from .estimator import FitOptions
from .gof import GofResult, rule_label, run_test

ALPHA = 0.05
TRUE_BETA = (-1.0, 0.5, 0.3)
SLOPE_SD = 0.5
SIM_NODES = 5
MISSPEC = ("none", "quadratic", "interaction", "omitted_level")
SCENARIO_FIELDS = ("scenario_id", "part", "J", "K", "n", "icc", "misspec", "param",
                   "rule", "reps", "rejections", "failures", "rejection_rate",
                   "failure_rate", "mc_lower", "mc_upper", "master_seed")


def icc_to_variance(icc: float) -> float:
    """Latent-scale variance giving ``icc = s2 / (s2 + pi^2/3)``."""
    if not (isinstance(icc, (int, float)) and 0.0 < icc < 1.0):
        raise BadIcc(f"icc must lie strictly between 0 and 1, got {icc!r}")
    return icc * (math.pi ** 2 / 3.0) / (1.0 - icc)


def monte_carlo_bounds(alpha: float, reps: int) -> tuple[float, float]:
    """Normal-approximation 95% band for a rejection rate around ``alpha``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if reps < 1:
        raise ValueError("reps must be at least 1")
    h = 1.96 * math.sqrt(alpha * (1.0 - alpha) / reps)
    return max(0.0, alpha - h), min(1.0, alpha + h)


@dataclass(frozen=True)
class Scenario:
    """One design point of the simulation study.

    ``sizes`` lists level-2 cluster sizes for a two-level design (``J = 1``
    synthetic level-3 unit); otherwise the design is ``J x K x n``. Random
    effect SDs default from ``icc``: split equally between the level-3 and
    level-2 intercepts for three-level data, all on the level-2 intercept for
    ``sizes`` designs.
    """

    id: str
    part: int
    J: int = 1
    K: int = 1
    n: int = 1
    icc: float = 0.2
    beta: tuple = TRUE_BETA
    slope_sd: float = SLOPE_SD
    misspec: str = "none"
    param: float = 0.0
    gof_rule: str = "data_driven"
    fitted_levels: str = "three"
    sizes: tuple = ()
    sd_v: float | None = None
    sd_u: float | None = None
    data_key: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "gof_rule", rule_label(self.gof_rule))
        if not self.data_key:
            object.__setattr__(self, "data_key", self.id)
        icc_to_variance(self.icc)
        if min(self.J, self.K, self.n, *(self.sizes or (1,))) < 1:
            raise ValueError("cluster counts and sizes must be at least 1")
        if self.misspec not in MISSPEC:
            raise ValueError(f"unknown misspecification {self.misspec!r}")
        if self.fitted_levels not in ("two", "three"):
            raise ValueError("fitted_levels must be 'two' or 'three'")
        if self.misspec == "omitted_level" and self.fitted_levels != "two":
            raise ValueError("an omitted-level scenario must be fitted with two levels")
        if self.slope_sd < 0 or (self.misspec == "omitted_level" and self.param < 0):
            raise ValueError("standard deviations must be non-negative")

    @property
    def level2_sizes(self) -> tuple:
        return self.sizes if self.sizes else (self.n,) * (self.J * self.K)

    @property
    def n_obs(self) -> int:
        return sum(self.level2_sizes)

    @property
    def sds(self) -> tuple[float, float]:
        """``(sd_v, sd_u)`` of the level-3 and level-2 random intercepts."""
        s2 = icc_to_variance(self.icc)
        if self.sizes:
            default = (0.0, math.sqrt(s2))
        else:
            default = (math.sqrt(s2 / 2), math.sqrt(s2 / 2))
        return (default[0] if self.sd_v is None else self.sd_v,
                default[1] if self.sd_u is None else self.sd_u)

    def model_spec(self) -> ModelSpec:
        lv3 = LevelEffects(True, ()) if self.fitted_levels == "three" and not self.sizes else None
        return ModelSpec(("x1", "x2"), RandomEffectsSpec(LevelEffects(True, ("x2",)), lv3))


def derive_seed(master_seed: int, key: str, rep: int) -> int:
    """Per-replication seed from ``(master_seed, key, rep)``."""
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(key.encode()), int(rep)])
    return int(ss.generate_state(1, np.uint64)[0])


def generate_dataset(sc: Scenario, rep_seed: int, return_eta: bool = False):
    """Draw one dataset for ``sc``.

    The random stream does not depend on ``misspec``, so two scenarios that
    differ only in the misspecification share covariates and random effects
    for the same seed.
    """
    rng = np.random.default_rng(rep_seed)
    sizes = np.array(sc.level2_sizes)
    n2 = len(sizes)
    N = int(sizes.sum())
    n3 = 1 if sc.sizes else sc.J
    l2 = np.repeat(np.arange(n2), sizes)
    fam_of_sub = np.zeros(n2, dtype=int) if sc.sizes else np.repeat(np.arange(sc.J), sc.K)
    l3 = fam_of_sub[l2]

    x1 = rng.uniform(-3.0, 3.0, N)
    x2 = (rng.random(N) < 0.5).astype(float)
    sd_v, sd_u = sc.sds
    v = rng.standard_normal(n3) * sd_v
    u = rng.standard_normal(n2) * sd_u
    w = rng.standard_normal(n2) * sc.slope_sd
    extra = rng.standard_normal(n3)
    b0, b1, b2 = sc.beta
    eta = b0 + b1 * x1 + b2 * x2 + v[l3] + u[l2] + w[l2] * x2
    if sc.misspec == "quadratic":
        eta = eta + sc.param * x1 ** 2
    elif sc.misspec == "interaction":
        eta = eta + sc.param * x1 * x2
    elif sc.misspec == "omitted_level":
        eta = eta + sc.param * extra[l3]
    y = (rng.random(N) < expit(eta)).astype(float)
    ds = from_arrays(y, l2, None if sc.sizes else l3, {"x1": x1, "x2": x2})
    return (ds, eta) if return_eta else ds


def applied_example(seed: int = 2024):
    """Family study with visits nested in subjects nested in families.

    30 families of 5-7 subjects with 5 visits each; a family-level random
    intercept and random slope on ``visit`` (correlated) plus a subject-level
    random intercept. Returns ``(dataset, spec)`` with covariates
    ``intervention`` (assigned per family), ``bmi_c`` and ``visit``.
    """
    rng = np.random.default_rng(seed)
    fam_sizes = rng.integers(5, 8, size=30)
    n2 = int(fam_sizes.sum())
    fam_of_sub = np.repeat(np.arange(30), fam_sizes)
    l2 = np.repeat(np.arange(n2), 5)
    l3 = fam_of_sub[l2]
    visit = np.tile(np.arange(1.0, 6.0), n2)
    treat = (rng.random(30) < 0.5).astype(float)[l3]
    bmi_c = np.round(rng.normal(0.0, 4.0, n2)[l2] + rng.normal(0.0, 0.5, l2.size), 1)
    sd_f, sd_s, rho = np.array([0.74, 0.45]), 0.57, -0.43
    om = np.outer(sd_f, sd_f) * np.array([[1.0, rho], [rho, 1.0]])
    fam = rng.standard_normal((30, 2)) @ np.linalg.cholesky(om).T
    sub = rng.standard_normal(n2) * sd_s
    eta = (-1.92 + 1.76 * treat - 0.10 * bmi_c + 0.27 * visit
           + fam[l3, 0] + fam[l3, 1] * visit + sub[l2])
    y = (rng.random(l2.size) < expit(eta)).astype(float)
    labels3 = np.array([f"F{j + 1:02d}" for j in range(30)])
    labels2 = np.array([f"F{fam_of_sub[k] + 1:02d}-S{k + 1:03d}" for k in range(n2)])
    ds = from_arrays(y, labels2[l2], labels3[l3],
                     {"intervention": treat, "bmi_c": bmi_c, "visit": visit})
    spec = ModelSpec(("intervention", "bmi_c", "visit"),
                     RandomEffectsSpec(LevelEffects(True, ()),
                                       LevelEffects(True, ("visit",), "unstructured")))
    return ds, spec


def scenario_catalog() -> list[Scenario]:
    """All design points: 12 null, 10 power, and 10 grouping designs x 2 rules."""
    out = []
    for J in (15, 30, 50):
        for K in (5, 10):
            for icc in (0.10, 0.30):
                out.append(Scenario(f"p1-J{J}-K{K}-icc{icc:.2f}", 1, J, K, 20, icc))
    base = dict(part=2, J=30, K=5, n=20, icc=0.20)
    for b3 in (0.02, 0.05, 0.10, 0.15):
        out.append(Scenario(f"p2-quadratic-{b3:g}", misspec="quadratic", param=b3, **base))
    for b3 in (0.3, 0.6, 0.9):
        out.append(Scenario(f"p2-interaction-{b3:g}", misspec="interaction", param=b3, **base))
    for sx in (0.5, 1.0, 1.5):
        out.append(Scenario(f"p2-omitted-{sx:g}", misspec="omitted_level", param=sx,
                            fitted_levels="two", **base))
    for design in ("unbalanced", "balanced"):
        for ns in (3, 5, 6, 8, 10):
            sizes = (ns,) * 10 + (20,) * 40 if design == "unbalanced" else (ns,) * 50
            key = f"p3-{design}-n{ns}"
            for rule, tag in (("data_driven", "dd"), (10, "g10")):
                out.append(Scenario(f"{key}-{tag}", 3, 1, len(sizes), ns, 0.20,
                                    gof_rule=rule, fitted_levels="two", sizes=sizes,
                                    data_key=key))
    return out


def find_scenarios(part: int | None = None, ids=None) -> list[Scenario]:
    """Catalog entries filtered by part and/or exact ids (or id prefixes)."""
    cat = scenario_catalog()
    if part is not None:
        cat = [s for s in cat if s.part == part]
    if ids:
        cat = [s for s in cat if any(s.id == i or s.id.startswith(i + "-") for i in ids)]
    return cat


def failure_kind(status: str) -> str | None:
    """Classify a result status as ``"grouping"``, ``"estimation"`` or
    ``"covariance"`` failure; ``None`` when the status is ``"ok"``."""
    if status == "ok":
        return None
    r = status[len("failed("):-1]
    if r.startswith("degenerate") or r.startswith("too few"):
        return "grouping"
    if r.startswith("singular covariance"):
        return "covariance"
    return "estimation"


def run_replication(sc: Scenario, rep: int, master_seed: int,
                    options: FitOptions | None = None) -> GofResult:
    """Generate, fit and test replication ``rep`` of ``sc``."""
    ds = generate_dataset(sc, derive_seed(master_seed, sc.data_key, rep))
    return run_test(ds, sc.model_spec(), sc.gof_rule, options or FitOptions(nodes=SIM_NODES))


@dataclass(frozen=True)
class ScenarioSummary:
    """Counts and rates from :func:`run_scenario`.

    ``rejection_rate`` is over valid (non-failed) replications; with no valid
    replication it is 0 and the Monte Carlo band is the uninformative [0, 1].
    """

    scenario: Scenario
    replications: int
    rejections: int
    failures: int
    rejection_rate: float
    failure_rate: float
    mc_lower: float
    mc_upper: float
    seed: int
    alpha: float = ALPHA
    failure_kinds: dict = field(default_factory=dict)
    p_values: tuple = ()

    @property
    def valid(self) -> int:
        return self.replications - self.failures

    def within_bounds(self) -> bool:
        return self.mc_lower <= self.rejection_rate <= self.mc_upper

    def record(self) -> dict:
        sc = self.scenario
        return {"scenario_id": sc.id, "part": sc.part, "J": sc.J, "K": sc.K, "n": sc.n,
                "icc": sc.icc, "misspec": sc.misspec, "param": sc.param,
                "rule": sc.gof_rule, "reps": self.replications,
                "rejections": self.rejections, "failures": self.failures,
                "rejection_rate": self.rejection_rate, "failure_rate": self.failure_rate,
                "mc_lower": self.mc_lower, "mc_upper": self.mc_upper,
                "master_seed": self.seed}


def _worker(args):
    sc, rep, seed, options = args
    res = run_replication(sc, rep, seed, options)
    # ship back only what the summary needs
    return rep, res.p_value, res.status


def summarize(sc: Scenario, results, master_seed: int, alpha: float = ALPHA) -> ScenarioSummary:
    """Aggregate ``(p_value, status)`` pairs (in rep order) into a summary."""
    reps = len(results)
    kinds = Counter()
    rejections = failures = 0
    pvals = []
    for p, status in results:
        if status != "ok":
            failures += 1
            kinds[failure_kind(status)] += 1
            pvals.append(None)
            continue
        pvals.append(p)
        rejections += p < alpha
    valid = reps - failures
    rate = rejections / valid if valid else 0.0
    lo, hi = monte_carlo_bounds(alpha, valid) if valid else (0.0, 1.0)
    return ScenarioSummary(sc, reps, rejections, failures, rate,
                           failures / reps if reps else 0.0, lo, hi, int(master_seed),
                           alpha, dict(kinds), tuple(pvals))


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1


def run_scenario(sc: Scenario, reps: int, master_seed: int, jobs: int = 1,
                 options: FitOptions | None = None, alpha: float = ALPHA) -> ScenarioSummary:
    """Run ``reps`` replications of ``sc`` and count rejections at ``alpha``.

    Replications are independent; with ``jobs > 1`` they run in a process
    pool. Seeds depend only on ``(master_seed, sc.data_key, rep)``, so the
    summary does not depend on ``jobs``.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    options = options or FitOptions(nodes=SIM_NODES)
    tasks = [(sc, r, master_seed, options) for r in range(reps)]
    if jobs <= 1:
        out = [_worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(_worker, tasks, chunksize=max(1, reps // (4 * jobs))))
    out.sort(key=lambda t: t[0])
    return summarize(sc, [(p, s) for _, p, s in out], master_seed, alpha)


def write_scenario_csv(summaries, path) -> None:
    """One row per scenario with the columns of :data:`SCENARIO_FIELDS`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SCENARIO_FIELDS)
        w.writeheader()
        for s in summaries:
            rec = s.record()
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})


__all__ = ["ALPHA", "Scenario", "ScenarioSummary", "SCENARIO_FIELDS", "derive_seed",
           "find_scenarios", "failure_kind", "generate_dataset", "icc_to_variance",
           "monte_carlo_bounds", "run_replication", "run_scenario", "scenario_catalog",
           "summarize", "write_scenario_csv", "default_jobs", "applied_example"]
