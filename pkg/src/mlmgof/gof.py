"""Grouping-based Wald goodness-of-fit test for mixed-effects logistic models.

Observations are ranked by their conditional predicted probability within
each level-2 cluster and cut into ``G`` near-equal groups. Indicators for
groups ``2..G`` are pooled across clusters, appended to the fixed part of the
model, and the refitted indicator coefficients are tested jointly with a Wald
statistic against a chi-squared distribution on ``G - 1`` degrees of freedom.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaincc

from .data import ClusteredDataset, ModelSpec, build_design, cluster_sizes
from .errors import EstimationError, SingularCovariance, TooFewObservations
from .estimator import FitOptions, FittedModel, fit, predict_from_design

MAX_GROUPS = 10
RESULT_FIELDS = ("G_used", "rule", "W", "df", "p_value", "status",
                 "baseline_loglik", "augmented_loglik")


def rule_label(rule) -> str:
    """Normalize a grouping rule to ``"data_driven"`` or ``"forced(G)"``.

    Accepts ``"data_driven"``, ``"auto"``, ``None``, an integer ``G``, or an
    already normalized ``"forced(G)"`` string.
    """
    if rule is None or rule in ("data_driven", "auto"):
        return "data_driven"
    if isinstance(rule, str) and rule.startswith("forced(") and rule.endswith(")"):
        rule = int(rule[7:-1])
    if isinstance(rule, (int, np.integer)) and not isinstance(rule, bool):
        if rule < 2:
            raise ValueError(f"forced group count must be at least 2, got {rule}")
        return f"forced({int(rule)})"
    raise ValueError(f"unknown grouping rule {rule!r}")


def select_group_count(level2_sizes, rule="data_driven") -> int:
    """Number of groups: ``min(10, n_min)`` or the forced value.

    Parameters
    ----------
    level2_sizes : mapping or sequence
        Observation counts per level-2 cluster.
    rule : str or int
        ``"data_driven"`` or a forced group count.

    Raises
    ------
    TooFewObservations
        Under the data-driven rule when the smallest cluster has fewer than
        two observations (a one-group test has no degrees of freedom).
    """
    label = rule_label(rule)
    sizes = list(level2_sizes.values()) if hasattr(level2_sizes, "values") else list(level2_sizes)
    if not sizes:
        raise ValueError("no clusters")
    if label != "data_driven":
        return int(label[7:-1])
    n_min = int(min(sizes))
    if n_min < 2:
        raise TooFewObservations(f"smallest level-2 cluster has {n_min} observation(s)")
    return min(MAX_GROUPS, n_min)


@dataclass(frozen=True)
class GroupAssignment:
    """Group label (1..G) per row and the cluster-by-group occupancy table."""

    G: int
    group_of_row: np.ndarray
    per_cluster_counts: np.ndarray

    @property
    def has_empty_cell(self) -> bool:
        return bool((self.per_cluster_counts == 0).any())


def assign_groups(p_hat, level2_ids, G: int) -> GroupAssignment:
    """Within-cluster ranking into ``G`` near-equal groups.

    Rows of each level-2 cluster are ranked by ``p_hat`` (ties keep row
    order) and the row with 1-based rank ``r`` in a cluster of size ``n_j``
    goes to group ``floor((r - 1) * G / n_j) + 1``.
    """
    p_hat = np.asarray(p_hat, dtype=float)
    codes = np.unique(np.asarray(level2_ids), return_inverse=True)[1].ravel()
    if G < 2:
        raise ValueError("G must be at least 2")
    if not np.all(np.isfinite(p_hat)):
        raise ValueError("predicted probabilities must be finite")
    # lexsort is stable, so equal p_hat keep their row order
    order = np.lexsort((p_hat, codes))
    sizes = np.bincount(codes)
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    rank0 = np.arange(len(order)) - starts[codes[order]]
    groups = np.empty(len(order), dtype=np.int64)
    groups[order] = rank0 * G // sizes[codes[order]] + 1
    counts = np.zeros((len(sizes), G), dtype=np.int64)
    np.add.at(counts, (codes, groups - 1), 1)
    groups.setflags(write=False)
    counts.setflags(write=False)
    return GroupAssignment(int(G), groups, counts)


def build_indicators(ga: GroupAssignment) -> np.ndarray:
    """Pooled indicator columns for groups 2..G, shape ``(N, G - 1)``."""
    g = np.asarray(ga.group_of_row)
    return (g[:, None] == np.arange(2, ga.G + 1)[None, :]).astype(float)


def chi2_survival(x: float, df: int) -> float:
    """Upper tail ``P(X > x)`` of a chi-squared variable with ``df`` d.o.f."""
    if df < 1:
        raise ValueError("df must be at least 1")
    if x < 0:
        raise ValueError("x must be non-negative")
    return float(gammaincc(0.5 * df, 0.5 * x))


def wald_statistic(gamma_hat, gamma_cov):
    """Return ``(W, df)`` with ``W = g' V^{-1} g`` from a linear solve.

    Raises
    ------
    SingularCovariance
        ``gamma_cov`` is not (numerically) positive definite.
    """
    g = np.atleast_1d(np.asarray(gamma_hat, dtype=float))
    V = np.atleast_2d(np.asarray(gamma_cov, dtype=float))
    if V.shape != (g.size, g.size):
        raise ValueError(f"covariance shape {V.shape} does not match {g.size} coefficients")
    if not np.all(np.isfinite(V)) or not np.all(np.isfinite(g)):
        raise SingularCovariance("non-finite coefficient or covariance entry")
    V = 0.5 * (V + V.T)
    ev = np.linalg.eigvalsh(V)
    if ev[0] <= 1e-12 * max(ev[-1], 0.0) or ev[-1] <= 0:
        raise SingularCovariance("coefficient covariance is not positive definite")
    try:
        x = np.linalg.solve(V, g)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(str(exc)) from None
    return float(g @ x), int(g.size)


@dataclass(frozen=True)
class GofResult:
    """Outcome of :func:`run_test`.

    ``W`` and ``p_value`` are ``None`` unless ``status == "ok"``; otherwise
    ``status`` reads ``"failed(<reason>)"``.
    """

    G_used: int | None
    rule: str
    W: float | None
    df: int | None
    p_value: float | None
    status: str
    gamma_hat: np.ndarray | None = None
    gamma_cov: np.ndarray | None = None
    baseline_loglik: float | None = None
    augmented_loglik: float | None = None
    assignment: GroupAssignment | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def reason(self) -> str | None:
        return None if self.ok else self.status[len("failed("):-1]

    def record(self) -> dict:
        """The result row with the fields of :data:`RESULT_FIELDS`."""
        return {k: getattr(self, k) for k in RESULT_FIELDS}

    def same_numbers(self, other: "GofResult") -> bool:
        """Bitwise equality of everything except the rule label."""
        def eq(a, b):
            if a is None or b is None:
                return a is b
            return np.array_equal(np.asarray(a), np.asarray(b))
        keys = ("G_used", "W", "df", "p_value", "status", "gamma_hat",
                "gamma_cov", "baseline_loglik", "augmented_loglik")
        return all(eq(getattr(self, k), getattr(other, k)) for k in keys)


def _failed(reason, rule, G=None, base=None, aug=None, ga=None):
    return GofResult(G, rule, None, None if G is None else G - 1, None,
                     f"failed({reason})", baseline_loglik=base,
                     augmented_loglik=aug, assignment=ga)


def _indicator_names(ds, G):
    names = [f"I{g}" for g in range(2, G + 1)]
    while set(names) & set(ds.columns):
        names = ["_" + n for n in names]
    return names


def _augmented_start(base: FittedModel, X_aug, p_hat, q):
    """Warm start: baseline optimum with zero indicator coefficients."""
    p = base.beta_hat.size
    theta = np.concatenate([base.theta[:p], np.zeros(q), base.theta[p:]])
    n = theta.size
    H = np.zeros((n, n))
    old = np.r_[np.arange(p), np.arange(p + q, n)]
    H[np.ix_(old, old)] = base.inv_hessian
    w = p_hat * (1 - p_hat)
    info = X_aug.T @ (X_aug * w[:, None])
    Hg = np.linalg.pinv(info)[p:, p:]
    H[p:p + q, p:p + q] = 1.5 * Hg
    return theta, H


def run_test(ds: ClusteredDataset, spec: ModelSpec, rule="data_driven",
             options: FitOptions | None = None, baseline: FittedModel | None = None) -> GofResult:
    """Run the full goodness-of-fit procedure on one dataset.

    Parameters
    ----------
    ds, spec
        Data and the baseline model.
    rule : str or int
        ``"data_driven"`` (``G = min(10, n_min)``) or a forced group count.
    options : FitOptions, optional
        Estimator settings shared by the baseline and augmented fits.
    baseline : FittedModel, optional
        A baseline fit to reuse; fitted here when omitted.

    Returns
    -------
    GofResult
        Estimation problems, all-zero indicator columns and a singular
        indicator covariance give ``status = "failed(...)"`` rather than an
        exception.
    """
    label = rule_label(rule)
    opts = options or FitOptions()
    kw = asdict(opts)
    try:
        G = select_group_count(cluster_sizes(ds, "level2"), label)
    except TooFewObservations as exc:
        return _failed(f"too few observations: {exc}", label)

    if baseline is None:
        try:
            baseline = fit(ds, spec, covariance=False, **kw)
        except EstimationError as exc:
            return _failed(f"baseline {type(exc).__name__}", label, G)
    base_ll = float(baseline.loglik)

    design = build_design(ds, spec)
    p_hat = predict_from_design(baseline, design)
    ga = assign_groups(p_hat, ds.level2, G)
    if label == "data_driven":
        assert not ga.has_empty_cell, "data-driven grouping left an empty cell"
    ind = build_indicators(ga)
    empty = [g for g in range(2, G + 1) if not ind[:, g - 2].any()]
    if empty:
        cols = ",".join(f"I{g}" for g in empty)
        return _failed(f"degenerate indicator {cols}", label, G, base_ll, ga=ga)

    names = _indicator_names(ds, G)
    ds_aug = ds.with_columns(dict(zip(names, ind.T)))
    spec_aug = spec.with_extras(spec.extra_fixed + tuple(names))
    X_aug = np.column_stack([design.X, ind])
    start, H0 = _augmented_start(baseline, X_aug, p_hat, G - 1)
    try:
        aug = fit(ds_aug, spec_aug, start=start, inv_hessian=H0, **kw)
    except EstimationError as exc:
        return _failed(f"augmented {type(exc).__name__}", label, G, base_ll, ga=ga)

    k = len(names)
    gamma = aug.beta_hat[-k:].copy()
    V = aug.fixed_cov[-k:, -k:].copy()
    try:
        W, df = wald_statistic(gamma, V)
    except SingularCovariance:
        return _failed("singular covariance", label, G, base_ll, aug.loglik, ga)
    return GofResult(G, label, W, df, chi2_survival(W, df), "ok", gamma, V,
                     base_ll, float(aug.loglik), ga)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_records(results, path) -> None:
    """Write result records as CSV, one row per result."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in results:
            rec = r.record()
            w.writerow([_fmt(rec[k]) for k in RESULT_FIELDS])


def format_report(res: GofResult) -> str:
    """Human-readable summary ending with the augmented-model footer."""
    lines = ["Goodness-of-fit test (grouped Wald)"]
    for k, v in res.record().items():
        lines.append(f"  {k:<17}{_fmt(v) if v is not None else '.'}")
    if res.ok:
        lines.append(f"Groups used (G) = {res.G_used}, Wald chi2 = {res.W:.3f}, "
                     f"df = {res.df}, p = {res.p_value:.3f}")
    else:
        G = "." if res.G_used is None else res.G_used
        lines.append(f"Groups used (G) = {G}, no valid test ({res.reason})")
    return "\n".join(lines)


__all__ = ["GofResult", "GroupAssignment", "MAX_GROUPS", "RESULT_FIELDS",
           "assign_groups", "build_indicators", "chi2_survival", "format_report",
           "rule_label", "run_test", "select_group_count", "wald_statistic",
           "write_records"]
