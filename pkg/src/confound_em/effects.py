"""Treatment-effect summaries from a fitted model.

The outcome model is linear, so the effect of switching d from 0 to 1 at
covariate profile x* is beta2'x* (+ omega*b when a latent value is supplied),
and the ATE is that contrast averaged over the empirical covariate
distribution. Grids sweep one covariate while holding the others at chosen
summary statistics, one output line per statistic variant.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

_STATS = {
    "mean": np.mean,
    "median": np.median,
    "q1": lambda a: float(np.quantile(a, 0.25)),
    "q3": lambda a: float(np.quantile(a, 0.75)),
}


@dataclass(frozen=True)
class EffectQuery:
    """A covariate profile (leading intercept 1) and optional latent value."""

    x_star: np.ndarray
    b: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "x_star", np.asarray(self.x_star, dtype=float))
        if self.x_star.ndim != 1 or self.x_star.shape[0] < 1:
            raise ValueError("EffectQuery.x_star must be a nonempty vector")
        if self.x_star[0] != 1.0:
            raise ValueError("EffectQuery.x_star must lead with the intercept 1")


@dataclass(frozen=True)
class HteGridSpec:
    """One covariate sweeps a grid; the rest are pinned.

    conditioning maps covariate names to a summary statistic name (mean,
    median, q1, q3) or to a list of them; all list-valued entries must share
    the same list, and variant k moves them together to their k-th statistic
    while string-valued entries stay at their single statistic. fixed pins
    covariates (binaries in particular) at explicit values. Every non-varying,
    non-intercept covariate must appear in exactly one of the two maps.
    """

    varying: str
    grid: tuple
    conditioning: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)
    allow_fractional: bool = False

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
        if not self.grid:
            raise ValueError("grid must be nonempty")
        if any(lo > hi for lo, hi in zip(self.grid, self.grid[1:])):
            raise ValueError("grid must be sorted ascending")
        if self.varying in self.conditioning or self.varying in self.fixed:
            raise ValueError(f"varying covariate {self.varying!r} must not be pinned")
        overlap = set(self.conditioning) & set(self.fixed)
        if overlap:
            raise ValueError(f"covariates pinned twice: {sorted(overlap)}")
        for name, stat in self.conditioning.items():
            stats = stat if isinstance(stat, (list, tuple)) else [stat]
            for s in stats:
                if s not in _STATS:
                    raise ValueError(f"unknown statistic {s!r} for {name!r} "
                                     f"(choose from {sorted(_STATS)})")
        lists = {tuple(s) for s in self.conditioning.values()
                 if isinstance(s, (list, tuple))}
        if len(lists) > 1:
            raise ValueError("list-valued conditioning entries must share one "
                             "statistic list; variants move together")

    def variants(self):
        """(labels, per-variant stat map) resolved from the conditioning map."""
        lists = {n: tuple(s) for n, s in self.conditioning.items()
                 if isinstance(s, (list, tuple))}
        if lists:
            labels = list(next(iter(set(lists.values()))))
        else:
            pinned = sorted({s for s in self.conditioning.values()})
            labels = [pinned[0] if len(pinned) == 1 else ("mixed" if pinned else "fixed")]
        maps = []
        for k in range(len(labels)):
            maps.append({n: (s[k] if isinstance(s, (list, tuple)) else s)
                         for n, s in self.conditioning.items()})
        return labels, maps


def _beta2(fit):
    if not fit.converged:
        warnings.warn("effects computed from a non-converged fit", RuntimeWarning)
    p = fit.theta.p
    return fit.theta.beta[p:]


def ate(fit, design, *, subject_weighted: bool = False) -> float:
    """beta2' times the record-level (or subject-level) mean covariate profile."""
    if subject_weighted:
        means = np.stack([
            np.mean(design.x_star[design.offsets[i]:design.offsets[i + 1]], axis=0)
            for i in range(design.m)
        ])
        profile = means.mean(axis=0)
    else:
        profile = design.x_star.mean(axis=0)
    return float(np.dot(_beta2(fit), profile))


def hte(fit, q: EffectQuery) -> float:
    beta2 = _beta2(fit)
    if q.x_star.shape[0] != beta2.shape[0]:
        raise ValueError(f"profile has {q.x_star.shape[0]} entries; "
                         f"model expects {beta2.shape[0]}")
    value = float(np.dot(beta2, q.x_star))
    if q.b is not None:
        value += fit.theta.omega * q.b
    return value


def _column(design, name):
    try:
        j = design.feature_names.index(name)
    except ValueError:
        raise ValueError(f"unknown covariate {name!r}; have "
                         f"{design.feature_names[1:]}") from None
    if j == 0:
        raise ValueError("the intercept cannot be swept or pinned")
    return j, design.x_star[:, j]


def _is_binary(values):
    return bool(np.isin(values, (0.0, 1.0)).all())


def hte_grid(fit, design, spec: HteGridSpec, boot=None, *, level: float = 0.95):
    """Rows of (varying_value, conditioning_variant, estimate[, ci bounds]).

    Row order: grid points outer, statistic variants inner. CI bounds are
    percentile intervals over the bootstrap replicates' beta2 at each profile.
    """
    j_var, _ = _column(design, spec.varying)
    labels, maps = spec.variants()
    covered = {spec.varying} | set(spec.conditioning) | set(spec.fixed)
    missing = [n for n in design.feature_names[1:] if n not in covered]
    if missing:
        raise ValueError(f"covariates not assigned a grid role: {missing}")

    base = np.zeros(design.p)
    base[0] = 1.0
    for name, value in spec.fixed.items():
        j, _ = _column(design, name)
        base[j] = float(value)
    variant_profiles = []
    for stat_map in maps:
        prof = base.copy()
        for name, stat in stat_map.items():
            j, col = _column(design, name)
            if _is_binary(col) and not spec.allow_fractional:
                raise ValueError(
                    f"{name!r} is binary; pin it in fixed or set allow_fractional")
            prof[j] = float(_STATS[stat](col))
        variant_profiles.append(prof)

    beta2 = _beta2(fit)
    boot_beta2 = None
    if boot is not None:
        p = fit.theta.p
        boot_beta2 = np.stack([th.beta[p:] for th, _, _ in boot.replicates])
    lo_q, hi_q = (1.0 - level) / 2.0, (1.0 + level) / 2.0

    rows = []
    for g in spec.grid:
        for label, prof in zip(labels, variant_profiles):
            x = prof.copy()
            x[j_var] = g
            row = {"varying_value": g, "conditioning_variant": label,
                   "estimate": float(np.dot(beta2, x))}
            if boot_beta2 is not None:
                draws = boot_beta2 @ x
                row["ci_lo"] = float(np.quantile(draws, lo_q))
                row["ci_hi"] = float(np.quantile(draws, hi_q))
            rows.append(row)
    return rows


def write_grid_csv(rows, path, header_comments=()):
    """Emit grid rows with repr-formatted floats (round-trips exactly)."""
    cols = ["varying_value", "conditioning_variant", "estimate"]
    if rows and "ci_lo" in rows[0]:
        cols += ["ci_lo", "ci_hi"]
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(cols) + "\n")
        for row in rows:
            cells = [repr(row[c]) if isinstance(row[c], float) else str(row[c])
                     for c in cols]
            fh.write(",".join(cells) + "\n")
