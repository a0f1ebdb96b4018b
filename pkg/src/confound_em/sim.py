"""Synthetic-panel generator and the replication harness.

The generator draws, per subject: a panel length, two correlated binary
covariates (constant over time), i.i.d. rows of AR(1)-correlated continuous
covariates, a latent intercept, then treatment and outcome per record. The
harness refits R independent draws and tabulates mean/SE/bias/RMSE per
parameter against the generating values.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np
from scipy.special import expit

from . import effects, em, initialization, panel_data, runtime
from .em import FitConfig
from .laplace import NumericalError, Theta
from .panel_data import PanelDataset, PanelRecord, Subject

_DEFAULT_BETA = (-3.0, 1.0, 3.0, -1.0, -3.0, 2.0, 5.0, 2.0, 2.0, -2.0, -3.0, 3.0)
_DEFAULT_ETA = (0.3, -0.3, 0.2, -0.2, 0.2, -0.3)


@dataclass(frozen=True)
class DgpConfig:
    """Generating parameters; defaults reproduce the reference study design."""

    beta: tuple = _DEFAULT_BETA
    omega: float = 0.5
    sigma: float = 0.5
    eta: tuple = _DEFAULT_ETA
    xi: float = 0.5
    sigma_b: float = 1.0
    m: int = 100
    n_range: tuple = (2, 10)
    z_marginals: tuple = (0.5, 0.3)
    z_corr: float = 0.25
    x_ar1_corr: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(v) for v in self.beta))
        object.__setattr__(self, "eta", tuple(float(v) for v in self.eta))
        object.__setattr__(self, "n_range", tuple(int(v) for v in self.n_range))
        object.__setattr__(self, "z_marginals", tuple(float(v) for v in self.z_marginals))
        if len(self.z_marginals) != 2:
            raise ValueError("z_marginals must hold exactly two probabilities")
        if len(self.beta) != 2 * len(self.eta):
            raise ValueError(f"beta length {len(self.beta)} != 2 x eta length {len(self.eta)}")
        if self.p2 < 0:
            raise ValueError("eta must cover intercept + two binaries at least")
        for q in self.z_marginals:
            if not 0.0 < q < 1.0:
                raise ValueError(f"z marginal {q} outside (0, 1)")
        if not abs(self.x_ar1_corr) < 1.0:
            raise ValueError("x_ar1_corr must lie in (-1, 1)")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.sigma_b < 0.0:
            raise ValueError("sigma_b must be nonnegative")
        if self.m < 1:
            raise ValueError("m must be at least 1")
        lo, hi = self.n_range
        if not 1 <= lo <= hi:
            raise ValueError(f"n_range {self.n_range} must satisfy 1 <= lo <= hi")
        p11 = self.joint_z11()
        q1, q2 = self.z_marginals
        if not max(0.0, q1 + q2 - 1.0) <= p11 <= min(q1, q2):
            raise ValueError(
                f"z_corr {self.z_corr} infeasible for marginals {self.z_marginals}")

    @property
    def p(self) -> int:
        return len(self.eta)

    @property
    def p2(self) -> int:
        return len(self.eta) - 1 - len(self.z_marginals)

    def joint_z11(self) -> float:
        q1, q2 = self.z_marginals
        return q1 * q2 + self.z_corr * float(
            np.sqrt(q1 * (1.0 - q1) * q2 * (1.0 - q2)))

    def true_theta(self) -> Theta:
        return Theta(beta=np.array(self.beta), sigma=self.sigma, omega=self.omega,
                     eta=np.array(self.eta), xi=self.xi,
                     sigma_b=max(self.sigma_b, 0.0))

    @classmethod
    def from_mapping(cls, mapping) -> "DgpConfig":
        """Build from string-valued keys (vectors and pairs comma-separated)."""
        kwargs = {}
        parsers = {
            "beta": lambda s: tuple(float(v) for v in str(s).split(",")),
            "eta": lambda s: tuple(float(v) for v in str(s).split(",")),
            "n_range": lambda s: tuple(int(v) for v in str(s).split(",")),
            "z_marginals": lambda s: tuple(float(v) for v in str(s).split(",")),
            "m": int,
            "omega": float, "sigma": float, "xi": float, "sigma_b": float,
            "z_corr": float, "x_ar1_corr": float,
        }
        for key, raw in mapping.items():
            if key not in parsers:
                raise ValueError(f"unknown generator option {key!r}")
            kwargs[key] = parsers[key](raw)
        return cls(**kwargs)


def _ar1_chol(p2: int, rho: float) -> np.ndarray:
    if p2 == 0:
        return np.zeros((0, 0))
    k = np.arange(p2)
    cov = rho ** np.abs(k[:, None] - k[None, :])
    return np.linalg.cholesky(cov)


def gen_dataset(dgp: DgpConfig, seed: int, *, replicate: int = 0) -> PanelDataset:
    """One panel draw on the stream (seed, simulation domain, replicate).

    Per-subject draw order is fixed (panel length, binaries, continuous block,
    latent intercept, treatment uniforms, outcome noise) so the dataset is a
    pure function of (dgp, seed, replicate).
    """
    rng = runtime.stream(seed, runtime.DOMAIN_SIM, replicate)
    q1, q2 = dgp.z_marginals
    p11 = dgp.joint_z11()
    cells = ((0.0, 0.0, 1.0 - q1 - q2 + p11), (0.0, 1.0, q2 - p11),
             (1.0, 0.0, q1 - p11), (1.0, 1.0, p11))
    chol = _ar1_chol(dgp.p2, dgp.x_ar1_corr)
    beta = np.array(dgp.beta)
    b1, b2 = beta[:dgp.p], beta[dgp.p:]
    eta = np.array(dgp.eta)
    lo, hi = dgp.n_range

    subjects = []
    for i in range(dgp.m):
        n_i = int(rng.integers(lo, hi + 1))
        u = float(rng.random())
        acc = 0.0
        for z1, z2, prob in cells:
            acc += prob
            if u < acc:
                break
        x = rng.standard_normal((n_i, dgp.p2)) @ chol.T
        b = dgp.sigma_b * float(rng.standard_normal())
        x_star = np.column_stack([np.ones(n_i), np.full(n_i, z1), np.full(n_i, z2), x])
        d = (rng.random(n_i) < expit(x_star @ eta + dgp.xi * b)).astype(float)
        y = (x_star @ b1 + d * (x_star @ b2)
             + (1.0 + dgp.omega * d) * b + dgp.sigma * rng.standard_normal(n_i))
        sid = f"s{i}"
        records = tuple(
            PanelRecord(subject_id=sid, y=float(y[j]), d=int(d[j]), x=x[j], j=j + 1)
            for j in range(n_i)
        )
        subjects.append(Subject(subject_id=sid, z=np.array([z1, z2]), records=records))
    return PanelDataset(
        subjects=tuple(subjects),
        z_names=("z1", "z2"),
        x_names=tuple(f"x{k + 1}" for k in range(dgp.p2)),
    )


def true_ate(dgp: DgpConfig) -> float:
    """Treatment-contrast coefficients dotted with the exact covariate means."""
    beta2 = dgp.beta[dgp.p:]
    means = (1.0,) + dgp.z_marginals + (0.0,) * dgp.p2
    total = 0.0
    for bk, mk in zip(beta2, means):
        total += bk * mk
    return total


# --------------------------------------------------------------------------
# replication harness
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ReplicationTable:
    names: tuple
    true: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    bias: np.ndarray
    rmse: np.ndarray
    R: int
    convergence_rate: float

    def rows(self):
        return [
            {"param": name, "true": float(self.true[k]), "mean": float(self.mean[k]),
             "se": float(self.se[k]), "bias": float(self.bias[k]),
             "rmse": float(self.rmse[k])}
            for k, name in enumerate(self.names)
        ]

    def row(self, name):
        return self.rows()[list(self.names).index(name)]

    def to_jsonable(self):
        return {"R": self.R, "convergence_rate": self.convergence_rate,
                "rows": self.rows()}

    def write_csv(self, path, header_comments=()):
        cols = ("param", "true", "mean", "se", "bias", "rmse")
        with open(path, "w", encoding="utf-8") as fh:
            for line in header_comments:
                fh.write(f"# {line}\n")
            fh.write(",".join(cols) + "\n")
            for row in self.rows():
                fh.write(",".join(
                    row["param"] if c == "param" else repr(row[c]) for c in cols) + "\n")


def _rep_one(r, dgp, seed, cfg):
    ds = gen_dataset(dgp, seed, replicate=r)
    design = panel_data.expand_design(ds)
    try:
        theta0 = initialization.initialize(design, cfg).theta0
        res = em.fit(design, theta0, cfg)
    except (NumericalError, np.linalg.LinAlgError):
        return r, False, None
    if not res.converged:
        return r, False, None
    return r, True, np.append(res.theta.as_vector(), effects.ate(res, design))


def run_replications(dgp: DgpConfig, R: int, seed: int,
                     cfg: FitConfig = FitConfig(), *, threads=None) -> ReplicationTable:
    """Fit R independent draws; tabulate converged fits against the truth.

    Bit-identical for fixed (dgp, R, seed, cfg) at any worker count: each
    replicate owns stream (seed, r) and aggregation walks replicate order.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    fn = partial(_rep_one, dgp=dgp, seed=seed, cfg=cfg)
    results = runtime.parallel_map(fn, list(range(R)), runtime.resolve_threads(threads))
    vectors = [vec for _, ok, vec in results if ok]
    n_conv = len(vectors)
    rate = n_conv / R
    if rate < 0.5:
        raise NumericalError(
            f"replication harness unstable: only {n_conv} of {R} fits converged")
    truth = np.append(dgp.true_theta().as_vector(), true_ate(dgp))
    mat = np.stack(vectors)
    mean = mat.mean(axis=0)
    se = mat.std(axis=0, ddof=1) if n_conv > 1 else np.zeros(mat.shape[1])
    err = mat - truth
    rmse = np.sqrt(np.mean(err * err, axis=0))
    names = tuple(Theta.param_names(dgp.p)) + ("ate",)
    return ReplicationTable(names=names, true=truth, mean=mean, se=se,
                            bias=mean - truth, rmse=rmse, R=R,
                            convergence_rate=rate)
