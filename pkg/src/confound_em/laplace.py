"""Laplace machinery for the scalar latent confounder.

Everything here derives from the per-subject log-joint

    log f(y_i | b) + log f(d_i | b) + log f(b),

whose Gaussian portion is an exact quadratic in b with curvature ``A`` and
peak ``b_mode``. The log-MGF of the posterior is the log-ratio of the
shifted to the unshifted Laplace approximation; its t-derivatives at 0 give
the posterior mean and variance. The MGF ratio is evaluated as an analytic
difference of the two brackets (the quadratic and linear Gaussian terms are
expanded, the softplus terms are differenced directly), which is
algebraically identical to subtracting two full log-joint evaluations but
avoids the catastrophic cancellation that would otherwise dominate the
finite-difference stencils. It also makes log_mgf(0) exactly 0.

An adaptive Gauss-Hermite integrator over the full log-joint provides the
independent reference values for every approximation in this module.

All operations are pure functions of (subject, theta, args); per-subject
sums use a fixed reduction order so results are independent of how callers
parallelize.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

SIGMA_FLOOR = 1e-6
SIGMA_B_FLOOR = 1e-6
VARIANCE_HARD_LIMIT = -1e-8

_LOG_2PI = float(np.log(2.0 * np.pi))


class NumericalError(RuntimeError):
    """A numerical contract was violated (rank deficiency, broken stencils, ...)."""


def softplus(u):
    """log(1 + exp(u)), stable for |u| up to the float range."""
    u = np.asarray(u, dtype=float)
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))


# --------------------------------------------------------------------------
# parameters and summaries
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Theta:
    """Joint model parameters (beta, sigma, omega, eta, xi, sigma_b).

    ``beta`` stacks the baseline block and the treatment-interaction block,
    so len(beta) = 2 * len(eta). ``sigma`` is the outcome error SD and
    ``sigma_b`` the latent-confounder SD.
    """

    beta: np.ndarray
    sigma: float
    omega: float
    eta: np.ndarray
    xi: float
    sigma_b: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "eta", np.asarray(self.eta, dtype=float))

    @property
    def p(self) -> int:
        return self.eta.shape[0]

    def validate(self) -> "Theta":
        if self.beta.ndim != 1 or self.eta.ndim != 1 or self.beta.shape[0] != 2 * self.eta.shape[0]:
            raise ValueError(
                f"beta has length {self.beta.shape}, expected twice eta's {self.eta.shape}")
        values = np.concatenate([self.beta, self.eta, [self.sigma, self.omega, self.xi, self.sigma_b]])
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite parameter value")
        if self.sigma < SIGMA_FLOOR:
            raise ValueError(f"sigma {self.sigma} below floor {SIGMA_FLOOR}")
        if self.sigma_b < SIGMA_B_FLOOR:
            raise ValueError(f"sigma_b {self.sigma_b} below floor {SIGMA_B_FLOOR}")
        return self

    def as_vector(self) -> np.ndarray:
        """Canonical flat order: beta, omega, sigma, eta, xi, sigma_b."""
        return np.concatenate([self.beta, [self.omega, self.sigma], self.eta,
                               [self.xi, self.sigma_b]])

    @classmethod
    def from_vector(cls, vec, p: int) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        if vec.shape[0] != 3 * p + 4:
            raise ValueError(f"vector length {vec.shape[0]} != {3 * p + 4}")
        return cls(beta=vec[:2 * p], omega=float(vec[2 * p]), sigma=float(vec[2 * p + 1]),
                   eta=vec[2 * p + 2:3 * p + 2], xi=float(vec[3 * p + 2]),
                   sigma_b=float(vec[3 * p + 3]))

    @staticmethod
    def param_names(p: int) -> tuple[str, ...]:
        return tuple(
            [f"beta{k}" for k in range(2 * p)]
            + ["omega", "sigma"]
            + [f"eta{k}" for k in range(p)]
            + ["xi", "sigma_b"]
        )


@dataclass(frozen=True)
class PosteriorSummary:
    """Per-subject posterior of b: Laplace mode, curvature, and MGF moments."""

    b_mode: float
    precision: float
    mean: float
    variance: float
    second_moment: float


class PosteriorTable(NamedTuple):
    """Vectorized posterior summaries for every subject of a design."""

    b_mode: np.ndarray
    precision: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    second_moment: np.ndarray
    loglik: np.ndarray   # per-subject observed log-likelihood contribution
    clamped: np.ndarray  # bool mask: raw variance was in [hard limit, 0)


class QuadratureSummary(NamedTuple):
    mean: float
    variance: float
    log_normalizer: float
    expected_softplus: np.ndarray


# --------------------------------------------------------------------------
# internals
# --------------------------------------------------------------------------

class _Prep(NamedTuple):
    r: np.ndarray    # outcome residuals y - x_tilde @ beta, per record
    w: np.ndarray    # 1 + omega * d, per record
    lin: np.ndarray  # x_star @ eta, per record
    l0: np.ndarray   # lin + xi * b_mode, per record
    sw2: np.ndarray  # per-subject sum of w^2
    srw: np.ndarray  # per-subject sum of r * w
    A: np.ndarray    # Gaussian curvature, per subject
    c: np.ndarray    # Gaussian linear coefficient, per subject
    b0: np.ndarray   # Gaussian-part mode c / A, per subject


def _seg(design, values) -> np.ndarray:
    # bincount accumulates sequentially in row order: the per-subject partial
    # sums are bit-identical whether computed on the full stack or on a slice.
    return np.bincount(design.subject_index, weights=values, minlength=design.m)


def _prepare(design, th: Theta) -> _Prep:
    s2 = th.sigma ** 2
    w = 1.0 + th.omega * design.d
    r = design.y - design.x_tilde @ th.beta
    lin = design.x_star @ th.eta
    sw2 = _seg(design, w * w)
    srw = _seg(design, r * w)
    A = sw2 / s2 + 1.0 / th.sigma_b ** 2
    c = srw / s2
    b0 = c / A
    l0 = lin + th.xi * b0[design.subject_index]
    return _Prep(r=r, w=w, lin=lin, l0=l0, sw2=sw2, srw=srw, A=A, c=c, b0=b0)


def _mgf_shift(design, th: Theta, prep: _Prep, t) -> np.ndarray:
    """log MGF at per-subject shift t (scalar or (m,)), by analytic differencing."""
    s2 = th.sigma ** 2
    t = np.asarray(t, dtype=float)
    bt = (t + prep.c) / prep.A
    dlt = t / prep.A  # bt - b0, computed without cancellation
    mid = bt + prep.b0
    quad = dlt * (prep.srw / s2 - 0.5 * (prep.sw2 * mid / s2 + mid / th.sigma_b ** 2))
    if th.xi != 0.0:
        lt = prep.lin + th.xi * bt[design.subject_index]
        ps = _seg(design, design.d * (lt - prep.l0) - (softplus(lt) - softplus(prep.l0)))
    else:
        ps = np.zeros_like(quad)
    return quad + ps + t * bt


def _loglik_at_mode(design, th: Theta, prep: _Prep) -> np.ndarray:
    """Per-subject observed log-likelihood: Laplace-integrated log-joint at b0."""
    n = design.n_per_subject.astype(float)
    s2 = th.sigma ** 2
    resid = prep.r - prep.w * prep.b0[design.subject_index]
    log_y = -0.5 * n * np.log(2.0 * np.pi * s2) - 0.5 * _seg(design, resid * resid) / s2
    log_d = _seg(design, design.d * prep.l0 - softplus(prep.l0))
    log_b = -0.5 * np.log(2.0 * np.pi * th.sigma_b ** 2) - 0.5 * prep.b0 ** 2 / th.sigma_b ** 2
    return log_y + log_d + log_b + 0.5 * _LOG_2PI - 0.5 * np.log(prep.A)


def _or_loglik_at_mode(design, th: Theta, prep: _Prep) -> np.ndarray:
    """Outcome-block marginal log-likelihood; exact for the Gaussian factor."""
    n = design.n_per_subject.astype(float)
    s2 = th.sigma ** 2
    resid = prep.r - prep.w * prep.b0[design.subject_index]
    log_y = -0.5 * n * np.log(2.0 * np.pi * s2) - 0.5 * _seg(design, resid * resid) / s2
    log_b = -0.5 * np.log(2.0 * np.pi * th.sigma_b ** 2) - 0.5 * prep.b0 ** 2 / th.sigma_b ** 2
    return log_y + log_b + 0.5 * _LOG_2PI - 0.5 * np.log(prep.A)


def posterior_table(design, th: Theta) -> PosteriorTable:
    """Posterior summaries and log-likelihood terms for all subjects at once."""
    th.validate()
    prep = _prepare(design, th)
    h = 1e-3 / np.sqrt(np.maximum(1.0, np.abs(prep.b0) * prep.A))
    f_p1 = _mgf_shift(design, th, prep, h)
    f_m1 = _mgf_shift(design, th, prep, -h)
    f_p2 = _mgf_shift(design, th, prep, 2.0 * h)
    f_m2 = _mgf_shift(design, th, prep, -2.0 * h)
    # five-point stencils; the f(0) term vanishes because log_mgf(0) = 0
    mean = (8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (12.0 * h)
    var_raw = (16.0 * (f_p1 + f_m1) - (f_p2 + f_m2)) / (12.0 * h * h)
    below = var_raw < VARIANCE_HARD_LIMIT
    if np.any(below):
        worst = float(var_raw[below].min())
        raise NumericalError(
            f"posterior variance {worst:.3e} below hard limit {VARIANCE_HARD_LIMIT:.0e} "
            "(finite-difference stencil broke down)")
    clamped = var_raw < 0.0
    variance = np.where(clamped, 0.0, var_raw)
    return PosteriorTable(
        b_mode=prep.b0,
        precision=prep.A,
        mean=mean,
        variance=variance,
        second_moment=variance + mean * mean,
        loglik=_loglik_at_mode(design, th, prep),
        clamped=clamped,
    )


def _one_subject(subject):
    if subject.m != 1:
        raise ValueError(f"expected a single-subject design slice, got m={subject.m}")
    return subject


# --------------------------------------------------------------------------
# public per-subject operations
# --------------------------------------------------------------------------

def log_joint(b: float, subject, th: Theta) -> float:
    """Unnormalized log posterior: log f(y|b) + log f(d|b) + log f(b)."""
    _one_subject(subject)
    th.validate()
    return float(_log_joint_nodes(subject, th, [b])[0])


def _log_joint_nodes(subject, th: Theta, b_values) -> np.ndarray:
    """log-joint of one subject at several b values (vectorized over nodes)."""
    b = np.asarray(b_values, dtype=float)
    r = subject.y - subject.x_tilde @ th.beta
    w = 1.0 + th.omega * subject.d
    lin = subject.x_star @ th.eta
    s2 = th.sigma ** 2
    n = r.shape[0]
    resid = r[:, None] - w[:, None] * b[None, :]
    log_y = -0.5 * n * np.log(2.0 * np.pi * s2) - 0.5 * np.sum(resid * resid, axis=0) / s2
    logits = lin[:, None] + th.xi * b[None, :]
    log_d = np.sum(subject.d[:, None] * logits - softplus(logits), axis=0)
    log_b = -0.5 * np.log(2.0 * np.pi * th.sigma_b ** 2) - 0.5 * b * b / th.sigma_b ** 2
    return log_y + log_d + log_b


def case1_mode(subject, th: Theta) -> tuple[float, float]:
    """Mode and curvature of the Gaussian part: b0 = c / A, precision A."""
    _one_subject(subject)
    th.validate()
    prep = _prepare(subject, th)
    return float(prep.b0[0]), float(prep.A[0])


def case2_mode(subject, th: Theta, t: float) -> float:
    """Shifted mode (t + c) / A; affine in t with slope exactly 1/A."""
    _one_subject(subject)
    th.validate()
    prep = _prepare(subject, th)
    return float((t + prep.c[0]) / prep.A[0])


def log_mgf(subject, th: Theta, t: float) -> float:
    """log of the approximate posterior MGF at t; exactly 0.0 at t = 0."""
    _one_subject(subject)
    th.validate()
    prep = _prepare(subject, th)
    return float(_mgf_shift(subject, th, prep, np.array([float(t)]))[0])


def posterior_moments(subject, th: Theta) -> PosteriorSummary:
    """Posterior mode, curvature, and MGF-derivative mean/variance for one subject.

    A raw variance in [hard limit, 0) is clamped to 0 with a warning; below
    the hard limit the stencil is considered broken and NumericalError raised.
    """
    _one_subject(subject)
    table = posterior_table(subject, th)
    if bool(table.clamped[0]):
        warnings.warn("posterior variance clamped to 0", RuntimeWarning, stacklevel=2)
    return PosteriorSummary(
        b_mode=float(table.b_mode[0]),
        precision=float(table.precision[0]),
        mean=float(table.mean[0]),
        variance=float(table.variance[0]),
        second_moment=float(table.second_moment[0]),
    )


def observed_loglik(design, th: Theta) -> float:
    """Laplace observed-data log-likelihood, summed over subjects in order."""
    th.validate()
    prep = _prepare(design, th)
    return float(np.sum(_loglik_at_mode(design, th, prep)))


def or_marginal_loglik(design, th: Theta) -> float:
    """Outcome-block (Gaussian) marginal log-likelihood at th.

    The latent intercept is integrated out; for the Gaussian outcome model
    the Laplace form is exact, so this is the exact mixed-model likelihood.
    """
    th.validate()
    prep = _prepare(design, th)
    return float(np.sum(_or_loglik_at_mode(design, th, prep)))


def expected_softplus(subject, th: Theta, eta, xi: float) -> np.ndarray:
    """Per-record posterior expectation of softplus(eta'x* + xi b).

    Leading-order plug-in at the subject's mode b0 (the shifted and unshifted
    Laplace factors share mode and curvature, so their ratio collapses).
    (eta, xi) are free arguments; the posterior is taken at th.
    """
    _one_subject(subject)
    th.validate()
    eta = np.asarray(eta, dtype=float)
    if eta.shape[0] != subject.x_star.shape[1]:
        raise ValueError(f"eta has length {eta.shape[0]}, design has {subject.x_star.shape[1]}")
    prep = _prepare(subject, th)
    return softplus(subject.x_star @ eta + float(xi) * prep.b0[0])


def quadrature_moments(subject, th: Theta, nodes: int = 50) -> QuadratureSummary:
    """Adaptive Gauss-Hermite reference for every Laplace output.

    Centers and scales at the mode/curvature of the FULL log-joint (found by
    1-D Newton; the objective is strictly concave in b).
    """
    _one_subject(subject)
    th.validate()
    if nodes < 10:
        raise ValueError(f"nodes must be >= 10, got {nodes}")
    prep = _prepare(subject, th)
    A = float(prep.A[0])
    c = float(prep.c[0])
    lin = prep.lin
    d = subject.d
    xi = th.xi

    b_hat = c / A
    curv = A
    for _ in range(100):
        pr = expit(lin + xi * b_hat)
        grad = c - A * b_hat + xi * float(np.sum(d - pr))
        curv = A + xi * xi * float(np.sum(pr * (1.0 - pr)))
        step = grad / curv
        b_hat += step
        if abs(step) <= 1e-12 * (1.0 + abs(b_hat)):
            break
    else:
        raise NumericalError("quadrature mode search did not converge in 100 iterations")

    scale = 1.0 / np.sqrt(curv)
    u, wts = np.polynomial.hermite.hermgauss(int(nodes))
    b_nodes = b_hat + np.sqrt(2.0) * scale * u
    log_f = _log_joint_nodes(subject, th, b_nodes)
    log_weights = np.log(wts) + log_f + u * u
    peak = float(np.max(log_weights))
    raw = np.exp(log_weights - peak)
    total = float(np.sum(raw))
    log_normalizer = peak + np.log(total) + 0.5 * np.log(2.0) + np.log(scale)
    wn = raw / total
    mean = float(np.sum(wn * b_nodes))
    var = float(np.sum(wn * (b_nodes - mean) ** 2))
    logits = lin[:, None] + xi * b_nodes[None, :]
    esp = softplus(logits) @ wn
    return QuadratureSummary(mean=mean, variance=var,
                             log_normalizer=float(log_normalizer),
                             expected_softplus=esp)
