"""Shared builders and independent oracles for the test suite.

The oracles recompute model quantities through routes the package never
takes: scipy.stats densities, adaptive quadrature on the raw joint density,
normal-normal conjugacy at xi = 0, and a dense multivariate normal for the
outcome marginal. Agreement is therefore evidence, not tautology.
"""

import numpy as np
from scipy import stats
from scipy.integrate import quad

from confound_em import panel_data
from confound_em.laplace import Theta


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def random_theta(rng, p, *, xi_scale=1.0):
    """A valid parameter point with moderate magnitudes."""
    return Theta(
        beta=rng.normal(0.0, 1.2, size=2 * p),
        omega=float(rng.uniform(-0.5, 1.0)),
        sigma=float(rng.uniform(0.4, 1.2)),
        eta=rng.normal(0.0, 0.6, size=p),
        xi=float(xi_scale * rng.uniform(-1.0, 1.0)),
        sigma_b=float(rng.uniform(0.5, 1.5)),
    )


def make_dataset(rng, m=8, n_lo=2, n_hi=6, p1=1, p2=2, th=None, collect_b=False):
    """Small panel drawn from the model, assembled record by record.

    Independent of sim.gen_dataset: binary baselines are iid Bernoulli(0.5)
    and the continuous covariates are iid standard normal. With collect_b
    the per-subject latent intercepts are returned as a third element.
    """
    p = 1 + p1 + p2
    if th is None:
        th = random_theta(rng, p)
    beta = np.asarray(th.beta, dtype=float)
    subjects = []
    latent = []
    for i in range(m):
        n_i = int(rng.integers(n_lo, n_hi + 1))
        z = rng.integers(0, 2, size=p1).astype(float)
        b = th.sigma_b * float(rng.standard_normal())
        latent.append(b)
        sid = f"s{i}"
        records = []
        for j in range(n_i):
            x = rng.standard_normal(p2)
            xs = np.concatenate(([1.0], z, x))
            logit = float(xs @ th.eta) + th.xi * b
            d = int(rng.random() < 1.0 / (1.0 + np.exp(-logit)))
            xt = np.concatenate((xs, d * xs))
            y = float(xt @ beta + (1.0 + th.omega * d) * b
                      + th.sigma * float(rng.standard_normal()))
            records.append(panel_data.PanelRecord(sid, y, d, x, j + 1))
        subjects.append(panel_data.Subject(sid, z, tuple(records)))
    ds = panel_data.PanelDataset(
        subjects=tuple(subjects),
        z_names=tuple(f"z{k + 1}" for k in range(p1)),
        x_names=tuple(f"x{k + 1}" for k in range(p2)),
    )
    if collect_b:
        return ds, th, np.array(latent)
    return ds, th


def make_design(rng, **kw):
    ds, th = make_dataset(rng, **kw)
    return panel_data.expand_design(ds), th


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def oracle_log_joint(b, sub, th):
    """log f(y | b) + log f(d | b) + log f(b) via scipy densities.

    Bernoulli terms use logaddexp rather than the package softplus.
    """
    beta = np.asarray(th.beta, dtype=float)
    r = sub.y - sub.x_tilde @ beta
    w = 1.0 + th.omega * sub.d
    ll = float(np.sum(stats.norm.logpdf(r - w * b, scale=th.sigma)))
    logit = sub.x_star @ np.asarray(th.eta, dtype=float) + th.xi * b
    ll += float(np.sum(np.where(sub.d > 0.5,
                                -np.logaddexp(0.0, -logit),
                                -np.logaddexp(0.0, logit))))
    ll += float(stats.norm.logpdf(b, scale=th.sigma_b))
    return ll


def conjugate_posterior(sub, th):
    """(mean, variance) of b | data when xi = 0: normal-normal conjugacy."""
    beta = np.asarray(th.beta, dtype=float)
    r = sub.y - sub.x_tilde @ beta
    w = 1.0 + th.omega * sub.d
    prec = float(w @ w) / th.sigma ** 2 + 1.0 / th.sigma_b ** 2
    lin = float(r @ w) / th.sigma ** 2
    return lin / prec, 1.0 / prec


def oracle_moments_quad(sub, th):
    """(mean, variance, log normalizer) by adaptive quadrature of the joint."""
    center, var = conjugate_posterior(sub, th)
    # xi shifts the mode; recentre on a coarse grid before integrating
    width = 10.0 * np.sqrt(var) + 3.0
    grid = center + np.linspace(-width, width, 81)
    vals = [oracle_log_joint(g, sub, th) for g in grid]
    center = float(grid[int(np.argmax(vals))])
    shift = oracle_log_joint(center, sub, th)
    lo, hi = center - width, center + width

    def f(b):
        return np.exp(oracle_log_joint(b, sub, th) - shift)

    z0 = quad(f, lo, hi, limit=200)[0]
    z1 = quad(lambda b: (b - center) * f(b), lo, hi, limit=200)[0]
    z2 = quad(lambda b: (b - center) ** 2 * f(b), lo, hi, limit=200)[0]
    mean_c = z1 / z0
    return center + mean_c, z2 / z0 - mean_c ** 2, float(np.log(z0) + shift)


def oracle_or_marginal(design, th):
    """Outcome marginal with b integrated out: dense MVN per subject.

    cov_i = sigma^2 I + sigma_b^2 w_i w_i'.
    """
    beta = np.asarray(th.beta, dtype=float)
    total = 0.0
    for i in range(design.m):
        sub = design.subject(i)
        w = 1.0 + th.omega * sub.d
        cov = th.sigma ** 2 * np.eye(w.shape[0]) + th.sigma_b ** 2 * np.outer(w, w)
        total += float(stats.multivariate_normal.logpdf(
            sub.y, mean=sub.x_tilde @ beta, cov=cov))
    return total


def oracle_observed_loglik_xi0(design, th):
    """Full observed-data log-likelihood at xi = 0: OR marginal x Bernoulli."""
    assert th.xi == 0.0
    eta = np.asarray(th.eta, dtype=float)
    logit = design.x_star @ eta
    ps_ll = float(np.sum(np.where(design.d > 0.5,
                                  -np.logaddexp(0.0, -logit),
                                  -np.logaddexp(0.0, logit))))
    return oracle_or_marginal(design, th) + ps_ll
