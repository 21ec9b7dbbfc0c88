"""Hierarchical generative model for fibre-structured point patterns.

State: k fibres (reference point uniform in the window, arm lengths
exponential with mean lam, k Poisson with mean kappa), per-point signal
probabilities eps_i (Beta(alpha_signal, beta_signal)), and an allocation
(Z_i signal indicator, X_i fibre index, s_i anchor arc position).

Likelihood of the observed pattern given the state factorizes into

* a Bernoulli(eps_i) term for each Z_i,
* fibre choice proportional to realized fibre length,
* anchor spacing along each fibre: the n_j + 1 normalized gaps (both end
  gaps included) are Dirichlet(alpha_dir), minus log(n_j!) because the
  anchors are exchangeable labelled draws from the sorted-gap construction,
  and -n_j log(l_total) for the change of scale,
* an isotropic Gaussian displacement (sigma_disp) from anchor to point,
* noise points uniform on the window,
* and the total count m ~ Poisson(mu_total) with
  mu_total = (sum of realized lengths) * eta / (1 - rho), rho the prior mean
  noise fraction beta_signal / (alpha_signal + beta_signal).

Every component is exposed on its own: proposal densities and the sampler's
death rates reuse them term by term.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import (
    InvalidAllocation,
    SingularField,
    SingularStart,
    ZeroFibreLikelihood,
)
from .field import trace_fibre
from .geometry import point_at_arc

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Hyperparams:
    """Model hyperparameters. rho is derived, never stored."""

    kappa: float = 2.0
    lam: float = 78.5
    sigma_disp: float = 3.0
    eta: float = 0.64
    alpha_signal: float = 1.0
    beta_signal: float = 1.0
    alpha_dir: float = 1.5
    sigma_fo: float = 6.0
    h_fo: float = 8.0

    def __post_init__(self):
        if min(self.kappa, self.lam, self.sigma_disp, self.eta) <= 0:
            raise ValueError("kappa, lam, sigma_disp, eta must be positive")
        if min(self.alpha_signal, self.beta_signal, self.alpha_dir) <= 0:
            raise ValueError("Beta/Dirichlet parameters must be positive")
        if min(self.sigma_fo, self.h_fo) <= 0:
            raise ValueError("sigma_fo and h_fo must be positive")

    @property
    def rho(self):
        return self.beta_signal / (self.alpha_signal + self.beta_signal)


@dataclass
class Allocation:
    """Point-to-fibre allocation.

    z: (m,) bool signal indicators. x: (m,) int fibre index, -1 for noise.
    s: (m,) float anchor arc position, NaN for noise. anchors: (m, 2) anchor
    coordinates (derived from the fibre polylines), NaN rows for noise.
    """

    z: np.ndarray
    x: np.ndarray
    s: np.ndarray
    anchors: np.ndarray

    @classmethod
    def all_noise(cls, m):
        return cls(
            z=np.zeros(m, dtype=bool),
            x=np.full(m, -1, dtype=int),
            s=np.full(m, np.nan),
            anchors=np.full((m, 2), np.nan),
        )

    def copy(self):
        return Allocation(self.z.copy(), self.x.copy(), self.s.copy(), self.anchors.copy())

    def points_on(self, j):
        return np.flatnonzero(self.x == j)

    def validate(self, fibres, atol=1e-9):
        """Check internal consistency; raises InvalidAllocation."""
        if np.any(self.z != (self.x >= 0)):
            raise InvalidAllocation("z and x disagree")
        for j in np.unique(self.x[self.x >= 0]):
            if j >= len(fibres):
                raise InvalidAllocation(f"fibre index {j} out of range")
            f = fibres[j]
            idx = self.points_on(j)
            s = self.s[idx]
            if np.any(s < -atol) or np.any(s > f.l_total + atol):
                raise InvalidAllocation("anchor arc position off its fibre")
            p = point_at_arc(f.vertices, f.arcs, s)
            if np.max(np.abs(p - self.anchors[idx])) > atol:
                raise InvalidAllocation("anchor coordinates stale")


def exp_logpdf(x, mean):
    """Log density of the exponential with the given mean."""
    if x < 0:
        return -np.inf
    return -math.log(mean) - x / mean


def poisson_logpmf(n, mu):
    """log Poisson(n; mu) with the mu = 0 limit (0 if n == 0 else -inf)."""
    if mu == 0.0:
        return 0.0 if n == 0 else -np.inf
    return n * math.log(mu) - mu - float(gammaln(n + 1))


def beta_logpdf(x, a, b):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = (
            (a - 1.0) * np.log(x)
            + (b - 1.0) * np.log1p(-x)
            + gammaln(a + b)
            - gammaln(a)
            - gammaln(b)
        )
    return out


def gap_log_density(gaps, alpha):
    """Log Dirichlet(alpha, ..., alpha) density of a normalized gap vector.

    Zero gaps follow the density's limit: -inf for alpha > 1, +inf for
    alpha < 1, and contribute 0 when alpha == 1.
    """
    g = np.asarray(gaps, dtype=float)
    n = len(g)
    norm = float(gammaln(n * alpha) - n * gammaln(alpha))
    if alpha == 1.0:
        return norm
    with np.errstate(divide="ignore"):
        logs = np.log(g)
    return norm + float((alpha - 1.0) * logs.sum())


def mu_total(fibres, h):
    """Expected point count: (sum of realized lengths) * eta / (1 - rho)."""
    total = sum(f.l_total for f in fibres)
    return total * h.eta / (1.0 - h.rho)


def log_prior(fibres, h, window):
    """Log prior of the fibre configuration (labeled form).

    Sum over fibres of the exponential arm-length densities and the uniform
    reference-point density, plus log Poisson(k; kappa).
    """
    out = poisson_logpmf(len(fibres), h.kappa)
    log_area = math.log(window.area)
    for f in fibres:
        out += exp_logpdf(f.l1, h.lam) + exp_logpdf(f.l2, h.lam) - log_area
    return out


def log_eps_prior(eps, h):
    return float(np.sum(beta_logpdf(eps, h.alpha_signal, h.beta_signal)))


# --- likelihood components -------------------------------------------------


def z_term(alloc, eps):
    eps = np.asarray(eps, dtype=float)
    with np.errstate(divide="ignore"):
        return float(
            np.sum(np.where(alloc.z, np.log(eps), np.log1p(-eps)))
        )


def x_term(alloc, fibres):
    """Fibre-choice term: each signal point picks fibre j w.p. l_j / sum l."""
    n_signal = int(alloc.z.sum())
    if n_signal == 0:
        return 0.0
    lengths = np.array([f.l_total for f in fibres])
    total = lengths.sum()
    if len(fibres) == 0 or total <= 0.0:
        raise ZeroFibreLikelihood("signal points allocated with no fibre length")
    with np.errstate(divide="ignore"):
        logs = np.where(lengths > 0, np.log(lengths), -np.inf)
    return float(logs[alloc.x[alloc.z]].sum() - n_signal * math.log(total))


def spacing_term_single(s_values, l_total, alpha_dir):
    """Anchor-spacing term for one fibre (see module docstring)."""
    n = len(s_values)
    if n == 0:
        return 0.0
    if l_total <= 0.0:
        return -np.inf
    s = np.sort(np.asarray(s_values, dtype=float))
    gaps = np.diff(np.concatenate([[0.0], s, [l_total]])) / l_total
    return (
        gap_log_density(gaps, alpha_dir)
        - float(gammaln(n + 1))
        - n * math.log(l_total)
    )


def spacing_term(alloc, fibres, h):
    out = 0.0
    for j in range(len(fibres)):
        idx = alloc.points_on(j)
        if len(idx):
            out += spacing_term_single(alloc.s[idx], fibres[j].l_total, h.alpha_dir)
    return out


def displacement_term(alloc, points, h):
    idx = np.flatnonzero(alloc.z)
    if len(idx) == 0:
        return 0.0
    d = points[idx] - alloc.anchors[idx]
    d2 = np.einsum("ij,ij->i", d, d)
    s2 = h.sigma_disp**2
    return float(np.sum(-LOG_2PI - math.log(s2) - d2 / (2.0 * s2)))


def noise_term(alloc, window):
    n_noise = int((~alloc.z).sum())
    return -n_noise * math.log(window.area)


def count_term(m, fibres, h):
    return poisson_logpmf(m, mu_total(fibres, h))


def log_likelihood(alloc, fibres, eps, points, h, window, validate=True):
    """Full log likelihood of the pattern given the state."""
    if validate:
        alloc.validate(fibres)
    return (
        z_term(alloc, eps)
        + x_term(alloc, fibres)
        + spacing_term(alloc, fibres, h)
        + displacement_term(alloc, points, h)
        + noise_term(alloc, window)
        + count_term(len(points), fibres, h)
    )


def log_posterior(fibres, alloc, eps, points, h, window, validate=False):
    """Log posterior density (labeled fibre list, up to the data constant)."""
    return (
        log_prior(fibres, h, window)
        + log_eps_prior(eps, h)
        + log_likelihood(alloc, fibres, eps, points, h, window, validate=validate)
    )


def sample_prior_fibre(fld, h, rng, step, max_tries=200):
    """Draw a fibre from the prior and trace it under the given field.

    The reference point is resampled while it lands on a singular cell;
    SingularField is raised after max_tries failures.
    """
    for _ in range(max_tries):
        omega = fld.window.sample(rng)
        l1 = rng.exponential(h.lam)
        l2 = rng.exponential(h.lam)
        try:
            return trace_fibre(fld, omega, l1, l2, step)
        except SingularStart:
            continue
    raise SingularField("could not start a fibre anywhere the field is usable")
