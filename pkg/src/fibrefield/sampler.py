"""Continuous-time birth-death MCMC over fibre configurations.

The chain holds k fibres, a point allocation, per-point signal probabilities
eps, and the orientation field estimated from (data, eps). Competing
exponential clocks drive the events: births at a constant rate, one death
clock per fibre at its detailed-balance rate, plus Metropolis-Hastings moves
(move a fibre, resample its arm lengths, split/join, flip one point's signal
indicator, refresh eps together with the field) and a record clock that
snapshots the state into the trace.

Births draw a fibre from the prior, flip currently-noise points onto the
signal side with odds eps/(1-eps) * |W| * phi2(y; nearest fibre point), and
propose fibre assignments and anchors for the flipped points from a density
proportional to length x displacement likelihood (vertex soft-max plus a
uniform jitter within the vertex's arc cell). Death rates are the exact
posterior-ratio counterparts of that construction, including the 1/k
bookkeeping for unordered fibre configurations, so the classic prior-recovery
sanity check (likelihood off => k ~ Poisson(kappa)) holds exactly.

The field is re-estimated only inside eps updates; the whole (eps, field,
re-traced fibres) block is accepted or rejected as one MH step.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import model
from .errors import DataError, DegenerateGeometry, SingularStart
from .field import estimate_field, trace_fibre
from .geometry import (
    anchor_cells,
    arc_lengths,
    cell_index,
    point_at_arc,
    project_to_polyline,
)
from .model import LOG_2PI, Allocation

LOG_RATE_CAP = 700.0  # keeps exp() finite; a rate this size fires immediately

EVENT_BIRTH = "birth"
EVENT_DEATH = "death"
EVENT_MOVE = "move"
EVENT_LENGTHS = "lengths"
EVENT_SPLIT_JOIN = "split_join"
EVENT_Z = "z"
EVENT_EPS = "eps"
EVENT_RECORD = "record"

_EXTRA_MOVES = (EVENT_MOVE, EVENT_LENGTHS, EVENT_SPLIT_JOIN, EVENT_Z, EVENT_EPS)


@dataclass(frozen=True)
class RatesConfig:
    """Event rates. r_add is the summed rate of the extra MH moves."""

    beta_birth: float = 1.0
    r_move: float = 1.0
    r_lengths: float = 1.0
    r_split_join: float = 1.0
    r_z: float = 1.0
    r_eps: float = 0.1
    r_record: float = 0.025

    def __post_init__(self):
        vals = (
            self.beta_birth,
            self.r_move,
            self.r_lengths,
            self.r_split_join,
            self.r_z,
            self.r_eps,
            self.r_record,
        )
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError("rates must be finite and nonnegative")
        if self.beta_birth <= 0 or self.r_record <= 0:
            raise ValueError("beta_birth and r_record must be positive")

    @property
    def r_add(self):
        return self.r_move + self.r_lengths + self.r_split_join + self.r_z + self.r_eps


@dataclass
class TraceRecord:
    """One recorded posterior sample."""

    clock: float
    k: int
    total_length: float
    n_noise: int
    eps_mean: float
    dispersion_p95: object  # float or None when no signal points
    z: np.ndarray
    x: np.ndarray
    polylines: list

    def to_json_dict(self):
        return {
            "clock": float(self.clock),
            "k": int(self.k),
            "total_length": float(self.total_length),
            "n_noise": int(self.n_noise),
            "eps_mean": float(self.eps_mean),
            "dispersion_p95": None
            if self.dispersion_p95 is None
            else float(self.dispersion_p95),
            "z": np.asarray(self.z, dtype=int).tolist(),
            "x": np.asarray(self.x, dtype=int).tolist(),
            "polylines": [np.asarray(p, dtype=float).tolist() for p in self.polylines],
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            clock=float(d["clock"]),
            k=int(d["k"]),
            total_length=float(d["total_length"]),
            n_noise=int(d["n_noise"]),
            eps_mean=float(d["eps_mean"]),
            dispersion_p95=None
            if d["dispersion_p95"] is None
            else float(d["dispersion_p95"]),
            z=np.asarray(d["z"], dtype=int),
            x=np.asarray(d["x"], dtype=int),
            polylines=[np.asarray(p, dtype=float) for p in d["polylines"]],
        )


@dataclass
class ChainResult:
    """Everything a finished run reports."""

    records: list
    burn_in: float
    t_end: float
    seed: int
    event_counts: dict
    accept_counts: dict
    zm_products: np.ndarray


class ChainState:
    """Mutable sampler state with caches.

    Caches kept in sync after every state change: per-fibre squared projection
    distances of every data point (proj_d2), the current log posterior, and
    the death-rate vector. ``death_rates(state)`` always recomputes from
    scratch; the cache must match it (chain invariant).
    """

    def __init__(
        self,
        pattern,
        h,
        fld,
        fibres,
        alloc,
        eps,
        rng,
        step,
        spacing,
        beta_birth=1.0,
        eps_concentration=1.0,
        constant_likelihood=False,
        field_estimated=True,
    ):
        self.points = pattern.points
        self.window = pattern.window
        self.h = h
        self.field = fld
        self.fibres = list(fibres)
        self.alloc = alloc
        self.eps = np.asarray(eps, dtype=float)
        self.rng = rng
        self.step = float(step)
        self.spacing = float(spacing)
        self.beta_birth = float(beta_birth)
        self.eps_concentration = float(eps_concentration)
        self.constant_likelihood = bool(constant_likelihood)
        self.field_estimated = bool(field_estimated)
        self.clock = 0.0
        self.proj_d2 = [project_to_polyline(f.vertices, self.points) for f in self.fibres]
        self.ok_area_fraction = usable_area_fraction(self.field)
        self.log_post = self.posterior()
        self.death_cache = death_rates(self)

    @property
    def m(self):
        return len(self.points)

    @property
    def k(self):
        return len(self.fibres)

    def posterior(self):
        """Log posterior of the current state (labeled form)."""
        return log_posterior_state(
            self, self.fibres, self.alloc, self.eps
        )

    def refresh_after_change(self):
        self.log_post = self.posterior()
        self.death_cache = death_rates(self)


def log_posterior_state(state, fibres, alloc, eps):
    """Posterior for arbitrary (fibres, alloc, eps) under the state's data."""
    if state.constant_likelihood:
        return model.log_prior(fibres, state.h, state.window) + model.log_eps_prior(
            eps, state.h
        )
    return model.log_posterior(
        fibres, alloc, eps, state.points, state.h, state.window
    )


def usable_area_fraction(fld):
    """Fraction of the window whose nearest field cell is non-singular.

    The prior fibre draw resamples its reference point until it lands on a
    usable cell, so the effective reference density is uniform on that region;
    proposal densities must carry the normalization. Analytic fields have no
    singular cells.
    """
    singular = getattr(fld, "singular", None)
    if singular is None or not np.any(singular):
        return 1.0
    win, s = fld.window, fld.spacing
    xs = win.xmin + s * np.arange(fld.nx)
    ys = win.ymin + s * np.arange(fld.ny)
    wx = np.minimum(xs + 0.5 * s, win.xmax) - np.maximum(xs - 0.5 * s, win.xmin)
    wy = np.minimum(ys + 0.5 * s, win.ymax) - np.maximum(ys - 0.5 * s, win.ymin)
    areas = wy[:, None] * wx[None, :]
    return float(areas[~singular].sum() / win.area)


# --- proposal densities -----------------------------------------------------


def _flip_log_odds(state, d2):
    """log w_i of the noise->signal flip against a fibre at squared distance d2."""
    s2 = state.h.sigma_disp**2
    return (
        np.log(state.eps)
        - np.log1p(-state.eps)
        + math.log(state.window.area)
        - LOG_2PI
        - math.log(s2)
        - d2 / (2.0 * s2)
    )


def _vertex_log_phi(fibre, pts, s2):
    """log phi2(y; vertex) table, shape (n_points, n_vertices)."""
    d = pts[:, None, :] - fibre.vertices[None, :, :]
    d2 = np.einsum("nvj,nvj->nv", d, d)
    return -LOG_2PI - math.log(s2) - d2 / (2.0 * s2)


def position_log_density(fibre, pts, s, sigma2):
    """Log density of proposing anchor arc positions s for points pts."""
    if fibre.l_total <= 0.0:
        return np.full(len(pts), -np.inf)
    logphi = _vertex_log_phi(fibre, pts, sigma2)
    norm = logsumexp(logphi, axis=1)
    bounds = anchor_cells(fibre.arcs)
    widths = np.diff(bounds)
    c = cell_index(bounds, np.asarray(s, dtype=float))
    with np.errstate(divide="ignore"):
        return logphi[np.arange(len(pts)), c] - norm - np.log(widths[c])


def sample_positions(fibre, pts, sigma2, rng):
    """Draw anchor arc positions for points pts; returns (s, log_density)."""
    logphi = _vertex_log_phi(fibre, pts, sigma2)
    norm = logsumexp(logphi, axis=1)
    probs = np.exp(logphi - norm[:, None])
    probs /= probs.sum(axis=1, keepdims=True)
    bounds = anchor_cells(fibre.arcs)
    widths = np.diff(bounds)
    n = len(pts)
    s = np.empty(n)
    logq = np.empty(n)
    for i in range(n):
        c = int(rng.choice(len(probs[i]), p=probs[i]))
        s[i] = rng.uniform(bounds[c], bounds[c + 1])
        logq[i] = logphi[i, c] - norm[i] - math.log(widths[c])
    return s, logq


def _fibre_choice_logits(state, idx, extra=None):
    """(len(idx), K) anchor fibre-choice log-weights (length x displacement).

    Columns follow state.fibres, plus one for ``extra`` (a candidate fibre
    with its own projection distances) when given. Zero-length fibres get
    -inf columns.
    """
    s2 = state.h.sigma_disp**2
    cols = []
    for j, f in enumerate(state.fibres):
        if f.l_total > 0.0:
            cols.append(
                math.log(f.l_total) - LOG_2PI - math.log(s2) - state.proj_d2[j][idx] / (2.0 * s2)
            )
        else:
            cols.append(np.full(len(idx), -np.inf))
    if extra is not None:
        f, d2 = extra
        if f.l_total > 0.0:
            cols.append(math.log(f.l_total) - LOG_2PI - math.log(s2) - d2[idx] / (2.0 * s2))
        else:
            cols.append(np.full(len(idx), -np.inf))
    return np.stack(cols, axis=1) if cols else np.zeros((len(idx), 0))


@dataclass
class BirthProposal:
    fibre: object
    proj_d2: np.ndarray
    flipped: np.ndarray
    x_new: np.ndarray
    s_new: np.ndarray
    anchors_new: np.ndarray
    log_q_forward: float
    log_q_reverse: float


def propose_birth(state):
    """Draw the birth proposal: prior fibre, flips, anchors for the flipped.

    Flipped points anchor on the new fibre only: the matching death reverts
    exactly the dying fibre's points, so births that parked points elsewhere
    would have no reversing transition.
    """
    fibre = model.sample_prior_fibre(state.field, state.h, state.rng, state.step)
    d2_new = project_to_polyline(fibre.vertices, state.points)
    noise_idx = np.flatnonzero(~state.alloc.z)
    log_q = 0.0
    if len(noise_idx) and not state.constant_likelihood and fibre.l_total > 0.0:
        logw = _flip_log_odds(state, d2_new)[noise_idx]
        log_q_flip = logw - np.logaddexp(0.0, logw)
        log_q_stay = -np.logaddexp(0.0, logw)
        u = state.rng.uniform(size=len(noise_idx))
        flip_mask = u < np.exp(log_q_flip)
        log_q += float(log_q_flip[flip_mask].sum() + log_q_stay[~flip_mask].sum())
        flipped = noise_idx[flip_mask]
    else:
        flipped = np.empty(0, dtype=int)

    x_new = np.full(len(flipped), state.k, dtype=int)
    s_new = np.empty(len(flipped))
    anchors_new = np.empty((len(flipped), 2))
    if len(flipped):
        s2 = state.h.sigma_disp**2
        s_new, logq_pos = sample_positions(
            fibre, state.points[flipped], s2, state.rng
        )
        log_q += float(logq_pos.sum())
        anchors_new = point_at_arc(fibre.vertices, fibre.arcs, s_new)
    return BirthProposal(
        fibre=fibre,
        proj_d2=d2_new,
        flipped=flipped,
        x_new=x_new,
        s_new=s_new,
        anchors_new=anchors_new,
        log_q_forward=log_q,
        log_q_reverse=0.0,  # the paired death reallocates deterministically
    )


def apply_birth(state, prop):
    state.fibres.append(prop.fibre)
    state.proj_d2.append(prop.proj_d2)
    if len(prop.flipped):
        a = state.alloc
        a.z[prop.flipped] = True
        a.x[prop.flipped] = prop.x_new
        a.s[prop.flipped] = prop.s_new
        a.anchors[prop.flipped] = prop.anchors_new
    state.refresh_after_change()


def apply_death(state, j):
    idx = state.alloc.points_on(j)
    a = state.alloc
    a.z[idx] = False
    a.x[idx] = -1
    a.s[idx] = np.nan
    a.anchors[idx] = np.nan
    shift = a.x > j
    a.x[shift] -= 1
    del state.fibres[j]
    del state.proj_d2[j]
    state.refresh_after_change()


def _birth_reverse_log_q(state, j):
    """Log density of the birth that would undo the death of fibre j.

    Flip terms cover the points currently on fibre j (they must flip) and the
    current noise points (they must stay); position terms must reproduce the
    current arc positions. Flips always target the born fibre itself.
    """
    f = state.fibres[j]
    idx = state.alloc.points_on(j)
    noise_idx = np.flatnonzero(~state.alloc.z)
    out = 0.0
    if state.constant_likelihood or f.l_total <= 0.0:
        return out
    s2 = state.h.sigma_disp**2
    if len(idx) or len(noise_idx):
        logw = _flip_log_odds(state, state.proj_d2[j])
        if len(idx):
            out += float((logw[idx] - np.logaddexp(0.0, logw[idx])).sum())
        if len(noise_idx):
            out += float((-np.logaddexp(0.0, logw[noise_idx])).sum())
    if len(idx):
        out += float(
            position_log_density(f, state.points[idx], state.alloc.s[idx], s2).sum()
        )
    return out


def _removal_log_posterior_delta(state, j):
    """log pi(no fibre j, its points noise) - log pi(state), labeled form."""
    h = state.h
    f = state.fibres[j]
    idx = state.alloc.points_on(j)
    out = math.log(state.k) - math.log(h.kappa)
    out -= (
        model.exp_logpdf(f.l1, h.lam)
        + model.exp_logpdf(f.l2, h.lam)
        - math.log(state.window.area)
    )
    if state.constant_likelihood:
        return out
    n_j = len(idx)
    if n_j:
        eps_i = state.eps[idx]
        out += float(np.sum(np.log1p(-eps_i) - np.log(eps_i)))
    # fibre-choice term
    n_sig = int(state.alloc.z.sum())
    total = sum(g.l_total for g in state.fibres)
    if n_sig and total <= 0.0:
        return -np.inf
    if n_j:
        if f.l_total <= 0.0:
            return np.inf  # removing a fibre that cannot carry its points
        out -= n_j * math.log(f.l_total)
    remaining = max(total - f.l_total, 0.0)
    if n_sig:
        out += n_sig * math.log(total)
    if n_sig - n_j:
        if remaining <= 0.0:
            return -np.inf
        out -= (n_sig - n_j) * math.log(remaining)
    # spacing
    if n_j:
        out -= model.spacing_term_single(state.alloc.s[idx], f.l_total, h.alpha_dir)
        # displacement -> uniform noise
        d = state.points[idx] - state.alloc.anchors[idx]
        d2 = np.einsum("ij,ij->i", d, d)
        s2 = h.sigma_disp**2
        out += float(np.sum(LOG_2PI + math.log(s2) + d2 / (2.0 * s2)))
        out -= n_j * math.log(state.window.area)
    # total-count term
    mu_now = model.mu_total(state.fibres, h)
    mu_less = remaining * h.eta / (1.0 - h.rho)
    out += model.poisson_logpmf(state.m, mu_less) - model.poisson_logpmf(
        state.m, mu_now
    )
    return out


def _death_log_rate(state, j, posterior_delta):
    h = state.h
    f = state.fibres[j]
    log_b_prior = (
        model.exp_logpdf(f.l1, h.lam)
        + model.exp_logpdf(f.l2, h.lam)
        - math.log(state.window.area)
        - math.log(state.ok_area_fraction)
    )
    return (
        posterior_delta
        + math.log(state.beta_birth)
        + log_b_prior
        + _birth_reverse_log_q(state, j)
        - math.log(state.k)  # unordered-configuration bookkeeping
    )


def _rate_from_log(logr):
    if not logr > -np.inf:  # also catches NaN
        return 0.0
    return math.exp(min(logr, LOG_RATE_CAP))


def death_rates(state):
    """Death-rate vector via the reduced (componentwise) posterior ratio."""
    k = state.k
    if k == 0:
        return np.zeros(0)
    out = np.empty(k)
    for j in range(k):
        delta = _removal_log_posterior_delta(state, j)
        out[j] = _rate_from_log(_death_log_rate(state, j, delta))
    return out


def death_rates_general(state):
    """Oracle path: death rates via two full posterior evaluations per fibre."""
    k = state.k
    out = np.empty(k)
    lp_now = state.posterior()
    for j in range(k):
        idx = state.alloc.points_on(j)
        fibres = state.fibres[:j] + state.fibres[j + 1 :]
        alloc = state.alloc.copy()
        alloc.z[idx] = False
        alloc.x[idx] = -1
        alloc.s[idx] = np.nan
        alloc.anchors[idx] = np.nan
        alloc.x[alloc.x > j] -= 1
        lp_without = log_posterior_state(state, fibres, alloc, state.eps)
        out[j] = _rate_from_log(lp_without - lp_now + _death_log_rate(state, j, 0.0))
    return out


# --- MH moves ----------------------------------------------------------------


def _commit_fibre_update(state, j, fibre_new, d2_new, idx, s_new, anchors_new, lp_new):
    state.fibres[j] = fibre_new
    state.proj_d2[j] = d2_new
    if len(idx):
        state.alloc.s[idx] = s_new
        state.alloc.anchors[idx] = anchors_new
    state.log_post = lp_new
    state.death_cache = death_rates(state)


def _accept(state, log_ratio):
    if log_ratio >= 0.0:
        # still consume a uniform so acceptance never reorders the stream
        state.rng.uniform()
        return True
    return math.log(state.rng.uniform()) < log_ratio


def _propose_fibre_replacement(state, j, fibre_new, extra_log_ratio):
    """Shared tail of the move/lengths moves: re-anchor points, MH decide."""
    f_old = state.fibres[j]
    idx = state.alloc.points_on(j)
    s2 = state.h.sigma_disp**2
    if len(idx) and fibre_new.l_total <= 0.0:
        return False
    if len(idx):
        s_new, logq_fwd = sample_positions(
            fibre_new, state.points[idx], s2, state.rng
        )
        logq_rev = position_log_density(
            f_old, state.points[idx], state.alloc.s[idx], s2
        )
        anchors_new = point_at_arc(fibre_new.vertices, fibre_new.arcs, s_new)
    else:
        s_new = np.empty(0)
        anchors_new = np.empty((0, 2))
        logq_fwd = np.zeros(0)
        logq_rev = np.zeros(0)
    fibres_new = state.fibres.copy()
    fibres_new[j] = fibre_new
    alloc_new = state.alloc.copy()
    if len(idx):
        alloc_new.s[idx] = s_new
        alloc_new.anchors[idx] = anchors_new
    lp_new = log_posterior_state(state, fibres_new, alloc_new, state.eps)
    log_ratio = (
        lp_new
        - state.log_post
        + extra_log_ratio
        + float(logq_rev.sum())
        - float(logq_fwd.sum())
    )
    if not _accept(state, log_ratio):
        return False
    d2_new = project_to_polyline(fibre_new.vertices, state.points)
    _commit_fibre_update(state, j, fibre_new, d2_new, idx, s_new, anchors_new, lp_new)
    return True


def move_fibre(state):
    """Gaussian perturbation of one fibre's reference point (sigma = 2 sigma_disp)."""
    if state.k == 0:
        return False
    j = int(state.rng.integers(state.k))
    f = state.fibres[j]
    omega_new = f.omega + state.rng.normal(size=2) * (2.0 * state.h.sigma_disp)
    if not bool(np.all(state.window.contains(omega_new))):
        return False
    try:
        fibre_new = trace_fibre(state.field, omega_new, f.l1, f.l2, state.step)
    except SingularStart:
        return False
    return _propose_fibre_replacement(state, j, fibre_new, 0.0)


def resample_lengths(state):
    """Redraw one fibre's arm lengths from their prior."""
    if state.k == 0:
        return False
    j = int(state.rng.integers(state.k))
    f = state.fibres[j]
    l1 = state.rng.exponential(state.h.lam)
    l2 = state.rng.exponential(state.h.lam)
    fibre_new = trace_fibre(state.field, f.omega, l1, l2, state.step)
    # lengths proposed from the prior: forward/reverse prior densities
    extra = (
        model.exp_logpdf(f.l1, state.h.lam)
        + model.exp_logpdf(f.l2, state.h.lam)
        - model.exp_logpdf(l1, state.h.lam)
        - model.exp_logpdf(l2, state.h.lam)
    )
    return _propose_fibre_replacement(state, j, fibre_new, extra)


def update_z(state):
    """Flip one uniformly chosen point between noise and signal."""
    if state.m == 0:
        return False
    i = int(state.rng.integers(state.m))
    a = state.alloc
    s2 = state.h.sigma_disp**2
    if a.z[i]:
        j = int(a.x[i])
        logits = _fibre_choice_logits(state, np.array([i]))
        norm = logsumexp(logits, axis=1)
        log_rev = float(logits[0, j] - norm[0]) + float(
            position_log_density(
                state.fibres[j], state.points[i : i + 1], a.s[i : i + 1], s2
            )[0]
        )
        alloc_new = a.copy()
        alloc_new.z[i] = False
        alloc_new.x[i] = -1
        alloc_new.s[i] = np.nan
        alloc_new.anchors[i] = np.nan
        lp_new = log_posterior_state(state, state.fibres, alloc_new, state.eps)
        log_ratio = lp_new - state.log_post + log_rev
    else:
        if state.k == 0:
            return False
        logits = _fibre_choice_logits(state, np.array([i]))
        norm = logsumexp(logits, axis=1)
        if not np.isfinite(norm[0]):
            return False
        probs = np.exp(logits[0] - norm[0])
        probs /= probs.sum()
        j = int(state.rng.choice(len(probs), p=probs))
        s_i, logq_pos = sample_positions(
            state.fibres[j], state.points[i : i + 1], s2, state.rng
        )
        log_fwd = float(logits[0, j] - norm[0]) + float(logq_pos[0])
        alloc_new = a.copy()
        alloc_new.z[i] = True
        alloc_new.x[i] = j
        alloc_new.s[i] = s_i[0]
        alloc_new.anchors[i] = point_at_arc(
            state.fibres[j].vertices, state.fibres[j].arcs, s_i
        )[0]
        lp_new = log_posterior_state(state, state.fibres, alloc_new, state.eps)
        log_ratio = lp_new - state.log_post - log_fwd
    if not _accept(state, log_ratio):
        return False
    state.alloc = alloc_new
    state.log_post = lp_new
    state.death_cache = death_rates(state)
    return True


def eps_update_log_ratio(state, eps_new):
    """Acceptance log-ratio for replacing eps (field re-estimated, fibres
    re-traced, anchors carried at fixed relative arc position).

    Returns (log_ratio, payload) or None when the proposal is invalid
    (singular fibre start, a populated fibre collapsing to zero length).
    """
    h = state.h
    c = state.eps_concentration
    a_par = h.alpha_signal + c * state.alloc.z
    b_par = h.beta_signal + c * (~state.alloc.z)
    if state.field_estimated and state.m >= 2:
        field_new = estimate_field(
            state.points, eps_new, h.sigma_fo, h.h_fo, state.window, state.spacing
        )
    else:
        field_new = state.field
    fibres_new = []
    try:
        for f in state.fibres:
            fibres_new.append(trace_fibre(field_new, f.omega, f.l1, f.l2, state.step))
    except SingularStart:
        return None

    alloc_new = state.alloc.copy()
    jacobian = 0.0
    for j, (f_old, f_new) in enumerate(zip(state.fibres, fibres_new)):
        idx = state.alloc.points_on(j)
        if not len(idx):
            continue
        if f_new.l_total <= 0.0 or f_old.l_total <= 0.0:
            return None
        scale = f_new.l_total / f_old.l_total
        s_new = state.alloc.s[idx] * scale
        alloc_new.s[idx] = s_new
        alloc_new.anchors[idx] = point_at_arc(f_new.vertices, f_new.arcs, s_new)
        jacobian += len(idx) * math.log(scale)

    lp_new = log_posterior_state(state, fibres_new, alloc_new, eps_new)
    log_prop = float(
        np.sum(model.beta_logpdf(state.eps, a_par, b_par))
        - np.sum(model.beta_logpdf(eps_new, a_par, b_par))
    )
    log_ratio = lp_new - state.log_post + log_prop + jacobian
    return log_ratio, (eps_new, field_new, fibres_new, alloc_new, lp_new)


def update_eps(state, proposal=None):
    """Resample eps, re-estimate the field, re-trace every fibre: one MH step.

    ``proposal`` injects the eps draw (testing hook); by default eps_i comes
    from Beta(alpha + Z_i, beta + (1 - Z_i)) scaled by the concentration.
    """
    h = state.h
    c = state.eps_concentration
    if proposal is None:
        a_par = h.alpha_signal + c * state.alloc.z
        b_par = h.beta_signal + c * (~state.alloc.z)
        eps_new = state.rng.beta(a_par, b_par)
    else:
        eps_new = np.asarray(proposal, dtype=float)
    eps_new = np.clip(eps_new, 1e-12, 1.0 - 1e-12)
    pieces = eps_update_log_ratio(state, eps_new)
    if pieces is None:
        return False
    log_ratio, (eps_new, field_new, fibres_new, alloc_new, lp_new) = pieces
    if not _accept(state, log_ratio):
        return False
    state.eps = eps_new
    state.field = field_new
    state.fibres = fibres_new
    state.alloc = alloc_new
    state.proj_d2 = [project_to_polyline(f.vertices, state.points) for f in fibres_new]
    state.ok_area_fraction = usable_area_fraction(field_new)
    state.log_post = lp_new
    state.death_cache = death_rates(state)
    return True


def _endpoint_gap(f, g):
    ends_f = np.array([f.vertices[0], f.vertices[-1]])
    ends_g = np.array([g.vertices[0], g.vertices[-1]])
    d = ends_f[:, None, :] - ends_g[None, :, :]
    return float(np.sqrt(np.einsum("abj,abj->ab", d, d).min()))


def _joinable_pairs(fibres, d_join):
    pairs = []
    for a in range(len(fibres)):
        for b in range(a + 1, len(fibres)):
            if _endpoint_gap(fibres[a], fibres[b]) <= d_join:
                pairs.append((a, b))
    return pairs


def _reanchor_two(state, idx, fib_a, fib_b, base_a, base_b):
    """Re-propose (X in {a, b}, position) for points idx; returns pieces."""
    s2 = state.h.sigma_disp**2
    d2a = project_to_polyline(fib_a.vertices, state.points[idx])
    d2b = project_to_polyline(fib_b.vertices, state.points[idx])
    logits = np.stack(
        [
            (math.log(fib_a.l_total) - LOG_2PI - math.log(s2) - d2a / (2 * s2))
            if fib_a.l_total > 0
            else np.full(len(idx), -np.inf),
            (math.log(fib_b.l_total) - LOG_2PI - math.log(s2) - d2b / (2 * s2))
            if fib_b.l_total > 0
            else np.full(len(idx), -np.inf),
        ],
        axis=1,
    )
    norm = logsumexp(logits, axis=1)
    if not np.all(np.isfinite(norm)):
        return None
    probs = np.exp(logits - norm[:, None])
    probs /= probs.sum(axis=1, keepdims=True)
    x_new = np.empty(len(idx), dtype=int)
    s_new = np.empty(len(idx))
    anchors = np.empty((len(idx), 2))
    logq = 0.0
    for r in range(len(idx)):
        side = int(state.rng.choice(2, p=probs[r]))
        fib = fib_a if side == 0 else fib_b
        x_new[r] = base_a if side == 0 else base_b
        logq += float(logits[r, side] - norm[r])
        s_i, lq = sample_positions(fib, state.points[idx[r] : idx[r] + 1], s2, state.rng)
        s_new[r] = s_i[0]
        anchors[r] = point_at_arc(fib.vertices, fib.arcs, s_i)[0]
        logq += float(lq[0])
    return x_new, s_new, anchors, logq


def _reanchor_two_density(state, idx, fib_a, fib_b, took_a, s_vals):
    """Density of _reanchor_two reproducing the given assignment exactly."""
    s2 = state.h.sigma_disp**2
    d2a = project_to_polyline(fib_a.vertices, state.points[idx])
    d2b = project_to_polyline(fib_b.vertices, state.points[idx])
    logits = np.stack(
        [
            (math.log(fib_a.l_total) - LOG_2PI - math.log(s2) - d2a / (2 * s2))
            if fib_a.l_total > 0
            else np.full(len(idx), -np.inf),
            (math.log(fib_b.l_total) - LOG_2PI - math.log(s2) - d2b / (2 * s2))
            if fib_b.l_total > 0
            else np.full(len(idx), -np.inf),
        ],
        axis=1,
    )
    norm = logsumexp(logits, axis=1)
    out = 0.0
    for r in range(len(idx)):
        side = 0 if took_a[r] else 1
        out += float(logits[r, side] - norm[r])
        fib = fib_a if took_a[r] else fib_b
        out += float(
            position_log_density(
                fib, state.points[idx[r] : idx[r] + 1], s_vals[r : r + 1], s2
            )[0]
        )
    return out


def split_fibre(state):
    if state.k == 0:
        return False
    j = int(state.rng.integers(state.k))
    f = state.fibres[j]
    length = f.l_total
    if length <= 0.0:
        return False
    u = float(state.rng.uniform(0.0, length))
    if u <= 0.0 or u >= length:
        return False
    omega_a = point_at_arc(f.vertices, f.arcs, np.array([0.5 * u]))[0]
    omega_b = point_at_arc(f.vertices, f.arcs, np.array([0.5 * (u + length)]))[0]
    try:
        fib_a = trace_fibre(state.field, omega_a, 0.5 * u, 0.5 * u, state.step)
        fib_b = trace_fibre(
            state.field, omega_b, 0.5 * (length - u), 0.5 * (length - u), state.step
        )
    except SingularStart:
        return False
    idx = state.alloc.points_on(j)
    if len(idx):
        re = _reanchor_two(state, idx, fib_a, fib_b, j, state.k)
        if re is None:
            return False
        x_new, s_new, anchors_new, logq_anchor_fwd = re
    else:
        x_new = s_new = anchors_new = None
        logq_anchor_fwd = 0.0

    fibres_new = state.fibres.copy()
    fibres_new[j] = fib_a
    fibres_new.append(fib_b)
    alloc_new = state.alloc.copy()
    if len(idx):
        alloc_new.x[idx] = x_new
        alloc_new.s[idx] = s_new
        alloc_new.anchors[idx] = anchors_new
    n_pairs_new = len(_joinable_pairs(fibres_new, 2.0 * state.h.sigma_disp))
    if n_pairs_new == 0:
        return False
    s2 = state.h.sigma_disp**2
    logq_rev_pos = (
        float(position_log_density(f, state.points[idx], state.alloc.s[idx], s2).sum())
        if len(idx)
        else 0.0
    )
    lp_new = log_posterior_state(state, fibres_new, alloc_new, state.eps)
    log_ratio = (
        lp_new
        - state.log_post
        + math.log(state.k + 1)  # unordered configurations: (k+1)!/k!
        + (-math.log(n_pairs_new) + logq_rev_pos)
        - (-math.log(state.k) - math.log(length) + logq_anchor_fwd)
    )
    if not _accept(state, log_ratio):
        return False
    state.fibres = fibres_new
    state.alloc = alloc_new
    state.proj_d2[j] = project_to_polyline(fib_a.vertices, state.points)
    state.proj_d2.append(project_to_polyline(fib_b.vertices, state.points))
    state.log_post = lp_new
    state.death_cache = death_rates(state)
    return True


def join_fibres(state):
    d_join = 2.0 * state.h.sigma_disp
    pairs = _joinable_pairs(state.fibres, d_join)
    if not pairs:
        return False
    a, b = pairs[int(state.rng.integers(len(pairs)))]
    fib_a, fib_b = state.fibres[a], state.fibres[b]
    # orient both polylines so the closest endpoints meet in the middle
    ends = [
        (fib_a.vertices[0], True),
        (fib_a.vertices[-1], False),
    ]
    best = None
    for va, rev_a in ends:
        for vb, rev_b in ((fib_b.vertices[0], False), (fib_b.vertices[-1], True)):
            gap = float(np.hypot(*(va - vb)))
            if best is None or gap < best[0]:
                best = (gap, rev_a, rev_b)
    _, rev_a, rev_b = best
    verts_a = fib_a.vertices[::-1] if rev_a else fib_a.vertices
    verts_b = fib_b.vertices[::-1] if rev_b else fib_b.vertices
    combined = np.concatenate([verts_a, verts_b])
    comb_arcs = arc_lengths(combined)
    total = fib_a.l_total + fib_b.l_total
    if total <= 0.0:
        return False
    omega_m = point_at_arc(combined, comb_arcs, np.array([0.5 * comb_arcs[-1]]))[0]
    try:
        merged = trace_fibre(state.field, omega_m, 0.5 * total, 0.5 * total, state.step)
    except SingularStart:
        return False
    idx = np.concatenate([state.alloc.points_on(a), state.alloc.points_on(b)])
    s2 = state.h.sigma_disp**2
    if len(idx):
        if merged.l_total <= 0.0:
            return False
        s_new, logq_pos_list = sample_positions(
            merged, state.points[idx], s2, state.rng
        )
        logq_fwd_pos = float(logq_pos_list.sum())
        anchors_new = point_at_arc(merged.vertices, merged.arcs, s_new)
    else:
        s_new = anchors_new = None
        logq_fwd_pos = 0.0

    lo, hi = min(a, b), max(a, b)
    fibres_new = state.fibres.copy()
    fibres_new[lo] = merged
    del fibres_new[hi]
    alloc_new = state.alloc.copy()
    if len(idx):
        alloc_new.x[idx] = lo
        alloc_new.s[idx] = s_new
        alloc_new.anchors[idx] = anchors_new
    alloc_new.x[alloc_new.x > hi] -= 1  # noqa: the merged fibre sits at lo < hi

    took_a = np.concatenate(
        [
            np.ones(len(state.alloc.points_on(a)), dtype=bool),
            np.zeros(len(state.alloc.points_on(b)), dtype=bool),
        ]
    )
    logq_rev_anchor = (
        _reanchor_two_density(state, idx, fib_a, fib_b, took_a, state.alloc.s[idx])
        if len(idx)
        else 0.0
    )
    lp_new = log_posterior_state(state, fibres_new, alloc_new, state.eps)
    log_ratio = (
        lp_new
        - state.log_post
        - math.log(state.k)  # unordered configurations: (k-1)!/k!
        + (
            -math.log(state.k - 1)
            - math.log(merged.l_total)
            + logq_rev_anchor
        )
        - (-math.log(len(pairs)) + logq_fwd_pos)
    )
    if not _accept(state, log_ratio):
        return False
    state.fibres = fibres_new
    state.alloc = alloc_new
    state.proj_d2[lo] = project_to_polyline(merged.vertices, state.points)
    del state.proj_d2[hi]
    state.log_post = lp_new
    state.death_cache = death_rates(state)
    return True


def split_join(state):
    if state.rng.uniform() < 0.5:
        return split_fibre(state)
    return join_fibres(state)


# --- scheduler ---------------------------------------------------------------


def event_rates(state, rates):
    """Rate vector: [birth, death_1..death_k, move, lengths, split_join, z, eps, record]."""
    return np.concatenate(
        [
            [rates.beta_birth],
            np.asarray(state.death_cache, dtype=float),
            [
                rates.r_move,
                rates.r_lengths,
                rates.r_split_join,
                rates.r_z,
                rates.r_eps,
                rates.r_record,
            ],
        ]
    )


def schedule_event(rates_vec, rng):
    """Competing exponential clocks: (dt, index of the firing clock)."""
    total = float(rates_vec.sum())
    if not np.isfinite(total):
        return 0.0, int(np.argmax(rates_vec))
    if total <= 0.0:
        raise DataError("no event has positive rate")
    dt = rng.exponential(1.0 / total)
    u = rng.uniform(0.0, total)
    idx = int(np.searchsorted(np.cumsum(rates_vec), u, side="right"))
    return dt, min(idx, len(rates_vec) - 1)


def classify_event(idx, k):
    if idx == 0:
        return EVENT_BIRTH, None
    if idx <= k:
        return EVENT_DEATH, idx - 1
    pos = idx - k - 1
    if pos < len(_EXTRA_MOVES):
        return _EXTRA_MOVES[pos], None
    return EVENT_RECORD, None


def step(state, rates):
    """One event of the chain. Returns (kind, dt, accepted)."""
    vec = event_rates(state, rates)
    dt, idx = schedule_event(vec, state.rng)
    state.clock += dt
    kind, payload = classify_event(idx, state.k)
    accepted = True
    if kind == EVENT_BIRTH:
        apply_birth(state, propose_birth(state))
    elif kind == EVENT_DEATH:
        apply_death(state, payload)
    elif kind == EVENT_MOVE:
        accepted = move_fibre(state)
    elif kind == EVENT_LENGTHS:
        accepted = resample_lengths(state)
    elif kind == EVENT_SPLIT_JOIN:
        accepted = split_join(state)
    elif kind == EVENT_Z:
        accepted = update_z(state)
    elif kind == EVENT_EPS:
        accepted = update_eps(state)
    return kind, dt, accepted


def burn_in_time(h, window, beta_birth):
    """Burn-in length: max(1500, log(0.01)/(beta*log(1 - 8 lam log(10/9) sigma/(kappa |W|))))."""
    inner = 8.0 * h.lam * math.log(10.0 / 9.0) * h.sigma_disp / (h.kappa * window.area)
    if inner >= 1.0:
        warnings.warn(
            "burn-in geometry formula left its domain; using the 1500 floor",
            DegenerateGeometry,
        )
        return 1500.0
    t = math.log(0.01) / (beta_birth * math.log1p(-inner))
    return max(1500.0, t)


def make_record(state):
    a = state.alloc
    idx = np.flatnonzero(a.z)
    if len(idx):
        d = state.points[idx] - a.anchors[idx]
        disp = float(np.percentile(np.sqrt(np.einsum("ij,ij->i", d, d)), 95.0))
    else:
        disp = None
    return TraceRecord(
        clock=state.clock,
        k=state.k,
        total_length=float(sum(f.l_total for f in state.fibres)),
        n_noise=int((~a.z).sum()),
        eps_mean=float(state.eps.mean()) if state.m else 0.0,
        dispersion_p95=disp,
        z=a.z.astype(int).copy(),
        x=a.x.copy(),
        polylines=[f.vertices.copy() for f in state.fibres],
    )


def init_state(
    pattern,
    h,
    seed,
    step_len,
    spacing,
    beta_birth=1.0,
    eps_concentration=1.0,
    fld=None,
    constant_likelihood=False,
):
    """Initial chain state: eps at the prior mean, kappa prior fibres, all noise."""
    rng = np.random.default_rng(seed)
    m = len(pattern.points)
    eps0 = np.full(m, h.alpha_signal / (h.alpha_signal + h.beta_signal))
    field_estimated = fld is None
    if fld is None:
        if m < 2:
            raise DataError("need at least 2 points to estimate a field")
        fld = estimate_field(
            pattern.points, eps0, h.sigma_fo, h.h_fo, pattern.window, spacing
        )
    fibres = [
        model.sample_prior_fibre(fld, h, rng, step_len)
        for _ in range(int(round(h.kappa)))
    ]
    return ChainState(
        pattern,
        h,
        fld,
        fibres,
        Allocation.all_noise(m),
        eps0,
        rng,
        step_len,
        spacing,
        beta_birth=beta_birth,
        eps_concentration=eps_concentration,
        constant_likelihood=constant_likelihood,
        field_estimated=field_estimated,
    )


def run_chain(
    pattern,
    h,
    rates,
    seed,
    t_end,
    spacing=1.0,
    step_len=1.0,
    eps_concentration=1.0,
    fld=None,
    constant_likelihood=False,
    collect_k_occupancy=False,
):
    """Run the chain to algorithmic time t_end; records start after burn-in.

    Returns a ChainResult. zm_products holds one value per state-changing
    event after burn-in: (total death rate) x (waiting time to the next
    state-changing event); at stationarity these average
    beta/(2 beta + r_add).
    """
    burn = burn_in_time(h, pattern.window, rates.beta_birth)
    if t_end <= burn:
        raise DataError(f"t_end={t_end} does not reach past burn-in={burn:.1f}")
    state = init_state(
        pattern,
        h,
        seed,
        step_len,
        spacing,
        beta_birth=rates.beta_birth,
        eps_concentration=eps_concentration,
        fld=fld,
        constant_likelihood=constant_likelihood,
    )
    records = []
    products = []
    event_counts = {}
    accept_counts = {}
    k_occupancy = {}
    pending = 0.0
    pending_start = 0.0
    while state.clock < t_end:
        death_total = float(np.sum(state.death_cache))
        k_before = state.k
        t_before = state.clock
        kind, dt, accepted = step(state, rates)
        if collect_k_occupancy:
            k_occupancy[k_before] = k_occupancy.get(k_before, 0.0) + dt
        if pending == 0.0:
            pending_start = t_before
        pending += death_total * dt
        event_counts[kind] = event_counts.get(kind, 0) + 1
        if kind in _EXTRA_MOVES:
            accept_counts[kind] = accept_counts.get(kind, 0) + int(accepted)
        if kind == EVENT_RECORD:
            if state.clock >= burn:
                records.append(make_record(state))
        else:
            if pending_start >= burn:
                products.append(pending)
            pending = 0.0
    result = ChainResult(
        records=records,
        burn_in=burn,
        t_end=float(t_end),
        seed=int(seed),
        event_counts=event_counts,
        accept_counts=accept_counts,
        zm_products=np.asarray(products),
    )
    if collect_k_occupancy:
        result.k_occupancy = k_occupancy
    return result
