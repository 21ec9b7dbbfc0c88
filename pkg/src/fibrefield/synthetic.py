"""Ground-truth dataset generation from the forward model.

A scenario fixes an analytic orientation field, a set of fibres (explicit or
prior-drawn), and point counts (fixed totals or Poisson-driven). Generation is
fully deterministic given the seed and returns both the point pattern and the
latent truth (fibres, allocation, anchors) for scoring and testing.
"""

from dataclasses import dataclass

import numpy as np

from . import model
from .errors import DataError
from .field import (
    constant_field,
    circular_field,
    ridge_wave_field,
    trace_fibre,
)
from .geometry import PointPattern, point_at_arc
from .model import Allocation

FIELD_KINDS = ("constant", "circular", "ridge_wave")
COUNT_MODES = ("fixed", "poisson")


@dataclass(frozen=True)
class ScenarioConfig:
    window: object
    h: object
    seed: int
    field_kind: str = "ridge_wave"
    theta0: float = 0.0
    amplitude: float = 12.0
    period: float = 120.0
    fibres: tuple = None  # ((omega_x, omega_y, l1, l2), ...) or None
    k_fibres: int = None
    count_mode: str = "fixed"
    n_signal: int = None
    noise_count: int = None
    step: float = 1.0

    def __post_init__(self):
        if self.field_kind not in FIELD_KINDS:
            raise DataError(f"field_kind must be one of {FIELD_KINDS}")
        if self.count_mode not in COUNT_MODES:
            raise DataError(f"count_mode must be one of {COUNT_MODES}")
        if (self.fibres is None) == (self.k_fibres is None):
            raise DataError("give exactly one of fibres / k_fibres")
        if self.count_mode == "fixed":
            if self.n_signal is None or self.noise_count is None:
                raise DataError("fixed count_mode needs n_signal and noise_count")
            if self.n_signal < 0 or self.noise_count < 0:
                raise DataError("point counts must be nonnegative")
        else:
            if self.n_signal is not None or self.noise_count is not None:
                raise DataError(
                    "poisson count_mode derives its counts; "
                    "do not give n_signal/noise_count"
                )
        if self.step <= 0:
            raise DataError("step must be positive")


def build_field(config):
    """The scenario's analytic orientation field."""
    if config.field_kind == "constant":
        return constant_field(config.window, config.theta0)
    if config.field_kind == "circular":
        win = config.window
        return circular_field(
            win, 0.5 * (win.xmin + win.xmax), 0.5 * (win.ymin + win.ymax)
        )
    return ridge_wave_field(config.window, config.amplitude, config.period)


@dataclass
class GroundTruth:
    fibres: list
    alloc: Allocation
    eps: np.ndarray

    def to_json_dict(self):
        return {
            "fibres": [
                {
                    "omega": f.omega.tolist(),
                    "l1": float(f.l1),
                    "l2": float(f.l2),
                    "vertices": f.vertices.tolist(),
                }
                for f in self.fibres
            ],
            "z": self.alloc.z.astype(int).tolist(),
            "x": self.alloc.x.tolist(),
            "s": [None if not np.isfinite(v) else float(v) for v in self.alloc.s],
            "anchors": [
                None if not np.all(np.isfinite(row)) else row.tolist()
                for row in self.alloc.anchors
            ],
        }


def generate(config):
    """Draw one dataset; returns (PointPattern, GroundTruth)."""
    rng = np.random.default_rng(config.seed)
    h = config.h
    fld = build_field(config)
    if config.fibres is not None:
        fibres = [
            trace_fibre(fld, np.array([ox, oy], dtype=float), l1, l2, config.step)
            for ox, oy, l1, l2 in config.fibres
        ]
    else:
        fibres = [
            model.sample_prior_fibre(fld, h, rng, config.step)
            for _ in range(int(config.k_fibres))
        ]
    lengths = np.array([f.l_total for f in fibres])
    total = float(lengths.sum())

    if config.count_mode == "fixed":
        n_noise = int(config.noise_count)
        if config.n_signal and total <= 0.0:
            raise DataError("n_signal > 0 needs fibres with positive length")
        counts = (
            rng.multinomial(config.n_signal, lengths / total)
            if config.n_signal
            else np.zeros(len(fibres), dtype=int)
        )
    else:
        counts = rng.poisson(h.eta * lengths)
        n_noise = int(rng.poisson(h.eta * total * h.rho / (1.0 - h.rho)))

    signal_points = []
    x_labels = []
    s_values = []
    anchor_rows = []
    for j, fibre in enumerate(fibres):
        n_j = int(counts[j])
        if n_j == 0:
            continue
        gaps = rng.dirichlet(np.full(n_j + 1, h.alpha_dir))
        s_sorted = np.cumsum(gaps)[:-1] * fibre.l_total
        s_j = s_sorted[rng.permutation(n_j)]
        anchors_j = point_at_arc(fibre.vertices, fibre.arcs, s_j)
        disp = rng.normal(size=(n_j, 2)) * h.sigma_disp
        signal_points.append(anchors_j + disp)
        x_labels.append(np.full(n_j, j))
        s_values.append(s_j)
        anchor_rows.append(anchors_j)

    n_signal = int(counts.sum())
    noise_points = config.window.sample(rng, n_noise) if n_noise else np.empty((0, 2))
    m = n_signal + n_noise
    if m == 0:
        raise DataError("scenario generates zero points")
    points = np.concatenate(
        [np.concatenate(signal_points) if signal_points else np.empty((0, 2)), noise_points]
    )

    alloc = Allocation.all_noise(m)
    if n_signal:
        alloc.z[:n_signal] = True
        alloc.x[:n_signal] = np.concatenate(x_labels)
        alloc.s[:n_signal] = np.concatenate(s_values)
        alloc.anchors[:n_signal] = np.concatenate(anchor_rows)
    eps = np.full(m, h.alpha_signal / (h.alpha_signal + h.beta_signal))
    truth = GroundTruth(fibres=fibres, alloc=alloc, eps=eps)
    return PointPattern(points, config.window), truth
