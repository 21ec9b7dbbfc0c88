"""scikit-learn style wrappers around the functional core.

Two estimators: `OrientationFieldEstimator` (fit a grid of orientations to a
point pattern, transform points to their local angle/anisotropy) and
`FibrePosteriorSampler` (fit the posterior over fibre configurations, exposing
trace_, cooccurrence_, labels_ and summary_). Both follow the get_params /
set_params / fit conventions so they compose with sklearn tooling; the heavy
lifting stays in the functional modules.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .diagnostics import cluster_points, cooccurrence, summarize
from .errors import DataError
from .field import estimate_field
from .geometry import PointPattern, WindowRect
from .model import Hyperparams
from .sampler import RatesConfig, run_chain


def _resolve_window(window, X, margin=1.0):
    if window is not None:
        return window
    xmin, ymin = X.min(axis=0) - margin
    xmax, ymax = X.max(axis=0) + margin
    return WindowRect(float(xmin), float(ymin), float(xmax), float(ymax))


def _checked_points(X):
    X = check_array(X, dtype=float, ensure_min_samples=2)
    if X.shape[1] != 2:
        raise DataError(f"points must have 2 columns, got {X.shape[1]}")
    return X


class OrientationFieldEstimator(BaseEstimator, TransformerMixin):
    """Empirical-Bayes orientation field on a regular grid.

    Parameters mirror the functional API: kernel scales sigma_fo (local
    tensors) and h_fo (grid smoothing), grid spacing, and the observation
    window (inferred from the data with a margin when omitted).
    """

    def __init__(self, window=None, sigma_fo=6.0, h_fo=8.0, spacing=1.0):
        self.window = window
        self.sigma_fo = sigma_fo
        self.h_fo = h_fo
        self.spacing = spacing

    def fit(self, X, y=None, sample_weight=None):
        X = _checked_points(X)
        window = _resolve_window(self.window, X)
        if sample_weight is None:
            eps = np.full(len(X), 0.5)
        else:
            eps = np.asarray(sample_weight, dtype=float)
        self.window_ = window
        self.grid_ = estimate_field(
            X, eps, self.sigma_fo, self.h_fo, window, self.spacing
        )
        return self

    def transform(self, X):
        """Per-point [orientation angle, anisotropy]; angle is NaN on singular cells."""
        check_is_fitted(self, "grid_")
        X = check_array(X, dtype=float)
        out = np.empty((len(X), 2))
        for i, xy in enumerate(X):
            theta, singular = self.grid_.orientation_at(xy)
            ix, iy = self.grid_._node_index(xy)
            out[i, 0] = np.nan if singular else theta
            out[i, 1] = self.grid_.anisotropy[iy, ix]
        return out


class FibrePosteriorSampler(BaseEstimator, ClusterMixin):
    """Posterior over fibre configurations, summarized as point clusters.

    fit(X) runs the birth-death chain on the points and exposes the trace and
    its summaries; labels_ assigns each point a fibre-cluster label (noise is
    -1) by thresholded co-occurrence, so the estimator drops into clustering
    pipelines.
    """

    def __init__(
        self,
        window=None,
        t_end=4000.0,
        seed=0,
        threshold=0.5,
        spacing=1.0,
        step=1.0,
        kappa=2.0,
        lam=78.5,
        sigma_disp=3.0,
        eta=0.64,
        alpha_signal=1.0,
        beta_signal=1.0,
        alpha_dir=1.5,
        sigma_fo=6.0,
        h_fo=8.0,
        beta_birth=1.0,
        r_move=1.0,
        r_lengths=1.0,
        r_split_join=1.0,
        r_z=1.0,
        r_eps=0.1,
        r_record=0.025,
    ):
        self.window = window
        self.t_end = t_end
        self.seed = seed
        self.threshold = threshold
        self.spacing = spacing
        self.step = step
        self.kappa = kappa
        self.lam = lam
        self.sigma_disp = sigma_disp
        self.eta = eta
        self.alpha_signal = alpha_signal
        self.beta_signal = beta_signal
        self.alpha_dir = alpha_dir
        self.sigma_fo = sigma_fo
        self.h_fo = h_fo
        self.beta_birth = beta_birth
        self.r_move = r_move
        self.r_lengths = r_lengths
        self.r_split_join = r_split_join
        self.r_z = r_z
        self.r_eps = r_eps
        self.r_record = r_record

    def fit(self, X, y=None):
        X = _checked_points(X)
        window = _resolve_window(self.window, X, margin=4.0 * self.sigma_disp)
        pattern = PointPattern(X, window)
        h = Hyperparams(
            kappa=self.kappa,
            lam=self.lam,
            sigma_disp=self.sigma_disp,
            eta=self.eta,
            alpha_signal=self.alpha_signal,
            beta_signal=self.beta_signal,
            alpha_dir=self.alpha_dir,
            sigma_fo=self.sigma_fo,
            h_fo=self.h_fo,
        )
        rates = RatesConfig(
            beta_birth=self.beta_birth,
            r_move=self.r_move,
            r_lengths=self.r_lengths,
            r_split_join=self.r_split_join,
            r_z=self.r_z,
            r_eps=self.r_eps,
            r_record=self.r_record,
        )
        result = run_chain(
            pattern,
            h,
            rates,
            self.seed,
            self.t_end,
            spacing=self.spacing,
            step_len=self.step,
        )
        self.window_ = window
        self.result_ = result
        self.trace_ = result.records
        self.burn_in_ = result.burn_in
        if result.records:
            self.cooccurrence_ = cooccurrence(result.records, len(X))
            self.labels_ = cluster_points(self.cooccurrence_, self.threshold)
            self.summary_ = summarize(result.records)
        else:
            self.cooccurrence_ = np.zeros((len(X), len(X)))
            self.labels_ = np.full(len(X), -1)
            self.summary_ = []
        return self
