"""Flat ``key = value`` run configuration with a typed schema.

The format is deliberately minimal: one assignment per line, ``#`` comments,
no sections. Unknown keys, duplicates, and malformed values are rejected with
messages anchored to the offending line.
"""

from .errors import ConfigError
from .geometry import WindowRect
from .model import Hyperparams
from .sampler import RatesConfig


def _choice(*allowed):
    def convert(text):
        if text not in allowed:
            raise ValueError(f"must be one of {', '.join(allowed)}")
        return text

    return convert


def _fibre_list(text):
    """Parse 'ox,oy,l1,l2;ox,oy,l1,l2;...' into a tuple of 4-tuples."""
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p.strip() for p in chunk.split(",")]
        if len(parts) != 4:
            raise ValueError("each fibre needs 4 numbers: omega_x,omega_y,l1,l2")
        out.append(tuple(float(p) for p in parts))
    if not out:
        raise ValueError("empty fibre list")
    return tuple(out)


# key -> (converter, default); None default means "unset"
SCHEMA = {
    # window
    "window_xmin": (float, None),
    "window_ymin": (float, None),
    "window_xmax": (float, None),
    "window_ymax": (float, None),
    # model hyperparameters
    "kappa": (float, 2.0),
    "lam": (float, 78.5),
    "sigma_disp": (float, 3.0),
    "eta": (float, 0.64),
    "alpha_signal": (float, 1.0),
    "beta_signal": (float, 1.0),
    "alpha_dir": (float, 1.5),
    "sigma_fo": (float, 6.0),
    "h_fo": (float, 8.0),
    # sampler rates
    "beta_birth": (float, 1.0),
    "r_move": (float, 1.0),
    "r_lengths": (float, 1.0),
    "r_split_join": (float, 1.0),
    "r_z": (float, 1.0),
    "r_eps": (float, 0.1),
    "r_record": (float, None),  # resolved to 0.05/kappa when unset
    # run controls
    "grid_spacing": (float, 1.0),
    "step": (float, 1.0),
    "t_end": (float, None),
    "seed": (int, 0),
    "eps_concentration": (float, 1.0),
    # synthetic scenarios
    "field_kind": (_choice("constant", "circular", "ridge_wave"), "ridge_wave"),
    "theta0": (float, 0.0),
    "amplitude": (float, 12.0),
    "period": (float, 120.0),
    "fibres": (_fibre_list, None),
    "k_fibres": (int, None),
    "count_mode": (_choice("fixed", "poisson"), "fixed"),
    "n_signal": (int, None),
    "noise_count": (int, None),
    # summaries and rasters
    "cluster_threshold": (float, 0.5),
    "bandwidth": (float, 2.0),
    "raster_cell": (float, 1.0),
}

KEY_ORDER = tuple(SCHEMA.keys())

WINDOW_KEYS = ("window_xmin", "window_ymin", "window_xmax", "window_ymax")


def parse_config(path):
    """Parse and resolve a configuration file into a dict over SCHEMA keys."""
    raw = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = text.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            if key in raw:
                raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
            if not value:
                raise ConfigError(f"{path}:{lineno}: empty value for '{key}'")
            convert = SCHEMA[key][0]
            try:
                raw[key] = convert(value)
            except ValueError as e:
                raise ConfigError(
                    f"{path}:{lineno}: bad value for '{key}': {e}"
                ) from None
    cfg = {key: default for key, (_, default) in SCHEMA.items()}
    cfg.update(raw)
    if cfg["r_record"] is None:
        cfg["r_record"] = 0.05 / cfg["kappa"]
    return cfg


def require(cfg, keys, path):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"{path}: missing required key(s): {', '.join(missing)}")


def window_from(cfg):
    return WindowRect(
        cfg["window_xmin"], cfg["window_ymin"], cfg["window_xmax"], cfg["window_ymax"]
    )


def hyperparams_from(cfg):
    return Hyperparams(
        kappa=cfg["kappa"],
        lam=cfg["lam"],
        sigma_disp=cfg["sigma_disp"],
        eta=cfg["eta"],
        alpha_signal=cfg["alpha_signal"],
        beta_signal=cfg["beta_signal"],
        alpha_dir=cfg["alpha_dir"],
        sigma_fo=cfg["sigma_fo"],
        h_fo=cfg["h_fo"],
    )


def rates_from(cfg):
    return RatesConfig(
        beta_birth=cfg["beta_birth"],
        r_move=cfg["r_move"],
        r_lengths=cfg["r_lengths"],
        r_split_join=cfg["r_split_join"],
        r_z=cfg["r_z"],
        r_eps=cfg["r_eps"],
        r_record=cfg["r_record"],
    )
