"""Synthetic land-surface data: a heterogeneous leaky-bucket water balance
standing in for a land surface model, plus the noise and observation-schedule
machinery for hindcast experiments.

Per pixel and day (depth in mm, moisture as volumetric fraction):

    theta[t+1] = clamp(theta[t] + (inf * P - ET * theta - k * theta**b) / depth,
                       residual, porosity)

P is a seeded wet-day precipitation process, ET demand follows a seasonal
potential-evapotranspiration cycle, and the per-pixel parameters drawn from
the heterogeneity ranges become the static attributes. The clean series is
kept as ground truth; the target is a noisy, subsampled copy.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .dataset import GridDataset, PixelSeries, parse_date
from .errors import ValidationError
from .lstm import make_rng

NOISE_KINDS = ("none", "white", "relative")
FORCING_NAMES = ["precip", "pet", "tair"]


@dataclass
class SyntheticConfig:
    rows: int = 8
    cols: int = 8
    years: int = 3
    start_date: str = "2000-01-01"
    # bucket parameter ranges, sampled per pixel
    porosity: tuple[float, float] = (0.42, 0.48)
    residual: tuple[float, float] = (0.08, 0.12)
    infiltration: tuple[float, float] = (0.4, 0.6)
    et_coef: tuple[float, float] = (0.8, 1.2)
    drainage_coef: tuple[float, float] = (40.0, 80.0)   # mm/day at theta = 1
    drainage_exp: tuple[float, float] = (2.0, 3.0)
    depth_mm: tuple[float, float] = (250.0, 350.0)
    # precipitation process, sampled per pixel
    wet_day_prob: tuple[float, float] = (0.25, 0.35)
    wet_day_depth: tuple[float, float] = (6.0, 10.0)    # mean mm on wet days
    # target corruption
    noise_kind: str = "none"
    noise_param: float = 0.0
    revisit_days: int = 3
    irregular_revisit: bool = False
    # optional biased dense model-simulated channel
    include_lsm: bool = False
    lsm_bias_range: tuple[float, float] = (-0.08, 0.08)
    lsm_noise_std: float = 0.0
    # when set, one visible attribute ("biasattr") encodes each pixel's lsm
    # bias position so models can in principle learn the correction
    lsm_bias_from_attr: bool = False
    # optional pixel-constant offset added to the target, driven by one extra
    # quadratic attribute; exercises instantaneous nonlinearity
    bias_attr_scale: float = 0.0
    # hide the bucket parameters from the attribute vector (pixel
    # heterogeneity the models cannot see)
    expose_bucket_attrs: bool = True
    # optional region labels laid out as blocks of the grid
    region_layout: tuple[int, int] | None = None
    seed: int = 0

    def validate(self):
        if self.rows < 1 or self.cols < 1 or self.years < 1:
            raise ValidationError("grid dims and years must be positive")
        if self.noise_kind not in NOISE_KINDS:
            raise ValidationError(f"noise kind must be one of {NOISE_KINDS}")
        if self.noise_kind != "none" and self.noise_param <= 0:
            raise ValidationError("noise_param must be positive for noisy targets")
        if self.revisit_days < 1:
            raise ValidationError("revisit interval must be >= 1 day")
        if self.porosity[0] <= self.residual[1]:
            raise ValidationError("porosity range must sit above residual range")
        if self.region_layout is not None:
            nr, nc = self.region_layout
            if self.rows % nr or self.cols % nc:
                raise ValidationError("region layout must tile the grid evenly")
        if self.lsm_bias_from_attr and not self.include_lsm:
            raise ValidationError("lsm_bias_from_attr requires include_lsm")
        if self.lsm_bias_from_attr and self.bias_attr_scale > 0:
            raise ValidationError(
                "biasattr cannot drive the lsm bias and a target offset at once")
        return self

    @property
    def n_days(self) -> int:
        return self.years * 365

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            val = getattr(self, name)
            out[name] = list(val) if isinstance(val, tuple) else val
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        kwargs = {}
        for name, f in cls.__dataclass_fields__.items():
            if name not in d:
                continue
            val = d[name]
            if isinstance(val, list):
                val = tuple(val)
            kwargs[name] = val
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown synthetic config fields: {sorted(unknown)}")
        return cls(**kwargs)


def add_noise(series: np.ndarray, kind: str, param: float, seed) -> np.ndarray:
    """Corrupt a series with independent (non-autocorrelated) noise.

    "white" adds N(0, param); "relative" multiplies by (1 + e) with
    e ~ N(0, param).
    """
    if kind not in ("white", "relative"):
        raise ValidationError(f"noise kind must be white or relative, got {kind!r}")
    if param <= 0:
        raise ValidationError("noise parameter must be positive")
    series = np.asarray(series, dtype=float)
    rng = make_rng(seed)
    eps = rng.normal(0.0, param, size=series.shape)
    if kind == "white":
        return series + eps
    return series * (1.0 + eps)


def _seasonal_cycle(n_days: int, start: dt.date, amplitude: float, base: float,
                    jitter: np.ndarray) -> np.ndarray:
    doy = np.array([(start + dt.timedelta(days=i)).timetuple().tm_yday
                    for i in range(n_days)], dtype=float)
    cyc = base + amplitude * np.sin(2.0 * np.pi * (doy - 105.0) / 365.25)
    return np.maximum(cyc + jitter, 0.05)


def simulate_bucket(precip: np.ndarray, et_demand: np.ndarray, porosity: float,
                    residual: float, infiltration: float, drainage_coef: float,
                    drainage_exp: float, depth_mm: float,
                    theta0: float | None = None) -> np.ndarray:
    """Daily bucket water balance; the state stays inside [residual, porosity]."""
    T = precip.size
    theta = np.empty(T)
    x = 0.5 * (residual + porosity) if theta0 is None else theta0
    for t in range(T):
        theta[t] = x
        flux = infiltration * precip[t] - et_demand[t] * x \
            - drainage_coef * x ** drainage_exp
        x = min(max(x + flux / depth_mm, residual), porosity)
    return theta


def _region_label(row: int, col: int, cfg: SyntheticConfig) -> str | None:
    if cfg.region_layout is None:
        return None
    nr, nc = cfg.region_layout
    return f"R{row // (cfg.rows // nr)}{col // (cfg.cols // nc)}"


BURN_IN_DAYS = 365  # simulated before the record starts, then discarded


def generate_synthetic(config: SyntheticConfig) -> GridDataset:
    """Build a bucket-model GridDataset per the config; bit-identical for a
    given config (per-pixel RNG streams keyed on the config seed).

    Every pixel is simulated for one extra year before the record begins and
    that burn-in is discarded, so day 0 of the stored series is already in
    the stationary regime rather than relaxing from the bucket's arbitrary
    initial state.
    """
    cfg = config.validate()
    n_days = cfg.n_days
    start = parse_date(cfg.start_date)
    burn = BURN_IN_DAYS
    sim_days = n_days + burn
    sim_start = start - dt.timedelta(days=burn)

    attribute_names = []
    if cfg.expose_bucket_attrs:
        attribute_names = ["porosity", "residual", "infiltration", "et_coef",
                           "drainage_coef", "drainage_exp", "depth_mm"]
    if cfg.bias_attr_scale > 0 or cfg.lsm_bias_from_attr:
        attribute_names = attribute_names + ["biasattr"]

    pixels = []
    for row in range(cfg.rows):
        for col in range(cfg.cols):
            k = row * cfg.cols + col
            rng = make_rng([cfg.seed, k])

            porosity = rng.uniform(*cfg.porosity)
            residual = rng.uniform(*cfg.residual)
            infiltration = rng.uniform(*cfg.infiltration)
            et_coef = rng.uniform(*cfg.et_coef)
            k_drain = rng.uniform(*cfg.drainage_coef)
            b_drain = rng.uniform(*cfg.drainage_exp)
            depth = rng.uniform(*cfg.depth_mm)

            wet_p = rng.uniform(*cfg.wet_day_prob)
            wet_depth = rng.uniform(*cfg.wet_day_depth)
            wet = rng.random(sim_days) < wet_p
            precip = np.where(wet, rng.exponential(wet_depth, size=sim_days), 0.0)

            pet = _seasonal_cycle(sim_days, sim_start, amplitude=2.0, base=3.0,
                                  jitter=rng.normal(0.0, 0.3, size=sim_days))
            tair = _seasonal_cycle(sim_days, sim_start, amplitude=10.0, base=12.0,
                                   jitter=rng.normal(0.0, 1.5, size=sim_days))

            theta = simulate_bucket(precip, et_coef * pet, porosity, residual,
                                    infiltration, k_drain, b_drain, depth)
            precip, pet, tair = precip[burn:], pet[burn:], tair[burn:]
            theta = theta[burn:]

            attrs = []
            if cfg.expose_bucket_attrs:
                attrs = [porosity, residual, infiltration, et_coef,
                         k_drain, b_drain, depth]
            truth = theta
            bias_attr = None
            if cfg.bias_attr_scale > 0 or cfg.lsm_bias_from_attr:
                bias_attr = rng.uniform(-1.0, 1.0)
                attrs.append(bias_attr)
            if cfg.bias_attr_scale > 0:
                # quadratic in the attribute, centered to zero mean over U(-1,1)
                truth = theta + cfg.bias_attr_scale * (bias_attr ** 2 - 1.0 / 3.0)

            region = _region_label(row, col, cfg)
            lsm = None
            if cfg.include_lsm:
                lo, hi = cfg.lsm_bias_range
                frac = _region_bias_fraction(row, col, cfg, rng)
                if cfg.lsm_bias_from_attr:
                    # overwrite the sampled attribute so it encodes the bias
                    attrs[-1] = 2.0 * frac - 1.0
                bias = lo + (hi - lo) * frac
                lsm = truth + bias
                if cfg.lsm_noise_std > 0:
                    lsm = lsm + rng.normal(0.0, cfg.lsm_noise_std, size=n_days)

            if cfg.noise_kind == "none":
                target = truth.copy()
            else:
                target = add_noise(truth, cfg.noise_kind, cfg.noise_param, rng)
            target = np.clip(target, 0.0, 1.0)

            if cfg.irregular_revisit:
                observed = rng.random(n_days) < 1.0 / cfg.revisit_days
            else:
                offset = (row + col) % cfg.revisit_days  # destagger like swaths
                observed = (np.arange(n_days) % cfg.revisit_days) == offset
            target = np.where(observed, target, np.nan)

            pixels.append(PixelSeries(
                pixel_id=f"px_{row}_{col}", row=row, col=col,
                forcing=np.column_stack([precip, pet, tair]),
                attributes=np.asarray(attrs, dtype=float),
                target=target, mask=observed,
                lsm=lsm, truth=truth.copy(), region=region,
            ))

    ds = GridDataset(rows=cfg.rows, cols=cfg.cols, start_date=start,
                     n_days=n_days, forcing_names=list(FORCING_NAMES),
                     attribute_names=attribute_names, pixels=pixels)
    return ds.validate()


def _region_bias_fraction(row: int, col: int, cfg: SyntheticConfig,
                          rng: np.random.Generator) -> float:
    """Position of this pixel's lsm bias inside lsm_bias_range, in [0, 1].

    With regions, region index sets the center (regions are ordered low to
    high bias) and pixels jitter around it; without regions the fraction is
    uniform.
    """
    if cfg.region_layout is None:
        return rng.uniform(0.0, 1.0)
    nr, nc = cfg.region_layout
    n_regions = nr * nc
    idx = (row // (cfg.rows // nr)) * nc + (col // (cfg.cols // nc))
    if n_regions == 1:
        center = 0.5
    else:
        center = idx / (n_regions - 1)
    half_width = 0.5 / max(n_regions - 1, 1)
    return float(np.clip(center + rng.uniform(-half_width, half_width), 0.0, 1.0))
