"""Gridded data model, manifest/CSV round-trip, normalization and the
vertical layer interpolation used to map 4-layer model output to a 0-5 cm
average.

A dataset is a rectangular grid of pixels sharing one daily date axis. Each
pixel carries dense forcing series, optional dense model-simulated moisture
(the "lsm" channel), static attributes, and a sparse target with an
observation mask. Datasets are immutable after load/generation by convention;
nothing here mutates a dataset in place.

On disk a dataset is a manifest JSON plus one CSV per pixel:

    manifest.json   {rows, cols, start_date, n_days, forcing_names[],
                     attribute_names[], pixels[]: {id, row, col, series_file,
                     attributes[], region}}
    <pixel>.csv     header: date,target[,lsm][,truth],<forcing columns>
                    an empty target cell means "unobserved"

Numbers are serialized with 17 significant digits so round-trips are
lossless. The optional dense ``truth`` column stores the clean series behind
a noisy synthetic target; real datasets simply omit it.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, NumericError, ValidationError

LAYER_BOUNDS_CM = ((0.0, 10.0), (10.0, 40.0), (40.0, 100.0), (100.0, 200.0))


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def parse_date(s: str) -> dt.date:
    try:
        return dt.date.fromisoformat(s)
    except ValueError as exc:
        raise DataError(f"bad ISO date {s!r}") from exc


@dataclass
class PixelSeries:
    """One grid cell: series data, static attributes and observation mask."""

    pixel_id: str
    row: int
    col: int
    forcing: np.ndarray            # (T, n_forcings)
    attributes: np.ndarray         # (n_attributes,)
    target: np.ndarray             # (T,), NaN where unobserved
    mask: np.ndarray               # (T,) bool
    lsm: np.ndarray | None = None  # (T,) dense model-simulated moisture
    truth: np.ndarray | None = None  # (T,) clean series behind a noisy target
    region: str | None = None

    def validate(self, n_days: int, n_forcings: int, n_attributes: int):
        if self.forcing.shape != (n_days, n_forcings):
            raise DataError(
                f"pixel {self.pixel_id}: forcing shape {self.forcing.shape}, "
                f"expected {(n_days, n_forcings)}")
        for name, arr in (("target", self.target), ("mask", self.mask)):
            if arr.shape != (n_days,):
                raise DataError(f"pixel {self.pixel_id}: {name} length "
                                f"{arr.shape[0]} != {n_days}")
        for name, arr in (("lsm", self.lsm), ("truth", self.truth)):
            if arr is not None and arr.shape != (n_days,):
                raise DataError(f"pixel {self.pixel_id}: {name} length "
                                f"{arr.shape[0]} != {n_days}")
        if self.attributes.shape != (n_attributes,):
            raise DataError(f"pixel {self.pixel_id}: {len(self.attributes)} "
                            f"attributes, expected {n_attributes}")
        if not np.all(np.isfinite(self.attributes)):
            raise DataError(f"pixel {self.pixel_id}: non-finite attribute")
        observed = self.target[self.mask]
        if observed.size and (np.any(observed < 0.0) or np.any(observed > 1.0)):
            raise DataError(
                f"pixel {self.pixel_id}: observed target outside [0, 1]")
        return self


@dataclass
class GridDataset:
    rows: int
    cols: int
    start_date: dt.date
    n_days: int
    forcing_names: list[str]
    attribute_names: list[str]
    pixels: list[PixelSeries] = field(default_factory=list)

    def validate(self):
        seen = set()
        for px in self.pixels:
            px.validate(self.n_days, len(self.forcing_names), len(self.attribute_names))
            if not (0 <= px.row < self.rows and 0 <= px.col < self.cols):
                raise DataError(f"pixel {px.pixel_id}: coordinates out of bounds")
            if (px.row, px.col) in seen:
                raise DataError(f"duplicate pixel coordinates ({px.row}, {px.col})")
            seen.add((px.row, px.col))
        return self

    def dates(self) -> list[dt.date]:
        return [self.start_date + dt.timedelta(days=i) for i in range(self.n_days)]

    def date_index(self, d: dt.date) -> int:
        idx = (d - self.start_date).days
        if not (0 <= idx < self.n_days):
            raise ValidationError(f"date {d.isoformat()} outside the dataset range")
        return idx

    def pixel_by_id(self, pixel_id: str) -> PixelSeries:
        for px in self.pixels:
            if px.pixel_id == pixel_id:
                return px
        raise ValidationError(f"no pixel with id {pixel_id!r}")

    @property
    def has_lsm(self) -> bool:
        return bool(self.pixels) and self.pixels[0].lsm is not None

    def region_labels(self) -> list[str]:
        return sorted({px.region for px in self.pixels if px.region is not None})


def save_dataset(dataset: GridDataset, out_dir: str):
    """Write manifest.json plus one CSV per pixel under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "rows": dataset.rows,
        "cols": dataset.cols,
        "start_date": dataset.start_date.isoformat(),
        "n_days": dataset.n_days,
        "forcing_names": dataset.forcing_names,
        "attribute_names": dataset.attribute_names,
        "pixels": [],
    }
    for px in dataset.pixels:
        series_file = f"{px.pixel_id}.csv"
        manifest["pixels"].append({
            "id": px.pixel_id, "row": px.row, "col": px.col,
            "series_file": series_file,
            "attributes": [float(a) for a in px.attributes],
            "region": px.region,
        })
        header = ["date", "target"]
        if px.lsm is not None:
            header.append("lsm")
        if px.truth is not None:
            header.append("truth")
        header.extend(dataset.forcing_names)
        path = os.path.join(out_dir, series_file)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t, day in enumerate(dataset.dates()):
                row = [day.isoformat(),
                       _fmt(px.target[t]) if px.mask[t] else ""]
                if px.lsm is not None:
                    row.append(_fmt(px.lsm[t]))
                if px.truth is not None:
                    row.append(_fmt(px.truth[t]))
                row.extend(_fmt(v) for v in px.forcing[t])
                writer.writerow(row)
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))


def _manifest_field(manifest: dict, key: str, kind, where: str):
    if key not in manifest:
        raise DataError(f"{where}: missing field {key!r}")
    value = manifest[key]
    if kind is int and (not isinstance(value, int) or isinstance(value, bool)):
        raise DataError(f"{where}: field {key!r} must be an integer")
    if kind is list and not isinstance(value, list):
        raise DataError(f"{where}: field {key!r} must be a list")
    if kind is str and not isinstance(value, str):
        raise DataError(f"{where}: field {key!r} must be a string")
    return value


def load_dataset(manifest_path: str) -> GridDataset:
    """Materialize a GridDataset from a manifest; malformed input raises
    DataError naming the first offending file/field/line."""
    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, "manifest.json")
    where = manifest_path
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"{where}: not found") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{where}: invalid JSON ({exc})") from exc

    rows = _manifest_field(manifest, "rows", int, where)
    cols = _manifest_field(manifest, "cols", int, where)
    n_days = _manifest_field(manifest, "n_days", int, where)
    start_date = parse_date(_manifest_field(manifest, "start_date", str, where))
    forcing_names = _manifest_field(manifest, "forcing_names", list, where)
    attribute_names = _manifest_field(manifest, "attribute_names", list, where)
    pixel_entries = _manifest_field(manifest, "pixels", list, where)

    base = os.path.dirname(manifest_path)
    pixels = []
    for k, entry in enumerate(pixel_entries):
        pwhere = f"{where}: pixels[{k}]"
        pid = str(_manifest_field(entry, "id", str, pwhere))
        series_file = _manifest_field(entry, "series_file", str, pwhere)
        path = os.path.join(base, series_file)
        if not os.path.exists(path):
            raise DataError(f"{pwhere}: series file {series_file} missing "
                            f"for pixel {pid}")
        px = _load_series(path, pid, entry, forcing_names, pwhere)
        pixels.append(px)

    ds = GridDataset(rows=rows, cols=cols, start_date=start_date, n_days=n_days,
                     forcing_names=list(forcing_names),
                     attribute_names=list(attribute_names), pixels=pixels)
    return ds.validate()


def _load_series(path: str, pid: str, entry: dict, forcing_names: list[str],
                 pwhere: str) -> PixelSeries:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header[:2] != ["date", "target"]:
            raise DataError(f"{path}: header must start with date,target")
        optional = []
        idx = 2
        for name in ("lsm", "truth"):
            if idx < len(header) and header[idx] == name:
                optional.append(name)
                idx += 1
        if header[idx:] != list(forcing_names):
            raise DataError(f"{path}: forcing columns {header[idx:]} do not "
                            f"match manifest order {list(forcing_names)}")
        n_forc = len(forcing_names)
        targets, mask, forcing = [], [], []
        lsm = [] if "lsm" in optional else None
        truth = [] if "truth" in optional else None
        for ln, row in enumerate(reader, start=2):
            if len(row) != idx + n_forc:
                raise DataError(f"{path}:{ln}: expected {idx + n_forc} columns, "
                                f"got {len(row)}")
            parse_date(row[0])
            cell = row[1].strip()
            if cell == "":
                targets.append(np.nan)
                mask.append(False)
            else:
                targets.append(_parse_float(cell, path, ln))
                mask.append(True)
            col = 2
            if lsm is not None:
                lsm.append(_parse_float(row[col], path, ln))
                col += 1
            if truth is not None:
                truth.append(_parse_float(row[col], path, ln))
                col += 1
            forcing.append([_parse_float(v, path, ln) for v in row[col:]])
    return PixelSeries(
        pixel_id=pid,
        row=_manifest_field(entry, "row", int, pwhere),
        col=_manifest_field(entry, "col", int, pwhere),
        forcing=np.asarray(forcing, dtype=float),
        attributes=np.asarray(entry.get("attributes", []), dtype=float),
        target=np.asarray(targets, dtype=float),
        mask=np.asarray(mask, dtype=bool),
        lsm=None if lsm is None else np.asarray(lsm, dtype=float),
        truth=None if truth is None else np.asarray(truth, dtype=float),
        region=entry.get("region"),
    )


def _parse_float(cell: str, path: str, ln: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"{path}:{ln}: non-numeric value {cell!r}") from None


@dataclass
class NormalizationStats:
    """Per-channel z-score statistics computed on the training pixels only.

    ``std`` holds the divisors actually used; zero-variance channels keep a
    divisor of 1 and are listed in ``excluded``.
    """

    names: list[str]
    mean: np.ndarray
    std: np.ndarray
    excluded: list[str]

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": [float(v) for v in self.mean],
                "std": [float(v) for v in self.std], "excluded": list(self.excluded)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(names=list(d["names"]), mean=np.asarray(d["mean"], dtype=float),
                   std=np.asarray(d["std"], dtype=float), excluded=list(d["excluded"]))


def normalize(dataset: GridDataset, train_pixel_ids) -> tuple[GridDataset, NormalizationStats]:
    """Z-score every forcing channel, the lsm channel and every attribute
    using statistics from the training pixels only. The target (and truth)
    stay in physical units.
    """
    train_ids = list(train_pixel_ids)
    if not train_ids:
        raise ValidationError("training pixel set is empty")
    id_set = set(train_ids)
    train_px = [px for px in dataset.pixels if px.pixel_id in id_set]
    if len(train_px) != len(id_set):
        missing = id_set - {px.pixel_id for px in train_px}
        raise ValidationError(f"unknown training pixels: {sorted(missing)}")

    names = list(dataset.forcing_names)
    series_stack = np.concatenate([px.forcing for px in train_px], axis=0)
    columns = [series_stack[:, j] for j in range(series_stack.shape[1])]
    if dataset.has_lsm:
        names.append("lsm")
        columns.append(np.concatenate([px.lsm for px in train_px]))
    names.extend(dataset.attribute_names)
    attr_stack = np.vstack([px.attributes for px in train_px])
    columns.extend(attr_stack[:, j] for j in range(attr_stack.shape[1]))

    mean = np.array([c.mean() for c in columns])
    raw_std = np.array([c.std() for c in columns])
    excluded = [names[j] for j in range(len(names)) if raw_std[j] == 0.0]
    std = np.where(raw_std == 0.0, 1.0, raw_std)
    stats = NormalizationStats(names=names, mean=mean, std=std, excluded=excluded)

    nf = len(dataset.forcing_names)
    has_lsm = dataset.has_lsm
    new_pixels = []
    for px in dataset.pixels:
        forcing = (px.forcing - mean[:nf]) / std[:nf]
        k = nf
        lsm = px.lsm
        if has_lsm:
            lsm = (px.lsm - mean[k]) / std[k]
            k += 1
        attrs = (px.attributes - mean[k:]) / std[k:]
        new_pixels.append(replace(px, forcing=forcing, lsm=lsm, attributes=attrs))
    out = replace(dataset, pixels=new_pixels)
    return out, stats


def apply_normalization(dataset: GridDataset, stats: NormalizationStats) -> GridDataset:
    """Apply previously computed statistics to a raw dataset (inference path)."""
    nf = len(dataset.forcing_names)
    expect = list(dataset.forcing_names) + (["lsm"] if dataset.has_lsm else []) \
        + list(dataset.attribute_names)
    if expect != stats.names:
        raise ValidationError(
            f"stats channels {stats.names} do not match dataset channels {expect}")
    new_pixels = []
    for px in dataset.pixels:
        forcing = (px.forcing - stats.mean[:nf]) / stats.std[:nf]
        k = nf
        lsm = px.lsm
        if dataset.has_lsm:
            lsm = (px.lsm - stats.mean[k]) / stats.std[k]
            k += 1
        attrs = (px.attributes - stats.mean[k:]) / stats.std[k:]
        new_pixels.append(replace(px, forcing=forcing, lsm=lsm, attributes=attrs))
    return replace(dataset, pixels=new_pixels)


def build_features(dataset: GridDataset, include_lsm: bool = True,
                   include_attributes: bool = True):
    """Assemble the per-pixel input matrices the models consume.

    Returns (feature_names, {pixel_id: (T, n_features) array}); attribute
    values are broadcast along the time axis.
    """
    names = list(dataset.forcing_names)
    if include_lsm:
        if not dataset.has_lsm:
            raise ValidationError("dataset has no lsm channel")
        names.append("lsm")
    if include_attributes:
        names.extend(dataset.attribute_names)
    features = {}
    for px in dataset.pixels:
        parts = [px.forcing]
        if include_lsm:
            parts.append(px.lsm[:, None])
        if include_attributes and len(dataset.attribute_names):
            parts.append(np.tile(px.attributes, (dataset.n_days, 1)))
        features[px.pixel_id] = np.concatenate(parts, axis=1)
    return names, features


def vertical_interpolate(layer_means, method: str, target_cm: tuple[float, float] = (0.0, 5.0)) -> float:
    """Estimate the 0-5 cm average from four layer means (0-10, 10-40,
    40-100, 100-200 cm).

    "direct" returns the top-layer mean; "linear" averages, over the target
    window, the line through the centers of layers 1-2; "integral" builds the
    quadratic whose layer integrals match the top three layer means exactly
    and averages it over the target window.
    """
    vals = np.asarray(layer_means, dtype=float)
    if vals.shape != (4,):
        raise ValidationError(f"expected 4 layer means, got shape {vals.shape}")
    if not np.all(np.isfinite(vals)):
        raise NumericError("non-finite layer mean")
    z_lo, z_hi = target_cm
    if method == "direct":
        return float(vals[0])
    if method == "linear":
        c1 = 0.5 * (LAYER_BOUNDS_CM[0][0] + LAYER_BOUNDS_CM[0][1])
        c2 = 0.5 * (LAYER_BOUNDS_CM[1][0] + LAYER_BOUNDS_CM[1][1])
        slope = (vals[1] - vals[0]) / (c2 - c1)
        z_mid = 0.5 * (z_lo + z_hi)  # averaging a line = evaluating at midpoint
        return float(vals[0] + slope * (z_mid - c1))
    if method == "integral":
        # quadratic theta(z) = a + b z + c z^2 whose mean over each of the top
        # three layers equals that layer's value
        A = []
        for (a, b) in LAYER_BOUNDS_CM[:3]:
            A.append([1.0, 0.5 * (a + b), (a * a + a * b + b * b) / 3.0])
        coef = np.linalg.solve(np.asarray(A), vals[:3])
        mean_z = 0.5 * (z_lo + z_hi)
        mean_z2 = (z_lo * z_lo + z_lo * z_hi + z_hi * z_hi) / 3.0
        return float(coef[0] + coef[1] * mean_z + coef[2] * mean_z2)
    raise ValidationError(f"unknown interpolation method {method!r}")
