"""Dataset container, CSV ingestion, the Donut toy generator, splitting and region cuts."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DataError

MISSING_SENTINEL = -999.0
NORMALIZATIONS = ("none", "minmax", "zscore")
SPLIT_NAMES = ("train", "val", "test")

HIGGS_FEATURES = (
    "DER_mass_MMC", "DER_mass_transverse_met_lep", "DER_mass_vis", "DER_pt_h",
    "DER_deltaeta_jet_jet", "DER_mass_jet_jet", "DER_prodeta_jet_jet", "DER_deltar_tau_lep",
    "DER_pt_tot", "DER_sum_pt", "DER_pt_ratio_lep_tau", "DER_met_phi_centrality",
    "DER_lep_eta_centrality", "PRI_tau_pt", "PRI_tau_eta", "PRI_tau_phi", "PRI_lep_pt",
    "PRI_lep_eta", "PRI_lep_phi", "PRI_met", "PRI_met_phi", "PRI_met_sumet", "PRI_jet_num",
    "PRI_jet_leading_pt", "PRI_jet_leading_eta", "PRI_jet_leading_phi",
    "PRI_jet_subleading_pt", "PRI_jet_subleading_eta", "PRI_jet_subleading_phi",
    "PRI_jet_all_pt",
)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable feature matrix with binary labels and per-feature metadata.

    ``feature_bounds`` is a ``(d, 2)`` array of the (min, max) observed on the
    clean data after normalization. ``normalization`` records how raw values
    were mapped so that the transform can be reproduced.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    feature_bounds: np.ndarray | None = None
    split_tag: np.ndarray | None = None
    normalization: dict = field(default_factory=lambda: {"kind": "none"})
    seed: int | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"features must be a non-empty 2-D matrix, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            r, c = np.argwhere(~np.isfinite(X))[0]
            raise DataError(f"non-finite value at row {r}, column {c}")
        y = np.asarray(self.labels)
        if y.shape != (X.shape[0],):
            raise DataError(f"labels must have length {X.shape[0]}, got shape {y.shape}")
        if not np.all(np.isin(y, (0, 1))):
            raise DataError("labels must be binary {0, 1}")
        names = tuple(str(s) for s in self.feature_names)
        if len(names) != X.shape[1]:
            raise DataError(f"expected {X.shape[1]} feature names, got {len(names)}")
        if self.feature_bounds is None:
            bounds = np.column_stack([X.min(axis=0), X.max(axis=0)])
        else:
            bounds = np.asarray(self.feature_bounds, dtype=np.float64).reshape(X.shape[1], 2)
            if np.any(bounds[:, 0] > bounds[:, 1]):
                raise DataError("feature_bounds min exceeds max")
        tags = None
        if self.split_tag is not None:
            tags = np.asarray(self.split_tag, dtype=object).astype(str)
            if tags.shape != (X.shape[0],):
                raise DataError("split_tag must have one entry per row")
            bad = set(np.unique(tags)) - set(SPLIT_NAMES)
            if bad:
                raise DataError(f"unknown split tags {sorted(bad)}")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y.astype(np.int64)))
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "feature_bounds", _frozen(bounds))
        object.__setattr__(self, "split_tag", None if tags is None else _frozen(tags))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        """Row subset; keeps the parent's global feature bounds."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        if rows.size == 0:
            raise DataError("empty subset")
        return Dataset(
            self.features[rows],
            self.labels[rows],
            self.feature_names,
            self.feature_bounds,
            None if self.split_tag is None else self.split_tag[rows],
            dict(self.normalization),
            self.seed,
        )

    def split_subset(self, tag: str, label: int | None = None) -> "Dataset":
        if self.split_tag is None:
            raise DataError("dataset has no split tags")
        mask = self.split_tag == tag
        if label is not None:
            mask &= self.labels == label
        return self.subset(mask)

    def with_features(self, features: np.ndarray) -> "Dataset":
        """Same rows and metadata with a replaced feature matrix (e.g. adversarial)."""
        return Dataset(features, self.labels, self.feature_names, self.feature_bounds,
                       self.split_tag, dict(self.normalization), self.seed)

    def with_split(self, split_tag) -> "Dataset":
        return Dataset(self.features, self.labels, self.feature_names, self.feature_bounds,
                       split_tag, dict(self.normalization), self.seed)


@dataclass(frozen=True)
class RegionPartition:
    """Control/signal split from a single-feature cut.

    Control rows always satisfy ``sign * x[cut_feature] < cut_threshold``;
    ``negated`` records whether ``sign`` is -1.
    """

    cut_feature: int
    cut_threshold: float
    control_mask: np.ndarray
    signal_mask: np.ndarray
    negated: bool = False
    accuracy: float = float("nan")

    def oriented(self, X: np.ndarray) -> np.ndarray:
        col = np.asarray(X)[:, self.cut_feature]
        return -col if self.negated else col


@dataclass(frozen=True)
class DonutConfig:
    n_signal: int = 10_000
    n_background: int = 10_000
    sigma: float = 1.0
    r_ring: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_signal < 1 or self.n_background < 1:
            raise DataError("donut class counts must be >= 1")
        if not self.sigma > 0 or not self.r_ring > 0:
            raise DataError("sigma and r_ring must be > 0")


# ---------------------------------------------------------------------------
# normalization


def _fit_normalization(X: np.ndarray, kind: str) -> dict:
    if kind not in NORMALIZATIONS:
        raise DataError(f"unknown normalization {kind!r}; expected one of {NORMALIZATIONS}")
    if kind == "none":
        return {"kind": "none"}
    if kind == "minmax":
        lo, hi = X.min(axis=0), X.max(axis=0)
        return {"kind": "minmax", "offset": lo.tolist(), "scale": np.where(hi > lo, hi - lo, 1.0).tolist()}
    mu, sd = X.mean(axis=0), X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.ones(X.shape[1])
    return {"kind": "zscore", "offset": mu.tolist(), "scale": np.where(sd > 0, sd, 1.0).tolist()}


def apply_normalization(X: np.ndarray, record: dict) -> np.ndarray:
    if record.get("kind", "none") == "none":
        return np.asarray(X, dtype=np.float64)
    return (np.asarray(X, dtype=np.float64) - np.asarray(record["offset"])) / np.asarray(record["scale"])


def _impute_missing(X: np.ndarray, record: dict) -> np.ndarray:
    """Replace the -999.0 sentinel with the median of the defined values per column."""
    X = X.copy()
    medians = []
    for j in range(X.shape[1]):
        miss = X[:, j] == MISSING_SENTINEL
        defined = X[~miss, j]
        med = float(np.median(defined)) if defined.size else 0.0
        X[miss, j] = med
        medians.append(med if miss.any() else None)
    if any(m is not None for m in medians):
        record["imputed_medians"] = medians
    return X


# ---------------------------------------------------------------------------
# CSV I/O


def load_csv(path, label_column: str = "label", normalization: str = "minmax",
             drop_columns: Sequence[str] = (), binary_labels: bool = False) -> Dataset:
    """Read a headered CSV into a normalized :class:`Dataset`.

    The label column must hold exactly two distinct values; the
    lexicographically smaller one maps to 0. A ``split`` column, when
    present, is read as the split tag. Cells equal to -999.0 are treated as
    missing and replaced by the column median before normalization.
    With ``binary_labels`` the column must already hold 0/1 and may contain
    a single class.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not found")
    if len(rows) < 2:
        raise DataError(f"{path}: need at least 2 data rows, found {len(rows)}")
    skip = {label_column, "split", *drop_columns}
    feat_cols = [i for i, h in enumerate(header) if h not in skip]
    if not feat_cols:
        raise DataError(f"{path}: no feature columns")
    li = header.index(label_column)
    si = header.index("split") if "split" in header else None
    X = np.empty((len(rows), len(feat_cols)))
    raw_labels = []
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        for c, ci in enumerate(feat_cols):
            try:
                v = float(row[ci])
            except ValueError:
                raise DataError(f"{path}: non-numeric cell at row {r}, column {header[ci]!r}: {row[ci]!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: non-finite cell at row {r}, column {header[ci]!r}")
            X[r, c] = v
        raw_labels.append(row[li].strip())
    distinct = sorted(set(raw_labels))
    if binary_labels:
        if not set(distinct) <= {"0", "1"}:
            raise DataError(f"{path}: labels must be 0 or 1, found {distinct}")
        distinct = ["0", "1"]
    elif len(distinct) != 2:
        raise DataError(f"{path}: label column must hold exactly two distinct values, found {distinct}")
    y = np.array([distinct.index(v) for v in raw_labels])
    record: dict = {"kind": normalization, "label_values": distinct}
    X = _impute_missing(X, record)
    record.update(_fit_normalization(X, normalization))
    X = apply_normalization(X, record)
    tags = None if si is None else np.array([row[si].strip() for row in rows])
    return Dataset(X, y, [header[i] for i in feat_cols], None, tags, record)


def write_csv(ds: Dataset, path, label_column: str = "label") -> Path:
    """Write features, labels and split tags plus a JSON manifest next to the CSV.

    Floats are written with ``repr`` so :func:`read_dataset` reconstructs the
    matrix bit-exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = list(ds.feature_names) + [label_column]
        if ds.split_tag is not None:
            header.append("split")
        w.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.features[i]] + [str(int(ds.labels[i]))]
            if ds.split_tag is not None:
                row.append(ds.split_tag[i])
            w.writerow(row)
    manifest = {
        "csv": path.name,
        "label_column": label_column,
        "feature_names": list(ds.feature_names),
        "feature_bounds": ds.feature_bounds.tolist(),
        "normalization": ds.normalization,
        "seed": ds.seed,
        "n": ds.n,
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2))
    return path


def manifest_path(csv_path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".dataset.json")


def read_dataset(path) -> Dataset:
    """Inverse of :func:`write_csv`; uses the manifest when present."""
    path = Path(path)
    mpath = manifest_path(path)
    if not mpath.is_file():
        return load_csv(path, normalization="none")
    meta = json.loads(mpath.read_text())
    raw = load_csv(path, label_column=meta.get("label_column", "label"), normalization="none", binary_labels=True)
    return Dataset(raw.features, raw.labels, meta["feature_names"], meta["feature_bounds"],
                   raw.split_tag, meta.get("normalization", {"kind": "none"}), meta.get("seed"))


# ---------------------------------------------------------------------------
# synthetic data


def generate_donut(cfg: DonutConfig, normalization: str = "none") -> Dataset:
    """Gaussian blob signal (label 1) inside a noisy ring of background (label 0)."""
    rng = np.random.default_rng(cfg.seed)
    sig = rng.normal(0.0, cfg.sigma, size=(cfg.n_signal, 2))
    r = rng.normal(cfg.r_ring, cfg.sigma, size=cfg.n_background)
    theta = rng.uniform(0.0, 2 * np.pi, size=cfg.n_background)
    bkg = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    X = np.vstack([sig, bkg])
    y = np.concatenate([np.ones(cfg.n_signal, dtype=int), np.zeros(cfg.n_background, dtype=int)])
    record = _fit_normalization(X, normalization)
    X = apply_normalization(X, record)
    return Dataset(X, y, ("x1", "x2"), None, None, record, cfg.seed)


# ---------------------------------------------------------------------------
# splitting


def split(ds: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> Dataset:
    """Stratified train/val/test tagging, deterministic in ``seed``."""
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    tags = np.empty(ds.n, dtype=object)
    for label in (0, 1):
        idx = np.flatnonzero(ds.labels == label)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        counts = _largest_remainder(fr * idx.size)
        for name, frac, c in zip(SPLIT_NAMES, fr, counts):
            if frac > 0 and c < 1:
                raise DataError(f"class {label} has too few rows ({idx.size}) for a non-empty {name} split")
        bounds = np.cumsum(counts)[:-1]
        for name, part in zip(SPLIT_NAMES, np.split(idx, bounds)):
            tags[part] = name
    return ds.with_split(tags.astype(str))


def _largest_remainder(quotas: np.ndarray) -> np.ndarray:
    base = np.floor(quotas).astype(int)
    short = int(round(quotas.sum())) - base.sum()
    order = np.argsort(-(quotas - base), kind="stable")
    base[order[:short]] += 1
    return base


# ---------------------------------------------------------------------------
# single-cut region finder


def _best_cut_1d(x: np.ndarray, y: np.ndarray) -> tuple[float, float, bool]:
    """Best threshold on one feature: (accuracy, threshold, background_below)."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    uniq, first = np.unique(xs, return_index=True)
    if uniq.size < 2:
        n1 = ys.sum()
        return max(n1, ys.size - n1) / ys.size, float("nan"), True
    n = ys.size
    n1_tot = ys.sum()
    n0_tot = n - n1_tot
    # counts strictly below each midpoint between consecutive unique values
    below = first[1:]
    ones_cum = np.concatenate([[0], np.cumsum(ys)])
    n1_below = ones_cum[below]
    n0_below = below - n1_below
    # background below / signal above
    acc_bb = (n0_below + (n1_tot - n1_below)) / n
    # signal below / background above
    acc_sb = (n1_below + (n0_tot - n0_below)) / n
    acc = np.maximum(acc_bb, acc_sb)
    k = int(np.argmax(acc))  # first maximum = lowest threshold
    thr = 0.5 * (uniq[k] + uniq[k + 1])
    # control region = side with higher background purity
    nb, na = below[k], n - below[k]
    purity_below = n0_below[k] / nb
    purity_above = (n0_tot - n0_below[k]) / na
    return float(acc[k]), float(thr), bool(purity_below >= purity_above)


def find_best_single_cut(ds: Dataset) -> RegionPartition:
    """Exhaustive single-feature, single-threshold cut maximizing accuracy.

    Thresholds are midpoints between consecutive sorted unique values. Ties
    go to the lowest feature index, then the lowest threshold.
    """
    if np.unique(ds.labels).size < 2:
        raise DataError("single-cut search needs both classes present")
    best = None
    for j in range(ds.d):
        acc, thr, bkg_below = _best_cut_1d(ds.features[:, j], ds.labels)
        if math.isnan(thr):
            continue
        if best is None or acc > best[0]:
            best = (acc, j, thr, bkg_below)
    if best is None:
        raise DataError("every feature is constant; no cut exists")
    acc, j, thr, bkg_below = best
    col = ds.features[:, j]
    if bkg_below:
        control = col < thr
        return RegionPartition(j, thr, control, ~control, False, acc)
    control = -col < -thr
    return RegionPartition(j, -thr, control, ~control, True, acc)
