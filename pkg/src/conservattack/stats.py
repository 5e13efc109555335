"""Statistics used to constrain and evaluate the attack.

Marginals are compared with the Jensen-Shannon distance between binned
histograms, correlations with the relative Frobenius drift of the
correlation matrix. Both have exact single-cell update forms here, which is
what keeps per-candidate scoring cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .exceptions import DataError, NumericError

_VAR_EPS = 1e-18


# ---------------------------------------------------------------------------
# scalar metrics


def _xlog2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a * log2(a / b) with the 0 * log 0 = 0 convention."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = a * np.log2(a / b)
    return np.where(a > 0, r, 0.0)


def _jsd_terms(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-bin summands of 2 * JS divergence (base 2)."""
    # a * log2(2a / (a + b)) rather than a * log2(a / m); m = (a + b) / 2 can underflow to 0
    s = np.asarray(p, dtype=np.float64) + q
    return _xlog2(2 * p, s) / 2 + _xlog2(2 * q, s) / 2


def jsd(p, q) -> float:
    """Jensen-Shannon distance (square root of the divergence, base-2 logs)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise DataError(f"jsd needs two 1-D distributions of equal length, got {p.shape} and {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise DataError("jsd: negative probability")
    if abs(p.sum() - 1) > 1e-9 or abs(q.sum() - 1) > 1e-9:
        raise DataError("jsd: distributions must sum to 1")
    return math.sqrt(max(0.5 * float(_jsd_terms(p, q).sum()), 0.0))


def delta_fn(c_clean, c_adv) -> float:
    """Relative Frobenius-norm drift ``||c_adv - c_clean|| / ||c_clean||``."""
    c_clean = np.asarray(c_clean, dtype=np.float64)
    c_adv = np.asarray(c_adv, dtype=np.float64)
    if c_clean.shape != c_adv.shape or c_clean.ndim != 2:
        raise DataError(f"delta_fn: shape mismatch {c_clean.shape} vs {c_adv.shape}")
    denom = np.linalg.norm(c_clean, "fro")
    if denom == 0:
        raise DataError("delta_fn: clean matrix has zero Frobenius norm")
    return float(np.linalg.norm(c_adv - c_clean, "fro") / denom)


def fooling_ratio(pred_clean, pred_adv) -> float:
    pred_clean = np.asarray(pred_clean)
    pred_adv = np.asarray(pred_adv)
    if pred_clean.shape != pred_adv.shape:
        raise DataError("fooling_ratio: length mismatch")
    if pred_clean.size == 0:
        raise DataError("fooling_ratio: empty input")
    return float(np.mean(pred_clean != pred_adv))


def auroc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) area under the ROC curve; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DataError("auroc: length mismatch")
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise DataError("auroc needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


# ---------------------------------------------------------------------------
# distance correlation


def _centered_distances(x: np.ndarray) -> np.ndarray:
    a = np.abs(x[:, None] - x[None, :])
    row = a.mean(axis=1)
    return a - row[:, None] - row[None, :] + row.mean()


def distance_correlation(x, y) -> float:
    """Sample distance correlation of two 1-D samples, in [0, 1].

    Returns the square root of ``dCov^2 / sqrt(dVar_x^2 * dVar_y^2)``, with
    every term the mean of an elementwise product of double-centered
    distance matrices; 0 when either variable is constant.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DataError("distance_correlation: length mismatch")
    if x.size < 2:
        raise DataError("distance_correlation needs n >= 2")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataError("distance_correlation: non-finite input")
    A = _centered_distances(x)
    B = A if y is x or np.array_equal(x, y) else _centered_distances(y)
    vx = float(np.mean(A * A))
    vy = float(np.mean(B * B))
    if vx <= 0 or vy <= 0:
        return 0.0
    cov = float(np.mean(A * B))
    return _dcor_from_moments(cov, vx, vy)


def _dcor_from_moments(cov, vx, vy):
    r2 = np.maximum(cov, 0.0) / np.sqrt(vx * vy)
    return float(np.sqrt(np.minimum(r2, 1.0))) if np.ndim(r2) == 0 else np.sqrt(np.minimum(r2, 1.0))


def subsample_rows(n: int, cap: int, seed: int) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=cap, replace=False))


def dcor_matrix(features, subsample_cap: int = 2000, seed: int = 0) -> np.ndarray:
    """Pairwise distance-correlation matrix over a seeded row subsample."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("dcor_matrix needs an n x d matrix with n >= 2")
    Xs = X[subsample_rows(X.shape[0], subsample_cap, seed)]
    d = X.shape[1]
    cent = [_centered_distances(Xs[:, j]) for j in range(d)]
    var = np.array([np.mean(c * c) for c in cent])
    out = np.eye(d)
    for j in range(d):
        if var[j] <= 0:
            continue
        for k in range(j + 1, d):
            if var[k] <= 0:
                continue
            out[j, k] = out[k, j] = _dcor_from_moments(float(np.mean(cent[j] * cent[k])), var[j], var[k])
    return out


# ---------------------------------------------------------------------------
# histograms


@dataclass
class FeatureHistogram:
    """Per-feature equal-width histograms with integer counts.

    Values outside ``[lo, hi]`` land in the edge bins. Normalized counts are
    ``counts / n``; keeping integer counts makes the incremental update equal
    to a full recount bit for bit.
    """

    num_bins: int
    lo: np.ndarray
    hi: np.ndarray
    counts: np.ndarray
    n: int

    @classmethod
    def from_matrix(cls, X, num_bins: int, bounds=None) -> "FeatureHistogram":
        X = np.asarray(X, dtype=np.float64)
        if num_bins < 1:
            raise DataError("num_bins must be >= 1")
        if bounds is None:
            bounds = np.column_stack([X.min(axis=0), X.max(axis=0)])
        bounds = np.asarray(bounds, dtype=np.float64)
        h = cls(int(num_bins), bounds[:, 0].copy(), bounds[:, 1].copy(),
                np.zeros((X.shape[1], num_bins), dtype=np.int64), X.shape[0])
        h.recount(X)
        return h

    def recount(self, X) -> None:
        X = np.asarray(X, dtype=np.float64)
        self.n = X.shape[0]
        self.counts[:] = 0
        for j in range(X.shape[1]):
            self.counts[j] = np.bincount(self.bin_index(j, X[:, j]), minlength=self.num_bins)

    @property
    def d(self) -> int:
        return self.counts.shape[0]

    def bin_index(self, feature: int, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        width = self.hi[feature] - self.lo[feature]
        if width <= 0:
            return np.zeros(values.shape, dtype=np.int64)
        k = np.floor((values - self.lo[feature]) * (self.num_bins / width))
        return np.clip(k, 0, self.num_bins - 1).astype(np.int64)

    def bin_index_many(self, features, values) -> np.ndarray:
        """``bin_index`` with a (possibly different) feature per value."""
        features = np.asarray(features, dtype=np.intp)
        values = np.asarray(values, dtype=np.float64)
        lo = self.lo[features]
        width = self.hi[features] - lo
        safe = np.where(width > 0, width, 1.0)
        k = np.floor((values - lo) * (self.num_bins / safe))
        k = np.where(width > 0, k, 0.0)
        return np.clip(k, 0, self.num_bins - 1).astype(np.int64)

    @property
    def normalized(self) -> np.ndarray:
        return self.counts / float(self.n)

    def apply_cell_change(self, feature: int, old_value: float, new_value: float) -> "FeatureHistogram":
        if self.n == 0:
            raise DataError("histogram over zero events")
        k_old = int(self.bin_index(feature, old_value))
        k_new = int(self.bin_index(feature, new_value))
        if k_old != k_new:
            self.counts[feature, k_old] -= 1
            self.counts[feature, k_new] += 1
        return self

    def edges(self, feature: int) -> np.ndarray:
        return np.linspace(self.lo[feature], self.hi[feature], self.num_bins + 1)

    def copy(self) -> "FeatureHistogram":
        return FeatureHistogram(self.num_bins, self.lo.copy(), self.hi.copy(), self.counts.copy(), self.n)


def per_feature_jsd(clean: FeatureHistogram, adv: FeatureHistogram) -> np.ndarray:
    p, q = clean.normalized, adv.normalized
    return np.sqrt(np.maximum(0.5 * _jsd_terms(p, q).sum(axis=1), 0.0))


# ---------------------------------------------------------------------------
# Pearson correlation with exact single-cell updates


@dataclass
class CorrelationState:
    """Means, covariance (n-1 denominator) and correlation of an n x d matrix.

    Zero-variance features get an identity row/column in ``corr`` and are
    listed in ``degenerate``.
    """

    n: int
    mean: np.ndarray
    cov: np.ndarray
    corr: np.ndarray = field(init=False)

    def __post_init__(self):
        self.corr = self._corr_from_cov(self.cov)

    @classmethod
    def from_matrix(cls, X) -> "CorrelationState":
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        if n < 2:
            raise DataError("correlation needs n >= 2")
        mean = X.mean(axis=0)
        dev = X - mean
        return cls(n, mean, dev.T @ dev / (n - 1))

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()

    @property
    def degenerate(self) -> np.ndarray:
        return np.flatnonzero(np.diag(self.cov) <= _VAR_EPS)

    @staticmethod
    def _corr_from_cov(cov: np.ndarray) -> np.ndarray:
        var = np.diag(cov)
        ok = var > _VAR_EPS
        sd = np.sqrt(np.where(ok, var, 1.0))
        corr = cov / sd[:, None] / sd[None, :]
        corr[~ok, :] = 0.0
        corr[:, ~ok] = 0.0
        np.fill_diagonal(corr, 1.0)
        return corr

    def _row_update(self, row_values, j, new_values):
        """New covariance row for each candidate; ``j`` is one feature or one per candidate."""
        n = self.n
        row_values = np.asarray(row_values, dtype=np.float64)
        new_values = np.atleast_1d(np.asarray(new_values, dtype=np.float64))
        j = np.broadcast_to(np.asarray(j, dtype=np.intp), new_values.shape)
        old = row_values[j]
        mean_j = self.mean[j]
        step = new_values - old
        mu_new = mean_j + step / n
        dev_old = old - mean_j
        dev_new = new_values - mu_new
        # the exact update: the textbook delta form rescaled by n / (n - 1)
        scale = n / float((n - 1) ** 2)
        var_new = self.cov[j, j] + (dev_new ** 2 - dev_old ** 2) * scale
        dev_k = row_values - self.mean
        cov_row = self.cov[j] + ((dev_new - dev_old)[:, None] * dev_k[None, :]) * scale
        cov_row[np.arange(j.size), j] = var_new
        return mu_new, var_new, cov_row

    def candidate_corr_rows(self, row_values, j, new_values) -> np.ndarray:
        """Correlation row ``j`` after replacing ``row_values[j]`` by each candidate.

        ``j`` may also be an array giving the edited feature per candidate.
        """
        _, var_new, cov_row = self._row_update(row_values, j, new_values)
        j = np.broadcast_to(np.asarray(j, dtype=np.intp), var_new.shape)
        var = np.diag(self.cov)
        ok_k = var > _VAR_EPS
        ok_j = var_new > _VAR_EPS
        sd_k = np.sqrt(np.where(ok_k, var, 1.0))
        sd_j = np.sqrt(np.where(ok_j, var_new, 1.0))
        rho = cov_row / sd_j[:, None] / sd_k[None, :]
        rho[:, ~ok_k] = 0.0
        rho[~ok_j, :] = 0.0
        rho[np.arange(j.size), j] = 1.0
        return rho

    def apply_cell_change(self, row_values, j: int, new_value: float) -> "CorrelationState":
        if self.n < 2:
            raise DataError("correlation update needs n >= 2")
        mu_new, var_new, cov_row = self._row_update(row_values, j, new_value)
        v = float(var_new[0])
        if v < -1e-9 * max(1.0, abs(self.cov[j, j])):
            raise NumericError(f"incremental variance of feature {j} went negative ({v})")
        cov_row = cov_row[0]
        cov_row[j] = max(v, 0.0)
        self.mean[j] = mu_new[0]
        self.cov[j, :] = cov_row
        self.cov[:, j] = cov_row
        rho = self.candidate_corr_rows_from_cov(cov_row, j)
        self.corr[j, :] = rho
        self.corr[:, j] = rho
        return self

    def candidate_corr_rows_from_cov(self, cov_row, j):
        var = np.diag(self.cov)
        ok = var > _VAR_EPS
        sd = np.sqrt(np.where(ok, var, 1.0))
        rho = cov_row / sd[j] / sd
        if not ok[j]:
            rho = np.zeros_like(rho)
        rho[~ok] = 0.0
        rho[j] = 1.0
        return rho

    def copy(self) -> "CorrelationState":
        return CorrelationState(self.n, self.mean.copy(), self.cov.copy())


# ---------------------------------------------------------------------------
# distance correlation with exact single-cell updates on a fixed subsample


class DistanceCorrelationState:
    """Pairwise distance-correlation matrix over a fixed row subsample.

    Uses the identity ``m^2 dCov^2(A, B) = sum(A*B) - 2m <r_A, r_B> + m^2 g_A g_B``
    (``r`` row means and ``g`` grand mean of the raw distance matrices), so
    replacing one cell only touches one row of one distance matrix and every
    pair involving that feature can be refreshed in O(m).
    """

    def __init__(self, X, subsample_cap: int = 2000, seed: int = 0):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] < 2:
            raise DataError("distance correlation needs n >= 2")
        self.n, self.d = X.shape
        self.rows = subsample_rows(self.n, subsample_cap, seed)
        self.position = np.full(self.n, -1, dtype=np.int64)
        self.position[self.rows] = np.arange(self.rows.size)
        self.subsample_cap = subsample_cap
        self.seed = seed
        self._build(X[self.rows])

    @property
    def m(self) -> int:
        return self.rows.size

    def _build(self, Xs: np.ndarray) -> None:
        self.values = Xs.copy()
        m, d = Xs.shape
        self.row_means = np.empty((d, m))
        self.sum_prod = np.empty((d, d))
        dists = [np.abs(Xs[:, j][:, None] - Xs[:, j][None, :]) for j in range(d)]
        for j in range(d):
            self.row_means[j] = dists[j].mean(axis=1)
            for k in range(j, d):
                self.sum_prod[j, k] = self.sum_prod[k, j] = float(np.sum(dists[j] * dists[k]))
        self.grand = self.row_means.mean(axis=1)
        self.mean_prod = self.row_means @ self.row_means.T
        self._refresh_matrix()

    def _dcov2(self, P, Q, gj, gk):
        m = float(self.m)
        return P / m ** 2 - 2.0 * Q / m + gj * gk

    def _refresh_matrix(self) -> None:
        dc = self._dcov2(self.sum_prod, self.mean_prod, self.grand[:, None], self.grand[None, :])
        var = np.diag(dc).copy()
        self.corr = self._normalize(dc, var[:, None], var[None, :])
        np.fill_diagonal(self.corr, 1.0)

    @staticmethod
    def _normalize(dc, vj, vk):
        ok = (vj > _VAR_EPS) & (vk > _VAR_EPS)
        denom = np.sqrt(np.where(ok, vj * vk, 1.0))
        r2 = np.clip(dc / denom, 0.0, 1.0)
        return np.where(ok, np.sqrt(r2), 0.0)

    def _candidate_terms(self, pos: int, j: int, new_values):
        col = self.values[:, j]
        new_values = np.atleast_1d(np.asarray(new_values, dtype=np.float64))
        a_old = np.abs(col[pos] - col)
        a_new = np.abs(new_values[:, None] - col[None, :])
        a_new[:, pos] = 0.0
        delta = a_new - a_old[None, :]
        m = float(self.m)
        dsum = delta.sum(axis=1)
        r_new = self.row_means[j][None, :] + delta / m
        r_new[:, pos] += dsum / m
        g_new = self.grand[j] + 2.0 * dsum / m ** 2
        other = np.abs(self.values[pos][:, None] - self.values.T)  # d x m, row pos of every distance matrix
        P_row = self.sum_prod[j][None, :] + 2.0 * delta @ other.T
        P_row[:, j] = self.sum_prod[j, j] + 2.0 * np.sum(a_new ** 2 - a_old[None, :] ** 2, axis=1)
        Q_row = self.mean_prod[j][None, :] + (delta @ self.row_means.T) / m + (dsum / m)[:, None] * self.row_means[:, pos][None, :]
        Q_row[:, j] = np.sum(r_new ** 2, axis=1)
        return r_new, g_new, P_row, Q_row

    def candidate_corr_rows(self, row_index: int, j: int, new_values) -> np.ndarray:
        new_values = np.atleast_1d(np.asarray(new_values, dtype=np.float64))
        pos = int(self.position[row_index])
        if pos < 0:
            return np.repeat(self.corr[j][None, :], new_values.size, axis=0)
        r_new, g_new, P_row, Q_row = self._candidate_terms(pos, j, new_values)
        g = np.repeat(self.grand[None, :], new_values.size, axis=0)
        g[:, j] = g_new
        dc = self._dcov2(P_row, Q_row, g_new[:, None], g)
        var_k = np.diag(self._dcov2(self.sum_prod, self.mean_prod, self.grand, self.grand)).copy()
        var_j = dc[:, j]
        vk = np.repeat(var_k[None, :], new_values.size, axis=0)
        vk[:, j] = var_j
        rho = self._normalize(dc, var_j[:, None], vk)
        rho[:, j] = 1.0
        return rho

    def apply_cell_change(self, row_index: int, j: int, new_value: float) -> "DistanceCorrelationState":
        pos = int(self.position[row_index])
        if pos < 0:
            return self
        r_new, g_new, P_row, Q_row = self._candidate_terms(pos, j, new_value)
        self.row_means[j] = r_new[0]
        self.grand[j] = g_new[0]
        self.sum_prod[j, :] = P_row[0]
        self.sum_prod[:, j] = P_row[0]
        self.mean_prod[j, :] = Q_row[0]
        self.mean_prod[:, j] = Q_row[0]
        self.values[pos, j] = new_value
        self._refresh_matrix()
        return self

    def rebuild(self, X) -> None:
        self._build(np.asarray(X, dtype=np.float64)[self.rows])


# ---------------------------------------------------------------------------
# composite snapshot


@dataclass
class StatsSnapshot:
    """Histograms plus a correlation description of one matrix."""

    histograms: FeatureHistogram
    correlation: CorrelationState | DistanceCorrelationState
    mode: str = "pearson"

    @classmethod
    def from_matrix(cls, X, num_bins: int, bounds=None, mode: str = "pearson",
                    subsample_cap: int = 2000, seed: int = 0) -> "StatsSnapshot":
        X = np.asarray(X, dtype=np.float64)
        hist = FeatureHistogram.from_matrix(X, num_bins, bounds)
        if mode == "pearson":
            corr = CorrelationState.from_matrix(X)
        elif mode == "distance_correlation":
            corr = DistanceCorrelationState(X, subsample_cap, seed)
        else:
            raise DataError(f"unknown correlation mode {mode!r}")
        return cls(hist, corr, mode)

    @property
    def correlation_matrix(self) -> np.ndarray:
        return self.correlation.corr

    def apply_cell_change(self, row_index: int, row_values, feature: int, new_value: float) -> None:
        """Replace ``X[row_index, feature]``; ``row_values`` is the row *before* the edit."""
        old = float(row_values[feature])
        self.histograms.apply_cell_change(feature, old, new_value)
        if self.mode == "pearson":
            self.correlation.apply_cell_change(row_values, feature, new_value)
        else:
            self.correlation.apply_cell_change(row_index, feature, new_value)

    def audit(self, X) -> dict:
        """Compare the incremental state with a from-scratch rebuild on ``X``."""
        X = np.asarray(X, dtype=np.float64)
        fresh = StatsSnapshot.from_matrix(
            X, self.histograms.num_bins, np.column_stack([self.histograms.lo, self.histograms.hi]),
            self.mode,
            getattr(self.correlation, "subsample_cap", 2000), getattr(self.correlation, "seed", 0))
        return {
            "histogram_max_abs": float(np.max(np.abs(fresh.histograms.normalized - self.histograms.normalized))),
            "correlation_max_abs": float(np.max(np.abs(fresh.correlation_matrix - self.correlation_matrix))),
        }

    def rebuild(self, X) -> None:
        X = np.asarray(X, dtype=np.float64)
        self.histograms.recount(X)
        if self.mode == "pearson":
            self.correlation = CorrelationState.from_matrix(X)
        else:
            self.correlation.rebuild(X)

    def to_json(self, feature_names=None) -> dict:
        h = self.histograms
        names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(h.d)]
        return {
            "mode": self.mode,
            "n": h.n,
            "num_bins": h.num_bins,
            "histograms": [
                {"feature": names[j], "edges": h.edges(j).tolist(), "counts": h.counts[j].tolist()}
                for j in range(h.d)
            ],
            "correlation": self.correlation_matrix.tolist(),
        }
