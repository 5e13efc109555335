"""Statistics-preserving adversarial search over tabular inputs.

Each iteration visits every active row, takes the sign of the input
gradient of the loss, enumerates candidate values per feature in that
direction, and applies the single (feature, value) pair with the lowest
weighted marginal/correlation drift. Drift is tracked incrementally so
that scoring a candidate never rescans the dataset.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import stats
from .data import Dataset
from .exceptions import ConfigError, DataError, NumericError
from .nn import MlpModel, predict

log = logging.getLogger(__name__)

MAX_STEP_CANDIDATES = 512
AUDIT_EVERY = 100_000
AUDIT_TOL = 1e-6


@dataclass
class AttackConfig:
    """Attack hyperparameters; field names follow the published parameter table."""

    min_change: float
    step: float | None = None
    num_candidates: int | None = None
    n_iterations: int = 10
    num_bins: int = 100
    alpha: float = 1.0
    beta: float = 1.0
    max_jsd_single_change: float = math.inf
    max_frob_single_change: float = math.inf
    use_no_change: bool = True
    optimize_already_fooled: bool = False
    use_disco: bool = False
    n_gpus: int = 1
    seed: int = 0
    disco_subsample_cap: int = 2000

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if not (isinstance(self.min_change, (int, float)) and self.min_change > 0):
            out.append(f"min_change must be > 0 (got {self.min_change!r})")
        if self.num_candidates is None:
            if self.step is None:
                out.append("one of step or num_candidates is required")
            elif not self.step > 0:
                out.append(f"step must be > 0 (got {self.step!r})")
        elif not (isinstance(self.num_candidates, int) and self.num_candidates >= 1):
            out.append(f"num_candidates must be an integer ≥ 1 (got {self.num_candidates!r})")
        if not (isinstance(self.n_iterations, int) and self.n_iterations >= 0):
            out.append(f"n_iterations must be an integer ≥ 0 (got {self.n_iterations!r})")
        if not (isinstance(self.num_bins, int) and self.num_bins >= 1):
            out.append(f"num_bins must be an integer ≥ 1 (got {self.num_bins!r})")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v >= 0):
                out.append(f"{name} must be ≥ 0 (got {v!r})")
        if not out and self.alpha + self.beta <= 0:
            out.append("alpha + beta must be > 0")
        for name in ("max_jsd_single_change", "max_frob_single_change"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v >= 0):
                out.append(f"{name} must be ≥ 0 (got {v!r})")
        if not (isinstance(self.n_gpus, int) and self.n_gpus >= 1):
            out.append(f"n_gpus must be an integer ≥ 1 (got {self.n_gpus!r})")
        if not (isinstance(self.disco_subsample_cap, int) and self.disco_subsample_cap >= 2):
            out.append("disco_subsample_cap must be an integer ≥ 2")
        for name in ("use_no_change", "optimize_already_fooled", "use_disco"):
            v = getattr(self, name)
            if not isinstance(v, bool):
                out.append(f"{name} must be true or false (got {v!r})")
        return out

    @property
    def parallelism(self) -> int:
        return self.n_gpus

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown attack parameter(s): {', '.join(unknown)}")
        return cls(**_with_unbounded(d))

    @classmethod
    def check(cls, d: dict) -> list[str]:
        """Violations for a raw mapping without raising; empty means valid."""
        known = {f.name: f for f in fields(cls)}
        out = [f"unknown key {k!r}" for k in sorted(set(d) - set(known))]
        if "min_change" not in d:
            out.append("missing required key 'min_change'")
            return out
        obj = cls.__new__(cls)
        for name, f in known.items():
            setattr(obj, name, f.default)
        for k, v in _with_unbounded(d).items():
            if k in known:
                setattr(obj, k, v)
        try:
            return out + obj.violations()
        except TypeError as exc:
            return out + [f"malformed value: {exc}"]

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("max_jsd_single_change", "max_frob_single_change"):
            if math.isinf(out[k]):
                out[k] = None
        return out


def _with_unbounded(d: dict) -> dict:
    """JSON null for a single-change threshold means no limit."""
    d = dict(d)
    for k in ("max_jsd_single_change", "max_frob_single_change"):
        if k in d and d[k] is None:
            d[k] = math.inf
    return d


def _preset(**kw):
    base = dict(n_iterations=10, use_no_change=True, optimize_already_fooled=False, use_disco=False)
    base.update(kw)
    return base


PRESETS = {
    "higgs": _preset(min_change=0.0005, step=0.0005, num_bins=200, alpha=4.0, beta=1.0,
                     max_jsd_single_change=0.006, max_frob_single_change=0.0002),
    "higgs_augment": _preset(min_change=0.002, step=0.006, num_bins=200, alpha=6.5, beta=1.0,
                             max_jsd_single_change=0.01, max_frob_single_change=0.001),
    "higgs_detector": _preset(min_change=0.003, step=0.02, num_bins=100, alpha=6.0, beta=1.0,
                              max_jsd_single_change=0.01, max_frob_single_change=0.0003),
    "higgs_retrain_test": _preset(min_change=0.003, step=0.01, num_bins=100, alpha=8.0, beta=1.0,
                                  max_jsd_single_change=0.01, max_frob_single_change=0.0003),
    "higgs_disco": _preset(min_change=0.015, step=0.06, num_bins=30, alpha=4.0, beta=1.0,
                           max_jsd_single_change=0.02, max_frob_single_change=0.0003, use_disco=True),
    "higgs_disco_detector_train": _preset(min_change=0.07, step=0.08, num_bins=30, alpha=4.0, beta=1.0,
                                          max_jsd_single_change=0.07, max_frob_single_change=0.0025,
                                          use_disco=True),
    "higgs_disco_detector_test": _preset(min_change=0.01, step=0.05, num_bins=30, alpha=4.0, beta=1.0,
                                         max_jsd_single_change=0.01, max_frob_single_change=0.00015,
                                         use_disco=True),
    "higgs_limited_pearson": _preset(min_change=0.005, step=0.02, num_bins=30, alpha=6.0, beta=1.0,
                                     max_jsd_single_change=0.02, max_frob_single_change=0.002),
    "ttww": _preset(min_change=0.005, step=0.01, num_bins=200, alpha=6.5, beta=1.0,
                    max_jsd_single_change=0.003, max_frob_single_change=0.003),
    "ttww_augment": _preset(min_change=0.003, step=0.02, num_bins=100, alpha=6.5, beta=1.0,
                            max_jsd_single_change=0.1, max_frob_single_change=0.1),
    "ttww_detector": _preset(min_change=0.01, step=0.01, num_bins=100, alpha=6.0, beta=1.0,
                             use_no_change=False, max_jsd_single_change=0.01, max_frob_single_change=0.03),
    "ttww_retrain_test": _preset(min_change=0.002, step=0.005, num_bins=100, alpha=8.0, beta=1.0,
                                 max_jsd_single_change=0.01, max_frob_single_change=0.0001),
    "donut_test": _preset(min_change=0.001, num_candidates=150, num_bins=70, alpha=6.0, beta=1.0,
                          max_jsd_single_change=0.005, max_frob_single_change=0.05),
    "donut_detector": _preset(min_change=0.001, num_candidates=150, num_bins=60, alpha=6.0, beta=1.0,
                              max_jsd_single_change=0.005, max_frob_single_change=0.05),
}

# uniform sampling ranges for the cumulative retraining loop (same for both tasks)
RETRAIN_RANGES = {
    "min_change": (0.001, 0.005),
    "step": (0.005, 0.03),
    "alpha": (3.0, 10.0),
    "beta": (0.5, 2.5),
    "max_jsd_single_change": (0.005, 0.03),
    "max_frob_single_change": (0.0001, 0.001),
}
RETRAIN_FIXED = dict(n_iterations=10, num_bins=100, use_no_change=True,
                     optimize_already_fooled=False, use_disco=False)


def preset(name: str, **overrides) -> AttackConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return AttackConfig(**{**PRESETS[name], **overrides})


def sample_config(rng: np.random.Generator, ranges=RETRAIN_RANGES, fixed=RETRAIN_FIXED, **overrides) -> AttackConfig:
    """Draw every ranged parameter uniformly; used by adversarial retraining."""
    params = dict(fixed)
    for key in sorted(ranges):
        lo, hi = ranges[key]
        params[key] = float(rng.uniform(lo, hi))
    params.update(overrides)
    return AttackConfig(**params)


@dataclass
class RestrictionSpec:
    """Rows whose statistics are constrained; the rest are perturbed freely."""

    restricted_mask: np.ndarray

    def __post_init__(self):
        self.restricted_mask = np.asarray(self.restricted_mask, dtype=bool)

    @property
    def free_mask(self) -> np.ndarray:
        return ~self.restricted_mask

    @classmethod
    def from_partition(cls, partition) -> "RestrictionSpec":
        return cls(np.asarray(partition.control_mask, dtype=bool))


@dataclass
class AttackResult:
    adversarial_features: np.ndarray
    fooled_mask: np.ndarray
    per_iteration_trace: list = field(default_factory=list)
    final_mean_jsd: float = 0.0
    final_delta_fn: float = 0.0
    clean_labels: np.ndarray | None = None
    adversarial_labels: np.ndarray | None = None
    changes: np.ndarray | None = None
    audit: dict = field(default_factory=dict)
    candidate_cap_hits: int = 0

    @property
    def fooling_ratio(self) -> float:
        return float(np.mean(self.fooled_mask))

    def metrics(self) -> dict:
        return {
            "fooling_ratio": self.fooling_ratio,
            "final_mean_jsd": self.final_mean_jsd,
            "final_delta_fn": self.final_delta_fn,
            "trace": self.per_iteration_trace,
            "audit": self.audit,
            "candidate_cap_hits": self.candidate_cap_hits,
            "n_changes": 0 if self.changes is None else int(self.changes.size),
        }


CHANGE_DTYPE = np.dtype([("iteration", "i4"), ("row", "i8"), ("feature", "i4"), ("old", "f8"),
                         ("new", "f8"), ("jsd_increase", "f8"), ("fn_increase", "f8")])


# ---------------------------------------------------------------------------
# candidates

_FRACTIONS: dict[int, np.ndarray] = {}


def _spaced(first: float, last: float, count: int) -> np.ndarray:
    """``count`` evenly spaced values from ``first`` to exactly ``last``."""
    frac = _FRACTIONS.get(count)
    if frac is None:
        frac = _FRACTIONS[count] = np.arange(count) / max(count - 1, 1)
    out = first + (last - first) * frac
    out[-1] = last
    return out


def generate_candidates(x_ij: float, grad_sign: int, bounds, cfg: AttackConfig,
                        include_no_change: bool | None = None) -> np.ndarray:
    """Candidate values for one cell, ordered by increasing distance from ``x_ij``.

    Step mode walks ``x + dir * (min_change + k * step)`` up to the feature's
    global bound (at most 512 values); ``num_candidates`` mode spaces values
    evenly from ``x + dir * min_change`` to the bound. With ``use_no_change``
    the unchanged value is appended last.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if grad_sign not in (-1, 1):
        raise ValueError("grad_sign must be +1 or -1")
    limit = hi if grad_sign > 0 else lo
    first = x_ij + grad_sign * cfg.min_change
    room = (limit - first) * grad_sign
    tol = 1e-12 * max(1.0, abs(limit))
    if room < -tol:
        cands = np.empty(0)
    elif cfg.num_candidates is not None:
        cands = _spaced(first, limit, cfg.num_candidates) if room > tol else np.array([limit])
    else:
        count = min(int(math.floor(room / cfg.step + 1e-9)) + 1, MAX_STEP_CANDIDATES)
        cands = x_ij + grad_sign * (cfg.min_change + cfg.step * np.arange(count))
    cands = np.clip(cands, lo, hi)
    if include_no_change if include_no_change is not None else cfg.use_no_change:
        cands = np.append(cands, x_ij)
    return cands


# ---------------------------------------------------------------------------
# incremental drift bookkeeping


class DriftState:
    """Clean reference statistics plus the incrementally updated adversarial ones.

    Holds the working adversarial matrix ``X``; only ``tracked`` rows
    contribute to the statistics.
    """

    def __init__(self, X_clean, bounds, cfg: AttackConfig, tracked=None):
        X_clean = np.asarray(X_clean, dtype=np.float64)
        self.X = X_clean.copy()
        n, d = X_clean.shape
        self.tracked = np.arange(n) if tracked is None else np.flatnonzero(tracked)
        if self.tracked.size < 2:
            raise DataError("need at least two constrained rows to track statistics")
        self.position = np.full(n, -1, dtype=np.int64)
        self.position[self.tracked] = np.arange(self.tracked.size)
        self.mode = "distance_correlation" if cfg.use_disco else "pearson"
        Xt = X_clean[self.tracked]
        self.clean = stats.StatsSnapshot.from_matrix(Xt, cfg.num_bins, bounds, self.mode,
                                                     cfg.disco_subsample_cap, cfg.seed)
        self.adv = stats.StatsSnapshot.from_matrix(Xt, cfg.num_bins, bounds, self.mode,
                                                   cfg.disco_subsample_cap, cfg.seed)
        self.clean_corr = self.clean.correlation_matrix.copy()
        self.clean_norm = float(np.linalg.norm(self.clean_corr, "fro"))
        self.p = self.clean.histograms.normalized
        self._refresh_all()
        self.edits_since_audit = 0
        self.rebuilds = 0

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def _refresh_all(self):
        q = self.adv.histograms.normalized
        self.terms = stats._jsd_terms(self.p, q)
        self.jsd_sq = 0.5 * self.terms.sum(axis=1)
        D = self.adv.correlation_matrix - self.clean_corr
        self.diff = D
        self.fn_sq = float(np.sum(D * D))

    @property
    def feature_jsd(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.jsd_sq, 0.0))

    @property
    def delta_fn(self) -> float:
        return math.sqrt(max(self.fn_sq, 0.0)) / self.clean_norm

    def score(self, row: int, feature: int, candidates) -> tuple[np.ndarray, np.ndarray]:
        """Feature JSD and dataset ΔFN after each hypothetical replacement; read-only."""
        cands = np.atleast_1d(np.asarray(candidates, dtype=np.float64))
        return self.score_many(row, np.full(cands.size, feature, dtype=np.intp), cands)

    def score_many(self, row: int, features, candidates) -> tuple[np.ndarray, np.ndarray]:
        """Like :meth:`score` with an edited feature given per candidate."""
        f = np.asarray(features, dtype=np.intp)
        cands = np.asarray(candidates, dtype=np.float64)
        pos = self.position[row]
        if pos < 0:
            return self.feature_jsd[f], np.full(cands.size, self.delta_fn)
        h = self.adv.histograms
        n = float(h.n)
        x = self.X[row]
        k_old = h.bin_index_many(f, x[f])
        k_new = h.bin_index_many(f, cands)
        moved = k_new != k_old
        p_old, p_new = self.p[f, k_old], self.p[f, k_new]
        q_old = (h.counts[f, k_old] - 1) / n
        q_new = (h.counts[f, k_new] + 1) / n
        delta = (stats._jsd_terms(p_old, q_old) - self.terms[f, k_old]
                 + stats._jsd_terms(p_new, q_new) - self.terms[f, k_new])
        jsd_sq = np.where(moved, self.jsd_sq[f] + 0.5 * delta, self.jsd_sq[f])
        jsd = np.sqrt(np.maximum(jsd_sq, 0.0))

        if self.mode == "pearson":
            rho = self.adv.correlation.candidate_corr_rows(x, f, cands)
        else:
            rho = np.empty((cands.size, self.d))
            for j in np.unique(f):
                sel = f == j
                rho[sel] = self.adv.correlation.candidate_corr_rows(int(pos), int(j), cands[sel])
        dn = rho - self.clean_corr[f]
        diag = np.arange(f.size)
        old_part = 2.0 * np.sum(self.diff[f] ** 2, axis=1) - self.diff[f, f] ** 2
        new_part = 2.0 * np.sum(dn ** 2, axis=1) - dn[diag, f] ** 2
        fn = np.sqrt(np.maximum(self.fn_sq - old_part + new_part, 0.0)) / self.clean_norm
        return jsd, fn

    def apply(self, row: int, feature: int, new_value: float) -> None:
        pos = self.position[row]
        j = feature
        if pos >= 0:
            self.adv.apply_cell_change(int(pos), self.X[row], j, new_value)
            h = self.adv.histograms
            self.terms[j] = stats._jsd_terms(self.p[j], h.counts[j] / float(h.n))
            self.jsd_sq[j] = 0.5 * self.terms[j].sum()
            D_row = self.adv.correlation_matrix[j] - self.clean_corr[j]
            self.fn_sq += (2.0 * np.sum(D_row ** 2) - D_row[j] ** 2) - (2.0 * np.sum(self.diff[j] ** 2) - self.diff[j, j] ** 2)
            self.diff[j, :] = D_row
            self.diff[:, j] = D_row
            if self.mode != "pearson":
                # a dCor edit renormalizes the whole matrix in O(d^2)
                self.diff = self.adv.correlation_matrix - self.clean_corr
                self.fn_sq = float(np.sum(self.diff ** 2))
            self.edits_since_audit += 1
        self.X[row, j] = new_value
        if self.edits_since_audit >= AUDIT_EVERY:
            self.periodic_audit()

    def audit(self) -> dict:
        report = self.adv.audit(self.X[self.tracked])
        report["fn_incremental"] = self.delta_fn
        report["fn_full"] = stats.delta_fn(self.clean_corr, self._full_corr())
        report["jsd_max_abs"] = float(np.max(np.abs(
            stats.per_feature_jsd(self.clean.histograms, self._full_hist()) - self.feature_jsd)))
        report["fn_abs"] = abs(report["fn_incremental"] - report["fn_full"])
        report["passed"] = bool(max(report["histogram_max_abs"], report["correlation_max_abs"],
                                    report["jsd_max_abs"], report["fn_abs"]) <= AUDIT_TOL)
        return report

    def _full_hist(self):
        h = self.adv.histograms.copy()
        h.recount(self.X[self.tracked])
        return h

    def _full_corr(self):
        Xt = self.X[self.tracked]
        if self.mode == "pearson":
            return stats.CorrelationState.from_matrix(Xt).corr
        return stats.dcor_matrix(Xt, self.adv.correlation.subsample_cap, self.adv.correlation.seed)

    def periodic_audit(self) -> None:
        self.edits_since_audit = 0
        report = self.audit()
        if not report["passed"]:
            log.warning("incremental statistics drifted (%s); rebuilding", report)
            self.adv.rebuild(self.X[self.tracked])
            self._refresh_all()
            self.rebuilds += 1


def score_candidate(state: DriftState, row: int, feature: int, candidate, cfg: AttackConfig):
    """(feature JSD, ΔFN, weighted cost) for replacing one cell; ``state`` is not mutated."""
    jsd, fn = state.score(row, feature, candidate)
    cost = cfg.alpha * jsd + cfg.beta * fn
    if np.ndim(candidate) == 0:
        return float(jsd[0]), float(fn[0]), float(cost[0])
    return jsd, fn, cost


# ---------------------------------------------------------------------------
# the attack loop


def _validate_model_input(model, X):
    if X.shape[1] != model.input_dim:
        raise DataError(f"model expects {model.input_dim} features, data has {X.shape[1]}")


def run_attack(model: MlpModel, X, cfg: AttackConfig, bounds=None, restriction: RestrictionSpec | None = None,
               initial_mask=None, loss_labels=None, record_changes: bool = True) -> AttackResult:
    """Attack the rows of ``X``; statistics are taken over the (restricted) rows themselves.

    ``loss_labels`` defaults to the model's clean hard labels, so the
    gradient direction always pushes away from the clean prediction.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("attack needs an n x d matrix with n >= 2")
    _validate_model_input(model, X)
    n, d = X.shape
    bounds = np.column_stack([X.min(axis=0), X.max(axis=0)]) if bounds is None else np.asarray(bounds, float)
    restricted = np.ones(n, dtype=bool) if restriction is None else np.asarray(restriction.restricted_mask, bool)
    if restricted.shape != (n,):
        raise DataError("restriction mask must have one entry per row")
    target = np.ones(n, dtype=bool) if initial_mask is None else np.asarray(initial_mask, dtype=bool)
    if target.shape != (n,):
        raise DataError("mask must have one entry per row")

    state = DriftState(X, bounds, cfg, tracked=restricted)
    _, clean_labels = predict(model, X)
    y_loss = clean_labels if loss_labels is None else np.asarray(loss_labels)
    adv_labels = clean_labels.copy()
    fooled = np.zeros(n, dtype=bool)
    changes: list[tuple] = []
    cap_hits = 0
    trace = [_trace_row(0, fooled, state, 0, 0)]
    pool = ThreadPoolExecutor(cfg.n_gpus) if cfg.n_gpus > 1 else None

    def score_rows(row, feat_ids, cands):
        if pool is None or cands.size < 2 * cfg.n_gpus:
            return state.score_many(row, feat_ids, cands)
        chunks = np.array_split(np.arange(cands.size), cfg.n_gpus)
        parts = list(pool.map(lambda c: state.score_many(row, feat_ids[c], cands[c]), chunks))
        return np.concatenate([q[0] for q in parts]), np.concatenate([q[1] for q in parts])

    try:
        for it in range(1, cfg.n_iterations + 1):
            active = target & (~fooled | cfg.optimize_already_fooled)
            rows = np.flatnonzero(active)
            applied = rejected = 0
            if rows.size:
                signs = np.sign(model.input_gradients(state.X[rows], y_loss[rows]))
                if not np.all(np.isfinite(signs)):
                    raise NumericError("non-finite input gradient")
            for r_i, row in enumerate(rows):
                sign = signs[r_i]
                if fooled[row]:
                    if _refine_fooled_row(model, state, row, bounds, cfg, clean_labels, it, changes, record_changes):
                        applied += 1
                    continue
                if not restricted[row]:
                    _perturb_free_row(model, state, row, sign, bounds, cfg, it, changes, record_changes)
                    applied += 1
                    continue
                feats, cand_lists = [], []
                for j in range(d):
                    if sign[j] == 0:
                        continue
                    c = generate_candidates(state.X[row, j], int(sign[j]), bounds[j], cfg, include_no_change=False)
                    if c.size:
                        if cfg.num_candidates is None and c.size == MAX_STEP_CANDIDATES:
                            cap_hits += 1
                        feats.append(j)
                        cand_lists.append(c)
                if not feats:
                    continue
                feat_ids = np.concatenate([np.full(c.size, j, dtype=np.intp) for j, c in zip(feats, cand_lists)])
                cands = np.concatenate(cand_lists)
                jsd_new, fn_new = score_rows(row, feat_ids, cands)
                jsd_cur = state.feature_jsd
                fn_cur = state.delta_fn
                jsd_inc = jsd_new - jsd_cur[feat_ids]
                fn_inc = fn_new - fn_cur
                cost = cfg.alpha * jsd_new + cfg.beta * fn_new
                ok = np.ones(cost.size, dtype=bool)
                if cfg.use_no_change:
                    ok = (jsd_inc <= cfg.max_jsd_single_change) & (fn_inc <= cfg.max_frob_single_change)
                    if not ok.any():
                        rejected += 1
                        continue
                idx = np.flatnonzero(ok)
                old_vals = state.X[row, feat_ids[idx]]
                order = np.lexsort((np.abs(cands[idx] - old_vals), feat_ids[idx], cost[idx]))
                pick = idx[order[0]]
                j = int(feat_ids[pick])
                old = float(state.X[row, j])
                state.apply(row, j, float(cands[pick]))
                applied += 1
                if record_changes:
                    changes.append((it, row, j, old, float(cands[pick]), float(jsd_inc[pick]), float(fn_inc[pick])))
            if rows.size:
                adv_labels[rows] = predict(model, state.X[rows])[1]
            fooled = target & (adv_labels != clean_labels)
            trace.append(_trace_row(it, fooled, state, applied, rejected))
            log.info("iteration=%d fooling_ratio=%.4f mean_jsd=%.5f delta_fn=%.5f applied=%d rejected=%d",
                     it, trace[-1]["fooling_ratio"], trace[-1]["mean_jsd"], trace[-1]["delta_fn"], applied, rejected)
    finally:
        if pool is not None:
            pool.shutdown()

    audit = state.audit()
    if not audit["passed"]:
        log.warning("end-of-run audit failed: %s", audit)
    audit["rebuilds"] = state.rebuilds
    return AttackResult(
        adversarial_features=state.X,
        fooled_mask=fooled,
        per_iteration_trace=trace,
        final_mean_jsd=float(np.mean(state.feature_jsd)),
        final_delta_fn=state.delta_fn,
        clean_labels=clean_labels,
        adversarial_labels=adv_labels,
        changes=np.array(changes, dtype=CHANGE_DTYPE),
        audit=audit,
        candidate_cap_hits=cap_hits,
    )


def _trace_row(it, fooled, state, applied, rejected):
    return {"iteration": it, "fooling_ratio": float(np.mean(fooled)),
            "mean_jsd": float(np.mean(state.feature_jsd)), "delta_fn": float(state.delta_fn),
            "applied": int(applied), "rejected": int(rejected)}


def _perturb_free_row(model, state, row, sign, bounds, cfg, it, changes, record):
    """Unconstrained rows take the farthest in-bounds candidate on their steepest feature."""
    grad_order = [j for j in np.argsort(-np.abs(sign), kind="stable") if sign[j] != 0]
    for j in grad_order:
        c = generate_candidates(state.X[row, j], int(sign[j]), bounds[j], cfg, include_no_change=False)
        if c.size:
            old = float(state.X[row, j])
            state.apply(row, int(j), float(c[-1]))
            if record:
                changes.append((it, row, int(j), old, float(c[-1]), 0.0, 0.0))
            return


def _refine_fooled_row(model, state, row, bounds, cfg, clean_labels, it, changes, record) -> bool:
    """Lower a fooled row's drift cost in either direction; revert if it stops fooling."""
    if state.position[row] < 0:
        return False
    best = None
    jsd_cur, fn_cur = state.feature_jsd, state.delta_fn
    for j in range(state.d):
        base = cfg.alpha * jsd_cur[j] + cfg.beta * fn_cur
        for direction in (1, -1):
            c = generate_candidates(state.X[row, j], direction, bounds[j], cfg, include_no_change=False)
            if not c.size:
                continue
            jsd, fn = state.score(row, j, c)
            gain = cfg.alpha * jsd + cfg.beta * fn - base
            k = int(np.argmin(gain))
            if gain[k] < 0 and (best is None or gain[k] < best[0]):
                best = (float(gain[k]), j, float(c[k]), float(jsd[k] - jsd_cur[j]), float(fn[k] - fn_cur))
    if best is None:
        return False
    _, j, value, jsd_inc, fn_inc = best
    old = float(state.X[row, j])
    state.apply(row, j, value)
    if predict(model, state.X[row:row + 1])[1][0] == clean_labels[row]:
        state.apply(row, j, old)
        return False
    if record:
        changes.append((it, row, j, old, value, jsd_inc, fn_inc))
    return True


def attack(model: MlpModel, ds: Dataset, cfg: AttackConfig, restriction: RestrictionSpec | None = None,
           initial_mask=None) -> AttackResult:
    """Attack every row of ``ds`` using its global feature bounds."""
    return run_attack(model, ds.features, cfg, ds.feature_bounds, restriction, initial_mask)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_attack(clean: Dataset | np.ndarray, result: AttackResult, model: MlpModel,
                    restriction: RestrictionSpec | None = None, num_bins: int = 100,
                    mode: str = "pearson", bounds=None, feature_names=None,
                    subsample_cap: int = 2000, seed: int = 0) -> dict:
    """Audit-grade report recomputed from the final matrices (no incremental state)."""
    Xc = clean.features if isinstance(clean, Dataset) else np.asarray(clean, dtype=np.float64)
    if bounds is None and isinstance(clean, Dataset):
        bounds = clean.feature_bounds
    if feature_names is None:
        feature_names = clean.feature_names if isinstance(clean, Dataset) else [f"f{j}" for j in range(Xc.shape[1])]
    Xa = np.asarray(result.adversarial_features, dtype=np.float64)
    if Xa.shape != Xc.shape:
        raise DataError(f"shape mismatch: clean {Xc.shape}, adversarial {Xa.shape}")
    _, yc = predict(model, Xc)
    _, ya = predict(model, Xa)
    report = {"fooling_ratio": stats.fooling_ratio(yc, ya)}
    rows = np.ones(Xc.shape[0], dtype=bool)
    if restriction is not None:
        rows = np.asarray(restriction.restricted_mask, dtype=bool)
        report["fooling_ratio_restricted"] = stats.fooling_ratio(yc[rows], ya[rows]) if rows.any() else float("nan")
        free = ~rows
        report["fooling_ratio_free"] = stats.fooling_ratio(yc[free], ya[free]) if free.any() else float("nan")
    if bounds is None:
        bounds = np.column_stack([Xc.min(axis=0), Xc.max(axis=0)])
    hc = stats.FeatureHistogram.from_matrix(Xc[rows], num_bins, bounds)
    ha = stats.FeatureHistogram.from_matrix(Xa[rows], num_bins, bounds)
    per_feature = stats.per_feature_jsd(hc, ha)
    order = np.argsort(per_feature, kind="stable")
    pick = {"min": order[0], "median": order[(len(order) - 1) // 2], "max": order[-1]}
    if mode == "pearson":
        cc = stats.CorrelationState.from_matrix(Xc[rows]).corr
        ca = stats.CorrelationState.from_matrix(Xa[rows]).corr
    else:
        cc = stats.dcor_matrix(Xc[rows], subsample_cap, seed)
        ca = stats.dcor_matrix(Xa[rows], subsample_cap, seed)
    report.update({
        "per_feature_jsd": {feature_names[j]: float(per_feature[j]) for j in range(len(per_feature))},
        "mean_jsd": float(np.mean(per_feature)),
        "jsd_extremes": {k: {"feature": feature_names[int(j)], "jsd": float(per_feature[int(j)])}
                         for k, j in pick.items()},
        "delta_fn": stats.delta_fn(cc, ca),
        "clean_correlation": cc.tolist(),
        "adversarial_correlation": ca.tolist(),
        "n_events": int(Xc.shape[0]),
        "n_constrained": int(rows.sum()),
    })
    return report


# ---------------------------------------------------------------------------
# scikit-learn facade


class ConservAttack(TransformerMixin, BaseEstimator):
    """Transformer that returns statistics-preserving adversarial versions of ``X``.

    ``fit`` records the per-feature bounds (or takes ``feature_bounds``);
    ``transform`` runs the attack against ``estimator`` and keeps the full
    :class:`AttackResult` in ``result_``.
    """

    def __init__(self, estimator=None, min_change=0.001, step=None, num_candidates=None, n_iterations=10,
                 num_bins=100, alpha=1.0, beta=1.0, max_jsd_single_change=math.inf,
                 max_frob_single_change=math.inf, use_no_change=True, optimize_already_fooled=False,
                 use_disco=False, n_gpus=1, random_state=0, feature_bounds=None):
        self.estimator = estimator
        self.min_change = min_change
        self.step = step
        self.num_candidates = num_candidates
        self.n_iterations = n_iterations
        self.num_bins = num_bins
        self.alpha = alpha
        self.beta = beta
        self.max_jsd_single_change = max_jsd_single_change
        self.max_frob_single_change = max_frob_single_change
        self.use_no_change = use_no_change
        self.optimize_already_fooled = optimize_already_fooled
        self.use_disco = use_disco
        self.n_gpus = n_gpus
        self.random_state = random_state
        self.feature_bounds = feature_bounds

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            min_change=self.min_change, step=self.step, num_candidates=self.num_candidates,
            n_iterations=self.n_iterations, num_bins=self.num_bins, alpha=self.alpha, beta=self.beta,
            max_jsd_single_change=self.max_jsd_single_change,
            max_frob_single_change=self.max_frob_single_change, use_no_change=self.use_no_change,
            optimize_already_fooled=self.optimize_already_fooled, use_disco=self.use_disco,
            n_gpus=self.n_gpus, seed=self.random_state)

    def _model(self) -> MlpModel:
        est = self.estimator
        if isinstance(est, MlpModel):
            return est
        if est is None or not hasattr(est, "model_"):
            raise ConfigError("estimator must be an MlpModel or a fitted MLPBinaryClassifier")
        return est.model_

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.attack_config()  # validates hyperparameters early
        if self.feature_bounds is not None:
            self.bounds_ = np.asarray(self.feature_bounds, dtype=np.float64).reshape(X.shape[1], 2)
        else:
            self.bounds_ = np.column_stack([X.min(axis=0), X.max(axis=0)])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, mask=None, restriction=None):
        check_is_fitted(self, "bounds_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"X has {X.shape[1]} features, attack was fitted on {self.n_features_in_}")
        self.result_ = run_attack(self._model(), X, self.attack_config(), self.bounds_, restriction, mask)
        return self.result_.adversarial_features
