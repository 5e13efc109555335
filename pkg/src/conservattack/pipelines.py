"""Experiment workflows built on the attack: augmentation, adversarial
training, adversarial detection, repeated-misclassification significance and
threshold sweeps. Every workflow can record its artifacts in a
:class:`RunManifest` so it can be replayed bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import __version__, nn, stats
from .attack import AttackConfig, AttackResult, RETRAIN_FIXED, RETRAIN_RANGES, run_attack, sample_config
from .data import Dataset, write_csv
from .exceptions import ConfigError, DataError

log = logging.getLogger(__name__)

DETECTOR_THRESHOLD = 0.5
DEFAULT_SWEEP = tuple(np.round(np.arange(1, 20) * 0.05, 2))


# ---------------------------------------------------------------------------
# run bookkeeping


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(_jsonable(obj), sort_keys=True).encode()).hexdigest()[:12]


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    """Everything needed to re-run a workflow: kind, seeds, configs, artifacts, metrics."""

    kind: str
    run_id: str
    seeds: dict
    configs: dict
    artifacts: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    version: str = __version__

    @classmethod
    def create(cls, kind: str, seeds: dict, configs: dict) -> "RunManifest":
        return cls(kind, f"{kind}-{config_digest([seeds, configs])}", dict(seeds), _jsonable(configs))

    def record(self, name: str, path) -> None:
        path = Path(path)
        self.artifacts[name] = {"path": path.name, "sha256": _sha256(path), "run_id": self.run_id}

    def write(self, output_dir) -> Path:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "manifest.json"
        path.write_text(json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            d = json.loads(Path(path).read_text())
            return cls(**d)
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read run manifest {path}: {exc}") from exc

    def verify_artifacts(self, output_dir) -> list[str]:
        """Problems with the recorded artifacts (missing, altered, foreign run_id)."""
        out, problems = Path(output_dir), []
        for name, rec in self.artifacts.items():
            p = out / rec["path"]
            if rec.get("run_id") != self.run_id:
                problems.append(f"{name}: run_id {rec.get('run_id')!r} != {self.run_id!r}")
            elif not p.is_file():
                problems.append(f"{name}: missing file {p}")
            elif _sha256(p) != rec["sha256"]:
                problems.append(f"{name}: content changed since the run")
        return problems


class ArtifactWriter:
    """Writes files under one output directory and records them in a manifest."""

    def __init__(self, output_dir, manifest: RunManifest):
        self.dir = Path(output_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest

    def json(self, name: str, obj) -> Path:
        p = self.dir / f"{name}.json"
        p.write_text(json.dumps(_jsonable({"run_id": self.manifest.run_id, **obj}), indent=2, sort_keys=True))
        self.manifest.record(name, p)
        return p

    def table(self, name: str, rows: list[dict]) -> Path:
        p = self.dir / f"{name}.csv"
        write_rows(p, rows)
        self.manifest.record(name, p)
        return p

    def model(self, name: str, model: nn.MlpModel) -> Path:
        p = nn.save(model, self.dir / f"{name}.model.json", {"run_id": self.manifest.run_id})
        self.manifest.record(name, p)
        self.manifest.record(name + ".bin", p.with_suffix(".bin"))
        return p

    def dataset(self, name: str, ds: Dataset) -> Path:
        p = write_csv(ds, self.dir / f"{name}.csv")
        self.manifest.record(name, p)
        return p

    def finish(self, metrics: dict) -> Path:
        self.manifest.metrics = _jsonable(metrics)
        return self.manifest.write(self.dir)


def write_rows(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


# ---------------------------------------------------------------------------
# shared helpers


def _train(architecture: str, ds_train: Dataset, ds_val: Dataset | None, cfg: nn.TrainConfig, seed: int):
    model = nn.build(architecture, input_dim=ds_train.d, seed=seed)
    val = (None, None) if ds_val is None else (ds_val.features, ds_val.labels)
    trained, history = nn.train(model, ds_train.features, ds_train.labels, cfg, *val)
    return trained, history


def _split(ds: Dataset, tag: str, label: int | None = None) -> Dataset:
    if ds.split_tag is None:
        raise DataError("dataset needs train/val/test split tags")
    return ds.split_subset(tag, label)


def clean_auroc(model: nn.MlpModel, ds: Dataset) -> float:
    scores, _ = nn.predict(model, ds.features)
    return stats.auroc(scores, ds.labels)


def attack_split(model, ds: Dataset, cfg: AttackConfig, attack_label: int | None = None) -> tuple[Dataset, AttackResult]:
    """Attack the rows of ``ds`` (optionally one class only) with global bounds."""
    target = ds if attack_label is None else ds.subset(ds.labels == attack_label)
    result = run_attack(model, target.features, cfg, target.feature_bounds)
    return target, result


# ---------------------------------------------------------------------------
# data augmentation


@dataclass
class AugmentReport:
    baseline_auroc: float
    augmented_auroc: float
    n_train: int
    n_adversaries: int
    augmented_size: int
    fooling_ratio: float
    degenerate: bool

    @property
    def gain(self) -> float:
        return self.augmented_auroc - self.baseline_auroc


def augment_pipeline(ds: Dataset, train_cfg: nn.TrainConfig, attack_cfg: AttackConfig,
                     architecture: str = "higgs", seed: int = 0, train_rows: int | None = None):
    """Baseline vs. retraining from scratch on train + successful adversaries.

    ``train_rows`` optionally reduces the training split (low-data regime).
    Adversaries keep their true labels. The augmented model starts from the
    same initial weights as the baseline, so an attack that fools nothing
    reproduces the baseline exactly.
    """
    train, val, test = (_split(ds, t) for t in ("train", "val", "test"))
    if train_rows is not None and train_rows < train.n:
        keep = np.sort(np.random.default_rng(seed).choice(train.n, train_rows, replace=False))
        train = train.subset(keep)
    baseline, _ = _train(architecture, train, val, train_cfg, seed)
    _, result = attack_split(baseline, train, attack_cfg)
    fooled = result.fooled_mask
    if fooled.any():
        rng = np.random.default_rng(seed + 1)
        X = np.vstack([train.features, result.adversarial_features[fooled]])
        y = np.concatenate([train.labels, train.labels[fooled]])
        order = rng.permutation(X.shape[0])
        aug = Dataset(X[order], y[order], train.feature_names, train.feature_bounds)
    else:
        log.warning("attack produced no successful adversaries; augmented training equals the baseline")
        aug = train
    augmented, _ = _train(architecture, aug, val, train_cfg, seed)
    report = AugmentReport(clean_auroc(baseline, test), clean_auroc(augmented, test), train.n,
                           int(fooled.sum()), aug.n, result.fooling_ratio, not fooled.any())
    return baseline, augmented, report


# ---------------------------------------------------------------------------
# cumulative adversarial training


@dataclass
class AdvTrainIteration:
    iteration: int
    fooling_ratio: float
    auroc: float
    cumulative_size: int
    new_adversaries: int
    attack_config: dict


def adversarial_training_pipeline(ds: Dataset, train_cfg: nn.TrainConfig, test_attack_cfg: AttackConfig,
                                  iteration_count: int, param_ranges=RETRAIN_RANGES, fixed=RETRAIN_FIXED,
                                  architecture: str = "higgs", seed: int = 0, held_out=(),
                                  model: nn.MlpModel | None = None, test_adversaries=None):
    """Retrain on a growing pool of adversaries drawn with randomly sampled attack settings.

    Test adversaries are generated once against the initial model. Each
    iteration's model is scored on them plus any ``held_out`` (clean,
    adversarial) pairs from other runs, weighting every adversary equally.
    Returns (models, iteration table, own test adversaries).
    """
    if iteration_count < 1:
        raise ConfigError("iteration_count must be >= 1")
    train, val, test = (_split(ds, t) for t in ("train", "val", "test"))
    if model is None:
        model, _ = _train(architecture, train, val, train_cfg, seed)
    if test_adversaries is None:
        test_adversaries = (test.features, attack_split(model, test, test_attack_cfg)[1].adversarial_features)
    eval_sets = [tuple(test_adversaries)] + [tuple(p) for p in held_out]

    def grey_box_fr(m):
        flips = total = 0
        for clean_X, adv_X in eval_sets:
            flips += int(np.sum(nn.predict(m, clean_X)[1] != nn.predict(m, adv_X)[1]))
            total += clean_X.shape[0]
        return flips / total

    rng = np.random.default_rng(seed + 7)
    models = [model]
    table = [AdvTrainIteration(0, grey_box_fr(model), clean_auroc(model, test), train.n, 0, {})]
    pool_X, pool_y = train.features, train.labels
    for it in range(1, iteration_count + 1):
        cfg = sample_config(rng, param_ranges, fixed, seed=seed + it)
        _, res = attack_split(model, train, cfg)
        fooled = res.fooled_mask
        pool_X = np.vstack([pool_X, res.adversarial_features[fooled]])
        pool_y = np.concatenate([pool_y, train.labels[fooled]])
        pool = Dataset(pool_X, pool_y, train.feature_names, train.feature_bounds)
        model, _ = _train(architecture, pool, val, train_cfg, seed + it)
        models.append(model)
        table.append(AdvTrainIteration(it, grey_box_fr(model), clean_auroc(model, test), pool.n,
                                       int(fooled.sum()), cfg.to_dict()))
        log.info("advtrain iteration=%d fooling_ratio=%.4f auroc=%.4f pool=%d",
                 it, table[-1].fooling_ratio, table[-1].auroc, pool.n)
    return models, table, tuple(test_adversaries)


def adversarial_training_runs(ds: Dataset, train_cfg: nn.TrainConfig, test_attack_cfg: AttackConfig,
                              iteration_count: int, seeds, param_ranges=RETRAIN_RANGES, fixed=RETRAIN_FIXED,
                              architecture: str = "higgs"):
    """Several independently seeded loops, each scored on every run's test adversaries."""
    test = _split(ds, "test")
    starts = []
    for seed in seeds:
        model, _ = _train(architecture, _split(ds, "train"), _split(ds, "val"), train_cfg, seed)
        adv = attack_split(model, test, replace(test_attack_cfg, seed=seed))[1]
        starts.append((model, (test.features, adv.adversarial_features)))
    tables = []
    for i, seed in enumerate(seeds):
        others = [starts[j][1] for j in range(len(seeds)) if j != i]
        _, table, _ = adversarial_training_pipeline(
            ds, train_cfg, test_attack_cfg, iteration_count, param_ranges, fixed, architecture, seed,
            held_out=others, model=starts[i][0], test_adversaries=starts[i][1])
        tables.append(table)
    return tables


# ---------------------------------------------------------------------------
# adversarial detector


@dataclass
class DetectorDataset:
    """Clean rows (label 1) stacked with adversarial rows (label 0)."""

    features: np.ndarray
    detector_labels: np.ndarray
    origin_tag: np.ndarray

    def __post_init__(self):
        expected = np.array([0 if t.startswith("adversarial") else 1 for t in self.origin_tag])
        if not np.array_equal(expected, self.detector_labels):
            raise DataError("detector labels disagree with row origins")


def build_detector_dataset(clean_X, adv_X, split_name: str, rng: np.random.Generator) -> DetectorDataset:
    """Balance clean and adversarial rows 50/50 by subsampling the larger group."""
    clean_X, adv_X = np.asarray(clean_X, float), np.asarray(adv_X, float)
    k = min(clean_X.shape[0], adv_X.shape[0])
    if k == 0:
        raise DataError(f"no {'adversarial' if adv_X.shape[0] == 0 else 'clean'} rows for the {split_name} detector split")
    ci = np.sort(rng.choice(clean_X.shape[0], k, replace=False))
    ai = np.sort(rng.choice(adv_X.shape[0], k, replace=False))
    X = np.vstack([clean_X[ci], adv_X[ai]])
    y = np.concatenate([np.ones(k, dtype=np.int64), np.zeros(k, dtype=np.int64)])
    tags = np.array([f"clean/{split_name}"] * k + [f"adversarial/{split_name}"] * k)
    order = rng.permutation(2 * k)
    return DetectorDataset(X[order], y[order], tags[order])


@dataclass
class DetectorReport:
    initial_fooling_ratio: float
    corrected_fooling_ratio: float
    clean_efficiency: float
    adversarial_efficiency: float
    n_attacked: int
    n_fooling: int
    baseline_auroc: float
    attack_metrics: dict = field(default_factory=dict)


def corrected_fooling(fooled, flagged) -> float:
    """Share of attacked rows that fool the classifier and slip past the detector."""
    fooled, flagged = np.asarray(fooled, bool), np.asarray(flagged, bool)
    return float(np.mean(fooled & ~flagged)) if fooled.size else 0.0


def evaluate_detector(detector: nn.MlpModel, clean_X, adv_X, fooled, threshold: float = DETECTOR_THRESHOLD):
    """(clean efficiency, adversarial efficiency on fooling rows, corrected FR)."""
    fooled = np.asarray(fooled, bool)
    clean_scores = nn.predict(detector, clean_X)[0]
    adv_scores = nn.predict(detector, adv_X)[0]
    flagged = adv_scores < threshold
    clean_eff = float(np.mean(clean_scores >= threshold))
    adv_eff = float(np.mean(flagged[fooled])) if fooled.any() else float("nan")
    return clean_eff, adv_eff, corrected_fooling(fooled, flagged)


def detector_pipeline(ds: Dataset, train_cfg: nn.TrainConfig, attack_cfg_train: AttackConfig,
                      attack_cfg_test: AttackConfig, detector_train_cfg: nn.TrainConfig | None = None,
                      architecture: str = "higgs", seed: int = 0, attack_label: int | None = None,
                      model: nn.MlpModel | None = None, threshold: float = DETECTOR_THRESHOLD):
    """Train a classifier, attack every split, train a clean-vs-adversarial detector.

    ``attack_label`` restricts the attack to one class (the toy example
    attacks background only); the clean pool always holds every row of the
    split. Only adversaries that fool the classifier enter detector
    training. Returns (classifier, detector, report, per-split attack results).
    """
    detector_train_cfg = detector_train_cfg or train_cfg
    splits = {t: _split(ds, t) for t in ("train", "val", "test")}
    if model is None:
        model, _ = _train(architecture, splits["train"], splits["val"], train_cfg, seed)
    results = {}
    for tag in ("train", "val", "test"):
        cfg = attack_cfg_test if tag == "test" else attack_cfg_train
        target, res = attack_split(model, splits[tag], cfg, attack_label)
        results[tag] = (target, res)
        log.info("detector attack split=%s fooling_ratio=%.4f mean_jsd=%.5f delta_fn=%.5f",
                 tag, res.fooling_ratio, res.final_mean_jsd, res.final_delta_fn)

    rng = np.random.default_rng(seed + 11)
    det_sets = {}
    for tag in ("train", "val"):
        _, res = results[tag]
        det_sets[tag] = build_detector_dataset(splits[tag].features,
                                               res.adversarial_features[res.fooled_mask], tag, rng)
    detector = nn.build(architecture, input_dim=ds.d, seed=seed + 13)
    detector, _ = nn.train(detector, det_sets["train"].features, det_sets["train"].detector_labels,
                           detector_train_cfg, det_sets["val"].features, det_sets["val"].detector_labels)

    target, res = results["test"]
    clean_eff, adv_eff, corrected = evaluate_detector(
        detector, splits["test"].features, res.adversarial_features, res.fooled_mask, threshold)
    report = DetectorReport(
        initial_fooling_ratio=res.fooling_ratio,
        corrected_fooling_ratio=corrected,
        clean_efficiency=clean_eff,
        adversarial_efficiency=adv_eff,
        n_attacked=target.n,
        n_fooling=int(res.fooled_mask.sum()),
        baseline_auroc=clean_auroc(model, splits["test"]),
        attack_metrics={t: {k: v for k, v in r.metrics().items() if k != "trace"} for t, (_, r) in results.items()},
    )
    return model, detector, report, results


def cross_run_corrected_fr(detectors, test_sets, threshold: float = DETECTOR_THRESHOLD) -> np.ndarray:
    """Matrix M[r, s]: corrected FR of run s's test adversaries under run r's detector.

    ``test_sets[s]`` is ``(adversarial X, fooled mask)``. Row means give the
    per-detector figure over all runs' adversaries, own run included.
    """
    out = np.empty((len(detectors), len(test_sets)))
    for r, det in enumerate(detectors):
        for s, (adv_X, fooled) in enumerate(test_sets):
            flagged = nn.predict(det, adv_X)[0] < threshold
            out[r, s] = corrected_fooling(fooled, flagged)
    return out


# ---------------------------------------------------------------------------
# repeated misclassification significance


@dataclass
class MisclassificationTally:
    R: int
    N: int
    counts: np.ndarray
    accuracies: np.ndarray
    mean_accuracy: float
    p: float
    expected: np.ndarray
    observed: np.ndarray
    p_values: np.ndarray
    alpha: float = 0.05

    @property
    def significant(self) -> np.ndarray:
        return self.p_values < self.alpha

    def rows(self) -> list[dict]:
        return [{"k": k, "expected": float(self.expected[k]), "observed": int(self.observed[k]),
                 "p_value": float(self.p_values[k]), "significant": bool(self.significant[k])}
                for k in range(self.R + 1)]


def significance_analysis(per_run_flags, alpha: float = 0.05) -> MisclassificationTally:
    """Compare how often each event is misclassified across runs with a binomial null.

    ``per_run_flags[i, e]`` is True when run ``i`` misclassified event ``e``.
    Expected counts use the mean per-run error rate; each bin is tested with
    the Poisson upper tail P(X >= O_k) at rate E_k.
    """
    F = np.asarray(per_run_flags)
    if F.ndim != 2:
        raise DataError("per_run_flags must be a rectangular R x N array")
    R, N = F.shape
    if R < 2:
        raise DataError("significance analysis needs at least two runs")
    if N < 1:
        raise DataError("no events")
    F = F.astype(bool)
    acc = 1.0 - F.mean(axis=1)
    abar = float(acc.mean())
    p = 1.0 - abar
    k = np.arange(R + 1)
    expected = N * sps.binom.pmf(k, R, p)
    counts = F.sum(axis=0)
    observed = np.bincount(counts, minlength=R + 1)
    p_values = np.where(observed > 0, sps.poisson.sf(observed - 1, expected), 1.0)
    return MisclassificationTally(R, N, counts, acc, abar, p, expected, observed, p_values, alpha)


def simulate_null(N: int, R: int, p: float, trials: int, seed: int = 0, alpha: float = 0.05) -> np.ndarray:
    """Per-bin flag rate of :func:`significance_analysis` on independent Bernoulli(p) flags."""
    rng = np.random.default_rng(seed)
    hits = np.zeros(R + 1)
    for _ in range(trials):
        tally = significance_analysis(rng.random((R, N)) < p, alpha)
        hits += tally.significant
    return hits / trials


# ---------------------------------------------------------------------------
# threshold sweep


def efficiency_sweep(detectors, clean_sets: dict, thresholds=DEFAULT_SWEEP) -> dict:
    """Fraction of clean rows scored >= t, per set, mean and variance over detectors."""
    t = np.asarray(thresholds, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ConfigError("threshold grid must be a non-empty 1-D sequence")
    if isinstance(detectors, nn.MlpModel):
        detectors = [detectors]
    out = {}
    for name, X in clean_sets.items():
        X = np.asarray(X, dtype=float)
        if X.shape[0] == 0:
            raise DataError(f"clean set {name!r} is empty")
        per_run = np.array([[np.mean(nn.predict(d, X)[0] >= thr) for thr in t] for d in detectors])
        out[name] = {"thresholds": t, "per_run": per_run, "mean": per_run.mean(axis=0),
                     "variance": per_run.var(axis=0, ddof=1) if len(detectors) > 1 else np.zeros(t.size)}
    return out


def sweep_rows(sweep: dict) -> list[dict]:
    rows = []
    for name, s in sweep.items():
        for i, thr in enumerate(s["thresholds"]):
            rows.append({"set": name, "threshold": float(thr), "efficiency_mean": float(s["mean"][i]),
                         "efficiency_variance": float(s["variance"][i])})
    return rows


# ---------------------------------------------------------------------------
# full workflow


VERDICT_OK = "no additional uncertainty"
VERDICT_INVESTIGATE = "investigate / assign uncertainty"


def verdict(corrected_fr: float, budget: float) -> str:
    return VERDICT_OK if budget >= corrected_fr else VERDICT_INVESTIGATE


def workflow(ds: Dataset, train_cfg: nn.TrainConfig, attack_cfg_train: AttackConfig,
             attack_cfg_test: AttackConfig, budget: float, detector_train_cfg: nn.TrainConfig | None = None,
             architecture: str = "higgs", seed: int = 0, attack_label: int | None = None,
             writer: ArtifactWriter | None = None) -> dict:
    """Baseline, adversaries on all splits, detector, and a verdict against ``budget``."""
    if not budget >= 0:
        raise ConfigError("budget must be >= 0")
    model, detector, report, results = detector_pipeline(
        ds, train_cfg, attack_cfg_train, attack_cfg_test, detector_train_cfg, architecture, seed, attack_label)
    summary = {**asdict(report), "budget": budget, "verdict": verdict(report.corrected_fooling_ratio, budget)}
    if writer is not None:
        writer.model("classifier", model)
        writer.model("detector", detector)
        for tag, (target, res) in results.items():
            writer.dataset(f"adversarial_{tag}", target.with_features(res.adversarial_features))
            writer.table(f"trace_{tag}", res.per_iteration_trace)
        writer.table("metrics", [{k: v for k, v in summary.items() if not isinstance(v, dict)}])
        writer.json("summary", summary)
    return summary
