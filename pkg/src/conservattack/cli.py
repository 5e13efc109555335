"""Command-line front end: ``conservattack <command> --config run.json``.

Each command reads one JSON config, applies ``--set key=value`` overrides
(dotted keys reach into sections), writes its artifacts plus a
``manifest.json`` into the output directory, and exits with 0 on success,
2 for configuration errors, 3 for data errors, 4 for numeric failures and
5 for anything else.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, data, nn, pipelines, stats
from .attack import PRESETS, AttackConfig, RestrictionSpec, evaluate_attack, run_attack
from .exceptions import ConfigError, ConservAttackError, DataError, NumericError

log = logging.getLogger("conservattack")

OUTPUT_DIR_ENV = "CONSERVATTACK_OUTPUT_DIR"
AUDIT_TOL = 1e-6
COMMANDS = ("train", "attack", "detect", "augment", "advtrain", "analyze", "sweep", "donut", "workflow", "audit")

_CONTEXT = {"run_id": "-", "stage": "-"}


class _ContextFilter(logging.Filter):
    def filter(self, record):
        record.run_id = _CONTEXT["run_id"]
        record.stage = _CONTEXT["stage"]
        return True


# ---------------------------------------------------------------------------
# config schema

_DATA_KEYS = {"csv", "dataset", "donut", "label_column", "normalization", "drop_columns", "split", "select"}
_SPLIT_KEYS = {"fractions", "seed"}
_DONUT_KEYS = {"n_signal", "n_background", "sigma", "r_ring", "seed"}

# command -> {key: kind}; kinds: data, train, attack, int, float, str, bool, list, dict, path, paths
SCHEMA = {
    "donut": {"donut": "dict", "normalization": "str", "split": "dict"},
    "train": {"data": "data", "train": "train", "architecture": "str", "seed": "int"},
    "attack": {"data": "data", "model": "path", "attack": "attack", "preset": "str", "split": "str",
               "attack_label": "int", "restricted": "bool"},
    "detect": {"data": "data", "train": "train", "attack_train": "attack", "attack_test": "attack",
               "detector_train": "train", "architecture": "str", "seed": "int", "runs": "int",
               "attack_label": "int", "threshold": "float"},
    "augment": {"data": "data", "train": "train", "attack": "attack", "architecture": "str", "seed": "int",
                "runs": "int", "train_rows": "int"},
    "advtrain": {"data": "data", "train": "train", "attack_test": "attack", "iterations": "int",
                 "architecture": "str", "seed": "int", "runs": "int", "ranges": "dict"},
    "analyze": {"flags_csv": "path", "detectors": "paths", "data": "data", "alpha": "float",
                "threshold": "float"},
    "sweep": {"detectors": "paths", "clean_sets": "dict", "thresholds": "list"},
    "workflow": {"data": "data", "train": "train", "attack_train": "attack", "attack_test": "attack",
                 "detector_train": "train", "architecture": "str", "seed": "int", "attack_label": "int",
                 "budget": "float", "dry_run": "bool"},
    "audit": {"attack_dir": "path"},
}
REQUIRED = {
    "donut": (),
    "train": ("data",),
    "attack": ("data", "model"),
    "detect": ("data", "attack_train", "attack_test"),
    "augment": ("data", "attack"),
    "advtrain": ("data", "attack_test", "iterations"),
    "analyze": (),
    "sweep": ("detectors", "clean_sets"),
    "workflow": ("data", "attack_train", "attack_test", "budget"),
    "audit": ("attack_dir",),
}
_PY_TYPES = {"int": (int,), "float": (int, float), "str": (str,), "bool": (bool,), "list": (list,),
             "dict": (dict,), "path": (str,), "paths": (list,)}


def _resolve_attack(section) -> dict:
    """An attack section may be a preset name, or a mapping with an optional ``preset`` base."""
    if isinstance(section, str):
        section = {"preset": section}
    section = dict(section)
    base = section.pop("preset", None)
    if base is not None:
        if base not in PRESETS:
            raise ConfigError(f"unknown preset {base!r}; choose from {sorted(PRESETS)}")
        section = {**PRESETS[base], **section}
    return section


def _check_data(d, path: str) -> list[str]:
    if not isinstance(d, dict):
        return [f"{path}: expected an object, got {type(d).__name__}"]
    out = [f"{path}.{k}: unknown key" for k in sorted(set(d) - _DATA_KEYS)]
    sources = [k for k in ("csv", "dataset", "donut") if k in d]
    if len(sources) != 1:
        out.append(f"{path}: exactly one of csv, dataset, donut is required (got {sources or 'none'})")
    if "donut" in d:
        if not isinstance(d["donut"], dict):
            out.append(f"{path}.donut: expected an object")
        else:
            out += [f"{path}.donut.{k}: unknown key" for k in sorted(set(d["donut"]) - _DONUT_KEYS)]
    if "normalization" in d and d["normalization"] not in data.NORMALIZATIONS:
        out.append(f"{path}.normalization: expected one of {list(data.NORMALIZATIONS)}, got {d['normalization']!r}")
    if "split" in d:
        if not isinstance(d["split"], dict):
            out.append(f"{path}.split: expected an object")
        else:
            out += [f"{path}.split.{k}: unknown key" for k in sorted(set(d["split"]) - _SPLIT_KEYS)]
    if "select" in d and d["select"] not in data.SPLIT_NAMES:
        out.append(f"{path}.select: expected one of {list(data.SPLIT_NAMES)}, got {d['select']!r}")
    return out


def _check_train(d, path: str) -> list[str]:
    if not isinstance(d, dict):
        return [f"{path}: expected an object, got {type(d).__name__}"]
    try:
        nn.TrainConfig.from_dict(d)
    except (ConfigError, TypeError) as exc:
        return [f"{path}: {exc}"]
    return []


def _check_attack(d, path: str) -> list[str]:
    if not isinstance(d, (dict, str)):
        return [f"{path}: expected an object or preset name, got {type(d).__name__}"]
    try:
        resolved = _resolve_attack(d)
    except ConfigError as exc:
        return [f"{path}: {exc}"]
    return [f"{path}: {v}" for v in AttackConfig.check(resolved)]


def validate_config(config, command: str | None = None) -> list[str]:
    """Schema violations of a config (path or mapping); empty list iff valid.

    A bare attack parameter mapping (the published parameter tables) is accepted
    when ``command`` is omitted and the mapping has no ``command`` key.
    """
    if not isinstance(config, dict):
        try:
            config = json.loads(Path(config).read_text())
        except json.JSONDecodeError as exc:
            return [f"$: invalid JSON ({exc})"]
        except OSError as exc:
            raise ConfigError(f"cannot read config {config}: {exc}") from exc
    if not isinstance(config, dict):
        return ["$: top level must be an object"]
    config = dict(config)
    command = command or config.pop("command", None)
    config.pop("command", None)
    if command is None:
        return [f"$: {v}" for v in AttackConfig.check(config)]
    if command not in SCHEMA:
        return [f"$.command: unknown command {command!r}; expected one of {list(COMMANDS)}"]
    schema = SCHEMA[command]
    out = [f"$.{k}: unknown key for {command!r}" for k in sorted(set(config) - set(schema))]
    out += [f"$.{k}: missing required key" for k in REQUIRED[command] if k not in config]
    for key, value in config.items():
        kind = schema.get(key)
        path = f"$.{key}"
        if kind is None:
            continue
        if kind == "data":
            out += _check_data(value, path)
        elif kind == "train":
            out += _check_train(value, path)
        elif kind == "attack":
            out += _check_attack(value, path)
        elif value is not None and not isinstance(value, _PY_TYPES[kind]) or (kind in ("int", "float") and isinstance(value, bool)):
            out.append(f"{path}: expected {kind}, got {value!r}")
    if command == "attack" and "preset" in config and "attack" in config:
        out.append("$: give either attack or preset, not both")
    if command == "attack" and "preset" not in config and "attack" not in config:
        out.append("$.attack: missing required key")
    if command == "analyze" and ("flags_csv" in config) == ("detectors" in config):
        out.append("$: exactly one of flags_csv or detectors is required")
    if command == "sweep" and isinstance(config.get("clean_sets"), dict):
        for name, spec in config["clean_sets"].items():
            out += _check_data(spec, f"$.clean_sets.{name}")
    return out


def apply_overrides(config: dict, overrides) -> dict:
    """``a.b=value`` assignments; values parse as JSON when possible."""
    config = copy.deepcopy(config)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.strip().split(".")
        for p in parts[:-1]:
            child = node.get(p)
            if isinstance(child, str) and p.startswith("attack"):
                child = {"preset": child}
            if not isinstance(child, dict):
                child = {}
            node[p] = child
            node = child
        node[parts[-1]] = value
    return config


# ---------------------------------------------------------------------------
# shared loaders


def load_data(spec: dict, base: Path = Path(".")) -> data.Dataset:
    spec = dict(spec)
    norm = spec.get("normalization", "minmax")
    if "csv" in spec:
        ds = data.load_csv(base / spec["csv"], spec.get("label_column", "label"), norm,
                           spec.get("drop_columns", ()))
    elif "dataset" in spec:
        ds = data.read_dataset(base / spec["dataset"])
    elif "donut" in spec:
        ds = data.generate_donut(data.DonutConfig(**spec["donut"]), normalization=norm)
    else:
        raise ConfigError("data section needs csv, dataset or donut")
    if "split" in spec or ds.split_tag is None:
        sp = spec.get("split", {})
        ds = data.split(ds, tuple(sp.get("fractions", (0.6, 0.2, 0.2))), sp.get("seed", 0))
    if "select" in spec:
        ds = ds.split_subset(spec["select"])
    return ds


def _train_cfg(d) -> nn.TrainConfig:
    return nn.TrainConfig.from_dict(d or {})


def _attack_cfg(d) -> AttackConfig:
    return AttackConfig.from_dict(_resolve_attack(d))


def _load_model(path, base: Path, input_dim=None) -> nn.MlpModel:
    return nn.load(base / path, input_dim)


def _architecture(cfg: dict, ds: data.Dataset) -> str:
    arch = cfg.get("architecture")
    if arch is None:
        arch = next((k for k, v in nn.ARCHITECTURES.items() if v == ds.d), "higgs")
    if arch not in nn.ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}")
    return arch


# ---------------------------------------------------------------------------
# commands; each returns the metrics dict recorded in the manifest


def cmd_donut(cfg, w: pipelines.ArtifactWriter, base: Path) -> dict:
    ds = data.generate_donut(data.DonutConfig(**cfg.get("donut", {})), cfg.get("normalization", "minmax"))
    sp = cfg.get("split")
    if sp is not None:
        ds = data.split(ds, tuple(sp.get("fractions", (0.6, 0.2, 0.2))), sp.get("seed", 0))
    w.dataset("donut", ds)
    return {"n": ds.n, "n_signal": int(ds.labels.sum()), "n_background": int((ds.labels == 0).sum())}


def cmd_train(cfg, w, base) -> dict:
    ds = load_data(cfg["data"], base)
    arch = _architecture(cfg, ds)
    tc = _train_cfg(cfg.get("train"))
    model, hist = pipelines._train(arch, ds.split_subset("train"), ds.split_subset("val"), tc, cfg.get("seed", 0))
    w.model("model", model)
    out = {"architecture": arch, "trainable_params": model.trainable_param_count,
           "best_epoch": hist.best_epoch, "epochs_run": len(hist.train_loss)}
    for tag in ("val", "test"):
        part = ds.split_subset(tag)
        scores, labels = nn.predict(model, part.features)
        out[f"{tag}_auroc"] = stats.auroc(scores, part.labels)
        out[f"{tag}_accuracy"] = float(np.mean(labels == part.labels))
    w.table("history", [{"epoch": i, "train_loss": tl, "val_loss": hist.val_loss[i] if i < len(hist.val_loss) else None}
                        for i, tl in enumerate(hist.train_loss)])
    return out


def cmd_attack(cfg, w, base) -> dict:
    ds = load_data(cfg["data"], base)
    model = _load_model(cfg["model"], base, ds.d)
    acfg = _attack_cfg(cfg["attack"] if "attack" in cfg else cfg["preset"])
    target = ds.split_subset(cfg.get("split", "test"))
    if cfg.get("attack_label") is not None:
        target = target.subset(target.labels == cfg["attack_label"])
    restriction = partition = None
    if cfg.get("restricted"):
        partition = data.find_best_single_cut(target)
        restriction = RestrictionSpec.from_partition(partition)
    _CONTEXT["stage"] = "attack"
    result = run_attack(model, target.features, acfg, target.feature_bounds, restriction)
    mode = "distance_correlation" if acfg.use_disco else "pearson"
    report = evaluate_attack(target, result, model, restriction, acfg.num_bins, mode,
                             subsample_cap=acfg.disco_subsample_cap, seed=acfg.seed)
    report.pop("clean_correlation")
    report.pop("adversarial_correlation")
    w.dataset("clean", target)
    w.dataset("adversarial", target.with_features(result.adversarial_features))
    w.table("trace", result.per_iteration_trace)
    w.table("changes", [dict(zip(result.changes.dtype.names, (x.item() for x in row))) for row in result.changes])
    rows = restriction.restricted_mask if restriction is not None else np.ones(target.n, bool)
    snaps = {}
    for name, X in (("clean", target.features), ("adversarial", result.adversarial_features)):
        snaps[name] = stats.StatsSnapshot.from_matrix(X[rows], acfg.num_bins, target.feature_bounds, mode,
                                                      acfg.disco_subsample_cap, acfg.seed).to_json(target.feature_names)
    w.json("snapshots", snaps)
    metrics = {
        "fooling_ratio": result.fooling_ratio,
        "final_mean_jsd": result.final_mean_jsd,
        "final_delta_fn": result.final_delta_fn,
        "report_mean_jsd": report["mean_jsd"],
        "report_delta_fn": report["delta_fn"],
        "audit_passed": result.audit["passed"],
        "candidate_cap_hits": result.candidate_cap_hits,
        "n_changes": int(result.changes.size),
        "attack_config": acfg.to_dict(),
        "restricted_mask_rows": int(rows.sum()),
    }
    if partition is not None:
        metrics["cut"] = {"feature": target.feature_names[partition.cut_feature],
                          "threshold": partition.cut_threshold, "negated": partition.negated,
                          "accuracy": partition.accuracy}
    w.json("report", {**report, **{k: v for k, v in metrics.items() if k not in report}})
    return metrics


def _detect_runs(cfg, ds, arch, w):
    runs = cfg.get("runs", 1)
    seed0 = cfg.get("seed", 0)
    reports, detectors, test_sets, rows = [], [], [], []
    for r in range(runs):
        seed = seed0 + r
        _CONTEXT["stage"] = f"detect[{seed}]"
        a_tr = _attack_cfg(cfg["attack_train"])
        a_te = _attack_cfg(cfg["attack_test"])
        a_tr.seed = a_te.seed = seed
        tc = _train_cfg({**cfg.get("train", {}), "seed": seed})
        dc = _train_cfg({**cfg.get("detector_train", cfg.get("train", {})), "seed": seed})
        model, det, rep, res = pipelines.detector_pipeline(
            ds, tc, a_tr, a_te, dc, arch, seed, cfg.get("attack_label"), threshold=cfg.get("threshold", 0.5))
        w.model(f"classifier_{seed}", model)
        w.model(f"detector_{seed}", det)
        tgt, test_res = res["test"]
        w.dataset(f"adversarial_test_{seed}", tgt.with_features(test_res.adversarial_features))
        reports.append(rep)
        detectors.append(det)
        test_sets.append((test_res.adversarial_features, test_res.fooled_mask))
        rows.append({"run": r, "seed": seed, **{k: v for k, v in asdict(rep).items() if k != "attack_metrics"}})
    return reports, detectors, test_sets, rows


def cmd_detect(cfg, w, base) -> dict:
    ds = load_data(cfg["data"], base)
    arch = _architecture(cfg, ds)
    reports, detectors, test_sets, rows = _detect_runs(cfg, ds, arch, w)
    w.table("metrics", rows)
    w.table("fr_scatter", [{"run": r["run"], "initial_fooling_ratio": r["initial_fooling_ratio"],
                            "corrected_fooling_ratio": r["corrected_fooling_ratio"]} for r in rows])
    out = {"runs": rows}
    if len(detectors) > 1:
        M = pipelines.cross_run_corrected_fr(detectors, test_sets, cfg.get("threshold", 0.5))
        w.table("cross_run_corrected_fr", [{"detector_run": i, **{f"adversaries_run_{j}": float(M[i, j])
                                            for j in range(M.shape[1])}} for i in range(M.shape[0])])
        out["cross_run_mean_corrected_fr"] = M.mean(axis=1).tolist()
    for key in ("initial_fooling_ratio", "corrected_fooling_ratio", "clean_efficiency", "adversarial_efficiency"):
        out[f"median_{key}"] = float(np.median([getattr(r, key) for r in reports]))
    return out


def cmd_augment(cfg, w, base) -> dict:
    ds = load_data(cfg["data"], base)
    arch = _architecture(cfg, ds)
    rows = []
    for r in range(cfg.get("runs", 1)):
        seed = cfg.get("seed", 0) + r
        _CONTEXT["stage"] = f"augment[{seed}]"
        acfg = _attack_cfg(cfg["attack"])
        acfg.seed = seed
        _, _, rep = pipelines.augment_pipeline(ds, _train_cfg({**cfg.get("train", {}), "seed": seed}), acfg,
                                               arch, seed, cfg.get("train_rows"))
        rows.append({"run": r, "seed": seed, **asdict(rep), "gain": rep.gain})
    w.table("metrics", rows)
    return {"runs": rows, "mean_gain": float(np.mean([r["gain"] for r in rows]))}


def cmd_advtrain(cfg, w, base) -> dict:
    ds = load_data(cfg["data"], base)
    arch = _architecture(cfg, ds)
    seeds = [cfg.get("seed", 0) + r for r in range(cfg.get("runs", 1))]
    ranges = {k: tuple(v) for k, v in cfg.get("ranges", {}).items()} or pipelines.RETRAIN_RANGES
    _CONTEXT["stage"] = "advtrain"
    tables = pipelines.adversarial_training_runs(ds, _train_cfg(cfg.get("train")), _attack_cfg(cfg["attack_test"]),
                                                 cfg["iterations"], seeds, ranges, architecture=arch)
    rows = [{"run": i, "seed": seeds[i], **{k: v for k, v in asdict(t).items() if k != "attack_config"}}
            for i, table in enumerate(tables) for t in table]
    w.table("metrics", rows)
    w.json("sampled_attack_configs", {"runs": [[t.attack_config for t in table] for table in tables]})
    best = [min(t.fooling_ratio for t in table[1:]) for table in tables]
    mean_iter = [float(np.mean([t.fooling_ratio for t in table[1:]])) for table in tables]
    return {"runs": rows, "baseline_fr": [table[0].fooling_ratio for table in tables],
            "best_iteration_fr": best, "iteration_mean_fr": mean_iter}


def _read_flags(path: Path) -> np.ndarray:
    try:
        F = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: flags must be a numeric 0/1 matrix ({exc})") from exc
    if not np.all(np.isin(F, (0, 1))):
        raise DataError(f"{path}: flags must be 0/1")
    return F.astype(bool)


def cmd_analyze(cfg, w, base) -> dict:
    if "flags_csv" in cfg:
        F = _read_flags(base / cfg["flags_csv"])
    else:
        if "data" not in cfg:
            raise ConfigError("analyze with detectors needs a data section")
        ds = load_data(cfg["data"], base)
        thr = cfg.get("threshold", pipelines.DETECTOR_THRESHOLD)
        F = np.array([nn.predict(_load_model(p, base, ds.d), ds.features)[0] < thr for p in cfg["detectors"]])
    tally = pipelines.significance_analysis(F, cfg.get("alpha", 0.05))
    w.table("misclassification_bins", tally.rows())
    return {"R": tally.R, "N": tally.N, "mean_accuracy": tally.mean_accuracy, "p": tally.p,
            "significant_bins": [int(k) for k in np.flatnonzero(tally.significant)], "bins": tally.rows()}


def cmd_sweep(cfg, w, base) -> dict:
    detectors = [_load_model(p, base) for p in cfg["detectors"]]
    sets = {name: load_data(spec, base).features for name, spec in cfg["clean_sets"].items()}
    sweep = pipelines.efficiency_sweep(detectors, sets, cfg.get("thresholds", pipelines.DEFAULT_SWEEP))
    rows = pipelines.sweep_rows(sweep)
    w.table("efficiency_curve", rows)
    return {"curve": rows}


def cmd_workflow(cfg, w, base) -> dict:
    ds = load_data(cfg["data"], base)
    arch = _architecture(cfg, ds)
    seed = cfg.get("seed", 0)
    a_tr, a_te = _attack_cfg(cfg["attack_train"]), _attack_cfg(cfg["attack_test"])
    tc = _train_cfg({**cfg.get("train", {}), "seed": seed})
    dc = _train_cfg({**cfg.get("detector_train", cfg.get("train", {})), "seed": seed})
    _CONTEXT["stage"] = "workflow"
    return pipelines.workflow(ds, tc, a_tr, a_te, float(cfg["budget"]), dc, arch, seed,
                              cfg.get("attack_label"), writer=w)


def audit_attack_dir(attack_dir) -> dict:
    """Recompute an attack output's statistics from its CSVs and compare with its report."""
    d = Path(attack_dir)
    try:
        report = json.loads((d / "report.json").read_text())
        snaps = json.loads((d / "snapshots.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{d} is not an attack output directory: {exc}") from exc
    clean = data.read_dataset(d / "clean.csv")
    adv = data.read_dataset(d / "adversarial.csv")
    if clean.features.shape != adv.features.shape:
        raise DataError("clean and adversarial matrices differ in shape")
    acfg = report["attack_config"]
    mode = "distance_correlation" if acfg["use_disco"] else "pearson"
    rows = np.ones(clean.n, bool)
    if report.get("restricted_mask_rows", clean.n) != clean.n:
        part = data.find_best_single_cut(clean)
        rows = part.control_mask
    fresh = {}
    for name, ds in (("clean", clean), ("adversarial", adv)):
        fresh[name] = stats.StatsSnapshot.from_matrix(ds.features[rows], acfg["num_bins"], clean.feature_bounds, mode,
                                                      acfg["disco_subsample_cap"], acfg["seed"])
    jsd = stats.per_feature_jsd(fresh["clean"].histograms, fresh["adversarial"].histograms)
    dfn = stats.delta_fn(fresh["clean"].correlation_matrix, fresh["adversarial"].correlation_matrix)
    diffs = {
        "mean_jsd": abs(float(np.mean(jsd)) - report["final_mean_jsd"]),
        "delta_fn": abs(dfn - report["final_delta_fn"]),
        "histogram_counts": max(
            float(np.max(np.abs(np.array(h["counts"]) - fresh[name].histograms.counts[j])))
            for name in ("clean", "adversarial") for j, h in enumerate(snaps[name]["histograms"])),
        "correlation": max(
            float(np.max(np.abs(np.array(snaps[name]["correlation"]) - fresh[name].correlation_matrix)))
            for name in ("clean", "adversarial")),
    }
    return {"differences": diffs, "passed": all(v <= AUDIT_TOL for v in diffs.values()), "tolerance": AUDIT_TOL}


def cmd_audit(cfg, w, base) -> dict:
    out = audit_attack_dir(base / cfg["attack_dir"])
    w.json("audit", out)
    if not out["passed"]:
        raise NumericError(f"audit mismatch above {AUDIT_TOL}: {out['differences']}")
    return out


HANDLERS = {
    "donut": cmd_donut, "train": cmd_train, "attack": cmd_attack, "detect": cmd_detect, "augment": cmd_augment,
    "advtrain": cmd_advtrain, "analyze": cmd_analyze, "sweep": cmd_sweep, "workflow": cmd_workflow,
    "audit": cmd_audit,
}


# ---------------------------------------------------------------------------
# entry points


def run(command: str, config: dict, output_dir, base: Path = Path(".")) -> dict:
    """Validate, execute and record one command; returns the manifest metrics."""
    problems = validate_config(config, command)
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    seeds = {k: v for k, v in config.items() if k == "seed"}
    manifest = pipelines.RunManifest.create(command, seeds, {"command": command, "config": config,
                                                             "base": str(Path(base).resolve())})
    _CONTEXT["run_id"], _CONTEXT["stage"] = manifest.run_id, command
    if command == "workflow" and config.get("dry_run"):
        log.info("dry run: config valid, nothing written")
        return {"dry_run": True, "run_id": manifest.run_id}
    writer = pipelines.ArtifactWriter(output_dir, manifest)
    metrics = HANDLERS[command](config, writer, Path(base))
    writer.finish(metrics)
    log.info("wrote %s", Path(output_dir) / "manifest.json")
    return pipelines._jsonable(metrics)


def replay(manifest_path, output_dir=None) -> tuple[bool, dict, dict]:
    """Re-run a recorded command and compare its metrics with the recorded ones."""
    m = pipelines.RunManifest.read(manifest_path)
    cfgs = m.configs
    if "command" not in cfgs or "config" not in cfgs:
        raise ConfigError(f"{manifest_path} does not record a command")
    out = output_dir or tempfile.mkdtemp(prefix="replay-")
    fresh = run(cfgs["command"], cfgs["config"], out, Path(cfgs.get("base", ".")))
    return fresh == m.metrics, m.metrics, fresh


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conservattack", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, help=f"run the {name} stage")
        s.add_argument("--config", "-c", required=name not in ("audit", "donut"), help="JSON config file")
        s.add_argument("--output-dir", "-o", help=f"artifact directory (default ${OUTPUT_DIR_ENV} or ./runs/<command>)")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value (dotted keys, JSON values)")
        if name == "audit":
            s.add_argument("attack_dir", nargs="?", help="output directory of an attack run")
    v = sub.add_parser("validate", help="check a config file and list schema violations")
    v.add_argument("config")
    v.add_argument("--command", dest="schema", choices=COMMANDS, help="schema to check against (default: the file's command key)")
    r = sub.add_parser("replay", help="re-run a manifest and compare metrics bitwise")
    r.add_argument("manifest")
    r.add_argument("--output-dir", "-o")
    sub.add_parser("presets", help="list built-in attack parameter sets")
    return p


def _default_output(command: str) -> Path:
    root = os.environ.get(OUTPUT_DIR_ENV)
    return Path(root) / command if root else Path("runs") / command


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s run_id=%(run_id)s stage=%(stage)s %(message)s"))
    handler.addFilter(_ContextFilter())
    root = logging.getLogger("conservattack")
    root.handlers[:] = [handler]
    root.setLevel(args.log_level)
    root.propagate = False
    try:
        if args.command == "validate":
            problems = validate_config(args.config, args.schema)
            for line in problems:
                print(line)
            print("valid" if not problems else f"{len(problems)} problem(s)")
            return 0 if not problems else ConfigError.exit_code
        if args.command == "presets":
            print(json.dumps(PRESETS, indent=2))
            return 0
        if args.command == "replay":
            same, old, new = replay(args.manifest, args.output_dir)
            print("identical metrics" if same else "metrics differ")
            return 0 if same else 5
        config: dict = {}
        base = Path(".")
        if args.config:
            path = Path(args.config)
            try:
                config = json.loads(path.read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            if not isinstance(config, dict):
                raise ConfigError(f"{path}: top level must be an object")
            config.pop("command", None)
            base = path.parent
        if args.command == "audit" and args.attack_dir:
            config["attack_dir"] = str(Path(args.attack_dir).resolve())
        config = apply_overrides(config, args.overrides)
        out = Path(args.output_dir) if args.output_dir else _default_output(args.command)
        metrics = run(args.command, config, out, base)
        print(json.dumps({k: v for k, v in metrics.items() if not isinstance(v, (list, dict))}, indent=2))
        return 0
    except ConservAttackError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("internal error: %s", exc)
        return 5


if __name__ == "__main__":
    sys.exit(main())
