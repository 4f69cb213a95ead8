"""Experiment orchestration: methods x seeds x steps, reports and comparison.

A run is a grid of independent cells (method, seed). Each cell executes the
full incremental pipeline and yields per-step metrics; the report aggregates
seed means/stddevs per method. Cells may run in parallel worker processes
(BGSHIFT_WORKERS, default 1); results are keyed, so the report is identical
either way.
"""
from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import ComparisonError, ConfigError
from .losses import method_preset
from .model import BackboneConfig, save_checkpoint
from .scenario import (
    LabelSchedule,
    Sample,
    SyntheticConfig,
    build_schedule,
    generate_synthetic,
    load_dataset,
)
from .trainer import TrainConfig, joint_config, run_incremental

TIE_BAND = 0.5  # mIoU points


@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | dir
    path: str | None = None
    eval_path: str | None = None
    seed: int = 0
    num_fg_classes: int = 5
    num_train: int = 200
    num_eval: int = 50
    height: int = 64
    width: int = 64
    blobs_per_image: int = 3


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule_sizes: list[int] = field(default_factory=lambda: [4, 1])
    class_order: str = "index"
    order_seed: int = 0
    protocol: str = "overlapped"
    methods: list[str] = field(default_factory=lambda: ["FT"])
    seeds: list[int] = field(default_factory=lambda: [0])
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str | None = None
    save_checkpoints: bool = True

    def __post_init__(self):
        if not self.methods or not self.seeds:
            raise ConfigError("need at least one method and one seed")
        if sum(self.schedule_sizes) != self.dataset.num_fg_classes:
            raise ConfigError(
                f"schedule {self.schedule_sizes} does not cover {self.dataset.num_fg_classes} classes"
            )
        for m in self.methods:
            method_preset(m)  # validate names early


def build_corpora(spec: DatasetSpec) -> tuple[list[Sample], list[Sample]]:
    """(train corpus, eval corpus) from a synthetic config or a directory."""
    if spec.kind == "synthetic":
        cfg = SyntheticConfig(
            num_fg_classes=spec.num_fg_classes,
            num_images=spec.num_train + spec.num_eval,
            height=spec.height,
            width=spec.width,
            blobs_per_image=spec.blobs_per_image,
        )
        samples = generate_synthetic(spec.seed, cfg)
        return samples[: spec.num_train], samples[spec.num_train :]
    if spec.kind == "dir":
        if not spec.path or not spec.eval_path:
            raise ConfigError("dir datasets need both path and eval_path")
        train = load_dataset(spec.path)
        heldout = load_dataset(spec.eval_path)
        if train.num_classes != heldout.num_classes:
            raise ConfigError("train and eval directories declare different class counts")
        return train.samples, heldout.samples
    raise ConfigError(f"unknown dataset kind {spec.kind!r}")


def _cell_spec(config: ExperimentConfig, method: str, seed: int) -> dict:
    return {"config": config_to_dict(config), "method": method, "seed": seed}


def run_cell(spec: dict) -> dict:
    """Execute one (method, seed) cell; returns a plain serializable record."""
    config = config_from_dict(spec["config"])
    method_name, seed = spec["method"], spec["seed"]
    schedule = build_schedule(
        config.dataset.num_fg_classes, config.schedule_sizes, config.class_order, config.order_seed
    )
    corpus, eval_corpus = build_corpora(config.dataset)
    cfg = replace(config.train, seed=seed, method=method_preset(method_name))
    started = time.perf_counter()
    if method_name.upper() == "JOINT":
        run = run_incremental(
            corpus, eval_corpus, schedule.joint(), config.protocol, joint_config(cfg), schedule
        )
    else:
        run = run_incremental(corpus, eval_corpus, schedule, config.protocol, cfg)
    elapsed = time.perf_counter() - started
    record = {
        "method": method_name,
        "seed": seed,
        "status": "ok",
        "seconds": elapsed,
        "steps": [
            {
                "step": i,
                "metrics": run.metrics[i].as_dict(),
                "loss_trace": run.results[i].loss_trace,
                "iterations": run.results[i].iterations,
            }
            for i in range(len(run.results))
        ],
        "excluded_images": list(run.split_report.excluded_ids),
        "background_shift": run.split_report.per_step,
    }
    if config.out_dir and config.save_checkpoints:
        ckpt_dir = Path(config.out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        for i, result in enumerate(run.results):
            save_checkpoint(result.model, ckpt_dir / f"{method_name}-seed{seed}-step{i}.npz")
    return record


def _safe_run_cell(spec: dict) -> dict:
    try:
        return run_cell(spec)
    except Exception as e:  # keep other cells running
        return {
            "method": spec["method"],
            "seed": spec["seed"],
            "status": "failed",
            "error": f"{type(e).__name__}: {e}",
            "steps": [],
        }


def run_experiment(config: ExperimentConfig) -> dict:
    """Run all cells, aggregate, and (optionally) write report files."""
    cells = [_cell_spec(config, m, s) for m in config.methods for s in config.seeds]
    workers = int(os.environ.get("BGSHIFT_WORKERS", "1"))
    records: dict[tuple[str, int], dict] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for spec, rec in zip(cells, pool.map(_safe_run_cell, cells)):
                records[(spec["method"], spec["seed"])] = rec
    else:
        for spec in cells:
            records[(spec["method"], spec["seed"])] = _safe_run_cell(spec)

    report = {
        "config": config_to_dict(config),
        "cells": [records[(m, s)] for m in config.methods for s in config.seeds],
        "aggregate": _aggregate(config, records),
        "ok": all(r["status"] == "ok" for r in records.values()),
    }
    if config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        (out / "miou.csv").write_text(report_csv(report))
    return report


def _aggregate(config: ExperimentConfig, records: dict) -> dict:
    agg = {}
    for method in config.methods:
        rows = [records[(method, s)] for s in config.seeds if records[(method, s)]["status"] == "ok"]
        if not rows:
            agg[method] = {"status": "failed"}
            continue
        final = [r["steps"][-1]["metrics"] for r in rows]
        n_groups = max(len(f["group_miou"]) for f in final)
        group_mean, group_std = [], []
        for g in range(n_groups):
            vals = [f["group_miou"][g] for f in final if g < len(f["group_miou"])]
            vals = [v for v in vals if v is not None]
            group_mean.append(float(np.mean(vals)) if vals else None)
            group_std.append(float(np.std(vals)) if vals else None)
        alls = [f["all_miou"] for f in final]
        agg[method] = {
            "status": "ok",
            "group_mean": group_mean,
            "group_std": group_std,
            "all_mean": float(np.mean(alls)),
            "all_std": float(np.std(alls)),
        }
    return agg


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6g}"


def report_csv(report: dict) -> str:
    """Flat per-(method, seed, step) mIoU table."""
    n_groups = len(report["config"]["schedule_sizes"])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["method", "seed", "step"]
        + [f"group{g}_miou" for g in range(n_groups)]
        + ["all_miou", "fg_miou"]
    )
    for cell in report["cells"]:
        if cell["status"] != "ok":
            continue
        for step in cell["steps"]:
            m = step["metrics"]
            groups = [
                _fmt(m["group_miou"][g]) if g < len(m["group_miou"]) else ""
                for g in range(n_groups)
            ]
            writer.writerow(
                [cell["method"], cell["seed"], step["step"]]
                + groups
                + [_fmt(m["all_miou"]), _fmt(m["fg_miou"])]
            )
    return buf.getvalue()


def final_seed_mean(report: dict, method: str) -> dict:
    """Seed-mean final-step metrics {group{g}: x, all: y} for one method."""
    cells = [
        c for c in report["cells"] if c["method"] == method and c["status"] == "ok"
    ]
    if not cells:
        raise ComparisonError(f"method {method!r} has no successful cells")
    out = {}
    n_groups = max(len(c["steps"][-1]["metrics"]["group_miou"]) for c in cells)
    for g in range(n_groups):
        vals = [
            c["steps"][-1]["metrics"]["group_miou"][g]
            for c in cells
            if g < len(c["steps"][-1]["metrics"]["group_miou"])
        ]
        vals = [v for v in vals if v is not None]
        out[f"group{g}"] = float(np.mean(vals)) if vals else None
    out["all"] = float(np.mean([c["steps"][-1]["metrics"]["all_miou"] for c in cells]))
    return out


def compare_report(report: dict, baseline_method: str, target_method: str) -> dict:
    """Per-cell verdicts on seed-mean final metrics (tie band 0.5 points)."""
    base = final_seed_mean(report, baseline_method)
    target = final_seed_mean(report, target_method)
    verdicts = {}
    for key in base:
        b, t = base.get(key), target.get(key)
        if b is None or t is None:
            verdicts[key] = "missing"
            continue
        diff = (t - b) * 100.0  # mIoU points
        if abs(diff) < TIE_BAND:
            verdicts[key] = "tie"
        elif diff > 0:
            verdicts[key] = "target_higher"
        else:
            verdicts[key] = "baseline_higher"
    return verdicts


# ---------------------------------------------------------------------------
# config (de)serialization: nested dicts <-> dataclasses, dotted-key files


def config_to_dict(config: ExperimentConfig) -> dict:
    d = asdict(config)
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    dataset = DatasetSpec(**d.pop("dataset", {}))
    train_d = dict(d.pop("train", {}))
    method_d = train_d.pop("method", None)
    backbone_d = train_d.pop("backbone", None)
    train = TrainConfig(**train_d)
    if method_d:
        train = replace(train, method=replace(train.method, **method_d))
    if backbone_d:
        train = replace(train, backbone=BackboneConfig(**backbone_d))
    return ExperimentConfig(dataset=dataset, train=train, **d)


def _parse_scalar(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    if "," in s:
        return [_parse_scalar(p) for p in s.split(",")]
    return s


def _assign(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot nest under scalar key {k!r}")
    node[keys[-1]] = value


_LIST_KEYS = {"methods", "seeds", "schedule_sizes"}


def parse_config_text(text: str) -> dict:
    """``a.b.c = value`` lines with # comments into a nested dict."""
    tree: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        parsed = _parse_scalar(value)
        if key.split(".")[-1] in _LIST_KEYS and not isinstance(parsed, list):
            parsed = [parsed]
        _assign(tree, key, parsed)
    return tree


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    """--key=value strings merged onto the config tree."""
    for item in overrides:
        body = item[2:] if item.startswith("--") else item
        if "=" not in body:
            raise ConfigError(f"override {item!r} must look like --key=value")
        key, value = body.split("=", 1)
        parsed = _parse_scalar(value)
        if key.split(".")[-1] in _LIST_KEYS and not isinstance(parsed, list):
            parsed = [parsed]
        _assign(tree, key.strip(), parsed)
    return tree


def load_experiment_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    tree = parse_config_text(Path(path).read_text())
    if overrides:
        apply_overrides(tree, overrides)
    return config_from_dict(tree)
