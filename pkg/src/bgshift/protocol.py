"""Hyperparameter validation without old-task data.

The method-specific weight is chosen on the first incremental step: train the
candidate weights (a fixed log-spaced grid) on 80% of that step's data and
keep the largest weight whose new-class mIoU on the held-out 20% stays within
a tolerated decay of the fine-tuning reference. Larger weights forget less,
so the scan returns the most conservative weight that still learns.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ConfigError
from .scenario import StepDataset

GRID_MANTISSAS = (1, 5)
GRID_EXPONENTS = range(-3, 4)


def hparam_grid() -> list[float]:
    """The candidate weights: A * 10^B for A in {1,5}, B in -3..3."""
    return sorted(a * 10.0**b for b in GRID_EXPONENTS for a in GRID_MANTISSAS)


def split_train_val(
    dataset: StepDataset, ratio: float = 0.8, seed: int = 0
) -> tuple[StepDataset, StepDataset]:
    """Seeded deterministic partition by sample id; val gets floor(n*(1-ratio)),
    at least one sample each side."""
    n = len(dataset)
    if n < 2:
        raise ConfigError("cannot split a dataset with fewer than two samples")
    # the epsilon keeps 10 * (1 - 0.8) from flooring to 1
    n_val = max(1, math.floor(n * (1.0 - ratio) + 1e-9))
    if n_val >= n:
        raise ConfigError("validation split would consume the whole dataset")
    order = sorted(range(n), key=lambda i: dataset.items[i].id)
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [order[i] for i in perm]
    val_idx = set(shuffled[:n_val])
    train_items = [dataset.items[i] for i in range(n) if i not in val_idx]
    val_items = [dataset.items[i] for i in range(n) if i in val_idx]
    mk = lambda items: StepDataset(
        items, dataset.step, list(dataset.new_fg), dataset.background_id, dict(dataset.shift_counts)
    )
    return mk(train_items), mk(val_items)


@dataclass
class SelectionResult:
    weight: float
    satisfied: bool  # False when no grid value met the constraint
    trace: list[tuple[float, float]]  # (candidate, new-class metric)
    reference: float
    threshold: float


def scan_weight_grid(
    metric_fn,
    reference: float,
    grid: list[float] | None = None,
    tolerated_decay: float = 0.2,
) -> SelectionResult:
    """Largest grid weight whose metric stays >= (1 - decay) * reference.

    Falls back to the smallest grid value (flagged) when nothing qualifies,
    so sweeps keep running.
    """
    grid = sorted(grid if grid is not None else hparam_grid())
    if not grid:
        raise ConfigError("empty hyperparameter grid")
    if not 0.0 <= tolerated_decay <= 1.0:
        raise ConfigError("tolerated_decay must lie in [0, 1]")
    threshold = (1.0 - tolerated_decay) * reference
    trace = [(w, float(metric_fn(w))) for w in grid]
    best = None
    for w, metric in trace:
        if metric >= threshold:
            best = w
    if best is None:
        return SelectionResult(grid[0], False, trace, reference, threshold)
    return SelectionResult(best, True, trace, reference, threshold)


def select_method_weight(
    train: StepDataset,
    val: StepDataset,
    method,
    grid: list[float] | None = None,
    tolerated_decay: float = 0.2,
    *,
    train_config,
    model_prev,
    reference_metric: float | None = None,
) -> SelectionResult:
    """Run the weight scan with real trainings on ``train``/``val``.

    ``model_prev`` is the frozen model of the previous step. The reference is
    the fine-tuned model's new-class mIoU on ``val`` (computed here unless
    passed in).
    """
    from .losses import method_preset  # local import to avoid a cycle
    from .scenario import LabelSchedule
    from .trainer import evaluate_model, run_step

    eval_schedule = LabelSchedule(
        tuple(tuple(s) for s in _schedule_steps(model_prev, train)), train.background_id
    )
    step_t = eval_schedule.num_steps - 1
    eval_samples = [_as_full_sample(item) for item in val.items]

    def new_class_miou(model) -> float:
        report = evaluate_model(model, eval_samples, eval_schedule, step_t)
        value = report.group_miou[step_t]
        return float(value) if value is not None else 0.0

    if reference_metric is None:
        ft_cfg = replace(train_config, method=method_preset("FT"))
        reference_metric = new_class_miou(run_step(model_prev, train, ft_cfg).model)

    def metric_at(w: float) -> float:
        cfg = replace(train_config, method=method.with_weight(w))
        return new_class_miou(run_step(model_prev, train, cfg).model)

    return scan_weight_grid(metric_at, reference_metric, grid, tolerated_decay)


def _schedule_steps(model_prev, train: StepDataset) -> list[list[int]]:
    prev_fg = [c for c in model_prev.known_classes if c != train.background_id]
    return [prev_fg, list(train.new_fg)]


def _as_full_sample(item):
    from .scenario import Sample

    return Sample(item.id, item.image, item.mask)
