"""Prior-focused baselines: parameter-importance estimates and their penalty.

Fisher importance is the mean squared gradient of the per-pixel cross-entropy
at sampled pixels; the path-integral importance accumulates -grad * step over
the training trajectory; their combination normalizes each score by its max
and sums. ``quadratic_penalty`` turns an importance state into a
differentiable drift penalty anchored at the previous step's parameters.
Classifier columns added after the anchor was taken have no anchor and are
excluded from the penalty.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .exceptions import AlignmentError, EstimationError
from .losses import cross_entropy
from .model import SegModel
from .numerics import Tensor


@dataclass
class ImportanceState:
    """Per-parameter importance plus the anchor it penalizes drift from."""

    method: str
    importance: dict[str, np.ndarray]
    anchor: dict[str, np.ndarray]
    sample_count: int = 0
    # path-integral accumulators (only for method pi/rw)
    pi_omega: dict[str, np.ndarray] = field(default_factory=dict)
    pi_start: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, imp in self.importance.items():
            if (imp < 0).any():
                raise EstimationError(f"negative importance for {name}")
            if name in self.anchor and self.anchor[name].shape != imp.shape:
                raise AlignmentError(f"importance/anchor shape mismatch for {name}")


def _param_arrays(model: SegModel) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.parameters().items()}


def fisher_diagonal(
    model: SegModel,
    dataset,
    n_samples: int = 64,
    rng: np.random.Generator | None = None,
) -> ImportanceState:
    """Mean squared gradient of the single-pixel cross-entropy at sampled pixels."""
    items = list(dataset.items) if hasattr(dataset, "items") else list(dataset)
    if not items:
        raise EstimationError("cannot estimate Fisher importance from an empty dataset")
    rng = rng or np.random.default_rng(0)
    acc = {name: np.zeros_like(t.data) for name, t in model.parameters().items()}
    order = model.known_classes
    for _ in range(n_samples):
        item = items[int(rng.integers(len(items)))]
        image, mask = item.image, item.mask
        r = int(rng.integers(mask.shape[0]))
        c = int(rng.integers(mask.shape[1]))
        flat_idx = r * mask.shape[1] + c
        model.zero_grad()
        logits, _ = model.forward_batch(image[None])
        flat = nm.reshape(logits, (-1, logits.data.shape[-1]))
        single = _row_slice(flat, flat_idx)
        loss = cross_entropy(single, np.array([mask.reshape(-1)[flat_idx]]), order)
        loss.backward()
        for name, t in model.parameters().items():
            if t.grad is not None:
                acc[name] += t.grad**2
    model.zero_grad()
    importance = {name: a / n_samples for name, a in acc.items()}
    return ImportanceState("ewc", importance, _param_arrays(model), sample_count=n_samples)


def _row_slice(flat_logits: Tensor, row: int) -> Tensor:
    """Pick one row of a [N, K] tensor, keeping the graph (one-hot matmul)."""
    n = flat_logits.data.shape[0]
    sel = np.zeros((1, n))
    sel[0, row] = 1.0
    return nm.matmul(nm.as_tensor(sel), flat_logits)


def new_path_state(model: SegModel) -> ImportanceState:
    """Start path-integral bookkeeping at the current parameters."""
    zeros = {name: np.zeros_like(t.data) for name, t in model.parameters().items()}
    start = _param_arrays(model)
    return ImportanceState(
        "pi",
        {name: np.zeros_like(v) for name, v in start.items()},
        dict(start),
        pi_omega=zeros,
        pi_start={k: v.copy() for k, v in start.items()},
    )


def path_integral_update(
    state: ImportanceState, grads: dict[str, np.ndarray], deltas: dict[str, np.ndarray]
) -> ImportanceState:
    """Accumulate omega += -grad * delta for one optimizer step."""
    for name, g in grads.items():
        if name not in state.pi_omega:
            raise AlignmentError(f"unknown parameter {name} in path update")
        d = deltas[name]
        if g.shape != state.pi_omega[name].shape or d.shape != g.shape:
            raise AlignmentError(f"shape mismatch for {name} in path update")
        state.pi_omega[name] += -g * d
    return state


def finalize_path_importance(
    state: ImportanceState, model: SegModel, damping: float = 0.1
) -> ImportanceState:
    """Convert accumulated omega into importance, clamped non-negative."""
    importance = {}
    for name, t in model.parameters().items():
        omega = state.pi_omega[name]
        disp = t.data - state.pi_start[name]
        importance[name] = np.maximum(omega, 0.0) / (disp**2 + damping)
    return ImportanceState("pi", importance, _param_arrays(model), sample_count=state.sample_count)


def rw_importance(fisher_state: ImportanceState, path_state: ImportanceState) -> ImportanceState:
    """Sum of the two scores, each normalized by its own max (if non-zero)."""
    if set(fisher_state.importance) != set(path_state.importance):
        raise AlignmentError("fisher and path states cover different parameters")
    combined = {}
    for name, f in fisher_state.importance.items():
        p = path_state.importance[name]
        if f.shape != p.shape:
            raise AlignmentError(f"shape mismatch for {name} between fisher and path scores")
        combined[name] = _normalized(f) + _normalized(p)
    return ImportanceState("rw", combined, dict(fisher_state.anchor))


def _normalized(a: np.ndarray) -> np.ndarray:
    m = a.max() if a.size else 0.0
    return a / m if m > 0 else a.copy()


def quadratic_penalty(model: SegModel, state: ImportanceState, weight: float) -> Tensor:
    """weight * sum_i importance_i * (theta_i - anchor_i)^2 over anchored params.

    Head columns beyond the anchor's width (classes added after the anchor
    was taken) are skipped.
    """
    total = None
    for name, t in model.parameters().items():
        anchor = state.anchor.get(name)
        imp = state.importance.get(name)
        if anchor is None or imp is None:
            continue
        cur = t
        if t.data.shape != anchor.shape:
            if t.data.shape[:-1] != anchor.shape[:-1] or t.data.shape[-1] < anchor.shape[-1]:
                raise AlignmentError(f"anchor for {name} does not embed in the current shape")
            cur = nm.narrow_last(t, 0, anchor.shape[-1])
        diff = cur - nm.as_tensor(anchor)
        term = (diff * diff * nm.as_tensor(imp)).sum()
        total = term if total is None else total + term
    if total is None:
        return nm.as_tensor(0.0)
    return total * float(weight)


def merge_importance(
    prev: ImportanceState | None, new: ImportanceState, model: SegModel
) -> ImportanceState:
    """Accumulate step importances; arrays grown since ``prev`` pad with zeros."""
    if prev is None:
        return new
    importance = {}
    for name, cur in new.importance.items():
        old = prev.importance.get(name)
        if old is None:
            importance[name] = cur.copy()
            continue
        if old.shape == cur.shape:
            importance[name] = old + cur
        else:
            padded = np.zeros_like(cur)
            padded[..., : old.shape[-1]] = old
            importance[name] = padded + cur
    return ImportanceState(new.method, importance, _param_arrays(model))
