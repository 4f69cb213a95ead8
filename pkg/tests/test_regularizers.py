import numpy as np
import pytest

from bgshift import numerics as nm
from bgshift import regularizers as rg
from bgshift.exceptions import AlignmentError, EstimationError
from bgshift.losses import cross_entropy
from bgshift.model import BackboneConfig, SegModel, extend_classifier
from bgshift.scenario import StepDataset, StepItem


def tiny_model(fg=(1,), seed=0):
    return SegModel.create(BackboneConfig(hidden=4, features=4), list(fg), np.random.default_rng(seed))


def tiny_dataset(model, n=3, size=5, seed=1, all_background=False):
    rng = np.random.default_rng(seed)
    items = []
    fg = [c for c in model.known_classes if c != 0]
    for i in range(n):
        image = rng.random((size, size, 3))
        if all_background:
            mask = np.zeros((size, size), dtype=int)
            mask[0, 0] = fg[0]  # one foreground pixel keeps the step dataset valid
        else:
            mask = rng.choice([0] + fg, size=(size, size))
            mask[0, 0] = fg[0]
        items.append(StepItem(f"img{i}", image, mask))
    return StepDataset(items, 0, fg)


# -- fisher -------------------------------------------------------------------


def test_fisher_saturated_model_has_tiny_importance():
    model = tiny_model()
    model.head_w.data[:] = 0.0
    model.head_b.data[:] = [60.0, -60.0]  # certain of background everywhere
    rng = np.random.default_rng(2)
    items = [StepItem("a", rng.random((4, 4, 3)), np.zeros((4, 4), dtype=int))]
    state = rg.fisher_diagonal(model, items, n_samples=8)
    for imp in state.importance.values():
        assert np.isfinite(imp).all()
        assert imp.max() < 1e-10


def test_fisher_bias_mean_of_squares_hand_value():
    # zero head weights: logits = bias only, so grad(bias_c) = q_c - [y=c]
    # with zero bias q = 1/2; on all-background pixels both bias grads are +-1/2
    model = tiny_model()
    model.head_w.data[:] = 0.0
    model.head_b.data[:] = 0.0
    items = [StepItem("a", np.random.default_rng(2).random((4, 4, 3)), np.zeros((4, 4), dtype=int))]
    items[0].mask[0, 0] = 1  # keep the dataset valid; chance of sampling it is accounted below
    ds = StepDataset(items, 0, [1])
    rng = np.random.default_rng(3)
    state = rg.fisher_diagonal(model, ds, n_samples=12, rng=rng)
    # grad magnitude is exactly 1/2 per sampled pixel regardless of its label
    assert np.allclose(state.importance["head.b"], 0.25, atol=1e-12)
    # zero head weights block gradient flow into the backbone
    assert np.allclose(state.importance["backbone.w1"], 0.0)


def test_fisher_matches_finite_difference_oracle():
    model = tiny_model(fg=(1, 2), seed=4)
    ds = tiny_dataset(model, n=2, size=4, seed=5)
    n_samples = 5
    state = rg.fisher_diagonal(model, ds, n_samples=n_samples, rng=np.random.default_rng(6))

    # replay the same pixel draws and square finite-difference gradients
    rng = np.random.default_rng(6)
    acc = {name: np.zeros_like(t.data) for name, t in model.parameters().items()}
    for _ in range(n_samples):
        item = ds.items[int(rng.integers(len(ds.items)))]
        r = int(rng.integers(item.mask.shape[0]))
        c = int(rng.integers(item.mask.shape[1]))
        label = np.array([item.mask[r, c]])
        for name, p in model.parameters().items():

            def pixel_ce(t):
                logits, _ = model.forward_batch(item.image[None])
                flat = nm.reshape(logits, (-1, logits.data.shape[-1]))
                row = rg._row_slice(flat, r * item.mask.shape[1] + c)
                return cross_entropy(row, label, model.known_classes)

            acc[name] += nm.finite_difference_gradient(pixel_ce, p) ** 2
    for name in acc:
        want = acc[name] / n_samples
        got = state.importance[name]
        assert np.abs(got - want).max() < 1e-6, name


def test_fisher_empty_dataset_rejected():
    model = tiny_model()
    with pytest.raises(EstimationError):
        rg.fisher_diagonal(model, StepDataset([], 0, [1]), n_samples=2)


# -- path integral ------------------------------------------------------------


def test_path_zero_deltas_give_zero_importance():
    model = tiny_model()
    state = rg.new_path_state(model)
    zeros = {n: np.zeros_like(t.data) for n, t in model.parameters().items()}
    rg.path_integral_update(state, zeros, zeros)
    final = rg.finalize_path_importance(state, model)
    assert all(np.all(v == 0.0) for v in final.importance.values())


def test_path_hand_arithmetic_single_step():
    model = tiny_model()
    state = rg.new_path_state(model)
    name = "head.b"
    grads = {name: np.full_like(model.head_b.data, -1.0)}
    deltas = {name: np.full_like(model.head_b.data, 0.1)}
    rg.path_integral_update(state, grads, deltas)
    model.head_b.data += 0.1  # total displacement 0.1
    final = rg.finalize_path_importance(state, model, damping=0.1)
    expected = 0.1 / (0.1**2 + 0.1)
    assert np.allclose(final.importance[name], expected)
    assert abs(expected - 0.9091) < 1e-4


def test_path_negative_accumulation_clamped():
    model = tiny_model()
    state = rg.new_path_state(model)
    name = "head.b"
    grads = {name: np.full_like(model.head_b.data, 1.0)}  # -g*d < 0
    deltas = {name: np.full_like(model.head_b.data, 0.1)}
    rg.path_integral_update(state, grads, deltas)
    model.head_b.data += 0.1
    final = rg.finalize_path_importance(state, model)
    assert np.all(final.importance[name] == 0.0)


def test_path_update_rejects_shape_mismatch():
    model = tiny_model()
    state = rg.new_path_state(model)
    with pytest.raises(AlignmentError):
        rg.path_integral_update(state, {"head.b": np.zeros(5)}, {"head.b": np.zeros(5)})


# -- rw combination -----------------------------------------------------------


def fake_state(method, values):
    imp = {"p": np.asarray(values, dtype=float)}
    return rg.ImportanceState(method, imp, {"p": np.zeros_like(imp["p"])})


def test_rw_zero_path_equals_normalized_fisher():
    fisher = fake_state("ewc", [2.0, 4.0])
    path = fake_state("pi", [0.0, 0.0])
    combined = rg.rw_importance(fisher, path)
    assert np.allclose(combined.importance["p"], [0.5, 1.0])


def test_rw_equal_states_double_the_normalized_score():
    a = fake_state("ewc", [1.0, 3.0])
    b = fake_state("pi", [1.0, 3.0])
    combined = rg.rw_importance(a, b)
    assert np.allclose(combined.importance["p"], 2.0 * np.array([1.0, 3.0]) / 3.0)


def test_rw_matches_elementwise_oracle():
    rng = np.random.default_rng(7)
    f = np.abs(rng.normal(size=6))
    p = np.abs(rng.normal(size=6))
    combined = rg.rw_importance(fake_state("ewc", f), fake_state("pi", p))
    assert np.allclose(combined.importance["p"], f / f.max() + p / p.max())


def test_rw_rejects_parameter_mismatch():
    a = fake_state("ewc", [1.0])
    b = rg.ImportanceState("pi", {"q": np.ones(1)}, {"q": np.zeros(1)})
    with pytest.raises(AlignmentError):
        rg.rw_importance(a, b)


# -- quadratic penalty --------------------------------------------------------


def anchored_state(model, importance_value=1.0):
    params = {n: t.data.copy() for n, t in model.parameters().items()}
    imp = {n: np.full_like(v, importance_value) for n, v in params.items()}
    return rg.ImportanceState("ewc", imp, params)


def test_penalty_zero_at_anchor():
    model = tiny_model()
    state = anchored_state(model)
    assert rg.quadratic_penalty(model, state, weight=500.0).item() == 0.0


def test_penalty_hand_product():
    model = tiny_model()
    state = anchored_state(model, importance_value=0.0)
    state.importance["head.b"][0] = 2.0
    model.head_b.data[0] += 0.5
    assert abs(rg.quadratic_penalty(model, state, 1.0).item() - 0.5) < 1e-12


def test_penalty_doubling_weight_doubles_value_and_gradient():
    model = tiny_model(seed=8)
    state = anchored_state(model, importance_value=0.7)
    for t in model.parameters().values():
        t.data += 0.1
    v1 = rg.quadratic_penalty(model, state, 1.0)
    v1.backward()
    g1 = model.head_w.grad.copy()
    model.zero_grad()
    v2 = rg.quadratic_penalty(model, state, 2.0)
    v2.backward()
    assert abs(v2.item() - 2.0 * v1.item()) < 1e-12
    assert np.allclose(model.head_w.grad, 2.0 * g1)


def test_penalty_gradient_matches_finite_differences():
    model = tiny_model(seed=9)
    state = anchored_state(model, importance_value=0.3)
    rng = np.random.default_rng(10)
    for t in model.parameters().values():
        t.data += rng.normal(scale=0.05, size=t.data.shape)
    err = nm.check_gradient(
        lambda t: rg.quadratic_penalty(model, state, 5.0), model.head_w
    )
    assert err < 1e-4


def test_penalty_skips_unanchored_head_columns():
    model = tiny_model(fg=(1,), seed=11)
    state = anchored_state(model)
    grown = extend_classifier(model, [2], init="random", rng=np.random.default_rng(12))
    grown.head_w.data[:, 2] += 100.0  # drift in the new class head is free
    grown.head_b.data[2] += 100.0
    assert rg.quadratic_penalty(grown, state, 1.0).item() < 1e-12
    grown.zero_grad()
    pen = rg.quadratic_penalty(grown, state, 1.0)
    (pen + (grown.head_w * 0.0).sum()).backward()
    assert np.all(grown.head_w.grad[:, 2] == 0.0)


def test_penalty_nonnegative_everywhere():
    rng = np.random.default_rng(13)
    model = tiny_model(seed=14)
    state = anchored_state(model, importance_value=0.5)
    for _ in range(10):
        for t in model.parameters().values():
            t.data += rng.normal(scale=0.2, size=t.data.shape)
        assert rg.quadratic_penalty(model, state, 3.0).item() >= 0.0


def test_importance_state_rejects_negative_importance():
    with pytest.raises(EstimationError):
        rg.ImportanceState("ewc", {"p": np.array([-1.0])}, {"p": np.zeros(1)})
