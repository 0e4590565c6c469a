import numpy as np
import pytest

from more_kit import tensor as T
from more_kit.lora import LoraAdapter
from more_kit.rank_experts import (
    FROZEN_MAPPING,
    MoreLayer,
    RankGate,
    TaskEmbeddingTable,
    allocation_histogram,
    ste_select,
)
from more_kit.tensor import Tensor


def make_layer(m=6, d=6, r=4, num_tasks=8, h=5, seed=0, **flags) -> MoreLayer:
    rng = np.random.default_rng(seed)
    adapter = LoraAdapter.create(m, d, r, seed=seed + 1)
    return MoreLayer(adapter, num_tasks, h, rng, **flags)


def randomize(layer: MoreLayer, seed=0, gate=False) -> None:
    rng = np.random.default_rng(seed)
    layer.adapter.A.data[:] = rng.normal(size=layer.adapter.A.shape)
    layer.adapter.B.data[:] = rng.normal(size=layer.adapter.B.shape)
    if gate:
        layer.gate.W_g.data[:] = rng.normal(size=layer.gate.W_g.shape)
        layer.gate.b_g.data[:] = 0.1 * rng.normal(size=layer.gate.b_g.shape)


# -- gate ---------------------------------------------------------------

def test_zero_gate_is_uniform_and_ties_to_rank_one():
    layer = make_layer(r=4)
    layer.gate.W_g.data[:] = 0.0
    layer.gate.b_g.data[:] = 0.0
    p, r_t = layer.gate_forward(0)
    assert np.allclose(p.data, 0.25, atol=1e-15)
    assert r_t == 1


def test_dominant_logit_selects_its_rank():
    layer = make_layer(r=4)
    layer.gate.W_g.data[:] = 0.0
    layer.gate.b_g.data[:] = [0.0, 0.0, 9.0, 0.0]
    _, r_t = layer.gate_forward(3)
    assert r_t == 3


@pytest.mark.parametrize("seed", range(25))
def test_gate_probabilities_sum_to_one_and_argmax_is_exhaustive(seed):
    layer = make_layer(r=6, h=4, seed=seed)
    for t in range(layer.num_tasks):
        p, r_t = layer.gate_forward(t)
        assert abs(p.data.sum() - 1.0) < 1e-12
        best = 1 + max(range(6), key=lambda i: p.data[i])
        assert r_t == best


def test_gate_rejects_unknown_task():
    layer = make_layer(num_tasks=3)
    with pytest.raises(ValueError):
        layer.gate_forward(3)
    with pytest.raises(ValueError):
        layer.forward(Tensor(np.ones(6)), -1)


def test_argmax_invariant_under_positive_logit_scaling():
    layer = make_layer(r=5, seed=11)
    for t in range(layer.num_tasks):
        _, before = layer.gate_forward(t)
        layer.gate.W_g.data *= 3.0
        layer.gate.b_g.data *= 3.0
        _, after = layer.gate_forward(t)
        layer.gate.W_g.data /= 3.0
        layer.gate.b_g.data /= 3.0
        assert before == after


# -- straight-through multiplier ----------------------------------------

def test_ste_forward_is_exactly_one():
    for p in ([0.2, 0.7, 0.1], [0.5, 0.25, 0.25], [1 / 3, 1 / 3, 1 / 3]):
        mult = ste_select(Tensor(p), 1 + int(np.argmax(p)))
        assert mult.data == 1.0


def test_ste_gradient_is_argmax_indexed_identity():
    p = Tensor([0.2, 0.7, 0.1], requires_grad=True)
    ste_select(p, 2).backward()
    assert np.array_equal(p.grad, [0.0, 1.0, 0.0])


def test_ste_rejects_inconsistent_rank():
    with pytest.raises(ValueError):
        ste_select(Tensor([0.2, 0.7, 0.1]), 1)


def test_ste_training_increases_argmax_logit():
    """Miniature optimization oracle: maximizing the STE multiplier through a
    softmax raises the selected logit."""
    logits = Tensor([0.3, 0.9, -0.2], requires_grad=True)
    start = logits.data[1]
    for _ in range(100):
        p = T.softmax(logits, temperature=1.0)
        loss = T.mul(ste_select(p, 1 + int(np.argmax(p.data))), -1.0)
        logits.zero_grad()
        loss.backward()
        logits.data -= 0.1 * logits.grad
    assert int(np.argmax(logits.data)) == 1
    assert logits.data[1] > start


# -- forward -----------------------------------------------------------

def test_linear_scaling_arithmetic():
    """Selected rank 4 of 8 tasks halves the expert update."""
    layer = make_layer(m=6, d=6, r=4, num_tasks=8, seed=2)
    randomize(layer, seed=3)
    layer.gate.W_g.data[:] = 0.0
    layer.gate.b_g.data[:] = [0.0, 0.0, 0.0, 5.0]  # force rank 4
    x = np.random.default_rng(4).normal(size=(6, 2))
    out = layer.forward(Tensor(x), 0)
    v = layer.adapter.B.data @ (layer.adapter.A.data @ x)  # full prefix at r_t = r
    expected = layer.adapter.w0.data @ x + 0.5 * v
    assert np.array_equal(out.data, expected)  # 0 ulp


def test_zero_b_means_base_output_regardless_of_rank():
    layer = make_layer(seed=5)
    x = np.random.default_rng(6).normal(size=(6, 3))
    out = layer.forward(Tensor(x), 1)
    assert np.array_equal(out.data, layer.adapter.w0.data @ x)


def test_forward_value_equals_plain_truncation_with_scale():
    """The STE multiplier never changes the forward value."""
    layer = make_layer(seed=7)
    randomize(layer, seed=8)
    x = np.random.default_rng(9).normal(size=(6, 2))
    for t in range(layer.num_tasks):
        r_t = layer.current_rank(t)
        A_t = layer.adapter.A.data[:r_t]
        B_t = layer.adapter.B.data[:, :r_t]
        expected = layer.adapter.w0.data @ x + (r_t / layer.num_tasks) * (B_t @ (A_t @ x))
        out = layer.forward(Tensor(x), t)
        assert np.max(np.abs(out.data - expected)) < 1e-12


def test_expert_nesting_shared_prefix():
    layer = make_layer(r=4, seed=10)
    randomize(layer, seed=11)
    a2 = T.slice_rows(layer.adapter.A, 2).data
    a4 = T.slice_rows(layer.adapter.A, 4).data
    assert np.array_equal(a4[:2], a2)
    b1 = T.slice_cols(layer.adapter.B, 1).data
    b3 = T.slice_cols(layer.adapter.B, 3).data
    assert np.array_equal(b3[:, :1], b1)


def test_gradient_reaches_gate_embeddings_and_prefix_only():
    # mid-training state: nonzero gate so the embedding path is live
    layer = make_layer(m=6, d=6, r=4, num_tasks=4, seed=12)
    randomize(layer, seed=13, gate=True)
    x = Tensor(np.random.default_rng(14).normal(size=(6, 3)))
    task = 2
    r_t = layer.current_rank(task)
    out = layer.forward(x, task)
    T.tsum(T.mul(out, out)).backward()

    assert np.linalg.norm(layer.gate.W_g.grad) > 0
    assert np.linalg.norm(layer.gate.b_g.grad) > 0
    e_grad = layer.embeddings.E.grad
    assert np.linalg.norm(e_grad[task]) > 0
    others = np.delete(e_grad, task, axis=0)
    assert np.allclose(others, 0.0)

    a_grad = layer.adapter.A.grad
    b_grad = layer.adapter.B.grad
    assert np.linalg.norm(a_grad[:r_t]) > 0
    assert np.allclose(a_grad[r_t:], 0.0)
    assert np.linalg.norm(b_grad[:, :r_t]) > 0
    assert np.allclose(b_grad[:, r_t:], 0.0)


def test_gate_weight_gradient_nonzero_even_at_zero_init():
    layer = make_layer(m=6, d=6, r=4, num_tasks=4, seed=12)
    randomize(layer, seed=13)
    out = layer.forward(Tensor(np.random.default_rng(14).normal(size=(6, 3))), 1)
    T.tsum(T.mul(out, out)).backward()
    assert np.linalg.norm(layer.gate.W_g.grad) > 0


def test_disable_ste_cuts_gate_gradient():
    layer = make_layer(seed=15, disable_ste=True)
    randomize(layer, seed=16)
    out = layer.forward(Tensor(np.random.default_rng(17).normal(size=(6, 2))), 0)
    T.tsum(T.mul(out, out)).backward()
    assert layer.gate.W_g.grad is None
    assert layer.embeddings.E.grad is None
    assert layer.adapter.A.grad is not None


def test_soft_selection_matches_explicit_prefix_sum():
    layer = make_layer(m=5, d=5, r=3, num_tasks=4, seed=18, soft_selection=True)
    randomize(layer, seed=19)
    x = np.random.default_rng(20).normal(size=(5, 2))
    t = 1
    p = layer.gate.probabilities(layer.embeddings.E.data[t])
    expected = layer.adapter.w0.data @ x
    for j in range(1, 4):
        prefix = layer.adapter.B.data[:, :j] @ layer.adapter.A.data[:j] @ x
        expected = expected + p[j - 1] * (j / 4) * prefix
    out = layer.forward(Tensor(x), t)
    assert np.max(np.abs(out.data - expected)) < 1e-12


def test_disable_linear_scaling_drops_rank_factor():
    layer = make_layer(seed=21, disable_linear_scaling=True)
    randomize(layer, seed=22)
    x = np.random.default_rng(23).normal(size=6)
    t = 0
    r_t = layer.current_rank(t)
    expected = layer.adapter.w0.data @ x + \
        layer.adapter.B.data[:, :r_t] @ (layer.adapter.A.data[:r_t] @ x)
    assert np.max(np.abs(layer.forward(Tensor(x), t).data - expected)) < 1e-12


# -- freezing ----------------------------------------------------------

def test_freeze_reproduces_gated_forward_bit_identically():
    layer = make_layer(seed=24)
    randomize(layer, seed=25)
    rng = np.random.default_rng(26)
    xs = [rng.normal(size=(6, 3)) for _ in range(4)]
    before = [[layer.forward(Tensor(x), t).data for x in xs]
              for t in range(layer.num_tasks)]
    layer.freeze_mapping()
    assert layer.mode == FROZEN_MAPPING
    for t in range(layer.num_tasks):
        for x, prev in zip(xs, before[t]):
            after = layer.forward(Tensor(x), t).data
            assert np.array_equal(after, prev)


def test_frozen_map_entries_in_range():
    layer = make_layer(r=4, seed=27)
    layer.freeze_mapping()
    assert layer.frozen_map.shape == (layer.num_tasks,)
    assert np.all(layer.frozen_map >= 1)
    assert np.all(layer.frozen_map <= 4)


def test_gate_gets_zero_gradient_after_freeze():
    layer = make_layer(seed=28)
    randomize(layer, seed=29)
    layer.freeze_mapping()
    out = layer.forward(Tensor(np.random.default_rng(30).normal(size=(6, 2))), 0)
    T.tsum(T.mul(out, out)).backward()
    assert layer.gate.W_g.grad is None
    assert layer.gate.b_g.grad is None
    assert layer.embeddings.E.grad is None
    assert layer.adapter.A.grad is not None


def test_double_freeze_rejected():
    layer = make_layer()
    layer.freeze_mapping()
    with pytest.raises(ValueError):
        layer.freeze_mapping()


# -- allocation histogram ------------------------------------------------

def test_single_layer_histogram_is_one_hot():
    layer = make_layer(r=4, num_tasks=3, seed=31)
    hist = allocation_histogram([layer])
    for t in range(3):
        assert hist[t].sum() == 1
        assert hist[t, layer.current_rank(t) - 1] == 1


def test_histogram_rows_sum_to_layer_count():
    layers = [make_layer(r=4, num_tasks=5, seed=s) for s in range(6)]
    hist = allocation_histogram(layers)
    assert hist.shape == (5, 4)
    assert np.all(hist.sum(axis=1) == 6)


def test_histogram_matches_recount_from_selection_logs():
    layers = [make_layer(r=4, num_tasks=5, seed=40 + s) for s in range(3)]
    for layer in layers:
        layer.log_selections = True
    rng = np.random.default_rng(50)
    for _ in range(10):
        t = int(rng.integers(0, 5))
        for layer in layers:
            layer.forward(Tensor(rng.normal(size=6)), t)
    # recount final-state selections independently from the logs' final events
    hist = allocation_histogram(layers)
    recount = np.zeros_like(hist)
    for layer in layers:
        last_by_task = {}
        for event in layer.selection_log:
            last_by_task[event.task_id] = event.rank
        for t in range(5):
            rank = last_by_task.get(t, layer.current_rank(t))
            recount[t, rank - 1] += 1
    assert np.array_equal(hist, recount)


def test_embedding_table_append_row():
    table = TaskEmbeddingTable(3, 4, np.random.default_rng(0))
    table.append_row(np.ones(4))
    assert table.E.shape == (4, 4)
    assert np.array_equal(table.E.data[3], np.ones(4))
    with pytest.raises(ValueError):
        table.append_row(np.ones(5))


def test_rank_gate_shapes():
    gate = RankGate(4, 6)
    assert gate.W_g.shape == (4, 6)
    assert gate.b_g.shape == (4,)
