import numpy as np
import pytest

from tinybp.autodiff import Tensor
from tinybp.config import PitConfig
from tinybp.graph import INPUT, GraphShapeError, ModelGraph
from tinybp.layers import Add, AvgPool1d, BatchNorm1d, Conv1d, Linear, ReLU
from tinybp.pruning import (FROZEN, MaskedGraph, PitProblem, attach_masks,
                            clamp_empty_layers, export_pruned, mask_cost,
                            masked_forward, pit_train)
from tinybp.seeds import build_resnet1d, build_unet1d
from tinybp.training import MODE_VALUE, Normalizer, TaskData


def _chain(c1=6, c2=4, out=2, L=32, seed=0):
    """conv(1->c1) -> bn -> relu -> conv(c1->c2) -> conv(c2->out, output)."""
    rng = np.random.default_rng(seed)
    g = ModelGraph((1, L))
    g.add("conv1", Conv1d(1, c1, 3, rng=rng), [INPUT])
    g.add("bn1", BatchNorm1d(c1))
    g.add("act1", ReLU())
    g.add("conv2", Conv1d(c1, c2, 3, rng=rng))
    g.add("out", Conv1d(c2, out, 1, rng=rng))
    g.set_output("out")
    return g


def _close(masked, node_id, channels):
    slots = masked._own_slot_idx[node_id]
    for c in channels:
        masked.theta.data[slots[c]] = -1.0


def _keep_alive(masked, rng):
    """Random sign pattern on theta that leaves every layer a live channel."""
    masked.theta.data = rng.uniform(-1.5, 1.5, masked.n_gates)
    for nid, slots in masked._own_slot_idx.items():
        live = slots[slots != FROZEN]
        if len(live) and not np.any(masked.theta.data[live] >= 0):
            masked.theta.data[live[0]] = 1.0


# -- gate structure ---------------------------------------------------------

def test_chain_gate_count_and_views():
    m = attach_masks(_chain())
    assert m.n_gates == 6 + 4  # conv1 + conv2; output conv is frozen
    views = m.mask_views()
    assert set(views) == {"conv1", "conv2", "out"}
    assert np.all(views["out"].slot_idx == FROZEN)
    for v in views.values():
        assert v.retained_fraction() == 1.0  # theta starts at +1
    assert np.all(views["conv1"].gates() == 1.0)


def test_theta_init_sets_every_gate():
    m = attach_masks(_chain(), theta_init=0.37)
    assert np.all(m.theta.data == 0.37)
    assert attach_masks(_chain()).theta.data[0] == 1.0


def test_residual_add_ties_branch_gates():
    rng = np.random.default_rng(1)
    g = ModelGraph((1, 16))
    g.add("a", Conv1d(1, 4, 3, rng=rng), [INPUT])
    g.add("b", Conv1d(1, 4, 3, rng=rng), [INPUT])
    g.add("sum", Add(), ["a", "b"])
    g.add("out", Conv1d(4, 2, 1, rng=rng), ["sum"])
    g.set_output("out")
    m = attach_masks(g)
    assert m.n_gates == 4
    va, vb = m.mask_views()["a"], m.mask_views()["b"]
    assert np.array_equal(va.slot_idx, vb.slot_idx)


def test_depthwise_follows_producer():
    rng = np.random.default_rng(2)
    g = ModelGraph((1, 16))
    g.add("conv1", Conv1d(1, 4, 3, rng=rng), [INPUT])
    g.add("dw", Conv1d(4, 4, 3, groups=4, rng=rng))
    g.add("out", Conv1d(4, 2, 1, rng=rng))
    g.set_output("out")
    m = attach_masks(g)
    assert m.n_gates == 4
    assert "dw" not in m._own_slot_idx
    views = m.mask_views()
    assert np.array_equal(views["dw"].slot_idx, views["conv1"].slot_idx)


def test_grouped_conv_slots_shared_and_producer_tied():
    rng = np.random.default_rng(3)
    g = ModelGraph((1, 16))
    g.add("conv1", Conv1d(1, 8, 3, rng=rng), [INPUT])
    g.add("gc", Conv1d(8, 8, 3, groups=2, rng=rng))
    g.add("out", Conv1d(8, 2, 1, rng=rng))
    g.set_output("out")
    m = attach_masks(g)
    # gc owns one slot per within-group channel; conv1 collapses to 4 classes
    assert len(m._own_slot_idx["gc"]) == 4
    c1 = m._out_idx["conv1"]
    assert np.array_equal(c1[:4], c1[4:])
    gc = m._out_idx["gc"]
    assert np.array_equal(gc[:4], gc[4:])
    assert m.n_gates == 4 + 4


def test_heads_input_and_output_are_frozen():
    g = build_resnet1d(input_len=32, widths=(4, 6, 8), kernel=3, seed=0)
    m = attach_masks(g)
    assert np.all(m._out_idx[g.output_id] == FROZEN)
    stem_in = m.input_gate_idx(g.nodes["stem"])
    assert np.all(stem_in == FROZEN)


# -- masked execution -------------------------------------------------------

def test_all_keep_matches_unmasked_exactly():
    g = _chain()
    m = attach_masks(g)
    x = np.random.default_rng(5).standard_normal((4, 1, 32))
    ref = g.forward(x, training=False).data
    assert np.array_equal(masked_forward(m, x).data, ref)
    m.freeze()
    assert np.array_equal(m.forward(x).data, ref)


def test_closed_gate_matches_manually_zeroed_weights():
    g = _chain(seed=7)
    m = attach_masks(g)
    _close(m, "conv1", [2])
    x = np.random.default_rng(8).standard_normal((3, 1, 32))
    got = m.forward(x, training=False).data

    z = _chain(seed=7)
    z.nodes["conv1"].layer.w.data[2] = 0.0
    z.nodes["conv1"].layer.b.data[2] = 0.0
    z.nodes["conv2"].layer.w.data[:, 2, :] = 0.0
    want = z.forward(x, training=False).data
    assert np.array_equal(got, want)
    assert not np.array_equal(got, g.forward(x, training=False).data)


def test_ste_gradient_matches_continuous_finite_difference():
    g = _chain(seed=9)
    m = attach_masks(g)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((4, 1, 32))
    y = rng.standard_normal((4, 2, 32))

    def loss_at(gvec):
        saved = m._gates
        m._gates = lambda: Tensor(np.asarray(gvec, dtype=np.float64))
        try:
            d = m.forward(x, training=False).data - y
            return float(np.mean(d * d))
        finally:
            m._gates = saved

    from tinybp.training import mse_loss
    out = m.forward(x, training=False)
    mse_loss(out, Tensor(y)).backward()
    grad = m.theta.grad.copy()

    eps = 1e-6
    base = np.ones(m.n_gates)
    for i in [0, 3, 7]:
        hi, lo = base.copy(), base.copy()
        hi[i] += eps
        lo[i] -= eps
        fd = (loss_at(hi) - loss_at(lo)) / (2 * eps)
        assert abs(fd - grad[i]) <= 1e-4 * max(1.0, abs(fd))


def test_frozen_masked_equals_export_bitwise_resnet():
    g = build_resnet1d(input_len=125, widths=(6, 8, 10), kernel=3, seed=4)
    m = attach_masks(g)
    _keep_alive(m, np.random.default_rng(11))
    m.freeze()
    ex = export_pruned(m)
    x = np.random.default_rng(12).standard_normal((100, 1, 125))
    diff = np.abs(m.forward(x).data - ex.forward(x).data)
    assert diff.max() == 0.0


def test_frozen_masked_equals_export_bitwise_unet():
    g = build_unet1d(input_len=125, widths=(4, 6, 8), kernel=3, seed=5)
    m = attach_masks(g)
    _keep_alive(m, np.random.default_rng(13))
    m.freeze()
    ex = export_pruned(m)
    x = np.random.default_rng(14).standard_normal((16, 1, 125))
    diff = np.abs(m.forward(x).data - ex.forward(x).data)
    assert diff.max() == 0.0


def test_frozen_masked_equals_export_with_depthwise_and_add():
    rng = np.random.default_rng(15)
    g = ModelGraph((1, 24))
    g.add("conv1", Conv1d(1, 6, 3, rng=rng), [INPUT])
    g.add("dw", Conv1d(6, 6, 3, groups=6, rng=rng))
    g.add("pw", Conv1d(6, 6, 1, rng=rng))
    g.add("res", Add(), ["conv1", "pw"])
    g.add("out", Conv1d(6, 2, 1, rng=rng))
    g.set_output("out")
    m = attach_masks(g)
    _close(m, "conv1", [0, 4])
    m.freeze()
    ex = export_pruned(m)
    assert ex.nodes["dw"].layer.out_ch == 4
    x = np.random.default_rng(16).standard_normal((8, 1, 24))
    assert np.abs(m.forward(x).data - ex.forward(x).data).max() == 0.0


# -- export ------------------------------------------------------------------

def test_export_slices_weights_and_norm_state():
    g = _chain(seed=17)
    g.nodes["bn1"].layer.set_buffer("running_mean", np.arange(6.0))
    m = attach_masks(g)
    _close(m, "conv1", [1, 4])
    m.freeze()
    ex = export_pruned(m)
    kept = np.array([0, 2, 3, 5])
    c1, c2 = g.nodes["conv1"].layer, g.nodes["conv2"].layer
    assert ex.nodes["conv1"].layer.out_ch == 4
    assert np.array_equal(ex.nodes["conv1"].layer.w.data, c1.w.data[kept])
    assert np.array_equal(ex.nodes["conv2"].layer.w.data, c2.w.data[:, kept, :])
    bn = ex.nodes["bn1"].layer
    assert bn.ch == 4
    assert np.array_equal(bn.buffers()["running_mean"], kept.astype(float))


def test_export_no_prune_is_isomorphic():
    g = _chain(seed=18)
    m = attach_masks(g)
    m.freeze()
    ex = export_pruned(m)
    assert ex.param_count() == g.param_count()
    assert [n.layer.kind for n in ex.nodes.values()] == \
        [n.layer.kind for n in g.nodes.values()]
    x = np.random.default_rng(19).standard_normal((2, 1, 32))
    assert np.array_equal(ex.forward(x).data, g.forward(x).data)


def test_export_grouped_conv_keeps_group_structure():
    rng = np.random.default_rng(20)
    g = ModelGraph((1, 16))
    g.add("conv1", Conv1d(1, 8, 3, rng=rng), [INPUT])
    g.add("gc", Conv1d(8, 8, 3, groups=2, rng=rng))
    g.add("out", Conv1d(8, 2, 1, rng=rng))
    g.set_output("out")
    m = attach_masks(g)
    _close(m, "conv1", [1])   # one within-group class: drops channels 1 and 5
    _close(m, "gc", [0])      # grouped conv loses slot 0 in both groups
    m.freeze()
    ex = export_pruned(m)
    gc = ex.nodes["gc"].layer
    assert gc.groups == 2 and gc.in_ch == 6 and gc.out_ch == 6
    assert ex.nodes["conv1"].layer.out_ch == 6
    x = np.random.default_rng(21).standard_normal((4, 1, 16))
    assert np.abs(m.forward(x).data - ex.forward(x).data).max() == 0.0


def test_export_rejects_fully_pruned_layer():
    m = attach_masks(_chain())
    _close(m, "conv1", range(6))
    m.freeze()
    with pytest.raises(GraphShapeError, match="no surviving channels"):
        export_pruned(m)


# -- cost surrogate ------------------------------------------------------------

def test_mask_cost_all_keep_equals_param_count():
    for g in (build_resnet1d(input_len=32, widths=(4, 6, 8), kernel=3, seed=0),
              build_unet1d(input_len=25, widths=(4, 6, 8), kernel=3, seed=1),
              _chain()):
        m = attach_masks(g)
        assert float(mask_cost(m).item()) == float(g.param_count())


def test_mask_cost_closed_form_after_pruning():
    m = attach_masks(_chain(c1=6, c2=4))
    _close(m, "conv1", [0, 1])
    _close(m, "conv2", [3])
    # conv1 4*(1*3)+4, bn 2*4, conv2 3*(4*3)+3, out 2*(3*1)+2
    want = (4 * 3 + 4) + 8 + (3 * 12 + 3) + (2 * 3 + 2)
    assert float(mask_cost(m).item()) == float(want)
    m.freeze()
    assert export_pruned(m).param_count() == want


def test_mask_cost_marginal_drop_is_exact():
    m = attach_masks(_chain(c1=6, c2=4))
    before = float(mask_cost(m).item())
    _close(m, "conv1", [3])
    after = float(mask_cost(m).item())
    # row of conv1 (3 weights + bias), bn pair, one input column of conv2
    assert before - after == (3 + 1) + 2 + 4 * 3


def test_mask_cost_tracks_export_params_over_random_patterns():
    g = build_resnet1d(input_len=64, widths=(6, 8, 10), kernel=3, seed=2)
    for trial in range(10):
        m = attach_masks(g)
        _keep_alive(m, np.random.default_rng(100 + trial))
        m.freeze()
        assert float(m.mask_cost().item()) == float(export_pruned(m).param_count())


# -- lifecycle ------------------------------------------------------------------

def test_clamp_empty_layers_revives_best_slot():
    m = attach_masks(_chain())
    slots = m._own_slot_idx["conv1"]
    m.theta.data[slots] = [-3.0, -1.0, -0.2, -2.0, -4.0, -1.5]
    with pytest.warns(RuntimeWarning, match="all channels pruned"):
        revived = clamp_empty_layers(m)
    assert revived == ["conv1"]
    assert m.theta.data[slots[2]] == 1.0  # argmax kept
    assert m.mask_views()["conv1"].kept_slots() == 1


def test_arch_params_empty_after_freeze():
    m = attach_masks(_chain())
    prob = PitProblem(m)
    assert set(prob.arch_params()) == {"mask_theta"}
    assert "mask_theta" not in prob.weight_params()
    m.freeze()
    assert prob.arch_params() == {}


def test_save_load_roundtrip(tmp_path):
    m = attach_masks(_chain(seed=22))
    _close(m, "conv2", [0])
    m.freeze()
    m.save(str(tmp_path))
    back = MaskedGraph.load(str(tmp_path))
    assert back.frozen
    assert np.array_equal(back.theta.data, m.theta.data)
    x = np.random.default_rng(23).standard_normal((2, 1, 32))
    # weights travel as float32, so the reload is close, not identical
    assert np.allclose(back.forward(x).data, m.forward(x).data, atol=1e-5)
    # the export parity invariant survives serialization exactly
    ex = export_pruned(back)
    assert np.abs(back.forward(x).data - ex.forward(x).data).max() == 0.0


def test_load_rejects_mismatched_mask_table(tmp_path):
    m = attach_masks(_chain())
    m.save(str(tmp_path))
    import json
    import os
    p = os.path.join(str(tmp_path), "model.masks.json")
    with open(p) as f:
        d = json.load(f)
    d["theta"] = d["theta"][:-1]
    with open(p, "w") as f:
        json.dump(d, f)
    with pytest.raises(ValueError, match="gates"):
        MaskedGraph.load(str(tmp_path))


# -- training ---------------------------------------------------------------------

def _toy_data(n_train=96, n_val=48, L=32, seed=30):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_train + n_val, 1, L))
    m = x.mean(axis=(1, 2))
    y = np.stack([3.0 * m, -2.0 * m], axis=1)
    norm = Normalizer(0.0, 1.0, np.zeros(2), np.ones(2))
    return TaskData(MODE_VALUE, x[:n_train], y[:n_train], x[n_train:], y[n_train:],
                    norm, ["s1"], ["s2"])


def _toy_net(seed=31):
    rng = np.random.default_rng(seed)
    g = ModelGraph((1, 32))
    g.add("conv1", Conv1d(1, 8, 3, rng=rng), [INPUT])
    g.add("act1", ReLU())
    g.add("conv2", Conv1d(8, 8, 3, rng=rng))
    g.add("act2", ReLU())
    g.add("pool", AvgPool1d(32))
    g.add("head", Linear(8, 2, rng=rng), meta={"head": True})
    g.set_output("head")
    return g


def test_pit_lambda_zero_keeps_nearly_everything():
    g = _toy_net()
    m = attach_masks(g)
    data = _toy_data()
    cfg = PitConfig(lambda_=0.0, search_epochs=25, finetune_epochs=10,
                    patience=50, lr_w=0.01, lr_theta=0.01, batch_size=16, seed=0)
    log = pit_train(m, data, cfg)
    assert m.frozen
    kept = sum(v.kept_slots() for v in m.mask_views().values())
    total = sum(len(v.slot_idx) for v in m.mask_views().values())
    assert kept / total >= 0.95
    assert log.best_val < log.rows[0]["val_mse"]


def test_pit_large_lambda_prunes_and_stays_finite():
    g = _toy_net(seed=32)
    m = attach_masks(g)
    data = _toy_data(seed=33)
    cfg = PitConfig(lambda_=0.002, search_epochs=40, finetune_epochs=10,
                    patience=60, lr_w=0.01, lr_theta=0.02, batch_size=16, seed=1)
    log = pit_train(m, data, cfg)
    frac = np.mean([v.retained_fraction() for nid, v in m.mask_views().items()
                    if nid in m._own_slot_idx])
    assert frac <= 0.5
    assert np.isfinite(log.best_val)
    ex = export_pruned(m)
    assert ex.param_count() < g.param_count()
    x = data.x_val[:8]
    assert np.abs(m.forward(x).data - ex.forward(x).data).max() == 0.0


def test_pit_log_spans_both_phases():
    g = _toy_net(seed=34)
    m = attach_masks(g)
    cfg = PitConfig(lambda_=0.0, search_epochs=4, finetune_epochs=3,
                    patience=50, lr_w=0.01, batch_size=32, seed=2)
    log = pit_train(m, _toy_data(seed=35), cfg)
    assert [r["epoch"] for r in log.rows] == list(range(7))
    assert m.frozen
