"""Layer semantics, graph plumbing, serialization, and norm folding."""

import numpy as np
import pytest

from tinybp.autodiff import Tensor
from tinybp.gradcheck import grad_check
from tinybp.graph import INPUT, GraphShapeError, ModelGraph
from tinybp.layers import (Add, AvgPool1d, BatchNorm1d, Concat, Conv1d, Identity,
                           InstanceNorm1d, Linear, MaxPool1d, NearestUpsample,
                           PReLU, ReLU, Seq)

RNG = np.random.default_rng


def _small_graph(rng, norm_cls=BatchNorm1d):
    g = ModelGraph((2, 16))
    g.add("c1", Conv1d(2, 4, 3, rng=rng), [INPUT])
    g.add("n1", norm_cls(4))
    g.add("a1", PReLU(4))
    g.add("c2", Conv1d(4, 4, 3, stride=2, rng=rng))
    g.add("n2", norm_cls(4))
    g.add("sc", Conv1d(2, 4, 1, stride=2, rng=rng), [INPUT])
    g.add("nsc", norm_cls(4))
    g.add("add", Add(), ["n2", "nsc"])
    g.add("a2", ReLU())
    g.add("gap", AvgPool1d(8))
    g.add("head", Linear(4, 2, rng=rng))
    g.validate()
    return g


def test_graph_forward_shapes_and_grad():
    rng = RNG(0)
    g = _small_graph(rng)
    x = rng.normal(size=(3, 2, 16))
    y = g.forward(x, training=True)
    assert y.data.shape == (3, 2)
    report = grad_check(g, rng.normal(size=(2, 2, 16)), tol=1e-4, training=True)
    assert report.max_rel < 1e-4


def test_graph_eval_mode_gradcheck_with_running_stats():
    rng = RNG(1)
    g = _small_graph(rng, norm_cls=InstanceNorm1d)
    # populate running stats first
    for _ in range(3):
        g.forward(rng.normal(size=(4, 2, 16)), training=True)
    report = grad_check(g, rng.normal(size=(2, 2, 16)), tol=1e-4, training=False)
    assert report.max_rel < 1e-4


def test_identity_graph_input_grad_is_ones():
    g = ModelGraph((1, 4))
    g.add("id", Identity(), [INPUT])
    x = Tensor(np.arange(4.0).reshape(1, 1, 4), requires_grad=True)
    y = g.forward(x)
    loss_grad = np.ones_like(y.data)
    g.backward(loss_grad)
    assert np.array_equal(x.grad, np.ones((1, 1, 4)))


def test_backward_before_forward_errors():
    g = ModelGraph((1, 4))
    g.add("id", Identity(), [INPUT])
    with pytest.raises(RuntimeError):
        g.backward(np.ones((1, 1, 4)))


def test_shape_mismatch_names_node():
    g = ModelGraph((2, 16))
    with pytest.raises(GraphShapeError) as ei:
        g.add("bad", Conv1d(3, 4, 3), [INPUT])  # expects 3 channels, input has 2
    assert "bad" in str(ei.value)


def test_norm_placement_rule_enforced():
    g = ModelGraph((2, 16))
    g.add("r", ReLU(), [INPUT])
    g.add("n", BatchNorm1d(2))
    with pytest.raises(GraphShapeError):
        g.validate()


def test_concat_unet_style_graph():
    rng = RNG(2)
    g = ModelGraph((1, 20))
    g.add("e1", Conv1d(1, 4, 3, rng=rng), [INPUT])
    g.add("p1", MaxPool1d(2, 2))
    g.add("bott", Conv1d(4, 8, 3, rng=rng))
    g.add("up", NearestUpsample(2))
    g.add("cat", Concat(), ["up", "e1"])
    g.add("dec", Conv1d(12, 4, 3, rng=rng))
    g.add("out", Conv1d(4, 1, 1, rng=rng))
    y = g.forward(rng.normal(size=(2, 1, 20)))
    assert y.data.shape == (2, 1, 20)


def test_batchnorm_matches_manual_normalization():
    rng = RNG(3)
    bn = BatchNorm1d(3)
    bn.gamma.data = rng.normal(size=3)
    bn.beta.data = rng.normal(size=3)
    x = rng.normal(size=(4, 3, 8))
    y = bn.forward([Tensor(x)], training=True).data
    mu = x.mean(axis=(0, 2), keepdims=True)
    var = x.var(axis=(0, 2), keepdims=True)
    ref = (x - mu) / np.sqrt(var + bn.eps) * bn.gamma.data[None, :, None] + bn.beta.data[None, :, None]
    assert np.allclose(y, ref, atol=1e-12)


def test_instancenorm_normalizes_per_instance():
    rng = RNG(4)
    inorm = InstanceNorm1d(2)
    x = rng.normal(size=(3, 2, 16)) * 5 + 2
    y = inorm.forward([Tensor(x)], training=True).data
    assert np.allclose(y.mean(axis=2), 0, atol=1e-9)
    assert np.allclose(y.std(axis=2), 1, atol=1e-3)


def test_seq_layer_chains_and_flattens_params():
    rng = RNG(5)
    s = Seq([Conv1d(4, 4, 3, groups=4, rng=rng), Conv1d(4, 6, 1, rng=rng)])
    names = set(s.params())
    assert names == {"0.w", "0.b", "1.w", "1.b"}
    x = Tensor(rng.normal(size=(2, 4, 10)))
    assert s.forward([x]).data.shape == (2, 6, 10)
    assert s.out_shape([(4, 10)]) == (6, 10)


def test_serialization_round_trip(tmp_path):
    rng = RNG(6)
    g = _small_graph(rng)
    g.forward(rng.normal(size=(4, 2, 16)), training=True)  # populate running stats
    x = rng.normal(size=(2, 2, 16))
    y0 = g.forward(x).data
    g.save(str(tmp_path), "m")
    g2 = ModelGraph.load(str(tmp_path), "m")
    y1 = g2.forward(x).data
    # storage is float32, so round-trip agrees to float32 precision
    assert np.allclose(y0, y1, rtol=1e-5, atol=1e-5)
    assert [n for n in g2.nodes] == [n for n in g.nodes]


def test_serialization_hash_stable(tmp_path):
    rng = RNG(7)
    g = _small_graph(rng)
    h1 = g.content_hash()
    h2 = g.content_hash()
    assert h1 == h2
    g.save(str(tmp_path), "m")
    assert ModelGraph.load(str(tmp_path), "m").content_hash() == h1


def test_truncated_blob_errors(tmp_path):
    rng = RNG(8)
    g = _small_graph(rng)
    g.save(str(tmp_path), "m")
    blob_path = tmp_path / "m.bin"
    blob_path.write_bytes(blob_path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        ModelGraph.load(str(tmp_path), "m")


def test_param_count_counts_every_trainable():
    rng = RNG(9)
    g = ModelGraph((2, 8))
    g.add("c", Conv1d(2, 3, 3, rng=rng), [INPUT])
    g.add("n", BatchNorm1d(3))
    g.add("p", PReLU(3))
    # conv: 2*3*3 + 3 = 21; norm: 3 + 3; prelu: 3
    assert g.param_count() == 21 + 6 + 3


def test_pool_output_length_guard():
    g = ModelGraph((1, 3))
    with pytest.raises(GraphShapeError):
        g.add("p", MaxPool1d(5, 5), [INPUT])
