import numpy as np
import pytest

from tinybp import autodiff as ad
from tinybp.autodiff import Tensor
from tinybp.config import NasConfig
from tinybp.graph import INPUT, ModelGraph
from tinybp.layers import ChannelAffine, Conv1d, Identity, Layer, Seq
from tinybp import nas
from tinybp.seeds import build_resnet1d
from tinybp import training as tr


class _Blob(Layer):
    """Test-only layer: identity forward with a fixed number of parameters."""

    kind = None  # not registered, never serialized

    def __init__(self, n_params: int):
        self._t = Tensor(np.zeros(n_params), requires_grad=True) if n_params else None

    def params(self):
        return {"t": self._t} if self._t is not None else {}

    def out_shape(self, in_shapes):
        return in_shapes[0]

    def forward(self, xs, training: bool = False):
        return xs[0]


def _affine(channels, scale, shift=0.0):
    a = ChannelAffine(channels)
    a.scale.data[:] = scale
    a.shift.data[:] = shift
    return a


# -- structure -----------------------------------------------------------------

def test_build_supernet_sites_and_id_rule():
    g = ModelGraph((8, 32))
    g.add("same", Conv1d(8, 8, 3, rng=np.random.default_rng(0)), [INPUT])
    g.add("wider", Conv1d(8, 16, 3, rng=np.random.default_rng(1)))
    g.add("strided", Conv1d(16, 16, 3, stride=2, rng=np.random.default_rng(2)))
    sup = nas.build_supernet(g)
    sites = {n.id: n.layer for n in nas.choice_nodes(sup)}
    assert set(sites) == {"same", "wider", "strided"}
    assert sites["same"].names == ["C", "DW", "ID"]     # shapes match
    assert sites["wider"].names == ["C", "DW"]          # channel change
    assert sites["strided"].names == ["C", "DW"]        # length change
    for layer in sites.values():
        n = len(layer.alternatives)
        assert np.allclose(layer.theta.data, 1.0 / n)
        w = layer.mixture_weights().data
        assert abs(w.sum() - 1.0) < 1e-9
        assert np.allclose(w, 1.0 / n, atol=1e-9)


def test_supernet_keeps_c_weights_and_grouped_convs():
    g = ModelGraph((4, 16))
    g.add("c", Conv1d(4, 4, 3, rng=np.random.default_rng(3)), [INPUT])
    g.add("gc", Conv1d(4, 4, 3, groups=2, rng=np.random.default_rng(4)))
    sup = nas.build_supernet(g)
    assert [n.id for n in nas.choice_nodes(sup)] == ["c"]
    assert sup.nodes["gc"].layer.kind == "conv1d"
    orig = g.nodes["c"].layer.w.data
    kept = sup.nodes["c"].layer.alternatives[0].w.data
    assert np.array_equal(orig, kept)
    dw = sup.nodes["c"].layer.alternatives[1]
    assert isinstance(dw, Seq)
    assert dw.children[0].groups == 4 and dw.children[0].kernel == 3
    assert dw.children[1].kernel == 1 and dw.children[1].out_ch == 4


def test_resnet_supernet_counts():
    seed = build_resnet1d(input_len=32, widths=(4, 6, 8), kernel=3, seed=0)
    sup = nas.build_supernet(seed)
    sites = nas.choice_nodes(sup)
    assert len(sites) == 10  # stem + 3 blocks x (conv1, conv2, shortcut)
    with_id = [n.id for n in sites if "ID" in n.layer.names]
    assert sorted(with_id) == ["b0_conv2", "b1_conv2", "b2_conv2"]


# -- mixing ---------------------------------------------------------------------

def test_choice_forward_uniform_and_softmax_weighting():
    x = Tensor(np.array([[[1.0, 2.0], [4.0, 8.0]]]))
    layer = nas.ChoiceLayer([_affine(2, 2.0), _affine(2, 4.0)], ["C", "DW"])
    y = nas.choice_forward(layer, x)
    assert np.array_equal(y.data, 3.0 * x.data)  # (2x + 4x) / 2

    ones = nas.ChoiceLayer([_affine(2, 0.0, 1.0), _affine(2, 0.0, 0.0)], ["C", "DW"])
    ones.theta.data = np.array([np.log(2.0), 0.0])
    y2 = nas.choice_forward(ones, x)
    assert np.allclose(y2.data, 2.0 / 3.0, atol=1e-12)


def test_choice_forward_forced_identity_is_exact():
    rng = np.random.default_rng(0)
    layer = nas.ChoiceLayer(
        [Conv1d(3, 3, 3, rng=rng), Identity()], ["C", "ID"])
    x = Tensor(rng.standard_normal((2, 3, 10)))
    layer.force_index = 1
    y = nas.choice_forward(layer, x)
    assert np.max(np.abs(y.data - x.data)) == 0.0


def test_choice_layer_guards():
    with pytest.raises(ValueError):
        nas.ChoiceLayer([Identity()], ["ID"])
    bad = nas.ChoiceLayer([Conv1d(3, 4, 3), Conv1d(3, 5, 3)], ["C", "C2"])
    with pytest.raises(ValueError):
        bad.out_shape([(3, 10)])


# -- cost model -------------------------------------------------------------------

def test_cost_expectation_worked_example():
    g = ModelGraph((2, 4))
    site = nas.ChoiceLayer([_Blob(100), _Blob(36), _Blob(0)], ["C", "DW", "ID"])
    g.add("site", site, [INPUT])
    cost = nas.cost_expectation(g)
    assert cost.item() == pytest.approx(136.0 / 3.0, abs=1e-9)  # 45.333...
    site.force_index = 1
    assert nas.cost_expectation(g).item() == 36.0
    site.force_index = 2
    assert nas.cost_expectation(g).item() == 0.0


def test_cost_expectation_against_bruteforce_over_random_supernets():
    rng = np.random.default_rng(42)
    for trial in range(20):
        n_layers = int(rng.integers(2, 5))
        chans = [int(rng.integers(2, 6)) for _ in range(n_layers + 1)]
        chans[0] = 2
        g = ModelGraph((2, 12))
        prev = INPUT
        for li in range(n_layers):
            prev = g.add(f"c{li}", Conv1d(chans[li], chans[li + 1], 3,
                                          rng=np.random.default_rng(trial * 17 + li)), [prev])
        sup = nas.build_supernet(g)
        expected_const = 0.0
        expected_mix = 0.0
        for node in sup.nodes.values():
            if isinstance(node.layer, nas.ChoiceLayer):
                node.layer.theta.data = rng.standard_normal(len(node.layer.alternatives))
                th = node.layer.theta.data
                sm = np.exp(th - th.max())
                sm = sm / sm.sum()
                expected_mix += float(sm @ node.layer.costs())
            else:
                expected_const += node.layer.param_count()
        got = nas.cost_expectation(sup).item()
        assert got == pytest.approx(expected_const + expected_mix, rel=1e-12, abs=1e-9)


def test_cost_expectation_bounded_by_extreme_paths():
    seed = build_resnet1d(input_len=16, widths=(3, 4, 5), kernel=3, seed=0)
    sup = nas.build_supernet(seed)
    rng = np.random.default_rng(7)
    for node in nas.choice_nodes(sup):
        node.layer.theta.data = rng.standard_normal(len(node.layer.alternatives))
    cost = nas.cost_expectation(sup).item()
    lo = hi = 0.0
    for node in sup.nodes.values():
        if isinstance(node.layer, nas.ChoiceLayer):
            cs = node.layer.costs()
            lo += cs.min()
            hi += cs.max()
        else:
            lo += node.layer.param_count()
            hi += node.layer.param_count()
    assert lo <= cost <= hi


def test_cost_expectation_gradient_matches_fd():
    seed = build_resnet1d(input_len=16, widths=(3, 4, 5), kernel=3, seed=1)
    sup = nas.build_supernet(seed)
    rng = np.random.default_rng(3)
    thetas = [n.layer.theta for n in nas.choice_nodes(sup)]
    for t in thetas:
        t.data = rng.standard_normal(t.data.shape)
    lam = 2.5e-3
    cost = nas.cost_expectation(sup) * lam
    cost.backward()
    eps = 1e-5
    for t in thetas:
        analytic = t.grad.copy()
        num = np.zeros_like(t.data)
        for i in range(t.data.size):
            orig = t.data[i]
            t.data[i] = orig + eps
            hi = nas.cost_expectation(sup).item() * lam
            t.data[i] = orig - eps
            lo = nas.cost_expectation(sup).item() * lam
            t.data[i] = orig
            num[i] = (hi - lo) / (2 * eps)
        denom = max(np.abs(analytic).max(), np.abs(num).max(), 1e-12)
        assert np.abs(analytic - num).max() / denom < 1e-5


# -- extraction --------------------------------------------------------------------

def test_extraction_argmax_and_tie_break():
    layer = nas.ChoiceLayer([_Blob(10), _Blob(20), _Blob(30)], ["C", "DW", "ID"])
    g = ModelGraph((2, 4))
    g.add("s", layer, [INPUT])
    layer.theta.data = np.array([0.1, 0.7, 0.2])
    ex = nas.extract_architecture(g)
    assert ex.nodes["s"].meta["selected"] == "DW"
    layer.theta.data = np.array([0.5, 0.5, 0.1])
    ex2 = nas.extract_architecture(g)
    assert ex2.nodes["s"].meta["selected"] == "C"  # tie: lowest index wins


def test_extracted_graph_matches_forced_supernet_exactly():
    seed = build_resnet1d(input_len=32, widths=(4, 6, 8), kernel=3, seed=5)
    sup = nas.build_supernet(seed)
    rng = np.random.default_rng(11)
    for node in nas.choice_nodes(sup):
        node.layer.theta.data = rng.standard_normal(len(node.layer.alternatives))
    ex = nas.extract_architecture(sup)
    ex.validate()
    for node in nas.choice_nodes(sup):
        node.layer.force_index = int(np.argmax(node.layer.theta.data))
    x = rng.standard_normal((4, 1, 32))
    y_sup = sup.forward(x, training=False).data
    y_ex = ex.forward(x, training=False).data
    assert np.max(np.abs(y_sup - y_ex)) == 0.0
    # parameter count of the extracted graph equals the one-hot expectation
    assert ex.param_count() == nas.cost_expectation(sup).item()


def test_extraction_with_uniform_theta_keeps_first_alternative():
    seed = build_resnet1d(input_len=32, widths=(4, 6, 8), kernel=3, seed=2)
    sup = nas.build_supernet(seed)
    ex = nas.extract_architecture(sup)
    assert all(ex.nodes[n.id].meta["selected"] == "C" for n in nas.choice_nodes(sup))
    for node in nas.choice_nodes(sup):
        node.layer.force_index = 0
    x = np.random.default_rng(0).standard_normal((2, 1, 32))
    assert np.max(np.abs(sup.forward(x).data - ex.forward(x).data)) == 0.0


def test_supernet_serialization_roundtrip(tmp_path):
    seed = build_resnet1d(input_len=32, widths=(4, 6, 8), kernel=3, seed=9)
    sup = nas.build_supernet(seed)
    rng = np.random.default_rng(1)
    for node in nas.choice_nodes(sup):
        node.layer.theta.data = rng.standard_normal(len(node.layer.alternatives))
    sup.save(str(tmp_path))
    back = ModelGraph.load(str(tmp_path))
    for node in nas.choice_nodes(sup):
        other = back.nodes[node.id].layer
        assert other.names == node.layer.names
        assert np.allclose(other.theta.data, node.layer.theta.data, atol=1e-6)
    x = rng.standard_normal((2, 1, 32))
    assert np.allclose(sup.forward(x).data, back.forward(x).data, atol=1e-5)


# -- search ------------------------------------------------------------------------

def _toy_task(n=96, length=16, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1, length))
    m = x[:, 0, :].mean(axis=1)
    y = np.stack([6.0 * m, -3.0 * m], axis=1)
    norm = tr.Normalizer(0.0, 1.0, np.zeros(2), np.ones(2))
    k = int(0.75 * n)
    return tr.TaskData(tr.MODE_VALUE, x[:k], y[:k], x[k:], y[k:], norm, ["A"], ["B"])


def test_dnas_lambda_zero_learns_toy_task():
    seed = build_resnet1d(input_len=16, widths=(3, 4, 5), kernel=3, seed=0)
    sup = nas.build_supernet(seed)
    data = _toy_task()
    prob = nas.NasProblem(sup)
    initial = tr.evaluate_mse(prob, data.x_val, data.y_val)
    cfg = NasConfig(lambda_=0.0, warmup_epochs=5, search_epochs=45, patience=100,
                    lr_w=0.01, batch_size=24, seed=0)
    log = nas.dnas_train(sup, data, cfg)
    assert log.best_val <= 0.1 * initial


def test_dnas_large_lambda_picks_cheapest():
    seed = build_resnet1d(input_len=16, widths=(3, 4, 5), kernel=3, seed=0)
    sup = nas.build_supernet(seed)
    data = _toy_task()
    cfg = NasConfig(lambda_=1e3, warmup_epochs=1, search_epochs=15, patience=100,
                    lr_w=0.01, lr_theta=0.05, batch_size=24, seed=0)
    nas.dnas_train(sup, data, cfg)
    ex = nas.extract_architecture(sup)
    for node in nas.choice_nodes(sup):
        chosen = ex.nodes[node.id].meta["selected"]
        cheapest = node.layer.names[int(np.argmin(node.layer.costs()))]
        assert chosen == cheapest
        if "ID" in node.layer.names:
            assert chosen == "ID"


def test_nas_problem_splits_params():
    sup = nas.build_supernet(build_resnet1d(input_len=16, widths=(3, 4, 5), seed=0))
    prob = nas.NasProblem(sup)
    arch = prob.arch_params()
    assert len(arch) == len(nas.choice_nodes(sup))
    assert all(k.endswith(".theta") for k in arch)
    assert not (set(arch) & set(prob.weight_params()))
    assert len(arch) + len(prob.weight_params()) == len(sup.params())
