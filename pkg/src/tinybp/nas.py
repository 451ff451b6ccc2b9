"""Differentiable architecture search over convolution sites.

Every eligible convolution in a seed graph becomes a choice node holding
alternatives: the original convolution (C), a depthwise+pointwise module
(DW), and a bypass (ID) when input and output shapes match.  The node's
output is the softmax(theta)-weighted sum of the alternatives' outputs, so
task gradients reach the architecture parameters directly, and the expected
parameter count is differentiable in theta as well.

After search, extraction keeps the argmax alternative at each site (lowest
index on ties) and produces an ordinary single-path graph whose parameter
count equals the cost expectation evaluated at one-hot theta.
"""

from __future__ import annotations

import copy

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import NasConfig
from .graph import ModelGraph
from .layers import Conv1d, Identity, Layer, Seq
from .training import (Problem, SearchSettings, TaskData, TrainLog, graph_buffers,
                       run_search, set_graph_buffer)

ALT_C, ALT_DW, ALT_ID = "C", "DW", "ID"


class ChoiceLayer(Layer):
    """A conv site holding competing alternatives and their mixing logits."""

    kind = "choice"

    def __init__(self, alternatives: list, names: list, theta: Tensor | None = None):
        if len(alternatives) < 2:
            raise ValueError("a choice site needs at least 2 alternatives")
        if len(alternatives) != len(names):
            raise ValueError("one name per alternative")
        self.alternatives = list(alternatives)
        self.names = list(names)
        n = len(alternatives)
        self.theta = theta if theta is not None else Tensor(np.full(n, 1.0 / n),
                                                            requires_grad=True)
        self.force_index: int | None = None

    def params(self):
        out = {"theta": self.theta}
        for i, alt in enumerate(self.alternatives):
            for name, t in alt.params().items():
                out[f"{i}.{name}"] = t
        return out

    def buffers(self):
        out = {}
        for i, alt in enumerate(self.alternatives):
            for name, b in alt.buffers().items():
                out[f"{i}.{name}"] = b
        return out

    def set_buffer(self, name, value):
        idx, sub = name.split(".", 1)
        self.alternatives[int(idx)].set_buffer(sub, value)

    def hyper(self):
        return {"alternatives": [{"kind": a.kind, "hyper": a.hyper(), "name": n}
                                 for a, n in zip(self.alternatives, self.names)]}

    @classmethod
    def from_config(cls, hyper, rng=None):
        from .layers import make_layer
        alts = [make_layer(a["kind"], a["hyper"], rng=rng) for a in hyper["alternatives"]]
        return cls(alts, [a["name"] for a in hyper["alternatives"]])

    def out_shape(self, in_shapes):
        shapes = {alt.out_shape(in_shapes) for alt in self.alternatives}
        if len(shapes) != 1:
            raise ValueError(f"alternatives disagree on output shape: {sorted(shapes)}")
        return shapes.pop()

    def costs(self) -> np.ndarray:
        return np.array([float(a.param_count()) for a in self.alternatives])

    def mixture_weights(self) -> Tensor:
        if self.force_index is not None:
            onehot = np.zeros(len(self.alternatives))
            onehot[self.force_index] = 1.0
            return Tensor(onehot)
        return ad.softmax1d(self.theta)

    def forward(self, xs, training: bool = False):
        outs = [alt.forward(xs, training=training) for alt in self.alternatives]
        return ad.weighted_sum(self.mixture_weights(), outs)


def choice_forward(layer: ChoiceLayer, x: Tensor, training: bool = False) -> Tensor:
    return layer.forward([x], training=training)


def _dw_module(conv: Conv1d, rng) -> Seq:
    depthwise = Conv1d(conv.in_ch, conv.in_ch, conv.kernel, stride=conv.stride,
                       dilation=conv.dilation, groups=conv.in_ch,
                       pad=tuple(conv.pad), rng=rng)
    pointwise = Conv1d(conv.in_ch, conv.out_ch, 1, rng=rng)
    return Seq([depthwise, pointwise])


def build_supernet(seed: ModelGraph, seed_rng: int = 0) -> ModelGraph:
    """Replace every ungrouped convolution with a choice node.

    The C alternative keeps the original weights; DW is freshly initialized.
    ID joins only where the site's input and output shapes already agree.
    Grouped convolutions (none in the stock seeds) are left untouched.
    """
    rng = np.random.default_rng(seed_rng)
    g = ModelGraph(seed.input_shape)
    for node in seed.nodes.values():
        layer = node.layer
        if layer.kind == "conv1d" and layer.groups == 1:
            alts: list = [copy.deepcopy(layer)]
            names = [ALT_C]
            alts.append(_dw_module(layer, rng))
            names.append(ALT_DW)
            if seed.shapes[node.inputs[0]] == seed.shapes[node.id]:
                alts.append(Identity())
                names.append(ALT_ID)
            meta = dict(node.meta)
            meta["site"] = node.id
            g.add(node.id, ChoiceLayer(alts, names), list(node.inputs), meta)
        else:
            g.add(node.id, copy.deepcopy(layer), list(node.inputs), dict(node.meta))
    g.set_output(seed.output_id)
    return g


def choice_nodes(graph: ModelGraph) -> list:
    return [n for n in graph.nodes.values() if isinstance(n.layer, ChoiceLayer)]


def cost_expectation(supernet: ModelGraph) -> Tensor:
    """Expected parameter count of the mixed architecture, differentiable in theta.

    Choice sites contribute softmax(theta) dot per-alternative counts; all
    parameters outside choice sites are architecture-independent and enter as
    a constant, so a one-hot theta yields exactly the extracted graph's
    parameter count.  The mixing logits themselves are search state, not
    model parameters, and are not counted.
    """
    const = 0
    total = None
    for node in supernet.nodes.values():
        if isinstance(node.layer, ChoiceLayer):
            w = node.layer.mixture_weights()
            term = ad.tsum(w * Tensor(node.layer.costs()))
            total = term if total is None else total + term
        else:
            const += node.layer.param_count()
    base = Tensor(np.asarray(float(const)))
    return base + total if total is not None else base


def extract_architecture(supernet: ModelGraph) -> ModelGraph:
    """Keep the argmax-theta alternative at every site (lowest index on ties).

    A selected DW module is inlined as two plain conv nodes (depthwise under
    ``<site>_dw``, pointwise under the site's own id so consumers need no
    rewiring); later stages then see only ordinary layers.
    """
    g = ModelGraph(supernet.input_shape)
    for node in supernet.nodes.values():
        if isinstance(node.layer, ChoiceLayer):
            best = int(np.argmax(node.layer.theta.data))
            alt = copy.deepcopy(node.layer.alternatives[best])
            meta = dict(node.meta)
            meta["selected"] = node.layer.names[best]
            if isinstance(alt, Seq):
                depthwise, pointwise = alt.children
                dw_meta = dict(meta)
                dw_meta["part"] = "depthwise"
                g.add(node.id + "_dw", depthwise, list(node.inputs), dw_meta)
                g.add(node.id, pointwise, [node.id + "_dw"], meta)
            else:
                g.add(node.id, alt, list(node.inputs), meta)
        else:
            g.add(node.id, copy.deepcopy(node.layer), list(node.inputs), dict(node.meta))
    g.set_output(supernet.output_id)
    return g


class NasProblem(Problem):
    def __init__(self, supernet: ModelGraph):
        self.graph = supernet
        self._arch_keys = {f"{n.id}.theta" for n in choice_nodes(supernet)}

    def forward(self, x, training):
        return self.graph.forward(x, training=training)

    def weight_params(self):
        return {k: t for k, t in self.graph.params().items() if k not in self._arch_keys}

    def arch_params(self):
        return {k: t for k, t in self.graph.params().items() if k in self._arch_keys}

    def regularizer(self):
        return cost_expectation(self.graph)

    def buffers(self):
        return graph_buffers(self.graph)

    def set_buffer(self, name, arr):
        set_graph_buffer(self.graph, name, arr)


def dnas_train(supernet: ModelGraph, data: TaskData, cfg: NasConfig) -> TrainLog:
    """Warmup + alternating search on a supernet; restores the best checkpoint."""
    prob = NasProblem(supernet)
    settings = SearchSettings(
        epochs=cfg.warmup_epochs + cfg.search_epochs, warmup=cfg.warmup_epochs,
        patience=cfg.patience, batch_size=cfg.batch_size, lr_w=cfg.lr_w,
        lr_arch=cfg.lr_theta, lambda_=cfg.lambda_, seed=cfg.seed)
    return run_search(prob, data, settings)
