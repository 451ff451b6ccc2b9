"""Directed acyclic model graphs over the layer library.

A ModelGraph is an ordered collection of nodes (layer + input edges) with a
single input placeholder and a single output node.  Nodes are added in
topological order; shapes are inferred and checked at construction time and
re-checked per batch at execution time with errors naming the node.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os

import numpy as np

from .autodiff import Tensor
from .layers import Layer, make_layer

INPUT = "input"

GRAPH_FORMAT = 1


class GraphShapeError(ValueError):
    pass


class Node:
    __slots__ = ("id", "layer", "inputs", "meta")

    def __init__(self, node_id: str, layer: Layer, inputs: list[str], meta: dict | None = None):
        self.id = node_id
        self.layer = layer
        self.inputs = list(inputs)
        self.meta = dict(meta or {})


class ModelGraph:
    def __init__(self, input_shape: tuple):
        self.input_shape = tuple(input_shape)  # (channels, length)
        self.nodes: dict[str, Node] = {}
        self.shapes: dict[str, tuple] = {INPUT: self.input_shape}
        self.output_id: str | None = None
        self._last_output: Tensor | None = None
        self._last_input: Tensor | None = None

    # -- construction ----------------------------------------------------
    def add(self, node_id: str, layer: Layer, inputs=None, meta: dict | None = None) -> str:
        if node_id in self.nodes or node_id == INPUT:
            raise ValueError(f"duplicate node id {node_id!r}")
        if inputs is None:
            inputs = [next(reversed(self.nodes)) if self.nodes else INPUT]
        elif isinstance(inputs, str):
            inputs = [inputs]
        for src in inputs:
            if src != INPUT and src not in self.nodes:
                raise ValueError(f"node {node_id!r} references unknown input {src!r}")
        n_in = layer.n_inputs
        if n_in == -1:
            if len(inputs) < 2:
                raise GraphShapeError(f"node {node_id!r}: variadic layer needs >= 2 inputs")
        elif len(inputs) != n_in:
            raise GraphShapeError(f"node {node_id!r}: expected {n_in} inputs, got {len(inputs)}")
        try:
            shape = layer.out_shape([self.shapes[s] for s in inputs])
        except ValueError as e:
            raise GraphShapeError(f"node {node_id!r}: {e}") from None
        self.nodes[node_id] = Node(node_id, layer, inputs, meta)
        self.shapes[node_id] = tuple(shape)
        self.output_id = node_id  # last added is output unless set_output overrides
        return node_id

    def set_output(self, node_id: str):
        if node_id not in self.nodes:
            raise ValueError(f"unknown output node {node_id!r}")
        self.output_id = node_id

    def validate(self):
        """Structural rules: norm layers must directly follow a producer site.

        A producer is a conv/linear node, a search-stage choice node, or what
        extraction leaves at a former conv site (seq, identity).
        """
        if self.output_id is None:
            raise GraphShapeError("graph has no output node")
        for node in self.nodes.values():
            if node.layer.kind in ("batchnorm1d", "instancenorm1d"):
                src = node.inputs[0]
                src_kind = None if src == INPUT else self.nodes[src].layer.kind
                if src_kind not in ("conv1d", "linear", "choice", "seq", "identity"):
                    raise GraphShapeError(
                        f"node {node.id!r}: normalization must directly follow a conv/linear "
                        f"or conv-site node (got {src_kind!r})")

    # -- execution ---------------------------------------------------------
    def forward(self, x, training: bool = False) -> Tensor:
        xt = x if isinstance(x, Tensor) else Tensor(x)
        out = run_graph(self, xt, training,
                        lambda node, xs: node.layer.forward(xs, training=training))
        self._last_input = xt
        self._last_output = out
        return out

    def backward(self, loss_grad=None):
        if self._last_output is None:
            raise RuntimeError("backward called before forward")
        self._last_output.backward(loss_grad)

    # -- parameters --------------------------------------------------------
    def params(self) -> dict[str, Tensor]:
        out = {}
        for node in self.nodes.values():
            for name, t in node.layer.params().items():
                out[f"{node.id}.{name}"] = t
        return out

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.params().values()))

    def zero_grad(self):
        for t in self.params().values():
            t.grad = None

    def clone(self) -> "ModelGraph":
        g = ModelGraph(self.input_shape)
        for node in self.nodes.values():
            g.add(node.id, copy.deepcopy(node.layer), list(node.inputs), dict(node.meta))
        g.set_output(self.output_id)
        return g

    # -- serialization -------------------------------------------------------
    def descriptor(self) -> dict:
        nodes = []
        offset = 0
        for node in self.nodes.values():
            pman, bman = {}, {}
            for name, t in node.layer.params().items():
                pman[name] = {"shape": list(t.data.shape), "offset": offset}
                offset += t.data.size
            for name, b in node.layer.buffers().items():
                bman[name] = {"shape": list(b.shape), "offset": offset}
                offset += b.size
            nodes.append({"id": node.id, "kind": node.layer.kind, "inputs": node.inputs,
                          "hyper": node.layer.hyper(), "meta": node.meta,
                          "params": pman, "buffers": bman})
        return {"format_version": GRAPH_FORMAT, "input_shape": list(self.input_shape),
                "output": self.output_id, "nodes": nodes, "blob_size": offset}

    def weight_blob(self) -> bytes:
        chunks = []
        for node in self.nodes.values():
            for t in node.layer.params().values():
                chunks.append(t.data.astype("<f4").tobytes())
            for b in node.layer.buffers().values():
                chunks.append(np.asarray(b).astype("<f4").tobytes())
        return b"".join(chunks)

    def save(self, dirpath: str, prefix: str = "model"):
        os.makedirs(dirpath, exist_ok=True)
        desc = self.descriptor()
        with open(os.path.join(dirpath, prefix + ".json"), "w") as f:
            json.dump(desc, f, indent=1, sort_keys=True)
        with open(os.path.join(dirpath, prefix + ".bin"), "wb") as f:
            f.write(self.weight_blob())

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.descriptor(), sort_keys=True).encode())
        h.update(self.weight_blob())
        return h.hexdigest()

    @classmethod
    def load(cls, dirpath: str, prefix: str = "model") -> "ModelGraph":
        with open(os.path.join(dirpath, prefix + ".json")) as f:
            desc = json.load(f)
        blob = np.fromfile(os.path.join(dirpath, prefix + ".bin"), dtype="<f4")
        if blob.size != desc["blob_size"]:
            raise ValueError(f"weight blob has {blob.size} values, descriptor "
                             f"expects {desc['blob_size']}")
        g = cls(tuple(desc["input_shape"]))
        for nd in desc["nodes"]:
            layer = make_layer(nd["kind"], nd["hyper"])
            g.add(nd["id"], layer, nd["inputs"], nd.get("meta", {}))
            for name, man in nd["params"].items():
                t = layer.params()[name]
                arr = blob[man["offset"]: man["offset"] + int(np.prod(man["shape"]))]
                t.data = arr.astype(np.float64).reshape(man["shape"])
            for name, man in nd.get("buffers", {}).items():
                arr = blob[man["offset"]: man["offset"] + int(np.prod(man["shape"]))]
                layer.set_buffer(name, arr.astype(np.float64).reshape(man["shape"]))
        g.set_output(desc["output"])
        return g


def run_graph(graph: ModelGraph, x: Tensor, training: bool, node_forward) -> Tensor:
    """Walk the graph in order, calling node_forward(node, input_tensors).

    Shared by the plain, masked, and quantized executors so they only differ
    in what happens at each node.
    """
    if x.data.ndim != len(graph.input_shape) + 1:
        raise GraphShapeError(
            f"input must be batched with shape (B, *{graph.input_shape}), got {x.data.shape}")
    if tuple(x.data.shape[1:]) != graph.input_shape:
        raise GraphShapeError(
            f"input shape {tuple(x.data.shape[1:])} != graph input {graph.input_shape}")
    acts: dict[str, Tensor] = {INPUT: x}
    out = x
    for node in graph.nodes.values():
        xs = [acts[src] for src in node.inputs]
        try:
            y = node_forward(node, xs)
        except ValueError as e:
            raise GraphShapeError(f"node {node.id!r}: {e}") from None
        expect = graph.shapes[node.id]
        if tuple(y.data.shape[1:]) != expect:
            raise GraphShapeError(
                f"node {node.id!r}: produced {tuple(y.data.shape[1:])}, expected {expect}")
        acts[node.id] = y
        if node.id == graph.output_id:
            out = y
    return out
