"""Structured channel pruning with trainable Heaviside-gated masks.

Every conv/linear output channel gets a binary gate H(theta) (H(t)=1 iff
t >= 0) with a straight-through estimator behind it, theta starting at +1
(all-keep).  Gates are organized into classes by a union-find over channel
slots so that structurally tied channels share one gate:

* residual adds tie the two incoming branches slot-wise,
* grouped convolutions own one slot per within-group channel (channels prune
  uniformly across groups) and tie their producer group-uniformly,
* depthwise convolutions carry no gates of their own and follow their
  producer,
* heads (and anything tied to the graph input) are frozen to keep.

Masked execution has two modes.  During the search phase each conv/linear
is gated multiplicatively on both its output dimension (its own gates) and
its input dimension (its producers' gates), keeping theta differentiable
through the straight-through estimator.  Once gates are frozen, every
conv/linear instead runs on gathered copies of just the surviving channels
and scatters the result back to full width.  The compact recompute matters:
multiplying removed channels by zero leaves them inside the vectorized
channel reduction, and reassociated partial sums differ from the physically
sliced network by a few ulp.  Gathering first makes the frozen masked graph
and the exported graph perform identical arithmetic, so their outputs match
bit for bit.  The differentiable cost surrogate counts surviving parameters
and equals the exported graph's parameter count exactly once gates are
binary.
"""

from __future__ import annotations

import copy
import json
import os
import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import PitConfig
from .graph import INPUT, GraphShapeError, ModelGraph, run_graph
from .training import (Problem, SearchSettings, TaskData, TrainLog, graph_buffers,
                       run_search, set_graph_buffer)

FROZEN = -1  # gate index for channels that must always be kept

_PASSTHROUGH = ("batchnorm1d", "instancenorm1d", "relu", "prelu", "maxpool1d",
                "avgpool1d", "upsample", "identity", "affine")


def _is_depthwise(layer) -> bool:
    return (layer.kind == "conv1d" and layer.groups > 1
            and layer.groups == layer.in_ch == layer.out_ch)


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def add(self, key):
        self.parent.setdefault(key, key)

    def find(self, key):
        root = key
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[key] != root:
            self.parent[key], key = root, self.parent[key]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # frozen status must win any merge
            if rb == "frozen":
                ra, rb = rb, ra
            self.parent[rb] = ra


class PruneMask:
    """Read-only view of one layer's gates inside the shared theta vector."""

    def __init__(self, node_id: str, slot_idx: np.ndarray, share_map: np.ndarray,
                 masked: "MaskedGraph"):
        self.node_id = node_id
        self.slot_idx = slot_idx      # theta index per mask slot (FROZEN = kept)
        self.share_map = share_map    # output channel -> mask slot
        self._masked = masked

    @property
    def theta(self) -> np.ndarray:
        th = self._masked.theta.data
        return np.array([th[i] if i >= 0 else np.inf for i in self.slot_idx])

    def gates(self) -> np.ndarray:
        return (self.theta >= 0).astype(float)

    def kept_slots(self) -> int:
        return int(self.gates().sum())

    def retained_fraction(self) -> float:
        return self.kept_slots() / len(self.slot_idx)


class MaskedGraph:
    """A graph plus its channel-gate structure and the flat theta vector."""

    def __init__(self, graph: ModelGraph, theta_init: float = 1.0):
        self.graph = graph
        self.frozen = False
        self._theta_init = float(theta_init)
        self._build()

    # -- structure ---------------------------------------------------------
    def _build(self):
        g = self.graph
        uf = _UnionFind()
        uf.add("frozen")
        refs: dict[str, list] = {INPUT: ["frozen"] * g.input_shape[0]}
        own_slots: dict[str, list] = {}

        for node in g.nodes.values():
            kind = node.layer.kind
            if kind == "conv1d":
                conv = node.layer
                in_refs = refs[node.inputs[0]]
                head = bool(node.meta.get("head")) or node.id == g.output_id
                if head:
                    out = ["frozen"] * conv.out_ch
                elif _is_depthwise(conv):
                    out = list(in_refs)
                elif conv.groups == 1:
                    slots = [(node.id, c) for c in range(conv.out_ch)]
                    for s in slots:
                        uf.add(s)
                    own_slots[node.id] = slots
                    out = slots
                else:
                    out_g = conv.out_ch // conv.groups
                    in_g = conv.in_ch // conv.groups
                    slots = [(node.id, s) for s in range(out_g)]
                    for s in slots:
                        uf.add(s)
                    own_slots[node.id] = slots
                    out = [slots[c % out_g] for c in range(conv.out_ch)]
                    # producer channels must prune uniformly across groups
                    for j in range(in_g):
                        for gi in range(1, conv.groups):
                            uf.union(in_refs[j], in_refs[j + gi * in_g])
                refs[node.id] = out
            elif kind == "linear":
                lin = node.layer
                head = bool(node.meta.get("head")) or node.id == g.output_id
                if head:
                    out = ["frozen"] * lin.out_features
                else:
                    slots = [(node.id, c) for c in range(lin.out_features)]
                    for s in slots:
                        uf.add(s)
                    own_slots[node.id] = slots
                    out = slots
                refs[node.id] = out
            elif kind == "add":
                a, b = (refs[src] for src in node.inputs)
                for ra, rb in zip(a, b):
                    uf.union(ra, rb)
                refs[node.id] = list(a)
            elif kind == "concat":
                refs[node.id] = [r for src in node.inputs for r in refs[src]]
            elif kind in _PASSTHROUGH:
                refs[node.id] = list(refs[node.inputs[0]])
            else:
                raise GraphShapeError(
                    f"node {node.id!r}: unsupported layer kind {kind!r} "
                    f"in the channel-gate propagation path")

        # assign one theta entry per non-frozen root, in deterministic order
        root_index: dict = {}
        for node in g.nodes.values():
            for ref in refs[node.id]:
                root = uf.find(ref)
                if root != "frozen" and root not in root_index:
                    root_index[root] = len(root_index)

        def idx_of(ref_list):
            out = np.empty(len(ref_list), dtype=np.int64)
            for i, ref in enumerate(ref_list):
                root = uf.find(ref)
                out[i] = FROZEN if root == "frozen" else root_index[root]
            return out

        self.n_gates = len(root_index)
        self.theta = Tensor(np.full(self.n_gates, self._theta_init), requires_grad=True)
        self._out_idx = {nid: idx_of(r) for nid, r in refs.items()}
        self._own_slot_idx = {nid: idx_of(slots) for nid, slots in own_slots.items()}
        self._frozen_gates: np.ndarray | None = None

    def mask_views(self) -> dict[str, PruneMask]:
        views = {}
        for node in self.graph.nodes.values():
            if node.layer.kind not in ("conv1d", "linear"):
                continue
            out_idx = self._out_idx[node.id]
            if node.id in self._own_slot_idx:
                slot_idx = self._own_slot_idx[node.id]
                n_slots = len(slot_idx)
                share = np.arange(len(out_idx)) % n_slots
            else:
                slot_idx = out_idx
                share = np.arange(len(out_idx))
            views[node.id] = PruneMask(node.id, slot_idx, share, self)
        return views

    # -- gates ---------------------------------------------------------------
    def freeze(self):
        """Fix gates at their current binary values; theta stops training."""
        self.frozen = True
        self._frozen_gates = (self.theta.data >= 0).astype(np.float64)

    def _gates(self):
        if self.frozen:
            return Tensor(self._frozen_gates)
        return ad.heaviside_ste(self.theta)

    def _gate_vec(self, gates, idx: np.ndarray):
        """(len(idx),) tensor of gate values; frozen entries are exactly 1."""
        if np.all(idx == FROZEN):
            return None
        sel = (idx != FROZEN).astype(np.float64)
        picked = ad.gather(gates, np.where(idx == FROZEN, 0, idx))
        return picked * sel + (1.0 - sel)

    def input_gate_idx(self, node) -> np.ndarray:
        return self._out_idx[node.inputs[0]] if node.inputs[0] != INPUT \
            else np.full(self.graph.input_shape[0], FROZEN, dtype=np.int64)

    # -- execution -------------------------------------------------------------
    def _kept_idx(self, idx: np.ndarray) -> np.ndarray:
        """Positions whose frozen gate is open (frozen-kept entries included)."""
        keep = np.array([i == FROZEN or self._frozen_gates[i] > 0.5 for i in idx],
                        dtype=bool)
        return np.flatnonzero(keep)

    def forward(self, x, training: bool = False) -> Tensor:
        xt = x if isinstance(x, Tensor) else Tensor(x)
        if self.frozen:
            def node_forward(node, xs):
                return self._frozen_node(node, xs, training)
        else:
            gates = self._gates()

            def node_forward(node, xs):
                return self._gated_node(node, xs, training, gates)
        return run_graph(self.graph, xt, training, node_forward)

    def _gated_node(self, node, xs, training, gates):
        layer = node.layer
        if layer.kind == "conv1d":
            out_vec = self._gate_vec(gates, self._out_idx[node.id])
            w, b = layer.w, layer.b
            if out_vec is not None:
                w = w * ad.reshape(out_vec, (-1, 1, 1))
                b = b * out_vec
            if not _is_depthwise(layer):
                in_idx = self.input_gate_idx(node)
                in_g = layer.in_ch // layer.groups
                in_vec = self._gate_vec(gates, in_idx[:in_g])
                if in_vec is not None:
                    w = w * ad.reshape(in_vec, (1, -1, 1))
            return layer.functional_forward(xs, training, w=w, b=b)
        if layer.kind == "linear":
            out_vec = self._gate_vec(gates, self._out_idx[node.id])
            in_idx = self.input_gate_idx(node)
            feats = layer.in_features // len(in_idx)
            in_vec = self._gate_vec(gates, np.repeat(in_idx, feats))
            w, b = layer.w, layer.b
            if out_vec is not None:
                w = w * ad.reshape(out_vec, (-1, 1))
                b = b * out_vec
            if in_vec is not None:
                w = w * ad.reshape(in_vec, (1, -1))
            return layer.functional_forward(xs, training, w=w, b=b)
        return layer.forward(xs, training=training)

    def _frozen_node(self, node, xs, training):
        """Compact recompute: gather kept channels, run the op, scatter back."""
        layer = node.layer
        if layer.kind == "conv1d":
            kept_out = self._kept_idx(self._out_idx[node.id])
            kept_in = self._kept_idx(self.input_gate_idx(node))
            if len(kept_out) == 0 or len(kept_in) == 0:
                raise GraphShapeError(f"node {node.id!r}: no surviving channels")
            xk = ad.take_axis(xs[0], kept_in, 1)
            b = ad.gather(layer.b, kept_out)
            if _is_depthwise(layer):
                w = ad.take_axis(layer.w, kept_out, 0)
                groups = len(kept_out)
            else:
                in_g = layer.in_ch // layer.groups
                kept_in_g = kept_in[kept_in < in_g]
                w = ad.take_axis(ad.take_axis(layer.w, kept_out, 0), kept_in_g, 1)
                groups = layer.groups
            y = ad.conv1d(xk, w, b, stride=layer.stride, dilation=layer.dilation,
                          groups=groups, pad=tuple(layer.pad))
            return ad.put_axis(y, kept_out, 1, layer.out_ch)
        if layer.kind == "linear":
            kept_out = self._kept_idx(self._out_idx[node.id])
            in_idx = self.input_gate_idx(node)
            feats = layer.in_features // len(in_idx)
            kept_feats = self._kept_idx(np.repeat(in_idx, feats))
            if len(kept_out) == 0 or len(kept_feats) == 0:
                raise GraphShapeError(f"node {node.id!r}: no surviving channels")
            x0 = xs[0]
            if x0.data.ndim == 3:
                x0 = ad.reshape(x0, (x0.data.shape[0], -1))
            xk = ad.take_axis(x0, kept_feats, 1)
            w = ad.take_axis(ad.take_axis(layer.w, kept_out, 0), kept_feats, 1)
            b = ad.gather(layer.b, kept_out)
            y = ad.linear_xw(xk, w, b)
            return ad.put_axis(y, kept_out, 1, layer.out_features)
        return layer.forward(xs, training=training)

    # -- cost ---------------------------------------------------------------------
    def _kept(self, gates, idx: np.ndarray):
        """Differentiable count of surviving channels among idx."""
        n_frozen = int((idx == FROZEN).sum())
        live = idx[idx != FROZEN]
        total = Tensor(np.asarray(float(n_frozen)))
        if len(live):
            total = total + ad.tsum(ad.gather(gates, live))
        return total

    def mask_cost(self) -> Tensor:
        gates = self._gates()
        total = Tensor(np.asarray(0.0))
        for node in self.graph.nodes.values():
            layer = node.layer
            if layer.kind == "conv1d":
                kept_out = self._kept(gates, self._out_idx[node.id])
                if _is_depthwise(layer):
                    total = total + kept_out * float(layer.kernel) + kept_out
                else:
                    in_idx = self.input_gate_idx(node)
                    in_g = layer.in_ch // layer.groups
                    kept_in = self._kept(gates, in_idx[:in_g])
                    total = total + kept_out * kept_in * float(layer.kernel) + kept_out
            elif layer.kind == "linear":
                kept_out = self._kept(gates, self._out_idx[node.id])
                in_idx = self.input_gate_idx(node)
                feats = layer.in_features // len(in_idx)
                kept_in = self._kept(gates, np.repeat(in_idx, feats))
                total = total + kept_out * kept_in + kept_out
            elif layer.kind in ("batchnorm1d", "instancenorm1d", "affine"):
                kept = self._kept(gates, self._out_idx[node.id])
                total = total + kept * 2.0
            elif layer.kind == "prelu":
                total = total + self._kept(gates, self._out_idx[node.id])
        return total

    # -- persistence ---------------------------------------------------------------
    def save(self, dirpath: str, prefix: str = "model"):
        self.graph.save(dirpath, prefix)
        with open(os.path.join(dirpath, prefix + ".masks.json"), "w") as f:
            json.dump({"theta": self.theta.data.tolist(), "frozen": self.frozen}, f)

    @classmethod
    def load(cls, dirpath: str, prefix: str = "model") -> "MaskedGraph":
        masked = cls(ModelGraph.load(dirpath, prefix))
        with open(os.path.join(dirpath, prefix + ".masks.json")) as f:
            d = json.load(f)
        theta = np.asarray(d["theta"], dtype=np.float64)
        if theta.shape != masked.theta.data.shape:
            raise ValueError(f"mask table has {theta.shape[0]} gates, graph "
                             f"needs {masked.theta.data.shape[0]}")
        masked.theta.data = theta
        if d.get("frozen"):
            masked.freeze()
        return masked


def attach_masks(graph: ModelGraph, theta_init: float = 1.0) -> MaskedGraph:
    return MaskedGraph(graph, theta_init=theta_init)


def masked_forward(masked: MaskedGraph, x, training: bool = False) -> Tensor:
    return masked.forward(x, training=training)


def mask_cost(masked: MaskedGraph) -> Tensor:
    return masked.mask_cost()


def clamp_empty_layers(masked: MaskedGraph) -> list[str]:
    """Revive the max-theta slot of any layer whose own gates all closed."""
    revived = []
    th = masked.theta.data
    for nid, slot_idx in masked._own_slot_idx.items():
        live = slot_idx[slot_idx != FROZEN]
        if len(live) and not np.any(th[live] >= 0):
            th[live[np.argmax(th[live])]] = 1.0
            revived.append(nid)
    if revived:
        warnings.warn(f"all channels pruned in {revived}; kept the max-theta "
                      f"channel of each", RuntimeWarning)
    return revived


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class PitProblem(Problem):
    def __init__(self, masked: MaskedGraph):
        self.masked = masked

    def forward(self, x, training):
        return self.masked.forward(x, training=training)

    def weight_params(self):
        return self.masked.graph.params()

    def arch_params(self):
        if self.masked.frozen:
            return {}
        return {"mask_theta": self.masked.theta}

    def regularizer(self):
        return self.masked.mask_cost()

    def buffers(self):
        return graph_buffers(self.masked.graph)

    def set_buffer(self, name, arr):
        set_graph_buffer(self.masked.graph, name, arr)


def pit_train(masked: MaskedGraph, data: TaskData, cfg: PitConfig) -> TrainLog:
    """Mask search, empty-layer clamp, freeze, then masked fine-tuning.

    Returns one log whose epochs run through both phases; the restored state
    after each phase is its best-validation snapshot.
    """
    prob = PitProblem(masked)
    log = run_search(prob, data, SearchSettings(
        epochs=cfg.warmup_epochs + cfg.search_epochs, warmup=cfg.warmup_epochs,
        patience=cfg.patience, batch_size=cfg.batch_size, lr_w=cfg.lr_w,
        lr_arch=cfg.lr_theta, lambda_=cfg.lambda_, seed=cfg.seed))
    clamp_empty_layers(masked)
    masked.freeze()
    if cfg.finetune_epochs > 0:
        ft = run_search(prob, data, SearchSettings(
            epochs=cfg.finetune_epochs, warmup=cfg.finetune_epochs,
            patience=cfg.patience, batch_size=cfg.batch_size, lr_w=cfg.lr_w,
            seed=cfg.seed + 1))
        offset = len(log.rows)
        for row in ft.rows:
            log.append(row["epoch"] + offset, row["task_loss"], row["reg_value"],
                       row["val_mse"], row["expected_cost"])
        if ft.best_val < log.best_val:
            log.best_val, log.best_epoch = ft.best_val, ft.best_epoch + offset
    return log


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_pruned(masked: MaskedGraph) -> ModelGraph:
    """Physically remove closed channels; exact forward match with the mask."""
    g = masked.graph
    gates = (masked.theta.data >= 0)

    def kept_channels(idx: np.ndarray) -> np.ndarray:
        keep = np.array([i == FROZEN or gates[i] for i in idx], dtype=bool)
        return np.flatnonzero(keep)

    out = ModelGraph(g.input_shape)
    for node in g.nodes.values():
        layer = node.layer
        kind = layer.kind
        kept_out = kept_channels(masked._out_idx[node.id])
        if kind == "conv1d":
            in_idx = masked.input_gate_idx(node)
            kept_in = kept_channels(in_idx)
            if len(kept_out) == 0 or len(kept_in) == 0:
                raise GraphShapeError(f"node {node.id!r}: no surviving channels")
            from .layers import Conv1d
            if _is_depthwise(layer):
                n = len(kept_out)
                new = Conv1d(n, n, layer.kernel, stride=layer.stride,
                             dilation=layer.dilation, groups=n, pad=tuple(layer.pad))
                new.w.data = layer.w.data[kept_out].copy()
                new.b.data = layer.b.data[kept_out].copy()
            else:
                in_g = layer.in_ch // layer.groups
                kept_in_g = kept_in[kept_in < in_g]
                new = Conv1d(len(kept_in_g) * layer.groups, len(kept_out),
                             layer.kernel, stride=layer.stride, dilation=layer.dilation,
                             groups=layer.groups, pad=tuple(layer.pad))
                new.w.data = layer.w.data[np.ix_(kept_out, kept_in_g)].copy()
                new.b.data = layer.b.data[kept_out].copy()
            out.add(node.id, new, list(node.inputs), dict(node.meta))
        elif kind == "linear":
            from .layers import Linear
            in_idx = masked.input_gate_idx(node)
            feats = layer.in_features // len(in_idx)
            kept_feats = kept_channels(np.repeat(in_idx, feats))
            new = Linear(len(kept_feats), len(kept_out))
            new.w.data = layer.w.data[np.ix_(kept_out, kept_feats)].copy()
            new.b.data = layer.b.data[kept_out].copy()
            out.add(node.id, new, list(node.inputs), dict(node.meta))
        elif kind in ("batchnorm1d", "instancenorm1d"):
            new = copy.deepcopy(layer)
            new.ch = len(kept_out)
            new.gamma.data = layer.gamma.data[kept_out].copy()
            new.beta.data = layer.beta.data[kept_out].copy()
            for bname, bval in layer.buffers().items():
                new.set_buffer(bname, np.asarray(bval)[kept_out].copy())
            out.add(node.id, new, list(node.inputs), dict(node.meta))
        elif kind == "prelu":
            from .layers import PReLU
            new = PReLU(len(kept_out))
            new.slope.data = layer.slope.data[kept_out].copy()
            out.add(node.id, new, list(node.inputs), dict(node.meta))
        elif kind == "affine":
            from .layers import ChannelAffine
            new = ChannelAffine(len(kept_out))
            new.scale.data = layer.scale.data[kept_out].copy()
            new.shift.data = layer.shift.data[kept_out].copy()
            out.add(node.id, new, list(node.inputs), dict(node.meta))
        else:
            out.add(node.id, copy.deepcopy(layer), list(node.inputs), dict(node.meta))
    out.set_output(g.output_id)
    return out
