"""Mixed-precision weight quantization with a differentiable bit-width search.

Weights fake-quantize through a min/max affine grid; the per-layer bit width
is a softmax mixture over {2, 4, 8} whose temperature anneals each epoch.
Activations use a signed trainable-clip quantizer fixed at 8 bits.  After
the search phase each layer freezes to its argmax precision and training
continues as plain quantization-aware fine-tuning.

Export produces a self-contained integer model: weight codes at the chosen
bits, 32-bit bias codes, and 64-bit float scales.  The container's execution
contract is pinned down by ``reference_forward`` here: accumulate integer
code products exactly, then requantize with

    y = clamp(round_half_away((acc - zp_w * sums + bias) * M), -128, 127)

where M = scale_w * scale_x / scale_out.  Every term before the multiply is
an exactly represented integer, so any executor that follows the same
formula (see the integer runtime) reproduces these codes bit for bit.
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import MpsConfig
from .graph import INPUT, GraphShapeError, ModelGraph, run_graph
from .layers import ChannelAffine, ReLU
from .training import (Problem, SearchSettings, TaskData, TrainLog,
                       run_search)

CODE_MIN, CODE_MAX = -128, 127  # signed 8-bit activation lattice


def round_half_away(u):
    """Round to nearest integer, halves away from zero. Shared by all executors."""
    u = np.asarray(u, dtype=np.float64)
    return np.copysign(np.floor(np.abs(u) + 0.5), u)


# ---------------------------------------------------------------------------
# fake quantizers
# ---------------------------------------------------------------------------

def _weight_grid(w: np.ndarray, bits: int):
    """(scale, min, max) of the affine grid spanned by the tensor's range."""
    mn = float(w.min())
    mx = float(w.max())
    if mx == mn:
        return 1.0, mn, mx
    return (mx - mn) / (2 ** bits - 1), mn, mx


def _weight_codes(w: np.ndarray, s: float, mn: float, bits: int) -> np.ndarray:
    q = round_half_away((w - mn) / s)
    return np.clip(q, 0, 2 ** bits - 1)


def _weight_dequant(q: np.ndarray, s: float, mn: float, mx: float, bits: int) -> np.ndarray:
    out = q * s + mn
    # land the extreme codes exactly on the observed range so requantizing
    # the result reproduces it (idempotence)
    out = np.where(q == 0, mn, out)
    return np.where(q == 2 ** bits - 1, mx, out)


def fake_quant_minmax(w: Tensor, bits: int) -> Tensor:
    """Snap w to its own 2^bits-level affine grid; straight-through gradient."""
    if bits < 2 or bits > 8:
        raise ValueError(f"bits must lie in [2, 8], got {bits}")
    s, mn, mx = _weight_grid(w.data, bits)
    if mx == mn:
        data = w.data.copy()
    else:
        data = _weight_dequant(_weight_codes(w.data, s, mn, bits), s, mn, mx, bits)

    def back(g):
        ad._accum(w, g)

    return ad._make(data, (w,), back)


def pact_activation(x: Tensor, alpha: Tensor, bits: int) -> Tensor:
    """Signed clip-and-quantize with a trainable clip value.

    Codes live in [-2^(b-1), 2^(b-1)-1] at scale alpha / 2^(b-1).  The clip
    gradient follows the trainable-clipping rule: elements clamped high pull
    alpha with factor (2^(b-1)-1)/2^(b-1), elements clamped low with -1, and
    interior elements pass their gradient straight to x only.
    """
    a = float(alpha.data.reshape(()))
    if a <= 0:
        raise ValueError(f"clip value must be positive, got {a}")
    half = 2 ** (bits - 1)
    s = a / half
    q = round_half_away(x.data / s)
    upper = q > half - 1
    lower = q < -half
    data = np.clip(q, -half, half - 1) * s

    def back(g):
        ad._accum(x, g * ~(upper | lower))
        ga = (g * (upper * ((half - 1) / half) - lower * 1.0)).sum()
        ad._accum(alpha, np.asarray(ga).reshape(alpha.data.shape))

    return ad._make(data, (x, alpha), back)


def tau_schedule(epoch: int, scale: float = 5.0, rate: float = 0.0045) -> float:
    """Softmax temperature: starts at `scale` and decays exponentially."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return scale * math.exp(-rate * epoch)


# ---------------------------------------------------------------------------
# graph preparation
# ---------------------------------------------------------------------------

def _flatten_seqs(graph: ModelGraph) -> ModelGraph:
    """Expand fused op chains into individual nodes (last child keeps the id)."""
    out = ModelGraph(graph.input_shape)
    for node in graph.nodes.values():
        if node.layer.kind == "seq":
            src = node.inputs[0]
            kids = node.layer.children
            for i, child in enumerate(kids):
                last = i == len(kids) - 1
                cid = node.id if last else f"{node.id}/{i}"
                out.add(cid, copy.deepcopy(child), [src],
                        dict(node.meta) if last else {})
                src = cid
        else:
            out.add(node.id, copy.deepcopy(node.layer), list(node.inputs),
                    dict(node.meta))
    out.set_output(graph.output_id)
    return out


def fold_norms(graph: ModelGraph) -> ModelGraph:
    """Bake eval-mode normalization into the preceding conv/linear weights.

    Fused op chains are first expanded into individual nodes.  A norm whose
    producer is a conv/linear consumed only by that norm folds into the
    producer's weights and disappears.  Any other norm becomes a per-channel
    affine layer with the same eval-mode behavior.  Parametric ReLU nodes
    are replaced by plain ReLU so every activation is a code-wise max with
    zero.  Returns a new graph; the input is left untouched.
    """
    graph = _flatten_seqs(graph)
    consumers: dict[str, int] = {}
    for node in graph.nodes.values():
        for src in node.inputs:
            consumers[src] = consumers.get(src, 0) + 1

    fold_into: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    alias: dict[str, str] = {}
    for node in graph.nodes.values():
        if node.layer.kind not in ("batchnorm1d", "instancenorm1d"):
            continue
        prod = node.inputs[0]
        if (prod != INPUT and prod != graph.output_id
                and graph.nodes[prod].layer.kind in ("conv1d", "linear")
                and consumers.get(prod, 0) == 1
                and prod not in fold_into):
            mean, var = node.layer.folding_stats()
            scale = node.layer.gamma.data / np.sqrt(var + node.layer.eps)
            shift = node.layer.beta.data - mean * scale
            fold_into[prod] = (scale, shift)
            alias[node.id] = prod

    out = ModelGraph(graph.input_shape)
    for node in graph.nodes.values():
        layer = node.layer
        inputs = [alias.get(src, src) for src in node.inputs]
        if node.id in alias:
            continue  # folded away
        if node.id in fold_into:
            scale, shift = fold_into[node.id]
            new = copy.deepcopy(layer)
            if layer.kind == "conv1d":
                new.w.data = layer.w.data * scale[:, None, None]
            else:
                new.w.data = layer.w.data * scale[:, None]
            new.b.data = layer.b.data * scale + shift
            out.add(node.id, new, inputs, dict(node.meta))
        elif layer.kind in ("batchnorm1d", "instancenorm1d"):
            mean, var = layer.folding_stats()
            scale = layer.gamma.data / np.sqrt(var + layer.eps)
            aff = ChannelAffine(layer.ch)
            aff.scale.data = scale.copy()
            aff.shift.data = layer.beta.data - mean * scale
            out.add(node.id, aff, inputs, dict(node.meta))
        elif layer.kind == "prelu":
            out.add(node.id, ReLU(), inputs, dict(node.meta))
        else:
            out.add(node.id, copy.deepcopy(layer), inputs, dict(node.meta))
    out.set_output(alias.get(graph.output_id, graph.output_id))
    return out


# kinds that get their own output quantizer vs. kinds that stay on the
# producer's code grid
_QUANTIZED = ("conv1d", "linear", "add", "concat", "affine")
_INHERIT = ("relu", "maxpool1d", "avgpool1d", "upsample", "identity")


class QuantGraph:
    """A folded graph plus per-layer bit-width mixtures and clip values."""

    def __init__(self, graph: ModelGraph, precisions=(2, 4, 8), act_bits: int = 8,
                 alpha_init: float = 8.0):
        for node in graph.nodes.values():
            kind = node.layer.kind
            if kind in ("batchnorm1d", "instancenorm1d", "prelu"):
                raise GraphShapeError(
                    f"node {node.id!r}: fold normalization and parametric "
                    f"activations before attaching quantizers")
            if kind not in _QUANTIZED and kind not in _INHERIT:
                raise GraphShapeError(f"node {node.id!r}: kind {kind!r} has no "
                                      f"integer execution rule")
        self.graph = graph
        self.precisions = tuple(int(p) for p in precisions)
        self.act_bits = int(act_bits)
        self.tau = 1.0
        self.frozen_bits: dict[str, int] | None = None
        n = len(self.precisions)
        self.thetas = {node.id: Tensor(np.full(n, 1.0 / n), requires_grad=True)
                       for node in graph.nodes.values()
                       if node.layer.kind in ("conv1d", "linear")}
        names = ["input"] + [node.id for node in graph.nodes.values()
                             if node.layer.kind in _QUANTIZED]
        self.alphas = {name: Tensor(np.asarray(float(alpha_init)), requires_grad=True)
                       for name in names}

    @property
    def frozen(self) -> bool:
        return self.frozen_bits is not None

    def mixture(self, node_id: str) -> Tensor:
        if self.frozen:
            onehot = np.zeros(len(self.precisions))
            onehot[self.precisions.index(self.frozen_bits[node_id])] = 1.0
            return Tensor(onehot)
        return ad.softmax1d(self.thetas[node_id] * (1.0 / self.tau))

    def effective_weight(self, node_id: str) -> Tensor:
        w = self.graph.nodes[node_id].layer.w
        if self.frozen:
            return fake_quant_minmax(w, self.frozen_bits[node_id])
        variants = [fake_quant_minmax(w, p) for p in self.precisions]
        return ad.weighted_sum(self.mixture(node_id), variants)

    def forward(self, x, training: bool = False) -> Tensor:
        xt = x if isinstance(x, Tensor) else Tensor(x)
        xq = pact_activation(xt, self.alphas["input"], self.act_bits)

        def node_forward(node, xs):
            layer = node.layer
            if layer.kind in ("conv1d", "linear"):
                y = layer.functional_forward(xs, training,
                                             w=self.effective_weight(node.id))
            else:
                y = layer.forward(xs, training=training)
            if layer.kind in _QUANTIZED:
                y = pact_activation(y, self.alphas[node.id], self.act_bits)
            return y

        return run_graph(self.graph, xq, training, node_forward)

    def bit_cost(self) -> Tensor:
        pvec = Tensor(np.asarray(self.precisions, dtype=np.float64))
        total = Tensor(np.asarray(0.0))
        for nid in self.thetas:
            params = float(self.graph.nodes[nid].layer.param_count())
            total = total + ad.tsum(self.mixture(nid) * pvec) * params
        return total

    def freeze_precisions(self) -> dict[str, int]:
        """Fix every layer at its argmax bit width (ties pick the narrowest)."""
        self.frozen_bits = {nid: self.precisions[int(np.argmax(t.data))]
                            for nid, t in self.thetas.items()}
        return dict(self.frozen_bits)

    # -- persistence -----------------------------------------------------------
    def save(self, dirpath: str, prefix: str = "model"):
        self.graph.save(dirpath, prefix)
        state = {"precisions": list(self.precisions), "act_bits": self.act_bits,
                 "tau": self.tau,
                 "theta": {nid: t.data.tolist() for nid, t in self.thetas.items()},
                 "alpha": {k: float(a.data.reshape(())) for k, a in self.alphas.items()},
                 "frozen_bits": self.frozen_bits}
        with open(os.path.join(dirpath, prefix + ".quant.json"), "w") as f:
            json.dump(state, f, indent=1)

    @classmethod
    def load(cls, dirpath: str, prefix: str = "model") -> "QuantGraph":
        with open(os.path.join(dirpath, prefix + ".quant.json")) as f:
            st = json.load(f)
        qg = cls(ModelGraph.load(dirpath, prefix), precisions=st["precisions"],
                 act_bits=st["act_bits"])
        qg.tau = float(st["tau"])
        for nid, vals in st["theta"].items():
            qg.thetas[nid].data = np.asarray(vals, dtype=np.float64)
        for k, v in st["alpha"].items():
            qg.alphas[k].data = np.asarray(float(v))
        if st["frozen_bits"] is not None:
            qg.frozen_bits = {k: int(v) for k, v in st["frozen_bits"].items()}
        return qg


def attach_quant(graph: ModelGraph, cfg: MpsConfig | None = None) -> QuantGraph:
    cfg = cfg or MpsConfig()
    return QuantGraph(graph, precisions=cfg.precisions, act_bits=cfg.act_bits,
                      alpha_init=cfg.alpha_init)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class MpsProblem(Problem):
    def __init__(self, qg: QuantGraph, alpha_decay: float = 1e-4,
                 tau_scale: float = 5.0, tau_rate: float = 0.0045):
        self.qg = qg
        self.alpha_decay = alpha_decay
        self.tau_scale = tau_scale
        self.tau_rate = tau_rate

    def forward(self, x, training):
        return self.qg.forward(x, training=training)

    def weight_params(self):
        params = dict(self.qg.graph.params())
        for name, a in self.qg.alphas.items():
            params["alpha." + name] = a
        return params

    def arch_params(self):
        if self.qg.frozen:
            return {}
        return {f"{nid}.bits_theta": t for nid, t in self.qg.thetas.items()}

    def regularizer(self):
        return self.qg.bit_cost()

    def weight_loss_extra(self):
        if self.alpha_decay == 0:
            return None
        total = Tensor(np.asarray(0.0))
        for a in self.qg.alphas.values():
            total = total + a * a
        return total * self.alpha_decay

    def on_epoch(self, epoch):
        self.qg.tau = tau_schedule(epoch, self.tau_scale, self.tau_rate)


def mps_train(qg: QuantGraph, data: TaskData, cfg: MpsConfig) -> TrainLog:
    """Joint weight/bit-width search, precision freeze, then fine-tuning."""
    prob = MpsProblem(qg, alpha_decay=cfg.alpha_decay, tau_scale=cfg.tau_scale,
                      tau_rate=cfg.tau_rate)
    log = run_search(prob, data, SearchSettings(
        epochs=cfg.warmup_epochs + cfg.search_epochs, warmup=cfg.warmup_epochs,
        patience=cfg.patience, batch_size=cfg.batch_size, lr_w=cfg.lr_w,
        lr_arch=cfg.lr_theta, lambda_=cfg.lambda_, seed=cfg.seed))
    qg.freeze_precisions()
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
# exported integer model
# ---------------------------------------------------------------------------

@dataclass
class QuantizedLayer:
    id: str
    kind: str
    inputs: list
    hyper: dict
    scale_in: list            # one entry per input tensor
    scale_out: float
    bits_w: int | None = None
    scale_w: float | None = None
    zp_w: float | None = None
    w_codes: np.ndarray | None = None   # unsigned ints, < 2^bits_w
    bias_q: np.ndarray | None = None    # int32 codes at scale_w * scale_x
    affine_scale: list | None = None
    affine_shift: list | None = None


@dataclass
class QuantizedModel:
    input_shape: tuple
    in_scale: float
    layers: list
    output_id: str
    meta: dict = field(default_factory=dict)

    def layer(self, node_id: str) -> QuantizedLayer:
        for spec in self.layers:
            if spec.id == node_id:
                return spec
        raise KeyError(node_id)

    # -- persistence ---------------------------------------------------------
    def save(self, dirpath: str, prefix: str = "model"):
        from .intrt import pack
        os.makedirs(dirpath, exist_ok=True)
        header = {"input_shape": list(self.input_shape), "in_scale": self.in_scale,
                  "output_id": self.output_id, "meta": self.meta, "layers": []}
        wblob = bytearray()
        bblob = bytearray()
        for spec in self.layers:
            d = {"id": spec.id, "kind": spec.kind, "inputs": list(spec.inputs),
                 "hyper": spec.hyper, "scale_in": spec.scale_in,
                 "scale_out": spec.scale_out, "bits_w": spec.bits_w,
                 "scale_w": spec.scale_w, "zp_w": spec.zp_w,
                 "affine_scale": spec.affine_scale, "affine_shift": spec.affine_shift}
            if spec.w_codes is not None:
                packed = pack(spec.w_codes.reshape(-1), spec.bits_w)
                d["w_offset"] = len(wblob)
                d["w_count"] = int(spec.w_codes.size)
                d["w_shape"] = list(spec.w_codes.shape)
                wblob += packed
                bias = np.asarray(spec.bias_q, dtype="<i4")
                d["b_offset"] = len(bblob)
                d["b_count"] = int(bias.size)
                bblob += bias.tobytes()
            header["layers"].append(d)
        with open(os.path.join(dirpath, prefix + ".qmodel.json"), "w") as f:
            json.dump(header, f, indent=1)
        with open(os.path.join(dirpath, prefix + ".qweights.bin"), "wb") as f:
            f.write(bytes(wblob))
        with open(os.path.join(dirpath, prefix + ".qbias.bin"), "wb") as f:
            f.write(bytes(bblob))

    @classmethod
    def load(cls, dirpath: str, prefix: str = "model") -> "QuantizedModel":
        from .intrt import unpack
        with open(os.path.join(dirpath, prefix + ".qmodel.json")) as f:
            header = json.load(f)
        with open(os.path.join(dirpath, prefix + ".qweights.bin"), "rb") as f:
            wblob = f.read()
        with open(os.path.join(dirpath, prefix + ".qbias.bin"), "rb") as f:
            bblob = f.read()
        layers = []
        for d in header["layers"]:
            w_codes = bias_q = None
            if d.get("w_count") is not None:
                nbytes = (d["w_count"] * d["bits_w"] + 7) // 8
                chunk = wblob[d["w_offset"]: d["w_offset"] + nbytes]
                w_codes = unpack(chunk, d["bits_w"], d["w_count"]).reshape(d["w_shape"])
                bias_q = np.frombuffer(
                    bblob, dtype="<i4", count=d["b_count"], offset=d["b_offset"]
                ).astype(np.int32)
            layers.append(QuantizedLayer(
                id=d["id"], kind=d["kind"], inputs=list(d["inputs"]),
                hyper=d["hyper"], scale_in=d["scale_in"], scale_out=d["scale_out"],
                bits_w=d["bits_w"], scale_w=d["scale_w"], zp_w=d["zp_w"],
                w_codes=w_codes, bias_q=bias_q,
                affine_scale=d["affine_scale"], affine_shift=d["affine_shift"]))
        return cls(input_shape=tuple(header["input_shape"]),
                   in_scale=float(header["in_scale"]), layers=layers,
                   output_id=header["output_id"], meta=header["meta"])


def export_quantized(qg: QuantGraph, meta: dict | None = None) -> QuantizedModel:
    """Materialize frozen precisions into an integer model container."""
    if not qg.frozen:
        raise ValueError("freeze precisions before exporting")
    g = qg.graph
    half = 2 ** (qg.act_bits - 1)

    scales: dict[str, float] = {INPUT: float(qg.alphas["input"].data.reshape(())) / half}

    def out_scale(node) -> float:
        if node.layer.kind in _QUANTIZED:
            return float(qg.alphas[node.id].data.reshape(())) / half
        return scales[node.inputs[0]]

    specs = []
    for node in g.nodes.values():
        layer = node.layer
        s_in = [scales[src] for src in node.inputs]
        s_out = out_scale(node)
        scales[node.id] = s_out
        spec = QuantizedLayer(id=node.id, kind=layer.kind, inputs=list(node.inputs),
                              hyper=layer.hyper(), scale_in=s_in, scale_out=s_out)
        if layer.kind in ("conv1d", "linear"):
            bits = qg.frozen_bits[node.id]
            s_w, mn, mx = _weight_grid(layer.w.data, bits)
            codes = _weight_codes(layer.w.data, s_w, mn, bits)
            zp_w = -mn / s_w
            bias_q = round_half_away(layer.b.data / (s_w * s_in[0]))
            if np.any(np.abs(bias_q) > 2 ** 31 - 1):
                raise ValueError(f"node {node.id!r}: bias codes exceed 32-bit range")
            fan = codes.shape[1] * codes.shape[2] if layer.kind == "conv1d" \
                else codes.shape[1]
            bound = fan * (2 ** bits - 1 + abs(zp_w)) * half + np.abs(bias_q).max()
            if bound > 2 ** 31 - 1:
                raise ValueError(f"node {node.id!r}: accumulator may exceed 32 bits")
            spec.bits_w = bits
            spec.scale_w = s_w
            spec.zp_w = zp_w
            spec.w_codes = codes.astype(np.int64)
            spec.bias_q = bias_q.astype(np.int32)
        elif layer.kind == "affine":
            spec.affine_scale = [float(v) for v in layer.scale.data]
            spec.affine_shift = [float(v) for v in layer.shift.data]
        specs.append(spec)
    return QuantizedModel(input_shape=g.input_shape, in_scale=scales[INPUT],
                          layers=specs, output_id=g.output_id,
                          meta=dict(meta or {}))


# ---------------------------------------------------------------------------
# reference executor (the exactness oracle for the integer runtime)
# ---------------------------------------------------------------------------

def quantize_input(model: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Float input to signed codes on the model's input grid."""
    q = round_half_away(np.asarray(x, dtype=np.float64) / model.in_scale)
    return np.clip(q, CODE_MIN, CODE_MAX)


def decode_output(model: QuantizedModel, codes: np.ndarray) -> np.ndarray:
    """Codes of the output layer back to task units (denormalized if known)."""
    spec = model.layer(model.output_id)
    y = np.asarray(codes, dtype=np.float64) * spec.scale_out
    norm = model.meta.get("norm")
    if norm is not None:
        y = y * np.asarray(norm["y_std"]) + np.asarray(norm["y_mean"])
    return y


def _code_conv(x: np.ndarray, w: np.ndarray, hyper: dict) -> np.ndarray:
    """Integer-exact cross-correlation on code arrays (float64 carrier)."""
    stride, dilation, groups = hyper["stride"], hyper["dilation"], hyper["groups"]
    pl, pr = hyper["pad"]
    B, Cin, L = x.shape
    Cout, Cin_g, K = w.shape
    keff = (K - 1) * dilation + 1
    Lout = (L + pl + pr - keff) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pl, pr)))
    xg = xp.reshape(B, groups, Cin_g, L + pl + pr)
    wg = w.reshape(groups, Cout // groups, Cin_g, K)
    acc = np.zeros((B, groups, Cout // groups, Lout))
    for k in range(K):
        seg = xg[:, :, :, k * dilation: k * dilation + stride * Lout: stride]
        acc += np.matmul(wg[:, :, :, k], seg)
    return acc.reshape(B, Cout, Lout)


def _window_sums(x: np.ndarray, hyper: dict) -> np.ndarray:
    """Per-group sliding-window input sums, broadcast to output channels."""
    groups = hyper["groups"]
    ones = np.ones((groups, x.shape[1] // groups, hyper["kernel"]))
    sums = _code_conv(x, ones, {**hyper, "groups": groups})
    out_g = hyper["out_ch"] // groups
    return np.repeat(sums, out_g, axis=1)


def _pool_view(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]


def reference_forward(model: QuantizedModel, q_in: np.ndarray) -> np.ndarray:
    """Execute the container on input codes; returns output codes.

    All accumulation happens on exactly represented integers; each layer
    then requantizes through the shared rounding rule.  This is the
    executor the integer runtime is tested against, code for code.
    """
    q_in = np.asarray(q_in, dtype=np.float64)
    if q_in.shape[1:] != model.input_shape:
        raise GraphShapeError(
            f"input shape {q_in.shape[1:]} != model input {model.input_shape}")
    acts = {INPUT: q_in}
    for spec in model.layers:
        xs = [acts[src] for src in spec.inputs]
        if spec.kind == "conv1d":
            w = spec.w_codes.astype(np.float64)
            acc = _code_conv(xs[0], w, spec.hyper)
            sums = _window_sums(xs[0], spec.hyper)
            M = spec.scale_w * spec.scale_in[0] / spec.scale_out
            u = (acc - spec.zp_w * sums + spec.bias_q[None, :, None]) * M
            y = np.clip(round_half_away(u), CODE_MIN, CODE_MAX)
        elif spec.kind == "linear":
            x0 = xs[0].reshape(xs[0].shape[0], -1)
            w = spec.w_codes.astype(np.float64)
            acc = x0 @ w.T
            sums = x0.sum(axis=1, keepdims=True)
            M = spec.scale_w * spec.scale_in[0] / spec.scale_out
            u = (acc - spec.zp_w * sums + spec.bias_q[None, :]) * M
            y = np.clip(round_half_away(u), CODE_MIN, CODE_MAX)
        elif spec.kind == "add":
            u = xs[0] * (spec.scale_in[0] / spec.scale_out) \
                + xs[1] * (spec.scale_in[1] / spec.scale_out)
            y = np.clip(round_half_away(u), CODE_MIN, CODE_MAX)
        elif spec.kind == "concat":
            parts = [np.clip(round_half_away(x * (s / spec.scale_out)),
                             CODE_MIN, CODE_MAX)
                     for x, s in zip(xs, spec.scale_in)]
            y = np.concatenate(parts, axis=1)
        elif spec.kind == "affine":
            Mc = np.asarray(spec.affine_scale) * spec.scale_in[0] / spec.scale_out
            Cc = np.asarray(spec.affine_shift) / spec.scale_out
            u = xs[0] * Mc[None, :, None] + Cc[None, :, None]
            y = np.clip(round_half_away(u), CODE_MIN, CODE_MAX)
        elif spec.kind == "relu":
            y = np.maximum(xs[0], 0.0)
        elif spec.kind == "maxpool1d":
            y = _pool_view(xs[0], spec.hyper["kernel"], spec.hyper["stride"]).max(axis=-1)
        elif spec.kind == "avgpool1d":
            sums = _pool_view(xs[0], spec.hyper["kernel"], spec.hyper["stride"]).sum(axis=-1)
            u = sums * (1.0 / spec.hyper["kernel"])
            y = np.clip(round_half_away(u), CODE_MIN, CODE_MAX)
        elif spec.kind == "upsample":
            y = np.repeat(xs[0], spec.hyper["factor"], axis=2)
        elif spec.kind == "identity":
            y = xs[0]
        else:
            raise GraphShapeError(f"layer {spec.id!r}: no execution rule for "
                                  f"kind {spec.kind!r}")
        acts[spec.id] = y
    return acts[model.output_id]
