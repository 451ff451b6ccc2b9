"""Neural-network layers for 1-D signals, built on the autodiff Tensor.

Each layer owns its parameter Tensors, knows its output shape (shapes are
(channels, length) or (features,), batch excluded), and can rebuild itself
from a serialized hyperparameter dict via the kind registry.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LAYER_KINDS: dict[str, type] = {}


def make_layer(kind: str, hyper: dict, rng=None):
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind].from_config(hyper, rng=rng)


class Layer:
    kind: str | None = None
    n_inputs: int = 1

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        if cls.kind:
            LAYER_KINDS[cls.kind] = cls

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def hyper(self) -> dict:
        return {}

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.params().values()))

    def forward(self, xs: list[Tensor], training: bool = False) -> Tensor:
        raise NotImplementedError

    def out_shape(self, in_shapes: list[tuple]) -> tuple:
        raise NotImplementedError

    @classmethod
    def from_config(cls, hyper: dict, rng=None):
        return cls(**hyper) if rng is None else cls(**hyper, rng=rng)


def _kaiming_uniform(rng, shape, fan_in):
    if rng is None:
        return np.zeros(shape)
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 dilation: int = 1, groups: int = 1, pad="same", rng=None):
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"groups={groups} must divide in_ch={in_ch} and out_ch={out_ch}")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.dilation, self.groups = stride, dilation, groups
        keff = (kernel - 1) * dilation + 1
        if pad == "same":
            # symmetric padding; exact length preservation needs odd keff and stride 1
            p = (keff - 1) // 2
            self.pad = (p, p)
        elif isinstance(pad, int):
            self.pad = (pad, pad)
        else:
            self.pad = (int(pad[0]), int(pad[1]))
        fan_in = (in_ch // groups) * kernel
        self.w = Tensor(_kaiming_uniform(rng, (out_ch, in_ch // groups, kernel), fan_in),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)

    def params(self):
        return {"w": self.w, "b": self.b}

    def hyper(self):
        return {"in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": self.kernel,
                "stride": self.stride, "dilation": self.dilation,
                "groups": self.groups, "pad": list(self.pad)}

    def is_depthwise(self) -> bool:
        return self.groups == self.in_ch and self.in_ch == self.out_ch

    def out_len(self, L: int) -> int:
        keff = (self.kernel - 1) * self.dilation + 1
        return (L + self.pad[0] + self.pad[1] - keff) // self.stride + 1

    def out_shape(self, in_shapes):
        (c, L), = in_shapes
        if c != self.in_ch:
            raise ValueError(f"conv expects {self.in_ch} channels, got {c}")
        return (self.out_ch, self.out_len(L))

    def forward(self, xs, training: bool = False):
        return self.functional_forward(xs, training)

    def functional_forward(self, xs, training: bool = False, w: Tensor | None = None,
                           b: Tensor | None = None):
        return ad.conv1d(xs[0], w if w is not None else self.w,
                         b if b is not None else self.b,
                         stride=self.stride, dilation=self.dilation,
                         groups=self.groups, pad=self.pad)


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng=None):
        self.in_features, self.out_features = in_features, out_features
        self.w = Tensor(_kaiming_uniform(rng, (out_features, in_features), in_features),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_features), requires_grad=True)

    def params(self):
        return {"w": self.w, "b": self.b}

    def hyper(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def out_shape(self, in_shapes):
        (shp,) = in_shapes
        feats = int(np.prod(shp))
        if feats != self.in_features:
            raise ValueError(f"linear expects {self.in_features} features, got {feats} from {shp}")
        return (self.out_features,)

    def forward(self, xs, training: bool = False):
        return self.functional_forward(xs, training)

    def functional_forward(self, xs, training: bool = False, w: Tensor | None = None,
                           b: Tensor | None = None):
        x = xs[0]
        if x.data.ndim == 3:
            x = ad.reshape(x, (x.data.shape[0], -1))
        return ad.linear_xw(x, w if w is not None else self.w,
                            b if b is not None else self.b)


class ReLU(Layer):
    kind = "relu"

    def out_shape(self, in_shapes):
        return in_shapes[0]

    def forward(self, xs, training: bool = False):
        return ad.relu(xs[0])


class PReLU(Layer):
    kind = "prelu"

    def __init__(self, ch: int, init: float = 0.25, rng=None):
        self.ch = ch
        self.init = init
        self.slope = Tensor(np.full(ch, float(init)), requires_grad=True)

    def params(self):
        return {"slope": self.slope}

    def hyper(self):
        return {"ch": self.ch, "init": self.init}

    def out_shape(self, in_shapes):
        (c, L), = in_shapes
        if c != self.ch:
            raise ValueError(f"prelu expects {self.ch} channels, got {c}")
        return (c, L)

    def forward(self, xs, training: bool = False):
        return ad.prelu(xs[0], self.slope)


class _NormBase(Layer):
    reduce_axes: tuple = ()

    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1, rng=None):
        self.ch, self.eps, self.momentum = ch, eps, momentum
        self.gamma = Tensor(np.ones(ch), requires_grad=True)
        self.beta = Tensor(np.zeros(ch), requires_grad=True)
        self.running_mean = np.zeros(ch)
        self.running_var = np.ones(ch)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffer(self, name: str, value: np.ndarray):
        setattr(self, name, np.asarray(value, dtype=np.float64))

    def hyper(self):
        return {"ch": self.ch, "eps": self.eps, "momentum": self.momentum}

    def out_shape(self, in_shapes):
        (c, L), = in_shapes
        if c != self.ch:
            raise ValueError(f"norm expects {self.ch} channels, got {c}")
        return (c, L)

    def _affine(self, xhat: Tensor) -> Tensor:
        g = ad.reshape(self.gamma, (1, self.ch, 1))
        b = ad.reshape(self.beta, (1, self.ch, 1))
        return xhat * g + b

    def folding_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """(mean, var) used in eval mode, the statistics baked in by folding."""
        return self.running_mean.copy(), self.running_var.copy()

    def forward(self, xs, training: bool = False):
        x = xs[0]
        if training:
            mu = ad.tmean(x, axis=self.reduce_axes, keepdims=True)
            xc = x - mu
            var = ad.tmean(xc * xc, axis=self.reduce_axes, keepdims=True)
            self._update_running(mu.data, var.data)
            xhat = xc / ad.sqrt(var + Tensor(self.eps))
            return self._affine(xhat)
        rm = Tensor(self.running_mean[None, :, None])
        rv = Tensor(self.running_var[None, :, None])
        xhat = (x - rm) / ad.sqrt(rv + Tensor(self.eps))
        return self._affine(xhat)


class BatchNorm1d(_NormBase):
    kind = "batchnorm1d"
    reduce_axes = (0, 2)

    def _update_running(self, mu, var):
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * mu.reshape(-1)
        self.running_var = (1 - m) * self.running_var + m * var.reshape(-1)


class InstanceNorm1d(_NormBase):
    kind = "instancenorm1d"
    reduce_axes = (2,)

    def _update_running(self, mu, var):
        # track batch-averaged instance statistics so eval mode (and norm
        # folding) can use fixed per-channel constants
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * mu.mean(axis=0).reshape(-1)
        self.running_var = (1 - m) * self.running_var + m * var.mean(axis=0).reshape(-1)


class MaxPool1d(Layer):
    kind = "maxpool1d"

    def __init__(self, kernel: int, stride: int | None = None, rng=None):
        self.kernel = kernel
        self.stride = kernel if stride is None else stride

    def hyper(self):
        return {"kernel": self.kernel, "stride": self.stride}

    def out_shape(self, in_shapes):
        (c, L), = in_shapes
        Lout = (L - self.kernel) // self.stride + 1
        if Lout < 1:
            raise ValueError(f"pool output length {Lout} < 1 for input length {L}")
        return (c, Lout)

    def forward(self, xs, training: bool = False):
        return ad.maxpool1d(xs[0], self.kernel, self.stride)


class AvgPool1d(MaxPool1d):
    kind = "avgpool1d"

    def forward(self, xs, training: bool = False):
        return ad.avgpool1d(xs[0], self.kernel, self.stride)


class NearestUpsample(Layer):
    kind = "upsample"

    def __init__(self, factor: int, rng=None):
        self.factor = factor

    def hyper(self):
        return {"factor": self.factor}

    def out_shape(self, in_shapes):
        (c, L), = in_shapes
        return (c, L * self.factor)

    def forward(self, xs, training: bool = False):
        return ad.upsample_nearest(xs[0], self.factor)


class Add(Layer):
    kind = "add"
    n_inputs = 2

    def out_shape(self, in_shapes):
        a, b = in_shapes
        if a != b:
            raise ValueError(f"add needs equal shapes, got {a} and {b}")
        return a

    def forward(self, xs, training: bool = False):
        return xs[0] + xs[1]


class Concat(Layer):
    kind = "concat"
    n_inputs = -1  # variadic, >= 2

    def out_shape(self, in_shapes):
        Ls = {shp[1] for shp in in_shapes}
        if len(Ls) != 1:
            raise ValueError(f"concat needs equal lengths, got {in_shapes}")
        return (sum(shp[0] for shp in in_shapes), Ls.pop())

    def forward(self, xs, training: bool = False):
        return ad.concat(xs, axis=1)


class Identity(Layer):
    kind = "identity"

    def out_shape(self, in_shapes):
        return in_shapes[0]

    def forward(self, xs, training: bool = False):
        return xs[0]


class ChannelAffine(Layer):
    """Per-channel y = x * scale + shift on (B, C, L).

    What a normalization layer collapses to in eval mode when there is no
    preceding conv to fold it into (e.g. after a bypassed site).
    """

    kind = "affine"

    def __init__(self, channels: int):
        self.channels = channels
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)

    def params(self):
        return {"scale": self.scale, "shift": self.shift}

    def hyper(self):
        return {"channels": self.channels}

    def out_shape(self, in_shapes):
        (shp,) = in_shapes
        if shp[0] != self.channels:
            raise ValueError(f"affine expects {self.channels} channels, got {shp[0]}")
        return shp

    def forward(self, xs, training: bool = False):
        return self.functional_forward(xs, training)

    def functional_forward(self, xs, training: bool = False, scale: Tensor | None = None,
                           shift: Tensor | None = None):
        s = scale if scale is not None else self.scale
        b = shift if shift is not None else self.shift
        return xs[0] * ad.reshape(s, (1, -1, 1)) + ad.reshape(b, (1, -1, 1))


class Seq(Layer):
    """A short chain of layers acting as one node (e.g. depthwise+pointwise)."""

    kind = "seq"

    def __init__(self, children: list, rng=None):
        self.children = list(children)

    def params(self):
        out = {}
        for i, c in enumerate(self.children):
            for name, t in c.params().items():
                out[f"{i}.{name}"] = t
        return out

    def buffers(self):
        out = {}
        for i, c in enumerate(self.children):
            for name, b in c.buffers().items():
                out[f"{i}.{name}"] = b
        return out

    def set_buffer(self, name: str, value):
        idx, sub = name.split(".", 1)
        self.children[int(idx)].set_buffer(sub, value)

    def hyper(self):
        return {"children": [{"kind": c.kind, "hyper": c.hyper()} for c in self.children]}

    def out_shape(self, in_shapes):
        shp = in_shapes[0]
        for c in self.children:
            shp = c.out_shape([shp])
        return shp

    def forward(self, xs, training: bool = False):
        y = xs[0]
        for c in self.children:
            y = c.forward([y], training=training)
        return y

    @classmethod
    def from_config(cls, hyper: dict, rng=None):
        children = [make_layer(c["kind"], c["hyper"], rng=rng) for c in hyper["children"]]
        return cls(children)
