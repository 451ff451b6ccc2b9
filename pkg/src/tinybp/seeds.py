"""Seed architectures the compression pipeline starts from.

Two desk-scale families on 5 s / 625-sample PPG windows:

* ``resnet1d`` regresses the (SBP, DBP) pair directly: residual blocks with
  learnable 1x1 convolution shortcuts (each with its own normalization) and
  a global-average-pool + linear head.
* ``unet1d`` reconstructs the full ABP waveform: encoder/decoder with
  nearest-neighbor upsampling and skip concatenations.  Pool/upsample use
  factor 5 so the 625-sample length (5**4) survives two scale changes
  exactly.

Widths and kernel sizes are config-overridable; PReLU activations and
normalization-after-conv placement are fixed so later stages can fold and
convert them.
"""

from __future__ import annotations

import numpy as np

from .graph import INPUT, ModelGraph
from .layers import (Add, AvgPool1d, BatchNorm1d, Concat, Conv1d, InstanceNorm1d,
                     Linear, MaxPool1d, NearestUpsample, PReLU)


def build_resnet1d(input_len: int = 625, widths=(16, 32, 64), kernel: int = 5,
                   in_ch: int = 1, out_dim: int = 2, seed: int = 0) -> ModelGraph:
    rng = np.random.default_rng(seed)
    g = ModelGraph((in_ch, input_len))
    w0 = widths[0]
    g.add("stem", Conv1d(in_ch, w0, kernel, rng=rng), [INPUT])
    g.add("stem_bn", BatchNorm1d(w0))
    g.add("stem_act", PReLU(w0))
    prev, prev_ch = "stem_act", w0
    for bi, ch in enumerate(widths):
        b = f"b{bi}"
        g.add(f"{b}_conv1", Conv1d(prev_ch, ch, kernel, stride=2, rng=rng), [prev])
        g.add(f"{b}_bn1", BatchNorm1d(ch))
        g.add(f"{b}_act1", PReLU(ch))
        g.add(f"{b}_conv2", Conv1d(ch, ch, kernel, rng=rng))
        g.add(f"{b}_bn2", BatchNorm1d(ch))
        # shortcuts are always learnable 1x1 convs with independent norm
        g.add(f"{b}_sc", Conv1d(prev_ch, ch, 1, stride=2, rng=rng), [prev])
        g.add(f"{b}_scbn", BatchNorm1d(ch), [f"{b}_sc"])
        g.add(f"{b}_add", Add(), [f"{b}_bn2", f"{b}_scbn"])
        g.add(f"{b}_act2", PReLU(ch))
        prev, prev_ch = f"{b}_act2", ch
    final_len = g.shapes[prev][1]
    g.add("gap", AvgPool1d(final_len), [prev])
    g.add("head", Linear(prev_ch, out_dim, rng=rng), meta={"head": True})
    g.validate()
    return g


def build_unet1d(input_len: int = 625, widths=(16, 32, 64), kernel: int = 3,
                 in_ch: int = 1, scale: int = 5, seed: int = 0) -> ModelGraph:
    if input_len % (scale * scale) != 0:
        raise ValueError(f"input_len {input_len} must be divisible by scale^2 = {scale * scale}")
    rng = np.random.default_rng(seed)
    w1, w2, w3 = widths
    g = ModelGraph((in_ch, input_len))
    g.add("enc1", Conv1d(in_ch, w1, kernel, rng=rng), [INPUT])
    g.add("enc1_n", InstanceNorm1d(w1))
    g.add("enc1_act", PReLU(w1))
    g.add("pool1", MaxPool1d(scale, scale))
    g.add("enc2", Conv1d(w1, w2, kernel, rng=rng))
    g.add("enc2_n", InstanceNorm1d(w2))
    g.add("enc2_act", PReLU(w2))
    g.add("pool2", MaxPool1d(scale, scale))
    g.add("bott", Conv1d(w2, w3, kernel, rng=rng))
    g.add("bott_n", InstanceNorm1d(w3))
    g.add("bott_act", PReLU(w3))
    g.add("up2", NearestUpsample(scale))
    g.add("cat2", Concat(), ["up2", "enc2_act"])
    g.add("dec2", Conv1d(w3 + w2, w2, kernel, rng=rng))
    g.add("dec2_n", InstanceNorm1d(w2))
    g.add("dec2_act", PReLU(w2))
    g.add("up1", NearestUpsample(scale))
    g.add("cat1", Concat(), ["up1", "enc1_act"])
    g.add("dec1", Conv1d(w2 + w1, w1, kernel, rng=rng))
    g.add("dec1_n", InstanceNorm1d(w1))
    g.add("dec1_act", PReLU(w1))
    g.add("out", Conv1d(w1, 1, 1, rng=rng), meta={"head": True})
    g.validate()
    return g


SEED_BUILDERS = {"resnet1d": build_resnet1d, "unet1d": build_unet1d}


def build_seed(name: str, **kw) -> ModelGraph:
    if name not in SEED_BUILDERS:
        raise ValueError(f"unknown seed architecture {name!r} (have {sorted(SEED_BUILDERS)})")
    return SEED_BUILDERS[name](**kw)
