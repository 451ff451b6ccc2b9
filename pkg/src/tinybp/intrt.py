"""Integer runtime for exported quantized models.

Executes a container on int64 arrays: signed 8-bit activation codes flow
between layers, weight codes stay at their exported width, and every
accumulator is an exact integer (bounded to int32 range at export time).
Requantization multiplies the integer accumulator by the float64 scale ratio
M = scale_w * scale_x / scale_out and rounds halves away from zero, the same
rule the exporter's reference executor applies, so both produce identical
codes.

Also home to the weight codec: codes pack into bytes little end first, lane
zero in the low bits.
"""

from __future__ import annotations

import numpy as np

from .graph import INPUT, GraphShapeError
from .quant import (CODE_MAX, CODE_MIN, QuantizedModel, decode_output,
                    round_half_away)

INT32_MAX = 2 ** 31 - 1


# ---------------------------------------------------------------------------
# weight codec
# ---------------------------------------------------------------------------

def pack(codes, bits: int) -> bytes:
    """Pack unsigned codes below 2^bits into bytes, low lanes first."""
    if bits not in (1, 2, 4, 8):
        raise ValueError(f"bits must divide 8, got {bits}")
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    if codes.size and (codes.min() < 0 or codes.max() >= 2 ** bits):
        raise ValueError(f"codes out of range for {bits}-bit packing")
    lanes = 8 // bits
    padded = np.zeros(-(-codes.size // lanes) * lanes, dtype=np.uint8)
    padded[: codes.size] = codes
    shifts = np.arange(lanes, dtype=np.uint8) * bits
    grouped = padded.reshape(-1, lanes).astype(np.uint32) << shifts
    return grouped.sum(axis=1).astype(np.uint8).tobytes()


def unpack(blob: bytes, bits: int, count: int) -> np.ndarray:
    """Recover `count` codes from a packed blob; trailing pad bits are ignored."""
    if bits not in (1, 2, 4, 8):
        raise ValueError(f"bits must divide 8, got {bits}")
    if count < 0:
        raise ValueError("count must be >= 0")
    lanes = 8 // bits
    need = -(-count // lanes)
    raw = np.frombuffer(blob, dtype=np.uint8)
    if raw.size < need:
        raise ValueError(f"blob holds {raw.size} bytes, {count} codes at "
                         f"{bits} bits need {need}")
    shifts = np.arange(lanes, dtype=np.uint8) * bits
    mask = (1 << bits) - 1
    codes = (raw[:need, None].astype(np.uint32) >> shifts) & mask
    return codes.reshape(-1)[:count].astype(np.int64)


def footprint(model: QuantizedModel) -> dict:
    """Byte sizes of the container's binary payloads."""
    wbytes = sum((spec.w_codes.size * spec.bits_w + 7) // 8
                 for spec in model.layers if spec.w_codes is not None)
    bbytes = sum(4 * spec.bias_q.size
                 for spec in model.layers if spec.bias_q is not None)
    nscales = 1  # input scale
    for spec in model.layers:
        nscales += 1 + len(spec.scale_in)  # scale_out plus per-edge scales
        if spec.scale_w is not None:
            nscales += 2  # scale_w, zp_w
    return {"weight_bytes": int(wbytes), "bias_bytes": int(bbytes),
            "scale_bytes": 8 * nscales,
            "total_bytes": int(wbytes) + int(bbytes) + 8 * nscales}


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def quantize_input(model: QuantizedModel, x: np.ndarray) -> np.ndarray:
    q = round_half_away(np.asarray(x, dtype=np.float64) / model.in_scale)
    return np.clip(q, CODE_MIN, CODE_MAX).astype(np.int64)


def _requant(u: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(u), CODE_MIN, CODE_MAX).astype(np.int64)


def _conv_int(x: np.ndarray, w: np.ndarray, hyper: dict):
    """Accumulator and per-window input sums for a code-domain convolution."""
    stride, dilation, groups = hyper["stride"], hyper["dilation"], hyper["groups"]
    pl, pr = hyper["pad"]
    B, Cin, L = x.shape
    Cout, Cin_g, K = w.shape
    keff = (K - 1) * dilation + 1
    Lout = (L + pl + pr - keff) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pl, pr)))  # zero point of activations is 0
    xg = xp.reshape(B, groups, Cin_g, L + pl + pr)
    wg = w.reshape(groups, Cout // groups, Cin_g, K)
    acc = np.zeros((B, groups, Cout // groups, Lout), dtype=np.int64)
    sums = np.zeros((B, groups, Lout), dtype=np.int64)
    for k in range(K):
        seg = xg[:, :, :, k * dilation: k * dilation + stride * Lout: stride]
        acc += np.einsum("goi,bgil->bgol", wg[:, :, :, k], seg, optimize=False)
        sums += seg.sum(axis=2)
    out_g = Cout // groups
    return acc.reshape(B, Cout, Lout), np.repeat(sums, out_g, axis=1)


def _pool_view(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]


def int_forward(model: QuantizedModel, q_in: np.ndarray) -> np.ndarray:
    """Run the container on int64 code arrays; returns output codes.

    Validates that the scale recorded on each edge matches what the producing
    layer emits, and that no accumulator leaves int32 range.
    """
    q_in = np.asarray(q_in)
    if not np.issubdtype(q_in.dtype, np.integer):
        raise TypeError(f"expected integer input codes, got dtype {q_in.dtype}")
    if q_in.shape[1:] != model.input_shape:
        raise GraphShapeError(
            f"input shape {q_in.shape[1:]} != model input {model.input_shape}")
    acts = {INPUT: q_in.astype(np.int64)}
    scales = {INPUT: model.in_scale}
    for spec in model.layers:
        for src, s in zip(spec.inputs, spec.scale_in):
            if scales[src] != s:
                raise ValueError(f"layer {spec.id!r}: edge from {src!r} recorded "
                                 f"scale {s}, producer emits {scales[src]}")
        xs = [acts[src] for src in spec.inputs]
        if spec.kind == "conv1d":
            acc, sums = _conv_int(xs[0], spec.w_codes, spec.hyper)
            if max(abs(int(acc.min())), abs(int(acc.max()))) > INT32_MAX:
                raise OverflowError(f"layer {spec.id!r}: accumulator exceeds int32")
            M = spec.scale_w * spec.scale_in[0] / spec.scale_out
            u = (acc.astype(np.float64) - spec.zp_w * sums.astype(np.float64)
                 + spec.bias_q[None, :, None]) * M
            y = _requant(u)
        elif spec.kind == "linear":
            x0 = xs[0].reshape(xs[0].shape[0], -1)
            acc = np.einsum("bi,oi->bo", x0, spec.w_codes, optimize=False)
            if max(abs(int(acc.min())), abs(int(acc.max()))) > INT32_MAX:
                raise OverflowError(f"layer {spec.id!r}: accumulator exceeds int32")
            sums = x0.sum(axis=1, keepdims=True)
            M = spec.scale_w * spec.scale_in[0] / spec.scale_out
            u = (acc.astype(np.float64) - spec.zp_w * sums.astype(np.float64)
                 + spec.bias_q[None, :]) * M
            y = _requant(u)
        elif spec.kind == "add":
            u = xs[0] * (spec.scale_in[0] / spec.scale_out) \
                + xs[1] * (spec.scale_in[1] / spec.scale_out)
            y = _requant(u)
        elif spec.kind == "concat":
            y = np.concatenate([_requant(x * (s / spec.scale_out))
                                for x, s in zip(xs, spec.scale_in)], axis=1)
        elif spec.kind == "affine":
            Mc = np.asarray(spec.affine_scale) * spec.scale_in[0] / spec.scale_out
            Cc = np.asarray(spec.affine_shift) / spec.scale_out
            y = _requant(xs[0] * Mc[None, :, None] + Cc[None, :, None])
        elif spec.kind == "relu":
            y = np.maximum(xs[0], 0)
        elif spec.kind == "maxpool1d":
            y = _pool_view(xs[0], spec.hyper["kernel"], spec.hyper["stride"]).max(axis=-1)
        elif spec.kind == "avgpool1d":
            sums = _pool_view(xs[0], spec.hyper["kernel"], spec.hyper["stride"]).sum(axis=-1)
            y = _requant(sums * (1.0 / spec.hyper["kernel"]))
        elif spec.kind == "upsample":
            y = np.repeat(xs[0], spec.hyper["factor"], axis=2)
        elif spec.kind == "identity":
            y = xs[0]
        else:
            raise GraphShapeError(f"layer {spec.id!r}: no execution rule for "
                                  f"kind {spec.kind!r}")
        acts[spec.id] = y
        scales[spec.id] = spec.scale_out
    return acts[model.output_id]


def run_quantized(model: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Float input to task-unit predictions through the integer path."""
    return decode_output(model, int_forward(model, quantize_input(model, x)))
