"""Affine and two-range quantization, model assembly, and quantized inference.

The affine map restricts FP values to signed integer codes:

    q   = clamp(round(x / S) - Z,  -2^(b-1),  2^(b-1) - 1)
    x~  = (q + Z) * S

with round-half-away-from-zero everywhere a rounding rule is needed.
Activation parameters come from observed min/max ranges; weights use a
symmetric max-abs scale with zero Z.  Skewed post-GELU / softmax-context
activations get two ranges with independent scales for the negative and
nonnegative halves.

Bit depth 32 means full precision: such weights/activations bypass
quantization entirely (they are still accounted as 32 bits by the size
formula).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import graph as G
from . import intkernel as IK
from . import tensor as T
from .errors import AssemblyError, DegenerateRangeError, FormatError
from .tensor import Tensor

MAGIC = b"MYQZ"
VERSION = 1

INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


def round_half_away(x):
    """round() with halves away from zero, the toolkit-wide rounding rule."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class AffineParams:
    scale: float
    zero: int
    bits: int

    def __post_init__(self):
        if not (self.scale > 0.0):
            raise DegenerateRangeError(f"scale must be positive, got {self.scale}")
        if not 1 <= self.bits <= 32:
            raise DegenerateRangeError(f"bits must be in [1, 32], got {self.bits}")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


@dataclass(frozen=True)
class TwoRangeParams:
    """Separate positive scales for the negative and nonnegative halves."""

    scale_neg: float
    scale_pos: float
    bits: int

    def __post_init__(self):
        if not (self.scale_neg > 0.0 and self.scale_pos > 0.0):
            raise DegenerateRangeError("two-range scales must be positive")
        if not 1 <= self.bits <= 32:
            raise DegenerateRangeError(f"bits must be in [1, 32], got {self.bits}")


def quantize(theta, p: AffineParams) -> np.ndarray:
    """Integer codes of ``theta`` under ``p`` (int64 array)."""
    arr = theta.nd if isinstance(theta, Tensor) else np.asarray(theta)
    q = round_half_away(arr / p.scale) - p.zero
    return np.clip(q, p.qmin, p.qmax).astype(np.int64)


def dequantize(q, p: AffineParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) + p.zero) * p.scale


def fake_quant(x, p: AffineParams) -> np.ndarray:
    return dequantize(quantize(x, p), p)


def activation_params_minmax(xmin: float, xmax: float, bits: int,
                             scale_denominator: str = "pow2_bm1") -> AffineParams:
    """Affine parameters from an observed [xmin, xmax] range.

    ``scale_denominator`` selects the scale's denominator: "pow2_bm1" is
    2^(b-1) (the default), "pow2_b_minus_1" is 2^b - 1 (fills the full
    signed code range).
    """
    xmin, xmax = float(xmin), float(xmax)
    if not xmax > xmin:
        raise DegenerateRangeError(
            f"degenerate activation range [{xmin}, {xmax}]"
        )
    if scale_denominator == "pow2_bm1":
        den = 2.0 ** (bits - 1)
    elif scale_denominator == "pow2_b_minus_1":
        den = 2.0**bits - 1.0
    else:
        raise DegenerateRangeError(f"unknown scale_denominator {scale_denominator!r}")
    scale = (xmax - xmin) / den
    zero = int(-(2 ** (bits - 1)) - round_half_away(xmin / scale))
    return AffineParams(scale, zero, bits)


def weight_params_symmetric(w, bits: int) -> AffineParams:
    """Symmetric max-abs scale with zero point 0 (Gaussian-weight case)."""
    arr = w.nd if isinstance(w, Tensor) else np.asarray(w)
    amax = float(np.max(np.abs(arr))) if arr.size else 0.0
    if amax == 0.0:
        return AffineParams(1.0, 0, bits)  # degenerate: all codes quantize to 0
    return AffineParams(amax / 2.0 ** (bits - 1), 0, bits)


def two_range_quantize(x, p: TwoRangeParams) -> tuple[np.ndarray, np.ndarray]:
    """Codes plus the sign mask (True where the negative scale applied).

    Negative values land in [-2^(b-1), 0] at scale_neg, nonnegative in
    [0, 2^(b-1)-1] at scale_pos; both halves share zero point 0, so code
    0 always dequantizes to exactly 0.0.
    """
    arr = x.nd if isinstance(x, Tensor) else np.asarray(x)
    half = 2 ** (p.bits - 1)
    mask = arr < 0
    qneg = np.clip(round_half_away(arr / p.scale_neg), -half, 0)
    qpos = np.clip(round_half_away(arr / p.scale_pos), 0, half - 1)
    return np.where(mask, qneg, qpos).astype(np.int64), mask


def two_range_dequantize(q, p: TwoRangeParams) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.where(q < 0, q * p.scale_neg, q * p.scale_pos)


def fake_quant_two_range(x, p: TwoRangeParams) -> np.ndarray:
    codes, _ = two_range_quantize(x, p)
    return two_range_dequantize(codes, p)


def fake_quant_act(x, p) -> np.ndarray:
    """Simulated quantization under either activation parameter kind."""
    if isinstance(p, TwoRangeParams):
        return fake_quant_two_range(x, p)
    return fake_quant(x, p)


# ---------------------------------------------------------------------------
# Quantized model assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantizedLayer:
    index: int
    kind: str
    bits: int
    weight_shape: tuple[int, ...]
    weight_codes: np.ndarray | None  # None when bits == 32 (FP passthrough)
    weight_params: AffineParams | None
    weight_fp: np.ndarray | None  # original f32 weights when bits == 32
    act: AffineParams | TwoRangeParams | None  # None when act_bits == 32
    bias_codes: np.ndarray | None  # int32-range codes at bias_scale
    bias_scale: float | None
    bias_fp: np.ndarray | None

    @property
    def weight_float(self) -> np.ndarray:
        if self.weight_codes is None:
            return self.weight_fp
        return dequantize(self.weight_codes, self.weight_params).reshape(self.weight_shape)

    @property
    def bias_float(self) -> np.ndarray | None:
        if self.bias_codes is not None:
            return self.bias_codes.astype(np.float64) * self.bias_scale
        return self.bias_fp


@dataclass(frozen=True)
class QuantizedModel:
    name: str
    config: G.EncoderConfig
    norms: tuple[G.NormParams, ...]
    layers: tuple[QuantizedLayer, ...]
    plan_bits: tuple[int, ...]
    source_fingerprint: str

    @property
    def skeleton(self) -> G.ModelGraph:
        """Structural ModelGraph whose weights are the dequantized codes.

        Used only for plumbing (config, norms, layer order); the math in
        run_quantized is supplied by the integer executor. Cached.
        """
        cached = getattr(self, "_skeleton_cache", None)
        if cached is not None:
            return cached
        specs = []
        for ql, activation in zip(self.layers, self._act_tags):
            w = Tensor(ql.weight_float.astype(np.float32), dtype="f32")
            b = ql.bias_float
            bias = Tensor(np.asarray(b, dtype=np.float32), dtype="f32") if b is not None else None
            specs.append(G.LayerSpec(ql.index, ql.kind, w, bias, activation, True))
        skel = G.ModelGraph(self.name, self.config, tuple(specs), self.norms)
        object.__setattr__(self, "_skeleton_cache", skel)
        return skel


def _bias_code_scale(act, wp: AffineParams) -> float:
    # two-range inputs anchor the bias grid at the nonnegative-half scale
    s_x = act.scale_pos if isinstance(act, TwoRangeParams) else act.scale
    return s_x * wp.scale


def quantize_model(model: G.ModelGraph, plan, act_params) -> QuantizedModel:
    """Assemble a QuantizedModel from a bit plan and activation parameters.

    ``plan`` is a BitPlan or a plain per-layer bit sequence; ``act_params``
    is a per-layer list of AffineParams / TwoRangeParams (None means the
    layer's activations stay FP).  Weights at 32 bits stay FP.  Bias codes
    live on the S_x * S_w grid in int32 range; when either side of that
    grid is FP, the bias stays FP too.
    """
    bits = list(getattr(plan, "bits", plan))
    if len(bits) != model.n_layers:
        raise AssemblyError(
            f"plan covers {len(bits)} layers, model has {model.n_layers}"
        )
    if act_params is None or len(act_params) != model.n_layers:
        raise AssemblyError("activation params must be given for every layer")

    qlayers = []
    for layer, b, act in zip(model.layers, bits, act_params):
        if layer.quantizable and act is None and b < 32:
            raise AssemblyError(
                f"layer {layer.index} ({layer.kind}): missing activation params"
            )
        w = layer.weight.nd.astype(np.float64)
        bias = layer.bias.nd.astype(np.float64) if layer.bias is not None else None
        if b == 32:
            wcodes, wp, wfp = None, None, layer.weight.nd.astype(np.float32)
        else:
            wp = weight_params_symmetric(w, b)
            wcodes, wfp = quantize(w, wp).reshape(-1), None
        bias_codes = bias_scale = bias_fp = None
        if bias is not None:
            if b < 32 and act is not None:
                bias_scale = _bias_code_scale(act, wp)
                bias_codes = np.clip(
                    round_half_away(bias / bias_scale), INT32_MIN, INT32_MAX
                ).astype(np.int64)
            else:
                bias_fp = bias
        qlayers.append(
            QuantizedLayer(
                index=layer.index,
                kind=layer.kind,
                bits=b,
                weight_shape=layer.weight.shape,
                weight_codes=wcodes,
                weight_params=wp,
                weight_fp=wfp,
                act=act,
                bias_codes=bias_codes,
                bias_scale=bias_scale,
                bias_fp=bias_fp,
            )
        )
    qm = QuantizedModel(
        name=model.name,
        config=model.config,
        norms=model.norms,
        layers=tuple(qlayers),
        plan_bits=tuple(bits),
        source_fingerprint=G.fingerprint(model),
    )
    object.__setattr__(qm, "_act_tags", tuple(l.activation for l in model.layers))
    return qm


# ---------------------------------------------------------------------------
# Quantized inference
# ---------------------------------------------------------------------------


def _int_linear(x, ql: QuantizedLayer) -> np.ndarray:
    """x[t, in] through integer accumulation; returns FP output [t, out]."""
    w_q = ql.weight_codes.reshape(ql.weight_shape)  # (out, in)
    sw = ql.weight_params.scale
    if isinstance(ql.act, TwoRangeParams):
        codes, _ = two_range_quantize(x, ql.act)
        qneg = np.where(codes < 0, codes, 0)
        qpos = np.where(codes >= 0, codes, 0)
        acc_n = IK.int_accumulate(qneg, w_q.T, 0, None)
        acc_p = IK.int_accumulate(qpos, w_q.T, 0, ql.bias_codes)
        return (
            ql.act.scale_neg * sw * acc_n.astype(np.float64)
            + ql.act.scale_pos * sw * acc_p.astype(np.float64)
        )
    codes = quantize(x, ql.act)
    acc = IK.int_accumulate(codes, w_q.T, ql.act.zero, ql.bias_codes)
    return ql.act.scale * sw * acc.astype(np.float64)


def _exec_quantized(qmodel: QuantizedModel):
    """Layer executor for graph.run that routes through the integer core."""

    def exec_layer(layer: G.LayerSpec, x: np.ndarray) -> np.ndarray:
        ql = qmodel.layers[layer.index]
        if ql.weight_codes is None or ql.act is None:
            # FP path: weights at 32 bits or unquantized activations
            xs = fake_quant_act(x, ql.act) if ql.act is not None else x
            w = ql.weight_float
            bias = ql.bias_float
            if layer.kind == "Conv1d":
                stride = _conv_stride(qmodel.config, layer.index)
                out = T._val(T.conv1d(xs, w, stride))
                return out + bias[:, None] if bias is not None else out
            out = xs @ w.T
            return out + bias if bias is not None else out
        if layer.kind == "Conv1d":
            stride = _conv_stride(qmodel.config, layer.index)
            k = ql.weight_shape[2]
            t_out = (x.shape[1] - k) // stride + 1
            cols = T._im2col(np.asarray(x), k, stride, t_out)  # (c_in*k, t_out)
            w2 = ql.weight_codes.reshape(ql.weight_shape[0], -1)
            out = _int_linear(cols.T, _conv_as_linear(ql, w2))  # (t_out, c_out)
            return out.T
        return _int_linear(np.asarray(x), ql)

    return exec_layer


def _conv_as_linear(ql: QuantizedLayer, w2: np.ndarray) -> QuantizedLayer:
    return QuantizedLayer(
        index=ql.index, kind="Linear", bits=ql.bits, weight_shape=w2.shape,
        weight_codes=w2.reshape(-1), weight_params=ql.weight_params,
        weight_fp=None, act=ql.act, bias_codes=ql.bias_codes,
        bias_scale=ql.bias_scale, bias_fp=ql.bias_fp,
    )


def _conv_stride(cfg: G.EncoderConfig, index: int) -> int:
    return cfg.conv_stride if index == 0 else cfg.conv2_stride


def run_quantized(qmodel: QuantizedModel, x, want_layers: bool = False):
    """Simulated-quantized inference: integer matmul/conv cores, FP glue.

    Returns logits, or (logits, per-layer outputs) when ``want_layers``.
    Deterministic for fixed inputs.
    """
    res = G.run(qmodel.skeleton, x, layer_exec=_exec_quantized(qmodel))
    if want_layers:
        return res.logits, res.layer_outputs
    return res.logits


# ---------------------------------------------------------------------------
# Bit-packing and the MYQZ container
# ---------------------------------------------------------------------------


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack signed codes at ``bits`` bits each, little-endian bit order."""
    offset = 2 ** (bits - 1)
    total_bits = codes.size * bits
    nbytes = (total_bits + 7) // 8
    acc = 0
    for i, q in enumerate(codes.reshape(-1).tolist()):
        acc |= (int(q) + offset) << (i * bits)
    return acc.to_bytes(nbytes, "little")


def unpack_codes(blob: bytes, bits: int, count: int) -> np.ndarray:
    offset = 2 ** (bits - 1)
    acc = int.from_bytes(blob, "little")
    mask = (1 << bits) - 1
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        out[i] = ((acc >> (i * bits)) & mask) - offset
    return out


def payload_bits(qmodel: QuantizedModel) -> int:
    """Semantic weight payload size: sum of bits * weight elements."""
    return sum(ql.bits * int(np.prod(ql.weight_shape)) for ql in qmodel.layers)


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _act_meta(act) -> dict | None:
    if act is None:
        return None
    if isinstance(act, TwoRangeParams):
        return {"kind": "two_range", "scale_neg": _fmt_float(act.scale_neg),
                "scale_pos": _fmt_float(act.scale_pos), "bits": act.bits}
    return {"kind": "affine", "scale": _fmt_float(act.scale), "zero": act.zero,
            "bits": act.bits}


def _act_from_meta(meta) -> AffineParams | TwoRangeParams | None:
    if meta is None:
        return None
    if meta["kind"] == "two_range":
        return TwoRangeParams(float(meta["scale_neg"]), float(meta["scale_pos"]),
                              int(meta["bits"]))
    return AffineParams(float(meta["scale"]), int(meta["zero"]), int(meta["bits"]))


def quantized_to_bytes(qmodel: QuantizedModel) -> bytes:
    layers_meta = []
    blobs: list[bytes] = []
    for ql in qmodel.layers:
        if ql.weight_codes is None:
            wblob = ql.weight_fp.astype("<f4").tobytes()
            storage = "fp32"
        else:
            wblob = pack_codes(ql.weight_codes, ql.bits)
            storage = "packed"
        blobs.append(wblob)
        bias_meta = None
        if ql.bias_codes is not None:
            bblob = ql.bias_codes.astype("<i4").tobytes()
            bias_meta = {"storage": "codes", "scale": _fmt_float(ql.bias_scale),
                         "count": int(ql.bias_codes.size)}
            blobs.append(bblob)
        elif ql.bias_fp is not None:
            bblob = np.asarray(ql.bias_fp).astype("<f8").tobytes()
            bias_meta = {"storage": "fp64", "count": int(np.asarray(ql.bias_fp).size)}
            blobs.append(bblob)
        layers_meta.append({
            "index": ql.index,
            "kind": ql.kind,
            "activation": qmodel._act_tags[ql.index],
            "bits": ql.bits,
            "storage": storage,
            "weight_shape": list(ql.weight_shape),
            "weight_scale": _fmt_float(ql.weight_params.scale) if ql.weight_params else None,
            "weight_bytes": len(wblob),
            "act": _act_meta(ql.act),
            "bias": bias_meta,
        })
    meta = {
        "name": qmodel.name,
        "source_fingerprint": qmodel.source_fingerprint,
        "config": {k: getattr(qmodel.config, k)
                   for k in G.EncoderConfig.__dataclass_fields__},
        "plan": list(qmodel.plan_bits),
        "layers": layers_meta,
        "norms": [
            {"name": n.name, "gamma": G._tensor_meta(n.gamma),
             "beta": G._tensor_meta(n.beta)}
            for n in qmodel.norms
        ],
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    for blob in blobs:
        buf.write(blob)
    for norm in qmodel.norms:
        buf.write(G._tensor_bytes(norm.gamma))
        buf.write(G._tensor_bytes(norm.beta))
    return buf.getvalue()


def save_quantized(qmodel: QuantizedModel, path) -> None:
    from .report import atomic_write_bytes

    atomic_write_bytes(path, quantized_to_bytes(qmodel))


def quantized_from_bytes(blob: bytes) -> QuantizedModel:
    r = G._Reader(blob)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    (meta_len,) = struct.unpack("<Q", r.take(8, "metadata length"))
    meta_start = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", offset=meta_start) from exc

    cfg = G.EncoderConfig(**meta["config"])
    qlayers = []
    act_tags = []
    for lm in meta["layers"]:
        shape = tuple(int(d) for d in lm["weight_shape"])
        count = int(np.prod(shape))
        wblob = r.take(lm["weight_bytes"], f"layer {lm['index']} weights")
        if lm["storage"] == "fp32":
            wcodes, wp = None, None
            wfp = np.frombuffer(wblob, dtype="<f4").reshape(shape)
        elif lm["storage"] == "packed":
            expected = (count * lm["bits"] + 7) // 8
            if len(wblob) != expected:
                raise FormatError(
                    f"layer {lm['index']} weight blob is {len(wblob)} bytes, "
                    f"expected {expected}", offset=r.pos - len(wblob))
            wcodes = unpack_codes(wblob, lm["bits"], count)
            wp = AffineParams(float(lm["weight_scale"]), 0, lm["bits"])
            wfp = None
        else:
            raise FormatError(f"unknown storage {lm['storage']!r}", offset=r.pos)
        bias_codes = bias_scale = bias_fp = None
        if lm["bias"] is not None:
            bm = lm["bias"]
            if bm["storage"] == "codes":
                raw = r.take(4 * bm["count"], f"layer {lm['index']} bias")
                bias_codes = np.frombuffer(raw, dtype="<i4").astype(np.int64)
                bias_scale = float(bm["scale"])
            else:
                raw = r.take(8 * bm["count"], f"layer {lm['index']} bias")
                bias_fp = np.frombuffer(raw, dtype="<f8").copy()
        qlayers.append(QuantizedLayer(
            index=lm["index"], kind=lm["kind"], bits=lm["bits"],
            weight_shape=shape, weight_codes=wcodes, weight_params=wp,
            weight_fp=wfp, act=_act_from_meta(lm["act"]),
            bias_codes=bias_codes, bias_scale=bias_scale, bias_fp=bias_fp,
        ))
        act_tags.append(lm["activation"])
    norms = []
    for nm in meta["norms"]:
        gamma = r.tensor(nm["gamma"], f"norm {nm['name']} gamma")
        beta = r.tensor(nm["beta"], f"norm {nm['name']} beta")
        norms.append(G.NormParams(nm["name"], gamma, beta))
    if r.pos != len(blob):
        raise FormatError(
            f"{len(blob) - r.pos} trailing bytes after declared blobs", offset=r.pos
        )
    qm = QuantizedModel(
        name=meta["name"], config=cfg, norms=tuple(norms), layers=tuple(qlayers),
        plan_bits=tuple(meta["plan"]), source_fingerprint=meta["source_fingerprint"],
    )
    object.__setattr__(qm, "_act_tags", tuple(act_tags))
    return qm


def load_quantized(path) -> QuantizedModel:
    with open(path, "rb") as fh:
        return quantized_from_bytes(fh.read())
