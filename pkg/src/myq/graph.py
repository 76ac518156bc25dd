"""Layer/graph representation of the network being compressed.

A ``ModelGraph`` is an ordered list of weighted layers (the quantizable
surface: convs, linear projections, attention projections, FFN halves)
plus the layernorm parameters that stay in full precision.  The toy
encoder builder produces a conv-stem + transformer-block architecture at
desk scale; ``run`` executes it, optionally recording a tape and
capturing every layer's input and pre-activation output.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor

MAGIC = b"MYQM"
VERSION = 1

LAYER_KINDS = ("Conv1d", "Linear", "AttnQ", "AttnK", "AttnV", "AttnOut", "FFN1", "FFN2")
ACTIVATIONS = ("none", "gelu", "softmax-context")


@dataclass(frozen=True)
class LayerSpec:
    """One weighted layer.

    ``activation`` records the nonlinearity this layer's *input* passed
    through ("gelu" and "softmax-context" inputs get two-range activation
    quantizers); the forward structure itself is fixed by ``kind``.
    """

    index: int
    kind: str
    weight: Tensor
    bias: Tensor | None = None
    activation: str = "none"
    quantizable: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation tag {self.activation!r}")
        want_ndim = 3 if self.kind == "Conv1d" else 2
        if len(self.weight.shape) != want_ndim:
            raise ConfigError(
                f"{self.kind} weight must be {want_ndim}-d, got {self.weight.shape}"
            )
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ConfigError(
                f"bias shape {self.bias.shape} does not match out dim "
                f"{self.weight.shape[0]}"
            )

    @property
    def n_params(self) -> int:
        n = self.weight.size
        if self.bias is not None:
            n += self.bias.size
        return n


@dataclass(frozen=True)
class NormParams:
    """LayerNorm affine parameters; kept FP and outside budget accounting."""

    name: str
    gamma: Tensor
    beta: Tensor

    @property
    def n_params(self) -> int:
        return self.gamma.size + self.beta.size


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    hidden: int = 16
    heads: int = 2
    conv_stem: bool = True
    in_channels: int = 4
    input_len: int = 32
    conv_kernel: int = 4
    conv_stride: int = 2
    conv2_kernel: int = 3
    conv2_stride: int = 1
    ffn_mult: int = 4
    vocab: int = 32
    eps: float = 1e-5

    def __post_init__(self):
        ints = {
            "layers": self.layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "in_channels": self.in_channels,
            "input_len": self.input_len,
            "conv_kernel": self.conv_kernel,
            "conv_stride": self.conv_stride,
            "conv2_kernel": self.conv2_kernel,
            "conv2_stride": self.conv2_stride,
            "ffn_mult": self.ffn_mult,
            "vocab": self.vocab,
        }
        for name, value in ints.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )
        if self.conv_stem:
            if self.frames < 1:
                raise ConfigError("conv stem consumes the whole input; increase input_len")

    @property
    def frames(self) -> int:
        """Number of output frames after the (optional) conv stem."""
        t = self.input_len
        if self.conv_stem:
            t = (t - self.conv_kernel) // self.conv_stride + 1
            if t < self.conv2_kernel:
                return 0
            t = (t - self.conv2_kernel) // self.conv2_stride + 1
        return t

    @property
    def input_shape(self) -> tuple[int, int]:
        c = self.in_channels if self.conv_stem else self.hidden
        return (c, self.input_len)


@dataclass(frozen=True)
class ModelGraph:
    name: str
    config: EncoderConfig
    layers: tuple[LayerSpec, ...]
    norms: tuple[NormParams, ...]

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.index != i:
                raise ConfigError(
                    f"layer indices must be consecutive; position {i} has {layer.index}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def norm(self, name: str) -> NormParams:
        for n in self.norms:
            if n.name == name:
                return n
        raise KeyError(name)


def param_count(model: ModelGraph) -> list[int]:
    """Per-layer parameter counts |W_l| (bias counted with its layer)."""
    return [layer.n_params for layer in model.layers]


def norm_param_count(model: ModelGraph) -> int:
    """Total layernorm parameters (reported separately, never budgeted)."""
    return sum(n.n_params for n in model.norms)


# ---------------------------------------------------------------------------
# Toy encoder builder
# ---------------------------------------------------------------------------


def build_toy_encoder(config: EncoderConfig | None = None, seed: int = 0,
                      dtype: str = "f32", name: str = "toy-encoder") -> ModelGraph:
    """Deterministic random encoder: conv stem + transformer blocks + classifier.

    Weights are Gaussian(0, 1/sqrt(fan_in)); biases Gaussian(0, 0.02);
    layernorms start at gamma=1, beta=0.  With the default config the
    closed-form parameter count is::

        stem:   hidden*in_channels*k1 + hidden  +  hidden*hidden*k2 + hidden
        block:  4*(hidden^2 + hidden) + 2*ffn_mult*hidden^2 + (ffn_mult+1)*hidden
        head:   vocab*hidden + vocab

    summed as stem + layers*block + head.
    """
    cfg = config or EncoderConfig()
    rng = np.random.default_rng(seed)
    h = cfg.hidden

    def draw_w(*shape):
        fan_in = int(np.prod(shape[1:]))
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape), dtype=dtype)

    def draw_b(n):
        return Tensor(rng.normal(0.0, 0.02, size=(n,)), dtype=dtype)

    layers: list[LayerSpec] = []
    norms: list[NormParams] = []
    idx = 0

    def put(kind, weight, bias, activation):
        nonlocal idx
        layers.append(LayerSpec(idx, kind, weight, bias, activation))
        idx += 1

    if cfg.conv_stem:
        put("Conv1d", draw_w(h, cfg.in_channels, cfg.conv_kernel), draw_b(h), "none")
        put("Conv1d", draw_w(h, h, cfg.conv2_kernel), draw_b(h), "gelu")

    ones = Tensor(np.ones(h), dtype=dtype)
    zeros = Tensor(np.zeros(h), dtype=dtype)
    for b in range(cfg.layers):
        put("AttnQ", draw_w(h, h), draw_b(h), "none")
        put("AttnK", draw_w(h, h), draw_b(h), "none")
        put("AttnV", draw_w(h, h), draw_b(h), "none")
        put("AttnOut", draw_w(h, h), draw_b(h), "softmax-context")
        put("FFN1", draw_w(cfg.ffn_mult * h, h), draw_b(cfg.ffn_mult * h), "none")
        put("FFN2", draw_w(h, cfg.ffn_mult * h), draw_b(h), "gelu")
        norms.append(NormParams(f"block{b}.ln1", ones, zeros))
        norms.append(NormParams(f"block{b}.ln2", ones, zeros))

    put("Linear", draw_w(cfg.vocab, h), draw_b(cfg.vocab), "none")
    norms.append(NormParams("final_ln", ones, zeros))

    return ModelGraph(name=name, config=cfg, layers=tuple(layers), norms=tuple(norms))


# ---------------------------------------------------------------------------
# Forward execution
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    logits: Tensor
    layer_inputs: list[np.ndarray]
    layer_outputs: list[np.ndarray]
    tape: T.Tape | None = None


def run(model: ModelGraph, x, tape: T.Tape | None = None,
        inject: dict[int, np.ndarray] | None = None) -> RunResult:
    """Execute the graph, capturing each layer's input and matmul output.

    ``inject`` adds a perturbation to a layer's output before it is
    consumed downstream (used by finite-difference oracles).
    """
    cfg = model.config
    xv = x.nd if isinstance(x, Tensor) else np.asarray(x)
    if xv.shape != cfg.input_shape:
        raise DimensionError(
            f"model input must have shape {cfg.input_shape}, got {xv.shape}"
        )
    inject = inject or {}
    inputs: list[np.ndarray] = [None] * model.n_layers
    outputs: list[np.ndarray] = [None] * model.n_layers

    cur = tape.leaf(xv) if tape is not None else xv
    it = iter(model.layers)

    def layer_op(layer, value, op):
        inputs[layer.index] = T._val(value)
        try:
            out = op(value)
        except DimensionError as exc:
            raise DimensionError(f"layer {layer.index} ({layer.kind}): {exc}") from exc
        delta = inject.get(layer.index)
        if delta is not None:
            out = T.add(out, np.asarray(delta), tape=tape)
        outputs[layer.index] = T._val(out)
        if tape is not None:
            tape.mark_layer(layer.index, out)
        return out

    def linear(layer, value):
        return layer_op(
            layer,
            value,
            lambda v: T.add_bias(
                T.matmul(v, layer.weight.nd.T, tape=tape), layer.bias.nd, tape=tape
            ),
        )

    if cfg.conv_stem:
        conv1, conv2 = next(it), next(it)
        cur = layer_op(
            conv1,
            cur,
            lambda v: T.add_channel_bias(
                T.conv1d(v, conv1.weight.nd, cfg.conv_stride, tape=tape),
                conv1.bias.nd,
                tape=tape,
            ),
        )
        cur = T.gelu(cur, tape=tape)
        cur = layer_op(
            conv2,
            cur,
            lambda v: T.add_channel_bias(
                T.conv1d(v, conv2.weight.nd, cfg.conv2_stride, tape=tape),
                conv2.bias.nd,
                tape=tape,
            ),
        )
        cur = T.gelu(cur, tape=tape)
        cur = T.transpose(cur, (1, 0), tape=tape)  # (frames, hidden)
    else:
        cur = T.transpose(cur, (1, 0), tape=tape)

    frames = T._val(cur).shape[0]
    heads, dh = cfg.heads, cfg.hidden // cfg.heads
    for b in range(cfg.layers):
        lq, lk, lv, lo, l1, l2 = (next(it) for _ in range(6))
        ln1 = model.norm(f"block{b}.ln1")
        ln2 = model.norm(f"block{b}.ln2")

        nx = T.layernorm(cur, ln1.gamma.nd, ln1.beta.nd, cfg.eps, tape=tape)
        q = linear(lq, nx)
        k = linear(lk, nx)
        v = linear(lv, nx)

        def split(t):
            return T.transpose(T.reshape(t, (frames, heads, dh), tape=tape),
                               (1, 0, 2), tape=tape)

        qh, kh, vh = split(q), split(k), split(v)
        scores = T.scale(
            T.bmm(qh, T.transpose(kh, (0, 2, 1), tape=tape), tape=tape),
            1.0 / math.sqrt(dh),
            tape=tape,
        )
        att = T.softmax(scores, axis=2, tape=tape)
        ctx = T.bmm(att, vh, tape=tape)
        ctx = T.reshape(T.transpose(ctx, (1, 0, 2), tape=tape), (frames, cfg.hidden),
                        tape=tape)
        ao = linear(lo, ctx)
        cur = T.add(cur, ao, tape=tape)

        nh = T.layernorm(cur, ln2.gamma.nd, ln2.beta.nd, cfg.eps, tape=tape)
        f1 = linear(l1, nh)
        g = T.gelu(f1, tape=tape)
        f2 = linear(l2, g)
        cur = T.add(cur, f2, tape=tape)

    fin = model.norm("final_ln")
    cur = T.layernorm(cur, fin.gamma.nd, fin.beta.nd, cfg.eps, tape=tape)
    logits = linear(next(it), cur)

    if tape is not None:
        tape.mark_result(logits)
    logits_t = Tensor(T._val(logits))
    return RunResult(logits_t, inputs, outputs, tape)


def forward(model: ModelGraph, x) -> Tensor:
    """Per-frame logits over the vocabulary."""
    return run(model, x).logits


def forward_with_tape(model: ModelGraph, x) -> tuple[list[Tensor], T.Tape]:
    """FP outputs of every recorded layer plus a tape for backward."""
    tape = T.Tape()
    res = run(model, x, tape=tape)
    return [Tensor(o) for o in res.layer_outputs], tape


# ---------------------------------------------------------------------------
# Binary model file (MYQM)
# ---------------------------------------------------------------------------
#
# Layout: magic "MYQM" | u32 LE version | u64 LE metadata length | UTF-8 JSON
# metadata | raw little-endian tensor blobs (per layer: weight then bias, then
# per norm: gamma then beta), in graph order.

_DT_TO_NP = {"f32": "<f4", "f64": "<f8"}


def _tensor_meta(t: Tensor) -> dict:
    return {"shape": list(t.shape), "dtype": t.dtype}


def _tensor_bytes(t: Tensor) -> bytes:
    return t.nd.astype(_DT_TO_NP[t.dtype]).tobytes()


def model_to_bytes(model: ModelGraph) -> bytes:
    meta = {
        "name": model.name,
        "config": {k: getattr(model.config, k) for k in EncoderConfig.__dataclass_fields__},
        "layers": [
            {
                "index": l.index,
                "kind": l.kind,
                "activation": l.activation,
                "quantizable": l.quantizable,
                "weight": _tensor_meta(l.weight),
                "bias": _tensor_meta(l.bias) if l.bias is not None else None,
            }
            for l in model.layers
        ],
        "norms": [
            {"name": n.name, "gamma": _tensor_meta(n.gamma), "beta": _tensor_meta(n.beta)}
            for n in model.norms
        ],
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    for layer in model.layers:
        buf.write(_tensor_bytes(layer.weight))
        if layer.bias is not None:
            buf.write(_tensor_bytes(layer.bias))
    for norm in model.norms:
        buf.write(_tensor_bytes(norm.gamma))
        buf.write(_tensor_bytes(norm.beta))
    return buf.getvalue()


def save_model(model: ModelGraph, path) -> None:
    from .report import atomic_write_bytes

    atomic_write_bytes(path, model_to_bytes(model))


def fingerprint(model: ModelGraph) -> str:
    return "sha256:" + hashlib.sha256(model_to_bytes(model)).hexdigest()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def tensor(self, meta: dict, what: str) -> Tensor:
        shape = tuple(int(d) for d in meta["shape"])
        dtype = meta["dtype"]
        if dtype not in _DT_TO_NP:
            raise FormatError(f"unknown dtype {dtype!r} for {what}", offset=self.pos)
        n = int(np.prod(shape)) * (4 if dtype == "f32" else 8)
        raw = self.take(n, what)
        arr = np.frombuffer(raw, dtype=_DT_TO_NP[dtype]).reshape(shape)
        return Tensor(arr, dtype=dtype)


def model_from_bytes(blob: bytes) -> ModelGraph:
    r = _Reader(blob)
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

    try:
        cfg = EncoderConfig(**meta["config"])
        layers = []
        for lm in meta["layers"]:
            weight = r.tensor(lm["weight"], f"layer {lm['index']} weight")
            bias = r.tensor(lm["bias"], f"layer {lm['index']} bias") if lm["bias"] else None
            layers.append(
                LayerSpec(lm["index"], lm["kind"], weight, bias,
                          lm["activation"], lm["quantizable"])
            )
        norms = []
        for nm in meta["norms"]:
            gamma = r.tensor(nm["gamma"], f"norm {nm['name']} gamma")
            beta = r.tensor(nm["beta"], f"norm {nm['name']} beta")
            norms.append(NormParams(nm["name"], gamma, beta))
    except KeyError as exc:
        raise FormatError(f"metadata missing field {exc}", offset=meta_start) from exc
    if r.pos != len(blob):
        raise FormatError(
            f"{len(blob) - r.pos} trailing bytes after declared blobs", offset=r.pos
        )
    return ModelGraph(meta["name"], cfg, tuple(layers), tuple(norms))


def load_model(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
