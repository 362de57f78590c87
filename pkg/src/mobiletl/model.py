"""Declarative block specs instantiated into layer graphs.

Supported blocks: plain conv blocks (conv -> BN), MobileNetV2-style
inverted residuals, MobileNetV3-style inverted residuals (SE gate +
Hard-Swish), and a classifier head (gap -> optional hidden fc -> fc).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    ActBackwardMode,
    BatchNorm,
    BNMode,
    Conv2d,
    GlobalAvgPool,
    HardSwish,
    HardSigmoid,
    Layer,
    Linear,
    ReLU6,
    SEBlock,
    conv_out_size,
    residual_add,
)
from .tensor import Tape, Tensor, wrap


class SpecError(ValueError):
    pass


class FormatError(ValueError):
    pass


CONV = "conv"
IRB_V2 = "irb_v2"
IRB_V3 = "irb_v3"
HEAD = "head"

RELU6 = "relu6"
HSWISH = "hswish"


@dataclass
class BlockSpec:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    expansion: float = 1.0
    kernel: int = 3
    stride: int = 1
    activation: str = RELU6
    use_se: bool = False
    use_residual: bool | None = None  # None: auto (stride 1 and in == out)
    se_ratio: int = 4
    has_expand: bool = True           # MNv3 skips the expand conv at ratio 1
    hidden_dim: int = 0               # head only

    def __post_init__(self):
        if self.kind not in (CONV, IRB_V2, IRB_V3, HEAD):
            raise SpecError(f"unknown block kind {self.kind!r}")
        if self.kind != HEAD:
            if self.in_ch < 1 or self.out_ch < 1:
                raise SpecError("channel counts must be >= 1")
            if self.kernel % 2 != 1:
                raise SpecError("kernel must be odd")
            if self.stride not in (1, 2):
                raise SpecError("stride must be 1 or 2")
            if self.expansion < 1:
                raise SpecError("expansion must be >= 1")
        if self.kind == IRB_V2 and self.use_se:
            raise SpecError("SE gate is only available in irb_v3 blocks")
        if self.activation not in (RELU6, HSWISH):
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.use_residual and (self.stride != 1 or self.in_ch != self.out_ch):
            raise SpecError("residual needs stride 1 and in_ch == out_ch")

    @property
    def exp_ch(self) -> int:
        return int(round(self.in_ch * self.expansion))

    @property
    def residual(self) -> bool:
        if self.kind not in (IRB_V2, IRB_V3):
            return False
        if self.use_residual is None:
            return self.stride == 1 and self.in_ch == self.out_ch
        return self.use_residual


@dataclass
class ModelSpec:
    input_shape: tuple  # [B, C, H, W]
    blocks: list        # BlockSpec list (head excluded)
    num_classes: int = 0
    head: BlockSpec | None = None

    def __post_init__(self):
        c = self.input_shape[1]
        for i, b in enumerate(self.blocks):
            if b.kind == HEAD:
                raise SpecError("head goes in the head field, not blocks")
            if b.in_ch != c:
                raise SpecError(
                    f"block {i}: in_ch {b.in_ch} does not chain from {c}")
            c = b.out_ch
        if self.num_classes > 0 and self.head is None:
            self.head = BlockSpec(kind=HEAD)


def spec_from_dict(doc: dict) -> ModelSpec:
    blocks, head = [], None
    for raw in doc.get("blocks", []):
        raw = dict(raw)
        kind = raw.pop("kind")
        bs = BlockSpec(kind=kind, **raw)
        if kind == HEAD:
            head = bs
        else:
            blocks.append(bs)
    return ModelSpec(tuple(doc["input_shape"]), blocks,
                     int(doc.get("num_classes", 0)), head)


def load_spec(path: str) -> ModelSpec:
    with open(path) as f:
        return spec_from_dict(json.load(f))


def bundled_spec_path(name: str = "mobilenet_v3_small") -> str:
    return os.path.join(os.path.dirname(__file__), "data", f"{name}.json")


class Block:
    """One instantiated block: ordered layers plus the residual flag."""

    def __init__(self, spec: BlockSpec, index: int, rng: np.random.Generator):
        self.spec = spec
        self.index = index
        self.frozen = False
        self.layers: list[Layer] = []
        p = f"b{index}"
        if spec.kind == CONV:
            self._add_conv(f"{p}.conv", spec.in_ch, spec.out_ch, spec.kernel,
                           1, spec.stride, rng)
            self.layers.append(BatchNorm(f"{p}.bn", spec.out_ch))
        elif spec.kind in (IRB_V2, IRB_V3):
            e = spec.exp_ch
            act = HardSwish if spec.activation == HSWISH else ReLU6
            if spec.has_expand or e != spec.in_ch:
                self._add_conv(f"{p}.expand", spec.in_ch, e, 1, 1, 1, rng)
                self.layers.append(BatchNorm(f"{p}.bn1", e))
                self.layers.append(act(f"{p}.act1"))
            self._add_conv(f"{p}.dw", e, e, spec.kernel, e, spec.stride, rng)
            self.layers.append(BatchNorm(f"{p}.bn2", e))
            self.layers.append(act(f"{p}.act2"))
            if spec.kind == IRB_V3 and spec.use_se:
                self.layers.append(SEBlock(f"{p}.se", e, spec.se_ratio, rng))
            self._add_conv(f"{p}.project", e, spec.out_ch, 1, 1, 1, rng)
            self.layers.append(BatchNorm(f"{p}.bn3", spec.out_ch))
        else:
            raise SpecError("head blocks are instantiated by Model")

    def _add_conv(self, name, cin, cout, k, groups, stride, rng):
        fan_in = k * k * cin // groups
        w = (rng.standard_normal((cout, cin // groups, k, k)) *
             np.sqrt(2.0 / fan_in)).astype(np.float32)
        self.layers.append(Conv2d(name, w, groups, stride, k // 2))

    def forward(self, x: Tensor, tape: Tape | None, training: bool) -> Tensor:
        tape = None if self.frozen else tape
        skip_cell = {}
        if self.spec.residual and tape is not None:
            # reverse order: the join node runs after the block's first layer
            def join(grad_y, grads):
                return grad_y + skip_cell["g"]

            tape.record("res_join", f"b{self.index}.res", join)
        x_in = x
        for layer in self.layers:
            x = layer.forward(x, tape, training)
        if self.spec.residual:
            x = residual_add(x, x_in)
            if tape is not None:
                def add(grad_y, grads):
                    skip_cell["g"] = grad_y
                    return grad_y

                tape.record("res_add", f"b{self.index}.res", add)
        return x


class Head:
    """Classifier head: gap -> optional (fc hidden + activation) -> fc."""

    def __init__(self, spec: BlockSpec, in_ch: int, num_classes: int,
                 rng: np.random.Generator):
        self.spec = spec
        self.frozen = False
        self.layers: list[Layer] = [GlobalAvgPool("head.gap")]
        d = in_ch
        if spec.hidden_dim:
            self.layers.append(self._linear("head.fc1", d, spec.hidden_dim, rng))
            self.layers.append(HardSwish("head.act"))
            d = spec.hidden_dim
        self.layers.append(self._linear("head.fc", d, num_classes, rng))

    @staticmethod
    def _linear(name, din, dout, rng):
        w = (rng.standard_normal((dout, din)) * np.sqrt(2.0 / din)).astype(np.float32)
        return Linear(name, w, np.zeros(dout, dtype=np.float32))

    def forward(self, x: Tensor, tape: Tape | None, training: bool) -> Tensor:
        tape = None if self.frozen else tape
        for layer in self.layers:
            x = layer.forward(x, tape, training)
        return x


class Model:
    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.blocks = [Block(b, i, rng) for i, b in enumerate(spec.blocks)]
        self.head: Head | None = None
        if spec.num_classes > 0:
            in_ch = spec.blocks[-1].out_ch if spec.blocks else spec.input_shape[1]
            self.head = Head(spec.head, in_ch, spec.num_classes, rng)

    def all_layers(self) -> list[Layer]:
        out = []
        for b in self.blocks:
            out.extend(b.layers)
        if self.head:
            out.extend(self.head.layers)
        return out

    def params(self) -> dict:
        out = {}
        for layer in self.all_layers():
            out.update(layer.params())
            if isinstance(layer, BatchNorm):
                out.update(layer.buffers())
        return out

    def trainable_params(self) -> dict:
        out = {}
        for b in self.blocks:
            if b.frozen:
                continue
            for layer in b.layers:
                out.update(layer.trainable_params())
        if self.head and not self.head.frozen:
            for layer in self.head.layers:
                out.update(layer.trainable_params())
        return out

    def forward(self, x, tape: Tape | None = None, training: bool = False) -> Tensor:
        if isinstance(x, np.ndarray):
            x = wrap(np.ascontiguousarray(x))
        for b in self.blocks:
            x = b.forward(x, tape, training)
        if self.head:
            x = self.head.forward(x, tape, training)
        return x

    def to_f64(self) -> "Model":
        """Clone with float64 parameters (gradient-checking mode)."""
        other = Model(self.spec, self.seed)
        for layer in other.all_layers():
            for attr in ("weight", "bias", "gamma", "beta", "mu", "var",
                         "w1", "b1", "w2", "b2"):
                if hasattr(layer, attr):
                    setattr(layer, attr, getattr(layer, attr).astype(np.float64))
        return other


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    return Model(spec, seed)


def build_block(spec: BlockSpec, seed: int = 0) -> Block:
    return Block(spec, 0, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# parameter counting (closed form, independent of instantiation)


def block_param_count(spec: BlockSpec, in_ch_for_head: int = 0,
                      num_classes: int = 0) -> int:
    if spec.kind == CONV:
        return spec.kernel ** 2 * spec.in_ch * spec.out_ch + 2 * spec.out_ch
    if spec.kind == HEAD:
        n, d = 0, in_ch_for_head
        if spec.hidden_dim:
            n += d * spec.hidden_dim + spec.hidden_dim
            d = spec.hidden_dim
        return n + d * num_classes + num_classes
    e = spec.exp_ch
    n = 0
    if spec.has_expand or e != spec.in_ch:
        n += spec.in_ch * e + 2 * e
    n += spec.kernel ** 2 * e + 2 * e          # depthwise + bn
    if spec.kind == IRB_V3 and spec.use_se:
        cr = e // spec.se_ratio
        n += e * cr + cr + cr * e + e
    n += e * spec.out_ch + 2 * spec.out_ch     # project + bn
    return n


def param_count(model: Model) -> int:
    total = 0
    for spec in model.spec.blocks:
        total += block_param_count(spec)
    if model.spec.num_classes > 0:
        in_ch = (model.spec.blocks[-1].out_ch if model.spec.blocks
                 else model.spec.input_shape[1])
        total += block_param_count(model.spec.head, in_ch, model.spec.num_classes)
    return total


# ---------------------------------------------------------------------------
# checkpoint format: magic "MTLC", u32 version, u32 tensor count, then per
# tensor u32 name length, name, u8 dtype code, u8 rank, u32 dims, raw data.

_MAGIC = b"MTLC"
_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
               np.dtype(np.int8): 2}
_CODE_DTYPE = {v: k for k, v in _DTYPE_CODE.items()}


def save_checkpoint(model: Model, path: str) -> None:
    tensors = dict(sorted(model.params().items()))
    spec_doc = json.dumps(_spec_to_dict(model.spec), sort_keys=True).encode()
    tensors["__spec__"] = np.frombuffer(spec_doc, dtype=np.int8)
    tensors["__seed__"] = np.asarray([model.seed], dtype=np.float64)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", 1, len(tensors)))
        for name, arr in tensors.items():
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_CODE[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError("truncated checkpoint")
    return data


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _MAGIC:
            raise FormatError("bad checkpoint magic")
        version, count = struct.unpack("<II", _read_exact(f, 8))
        if version != 1:
            raise FormatError(f"unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, nlen).decode()
            code, rank = struct.unpack("<BB", _read_exact(f, 2))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            dt = _CODE_DTYPE.get(code)
            if dt is None:
                raise FormatError(f"unknown dtype code {code}")
            raw = _read_exact(f, int(np.prod(dims)) * dt.itemsize if rank else dt.itemsize)
            tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
    if "__spec__" not in tensors:
        raise FormatError("checkpoint lacks embedded model spec")
    doc = json.loads(tensors.pop("__spec__").tobytes().decode())
    seed = int(tensors.pop("__seed__")[0])
    model = Model(spec_from_dict(doc), seed)
    params = model.params()
    for name, arr in tensors.items():
        if name not in params:
            raise FormatError(f"unexpected tensor {name!r} in checkpoint")
        params[name][...] = arr
    return model


def _spec_to_dict(spec: ModelSpec) -> dict:
    def block_doc(b: BlockSpec) -> dict:
        return {"kind": b.kind, "in_ch": b.in_ch, "out_ch": b.out_ch,
                "expansion": b.expansion, "kernel": b.kernel,
                "stride": b.stride, "activation": b.activation,
                "use_se": b.use_se, "use_residual": b.use_residual,
                "se_ratio": b.se_ratio, "has_expand": b.has_expand,
                "hidden_dim": b.hidden_dim}

    doc = {"input_shape": list(spec.input_shape),
           "num_classes": spec.num_classes,
           "blocks": [block_doc(b) for b in spec.blocks]}
    if spec.head is not None:
        doc["blocks"].append(block_doc(spec.head))
    return doc


def output_spatial(spec: ModelSpec) -> list:
    """(H, W) in front of each block, following the conv arithmetic."""
    h, w = spec.input_shape[2], spec.input_shape[3]
    sizes = []
    for b in spec.blocks:
        sizes.append((h, w))
        h = conv_out_size(h, b.kernel, b.stride, b.kernel // 2)
        w = conv_out_size(w, b.kernel, b.stride, b.kernel // 2)
        if b.kind in (IRB_V2, IRB_V3):
            # only the depthwise conv strides; pointwise convs preserve size
            pass
    sizes.append((h, w))
    return sizes
