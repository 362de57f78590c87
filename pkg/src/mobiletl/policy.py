"""Fine-tuning policies: block partitioning, BN/activation modes, freezing.

A policy splits the model into a frozen (optionally int8-quantized) bottom
and a trainable top, then sets each layer's mode.  Under the memory-saving
policy the two intermediary BNs of a trainable block train shifts only, the
final BN trains fully, and activations store 1-bit sign masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .layers import ActBackwardMode, BatchNorm, BNMode, Conv2d, HardSwish, Linear, ReLU6, SEBlock
from .model import Model, SpecError


class PolicyError(ValueError):
    pass


FT_ALL = "ft_all"
FT_BN = "ft_bn"
FT_BIAS = "ft_bias"
FT_LAST = "ft_last"
FT_KBLKS = "ft_kblks"
MOBILETL_KBLKS = "mobiletl_kblks"

PRESETS = (FT_ALL, FT_BN, FT_BIAS, FT_LAST, FT_KBLKS, MOBILETL_KBLKS)


@dataclass
class TrainPolicy:
    preset: str = FT_ALL
    k_blocks: int = 0
    act_backward: ActBackwardMode = ActBackwardMode.Exact
    quantize_frozen: bool = False
    train_head: bool = True

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise PolicyError(f"unknown preset {self.preset!r}")
        if self.k_blocks < 0:
            raise PolicyError("k_blocks must be >= 0")
        if self.preset == MOBILETL_KBLKS:
            # the memory-saving recipe always uses the sign-indicator
            # activation backward and an int8 frozen bottom
            self.act_backward = ActBackwardMode.ApproxSigned
            self.quantize_frozen = True

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainPolicy":
        act = doc.get("act_backward", "exact")
        return cls(preset=doc.get("preset", FT_ALL),
                   k_blocks=int(doc.get("k_blocks", 0)),
                   act_backward=(ActBackwardMode.ApproxSigned
                                 if act in ("approx", "approx_signed")
                                 else ActBackwardMode.Exact),
                   quantize_frozen=bool(doc.get("quantize_frozen", False)),
                   train_head=bool(doc.get("train_head", True)))


def load_policy(path: str) -> TrainPolicy:
    with open(path) as f:
        return TrainPolicy.from_dict(json.load(f))


@dataclass
class QuantizedTensor:
    values: np.ndarray  # int8
    scale: float

    def dequant(self) -> np.ndarray:
        return self.values.astype(np.float32) * np.float32(self.scale)


def quantize_per_tensor_i8(t: np.ndarray) -> QuantizedTensor:
    """Symmetric per-tensor int8: scale = max|t|/127, q = round(t/scale)."""
    if not np.all(np.isfinite(t)):
        raise ValueError("cannot quantize non-finite tensor")
    amax = float(np.abs(t).max()) if t.size else 0.0
    scale = amax / 127.0 if amax > 0 else 1.0
    q = np.clip(np.round(t / scale), -127, 127).astype(np.int8)
    return QuantizedTensor(q, scale)


def trainable_block_count(policy: TrainPolicy, n_blocks: int) -> int:
    if policy.preset in (FT_ALL, FT_BN, FT_BIAS):
        return n_blocks
    if policy.preset == FT_LAST:
        return 0
    if policy.k_blocks > n_blocks:
        raise PolicyError(
            f"k_blocks {policy.k_blocks} exceeds block count {n_blocks}")
    return policy.k_blocks


def apply_policy(model: Model, policy: TrainPolicy) -> Model:
    """Set frozen/trainable flags and per-layer modes in place; returns model."""
    n = len(model.blocks)
    k = trainable_block_count(policy, n)
    split = n - k
    for bi, block in enumerate(model.blocks):
        if bi < split:
            _freeze_block(block, policy.quantize_frozen)
            continue
        block.frozen = False
        _configure_trainable_block(block, policy)
    if model.head:
        model.head.frozen = not policy.train_head
        for layer in model.head.layers:
            if isinstance(layer, Linear):
                layer.trainable = policy.train_head
    return model


def _freeze_block(block, quantize: bool) -> None:
    block.frozen = True
    for layer in block.layers:
        if isinstance(layer, Conv2d):
            layer.trainable = False
            if quantize:
                q = quantize_per_tensor_i8(layer.weight)
                layer.qweight, layer.qscale = q.values, q.scale
        elif isinstance(layer, BatchNorm):
            layer.mode = BNMode.Frozen
        elif isinstance(layer, SEBlock):
            layer.trainable = False
            if quantize:
                for attr in ("w1", "w2"):
                    q = quantize_per_tensor_i8(getattr(layer, attr))
                    setattr(layer, attr, q.dequant())


def _configure_trainable_block(block, policy: TrainPolicy) -> None:
    bns = [l for l in block.layers if isinstance(l, BatchNorm)]
    final_bn = bns[-1] if bns else None
    for layer in block.layers:
        if isinstance(layer, Conv2d):
            layer.trainable = policy.preset in (FT_ALL, FT_KBLKS, MOBILETL_KBLKS)
            layer.qweight = None
        elif isinstance(layer, BatchNorm):
            if policy.preset == FT_BIAS:
                layer.mode = BNMode.ShiftOnly
            elif policy.preset == MOBILETL_KBLKS:
                layer.mode = (BNMode.Full if layer is final_bn
                              else BNMode.ShiftOnly)
            else:  # FT_ALL / FT_BN / FT_KBLKS train BN fully
                layer.mode = BNMode.Full
        elif isinstance(layer, (ReLU6, HardSwish)):
            layer.mode = policy.act_backward
        elif isinstance(layer, SEBlock):
            layer.trainable = policy.preset in (FT_ALL, FT_KBLKS, MOBILETL_KBLKS)


def policy_trainable_param_count(model: Model, policy: TrainPolicy) -> int:
    """Parameters that actually receive gradients under the policy."""
    apply_policy(model, policy)
    total = 0
    for b in model.blocks:
        if b.frozen:
            continue
        for layer in b.layers:
            if isinstance(layer, BatchNorm):
                if layer.mode == BNMode.Full:
                    total += 2 * layer.channels
                elif layer.mode == BNMode.ShiftOnly:
                    total += layer.channels
            else:
                total += sum(p.size for p in layer.trainable_params().values())
    if model.head and not model.head.frozen:
        for layer in model.head.layers:
            total += sum(p.size for p in layer.trainable_params().values())
    return total
