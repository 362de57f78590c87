"""Analytical per-layer FLOPs and training-memory prediction.

FLOP conventions (documented in every report header):
  * a multiply-accumulate counts as 2 FLOPs, every other scalar op as 1
  * conv forward = 2*K^2*(Cin/g)*Cout*Ho*Wo*B; backward = forward x
    (need_grad_input + need_grad_weight)
  * per-element coefficients: BN eval fwd 2 / bwd 1(+1 shift grad), BN
    train fwd 4 / bwd 6, ReLU6 fwd 1 / bwd 1, Hard-Swish fwd 3 / bwd 4
    exact or 1 approx, Hard-Sigmoid fwd 2 / bwd 2, residual add fwd 1,
    global-pool 1 each way, softmax-CE fwd 5 / bwd 2
Memory is the exact byte total of buffers the engine registers on the
tape; the audit asserts equality against a live forward pass, per layer.
Reports use decimal MB (1e6 bytes).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .layers import ActBackwardMode
from .model import (
    CONV,
    HEAD,
    HSWISH,
    IRB_V2,
    IRB_V3,
    BlockSpec,
    ModelSpec,
    SpecError,
    build_model,
    conv_out_size,
)
from .policy import (
    FT_ALL,
    FT_BIAS,
    FT_BN,
    FT_KBLKS,
    MOBILETL_KBLKS,
    TrainPolicy,
    apply_policy,
    trainable_block_count,
)
from .tensor import Tape, tensor_rand_normal

MB = 1e6  # decimal megabyte


@dataclass
class LayerProfile:
    layer_id: str
    kind: str
    fwd_flops: int = 0
    bwd_flops: int = 0
    param_bytes: int = 0
    param_count: int = 0
    trainable_param_count: int = 0
    saved_act_bytes: int = 0
    temp_bytes: int = 0


@dataclass
class ProfileReport:
    rows: list = field(default_factory=list)
    policy_preset: str = ""
    input_shape: tuple = ()

    def total(self, attr: str) -> int:
        return sum(getattr(r, attr) for r in self.rows)

    @property
    def totals(self) -> dict:
        return {a: self.total(a) for a in
                ("fwd_flops", "bwd_flops", "param_bytes", "param_count",
                 "trainable_param_count", "saved_act_bytes", "temp_bytes")}


def _mask_bytes(elements: int, bits: int) -> int:
    return (elements * bits + 7) // 8


class _Walker:
    """Emits per-layer rows for one block list under a policy."""

    def __init__(self, policy: TrainPolicy, split: int,
                 input_requires_grad: bool):
        self.policy = policy
        self.split = split
        self.rows: list[LayerProfile] = []
        # whether the gradient of the current layer's *input* is needed
        self.need_below = False
        self.input_requires_grad = input_requires_grad

    def conv_trainable(self) -> bool:
        return self.policy.preset in (FT_ALL, FT_KBLKS, MOBILETL_KBLKS)

    def emit(self, layer_id, kind, *, fwd, bwd_if_needed, params=0,
             trainable_params=0, saved=0, temp=0, frozen=False,
             has_grads=False, quantized=False):
        row = LayerProfile(layer_id, kind)
        row.param_count = params
        row.param_bytes = params * (1 if quantized else 4)
        row.fwd_flops = int(fwd)
        if not frozen:
            row.trainable_param_count = trainable_params
            row.saved_act_bytes = int(saved)
            if self.need_below or has_grads:
                row.bwd_flops = int(bwd_if_needed)
            self.need_below = self.need_below or has_grads
        row.temp_bytes = int(temp)
        self.rows.append(row)

    # layer emitters -------------------------------------------------------

    def conv(self, layer_id, b, cin, cout, k, groups, h, w, stride, *,
             frozen, trainable):
        ho = conv_out_size(h, k, stride, k // 2)
        wo = conv_out_size(w, k, stride, k // 2)
        fwd = 2 * k * k * (cin // groups) * cout * ho * wo * b
        need_gx = self.need_below
        bwd = fwd * (int(need_gx) + int(trainable and not frozen))
        params = k * k * (cin // groups) * cout
        saved = b * cin * h * w * 4 if (trainable and not frozen) else 0
        temp = b * (cin // groups) * k * k * ho * wo * 4  # im2col scratch
        self.emit(layer_id, "conv", fwd=fwd, bwd_if_needed=bwd, params=params,
                  trainable_params=params if trainable else 0, saved=saved,
                  temp=temp, frozen=frozen, has_grads=trainable and not frozen,
                  quantized=frozen and self.policy.quantize_frozen)
        return ho, wo

    def bn(self, layer_id, b, c, h, w, mode, *, frozen):
        n = b * c * h * w
        if frozen or mode == "frozen":
            self.emit(layer_id, "bn", fwd=2 * n, bwd_if_needed=n,
                      params=2 * c, frozen=frozen)
            return
        if mode == "full":
            # training-mode normalization; saves x-hat plus per-channel sigma
            self.emit(layer_id, "bn", fwd=4 * n, bwd_if_needed=6 * n,
                      params=2 * c, trainable_params=2 * c,
                      saved=n * 4 + c * 4, has_grads=True)
        else:  # shift-only: eval-mode stats, trains beta, stores nothing
            self.emit(layer_id, "bn", fwd=2 * n, bwd_if_needed=2 * n,
                      params=2 * c, trainable_params=c,
                      saved=0, has_grads=True)

    def act(self, layer_id, act, b, c, h, w, mode, *, frozen):
        n = b * c * h * w
        if act == HSWISH:
            fwd = 3 * n
            if mode == "approx":
                bwd, saved = n, _mask_bytes(n, 1)
            else:
                bwd, saved = 4 * n, n * 4
            kind = "hswish"
        else:
            fwd = n
            bwd = n
            saved = _mask_bytes(n, 1 if mode == "approx" else 2)
            kind = "relu6"
        if frozen:
            saved = 0
        self.emit(layer_id, kind, fwd=fwd, bwd_if_needed=bwd, saved=saved,
                  frozen=frozen)

    def se(self, layer_id, b, c, ratio, h, w, *, frozen, trainable):
        n = b * c * h * w
        cr = c // ratio
        fc = 2 * c * cr * b + cr * b + 2 * cr * c * b + c * b  # fc1 + fc2
        fwd = n + fc + cr * b + 2 * c * b + n  # gap, fcs, relu, hsig, gating
        bwd = 3 * n + (2 if trainable else 1) * fc + cr * b + 2 * c * b + n
        params = c * cr + cr + cr * c + c
        saved = 0
        if not frozen:
            saved = (n * 4                    # input map for the gating grad
                     + b * c * 4              # pooled vector
                     + b * cr * 4             # relu output
                     + _mask_bytes(b * cr, 1)  # relu mask
                     + _mask_bytes(b * c, 2)   # hard-sigmoid mask
                     + b * c * 4)             # gate vector
        self.emit(layer_id, "se", fwd=fwd, bwd_if_needed=bwd, params=params,
                  trainable_params=params if trainable else 0, saved=saved,
                  frozen=frozen, has_grads=trainable and not frozen)

    def residual(self, layer_id, b, c, h, w, *, frozen):
        n = b * c * h * w
        self.emit(layer_id, "add", fwd=n, bwd_if_needed=0, frozen=frozen)

    def gap(self, layer_id, b, c, h, w, *, frozen):
        n = b * c * h * w
        self.emit(layer_id, "gap", fwd=n, bwd_if_needed=n, frozen=frozen)

    def linear(self, layer_id, b, din, dout, *, frozen, trainable):
        fwd = 2 * din * dout * b + dout * b
        bwd = fwd * (int(self.need_below) + int(trainable and not frozen))
        params = din * dout + dout
        saved = b * din * 4 if (trainable and not frozen) else 0
        self.emit(layer_id, "linear", fwd=fwd, bwd_if_needed=bwd,
                  params=params, trainable_params=params if trainable else 0,
                  saved=saved, frozen=frozen,
                  has_grads=trainable and not frozen)


def profile_model(spec: ModelSpec, policy: TrainPolicy, input_shape=None,
                  input_requires_grad: bool = True,
                  include_loss: bool = False) -> ProfileReport:
    input_shape = tuple(input_shape or spec.input_shape)
    b, c, h, w = input_shape
    n_blocks = len(spec.blocks)
    split = n_blocks - trainable_block_count(policy, n_blocks)
    walker = _Walker(policy, split, input_requires_grad)
    walker.need_below = input_requires_grad and split == 0

    for bi, bs in enumerate(spec.blocks):
        frozen = bi < split
        if frozen:
            walker.need_below = False
        p = f"b{bi}"
        if bs.kind == CONV:
            h, w = walker.conv(f"{p}.conv", b, bs.in_ch, bs.out_ch, bs.kernel,
                               1, h, w, bs.stride, frozen=frozen,
                               trainable=walker.conv_trainable())
            walker.bn(f"{p}.bn", b, bs.out_ch, h, w,
                      _bn_mode(policy, last=True), frozen=frozen)
        else:
            e = bs.exp_ch
            if bs.has_expand or e != bs.in_ch:
                walker.conv(f"{p}.expand", b, bs.in_ch, e, 1, 1, h, w, 1,
                            frozen=frozen, trainable=walker.conv_trainable())
                walker.bn(f"{p}.bn1", b, e, h, w, _bn_mode(policy, last=False),
                          frozen=frozen)
                walker.act(f"{p}.act1", bs.activation, b, e, h, w,
                           _act_mode(policy), frozen=frozen)
            h2, w2 = walker.conv(f"{p}.dw", b, e, e, bs.kernel, e, h, w,
                                 bs.stride, frozen=frozen,
                                 trainable=walker.conv_trainable())
            walker.bn(f"{p}.bn2", b, e, h2, w2, _bn_mode(policy, last=False),
                      frozen=frozen)
            walker.act(f"{p}.act2", bs.activation, b, e, h2, w2,
                       _act_mode(policy), frozen=frozen)
            if bs.kind == IRB_V3 and bs.use_se:
                walker.se(f"{p}.se", b, e, bs.se_ratio, h2, w2, frozen=frozen,
                          trainable=walker.conv_trainable())
            walker.conv(f"{p}.project", b, e, bs.out_ch, 1, 1, h2, w2, 1,
                        frozen=frozen, trainable=walker.conv_trainable())
            walker.bn(f"{p}.bn3", b, bs.out_ch, h2, w2,
                      _bn_mode(policy, last=True), frozen=frozen)
            if bs.residual:
                walker.residual(f"{p}.res", b, bs.out_ch, h2, w2, frozen=frozen)
            h, w = h2, w2
        c = bs.out_ch

    if spec.num_classes > 0:
        frozen = not policy.train_head
        hs = spec.head
        walker.gap("head.gap", b, c, h, w, frozen=frozen)
        d = c
        if hs.hidden_dim:
            walker.linear("head.fc1", b, d, hs.hidden_dim, frozen=frozen,
                          trainable=True)
            walker.act("head.act", HSWISH, b, hs.hidden_dim, 1, 1, "exact",
                       frozen=frozen)
            d = hs.hidden_dim
        walker.linear("head.fc", b, d, spec.num_classes, frozen=frozen,
                      trainable=True)
        if include_loss:
            nk = b * spec.num_classes
            walker.emit("loss", "softmax_ce", fwd=5 * nk, bwd_if_needed=2 * nk,
                        saved=nk * 4 + b * 4)

    return ProfileReport(walker.rows, policy.preset, input_shape)


def _bn_mode(policy: TrainPolicy, last: bool) -> str:
    if policy.preset == FT_BIAS:
        return "shift_only"
    if policy.preset == MOBILETL_KBLKS and not last:
        return "shift_only"
    return "full"


def _act_mode(policy: TrainPolicy) -> str:
    return "approx" if policy.act_backward == ActBackwardMode.ApproxSigned else "exact"


def profile_reduction(spec: ModelSpec, input_shape=None) -> tuple:
    """Stored-activation reduction (%) of the memory-saving policy vs FT-All."""
    if len(spec.blocks) != 1 or spec.blocks[0].kind not in (IRB_V2, IRB_V3):
        raise SpecError("reduction profile expects a single IRB block")
    base = profile_model(spec, TrainPolicy(preset=FT_ALL), input_shape)
    ours = profile_model(
        spec, TrainPolicy(preset=MOBILETL_KBLKS, k_blocks=1), input_shape)
    a = base.total("saved_act_bytes")
    m = ours.total("saved_act_bytes")
    reduction = 0.0 if a == 0 else 100.0 * (1 - m / a)
    return reduction, a, m


@dataclass
class AuditResult:
    ok: bool
    mismatches: list
    predicted_total: int
    tape_total: int


def audit_against_tape(spec: ModelSpec, policy: TrainPolicy, input_shape=None,
                       seed: int = 0) -> AuditResult:
    """Run a live forward; assert analytic bytes == tape bytes, per layer."""
    input_shape = tuple(input_shape or spec.input_shape)
    report = profile_model(spec, policy, input_shape)
    model = build_model(spec, seed)
    apply_policy(model, policy)
    x = tensor_rand_normal(input_shape, seed + 1)
    tape = Tape()
    model.forward(x.data, tape, training=True)
    actual = tape.saved_bytes_by_layer()
    predicted = {}
    for row in report.rows:
        if row.saved_act_bytes:
            predicted[row.layer_id] = (
                predicted.get(row.layer_id, 0) + row.saved_act_bytes)
    mismatches = []
    for key in sorted(set(actual) | set(predicted)):
        if actual.get(key, 0) != predicted.get(key, 0):
            mismatches.append((key, predicted.get(key, 0), actual.get(key, 0)))
    return AuditResult(not mismatches, mismatches,
                       sum(predicted.values()), tape.saved_bytes())


def compare_strategies(spec: ModelSpec, policies: list, input_shape=None,
                       names: list | None = None) -> list:
    """One summary row per policy: memory (MB), FLOPs (M), trainable params."""
    if not policies:
        raise ValueError("need at least one policy")
    rows = []
    for i, pol in enumerate(policies):
        rep = profile_model(spec, pol, input_shape)
        t = rep.totals
        rows.append({
            "policy": names[i] if names else pol.preset,
            "saved_act_mb": t["saved_act_bytes"] / MB,
            "fwd_mflops": t["fwd_flops"] / 1e6,
            "bwd_mflops": t["bwd_flops"] / 1e6,
            "total_mflops": (t["fwd_flops"] + t["bwd_flops"]) / 1e6,
            "trainable_params": t["trainable_param_count"],
        })
    return rows
