"""Layer forward/backward kernels and their save-for-backward rules.

Every layer declares exactly which buffers it registers on the tape under
each training mode; the profiler mirrors these rules analytically and the
audit asserts the two never drift apart.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .tensor import (
    SavedKind,
    ShapeError,
    StateError,
    Tape,
    Tensor,
    pack_mask1,
    pack_mask2,
    wrap,
)


class BNMode(Enum):
    Full = "full"
    ShiftOnly = "shift_only"
    Frozen = "frozen"


class ActBackwardMode(Enum):
    Exact = "exact"
    ApproxSigned = "approx"


# ---------------------------------------------------------------------------
# convolution kernels


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(f"conv output size {out} < 1")
    return out


def _patches(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Sliding windows of x [B,C,H,W] -> [B,C,Ho,Wo,K,K]."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, weight: np.ndarray, groups: int, stride: int,
                   padding: int) -> np.ndarray:
    b, cin, h, w = x.shape
    cout, cin_g, k, _ = weight.shape
    if cin % groups or cout % groups or cin // groups != cin_g:
        raise ShapeError(
            f"channel/group mismatch: Cin={cin} Cout={cout} groups={groups}")
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(w, k, stride, padding)
    pat = _patches(x, k, stride, padding)  # [B,Cin,Ho,Wo,K,K]
    pat = pat.reshape(b, groups, cin_g, ho, wo, k, k)
    wg = weight.reshape(groups, cout // groups, cin_g, k, k)
    out = np.einsum("bgihwkl,goikl->bgohw", pat, wg, optimize=True)
    return np.ascontiguousarray(out.reshape(b, cout, ho, wo))


def _pad_or_crop(arr: np.ndarray, top: int, bottom: int, left: int,
                 right: int) -> np.ndarray:
    """Spatially pad (positive amounts) or crop (negative) the last two axes."""
    if top < 0:
        arr, top = arr[:, :, -top:, :], 0
    if bottom < 0:
        arr, bottom = arr[:, :, :bottom, :], 0
    if left < 0:
        arr, left = arr[:, :, :, -left:], 0
    if right < 0:
        arr, right = arr[:, :, :, :right], 0
    if top or bottom or left or right:
        arr = np.pad(arr, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return arr


def conv2d_backward(grad_y: np.ndarray, x: np.ndarray | None, weight: np.ndarray,
                    groups: int, stride: int, padding: int, need_grad_w: bool,
                    in_hw: tuple[int, int] | None = None):
    """Returns (grad_x, grad_w or None); x may be None when need_grad_w is False.

    `in_hw` is the true input spatial size; without it the size inferred from
    the output shape is used, which undercounts when the conv discards rows at
    the bottom/right edge (stride that does not divide h + 2p - k evenly).
    """
    if need_grad_w and x is None:
        raise StateError("weight gradient requested but input was not saved")
    b, cout, ho, wo = grad_y.shape
    cout_w, cin_g, k, _ = weight.shape
    cin = cin_g * groups

    grad_w = None
    if need_grad_w:
        pat = _patches(x, k, stride, padding).reshape(
            b, groups, cin_g, ho, wo, k, k)
        gy = grad_y.reshape(b, groups, cout // groups, ho, wo)
        grad_w = np.einsum("bgihwkl,bgohw->goikl", pat, gy, optimize=True)
        grad_w = grad_w.reshape(cout, cin_g, k, k)

    # grad_x: dilate grad_y by stride, pad by k-1-padding, correlate with
    # the spatially flipped weight with in/out channels swapped per group.
    if in_hw is None:
        in_hw = ((ho - 1) * stride + k - 2 * padding,
                 (wo - 1) * stride + k - 2 * padding)
    h_in, w_in = in_hw
    dil = np.zeros((b, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1),
                   dtype=grad_y.dtype)
    dil[:, :, ::stride, ::stride] = grad_y
    wf = weight[:, :, ::-1, ::-1].reshape(groups, cout // groups, cin_g, k, k)
    wt = wf.transpose(0, 2, 1, 3, 4)  # [g, Cin/g, Cout/g, K, K]
    # bottom/right get extra padding equal to the rows the forward discarded
    # when the stride did not divide h + 2p - k evenly
    pad = k - 1 - padding
    rem_h = h_in + 2 * padding - k - (ho - 1) * stride
    rem_w = w_in + 2 * padding - k - (wo - 1) * stride
    dil = _pad_or_crop(dil, pad, pad + rem_h, pad, pad + rem_w)
    pat = _patches(dil, k, 1, 0)
    pat = pat.reshape(b, groups, cout // groups, pat.shape[2], pat.shape[3], k, k)
    gx = np.einsum("bgohwkl,giokl->bgihw", pat, wt, optimize=True)
    gx = gx.reshape(b, cin, h_in, w_in)
    return np.ascontiguousarray(gx), grad_w


# ---------------------------------------------------------------------------
# activation math


def relu6(a: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(a, 0), 6)


def hardswish(a: np.ndarray) -> np.ndarray:
    return a * relu6(a + 3) / 6


def hardsigmoid(a: np.ndarray) -> np.ndarray:
    return relu6(a + 3) / 6


# ---------------------------------------------------------------------------
# layer classes


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name

    def params(self) -> dict:
        return {}

    def trainable_params(self) -> dict:
        return {}

    def forward(self, x: Tensor, tape: Tape | None, training: bool) -> Tensor:
        raise NotImplementedError


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, name: str, weight: np.ndarray, groups: int = 1,
                 stride: int = 1, padding: int = 0, trainable: bool = True):
        super().__init__(name)
        self.weight = weight
        self.groups = groups
        self.stride = stride
        self.padding = padding
        self.trainable = trainable
        self.qweight = None   # int8 buffer when freeze-quantized
        self.qscale = 1.0

    def params(self):
        return {f"{self.name}.weight": self.weight}

    def trainable_params(self):
        return self.params() if self.trainable else {}

    def effective_weight(self, dtype) -> np.ndarray:
        if self.qweight is not None:
            return self.qweight.astype(dtype) * np.asarray(self.qscale, dtype=dtype)
        return self.weight.astype(dtype, copy=False)

    def forward(self, x: Tensor, tape: Tape | None, training: bool) -> Tensor:
        w = self.effective_weight(x.data.dtype)
        y = conv2d_forward(x.data, w, self.groups, self.stride, self.padding)
        if tape is not None:
            saved_x = None
            if self.trainable:
                tape.save(x, SavedKind.FullMap, self.name)
                saved_x = x.data

            in_hw = x.data.shape[2:]

            def backward(grad_y, grads, _x=saved_x, _w=w, _hw=in_hw):
                gx, gw = conv2d_backward(grad_y, _x, _w, self.groups,
                                         self.stride, self.padding,
                                         self.trainable, in_hw=_hw)
                if gw is not None:
                    key = f"{self.name}.weight"
                    grads[key] = grads.get(key, 0) + gw
                return gx

            tape.record("conv2d", self.name, backward)
        return wrap(y)


class BatchNorm(Layer):
    kind = "bn"

    def __init__(self, name: str, channels: int, mode: BNMode = BNMode.Full,
                 eps: float = 1e-5, momentum: float = 0.1):
        super().__init__(name)
        if eps <= 0:
            raise ValueError("eps must be > 0")
        self.channels = channels
        self.mode = mode
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels, dtype=np.float32)
        self.beta = np.zeros(channels, dtype=np.float32)
        self.mu = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def buffers(self):
        return {f"{self.name}.mu": self.mu, f"{self.name}.var": self.var}

    def trainable_params(self):
        if self.mode == BNMode.Full:
            return self.params()
        if self.mode == BNMode.ShiftOnly:
            return {f"{self.name}.beta": self.beta}
        return {}

    def forward(self, x: Tensor, tape: Tape | None, training: bool) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(
                f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        dt = x.data.dtype
        g = self.gamma.astype(dt)[None, :, None, None]
        b = self.beta.astype(dt)[None, :, None, None]

        if self.mode == BNMode.Full and training:
            mean = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            sigma = np.sqrt(var + self.eps)
            xhat = (x.data - mean[None, :, None, None]) / sigma[None, :, None, None]
            y = g * xhat + b
            m = self.momentum
            self.mu[:] = (1 - m) * self.mu + m * mean.astype(np.float32)
            self.var[:] = (1 - m) * self.var + m * var.astype(np.float32)
            if tape is not None:
                xhat_t = wrap(xhat)
                sigma_t = wrap(np.ascontiguousarray(sigma))
                tape.save(xhat_t, SavedKind.FullMap, self.name)
                tape.save(sigma_t, SavedKind.NormStats, self.name)

                def backward(grad_y, grads, _xhat=xhat, _sigma=sigma):
                    gb = grad_y.sum(axis=(0, 2, 3))
                    gg = (grad_y * _xhat).sum(axis=(0, 2, 3))
                    key = self.name
                    grads[f"{key}.beta"] = grads.get(f"{key}.beta", 0) + gb
                    grads[f"{key}.gamma"] = grads.get(f"{key}.gamma", 0) + gg
                    gxh = grad_y * g
                    gx = (gxh - gxh.mean(axis=(0, 2, 3), keepdims=True)
                          - _xhat * (gxh * _xhat).mean(axis=(0, 2, 3), keepdims=True))
                    return gx / _sigma[None, :, None, None]

                tape.record("bn_full", self.name, backward)
            return wrap(y)

        # eval-mode normalization with running stats; saves nothing
        sigma = np.sqrt(self.var.astype(dt) + dt.type(self.eps))
        scale = (self.gamma.astype(dt) / sigma)[None, :, None, None]
        y = scale * (x.data - self.mu.astype(dt)[None, :, None, None]) + b
        if tape is not None:
            mode = self.mode

            def backward(grad_y, grads, _scale=scale):
                if mode == BNMode.ShiftOnly:
                    gb = grad_y.sum(axis=(0, 2, 3))
                    key = f"{self.name}.beta"
                    grads[key] = grads.get(key, 0) + gb
                return grad_y * _scale

            tape.record("bn_eval", self.name, backward)
        return wrap(y)


class ReLU6(Layer):
    kind = "relu6"

    def __init__(self, name: str, mode: ActBackwardMode = ActBackwardMode.Exact):
        super().__init__(name)
        self.mode = mode

    def forward(self, a: Tensor, tape: Tape | None, training: bool) -> Tensor:
        y = relu6(a.data)
        if tape is not None:
            if self.mode == ActBackwardMode.Exact:
                codes = np.where(a.data < 0, 0, np.where(a.data > 6, 2, 1))
                mask = pack_mask2(codes, a.shape)
                tape.save(mask, SavedKind.Mask2, self.name)

                def backward(grad_y, grads, _m=mask):
                    ind = (_m.unpack() == 1).astype(grad_y.dtype)
                    return grad_y * ind
            else:
                mask = pack_mask1(a.data >= 0, a.shape)
                tape.save(mask, SavedKind.Mask1, self.name)

                def backward(grad_y, grads, _m=mask):
                    return grad_y * _m.unpack().astype(grad_y.dtype)

            tape.record("relu6", self.name, backward)
        return wrap(y)


class HardSwish(Layer):
    kind = "hswish"

    def __init__(self, name: str, mode: ActBackwardMode = ActBackwardMode.Exact):
        super().__init__(name)
        self.mode = mode

    def forward(self, a: Tensor, tape: Tape | None, training: bool) -> Tensor:
        y = hardswish(a.data)
        if tape is not None:
            if self.mode == ActBackwardMode.Exact:
                tape.save(a, SavedKind.FullMap, self.name)

                def backward(grad_y, grads, _a=a.data):
                    inner = np.abs(_a) <= 3
                    d = relu6(_a + 3) / 6 + _a * inner.astype(grad_y.dtype) / 6
                    return grad_y * d
            else:
                mask = pack_mask1(a.data >= 0, a.shape)
                tape.save(mask, SavedKind.Mask1, self.name)

                def backward(grad_y, grads, _m=mask):
                    return grad_y * _m.unpack().astype(grad_y.dtype)

            tape.record("hswish", self.name, backward)
        return wrap(y)


class HardSigmoid(Layer):
    kind = "hsigmoid"

    def forward(self, a: Tensor, tape: Tape | None, training: bool) -> Tensor:
        y = hardsigmoid(a.data)
        if tape is not None:
            codes = (np.abs(a.data) <= 3).astype(np.uint8)
            mask = pack_mask2(codes, a.shape)
            tape.save(mask, SavedKind.Mask2, self.name)

            def backward(grad_y, grads, _m=mask):
                ind = (_m.unpack() == 1).astype(grad_y.dtype)
                return grad_y * ind / 6

            tape.record("hsigmoid", self.name, backward)
        return wrap(y)


class SEBlock(Layer):
    """Squeeze-and-excitation gate: x * hardsigmoid(fc2(relu(fc1(gap(x)))))."""

    kind = "se"

    def __init__(self, name: str, channels: int, ratio: int = 4,
                 rng: np.random.Generator | None = None, trainable: bool = True):
        super().__init__(name)
        if channels % ratio:
            raise ShapeError(f"channels {channels} not divisible by ratio {ratio}")
        self.channels = channels
        self.ratio = ratio
        self.trainable = trainable
        cr = channels // ratio
        rng = rng or np.random.default_rng(0)
        self.w1 = (rng.standard_normal((cr, channels)) *
                   np.sqrt(2.0 / channels)).astype(np.float32)
        self.b1 = np.zeros(cr, dtype=np.float32)
        self.w2 = (rng.standard_normal((channels, cr)) *
                   np.sqrt(2.0 / cr)).astype(np.float32)
        self.b2 = np.zeros(channels, dtype=np.float32)

    def params(self):
        return {f"{self.name}.w1": self.w1, f"{self.name}.b1": self.b1,
                f"{self.name}.w2": self.w2, f"{self.name}.b2": self.b2}

    def trainable_params(self):
        return self.params() if self.trainable else {}

    def forward(self, x: Tensor, tape: Tape | None, training: bool) -> Tensor:
        dt = x.data.dtype
        b, c, h, w = x.shape
        w1, b1 = self.w1.astype(dt), self.b1.astype(dt)
        w2, b2 = self.w2.astype(dt), self.b2.astype(dt)
        pooled = x.data.mean(axis=(2, 3))            # [B,C]
        z1 = pooled @ w1.T + b1                       # [B,Cr]
        r = np.maximum(z1, 0)
        z2 = r @ w2.T + b2                            # [B,C]
        gate = hardsigmoid(z2)
        y = x.data * gate[:, :, None, None]
        if tape is not None:
            pooled_t, r_t, gate_t = wrap(pooled), wrap(r), wrap(gate)
            relu_mask = pack_mask1(z1 > 0, z1.shape)
            hsig_mask = pack_mask2((np.abs(z2) <= 3).astype(np.uint8), z2.shape)
            tape.save(x, SavedKind.FullMap, self.name)
            tape.save(pooled_t, SavedKind.SmallVector, self.name)
            tape.save(r_t, SavedKind.SmallVector, self.name)
            tape.save(relu_mask, SavedKind.Mask1, self.name)
            tape.save(hsig_mask, SavedKind.Mask2, self.name)
            tape.save(gate_t, SavedKind.SmallVector, self.name)

            def backward(grad_y, grads):
                gx_direct = grad_y * gate[:, :, None, None]
                g_gate = (grad_y * x.data).sum(axis=(2, 3))       # [B,C]
                g_z2 = g_gate * (hsig_mask.unpack() == 1) / 6
                g_r = g_z2 @ w2
                g_z1 = g_r * relu_mask.unpack()
                g_pooled = g_z1 @ w1
                gx_pool = np.broadcast_to(
                    g_pooled[:, :, None, None] / (h * w), x.data.shape)
                if self.trainable:
                    p = self.name
                    grads[f"{p}.w2"] = grads.get(f"{p}.w2", 0) + g_z2.T @ r
                    grads[f"{p}.b2"] = grads.get(f"{p}.b2", 0) + g_z2.sum(axis=0)
                    grads[f"{p}.w1"] = grads.get(f"{p}.w1", 0) + g_z1.T @ pooled
                    grads[f"{p}.b1"] = grads.get(f"{p}.b1", 0) + g_z1.sum(axis=0)
                return gx_direct + gx_pool

            tape.record("se", self.name, backward)
        return wrap(y)


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x: Tensor, tape: Tape | None, training: bool) -> Tensor:
        b, c, h, w = x.shape
        y = x.data.mean(axis=(2, 3))
        if tape is not None:

            def backward(grad_y, grads):
                return np.broadcast_to(
                    grad_y[:, :, None, None] / (h * w), (b, c, h, w)).copy()

            tape.record("gap", self.name, backward)
        return wrap(np.ascontiguousarray(y))


class Linear(Layer):
    kind = "linear"

    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray,
                 trainable: bool = True):
        super().__init__(name)
        self.weight = weight  # [out, in]
        self.bias = bias
        self.trainable = trainable

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def trainable_params(self):
        return self.params() if self.trainable else {}

    def forward(self, x: Tensor, tape: Tape | None, training: bool) -> Tensor:
        dt = x.data.dtype
        w, b = self.weight.astype(dt), self.bias.astype(dt)
        y = x.data @ w.T + b
        if tape is not None:
            saved = None
            if self.trainable:
                tape.save(x, SavedKind.SmallVector, self.name)
                saved = x.data

            def backward(grad_y, grads, _x=saved):
                if self.trainable:
                    grads[f"{self.name}.weight"] = (
                        grads.get(f"{self.name}.weight", 0) + grad_y.T @ _x)
                    grads[f"{self.name}.bias"] = (
                        grads.get(f"{self.name}.bias", 0) + grad_y.sum(axis=0))
                return grad_y @ w

            tape.record("linear", self.name, backward)
        return wrap(y)


def residual_add(x: Tensor, y: Tensor) -> Tensor:
    """Skip-connection add; saves nothing (grad passes through unchanged)."""
    if x.shape != y.shape:
        raise ShapeError(f"residual shape mismatch {x.shape} vs {y.shape}")
    return wrap(x.data + y.data)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          tape: Tape | None = None,
                          layer_id: str = "loss") -> Tensor:
    """Mean cross-entropy over the batch; saves probs (and labels) for backward."""
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    loss = -np.log(probs[np.arange(b), labels] + 1e-30).mean()
    out = wrap(np.asarray([loss], dtype=logits.data.dtype))
    if tape is not None:
        probs_t = wrap(probs)
        labels_t = wrap(labels.astype(np.float32))
        tape.save(probs_t, SavedKind.SmallVector, layer_id)
        tape.save(labels_t, SavedKind.SmallVector, layer_id)

        def backward(grad_y, grads):
            g = probs.copy()
            g[np.arange(b), labels] -= 1
            return g * float(np.asarray(grad_y).ravel()[0]) / b

        tape.record("softmax_ce", layer_id, backward)
    return out
