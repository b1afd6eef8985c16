"""Network building blocks on top of the Tensor engine.

Parameter containers follow the usual attribute-scan pattern: anything
assigned to a module attribute that is a Tensor, a Module, or a list of
Modules is discovered in insertion order, which makes parameter
enumeration (and therefore checkpoints and optimizer slots)
deterministic.

The shared backbone is a 5-level U-Net: encoder blocks are
conv3x3/norm/ReLU followed by 2x2 average pooling with channel widths
32, 64, 128, 256, 512; decoder blocks concatenate the matching encoder
feature, apply conv/norm/ReLU, then 2x nearest upsampling, with widths
512, 256, 128, 64, 32.  Callers may splice extra per-level skip
channels into the decoder (the generator adds keypoint-difference maps
this way).
"""

from __future__ import annotations

import numpy as np

from keymotion import tensor as T
from keymotion.tensor import Tensor


class Module:
    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        out = []
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out.append((full, value))
            else:
                out.extend(value.named_parameters(full + "."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def param_bytes(self):
        """Concatenated little-endian parameter bytes, for hashing."""
        return b"".join(np.ascontiguousarray(p.data).tobytes()
                        for p in self.parameters())


def _he_std(fan_in):
    return np.sqrt(2.0 / fan_in)


def _xavier_std(fan_in):
    return np.sqrt(1.0 / fan_in)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, bias=True,
                 init="he", dtype=np.float64):
        if padding is None:
            padding = (k - 1) // 2
        self.stride = stride
        self.padding = padding
        fan_in = cin * k * k
        if init == "zero":
            w = np.zeros((cout, cin, k, k))
        else:
            std = _he_std(fan_in) if init == "he" else _xavier_std(fan_in)
            w = rng.normal(0.0, std, size=(cout, cin, k, k))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Norm2d(Module):
    def __init__(self, c, mode="auto", dtype=np.float64):
        self.mode = mode
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.norm2d(x, self.gamma, self.beta, self.mode)


class ConvNormRelu(Module):
    """conv3x3 (no bias) -> norm -> ReLU."""

    def __init__(self, cin, cout, rng, dtype=np.float64):
        self.conv = Conv2d(cin, cout, 3, rng, bias=False, dtype=dtype)
        self.norm = Norm2d(cout, dtype=dtype)

    def __call__(self, x):
        return T.relu(self.norm(self.conv(x)))


class EncoderBlock(Module):
    def __init__(self, cin, cout, rng, dtype=np.float64):
        self.body = ConvNormRelu(cin, cout, rng, dtype)

    def __call__(self, x):
        return T.avg_pool2d(self.body(x), 2)


class DecoderBlock(Module):
    def __init__(self, cin, cout, rng, dtype=np.float64):
        self.body = ConvNormRelu(cin, cout, rng, dtype)

    def __call__(self, x):
        return T.upsample_nearest(self.body(x), 2)


class UNet(Module):
    """Encoder/decoder pair with externally managed skip concatenation.

    encode() returns the per-level features [f_1 .. f_depth] (finest to
    coarsest, each after pooling).  decode() walks back up, optionally
    concatenating caller-provided extra tensors at each level; the
    caller may also hand in modified (e.g. warped) encoder features.
    The decoded output has `base` channels at input resolution.
    """

    def __init__(self, in_ch, rng, base=32, depth=5, extra_skip=0,
                 dtype=np.float64):
        self.depth = depth
        self.base = base
        enc_chs = [base * 2 ** i for i in range(depth)]
        self.enc_chs = enc_chs
        self.enc = []
        c = in_ch
        for cout in enc_chs:
            self.enc.append(EncoderBlock(c, cout, rng, dtype))
            c = cout
        if isinstance(extra_skip, int):
            extra_skip = [extra_skip] * depth
        self.extra_skip = list(extra_skip)
        self.dec = []
        prev = 0
        for i in range(depth):
            level = depth - 1 - i  # level whose resolution this block works at
            cin = prev + enc_chs[level] + self.extra_skip[level]
            cout = base * 2 ** level
            self.dec.append(DecoderBlock(cin, cout, rng, dtype))
            prev = cout

    def encode(self, x):
        feats = []
        h = x
        for blk in self.enc:
            h = blk(h)
            feats.append(h)
        return feats

    def decode(self, feats, extras=None):
        h = None
        for i, blk in enumerate(self.dec):
            level = self.depth - 1 - i
            parts = [] if h is None else [h]
            parts.append(feats[level])
            if extras is not None and extras[level] is not None:
                parts.append(extras[level])
            h = blk(T.concat(parts, axis=1) if len(parts) > 1 else parts[0])
        return h

    def __call__(self, x, extras=None):
        return self.decode(self.encode(x), extras)


class ResidualBlock(Module):
    """Two conv/norm/ReLU units with an identity shortcut."""

    def __init__(self, c, rng, dtype=np.float64):
        self.a = ConvNormRelu(c, c, rng, dtype)
        self.b = ConvNormRelu(c, c, rng, dtype)

    def __call__(self, x):
        return x + self.b(self.a(x))
