"""Layer blocks: the SharpSepConv block and the searchable primitive catalog.

Every primitive maps spatial size H to ceil(H/stride) and emits the
requested channel count, so mixed-operation sums always conform.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    Tensor,
    avg_pool3x3,
    batchnorm2d,
    concat_channels,
    conv2d,
    global_avg_pool,
    linear,
    max_pool3x3,
    relu,
    shift_up_left,
)

__all__ = [
    "Module",
    "Sequential",
    "Conv2d",
    "BatchNorm2d",
    "ReLU",
    "Identity",
    "Zero",
    "MaxPool3x3",
    "AvgPool3x3",
    "GlobalAvgPool",
    "Linear",
    "ReLUConvBN",
    "FactorizedReduce",
    "SharpSepConv",
    "PRIMITIVES",
    "CONV_PRIMITIVES",
    "build_primitive",
    "param_count",
    "resolve_c_mid",
]


class Module:
    """Minimal layer container: tracks parameters and train/eval mode."""

    def __init__(self):
        self.training = True

    def _children(self):
        for v in self.__dict__.values():
            if isinstance(v, Module):
                yield v
            elif isinstance(v, (list, tuple)):
                for m in v:
                    if isinstance(m, Module):
                        yield m
            elif isinstance(v, dict):
                for m in v.values():
                    if isinstance(m, Module):
                        yield m

    def parameters(self) -> list[Tensor]:
        out = []
        for v in self.__dict__.values():
            if isinstance(v, Tensor) and v.requires_grad:
                out.append(v)
        for child in self._children():
            out.extend(child.parameters())
        return out

    def train(self, flag: bool = True):
        self.training = flag
        for child in self._children():
            child.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param_count(module: Module) -> int:
    """Exact number of trainable scalars in a layer or network."""
    return int(sum(p.size for p in module.parameters()))


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Conv2d(Module):
    """Bias-free convolution; weights use He-normal initialization."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, dilation=1,
                 groups=1):
        super().__init__()
        fan_in = (c_in // groups) * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(
            rng.standard_normal((c_out, c_in // groups, kernel, kernel)) * std,
            requires_grad=True,
        )
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def forward(self, x):
        return conv2d(x, self.weight, stride=self.stride, padding=self.padding,
                      dilation=self.dilation, groups=self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, affine=True, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels = channels
        if affine:
            self.gamma = Tensor(np.ones(channels), requires_grad=True)
            self.beta = Tensor(np.zeros(channels), requires_grad=True)
        else:
            self.gamma = None
            self.beta = None
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                           self.running_var, training=self.training,
                           momentum=self.momentum, eps=self.eps)


class ReLU(Module):
    def forward(self, x):
        return relu(x)


class Identity(Module):
    def forward(self, x):
        return x


class Zero(Module):
    """The `none` primitive: a zero map with the strided output shape."""

    def __init__(self, stride=1, out_channels=None):
        super().__init__()
        self.stride = stride
        self.out_channels = out_channels

    def forward(self, x):
        b, c, h, w = x.shape
        co = self.out_channels if self.out_channels is not None else c
        s = self.stride
        return Tensor(np.zeros((b, co, -(-h // s), -(-w // s))))


class MaxPool3x3(Module):
    def __init__(self, stride=1):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        return max_pool3x3(x, self.stride)


class AvgPool3x3(Module):
    def __init__(self, stride=1):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        return avg_pool3x3(x, self.stride)


class GlobalAvgPool(Module):
    def forward(self, x):
        return global_avg_pool(x)


class Linear(Module):
    def __init__(self, in_features, out_features, rng):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_features, in_features)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class ReLUConvBN(Module):
    def __init__(self, c_in, c_out, kernel, stride, padding, rng, dilation=1,
                 affine=True):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel, rng, stride=stride, padding=padding,
                           dilation=dilation)
        self.bn = BatchNorm2d(c_out, affine=affine)

    def forward(self, x):
        return self.bn(self.conv(relu(x)))


class FactorizedReduce(Module):
    """Stride-2 projection: two offset 1x1 convolutions concatenated, then BN."""

    def __init__(self, c_in, c_out, rng, affine=True):
        super().__init__()
        if c_out < 2:
            raise ValueError(f"factorized reduce needs at least 2 output channels, got {c_out}")
        self.conv_a = Conv2d(c_in, c_out // 2, 1, rng, stride=2)
        self.conv_b = Conv2d(c_in, c_out - c_out // 2, 1, rng, stride=2)
        self.bn = BatchNorm2d(c_out, affine=affine)

    def forward(self, x):
        h = relu(x)
        out = concat_channels([self.conv_a(h), self.conv_b(shift_up_left(h))])
        return self.bn(out)


def resolve_c_mid(c_out: int, c_mid, c_mid_mult) -> int:
    """Middle width: the absolute count when given, else round-half-up of
    c_out times the multiplier."""
    if c_mid is not None and c_mid_mult is not None:
        raise ValueError("give either c_mid or c_mid_mult, not both")
    if c_mid is not None:
        resolved = int(c_mid)
    else:
        mult = 1.0 if c_mid_mult is None else float(c_mid_mult)
        resolved = int(np.floor(c_out * mult + 0.5))
    if resolved < 1:
        raise ValueError(f"resolved middle width must be >= 1, got {resolved}")
    return resolved


class SharpSepConv(Module):
    """Two depthwise-separable convolutions plus two 1x1 bottlenecks.

    The stride is applied exactly once, on the first depthwise convolution;
    the dilation lands on the second. The middle width is either an absolute
    channel count or proportional to ``c_out``:

        relu -> dw kxk (stride s)  -> 1x1 c_in->c_mid   -> bn
        relu -> 1x1 c_mid->c_mid                        -> bn
        relu -> dw kxk (dilated)   -> 1x1 c_mid->c_out  -> bn
        relu -> 1x1 c_out->c_out                        -> bn
    """

    def __init__(self, c_in, c_out, rng, kernel=3, stride=1, dilation=1,
                 c_mid=None, c_mid_mult=None):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError(f"kernel must be odd for same padding, got {kernel}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        self.c_mid = resolve_c_mid(c_out, c_mid, c_mid_mult)
        cm = self.c_mid
        self.dw1 = Conv2d(c_in, c_in, kernel, rng, stride=stride,
                          padding=(kernel - 1) // 2, groups=c_in)
        self.pw1 = Conv2d(c_in, cm, 1, rng)
        self.bn1 = BatchNorm2d(cm)
        self.bottleneck1 = Conv2d(cm, cm, 1, rng)
        self.bn2 = BatchNorm2d(cm)
        self.dw2 = Conv2d(cm, cm, kernel, rng, stride=1,
                          padding=dilation * (kernel - 1) // 2, dilation=dilation,
                          groups=cm)
        self.pw2 = Conv2d(cm, c_out, 1, rng)
        self.bn3 = BatchNorm2d(c_out)
        self.bottleneck2 = Conv2d(c_out, c_out, 1, rng)
        self.bn4 = BatchNorm2d(c_out)

    def forward(self, x):
        h = self.bn1(self.pw1(self.dw1(relu(x))))
        h = self.bn2(self.bottleneck1(relu(h)))
        h = self.bn3(self.pw2(self.dw2(relu(h))))
        return self.bn4(self.bottleneck2(relu(h)))


# ---------------------------------------------------------------------------
# the searchable primitive catalog
# ---------------------------------------------------------------------------

PRIMITIVES = (
    "none",
    "avg_pool_3x3",
    "max_pool_3x3",
    "skip_connect",
    "sep_conv_3x3",
    "dil_conv_3x3",
    "flood_conv_3x3",
    "dil_flood_conv_3x3",
    "choke_conv_3x3",
    "dil_choke_conv_3x3",
)

# kernel, dilation, c_mid, c_mid_mult per convolutional catalog row.
# Stride is dictated by graph position, not by the row.
CONV_PRIMITIVES = {
    "sep_conv_3x3": (3, 1, None, 1),
    "dil_conv_3x3": (3, 2, None, 1),
    "flood_conv_3x3": (3, 1, None, 4),
    "dil_flood_conv_3x3": (3, 2, None, 4),
    "choke_conv_3x3": (3, 1, 32, None),
    "dil_choke_conv_3x3": (3, 2, 32, None),
}


def build_primitive(kind: str, channels: int, stride: int, rng) -> Module:
    """Instantiate one catalog primitive at a uniform channel count."""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    if kind == "none":
        return Zero(stride)
    if kind == "avg_pool_3x3":
        return AvgPool3x3(stride)
    if kind == "max_pool_3x3":
        return MaxPool3x3(stride)
    if kind == "skip_connect":
        if stride == 1:
            return Identity()
        return FactorizedReduce(channels, channels, rng)
    if kind in CONV_PRIMITIVES:
        kernel, dilation, c_mid, c_mid_mult = CONV_PRIMITIVES[kind]
        return SharpSepConv(channels, channels, rng, kernel=kernel, stride=stride,
                            dilation=dilation, c_mid=c_mid, c_mid_mult=c_mid_mult)
    raise ValueError(f"unknown primitive kind {kind!r}")
