"""Small convolutional feature extractor producing a stride-8/16/32 pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

STAGE_WIDTHS = (16, 32, 64, 64, 96)


@dataclass
class FeaturePyramid:
    """Feature maps at strides 8, 16 and 32 of the input resolution."""

    f8: T.Tensor
    f16: T.Tensor
    f32: T.Tensor

    def at_stride(self, stride: int) -> T.Tensor:
        return {8: self.f8, 16: self.f16, 32: self.f32}[stride]


class Backbone:
    """Five stages of [3x3 conv, BN, ReLU, 2x2 max-pool].

    Taps after stages 3, 4 and 5 give the stride-8/16/32 maps.  Weights are
    He-initialized from the provided seeded generator; convolutions carry no
    bias because BN follows immediately.
    """

    def __init__(self, rng: np.random.Generator, in_channels: int = 3,
                 widths: tuple = STAGE_WIDTHS):
        self.widths = tuple(widths)
        self.convs: list[T.Tensor] = []
        self.bns: list[T.BNState] = []
        c_prev = in_channels
        for c in self.widths:
            fan_in = c_prev * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c, c_prev, 3, 3))
            self.convs.append(T.Tensor(w, requires_grad=True))
            self.bns.append(T.BNState.create(c))
            c_prev = c

    @property
    def out_channels(self) -> dict[int, int]:
        return {8: self.widths[2], 16: self.widths[3], 32: self.widths[4]}

    def parameters(self) -> dict[str, T.Tensor]:
        params = {}
        for i, (w, bn) in enumerate(zip(self.convs, self.bns)):
            params[f"backbone.s{i}.conv.w"] = w
            params[f"backbone.s{i}.bn.gamma"] = bn.gamma
            params[f"backbone.s{i}.bn.beta"] = bn.beta
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        bufs = {}
        for i, bn in enumerate(self.bns):
            bufs[f"backbone.s{i}.bn.running_mean"] = bn.running_mean
            bufs[f"backbone.s{i}.bn.running_var"] = bn.running_var
        return bufs

    def extract(self, image: T.Tensor, train: bool) -> FeaturePyramid:
        """Run the stages on a 3xHxW image; H and W must be multiples of 32."""
        if image.data.ndim != 3:
            raise T.ShapeError(f"extract expects a CHW image, got {image.data.shape}")
        _, h, w = image.data.shape
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise T.ShapeError(f"image sides must be multiples of 32 and >= 32, got {h}x{w}")
        x = image
        taps = {}
        for i, (conv_w, bn) in enumerate(zip(self.convs, self.bns)):
            x = T.conv2d(x, conv_w, stride=1, pad=1)
            x = T.batch_norm(x, bn, train=train)
            x = T.relu(x)
            x = T.max_pool2d(x, 2)
            if i >= 2:
                taps[2 ** (i + 1)] = x
        return FeaturePyramid(f8=taps[8], f16=taps[16], f32=taps[32])
