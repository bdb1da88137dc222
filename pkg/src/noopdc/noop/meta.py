from __future__ import annotations

import numpy as np

from ..ndgrad import Tensor
from ..ndgrad import functional as F
from ..ndgrad.nn import BatchNorm2d, Conv2d, Module


class _Stage(Module):
    def __init__(self, cin, cout, stride, rng, dtype):
        super().__init__()
        self.conv = Conv2d(cin, cout, stride=stride, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))


class MetaNetwork(Module):
    """Light U-Net mapping an image to a same-shape noise offset.

    Three stride-2 conv+BN+ReLU stages down, three upsample+conv+BN+ReLU
    stages back up with skip concatenation, then a zero-initialised 1x1 conv
    so the offset is exactly zero before training.
    """

    def __init__(self, in_channels: int = 1, channels=(8, 16, 32), seed: int = 0, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        c1, c2, c3 = channels
        self.channels = tuple(channels)
        self.in_channels = in_channels
        self.down1 = _Stage(in_channels, c1, 2, rng, dtype)
        self.down2 = _Stage(c1, c2, 2, rng, dtype)
        self.down3 = _Stage(c2, c3, 2, rng, dtype)
        self.up1 = _Stage(c3 + c2, c2, 1, rng, dtype)
        self.up2 = _Stage(c2 + c1, c1, 1, rng, dtype)
        self.up3 = _Stage(c1 + in_channels, c1, 1, rng, dtype)
        self.head = Conv2d(c1, in_channels, k=1, padding=0, rng=rng, dtype=dtype, zero=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError(f"MetaNetwork needs NCHW input with H, W divisible by 8, got {x.shape}")
        d1 = self.down1(x)
        d2 = self.down2(d1)
        d3 = self.down3(d2)
        u = self.up1(F.concat([F.upsample2x(d3), d2]))
        u = self.up2(F.concat([F.upsample2x(u), d1]))
        u = self.up3(F.concat([F.upsample2x(u), x]))
        return self.head(u)

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str = "meta.") -> "MetaNetwork":
        w1 = tensors[prefix + "down1.conv.weight"]
        c2 = tensors[prefix + "down2.conv.weight"].shape[0]
        c3 = tensors[prefix + "down3.conv.weight"].shape[0]
        net = cls(in_channels=w1.shape[1], channels=(w1.shape[0], c2, c3), dtype=w1.dtype)
        net.load_state_dict(tensors, prefix)
        return net
