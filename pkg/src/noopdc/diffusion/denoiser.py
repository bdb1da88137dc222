"""Class-conditional pixel-space U-Net noise predictor."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from ..ndgrad import Tensor, load_checkpoint, save_checkpoint
from ..ndgrad import functional as F
from ..ndgrad.nn import Conv2d, Embedding, Linear, Module

PREFIX = "denoiser."


def timestep_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features [sin(t w_i), cos(t w_i)] with geometric frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class Denoiser(Module):
    """Two-level U-Net: stride-2 downsampling, nearest upsampling, SiLU.

    The conditioning vector (time MLP output plus class embedding) is projected
    to every resolution and added per channel. The output convolution starts at
    zero so an untrained model predicts zero noise.
    """

    def __init__(self, num_classes: int, base: int = 16, emb_dim: int = 32, in_channels: int = 1,
                 seed: int = 0, dtype=np.float32):
        super().__init__()
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        rng = np.random.default_rng(seed)
        c0, c1, c2 = base, 2 * base, 4 * base
        self.num_classes = num_classes
        self.emb_dim = emb_dim
        self.in_channels = in_channels
        self.base = base
        self.time1 = Linear(emb_dim, emb_dim, rng, dtype)
        self.time2 = Linear(emb_dim, emb_dim, rng, dtype)
        self.class_emb = Embedding(num_classes, emb_dim, rng, dtype)
        self.proj0 = Linear(emb_dim, c0, rng, dtype)
        self.proj1 = Linear(emb_dim, c1, rng, dtype)
        self.proj2 = Linear(emb_dim, c2, rng, dtype)
        self.proj_up1 = Linear(emb_dim, c1, rng, dtype)
        self.proj_up2 = Linear(emb_dim, c0, rng, dtype)
        self.conv_in = Conv2d(in_channels, c0, rng=rng, dtype=dtype)
        self.down1 = Conv2d(c0, c1, stride=2, rng=rng, dtype=dtype)
        self.down2 = Conv2d(c1, c2, stride=2, rng=rng, dtype=dtype)
        self.mid = Conv2d(c2, c2, rng=rng, dtype=dtype)
        self.up1 = Conv2d(c2 + c1, c1, rng=rng, dtype=dtype)
        self.up2 = Conv2d(c1 + c0, c0, rng=rng, dtype=dtype)
        self.conv_out = Conv2d(c0, in_channels, rng=rng, dtype=dtype, zero=True)

    @property
    def dtype(self):
        return self.conv_in.weight.dtype

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for _, p in self.named_parameters())

    def freeze(self) -> "Denoiser":
        self.requires_grad_(False)
        return self

    def condition(self, c, t, class_offsets: Optional[Tensor] = None) -> Tensor:
        c = np.asarray(c, dtype=np.int64).reshape(-1)
        if c.size and (c.min() < 0 or c.max() >= self.num_classes):
            raise ValueError(f"class index out of range [0, {self.num_classes})")
        temb = Tensor(timestep_embedding(t, self.emb_dim, self.dtype))
        if temb.shape[0] == 1 and c.size > 1:
            temb = F.repeat(temb, c.size, axis=0)
        h = self.time2(F.silu(self.time1(temb)))
        ce = self.class_emb(c)
        if class_offsets is not None:
            ce = F.add(ce, F.embedding(class_offsets, c))
        return F.silu(F.add(h, ce))

    def forward(self, x: Tensor, c, t, class_offsets: Optional[Tensor] = None) -> Tensor:
        """Predict the noise in ``x`` (N, C, H, W) for class(es) ``c`` at timestep(s) ``t``."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, H, W) input, got {x.shape}")
        n = x.shape[0]
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        t = np.broadcast_to(np.asarray(t), (n,))
        cond = self.condition(c, t, class_offsets)

        def inject(h, proj):
            return F.add(h, F.reshape(proj(cond), (n, h.shape[1], 1, 1)))

        h0 = F.silu(inject(self.conv_in(x), self.proj0))
        h1 = F.silu(inject(self.down1(h0), self.proj1))
        h2 = F.silu(inject(self.down2(h1), self.proj2))
        m = F.add(h2, F.silu(self.mid(h2)))
        u1 = F.silu(inject(self.up1(F.concat([F.upsample2x(m), h1])), self.proj_up1))
        u2 = F.silu(inject(self.up2(F.concat([F.upsample2x(u1), h0])), self.proj_up2))
        return self.conv_out(u2)

    # -- persistence ------------------------------------------------------
    def to_tensors(self) -> dict:
        return self.state_dict(PREFIX)

    @classmethod
    def from_tensors(cls, tensors: dict) -> "Denoiser":
        emb = tensors[PREFIX + "class_emb.weight"]
        w_in = tensors[PREFIX + "conv_in.weight"]
        model = cls(num_classes=emb.shape[0], base=w_in.shape[0], emb_dim=emb.shape[1],
                    in_channels=w_in.shape[1], dtype=w_in.dtype)
        model.load_state_dict(tensors, PREFIX)
        return model

    def save(self, path) -> None:
        save_checkpoint(path, self.to_tensors())

    @classmethod
    def load(cls, path) -> "Denoiser":
        return cls.from_tensors(load_checkpoint(Path(path)))


def denoise_predict(model: Denoiser, x_t, c, t, class_offsets: Optional[Tensor] = None) -> Tensor:
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=model.dtype))
    return model(x_t, c, t, class_offsets)
