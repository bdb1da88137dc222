from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from ..ndgrad import Adam, Tensor
from ..ndgrad import functional as F
from .denoiser import Denoiser
from .schedule import NoiseSchedule, forward_diffuse

log = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class DenoiserTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    precision: str = "float32"
    base_channels: int = 16
    emb_dim: int = 32

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.base_channels < 1 or self.emb_dim < 2:
            raise ValueError("batch_size, base_channels and emb_dim must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    return F.scale(F.sqdiff_sum(pred, target), 1.0 / pred.size)


def train_denoiser(images: np.ndarray, labels: np.ndarray, num_classes: int, sched: NoiseSchedule,
                   cfg: DenoiserTrainConfig) -> Tuple[Denoiser, List[float]]:
    """Fit the noise predictor with the standard epsilon-MSE objective.

    ``images`` are NCHW. Each sample gets a uniform timestep in [1, T] and fresh
    Gaussian noise every time it is visited. Returns the model and the
    per-epoch mean loss.
    """
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    dtype = cfg.dtype
    rng = np.random.default_rng(cfg.seed)
    model = Denoiser(num_classes, base=cfg.base_channels, emb_dim=cfg.emb_dim,
                     in_channels=images.shape[1], seed=cfg.seed, dtype=dtype)
    opt = Adam(model.parameters(), lr=cfg.lr)
    images = images.astype(dtype, copy=False)
    curve: List[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x0 = images[idx]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape).astype(dtype)
            x_t = forward_diffuse(Tensor(x0), t, Tensor(eps), sched)
            loss = mse_loss(model(x_t, labels[idx], t), Tensor(eps))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(total / count)
        log.info("denoiser epoch %d loss %.5f", epoch, curve[-1])
    return model, curve
