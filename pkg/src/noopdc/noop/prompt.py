"""Prompt-optimisation baseline: learn per-class conditioning offsets on a frozen denoiser."""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from ..diffusion import Denoiser, NoiseSchedule, forward_diffuse
from ..diffusion.training import mse_loss
from ..ndgrad import Adam, Tensor
from ..ndgrad import functional as F


def train_prompt(train_x: np.ndarray, train_y: np.ndarray, model: Denoiser, sched: NoiseSchedule,
                 n_tokens: int = 1, lr: float = 1e-2, epochs: int = 20, batch_size: int = 32,
                 seed: int = 0) -> Tuple[Tensor, List[float]]:
    """Fit zero-initialised class-embedding offsets with the epsilon-MSE objective.

    Each class owns ``n_tokens`` vectors of the embedding width; their sum is
    added to the class embedding. Returns the summed (K, emb_dim) offsets,
    frozen, and the per-epoch mean loss.
    """
    if len(train_x) == 0:
        raise ValueError("empty training set")
    if not model.frozen:
        raise ValueError("denoiser must be frozen before prompt optimisation")
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    dtype = model.dtype
    k, d = model.num_classes, model.emb_dim
    tokens = Tensor(np.zeros((k, n_tokens * d), dtype=dtype), requires_grad=True)
    opt = Adam({"tokens": tokens}, lr=lr)
    rng = np.random.default_rng(seed)
    train_x = np.asarray(train_x, dtype=dtype)
    curve: List[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(train_x))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.standard_normal(train_x[idx].shape).astype(dtype)
            x_t = forward_diffuse(Tensor(train_x[idx]), t, Tensor(eps), sched)
            offsets = _sum_tokens(tokens, n_tokens, d)
            loss = mse_loss(model(x_t, train_y[idx], t, offsets), Tensor(eps))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / len(train_x))
    final = _sum_tokens(Tensor(tokens.data), n_tokens, d)
    return Tensor(final.data), curve


def _sum_tokens(tokens: Tensor, n_tokens: int, d: int) -> Tensor:
    if n_tokens == 1:
        return tokens
    k = tokens.shape[0]
    return F.sum(F.reshape(tokens, (k, n_tokens, d)), axis=1)
