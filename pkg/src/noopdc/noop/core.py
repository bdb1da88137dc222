"""Learned dataset noise plus image-specific offsets for the diffusion classifier."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..dc import DEFAULT_CHUNK, distance_tensor
from ..diffusion import Denoiser, NoiseSchedule, forward_diffuse
from ..ndgrad import Adam, Tensor, load_checkpoint, make_op, save_checkpoint
from ..ndgrad import functional as F
from .meta import MetaNetwork

log = logging.getLogger(__name__)

SIGMA_GUARD = 1e-12


@dataclass
class NoOpState:
    eps: Tensor  # (1, C, H, W), shared by every image
    meta: MetaNetwork
    adam_eps: Adam
    adam_meta: Adam
    t_fixed: int = 500
    use_meta: bool = True

    @property
    def image_shape(self) -> tuple:
        return self.eps.shape[1:]

    def to_tensors(self) -> dict:
        out = {"noop.eps": self.eps.data[0]}
        out.update(self.meta.state_dict("meta."))
        return out

    def save(self, path, extra: Optional[dict] = None) -> None:
        tensors = self.to_tensors()
        tensors.update(extra or {})
        save_checkpoint(path, tensors)

    @classmethod
    def from_tensors(cls, tensors: dict, t_fixed: int = 500, lr_eps: float = 1e-2, lr_meta: float = 1e-3,
                     use_meta: bool = True) -> "NoOpState":
        eps = Tensor(tensors["noop.eps"][None].copy(), requires_grad=True)
        meta = MetaNetwork.from_tensors(tensors, "meta.").eval()
        return cls(eps, meta, Adam({"eps": eps}, lr_eps), Adam(meta.parameters(), lr_meta), t_fixed, use_meta)

    @classmethod
    def load(cls, path, **kwargs) -> "NoOpState":
        return cls.from_tensors(load_checkpoint(path), **kwargs)


def init_noop_state(image_shape: Sequence[int], seed: int, t_fixed: int = 500, lr_eps: float = 1e-2,
                    lr_meta: float = 1e-3, meta_channels=(8, 16, 32), use_meta: bool = True,
                    dtype=np.float32) -> NoOpState:
    """Fresh state: eps ~ N(0, I) from ``seed``, meta weights from a derived seed."""
    rng = np.random.default_rng(seed)
    eps = Tensor(rng.standard_normal((1, *image_shape)).astype(dtype), requires_grad=True)
    meta = MetaNetwork(image_shape[0], meta_channels, seed=int(rng.integers(2**31)), dtype=dtype).eval()
    return NoOpState(eps=eps, meta=meta, adam_eps=Adam({"eps": eps}, lr_eps),
                     adam_meta=Adam(meta.parameters(), lr_meta), t_fixed=t_fixed, use_meta=use_meta)


# ------------------------------------------------------------------ forward


def compose_noise(state: NoOpState, x0) -> Tensor:
    """eps* = eps + U(x0), one row per image."""
    x0 = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0, dtype=state.eps.dtype))
    if x0.shape[1:] != state.image_shape:
        raise ValueError(f"image shape {x0.shape[1:]} != noise shape {state.image_shape}")
    if state.use_meta:
        return F.add(state.eps, state.meta(x0))
    return F.add(state.eps, np.zeros(x0.shape, dtype=state.eps.dtype))


def noop_logits(model: Denoiser, sched: NoiseSchedule, x0, eps_star: Tensor, t: int, classes: Sequence[int],
                class_offsets: Optional[Tensor] = None) -> Tensor:
    """p_k = -||eps* - eps_hat(x_t, c_k, t)||^2 with x_t built from eps*.

    eps* enters both the noisy input and the regression target and gradients
    flow through both.
    """
    if len(classes) == 0:
        raise ValueError("class set is empty")
    x0 = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0, dtype=eps_star.dtype))
    x_t = forward_diffuse(x0, t, eps_star, sched)
    return F.scale(distance_tensor(model, x_t, eps_star, t, classes, class_offsets), -1.0)


@dataclass
class NormalizedLogits:
    p: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    z: np.ndarray


def zscore(p: Tensor) -> Tensor:
    """Standardise logits along the last (class) axis with the population std.

    z = (p - mean) / (std + 1e-12). Rows with std exactly 0 give z = 0 and a
    zero gradient.
    """
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    k = p.shape[-1]
    if k < 2:
        raise ValueError("z-score needs at least two logits")
    pd = p.data
    mu = pd.mean(axis=-1, keepdims=True)
    y = pd - mu
    sigma = np.sqrt((y * y).mean(axis=-1, keepdims=True))
    s = sigma + pd.dtype.type(SIGMA_GUARD)
    z = y / s

    def bw(g):
        gc = g - g.mean(axis=-1, keepdims=True)
        gy = (g * y).sum(axis=-1, keepdims=True)
        safe = np.where(sigma > 0, sigma, 1)
        grad = gc / s - y * gy / (k * safe * s * s)
        return (np.where(sigma > 0, grad, 0).astype(pd.dtype, copy=False),)

    return make_op("zscore", z, (p,), bw)


def normalized_logits(p: np.ndarray) -> NormalizedLogits:
    p = np.asarray(p, dtype=np.float64)
    mu = p.mean(axis=-1)
    sigma = p.std(axis=-1)
    return NormalizedLogits(p=p, mu=mu, sigma=sigma, z=zscore(Tensor(p)).data)


def noop_loss(z: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of z against integer labels."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.ndim == 1:
        z = F.reshape(z, (1, z.shape[0]))
    b, k = z.shape
    if labels.shape != (b,):
        raise ValueError(f"need {b} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label outside [0, {k})")
    onehot = np.zeros((b, k), dtype=z.dtype)
    onehot[np.arange(b), labels] = 1
    picked = F.sum(F.mul(z, onehot), axis=1)
    return F.mean(F.sub(F.logsumexp(z, axis=1), picked))


# ------------------------------------------------------------------ training


def train_noop(train_x: np.ndarray, train_y: np.ndarray, model: Denoiser, sched: NoiseSchedule,
               state: NoOpState, classes: Sequence[int], epochs: int = 20, batch_size: int = 32,
               seed: int = 0, class_offsets: Optional[Tensor] = None,
               on_epoch: Optional[Callable[[int, NoOpState], None]] = None) -> Tuple[NoOpState, List[float]]:
    """Optimise eps (and the Meta-Network when enabled) with z-scored cross-entropy.

    The denoiser must be frozen. ``on_epoch(epoch, state)`` is called with
    epoch 0 before any update and then after every epoch.
    """
    if len(train_x) == 0:
        raise ValueError("empty training set")
    if not model.frozen:
        raise ValueError("denoiser must be frozen before noise optimisation")
    if class_offsets is not None and class_offsets.requires_grad:
        raise ValueError("prompt offsets must be frozen during noise optimisation")
    train_x = np.asarray(train_x, dtype=state.eps.dtype)
    train_y = np.asarray(train_y)
    rng = np.random.default_rng(seed)
    curve: List[float] = []
    if on_epoch is not None:
        on_epoch(0, state)
    for epoch in range(epochs):
        state.meta.train()
        order = rng.permutation(len(train_x))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            state.adam_eps.zero_grad()
            state.adam_meta.zero_grad()
            x0 = Tensor(train_x[idx])
            eps_star = compose_noise(state, x0)
            p = noop_logits(model, sched, x0, eps_star, state.t_fixed, classes, class_offsets)
            loss = noop_loss(zscore(p), train_y[idx])
            loss.backward()
            state.adam_eps.step()
            if state.use_meta:
                state.adam_meta.step()
            total += loss.item() * len(idx)
        state.meta.eval()
        curve.append(total / len(train_x))
        log.info("noop epoch %d loss %.5f", epoch, curve[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, state)
    state.meta.eval()
    return state, curve


def noop_distances(model: Denoiser, sched: NoiseSchedule, state: NoOpState, x0: np.ndarray, t: int,
                   classes: Sequence[int], class_offsets: Optional[Tensor] = None,
                   chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Distances (B, K) using eps* in place of random noise (meta in eval mode)."""
    was_training = state.meta.training
    state.meta.eval()
    eps = state.eps
    x0 = np.asarray(x0, dtype=eps.dtype)
    frozen_eps = Tensor(eps.data)
    view = NoOpState(frozen_eps, state.meta, state.adam_eps, state.adam_meta, state.t_fixed, state.use_meta)
    grads = {n: p.requires_grad for n, p in state.meta.named_parameters()}
    state.meta.requires_grad_(False)
    try:
        out = []
        for s in range(0, len(x0), chunk):
            xs = Tensor(x0[s:s + chunk])
            eps_star = compose_noise(view, xs)
            out.append(F.scale(noop_logits(model, sched, xs, eps_star, t, classes, class_offsets), -1.0).data)
    finally:
        for n, p in state.meta.named_parameters():
            p.requires_grad_(grads[n])
        state.meta.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, len(classes)), dtype=eps.dtype)


def classify_noop(model: Denoiser, sched: NoiseSchedule, state: NoOpState, x0: np.ndarray, t: int,
                  classes: Sequence[int], class_offsets: Optional[Tensor] = None) -> np.ndarray:
    """Predicted class per image: argmax of the logits, lowest index on ties."""
    p = -noop_distances(model, sched, state, x0, t, classes, class_offsets)
    return np.argmax(p, axis=-1)
