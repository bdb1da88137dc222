"""Destruction probe: how much category signal survives in a noised image.

A small CNN classifier, trained independently of the denoiser, reads x_t
built from a given noise source. Lower accuracy means the noise destroyed
more of the category signal.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from ..diffusion import NoiseSchedule, forward_diffuse
from ..ndgrad import Adam, Tensor
from ..ndgrad import functional as F
from ..ndgrad.nn import Conv2d, Linear, Module


class ProbeError(RuntimeError):
    pass


class ProbeClassifier(Module):
    def __init__(self, num_classes: int, in_channels: int = 1, size: int = 16, width: int = 16, seed: int = 0,
                 dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.c1 = Conv2d(in_channels, width, rng=rng, dtype=dtype)
        self.c2 = Conv2d(width, 2 * width, stride=2, rng=rng, dtype=dtype)
        self.c3 = Conv2d(2 * width, 2 * width, stride=2, rng=rng, dtype=dtype)
        # two stride-2 stages; shape classes need spatial layout, so flatten rather than pool
        self.fc = Linear(2 * width * ((size + 3) // 4) ** 2, num_classes, rng=rng, dtype=dtype)
        self.trained = False

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.c1(x))
        h = F.relu(self.c2(h))
        h = F.relu(self.c3(h))
        return self.fc(F.reshape(h, (h.shape[0], -1)))

    def predict(self, x: np.ndarray, chunk: int = 256) -> np.ndarray:
        dtype = self.c1.weight.dtype
        out = [np.argmax(self(Tensor(np.asarray(x[s:s + chunk], dtype=dtype))).data, axis=1)
               for s in range(0, len(x), chunk)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    b, k = logits.shape
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1
    return F.mean(F.sub(F.logsumexp(logits, axis=1), F.sum(F.mul(logits, onehot), axis=1)))


def train_probe(images: np.ndarray, labels: np.ndarray, num_classes: int, sched: NoiseSchedule, epochs: int = 15,
                batch_size: int = 32, lr: float = 5e-3, seed: int = 0, clean_fraction: float = 0.5,
                dtype=np.float32) -> Tuple[ProbeClassifier, List[float]]:
    """Train on clean images mixed with Gaussian-noised copies at uniform timesteps.

    The noised copies let the probe read partially destroyed images instead of
    collapsing to chance as soon as any noise is present.
    """
    if len(images) == 0:
        raise ValueError("cannot train the probe on an empty dataset")
    rng = np.random.default_rng(seed)
    probe = ProbeClassifier(num_classes, images.shape[1], images.shape[2], seed=seed, dtype=dtype)
    opt = Adam(probe.parameters(), lr=lr)
    images = np.asarray(images, dtype=dtype)
    labels = np.asarray(labels)
    curve: List[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            x0 = images[idx]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape).astype(dtype)
            noisy = forward_diffuse(Tensor(x0), t, Tensor(eps), sched).data
            keep = rng.random(len(idx)) < clean_fraction
            x = np.where(keep[:, None, None, None], x0, noisy)
            loss = cross_entropy(probe(Tensor(x)), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / len(images))
    probe.trained = True
    return probe, curve


def destruction_probe(probe: ProbeClassifier, images: np.ndarray, labels: np.ndarray, sched: NoiseSchedule,
                      t: int, noise: np.ndarray) -> float:
    """Probe accuracy on x_t built from ``images`` and the given per-image noise."""
    if not probe.trained:
        raise ProbeError("probe classifier has not been trained")
    dtype = probe.c1.weight.dtype
    images = np.asarray(images, dtype=dtype)
    noise = np.asarray(noise, dtype=dtype)
    if noise.shape != images.shape:
        raise ValueError(f"noise shape {noise.shape} != image shape {images.shape}")
    x_t = forward_diffuse(Tensor(images), t, Tensor(noise), sched).data
    return float((probe.predict(x_t) == np.asarray(labels)).mean())
