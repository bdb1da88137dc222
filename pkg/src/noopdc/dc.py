"""Diffusion-classifier decision rule, ensembles and noise-instability probes."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .diffusion import Denoiser, NoiseSchedule, forward_diffuse
from .ndgrad import Tensor
from .ndgrad import functional as F

DEFAULT_CHUNK = 64


@dataclass
class ClassScores:
    distances: np.ndarray
    predicted: int
    t_used: object
    noise_id: object = None


@dataclass
class InstabilityReport:
    seeds: list
    accuracies: np.ndarray
    mean: float
    std: float
    flip_rate: float
    predictions: np.ndarray  # (n_seeds, n_images)


def predict_from_distances(d: np.ndarray) -> np.ndarray:
    """Argmin over the class axis; np.argmin already returns the lowest index on ties."""
    return np.argmin(np.asarray(d), axis=-1)


def distance_tensor(model: Denoiser, x_t: Tensor, target: Tensor, t, classes: Sequence[int],
                    class_offsets: Optional[Tensor] = None) -> Tensor:
    """||eps_hat(x_t, c_k, t) - target||^2 for every row and class, shape (B, K).

    Gradients flow into both ``x_t`` and ``target`` when they track them.
    """
    classes = np.asarray(classes, dtype=np.int64)
    k = len(classes)
    if k == 0:
        raise ValueError("need at least one class")
    if x_t.shape != target.shape:
        raise ValueError(f"x_t shape {x_t.shape} != target shape {target.shape}")
    b = x_t.shape[0]
    xr = F.repeat(x_t, k, axis=0)
    c = np.tile(classes, b)
    pred = model(xr, c, t, class_offsets)
    pred = F.reshape(pred, (b, k) + x_t.shape[1:])
    tgt = F.reshape(target, (b, 1) + target.shape[1:])
    return F.sqdiff_sum(pred, tgt, axis=tuple(range(2, pred.ndim)))


def batch_distances(model: Denoiser, sched: NoiseSchedule, x0: np.ndarray, t: int, eps: np.ndarray,
                    classes: Sequence[int], class_offsets: Optional[Tensor] = None,
                    chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Distances for a batch of images, each with its own reference noise. Returns (B, K)."""
    x0 = np.asarray(x0, dtype=model.dtype)
    eps = np.asarray(eps, dtype=model.dtype)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} != image shape {x0.shape}")
    out = []
    for s in range(0, len(x0), chunk):
        e = Tensor(eps[s:s + chunk])
        x_t = forward_diffuse(Tensor(x0[s:s + chunk]), t, e, sched)
        out.append(distance_tensor(model, x_t, e, t, classes, class_offsets).data)
    if not out:
        return np.zeros((0, len(classes)), dtype=model.dtype)
    return np.concatenate(out)


def class_distances(model: Denoiser, sched: NoiseSchedule, x0: np.ndarray, t: int, eps_ref: np.ndarray,
                    classes: Sequence[int], class_offsets: Optional[Tensor] = None,
                    noise_id=None) -> ClassScores:
    """Single image (C, H, W): one forward pass per class."""
    classes = list(classes)
    if not classes:
        raise ValueError("need at least one class")
    x0 = np.asarray(x0, dtype=model.dtype)
    eps_ref = np.asarray(eps_ref, dtype=model.dtype)
    if x0.shape != eps_ref.shape:
        raise ValueError(f"noise shape {eps_ref.shape} != image shape {x0.shape}")
    e = Tensor(eps_ref[None])
    x_t = forward_diffuse(Tensor(x0[None]), t, e, sched)
    d = np.array([distance_tensor(model, x_t, e, t, [c], class_offsets).data[0, 0] for c in classes])
    return ClassScores(distances=d, predicted=int(predict_from_distances(d)), t_used=t, noise_id=noise_id)


def classify_ensemble(model: Denoiser, sched: NoiseSchedule, x0: np.ndarray, t_list: Sequence[int],
                      noise_list: Sequence[np.ndarray], classes: Sequence[int],
                      class_offsets: Optional[Tensor] = None) -> tuple:
    """Average distances over every (t, noise) pair, then take the argmin.

    ``x0`` is a batch (B, C, H, W) and every noise has the same shape.
    Returns (predictions (B,), mean distances (B, K)).
    """
    if len(t_list) == 0 or len(noise_list) == 0:
        raise ValueError("t_list and noise_list must be nonempty")
    total = None
    for t in t_list:
        for eps in noise_list:
            d = batch_distances(model, sched, x0, t, eps, classes, class_offsets).astype(np.float64)
            total = d if total is None else total + d
    mean = total / (len(t_list) * len(noise_list))
    return predict_from_distances(mean), mean


def instability_probe(model: Denoiser, sched: NoiseSchedule, images: np.ndarray, labels: np.ndarray, t: int,
                      seeds: Sequence[int], classes: Sequence[int]) -> InstabilityReport:
    """Accuracy spread and prediction flips when each seed draws fresh per-image noise."""
    if len(images) == 0:
        raise ValueError("empty test set")
    if len(seeds) < 2:
        raise ValueError("need at least two seeds")
    preds = []
    for seed in seeds:
        eps = np.random.default_rng(seed).standard_normal(images.shape).astype(model.dtype)
        preds.append(predict_from_distances(batch_distances(model, sched, images, t, eps, classes)))
    return instability_from_predictions(list(seeds), np.stack(preds), labels)


def instability_from_predictions(seeds: list, preds: np.ndarray, labels: np.ndarray) -> InstabilityReport:
    accs = (preds == np.asarray(labels)[None, :]).mean(axis=1)
    flips = np.zeros(preds.shape[1], dtype=bool)
    for i, j in combinations(range(len(preds)), 2):
        flips |= preds[i] != preds[j]
    return InstabilityReport(seeds=seeds, accuracies=accs, mean=float(accs.mean()), std=float(accs.std()),
                             flip_rate=float(flips.mean()), predictions=preds)
