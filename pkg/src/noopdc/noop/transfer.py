from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..diffusion import Denoiser, NoiseSchedule
from ..ndgrad import Tensor
from .core import NoOpState, classify_noop


def transfer_state(state: NoOpState, images: np.ndarray, labels: np.ndarray, model: Denoiser,
                   sched: NoiseSchedule, classes: Sequence[int], t: Optional[int] = None,
                   class_offsets: Optional[Tensor] = None) -> float:
    """Accuracy on a target set using noise and Meta-Network learned elsewhere, unchanged."""
    if tuple(images.shape[1:]) != tuple(state.image_shape):
        raise ValueError(f"target image shape {images.shape[1:]} != source {state.image_shape}")
    preds = classify_noop(model, sched, state, images, state.t_fixed if t is None else t, classes, class_offsets)
    return float((preds == np.asarray(labels)).mean())
