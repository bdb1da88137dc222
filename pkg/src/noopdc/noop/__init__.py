from .core import (
    NoOpState,
    NormalizedLogits,
    classify_noop,
    compose_noise,
    init_noop_state,
    noop_distances,
    noop_logits,
    noop_loss,
    normalized_logits,
    train_noop,
    zscore,
)
from .meta import MetaNetwork
from .prompt import train_prompt
from .transfer import transfer_state

__all__ = [
    "MetaNetwork",
    "NoOpState",
    "NormalizedLogits",
    "classify_noop",
    "compose_noise",
    "init_noop_state",
    "noop_distances",
    "noop_logits",
    "noop_loss",
    "normalized_logits",
    "train_noop",
    "train_prompt",
    "transfer_state",
    "zscore",
]
