"""Small numpy reverse-mode autodiff engine."""

from . import functional
from .checkpoint import CheckpointFormatError
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .gradcheck import grad_check, numerical_grad
from .optim import Adam, AdamState, adam_step
from .tensor import Graph, GraphError, Node, NonFiniteError, Tensor, as_tensor, backward, make_op

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointFormatError",
    "Graph",
    "GraphError",
    "Node",
    "NonFiniteError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "functional",
    "grad_check",
    "load_checkpoint",
    "numerical_grad",
    "save_checkpoint",
]
