from .autodiff import Tensor, backward, no_grad
from .batch import GraphBatch, make_batch
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import MLP, MPNN, Linear, MpnnSpec, loss, mpnn_forward, per_row_loss, pool
from .params import Adam, ParamStore, adam_step

__all__ = [
    "Tensor", "backward", "no_grad", "GraphBatch", "make_batch", "load_checkpoint", "save_checkpoint",
    "MLP", "MPNN", "Linear", "MpnnSpec", "loss", "mpnn_forward", "per_row_loss", "pool",
    "Adam", "ParamStore", "adam_step",
]
