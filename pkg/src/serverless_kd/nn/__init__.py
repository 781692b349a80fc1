from .engine import (
    Batch,
    EmptyDataset,
    Network,
    NonFiniteLoss,
    build_network,
    evaluate,
    fit,
    forward,
    forward_macs,
    gradient_check,
    iter_batches,
    predict,
    train_step,
)
from .kernels import BACKEND
from .losses import CROSS_ENTROPY, LOGIT_L1, MSE, LossKind, distill_loss, kl_distill, softmax
from .serialize import ArchitectureMismatch, decode_weights, encode_weights, load_blob_into, network_to_blob

__all__ = [
    "ArchitectureMismatch",
    "BACKEND",
    "Batch",
    "CROSS_ENTROPY",
    "EmptyDataset",
    "LOGIT_L1",
    "LossKind",
    "MSE",
    "Network",
    "NonFiniteLoss",
    "build_network",
    "decode_weights",
    "distill_loss",
    "encode_weights",
    "evaluate",
    "fit",
    "forward",
    "forward_macs",
    "gradient_check",
    "iter_batches",
    "kl_distill",
    "load_blob_into",
    "network_to_blob",
    "predict",
    "softmax",
    "train_step",
]
