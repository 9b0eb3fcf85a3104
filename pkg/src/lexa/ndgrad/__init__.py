"""Minimal dense tensor library with reverse-mode autodiff."""

from .checkpoint import CheckpointError, load_parameters, read_checkpoint, save_parameters
from .dist import STD_FLOOR, gaussian_entropy, gaussian_sample, kl_diag_gauss, std_from_raw
from .gradcheck import grad_check
from .nn import MLP, Dense, GRUCell, Module, Parameter, gru_cell
from .optim import Adam, adam_step, global_norm
from .tensor import (
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    add,
    affine,
    as_tensor,
    backward,
    concat,
    default_dtype,
    div,
    elu,
    exp,
    getitem,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    no_tape,
    precision,
    relu,
    reshape,
    sigmoid,
    softplus,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    tanh,
)
