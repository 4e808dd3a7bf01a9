"""Differentiable building blocks: parameter store, MLPs, hashed feature
grids, frequency encoding, Adam, and the finite-difference oracle."""

from .encoding import dir_encode, dir_encode_backward, dir_encode_cached
from .fdcheck import finite_diff_check
from .hashgrid import (
    HashEncodeCache,
    HashGridSpec,
    hash_allocate,
    hash_backward,
    hash_encode,
    hash_forward,
    hash_input_jacobian,
    hash_second_backward,
)
from .mlp import (
    MlpSpec,
    mlp_allocate,
    mlp_apply,
    mlp_backward,
    mlp_forward,
    mlp_value_and_input_grad,
    mlp_vig_backward,
    mlp_weights,
)
from .params import AdamState, GradientError, ParamStore, adam_step

__all__ = [
    "AdamState",
    "GradientError",
    "HashEncodeCache",
    "HashGridSpec",
    "MlpSpec",
    "ParamStore",
    "adam_step",
    "dir_encode",
    "dir_encode_backward",
    "dir_encode_cached",
    "finite_diff_check",
    "hash_allocate",
    "hash_backward",
    "hash_encode",
    "hash_forward",
    "hash_input_jacobian",
    "hash_second_backward",
    "mlp_allocate",
    "mlp_apply",
    "mlp_backward",
    "mlp_forward",
    "mlp_value_and_input_grad",
    "mlp_vig_backward",
    "mlp_weights",
]
