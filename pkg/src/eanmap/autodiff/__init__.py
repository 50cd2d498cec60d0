"""Tensor, reverse-mode tape, differentiable ops, and the AdamW optimizer."""

from eanmap.autodiff.tensor import (
    Tensor,
    as_tensor,
    backward,
    clear_tape,
    get_default_dtype,
    no_grad,
    set_default_dtype,
    tape_length,
)

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "clear_tape",
    "get_default_dtype",
    "no_grad",
    "set_default_dtype",
    "tape_length",
]
