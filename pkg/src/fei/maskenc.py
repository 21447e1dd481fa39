"""Mask encoder: a binary mask becomes a prompt vector ``m = M @ W_emb / sqrt(k)``."""

from __future__ import annotations

import torch
import torch.nn as nn

from fei.errors import InvalidInputError


class MaskEncoder(nn.Module):
    """Embedding table with one row per maskable component (frequency bin or time step).

    The empty mask maps to the zero vector, and the ``1/sqrt(k)`` scaling keeps
    ``E||m||^2 = dim`` for an ``N(0, 1)`` table whatever ``k`` is.
    """

    def __init__(self, num_components: int, dim: int):
        super().__init__()
        self.num_components = num_components
        self.dim = dim
        self.weight = nn.Parameter(torch.randn(num_components, dim))

    def forward(self, bits: torch.Tensor) -> torch.Tensor:
        if bits.shape[-1] != self.num_components:
            raise InvalidInputError(
                f"mask has {bits.shape[-1]} components, encoder table has {self.num_components}"
            )
        bits = bits.to(self.weight.dtype)
        k = bits.sum(dim=-1, keepdim=True)
        # k = 0 rows have a zero numerator; clamping the divisor keeps them exactly zero.
        return (bits @ self.weight) / k.clamp(min=1.0).sqrt()


def encode_mask(bits, table: torch.Tensor) -> torch.Tensor:
    """Functional form over an explicit ``(n, h)`` table."""
    bits = torch.as_tensor(bits, dtype=table.dtype)
    if bits.shape[-1] != table.shape[0]:
        raise InvalidInputError(f"mask has {bits.shape[-1]} components, table has {table.shape[0]}")
    k = bits.sum(dim=-1, keepdim=True)
    return (bits @ table) / k.clamp(min=1.0).sqrt()
