"""Differentiable building blocks: projections, positional encoding,
depthwise-separable conv units, and mask-aware softmax / max-pool.

Masking convention: boolean masks mark valid positions with True. All
blocks guarantee that values stored at masked positions never influence
outputs at valid positions; for convolutions this is enforced by zeroing
masked positions before every conv unit, which makes padding behave
exactly like the implicit zero padding of a shorter sequence.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor


def masked_softmax(logits: Tensor, mask: Tensor | None = None, dim: int = -1) -> Tensor:
    """Softmax over valid positions; invalid positions get probability 0.

    Rows with no valid position come out all-zero instead of NaN.
    """
    if mask is None:
        return torch.softmax(logits, dim=dim)
    mask = mask.expand_as(logits)
    filled = logits.masked_fill(~mask, torch.finfo(logits.dtype).min)
    return torch.softmax(filled, dim=dim) * mask.to(logits.dtype)


def masked_maxpool(x: Tensor, mask: Tensor | None = None) -> Tensor:
    """Per-dimension max over the valid positions of a (..., L, d) tensor's
    length axis; ``mask`` is (..., L), broadcastable against ``x`` without
    its feature axis. Raises on an all-masked pool."""
    if mask is not None:
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("masked_maxpool over an all-masked axis")
        x = x.masked_fill(~mask.unsqueeze(-1), torch.finfo(x.dtype).min)
    return x.max(dim=-2).values


def positional_encoding(
    length: int, dim: int, dtype: torch.dtype = torch.float32, device=None
) -> Tensor:
    """Sinusoidal position table of shape (length, dim); ``dim`` must be even."""
    if dim % 2 != 0:
        raise ValueError(f"positional encoding needs an even dim, got {dim}")
    pos = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    i2 = torch.arange(0, dim, 2, dtype=dtype, device=device)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype, device=device), i2 / dim)
    pe = torch.zeros(length, dim, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)
    return pe


class LinearReLU(nn.Module):
    """Affine projection followed by ReLU."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.proj = nn.Linear(d_in, d_out)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.proj(x))


class ConvUnit(nn.Module):
    """Layernorm(ReLU(Conv(x)) + x) with a depthwise-separable 1-D conv.

    Same-padding keeps the sequence length; layer normalization runs over
    the feature axis.
    """

    def __init__(self, dim: int, kernel: int):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError(f"kernel must be odd for same-padding, got {kernel}")
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.pointwise = nn.Conv1d(dim, dim, 1)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:  # (B, L, d)
        y = self.pointwise(self.depthwise(x.transpose(1, 2))).transpose(1, 2)
        return self.norm(F.relu(y) + x)


class ConvEncoder(nn.Module):
    """Optional positional encoding followed by ``n_conv`` stacked ConvUnits.

    With ``n_conv=0`` and PE disabled this is the identity. Masked positions
    are zeroed before every conv unit so that valid outputs are independent
    of whatever padding holds.
    """

    def __init__(self, dim: int, kernel: int, n_conv: int, use_pe: bool = True):
        super().__init__()
        self.dim = dim
        self.use_pe = use_pe
        self.units = nn.ModuleList(ConvUnit(dim, kernel) for _ in range(n_conv))

    def forward(
        self, x: Tensor, mask: Tensor | None = None, add_pe: bool | None = None
    ) -> Tensor:  # x: (B, L, d), mask: (B, L)
        if x.shape[-2] == 0:  # nothing to encode on an empty axis
            return x
        if add_pe is None:
            add_pe = self.use_pe
        if add_pe:
            x = x + positional_encoding(x.shape[-2], self.dim, x.dtype, x.device)
        for unit in self.units:
            if mask is not None:
                x = x * mask.unsqueeze(-1).to(x.dtype)
            x = unit(x)
        return x
