"""Finite scalar quantization with learned in/out projections."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument, ModelConfigurationError


@dataclass
class FSQConfig:
    levels: list = field(default_factory=lambda: [8, 5, 5, 5])
    latent_dim: int = 512
    eps: float = 1e-3

    def __post_init__(self):
        self.levels = [int(x) for x in self.levels]
        if not self.levels or min(self.levels) < 2:
            raise ModelConfigurationError(f"every FSQ level must be >= 2, got {self.levels}")
        if self.latent_dim < 1:
            raise ModelConfigurationError("latent_dim must be positive")

    @property
    def quant_dim(self):
        return len(self.levels)

    @property
    def codebook_size(self):
        return math.prod(self.levels)


def _round_ste(z):
    return z + (torch.round(z) - z).detach()


class FSQ(nn.Module):
    """Quantizer: ``in_proj`` (d->d->l), bounded rounding, ``out_proj`` (l->d->d).

    Codes are integer digit vectors; odd levels span ``-(L-1)/2..(L-1)/2`` and
    even levels ``-L/2..L/2-1`` thanks to a half-step shift inside the tanh.
    """

    def __init__(self, config: FSQConfig | None = None):
        super().__init__()
        self.config = config or FSQConfig()
        d, q = self.config.latent_dim, self.config.quant_dim
        self.in_proj = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, q))
        self.out_proj = nn.Sequential(nn.Linear(q, d), nn.SiLU(), nn.Linear(d, d))
        levels = torch.tensor(self.config.levels, dtype=torch.float64)
        half = (levels - 1) * (1 + self.config.eps) / 2
        offset = torch.where(levels % 2 == 0, 0.5, 0.0).double()
        self.register_buffer("_levels", levels.long(), persistent=False)
        self.register_buffer("_half", half.float(), persistent=False)
        self.register_buffer("_offset", offset.float(), persistent=False)
        self.register_buffer("_shift", torch.atanh(offset / half).float(), persistent=False)
        self.register_buffer("_scale", torch.floor(levels / 2).float(), persistent=False)
        basis = torch.cumprod(torch.cat([torch.ones(1, dtype=torch.long), levels.long()[:-1]]), 0)
        self.register_buffer("_basis", basis, persistent=False)

    @property
    def codebook_size(self):
        return self.config.codebook_size

    def bound(self, z):
        return torch.tanh(z + self._shift.to(z.dtype)) * self._half.to(z.dtype) - self._offset.to(z.dtype)

    def project_in(self, z):
        return self.in_proj(z)

    def project_out(self, codes):
        return self.out_proj(codes / self._scale.to(codes.dtype))

    def code_to_index(self, codes):
        """Mixed-radix index of integer digit vectors (..., l)."""
        codes = torch.as_tensor(codes)
        digits = torch.round(codes).long() + self._levels // 2
        if torch.any(digits < 0) or torch.any(digits >= self._levels):
            raise InvalidArgument("code digit outside its level's value set")
        return (digits * self._basis).sum(-1)

    def index_to_code(self, indices):
        indices = torch.as_tensor(indices, dtype=torch.long, device=self._basis.device)
        if torch.any(indices < 0) or torch.any(indices >= self.codebook_size):
            raise InvalidArgument(f"code index outside [0, {self.codebook_size})")
        digits = (indices[..., None] // self._basis) % self._levels
        return (digits - self._levels // 2).to(self._half.dtype)

    def forward(self, z):
        """Quantize (..., d) latents. Returns ``(z_hat, indices)``."""
        if not torch.all(torch.isfinite(z)):
            raise InvalidArgument("non-finite latent passed to the quantizer")
        codes = _round_ste(self.bound(self.project_in(z)))
        return self.project_out(codes), self.code_to_index(codes.detach())

    quantize = forward

    def dequantize(self, indices):
        return self.project_out(self.index_to_code(indices))


def all_codes(levels):
    """Every digit vector of the codebook, in index order (numpy, for tests and tools)."""
    grids = [np.arange(L) - L // 2 for L in levels]
    mesh = np.meshgrid(*grids[::-1], indexing="ij")
    return np.stack([m.ravel() for m in mesh[::-1]], -1)
