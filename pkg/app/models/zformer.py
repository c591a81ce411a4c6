"""Z-former: sparse-attention transformer over slice embeddings, trained by masked embedding modeling."""
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from app.backend.utils import derive_seed
from app.config import ZFormerConfig
from app.models.layers import Block, attention, init_weights

MASK_RETRIES = 10


@dataclass(frozen=True)
class SparsePattern:
    allowed: np.ndarray  # (L, L) bool, row = query, column = key
    window_size: int
    num_random_blocks: int
    seed: int

    @property
    def length(self) -> int:
        return self.allowed.shape[0]

    def row_sums(self) -> np.ndarray:
        return self.allowed.sum(axis=1)

    def as_tensor(self, device: Optional[torch.device] = None) -> torch.Tensor:
        return torch.from_numpy(np.array(self.allowed)).to(device)


def build_sparse_pattern(length: int, window_size: int, num_random_blocks: int, seed: int) -> SparsePattern:
    """Band of half-width window_size // 2 plus num_random_blocks seeded keys per row outside it."""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    if num_random_blocks < 0:
        raise ValueError("num_random_blocks must be >= 0")
    half = window_size // 2
    idx = np.arange(length)
    allowed = np.abs(idx[:, None] - idx[None, :]) <= half
    rng = np.random.default_rng(seed)
    for row in range(length):
        outside = np.flatnonzero(~allowed[row])
        count = min(num_random_blocks, outside.size)
        if count:
            allowed[row, rng.choice(outside, size=count, replace=False)] = True
    allowed.setflags(write=False)
    return SparsePattern(allowed, window_size, num_random_blocks, seed)


def sparse_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, pattern: SparsePattern) -> torch.Tensor:
    """Attention restricted to the pattern's true keys."""
    if pattern.length != q.shape[-2] or pattern.length != k.shape[-2]:
        raise ValueError(f"pattern covers {pattern.length} positions, inputs have {q.shape[-2]}")
    return attention(q, k, v, pattern.as_tensor(q.device))


@dataclass(frozen=True)
class MaskSet:
    indices: tuple[int, ...]
    length: int

    def __len__(self) -> int:
        return len(self.indices)

    def as_bool(self, device: Optional[torch.device] = None) -> torch.Tensor:
        flags = torch.zeros(self.length, dtype=torch.bool, device=device)
        flags[list(self.indices)] = True
        return flags


def draw_mask(length: int, p: float, seed: int) -> MaskSet:
    if not 0.0 < p <= 1.0:
        raise ValueError(f"mask probability must lie in (0, 1], got {p}")
    rng = np.random.default_rng(seed)
    for _ in range(MASK_RETRIES):
        flags = rng.random(length) < p
        if flags.any():
            return MaskSet(tuple(np.flatnonzero(flags).tolist()), length)
    return MaskSet((int(rng.integers(length)),), length)


def mask_embeddings(
        z_vol: torch.Tensor,
        p: float,
        seed: int,
        mask_token: torch.Tensor,
) -> tuple[torch.Tensor, MaskSet]:
    """Replace each row independently with probability p by the learned mask token."""
    mask = draw_mask(z_vol.shape[-2], p, seed)
    flags = mask.as_bool(z_vol.device).unsqueeze(-1)
    return torch.where(flags, mask_token.expand_as(z_vol), z_vol), mask


def mem_loss(z_hat: torch.Tensor, z_vol: torch.Tensor, mask: MaskSet) -> torch.Tensor:
    """Sum of absolute differences over masked rows and all dims, divided by |M|."""
    if len(mask) == 0:
        raise ValueError("masked embedding loss needs at least one masked slice")
    idx = list(mask.indices)
    return (z_hat[..., idx, :] - z_vol[..., idx, :]).abs().sum() / len(mask)


class ZFormer(nn.Module):
    def __init__(self, config: ZFormerConfig):
        super().__init__()
        self.config = config
        self.pos_embed = nn.Parameter(torch.zeros(config.max_len, config.dim))
        self.mask_token = nn.Parameter(torch.zeros(config.dim))
        self.blocks = nn.ModuleList(Block(config.dim, config.heads) for _ in range(config.depth))
        self._patterns: dict[int, SparsePattern] = {}

        self.apply(init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def pattern(self, length: int) -> SparsePattern:
        """Per-length pattern, fixed for the lifetime of the model and shared by all layers."""
        if length not in self._patterns:
            seed = derive_seed(self.config.pattern_seed, length)
            self._patterns[length] = build_sparse_pattern(
                length, self.config.window_size, self.config.num_random_blocks, seed
            )
        return self._patterns[length]

    def positions(self, length: int) -> torch.Tensor:
        if length <= self.config.max_len:
            return self.pos_embed[:length]
        stretched = F.interpolate(self.pos_embed.T.unsqueeze(0), size=length, mode="linear", align_corners=True)
        return stretched.squeeze(0).T

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """(L, d) or (B, L, d) slice embeddings -> sub-volumetric features of the same shape."""
        length = z.shape[-2]
        x = z + self.positions(length)
        if not self.blocks:
            return x
        allowed = self.pattern(length).as_tensor(z.device)
        for block in self.blocks:
            x = block(x, allowed=allowed)
        return x
