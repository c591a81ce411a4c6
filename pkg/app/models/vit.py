"""Per-slice ViT encoder and volume encoding into Z_vol."""
from typing import Union

import numpy as np
import torch
from einops import rearrange
from torch import nn

from app.backend.volume import VolumeStack
from app.config import ViTConfig
from app.models.layers import Block, init_weights


def patchify(image: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(..., C, H, W) -> (..., (H/p)(W/p), C p p); row-major patches, channel-first flattening."""
    height, width = image.shape[-2:]
    if patch_size < 1 or height % patch_size or width % patch_size:
        raise ValueError(f"image {height}x{width} is not divisible into {patch_size}px patches")
    return rearrange(image, "... c (h p1) (w p2) -> ... (h w) (c p1 p2)", p1=patch_size, p2=patch_size)


class ViT(nn.Module):
    def __init__(self, config: ViTConfig):
        super().__init__()
        self.config = config
        num_patches = (config.image_size // config.patch_size) ** 2
        self.patch_embed = nn.Linear(3 * config.patch_size**2, config.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(config.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(num_patches + 1, config.embed_dim))
        self.blocks = nn.ModuleList(
            Block(config.embed_dim, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

        self.apply(init_weights)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return the final [CLS] embedding and patch tokens for (B, 3, H, W) or (3, H, W) input."""
        size = self.config.image_size
        if images.shape[-3:] != (3, size, size):
            raise ValueError(f"expected (..., 3, {size}, {size}) images, got {tuple(images.shape)}")
        tokens = self.patch_embed(patchify(images, self.config.patch_size))
        cls = self.cls_token.expand(*tokens.shape[:-2], 1, -1)
        x = torch.cat([cls, tokens], dim=-2) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x[..., 0, :], x[..., 1:, :]


def encode_volume(
        encoder: ViT,
        stack: Union[VolumeStack, np.ndarray, torch.Tensor],
        chunk_size: int = 64,
) -> torch.Tensor:
    """Z_vol: row i is the [CLS] embedding of slice i; slices never see each other."""
    slices = stack.slices if isinstance(stack, VolumeStack) else stack
    slices = torch.as_tensor(slices)
    param = next(encoder.parameters())
    slices = slices.to(device=param.device, dtype=param.dtype)
    rows = [encoder(slices[i:i + chunk_size])[0] for i in range(0, slices.shape[0], chunk_size)]
    return torch.cat(rows, dim=0)
