"""Attention kernel and pre-norm transformer blocks shared by every model component."""
import math
from typing import Optional

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn


def attention(
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        allowed: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Scaled dot-product attention over (..., heads, n, d_head) tensors.

    ``allowed`` is a boolean (n_q, n_k) matrix; keys it marks False get a -inf
    logit and therefore zero weight.
    """
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if allowed is not None:
        logits = logits.masked_fill(~allowed, float("-inf"))
    return torch.softmax(logits, dim=-1) @ v


class Attention(nn.Module):
    """Multi-head attention with separate q/k/v/out projections.

    Keys and values come from ``context`` when given (cross-attention), else from ``x``.
    """

    def __init__(self, dim: int, heads: int, context_dim: Optional[int] = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by heads {heads}")
        context_dim = context_dim or dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(context_dim, dim)
        self.v_proj = nn.Linear(context_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def split_heads(self, t: torch.Tensor) -> torch.Tensor:
        return rearrange(t, "... n (h d) -> ... h n d", h=self.heads)

    def forward(
            self,
            x: torch.Tensor,
            context: Optional[torch.Tensor] = None,
            allowed: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        context = x if context is None else context
        q = self.split_heads(self.q_proj(x))
        k = self.split_heads(self.k_proj(context))
        v = self.split_heads(self.v_proj(context))
        out = attention(q, k, v, allowed)
        return self.out_proj(rearrange(out, "... h n d -> ... n (h d)"))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm self-attention block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, allowed: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), allowed=allowed)
        return x + self.mlp(self.norm2(x))


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
