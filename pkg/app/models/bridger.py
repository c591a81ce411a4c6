"""Bridger: perceiver resampler to a fixed query set, then an MLP into the decoder's embedding space."""
import torch
import torch.nn.functional as F
from torch import nn

from app.config import ResamplerConfig
from app.models.layers import Attention, FeedForward, init_weights


class ResamplerLayer(nn.Module):
    def __init__(self, config: ResamplerConfig, input_dim: int):
        super().__init__()
        dim = config.query_dim
        self.norm_queries = nn.LayerNorm(dim)
        self.norm_features = nn.LayerNorm(input_dim)
        self.cross_attn = Attention(dim, config.heads, context_dim=input_dim)
        self.self_attn = None
        if config.query_self_attention:
            self.norm_self = nn.LayerNorm(dim)
            self.self_attn = Attention(dim, config.heads)
        self.ff = None
        if config.use_feed_forward:
            self.norm_ff = nn.LayerNorm(dim)
            self.ff = FeedForward(dim)

    def forward(self, queries: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        # keys/values come from the features only
        queries = queries + self.cross_attn(self.norm_queries(queries), context=self.norm_features(features))
        if self.self_attn is not None:
            queries = queries + self.self_attn(self.norm_self(queries))
        if self.ff is not None:
            queries = queries + self.ff(self.norm_ff(queries))
        return queries


class PerceiverResampler(nn.Module):
    def __init__(self, config: ResamplerConfig, input_dim: int):
        super().__init__()
        self.config = config
        self.queries = nn.Parameter(torch.zeros(config.num_queries, config.query_dim))
        self.layers = nn.ModuleList(ResamplerLayer(config, input_dim) for _ in range(config.depth))
        self.norm = nn.LayerNorm(config.query_dim)

        self.apply(init_weights)
        nn.init.trunc_normal_(self.queries, std=0.02)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(L, d) or (B, L, d) features -> (n_q, d_q) or (B, n_q, d_q), for any L >= 1."""
        if features.shape[-2] < 1:
            raise ValueError("resampler needs at least one input row")
        queries = self.queries.expand(*features.shape[:-2], *self.queries.shape)
        for layer in self.layers:
            queries = layer(queries, features)
        return self.norm(queries)


class LMProjector(nn.Module):
    """Linear, ReLU, Linear."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class Bridger(nn.Module):
    def __init__(self, config: ResamplerConfig, input_dim: int, lm_dim: int):
        super().__init__()
        self.resampler = PerceiverResampler(config, input_dim)
        self.projector = LMProjector(config.query_dim, lm_dim)
        self.projector.apply(init_weights)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Visual prompt Q, n_q x d_lm regardless of the input length."""
        return self.projector(self.resampler(features))
