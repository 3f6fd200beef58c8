"""
Transformer building blocks shared by the attention map generator and
the explainer: multi-head attention with key exclusion, pre-norm
encoder blocks and Q-Former blocks.
"""

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn


class MultiHeadAttention(nn.Module):
    """
    Scaled dot-product attention over several heads.

    Excluded keys get a logit of -inf before the softmax, so their values
    contribute exactly nothing to the output.

    Args:
        dim: Model dimension
        num_heads: Number of heads, must divide dim
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.o_proj = nn.Linear(dim, dim)
        self.last_weights: Optional[torch.Tensor] = None

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.view(batch, length, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, context: Optional[torch.Tensor] = None,
                key_mask: Optional[torch.Tensor] = None, causal: bool = False) -> torch.Tensor:
        """
        Args:
            query: (batch, Lq, dim)
            context: (batch, Lk, dim), defaults to query (self-attention)
            key_mask: (batch, Lk) bool, True marks keys to exclude
            causal: block keys after each query position (Lq == Lk)

        Returns:
            (batch, Lq, dim)
        """
        context = query if context is None else context
        batch, q_len, _ = query.shape
        k_len = context.shape[1]

        q = self._heads(self.q_proj(query))
        k = self._heads(self.k_proj(context))
        v = self._heads(self.v_proj(context))

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(q_len, k_len, dtype=torch.bool, device=query.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))

        weights = F.softmax(scores, dim=-1)
        self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(batch, q_len, self.dim)
        return self.o_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block"""

    def __init__(self, dim: int, num_heads: int, ff_mult: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, dim * ff_mult)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None,
                causal: bool = False) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), key_mask=key_mask, causal=causal)
        return x + self.ff(self.norm2(x))


class QFormerBlock(nn.Module):
    """
    Query self-attention, cross-attention from queries to image patches,
    then a feed-forward layer.
    """

    def __init__(self, dim: int, num_heads: int, ff_mult: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, dim * ff_mult)

    def forward(self, queries: torch.Tensor, patches: torch.Tensor,
                patch_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        queries = queries + self.self_attn(self.norm1(queries))
        queries = queries + self.cross_attn(self.norm2(queries), context=patches, key_mask=patch_mask)
        return queries + self.ff(self.norm3(queries))
