"""Shared neural building blocks: explicit scaled dot-product attention,
projected bidirectional LSTM stacks, and mask bookkeeping for concatenated
padded sequences.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence


def scaled_dot_product_attention(
    query: torch.Tensor,
    key: torch.Tensor,
    value: torch.Tensor,
    key_mask: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """Softmax(Q K^T / sqrt(d)) V with row-wise softmax over keys.

    Accepts 2D (N, d) or batched 3D (B, N, d) inputs. ``key_mask`` marks
    valid key positions (shape (N_k,) or (B, N_k)); masked keys receive
    zero attention weight. Each weight row sums to 1, so every output row
    is a convex combination of value rows.
    """
    if query.dim() not in (2, 3) or key.dim() != query.dim() or value.dim() != query.dim():
        raise ValueError("query/key/value must all be 2D or all be 3D")
    if query.shape[-1] != key.shape[-1]:
        raise ValueError(f"query dim {query.shape[-1]} != key dim {key.shape[-1]}")
    if key.shape[-2] != value.shape[-2]:
        raise ValueError(
            f"number of keys {key.shape[-2]} != number of values {value.shape[-2]}"
        )
    scale = math.sqrt(query.shape[-1])
    scores = query @ key.transpose(-2, -1) / scale
    if key_mask is not None:
        mask = key_mask.to(torch.bool)
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("attention requires at least one unmasked key per row")
        scores = scores.masked_fill(~mask.unsqueeze(-2), float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    output = weights @ value
    if return_weights:
        return output, weights
    return output


class SelfAttention(nn.Module):
    """Single-head self-attention: learned Q/K/V projections of one sequence."""

    def __init__(self, dim: int):
        super().__init__()
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        out = scaled_dot_product_attention(
            self.query(x), self.key(x), self.value(x), key_mask=mask
        )
        # outputs at padded query positions are meaningless; zero them so
        # downstream concatenation/compaction never sees stale values
        return out * mask.unsqueeze(-1).to(out.dtype)


class BiLstmStack(nn.Module):
    """Stacked bidirectional LSTM layers, each followed by a learned linear
    map from the 2x-wide forward/backward concatenation back to ``hidden``.

    Each layer consumes the previous layer's full (projected) output
    sequence. Sequences are packed by length, so positions past a
    sequence's length stay zero in the output.
    """

    def __init__(self, input_dim: int, hidden: int, layers: int = 2):
        super().__init__()
        self.lstms = nn.ModuleList()
        self.projections = nn.ModuleList()
        dim = input_dim
        for _ in range(layers):
            self.lstms.append(
                nn.LSTM(dim, hidden, batch_first=True, bidirectional=True)
            )
            self.projections.append(nn.Linear(2 * hidden, hidden))
            dim = hidden

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 0:
            raise ValueError("cannot encode a zero-length sequence")
        total = x.shape[1]
        for lstm, proj in zip(self.lstms, self.projections):
            packed = pack_padded_sequence(
                x, lengths.cpu(), batch_first=True, enforce_sorted=False
            )
            out, _ = lstm(packed)
            x, _ = pad_packed_sequence(out, batch_first=True, total_length=total)
            x = proj(x)
        return x


class AttentiveBiLstmEncoder(nn.Module):
    """Two projected bidirectional LSTM layers followed by self-attention.

    Encodes a padded token-embedding sequence to one ``hidden``-wide vector
    per position.
    """

    def __init__(self, input_dim: int, hidden: int, layers: int = 2):
        super().__init__()
        self.stack = BiLstmStack(input_dim, hidden, layers=layers)
        self.attention = SelfAttention(hidden)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        lengths = mask.sum(dim=1).clamp(min=1)
        encoded = self.stack(x, lengths)
        return self.attention(encoded, mask)


def compact_padded(x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Move valid positions to the front of each row, preserving order.

    Concatenating independently padded sequences leaves pad gaps in the
    middle; packed RNNs need the valid prefix contiguous. Stable argsort on
    the inverted mask does exactly that.
    """
    order = torch.argsort((~mask).to(torch.int64), dim=1, stable=True)
    compacted = torch.gather(x, 1, order.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
    new_mask = torch.gather(mask, 1, order)
    return compacted, new_mask


def concat_padded(parts: list[tuple[torch.Tensor, torch.Tensor]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Concatenate (sequence, mask) pairs along time and re-compact."""
    seq = torch.cat([p[0] for p in parts], dim=1)
    mask = torch.cat([p[1] for p in parts], dim=1)
    return compact_padded(seq, mask)
