"""Token condensation: one learnable query cross-attending over a set,
followed by a residual feed-forward, yielding a single summary vector.

The attention/FFN data path is norm-free (z = FFN(h) + h with h the raw
attention output), so degenerate cases collapse exactly: a single key/value
with identity projections passes the value straight through. Only the
learnable query is layer-normalized before attending.
"""

import math

import torch
from torch import nn

from .errors import InputError

DTYPE = torch.float64


def _init_linear(linear: nn.Linear, gen: torch.Generator) -> None:
    """Scaled uniform fan-in init, seed-controlled."""
    fan_in = linear.weight.shape[1]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        linear.weight.uniform_(-bound, bound, generator=gen)
        if linear.bias is not None:
            linear.bias.zero_()


def dropout_mask(x: torch.Tensor, p: float, gen: torch.Generator) -> torch.Tensor:
    """Inverted dropout with an explicit generator (deterministic under seed)."""
    if p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with bias-free d x d projections.

    Operates on unbatched (seq, d) tensors; returns the output and the
    softmax weights averaged over heads.
    """

    def __init__(self, d: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d % n_heads != 0:
            raise InputError(f"model dim {d} not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.dropout = dropout
        self.w_q = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.w_k = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.w_v = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.w_o = nn.Linear(d, d, bias=False, dtype=DTYPE)

    def init_params(self, gen: torch.Generator) -> None:
        for lin in (self.w_q, self.w_k, self.w_v, self.w_o):
            _init_linear(lin, gen)

    def set_identity(self) -> None:
        """Identity projections, used by tests of degenerate attention."""
        with torch.no_grad():
            for lin in (self.w_q, self.w_k, self.w_v, self.w_o):
                lin.weight.copy_(torch.eye(self.d, dtype=DTYPE))

    def forward(
        self,
        query: torch.Tensor,
        keys: torch.Tensor,
        values: torch.Tensor,
        mask: torch.Tensor | None = None,
        dropout_gen: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if keys.shape[0] == 0:
            raise InputError("attention requires at least one key")
        if keys.shape[0] != values.shape[0]:
            raise InputError(
                f"key count {keys.shape[0]} != value count {values.shape[0]}"
            )
        for name, t in (("query", query), ("keys", keys), ("values", values)):
            if t.shape[-1] != self.d:
                raise InputError(f"{name} dim {t.shape[-1]} does not match d={self.d}")
        tq, tk = query.shape[0], keys.shape[0]
        q = self.w_q(query).view(tq, self.n_heads, self.d_head).transpose(0, 1)
        k = self.w_k(keys).view(tk, self.n_heads, self.d_head).transpose(0, 1)
        v = self.w_v(values).view(tk, self.n_heads, self.d_head).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.d_head)  # (H, tq, tk)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        if dropout_gen is not None and self.dropout > 0.0:
            dropped = dropout_mask(attn, self.dropout, dropout_gen)
        else:
            dropped = attn
        out = (dropped @ v).transpose(0, 1).reshape(tq, self.d)
        return self.w_o(out), attn.mean(dim=0)


def cross_attend(
    query: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    params: MultiHeadAttention,
) -> torch.Tensor:
    """Attention as a pure op; a 1-D query yields a 1-D output."""
    single = query.dim() == 1
    q = query.unsqueeze(0) if single else query
    out, _ = params(q, keys, values)
    return out.squeeze(0) if single else out


class FeedForward(nn.Module):
    """Two-layer GELU feed-forward d -> hidden -> d."""

    def __init__(self, d: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.lin1 = nn.Linear(d, hidden, dtype=DTYPE)
        self.lin2 = nn.Linear(hidden, d, dtype=DTYPE)
        self.dropout = dropout

    def init_params(self, gen: torch.Generator) -> None:
        _init_linear(self.lin1, gen)
        _init_linear(self.lin2, gen)

    def forward(
        self, x: torch.Tensor, dropout_gen: torch.Generator | None = None
    ) -> torch.Tensor:
        h = torch.nn.functional.gelu(self.lin1(x))
        if dropout_gen is not None and self.dropout > 0.0:
            h = dropout_mask(h, self.dropout, dropout_gen)
        return self.lin2(h)


class TCLayer(nn.Module):
    """Condenses a set of d-vectors into one via a learnable query token."""

    def __init__(self, d: int, n_heads: int, ffn_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.token = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.ln_q = nn.LayerNorm(d, dtype=DTYPE)
        self.attn = MultiHeadAttention(d, n_heads, dropout=dropout)
        self.ffn = FeedForward(d, ffn_mult * d, dropout=dropout)

    def init_params(self, gen: torch.Generator) -> None:
        bound = 1.0 / math.sqrt(self.token.shape[0])
        with torch.no_grad():
            self.token.uniform_(-bound, bound, generator=gen)
        self.attn.init_params(gen)
        self.ffn.init_params(gen)

    def forward(
        self,
        embeddings: torch.Tensor,
        dropout_gen: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (summary vector, per-element attention weights)."""
        if embeddings.dim() != 2 or embeddings.shape[0] == 0:
            raise InputError("condense requires a non-empty (n, d) embedding set")
        q = self.ln_q(self.token).unsqueeze(0)
        h, weights = self.attn(q, embeddings, embeddings, dropout_gen=dropout_gen)
        z = self.ffn(h, dropout_gen=dropout_gen) + h
        return z.squeeze(0), weights.squeeze(0)


def condense(layer: TCLayer, embeddings: torch.Tensor) -> torch.Tensor:
    """Set -> single summary vector (deterministic, permutation-invariant)."""
    z, _ = layer(embeddings)
    return z
