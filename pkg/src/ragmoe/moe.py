"""Sparsely-gated mixture-of-experts feed-forward with noisy top-k routing.

Routing: g = W_r h + eps * softplus(W_n h) during training (eps standard
normal per token and expert), g = W_r h at evaluation. The k largest logits
win (ties to the lower expert index), and their softmax becomes the mixture
weights; all other experts get exactly zero and are never evaluated.

The load-balance penalty is E * sum_e f_usage[e] * p_mean[e], where f_usage
counts (token, slot) dispatches per expert normalized by tokens * k (a hard
constant), and p_mean is the mean full-softmax probability over all E logits
(the differentiable half, so gradients reach unselected experts' logits).
"""

from dataclasses import dataclass

import torch
from torch import nn

from .condense import DTYPE, FeedForward, _init_linear
from .errors import InputError


class NoiseSource:
    """Supplies the per-(token, expert) standard-normal draws for routing."""

    def sample(self, shape: tuple[int, ...]) -> torch.Tensor:
        raise NotImplementedError


class GaussianNoise(NoiseSource):
    def __init__(self, gen: torch.Generator):
        self.gen = gen

    def sample(self, shape):
        return torch.randn(shape, generator=self.gen, dtype=DTYPE)


class ZeroNoise(NoiseSource):
    def sample(self, shape):
        return torch.zeros(shape, dtype=DTYPE)


class ReplayNoise(NoiseSource):
    """Records draws on the first pass and replays them verbatim afterwards.

    Lets finite-difference checks re-run a stochastic forward with frozen
    noise. Call ``rewind()`` before each replayed pass.
    """

    def __init__(self, gen: torch.Generator):
        self.gen = gen
        self.recorded: list[torch.Tensor] = []
        self.cursor: int | None = None  # None while recording

    def rewind(self):
        self.cursor = 0

    def sample(self, shape):
        if self.cursor is None:
            draw = torch.randn(shape, generator=self.gen, dtype=DTYPE)
            self.recorded.append(draw)
            return draw
        draw = self.recorded[self.cursor]
        if tuple(draw.shape) != tuple(shape):
            raise InputError(f"replayed noise shape {tuple(draw.shape)} != {tuple(shape)}")
        self.cursor += 1
        return draw


@dataclass
class GateDecision:
    """Per-token sparse routing result over a batch of tokens."""

    logits: torch.Tensor  # (T, E) raw gate logits (noisy in training mode)
    experts: torch.Tensor  # (T, k) selected expert indices, descending logit
    weights: torch.Tensor  # (T, k) softmax over the selected logits
    noise: torch.Tensor | None  # (T, E) draws, None in eval mode


@dataclass
class LoadStats:
    """Dispatch statistics over a token batch; both vectors sum to 1."""

    f_usage: torch.Tensor  # (E,) fraction of (token, slot) dispatches, constant
    p_mean: torch.Tensor  # (E,) mean full-softmax probability, differentiable


class ExpertFFN(nn.Module):
    """One expert: d -> d_ff -> d feed-forward, parameters independent."""

    def __init__(self, d: int, d_ff: int, index: int = 0, dropout: float = 0.0):
        super().__init__()
        self.index = index
        self.net = FeedForward(d, d_ff, dropout=dropout)

    def init_params(self, gen: torch.Generator) -> None:
        self.net.init_params(gen)

    def forward(self, x, dropout_gen=None):
        return self.net(x, dropout_gen=dropout_gen)


class Router(nn.Module):
    """Clean + noise projections producing E gate logits per token."""

    def __init__(self, d: int, n_experts: int, k: int):
        super().__init__()
        if n_experts < 1:
            raise InputError(f"need at least one expert, got {n_experts}")
        if not 1 <= k <= n_experts:
            raise InputError(f"routing k={k} outside 1..{n_experts}")
        self.n_experts = n_experts
        self.k = k
        self.w_clean = nn.Linear(d, n_experts, bias=False, dtype=DTYPE)
        self.w_noise = nn.Linear(d, n_experts, bias=False, dtype=DTYPE)

    def init_params(self, gen: torch.Generator) -> None:
        _init_linear(self.w_clean, gen)
        with torch.no_grad():
            self.w_noise.weight.zero_()  # noise scale starts at softplus(0) = ln 2


def router_logits(
    h: torch.Tensor,
    router: Router,
    noise_source: NoiseSource | None,
    training: bool,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Gate logits for a (T, d) token batch; noise only in training mode."""
    clean = router.w_clean(h)
    if not training or noise_source is None:
        return clean, None
    scale = torch.nn.functional.softplus(router.w_noise(h))
    eps = noise_source.sample(tuple(clean.shape))
    return clean + eps * scale, eps


def topk_gate(logits: torch.Tensor, k: int) -> GateDecision:
    """Select the k largest logits per token (ties to lower index); softmax them."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    n_experts = logits.shape[1]
    if not 1 <= k <= n_experts:
        raise InputError(f"k={k} outside 1..{n_experts}")
    order = torch.argsort(-logits, dim=1, stable=True)  # stable => lower index wins ties
    experts = order[:, :k]
    selected = torch.gather(logits, 1, experts)
    weights = torch.softmax(selected, dim=1)
    return GateDecision(logits=logits, experts=experts, weights=weights, noise=None)


def moe_forward(
    h: torch.Tensor,
    experts: list[ExpertFFN],
    router: Router,
    noise_source: NoiseSource | None = None,
    training: bool = False,
    dropout_gen: torch.Generator | None = None,
) -> tuple[torch.Tensor, LoadStats, GateDecision]:
    """Route a (T, d) batch through its selected experts only.

    Accumulation runs over experts in index order, so summation order is
    fixed and (E=1, k=1) reproduces the single expert bit-for-bit.
    """
    if not experts:
        raise InputError("moe_forward needs at least one expert")
    logits, noise = router_logits(h, router, noise_source, training)
    gate = topk_gate(logits, router.k)
    gate = GateDecision(gate.logits, gate.experts, gate.weights, noise)

    n_tokens = h.shape[0]
    n_experts = router.n_experts
    out = torch.zeros_like(h)
    usage = torch.zeros(n_experts, dtype=DTYPE)
    for e in range(n_experts):
        slot_mask = gate.experts == e  # (T, k)
        token_mask = slot_mask.any(dim=1)
        count = int(token_mask.sum())
        if count == 0:
            continue
        usage[e] = float(slot_mask.sum())
        weight = (gate.weights * slot_mask.to(gate.weights.dtype)).sum(dim=1)
        y = experts[e](h[token_mask], dropout_gen=dropout_gen)
        out[token_mask] += weight[token_mask].unsqueeze(1) * y

    stats = LoadStats(
        f_usage=usage / (n_tokens * router.k),
        p_mean=torch.softmax(gate.logits, dim=1).mean(dim=0),
    )
    return out, stats, gate


def load_balance_loss(stats: LoadStats, n_experts: int) -> torch.Tensor:
    """E * sum_e f_usage[e] * p_mean[e]; equals 1 exactly at uniform usage."""
    return n_experts * (stats.f_usage.detach() * stats.p_mean).sum()
