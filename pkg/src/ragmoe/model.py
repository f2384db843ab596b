"""Encoder-decoder report generator with retrieval fusion and an MoE decoder.

Pipeline per case: project patches into model space, run the self-attention
encoder over the (unordered, position-free) patch tokens, condense them with
the visual TC layer whose attention scores rank patch saliency, pool the
top-ranked raw patches into region tokens, retrieve region-aware textual
embeddings from the sentence bank, condense those with the textual TC layer,
and hand the decoder a cross-attention memory of
[encoded patches; z_v; z_t; projected region texts] tagged with learned
type embeddings. Decoder blocks are pre-norm with causal self-attention and
their feed-forwards replaced by sparsely-gated MoE (a dense FFN when MoE is
ablated away).
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .condense import DTYPE, FeedForward, MultiHeadAttention, TCLayer, _init_linear
from .config import ModelConfig
from .errors import InputError
from .memory import MemoryBank, RegionToken, Reranker, RetrievalResult
from .memory import pool_regions, retrieve, select_salient_patches
from .moe import (
    ExpertFFN,
    GateDecision,
    GaussianNoise,
    LoadStats,
    NoiseSource,
    Router,
    ZeroNoise,
    load_balance_loss,
    moe_forward,
)
from .seeding import torch_generator
from .vocab import PAD_ID

TYPE_PATCH, TYPE_ZV, TYPE_ZT, TYPE_REGION = 0, 1, 2, 3


def sinusoidal_positions(max_len: int, d: int) -> torch.Tensor:
    position = torch.arange(max_len, dtype=DTYPE).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=DTYPE) * (-math.log(10000.0) / d))
    pe = torch.zeros(max_len, d, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: d // 2])
    return pe


@dataclass
class EncoderState:
    """Decoder cross-attention memory plus retrieval diagnostics."""

    memory: torch.Tensor  # (L, d)
    token_types: list[int]  # TYPE_* tag per memory row
    saliency: torch.Tensor  # (N,) TC attention over patches
    selected: list[int]  # salient patch indices, rank order
    regions: list[RegionToken]
    retrieval: RetrievalResult


@dataclass
class DecoderOutput:
    logits: torch.Tensor  # (T, vocab)
    aux_losses: list[torch.Tensor] = field(default_factory=list)
    load_stats: list[LoadStats] = field(default_factory=list)
    gates: list[GateDecision] = field(default_factory=list)


class EncoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.attn = MultiHeadAttention(d, n_heads, dropout=dropout)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.ffn = FeedForward(d, d_ff, dropout=dropout)

    def init_params(self, gen):
        self.attn.init_params(gen)
        self.ffn.init_params(gen)

    def forward(self, x, dropout_gen=None):
        h = self.ln1(x)
        attn_out, _ = self.attn(h, h, h, dropout_gen=dropout_gen)
        x = x + attn_out
        return x + self.ffn(self.ln2(x), dropout_gen=dropout_gen)


class DecoderLayer(nn.Module):
    """Pre-norm causal self-attention, cross-attention, MoE (or dense) FFN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.self_attn = MultiHeadAttention(d, cfg.n_heads, dropout=cfg.dropout)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.cross_attn = MultiHeadAttention(d, cfg.n_heads, dropout=cfg.dropout)
        self.ln3 = nn.LayerNorm(d, dtype=DTYPE)
        self.use_moe = cfg.use_moe
        if cfg.use_moe:
            self.experts = nn.ModuleList(
                ExpertFFN(d, cfg.d_ff, index=e, dropout=cfg.dropout)
                for e in range(cfg.n_experts)
            )
            self.router = Router(d, cfg.n_experts, cfg.routing_k)
        else:
            self.ffn = FeedForward(d, cfg.d_ff, dropout=cfg.dropout)

    def init_params(self, gen):
        self.self_attn.init_params(gen)
        self.cross_attn.init_params(gen)
        if self.use_moe:
            for expert in self.experts:
                expert.init_params(gen)
            self.router.init_params(gen)
        else:
            self.ffn.init_params(gen)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        causal_mask: torch.Tensor,
        noise_source: NoiseSource | None,
        training: bool,
        dropout_gen=None,
    ) -> tuple[torch.Tensor, LoadStats | None, GateDecision | None]:
        h = self.ln1(x)
        attn_out, _ = self.self_attn(h, h, h, mask=causal_mask, dropout_gen=dropout_gen)
        x = x + attn_out
        cross_out, _ = self.cross_attn(self.ln2(x), memory, memory, dropout_gen=dropout_gen)
        x = x + cross_out
        if self.use_moe:
            y, stats, gate = moe_forward(
                self.ln3(x),
                list(self.experts),
                self.router,
                noise_source=noise_source,
                training=training,
                dropout_gen=dropout_gen,
            )
            return x + y, stats, gate
        return x + self.ffn(self.ln3(x), dropout_gen=dropout_gen), None, None


class ReportGenerator(nn.Module):
    """End-to-end generator; all parameters float64, init seed-controlled."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        if cfg.vocab_size < 5:
            raise InputError(f"vocab_size must be >= 5, got {cfg.vocab_size}")
        if cfg.d_data < 1:
            raise InputError("d_data must be set from the corpus spec")
        self.cfg = cfg
        d = cfg.d
        self.visual_proj = nn.Linear(cfg.d_data, d, dtype=DTYPE)
        self.text_proj = nn.Linear(cfg.d_data, d, dtype=DTYPE)
        self.type_emb = nn.Parameter(torch.zeros(4, d, dtype=DTYPE))
        self.enc_layers = nn.ModuleList(
            EncoderLayer(d, cfg.n_heads, cfg.d_ff, cfg.dropout) for _ in range(cfg.n_enc)
        )
        self.enc_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.tc_visual = TCLayer(d, cfg.n_heads, dropout=cfg.dropout)
        self.tc_text = TCLayer(d, cfg.n_heads, dropout=cfg.dropout)
        self.reranker = Reranker(cfg.d_data) if cfg.use_reranker else None
        self.tok_emb = nn.Parameter(torch.zeros(cfg.vocab_size, d, dtype=DTYPE))
        self.dec_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec))
        self.dec_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.out_proj = nn.Linear(d, cfg.vocab_size, dtype=DTYPE)
        self.register_buffer(
            "positions", sinusoidal_positions(cfg.max_len, d), persistent=False
        )
        self.init_params()
        self.reset_stochastic()

    def init_params(self) -> None:
        gen = torch_generator(self.cfg.seed, "init")
        bound = 1.0 / math.sqrt(self.cfg.d)
        with torch.no_grad():
            self.type_emb.uniform_(-bound, bound, generator=gen)
            self.tok_emb.uniform_(-bound, bound, generator=gen)
        _init_linear(self.visual_proj, gen)
        _init_linear(self.text_proj, gen)
        for layer in self.enc_layers:
            layer.init_params(gen)
        self.tc_visual.init_params(gen)
        self.tc_text.init_params(gen)
        if self.reranker is not None:
            self.reranker.init_params(gen)
        for layer in self.dec_layers:
            layer.init_params(gen)
        _init_linear(self.out_proj, gen)

    def reset_stochastic(self) -> None:
        """Re-arm the dropout/noise streams (training determinism contract)."""
        self._dropout_gen = torch_generator(self.cfg.seed, "dropout")
        self._noise = GaussianNoise(torch_generator(self.cfg.seed, "routing-noise"))

    def _active_noise(self, override: NoiseSource | None) -> NoiseSource | None:
        if override is not None:
            return override
        if not self.cfg.use_noise:
            return ZeroNoise()
        return self._noise if self.training else None

    def _active_dropout_gen(self):
        if self.training and self.cfg.dropout > 0.0:
            return self._dropout_gen
        return None

    # ------------------------------------------------------------------
    def encode_case(self, patches, bank: MemoryBank) -> EncoderState:
        """Visual ingestion, saliency selection, retrieval, memory assembly."""
        if isinstance(patches, np.ndarray):
            patches = torch.from_numpy(np.ascontiguousarray(patches))
        patches = patches.to(DTYPE)
        if patches.dim() != 2 or patches.shape[0] < 1:
            raise InputError("encode_case needs a non-empty (N, d_data) patch array")
        if patches.shape[1] != self.cfg.d_data:
            raise InputError(
                f"patch dim {patches.shape[1]} != configured d_data {self.cfg.d_data}"
            )
        dropout_gen = self._active_dropout_gen()
        x = self.visual_proj(patches)
        for layer in self.enc_layers:
            x = layer(x, dropout_gen=dropout_gen)
        x = self.enc_norm(x)

        z_v, saliency = self.tc_visual(x, dropout_gen=dropout_gen)
        selected = select_salient_patches(saliency, self.cfg.patch_ratio)
        regions = pool_regions(patches[selected], self.cfg.group_size, indices=selected)
        result = retrieve(
            regions, bank, self.cfg.recall_size, self.cfg.final_topk, self.reranker
        )
        region_tokens = self.text_proj(result.aggregated)
        z_t, _ = self.tc_text(region_tokens, dropout_gen=dropout_gen)

        memory = torch.cat(
            [
                x + self.type_emb[TYPE_PATCH],
                (z_v + self.type_emb[TYPE_ZV]).unsqueeze(0),
                (z_t + self.type_emb[TYPE_ZT]).unsqueeze(0),
                region_tokens + self.type_emb[TYPE_REGION],
            ]
        )
        token_types = (
            [TYPE_PATCH] * x.shape[0]
            + [TYPE_ZV, TYPE_ZT]
            + [TYPE_REGION] * region_tokens.shape[0]
        )
        return EncoderState(memory, token_types, saliency, selected, regions, result)

    def decode_prefix(
        self,
        state: EncoderState,
        prefix_ids: list[int] | torch.Tensor,
        noise_source: NoiseSource | None = None,
    ) -> DecoderOutput:
        """Next-token logits at every prefix position (prefix starts at BOS)."""
        if not torch.is_tensor(prefix_ids):
            prefix_ids = torch.tensor(prefix_ids, dtype=torch.long)
        t = prefix_ids.shape[0]
        if t < 1:
            raise InputError("prefix must contain at least BOS")
        if t > self.cfg.max_len:
            raise InputError(f"prefix length {t} exceeds max_len {self.cfg.max_len}")
        if int(prefix_ids.max()) >= self.cfg.vocab_size or int(prefix_ids.min()) < 0:
            raise InputError("prefix contains an out-of-vocabulary id")
        dropout_gen = self._active_dropout_gen()
        noise = self._active_noise(noise_source)
        # sqrt(d) embedding scale keeps token identity dominant over the
        # unit-amplitude sinusoidal positions
        x = self.tok_emb[prefix_ids] * math.sqrt(self.cfg.d) + self.positions[:t]
        causal = torch.tril(torch.ones(t, t, dtype=torch.bool))
        aux_losses, stats_list, gates = [], [], []
        for layer in self.dec_layers:
            x, stats, gate = layer(
                x, state.memory, causal, noise, self.training, dropout_gen
            )
            if stats is not None:
                aux_losses.append(load_balance_loss(stats, self.cfg.n_experts))
                stats_list.append(stats)
                gates.append(gate)
        logits = self.out_proj(self.dec_norm(x))
        return DecoderOutput(logits, aux_losses, stats_list, gates)

    def forward(
        self,
        patches,
        bank: MemoryBank,
        prefix_ids,
        noise_source: NoiseSource | None = None,
    ) -> DecoderOutput:
        state = self.encode_case(patches, bank)
        return self.decode_prefix(state, prefix_ids, noise_source=noise_source)


def nll_loss(
    logits: torch.Tensor, targets: torch.Tensor, pad_mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean over non-pad positions of -log softmax(logits)[target]."""
    if logits.shape[:-1] != targets.shape:
        raise InputError(
            f"logits shape {tuple(logits.shape)} does not align with targets "
            f"{tuple(targets.shape)}"
        )
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_targets = targets.reshape(-1)
    if pad_mask is None:
        mask = flat_targets != PAD_ID
    else:
        mask = pad_mask.reshape(-1).bool()
    if int(mask.sum()) == 0:
        raise InputError("nll_loss over an all-pad batch is undefined")
    logp = torch.log_softmax(flat_logits, dim=-1)
    picked = logp.gather(1, flat_targets.unsqueeze(1)).squeeze(1)
    return -(picked * mask.to(logp.dtype)).sum() / mask.sum()


def total_loss(
    nll: torch.Tensor, aux_losses: list[torch.Tensor], lambda_aux: float
) -> torch.Tensor:
    """Language-model loss plus lambda times the mean MoE balance penalty."""
    if lambda_aux < 0:
        raise InputError(f"lambda must be >= 0, got {lambda_aux}")
    if not aux_losses:
        return nll
    aux = torch.stack(list(aux_losses)).mean()
    return nll + lambda_aux * aux
