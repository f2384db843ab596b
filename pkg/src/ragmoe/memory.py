"""Sentence memory bank and the adaptive retrieval pipeline.

Stage 1 is an exhaustive cosine scan over the frozen bank (desk scale — no
ANN index). Stage 2 scores each surviving candidate with a learned MLP over
the concatenated (region, candidate) pair, keeps the top-k, and softmax-
aggregates them into one region-aware embedding. Gradients flow through the
stage-2 scores and the selected candidates only.
"""

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .condense import DTYPE, _init_linear
from .corpus import Case
from .errors import DataFormatError, InputError

_BANK_MAGIC = b"RGB1"
_BANK_VERSION = 1


@dataclass
class MemoryBank:
    """Frozen (sentence, embedding) store; embeddings never update."""

    sentences: list[str]
    embeddings: np.ndarray  # (M, d) float32, write-protected

    def __post_init__(self):
        if len(self.sentences) != self.embeddings.shape[0]:
            raise InputError("sentence/embedding count mismatch")
        if self.embeddings.shape[0] < 1:
            raise InputError("memory bank must hold at least one entry")
        if not np.isfinite(self.embeddings).all():
            raise InputError("memory bank contains non-finite embeddings")
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        self._torch = torch.from_numpy(self.embeddings).to(DTYPE)
        self._norms = torch.linalg.norm(self._torch, dim=1)
        self.embeddings.setflags(write=False)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def as_tensor(self) -> torch.Tensor:
        return self._torch


def build_memory_bank(cases: list[Case]) -> MemoryBank:
    """One entry per sentence, case order then sentence order.

    Callers must pass training-split cases only; validation/test sentences in
    the bank would leak targets into retrieval.
    """
    if not cases:
        raise InputError("cannot build a memory bank from zero cases")
    sentences: list[str] = []
    embeddings: list[np.ndarray] = []
    dim = None
    for case in cases:
        for text, emb in case.sentences:
            if dim is None:
                dim = emb.shape[0]
            elif emb.shape[0] != dim:
                raise InputError(
                    f"sentence embedding dim {emb.shape[0]} != bank dim {dim}"
                )
            sentences.append(text)
            embeddings.append(np.array(emb, dtype=np.float32))
    if not sentences:
        raise InputError("no sentences found in the provided cases")
    return MemoryBank(sentences, np.stack(embeddings))


def save_bank(bank: MemoryBank, path: str | Path) -> Path:
    path = Path(path)
    parts = [
        _BANK_MAGIC,
        struct.pack("<III", _BANK_VERSION, bank.size, bank.dim),
        np.ascontiguousarray(bank.embeddings, dtype="<f4").tobytes(),
    ]
    for text in bank.sentences:
        raw = text.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    path.write_bytes(b"".join(parts))
    return path


def load_bank(path: str | Path) -> MemoryBank:
    data = Path(path).read_bytes()
    if data[:4] != _BANK_MAGIC:
        raise DataFormatError(f"{path}: bad magic {data[:4]!r}")
    version, m, d = struct.unpack_from("<III", data, 4)
    if version != _BANK_VERSION:
        raise DataFormatError(f"{path}: unsupported bank version {version}")
    off = 16
    embeddings = np.frombuffer(data, dtype="<f4", count=m * d, offset=off)
    embeddings = embeddings.reshape(m, d).copy()
    off += m * d * 4
    sentences = []
    for _ in range(m):
        (length,) = struct.unpack_from("<I", data, off)
        off += 4
        sentences.append(data[off : off + length].decode("utf-8"))
        off += length
    return MemoryBank(sentences, embeddings)


@dataclass
class RegionToken:
    """Mean of a group of salient patch embeddings."""

    embedding: torch.Tensor  # (d,)
    member_indices: list[int]


@dataclass
class RetrievalResult:
    """Per-region retrieval record plus the aggregated embeddings."""

    candidates: list[list[int]]  # stage-1 survivors per region
    scores: list[torch.Tensor]  # stage-2 scores over candidates
    selected: list[list[int]]  # top-k bank indices per region
    aggregated: torch.Tensor  # (R, d) region-aware textual embeddings


def select_salient_patches(attn_scores: torch.Tensor, ratio: float) -> list[int]:
    """Indices of the ceil(ratio*N) highest-attention patches.

    Sorted by descending score, ties broken by the lower index.
    """
    if not 0.0 < ratio <= 1.0:
        raise InputError(f"selection ratio must be in (0, 1], got {ratio}")
    scores = attn_scores.detach()
    if scores.dim() != 1 or scores.shape[0] < 1:
        raise InputError("attention scores must be a non-empty vector")
    if not torch.isfinite(scores).all():
        raise InputError("attention scores contain non-finite values")
    n = scores.shape[0]
    budget = math.ceil(ratio * n)
    order = torch.argsort(-scores, stable=True)
    return order[:budget].tolist()


def pool_regions(
    embeddings: torch.Tensor, m: int, indices: list[int] | None = None
) -> list[RegionToken]:
    """Group consecutive rank-ordered embeddings into means of size m.

    A trailing remainder forms a final smaller region rather than being
    dropped.
    """
    if m < 1:
        raise InputError(f"group size must be >= 1, got {m}")
    if embeddings.dim() != 2 or embeddings.shape[0] < 1:
        raise InputError("pool_regions needs a non-empty (k, d) tensor")
    k = embeddings.shape[0]
    if indices is None:
        indices = list(range(k))
    regions = []
    for start in range(0, k, m):
        group = embeddings[start : start + m]
        regions.append(
            RegionToken(group.mean(dim=0), list(indices[start : start + m]))
        )
    return regions


def coarse_recall(region: torch.Tensor, bank: MemoryBank, recall_size: int) -> list[int]:
    """Stage 1: exhaustive cosine top-`recall_size` (ties to the lower index)."""
    if recall_size < 1:
        raise InputError(f"recall_size must be >= 1, got {recall_size}")
    if recall_size > bank.size:
        raise InputError(f"recall_size {recall_size} exceeds bank size {bank.size}")
    if region.shape[-1] != bank.dim:
        raise InputError(f"region dim {region.shape[-1]} != bank dim {bank.dim}")
    query = region.detach().to(DTYPE)
    qnorm = torch.linalg.norm(query)
    if float(qnorm) == 0.0:
        raise InputError("cosine similarity undefined for a zero-norm region")
    if float(bank._norms.min()) == 0.0:
        raise InputError("cosine similarity undefined: bank holds a zero-norm entry")
    sims = (bank.as_tensor() @ query) / (bank._norms * qnorm)
    order = torch.argsort(-sims, stable=True)
    return order[:recall_size].tolist()


class Reranker(nn.Module):
    """Stage-2 scoring MLP: concat(region, candidate) in 2d -> d -> 1."""

    def __init__(self, d: int):
        super().__init__()
        self.lin1 = nn.Linear(2 * d, d, dtype=DTYPE)
        self.lin2 = nn.Linear(d, 1, dtype=DTYPE)

    def init_params(self, gen: torch.Generator) -> None:
        _init_linear(self.lin1, gen)
        _init_linear(self.lin2, gen)

    def forward(self, regions: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
        """Scores for row-aligned (n, d) regions and candidates -> (n,)."""
        if regions.shape != candidates.shape:
            raise InputError(
                f"region/candidate shape mismatch: {tuple(regions.shape)} vs "
                f"{tuple(candidates.shape)}"
            )
        pair = torch.cat([regions, candidates], dim=-1)
        return self.lin2(torch.nn.functional.gelu(self.lin1(pair))).squeeze(-1)


def rerank_score(
    reranker: Reranker, region: torch.Tensor, candidate: torch.Tensor
) -> torch.Tensor:
    """Compatibility score for one (region, candidate) pair; order matters."""
    if region.shape != candidate.shape:
        raise InputError(
            f"region dim {tuple(region.shape)} != candidate dim {tuple(candidate.shape)}"
        )
    return reranker(region.unsqueeze(0), candidate.unsqueeze(0)).squeeze(0)


def _topk_softmax(
    candidates: torch.Tensor, scores: torch.Tensor, k: int
) -> tuple[torch.Tensor, torch.Tensor]:
    if k < 1:
        raise InputError(f"top-k must be >= 1, got {k}")
    if candidates.shape[0] != scores.shape[0]:
        raise InputError("candidate/score count mismatch")
    if k > candidates.shape[0]:
        raise InputError(f"top-k {k} exceeds candidate count {candidates.shape[0]}")
    order = torch.argsort(-scores.detach(), stable=True)[:k]
    weights = torch.softmax(scores[order], dim=0)
    return order, weights @ candidates[order]


def aggregate_topk(
    candidates: torch.Tensor, scores: torch.Tensor, k: int
) -> torch.Tensor:
    """Softmax-weighted sum of the k best-scoring candidates.

    Ties break to the lower candidate position; the output is a convex
    combination of the selected rows.
    """
    _, combined = _topk_softmax(candidates, scores, k)
    return combined


def retrieve(
    regions: list[RegionToken],
    bank: MemoryBank,
    recall_size: int,
    k: int,
    reranker: Reranker | None,
) -> RetrievalResult:
    """Full two-stage retrieval for every region.

    With ``reranker=None`` the stage-1 cosine similarities stand in as
    stage-2 scores (the plain cosine-retrieval arm of the ablation grid).
    """
    if k > recall_size:
        raise InputError(f"final top-k {k} exceeds recall_size {recall_size}")
    bank_t = bank.as_tensor()
    all_cands: list[list[int]] = []
    all_scores: list[torch.Tensor] = []
    all_selected: list[list[int]] = []
    aggregated: list[torch.Tensor] = []
    for region in regions:
        cand_idx = coarse_recall(region.embedding, bank, recall_size)
        cand_emb = bank_t[cand_idx]
        if reranker is not None:
            query = region.embedding.to(DTYPE).unsqueeze(0).expand(len(cand_idx), -1)
            scores = reranker(query, cand_emb)
        else:
            query = region.embedding.detach().to(DTYPE)
            scores = (cand_emb @ query) / (
                torch.linalg.norm(cand_emb, dim=1) * torch.linalg.norm(query)
            )
        order, combined = _topk_softmax(cand_emb, scores, k)
        aggregated.append(combined)
        all_cands.append(cand_idx)
        all_scores.append(scores)
        all_selected.append([cand_idx[int(i)] for i in order])
    return RetrievalResult(
        candidates=all_cands,
        scores=all_scores,
        selected=all_selected,
        aggregated=torch.stack(aggregated),
    )
