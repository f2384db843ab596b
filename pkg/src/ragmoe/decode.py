"""Greedy and beam-search decoding over a next-token log-probability function.

Both decoders consume ``logprob_fn(prefix_ids) -> (vocab,) float64 array``
where the prefix always starts with BOS. Scores are summed log-probabilities
of the emitted content tokens, plus the EOS emission when a hypothesis
terminates. Ties break toward the lower token id during expansion and toward
the lexicographically smaller token sequence at final selection.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import InputError
from .memory import MemoryBank
from .vocab import BOS_ID, EOS_ID

LogprobFn = Callable[[list[int]], np.ndarray]


@dataclass
class DecodedSequence:
    tokens: list[int]  # content ids, BOS/EOS excluded
    score: float  # summed log-probability (incl. EOS when terminated)
    terminated: bool  # True when EOS was emitted before max_len

    def normalized_score(self) -> float:
        return self.score / max(len(self.tokens), 1)


def model_logprob_fn(model, state) -> LogprobFn:
    """Adapt a ReportGenerator + EncoderState to the decoder interface."""

    def fn(prefix: list[int]) -> np.ndarray:
        with torch.no_grad():
            out = model.decode_prefix(state, prefix)
            return torch.log_softmax(out.logits[-1], dim=-1).numpy()

    return fn


def greedy_decode(
    logprob_fn: LogprobFn,
    max_len: int,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
) -> DecodedSequence:
    """Argmax token per step from BOS until EOS or max_len content tokens."""
    if max_len < 1:
        raise InputError(f"max_len must be >= 1, got {max_len}")
    tokens: list[int] = []
    score = 0.0
    while len(tokens) < max_len:
        logp = logprob_fn([bos_id] + tokens)
        best = int(np.argmax(logp))  # first maximum: lower id wins ties
        score += float(logp[best])
        if best == eos_id:
            return DecodedSequence(tokens, score, True)
        tokens.append(best)
    return DecodedSequence(tokens, score, False)


@dataclass
class _Hypothesis:
    tokens: list[int]
    score: float
    terminated: bool


def beam_search(
    logprob_fn: LogprobFn,
    max_len: int,
    beam: int = 3,
    length_norm: bool = True,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
) -> DecodedSequence:
    """Standard beam search; finished hypotheses compared by normalized score.

    With beam=1 this reduces exactly to greedy decoding.
    """
    if beam < 1:
        raise InputError(f"beam must be >= 1, got {beam}")
    if max_len < 1:
        raise InputError(f"max_len must be >= 1, got {max_len}")
    alive = [_Hypothesis([], 0.0, False)]
    finished: list[_Hypothesis] = []
    for _ in range(max_len):
        if not alive:
            break
        candidates: list[_Hypothesis] = []
        for hyp in alive:
            logp = logprob_fn([bos_id] + hyp.tokens)
            order = np.lexsort((np.arange(len(logp)), -logp))[:beam]
            for tok in order:
                tok = int(tok)
                cand_score = hyp.score + float(logp[tok])
                if tok == eos_id:
                    finished.append(_Hypothesis(hyp.tokens, cand_score, True))
                else:
                    candidates.append(
                        _Hypothesis(hyp.tokens + [tok], cand_score, False)
                    )
        candidates.sort(key=lambda h: (-h.score, h.tokens))
        alive = candidates[:beam]
    finished.extend(alive)  # max_len-truncated hypotheses compete as-is

    def final_key(h: _Hypothesis):
        norm = h.score / max(len(h.tokens), 1) if length_norm else h.score
        return (-norm, h.tokens)

    finished.sort(key=final_key)
    best = finished[0]
    return DecodedSequence(best.tokens, best.score, best.terminated)


def decode_case(
    model,
    patches,
    bank: MemoryBank,
    beam: int,
    max_len: int,
    length_norm: bool = True,
) -> DecodedSequence:
    """Encode one case and decode it (beam=1 means greedy)."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            state = model.encode_case(patches, bank)
        fn = model_logprob_fn(model, state)
        if beam == 1:
            return greedy_decode(fn, max_len)
        return beam_search(fn, max_len, beam=beam, length_norm=length_norm)
    finally:
        if was_training:
            model.train()


def decode_corpus(
    model,
    vocab,
    cases,
    bank: MemoryBank,
    beam: int,
    max_len: int,
    length_norm: bool = True,
) -> tuple[list[list[str]], list[list[str]]]:
    """Decode every case to text tokens, paired with its reference report."""
    from .vocab import decode_tokens

    candidates, references = [], []
    for case in cases:
        seq = decode_case(
            model, case.embeddings.patches, bank, beam, max_len, length_norm
        )
        candidates.append(decode_tokens(vocab, seq.tokens))
        references.append(case.report_tokens)
    return candidates, references
