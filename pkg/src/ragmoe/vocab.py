"""Whitespace-token vocabulary with fixed reserved control ids."""

from collections import Counter
from dataclasses import dataclass, field

from .errors import InputError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass
class ReportSequence:
    """Ordered token-id sequence; length excludes BOS/EOS bookkeeping."""

    ids: list[int]

    def __post_init__(self):
        if len(self.ids) < 1:
            raise InputError("report sequence must contain at least one token")
        if any(i < 0 for i in self.ids):
            raise InputError("report sequence contains a negative id")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Vocabulary:
    """Bijective token<->id map; ids 0..3 are reserved for control tokens."""

    token_to_id: dict[str, int]
    id_to_token: list[str] = field(repr=False)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_for(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.id_to_token):
            raise InputError(f"token id {token_id} is outside the vocabulary table")
        return self.id_to_token[token_id]

    def to_dict(self) -> dict:
        return {"tokens": self.id_to_token}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        id_to_token = list(data["tokens"])
        if id_to_token[: len(RESERVED_TOKENS)] != list(RESERVED_TOKENS):
            raise InputError("vocabulary table does not start with the reserved tokens")
        return cls({tok: i for i, tok in enumerate(id_to_token)}, id_to_token)


def build_vocab(reports: list[list[str]], min_freq: int = 1) -> Vocabulary:
    """Assign ids by descending corpus frequency (ties lexicographic), from 4 up.

    Tokens below ``min_freq`` are left out and encode to UNK.
    """
    if min_freq < 1:
        raise InputError(f"min_freq must be >= 1, got {min_freq}")
    if not reports:
        raise InputError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for report in reports:
        counts.update(report)
    if not counts:
        raise InputError("cannot build a vocabulary: all reports are empty")
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    id_to_token = list(RESERVED_TOKENS) + kept
    return Vocabulary({tok: i for i, tok in enumerate(id_to_token)}, id_to_token)


def encode_report(vocab: Vocabulary, tokens: list[str]) -> ReportSequence:
    """Map text tokens to ids; out-of-vocabulary tokens become UNK."""
    if not tokens:
        raise InputError("cannot encode an empty token list")
    return ReportSequence([vocab.id_for(tok) for tok in tokens])


def decode_tokens(vocab: Vocabulary, ids: list[int]) -> list[str]:
    """Exact inverse of encode on in-vocabulary ids; reserved ids render literally."""
    return [vocab.token_for(i) for i in ids]
