"""Run configuration: flat key=value files, desk/paper profiles, canonical text.

A config file is a tree of dotted keys (`model.experts = 4`), one per line,
with `#` comments. `profile = desk | paper` selects the baseline; explicit
keys override it. The resolved config serializes to a canonical sorted
key=value text whose sha256 identifies the run.
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import CorpusSpec
from .errors import ConfigurationError

# paper-scale architecture values; desk profile shrinks the model and corpus
# so everything trains on a CPU in seconds.
_PROFILES = {
    "paper": {
        "corpus.cases": 64,
        "corpus.dim": 512,
        "corpus.patches_min": 64,
        "corpus.patches_max": 128,
        "corpus.vocab_size": 400,
        "corpus.report_min": 12,
        "corpus.report_max": 32,
        "corpus.topics": 4,
        "model.embed_dim": 512,
        "model.ffn_dim": 2048,
        "model.group_size": 20,
        "model.recall_size": 20,
        "model.max_len": 128,
    },
    "desk": {
        "corpus.cases": 16,
        "corpus.dim": 32,
        "corpus.patches_min": 24,
        "corpus.patches_max": 48,
        "corpus.vocab_size": 200,
        "corpus.report_min": 8,
        "corpus.report_max": 16,
        "corpus.topics": 4,
        "model.embed_dim": 64,
        "model.ffn_dim": 256,
        "model.group_size": 4,
        "model.recall_size": 8,
        "model.max_len": 64,
    },
}


@dataclass
class ModelConfig:
    """Architecture, retrieval, and training knobs for the report generator."""

    d: int = 512
    n_heads: int = 4
    n_enc: int = 3
    n_dec: int = 3
    d_ff: int = 2048
    n_experts: int = 4
    routing_k: int = 2
    lambda_aux: float = 0.01
    recall_size: int = 20
    final_topk: int = 3
    patch_ratio: float = 0.4
    group_size: int = 20
    dropout: float = 0.1
    max_len: int = 128
    vocab_size: int = 0  # resolved from the built vocabulary at training time
    d_data: int = 0  # resolved from the corpus spec
    seed: int = 0
    use_reranker: bool = True
    use_moe: bool = True
    use_noise: bool = True
    beam: int = 3
    length_norm: bool = True
    lr: float = 1e-4
    weight_decay: float = 5e-5
    batch_size: int = 4
    epochs: int = 100

    def validate(self) -> None:
        checks = [
            ("embed_dim", self.d, self.d >= 1, "must be >= 1"),
            ("heads", self.n_heads, self.n_heads >= 1, "must be >= 1"),
            (
                "embed_dim",
                self.d,
                self.n_heads >= 1 and self.d % max(self.n_heads, 1) == 0,
                f"must be divisible by heads={self.n_heads}",
            ),
            ("enc_layers", self.n_enc, self.n_enc >= 0, "must be >= 0"),
            ("dec_layers", self.n_dec, self.n_dec >= 1, "must be >= 1"),
            ("ffn_dim", self.d_ff, self.d_ff >= 1, "must be >= 1"),
            ("experts", self.n_experts, self.n_experts >= 1, "must be >= 1"),
            (
                "routing_k",
                self.routing_k,
                1 <= self.routing_k <= max(self.n_experts, 1),
                f"must be in 1..experts={self.n_experts}",
            ),
            ("lambda", self.lambda_aux, self.lambda_aux >= 0, "must be >= 0"),
            ("recall_size", self.recall_size, self.recall_size >= 1, "must be >= 1"),
            (
                "final_topk",
                self.final_topk,
                1 <= self.final_topk <= self.recall_size,
                f"must be in 1..recall_size={self.recall_size}",
            ),
            ("patch_ratio", self.patch_ratio, 0 < self.patch_ratio <= 1, "must be in (0, 1]"),
            ("group_size", self.group_size, self.group_size >= 1, "must be >= 1"),
            ("dropout", self.dropout, 0 <= self.dropout < 1, "must be in [0, 1)"),
            ("max_len", self.max_len, self.max_len >= 2, "must be >= 2"),
            ("beam", self.beam, self.beam >= 1, "must be >= 1"),
            ("lr", self.lr, self.lr > 0, "must be > 0"),
            ("weight_decay", self.weight_decay, self.weight_decay >= 0, "must be >= 0"),
            ("batch_size", self.batch_size, self.batch_size >= 1, "must be >= 1"),
            ("epochs", self.epochs, self.epochs >= 1, "must be >= 1"),
        ]
        for name, value, ok, rule in checks:
            if not ok:
                raise ConfigurationError(name, f"{rule}, got {value}")


@dataclass
class RunConfig:
    seed: int = 7
    profile: str = "desk"
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(
        n_cases=16, d=32, patches_min=24, patches_max=48, vocab_size=200,
        report_min=8, report_max=16, n_latent_topics=4, rng_seed=7,
    ))
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        self.corpus.validate()
        self.model.validate()
        if self.corpus.report_max > self.model.max_len - 2:
            raise ConfigurationError(
                "report_max", "reports plus BOS/EOS must fit in model max_len"
            )


# file key <-> attribute maps
_CORPUS_KEYS = {
    "cases": "n_cases",
    "dim": "d",
    "patches_min": "patches_min",
    "patches_max": "patches_max",
    "vocab_size": "vocab_size",
    "report_min": "report_min",
    "report_max": "report_max",
    "topics": "n_latent_topics",
    "val": "n_val",
    "test": "n_test",
    "topic_weights": "topic_weights",
    "sentences_per_topic": "sentences_per_topic",
    "sentence_len_min": "sentence_len_min",
    "sentence_len_max": "sentence_len_max",
    "patch_noise": "patch_noise",
    "case_offset": "case_offset",
    "sentence_noise": "sentence_noise",
}
_MODEL_KEYS = {
    "embed_dim": "d",
    "heads": "n_heads",
    "enc_layers": "n_enc",
    "dec_layers": "n_dec",
    "ffn_dim": "d_ff",
    "experts": "n_experts",
    "routing_k": "routing_k",
    "lambda": "lambda_aux",
    "recall_size": "recall_size",
    "final_topk": "final_topk",
    "patch_ratio": "patch_ratio",
    "group_size": "group_size",
    "dropout": "dropout",
    "max_len": "max_len",
    "use_reranker": "use_reranker",
    "use_moe": "use_moe",
    "use_noise": "use_noise",
    "vocab_size": "vocab_size",  # resolved at training time; snapshots carry it
    "data_dim": "d_data",
}
_TRAIN_KEYS = {
    "lr": "lr",
    "weight_decay": "weight_decay",
    "batch_size": "batch_size",
    "epochs": "epochs",
}
_DECODE_KEYS = {"beam": "beam", "length_norm": "length_norm"}


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in raw:
        return [_parse_value(part) for part in raw.split(",")]
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text: str) -> RunConfig:
    entries: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}", f"expected key = value, got {line!r}")
        key, raw = stripped.split("=", 1)
        entries[key.strip()] = _parse_value(raw)

    profile = str(entries.pop("profile", "desk"))
    if profile not in _PROFILES:
        raise ConfigurationError("profile", f"unknown profile {profile!r}")
    merged = dict(_PROFILES[profile])
    merged.update(entries)

    seed = merged.pop("seed", 7)
    if not isinstance(seed, int):
        raise ConfigurationError("seed", f"must be an integer, got {seed!r}")

    cfg = RunConfig(seed=seed, profile=profile)
    cfg.corpus.rng_seed = seed
    cfg.model.seed = seed
    tables = {
        "corpus": (_CORPUS_KEYS, cfg.corpus),
        "model": (_MODEL_KEYS, cfg.model),
        "train": (_TRAIN_KEYS, cfg.model),
        "decode": (_DECODE_KEYS, cfg.model),
    }
    for key, value in merged.items():
        if "." not in key:
            raise ConfigurationError(key, "unknown top-level key")
        section, name = key.split(".", 1)
        if section not in tables:
            raise ConfigurationError(key, f"unknown section {section!r}")
        keymap, target = tables[section]
        if name not in keymap:
            raise ConfigurationError(key, "unknown key")
        setattr(target, keymap[name], value)
    if cfg.model.d_data == 0:
        cfg.model.d_data = cfg.corpus.d
    return cfg


def parse_config(path: str | Path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def canonical_text(cfg: RunConfig) -> str:
    """Resolved config as sorted key=value lines (stable across reruns)."""
    rows = {"profile": cfg.profile, "seed": cfg.seed}
    for key, attr in _CORPUS_KEYS.items():
        rows[f"corpus.{key}"] = getattr(cfg.corpus, attr)
    for key, attr in _MODEL_KEYS.items():
        rows[f"model.{key}"] = getattr(cfg.model, attr)
    for key, attr in _TRAIN_KEYS.items():
        rows[f"train.{key}"] = getattr(cfg.model, attr)
    for key, attr in _DECODE_KEYS.items():
        rows[f"decode.{key}"] = getattr(cfg.model, attr)
    return "\n".join(f"{k} = {_format_value(v)}" for k, v in sorted(rows.items())) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()
