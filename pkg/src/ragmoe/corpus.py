"""Synthetic desk-scale corpora: patch-embedding sets paired with token reports.

Each case draws a latent topic. Patch embeddings cluster around the topic
centroid (plus a per-case offset so individual cases stay distinguishable),
reports are concatenations of topic-owned template sentences, and sentence
embeddings sit near the same centroid — so retrieval from a sentence bank is
genuinely learnable.

On disk a corpus is a directory: one JSON manifest plus one little-endian
binary tensor file per case.
"""

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError, InputError
from .seeding import numpy_rng

_CASE_MAGIC = b"RGC1"
_CASE_VERSION = 1


@dataclass
class EmbeddingSet:
    """Unordered collection of patch-level vectors for one case."""

    case_id: str
    patches: np.ndarray  # (n_patches, d) float32
    d: int

    def validate(self) -> None:
        if self.patches.ndim != 2:
            raise InputError(f"patches must be 2-D, got shape {self.patches.shape}")
        if self.patches.shape[0] < 1:
            raise InputError("embedding set must contain at least one patch")
        if self.patches.shape[1] != self.d:
            raise InputError(
                f"patch dimension {self.patches.shape[1]} does not match d={self.d}"
            )
        if not np.isfinite(self.patches).all():
            raise InputError("embedding set contains non-finite values")


@dataclass
class Case:
    """One dataset row: visual embeddings, report tokens, and bank sentences."""

    case_id: str
    topic: int
    split: str  # train | val | test
    embeddings: EmbeddingSet
    report_tokens: list[str]
    sentences: list[tuple[str, np.ndarray]]  # (text, (d,) float32 embedding)


@dataclass
class CorpusSpec:
    """Knobs for the synthetic generator; generation is a pure function of these."""

    n_cases: int
    d: int
    patches_min: int
    patches_max: int
    vocab_size: int
    report_min: int
    report_max: int
    n_latent_topics: int
    rng_seed: int
    n_val: int = 0
    n_test: int = 0
    topic_weights: list[float] | None = None
    sentences_per_topic: int = 6
    sentence_len_min: int = 3
    sentence_len_max: int = 6
    patch_noise: float = 0.15
    case_offset: float = 0.25
    sentence_noise: float = 0.05

    def validate(self) -> None:
        positive = [
            ("n_cases", self.n_cases),
            ("d", self.d),
            ("patches_min", self.patches_min),
            ("patches_max", self.patches_max),
            ("vocab_size", self.vocab_size),
            ("report_min", self.report_min),
            ("report_max", self.report_max),
            ("n_latent_topics", self.n_latent_topics),
            ("sentences_per_topic", self.sentences_per_topic),
            ("sentence_len_min", self.sentence_len_min),
            ("sentence_len_max", self.sentence_len_max),
        ]
        for name, value in positive:
            if value < 1:
                raise ConfigurationError(name, f"must be >= 1, got {value}")
        if self.patches_max < self.patches_min:
            raise ConfigurationError("patches_max", "must be >= patches_min")
        if self.report_max < self.report_min:
            raise ConfigurationError("report_max", "must be >= report_min")
        if self.sentence_len_max < self.sentence_len_min:
            raise ConfigurationError("sentence_len_max", "must be >= sentence_len_min")
        if self.n_val < 0 or self.n_test < 0:
            raise ConfigurationError("n_val", "split sizes must be >= 0")
        if self.n_val + self.n_test >= self.n_cases:
            raise ConfigurationError(
                "n_val", "n_val + n_test must leave at least one training case"
            )
        words_per_topic = (self.vocab_size - 4) // self.n_latent_topics
        if words_per_topic < self.sentence_len_max:
            raise ConfigurationError(
                "vocab_size",
                f"too small: {words_per_topic} content words per topic but "
                f"sentences need up to {self.sentence_len_max}",
            )
        if self.topic_weights is not None:
            if len(self.topic_weights) != self.n_latent_topics:
                raise ConfigurationError(
                    "topic_weights", "length must equal n_latent_topics"
                )
            if any(w < 0 for w in self.topic_weights) or sum(self.topic_weights) <= 0:
                raise ConfigurationError("topic_weights", "must be a non-negative mass")


def _topic_centroids(rng: np.random.Generator, n_topics: int, d: int) -> np.ndarray:
    """Well-separated unit centroids: orthonormal when n_topics <= d."""
    raw = rng.standard_normal((d, n_topics))
    if n_topics <= d:
        q, _ = np.linalg.qr(raw)
        return q.T.copy()
    vecs = rng.standard_normal((n_topics, d))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def generate_synthetic_corpus(spec: CorpusSpec) -> list[Case]:
    """Deterministic function of spec.rng_seed; see module docstring for shape."""
    spec.validate()
    rng = numpy_rng(spec.rng_seed, "corpus")

    centroids = _topic_centroids(rng, spec.n_latent_topics, spec.d)

    n_words = spec.vocab_size - 4
    words = [f"w{i:03d}" for i in range(n_words)]
    per_topic = n_words // spec.n_latent_topics
    topic_words = [
        words[t * per_topic : (t + 1) * per_topic] for t in range(spec.n_latent_topics)
    ]

    # Fixed sentence templates per topic; each template owns one embedding.
    templates: list[list[tuple[str, list[str], np.ndarray]]] = []
    for t in range(spec.n_latent_topics):
        rows = []
        for _ in range(spec.sentences_per_topic):
            length = int(rng.integers(spec.sentence_len_min, spec.sentence_len_max + 1))
            toks = [str(w) for w in rng.choice(topic_words[t], size=length)]
            emb = (centroids[t] + spec.sentence_noise * rng.standard_normal(spec.d)).astype(
                np.float32
            )
            rows.append((" ".join(toks), toks, emb))
        templates.append(rows)

    weights = None
    if spec.topic_weights is not None:
        total = sum(spec.topic_weights)
        weights = [w / total for w in spec.topic_weights]

    cases = []
    n_train = spec.n_cases - spec.n_val - spec.n_test
    for idx in range(spec.n_cases):
        topic = int(rng.choice(spec.n_latent_topics, p=weights))
        n_patches = int(rng.integers(spec.patches_min, spec.patches_max + 1))
        offset = spec.case_offset * rng.standard_normal(spec.d)
        patches = (
            centroids[topic]
            + offset
            + spec.patch_noise * rng.standard_normal((n_patches, spec.d))
        ).astype(np.float32)

        order = list(rng.permutation(spec.sentences_per_topic))
        report: list[str] = []
        sentences: list[tuple[str, np.ndarray]] = []
        while len(report) < spec.report_min:
            if not order:  # all templates used once; recycle
                order = list(rng.permutation(spec.sentences_per_topic))
            text, toks, emb = templates[topic][int(order.pop(0))]
            report.extend(toks)
            sentences.append((text, emb))
        report = report[: spec.report_max]

        split = "train" if idx < n_train else ("val" if idx < n_train + spec.n_val else "test")
        case_id = f"case_{idx:04d}"
        embeddings = EmbeddingSet(case_id, patches, spec.d)
        embeddings.validate()
        cases.append(Case(case_id, topic, split, embeddings, report, sentences))
    return cases


def split_cases(cases: list[Case]) -> dict[str, list[Case]]:
    out: dict[str, list[Case]] = {"train": [], "val": [], "test": []}
    for case in cases:
        out[case.split].append(case)
    return out


# ---------------------------------------------------------------------------
# dataset directory format


def _write_case_file(path: Path, case: Case, d: int) -> None:
    parts = [
        _CASE_MAGIC,
        struct.pack(
            "<IIIII",
            _CASE_VERSION,
            d,
            case.embeddings.patches.shape[0],
            len(case.sentences),
            len(case.report_tokens),
        ),
        np.ascontiguousarray(case.embeddings.patches, dtype="<f4").tobytes(),
    ]
    if case.sentences:
        sent_emb = np.stack([emb for _, emb in case.sentences])
        parts.append(np.ascontiguousarray(sent_emb, dtype="<f4").tobytes())
    for tok in case.report_tokens:
        raw = tok.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    for text, _ in case.sentences:
        raw = text.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    path.write_bytes(b"".join(parts))


def _read_case_file(path: Path, case_id: str, topic: int, split: str) -> Case:
    data = path.read_bytes()
    if data[:4] != _CASE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {data[:4]!r}")
    version, d, n_patches, n_sent, n_report = struct.unpack_from("<IIIII", data, 4)
    if version != _CASE_VERSION:
        raise DataFormatError(f"{path}: unsupported case-file version {version}")
    off = 4 + 20
    patches = np.frombuffer(data, dtype="<f4", count=n_patches * d, offset=off)
    patches = patches.reshape(n_patches, d).copy()
    off += n_patches * d * 4
    sent_embs = np.frombuffer(data, dtype="<f4", count=n_sent * d, offset=off)
    sent_embs = sent_embs.reshape(n_sent, d).copy()
    off += n_sent * d * 4
    report = []
    for _ in range(n_report):
        (length,) = struct.unpack_from("<H", data, off)
        off += 2
        report.append(data[off : off + length].decode("utf-8"))
        off += length
    sentences = []
    for i in range(n_sent):
        (length,) = struct.unpack_from("<I", data, off)
        off += 4
        text = data[off : off + length].decode("utf-8")
        off += length
        sentences.append((text, sent_embs[i]))
    embeddings = EmbeddingSet(case_id, patches, d)
    embeddings.validate()
    return Case(case_id, topic, split, embeddings, report, sentences)


def save_corpus(corpus_dir: str | Path, spec: CorpusSpec, cases: list[Case]) -> Path:
    """Persist as <dir>/corpus.json plus <dir>/cases/<case_id>.bin; returns manifest path."""
    corpus_dir = Path(corpus_dir)
    (corpus_dir / "cases").mkdir(parents=True, exist_ok=True)
    rows = []
    for case in cases:
        rel = f"cases/{case.case_id}.bin"
        _write_case_file(corpus_dir / rel, case, spec.d)
        rows.append(
            {
                "case_id": case.case_id,
                "file": rel,
                "topic": case.topic,
                "split": case.split,
                "n_patches": int(case.embeddings.patches.shape[0]),
                "n_sentences": len(case.sentences),
                "n_report_tokens": len(case.report_tokens),
            }
        )
    manifest = {
        "format": "ragmoe-corpus",
        "version": 1,
        "spec": asdict(spec),
        "cases": rows,
    }
    manifest_path = corpus_dir / "corpus.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_corpus(corpus_dir: str | Path) -> tuple[CorpusSpec, list[Case]]:
    corpus_dir = Path(corpus_dir)
    manifest_path = corpus_dir / "corpus.json"
    if not manifest_path.exists():
        raise DataFormatError(f"{corpus_dir} does not contain corpus.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "ragmoe-corpus":
        raise DataFormatError(f"{manifest_path}: not a corpus manifest")
    spec = CorpusSpec(**manifest["spec"])
    cases = [
        _read_case_file(corpus_dir / row["file"], row["case_id"], row["topic"], row["split"])
        for row in manifest["cases"]
    ]
    return spec, cases
