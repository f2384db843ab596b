"""Operator surface: data generation, bank building, training, generation,
evaluation, the ablation harness, and the invariant selftest.

Exit codes: 0 success, 1 domain error (bad config or data), 2 usage error.
Every artifact-producing command works inside a run directory and writes one
manifest there.
"""

import argparse
import json
import shutil
import sys
import time
from pathlib import Path

import torch

from . import __version__
from .ablate import AXES, run_ablation, summarize_ablation
from .checkpoint import apply_checkpoint, load_checkpoint
from .config import RunConfig, canonical_text, parse_config, parse_config_text
from .corpus import generate_synthetic_corpus, load_corpus, save_corpus, split_cases
from .decode import decode_corpus
from .errors import DataFormatError, InputError, RagmoeError
from .manifest import RunManifest, file_hash
from .memory import build_memory_bank, load_bank, save_bank
from .metrics import evaluate_corpus
from .model import ReportGenerator
from .train import train
from .vocab import Vocabulary


def _prepare_out(out: str, force: bool) -> Path:
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise InputError(
                f"output directory {out_dir} is not empty; pass --force to overwrite"
            )
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _write_manifest(out_dir, command, config_path, snapshot, seed, inputs, started):
    outputs = sorted(
        str(p.relative_to(out_dir)) for p in out_dir.rglob("*") if p.is_file()
    )
    RunManifest(
        command=command,
        config_path=str(config_path) if config_path else None,
        config_snapshot=snapshot,
        seed=seed,
        input_hashes=inputs,
        outputs=outputs,
        wall_clock=time.monotonic() - started,
    ).write(out_dir)


def _load_model(checkpoint_path: str) -> tuple[ReportGenerator, Vocabulary, RunConfig]:
    snapshot, tensors = load_checkpoint(checkpoint_path)
    cfg = parse_config_text(snapshot)
    model = ReportGenerator(cfg.model)
    apply_checkpoint(model, tensors)
    model.eval()
    vocab_path = Path(checkpoint_path).parent / "vocab.json"
    if not vocab_path.exists():
        raise DataFormatError(f"expected vocabulary next to checkpoint: {vocab_path}")
    vocab = Vocabulary.from_dict(json.loads(vocab_path.read_text()))
    return model, vocab, cfg


def _cmd_gen_data(args) -> int:
    started = time.monotonic()
    cfg = parse_config(args.config)
    cfg.validate()
    out_dir = _prepare_out(args.out, args.force)
    cases = generate_synthetic_corpus(cfg.corpus)
    save_corpus(out_dir, cfg.corpus, cases)
    _write_manifest(
        out_dir,
        "gen-data",
        args.config,
        canonical_text(cfg),
        cfg.seed,
        {"config": file_hash(args.config)},
        started,
    )
    print(f"wrote {len(cases)} cases to {out_dir}")
    return 0


def _cmd_build_bank(args) -> int:
    started = time.monotonic()
    out_dir = _prepare_out(args.out, args.force)
    spec, cases = load_corpus(args.data)
    train_cases = split_cases(cases)["train"]
    bank = build_memory_bank(train_cases)
    save_bank(bank, out_dir / "bank.bin")
    _write_manifest(
        out_dir,
        "build-bank",
        None,
        "",
        spec.rng_seed,
        {"corpus": file_hash(Path(args.data) / "corpus.json")},
        started,
    )
    print(f"bank with {bank.size} sentences from {len(train_cases)} training cases")
    return 0


def _cmd_train(args) -> int:
    started = time.monotonic()
    cfg = parse_config(args.config)
    cfg.validate()
    out_dir = _prepare_out(args.out, args.force)
    _, cases = load_corpus(args.data)
    bank = load_bank(args.bank)
    result = train(cfg, cases, bank, out_dir)
    _write_manifest(
        out_dir,
        "train",
        args.config,
        canonical_text(cfg),
        cfg.seed,
        {
            "config": file_hash(args.config),
            "corpus": file_hash(Path(args.data) / "corpus.json"),
            "bank": file_hash(args.bank),
        },
        started,
    )
    print(
        f"trained {result.steps} steps; final train NLL {result.final_train_nll:.4f}; "
        f"checkpoint at {result.checkpoint_path}"
    )
    return 0


def _split_cases_for(args, cases):
    selected = split_cases(cases)[args.split]
    if not selected:
        raise InputError(f"corpus has no cases in split {args.split!r}")
    return selected


def _cmd_generate(args) -> int:
    started = time.monotonic()
    model, vocab, cfg = _load_model(args.checkpoint)
    out_dir = _prepare_out(args.out, args.force)
    _, cases = load_corpus(args.data)
    bank = load_bank(args.bank)
    selected = _split_cases_for(args, cases)
    beam = args.beam if args.beam is not None else cfg.model.beam
    candidates, references = decode_corpus(
        model, vocab, selected, bank, beam, cfg.model.max_len, cfg.model.length_norm
    )
    rows = [
        {
            "case_id": case.case_id,
            "generated": cand,
            "reference": ref,
        }
        for case, cand, ref in zip(selected, candidates, references)
    ]
    (out_dir / "generated.json").write_text(json.dumps(rows, indent=2) + "\n")
    _write_manifest(
        out_dir,
        "generate",
        None,
        canonical_text(cfg),
        cfg.seed,
        {"checkpoint": file_hash(args.checkpoint), "bank": file_hash(args.bank)},
        started,
    )
    print(f"generated {len(rows)} reports into {out_dir / 'generated.json'}")
    return 0


def _cmd_evaluate(args) -> int:
    started = time.monotonic()
    model, vocab, cfg = _load_model(args.checkpoint)
    out_dir = _prepare_out(args.out, args.force)
    _, cases = load_corpus(args.data)
    bank = load_bank(args.bank)
    selected = _split_cases_for(args, cases)
    beam = args.beam if args.beam is not None else cfg.model.beam
    candidates, references = decode_corpus(
        model, vocab, selected, bank, beam, cfg.model.max_len, cfg.model.length_norm
    )
    report = evaluate_corpus(candidates, references, out_dir / "metrics.json")
    _write_manifest(
        out_dir,
        "evaluate",
        None,
        canonical_text(cfg),
        cfg.seed,
        {"checkpoint": file_hash(args.checkpoint), "bank": file_hash(args.bank)},
        started,
    )
    print(
        f"split={args.split} n={len(selected)} "
        f"BLEU-4 {report.bleu4:.4f} METEOR {report.meteor:.4f} ROUGE-L {report.rouge_l:.4f}"
    )
    return 0


def _cmd_ablate(args) -> int:
    started = time.monotonic()
    cfg = parse_config(args.config)
    cfg.validate()
    out_dir = _prepare_out(args.out, args.force)
    _, cases = load_corpus(args.data)
    bank = load_bank(args.bank)
    values = []
    if args.values:
        for raw in args.values.split(","):
            raw = raw.strip()
            try:
                values.append(int(raw))
            except ValueError:
                try:
                    values.append(float(raw))
                except ValueError:
                    values.append(raw.lower() == "true" if raw.lower() in ("true", "false") else raw)
    summary = run_ablation(cfg, cases, bank, args.axis, values, out_dir)
    _write_manifest(
        out_dir,
        f"ablate --axis {args.axis}",
        args.config,
        canonical_text(cfg),
        cfg.seed,
        {
            "config": file_hash(args.config),
            "corpus": file_hash(Path(args.data) / "corpus.json"),
            "bank": file_hash(args.bank),
        },
        started,
    )
    print(summary.summary_path.read_text(), end="")
    return 0


def _cmd_summarize(args) -> int:
    out = summarize_ablation(args.runs, args.out)
    print(out.read_text(), end="")
    return 0


def _cmd_selftest(args) -> int:
    from . import selftest

    numbers = None
    if args.criteria:
        numbers = [int(tok) for tok in args.criteria.split(",")]
    results = selftest.run_selftest(numbers)
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragmoe",
        description="Retrieval-augmented MoE report generation on synthetic corpora",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("build-bank", help="build the sentence memory bank from the train split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=_cmd_build_bank)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("generate", help="decode reports for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("evaluate", help="decode a split and score all six metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("ablate", help="run one ablation axis and summarize")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--values", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("summarize", help="rebuild a summary table from run directories")
    p.add_argument("--out", required=True)
    p.add_argument("runs", nargs="+")
    p.set_defaults(fn=_cmd_summarize)

    p = sub.add_parser("selftest", help="run the acceptance criteria suite")
    p.add_argument("--criteria", default="", help="comma-separated subset, e.g. 1,2,3")
    p.set_defaults(fn=_cmd_selftest)

    return parser


def run(argv: list[str] | None = None) -> int:
    """Parse and execute; returns the process exit code."""
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except RagmoeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
