"""End-to-end training: Adam, per-step structured logs, best-val checkpoint.

Fully deterministic under a fixed seed: batch order, dropout masks, and
routing noise all come from labeled streams derived from the root seed, and
torch runs single-threaded so reduction order is pinned.
"""

import json
import math
import time
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import RunConfig, canonical_text
from .corpus import Case, split_cases
from .errors import InputError, TrainingDiverged
from .memory import MemoryBank
from .model import ReportGenerator, nll_loss, total_loss
from .seeding import numpy_rng
from .vocab import BOS_ID, EOS_ID, Vocabulary, build_vocab, encode_report


@dataclass
class TrainResult:
    model: ReportGenerator
    vocab: Vocabulary
    checkpoint_path: Path | None
    log_path: Path | None
    history: list[dict] = dataclass_field(default_factory=list)
    steps: int = 0
    final_train_nll: float = float("nan")
    best_val_nll: float = float("nan")
    final_usage: list[float] = dataclass_field(default_factory=list)


def _examples(cases: list[Case], vocab: Vocabulary) -> list[tuple[Case, list[int], list[int]]]:
    out = []
    for case in cases:
        ids = encode_report(vocab, case.report_tokens).ids
        out.append((case, [BOS_ID] + ids, ids + [EOS_ID]))
    return out


def _epoch_nll(model: ReportGenerator, examples, bank: MemoryBank) -> float:
    """Eval-mode mean NLL per token over a split."""
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for case, prefix, target in examples:
            out = model(case.embeddings.patches, bank, prefix)
            logp = torch.log_softmax(out.logits, dim=-1)
            picked = logp.gather(1, torch.tensor(target).unsqueeze(1))
            total += float(-picked.sum())
            count += len(target)
    return total / count


def train(
    cfg: RunConfig,
    cases: list[Case],
    bank: MemoryBank,
    run_dir: str | Path | None = None,
    stop_at_nll: float | None = None,
) -> TrainResult:
    """Adam training over the train split with per-epoch validation.

    Retains the best-validation checkpoint (final state when there is no
    validation split). Raises TrainingDiverged on a non-finite loss.
    """
    torch.set_num_threads(1)
    splits = split_cases(cases)
    train_cases = splits["train"]
    val_cases = splits["val"]
    if not train_cases:
        raise InputError("training requires at least one train-split case")
    too_long = max(len(c.report_tokens) for c in train_cases) + 1
    if too_long > cfg.model.max_len:
        raise InputError(
            f"longest report plus EOS ({too_long}) exceeds max_len {cfg.model.max_len}"
        )

    vocab = build_vocab([c.report_tokens for c in train_cases], min_freq=1)
    cfg.model.vocab_size = len(vocab)
    cfg.model.d_data = cases[0].embeddings.d
    model = ReportGenerator(cfg.model)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.model.lr, weight_decay=cfg.model.weight_decay
    )

    train_examples = _examples(train_cases, vocab)
    val_examples = _examples(val_cases, vocab)
    batch_rng = numpy_rng(cfg.seed, "batches")

    run_dir = Path(run_dir) if run_dir is not None else None
    log_handle = None
    log_path = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "train_log.jsonl"
        log_handle = log_path.open("w")

    n_experts = cfg.model.n_experts
    history: list[dict] = []
    best_val = math.inf
    best_state: dict | None = None
    step = 0
    final_train_nll = math.nan
    final_usage = [math.nan] * n_experts
    start = time.monotonic()

    try:
        for epoch in range(cfg.model.epochs):
            model.train()
            order = batch_rng.permutation(len(train_examples))
            epoch_nll_sum, epoch_tok = 0.0, 0
            epoch_usage: list[np.ndarray] = []
            for lo in range(0, len(order), cfg.model.batch_size):
                batch = [train_examples[i] for i in order[lo : lo + cfg.model.batch_size]]
                optimizer.zero_grad()
                nll_sum = torch.zeros((), dtype=torch.float64)
                n_tok = 0
                aux_terms = []
                usage_rows, pmean_rows = [], []
                for case, prefix, target in batch:
                    try:
                        out = model(case.embeddings.patches, bank, prefix)
                    except InputError:
                        # non-finite parameters turn forward-pass validation
                        # errors into divergence, not input problems
                        if any(
                            not torch.isfinite(p).all() for p in model.parameters()
                        ):
                            raise TrainingDiverged(step + 1, math.nan) from None
                        raise
                    tgt = torch.tensor(target)
                    nll_sum = nll_sum + nll_loss(out.logits, tgt) * len(target)
                    n_tok += len(target)
                    aux_terms.extend(out.aux_losses)
                    for stats in out.load_stats:
                        usage_rows.append(stats.f_usage.numpy())
                        pmean_rows.append(stats.p_mean.detach().numpy())
                nll = nll_sum / n_tok
                loss = total_loss(nll, aux_terms, cfg.model.lambda_aux)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(step, float(loss))
                loss.backward()
                optimizer.step()
                step += 1

                aux_val = (
                    float(torch.stack([a.detach() for a in aux_terms]).mean())
                    if aux_terms
                    else 0.0
                )
                usage = (
                    np.stack(usage_rows).mean(axis=0)
                    if usage_rows
                    else np.zeros(n_experts)
                )
                pmean = (
                    np.stack(pmean_rows).mean(axis=0)
                    if pmean_rows
                    else np.zeros(n_experts)
                )
                epoch_usage.append(usage)
                epoch_nll_sum += float(nll.detach()) * n_tok
                epoch_tok += n_tok
                if log_handle is not None:
                    record = {
                        "step": step,
                        "epoch": epoch,
                        "nll": float(nll.detach()),
                        "aux": aux_val,
                        "total": float(loss.detach()),
                        "lr": cfg.model.lr,
                        "f_usage": [float(v) for v in usage],
                        "p_mean": [float(v) for v in pmean],
                        "wall": time.monotonic() - start,
                    }
                    log_handle.write(json.dumps(record) + "\n")

            final_train_nll = epoch_nll_sum / epoch_tok
            if epoch_usage:
                final_usage = [float(v) for v in np.stack(epoch_usage).mean(axis=0)]
            row = {"epoch": epoch, "train_nll": final_train_nll}
            if val_examples:
                val_nll = _epoch_nll(model, val_examples, bank)
                row["val_nll"] = val_nll
                if val_nll < best_val:
                    best_val = val_nll
                    best_state = {
                        k: v.detach().clone() for k, v in model.state_dict().items()
                    }
            row["f_usage"] = final_usage
            history.append(row)
            if log_handle is not None:
                log_handle.flush()
            if stop_at_nll is not None and final_train_nll < stop_at_nll:
                break
    finally:
        if log_handle is not None:
            log_handle.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()

    checkpoint_path = None
    if run_dir is not None:
        checkpoint_path = run_dir / "checkpoint.bin"
        save_checkpoint(checkpoint_path, model, canonical_text(cfg))
        (run_dir / "vocab.json").write_text(
            json.dumps(vocab.to_dict(), indent=2, sort_keys=True) + "\n"
        )

    return TrainResult(
        model=model,
        vocab=vocab,
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        history=history,
        steps=step,
        final_train_nll=final_train_nll,
        best_val_nll=best_val if val_examples else math.nan,
        final_usage=final_usage,
    )
