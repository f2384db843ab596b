"""Ablation harness: one axis, several child runs, a 4-decimal summary table.

Supported axes: the cumulative 5-row module grid ("modules"), single-module
on/off toggles (reranker, moe, noisy_routing, load_balance), and value sweeps
(E, routing_k, lambda, recall_size, final_topk). Each child run trains from
scratch on the same corpus, decodes the evaluation split, and scores all six
metrics.
"""

import copy
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig, canonical_text
from .corpus import Case, split_cases
from .decode import decode_corpus
from .errors import DataFormatError, InputError
from .manifest import RunManifest, read_manifest
from .memory import MemoryBank
from .metrics import evaluate_corpus
from .train import train

CHECK, CROSS = "✓", "✗"

# Table rows: label -> (use_reranker, use_moe, use_noise, load_balance_on)
MODULE_GRID = [
    ("baseline", (False, False, False, False)),
    ("+reranker", (True, False, False, False)),
    ("+moe", (True, True, False, False)),
    ("+noisy_topk", (True, True, True, False)),
    ("+load_balance", (True, True, True, True)),
]

VALUE_AXES = {
    "E": "n_experts",
    "routing_k": "routing_k",
    "lambda": "lambda_aux",
    "recall_size": "recall_size",
    "final_topk": "final_topk",
}
TOGGLE_AXES = {
    "reranker": "use_reranker",
    "moe": "use_moe",
    "noisy_routing": "use_noise",
}
AXES = sorted(["modules", "load_balance", *VALUE_AXES, *TOGGLE_AXES])


@dataclass
class AblationRow:
    label: str
    toggles: dict[str, bool] | None
    value: object
    metrics: dict[str, float]
    run_dir: str


@dataclass
class AblationSummary:
    axis: str
    rows: list[AblationRow] = field(default_factory=list)
    summary_path: Path | None = None


def _child_configs(base: RunConfig, axis: str, values: list) -> list[tuple[str, RunConfig, dict | None, object]]:
    """(label, config, module toggles, axis value) per child run."""
    children = []
    if axis == "modules":
        for label, (rr, moe, noise, lb) in MODULE_GRID:
            cfg = copy.deepcopy(base)
            cfg.model.use_reranker = rr
            cfg.model.use_moe = moe
            cfg.model.use_noise = noise
            cfg.model.lambda_aux = base.model.lambda_aux if lb else 0.0
            toggles = {
                "reranker": rr,
                "moe": moe,
                "noisy_topk": noise,
                "load_balance": lb,
            }
            children.append((label, cfg, toggles, label))
        return children
    if axis == "load_balance":
        use_values = values if values else [False, True]
        for value in use_values:
            cfg = copy.deepcopy(base)
            on = bool(value)
            cfg.model.lambda_aux = base.model.lambda_aux if on else 0.0
            children.append((f"load_balance={'on' if on else 'off'}", cfg, None, on))
        return children
    if axis in TOGGLE_AXES:
        use_values = values if values else [False, True]
        for value in use_values:
            cfg = copy.deepcopy(base)
            setattr(cfg.model, TOGGLE_AXES[axis], bool(value))
            children.append((f"{axis}={'on' if value else 'off'}", cfg, None, bool(value)))
        return children
    if axis in VALUE_AXES:
        if not values:
            raise InputError(f"axis {axis!r} needs an explicit value list")
        for value in values:
            cfg = copy.deepcopy(base)
            setattr(cfg.model, VALUE_AXES[axis], value)
            if axis == "E" and cfg.model.routing_k > value:
                cfg.model.routing_k = value  # keep k <= E valid across the sweep
            children.append((f"{axis}={value}", cfg, None, value))
        return children
    raise InputError(f"unknown ablation axis {axis!r}; valid: {', '.join(AXES)}")


def _eval_split(cases: list[Case]) -> list[Case]:
    splits = split_cases(cases)
    for name in ("test", "val", "train"):
        if splits[name]:
            return splits[name]
    raise InputError("no cases to evaluate")


def run_ablation(
    base: RunConfig,
    cases: list[Case],
    bank: MemoryBank,
    axis: str,
    values: list,
    out_dir: str | Path,
) -> AblationSummary:
    out_dir = Path(out_dir)
    eval_cases = _eval_split(cases)
    summary = AblationSummary(axis=axis)
    for label, cfg, toggles, value in _child_configs(base, axis, values):
        started = time.monotonic()
        child_dir = out_dir / "runs" / label.replace("+", "plus_").replace("=", "_")
        result = train(cfg, cases, bank, child_dir)
        candidates, references = decode_corpus(
            result.model,
            result.vocab,
            eval_cases,
            bank,
            beam=cfg.model.beam,
            max_len=cfg.model.max_len,
            length_norm=cfg.model.length_norm,
        )
        report = evaluate_corpus(candidates, references, child_dir / "metrics.json")
        RunManifest(
            command=f"ablate:{label}",
            config_path=None,
            config_snapshot=canonical_text(cfg),
            seed=cfg.seed,
            outputs=sorted(
                str(p.relative_to(child_dir)) for p in child_dir.iterdir() if p.is_file()
            ),
            wall_clock=time.monotonic() - started,
        ).write(child_dir)
        summary.rows.append(
            AblationRow(
                label=label,
                toggles=toggles,
                value=value,
                metrics={
                    "bleu1": report.bleu1,
                    "bleu2": report.bleu2,
                    "bleu3": report.bleu3,
                    "bleu4": report.bleu4,
                    "meteor": report.meteor,
                    "rouge_l": report.rouge_l,
                },
                run_dir=str(child_dir),
            )
        )
    summary.summary_path = write_summary(summary, out_dir / "summary.txt")
    (out_dir / "summary.json").write_text(
        json.dumps(
            {
                "axis": axis,
                "rows": [
                    {
                        "label": r.label,
                        "toggles": r.toggles,
                        "value": r.value if not isinstance(r.value, bool) else bool(r.value),
                        "metrics": r.metrics,
                        "run_dir": r.run_dir,
                    }
                    for r in summary.rows
                ],
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    return summary


_METRIC_COLS = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l")
_METRIC_HEAD = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L")


def write_summary(summary: AblationSummary, path: str | Path) -> Path:
    """Fixed-width table, metrics to 4 decimal places."""
    path = Path(path)
    has_toggles = any(r.toggles for r in summary.rows)
    lines = [f"axis: {summary.axis}"]
    if has_toggles:
        toggle_names = ["reranker", "moe", "noisy_topk", "load_balance"]
        header = ["row".ljust(16)] + [t.ljust(13) for t in toggle_names]
    else:
        header = ["row".ljust(22)]
    header += [h.rjust(8) for h in _METRIC_HEAD]
    lines.append("  ".join(header).rstrip())
    for row in summary.rows:
        if has_toggles:
            marks = [
                (CHECK if row.toggles and row.toggles.get(t) else CROSS).ljust(13)
                for t in ["reranker", "moe", "noisy_topk", "load_balance"]
            ]
            cells = [row.label.ljust(16)] + marks
        else:
            cells = [row.label.ljust(22)]
        cells += [f"{row.metrics[m]:.4f}".rjust(8) for m in _METRIC_COLS]
        lines.append("  ".join(cells).rstrip())
    path.write_text("\n".join(lines) + "\n")
    return path


def summarize_ablation(run_dirs: list[str | Path], out_path: str | Path) -> Path:
    """Rebuild a summary table from surviving child-run directories.

    Missing or incomplete runs are listed on stderr and skipped.
    """
    rows = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        try:
            manifest = read_manifest(run_dir)
            metrics = json.loads((run_dir / "metrics.json").read_text())
        except (OSError, json.JSONDecodeError, KeyError, DataFormatError) as exc:
            print(f"warning: skipping {run_dir}: {exc}", file=sys.stderr)
            continue
        label = manifest.command.split(":", 1)[-1]
        rows.append(
            AblationRow(
                label=label,
                toggles=None,
                value=label,
                metrics={m: metrics[m] for m in _METRIC_COLS},
                run_dir=str(run_dir),
            )
        )
    summary = AblationSummary(axis="summary", rows=rows)
    return write_summary(summary, out_path)
