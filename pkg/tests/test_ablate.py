import pytest

from ragmoe.ablate import MODULE_GRID, run_ablation, summarize_ablation
from ragmoe.config import ModelConfig, RunConfig
from ragmoe.corpus import CorpusSpec, generate_synthetic_corpus, split_cases
from ragmoe.errors import InputError
from ragmoe.memory import build_memory_bank


@pytest.fixture(scope="module")
def harness(tmp_path_factory):
    spec = CorpusSpec(
        n_cases=10, d=16, patches_min=8, patches_max=12, vocab_size=60,
        report_min=6, report_max=10, n_latent_topics=2, rng_seed=29,
        n_val=1, n_test=1,
    )
    cases = generate_synthetic_corpus(spec)
    bank = build_memory_bank(split_cases(cases)["train"])
    model = ModelConfig(
        d=16, n_heads=2, n_enc=1, n_dec=1, d_ff=32, n_experts=4, routing_k=2,
        recall_size=4, final_topk=2, patch_ratio=0.5, group_size=2, dropout=0.0,
        max_len=14, seed=29, lr=1e-3, batch_size=4, epochs=1, beam=2,
    )
    cfg = RunConfig(seed=29, profile="desk", corpus=spec, model=model)
    return cfg, cases, bank, tmp_path_factory.mktemp("ablate")


def test_module_grid_rows_match_cumulative_pattern():
    toggles = [flags for _, flags in MODULE_GRID]
    assert toggles == [
        (False, False, False, False),
        (True, False, False, False),
        (True, True, False, False),
        (True, True, True, False),
        (True, True, True, True),
    ]


def test_modules_axis_emits_five_checkmark_rows(harness):
    cfg, cases, bank, tmp = harness
    summary = run_ablation(cfg, cases, bank, "modules", [], tmp / "modules")
    assert [r.label for r in summary.rows] == [
        "baseline", "+reranker", "+moe", "+noisy_topk", "+load_balance",
    ]
    text = summary.summary_path.read_text()
    lines = text.splitlines()
    assert len(lines) == 2 + 5
    assert "✓" in text and "✗" in text
    # baseline row: all crosses; final row: all checks
    assert lines[2].count("✗") == 4
    assert lines[6].count("✓") == 4


def test_toggle_axis_defaults_to_on_off(harness):
    cfg, cases, bank, tmp = harness
    summary = run_ablation(cfg, cases, bank, "reranker", [], tmp / "reranker")
    assert [r.value for r in summary.rows] == [False, True]


def test_e_axis_clamps_routing_k(harness):
    cfg, cases, bank, tmp = harness
    summary = run_ablation(cfg, cases, bank, "E", [1, 2], tmp / "easy")
    assert len(summary.rows) == 2  # E=1 would be invalid with k=2 unless clamped


def test_value_axis_requires_values(harness):
    cfg, cases, bank, tmp = harness
    with pytest.raises(InputError):
        run_ablation(cfg, cases, bank, "lambda", [], tmp / "nope")


def test_identical_seeds_identical_metric_cells(harness):
    cfg, cases, bank, tmp = harness
    a = run_ablation(cfg, cases, bank, "routing_k", [1, 2], tmp / "rk-a")
    b = run_ablation(cfg, cases, bank, "routing_k", [1, 2], tmp / "rk-b")
    assert [r.metrics for r in a.rows] == [r.metrics for r in b.rows]


def test_summary_rederivable_from_surviving_runs(harness, tmp_path, capsys):
    cfg, cases, bank, tmp = harness
    summary = run_ablation(cfg, cases, bank, "load_balance", [], tmp / "lb")
    run_dirs = [r.run_dir for r in summary.rows]
    out = summarize_ablation(run_dirs, tmp_path / "rebuilt.txt")
    rebuilt = out.read_text()
    assert len(rebuilt.splitlines()) == 2 + 2
    # deleting a run leaves no dangling references: it is skipped with a warning
    import shutil

    shutil.rmtree(run_dirs[0])
    out2 = summarize_ablation(run_dirs, tmp_path / "rebuilt2.txt")
    assert len(out2.read_text().splitlines()) == 2 + 1
    assert "skipping" in capsys.readouterr().err
