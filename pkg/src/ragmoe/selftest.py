"""Acceptance criteria, runnable in one invocation via `ragmoe selftest`.

Each criterion is a function returning (passed, detail). The oracles used
here (finite differences, exhaustive scans, brute-force metrics, dense
mixtures, enumeration) are deliberately independent re-implementations of
the contracts they check.
"""

import itertools
import json
import math
import re
import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .ablate import run_ablation
from .config import ModelConfig, RunConfig
from .corpus import Case, CorpusSpec, EmbeddingSet, generate_synthetic_corpus, split_cases
from .decode import beam_search, decode_corpus, greedy_decode, model_logprob_fn
from .memory import MemoryBank, RegionToken, Reranker, build_memory_bank, coarse_recall, retrieve
from .metrics import bleu_n, evaluate_corpus, meteor, rouge_l
from .model import ReportGenerator, nll_loss, total_loss
from .moe import (
    ExpertFFN,
    GaussianNoise,
    LoadStats,
    ReplayNoise,
    Router,
    load_balance_loss,
    moe_forward,
    topk_gate,
)
from .seeding import numpy_rng, torch_generator
from .train import _epoch_nll, _examples, train
from .vocab import BOS_ID

DTYPE = torch.float64


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float


# ---------------------------------------------------------------------------
# shared fixtures


def _micro_config(**overrides) -> ModelConfig:
    base = dict(
        d=8, n_heads=2, n_enc=1, n_dec=1, d_ff=16, n_experts=3, routing_k=2,
        lambda_aux=0.01, recall_size=4, final_topk=2, patch_ratio=0.5, group_size=2,
        dropout=0.0, max_len=16, vocab_size=11, d_data=8, seed=907,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _micro_bank(m=8, d=8, seed=901) -> MemoryBank:
    rng = numpy_rng(seed, "selftest-bank")
    return MemoryBank(
        [f"s{i}" for i in range(m)], rng.standard_normal((m, d)).astype(np.float32)
    )


def _micro_patches(n=6, d=8, seed=902) -> np.ndarray:
    rng = numpy_rng(seed, "selftest-patches")
    return rng.standard_normal((n, d)).astype(np.float32)


def _desk_corpus_spec(seed=7, n_cases=16, **overrides) -> CorpusSpec:
    base = dict(
        n_cases=n_cases, d=32, patches_min=24, patches_max=48, vocab_size=200,
        report_min=8, report_max=16, n_latent_topics=4, rng_seed=seed,
    )
    base.update(overrides)
    return CorpusSpec(**base)


# ---------------------------------------------------------------------------
# criterion 1: end-to-end gradient fidelity


_GROUP_PATTERNS = [
    ("router", re.compile(r"\.router\.")),
    ("experts", re.compile(r"\.experts\.")),
    ("reranker", re.compile(r"^reranker\.")),
    ("tc_tokens", re.compile(r"^tc_(visual|text)\.token$")),
    ("attention", re.compile(r"(attn\.w_[qkvo]|self_attn\.w_[qkvo]|cross_attn\.w_[qkvo])")),
    ("embeddings", re.compile(r"^(tok_emb|type_emb|visual_proj|text_proj|out_proj)")),
]


def _param_group(name: str) -> str:
    for group, pattern in _GROUP_PATTERNS:
        if pattern.search(name):
            return group
    return "other"  # layer norms, encoder/TC FFNs


def _criterion_1() -> tuple[bool, str]:
    cfg = _micro_config()
    model = ReportGenerator(cfg)
    model.train()
    bank = _micro_bank()
    patches = _micro_patches()
    prefix = [BOS_ID, 4, 5, 6, 7]
    targets = torch.tensor([4, 5, 6, 7, 2])
    noise = ReplayNoise(torch_generator(903, "frozen-noise"))

    def loss_tensor():
        if noise.recorded:
            noise.rewind()
        out = model(patches, bank, prefix, noise_source=noise)
        return total_loss(nll_loss(out.logits, targets), out.aux_losses, cfg.lambda_aux)

    loss = loss_tensor()
    model.zero_grad()
    loss.backward()
    analytic = {
        name: (p.grad.detach().reshape(-1).numpy().copy() if p.grad is not None else None)
        for name, p in model.named_parameters()
    }

    h = 1e-5
    worst = {}
    n_checked = 0
    for name, param in model.named_parameters():
        flat = param.detach().reshape(-1)
        group = _param_group(name)
        an = analytic[name]
        for i in range(flat.shape[0]):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                up = float(loss_tensor())
                flat[i] = orig - h
                down = float(loss_tensor())
                flat[i] = orig
            fd = (up - down) / (2 * h)
            got = 0.0 if an is None else float(an[i])
            # 1e-6 denominator floor absorbs central-difference roundoff
            # (~1e-10 absolute here) on near-zero gradients
            err = abs(got - fd) / max(abs(got), abs(fd), 1e-6)
            worst[group] = max(worst.get(group, 0.0), err)
            n_checked += 1
    max_err = max(worst.values())
    required = {g for g, _ in _GROUP_PATTERNS}
    missing = required - set(worst)
    passed = max_err <= 1e-3 and not missing
    detail = (
        f"{n_checked} params; worst rel err per group: "
        + ", ".join(f"{g}={e:.2e}" for g, e in sorted(worst.items()))
    )
    if missing:
        detail += f"; MISSING GROUPS {sorted(missing)}"
    return passed, detail


# ---------------------------------------------------------------------------
# criterion 2: MoE equivalences


def _dense_mixture_oracle(h, experts, router):
    logits = router.w_clean(h)
    probs = torch.softmax(logits, dim=-1)
    stacked = torch.stack([e(h) for e in experts], dim=1)
    return (probs.unsqueeze(-1) * stacked).sum(dim=1)


def _criterion_2() -> tuple[bool, str]:
    gen = torch_generator(904, "moe-equiv")
    rng = numpy_rng(905, "moe-equiv")
    h = torch.from_numpy(rng.standard_normal((24, 8))).to(DTYPE)

    router1 = Router(8, 1, 1)
    router1.init_params(gen)
    expert = ExpertFFN(8, 16)
    expert.init_params(gen)
    with torch.no_grad():
        sparse, _, _ = moe_forward(h, [expert], router1, training=False)
        direct = expert(h)
    bitwise = torch.equal(sparse, direct)

    router4 = Router(8, 4, 4)
    router4.init_params(gen)
    experts = []
    for e in range(4):
        ex = ExpertFFN(8, 16, index=e)
        ex.init_params(gen)
        experts.append(ex)
    with torch.no_grad():
        full, _, _ = moe_forward(h, experts, router4, training=False)
        dense = _dense_mixture_oracle(h, experts, router4)
    dense_err = float((full - dense).abs().max())
    passed = bitwise and dense_err <= 1e-6
    return passed, f"E=1 bitwise={bitwise}; k=E dense max diff {dense_err:.2e}"


# ---------------------------------------------------------------------------
# criterion 3: load-balance identities


def _criterion_3() -> tuple[bool, str]:
    errs = []
    for n in (2, 4, 8):
        uniform = torch.full((n,), 1.0 / n, dtype=DTYPE)
        errs.append(abs(float(load_balance_loss(LoadStats(uniform, uniform.clone()), n)) - 1.0))
        collapse = torch.zeros(n, dtype=DTYPE)
        collapse[0] = 1.0
        errs.append(abs(float(load_balance_loss(LoadStats(collapse, collapse.clone()), n)) - n))
    passed = max(errs) <= 1e-9
    return passed, f"max identity error {max(errs):.2e} over E in (2,4,8)"


# ---------------------------------------------------------------------------
# criterion 4: routing contract over 10,000 tokens


def _criterion_4() -> tuple[bool, str]:
    d, n_experts, k = 16, 4, 2
    router = Router(d, n_experts, k)
    router.init_params(torch_generator(906, "routing"))
    rng = numpy_rng(908, "routing-tokens")
    h = torch.from_numpy(rng.standard_normal((10_000, d))).to(DTYPE)

    with torch.no_grad():
        clean = router.w_clean(h)
        gate = topk_gate(clean, k)
        dense = torch.zeros_like(clean)
        dense.scatter_(1, gate.experts, gate.weights)
    nonzero_ok = bool(((dense != 0).sum(dim=1) == k).all())
    sums_ok = bool((dense.sum(dim=1) - 1.0).abs().max() <= 1e-6)

    with torch.no_grad():
        gate_b = topk_gate(router.w_clean(h), k)
    deterministic = torch.equal(gate.experts, gate_b.experts)

    with torch.no_grad():
        scale = torch.nn.functional.softplus(router.w_noise(h))
        top2 = torch.topk(clean, 2, dim=1).values
        gap = top2[:, 0] - top2[:, 1]
        median_scale = float(scale.median())
        narrow = gap < median_scale
        _, _, ga = moe_forward(
            h, _four_experts(d), router,
            noise_source=GaussianNoise(torch_generator(1, "na")), training=True,
        )
        _, _, gb = moe_forward(
            h, _four_experts(d), router,
            noise_source=GaussianNoise(torch_generator(2, "nb")), training=True,
        )
    differs = (ga.experts != gb.experts).any(dim=1)
    frac_narrow_differs = float(differs[narrow].float().mean()) if int(narrow.sum()) else 0.0
    stochastic_ok = int(narrow.sum()) >= 1000 and frac_narrow_differs > 0.01

    passed = nonzero_ok and sums_ok and deterministic and stochastic_ok
    detail = (
        f"k-sparse={nonzero_ok}, sums={sums_ok}, eval-deterministic={deterministic}, "
        f"{int(narrow.sum())} narrow-gap tokens, {frac_narrow_differs:.1%} flip across seeds"
    )
    return passed, detail


_EXPERT_CACHE = {}


def _four_experts(d):
    if d not in _EXPERT_CACHE:
        gen = torch_generator(909, "four-experts")
        experts = []
        for e in range(4):
            ex = ExpertFFN(d, 2 * d, index=e)
            ex.init_params(gen)
            experts.append(ex)
        _EXPERT_CACHE[d] = experts
    return _EXPERT_CACHE[d]


# ---------------------------------------------------------------------------
# criterion 5: retrieval oracles


def _exhaustive_recall_oracle(region, bank_emb, size):
    sims = bank_emb @ region / (np.linalg.norm(bank_emb, axis=1) * np.linalg.norm(region))
    return sorted(range(len(sims)), key=lambda i: (-sims[i], i))[:size]


def _reranker_numpy(reranker, region, candidate):
    w1 = reranker.lin1.weight.detach().numpy()
    b1 = reranker.lin1.bias.detach().numpy()
    w2 = reranker.lin2.weight.detach().numpy()
    b2 = reranker.lin2.bias.detach().numpy()
    x = np.concatenate([region, candidate])
    hidden = w1 @ x + b1
    hidden = 0.5 * hidden * (1.0 + np.array([math.erf(v / math.sqrt(2.0)) for v in hidden]))
    return float((w2 @ hidden)[0] + b2[0])


def _criterion_5() -> tuple[bool, str]:
    rng = numpy_rng(910, "retrieval")
    bank_emb = rng.standard_normal((500, 16)).astype(np.float32)
    bank = MemoryBank([f"s{i}" for i in range(500)], bank_emb)
    bank64 = bank.embeddings.astype(np.float64)

    mismatches = 0
    for _ in range(1000):
        q = rng.standard_normal(16)
        got = coarse_recall(torch.from_numpy(q), bank, 20)
        if got != _exhaustive_recall_oracle(q, bank64, 20):
            mismatches += 1

    reranker = Reranker(16)
    reranker.init_params(torch_generator(911, "sr"))
    max_diff = 0.0
    for i in range(100):
        q = rng.standard_normal(16)
        regions = [RegionToken(torch.from_numpy(q), [0])]
        with torch.no_grad():
            result = retrieve(regions, bank, recall_size=20, k=3, reranker=reranker)
        cand = _exhaustive_recall_oracle(q, bank64, 20)
        scores = np.array([_reranker_numpy(reranker, q, bank64[c]) for c in cand])
        order = sorted(range(20), key=lambda i: (-scores[i], i))[:3]
        sel = scores[order]
        w = np.exp(sel - sel.max())
        w /= w.sum()
        expected = sum(wi * bank64[cand[i]] for wi, i in zip(w, order))
        max_diff = max(max_diff, float(np.abs(result.aggregated[0].numpy() - expected).max()))

    passed = mismatches == 0 and max_diff <= 1e-10
    return passed, f"recall mismatches {mismatches}/1000; retrieve max diff {max_diff:.2e}"


# ---------------------------------------------------------------------------
# criterion 6: metric oracles


def _bleu_oracle(cands, refs, n):
    logs = []
    for order in range(1, n + 1):
        match = total = 0
        for cand, ref in zip(cands, refs):
            cg, rg = {}, {}
            for i in range(len(cand) - order + 1):
                g = tuple(cand[i : i + order])
                cg[g] = cg.get(g, 0) + 1
            for i in range(len(ref) - order + 1):
                g = tuple(ref[i : i + order])
                rg[g] = rg.get(g, 0) + 1
            for g, c in cg.items():
                match += min(c, rg.get(g, 0))
                total += c
        if match == 0 or total == 0:
            return 0.0
        logs.append(math.log(match / total))
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(sum(logs) / n)


def _rouge_oracle(cand, ref):
    table = [[0] * (len(ref) + 1) for _ in range(len(cand) + 1)]
    for i in range(len(cand)):
        for j in range(len(ref)):
            table[i + 1][j + 1] = (
                table[i][j] + 1 if cand[i] == ref[j] else max(table[i][j + 1], table[i + 1][j])
            )
    lcs = table[-1][-1]
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def _meteor_oracle(cand, ref):
    c_used, r_used = set(), set()
    matches = chunks = 0
    while True:
        runs = []
        for i in range(len(cand)):
            for j in range(len(ref)):
                length = 0
                while (
                    i + length < len(cand)
                    and j + length < len(ref)
                    and (i + length) not in c_used
                    and (j + length) not in r_used
                    and cand[i + length] == ref[j + length]
                ):
                    length += 1
                if length:
                    runs.append((length, i, j))
        if not runs:
            break
        length, i, j = max(runs, key=lambda t: (t[0], -t[1], -t[2]))
        c_used.update(range(i, i + length))
        r_used.update(range(j, j + length))
        matches += length
        chunks += 1
    if matches == 0:
        return 0.0
    p, r = matches / len(cand), matches / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    return f_mean * (1 - 0.5 * (chunks / matches) ** 3)


def _criterion_6() -> tuple[bool, str]:
    rng = numpy_rng(912, "metric-corpora")
    worst = 0.0
    for _ in range(50):
        n_cases = int(rng.integers(1, 8))
        cands = [
            [f"t{int(v)}" for v in rng.integers(0, 9, size=rng.integers(1, 14))]
            for _ in range(n_cases)
        ]
        refs = [
            [f"t{int(v)}" for v in rng.integers(0, 9, size=rng.integers(1, 14))]
            for _ in range(n_cases)
        ]
        for n in range(1, 5):
            worst = max(worst, abs(bleu_n(cands, refs, n) - _bleu_oracle(cands, refs, n)))
        for c, r in zip(cands, refs):
            worst = max(worst, abs(rouge_l(c, r) - _rouge_oracle(c, r)))
            worst = max(worst, abs(meteor(c, r) - _meteor_oracle(c, r)))

    hand_ok = (
        abs(bleu_n([["the", "cat"]], [["the", "cat", "sat", "on"]], 1) - math.exp(-1)) < 1e-12
        and abs(rouge_l(list("abcd"), list("acd")) - 6.0 / 7.0) < 1e-12
        and abs(meteor(list("abcd"), list("abcd")) - 0.9921875) < 1e-12
        and abs(meteor(["a", "b"], ["b", "a"]) - 0.5) < 1e-12
    )

    golden_path = Path(__file__).parent / "data" / "metrics_golden.json"
    golden = json.loads(golden_path.read_text())
    pairs = golden["pairs"]
    report = evaluate_corpus([p["candidate"] for p in pairs], [p["reference"] for p in pairs])
    golden_ok = all(
        abs(getattr(report, key) - value) <= 1e-12
        for key, value in golden["metrics"].items()
    )
    passed = worst <= 1e-9 and hand_ok and golden_ok
    return passed, f"oracle max diff {worst:.2e}; hand fixtures {hand_ok}; golden {golden_ok}"


# ---------------------------------------------------------------------------
# criterion 7: decoding


_CRAFTED = {
    (): {3: 0.40, 4: 0.35, 5: 0.24, 2: 0.01},
    (3,): {3: 0.22, 4: 0.22, 5: 0.22, 2: 0.34},
    (4,): {3: 0.04, 4: 0.03, 5: 0.03, 2: 0.90},
    (5,): {3: 0.30, 4: 0.30, 5: 0.30, 2: 0.10},
}


def _crafted_fn(prefix):
    probs = _CRAFTED.get(tuple(prefix[1:]), {3: 0.25, 4: 0.25, 5: 0.25, 2: 0.25})
    out = np.full(6, -math.inf)
    for tok, p in probs.items():
        out[tok] = math.log(p)
    return out


def _criterion_7() -> tuple[bool, str]:
    model = ReportGenerator(_micro_config(seed=913))
    model.eval()
    bank = _micro_bank(seed=914)

    greedy_ok = True
    for i in range(20):
        patches = _micro_patches(seed=920 + i)
        state = model.encode_case(patches, bank)
        fn = model_logprob_fn(model, state)
        g = greedy_decode(fn, max_len=8)
        b = beam_search(fn, max_len=8, beam=1, length_norm=False)
        greedy_ok = greedy_ok and g.tokens == b.tokens and abs(g.score - b.score) < 1e-12

    best = None
    for length in range(0, 4):
        for seq in itertools.product([3, 4, 5], repeat=length):
            prefix, score = [BOS_ID], 0.0
            for tok in seq:
                score += _crafted_fn(prefix)[tok]
                prefix.append(tok)
            term = score + _crafted_fn(prefix)[2]
            if best is None or term > best[1]:
                best = (list(seq), term)
    beam3 = beam_search(_crafted_fn, max_len=3, beam=3, length_norm=False)
    crafted_ok = beam3.tokens == best[0] and abs(beam3.score - best[1]) < 1e-12
    crafted_beats_greedy = beam3.score > greedy_decode(_crafted_fn, max_len=3).score

    monotone_ok = True
    violations = 0
    for i in range(50):
        patches = _micro_patches(n=6, seed=950 + i)
        state = model.encode_case(patches, bank)
        fn = model_logprob_fn(model, state)
        g = greedy_decode(fn, max_len=8)
        b = beam_search(fn, max_len=8, beam=3, length_norm=False)
        if b.score < g.score - 1e-12:
            violations += 1
    monotone_ok = violations == 0

    passed = greedy_ok and crafted_ok and crafted_beats_greedy and monotone_ok
    detail = (
        f"beam1==greedy on 20 cases: {greedy_ok}; crafted optimum {crafted_ok} "
        f"(beats greedy {crafted_beats_greedy}); beam3>=greedy violations {violations}/50"
    )
    return passed, detail


# ---------------------------------------------------------------------------
# criterion 8: overfit capability


def _criterion_8() -> tuple[bool, str]:
    spec = _desk_corpus_spec(seed=7, n_cases=16)
    cases = generate_synthetic_corpus(spec)
    bank = build_memory_bank(split_cases(cases)["train"])
    model_cfg = ModelConfig(
        d=64, n_heads=4, n_enc=3, n_dec=3, d_ff=256, n_experts=4, routing_k=2,
        recall_size=8, final_topk=3, patch_ratio=0.4, group_size=4, dropout=0.1,
        max_len=64, seed=7, lr=1e-3, batch_size=4, epochs=500,
    )
    cfg = RunConfig(seed=7, profile="desk", corpus=spec, model=model_cfg)
    result = train(cfg, cases, bank, None, stop_at_nll=0.04)
    eval_nll = _epoch_nll(result.model, _examples(cases, result.vocab), bank)

    candidates, references = decode_corpus(
        result.model, result.vocab, cases, bank, beam=1, max_len=model_cfg.max_len
    )
    report = evaluate_corpus(candidates, references)
    epochs_used = len(result.history)
    passed = eval_nll < 0.05 and report.bleu4 >= 0.95 and epochs_used <= 500
    detail = (
        f"train NLL {eval_nll:.4f} (<0.05), greedy BLEU-4 {report.bleu4:.4f} (>=0.95), "
        f"{epochs_used} epochs"
    )
    return passed, detail


# ---------------------------------------------------------------------------
# criterion 9: load-balance effect on a skew-inducing corpus


def _skew_corpus(seed: int, n_cases=8, d=16, length=30) -> list[Case]:
    """Single topic, one dominant token type: routing pressure concentrates."""
    rng = numpy_rng(seed, "skew-corpus")
    centroid = rng.standard_normal(d)
    cases = []
    for i in range(n_cases):
        patches = (centroid + 0.02 * rng.standard_normal((12, d))).astype(np.float32)
        sentences = [
            ("w000 w000 w000", (centroid + 0.02 * rng.standard_normal(d)).astype(np.float32))
            for _ in range(2)
        ]
        case_id = f"case_{i:04d}"
        cases.append(
            Case(case_id, 0, "train", EmbeddingSet(case_id, patches, d), ["w000"] * length, sentences)
        )
    return cases


def _skew_arm(seed: int, lam: float) -> np.ndarray:
    cases = _skew_corpus(seed)
    bank = build_memory_bank(cases)
    model_cfg = ModelConfig(
        d=64, n_heads=2, n_enc=1, n_dec=1, d_ff=64, n_experts=2, routing_k=1,
        lambda_aux=lam, recall_size=4, final_topk=2, patch_ratio=0.5, group_size=3,
        dropout=0.0, max_len=32, seed=seed, lr=1e-3, batch_size=4, epochs=60,
        use_noise=False,
    )
    spec = CorpusSpec(
        n_cases=8, d=16, patches_min=12, patches_max=12, vocab_size=6,
        report_min=30, report_max=30, n_latent_topics=1, rng_seed=seed,
    )
    cfg = RunConfig(seed=seed, profile="desk", corpus=spec, model=model_cfg)
    result = train(cfg, cases, bank, None)
    return np.array(result.final_usage)


def _criterion_9() -> tuple[bool, str]:
    rows = []
    passed = True
    for seed in (11, 12, 13):
        u0 = _skew_arm(seed, 0.0)
        u1 = _skew_arm(seed, 0.01)
        collapse0 = float(u0.max()) > 0.9
        collapse1 = float(u1.max()) > 0.9
        var_lower = float(u1.var()) < float(u0.var())
        passed = passed and collapse0 and not collapse1 and var_lower
        rows.append(
            f"seed {seed}: lam0 max={u0.max():.3f}/var={u0.var():.4f}, "
            f"lam.01 max={u1.max():.3f}/var={u1.var():.4f}"
        )
    return passed, "; ".join(rows)


# ---------------------------------------------------------------------------
# criterion 10: ablation harness structure


def _criterion_10() -> tuple[bool, str]:
    spec = _desk_corpus_spec(
        seed=17, n_cases=36, n_val=2, n_test=2, patches_min=10, patches_max=16,
        report_min=6, report_max=10, vocab_size=80,
    )
    cases = generate_synthetic_corpus(spec)
    bank = build_memory_bank(split_cases(cases)["train"])
    model_cfg = ModelConfig(
        d=32, n_heads=2, n_enc=1, n_dec=1, d_ff=64, n_experts=4, routing_k=2,
        recall_size=10, final_topk=3, patch_ratio=0.5, group_size=3, dropout=0.0,
        max_len=16, seed=17, lr=1e-3, batch_size=8, epochs=2, beam=2,
    )
    cfg = RunConfig(seed=17, profile="desk", corpus=spec, model=model_cfg)

    grids = [
        ("modules", [], 5),
        ("recall_size", [10, 20, 50], 3),
        ("final_topk", [1, 3, 5], 3),
        ("E", [2, 4, 8], 3),
        ("routing_k", [1, 2, 3], 3),
        ("lambda", [0, 0.001, 0.01, 0.1], 4),
    ]
    cell = re.compile(r"\d\.\d{4}")
    problems = []
    tmp = Path(tempfile.mkdtemp(prefix="ragmoe-ablate-"))
    try:
        for axis, values, expect_rows in grids:
            out_dir = tmp / axis
            summary = run_ablation(cfg, cases, bank, axis, values, out_dir)
            if len(summary.rows) != expect_rows:
                problems.append(f"{axis}: {len(summary.rows)} rows != {expect_rows}")
            text = summary.summary_path.read_text()
            data_lines = text.splitlines()[2:]
            if len(data_lines) != expect_rows:
                problems.append(f"{axis}: summary has {len(data_lines)} data lines")
            for line in data_lines:
                if len(cell.findall(line)) != 6:
                    problems.append(f"{axis}: row lacks six 4-decimal metrics: {line!r}")
            if axis == "modules":
                if "✓" not in text or "✗" not in text:
                    problems.append("modules: missing checkmark columns")
            for row in summary.rows:
                run_dir = Path(row.run_dir)
                if not (run_dir / "manifest.json").exists():
                    problems.append(f"{axis}: child {run_dir.name} missing manifest")
                if not (run_dir / "metrics.json").exists():
                    problems.append(f"{axis}: child {run_dir.name} missing metrics")
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    passed = not problems
    return passed, "all grid shapes emitted" if passed else "; ".join(problems[:4])


# ---------------------------------------------------------------------------
# criterion 11: rerun determinism through the CLI


def _criterion_11() -> tuple[bool, str]:
    import contextlib
    import io

    from .cli import run as cli_run

    config_text = "\n".join(
        [
            "profile = desk",
            "seed = 23",
            "corpus.cases = 10",
            "corpus.dim = 16",
            "corpus.patches_min = 8",
            "corpus.patches_max = 12",
            "corpus.vocab_size = 60",
            "corpus.report_min = 6",
            "corpus.report_max = 10",
            "corpus.topics = 2",
            "corpus.val = 1",
            "corpus.test = 1",
            "model.embed_dim = 16",
            "model.heads = 2",
            "model.enc_layers = 1",
            "model.dec_layers = 1",
            "model.ffn_dim = 32",
            "model.experts = 2",
            "model.routing_k = 1",
            "model.recall_size = 4",
            "model.final_topk = 2",
            "model.patch_ratio = 0.5",
            "model.group_size = 2",
            "model.max_len = 14",
            "train.epochs = 3",
            "train.batch_size = 4",
            "decode.beam = 2",
        ]
    )
    tmp = Path(tempfile.mkdtemp(prefix="ragmoe-determinism-"))
    try:
        cfg_path = tmp / "run.cfg"
        cfg_path.write_text(config_text + "\n")
        artifacts = {}
        for arm in ("one", "two"):
            base = tmp / arm
            rc = 0
            with contextlib.redirect_stdout(io.StringIO()):
                rc |= cli_run(["gen-data", "--config", str(cfg_path), "--out", str(base / "data")])
                rc |= cli_run(["build-bank", "--data", str(base / "data"), "--out", str(base / "bank")])
                rc |= cli_run([
                    "train", "--config", str(cfg_path), "--data", str(base / "data"),
                    "--bank", str(base / "bank" / "bank.bin"), "--out", str(base / "train"),
                ])
                rc |= cli_run([
                    "evaluate", "--checkpoint", str(base / "train" / "checkpoint.bin"),
                    "--data", str(base / "data"), "--bank", str(base / "bank" / "bank.bin"),
                    "--out", str(base / "eval"), "--split", "test",
                ])
            if rc != 0:
                return False, f"pipeline arm {arm} failed with exit {rc}"
            artifacts[arm] = {
                "corpus": (base / "data" / "corpus.json").read_bytes(),
                "bank": (base / "bank" / "bank.bin").read_bytes(),
                "checkpoint": (base / "train" / "checkpoint.bin").read_bytes(),
                "metrics": (base / "eval" / "metrics.json").read_bytes(),
            }
        mismatched = [
            name
            for name in artifacts["one"]
            if artifacts["one"][name] != artifacts["two"][name]
        ]
        passed = not mismatched
        detail = "all artifacts byte-identical" if passed else f"mismatch: {mismatched}"
        return passed, detail
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


# ---------------------------------------------------------------------------


CRITERIA = [
    (1, "gradient-fidelity", _criterion_1),
    (2, "moe-equivalences", _criterion_2),
    (3, "load-balance-identities", _criterion_3),
    (4, "routing-contract", _criterion_4),
    (5, "retrieval-oracle", _criterion_5),
    (6, "metric-oracles", _criterion_6),
    (7, "decoding", _criterion_7),
    (8, "overfit-capability", _criterion_8),
    (9, "load-balance-effect", _criterion_9),
    (10, "ablation-structure", _criterion_10),
    (11, "determinism", _criterion_11),
]

# stated wall-clock budgets (seconds); exceeding one fails the criterion
BUDGETS = {1: 60.0, 2: 5.0, 3: 1.0, 8: 300.0, 9: 900.0}


def run_criterion(number: int) -> CriterionResult:
    for num, name, fn in CRITERIA:
        if num == number:
            start = time.monotonic()
            passed, detail = fn()
            elapsed = time.monotonic() - start
            budget = BUDGETS.get(num)
            if budget is not None and elapsed >= budget:
                passed = False
                detail += f"; EXCEEDED {budget:.0f}s budget"
            return CriterionResult(num, name, passed, detail, elapsed)
    raise ValueError(f"unknown criterion {number}")


def run_selftest(numbers: list[int] | None = None, quiet: bool = False) -> list[CriterionResult]:
    torch.set_num_threads(1)
    selected = numbers or [num for num, _, _ in CRITERIA]
    results = []
    for number in selected:
        result = run_criterion(number)
        results.append(result)
        if not quiet:
            status = "PASS" if result.passed else "FAIL"
            print(f"[{result.number:2d}] {status} {result.name} ({result.seconds:.1f}s) {result.detail}")
    if not quiet:
        n_pass = sum(r.passed for r in results)
        print(f"{n_pass}/{len(results)} criteria passed")
    return results
