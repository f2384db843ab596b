import math

import numpy as np
import pytest
import torch

from oracles import (
    central_difference_grads,
    exhaustive_recall,
    max_relative_error,
    mlp_score_numpy,
    monolithic_retrieve,
)
from ragmoe.errors import InputError
from ragmoe.memory import (
    MemoryBank,
    Reranker,
    aggregate_topk,
    build_memory_bank,
    coarse_recall,
    load_bank,
    pool_regions,
    rerank_score,
    retrieve,
    save_bank,
    select_salient_patches,
)
from ragmoe.memory import RegionToken
from ragmoe.seeding import numpy_rng, torch_generator


def _bank(m=20, d=8, seed=31):
    rng = numpy_rng(seed, "bank")
    emb = rng.standard_normal((m, d)).astype(np.float32)
    return MemoryBank([f"sentence {i}" for i in range(m)], emb)


def _case_like(seed, n_sentences=3, d=8):
    from ragmoe.corpus import Case, EmbeddingSet

    rng = numpy_rng(seed, "case")
    patches = rng.standard_normal((4, d)).astype(np.float32)
    sentences = [
        (f"s{seed}-{i}", rng.standard_normal(d).astype(np.float32))
        for i in range(n_sentences)
    ]
    return Case(
        case_id=f"case_{seed}",
        topic=0,
        split="train",
        embeddings=EmbeddingSet(f"case_{seed}", patches, d),
        report_tokens=["a"],
        sentences=sentences,
    )


# --- bank -------------------------------------------------------------------


def test_bank_order_and_count():
    cases = [_case_like(1), _case_like(2)]
    bank = build_memory_bank(cases)
    assert bank.size == 6
    assert bank.sentences == ["s1-0", "s1-1", "s1-2", "s2-0", "s2-1", "s2-2"]


def test_bank_embeddings_frozen():
    bank = _bank()
    with pytest.raises(ValueError):
        bank.embeddings[0, 0] = 99.0


def test_bank_rebuild_identical_and_file_round_trip(tmp_path):
    cases = [_case_like(1), _case_like(2)]
    bank_a = build_memory_bank(cases)
    bank_b = build_memory_bank(cases)
    assert np.array_equal(bank_a.embeddings, bank_b.embeddings)

    path_a = save_bank(bank_a, tmp_path / "a.bank")
    path_b = save_bank(bank_b, tmp_path / "b.bank")
    assert path_a.read_bytes() == path_b.read_bytes()

    loaded = load_bank(path_a)
    assert loaded.sentences == bank_a.sentences
    assert np.array_equal(loaded.embeddings, bank_a.embeddings)


def test_bank_rejects_empty():
    with pytest.raises(InputError):
        build_memory_bank([])
    with pytest.raises(InputError):
        MemoryBank([], np.zeros((0, 4), dtype=np.float32))


# --- salient selection --------------------------------------------------------


def test_select_monotone_scores():
    scores = torch.arange(10, dtype=torch.float64) / 10.0
    assert select_salient_patches(scores, 0.4) == [9, 8, 7, 6]


def test_select_tie_break_by_index():
    scores = torch.ones(10, dtype=torch.float64)
    assert select_salient_patches(scores, 0.4) == [0, 1, 2, 3]


def test_select_matches_brute_force():
    rng = numpy_rng(33, "salient")
    scores_np = rng.standard_normal(200)
    scores = torch.from_numpy(scores_np)
    got = select_salient_patches(scores, 0.4)
    expected = sorted(range(200), key=lambda i: (-scores_np[i], i))[:80]
    assert got == expected


def test_select_validates_ratio():
    scores = torch.ones(4, dtype=torch.float64)
    for ratio in (0.0, -0.1, 1.5):
        with pytest.raises(InputError):
            select_salient_patches(scores, ratio)


def test_select_ceil_budget():
    scores = torch.arange(5, dtype=torch.float64)
    assert len(select_salient_patches(scores, 0.5)) == 3  # ceil(2.5)


# --- region pooling -----------------------------------------------------------


def test_pool_mean_of_two():
    embs = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    regions = pool_regions(embs, 2)
    assert len(regions) == 1
    assert torch.allclose(regions[0].embedding, torch.tensor([0.5, 0.5], dtype=torch.float64))
    assert regions[0].member_indices == [0, 1]


def test_pool_remainder_rule():
    embs = torch.arange(10, dtype=torch.float64).reshape(5, 2)
    regions = pool_regions(embs, 2)
    assert [len(r.member_indices) for r in regions] == [2, 2, 1]
    assert torch.allclose(regions[2].embedding, embs[4])


def test_pool_matches_direct_mean():
    rng = numpy_rng(35, "pool")
    embs = torch.from_numpy(rng.standard_normal((40, 8)))
    regions = pool_regions(embs, 20)
    assert len(regions) == 2
    for r, lo in zip(regions, (0, 20)):
        direct = embs[lo : lo + 20].numpy().mean(axis=0)
        assert np.allclose(r.embedding.numpy(), direct, atol=1e-12)


def test_pool_validates_m():
    with pytest.raises(InputError):
        pool_regions(torch.ones(3, 2, dtype=torch.float64), 0)


# --- coarse recall --------------------------------------------------------------


def test_coarse_recall_hand_case():
    bank = MemoryBank(
        ["a", "b", "c"],
        np.array([[1, 0], [0, 1], [0.6, 0.8]], dtype=np.float32),
    )
    got = coarse_recall(torch.tensor([1.0, 0.0], dtype=torch.float64), bank, 2)
    assert got == [0, 2]


def test_coarse_recall_self_similarity():
    bank = _bank()
    j = 7
    region = torch.from_numpy(bank.embeddings[j].astype(np.float64))
    assert coarse_recall(region, bank, 1) == [j]


def test_coarse_recall_matches_exhaustive_scan():
    bank = _bank(m=500, d=16, seed=36)
    rng = numpy_rng(37, "recall-queries")
    for _ in range(50):
        region = rng.standard_normal(16)
        got = coarse_recall(torch.from_numpy(region), bank, 20)
        assert got == exhaustive_recall(region, bank.embeddings, 20)


def test_coarse_recall_errors():
    bank = _bank(m=5)
    with pytest.raises(InputError):
        coarse_recall(torch.zeros(8, dtype=torch.float64), bank, 2)  # zero norm
    with pytest.raises(InputError):
        coarse_recall(torch.ones(8, dtype=torch.float64), bank, 6)  # recall > M
    zero_bank = MemoryBank(["a", "b"], np.array([[1, 0], [0, 0]], dtype=np.float32))
    with pytest.raises(InputError):
        coarse_recall(torch.ones(2, dtype=torch.float64), zero_bank, 1)


# --- reranker -------------------------------------------------------------------


def _reranker(d=8, seed=41):
    r = Reranker(d)
    r.init_params(torch_generator(seed, "rr"))
    return r


def test_rerank_zero_weights_scores_zero():
    r = Reranker(8)
    with torch.no_grad():
        for p in r.parameters():
            p.zero_()
    s = rerank_score(r, torch.ones(8, dtype=torch.float64), torch.ones(8, dtype=torch.float64))
    assert float(s.detach()) == 0.0


def test_rerank_is_order_sensitive():
    r = _reranker()
    rng = numpy_rng(42, "order")
    diffs = []
    for _ in range(10):
        a = torch.from_numpy(rng.standard_normal(8))
        b = torch.from_numpy(rng.standard_normal(8))
        with torch.no_grad():
            diffs.append(abs(float(rerank_score(r, a, b)) - float(rerank_score(r, b, a))))
    assert max(diffs) > 1e-6


def test_rerank_matches_numpy_reimplementation():
    r = _reranker(seed=43)
    rng = numpy_rng(44, "mlp")
    for _ in range(10):
        a = rng.standard_normal(8)
        b = rng.standard_normal(8)
        with torch.no_grad():
            s = rerank_score(r, torch.from_numpy(a), torch.from_numpy(b))
        assert float(s) == pytest.approx(mlp_score_numpy(r, a, b), abs=1e-10)


def test_rerank_gradient_wrt_candidate():
    r = _reranker(seed=45)
    rng = numpy_rng(46, "grad")
    region = torch.from_numpy(rng.standard_normal(8))
    candidate = torch.from_numpy(rng.standard_normal(8)).requires_grad_(True)
    s = rerank_score(r, region, candidate)
    s.backward()
    analytic = candidate.grad.numpy().copy()
    fd = np.zeros(8)
    h = 1e-6
    base = candidate.detach().numpy().copy()
    with torch.no_grad():
        for i in range(8):
            up, down = base.copy(), base.copy()
            up[i] += h
            down[i] -= h
            fd[i] = (
                float(rerank_score(r, region, torch.from_numpy(up)))
                - float(rerank_score(r, region, torch.from_numpy(down)))
            ) / (2 * h)
    assert max_relative_error(analytic, fd) < 1e-4


def test_rerank_dim_mismatch():
    r = _reranker()
    with pytest.raises(InputError):
        rerank_score(r, torch.ones(8, dtype=torch.float64), torch.ones(6, dtype=torch.float64))


# --- aggregation -----------------------------------------------------------------


def test_aggregate_k1_returns_argmax():
    cands = torch.eye(3, dtype=torch.float64)
    scores = torch.tensor([0.1, 0.9, 0.5], dtype=torch.float64)
    out = aggregate_topk(cands, scores, 1)
    assert torch.equal(out, cands[1])


def test_aggregate_equal_scores_is_mean():
    rng = numpy_rng(47, "agg")
    cands = torch.from_numpy(rng.standard_normal((3, 8)))
    scores = torch.zeros(3, dtype=torch.float64)
    out = aggregate_topk(cands, scores, 3)
    assert torch.allclose(out, cands.mean(dim=0), atol=1e-12)


def test_aggregate_ln2_weights():
    # softmax([ln 2, 0, 0]) = [0.5, 0.25, 0.25]
    cands = torch.eye(3, dtype=torch.float64)
    scores = torch.tensor([math.log(2.0), 0.0, 0.0], dtype=torch.float64)
    out = aggregate_topk(cands, scores, 3)
    assert torch.allclose(
        out, torch.tensor([0.5, 0.25, 0.25], dtype=torch.float64), atol=1e-12
    )


def test_aggregate_convexity_and_permutation():
    rng = numpy_rng(48, "agg2")
    cands = torch.from_numpy(rng.standard_normal((6, 4)))
    scores = torch.from_numpy(rng.standard_normal(6))
    out = aggregate_topk(cands, scores, 3)
    perm = torch.from_numpy(rng.permutation(6))
    out_p = aggregate_topk(cands[perm], scores[perm], 3)
    assert torch.allclose(out, out_p, atol=1e-9)
    # convex hull: output bounded by min/max per coordinate of selected rows
    order = torch.argsort(-scores)[:3]
    sel = cands[order]
    assert (out <= sel.max(dim=0).values + 1e-12).all()
    assert (out >= sel.min(dim=0).values - 1e-12).all()


def test_aggregate_validates_k():
    cands = torch.ones(3, 2, dtype=torch.float64)
    scores = torch.ones(3, dtype=torch.float64)
    with pytest.raises(InputError):
        aggregate_topk(cands, scores, 0)
    with pytest.raises(InputError):
        aggregate_topk(cands, scores, 4)


# --- full retrieval -----------------------------------------------------------------


def _regions(bank, n=3, seed=51):
    rng = numpy_rng(seed, "regions")
    return [
        RegionToken(torch.from_numpy(rng.standard_normal(bank.dim)), [i])
        for i in range(n)
    ]


def test_retrieve_recall_equals_k_uses_all_candidates():
    bank = _bank(m=10)
    reranker = _reranker(seed=52)
    regions = _regions(bank, 2)
    result = retrieve(regions, bank, recall_size=4, k=4, reranker=reranker)
    for cands, sel in zip(result.candidates, result.selected):
        assert sorted(sel) == sorted(cands)


def test_retrieve_zero_reranker_averages_recall_set():
    bank = _bank(m=10)
    reranker = Reranker(8)
    with torch.no_grad():
        for p in reranker.parameters():
            p.zero_()
    regions = _regions(bank, 2)
    result = retrieve(regions, bank, recall_size=3, k=3, reranker=reranker)
    for r, cands, agg in zip(regions, result.candidates, result.aggregated):
        mean = bank.as_tensor()[cands].mean(dim=0)
        assert torch.allclose(agg, mean, atol=1e-12)


def test_retrieve_matches_monolithic_oracle():
    bank = _bank(m=200, d=8, seed=53)
    reranker = _reranker(seed=54)
    rng = numpy_rng(55, "retrieve-oracle")
    regions_np = [rng.standard_normal(8) for _ in range(20)]
    regions = [RegionToken(torch.from_numpy(r), [i]) for i, r in enumerate(regions_np)]
    result = retrieve(regions, bank, recall_size=20, k=3, reranker=reranker)
    expected = monolithic_retrieve(
        regions_np,
        bank.embeddings,
        lambda reg, cand: mlp_score_numpy(reranker, reg, cand),
        recall_size=20,
        k=3,
    )
    assert np.allclose(result.aggregated.detach().numpy(), expected, atol=1e-10)


def test_retrieve_without_reranker_uses_cosine():
    bank = _bank(m=10)
    regions = _regions(bank, 1)
    result = retrieve(regions, bank, recall_size=5, k=1, reranker=None)
    # top-1 by cosine == first recall candidate
    assert result.selected[0][0] == result.candidates[0][0]
    top = result.candidates[0][0]
    assert torch.allclose(
        result.aggregated[0], bank.as_tensor()[top], atol=1e-12
    )


def test_retrieve_result_invariants():
    bank = _bank(m=30)
    reranker = _reranker(seed=60)
    regions = _regions(bank, 4, seed=61)
    result = retrieve(regions, bank, recall_size=8, k=3, reranker=reranker)
    assert result.aggregated.shape == (4, 8)
    for cands, scores, sel in zip(result.candidates, result.scores, result.selected):
        assert len(cands) == 8
        assert scores.shape == (8,)
        assert len(sel) == 3
        assert set(sel) <= set(cands)
        # aggregation weights over the selected scores sum to 1
        order = torch.argsort(-scores.detach(), stable=True)[:3]
        w = torch.softmax(scores.detach()[order], dim=0)
        assert float(w.sum()) == pytest.approx(1.0, abs=1e-9)
        assert (w >= 0).all()


def test_retrieve_gradients_reach_reranker():
    bank = _bank(m=12)
    reranker = _reranker(seed=56)
    regions = _regions(bank, 2)
    result = retrieve(regions, bank, recall_size=6, k=3, reranker=reranker)
    loss = result.aggregated.square().sum()
    loss.backward()
    grads = [p.grad for p in reranker.parameters()]
    assert all(g is not None for g in grads)
    assert sum(float(g.abs().sum()) for g in grads) > 0


def test_retrieve_fd_gradients_through_aggregation():
    bank = _bank(m=12)
    reranker = _reranker(seed=57)
    regions = _regions(bank, 2, seed=58)
    probe = torch.from_numpy(numpy_rng(59, "probe").standard_normal((2, 8)))

    def loss_fn():
        with torch.no_grad():
            res = retrieve(regions, bank, recall_size=6, k=3, reranker=reranker)
            return float((res.aggregated * probe).sum())

    reranker.zero_grad()
    res = retrieve(regions, bank, recall_size=6, k=3, reranker=reranker)
    ((res.aggregated * probe).sum()).backward()
    params = list(reranker.named_parameters())
    fd = central_difference_grads(loss_fn, params, h=1e-6)
    for name, param in params:
        idx, fd_grads = fd[name]
        analytic = param.grad.reshape(-1).numpy()[idx]
        assert max_relative_error(analytic, fd_grads) < 1e-4, name
