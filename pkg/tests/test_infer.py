import itertools
import math

import numpy as np
import pytest

from xmrec.autograd import Tensor, no_grad
from xmrec.errors import DataError
from xmrec.grm import GrmConfig, GrmModel
from xmrec.infer import (IdTrie, RankedList, beam_search_users, build_trie,
                         constrained_beam_search, ensemble_rank,
                         ensemble_rank_users, evaluate, forced_score,
                         forced_scores_users, popularity_ranking,
                         write_rankings)
from xmrec.quantizer import SemanticIds
from xmrec.vocab import Vocab

from oracles import ndcg_hr_brute


def tiny_vocab(levels=3, m=4):
    return Vocab(levels=levels, codebook_size=m)


def tiny_model(vocab, seed=0):
    cfg = GrmConfig(layers=1, heads=2, head_dim=16, d_model=32, d_ff=64,
                    max_len=64)
    return GrmModel(vocab.size, cfg, seed=seed)


def unique_codes(n, levels, m, seed=0):
    rng = np.random.default_rng(seed)
    seen, rows = set(), []
    while len(rows) < n:
        row = tuple(int(c) for c in rng.integers(0, m, levels))
        if row not in seen:
            seen.add(row)
            rows.append(row)
    return np.array(rows)


def make_sids(n, levels=3, m=4, seed=0):
    text = unique_codes(n, levels, m, seed)
    vision = unique_codes(n, levels, m, seed + 1)
    return SemanticIds(items=[f"it{i}" for i in range(n)], text=text,
                       vision=vision, raw_text=text.copy(),
                       raw_vision=vision.copy())


# ---------------------------------------------------------------------------
# trie
# ---------------------------------------------------------------------------

def test_trie_shared_prefix_branches():
    vocab = tiny_vocab()
    codes = np.array([[0, 1, 2], [0, 1, 3]])
    table = vocab.sid_token_table("text", codes)
    trie = build_trie(table, ["a", "b"])
    assert trie.n_terminals == 2
    node = trie.root[table[0, 0]][table[0, 1]]
    assert set(node) == {int(table[0, 2]), int(table[1, 2])}


def test_trie_terminal_count():
    vocab = tiny_vocab()
    sids = make_sids(20)
    trie = build_trie(vocab.sid_token_table("text", sids.text), sids.items)
    assert trie.n_terminals == 20


def test_trie_duplicate_rejected():
    vocab = tiny_vocab()
    codes = np.array([[0, 1, 2], [0, 1, 2]])
    with pytest.raises(DataError, match="duplicate"):
        build_trie(vocab.sid_token_table("text", codes), ["a", "b"])


def test_trie_membership_exhaustive():
    vocab = tiny_vocab(levels=3, m=4)
    sids = make_sids(9, seed=3)
    table = vocab.sid_token_table("text", sids.text)
    trie = build_trie(table, sids.items)
    rows = {tuple(int(t) for t in row) for row in table}
    base = vocab.sid_token_table("text", np.zeros((1, 3), dtype=np.int64))[0]
    for combo in itertools.product(range(4), repeat=3):
        tokens = tuple(int(base[l]) + c for l, c in enumerate(combo))
        assert trie.contains(tokens) == (tokens in rows)


# ---------------------------------------------------------------------------
# beam search and forced scoring
# ---------------------------------------------------------------------------

def exhaustive_ranking(model, vocab, history, sids, modality="text"):
    """Forced-score every valid ID and sort: the beam-search oracle."""
    table = vocab.sid_token_table(modality, sids.codes(modality))
    src = np.asarray(history, dtype=np.int64)[None, :]
    mask = np.ones_like(src, dtype=np.float32)
    scores = forced_scores_users(model, vocab, src, mask, table[None])[0]
    order = sorted(range(len(sids.items)),
                   key=lambda i: (-scores[i], sids.items[i]))
    return [(sids.items[i], float(scores[i])) for i in order]


def test_beam_equals_exhaustive_with_wide_beam():
    vocab = tiny_vocab()
    sids = make_sids(20, seed=4)
    model = tiny_model(vocab, seed=4)
    trie = build_trie(vocab.sid_token_table("text", sids.text), sids.items)
    history = [vocab.task_id("rec-t")] + vocab.sid_token_ids("text", [0, 1, 2])
    ranked = constrained_beam_search(model, vocab, history, trie, width=64,
                                     k=20)
    oracle = exhaustive_ranking(model, vocab, history, sids)
    assert ranked.items() == [it for it, _ in oracle]
    for (item, score), (o_item, o_score) in zip(ranked.entries, oracle):
        assert score == pytest.approx(o_score, abs=1e-5)


def test_beam_k1_is_greedy_completion():
    vocab = tiny_vocab()
    sids = make_sids(12, seed=5)
    model = tiny_model(vocab, seed=5)
    table = vocab.sid_token_table("text", sids.text)
    trie = build_trie(table, sids.items)
    history = [vocab.task_id("rec-t")] + vocab.sid_token_ids("text", [3, 3, 3])
    src = np.asarray(history)[None, :]
    mask = np.ones_like(src, dtype=np.float32)

    # oracle: stepwise argmax over allowed continuations
    node, picked = trie.root, []
    with no_grad():
        memory = model.encode(src, mask)
        for step in range(3):
            dec = np.array([[vocab.bos_id] + picked])
            logits = model.decode(dec, memory, mask).values[0, -1]
            allowed = [t for t in node if t != IdTrie.TERMINAL]
            best = max(allowed, key=lambda t: (logits[t], -t))
            picked.append(int(best))
            node = node[best]
    greedy_item = node[IdTrie.TERMINAL]

    ranked = constrained_beam_search(model, vocab, history, trie, width=1, k=1)
    assert ranked.items() == [greedy_item]


def test_beam_outputs_always_in_trie():
    vocab = tiny_vocab()
    sids = make_sids(15, seed=6)
    model = tiny_model(vocab, seed=6)
    table = vocab.sid_token_table("text", sids.text)
    trie = build_trie(table, sids.items)
    item_set = set(sids.items)
    for hist_seed in range(3):
        rng = np.random.default_rng(hist_seed)
        history = [vocab.task_id("rec-t")] \
            + vocab.sid_token_ids("text", rng.integers(0, 4, 3))
        ranked = constrained_beam_search(model, vocab, history, trie,
                                         width=8, k=8)
        assert set(ranked.items()) <= item_set


def test_forced_score_matches_beam_score():
    vocab = tiny_vocab()
    sids = make_sids(10, seed=7)
    model = tiny_model(vocab, seed=7)
    table = vocab.sid_token_table("text", sids.text)
    trie = build_trie(table, sids.items)
    history = [vocab.task_id("rec-t")] + vocab.sid_token_ids("text", [1, 2, 0])
    ranked = constrained_beam_search(model, vocab, history, trie, width=10,
                                     k=3)
    top_item, top_score = ranked.entries[0]
    idx = sids.index[top_item]
    assert forced_score(model, vocab, history, table[idx]) == \
        pytest.approx(top_score, abs=1e-6)


def test_forced_score_uniform_model():
    vocab = tiny_vocab()
    model = tiny_model(vocab, seed=8)
    model.out_proj.weight.values[:] = 0.0
    model.out_proj.bias.values[:] = 0.0
    history = [vocab.task_id("rec-t")] + vocab.sid_token_ids("text", [0, 0, 0])
    score = forced_score(model, vocab, history,
                         vocab.sid_token_ids("text", [1, 2, 3]))
    assert score == pytest.approx(-3 * math.log(vocab.size), rel=1e-5)


def test_forced_scores_sum_below_one():
    vocab = tiny_vocab()
    sids = make_sids(10, seed=9)
    model = tiny_model(vocab, seed=9)
    table = vocab.sid_token_table("text", sids.text)
    history = [vocab.task_id("rec-t")] + vocab.sid_token_ids("text", [2, 2, 2])
    src = np.asarray(history)[None, :]
    mask = np.ones_like(src, dtype=np.float32)
    scores = forced_scores_users(model, vocab, src, mask, table[None])[0]
    assert np.exp(scores).sum() <= 1.0 + 1e-6


# ---------------------------------------------------------------------------
# ensembling
# ---------------------------------------------------------------------------

def mirror_vision_to_text(model, vocab):
    """Make vision tokens behave exactly like their text counterparts."""
    m, levels = vocab.codebook_size, vocab.levels
    for level in range(levels):
        for k in range(m):
            t_id = vocab.sid_token_ids("text", [0] * levels)[level] + k
            v_id = vocab.sid_token_ids("vision", [0] * levels)[level] + k
            model.embed.weight.values[v_id] = model.embed.weight.values[t_id]
            model.out_proj.weight.values[:, v_id] = \
                model.out_proj.weight.values[:, t_id]
            model.out_proj.bias.values[v_id] = model.out_proj.bias.values[t_id]
    model.embed.weight.values[vocab.task_id("rec-v")] = \
        model.embed.weight.values[vocab.task_id("rec-t")]


def test_ensemble_of_identical_modalities_equals_either():
    vocab = tiny_vocab()
    text = unique_codes(8, 3, 4, seed=10)
    sids = SemanticIds(items=[f"it{i}" for i in range(8)], text=text,
                       vision=text.copy(), raw_text=text.copy(),
                       raw_vision=text.copy())
    model = tiny_model(vocab, seed=10)
    mirror_vision_to_text(model, vocab)
    trie_t = build_trie(vocab.sid_token_table("text", sids.text), sids.items)
    trie_v = build_trie(vocab.sid_token_table("vision", sids.vision),
                        sids.items)
    hist_t = [vocab.task_id("rec-t")] + vocab.sid_token_ids("text", [1, 1, 1])
    hist_v = [vocab.task_id("rec-v")] + vocab.sid_token_ids("vision", [1, 1, 1])
    solo = beam_search_users(
        model, vocab, np.asarray(hist_t)[None],
        np.ones((1, len(hist_t)), dtype=np.float32), trie_t, 8, 5)[0]
    combo = ensemble_rank(model, vocab, hist_t, hist_v, trie_t, trie_v, sids,
                          width=8, k=5)
    assert combo.items() == solo.items()
    for (_, s_combo), (_, s_solo) in zip(combo.entries, solo.entries):
        assert s_combo == pytest.approx(s_solo, abs=1e-5)


def test_ensemble_matches_full_catalog_oracle():
    vocab = tiny_vocab()
    sids = make_sids(6, seed=11)
    model = tiny_model(vocab, seed=11)
    trie_t = build_trie(vocab.sid_token_table("text", sids.text), sids.items)
    trie_v = build_trie(vocab.sid_token_table("vision", sids.vision),
                        sids.items)
    hist_t = [vocab.task_id("rec-t")] + vocab.sid_token_ids("text", [0, 2, 1])
    hist_v = [vocab.task_id("rec-v")] + vocab.sid_token_ids("vision", [3, 0, 2])
    combo = ensemble_rank(model, vocab, hist_t, hist_v, trie_t, trie_v, sids,
                          width=6, k=6)

    # oracle: force-score every item under both modalities, average, sort
    table_t = vocab.sid_token_table("text", sids.text)
    table_v = vocab.sid_token_table("vision", sids.vision)
    src_t = np.asarray(hist_t)[None]
    src_v = np.asarray(hist_v)[None]
    ones_t = np.ones_like(src_t, dtype=np.float32)
    ones_v = np.ones_like(src_v, dtype=np.float32)
    s_t = forced_scores_users(model, vocab, src_t, ones_t, table_t[None])[0]
    s_v = forced_scores_users(model, vocab, src_v, ones_v, table_v[None])[0]
    mean = 0.5 * (s_t + s_v)
    order = sorted(range(6), key=lambda i: (-mean[i], sids.items[i]))
    assert combo.items() == [sids.items[i] for i in order]


def test_union_member_scored_under_both_modalities():
    vocab = tiny_vocab()
    sids = make_sids(10, seed=12)
    model = tiny_model(vocab, seed=12)
    trie_t = build_trie(vocab.sid_token_table("text", sids.text), sids.items)
    trie_v = build_trie(vocab.sid_token_table("vision", sids.vision),
                        sids.items)
    hist_t = [vocab.task_id("rec-t")] + vocab.sid_token_ids("text", [1, 0, 3])
    hist_v = [vocab.task_id("rec-v")] + vocab.sid_token_ids("vision", [2, 1, 0])
    # narrow beams so the two modality candidate sets differ
    combo = ensemble_rank(model, vocab, hist_t, hist_v, trie_t, trie_v, sids,
                          width=3, k=6)
    beams_t = beam_search_users(model, vocab, np.asarray(hist_t)[None],
                                np.ones((1, len(hist_t)), dtype=np.float32),
                                trie_t, 3, 3)[0]
    beams_v = beam_search_users(model, vocab, np.asarray(hist_v)[None],
                                np.ones((1, len(hist_v)), dtype=np.float32),
                                trie_v, 3, 3)[0]
    union = set(beams_t.items()) | set(beams_v.items())
    assert set(combo.items()) == union
    only_text = set(beams_t.items()) - set(beams_v.items())
    for item in only_text:
        idx = sids.index[item]
        s_t = forced_score(model, vocab, hist_t,
                           vocab.sid_token_table("text", sids.text)[idx])
        s_v = forced_score(model, vocab, hist_v,
                           vocab.sid_token_table("vision", sids.vision)[idx])
        expected = 0.5 * (s_t + s_v)
        got = dict(combo.entries)[item]
        assert got == pytest.approx(expected, abs=1e-5)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_rank_one_everywhere_gives_ones():
    rankings = {f"u{i}": RankedList([("hit", 1.0), ("other", 0.5)])
                for i in range(4)}
    truth = {f"u{i}": "hit" for i in range(4)}
    metrics = evaluate(rankings, truth)
    for k in (1, 5, 10):
        assert metrics[f"HR@{k}"] == 1.0
        assert metrics[f"NDCG@{k}"] == 1.0


def test_hand_computed_two_user_case():
    r1 = RankedList([(f"i{j}", float(-j)) for j in range(12)])
    rankings = {"u1": r1, "u2": r1}
    truth = {"u1": "i1", "u2": "i10"}   # ranks 2 and 11
    metrics = evaluate(rankings, truth)
    assert metrics["HR@10"] == pytest.approx(0.5)
    assert metrics["NDCG@10"] == pytest.approx((1 / math.log2(3)) / 2,
                                               abs=1e-4)
    assert metrics["NDCG@10"] == pytest.approx(0.3155, abs=1e-3)
    oracle_hr, oracle_ndcg = ndcg_hr_brute([2, 11], 10)
    assert metrics["HR@10"] == pytest.approx(oracle_hr)
    assert metrics["NDCG@10"] == pytest.approx(oracle_ndcg)


def test_metric_orderings():
    rng = np.random.default_rng(13)
    items = [f"i{j}" for j in range(30)]
    rankings, truth = {}, {}
    for u in range(20):
        order = list(rng.permutation(items))
        rankings[f"u{u}"] = RankedList([(it, float(-r)) for r, it in
                                        enumerate(order)])
        truth[f"u{u}"] = items[rng.integers(30)]
    m = evaluate(rankings, truth)
    assert m["HR@1"] <= m["HR@5"] <= m["HR@10"] <= 1.0
    for k in (1, 5, 10):
        assert m[f"NDCG@{k}"] <= m[f"HR@{k}"]


def test_missing_user_counts_as_miss():
    rankings = {"u1": RankedList([("hit", 1.0)])}
    truth = {"u1": "hit", "u2": "hit"}
    metrics = evaluate(rankings, truth)
    assert metrics["missing_rankings"] == 1
    assert metrics["HR@1"] == 0.5


def test_popularity_baseline_deterministic():
    from xmrec.dataio import split_sequences
    log = split_sequences({
        "u1": ["a", "b", "a", "c"], "u2": ["b", "a", "b", "d"],
        "u3": ["c", "a", "c", "e"]})
    ranked = popularity_ranking(log, ["u1", "u2"], k=3)
    assert ranked["u1"].items() == ranked["u2"].items()
    counts = {}
    for u in log.users:
        for it in log.train[u]:
            counts[it] = counts.get(it, 0) + 1
    expected = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:3]
    assert ranked["u1"].items() == [it for it, _ in expected]


def test_ranked_list_rejects_duplicates_and_nan():
    with pytest.raises(DataError):
        RankedList([("a", 1.0), ("a", 0.5)])
    with pytest.raises(DataError):
        RankedList([("a", float("nan"))])


def test_write_rankings(tmp_path):
    rankings = {"u2": RankedList([("b", 0.5)]),
                "u1": RankedList([("a", 1.0)])}
    path = tmp_path / "rankings.jsonl"
    write_rankings(path, rankings)
    import json
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert [l["user"] for l in lines] == ["u1", "u2"]
