"""Trie-constrained beam search, dual-modality ensembling, top-K metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, no_grad
from .errors import DataError
from .grm import GrmModel
from .quantizer import SemanticIds
from .tasks import history_tokens
from .vocab import Vocab

NEG_INF = -1e30


class IdTrie:
    """Prefix tree over L-token semantic IDs; terminals carry the item id."""

    TERMINAL = -1

    def __init__(self, levels: int):
        self.levels = levels
        self.root: dict = {}
        self.n_terminals = 0

    def add(self, tokens, item: str):
        if len(tokens) != self.levels:
            raise DataError(f"ID for '{item}' has {len(tokens)} tokens, "
                            f"expected {self.levels}")
        node = self.root
        for tok in tokens[:-1]:
            node = node.setdefault(int(tok), {})
        leaf = int(tokens[-1])
        if leaf in node:
            raise DataError(f"duplicate semantic ID at item '{item}'")
        node[leaf] = {self.TERMINAL: item}
        self.n_terminals += 1

    def contains(self, tokens) -> bool:
        node = self.root
        for tok in tokens:
            node = node.get(int(tok))
            if node is None:
                return False
        return self.TERMINAL in node

    def item_at(self, tokens) -> str:
        node = self.root
        for tok in tokens:
            node = node[int(tok)]
        return node[self.TERMINAL]


def build_trie(token_table: np.ndarray, items: list[str]) -> IdTrie:
    trie = IdTrie(levels=token_table.shape[1])
    for row, item in zip(token_table, items):
        trie.add(row, item)
    return trie


@dataclass
class RankedList:
    entries: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        items = [it for it, _ in self.entries]
        if len(set(items)) != len(items):
            raise DataError("duplicate items in ranking")
        if any(not math.isfinite(s) for _, s in self.entries):
            raise DataError("non-finite score in ranking")

    def items(self) -> list[str]:
        return [it for it, _ in self.entries]

    def rank_of(self, item: str):
        for r, (it, _) in enumerate(self.entries, start=1):
            if it == item:
                return r
        return None


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def beam_search_users(model: GrmModel, vocab: Vocab, src: np.ndarray,
                      src_mask: np.ndarray, trie: IdTrie, width: int,
                      k: int):
    """Constrained beam search for a batch of users at once.

    Returns one RankedList of up to k (item, log-prob) pairs per user.
    Every expansion is restricted to children of the beam's trie node, so
    each finished beam is a real item's ID.
    """
    if trie.n_terminals == 0:
        raise DataError("empty ID trie")
    n_users = src.shape[0]
    vocab_size = vocab.size
    with no_grad():
        memory = model.encode(src, src_mask)
    mem_tiled = np.repeat(memory.values, width, axis=0)
    mask_tiled = np.repeat(src_mask, width, axis=0)

    tokens = np.full((n_users, width, 0), 0, dtype=np.int64)
    scores = np.full((n_users, width), NEG_INF, dtype=np.float64)
    scores[:, 0] = 0.0
    nodes = [[trie.root if w == 0 else None for w in range(width)]
             for _ in range(n_users)]

    for step in range(trie.levels):
        dec_in = np.concatenate(
            [np.full((n_users, width, 1), vocab.bos_id, dtype=np.int64),
             tokens], axis=2).reshape(n_users * width, step + 1)
        with no_grad():
            logits = model.decode(dec_in, Tensor(mem_tiled), mask_tiled)
        log_probs = _log_softmax_np(
            logits.values[:, -1, :]).reshape(n_users, width, vocab_size)
        allowed = np.full((n_users, width, vocab_size), NEG_INF)
        for u in range(n_users):
            for w in range(width):
                node = nodes[u][w]
                if node is None:
                    continue
                for tok in node:
                    if tok != IdTrie.TERMINAL:
                        allowed[u, w, tok] = 0.0
        cand = scores[:, :, None] + log_probs + allowed
        flat = cand.reshape(n_users, width * vocab_size)
        top = np.argsort(-flat, axis=1, kind="stable")[:, :width]
        new_tokens = np.full((n_users, width, step + 1), 0, dtype=np.int64)
        new_scores = np.full((n_users, width), NEG_INF, dtype=np.float64)
        new_nodes = [[None] * width for _ in range(n_users)]
        for u in range(n_users):
            for rank, idx in enumerate(top[u]):
                w, tok = divmod(int(idx), vocab_size)
                if flat[u, idx] <= NEG_INF / 2:
                    continue
                new_tokens[u, rank, :step] = tokens[u, w]
                new_tokens[u, rank, step] = tok
                new_scores[u, rank] = flat[u, idx]
                new_nodes[u][rank] = nodes[u][w][tok]
        tokens, scores, nodes = new_tokens, new_scores, new_nodes

    results = []
    for u in range(n_users):
        entries = []
        for w in range(width):
            if scores[u, w] <= NEG_INF / 2:
                continue
            item = nodes[u][w][IdTrie.TERMINAL]
            entries.append((item, float(scores[u, w])))
        entries.sort(key=lambda e: (-e[1], e[0]))
        results.append(RankedList(entries[:k]))
    return results


def constrained_beam_search(model: GrmModel, vocab: Vocab,
                            history: list[int], trie: IdTrie, width: int,
                            k: int) -> RankedList:
    """Single-user wrapper around the batched search."""
    if width < k:
        raise DataError(f"beam width {width} smaller than k={k}")
    src = np.asarray(history, dtype=np.int64)[None, :]
    mask = np.ones_like(src, dtype=np.float32)
    return beam_search_users(model, vocab, src, mask, trie, width, k)[0]


def forced_scores_users(model: GrmModel, vocab: Vocab, src: np.ndarray,
                        src_mask: np.ndarray,
                        cand_tokens: np.ndarray) -> np.ndarray:
    """Teacher-forced sum of token log-probs.

    src is (U, T); cand_tokens is (U, C, L); result is (U, C).
    """
    n_users, n_cand, levels = cand_tokens.shape
    if np.any(cand_tokens < 0) or np.any(cand_tokens >= vocab.size):
        raise DataError("candidate token outside vocabulary")
    with no_grad():
        memory = model.encode(src, src_mask)
    mem_tiled = np.repeat(memory.values, n_cand, axis=0)
    mask_tiled = np.repeat(src_mask, n_cand, axis=0)
    flat = cand_tokens.reshape(n_users * n_cand, levels)
    dec_in = np.concatenate(
        [np.full((flat.shape[0], 1), vocab.bos_id, dtype=np.int64),
         flat[:, :-1]], axis=1)
    with no_grad():
        logits = model.decode(dec_in, Tensor(mem_tiled), mask_tiled)
    log_probs = _log_softmax_np(logits.values)
    picked = np.take_along_axis(log_probs, flat[:, :, None], axis=2)[:, :, 0]
    return picked.sum(axis=1).reshape(n_users, n_cand)


def forced_score(model: GrmModel, vocab: Vocab, history: list[int],
                 cand_tokens) -> float:
    src = np.asarray(history, dtype=np.int64)[None, :]
    mask = np.ones_like(src, dtype=np.float32)
    cands = np.asarray(cand_tokens, dtype=np.int64)[None, None, :]
    return float(forced_scores_users(model, vocab, src, mask, cands)[0, 0])


def _pad_histories(histories: list[list[int]], vocab: Vocab):
    length = max(len(h) for h in histories)
    src = np.full((len(histories), length), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((len(histories), length), dtype=np.float32)
    for i, h in enumerate(histories):
        src[i, :len(h)] = h
        mask[i, :len(h)] = 1.0
    return src, mask


def ensemble_rank_users(model: GrmModel, vocab: Vocab,
                        hist_text: list[list[int]],
                        hist_vision: list[list[int]],
                        trie_t: IdTrie, trie_v: IdTrie, sids: SemanticIds,
                        width: int, k: int,
                        chunk: int = 64) -> list[RankedList]:
    """Per-modality constrained beams, union of candidates, mean of the two
    forced log-prob scores, top-k."""
    sid_tok = {"text": vocab.sid_token_table("text", sids.text),
               "vision": vocab.sid_token_table("vision", sids.vision)}
    results: list[RankedList] = []
    for start in range(0, len(hist_text), chunk):
        ht = hist_text[start:start + chunk]
        hv = hist_vision[start:start + chunk]
        src_t, mask_t = _pad_histories(ht, vocab)
        src_v, mask_v = _pad_histories(hv, vocab)
        beams_t = beam_search_users(model, vocab, src_t, mask_t, trie_t,
                                    width, width)
        beams_v = beam_search_users(model, vocab, src_v, mask_v, trie_v,
                                    width, width)
        for u in range(len(ht)):
            union = sorted(set(beams_t[u].items()) | set(beams_v[u].items()))
            if not union:
                results.append(RankedList([]))
                continue
            rows = np.array([sids.index[item] for item in union])
            cand_t = sid_tok["text"][rows][None, :, :]
            cand_v = sid_tok["vision"][rows][None, :, :]
            score_t = forced_scores_users(
                model, vocab, src_t[u:u + 1], mask_t[u:u + 1], cand_t)[0]
            score_v = forced_scores_users(
                model, vocab, src_v[u:u + 1], mask_v[u:u + 1], cand_v)[0]
            mean_scores = 0.5 * (score_t + score_v)
            order = sorted(range(len(union)),
                           key=lambda i: (-mean_scores[i], union[i]))
            results.append(RankedList(
                [(union[i], float(mean_scores[i])) for i in order[:k]]))
    return results


def ensemble_rank(model: GrmModel, vocab: Vocab, hist_text: list[int],
                  hist_vision: list[int], trie_t: IdTrie, trie_v: IdTrie,
                  sids: SemanticIds, width: int, k: int) -> RankedList:
    return ensemble_rank_users(model, vocab, [hist_text], [hist_vision],
                               trie_t, trie_v, sids, width, k)[0]


def rank_eval_users(model: GrmModel, vocab: Vocab, log, sids: SemanticIds,
                    users: list[str], split: str, width: int, k: int,
                    window: int, chunk: int = 64) -> dict[str, RankedList]:
    """Ensemble rankings for a list of users against their val/test target."""
    hist_t, hist_v = [], []
    for user in users:
        items = log.train[user] if split == "val" \
            else log.train[user] + [log.val[user]]
        hist_t.append(history_tokens(items, "text", sids, vocab, "rec-t",
                                     window))
        hist_v.append(history_tokens(items, "vision", sids, vocab, "rec-v",
                                     window))
    trie_t = build_trie(vocab.sid_token_table("text", sids.text), sids.items)
    trie_v = build_trie(vocab.sid_token_table("vision", sids.vision),
                        sids.items)
    ranked = ensemble_rank_users(model, vocab, hist_t, hist_v, trie_t, trie_v,
                                 sids, width, k, chunk=chunk)
    return dict(zip(users, ranked))


def modality_rank_users(model: GrmModel, vocab: Vocab, log, sids: SemanticIds,
                        users: list[str], modality: str, split: str,
                        width: int, k: int, window: int,
                        chunk: int = 64) -> dict[str, RankedList]:
    """Single-modality rankings (used for rec-t validation)."""
    task = "rec-t" if modality == "text" else "rec-v"
    hists = []
    for user in users:
        items = log.train[user] if split == "val" \
            else log.train[user] + [log.val[user]]
        hists.append(history_tokens(items, modality, sids, vocab, task,
                                    window))
    trie = build_trie(vocab.sid_token_table(modality, sids.codes(modality)),
                      sids.items)
    out: dict[str, RankedList] = {}
    for start in range(0, len(users), chunk):
        src, mask = _pad_histories(hists[start:start + chunk], vocab)
        ranked = beam_search_users(model, vocab, src, mask, trie, width, k)
        for user, rl in zip(users[start:start + chunk], ranked):
            out[user] = rl
    return out


def popularity_ranking(log, users: list[str], k: int) -> dict[str, RankedList]:
    """Global train-split popularity baseline; identical top-k for everyone."""
    counts: dict[str, int] = {}
    for u in log.users:
        for item in log.train[u]:
            counts[item] = counts.get(item, 0) + 1
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    ranked = RankedList([(item, float(c)) for item, c in top])
    return {u: ranked for u in users}


def evaluate(rankings: dict[str, RankedList], truth: dict[str, str],
             ks=(1, 5, 10)) -> dict:
    """HR@K and NDCG@K over leave-one-out ground truth.

    Users without a ranking count as misses and are reported.
    """
    missing = [u for u in truth if u not in rankings]
    ranks = []
    for user, target in truth.items():
        rl = rankings.get(user)
        ranks.append(None if rl is None else rl.rank_of(target))
    metrics = {"n_users": len(truth), "missing_rankings": len(missing)}
    for k in ks:
        hits = [1.0 if (r is not None and r <= k) else 0.0 for r in ranks]
        gains = [1.0 / math.log2(r + 1) if (r is not None and r <= k) else 0.0
                 for r in ranks]
        metrics[f"HR@{k}"] = sum(hits) / len(truth) if truth else 0.0
        metrics[f"NDCG@{k}"] = sum(gains) / len(truth) if truth else 0.0
    return metrics


def write_rankings(path, rankings: dict[str, RankedList]):
    with open(path, "w", encoding="utf-8") as fh:
        for user in sorted(rankings):
            fh.write(json.dumps({
                "user": user,
                "items": rankings[user].items(),
                "scores": [s for _, s in rankings[user].entries]}) + "\n")
