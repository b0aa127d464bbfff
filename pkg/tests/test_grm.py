import math

import numpy as np
import pytest

from xmrec import autograd as ag
from xmrec.autograd import Graph, Tensor, backward, no_grad
from xmrec.grm import (GrmConfig, GrmHyper, GrmModel, implicit_align_loss,
                       make_batch, sample_batch, seq2seq_loss, train_grm)
from xmrec.tasks import TrainingExample
from xmrec.vocab import Vocab

from oracles import info_nce_brute


def tiny_model(vocab, seed=0, layers=1, heads=2, d_model=32):
    cfg = GrmConfig(layers=layers, heads=heads, head_dim=d_model // heads,
                    d_model=d_model, d_ff=2 * d_model, max_len=64)
    return GrmModel(vocab.size, cfg, seed=seed)


def tiny_vocab():
    return Vocab(levels=3, codebook_size=4)


def make_examples(vocab, n=8, seed=0):
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n):
        hist = rng.integers(0, 4, size=(2, 3))
        target = rng.integers(0, 4, size=3)
        x = [vocab.task_id("rec-t")]
        for row in hist:
            x += vocab.sid_token_ids("text", row)
        y = vocab.sid_token_ids("text", target) + [vocab.eos_id]
        examples.append(TrainingExample(task="rec-t", x=x, y=y))
    return examples


def test_uniform_logit_loss_is_log_vocab():
    vocab = tiny_vocab()
    model = tiny_model(vocab)
    model.out_proj.weight.values[:] = 0.0
    model.out_proj.bias.values[:] = 0.0
    batch = make_batch(make_examples(vocab, 4), vocab)
    loss = seq2seq_loss(model, batch)
    assert loss.item() == pytest.approx(math.log(vocab.size), rel=1e-5)


def test_batch_permutation_invariance():
    vocab = tiny_vocab()
    model = tiny_model(vocab, seed=1)
    examples = make_examples(vocab, 6, seed=1)
    base = seq2seq_loss(model, make_batch(examples, vocab)).item()
    perm = [examples[i] for i in (4, 0, 5, 2, 1, 3)]
    shuffled = seq2seq_loss(model, make_batch(perm, vocab)).item()
    assert shuffled == pytest.approx(base, rel=1e-5)


def test_overfit_single_example():
    vocab = tiny_vocab()
    model = tiny_model(vocab, seed=2)
    example = make_examples(vocab, 1, seed=2)
    batch = make_batch(example, vocab)
    from xmrec.optim import AdamW
    opt = AdamW(model.parameters(), lr=3e-3)
    loss_val = None
    for _ in range(250):
        loss = seq2seq_loss(model, batch)
        loss_val = loss.item()
        if loss_val < 0.005:
            break
        backward(Graph(loss))
        opt.step()
        opt.zero_grad()
    assert loss_val < 0.01


def test_causal_masking_logit_equality():
    vocab = tiny_vocab()
    model = tiny_model(vocab, seed=3)
    examples = make_examples(vocab, 2, seed=3)
    batch = make_batch(examples, vocab)
    with no_grad():
        memory = model.encode(batch.src, batch.src_mask)
        base = model.decode(batch.tgt_in, memory, batch.src_mask).values
        for p in range(1, batch.tgt_in.shape[1]):
            perturbed = batch.tgt_in.copy()
            perturbed[:, p] = (perturbed[:, p] + 1) % vocab.size
            out = model.decode(perturbed, memory, batch.src_mask).values
            assert np.array_equal(out[:, :p, :], base[:, :p, :])


def test_implicit_align_single_item_zero():
    vocab = tiny_vocab()
    model = tiny_model(vocab, seed=4)
    t = np.array([vocab.sid_token_ids("text", [0, 1, 2])])
    v = np.array([vocab.sid_token_ids("vision", [3, 2, 1])])
    assert implicit_align_loss(model, t, v, tau=0.1).item() == 0.0


def test_implicit_align_matches_brute_force():
    vocab = tiny_vocab()
    model = tiny_model(vocab, seed=5)
    rng = np.random.default_rng(5)
    t = np.array([vocab.sid_token_ids("text", rng.integers(0, 4, 3))
                  for _ in range(3)])
    v = np.array([vocab.sid_token_ids("vision", rng.integers(0, 4, 3))
                  for _ in range(3)])
    tau = 0.4
    loss = implicit_align_loss(model, t, v, tau).item()
    with no_grad():
        e_t = model.encode(t, np.ones(t.shape, dtype=np.float32)).values.mean(axis=1)
        e_v = model.encode(v, np.ones(v.shape, dtype=np.float32)).values.mean(axis=1)
    diag = {i: i for i in range(3)}
    expected = info_nce_brute(e_t, diag, tau, candidates=e_v) \
        + info_nce_brute(e_v, diag, tau, candidates=e_t)
    assert loss == pytest.approx(expected, abs=1e-5)


def test_duplicated_batch_raises_align_loss():
    vocab = tiny_vocab()
    model = tiny_model(vocab, seed=6)
    rng = np.random.default_rng(6)
    t = np.array([vocab.sid_token_ids("text", rng.integers(0, 4, 3))
                  for _ in range(3)])
    v = np.array([vocab.sid_token_ids("vision", rng.integers(0, 4, 3))
                  for _ in range(3)])
    base = implicit_align_loss(model, t, v, 0.1).item()
    doubled = implicit_align_loss(model, np.vstack([t, t]), np.vstack([v, v]),
                                  0.1).item()
    assert doubled > base


def test_zero_lambda_gradient_matches_pure_seq2seq():
    vocab = tiny_vocab()
    model = tiny_model(vocab, seed=7)
    batch = make_batch(make_examples(vocab, 3, seed=7), vocab)
    loss = seq2seq_loss(model, batch)
    backward(Graph(loss))
    pure = {p.name: p.grad.copy() for p in model.parameters()
            if p.grad is not None}
    for p in model.parameters():
        p.grad = None
    t = np.array([vocab.sid_token_ids("text", [0, 1, 2]),
                  vocab.sid_token_ids("text", [1, 2, 3])])
    v = np.array([vocab.sid_token_ids("vision", [0, 1, 2]),
                  vocab.sid_token_ids("vision", [1, 2, 3])])
    combined = ag.add(seq2seq_loss(model, batch),
                      ag.scale(implicit_align_loss(model, t, v, 0.1), 0.0))
    backward(Graph(combined))
    for p in model.parameters():
        if p.name in pure:
            np.testing.assert_allclose(p.grad, pure[p.name], atol=1e-7)


def test_mixed_task_sampling_proportions():
    vocab = tiny_vocab()
    hyper = GrmHyper(rec_weight=1.0, item_weight=0.5, seq_weight=0.5)
    pools = {
        "rec-t": [TrainingExample("rec-t", [3], [7, 2])] * 3,
        "item-t2v": [TrainingExample("item-t2v", [5], [7, 2])] * 3,
        "seq-t2v": [TrainingExample("seq-t2v", [7], [7, 2])] * 3,
    }
    names = sorted(pools)
    weights = np.array([hyper.task_weight(t) for t in names])
    weights = weights / weights.sum()
    rng = np.random.default_rng(0)
    counts = {t: 0 for t in names}
    for _ in range(200):
        for ex in sample_batch(pools, weights, names, 16, rng):
            counts[ex.task] += 1
    total = sum(counts.values())
    assert counts["rec-t"] / total == pytest.approx(0.5, abs=0.03)
    assert counts["item-t2v"] / total == pytest.approx(0.25, abs=0.03)
    assert counts["seq-t2v"] / total == pytest.approx(0.25, abs=0.03)


def test_train_grm_report_and_additivity():
    vocab = tiny_vocab()
    model = tiny_model(vocab, seed=8)
    examples = make_examples(vocab, 24, seed=8)
    rng = np.random.default_rng(8)
    sid_t = np.array([vocab.sid_token_ids("text", rng.integers(0, 4, 3))
                      for _ in range(6)])
    sid_v = np.array([vocab.sid_token_ids("vision", rng.integers(0, 4, 3))
                      for _ in range(6)])
    hyper = GrmHyper(batch_size=8, lr=2e-3, epochs=3, lambda_implicit=0.01,
                     align_batch=4, steps_per_epoch=5)
    model, report = train_grm(model, examples, vocab, sid_t, sid_v, hyper,
                              seed=8)
    assert len(report["epochs"]) == 3
    for entry in report["epochs"]:
        assert entry["total"] == entry["seq2seq"] \
            + hyper.lambda_implicit * entry["implicit"]
    assert report["epochs"][-1]["seq2seq"] < report["epochs"][0]["seq2seq"]


def test_train_grm_early_stopping_restores_best():
    vocab = tiny_vocab()
    model = tiny_model(vocab, seed=9)
    examples = make_examples(vocab, 16, seed=9)
    sid_t = np.array([vocab.sid_token_ids("text", [0, 1, 2])])
    sid_v = np.array([vocab.sid_token_ids("vision", [0, 1, 2])])
    scores = iter([0.5, 0.1, 0.1, 0.1, 0.1])
    snapshots = []

    def validator(m):
        snapshots.append(m.state_arrays())
        return next(scores)

    hyper = GrmHyper(batch_size=4, epochs=5, lambda_implicit=0.0,
                     steps_per_epoch=2, patience=2)
    model, report = train_grm(model, examples, vocab, sid_t, sid_v, hyper,
                              seed=9, validator=validator)
    assert report["early_stopped"] == 3
    assert report["best_epoch"] == 1
    for name, values in model.state_arrays().items():
        assert np.array_equal(values, snapshots[0][name])
