"""Encoder-decoder transformer over semantic-ID tokens plus its training loop.

Pre-LN blocks, sinusoidal positions, causally masked decoder with
cross-attention. The training objective mixes the six seq2seq task streams
and adds a weighted latent-space alignment term that pulls the pooled
encoder representations of an item's two modality IDs together.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from . import autograd as ag
from .autograd import Graph, Tensor, backward, no_grad
from .errors import DataError, NumericError
from .nn import Embedding, LayerNorm, Linear, Module, rng_for
from .optim import AdamW
from .tasks import TrainingExample
from .vocab import Vocab

NEG_BIAS = -1e9


@dataclass
class GrmConfig:
    layers: int = 4
    heads: int = 6
    head_dim: int = 64
    d_model: int = 384
    d_ff: int = 1536
    max_len: int = 256

    def validate(self):
        if self.layers < 1 or self.heads < 1:
            raise DataError("GrmConfig: layers and heads must be >= 1")


@dataclass
class GrmHyper:
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 4
    lambda_implicit: float = 0.01
    tau: float = 0.1
    align_batch: int = 128
    rec_weight: float = 1.0
    item_weight: float = 0.5
    seq_weight: float = 0.5
    steps_per_epoch: int = 0       # 0 = one pass worth of steps
    patience: int = 2

    def task_weight(self, task: str) -> float:
        if task.startswith("rec-"):
            return self.rec_weight
        if task.startswith("item-"):
            return self.item_weight
        return self.seq_weight


def sinusoidal_positions(max_len: int, dim: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    inv = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((max_len, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * inv)
    table[:, 1::2] = np.cos(pos * inv[: (dim - dim // 2)])
    return table.astype(np.float32)


class MultiHeadAttention(Module):
    def __init__(self, cfg: GrmConfig, name: str, seed: int):
        inner = cfg.heads * cfg.head_dim
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.wq = Linear(cfg.d_model, inner, f"{name}.wq", seed, bias=False)
        self.wk = Linear(cfg.d_model, inner, f"{name}.wk", seed, bias=False)
        self.wv = Linear(cfg.d_model, inner, f"{name}.wv", seed, bias=False)
        self.wo = Linear(inner, cfg.d_model, f"{name}.wo", seed, bias=False)

    def _split(self, x: Tensor, batch: int, length: int) -> Tensor:
        x = ag.reshape(x, (batch, length, self.heads, self.head_dim))
        return ag.transpose(x, (0, 2, 1, 3))

    def __call__(self, queries: Tensor, keys_values: Tensor,
                 mask_bias: np.ndarray | None) -> Tensor:
        b, tq = queries.values.shape[0], queries.values.shape[1]
        tk = keys_values.values.shape[1]
        q = self._split(self.wq(queries), b, tq)
        k = self._split(self.wk(keys_values), b, tk)
        v = self._split(self.wv(keys_values), b, tk)
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))),
                          1.0 / np.sqrt(self.head_dim))
        if mask_bias is not None:
            scores = ag.add_const(scores, mask_bias)
        probs = ag.softmax(scores, axis=-1)
        ctx = ag.transpose(ag.matmul(probs, v), (0, 2, 1, 3))
        ctx = ag.reshape(ctx, (b, tq, self.heads * self.head_dim))
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, cfg: GrmConfig, name: str, seed: int):
        self.fc1 = Linear(cfg.d_model, cfg.d_ff, f"{name}.fc1", seed)
        self.fc2 = Linear(cfg.d_ff, cfg.d_model, f"{name}.fc2", seed)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.relu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, cfg: GrmConfig, name: str, seed: int):
        self.ln1 = LayerNorm(cfg.d_model, f"{name}.ln1")
        self.attn = MultiHeadAttention(cfg, f"{name}.attn", seed)
        self.ln2 = LayerNorm(cfg.d_model, f"{name}.ln2")
        self.ffn = FeedForward(cfg, f"{name}.ffn", seed)

    def __call__(self, x: Tensor, mask_bias) -> Tensor:
        h = self.ln1(x)
        x = ag.add(x, self.attn(h, h, mask_bias))
        return ag.add(x, self.ffn(self.ln2(x)))


class DecoderLayer(Module):
    def __init__(self, cfg: GrmConfig, name: str, seed: int):
        self.ln1 = LayerNorm(cfg.d_model, f"{name}.ln1")
        self.self_attn = MultiHeadAttention(cfg, f"{name}.self", seed)
        self.ln2 = LayerNorm(cfg.d_model, f"{name}.ln2")
        self.cross_attn = MultiHeadAttention(cfg, f"{name}.cross", seed)
        self.ln3 = LayerNorm(cfg.d_model, f"{name}.ln3")
        self.ffn = FeedForward(cfg, f"{name}.ffn", seed)

    def __call__(self, x: Tensor, memory: Tensor, causal_bias,
                 memory_bias) -> Tensor:
        h = self.ln1(x)
        x = ag.add(x, self.self_attn(h, h, causal_bias))
        x = ag.add(x, self.cross_attn(self.ln2(x), memory, memory_bias))
        return ag.add(x, self.ffn(self.ln3(x)))


def pad_bias(mask: np.ndarray) -> np.ndarray:
    """(B, Tk) 0/1 mask -> (B, 1, 1, Tk) additive attention bias."""
    return np.where(mask[:, None, None, :] > 0, 0.0, NEG_BIAS).astype(np.float32)


def causal_bias(length: int) -> np.ndarray:
    return np.triu(np.full((1, 1, length, length), NEG_BIAS, dtype=np.float32),
                   k=1)


class GrmModel(Module):
    def __init__(self, vocab_size: int, config: GrmConfig, seed: int):
        config.validate()
        self.config = config
        self.vocab_size = vocab_size
        self.seed = seed
        self.embed = Embedding(vocab_size, config.d_model, "grm.embed", seed)
        self.positions = sinusoidal_positions(config.max_len, config.d_model)
        self.enc_layers = [EncoderLayer(config, f"grm.enc{i}", seed)
                           for i in range(config.layers)]
        self.dec_layers = [DecoderLayer(config, f"grm.dec{i}", seed)
                           for i in range(config.layers)]
        self.enc_norm = LayerNorm(config.d_model, "grm.enc_norm")
        self.dec_norm = LayerNorm(config.d_model, "grm.dec_norm")
        self.out_proj = Linear(config.d_model, vocab_size, "grm.out", seed)
        self._embed_scale = float(np.sqrt(config.d_model))

    def _embed_tokens(self, ids: np.ndarray) -> Tensor:
        x = ag.scale(self.embed(ids), self._embed_scale)
        return ag.add_const(x, self.positions[: ids.shape[1]])

    def encode(self, src_ids: np.ndarray, src_mask: np.ndarray) -> Tensor:
        bias = pad_bias(src_mask)
        x = self._embed_tokens(src_ids)
        for layer in self.enc_layers:
            x = layer(x, bias)
        return self.enc_norm(x)

    def decode(self, tgt_in_ids: np.ndarray, memory: Tensor,
               src_mask: np.ndarray) -> Tensor:
        """Teacher-forced logits (B, T_dec, vocab)."""
        mem_bias = pad_bias(src_mask)
        cb = causal_bias(tgt_in_ids.shape[1])
        x = self._embed_tokens(tgt_in_ids)
        for layer in self.dec_layers:
            x = layer(x, memory, cb, mem_bias)
        return self.out_proj(self.dec_norm(x))

    def forward(self, src_ids, src_mask, tgt_in_ids) -> Tensor:
        return self.decode(tgt_in_ids, self.encode(src_ids, src_mask),
                           src_mask)

    def meta(self) -> dict:
        return {"vocab_size": self.vocab_size, "seed": self.seed,
                "config": asdict(self.config)}

    @classmethod
    def from_meta(cls, meta: dict) -> "GrmModel":
        return cls(meta["vocab_size"], GrmConfig(**meta["config"]),
                   meta["seed"])

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.values.copy() for p in self.parameters()}

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        for p in self.parameters():
            p.values = state[p.name].copy()


@dataclass
class Batch:
    src: np.ndarray        # (B, T) token ids, PAD-padded
    src_mask: np.ndarray   # (B, T) 0/1
    tgt_in: np.ndarray     # (B, T_dec) BOS + targets[:-1]
    tgt_out: np.ndarray    # (B, T_dec) targets incl. EOS
    tgt_mask: np.ndarray   # (B, T_dec) 0/1
    tasks: list[str] = field(default_factory=list)


def make_batch(examples: list[TrainingExample], vocab: Vocab) -> Batch:
    if not examples:
        raise DataError("empty batch")
    if any(len(ex.y) < 2 for ex in examples):
        raise DataError("empty target sequence in batch")
    src_len = max(len(ex.x) for ex in examples)
    tgt_len = max(len(ex.y) for ex in examples)
    b = len(examples)
    src = np.full((b, src_len), vocab.pad_id, dtype=np.int64)
    src_mask = np.zeros((b, src_len), dtype=np.float32)
    tgt_in = np.full((b, tgt_len), vocab.pad_id, dtype=np.int64)
    tgt_out = np.full((b, tgt_len), vocab.pad_id, dtype=np.int64)
    tgt_mask = np.zeros((b, tgt_len), dtype=np.float32)
    for i, ex in enumerate(examples):
        src[i, :len(ex.x)] = ex.x
        src_mask[i, :len(ex.x)] = 1.0
        tgt_in[i, 0] = vocab.bos_id
        tgt_in[i, 1:len(ex.y)] = ex.y[:-1]
        tgt_out[i, :len(ex.y)] = ex.y
        tgt_mask[i, :len(ex.y)] = 1.0
    return Batch(src, src_mask, tgt_in, tgt_out, tgt_mask,
                 [ex.task for ex in examples])


def seq2seq_loss(model: GrmModel, batch: Batch) -> Tensor:
    """Mean negative log-likelihood per non-PAD target token."""
    n_tokens = float(batch.tgt_mask.sum())
    if n_tokens == 0:
        raise DataError("batch has no target tokens")
    logits = model.forward(batch.src, batch.src_mask, batch.tgt_in)
    b, t, v = logits.values.shape
    log_probs = ag.log_softmax(ag.reshape(logits, (b * t, v)), axis=-1)
    token_ll = ag.take_per_row(log_probs, batch.tgt_out.reshape(-1))
    masked = ag.mul(token_ll, Tensor(batch.tgt_mask.reshape(-1)))
    return ag.scale(ag.neg(ag.reduce_sum(masked)), 1.0 / n_tokens)


def implicit_align_loss(model: GrmModel, sid_tokens_t: np.ndarray,
                        sid_tokens_v: np.ndarray, tau: float) -> Tensor:
    """Symmetric InfoNCE between pooled encoder states of the two ID views."""
    b = sid_tokens_t.shape[0]
    if b < 2:
        return Tensor(np.float32(0.0))
    ones_t = np.ones(sid_tokens_t.shape, dtype=np.float32)
    ones_v = np.ones(sid_tokens_v.shape, dtype=np.float32)
    e_t = ag.masked_mean(model.encode(sid_tokens_t, ones_t), ones_t)
    e_v = ag.masked_mean(model.encode(sid_tokens_v, ones_v), ones_v)
    diag = np.arange(b)
    sims_tv = ag.scale(ag.matmul(e_t, ag.transpose(e_v, (1, 0))), 1.0 / tau)
    loss_tv = ag.neg(ag.reduce_mean(
        ag.take_per_row(ag.log_softmax(sims_tv, axis=-1), diag)))
    sims_vt = ag.transpose(sims_tv, (1, 0))
    loss_vt = ag.neg(ag.reduce_mean(
        ag.take_per_row(ag.log_softmax(sims_vt, axis=-1), diag)))
    return ag.add(loss_tv, loss_vt)


def sample_batch(pools: dict[str, list[TrainingExample]], weights: np.ndarray,
                 task_names: list[str], batch_size: int,
                 rng: np.random.Generator) -> list[TrainingExample]:
    """Mixed-task batch: tasks drawn proportional to their weights."""
    picks = rng.choice(len(task_names), size=batch_size, p=weights)
    batch = []
    for t in picks:
        pool = pools[task_names[t]]
        batch.append(pool[rng.integers(len(pool))])
    return batch


def train_grm(model: GrmModel, examples: list[TrainingExample], vocab: Vocab,
              sid_tokens_t: np.ndarray, sid_tokens_v: np.ndarray,
              hyper: GrmHyper, seed: int, validator=None):
    """Mixed-task AdamW training with per-epoch validation early stopping.

    `validator(model) -> float` should return HR@10 on the rec-t validation
    stream; the best-scoring epoch's parameters are restored at the end.
    """
    pools: dict[str, list[TrainingExample]] = {}
    for ex in examples:
        pools.setdefault(ex.task, []).append(ex)
    task_names = sorted(pools)
    weights = np.array([hyper.task_weight(t) for t in task_names], dtype=np.float64)
    if weights.sum() <= 0:
        raise DataError("all task weights are zero")
    weights = weights / weights.sum()

    opt = AdamW(model.parameters(), lr=hyper.lr,
                weight_decay=hyper.weight_decay)
    rng = rng_for("grm.batches", seed)
    align_rng = rng_for("grm.align", seed)
    steps = hyper.steps_per_epoch or max(1, len(examples) // hyper.batch_size)
    n_items = sid_tokens_t.shape[0]

    report = {"epochs": [], "hyper": asdict(hyper), "seed": seed,
              "task_counts": {t: len(p) for t, p in pools.items()},
              "steps_per_epoch": steps}
    best = {"metric": -1.0, "state": model.state_arrays(), "epoch": 0}
    last_good = model.state_arrays()
    bad_epochs = 0

    for epoch in range(1, hyper.epochs + 1):
        seq_sum = imp_sum = 0.0
        for _ in range(steps):
            batch = make_batch(
                sample_batch(pools, weights, task_names, hyper.batch_size, rng),
                vocab)
            loss = seq2seq_loss(model, batch)
            seq_val = loss.item()
            imp_val = 0.0
            if hyper.lambda_implicit > 0.0 and n_items >= 2:
                idx = align_rng.choice(n_items,
                                       size=min(hyper.align_batch, n_items),
                                       replace=False)
                imp = implicit_align_loss(model, sid_tokens_t[idx],
                                          sid_tokens_v[idx], hyper.tau)
                imp_val = imp.item()
                loss = ag.add(loss, ag.scale(imp, hyper.lambda_implicit))
            if not np.isfinite(loss.item()):
                raise NumericError(
                    f"non-finite GRM loss at epoch {epoch}",
                    breakdown={"seq2seq": seq_val, "implicit": imp_val},
                    checkpoint=last_good)
            backward(Graph(loss))
            opt.step()
            opt.zero_grad()
            seq_sum += seq_val
            imp_sum += imp_val
        entry = {"epoch": epoch,
                 "seq2seq": seq_sum / steps,
                 "implicit": imp_sum / steps}
        entry["total"] = entry["seq2seq"] + hyper.lambda_implicit * entry["implicit"]
        if validator is not None:
            entry["val_hr10"] = float(validator(model))
            if entry["val_hr10"] > best["metric"]:
                best = {"metric": entry["val_hr10"],
                        "state": model.state_arrays(), "epoch": epoch}
                bad_epochs = 0
            else:
                bad_epochs += 1
        report["epochs"].append(entry)
        last_good = model.state_arrays()
        if validator is not None and bad_epochs >= hyper.patience:
            report["early_stopped"] = epoch
            break
    if validator is not None and best["metric"] >= 0:
        model.load_state_arrays(best["state"])
        report["best_epoch"] = best["epoch"]
        report["best_val_hr10"] = best["metric"]
    return model, report
