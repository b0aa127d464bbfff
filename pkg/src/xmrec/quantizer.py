"""Cross-modal residual quantization with contrastive regularization.

Two encoder/decoder pairs (one per modality) share nothing but the latent
width; each modality carries L codebooks of M codewords. Training couples
the modalities through per-level contrastive losses on pre-quantization
residuals (positives chosen by the *other* modality's pseudo-labels) and a
bidirectional alignment loss on the quantized vectors.

Gradient routing: the residual recursion subtracts stop-gradient codewords,
decoders consume the straight-through form z + sg(zq - z), and the codebooks
learn only from the first commitment term. See the QuantizeTrace invariants
in the tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .autograd import Graph, Tensor, backward, no_grad
from .dataio import EmbeddingTable
from .errors import DataError, NumericError
from .nn import MLP, Module, Parameter, rng_for
from .labels import kmeans
from .optim import AdamW

TEXT_LEVEL_LETTERS = "abcdefgh"
VISION_LEVEL_LETTERS = "ABCDEFGH"


@dataclass
class IdHyper:
    """Quantizer hyperparameters; defaults are the full-scale settings."""
    levels: int = 4
    codebook_size: int = 256
    latent_dim: int = 32
    enc_hidden: tuple[int, ...] = (512, 256)
    tau: float = 0.1
    alpha: float = 0.25
    lambda_con: tuple[float, ...] = (0.0, 0.0, 0.1, 0.1)
    lambda_align: float = 0.001
    batch_size: int = 1024
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 20

    def validate(self):
        problems = []
        if self.tau <= 0:
            problems.append(f"tau must be > 0, got {self.tau}")
        if self.alpha < 0:
            problems.append(f"alpha must be >= 0, got {self.alpha}")
        if len(self.lambda_con) != self.levels:
            problems.append(
                f"lambda_con needs one weight per level "
                f"({self.levels}), got {len(self.lambda_con)}")
        if any(l < 0 for l in self.lambda_con) or self.lambda_align < 0:
            problems.append("contrastive/alignment weights must be >= 0")
        if self.batch_size <= 0:
            problems.append("batch_size must be positive")
        if self.levels < 1 or self.codebook_size < 1:
            problems.append("levels and codebook_size must be >= 1")
        if problems:
            raise DataError("; ".join(problems))


class ModalityCoder(Module):
    def __init__(self, name: str, d_in: int, hyper: IdHyper, seed: int):
        dims = (d_in, *hyper.enc_hidden, hyper.latent_dim)
        self.encoder = MLP(dims, f"{name}.enc", seed)
        self.decoder = MLP(tuple(reversed(dims)), f"{name}.dec", seed)
        self.codebooks = [
            Parameter(np.zeros((hyper.codebook_size, hyper.latent_dim),
                               dtype=np.float32),
                      name=f"{name}.codebook{l}")
            for l in range(hyper.levels)]

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)


class QuantizerParams(Module):
    def __init__(self, d_text: int, d_vision: int, hyper: IdHyper, seed: int):
        hyper.validate()
        self.hyper = hyper
        self.d_text, self.d_vision = d_text, d_vision
        self.seed = seed
        self.text = ModalityCoder("text", d_text, hyper, seed)
        self.vision = ModalityCoder("vision", d_vision, hyper, seed)

    def coder(self, modality: str) -> ModalityCoder:
        return self.text if modality == "text" else self.vision

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.values.copy() for p in self.parameters()}

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        for p in self.parameters():
            p.values = state[p.name].copy()

    def meta(self) -> dict:
        return {"d_text": self.d_text, "d_vision": self.d_vision,
                "seed": self.seed, "hyper": asdict(self.hyper)}

    @classmethod
    def from_meta(cls, meta: dict) -> "QuantizerParams":
        hyper = IdHyper(**{**meta["hyper"],
                           "enc_hidden": tuple(meta["hyper"]["enc_hidden"]),
                           "lambda_con": tuple(meta["hyper"]["lambda_con"])})
        return cls(meta["d_text"], meta["d_vision"], hyper, meta["seed"])


@dataclass
class QuantizeTrace:
    """Per-level picks of one residual_quantize call over a batch."""
    codes: np.ndarray                 # (B, L) int
    residuals: list[Tensor]           # r_0 .. r_L,   r_0 = z
    chosen: list[Tensor]              # gathered codewords per level
    quantized: Tensor                 # sum of chosen codewords
    quantized_st: Tensor              # z + sg(quantized - z)


def _nearest_codes(residual_vals: np.ndarray, codebook_vals: np.ndarray) -> np.ndarray:
    # exact per-pair squared distances so equidistant ties resolve by index
    diffs = residual_vals[:, None, :] - codebook_vals[None, :, :]
    dists = np.einsum("bmd,bmd->bm", diffs, diffs)
    return dists.argmin(axis=1)


def residual_quantize(z: Tensor, codebooks: list[Parameter]) -> QuantizeTrace:
    """Greedy per-level nearest-codeword quantization of a (B, D) batch."""
    batch = z.values.shape[0]
    codes = np.zeros((batch, len(codebooks)), dtype=np.int64)
    residuals = [z]
    chosen: list[Tensor] = []
    r = z
    for level, cb in enumerate(codebooks):
        codes[:, level] = _nearest_codes(r.values, cb.values)
        picked = ag.gather_rows(cb, codes[:, level])
        chosen.append(picked)
        r = ag.sub(r, ag.stop_gradient(picked))
        residuals.append(r)
    quantized = chosen[0]
    for picked in chosen[1:]:
        quantized = ag.add(quantized, picked)
    quantized_st = ag.add(z, ag.stop_gradient(ag.sub(quantized, z)))
    return QuantizeTrace(codes=codes, residuals=residuals, chosen=chosen,
                         quantized=quantized, quantized_st=quantized_st)


def init_codebooks(latents: np.ndarray, levels: int, size: int,
                   seed: int) -> list[np.ndarray]:
    """Greedy residual k-means initialization, level by level."""
    if latents.shape[0] < size:
        raise DataError(f"init_codebooks: {latents.shape[0]} samples < "
                        f"codebook size {size}")
    if np.unique(latents, axis=0).shape[0] < size:
        raise DataError("init_codebooks: fewer distinct samples than "
                        "codebook size")
    residual = latents.astype(np.float64).copy()
    books = []
    for level in range(levels):
        res = kmeans(residual, size, seed=seed + level, n_init=4)
        books.append(res.centroids.astype(np.float32))
        residual -= res.centroids[res.labels]
    return books


def _sample_positives(labels: np.ndarray, rng: np.random.Generator):
    """anchor -> one uniformly sampled other in-batch index with equal label."""
    by_label: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        by_label.setdefault(int(lab), []).append(i)
    pos: dict[int, int] = {}
    for i, lab in enumerate(labels):
        group = by_label[int(lab)]
        if len(group) < 2:
            continue
        candidates = [g for g in group if g != i]
        pos[i] = candidates[rng.integers(len(candidates))]
    return pos


def _info_nce_direction(reps: Tensor, pos: dict[int, int], tau: float) -> Tensor | None:
    """-mean_i log softmax(<reps_i, reps_j>/tau)[pos_i]; None when no anchors."""
    if not pos:
        return None
    sims = ag.scale(ag.matmul(reps, ag.transpose(reps, (1, 0))), 1.0 / tau)
    log_probs = ag.log_softmax(sims, axis=-1)
    anchors = np.array(sorted(pos))
    positives = np.array([pos[i] for i in anchors])
    rows = ag.gather_rows(log_probs, anchors)
    return ag.neg(ag.reduce_mean(ag.take_per_row(rows, positives)))


def layer_contrastive_loss(r_text: Tensor, r_vision: Tensor,
                           vision_labels: np.ndarray, text_labels: np.ndarray,
                           tau: float, rng: np.random.Generator):
    """Both direction losses for one level.

    Text anchors take positives sharing the *vision* pseudo-label and vice
    versa; the denominator runs over the whole batch including the anchor
    itself. Anchors without an in-batch positive are excluded; returns the
    summed loss tensor (0 constant when no direction has anchors) plus the
    number of skipped anchors.
    """
    batch = r_text.values.shape[0]
    pos_t = _sample_positives(vision_labels, rng)
    pos_v = _sample_positives(text_labels, rng)
    parts = []
    for reps, pos in ((r_text, pos_t), (r_vision, pos_v)):
        term = _info_nce_direction(reps, pos, tau)
        if term is not None:
            parts.append(term)
    skipped = (batch - len(pos_t)) + (batch - len(pos_v))
    if not parts:
        return Tensor(np.float32(0.0)), skipped
    loss = parts[0]
    for term in parts[1:]:
        loss = ag.add(loss, term)
    return loss, skipped


def recon_align_loss(zq_text: Tensor, zq_vision: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE between same-item quantized vectors of both modalities."""
    batch = zq_text.values.shape[0]
    diag = np.arange(batch)
    sims_tv = ag.scale(ag.matmul(zq_text, ag.transpose(zq_vision, (1, 0))),
                       1.0 / tau)
    loss_tv = ag.neg(ag.reduce_mean(
        ag.take_per_row(ag.log_softmax(sims_tv, axis=-1), diag)))
    sims_vt = ag.transpose(sims_tv, (1, 0))
    loss_vt = ag.neg(ag.reduce_mean(
        ag.take_per_row(ag.log_softmax(sims_vt, axis=-1), diag)))
    return ag.add(loss_tv, loss_vt)


def _rq_terms(trace: QuantizeTrace, alpha: float) -> Tensor:
    """Eq.-style codebook + commitment terms, summed over levels, batch mean."""
    total = None
    for r, picked in zip(trace.residuals[:-1], trace.chosen):
        codebook_term = ag.reduce_mean(
            ag.sumsq(ag.sub(ag.stop_gradient(r), picked), axis=-1))
        commit_term = ag.scale(ag.reduce_mean(
            ag.sumsq(ag.sub(r, ag.stop_gradient(picked)), axis=-1)), alpha)
        level = ag.add(codebook_term, commit_term)
        total = level if total is None else ag.add(total, level)
    return total


def rqvae_loss(params: QuantizerParams, t_batch: np.ndarray,
               v_batch: np.ndarray, vision_labels: np.ndarray,
               text_labels: np.ndarray, rng: np.random.Generator):
    """Total quantizer objective and its per-component breakdown."""
    hyper = params.hyper
    t = Tensor(t_batch)
    v = Tensor(v_batch)
    z_t = params.text.encode(t)
    z_v = params.vision.encode(v)
    trace_t = residual_quantize(z_t, params.text.codebooks)
    trace_v = residual_quantize(z_v, params.vision.codebooks)

    recon_t = ag.reduce_mean(
        ag.sumsq(ag.sub(t, params.text.decode(trace_t.quantized_st)), axis=-1))
    recon_v = ag.reduce_mean(
        ag.sumsq(ag.sub(v, params.vision.decode(trace_v.quantized_st)), axis=-1))
    rq_t = _rq_terms(trace_t, hyper.alpha)
    rq_v = _rq_terms(trace_v, hyper.alpha)

    total = ag.add(ag.add(recon_t, recon_v), ag.add(rq_t, rq_v))
    parts = {"recon_text": recon_t.item(), "recon_vision": recon_v.item(),
             "rq_text": rq_t.item(), "rq_vision": rq_v.item(),
             "skipped_anchors": 0}

    for level, weight in enumerate(hyper.lambda_con):
        if weight == 0.0:
            continue
        con, skipped = layer_contrastive_loss(
            trace_t.residuals[level], trace_v.residuals[level],
            vision_labels, text_labels, hyper.tau, rng)
        parts[f"con_l{level}"] = con.item()
        parts["skipped_anchors"] += skipped
        total = ag.add(total, ag.scale(con, weight))

    if hyper.lambda_align > 0.0:
        align = recon_align_loss(trace_t.quantized_st, trace_v.quantized_st,
                                 hyper.tau)
        parts["align"] = align.item()
        total = ag.add(total, ag.scale(align, hyper.lambda_align))

    parts["total"] = total.item()
    if not np.isfinite(parts["total"]):
        raise NumericError("non-finite quantizer loss", breakdown=parts)
    return total, parts, (trace_t, trace_v)


def encode_catalog(params: QuantizerParams, table: EmbeddingTable,
                   modality: str) -> np.ndarray:
    with no_grad():
        z = params.coder(modality).encode(Tensor(table.matrix))
    return z.values


def quantize_catalog(params: QuantizerParams, table: EmbeddingTable,
                     modality: str):
    """Full-catalog latents, raw codes and the arrays conflict resolution needs."""
    coder = params.coder(modality)
    with no_grad():
        z = coder.encode(Tensor(table.matrix))
        trace = residual_quantize(z, coder.codebooks)
    last_residual = trace.residuals[-2].values  # r_{L-1}, pre-final-level
    return {"latent": z.values, "codes": trace.codes,
            "quantized": trace.quantized.values,
            "last_residual": last_residual,
            "last_codebook": coder.codebooks[-1].values}


@dataclass
class SemanticIds:
    items: list[str]
    text: np.ndarray          # (N, L) post-resolution
    vision: np.ndarray
    raw_text: np.ndarray      # (N, L) pre-resolution
    raw_vision: np.ndarray
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {item: i for i, item in enumerate(self.items)}

    @property
    def levels(self) -> int:
        return int(self.text.shape[1])

    def codes(self, modality: str) -> np.ndarray:
        return self.text if modality == "text" else self.vision

    def raw_codes(self, modality: str) -> np.ndarray:
        return self.raw_text if modality == "text" else self.raw_vision


def sid_string(codes, modality: str) -> str:
    letters = TEXT_LEVEL_LETTERS if modality == "text" else VISION_LEVEL_LETTERS
    return "".join(f"<{letters[l]}_{int(c)}>" for l, c in enumerate(codes))


def _resolve_conflicts(raw: np.ndarray, latent: np.ndarray,
                       quantized: np.ndarray, last_residual: np.ndarray,
                       last_codebook: np.ndarray, modality: str) -> np.ndarray:
    """Keep the closest item per colliding ID; move the rest to their next
    nearest final-level codeword that yields an unused ID."""
    n, levels = raw.shape
    m = last_codebook.shape[0]
    if m ** levels < n:
        raise DataError(f"{modality}: ID space too small "
                        f"({m}^{levels} < {n} items)")
    groups: dict[tuple, list[int]] = {}
    for i in range(n):
        groups.setdefault(tuple(int(c) for c in raw[i]), []).append(i)

    keep_dist = np.linalg.norm(latent - quantized, axis=1)
    resolved = raw.copy()
    taken: set[tuple] = set()
    losers: list[int] = []
    for full_id, members in groups.items():
        keeper = min(members, key=lambda i: (keep_dist[i], i))
        taken.add(full_id)
        losers.extend(i for i in members if i != keeper)

    diffs = last_residual[:, None, :] - last_codebook[None, :, :]
    cand_dists = np.einsum("bmd,bmd->bm", diffs, diffs)
    for i in sorted(losers):
        prefix = tuple(int(c) for c in raw[i, :-1])
        placed = False
        for k in np.argsort(cand_dists[i], kind="stable"):
            candidate = prefix + (int(k),)
            if candidate not in taken:
                resolved[i, -1] = int(k)
                taken.add(candidate)
                placed = True
                break
        if not placed:
            raise DataError(
                f"{modality}: conflict resolution exhausted all {m} "
                f"final-level codewords under prefix {prefix}")
    return resolved


def assign_semantic_ids(params: QuantizerParams, text_table: EmbeddingTable,
                        vision_table: EmbeddingTable) -> SemanticIds:
    out = {}
    for modality, table in (("text", text_table), ("vision", vision_table)):
        info = quantize_catalog(params, table, modality)
        resolved = _resolve_conflicts(
            info["codes"], info["latent"], info["quantized"],
            info["last_residual"], info["last_codebook"], modality)
        out[modality] = (info["codes"], resolved)
    return SemanticIds(items=list(text_table.ids),
                       text=out["text"][1], vision=out["vision"][1],
                       raw_text=out["text"][0], raw_vision=out["vision"][0])


def export_ids(path, sids: SemanticIds):
    with open(path, "w", encoding="utf-8") as fh:
        for i, item in enumerate(sids.items):
            fh.write(json.dumps({
                "item": item,
                "text_sid": [int(c) for c in sids.text[i]],
                "vision_sid": [int(c) for c in sids.vision[i]],
                "text_str": sid_string(sids.text[i], "text"),
                "vision_str": sid_string(sids.vision[i], "vision"),
            }) + "\n")


def load_ids(path) -> SemanticIds:
    items, text, vision = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            items.append(rec["item"])
            text.append(rec["text_sid"])
            vision.append(rec["vision_sid"])
    if not items:
        raise DataError(f"{path}: zero semantic IDs")
    text = np.asarray(text, dtype=np.int64)
    vision = np.asarray(vision, dtype=np.int64)
    return SemanticIds(items=items, text=text, vision=vision,
                       raw_text=text.copy(), raw_vision=vision.copy())


def train_quantizer(text_table: EmbeddingTable, vision_table: EmbeddingTable,
                    text_labels: np.ndarray, vision_labels: np.ndarray,
                    hyper: IdHyper, seed: int):
    """Seeded mini-batch AdamW training; returns params and an epoch report."""
    from .diagnostics import collision_rate  # local import, no cycle

    hyper.validate()
    params = QuantizerParams(text_table.dim, vision_table.dim, hyper, seed)
    for modality, table in (("text", text_table), ("vision", vision_table)):
        latents = encode_catalog(params, table, modality)
        books = init_codebooks(latents, hyper.levels, hyper.codebook_size,
                               seed=seed)
        for cb_param, values in zip(params.coder(modality).codebooks, books):
            cb_param.values = values

    n = text_table.n_items
    opt = AdamW(params.parameters(), lr=hyper.lr,
                weight_decay=hyper.weight_decay)
    rng_shuffle = rng_for("quantizer.shuffle", seed)
    rng_pos = rng_for("quantizer.positives", seed)
    report = {"epochs": [], "hyper": asdict(hyper), "seed": seed}
    last_good = params.state_arrays()

    for epoch in range(1, hyper.epochs + 1):
        perm = rng_shuffle.permutation(n)
        sums: dict[str, float] = {}
        batches = 0
        for start in range(0, n, hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            try:
                loss, parts, _ = rqvae_loss(
                    params, text_table.matrix[idx], vision_table.matrix[idx],
                    vision_labels[idx], text_labels[idx], rng_pos)
            except NumericError as err:
                err.checkpoint = last_good
                raise
            backward(Graph(loss))
            opt.step()
            opt.zero_grad()
            batches += 1
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value
        entry = {"epoch": epoch}
        entry.update({k: v / batches for k, v in sums.items()})
        for modality, table in (("text", text_table),
                                ("vision", vision_table)):
            info = quantize_catalog(params, table, modality)
            entry[f"collision_pre_{modality}"] = collision_rate(info["codes"])
            usage = [int(np.unique(info["codes"][:, l]).size)
                     for l in range(hyper.levels)]
            entry[f"usage_{modality}"] = usage
        report["epochs"].append(entry)
        last_good = params.state_arrays()
    return params, report
