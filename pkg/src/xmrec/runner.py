"""Pipeline stages behind the CLI: each reads prior artifacts, writes
versioned outputs and a manifest entry."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import dataio, diagnostics, infer
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import DataError
from .grm import GrmModel, train_grm
from .labels import gen_pseudo_labels, load_labels, save_labels
from .nn import rng_for
from .quantizer import (QuantizerParams, assign_semantic_ids, export_ids,
                        load_ids, quantize_catalog, train_quantizer)
from .tasks import build_tasks, task_counts, write_tasks
from .vocab import Vocab

STAGE_OUTPUTS = {
    "synth": ("embeddings_text.emb", "embeddings_vision.emb",
              "interactions.jsonl"),
    "labels": ("labels.jsonl",),
    "quantize": ("quantizer.ckpt", "ids.jsonl", "quant_report.json"),
    "diagnose": ("diag.json", "diag.csv"),
    "build-tasks": ("tasks.jsonl",),
    "train": ("model.ckpt", "train_report.json"),
    "infer": ("rankings.jsonl", "rankings_text.jsonl",
              "rankings_vision.jsonl"),
    "eval": ("metrics.json",),
}


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _update_manifest(cfg: RunConfig, stage: str, inputs: list[Path],
                     params: dict):
    path = cfg.out_dir / "manifest.json"
    manifest = {}
    if path.exists():
        manifest = json.loads(path.read_text())
    manifest[stage] = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "inputs": {p.name: _sha256(p) for p in inputs},
        "outputs": list(STAGE_OUTPUTS[stage]),
        "params": params,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require(cfg: RunConfig, stage_needed: str, *names: str) -> list[Path]:
    paths = []
    for name in names:
        path = cfg.out_dir / name
        if not path.exists():
            raise DataError(f"missing artifact '{name}'; run the "
                            f"'{stage_needed}' stage first")
        paths.append(path)
    return paths


def _data_paths(cfg: RunConfig) -> dict[str, Path]:
    if cfg.synth["enabled"]:
        return {"text": cfg.out_dir / "embeddings_text.emb",
                "vision": cfg.out_dir / "embeddings_vision.emb",
                "interactions": cfg.out_dir / "interactions.jsonl"}
    return {"text": Path(cfg.data_paths["text_embeddings"]),
            "vision": Path(cfg.data_paths["vision_embeddings"]),
            "interactions": Path(cfg.data_paths["interactions"])}


def _load_corpus(cfg: RunConfig):
    paths = _data_paths(cfg)
    for role, path in paths.items():
        if not path.exists():
            hint = "synth" if cfg.synth["enabled"] else "data section paths"
            raise DataError(f"missing {role} input {path}; "
                            f"provide it or run '{hint}' first")
    text = dataio.load_embeddings(paths["text"], "text")
    vision = dataio.load_embeddings(paths["vision"], "vision")
    log = dataio.load_interactions(paths["interactions"])
    dataio.validate_catalog(log, text, vision)
    return text, vision, log, paths


def run_synth(cfg: RunConfig) -> dict:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    s = cfg.synth
    text, vision, log, truth = dataio.synth_dual_modal(
        s["n_items"], s["n_clusters"], s["d_text"], s["d_vision"],
        s["cross_modal_corr"], s["n_users"], s["seq_len"], seed=cfg.seed)
    dataio.write_embeddings(cfg.out_dir / "embeddings_text.emb", text)
    dataio.write_embeddings(cfg.out_dir / "embeddings_vision.emb", vision)
    sequences = {u: log.full_sequence(u) for u in log.users}
    dataio.write_interactions(cfg.out_dir / "interactions.jsonl", sequences)
    _update_manifest(cfg, "synth", [], {**{k: v for k, v in s.items()},
                                        "n_users_kept": log.n_users})
    return {"n_items": s["n_items"], "n_users": log.n_users,
            "avg_len": log.avg_len}


def run_labels(cfg: RunConfig) -> dict:
    text, vision, log, paths = _load_corpus(cfg)
    pl_t, pl_v = gen_pseudo_labels(text, vision, cfg.labels_k, seed=cfg.seed)
    save_labels(cfg.out_dir / "labels.jsonl", text.ids, pl_t, pl_v)
    _update_manifest(cfg, "labels", list(paths.values()),
                     {"K": cfg.labels_k})
    return {"K": cfg.labels_k}


def run_quantize(cfg: RunConfig) -> dict:
    text, vision, log, paths = _load_corpus(cfg)
    label_path = _require(cfg, "labels", "labels.jsonl")[0]
    text_labels, vision_labels = load_labels(label_path, text.ids)
    params, report = train_quantizer(text, vision, text_labels, vision_labels,
                                     cfg.id_hyper, seed=cfg.seed)
    sids = assign_semantic_ids(params, text, vision)
    save_checkpoint(cfg.out_dir / "quantizer.ckpt", "quantizer",
                    params.meta(), params.state_arrays())
    export_ids(cfg.out_dir / "ids.jsonl", sids)
    report["collision_pre_text"] = diagnostics.collision_rate(sids.raw_text)
    report["collision_pre_vision"] = diagnostics.collision_rate(sids.raw_vision)
    report["collision_post_text"] = diagnostics.collision_rate(sids.text)
    report["collision_post_vision"] = diagnostics.collision_rate(sids.vision)
    (cfg.out_dir / "quant_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    hyper = cfg.id_hyper
    _update_manifest(cfg, "quantize", list(paths.values()) + [label_path], {
        "L": hyper.levels, "M": hyper.codebook_size, "K": cfg.labels_k,
        "tau": hyper.tau, "alpha": hyper.alpha,
        "lambda_con": list(hyper.lambda_con),
        "lambda_align": hyper.lambda_align, "batch_size": hyper.batch_size,
        "lr": hyper.lr, "epochs": hyper.epochs,
        "latent_dim": hyper.latent_dim})
    return {"collision_pre_text": report["collision_pre_text"],
            "collision_pre_vision": report["collision_pre_vision"]}


def run_diagnose(cfg: RunConfig) -> dict:
    text, vision, log, paths = _load_corpus(cfg)
    ckpt_path = _require(cfg, "quantize", "quantizer.ckpt")[0]
    _, meta, arrays = load_checkpoint(ckpt_path, expect_kind="quantizer")
    params = QuantizerParams.from_meta(meta)
    params.load_state_arrays(arrays)
    ids_path = _require(cfg, "quantize", "ids.jsonl")[0]
    sids = load_ids(ids_path)
    raw = {m: quantize_catalog(params, t, m)["codes"]
           for m, t in (("text", text), ("vision", vision))}
    sids.raw_text, sids.raw_vision = raw["text"], raw["vision"]
    records = diagnostics.build_report(sids, cfg.id_hyper.codebook_size)
    diagnostics.write_report(records, cfg.out_dir / "diag.json",
                             cfg.out_dir / "diag.csv")
    _update_manifest(cfg, "diagnose", [ckpt_path, ids_path], {})
    return {"records": len(records)}


def _vocab(cfg: RunConfig) -> Vocab:
    return Vocab(cfg.id_hyper.levels, cfg.id_hyper.codebook_size)


def run_build_tasks(cfg: RunConfig) -> dict:
    text, vision, log, paths = _load_corpus(cfg)
    ids_path = _require(cfg, "quantize", "ids.jsonl")[0]
    sids = load_ids(ids_path)
    vocab = _vocab(cfg)
    examples = build_tasks(log, sids, vocab, window=cfg.window)
    write_tasks(cfg.out_dir / "tasks.jsonl", examples, vocab)
    counts = task_counts(examples)
    _update_manifest(cfg, "build-tasks", [ids_path, paths["interactions"]],
                     {"counts": counts, "window": cfg.window})
    return counts


def _val_users(cfg: RunConfig, log) -> list[str]:
    users = list(log.users)
    if cfg.val_users and cfg.val_users < len(users):
        rng = rng_for("val.users", cfg.seed)
        picked = rng.choice(len(users), size=cfg.val_users, replace=False)
        users = [users[i] for i in sorted(picked)]
    return users


def run_train(cfg: RunConfig) -> dict:
    text, vision, log, paths = _load_corpus(cfg)
    ids_path = _require(cfg, "quantize", "ids.jsonl")[0]
    sids = load_ids(ids_path)
    vocab = _vocab(cfg)
    examples = build_tasks(log, sids, vocab, window=cfg.window)
    model = GrmModel(vocab.size, cfg.grm_config, seed=cfg.seed)
    val_users = _val_users(cfg, log)

    def validator(m):
        rankings = infer.modality_rank_users(
            m, vocab, log, sids, val_users, "text", "val",
            cfg.beam_width, 10, cfg.window)
        truth = {u: log.val[u] for u in val_users}
        return infer.evaluate(rankings, truth, ks=(10,))["HR@10"]

    sid_tok_t = vocab.sid_token_table("text", sids.text)
    sid_tok_v = vocab.sid_token_table("vision", sids.vision)
    model, report = train_grm(model, examples, vocab, sid_tok_t, sid_tok_v,
                              cfg.grm_hyper, seed=cfg.seed,
                              validator=validator if val_users else None)
    save_checkpoint(cfg.out_dir / "model.ckpt", "grm", model.meta(),
                    model.state_arrays())
    (cfg.out_dir / "train_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    _update_manifest(cfg, "train", [ids_path, paths["interactions"]], {
        "lambda_implicit": cfg.grm_hyper.lambda_implicit,
        "tau": cfg.grm_hyper.tau, "epochs": cfg.grm_hyper.epochs,
        "layers": cfg.grm_config.layers, "heads": cfg.grm_config.heads,
        "head_dim": cfg.grm_config.head_dim,
        "d_model": cfg.grm_config.d_model})
    return {"best_val_hr10": report.get("best_val_hr10")}


def _load_model(cfg: RunConfig) -> GrmModel:
    ckpt_path = _require(cfg, "train", "model.ckpt")[0]
    _, meta, arrays = load_checkpoint(ckpt_path, expect_kind="grm")
    model = GrmModel.from_meta(meta)
    model.load_state_arrays(arrays)
    return model


def eval_user_subset(cfg: RunConfig, log) -> list[str]:
    users = list(log.users)
    if cfg.eval_users and cfg.eval_users < len(users):
        rng = rng_for("eval.users", cfg.seed)
        picked = rng.choice(len(users), size=cfg.eval_users, replace=False)
        users = [users[i] for i in sorted(picked)]
    return users


def run_infer(cfg: RunConfig) -> dict:
    text, vision, log, paths = _load_corpus(cfg)
    sids = load_ids(_require(cfg, "quantize", "ids.jsonl")[0])
    model = _load_model(cfg)
    vocab = _vocab(cfg)
    users = eval_user_subset(cfg, log)
    t0 = time.time()
    ensemble = infer.rank_eval_users(model, vocab, log, sids, users, "test",
                                     cfg.beam_width, cfg.top_k, cfg.window)
    per_modality = {
        m: infer.modality_rank_users(model, vocab, log, sids, users, m,
                                     "test", cfg.beam_width, cfg.top_k,
                                     cfg.window)
        for m in ("text", "vision")}
    infer.write_rankings(cfg.out_dir / "rankings.jsonl", ensemble)
    infer.write_rankings(cfg.out_dir / "rankings_text.jsonl",
                         per_modality["text"])
    infer.write_rankings(cfg.out_dir / "rankings_vision.jsonl",
                         per_modality["vision"])
    _update_manifest(cfg, "infer", [cfg.out_dir / "model.ckpt"],
                     {"beam_width": cfg.beam_width, "top_k": cfg.top_k,
                      "n_users": len(users),
                      "elapsed_sec": round(time.time() - t0, 3)})
    return {"n_users": len(users)}


def _read_rankings(path: Path) -> dict[str, infer.RankedList]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            out[rec["user"]] = infer.RankedList(
                list(zip(rec["items"], rec["scores"])))
    return out


def run_eval(cfg: RunConfig) -> dict:
    text, vision, log, paths = _load_corpus(cfg)
    blocks = {}
    truth_users = None
    for block, name in (("ensemble", "rankings.jsonl"),
                        ("text", "rankings_text.jsonl"),
                        ("vision", "rankings_vision.jsonl")):
        rankings = _read_rankings(_require(cfg, "infer", name)[0])
        if truth_users is None:
            truth_users = sorted(rankings)
        truth = {u: log.test[u] for u in truth_users}
        blocks[block] = infer.evaluate(rankings, truth, ks=(1, 5, 10))
    dataset = "synthetic" if cfg.synth["enabled"] \
        else Path(cfg.data_paths["interactions"]).stem
    metrics = {"dataset": dataset, "seed": cfg.seed}
    metrics.update({k: blocks["ensemble"][k]
                    for k in ("HR@1", "HR@5", "HR@10", "NDCG@5", "NDCG@10")})
    metrics.update(blocks)
    out_path = cfg.out_dir / "metrics.json"
    out_path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    _update_manifest(cfg, "eval",
                     [cfg.out_dir / n for _, n in
                      (("e", "rankings.jsonl"), ("t", "rankings_text.jsonl"),
                       ("v", "rankings_vision.jsonl"))],
                     {"n_users": len(truth_users or [])})
    return metrics


STAGES = {
    "synth": run_synth,
    "labels": run_labels,
    "quantize": run_quantize,
    "diagnose": run_diagnose,
    "build-tasks": run_build_tasks,
    "train": run_train,
    "infer": run_infer,
    "eval": run_eval,
}


def run_pipeline(cfg: RunConfig) -> dict:
    results = {}
    order = ["synth"] if cfg.synth["enabled"] else []
    order += ["labels", "quantize", "diagnose", "build-tasks", "train",
              "infer", "eval"]
    for stage in order:
        results[stage] = STAGES[stage](cfg)
    return results
