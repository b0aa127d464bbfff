"""Run configuration: INI-style sections, paper defaults, full validation.

Precedence: built-in defaults < config file < --set overrides. Environment
variables are never consulted. Validation collects every violation before
raising so a bad config is reported once, completely.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .grm import GrmConfig, GrmHyper
from .quantizer import IdHyper

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "42", "threads": "1", "out_dir": "runs/default",
            "window": "20"},
    "data": {"text_embeddings": "", "vision_embeddings": "",
             "interactions": ""},
    "synth": {"enabled": "false", "n_items": "2000", "n_clusters": "64",
              "d_text": "48", "d_vision": "32", "cross_modal_corr": "0.7",
              "n_users": "5000", "seq_len": "8"},
    "labels": {"k": "512"},
    "quantizer": {"levels": "4", "codebook_size": "256", "latent_dim": "32",
                  "enc_hidden": "512,256", "tau": "0.1", "alpha": "0.25",
                  "lambda_con": "0,0,0.1,0.1", "lambda_align": "0.001",
                  "batch_size": "1024", "lr": "0.001", "weight_decay": "0.0",
                  "epochs": "20"},
    "grm": {"layers": "4", "heads": "6", "head_dim": "64", "d_model": "384",
            "d_ff": "1536", "batch_size": "256", "lr": "0.001",
            "weight_decay": "0.01", "epochs": "4", "lambda_implicit": "0.01",
            "tau": "0.1", "align_batch": "128", "rec_weight": "1.0",
            "item_weight": "0.5", "seq_weight": "0.5", "steps_per_epoch": "0",
            "patience": "2", "val_users": "200"},
    "inference": {"beam_width": "20", "top_k": "10", "eval_users": "0"},
}


@dataclass
class RunConfig:
    raw: dict[str, dict[str, str]]
    seed: int
    threads: int
    out_dir: Path
    window: int
    data_paths: dict[str, str]
    synth: dict
    labels_k: int
    id_hyper: IdHyper
    grm_config: GrmConfig
    grm_hyper: GrmHyper
    val_users: int
    beam_width: int
    top_k: int
    eval_users: int
    violations: list[str] = field(default_factory=list)

    def config_hash(self) -> str:
        canon = io.StringIO()
        for section in sorted(self.raw):
            for key in sorted(self.raw[section]):
                canon.write(f"{section}.{key}={self.raw[section][key]}\n")
        return hashlib.sha256(canon.getvalue().encode()).hexdigest()


def _merge(config_path, overrides):
    merged = {s: dict(kv) for s, kv in DEFAULTS.items()}
    problems: list[str] = []
    if config_path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(config_path)
        if not read:
            problems.append(f"config file not found: {config_path}")
        for section in parser.sections():
            if section not in merged:
                problems.append(f"unknown config section [{section}]")
                continue
            for key, value in parser.items(section):
                if key not in merged[section]:
                    problems.append(f"unknown key {section}.{key}")
                else:
                    merged[section][key] = value
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            problems.append(f"override must look like section.key=value: "
                            f"{item!r}")
            continue
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in merged or key not in merged[section]:
            problems.append(f"unknown override target {section}.{key}")
        else:
            merged[section][key] = value
    return merged, problems


def _typed(section, key, value, caster, problems):
    try:
        if caster is bool:
            lowered = value.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return lowered in ("true", "1", "yes")
        return caster(value)
    except (TypeError, ValueError):
        problems.append(f"{section}.{key}: cannot parse {value!r} as "
                        f"{caster.__name__}")
        return None


def _float_tuple(section, key, value, problems):
    try:
        return tuple(float(v) for v in value.split(",") if v.strip() != "")
    except ValueError:
        problems.append(f"{section}.{key}: cannot parse {value!r} as "
                        "comma-separated floats")
        return ()


def _int_tuple(section, key, value, problems):
    try:
        return tuple(int(v) for v in value.split(",") if v.strip() != "")
    except ValueError:
        problems.append(f"{section}.{key}: cannot parse {value!r} as "
                        "comma-separated ints")
        return ()


def load_config(config_path=None, overrides=None) -> RunConfig:
    merged, problems = _merge(config_path, overrides)

    def get(section, key, caster):
        return _typed(section, key, merged[section][key], caster, problems)

    seed = get("run", "seed", int)
    threads = get("run", "threads", int)
    window = get("run", "window", int)
    out_dir = Path(merged["run"]["out_dir"])

    synth = {
        "enabled": get("synth", "enabled", bool),
        "n_items": get("synth", "n_items", int),
        "n_clusters": get("synth", "n_clusters", int),
        "d_text": get("synth", "d_text", int),
        "d_vision": get("synth", "d_vision", int),
        "cross_modal_corr": get("synth", "cross_modal_corr", float),
        "n_users": get("synth", "n_users", int),
        "seq_len": get("synth", "seq_len", int),
    }
    data_paths = {k: merged["data"][k] for k in
                  ("text_embeddings", "vision_embeddings", "interactions")}

    id_hyper = IdHyper(
        levels=get("quantizer", "levels", int) or 1,
        codebook_size=get("quantizer", "codebook_size", int) or 1,
        latent_dim=get("quantizer", "latent_dim", int) or 1,
        enc_hidden=_int_tuple("quantizer", "enc_hidden",
                              merged["quantizer"]["enc_hidden"], problems),
        tau=get("quantizer", "tau", float) or 0.0,
        alpha=get("quantizer", "alpha", float) or 0.0,
        lambda_con=_float_tuple("quantizer", "lambda_con",
                                merged["quantizer"]["lambda_con"], problems),
        lambda_align=get("quantizer", "lambda_align", float) or 0.0,
        batch_size=get("quantizer", "batch_size", int) or 1,
        lr=get("quantizer", "lr", float) or 0.0,
        weight_decay=get("quantizer", "weight_decay", float) or 0.0,
        epochs=get("quantizer", "epochs", int) or 0,
    )
    grm_config = GrmConfig(
        layers=get("grm", "layers", int) or 1,
        heads=get("grm", "heads", int) or 1,
        head_dim=get("grm", "head_dim", int) or 1,
        d_model=get("grm", "d_model", int) or 1,
        d_ff=get("grm", "d_ff", int) or 1,
    )
    grm_hyper = GrmHyper(
        batch_size=get("grm", "batch_size", int) or 1,
        lr=get("grm", "lr", float) or 0.0,
        weight_decay=get("grm", "weight_decay", float) or 0.0,
        epochs=get("grm", "epochs", int) or 0,
        lambda_implicit=get("grm", "lambda_implicit", float) or 0.0,
        tau=get("grm", "tau", float) or 0.1,
        align_batch=get("grm", "align_batch", int) or 1,
        rec_weight=get("grm", "rec_weight", float) or 0.0,
        item_weight=get("grm", "item_weight", float) or 0.0,
        seq_weight=get("grm", "seq_weight", float) or 0.0,
        steps_per_epoch=get("grm", "steps_per_epoch", int) or 0,
        patience=get("grm", "patience", int) or 1,
    )

    cfg = RunConfig(
        raw=merged, seed=seed or 0, threads=threads or 1, out_dir=out_dir,
        window=window or 1, data_paths=data_paths, synth=synth,
        labels_k=get("labels", "k", int) or 1, id_hyper=id_hyper,
        grm_config=grm_config, grm_hyper=grm_hyper,
        val_users=get("grm", "val_users", int) or 0,
        beam_width=get("inference", "beam_width", int) or 1,
        top_k=get("inference", "top_k", int) or 1,
        eval_users=get("inference", "eval_users", int) or 0,
        violations=problems,
    )
    _validate(cfg)
    if cfg.violations:
        raise ConfigError(cfg.violations)
    return cfg


def _validate(cfg: RunConfig):
    p = cfg.violations
    if cfg.seed is None or cfg.seed < 0:
        p.append("run.seed must be a non-negative integer")
    if cfg.threads < 1:
        p.append("run.threads must be >= 1")
    if cfg.window < 1:
        p.append("run.window must be >= 1")
    if not cfg.synth["enabled"]:
        for key, value in cfg.data_paths.items():
            if not value:
                p.append(f"data.{key} required when synth.enabled is false")
    if not 0.0 <= cfg.synth["cross_modal_corr"] <= 1.0:
        p.append("synth.cross_modal_corr must be in [0, 1]")
    if cfg.synth["n_clusters"] > cfg.synth["n_items"]:
        p.append("synth.n_clusters must not exceed synth.n_items")
    if cfg.synth["seq_len"] < 3:
        p.append("synth.seq_len must be >= 3")
    if cfg.labels_k < 1:
        p.append("labels.k must be >= 1")
    try:
        cfg.id_hyper.validate()
    except Exception as exc:                      # collect, do not raise
        p.append(f"quantizer: {exc}")
    if cfg.grm_config.d_model % max(1, cfg.grm_config.heads) != 0 and \
            cfg.grm_config.head_dim <= 0:
        p.append("grm.head_dim must be positive")
    if cfg.beam_width < cfg.top_k:
        p.append("inference.beam_width must be >= inference.top_k")
