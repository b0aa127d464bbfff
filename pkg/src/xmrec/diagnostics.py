"""Codebook-health measurements: collision rates, assignment histograms,
codeword perplexity."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

GROUP_SIZE = 16


def collision_rate(codes: np.ndarray) -> float:
    """Percentage of items whose full ID is shared with another item.

    100 * (N - distinct full IDs) / N over a (N, L) code table.
    """
    n = codes.shape[0]
    if n == 0:
        return 0.0
    distinct = np.unique(codes, axis=0).shape[0]
    return 100.0 * (n - distinct) / n


@dataclass
class CodeHistogram:
    level: int
    counts: np.ndarray          # per-codeword assignment counts, index order
    sorted_counts: np.ndarray   # descending
    group_sums: np.ndarray      # sums over consecutive groups of 16


def code_histogram(level: int, codes: np.ndarray, codebook_size: int) -> CodeHistogram:
    if level >= codes.shape[1]:
        raise ValueError(f"level {level} out of range for {codes.shape[1]} levels")
    counts = np.bincount(codes[:, level], minlength=codebook_size)
    sorted_counts = np.sort(counts)[::-1]
    n_groups = int(np.ceil(codebook_size / GROUP_SIZE))
    group_sums = np.array([
        sorted_counts[g * GROUP_SIZE:(g + 1) * GROUP_SIZE].sum()
        for g in range(n_groups)])
    return CodeHistogram(level=level, counts=counts,
                         sorted_counts=sorted_counts, group_sums=group_sums)


def codebook_perplexity(level: int, codes: np.ndarray, codebook_size: int) -> float:
    """exp(Shannon entropy) of the empirical codeword distribution, in [1, M]."""
    hist = code_histogram(level, codes, codebook_size)
    total = hist.counts.sum()
    if total == 0:
        return 1.0
    p = hist.counts[hist.counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


def build_report(sids, codebook_size: int) -> list[dict]:
    """One record per (modality, level) over the *raw* pre-resolution codes."""
    records = []
    for modality in ("text", "vision"):
        raw = sids.raw_codes(modality)
        rate = collision_rate(raw)
        for level in range(raw.shape[1]):
            hist = code_histogram(level, raw, codebook_size)
            records.append({
                "modality": modality,
                "level": level,
                "collision_rate": rate,
                "perplexity": codebook_perplexity(level, raw, codebook_size),
                "group_sums": [int(s) for s in hist.group_sums],
            })
    return records


def write_report(records: list[dict], json_path, csv_path=None):
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["modality", "level", "collision_rate",
                             "perplexity", "group_index", "group_sum"])
            for rec in records:
                for g, s in enumerate(rec["group_sums"]):
                    writer.writerow([rec["modality"], rec["level"],
                                     f"{rec['collision_rate']:.6f}",
                                     f"{rec['perplexity']:.6f}", g, s])
