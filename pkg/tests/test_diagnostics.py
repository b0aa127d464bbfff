import math

import numpy as np
import pytest

from xmrec.diagnostics import (CodeHistogram, code_histogram, codebook_perplexity,
                               collision_rate, build_report)
from xmrec.quantizer import SemanticIds

from oracles import entropy_perplexity


def test_all_distinct_zero_percent():
    codes = np.array([[0, 1], [1, 1], [2, 0]])
    assert collision_rate(codes) == 0.0


def test_one_shared_id_is_25_percent():
    codes = np.array([[0, 0], [0, 0], [1, 1], [2, 2]])
    assert collision_rate(codes) == pytest.approx(25.0)


def test_histogram_uniform_assignment():
    m = 32
    codes = np.arange(m)[:, None]
    hist = code_histogram(0, codes, m)
    assert np.all(hist.counts == 1)
    assert np.all(hist.group_sums == 16)
    assert hist.counts.sum() == m


def test_histogram_single_codeword():
    codes = np.full((10, 1), 3)
    hist = code_histogram(0, codes, 8)
    assert hist.sorted_counts[0] == 10
    assert np.count_nonzero(hist.counts) == 1


def test_histogram_group_sums_match_recount_oracle():
    rng = np.random.default_rng(0)
    m = 48
    codes = rng.integers(0, m, size=(500, 2))
    hist = code_histogram(1, codes, m)
    # independent recount
    counts = np.zeros(m, dtype=int)
    for c in codes[:, 1]:
        counts[c] += 1
    desc = sorted(counts, reverse=True)
    oracle_groups = [sum(desc[g * 16:(g + 1) * 16])
                     for g in range(math.ceil(m / 16))]
    assert hist.group_sums.tolist() == oracle_groups
    assert hist.counts.sum() == 500


def test_perplexity_uniform_is_m():
    m = 32
    codes = np.repeat(np.arange(m), 3)[:, None]
    assert codebook_perplexity(0, codes, m) == pytest.approx(32.0)


def test_perplexity_degenerate_is_one():
    codes = np.full((20, 1), 5)
    assert codebook_perplexity(0, codes, 32) == pytest.approx(1.0)


def test_perplexity_three_quarters_case():
    codes = np.array([[0]] * 3 + [[1]])
    value = codebook_perplexity(0, codes, 2)
    assert value == pytest.approx(math.exp(0.5623), abs=2e-4)
    assert value == pytest.approx(1.7548, abs=2e-4)
    assert value == pytest.approx(entropy_perplexity([3, 1]), abs=1e-9)


def test_report_covers_modalities_and_levels():
    codes = np.array([[0, 1], [1, 1], [0, 1]])
    sids = SemanticIds(items=["a", "b", "c"], text=codes, vision=codes,
                       raw_text=codes, raw_vision=codes)
    records = build_report(sids, codebook_size=4)
    assert len(records) == 4
    assert {r["modality"] for r in records} == {"text", "vision"}
    for rec in records:
        assert 1.0 <= rec["perplexity"] <= 4.0
        assert sum(rec["group_sums"]) == 3
