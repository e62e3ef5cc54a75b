from __future__ import annotations

import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from llmsched.seqdist import (DistributionError, LengthPMF, completion_conditional, completion_distribution,
                              distribution_from_dict, empirical_pmf, expected_completion_fraction,
                              load_distribution, load_task, mean_length, percentile_length, phase_count,
                              point_mass, resident_pmf, sample_lengths, total_variation, truncated_normal_pmf)

from oracles import completion_bruteforce, trunc_normal_mean


def test_trunc_normal_mean_near_mu():
    pmf = truncated_normal_pmf(32, 13, 80)
    assert abs(pmf.mean() - 32.1) <= 1.0
    assert pmf.mean() == pytest.approx(trunc_normal_mean(32, 13, 80), abs=1e-9)


def test_trunc_normal_tiny_sigma_is_point_mass():
    pmf = truncated_normal_pmf(5, 1e-6, 10)
    assert dict(pmf.probs) == {5: 1.0}


def test_trunc_normal_cut_at_zero():
    pmf = truncated_normal_pmf(0, 10, 100)
    assert pmf.mean() == pytest.approx(8.0, abs=0.5)
    assert pmf.mean() == pytest.approx(trunc_normal_mean(0, 10, 100), abs=1e-9)


def test_trunc_normal_rejects_bad_sigma():
    with pytest.raises(DistributionError):
        truncated_normal_pmf(10, 0, 20)


def test_empirical():
    pmf = empirical_pmf([2, 2, 4])
    assert pmf.probs[2] == pytest.approx(2 / 3)
    assert pmf.probs[4] == pytest.approx(1 / 3)


def test_pmf_validation():
    with pytest.raises(DistributionError):
        LengthPMF({0: 1.0}, 4)
    with pytest.raises(DistributionError):
        LengthPMF({1: 0.5}, 4)
    with pytest.raises(DistributionError):
        empirical_pmf([])


@pytest.mark.parametrize("s,n_d,expected", [(3, 8, {3: 1.0}), (10, 4, {2: 1 / 3}), (8, 4, {4: 0.5})])
def test_completion_conditional_examples(s, n_d, expected):
    got = completion_conditional(s, n_d)
    assert got.keys() == expected.keys()
    for k in got:
        assert got[k] == pytest.approx(expected[k], abs=1e-15)


def test_completion_conditional_matches_enumeration():
    for s in range(1, 65):
        for n_d in range(1, 17):
            ref = completion_bruteforce(s, n_d)
            got = completion_conditional(s, n_d)
            assert got.keys() == ref.keys()
            for u in got:
                assert abs(got[u] - float(ref[u])) <= 1e-12


def test_uniform_completion_fraction():
    pd = LengthPMF({4: 1 / 3, 8: 1 / 3, 12: 1 / 3}, 12)
    pc = completion_distribution(pd, 4)
    assert expected_completion_fraction(pc) == pytest.approx(11 / 18, abs=1e-12)
    # exact value through the enumeration oracle
    ref = sum(Fraction(1, 3) * sum(completion_bruteforce(s, 4).values()) for s in (4, 8, 12))
    assert ref == Fraction(11, 18)


def test_resident_pmf_is_length_biased():
    pd = LengthPMF({2: 0.5, 10: 0.5}, 10)
    r = resident_pmf(pd, 4)
    # 10 spans 3 phases, 2 spans one
    assert r.probs[10] == pytest.approx(0.75)
    assert phase_count(pd, 4) == pytest.approx(2.0)


def test_sampling_frequencies():
    pmf = LengthPMF({1: 0.2, 5: 0.5, 9: 0.3}, 9)
    x = sample_lengths(pmf, np.random.default_rng(0), 100_000)
    for k, p in pmf.probs.items():
        assert abs((x == k).mean() - p) <= 0.01


def test_sampling_total_variation():
    pmf = load_task("S").pd
    x = sample_lengths(pmf, np.random.default_rng(1), 100_000)
    assert total_variation(empirical_pmf(x, pmf.max_len), pmf) <= 0.02


def test_percentile_length():
    pmf = LengthPMF({1: 0.5, 2: 0.49, 3: 0.01}, 3)
    assert percentile_length(pmf, 50) == 1
    assert percentile_length(pmf, 99) == 2
    assert percentile_length(pmf, 100) == 3


def test_distribution_files(tmp_path):
    p = tmp_path / "d.json"
    p.write_text(json.dumps({"kind": "trunc_normal", "mu": 20, "sigma": 5, "max_len": 40}))
    assert load_distribution(p) == truncated_normal_pmf(20, 5, 40)
    rt = distribution_from_dict(point_mass(7).to_dict())
    assert dict(rt.probs) == {7: 1.0}
    p.write_text("{bad json")
    with pytest.raises(DistributionError, match="line 1"):
        load_distribution(p)
    with pytest.raises(DistributionError):
        distribution_from_dict({"kind": "zipf"})


@pytest.mark.parametrize("name", ["S", "T", "G", "C1", "C2"])
def test_task_presets(name):
    t = load_task(name)
    assert t.pd.max_len >= percentile_length(t.pd, 99)
    # the listed p99 is a dataset statistic; the discretized preset lands within 10% of it
    assert abs(percentile_length(t.pd, 99) - t.output_p99) <= 0.1 * t.output_p99
    with pytest.raises(DistributionError):
        load_task("nope")


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.integers(1, 40), st.floats(0.01, 1.0), min_size=1, max_size=8), st.integers(1, 12))
def test_completion_mass_identity(weights, n_d):
    tot = sum(weights.values())
    pd = LengthPMF({k: v / tot for k, v in weights.items()}, 40)
    pc = completion_distribution(pd, n_d)
    # per length: mass 1 if it fits a phase, else 1/ceil(S/n_d)
    expected = sum(p / math.ceil(s / n_d) for s, p in pd.probs.items())
    assert expected_completion_fraction(pc) == pytest.approx(expected, abs=1e-12)
    assert 0 < expected_completion_fraction(pc) <= 1 + 1e-12
    assert mean_length(pd) >= 1
