from __future__ import annotations

import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from authpipe.errors import ValidationError
from authpipe.robust_stats import MetricSummary, format_parenthesis, parse_parenthesis, summarize
from oracles import bootstrap_half_width, hazen_percentile


def test_matches_bootstrap_oracle_on_random_samples():
    rng = np.random.default_rng(2024)
    for trial in range(20):
        values = rng.uniform(0.3, 1.0, size=10).tolist()
        got = summarize(values, n_bootstrap=500, seed=trial)
        median, q16, q84 = bootstrap_half_width(values, 500, trial)
        assert got.median == pytest.approx(median, abs=1e-12)
        assert got.q16 == pytest.approx(q16, abs=1e-12)
        assert got.q84 == pytest.approx(q84, abs=1e-12)


def test_frozen_reference_value():
    # Oracle output for 0.1..1.0, seed 7, 10000 resamples.
    s = summarize([round(0.1 * k, 1) for k in range(1, 11)], n_bootstrap=10_000, seed=7)
    assert s.median == pytest.approx(0.55, abs=1e-12)
    assert s.q16 == pytest.approx(0.4, abs=1e-12)
    assert s.q84 == pytest.approx(0.7, abs=1e-12)
    assert s.half_width == pytest.approx(0.15, abs=1e-12)


def test_empirical_option_uses_raw_values():
    values = [0.2, 0.9, 0.5, 0.7, 0.6]
    s = summarize(values, method="empirical")
    ordered = sorted(values)
    assert s.q16 == pytest.approx(hazen_percentile(ordered, 16))
    assert s.q84 == pytest.approx(hazen_percentile(ordered, 84))
    assert s.n_bootstrap == 0 and s.median == statistics.median(values)


def test_constant_values_have_zero_width():
    s = summarize([0.8] * 10)
    assert (s.median, s.half_width) == (0.8, 0.0)


def test_bad_inputs():
    with pytest.raises(ValidationError):
        summarize([])
    with pytest.raises(ValidationError):
        summarize([1.0], method="jackknife")
    with pytest.raises(ValidationError):
        summarize([1.0], n_bootstrap=0)


def test_summary_dict_round_trip():
    s = summarize([0.1, 0.5, 0.4], n_bootstrap=100, seed=3)
    d = s.to_dict()
    assert d["percentile"] == "hazen"
    assert MetricSummary.from_dict(d) == s


@pytest.mark.parametrize(
    "median, width, expected",
    [
        (0.710, 0.046, "0.710(46)"),
        (0.866, 0.044, "0.866(44)"),
        (0.989, 0.005, "0.9890(50)"),
        (1.0, 0.0, "1.0000(0)"),
        (0.5, 0.0, "0.5000(0)"),
        (0.71234, 0.0996, "0.71(10)"),
        (0.5, 0.00995, "0.500(10)"),
        (12.345, 1.25, "12.3(13)"),
        (123.0, 45.0, "123(45)"),
        (0.123456, 0.000123, "0.12346(12)"),
    ],
)
def test_format_parenthesis(median, width, expected):
    assert format_parenthesis(median, width) == expected


def test_single_significant_digit():
    assert format_parenthesis(0.989, 0.005, sig_digits=1) == "0.989(5)"


def test_format_rejects_bad_width():
    with pytest.raises(ValidationError):
        format_parenthesis(0.5, -0.01)
    with pytest.raises(ValidationError):
        format_parenthesis(0.5, float("nan"))


@given(st.floats(0, 1), st.floats(1e-5, 0.5))
def test_parse_inverts_format_to_printed_precision(median, width):
    text = format_parenthesis(median, width)
    m, w = parse_parenthesis(text)
    assert format_parenthesis(m, w) == text
    decimals = len(text.split("(")[0].partition(".")[2])
    assert abs(m - median) <= 0.5 * 10**-decimals + 1e-12


def test_parse_rejects_garbage():
    with pytest.raises(ValueError):
        parse_parenthesis("0.7 +- 0.05")
