"""Median and symmetrized 68% uncertainty of per-split accuracies."""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from authpipe.errors import ValidationError

LOWER_Q, UPPER_Q = 16.0, 84.0
PERCENTILE_METHOD = "hazen"
UNCERTAINTY_METHODS = ("bootstrap", "empirical")


@dataclass(frozen=True)
class MetricSummary:
    values: tuple[float, ...]
    median: float
    half_width: float
    n_bootstrap: int
    seed: int
    q16: float
    q84: float
    method: str = "bootstrap"

    def to_dict(self) -> dict:
        return {
            "values": list(self.values),
            "median": self.median,
            "half_width": self.half_width,
            "q16": self.q16,
            "q84": self.q84,
            "n_bootstrap": self.n_bootstrap,
            "seed": self.seed,
            "method": self.method,
            "percentile": PERCENTILE_METHOD,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricSummary:
        return cls(tuple(d["values"]), d["median"], d["half_width"], d["n_bootstrap"],
                   d["seed"], d["q16"], d["q84"], d.get("method", "bootstrap"))


def bootstrap_medians(values: np.ndarray, n_bootstrap: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.integers(0, values.size, size=(n_bootstrap, values.size))
    return np.median(values[idx], axis=1)


def summarize(
    values, n_bootstrap: int = 10_000, seed: int = 0, method: str = "bootstrap"
) -> MetricSummary:
    """Sample median plus half the 16-84 percentile spread.

    ``bootstrap`` takes the spread of medians of ``n_bootstrap`` resamples
    drawn with replacement; ``empirical`` takes the spread of the raw values.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValidationError("cannot summarize an empty list of values")
    if method == "bootstrap":
        if n_bootstrap < 1:
            raise ValidationError("n_bootstrap must be positive")
        spread = bootstrap_medians(arr, n_bootstrap, seed)
    elif method == "empirical":
        spread = arr
    else:
        raise ValidationError(f"unknown uncertainty method {method!r}")
    q16, q84 = np.percentile(spread, [LOWER_Q, UPPER_Q], method=PERCENTILE_METHOD)
    return MetricSummary(
        values=tuple(float(v) for v in arr),
        median=float(np.median(arr)),
        half_width=float((q84 - q16) / 2.0),
        n_bootstrap=n_bootstrap if method == "bootstrap" else 0,
        seed=seed,
        q16=float(q16),
        q84=float(q84),
        method=method,
    )


def _quantize(x: Decimal, decimals: int) -> Decimal:
    return x.quantize(Decimal(1).scaleb(-decimals), rounding=ROUND_HALF_UP)


def format_parenthesis(median: float, half_width: float, sig_digits: int = 2) -> str:
    """Render ``median ± half_width`` as e.g. ``0.710(46)``.

    The uncertainty keeps ``sig_digits`` significant digits and the median is
    rounded to the same last decimal place. Zero uncertainty prints four
    decimals and ``(0)``.
    """
    if half_width < 0 or not np.isfinite(half_width):
        raise ValidationError(f"half_width must be finite and non-negative, got {half_width}")
    if sig_digits < 1:
        raise ValidationError("sig_digits must be >= 1")
    m = Decimal(repr(float(median)))
    if half_width == 0:
        return f"{_quantize(m, 4)}(0)"
    u = Decimal(repr(float(half_width)))
    lead = u.adjusted()
    decimals = sig_digits - 1 - lead
    q = _quantize(u, decimals)
    if q.adjusted() > lead:  # rounding carried into a new leading digit
        decimals -= 1
        q = _quantize(u, decimals)
    decimals = max(decimals, 0)
    q = _quantize(u, decimals)
    digits = int(q.scaleb(decimals))
    return f"{_quantize(m, decimals)}({digits})"


_PAREN = re.compile(r"^\s*(-?\d+)(?:\.(\d+))?\((\d+)\)\s*$")


def parse_parenthesis(text: str) -> tuple[float, float]:
    """Inverse of :func:`format_parenthesis`, exact to the printed precision."""
    match = _PAREN.match(text)
    if not match:
        raise ValueError(f"not in parenthesis notation: {text!r}")
    whole, frac, unc = match.groups()
    frac = frac or ""
    median = float(f"{whole}.{frac}" if frac else whole)
    half_width = float(Decimal(int(unc)).scaleb(-len(frac)))
    return median, half_width
