"""Prediction probability (PK), Kendall tau-b and unpaired t-tests.

PK counts, over pairs of samples whose reference labels differ, how often the
prediction orders the pair the same way as the reference. Pairs the prediction
ties count half:

    PK = (C + T_x / 2) / (C + D + T_x)

Ties are exact equality by default; pass ``eps > 0`` to treat ``|a - b| <= eps``
as tied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "PkReport",
    "AveragePk",
    "TTestResult",
    "PkUndefinedError",
    "pair_counts",
    "pk",
    "average_pk",
    "kendall_tau_b",
    "betainc_regularized",
    "t_sf_two_tailed",
    "unpaired_t_test",
    "bootstrap_average_pk",
]


class PkUndefinedError(ValueError):
    """Every reference value is identical, so no pair can be ranked."""


@dataclass(frozen=True)
class PkReport:
    n_pairs_considered: int
    concordant: int
    discordant: int
    ties_pred_only: int
    pk: float


@dataclass(frozen=True)
class AveragePk:
    per_rater: list[PkReport] = field(default_factory=list)
    mean_pk: float = float("nan")


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: float
    p_two_tailed: float
    variant: str


def _as_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least 2 samples")
    return x, y


def _pair_diffs(v: np.ndarray, i: np.ndarray, j: np.ndarray, eps: float):
    d = v[j] - v[i]
    tied = np.abs(d) <= eps if eps > 0 else d == 0
    return np.sign(d), tied


def pair_counts(x, y, eps: float = 0.0) -> dict[str, int]:
    """Count concordant, discordant and tied pairs over all i < j.

    ``tie_x`` / ``tie_y`` are pairs tied in only that variable; ``tie_xy`` in both.
    """
    x, y = _as_pair(x, y)
    i, j = np.triu_indices(x.size, 1)
    sx, tx = _pair_diffs(x, i, j, eps)
    sy, ty = _pair_diffs(y, i, j, eps)
    untied = ~tx & ~ty
    prod = sx * sy
    return {
        "concordant": int(np.count_nonzero(untied & (prod > 0))),
        "discordant": int(np.count_nonzero(untied & (prod < 0))),
        "tie_x": int(np.count_nonzero(tx & ~ty)),
        "tie_y": int(np.count_nonzero(ty & ~tx)),
        "tie_xy": int(np.count_nonzero(tx & ty)),
    }


def pk(reference: Sequence[float], prediction: Sequence[float], eps: float = 0.0) -> PkReport:
    """Prediction probability of ``prediction`` against one reference rater."""
    counts = pair_counts(reference, prediction, eps)
    c, d = counts["concordant"], counts["discordant"]
    # pairs tied in the reference are excluded whatever the prediction does
    t_x = counts["tie_y"]
    n = c + d + t_x
    if n == 0:
        raise PkUndefinedError("all reference values are identical; PK is undefined")
    return PkReport(n, c, d, t_x, (c + t_x / 2) / n)


def average_pk(
    reference_columns: Sequence[Sequence[float]], prediction: Sequence[float], eps: float = 0.0
) -> AveragePk:
    """PK against each reference column, and their arithmetic mean."""
    columns = [np.asarray(col, dtype=np.float64) for col in reference_columns]
    if not columns:
        raise ValueError("need at least one reference column")
    reports = [pk(col, prediction, eps) for col in columns]
    return AveragePk(reports, float(np.mean([r.pk for r in reports])))


def kendall_tau_b(x: Sequence[float], y: Sequence[float], eps: float = 0.0) -> float:
    counts = pair_counts(x, y, eps)
    c, d = counts["concordant"], counts["discordant"]
    denom = math.sqrt((c + d + counts["tie_x"]) * (c + d + counts["tie_y"]))
    if denom == 0:
        raise ValueError("tau-b undefined: one variable is constant")
    return (c - d) / denom


# --- t-test ----------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_tailed(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0:
        return 1.0
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc_regularized(df / 2.0, 0.5, df / (df + t * t)))


def unpaired_t_test(a: Sequence[float], b: Sequence[float], variant: str = "welch") -> TTestResult:
    """Two-sample t-test; ``variant`` is ``"welch"`` (default) or ``"student"``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    if variant == "welch":
        if va == 0 or vb == 0:
            raise ValueError("degenerate variance: welch test needs nonzero variance in both samples")
        qa, qb = va / na, vb / nb
        se = math.sqrt(qa + qb)
        df = (qa + qb) ** 2 / (qa**2 / (na - 1) + qb**2 / (nb - 1))
    elif variant == "student":
        df = na + nb - 2
        pooled = ((na - 1) * va + (nb - 1) * vb) / df
        if pooled == 0:
            # identical constant samples: no evidence of any difference
            if diff == 0:
                return TTestResult(0.0, float(df), 1.0, variant)
            raise ValueError("degenerate variance: pooled variance is zero")
        se = math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    else:
        raise ValueError(f"unknown t-test variant {variant!r}")
    t = diff / se
    return TTestResult(float(t), float(df), t_sf_two_tailed(t, df), variant)


def bootstrap_average_pk(
    reference_columns: Sequence[Sequence[float]],
    prediction: Sequence[float],
    n_resamples: int,
    seed: int,
    eps: float = 0.0,
) -> np.ndarray:
    """Mean PK on ``n_resamples`` with-replacement resamples of the test set.

    Resamples in which some reference column is constant are redrawn, so the
    result always holds ``n_resamples`` finite values. Deterministic in ``seed``.
    """
    columns = np.asarray(reference_columns, dtype=np.float64)
    if columns.ndim == 1:
        columns = columns[None, :]
    pred = np.asarray(prediction, dtype=np.float64)
    n = pred.size
    rng = np.random.default_rng(seed)
    out = np.empty(n_resamples)
    k = 0
    attempts = 0
    while k < n_resamples:
        attempts += 1
        if attempts > 100 * n_resamples + 100:
            raise PkUndefinedError("bootstrap keeps drawing constant reference columns")
        idx = rng.integers(0, n, size=n)
        try:
            out[k] = average_pk(columns[:, idx], pred[idx], eps).mean_pk
        except PkUndefinedError:
            continue
        k += 1
    return out
