"""Welch's t-test, Cohen's d, sample variance, and CSV emission."""

from __future__ import annotations

import csv
import io
import math
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DegenerateSample


def mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)


def sample_variance(xs: Sequence[float]) -> float:
    """Unbiased (n - 1) variance."""
    if len(xs) < 2:
        raise DegenerateSample("variance needs at least two values")
    m = mean(xs)
    return math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1)


def _validate(xs: Sequence[float], name: str) -> None:
    if len(xs) < 2:
        raise DegenerateSample(f"{name} needs at least two values")
    if not all(math.isfinite(x) for x in xs):
        raise ValueError(f"{name} contains non-finite values")


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularised incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 10000):
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
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta function I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| > |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return betainc(df / 2.0, 0.5, x)


def welch_t(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float]:
    """Welch's unequal-variance t-test: (t, Welch-Satterthwaite df, two-sided p)."""
    _validate(a, "sample_a")
    _validate(b, "sample_b")
    na, nb = len(a), len(b)
    va, vb = sample_variance(a), sample_variance(b)
    if va == 0.0 and vb == 0.0:
        raise DegenerateSample("both samples have zero variance")
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    diff = mean(a) - mean(b)
    t = diff / math.sqrt(se2)
    # variance shares sum to 1, so df cannot underflow for tiny variances
    wa, wb = sa / se2, sb / se2
    df = 1.0 / (wa * wa / (na - 1) + wb * wb / (nb - 1))
    return t, df, t_sf_two_sided(t, df)


def cohens_d(a: Sequence[float], b: Sequence[float]) -> float:
    """Standardised mean difference with the (n - 1)-weighted pooled standard deviation."""
    _validate(a, "sample_a")
    _validate(b, "sample_b")
    return cohens_d_from_summary(mean(a), mean(b), math.sqrt(sample_variance(a)),
                                 math.sqrt(sample_variance(b)), len(a), len(b))


def cohens_d_from_summary(mean_a: float, mean_b: float, sd_a: float, sd_b: float, n_a: int, n_b: int) -> float:
    pooled = math.sqrt(((n_a - 1) * sd_a ** 2 + (n_b - 1) * sd_b ** 2) / (n_a + n_b - 2))
    if pooled == 0.0:
        raise DegenerateSample("pooled standard deviation is zero")
    return (mean_a - mean_b) / pooled


def format_p(p: float) -> str:
    return "<1e-6" if p < 1e-6 else f"{p:.6f}"


def moving_average(xs: Sequence[float], window: int = 3) -> list[float]:
    return [mean(xs[i:i + window]) for i in range(len(xs) - window + 1)]


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

EVOLUTION_COLUMNS = ("method", "iteration", "success_pct", "success_sd", "mean_time_s", "failures_per_run",
                     "variance", "policy_drift", "T1", "T2", "T3", "T4", "T5", "T6")
FINAL_COLUMNS = ("method", "final_success_pct", "variance", "policy_drift", "cohens_d_vs_ours", "welch_t",
                 "welch_df", "welch_p")
SAFETY_COLUMNS = ("arm", "episodes", "actions_executed", "violating_proposals", "blocked", "block_pct",
                  "unsafe_executed", "unsafe_action_pct", "unsafe_episode_pct", "final_success_pct")
ABLATION_COLUMNS = ("modalities", "final_success_pct", "first_iter_ge_80")
PLOT_COLUMNS = ("iteration", "method", "success_pct")

_DIGITS = 4


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.{_DIGITS}f}"
    return str(v)


_COLUMN_FORMAT = {"welch_p": lambda p: "" if p is None else format_p(p)}


def to_csv(columns: Sequence[str], rows: Iterable[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_COLUMN_FORMAT.get(c, _fmt)(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path: str | os.PathLike, columns: Sequence[str], rows: Iterable[Mapping]) -> Path:
    p = Path(path)
    p.write_text(to_csv(columns, rows), encoding="utf-8")
    return p


def read_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
