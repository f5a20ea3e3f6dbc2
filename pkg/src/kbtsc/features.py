"""Per-sample statistical summaries and pairwise Fisher-score separability."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyInput, UnknownClass

FISHER_EPS = 1e-12

# order used when flattening a summary into named scalar features
FEATURE_FIELDS = (
    "min",
    "max",
    "mean",
    "variance",
    "std",
    "median",
    "period",
    "slope",
    "mean_crossings",
)


@dataclass(frozen=True)
class ChannelStats:
    min: float
    max: float
    mean: float
    variance: float
    std: float
    median: float
    period: int | None  # lag of the dominant autocorrelation peak; 0 = no periodicity
    slope: float | None  # least-squares trend, value units per step
    mean_crossings: int


@dataclass(frozen=True)
class StatsSummary:
    channels: tuple

    def features(self) -> dict:
        """Flatten into {"ch<c>.<field>": value}, skipping absent fields."""
        out = {}
        for c, ch in enumerate(self.channels):
            for name in FEATURE_FIELDS:
                v = getattr(ch, name)
                if v is not None:
                    out[f"ch{c}.{name}"] = float(v)
        return out

    def render(self) -> str:
        lines = []
        for c, ch in enumerate(self.channels):
            parts = [
                f"min={ch.min:.4g}",
                f"max={ch.max:.4g}",
                f"mean={ch.mean:.4g}",
                f"variance={ch.variance:.4g}",
                f"std={ch.std:.4g}",
                f"median={ch.median:.4g}",
            ]
            if ch.period is not None:
                parts.append(f"dominant_period={ch.period}" if ch.period else "dominant_period=none")
            if ch.slope is not None:
                parts.append(f"trend_slope={ch.slope:.4g}")
            parts.append(f"mean_crossings={ch.mean_crossings}")
            lines.append(f"- channel {c}: " + ", ".join(parts))
        return "\n".join(lines)


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Biased sample autocorrelation r[0..w-1], r[0] = 1 (all zeros for a constant series)."""
    d = x - x.mean()
    denom = float(np.dot(d, d))
    if denom == 0.0:
        return np.zeros(len(x))
    full = np.correlate(d, d, mode="full")[len(x) - 1 :]
    return full / denom


def dominant_period(x: np.ndarray) -> int:
    """Lag of the highest autocorrelation local maximum after its first negative dip.

    Only lags up to w // 2 are searched. Returns 0 when the series never
    decorrelates or no local maximum follows the dip.
    """
    w = len(x)
    r = autocorrelation(x)
    max_lag = w // 2
    if max_lag < 2:
        return 0
    below = np.nonzero(r[1 : max_lag + 1] < 0)[0]
    if len(below) == 0:
        return 0
    start = int(below[0]) + 1
    best_lag, best_val = 0, -np.inf
    for lag in range(max(start, 1), max_lag + 1):
        left = r[lag - 1]
        right = r[lag + 1] if lag + 1 < w else -np.inf
        if r[lag] > left and r[lag] >= right and r[lag] > best_val:
            best_lag, best_val = lag, r[lag]
    return best_lag


def _channel_stats(x: np.ndarray) -> ChannelStats:
    w = len(x)
    mean = float(x.mean())
    var = float(x.var())
    d = x - mean
    pos = d > 0
    crossings = int(np.count_nonzero(pos[1:] != pos[:-1])) if w > 1 else 0
    if w >= 2:
        t = np.arange(w, dtype=np.float64)
        tc = t - t.mean()
        slope = float(np.dot(tc, d) / np.dot(tc, tc))
        period = dominant_period(x)
    else:
        slope = period = None
    return ChannelStats(
        min=float(x.min()),
        max=float(x.max()),
        mean=mean,
        variance=var,
        std=math.sqrt(var),
        median=float(np.median(x)),
        period=period,
        slope=slope,
        mean_crossings=crossings,
    )


def summarize(sample) -> StatsSummary:
    values = getattr(sample, "values", sample)
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.size == 0:
        raise EmptyInput("cannot summarize an empty sample")
    return StatsSummary(tuple(_channel_stats(row) for row in arr))


def _mean_var(values: Sequence[float]) -> tuple[float, float]:
    # fsum keeps both moments independent of sample order
    n = len(values)
    mu = math.fsum(values) / n
    return mu, math.fsum((v - mu) ** 2 for v in values) / n


def fisher_score(values_a: Sequence[float], values_b: Sequence[float]) -> float:
    """(mu_a - mu_b)^2 / (var_a + var_b), population variances.

    A pooled variance below FISHER_EPS is floored to it, so degenerate
    zero-variance pairs yield a large finite score instead of a division error.
    """
    if len(values_a) == 0 or len(values_b) == 0:
        raise EmptyInput("fisher_score needs at least one value per class")
    mu_a, var_a = _mean_var([float(v) for v in values_a])
    mu_b, var_b = _mean_var([float(v) for v in values_b])
    return (mu_a - mu_b) ** 2 / max(var_a + var_b, FISHER_EPS)


@dataclass(frozen=True)
class RankedFeature:
    name: str
    raw_score: float
    normalized: float
    threshold: float
    higher: str  # label of the class with the larger mean
    mean_a: float
    mean_b: float
    std_a: float
    std_b: float

    def describe(self, a: str, b: str) -> str:
        lower = b if self.higher == a else a
        return (
            f"{a!r} vs {b!r}: feature {self.name} separates the classes "
            f"(normalized Fisher score {self.normalized:.2f}); "
            f"values above {self.threshold:.6g} indicate {self.higher!r}, below indicate {lower!r} "
            f"(class means {a!r}={self.mean_a:.4g}, {b!r}={self.mean_b:.4g})."
        )


@dataclass(frozen=True)
class SeparabilityReport:
    class_pair: tuple
    ranked_features: tuple = field(default=())

    def to_json(self) -> str:
        return json.dumps(
            {"class_pair": list(self.class_pair), "ranked_features": [asdict(f) for f in self.ranked_features]}
        )

    def describe(self) -> list[str]:
        a, b = self.class_pair
        return [f.describe(a, b) for f in self.ranked_features]


def decision_threshold(mu_a: float, sd_a: float, mu_b: float, sd_b: float) -> float:
    """Point at equal z-distance from both class means."""
    if sd_a + sd_b < 1e-9:
        return (mu_a + mu_b) / 2
    return (mu_a * sd_b + mu_b * sd_a) / (sd_a + sd_b)


def rank_features(train: Mapping[str, Sequence[StatsSummary]], pair: tuple, top_n: int = 3) -> SeparabilityReport:
    a, b = pair
    for lab in (a, b):
        if lab not in train or not train[lab]:
            raise UnknownClass(f"no summaries for class {lab!r}")
    feats_a = [s.features() for s in train[a]]
    feats_b = [s.features() for s in train[b]]
    names = set.intersection(*(set(f) for f in feats_a + feats_b))
    scored = []
    for name in names:
        xa = [f[name] for f in feats_a]
        xb = [f[name] for f in feats_b]
        raw = fisher_score(xa, xb)
        mu_a, var_a = _mean_var(xa)
        mu_b, var_b = _mean_var(xb)
        sd_a, sd_b = math.sqrt(var_a), math.sqrt(var_b)
        scored.append((name, raw, mu_a, mu_b, sd_a, sd_b))
    top = max((s[1] for s in scored), default=0.0)
    ranked = []
    for name, raw, mu_a, mu_b, sd_a, sd_b in scored:
        ranked.append(
            RankedFeature(
                name=name,
                raw_score=raw,
                normalized=raw / top if top > 0 else 0.0,
                threshold=decision_threshold(mu_a, sd_a, mu_b, sd_b),
                higher=a if mu_a >= mu_b else b,
                mean_a=mu_a,
                mean_b=mu_b,
                std_a=sd_a,
                std_b=sd_b,
            )
        )
    ranked.sort(key=lambda f: (-f.normalized, -f.raw_score, f.name))
    return SeparabilityReport((a, b), tuple(ranked[:top_n]))
