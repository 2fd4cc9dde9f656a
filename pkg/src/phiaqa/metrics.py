"""Spearman rank correlation, relative L2 error, and Fisher-z aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PhiError, ShapeError


class MetricError(PhiError, ValueError):
    exit_code = 7


def rank(values) -> np.ndarray:
    """Ascending 1-based ranks; tied values share the mean of their rank span."""
    x = np.asarray(values, dtype=float).reshape(-1)
    if x.size < 2:
        raise ShapeError("ranking needs at least two values")
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(x.size)
    start = 0
    for stop in range(1, x.size + 1):
        if stop == x.size or sorted_x[stop] != sorted_x[start]:
            ranks[order[start:stop]] = 0.5 * (start + 1 + stop)
            start = stop
    return ranks


def spearman(predictions, targets) -> float:
    """Pearson correlation of the two rank vectors."""
    p, t = np.asarray(predictions, dtype=float), np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ShapeError(f"length mismatch: {p.shape} vs {t.shape}")
    rp, rt = rank(p), rank(t)
    rp -= rp.mean()
    rt -= rt.mean()
    denom = np.sqrt((rp * rp).sum() * (rt * rt).sum())
    if denom == 0.0:
        raise MetricError("degenerate ranking")
    return float(np.clip((rp * rt).sum() / denom, -1.0, 1.0))


def relative_l2(predictions, targets, s_max: float, s_min: float) -> float:
    """mean(((|s - s_hat|) / (s_max - s_min))^2) * 100, in raw score units."""
    if not s_max > s_min:
        raise MetricError(f"score bounds must satisfy s_max > s_min, got {s_max} <= {s_min}")
    p, t = np.asarray(predictions, dtype=float), np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ShapeError(f"length mismatch: {p.shape} vs {t.shape}")
    rel = np.abs(t - p) / (s_max - s_min)
    return float(np.mean(rel * rel) * 100.0)


def fisher_z_average(rhos) -> float:
    rhos = np.asarray(rhos, dtype=float).reshape(-1)
    if rhos.size == 0:
        raise MetricError("nothing to average")
    if np.any(np.abs(rhos) >= 1.0):
        raise MetricError("Fisher transform undefined at +-1")
    return float(np.tanh(np.arctanh(rhos).mean()))


@dataclass
class EvalReport:
    srcc: dict[str, float] = field(default_factory=dict)
    rl2: dict[str, float] = field(default_factory=dict)
    n: dict[str, int] = field(default_factory=dict)
    extras: dict[str, float] = field(default_factory=dict)

    def add(self, category: str, predictions, targets, s_max: float, s_min: float) -> None:
        self.srcc[category] = spearman(predictions, targets)
        self.rl2[category] = relative_l2(predictions, targets, s_max, s_min)
        self.n[category] = int(np.asarray(predictions).size)

    @property
    def mean_srcc(self) -> float:
        values = list(self.srcc.values())
        if len(values) == 1:
            return values[0]
        # +-1 cannot go through atanh; fall back to the arithmetic mean there
        if any(abs(v) >= 1.0 for v in values):
            return float(np.mean(values))
        return fisher_z_average(values)

    @property
    def mean_rl2(self) -> float:
        return float(np.mean(list(self.rl2.values())))

    def rows(self) -> list[tuple[str, float, float, int]]:
        return [(c, self.srcc[c], self.rl2[c], self.n[c]) for c in self.srcc]

    def to_text(self) -> str:
        lines = []
        for c, srcc, rl2, n in self.rows():
            lines.append(f"{c}.srcc={srcc:.6f}")
            lines.append(f"{c}.rl2={rl2:.6f}")
            lines.append(f"{c}.n={n}")
        lines.append(f"avg.srcc={self.mean_srcc:.6f}")
        lines.append(f"avg.rl2={self.mean_rl2:.6f}")
        for k, v in self.extras.items():
            lines.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
        return "\n".join(lines) + "\n"
