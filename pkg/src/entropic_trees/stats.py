"""Empirical distributions and a k-sample equality test for reply delays.

The test statistic follows the rank form with midrank tie handling, is
standardized by the published finite-sample variance, and significance is
reported as a bracket between tabulated levels rather than a point p-value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .propagation import LABELS, ThreadRecord

SIGNIFICANCE_LEVELS = (0.25, 0.10, 0.05, 0.025, 0.01, 0.005, 0.001)

_B0 = (0.675, 1.281, 1.645, 1.960, 2.326, 2.573, 3.085)
_B1 = (-0.245, 0.250, 0.678, 1.149, 1.822, 2.364, 3.615)
_B2 = (-0.105, -0.305, -0.362, -0.391, -0.396, -0.345, -0.154)


@dataclass
class Ecdf:
    """Right-continuous step function F(x) = (#observations <= x) / n."""

    xs: np.ndarray
    F: np.ndarray
    n: int

    def __call__(self, q) -> np.ndarray | float:
        idx = np.searchsorted(self.xs, q, side="right")
        vals = np.where(idx > 0, self.F[np.maximum(idx - 1, 0)], 0.0)
        return float(vals) if np.isscalar(q) else vals


def ecdf(values) -> Ecdf:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("ecdf needs a nonempty 1-d sample")
    if not np.all(np.isfinite(arr)):
        raise ValueError("ecdf sample must be finite")
    srt = np.sort(arr)
    xs, counts = np.unique(srt, return_counts=True)
    F = np.cumsum(counts) / arr.size
    return Ecdf(xs=xs, F=F, n=int(arr.size))


def critical_values(k: int) -> np.ndarray:
    """Interpolated thresholds for the standardized statistic at each level."""
    m = k - 1
    sq = math.sqrt(m)
    return np.array([b0 + b1 / sq + b2 / m for b0, b1, b2 in zip(_B0, _B1, _B2)])


@dataclass
class AdResult:
    statistic: float
    standardized: float
    k: int
    n_total: int
    critical: np.ndarray
    p_range: tuple[float, float]

    @property
    def reject_at_5pct(self) -> bool:
        return self.standardized >= self.critical[SIGNIFICANCE_LEVELS.index(0.05)]


def anderson_darling_k(samples: list) -> AdResult:
    """Rank-based k-sample test with midrank treatment of ties.

    Raises ValueError for fewer than two samples, any empty sample, or a
    pooled size too small to standardize.
    """
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    arrs = [np.asarray(s, dtype=np.float64) for s in samples]
    for a in arrs:
        if a.ndim != 1 or a.size == 0:
            raise ValueError("every sample must be a nonempty 1-d array")
        if not np.all(np.isfinite(a)):
            raise ValueError("samples must be finite")
    k = len(arrs)
    ns = np.array([a.size for a in arrs], dtype=np.int64)
    N = int(ns.sum())
    if N < 4:
        raise ValueError("pooled sample too small (need N >= 4)")
    pooled = np.concatenate(arrs)
    zstar, counts = np.unique(pooled, return_counts=True)
    lj = counts.astype(np.float64)
    Bj = np.cumsum(lj) - lj / 2.0
    inner_sum = 0.0
    for a, n_i in zip(arrs, ns):
        idx = np.searchsorted(zstar, a)
        fij = np.bincount(idx, minlength=zstar.size).astype(np.float64)
        Mij = np.cumsum(fij) - fij / 2.0
        denom = Bj * (N - Bj) - N * lj / 4.0
        num = (N * Mij - n_i * Bj) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(denom > 0.0, lj / N * num / denom, 0.0)
        inner_sum += terms.sum() / n_i
    a2 = (N - 1) / N * inner_sum

    H = float((1.0 / ns).sum())
    recip = 1.0 / np.arange(1, N, dtype=np.float64)
    h = float(recip.sum())
    # g = sum_{i=1}^{N-2} (h_{N-1} - h_i) / (N - i) via harmonic prefix sums
    hp = np.cumsum(recip)
    i = np.arange(1, N - 1, dtype=np.float64)
    g = float(np.sum((hp[-1] - hp[:-1]) / (N - i)))
    ca = (4.0 * g - 6.0) * (k - 1) + (10.0 - 6.0 * g) * H
    cb = (2.0 * g - 4.0) * k * k + 8.0 * h * k + \
        (2.0 * g - 14.0 * h - 4.0) * H - 8.0 * h + 4.0 * g - 6.0
    cc = (6.0 * h + 2.0 * g - 2.0) * k * k + \
        (4.0 * h - 4.0 * g + 6.0) * k + (2.0 * h - 6.0) * H + 4.0 * h
    cd = (2.0 * h + 6.0) * k * k - 4.0 * h * k
    var = (ca * N ** 3 + cb * N ** 2 + cc * N + cd) / \
        ((N - 1.0) * (N - 2.0) * (N - 3.0))
    sigma = math.sqrt(max(var, 0.0))
    if sigma == 0.0:
        raise ValueError("degenerate variance; samples too small")
    standardized = (a2 - (k - 1)) / sigma

    crit = critical_values(k)
    if standardized < crit[0]:
        p_range = (SIGNIFICANCE_LEVELS[0], 1.0)
    elif standardized >= crit[-1]:
        p_range = (0.0, SIGNIFICANCE_LEVELS[-1])
    else:
        j = int(np.searchsorted(crit, standardized, side="right")) - 1
        p_range = (SIGNIFICANCE_LEVELS[j + 1], SIGNIFICANCE_LEVELS[j])
    return AdResult(statistic=float(a2), standardized=float(standardized),
                    k=k, n_total=N, critical=crit, p_range=p_range)


@dataclass
class EventDelayReport:
    delays: dict[str, np.ndarray]
    ecdfs: dict[str, Ecdf]
    ad: AdResult
    tsv: str


def reply_delays(thread: ThreadRecord) -> np.ndarray:
    """Seconds from the claim to each reply, clamped at zero."""
    t0 = thread.claim.time
    out = [max(p.time - t0, 0.0) for p in thread.posts[1:]]
    return np.asarray(out, dtype=np.float64)


def analyze_event(threads: list[ThreadRecord],
                  event: str | None = None) -> EventDelayReport:
    """Compare reply-delay distributions across veracity labels.

    Restricts to one event when given.  Needs at least two labels with at
    least one reply each.
    """
    if event is not None:
        threads = [th for th in threads if th.event == event]
        if not threads:
            raise ValueError(f"no threads for event {event!r}")
    groups: dict[str, list[float]] = {lab: [] for lab in LABELS}
    for th in threads:
        groups[th.label].extend(reply_delays(th))
    delays = {lab: np.asarray(v, dtype=np.float64)
              for lab, v in groups.items() if v}
    if len(delays) < 2:
        raise ValueError("need reply delays under at least two labels")
    ecdfs = {lab: ecdf(v) for lab, v in delays.items()}
    ad = anderson_darling_k(list(delays.values()))
    lines = ["label\tdelay\tF"]
    for lab in LABELS:
        e = ecdfs.get(lab)
        if e is None:
            continue
        for x, f in zip(e.xs, e.F):
            lines.append(f"{lab}\t{x:.6f}\t{f:.6f}")
    return EventDelayReport(delays=delays, ecdfs=ecdfs, ad=ad,
                            tsv="\n".join(lines) + "\n")
