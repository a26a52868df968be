"""Correlation estimators and the inference around them.

All estimators raise :class:`UndefinedCorrelationError` instead of returning
NaN, so a degenerate fold cannot silently poison an average.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps

from .errors import BootstrapError, DegenerateError, SingularityError, UndefinedCorrelationError

Statistic = Callable[[np.ndarray, np.ndarray], float]


def _pair(x, y, min_n: int = 3) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_n:
        raise UndefinedCorrelationError(f"need at least {min_n} pairs, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise UndefinedCorrelationError("non-finite input")
    return x, y


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("Pearson correlation undefined for a constant vector")
    xc, yc = x - x.mean(), y - y.mean()
    r = float(xc @ yc / math.sqrt((xc @ xc) * (yc @ yc)))
    return min(1.0, max(-1.0, r))


def midranks(x) -> np.ndarray:
    """1-based ranks with ties given the average of the positions they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [x.size]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def spearman(x, y) -> float:
    x, y = _pair(x, y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("Spearman correlation undefined for an all-tied vector")
    return pearson(midranks(x), midranks(y))


def kendall_tau_b(x, y) -> float:
    """Tau-b: ``(C - D) / sqrt((C + D + T_x)(C + D + T_y))``.

    ``T_x`` counts pairs tied only in x, ``T_y`` pairs tied only in y;
    pairs tied in both are ignored.
    """
    x, y = _pair(x, y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("Kendall tau-b undefined for an all-tied vector")
    iu = np.triu_indices(x.size, 1)
    dx = np.sign(x[:, None] - x[None, :])[iu]
    dy = np.sign(y[:, None] - y[None, :])[iu]
    s = dx * dy
    concordant = int(np.count_nonzero(s > 0))
    discordant = int(np.count_nonzero(s < 0))
    tx = int(np.count_nonzero((dx == 0) & (dy != 0)))
    ty = int(np.count_nonzero((dy == 0) & (dx != 0)))
    denom = math.sqrt((concordant + discordant + tx) * (concordant + discordant + ty))
    return (concordant - discordant) / denom


ESTIMATORS: dict[str, Statistic] = {"pcc": pearson, "srcc": spearman, "tau": kendall_tau_b}


def fisher_z(r: float) -> float:
    if abs(r) >= 1:
        raise SingularityError(f"Fisher z undefined at |r| = 1 (r = {r})")
    return math.atanh(r)


def cohens_q(r1: float, r2: float) -> float:
    return abs(fisher_z(r1) - fisher_z(r2))


# --------------------------------------------------------------------------
# bootstrap


@dataclass
class CorrEstimate:
    kind: str
    value: float
    n: int
    ci_low: float | None = None
    ci_high: float | None = None
    B: int | None = None
    seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def percentile_interval(replicates: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    a = (1 - level) / 2
    lo, hi = np.quantile(replicates, [a, 1 - a])
    return float(lo), float(hi)


def bca_from_replicates(
    theta: float,
    replicates: np.ndarray,
    jackknife: np.ndarray,
    level: float = 0.95,
    z0: float | None = None,
    accel: float | None = None,
) -> tuple[float, float]:
    """BCa endpoints from bootstrap replicates and leave-one-out estimates.

    ``z0``/``accel`` may be forced (e.g. both 0 gives the percentile
    interval). Replicates equal to ``theta`` count half towards the
    below-estimate fraction, which keeps rank statistics at their bound
    from producing an infinite bias correction.
    """
    reps = np.asarray(replicates, dtype=np.float64)
    B = reps.size
    if np.all(reps == reps[0]):
        return float(reps[0]), float(reps[0])
    if z0 is None:
        frac = (np.count_nonzero(reps < theta) + 0.5 * np.count_nonzero(reps == theta)) / B
        frac = min(max(frac, 0.5 / B), 1 - 0.5 / B)
        z0 = float(sps.norm.ppf(frac))
    if accel is None:
        jk = np.asarray(jackknife, dtype=np.float64)
        d = jk.mean() - jk
        denom = 6.0 * float(np.sum(d * d)) ** 1.5
        accel = float(np.sum(d**3) / denom) if denom > 0 else 0.0
    alpha = (1 - level) / 2
    out = []
    for z_a in (sps.norm.ppf(alpha), sps.norm.ppf(1 - alpha)):
        shifted = z0 + z_a
        adj = float(sps.norm.cdf(z0 + shifted / (1 - accel * shifted)))
        out.append(float(np.quantile(reps, adj)))
    return out[0], out[1]


def bootstrap_replicates(
    x: np.ndarray, y: np.ndarray, statistic: Statistic, B: int, seed: int
) -> np.ndarray:
    """Pair-resampled replicates; undefined resamples are redrawn (cap 10B draws)."""
    n = x.size
    rng = np.random.default_rng(seed)
    reps = np.empty(B)
    filled = attempts = 0
    while filled < B:
        if attempts >= 10 * B:
            raise BootstrapError(
                f"statistic undefined on too many resamples ({attempts - filled} of {attempts})"
            )
        idx = rng.integers(0, n, n)
        attempts += 1
        try:
            reps[filled] = statistic(x[idx], y[idx])
        except UndefinedCorrelationError:
            continue
        filled += 1
    return reps


def jackknife_values(x: np.ndarray, y: np.ndarray, statistic: Statistic) -> np.ndarray:
    n = x.size
    keep = ~np.eye(n, dtype=bool)
    try:
        return np.array([statistic(x[keep[i]], y[keep[i]]) for i in range(n)])
    except UndefinedCorrelationError as exc:
        raise BootstrapError(f"statistic undefined on a jackknife subsample: {exc}") from exc


def bca_interval(
    x,
    y,
    statistic: Statistic,
    B: int = 1000,
    level: float = 0.95,
    seed: int = 42,
) -> tuple[float, float]:
    x, y = _pair(x, y, min_n=1)
    if x.size < 8:
        raise DegenerateError(f"BCa needs n >= 8, got {x.size}")
    theta = statistic(x, y)
    reps = bootstrap_replicates(x, y, statistic, B, seed)
    jk = jackknife_values(x, y, statistic)
    return bca_from_replicates(theta, reps, jk, level)


def estimate(kind: str, x, y, B: int = 1000, seed: int = 42, level: float = 0.95) -> CorrEstimate:
    """Point estimate plus a BCa interval (skipped when ``B == 0`` or n < 8)."""
    stat = ESTIMATORS[kind]
    x, y = _pair(x, y)
    value = stat(x, y)
    if B <= 0 or x.size < 8:
        return CorrEstimate(kind, value, int(x.size))
    lo, hi = bca_interval(x, y, stat, B, level, seed)
    return CorrEstimate(kind, value, int(x.size), lo, hi, B, seed)


# --------------------------------------------------------------------------
# comparing dependent correlations


@dataclass
class SteigerResult:
    z: float
    p: float
    q: float
    significant: bool
    t: float
    df: int
    alpha_adj: float

    def to_dict(self) -> dict:
        return asdict(self)


def steiger_test(r12: float, r13: float, r23: float, n: int, alpha_adj: float = 0.01) -> SteigerResult:
    """Williams' t for two correlations sharing variable 1, reported as z.

    ``r12``/``r13``: each metric against the human scores; ``r23``: the two
    metrics against each other. The two-sided p comes from t with n - 3
    degrees of freedom; ``z`` is the normal deviate with the same two-sided
    p and the sign of ``r12 - r13``.
    """
    for name, r in (("r12", r12), ("r13", r13), ("r23", r23)):
        if not abs(r) < 1:
            raise SingularityError(f"{name} = {r}: |r| must be < 1")
    if n < 4:
        raise DegenerateError(f"Steiger test needs n >= 4, got {n}")
    q = cohens_q(r12, r13)
    if r12 == r13:
        return SteigerResult(0.0, 1.0, q, False, 0.0, n - 3, alpha_adj)
    det = 1 - r12**2 - r13**2 - r23**2 + 2 * r12 * r13 * r23
    rbar = (r12 + r13) / 2
    denom = 2 * (n - 1) / (n - 3) * det + rbar**2 * (1 - r23) ** 3
    if denom <= 0:
        raise SingularityError(f"correlation matrix is singular (|R| = {det:.3g})")
    t = (r12 - r13) * math.sqrt((n - 1) * (1 + r23) / denom)
    p = float(2 * sps.t.sf(abs(t), n - 3))
    z = math.copysign(float(sps.norm.isf(p / 2)), t) if p > 0 else math.copysign(math.inf, t)
    return SteigerResult(z, p, q, p < alpha_adj, t, n - 3, alpha_adj)


def bonferroni(p_values: Sequence[float], alpha: float = 0.05) -> list[bool]:
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    m = len(p_values)
    if m == 0:
        return []
    threshold = alpha / m
    return [p < threshold for p in p_values]


def bonferroni_threshold(m: int, alpha: float = 0.05) -> float:
    return alpha / m
