"""Validation signal for a candidate confounder.

Information gain between augmented and baseline ELBO, plus consistency of the
candidate with the baseline model's latent means: Pearson/Spearman with
two-sided p-values, Kraskov kNN mutual information and OLS R^2.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import betainc, digamma
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p_value: float
    n: int


@dataclass(frozen=True)
class DimDetail:
    dim: int
    pearson: float
    pearson_p: float
    spearman: float
    spearman_p: float
    mi: float


@dataclass(frozen=True)
class ValidationSignal:
    delta_elbo: float
    rho_max: float
    i_avg: float
    r_squared: float
    per_dim: tuple[DimDetail, ...] = ()
    # Spearman p-value of the best-aligned latent dimension
    p_value: float | None = None
    # spread of delta_elbo across seeds; None for single-seed signals
    delta_elbo_std: float | None = None
    n_seeds: int = 1

    @property
    def best(self) -> DimDetail | None:
        if not self.per_dim:
            return None
        return max(self.per_dim, key=lambda d: abs(d.spearman))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_dim"] = [asdict(d) for d in self.per_dim]
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "ValidationSignal":
        payload = dict(payload)
        payload["per_dim"] = tuple(DimDetail(**d) for d in payload.get("per_dim", ()))
        return cls(**payload)


def info_gain(elbo_augmented, elbo_baseline) -> float:
    """Augmented minus baseline ELBO; accepts floats or reports with an ``elbo`` field."""
    aug = getattr(elbo_augmented, "elbo", elbo_augmented)
    base = getattr(elbo_baseline, "elbo", elbo_baseline)
    return float(aug) - float(base)


def _vectors(x, y, min_n=3):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_n:
        raise ValueError(f"need at least {min_n} points, got {x.size}")
    return x, y


def t_test_p_value(r: float, n: int) -> float:
    """Two-sided p-value of ``t = r sqrt((n-2)/(1-r^2))`` under Student-t(n-2).

    Uses the identity P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2).
    """
    df = n - 2
    r2 = min(r * r, 1.0)
    if r2 >= 1.0:
        return 0.0
    # df/(df+t^2) simplifies to 1 - r^2
    return float(min(1.0, max(0.0, betainc(0.5 * df, 0.5, 1.0 - r2))))


def pearson(x, y) -> CorrelationResult:
    x, y = _vectors(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("correlation undefined for a constant vector")
    r = float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))
    return CorrelationResult(r, t_test_p_value(r, x.size), x.size)


def average_ranks(x) -> np.ndarray:
    return rankdata(np.asarray(x, dtype=np.float64), method="average")


def spearman(x, y) -> CorrelationResult:
    x, y = _vectors(x, y)
    return pearson(average_ranks(x), average_ranks(y))


def _strict_neighbour_counts(v: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """For each i, the number of j != i with |v_j - v_i| < radius_i."""
    s = np.sort(v)
    hi = np.searchsorted(s, v + radius, side="left")
    lo = np.searchsorted(s, v - radius, side="right")
    return hi - lo - 1


def knn_mutual_information(x, y, k: int = 3, seed: int = 0, standardize: bool = True) -> float:
    """Kraskov-Stoegbauer-Grassberger estimator (algorithm 1), in nats, clamped at 0."""
    x, y = _vectors(x, y, min_n=1)
    n = x.size
    if k < 1 or n <= k:
        raise ValueError(f"need n > k >= 1, got n={n}, k={k}")
    if standardize:
        x = _zscore(x)
        y = _zscore(y)
    rng = np.random.default_rng(seed)
    x = x + 1e-10 * rng.standard_normal(n)
    y = y + 1e-10 * rng.standard_normal(n)
    points = np.column_stack([x, y])
    dist, _ = cKDTree(points).query(points, k=k + 1, p=np.inf)
    radius = dist[:, k]
    n_x = _strict_neighbour_counts(x, radius)
    n_y = _strict_neighbour_counts(y, radius)
    mi = digamma(k) + digamma(n) - np.mean(digamma(n_x + 1) + digamma(n_y + 1))
    return float(max(mi, 0.0))


def _zscore(v: np.ndarray) -> np.ndarray:
    sd = v.std()
    return (v - v.mean()) / sd if sd > 0 else v - v.mean()


def predictive_r2(z, u) -> float:
    """In-sample R^2 of an OLS fit (with intercept) of ``u`` on the columns of ``z``.

    A constant ``u`` gives 0. A rank-deficient design is solved by pseudo-inverse
    (rcond 1e-10) and logged.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    u = np.asarray(u, dtype=np.float64).ravel()
    n, p = z.shape
    if u.size != n:
        raise ValueError(f"length mismatch: z has {n} rows, u has {u.size}")
    if n <= p + 1:
        raise ValueError(f"need n > latent_dim + 1, got n={n}, latent_dim={p}")
    ss_tot = float(np.sum((u - u.mean()) ** 2))
    if ss_tot == 0.0:
        return 0.0
    design = np.column_stack([np.ones(n), z])
    if np.linalg.matrix_rank(design, tol=1e-10 * np.linalg.norm(design, 2)) < p + 1:
        log.warning("rank-deficient design in predictive_r2; using pseudo-inverse")
    coef = np.linalg.pinv(design, rcond=1e-10) @ u
    ss_res = float(np.sum((u - design @ coef) ** 2))
    return 1.0 - ss_res / ss_tot


def consistency(z_mu, u, k: int = 3, seed: int = 0) -> tuple[DimDetail, ...]:
    z_mu = np.asarray(z_mu, dtype=np.float64)
    details = []
    for j in range(z_mu.shape[1]):
        col = z_mu[:, j]
        try:
            pr, sr = pearson(col, u), spearman(col, u)
        except DegenerateInputError:
            pr = sr = CorrelationResult(0.0, 1.0, col.size)
        mi = knn_mutual_information(col, u, k=k, seed=seed + j)
        details.append(DimDetail(j, pr.r, pr.p_value, sr.r, sr.p_value, mi))
    return tuple(details)


def build_signal(baseline_report, augmented_report, posterior, u, k: int = 3,
                 seed: int = 0) -> ValidationSignal:
    """Assemble the signal from two ELBO reports and the baseline latent means."""
    mu = getattr(posterior, "mu", posterior)
    per_dim = consistency(mu, u, k=k, seed=seed)
    best = max(per_dim, key=lambda d: abs(d.spearman))
    return ValidationSignal(
        delta_elbo=info_gain(augmented_report, baseline_report),
        rho_max=abs(best.spearman),
        i_avg=float(np.mean([d.mi for d in per_dim])),
        r_squared=predictive_r2(mu, u),
        per_dim=per_dim,
        p_value=best.spearman_p,
    )


def aggregate(signals: list[ValidationSignal]) -> ValidationSignal:
    """Mean over seeds of every scalar.

    Per-dimension detail stays with the per-seed signals. ``p_value`` is the
    largest per-seed value (the least significant seed) and ``delta_elbo_std``
    the sample standard deviation (ddof=1) of the per-seed gains.
    """
    if not signals:
        raise ValueError("no signals to aggregate")
    deltas = np.array([s.delta_elbo for s in signals])
    return ValidationSignal(
        delta_elbo=float(deltas.mean()),
        rho_max=float(np.mean([s.rho_max for s in signals])),
        i_avg=float(np.mean([s.i_avg for s in signals])),
        r_squared=float(np.mean([s.r_squared for s in signals])),
        p_value=max((s.p_value for s in signals if s.p_value is not None), default=None),
        delta_elbo_std=float(deltas.std(ddof=1)) if len(signals) > 1 else None,
        n_seeds=len(signals),
    )
