"""Datasets: CSV loading, the planted-confounder synthetic benchmark, splits."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .neural import sigmoid


class SchemaError(ValueError):
    pass


class CsvParseError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    column_names: tuple[str, ...]
    u_hat: np.ndarray | None = None
    u_star: np.ndarray | None = field(default=None, repr=False)
    true_ate: float | None = field(default=None, repr=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise SchemaError(f"x must be 2-D, got shape {x.shape}")
        n = x.shape[0]
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "column_names", tuple(self.column_names))
        for name in ("t", "y", "u_hat", "u_star"):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.asarray(value, dtype=np.float64).ravel()
            if value.shape[0] != n:
                raise SchemaError(f"{name} has length {value.shape[0]}, expected {n}")
            object.__setattr__(self, name, value)
        for name in ("t", "y"):
            bad = np.flatnonzero((getattr(self, name) != 0) & (getattr(self, name) != 1))
            if bad.size:
                raise SchemaError(f"{name} must be binary; row {int(bad[0])} has {getattr(self, name)[bad[0]]}")
        if len(self.column_names) != x.shape[1]:
            raise SchemaError(f"{len(self.column_names)} column names for {x.shape[1]} covariates")
        if len(set(self.column_names)) != len(self.column_names):
            raise SchemaError("covariate column names must be unique")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.x[idx], self.t[idx], self.y[idx], self.column_names,
                       pick(self.u_hat), pick(self.u_star), self.true_ate)

    def with_u_hat(self, u_hat) -> "Dataset":
        return replace(self, u_hat=None if u_hat is None else np.asarray(u_hat, dtype=np.float64))

    def public(self) -> "Dataset":
        """Copy without synthetic ground truth, safe to hand to models and generators."""
        return replace(self, u_star=None, true_ate=None)

    def naive_ate(self) -> float:
        treated = self.t == 1
        if treated.all() or not treated.any():
            raise ValueError("naive ATE needs both treated and control units")
        return float(self.y[treated].mean() - self.y[~treated].mean())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.x, self.t, self.y):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update("\x1f".join(self.column_names).encode())
        if self.u_hat is not None:
            h.update(self.u_hat.tobytes())
        return h.hexdigest()

    def describe(self) -> str:
        """Schema summary for generator prompts; never mentions ground truth."""
        return (f"{self.n} individuals; binary treatment t (rate {self.t.mean():.3f}); "
                f"binary outcome y (rate {self.y.mean():.3f}); "
                f"{self.d} standardized covariates: {', '.join(self.column_names)}")


def standardize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    return (x - mean) / std


def load_csv(path, standardize_covariates: bool = True, u_column: str | None = None) -> Dataset:
    """Read a header CSV with binary ``t`` and ``y`` columns; the rest are covariates.

    ``u_column`` (if given) is read as the candidate confounder instead of a covariate.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvParseError(f"{path}: empty file, header row required") from None
        lower = [h.lower() for h in header]
        for required in ("t", "y"):
            if lower.count(required) != 1:
                raise SchemaError(f"{path}: expected exactly one '{required}' column")
        u_idx = None
        if u_column is not None:
            if u_column not in header:
                raise SchemaError(f"{path}: no column named '{u_column}'")
            u_idx = header.index(u_column)
        t_idx, y_idx = lower.index("t"), lower.index("y")
        cov_idx = [i for i in range(len(header)) if i not in (t_idx, y_idx, u_idx)]
        rows, line_nos = [], []
        missing = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvParseError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            if any(cell.strip() == "" for cell in row):
                missing.append(line_no)
                continue
            try:
                rows.append([float(cell) for cell in row])
                line_nos.append(line_no)
            except ValueError as exc:
                raise CsvParseError(f"{path}:{line_no}: {exc}") from None
    if missing:
        raise SchemaError(f"{path}: missing values on lines {missing}")
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    for idx, name in ((t_idx, "t"), (y_idx, "y")):
        bad = np.flatnonzero((data[:, idx] != 0) & (data[:, idx] != 1))
        if bad.size:
            raise SchemaError(f"{path}: column '{name}' must be 0/1; line {line_nos[bad[0]]} has {data[bad[0], idx]:g}")
    x = data[:, cov_idx]
    if standardize_covariates:
        x = standardize(x)
    return Dataset(x, data[:, t_idx], data[:, y_idx], [header[i] for i in cov_idx],
                   u_hat=None if u_idx is None else data[:, u_idx])


def _fmt(v: float) -> str:
    return repr(float(v))


def save_csv(dataset: Dataset, path, include_u_hat: bool = False) -> None:
    """Write covariates, t, y (and optionally ``u_hat``); ground truth is never written."""
    path = Path(path)
    with_u = include_u_hat and dataset.u_hat is not None
    header = list(dataset.column_names) + ["t", "y"] + (["u_hat"] if with_u else [])
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [_fmt(v) for v in dataset.x[i]] + [str(int(dataset.t[i])), str(int(dataset.y[i]))]
            if with_u:
                row.append(_fmt(dataset.u_hat[i]))
            writer.writerow(row)


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 2000
    d: int = 6
    a_t: float = 2.0
    a_y: float = 2.0
    tau: float = 0.0
    seed: int = 0
    leakage: float = 0.0
    covariate_weight: float = 0.3
    outcome_intercept: float = 0.0

    def __post_init__(self):
        if self.n < 100:
            raise ValueError("synthetic benchmark needs n >= 100")
        if self.d < 1:
            raise ValueError("need at least one covariate")
        if not 0.0 <= self.leakage <= 1.0:
            raise ValueError("leakage must be in [0, 1]")
        for name in ("a_t", "a_y", "tau", "covariate_weight", "outcome_intercept"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


def synthetic_outcome_prob(spec: SyntheticSpec, x: np.ndarray, t, u_star: np.ndarray) -> np.ndarray:
    v = spec.covariate_weight * _covariate_signs(spec.d)[::-1]
    return sigmoid(spec.outcome_intercept + spec.tau * np.asarray(t, dtype=np.float64)
                   + spec.a_y * u_star + x @ v)


def _covariate_signs(d: int) -> np.ndarray:
    # alternating +/- so covariates push treatment and outcome in mixed directions
    return np.where(np.arange(d) % 2 == 0, 1.0, -1.0)


def true_ate_from(spec: SyntheticSpec, x: np.ndarray, u_star: np.ndarray) -> float:
    """Population-averaged sigmoid difference between treated and control outcomes."""
    return float(np.mean(synthetic_outcome_prob(spec, x, 1.0, u_star)
                         - synthetic_outcome_prob(spec, x, 0.0, u_star)))


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Planted hidden confounder ``u_star`` driving both treatment and outcome.

    Covariates mix ``u_star`` with independent noise at rate ``leakage`` and are
    standardised. Treatment and outcome are logistic in ``u_star`` and ``x``.
    """
    rng = np.random.default_rng(spec.seed)
    u = rng.standard_normal(spec.n)
    noise = rng.standard_normal((spec.n, spec.d))
    x = standardize(spec.leakage * u[:, None] + (1.0 - spec.leakage) * noise)
    w = spec.covariate_weight * _covariate_signs(spec.d)
    t = (rng.uniform(size=spec.n) < sigmoid(spec.a_t * u + x @ w)).astype(np.float64)
    y = (rng.uniform(size=spec.n) < synthetic_outcome_prob(spec, x, t, u)).astype(np.float64)
    names = [f"x{j + 1}" for j in range(spec.d)]
    return Dataset(x, t, y, names, u_star=u, true_ate=true_ate_from(spec, x, u))


def save_sidecar(dataset: Dataset, spec: SyntheticSpec, path) -> None:
    """Ground-truth sidecar: the synthetic settings, ``true_ate`` and ``u_star``, kept apart from the CSV."""
    payload = {
        "spec": spec.__dict__,
        "true_ate": dataset.true_ate,
        "u_star": [float(v) for v in dataset.u_star],
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_sidecar(path) -> tuple[SyntheticSpec, float, np.ndarray]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return SyntheticSpec(**payload["spec"]), payload["true_ate"], np.array(payload["u_star"])


def split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded split stratified on treatment; returns ``(train, eval)``."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    n_eval = int(round(fraction * dataset.n))
    arms = [np.flatnonzero(dataset.t == arm) for arm in (0.0, 1.0)]
    n_control = int(round(n_eval * arms[0].size / dataset.n))
    eval_idx = []
    for idx, k in zip(arms, (n_control, n_eval - n_control)):
        eval_idx.append(idx[rng.permutation(idx.size)][:k])
    eval_idx = np.sort(np.concatenate(eval_idx))
    mask = np.ones(dataset.n, dtype=bool)
    mask[eval_idx] = False
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(eval_idx)
