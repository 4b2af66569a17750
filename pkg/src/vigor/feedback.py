"""Turn a validation signal and the generation history into next-round feedback."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .validation import DegenerateInputError, ValidationSignal, spearman

TEMPLATE = """\
=== VIGOR+ Validation Feedback (Round {k}) ===

[Previous Attempt]
- Confounder Name: {U_name}
- Information Gain (ELBO): {delta_elbo:.4f}
- Max Correlation with Latent z: {rho_max:.3f} ({p_value})
- Predictive R-squared: {r2:.3f}

[Diagnosis]
{diagnosis_text}

[Guidance for Next Round]
1. Avoid generating confounders similar to: {exclusion_list}
2. Consider directions orthogonal to: {redundant_covariates}
3. Suggested semantic domains: {suggested_domains}

[Requirements]
- Generate a NEW confounder different from previous attempts
- Provide causal explanation linking to treatment and outcome
- Specify distribution type and parameter inference logic
"""


class Diagnosis(str, enum.Enum):
    REDUNDANT = "REDUNDANT"
    WEAK_ALIGNMENT = "WEAK_ALIGNMENT"
    NOISE = "NOISE"


SENTENCES = {
    Diagnosis.REDUNDANT: "The generated confounder is statistically redundant with observed covariates.",
    Diagnosis.WEAK_ALIGNMENT: "The confounder shows weak alignment with data-driven latent factors.",
    Diagnosis.NOISE: "The confounder captures noise rather than true confounding.",
}
NO_DEFICIENCY = "No deficiency detected."


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class FeedbackConfig:
    redundancy_threshold: float = 0.001
    weak_alignment_threshold: float = 0.1
    # a mean gain within this many seed standard deviations of zero also counts as redundant
    redundancy_noise_multiple: float = 1.0
    hint_correlation_threshold: float = 0.3
    hint_quantile: float = 0.25

    def __post_init__(self):
        if self.redundancy_threshold <= 0 or self.weak_alignment_threshold <= 0:
            raise ValueError("diagnosis thresholds must be > 0")


@dataclass(frozen=True)
class FeedbackMessage:
    round: int
    rendered_text: str
    diagnosis_codes: frozenset
    exclusion_list: tuple[str, ...]
    suggested_domains: tuple[str, ...]
    redundant_covariates: tuple[str, ...]


def diagnose(signal: ValidationSignal, config: FeedbackConfig = FeedbackConfig()) -> tuple[frozenset, str]:
    """Diagnosis codes and the matching sentences, in fixed order."""
    delta, rho = signal.delta_elbo, signal.rho_max
    codes = []
    redundant = delta < config.redundancy_threshold
    if signal.delta_elbo_std is not None and signal.n_seeds > 1:
        redundant = redundant or delta <= config.redundancy_noise_multiple * signal.delta_elbo_std
    if redundant:
        codes.append(Diagnosis.REDUNDANT)
    if rho < config.weak_alignment_threshold:
        codes.append(Diagnosis.WEAK_ALIGNMENT)
        if delta > 0:
            codes.append(Diagnosis.NOISE)
    text = "\n".join(SENTENCES[c] for c in codes) if codes else NO_DEFICIENCY
    return frozenset(codes), text


def derive_hints(posterior, dataset, signal: ValidationSignal,
                 config: FeedbackConfig = FeedbackConfig()) -> tuple[list[str], list[str]]:
    """Covariates that already explain the best-aligned latent dimension, and
    under-explored covariate domains.

    ``redundant`` lists covariates with |Spearman| strictly above the hint
    threshold against the latent dimension most aligned with the candidate.
    ``suggested`` covers covariates in the bottom quantile of their strongest
    |Spearman| to any latent dimension.
    """
    mu = np.asarray(getattr(posterior, "mu", posterior), dtype=np.float64)
    best = signal.best
    best_dim = best.dim if best is not None else 0

    def abs_rho(a, b):
        try:
            return abs(spearman(a, b).r)
        except DegenerateInputError:
            return 0.0

    names = list(dataset.column_names)
    loadings = np.array([[abs_rho(dataset.x[:, j], mu[:, i]) for i in range(mu.shape[1])]
                         for j in range(len(names))])
    redundant = [name for j, name in enumerate(names)
                 if loadings[j, best_dim] > config.hint_correlation_threshold]
    strongest = loadings.max(axis=1)
    cutoff = np.quantile(strongest, config.hint_quantile)
    suggested = [f"factors related to {name}" for j, name in enumerate(names) if strongest[j] <= cutoff]
    return redundant, suggested


def format_p_value(p: float | None) -> str:
    """``p=0.0123`` style, or ``p<1e-N`` once p drops below 1e-4."""
    if p is None or (isinstance(p, float) and math.isnan(p)):
        return "p=n/a"
    if p < 1e-4:
        exponent = 323 if p <= 0 else math.floor(-math.log10(p))
        return f"p<1e-{exponent}"
    return f"p={p:.4f}"


def _join(items: Sequence[str]) -> str:
    return ", ".join(items) if items else "none"


def _history_names(history) -> list[str]:
    names = []
    for item in history:
        name = item if isinstance(item, str) else getattr(item, "name", None)
        if name is None and getattr(item, "proposal", None) is not None:
            name = item.proposal.name
        if name and name not in names:
            names.append(name)
    return names


def render(round_k: int, confounder_name: str | None, signal: ValidationSignal | None,
           history: Sequence, redundant_covariates: Sequence[str] = (),
           suggested_domains: Sequence[str] = (),
           config: FeedbackConfig = FeedbackConfig()) -> FeedbackMessage:
    """Fill the feedback template for completed round ``round_k``.

    ``history`` holds the confounders tried in rounds 1..k (names, or records
    carrying a proposal); all of them go into the exclusion list, in order.
    """
    missing = []
    if round_k is None or round_k < 1:
        missing.append("k")
    if not confounder_name:
        missing.append("U_name")
    if signal is None:
        missing += ["delta_elbo", "rho_max", "r2"]
    else:
        for field_name, value in (("delta_elbo", signal.delta_elbo), ("rho_max", signal.rho_max),
                                  ("r2", signal.r_squared)):
            if value is None or not math.isfinite(value):
                missing.append(field_name)
    if missing:
        raise RenderError(f"cannot render feedback, missing fields: {', '.join(missing)}")
    codes, diagnosis_text = diagnose(signal, config)
    exclusion = _history_names(history)
    text = TEMPLATE.format(
        k=round_k,
        U_name=confounder_name,
        delta_elbo=signal.delta_elbo,
        rho_max=signal.rho_max,
        p_value=format_p_value(signal.p_value),
        r2=signal.r_squared,
        diagnosis_text=diagnosis_text,
        exclusion_list=_join(exclusion),
        redundant_covariates=_join(list(redundant_covariates)),
        suggested_domains=_join(list(suggested_domains)),
    )
    return FeedbackMessage(round_k, text, codes, tuple(exclusion), tuple(suggested_domains),
                           tuple(redundant_covariates))
