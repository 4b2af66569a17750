"""The generate -> validate -> feed back loop with convergence checks and run logs."""
from __future__ import annotations

import enum
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import cevae as cv
from .data import Dataset, split
from .feedback import FeedbackConfig, FeedbackMessage, derive_hints, render
from .generator import (ConfounderProposal, GeneratorConfig, GeneratorError, GeneratorRequest,
                        generate, make_generator)
from .validation import ValidationSignal, aggregate, build_signal

log = logging.getLogger(__name__)


class Decision(str, enum.Enum):
    SUCCESS = "SUCCESS"
    MAX_ITERS = "MAX_ITERS"
    DIMINISHING = "DIMINISHING"
    CONTINUE = "CONTINUE"


class Status(str, enum.Enum):
    SUCCESS = "SUCCESS"
    FAIL = "FAIL"
    STOPPED = "STOPPED"


@dataclass(frozen=True)
class LoopConfig:
    tau_elbo: float = 0.01
    tau_rho: float = 0.2
    k_max: int = 5
    epsilon: float = 0.001
    m: int = 2
    seeds: tuple[int, ...] = tuple(range(10))
    split_seed: int = 0
    mi_k: int = 3
    ate_mc_samples: int = 10
    workers: int = 1
    cevae: cv.CevaeConfig = field(default_factory=cv.CevaeConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)

    def __post_init__(self):
        if min(self.tau_elbo, self.tau_rho, self.epsilon) <= 0:
            raise ValueError("thresholds must be > 0")
        if self.m < 1 or self.k_max < 1:
            raise ValueError("m and k_max must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        gen = out["generator"]
        if not isinstance(gen["oracle_noise"], (int, float)):
            gen["oracle_noise"] = list(gen["oracle_noise"])
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "LoopConfig":
        payload = dict(payload)
        if "cevae" in payload:
            payload["cevae"] = cv.CevaeConfig(**payload["cevae"])
        if "generator" in payload:
            gen = dict(payload["generator"])
            if isinstance(gen.get("oracle_noise"), list):
                gen["oracle_noise"] = tuple(gen["oracle_noise"])
            payload["generator"] = GeneratorConfig(**gen)
        if "feedback" in payload:
            payload["feedback"] = FeedbackConfig(**payload["feedback"])
        if "seeds" in payload:
            payload["seeds"] = tuple(payload["seeds"])
        return cls(**payload)


@dataclass
class SeedResult:
    seed: int
    baseline_elbo: float
    augmented_elbo: float
    ate: float
    signal: ValidationSignal

    def to_dict(self) -> dict:
        return {"seed": self.seed, "baseline_elbo": self.baseline_elbo,
                "augmented_elbo": self.augmented_elbo, "ate": self.ate,
                "signal": self.signal.to_dict()}


@dataclass
class GenerationRecord:
    round: int
    proposal: ConfounderProposal | None
    signal: ValidationSignal | None
    feedback: FeedbackMessage | None
    status: Status
    per_seed: list[SeedResult] = field(default_factory=list)
    ate: float | None = None
    error: str | None = None

    @property
    def name(self) -> str | None:
        return None if self.proposal is None else self.proposal.name

    def to_dict(self) -> dict:
        proposal = None
        if self.proposal is not None:
            values = self.proposal.values
            proposal = {
                "name": self.proposal.name,
                "explanation": self.proposal.explanation,
                "distribution": self.proposal.distribution.kind,
                "values_sha256": hashlib.sha256(values.tobytes()).hexdigest(),
                "values_mean": float(values.mean()),
                "values_std": float(values.std()),
            }
        return {
            "round": self.round,
            "status": self.status.value,
            "proposal": proposal,
            "signal": None if self.signal is None else self.signal.to_dict(),
            "ate": self.ate,
            "per_seed": [s.to_dict() for s in self.per_seed],
            "feedback": None if self.feedback is None else self.feedback.rendered_text,
            "diagnosis": None if self.feedback is None else sorted(c.value for c in self.feedback.diagnosis_codes),
            "error": self.error,
        }


@dataclass
class RunLog:
    config: dict
    dataset_fingerprint: str
    records: list[GenerationRecord]
    termination: Decision
    ate_table: dict
    best_round: int | None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "dataset_fingerprint": self.dataset_fingerprint,
            "termination": self.termination.value,
            "best_round": self.best_round,
            "ate_table": self.ate_table,
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _signal_of(entry):
    if isinstance(entry, tuple):
        return entry
    sig = getattr(entry, "signal", entry)
    if sig is None:
        return None
    return sig.delta_elbo, sig.rho_max


def passes(delta: float, rho: float, config: LoopConfig) -> bool:
    return delta > config.tau_elbo and rho > config.tau_rho


def check_convergence(history: Sequence, config: LoopConfig) -> Decision:
    """Decision after the latest round.

    ``history`` entries are records, signals, or ``(delta_elbo, rho_max)``
    pairs; ``None`` (or a record without a signal) marks a round whose
    generation failed. Priority: SUCCESS > MAX_ITERS > DIMINISHING.
    """
    if not history:
        raise ValueError("history must contain at least one round")
    pairs = [_signal_of(h) if h is not None else None for h in history]
    latest = pairs[-1]
    if latest is not None and passes(latest[0], latest[1], config):
        return Decision.SUCCESS
    if len(history) >= config.k_max:
        return Decision.MAX_ITERS
    deltas = [p[0] for p in pairs if p is not None]
    if len(deltas) >= config.m + 1:
        recent = deltas[-(config.m + 1):]
        if all(abs(b - a) < config.epsilon for a, b in zip(recent, recent[1:])):
            return Decision.DIMINISHING
    return Decision.CONTINUE


@dataclass
class _Baseline:
    model: cv.CevaeModel
    report: cv.ElboReport
    posterior: cv.LatentPosterior
    ate: float


class CevaeValidator:
    """Trains one baseline per seed (once) and scores candidates against it."""

    def __init__(self, dataset: Dataset, config: LoopConfig):
        self.dataset = dataset.public()
        self.config = config
        self.train_idx, self.eval_idx = self._split_indices()
        self.baselines: dict[int, _Baseline] = {}

    def _split_indices(self):
        tagged = self.dataset.with_u_hat(np.arange(self.dataset.n, dtype=np.float64))
        train, held = split(tagged, self.config.cevae.holdout_fraction, self.config.split_seed)
        return train.u_hat.astype(np.int64), held.u_hat.astype(np.int64)

    def _map(self, fn, items):
        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]

    def prepare(self) -> None:
        todo = [s for s in self.config.seeds if s not in self.baselines]
        for seed, base in zip(todo, self._map(self._train_baseline, todo)):
            self.baselines[seed] = base

    def _train_baseline(self, seed: int) -> _Baseline:
        cfg = replace(self.config.cevae, seed=seed, augmented=False)
        model = cv.CevaeModel(cfg, self.dataset.d)
        held = self.dataset.subset(self.eval_idx)
        result = cv.train(model, self.dataset.subset(self.train_idx), held, eval_every=cfg.epochs or 1)
        return _Baseline(model, result.final, cv.posterior(model, held),
                         cv.estimate_ate(model, self.dataset, self.config.ate_mc_samples, seed))

    @property
    def baseline_ate(self) -> float:
        return float(np.mean([self.baselines[s].ate for s in self.config.seeds]))

    def _score_seed(self, seed: int, values: np.ndarray) -> tuple[SeedResult, cv.CevaeModel]:
        base = self.baselines[seed]
        data = self.dataset.with_u_hat(values)
        cfg = replace(self.config.cevae, seed=seed, augmented=True)
        model = cv.CevaeModel(cfg, data.d)
        model.fit_u_scaling(values)
        held = data.subset(self.eval_idx)
        result = cv.train(model, data.subset(self.train_idx), held, eval_every=cfg.epochs or 1)
        signal = build_signal(base.report, result.final, base.posterior, held.u_hat,
                              k=self.config.mi_k, seed=seed)
        ate = cv.estimate_ate(model, data, self.config.ate_mc_samples, seed)
        return SeedResult(seed, base.report.elbo, result.final.elbo, ate, signal), model

    def __call__(self, proposal: ConfounderProposal, round_k: int):
        """Aggregated signal, per-seed results and hints for one proposal."""
        self.prepare()
        results = self._map(lambda s: self._score_seed(s, proposal.values)[0], self.config.seeds)
        signal = aggregate([r.signal for r in results])
        ref = self.config.seeds[0]
        redundant, suggested = derive_hints(self.baselines[ref].posterior, self.dataset.subset(self.eval_idx),
                                            results[0].signal, self.config.feedback)
        return signal, results, (redundant, suggested)


Validator = Callable[[ConfounderProposal, int], tuple]


@dataclass
class LoopState:
    dataset: Dataset
    config: LoopConfig
    generator: object
    validator: Validator
    history: list[GenerationRecord] = field(default_factory=list)

    @property
    def last_feedback(self) -> str:
        for record in reversed(self.history):
            if record.feedback is not None:
                return record.feedback.rendered_text
        return ""

    @property
    def tried_names(self) -> list[str]:
        return [r.name for r in self.history if r.name]


def request_seed(config: LoopConfig, round_k: int) -> int:
    return int(np.random.SeedSequence([config.seeds[0], round_k]).generate_state(1)[0])


def run_round(state: LoopState, k: int) -> GenerationRecord:
    request = GeneratorRequest(state.dataset.public(), k, state.last_feedback if k > 1 else "",
                               tuple(state.tried_names), request_seed(state.config, k))
    try:
        proposal = generate(request, backend=state.generator)
    except GeneratorError as exc:
        log.warning("round %d: generation failed: %s", k, exc)
        record = GenerationRecord(k, None, None, None, Status.FAIL, error=f"{type(exc).__name__}: {exc}")
        state.history.append(record)
        return record
    try:
        signal, per_seed, (redundant, suggested) = state.validator(proposal, k)
    except cv.TrainingDivergedError as exc:
        record = GenerationRecord(k, proposal, None, None, Status.STOPPED, error=str(exc))
        state.history.append(record)
        return record
    names = state.tried_names + [proposal.name]
    feedback = render(k, proposal.name, signal, names, redundant, suggested, state.config.feedback)
    status = Status.SUCCESS if passes(signal.delta_elbo, signal.rho_max, state.config) else Status.FAIL
    ate = float(np.mean([r.ate for r in per_seed])) if per_seed else None
    record = GenerationRecord(k, proposal, signal, feedback, status, list(per_seed), ate)
    state.history.append(record)
    log.info("round %d: %s delta=%.4f rho=%.3f -> %s", k, proposal.name, signal.delta_elbo,
             signal.rho_max, status.value)
    return record


def run_loop(dataset: Dataset, config: LoopConfig, generator=None,
             validator: Validator | None = None) -> RunLog:
    """Rounds until success, budget exhaustion or diminishing returns."""
    if generator is None:
        generator = make_generator(config.generator,
                                   u_star=dataset.u_star if config.generator.backend == "oracle" else None)
    public = dataset.public()
    if validator is None:
        validator = CevaeValidator(public, config)
    prepare = getattr(validator, "prepare", None)
    if prepare is not None:
        prepare()
    state = LoopState(public, config, generator, validator)
    decision = Decision.CONTINUE
    k = 0
    while decision is Decision.CONTINUE:
        k += 1
        run_round(state, k)
        decision = check_convergence(state.history, config)
    scored = [r for r in state.history if r.signal is not None]
    best = max(scored, key=lambda r: r.signal.delta_elbo, default=None)
    final = next((r for r in scored if r.status is Status.SUCCESS), best)
    ate_table = {"naive": public.naive_ate()}
    if isinstance(validator, CevaeValidator):
        ate_table["cevae_baseline"] = validator.baseline_ate
    ate_table["rounds"] = [{"round": r.round, "name": r.name, "ate": r.ate} for r in scored]
    ate_table["final"] = None if final is None else {"round": final.round, "name": final.name, "ate": final.ate}
    return RunLog(config.to_dict(), public.fingerprint(), state.history, decision, ate_table,
                  None if best is None else best.round)


def render_table(run_log) -> str:
    """Round / confounder / gain / alignment / status table plus the ATE comparison.

    Accepts a :class:`RunLog` or its ``to_dict()`` form (a loaded run log).
    """
    data = run_log.to_dict() if isinstance(run_log, RunLog) else run_log
    rows = [("Round", "Generated Confounder", "Delta_ELBO", "rho_max", "Status")]
    for r in data["records"]:
        name = r["proposal"]["name"] if r["proposal"] else "(generation failed)"
        status = r["status"].title()
        if r["signal"] is None:
            rows.append((str(r["round"]), name, "-", "-", status))
        else:
            rows.append((str(r["round"]), name, f"{r['signal']['delta_elbo']:.4f}",
                         f"{r['signal']['rho_max']:.3f}", status))
    widths = [max(len(row[i]) for row in rows) for i in range(5)]
    line = lambda row: " | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
    out = [line(rows[0]), "-+-".join("-" * w for w in widths)] + [line(r) for r in rows[1:]]
    out += ["", f"Termination: {data['termination']}", "", "ATE estimates:"]
    table = data["ate_table"]
    ate_rows = [("Naive Difference (Unadjusted)", table["naive"])]
    if "cevae_baseline" in table:
        ate_rows.append(("CEVAE Baseline (No U_hat)", table["cevae_baseline"]))
    for r in table["rounds"]:
        ate_rows.append((f"CEVAE + Round {r['round']} ({r['name']})", r["ate"]))
    if table["final"] is not None:
        ate_rows.append((f"CEVAE + Round {table['final']['round']} (final)", table["final"]["ate"]))
    width = max(len(label) for label, _ in ate_rows)
    out += [f"{label.ljust(width)}  {value:+.4f}" if value is not None else f"{label.ljust(width)}  -"
            for label, value in ate_rows]
    return "\n".join(out) + "\n"
