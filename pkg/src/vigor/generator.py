"""Candidate-confounder generators behind a single ``generate`` call.

Three backends share one contract: ``llm_http`` (a chat-completions endpoint
driven through variable, distribution and per-individual parameter prompts),
``scripted`` (proposals read from a JSON script) and ``oracle`` (noisy copies
of a planted confounder, for benchmarks only).
"""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import httpx
import numpy as np

from .data import Dataset

log = logging.getLogger(__name__)

KINDS = ("Normal", "Bernoulli")
FORMAT_RETRIES = 3


class GeneratorError(RuntimeError):
    pass


class TransportError(GeneratorError):
    pass


class FormatError(GeneratorError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class NameCollisionError(GeneratorError):
    pass


@dataclass(frozen=True)
class Distribution:
    kind: str
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    p: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "Normal":
            if self.mean is None or self.std is None:
                raise ValueError("Normal distribution needs mean and std")
            mean = np.asarray(self.mean, dtype=np.float64).ravel()
            std = np.broadcast_to(np.asarray(self.std, dtype=np.float64), mean.shape).copy()
            if np.any(std < 0) or not np.all(np.isfinite(mean)) or not np.all(np.isfinite(std)):
                raise ValueError("Normal parameters must be finite with std >= 0")
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "std", std)
        else:
            if self.p is None:
                raise ValueError("Bernoulli distribution needs p")
            p = np.asarray(self.p, dtype=np.float64).ravel()
            if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
                raise ValueError("Bernoulli p must lie in [0, 1]")
            object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return (self.mean if self.kind == "Normal" else self.p).size

    def to_dict(self) -> dict:
        if self.kind == "Normal":
            return {"kind": "Normal", "mean": self.mean.tolist(), "std": self.std.tolist()}
        return {"kind": "Bernoulli", "p": self.p.tolist()}


@dataclass(frozen=True)
class ConfounderProposal:
    name: str
    explanation: str
    distribution: Distribution
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size != self.distribution.n:
            raise ValueError(f"{values.size} values for {self.distribution.n} individuals")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class GeneratorRequest:
    dataset: Dataset
    round: int
    feedback: str = ""
    exclusion_list: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.round < 1:
            raise ValueError("round must be >= 1")
        if self.dataset.u_star is not None or self.dataset.true_ate is not None:
            raise ValueError("generator requests must not carry synthetic ground truth")
        object.__setattr__(self, "exclusion_list", tuple(self.exclusion_list))

    @property
    def schema(self) -> str:
        return self.dataset.describe()


@dataclass(frozen=True)
class GeneratorConfig:
    backend: str = "scripted"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "glm-4.5"
    api_key_env: str = "VIGOR_LLM_API_KEY"
    temperature: float = 0.7
    timeout: float = 60.0
    max_retries: int = 3
    retry_backoff: float = 1.0
    chunk_size: int = 200
    max_concurrency: int = 4
    script_path: str | None = None
    oracle_noise: float | Sequence[float] = 0.0
    capture_path: str | None = None

    def __post_init__(self):
        if self.backend not in ("llm_http", "scripted", "oracle"):
            raise ValueError(f"unknown generator backend {self.backend!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.chunk_size < 1 or self.max_concurrency < 1:
            raise ValueError("chunk_size and max_concurrency must be >= 1")


# -- sampling -------------------------------------------------------------

def box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    u1 = 1.0 - rng.uniform(size=n)  # (0, 1], keeps log finite
    u2 = rng.uniform(size=n)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def sample_values(distribution: Distribution, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if distribution.kind == "Normal":
        return distribution.mean + distribution.std * box_muller(rng, distribution.n)
    return (rng.uniform(size=distribution.n) < distribution.p).astype(np.float64)


# -- parsing --------------------------------------------------------------

def _outermost_object(raw: str) -> str | None:
    """First balanced ``{...}`` block, ignoring braces inside JSON strings."""
    start = raw.find("{")
    while start != -1:
        depth, in_str, escape = 0, False, False
        for i in range(start, len(raw)):
            ch = raw[i]
            if in_str:
                if escape:
                    escape = False
                elif ch == "\\":
                    escape = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return raw[start:i + 1]
        start = raw.find("{", start + 1)
    return None


def parse_payload(raw: str) -> dict:
    if not raw or not raw.strip():
        raise FormatError("empty model response", raw or "")
    block = _outermost_object(raw)
    if block is None:
        raise FormatError("no complete JSON object in model response", raw)
    try:
        payload = json.loads(block)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON in model response: {exc}", raw) from None
    if not isinstance(payload, dict):
        raise FormatError("model response is not a JSON object", raw)
    return payload


def _normalise_kind(kind) -> str | None:
    if not isinstance(kind, str):
        return None
    for k in KINDS:
        if kind.strip().lower() == k.lower():
            return k
    return None


def parse_llm_response(raw: str) -> dict:
    """Name, explanation and (if present) distribution kind from a model reply.

    Prose around the JSON object is tolerated; anything without a complete
    object carrying a non-empty ``name`` raises :class:`FormatError`.
    """
    payload = parse_payload(raw)
    name = payload.get("name")
    if not isinstance(name, str) or not name.strip():
        raise FormatError("response lacks a non-empty 'name'", raw)
    out = {"name": name.strip(), "explanation": str(payload.get("explanation", "")).strip()}
    dist = payload.get("distribution")
    if isinstance(dist, dict):
        dist = dist.get("kind")
    if dist is not None:
        kind = _normalise_kind(dist)
        if kind is None:
            raise FormatError(f"unsupported distribution {dist!r}", raw)
        out["distribution"] = kind
    return out


# -- backends -------------------------------------------------------------

def _norm_name(name: str) -> str:
    return " ".join(name.lower().split())


def check_exclusion(proposal: ConfounderProposal, exclusion_list: Sequence[str]) -> ConfounderProposal:
    if _norm_name(proposal.name) in {_norm_name(n) for n in exclusion_list}:
        raise NameCollisionError(f"proposal {proposal.name!r} repeats an excluded confounder")
    return proposal


def _param_column(spec, dataset: Dataset, key: str) -> np.ndarray:
    n = dataset.n
    value = spec.get(key)
    if isinstance(value, dict):
        # linear in covariates: {"intercept": b, "coefficients": {column: w}}
        out = np.full(n, float(value.get("intercept", 0.0)))
        for col, w in value.get("coefficients", {}).items():
            if col not in dataset.column_names:
                raise GeneratorError(f"script refers to unknown column {col!r}")
            out += float(w) * dataset.x[:, dataset.column_names.index(col)]
        return out
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.size != n:
        raise GeneratorError(f"script parameter '{key}' has {arr.size} entries for {n} individuals")
    return arr.ravel()


def distribution_from_spec(spec: dict, dataset: Dataset) -> Distribution:
    kind = _normalise_kind(spec.get("kind"))
    if kind == "Normal":
        return Distribution("Normal", mean=_param_column(spec, dataset, "mean"),
                            std=_param_column(spec, dataset, "std"))
    if kind == "Bernoulli":
        return Distribution("Bernoulli", p=_param_column(spec, dataset, "p"))
    raise GeneratorError(f"unsupported distribution {spec.get('kind')!r} in script")


class ScriptedGenerator:
    """Replays proposals from a JSON script, one entry per round.

    Script schema::

        {"proposals": [
            {"name": str, "explanation": str,
             "distribution": {"kind": "Normal", "mean": M, "std": S}
                           | {"kind": "Bernoulli", "p": P}}, ...]}

    where each parameter is a scalar, a per-individual list, or
    ``{"intercept": b, "coefficients": {"<covariate>": w, ...}}``.
    """

    def __init__(self, script: dict | str | Path):
        if not isinstance(script, dict):
            script = json.loads(Path(script).read_text(encoding="utf-8"))
        self.proposals = list(script["proposals"])

    def generate(self, request: GeneratorRequest) -> ConfounderProposal:
        if request.round > len(self.proposals):
            raise GeneratorError(f"script has {len(self.proposals)} proposals, round {request.round} requested")
        entry = self.proposals[request.round - 1]
        dist = distribution_from_spec(entry["distribution"], request.dataset)
        return ConfounderProposal(entry["name"], entry.get("explanation", ""), dist,
                                  sample_values(dist, request.seed))


class OracleGenerator:
    """Noisy copies ``u_star + noise * N(0, 1)`` of the planted confounder.

    ``noise`` may be a scalar or a per-round schedule (last entry repeats).
    Values are returned unscaled; the model min-max scales its inputs.
    """

    def __init__(self, u_star, noise: float | Sequence[float] = 0.0):
        self.u_star = np.asarray(u_star, dtype=np.float64).ravel()
        self.schedule = [float(noise)] if np.isscalar(noise) else [float(v) for v in noise]
        if any(v < 0 for v in self.schedule):
            raise ValueError("oracle noise must be >= 0")

    def noise_for(self, round_k: int) -> float:
        return self.schedule[min(round_k, len(self.schedule)) - 1]

    def generate(self, request: GeneratorRequest) -> ConfounderProposal:
        if self.u_star.size != request.dataset.n:
            raise GeneratorError("planted confounder length does not match the dataset")
        sigma = self.noise_for(request.round)
        dist = Distribution("Normal", mean=self.u_star, std=np.full(self.u_star.size, sigma))
        return ConfounderProposal(f"Oracle confounder r{request.round} (noise {sigma:g})",
                                  "Planted benchmark confounder with additive Gaussian noise.",
                                  dist, sample_values(dist, request.seed))


def load_prompt(name: str) -> str:
    text = resources.files("vigor.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith("# prompt-version"))


class WireRecorder:
    """Appends request/response pairs as JSON lines for later replay."""

    def __init__(self, path):
        self.path = Path(path)

    def record(self, request_body: dict, response_body: dict) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({"request": request_body, "response": response_body}, sort_keys=True) + "\n")


def replay_transport(path) -> httpx.MockTransport:
    """Transport answering requests with recorded responses, in recording order."""
    pairs = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    by_request = {}
    for pair in pairs:
        by_request.setdefault(json.dumps(pair["request"], sort_keys=True), []).append(pair["response"])

    def handler(request: httpx.Request) -> httpx.Response:
        key = json.dumps(json.loads(request.content), sort_keys=True)
        queue = by_request.get(key)
        if not queue:
            return httpx.Response(404, json={"error": "no recorded response for this request"})
        return httpx.Response(200, json=queue.pop(0))

    return httpx.MockTransport(handler)


class LlmHttpGenerator:
    """Three-stage generation through an OpenAI-compatible chat-completions endpoint."""

    def __init__(self, config: GeneratorConfig, transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep):
        self.config = config
        self.transport = transport
        self.sleep = sleep
        self.recorder = WireRecorder(config.capture_path) if config.capture_path else None

    def _headers(self) -> dict:
        key = os.environ.get(self.config.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def _post(self, client: httpx.Client, body: dict) -> str:
        last = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.sleep(self.config.retry_backoff * 2 ** (attempt - 1))
            try:
                resp = client.post(self.config.endpoint, json=body, headers=self._headers())
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code} from {self.config.endpoint}")
            try:
                data = resp.json()
                content = data["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                raise FormatError("unexpected response envelope", resp.text) from None
            if self.recorder:
                self.recorder.record(body, data)
            return content
        raise TransportError(f"request failed after {self.config.max_retries} retries: {last}")

    def _ask(self, client, system: str, user: str, parse):
        """Send one prompt; re-prompt with a format reminder on unparsable replies."""
        messages = [{"role": "system", "content": system}, {"role": "user", "content": user}]
        raw = ""
        for attempt in range(FORMAT_RETRIES + 1):
            body = {"model": self.config.model, "messages": messages,
                    "temperature": self.config.temperature}
            raw = self._post(client, body)
            try:
                return parse(raw)
            except FormatError as exc:
                log.warning("unparsable model reply (attempt %d): %s", attempt + 1, exc)
                messages = messages + [{"role": "assistant", "content": raw},
                                       {"role": "user", "content": load_prompt("reminder").strip()}]
        raise FormatError(f"no parsable reply after {FORMAT_RETRIES} re-prompts", raw)

    def build_variable_prompt(self, request: GeneratorRequest) -> tuple[str, str]:
        system = load_prompt("system").format(dataset_description=request.schema)
        feedback = ""
        if request.round > 1 and request.feedback:
            feedback = "Validation feedback on previous attempts:\n" + request.feedback
        user = load_prompt("variable").format(
            round=request.round,
            exclusion_list=", ".join(request.exclusion_list) if request.exclusion_list else "none",
            feedback_block=feedback)
        return system, user

    def _param_chunk(self, client, system, name, explanation, kind, dataset, rows):
        if kind == "Normal":
            instruction = "Give a mean and a standard deviation (std > 0) for each individual."
            example = '{"i": 0, "mean": 0.0, "std": 1.0}'
        else:
            instruction = "Give the probability p in [0, 1] that the confounder is present for each individual."
            example = '{"i": 0, "p": 0.5}'
        columns = ", ".join(list(dataset.column_names) + ["t", "y"])
        lines = "\n".join(
            f"{i}: " + ", ".join(f"{v:.3f}" for v in dataset.x[i]) + f", {int(dataset.t[i])}, {int(dataset.y[i])}"
            for i in rows)
        user = load_prompt("parameters").format(name=name, kind=kind, explanation=explanation,
                                                param_instruction=instruction, columns=columns,
                                                rows=lines, example_row=example)
        wanted = set(int(i) for i in rows)

        def parse(raw):
            payload = parse_payload(raw)
            entries = payload.get("rows")
            if not isinstance(entries, list):
                raise FormatError("parameter reply lacks a 'rows' list", raw)
            out = {}
            try:
                for e in entries:
                    i = int(e["i"])
                    out[i] = (float(e["mean"]), float(e["std"])) if kind == "Normal" else (float(e["p"]),)
            except (KeyError, TypeError, ValueError):
                raise FormatError("malformed parameter row", raw) from None
            if set(out) != wanted:
                raise FormatError("parameter reply does not cover exactly the requested rows", raw)
            for params in out.values():
                if kind == "Normal" and not params[1] > 0:
                    raise FormatError("non-positive std in parameter reply", raw)
                if kind == "Bernoulli" and not 0.0 <= params[0] <= 1.0:
                    raise FormatError("p outside [0, 1] in parameter reply", raw)
            return out

        return self._ask(client, system, user, parse)

    def generate(self, request: GeneratorRequest) -> ConfounderProposal:
        system, user = self.build_variable_prompt(request)
        with httpx.Client(transport=self.transport, timeout=self.config.timeout) as client:
            var = self._ask(client, system, user, parse_llm_response)
            if _norm_name(var["name"]) in {_norm_name(n) for n in request.exclusion_list}:
                raise NameCollisionError(f"model proposed excluded confounder {var['name']!r}")
            kind = var.get("distribution")
            if kind is None:
                dist_user = load_prompt("distribution").format(name=var["name"], explanation=var["explanation"])

                def parse_kind(raw):
                    k = _normalise_kind(parse_payload(raw).get("distribution"))
                    if k is None:
                        raise FormatError("reply lacks a supported 'distribution'", raw)
                    return k

                kind = self._ask(client, system, dist_user, parse_kind)
            n = request.dataset.n
            chunks = [np.arange(s, min(s + self.config.chunk_size, n)) for s in range(0, n, self.config.chunk_size)]
            with ThreadPoolExecutor(max_workers=self.config.max_concurrency) as pool:
                results = list(pool.map(
                    lambda rows: self._param_chunk(client, system, var["name"], var["explanation"],
                                                   kind, request.dataset, rows), chunks))
        params = {}
        for part in results:
            params.update(part)
        ordered = np.array([params[i] for i in range(n)])
        if kind == "Normal":
            dist = Distribution("Normal", mean=ordered[:, 0], std=ordered[:, 1])
        else:
            dist = Distribution("Bernoulli", p=ordered[:, 0])
        return ConfounderProposal(var["name"], var["explanation"], dist, sample_values(dist, request.seed))


def make_generator(config: GeneratorConfig, u_star=None, transport=None):
    if config.backend == "scripted":
        if not config.script_path:
            raise GeneratorError("scripted backend needs script_path")
        return ScriptedGenerator(config.script_path)
    if config.backend == "oracle":
        if u_star is None:
            raise GeneratorError("oracle backend needs the planted confounder")
        return OracleGenerator(u_star, config.oracle_noise)
    return LlmHttpGenerator(config, transport=transport)


def generate(request: GeneratorRequest, config: GeneratorConfig | None = None, backend=None,
             u_star=None) -> ConfounderProposal:
    """Produce one proposal; never returns a name from ``request.exclusion_list``."""
    backend = backend if backend is not None else make_generator(config, u_star=u_star)
    return check_exclusion(backend.generate(request), request.exclusion_list)
