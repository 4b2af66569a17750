"""Causal effect VAE for binary treatment and binary outcome.

Encoder ``q(z | x, t, y[, u])``, treatment decoder ``p(t | z, x)`` and outcome
decoder ``p(y | z, x, t)``; trained by maximising the ELBO
``E_q[log p(t|z,x) + log p(y|z,x,t)] - beta * KL(q || N(0, I))``.
All reported ELBO terms are means per datapoint.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .neural import (SIGMOID_CLAMP, AdamState, Linear, Parameter, adam_step, mlp,
                     sigmoid)

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class CevaeConfig:
    latent_dim: int = 5
    hidden_dim: int = 128
    batch_size: int = 256
    epochs: int = 100
    learning_rate: float = 1e-3
    kl_weight: float = 1.0
    seed: int = 0
    augmented: bool = False
    # candidate confounder also feeds both decoders (see README, "Augmented model")
    u_in_decoders: bool = True
    eval_mc_samples: int = 10
    eval_seed: int = 2024
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.hidden_dim < 2:
            raise ValueError("hidden_dim must be >= 2")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two rows)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.eval_mc_samples < 1:
            raise ValueError("eval_mc_samples must be >= 1")


@dataclass(frozen=True)
class LatentPosterior:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)


@dataclass(frozen=True)
class ElboReport:
    elbo: float
    recon_t: float
    recon_y: float
    kl: float
    kl_weight: float
    mc_samples: int
    seed: int | None
    n: int


@dataclass
class EpochReport:
    epoch: int
    train_elbo: float
    eval: ElboReport | None = None


@dataclass
class TrainResult:
    trace: list[EpochReport] = field(default_factory=list)
    final: ElboReport | None = None
    steps: int = 0


def kl_diag_gaussian(mu, log_var) -> float:
    """Mean over rows of KL(N(mu, exp(log_var)) || N(0, I))."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    log_var = np.atleast_2d(np.asarray(log_var, dtype=np.float64))
    if mu.shape != log_var.shape:
        raise ValueError(f"mu shape {mu.shape} != log_var shape {log_var.shape}")
    # expm1 avoids cancellation in exp(v) - 1 - v near v = 0; the term is >= 0 exactly
    per_row = 0.5 * np.sum(np.maximum(np.expm1(log_var) - log_var, 0.0) + mu * mu, axis=1)
    return float(np.mean(per_row))


def _check_binary(y, name):
    y = np.asarray(y, dtype=np.float64)
    if np.any((y != 0) & (y != 1)):
        raise ValueError(f"{name} must contain only 0 and 1")
    return y


def bernoulli_loglik(y_true, y_pred) -> np.ndarray:
    p = np.clip(y_pred, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    return y_true * np.log(p) + (1.0 - y_true) * np.log1p(-p)


def bce(y_true, y_pred) -> float:
    """Mean binary cross-entropy with predictions clamped away from 0 and 1."""
    y_true = _check_binary(y_true, "y_true")
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    return float(-np.mean(bernoulli_loglik(y_true, y_pred)))


class CevaeModel:
    def __init__(self, config: CevaeConfig, n_covariates: int):
        self.config = config
        self.n_covariates = n_covariates
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
        h, latent = config.hidden_dim, config.latent_dim
        # layers are drawn exactly as for the baseline; the candidate-confounder
        # column is appended with zero weights so baseline and augmented runs
        # with one seed start from the same function
        self.trunk = mlp(n_covariates + 2, h, 0, rng, "encoder", batchnorm=True,
                         bn_momentum=config.bn_momentum, bn_eps=config.bn_eps)
        self.mu_head = Linear(h // 2, latent, rng, "encoder.mu")
        self.logvar_head = Linear(h // 2, latent, rng, "encoder.logvar")
        self.t_decoder = mlp(latent + n_covariates, h, 1, rng, "t_decoder")
        self.y_decoder = mlp(latent + n_covariates + 1, h, 1, rng, "y_decoder")
        if config.augmented:
            _append_zero_input(self.trunk.layers[0])
            if config.u_in_decoders:
                _append_zero_input(self.t_decoder.layers[0])
                _append_zero_input(self.y_decoder.layers[0])
        self.encoder_in = self.trunk.layers[0].in_dim
        self.adam = AdamState(learning_rate=config.learning_rate)
        self.u_range: tuple[float, float] | None = None

    # -- plumbing ---------------------------------------------------------
    def parameters(self) -> list[Parameter]:
        return (self.trunk.parameters() + self.mu_head.parameters() + self.logvar_head.parameters()
                + self.t_decoder.parameters() + self.y_decoder.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    @property
    def batchnorm(self):
        return self.trunk.layers[2]

    def fit_u_scaling(self, u) -> None:
        u = np.asarray(u, dtype=np.float64)
        self.u_range = (float(u.min()), float(u.max()))

    def _scaled_u(self, u) -> np.ndarray:
        if u is None:
            raise ValueError("augmented model needs u_hat on every batch")
        lo, hi = self.u_range
        if hi == lo:
            return np.zeros_like(u)
        return (u - lo) / (hi - lo)

    def _arrays(self, data: Dataset):
        x, t, y = data.x, data.t[:, None], data.y[:, None]
        if x.shape[1] != self.n_covariates:
            raise ValueError(f"model expects {self.n_covariates} covariates, got {x.shape[1]}")
        u = None
        if self.config.augmented:
            if self.u_range is None:
                self.fit_u_scaling(data.u_hat if data.u_hat is not None else np.zeros(1))
            u = self._scaled_u(data.u_hat)[:, None]
        return x, t, y, u

    def _decoder_inputs(self, z, x, t, u):
        """Treatment decoder sees [z, x(, u)]; outcome decoder [z, x, t(, u)]."""
        extra = [u] if u is not None and self.config.u_in_decoders else []
        return np.hstack([z, x] + extra), np.hstack([z, x, t] + extra)

    def encode(self, x, t, y, u, training: bool):
        parts = [x, t, y] + ([u] if u is not None else [])
        h = self.trunk.forward(np.hstack(parts), training=training)
        return self.mu_head.forward(h), self.logvar_head.forward(h)

    # -- core objective ---------------------------------------------------
    def objective(self, x, t, y, u, noise, training: bool, backward: bool = False) -> ElboReport:
        """ELBO with explicit reparameterisation noise of shape (samples, n, latent).

        With ``backward`` the gradient of ``-ELBO`` is accumulated into every
        parameter's ``grad``.
        """
        beta = self.config.kl_weight
        n = x.shape[0]
        samples = noise.shape[0]
        mu, log_var = self.encode(x, t, y, u, training)
        std = np.exp(0.5 * log_var)
        z = (mu[None] + std[None] * noise).reshape(samples * n, -1)
        t_rep = np.tile(t, (samples, 1))
        y_rep = np.tile(y, (samples, 1))
        t_in, y_in = self._decoder_inputs(z, np.tile(x, (samples, 1)), t_rep,
                                          None if u is None else np.tile(u, (samples, 1)))
        p_t = sigmoid(self.t_decoder.forward(t_in, training=training))
        p_y = sigmoid(self.y_decoder.forward(y_in, training=training))
        recon_t = float(np.mean(bernoulli_loglik(t_rep, p_t)))
        recon_y = float(np.mean(bernoulli_loglik(y_rep, p_y)))
        kl = kl_diag_gaussian(mu, log_var)
        report = ElboReport(recon_t + recon_y - beta * kl, recon_t, recon_y, kl, beta,
                            samples, None, n)
        if not backward:
            return report

        scale = 1.0 / (samples * n)
        latent = mu.shape[1]

        def logit_grad(p, target):
            # d(-loglik)/dlogit, zero where the clamp is active
            active = (p > SIGMOID_CLAMP) & (p < 1.0 - SIGMOID_CLAMP)
            return np.where(active, p - target, 0.0) * scale

        g_z = self.t_decoder.backward(logit_grad(p_t, t_rep))[:, :latent]
        g_z = g_z + self.y_decoder.backward(logit_grad(p_y, y_rep))[:, :latent]
        g_z = g_z.reshape(samples, n, latent)
        g_mu = g_z.sum(axis=0) + beta * mu / n
        g_logvar = (g_z * noise).sum(axis=0) * 0.5 * std + beta * 0.5 * (np.exp(log_var) - 1.0) / n
        g_h = self.mu_head.backward(g_mu) + self.logvar_head.backward(g_logvar)
        self.trunk.backward(g_h)
        return report

    def elbo_step(self, data: Dataset, rng: np.random.Generator | None = None,
                  training: bool = False, mc_samples: int | None = None) -> ElboReport:
        """Training: one reparameterised draw, gradients accumulated.

        Eval: ``eval_mc_samples`` draws from the fixed eval seed, no gradients.
        """
        x, t, y, u = self._arrays(data)
        latent = self.config.latent_dim
        if training:
            rng = rng if rng is not None else np.random.default_rng(self.config.seed)
            noise = rng.standard_normal((1, x.shape[0], latent))
            return self.objective(x, t, y, u, noise, training=True, backward=True)
        samples = mc_samples or self.config.eval_mc_samples
        noise = np.random.default_rng(self.config.eval_seed).standard_normal((samples, x.shape[0], latent))
        report = self.objective(x, t, y, u, noise, training=False)
        return ElboReport(report.elbo, report.recon_t, report.recon_y, report.kl, report.kl_weight,
                          samples, self.config.eval_seed, report.n)

    # -- checkpointing ----------------------------------------------------
    def save(self, path) -> None:
        arrays = {p.name: p.value for p in self.parameters()}
        bn = self.batchnorm
        arrays["encoder.bn.running_mean"] = bn.running_mean
        arrays["encoder.bn.running_var"] = bn.running_var
        meta = {"config": asdict(self.config), "n_covariates": self.n_covariates,
                "u_range": self.u_range, "adam_t": self.adam.t}
        arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with Path(path).open("wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "CevaeModel":
        with np.load(Path(path)) as archive:
            meta = json.loads(archive["__meta__"].tobytes().decode())
            model = cls(CevaeConfig(**meta["config"]), meta["n_covariates"])
            for p in model.parameters():
                p.value[...] = archive[p.name]
            model.batchnorm.running_mean = archive["encoder.bn.running_mean"].copy()
            model.batchnorm.running_var = archive["encoder.bn.running_var"].copy()
        model.u_range = tuple(meta["u_range"]) if meta["u_range"] is not None else None
        model.adam.t = meta["adam_t"]
        return model


def _append_zero_input(layer: Linear) -> None:
    layer.in_dim += 1
    layer.weight.value = np.hstack([layer.weight.value, np.zeros((layer.out_dim, 1))])
    layer.weight.grad = np.zeros_like(layer.weight.value)


def _batches(n: int, batch_size: int, perm: np.ndarray) -> list[np.ndarray]:
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and batches[-1].size < 2:
        # a single leftover row cannot be batch-normalised; fold it into the previous batch
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def train(model: CevaeModel, train_data: Dataset, eval_data: Dataset | None = None,
          eval_every: int = 1) -> TrainResult:
    """Minibatch Adam on ``-ELBO`` for ``config.epochs`` epochs.

    Every ``eval_every`` epochs (and after the last) the eval-mode ELBO on
    ``eval_data`` is recorded; ``result.final`` is the last of these.
    """
    cfg = model.config
    if train_data.n < 2:
        raise ValueError("training needs at least two rows")
    if cfg.augmented and model.u_range is None:
        model.fit_u_scaling(train_data.u_hat)
    shuffle_seq, noise_seq = np.random.SeedSequence([cfg.seed, 1]).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)
    params = model.parameters()
    result = TrainResult()
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(train_data.n)
        elbos = []
        for b, idx in enumerate(_batches(train_data.n, cfg.batch_size, perm)):
            model.zero_grad()
            report = model.elbo_step(train_data.subset(idx), noise_rng, training=True)
            if not np.isfinite(report.elbo):
                raise TrainingDivergedError(f"non-finite ELBO at epoch {epoch}, batch {b}")
            adam_step(model.adam, params)
            result.steps += 1
            elbos.append(report.elbo * idx.size)
        entry = EpochReport(epoch, float(np.sum(elbos) / train_data.n))
        if eval_data is not None and eval_data.n and (epoch % eval_every == 0 or epoch == cfg.epochs):
            entry.eval = model.elbo_step(eval_data)
            result.final = entry.eval
        result.trace.append(entry)
    if result.final is None and eval_data is not None and eval_data.n:
        result.final = model.elbo_step(eval_data)
    return result


def posterior(model: CevaeModel, data: Dataset) -> LatentPosterior:
    x, t, y, u = model._arrays(data)
    mu, log_var = model.encode(x, t, y, u, training=False)
    return LatentPosterior(mu, log_var)


def estimate_ate(model: CevaeModel, data: Dataset, mc_samples: int = 10, seed: int = 0) -> float:
    """Average over units and posterior draws of p(y=1|z,x,t=1) - p(y=1|z,x,t=0)."""
    x, t, y, u = model._arrays(data)
    mu, log_var = model.encode(x, t, y, u, training=False)
    noise = np.random.default_rng(seed).standard_normal((mc_samples,) + mu.shape)
    z = (mu[None] + np.exp(0.5 * log_var)[None] * noise).reshape(-1, mu.shape[1])
    x_rep = np.tile(x, (mc_samples, 1))
    u_rep = None if u is None else np.tile(u, (mc_samples, 1))
    ones = np.ones((z.shape[0], 1))
    _, treated = model._decoder_inputs(z, x_rep, ones, u_rep)
    _, control = model._decoder_inputs(z, x_rep, 0 * ones, u_rep)
    p1 = sigmoid(model.y_decoder.forward(treated, training=False))
    p0 = sigmoid(model.y_decoder.forward(control, training=False))
    return float(np.mean(p1 - p0))
