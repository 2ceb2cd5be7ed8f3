"""Conditional VAE over behavior samples: state is the condition, action the
prediction. Trained by minimizing (KL + reconstruction) on mixed data plus a
calibration penalty that binds expert embeddings toward a single latent point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .numerics import Mlp, TrainingDivergedError, adam_init, adam_step, init_mlp

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass
class GaussianLatent:
    """Diagonal Gaussian in latent space; std is strictly positive."""

    mean: np.ndarray
    std: np.ndarray


@dataclass
class CvaeConfig:
    latent_dim: int = 8
    hidden: tuple = (128, 128)
    batch_size: int = 128
    iterations: int = 10_000
    learning_rate: float = 1e-4
    calibration_weight: float = 0.1
    elbo_samples: int = 1
    exclude_expert_from_mixed: bool = False

    @classmethod
    def maze_defaults(cls, **overrides):
        """Wider/slower settings that suit maze-style data."""
        base = dict(
            hidden=(512, 512),
            batch_size=256,
            iterations=100_000,
            learning_rate=1e-3,
            calibration_weight=0.8,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class CvaeModel:
    encoder: Mlp  # concat(s, a) -> (mean, log_std), width 2 * latent_dim
    decoder: Mlp  # concat(z, s) -> action mean
    latent_dim: int
    state_dim: int
    action_dim: int
    calibration_weight: float = 0.1
    elbo_samples: int = 1

    def copy(self):
        return CvaeModel(
            self.encoder.copy(),
            self.decoder.copy(),
            self.latent_dim,
            self.state_dim,
            self.action_dim,
            self.calibration_weight,
            self.elbo_samples,
        )


@dataclass
class CvaeTrainReport:
    elbo: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    reconstruction: list = field(default_factory=list)
    calibration: list = field(default_factory=list)
    final_expert_spread: float | None = None
    diverged: bool = False

    def __len__(self):
        return len(self.elbo)


def init_cvae(state_dim, action_dim, config, rng):
    encoder = init_mlp(
        [state_dim + action_dim, *config.hidden, 2 * config.latent_dim], rng, activation="relu"
    )
    decoder = init_mlp(
        [config.latent_dim + state_dim, *config.hidden, action_dim], rng, activation="relu"
    )
    return CvaeModel(
        encoder,
        decoder,
        config.latent_dim,
        state_dim,
        action_dim,
        config.calibration_weight,
        config.elbo_samples,
    )


def _join(s, a, s_dim, a_dim, what="input"):
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.shape[-1] != s_dim or a.shape[-1] != a_dim:
        raise ValueError(f"{what}: expected dims ({s_dim}, {a_dim}), got ({s.shape[-1]}, {a.shape[-1]})")
    if s.ndim != a.ndim:
        raise ValueError(f"{what}: state and action ranks differ")
    return np.concatenate([s, a], axis=-1)


def _split_encoder_output(out, latent_dim):
    mean = out[..., :latent_dim]
    raw = out[..., latent_dim:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    clamp_mask = ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(np.float64)
    return mean, log_std, clamp_mask


def encode(model, s, a):
    """Posterior q(z | s, a) as a GaussianLatent (works on batches too)."""
    out = model.encoder.forward(_join(s, a, model.state_dim, model.action_dim))
    mean, log_std, _ = _split_encoder_output(out, model.latent_dim)
    return GaussianLatent(mean, np.exp(log_std))


def reparameterize(g, rng):
    """z = mean + std * eps with eps ~ N(0, I)."""
    eps = rng.standard_normal(np.shape(g.mean))
    return g.mean + g.std * eps


def kl_to_standard_normal(g):
    """KL(N(mean, std^2) || N(0, I)) = 0.5 * sum(mean^2 + std^2 - log std^2 - 1)."""
    mean = np.asarray(g.mean, dtype=np.float64)
    std = np.asarray(g.std, dtype=np.float64)
    per = 0.5 * np.sum(mean**2 + std**2 - 2.0 * np.log(std) - 1.0, axis=-1)
    return float(per) if per.ndim == 0 else per


def elbo_loss(model, s, a, rng):
    """Negative empirical lower bound (KL + squared-error reconstruction),
    averaged over the batch. Returns (loss, parts)."""
    s2, a2 = np.atleast_2d(s), np.atleast_2d(a)
    eps = rng.standard_normal((model.elbo_samples, s2.shape[0], model.latent_dim))
    loss, parts, _, _ = _elbo(model, s2, a2, eps, with_grads=False)
    return loss, parts


def elbo_loss_given_noise(model, s, a, eps):
    """Deterministic ELBO loss for fixed reparameterization noise (testing hook)."""
    loss, parts, _, _ = _elbo(model, np.atleast_2d(s), np.atleast_2d(a), eps, with_grads=False)
    return loss, parts


def elbo_grads(model, s, a, eps):
    """Loss, parts, and analytic gradients for encoder and decoder."""
    return _elbo(model, np.atleast_2d(s), np.atleast_2d(a), eps, with_grads=True)


def _elbo(model, s, a, eps, with_grads):
    n = s.shape[0]
    z_dim = model.latent_dim
    n_samples = eps.shape[0]
    u = _join(s, a, model.state_dim, model.action_dim)
    enc_out, enc_cache = model.encoder.forward_cached(u)
    mean, log_std, clamp_mask = _split_encoder_output(enc_out, z_dim)
    std = np.exp(log_std)

    kl = float(np.mean(0.5 * np.sum(mean**2 + std**2 - 2.0 * log_std - 1.0, axis=-1)))

    recon = 0.0
    dmean = mean / n if with_grads else None
    dlog_std = (std**2 - 1.0) / n if with_grads else None
    dec_grads = None
    for l in range(n_samples):
        z = mean + std * eps[l]
        d_in = np.concatenate([z, s], axis=-1)
        a_hat, dec_cache = model.decoder.forward_cached(d_in)
        diff = a_hat - a
        recon += float(np.mean(0.5 * np.sum(diff**2, axis=-1))) / n_samples
        if with_grads:
            g_out = diff / (n * n_samples)
            layer_grads, g_in = model.decoder.backward_from_cache(dec_cache, g_out)
            if dec_grads is None:
                dec_grads = layer_grads
            else:
                for acc, g in zip(dec_grads, layer_grads):
                    acc += g
            gz = g_in[:, :z_dim]
            dmean += gz
            dlog_std += gz * eps[l] * std

    loss = kl + recon
    if not np.isfinite(loss):
        raise TrainingDivergedError("non-finite CVAE loss")
    parts = {"kl": kl, "reconstruction": recon}
    if not with_grads:
        return loss, parts, None, None
    enc_gout = np.concatenate([dmean, dlog_std * clamp_mask], axis=-1)
    enc_grads, _ = model.encoder.backward_from_cache(enc_cache, enc_gout)
    return loss, parts, enc_grads, dec_grads


def calibration_loss(model, s, a):
    """Batch mean of ||mean||^2 + ||std||^2 over expert embeddings."""
    s2, a2 = np.atleast_2d(s), np.atleast_2d(a)
    if s2.shape[0] == 0:
        raise ValueError("calibration batch is empty")
    g = encode(model, s2, a2)
    return float(np.mean(np.sum(g.mean**2, axis=-1) + np.sum(g.std**2, axis=-1)))


def calibration_grads(model, s, a):
    """Calibration value plus its encoder gradients."""
    s2, a2 = np.atleast_2d(s), np.atleast_2d(a)
    if s2.shape[0] == 0:
        raise ValueError("calibration batch is empty")
    n = s2.shape[0]
    u = _join(s2, a2, model.state_dim, model.action_dim)
    out, cache = model.encoder.forward_cached(u)
    mean, log_std, clamp_mask = _split_encoder_output(out, model.latent_dim)
    std = np.exp(log_std)
    value = float(np.mean(np.sum(mean**2, axis=-1) + np.sum(std**2, axis=-1)))
    gout = np.concatenate([2.0 * mean / n, (2.0 * std**2 / n) * clamp_mask], axis=-1)
    grads, _ = model.encoder.backward_from_cache(cache, gout)
    return value, grads


def expert_embedding_spread(model, expert, cap=512):
    """Mean pairwise distance between expert posterior means (collapse metric)."""
    flat = expert.flat()
    n = len(flat)
    idx = np.arange(n) if n <= cap else np.linspace(0, n - 1, cap).astype(int)
    mu = encode(model, flat.states[idx], flat.actions[idx]).mean
    if mu.shape[0] < 2:
        return 0.0
    diff = mu[:, None, :] - mu[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    m = mu.shape[0]
    return float(dist.sum() / (m * (m - 1)))


def train(model, mixed, expert, config, rng):
    """Minimize [-ELBO(mixed batch) + weight * calibration(expert batch)].

    One mixed batch and one expert batch are drawn independently with
    replacement each iteration. The expert batch is sampled (and the
    calibration value recorded) even at weight 0 so ablation pairs with the
    same seed consume identical RNG streams; its gradient is only applied
    when the weight is positive.
    """
    mixed_flat = mixed.flat()
    expert_flat = expert.flat()
    if len(expert_flat) == 0:
        raise ValueError("expert dataset is empty")
    weight = config.calibration_weight
    enc_opt = adam_init(model.encoder.params(), config.learning_rate)
    dec_opt = adam_init(model.decoder.params(), config.learning_rate)
    report = CvaeTrainReport()

    for _ in range(config.iterations):
        idx = rng.integers(0, len(mixed_flat), size=config.batch_size)
        e_idx = rng.integers(0, len(expert_flat), size=config.batch_size)
        eps = rng.standard_normal((config.elbo_samples, config.batch_size, config.latent_dim))
        s, a = mixed_flat.states[idx], mixed_flat.actions[idx]
        es, ea = expert_flat.states[e_idx], expert_flat.actions[e_idx]
        try:
            loss, parts, enc_grads, dec_grads = elbo_grads(model, s, a, eps)
            if weight > 0.0:
                calib, calib_grads = calibration_grads(model, es, ea)
                for acc, g in zip(enc_grads, calib_grads):
                    acc += weight * g
            else:
                calib = calibration_loss(model, es, ea)
            adam_step(model.encoder.params(), enc_grads, enc_opt)
            adam_step(model.decoder.params(), dec_grads, dec_opt)
        except TrainingDivergedError as exc:
            report.diverged = True
            raise TrainingDivergedError(str(exc), report=report) from exc
        report.elbo.append(-loss)
        report.kl.append(parts["kl"])
        report.reconstruction.append(parts["reconstruction"])
        report.calibration.append(calib)

    report.final_expert_spread = expert_embedding_spread(model, expert)
    return report


def save_cvae(model, path, calibration_weight=None, default_temperature=6.0):
    """Binary checkpoint (encoder then decoder) plus the JSON sidecar."""
    numerics.save_mlps(path, [model.encoder, model.decoder])
    sidecar = {
        "latent_dim": model.latent_dim,
        "state_dim": model.state_dim,
        "action_dim": model.action_dim,
        "lambda": model.calibration_weight if calibration_weight is None else calibration_weight,
        "c_default": default_temperature,
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True, indent=2)
        f.write("\n")


def load_cvae(path):
    """Load a checkpoint saved by save_cvae. Returns (model, sidecar dict)."""
    with open(str(path) + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    encoder, decoder = numerics.load_mlps(
        path, activations=[("relu", "identity"), ("relu", "identity")]
    )
    model = CvaeModel(
        encoder,
        decoder,
        int(sidecar["latent_dim"]),
        int(sidecar["state_dim"]),
        int(sidecar["action_dim"]),
        float(sidecar["lambda"]),
    )
    return model, sidecar
