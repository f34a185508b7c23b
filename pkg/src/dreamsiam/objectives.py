"""Model-learning objectives.

Two variants share the recurrent core and reward head:

- contrastive: siamese view-matching + reward log-likelihood + time-varying
  KL dynamics term + cross inverse dynamics. No pixel reconstruction.
- reconstruction: pixel log-likelihood + reward + constant-weight KL. Kept
  for ablations and the gradient-alignment diagnostic.

All terms are objectives (maximized); the trainer descends their negated sum.
The per-term tensors are kept by name so diagnostics can differentiate any
single term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .config import Config
from .nets import ConvDecoder, ConvEncoder, SimSiamPredictor, mlp, preprocess
from .representation import (InverseDynamicsHead, encode_sequence,
                             inverse_dynamics_objective, random_shift_pair,
                             simsiam_objective)
from .rssm import RSSM, balanced_kl, flatten_states, stack_pairs
from .toyenv import ACTION_DIM, TrajectoryBatch

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class BetaSchedule:
    """Exponentially growing, capped dynamics weight: min(10^(a*t - b), c)."""

    a: float
    b: float
    c: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0 or self.c <= 0:
            raise ValueError("schedule parameters a, b, c must all be > 0")

    @property
    def cap_step(self) -> float:
        """Step at which the exponential reaches the cap."""
        return (self.b + math.log10(self.c)) / self.a


def beta_at(schedule: BetaSchedule, t: float) -> float:
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    return min(10.0 ** (schedule.a * t - schedule.b), schedule.c)


@dataclass(frozen=True)
class LossBreakdown:
    """Named objective terms (maximized); total is their sum."""

    terms: dict[str, torch.Tensor]
    beta: float
    aux: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> torch.Tensor:
        return sum(self.terms.values())

    def scalars(self) -> dict[str, float]:
        out = {name: float(t.detach()) for name, t in self.terms.items()}
        out["total"] = float(self.total.detach())
        out["beta"] = self.beta
        out.update(self.aux)
        return out


def tvd_loss(posterior, prior, t: float, schedule: BetaSchedule, ratio: float,
             constant_beta: Optional[float] = None) -> tuple[torch.Tensor, float]:
    """Time-varying dynamics term: -beta(t) * balanced KL, averaged over the
    batch. Returns the term and the beta used."""
    beta = constant_beta if constant_beta is not None else beta_at(schedule, t)
    return -beta * balanced_kl(posterior, prior, ratio).mean(), beta


def reward_objective(pred_mean: torch.Tensor, rewards: torch.Tensor) -> torch.Tensor:
    """Mean log-density of observed rewards under a unit-variance Gaussian head."""
    if pred_mean.shape != rewards.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_mean.shape)} vs {tuple(rewards.shape)}")
    return (-0.5 * (pred_mean - rewards).square() - 0.5 * _LOG_2PI).mean()


def image_log_likelihood(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Gaussian log-likelihood of frames (unit variance), summed over pixels
    and channels, averaged over batch and time. pred/target: [..., C, H, W]."""
    per_pixel = -0.5 * (pred - target).square() - 0.5 * _LOG_2PI
    return per_pixel.sum((-1, -2, -3)).mean()


class WorldModel(nn.Module):
    """Encoder, recurrent latent dynamics, and all learned heads.

    The decoder exists for the reconstruction variant and probing; the
    contrastive objective never touches it.
    """

    def __init__(self, cfg: Config, image_size: int = 64):
        super().__init__()
        m = cfg.model
        self.encoder = ConvEncoder(tuple(m.conv_channels), m.conv_kernel, image_size)
        if m.embed_dim is not None and m.embed_dim != self.encoder.embed_dim:
            raise ValueError(
                f"model.embed_dim={m.embed_dim} but the conv stack produces "
                f"{self.encoder.embed_dim}; set embed_dim to null to derive it")
        self.embed_dim = self.encoder.embed_dim
        self.rssm = RSSM(ACTION_DIM, self.embed_dim, m.deter_dim, m.stoch_dim,
                         m.hidden, m.min_std)
        self.feature_dim = self.rssm.feature_dim
        self.reward_head = mlp(self.feature_dim, m.hidden, 1, m.head_hidden_layers)
        self.predictor = SimSiamPredictor(self.embed_dim)
        self.inv_head = InverseDynamicsHead(self.embed_dim, ACTION_DIM, m.inv_hidden,
                                            m.inv_hidden_layers)
        self.decoder = ConvDecoder(self.feature_dim, m.conv_channels[0])

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def encode(self, obs: np.ndarray | torch.Tensor) -> torch.Tensor:
        return encode_sequence(self.encoder, obs, dtype=self.dtype)

    def observe(self, embeds: torch.Tensor, actions: torch.Tensor,
                generator: Optional[torch.Generator] = None):
        """Posterior rollout from a zero initial state; embeds [B, T, E]."""
        init = self.rssm.initial_state(embeds.shape[0])
        return self.rssm.rollout_posterior(init, actions, embeds, generator)


@dataclass(frozen=True)
class ObjectiveOutput:
    breakdown: LossBreakdown
    posterior_states: object  # flattened LatentState, imagination starts
    features: torch.Tensor    # [B, T, feature_dim]


def _to_tensor(x: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(x, dtype=dtype)


def contrastive_objective(wm: WorldModel, batch: TrajectoryBatch, t: float,
                          cfg: Config, generator: Optional[torch.Generator] = None,
                          aug_rng: Optional[np.random.Generator] = None) -> ObjectiveOutput:
    """Full contrastive model objective on a trajectory batch.

    Pipeline: paired random-shift views -> shared encoder -> posterior
    rollout conditioned on view-1 embeddings -> siamese + reward +
    time-varying KL + cross inverse dynamics terms.
    """
    obj = cfg.objective
    aug_rng = aug_rng if aug_rng is not None else np.random.default_rng()
    pair = random_shift_pair(batch.obs, aug_rng, pad=obj.shift_pad)
    embeds1 = wm.encode(pair.view1)
    embeds2 = wm.encode(pair.view2)
    actions = _to_tensor(batch.actions, wm.dtype)
    rewards = _to_tensor(batch.rewards, wm.dtype)

    pairs = wm.observe(embeds1, actions, generator)
    prior, posterior, features = stack_pairs(pairs)

    schedule = BetaSchedule(cfg.schedule.a, cfg.schedule.b, cfg.schedule.c)
    terms: dict[str, torch.Tensor] = {}
    if obj.use_simsiam:
        terms["simsiam"] = simsiam_objective(embeds1, embeds2, wm.predictor)
    terms["reward"] = reward_objective(wm.reward_head(features).squeeze(-1), rewards)
    tvd, beta = tvd_loss(posterior, prior, t, schedule, obj.kl_ratio,
                         cfg.schedule.constant_beta)
    terms["tvd"] = tvd
    if obj.use_inverse_dynamics:
        terms["c_inv"] = inverse_dynamics_objective(
            embeds1, embeds2, actions[:, 1:], wm.inv_head)
    breakdown = LossBreakdown(terms, beta, aux={
        "kl_value": float(tvd.detach() / -beta) if beta else 0.0})
    return ObjectiveOutput(breakdown, flatten_states(pairs), features)


def reconstruction_objective(wm: WorldModel, batch: TrajectoryBatch, t: float,
                             cfg: Config,
                             generator: Optional[torch.Generator] = None,
                             aug_rng: Optional[np.random.Generator] = None) -> ObjectiveOutput:
    """Reconstruction-based model objective (constant KL weight, no views)."""
    del aug_rng  # unaugmented: reconstruction targets are the raw frames
    embeds = wm.encode(batch.obs)
    actions = _to_tensor(batch.actions, wm.dtype)
    rewards = _to_tensor(batch.rewards, wm.dtype)

    pairs = wm.observe(embeds, actions, generator)
    prior, posterior, features = stack_pairs(pairs)

    target = preprocess(batch.obs, dtype=wm.dtype)
    recon = wm.decoder(features)
    beta = cfg.objective.recon_beta
    terms = {
        "recon": image_log_likelihood(recon, target),
        "reward": reward_objective(wm.reward_head(features).squeeze(-1), rewards),
        "kl": -beta * balanced_kl(posterior, prior, cfg.objective.kl_ratio).mean(),
    }
    breakdown = LossBreakdown(terms, beta, aux={
        "kl_value": float(terms["kl"].detach() / -beta) if beta else 0.0,
    })
    return ObjectiveOutput(breakdown, flatten_states(pairs), features)


OBJECTIVES = {
    "contrastive": contrastive_objective,
    "reconstruction": reconstruction_objective,
}

# Term names used by the gradient-alignment diagnostic: the representation
# term and the dynamics (KL) term of each variant.
VARIANT_TERMS = {
    "contrastive": ("simsiam", "tvd"),
    "reconstruction": ("recon", "kl"),
}
