"""Recurrent state-space model: prior/posterior transitions and KL machinery.

The latent state pairs a deterministic recurrent vector (GRU hidden) with a
stochastic diagonal-Gaussian sample. The prior predicts the next stochastic
state from the recurrent path alone; the posterior additionally conditions on
the frame embedding. Sampling is reparameterized throughout so gradients
reach the distribution parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nets import mlp


@dataclass(frozen=True)
class DiagGaussian:
    """Diagonal Gaussian given by mean and (strictly positive) std."""

    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValueError(f"mean/std shape mismatch: {tuple(self.mean.shape)} vs {tuple(self.std.shape)}")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, generator: Optional[torch.Generator] = None,
               noise: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Reparameterized draw: mean + std * eps, so d(sample)/d(mean) = 1."""
        if noise is None:
            noise = torch.randn(self.mean.shape, generator=generator,
                                dtype=self.mean.dtype, device=self.mean.device)
        return self.mean + self.std * noise

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        var = self.std.square()
        return (-0.5 * ((x - self.mean).square() / var + var.log() + _LOG_2PI)).sum(-1)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.std.detach())


_LOG_2PI = 1.8378770664093453  # ln(2*pi)


@dataclass(frozen=True)
class LatentState:
    """Deterministic recurrent vector plus a stochastic sample and its source."""

    deter: torch.Tensor
    stoch: torch.Tensor
    dist: DiagGaussian

    def __post_init__(self):
        if self.stoch.shape[-1] != self.dist.dim:
            raise ValueError("stoch dimension does not match its distribution")

    @property
    def feature(self) -> torch.Tensor:
        return torch.cat([self.deter, self.stoch], dim=-1)

    def detach(self) -> "LatentState":
        return LatentState(self.deter.detach(), self.stoch.detach(), self.dist.detach())


@dataclass(frozen=True)
class PriorPosteriorPair:
    prior: DiagGaussian
    posterior: DiagGaussian
    state: LatentState  # state.dist is the posterior


@dataclass(frozen=True)
class ImaginedTrajectory:
    """Prior-only rollout driven by a policy: H+1 states, H actions."""

    states: list[LatentState]
    actions: torch.Tensor  # [H, N, action_dim]

    @property
    def features(self) -> torch.Tensor:  # [H+1, N, deter+stoch]
        return torch.stack([s.feature for s in self.states])


class RSSM(nn.Module):
    def __init__(self, action_dim: int, embed_dim: int, deter_dim: int = 200,
                 stoch_dim: int = 30, hidden: int = 200, min_std: float = 0.1):
        super().__init__()
        self.action_dim = action_dim
        self.embed_dim = embed_dim
        self.deter_dim = deter_dim
        self.stoch_dim = stoch_dim
        self.min_std = min_std
        self.feature_dim = deter_dim + stoch_dim
        self._inp = nn.Linear(stoch_dim + action_dim, hidden)
        self._cell = nn.GRUCell(hidden, deter_dim)
        self._prior_head = mlp(deter_dim, hidden, 2 * stoch_dim, hidden_layers=1)
        self._post_head = mlp(deter_dim + embed_dim, hidden, 2 * stoch_dim, hidden_layers=1)

    def _stats(self, raw: torch.Tensor) -> DiagGaussian:
        mean, raw_std = raw.chunk(2, dim=-1)
        return DiagGaussian(mean, F.softplus(raw_std) + self.min_std)

    def _param(self) -> torch.Tensor:
        return next(self.parameters())

    def initial_state(self, batch: int) -> LatentState:
        if batch < 1:
            raise ValueError(f"batch must be >= 1, got {batch}")
        p = self._param()
        zeros = lambda d: torch.zeros(batch, d, dtype=p.dtype, device=p.device)
        dist = DiagGaussian(zeros(self.stoch_dim), torch.full(
            (batch, self.stoch_dim), self.min_std, dtype=p.dtype, device=p.device))
        return LatentState(zeros(self.deter_dim), zeros(self.stoch_dim), dist)

    def _deter_step(self, prev: LatentState, action: torch.Tensor) -> torch.Tensor:
        if action.shape[-1] != self.action_dim:
            raise ValueError(f"expected action dim {self.action_dim}, got {action.shape[-1]}")
        x = F.elu(self._inp(torch.cat([prev.stoch, action], dim=-1)))
        return self._cell(x, prev.deter)

    def prior_step(self, prev: LatentState, action: torch.Tensor,
                   generator: Optional[torch.Generator] = None,
                   noise: Optional[torch.Tensor] = None) -> tuple[DiagGaussian, LatentState]:
        deter = self._deter_step(prev, action)
        prior = self._stats(self._prior_head(deter))
        stoch = prior.sample(generator, noise)
        return prior, LatentState(deter, stoch, prior)

    def posterior_step(self, prev: LatentState, action: torch.Tensor, embed: torch.Tensor,
                       generator: Optional[torch.Generator] = None,
                       noise: Optional[torch.Tensor] = None) -> PriorPosteriorPair:
        if embed.shape[-1] != self.embed_dim:
            raise ValueError(f"expected embed dim {self.embed_dim}, got {embed.shape[-1]}")
        deter = self._deter_step(prev, action)
        prior = self._stats(self._prior_head(deter))
        posterior = self._stats(self._post_head(torch.cat([deter, embed], dim=-1)))
        stoch = posterior.sample(generator, noise)
        return PriorPosteriorPair(prior, posterior, LatentState(deter, stoch, posterior))

    def rollout_posterior(self, init: LatentState, actions: torch.Tensor, embeds: torch.Tensor,
                          generator: Optional[torch.Generator] = None) -> list[PriorPosteriorPair]:
        """Thread posterior steps over time; actions and embeds are [B, T, ...]."""
        if actions.shape[1] != embeds.shape[1]:
            raise ValueError(f"actions T={actions.shape[1]} but embeds T={embeds.shape[1]}")
        if actions.shape[1] < 1:
            raise ValueError("need T >= 1")
        pairs = []
        state = init
        for t in range(actions.shape[1]):
            pair = self.posterior_step(state, actions[:, t], embeds[:, t], generator)
            pairs.append(pair)
            state = pair.state
        return pairs

    def rollout_imagine(self, init: LatentState, actor: Callable[[torch.Tensor], torch.Tensor],
                        horizon: int,
                        generator: Optional[torch.Generator] = None) -> ImaginedTrajectory:
        """Roll the prior for `horizon` steps with actions drawn from `actor`.

        The initial state is detached: policy gradients flow through the
        imagined transitions but never into the states that seeded them.
        """
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        state = init.detach()
        states = [state]
        actions = []
        for _ in range(horizon):
            action = actor(state.feature)
            _, state = self.prior_step(state, action, generator)
            states.append(state)
            actions.append(action)
        return ImaginedTrajectory(states, torch.stack(actions))


def stack_pairs(pairs: list[PriorPosteriorPair]) -> tuple[DiagGaussian, DiagGaussian, torch.Tensor]:
    """[T] pairs of [B, ...] -> (prior, posterior) with [B, T, d] stats and [B, T, F] features."""
    prior = DiagGaussian(torch.stack([p.prior.mean for p in pairs], dim=1),
                         torch.stack([p.prior.std for p in pairs], dim=1))
    post = DiagGaussian(torch.stack([p.posterior.mean for p in pairs], dim=1),
                        torch.stack([p.posterior.std for p in pairs], dim=1))
    features = torch.stack([p.state.feature for p in pairs], dim=1)
    return prior, post, features


def flatten_states(pairs: list[PriorPosteriorPair]) -> LatentState:
    """Merge the [T] posterior states of a [B]-batch rollout into one [B*T] state."""
    deter = torch.cat([p.state.deter for p in pairs])
    stoch = torch.cat([p.state.stoch for p in pairs])
    dist = DiagGaussian(torch.cat([p.state.dist.mean for p in pairs]),
                        torch.cat([p.state.dist.std for p in pairs]))
    return LatentState(deter, stoch, dist)


def kl_diag_gaussian(p: DiagGaussian, q: DiagGaussian) -> torch.Tensor:
    """Closed-form KL(p || q) for diagonal Gaussians, summed over dimensions (nats)."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    for d in (p, q):
        if not bool((d.std > 0).all()):
            raise ValueError("std must be strictly positive")
    var_ratio = (p.std / q.std).square()
    return 0.5 * ((var_ratio - 1 - var_ratio.log()) + ((p.mean - q.mean) / q.std).square()).sum(-1)


def balanced_kl(posterior: DiagGaussian, prior: DiagGaussian, ratio: float) -> torch.Tensor:
    """Stop-gradient-weighted KL split between prior and posterior training.

    With alpha = ratio / (ratio + 1), returns
        alpha * KL(sg(posterior) || prior) + (1 - alpha) * KL(posterior || sg(prior)).
    The numeric value equals the plain KL; only gradient routing differs.
    """
    if ratio <= 0:
        raise ValueError(f"ratio must be > 0, got {ratio}")
    alpha = ratio / (ratio + 1.0)
    return (alpha * kl_diag_gaussian(posterior.detach(), prior)
            + (1.0 - alpha) * kl_diag_gaussian(posterior, prior.detach()))
