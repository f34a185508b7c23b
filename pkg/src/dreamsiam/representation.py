"""Visual representation learning: paired random-shift views, the negative-free
siamese objective with a stop-gradient target, and cross inverse dynamics.

The siamese term matches predictor(view1) against a frozen view2 embedding and
symmetrically predictor(view2) against frozen view1; it is an objective to be
maximized. Cross inverse dynamics predicts the action between consecutive
frames from embeddings of *different* views at the two times, which biases the
encoder toward the controllable content of the observation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .nets import ConvEncoder, preprocess


@dataclass(frozen=True)
class AugmentedViewPair:
    """Two shifted copies of an observation sequence; one shift per view,
    reused at every timestep of that view. Shifts are relative displacements
    in {-pad..pad}^2, so (0, 0) leaves the sequence unchanged."""

    view1: np.ndarray  # uint8 [..., T, H, W, C]
    view2: np.ndarray
    shift1: np.ndarray  # int displacement (dy, dx), [..., 2]
    shift2: np.ndarray


def apply_shift(obs: np.ndarray, shift: tuple[int, int], pad: int) -> np.ndarray:
    """Replicate-pad by `pad` px and crop back displaced by `shift` (all frames)."""
    dy, dx = int(shift[0]), int(shift[1])
    if abs(dy) > pad or abs(dx) > pad:
        raise ValueError(f"shift {shift} exceeds pad {pad}")
    h, w = obs.shape[-3], obs.shape[-2]
    pad_width = [(0, 0)] * (obs.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    padded = np.pad(obs, pad_width, mode="edge")
    return padded[..., pad + dy:pad + dy + h, pad + dx:pad + dx + w, :]


def random_shift_pair(obs: np.ndarray, rng: np.random.Generator, pad: int = 4) -> AugmentedViewPair:
    """Draw one shift per view, uniform over the (2*pad+1)^2 grid, and apply it
    to every frame; batched input [B, T, H, W, C] gets independent shifts per
    sequence. The input array is never modified."""
    if obs.ndim == 4:  # [T, H, W, C]
        off = rng.integers(-pad, pad + 1, size=(2, 2))
        return AugmentedViewPair(
            apply_shift(obs, tuple(off[0]), pad),
            apply_shift(obs, tuple(off[1]), pad),
            off[0].copy(), off[1].copy(),
        )
    if obs.ndim == 5:  # [B, T, H, W, C]
        off = rng.integers(-pad, pad + 1, size=(obs.shape[0], 2, 2))
        v1 = np.stack([apply_shift(obs[b], tuple(off[b, 0]), pad) for b in range(obs.shape[0])])
        v2 = np.stack([apply_shift(obs[b], tuple(off[b, 1]), pad) for b in range(obs.shape[0])])
        return AugmentedViewPair(v1, v2, off[:, 0].copy(), off[:, 1].copy())
    raise ValueError(f"expected [T,H,W,C] or [B,T,H,W,C], got shape {obs.shape}")


def encode_sequence(encoder: ConvEncoder, obs: np.ndarray | torch.Tensor,
                    dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 frames [..., H, W, C] -> embeddings [..., E]."""
    x = preprocess(obs, dtype=dtype)
    lead = x.shape[:-3]
    out = encoder(x.reshape(-1, *x.shape[-3:]))
    return out.reshape(*lead, -1)


def cosine_similarity(p: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """p.x / (|p| |x|) along the last dimension; rejects zero-norm inputs."""
    pn = p.norm(dim=-1)
    xn = x.norm(dim=-1)
    if not bool((pn > 0).all()) or not bool((xn > 0).all()):
        raise ValueError("cosine similarity undefined for zero-norm input")
    return (p * x).sum(-1) / (pn * xn)


def matched_similarity(predictor: nn.Module, source: torch.Tensor,
                       target: torch.Tensor) -> torch.Tensor:
    """Mean cosine similarity of predictor(source) against a frozen target."""
    return cosine_similarity(predictor(source), target.detach()).mean()


def simsiam_objective(view_embeds1: torch.Tensor, view_embeds2: torch.Tensor,
                      predictor: nn.Module) -> torch.Tensor:
    """Symmetrized negative-free similarity; maximized, value in [-1, 1].

    Each half matches the predictor output of one view against the other
    view's embedding treated as a constant, so no gradient ever reaches a
    frozen branch.
    """
    if view_embeds1.shape != view_embeds2.shape:
        raise ValueError(
            f"view shapes differ: {tuple(view_embeds1.shape)} vs {tuple(view_embeds2.shape)}")
    return 0.5 * (matched_similarity(predictor, view_embeds1, view_embeds2)
                  + matched_similarity(predictor, view_embeds2, view_embeds1))


class InverseDynamicsHead(nn.Module):
    """Action regressor on concatenated embeddings of consecutive frames."""

    def __init__(self, embed_dim: int, action_dim: int, hidden: int = 512, hidden_layers: int = 2):
        super().__init__()
        layers: list[nn.Module] = []
        d = 2 * embed_dim
        for _ in range(hidden_layers):
            layers += [nn.Linear(d, hidden), nn.ELU()]
            d = hidden
        layers.append(nn.Linear(d, action_dim))
        self.net = nn.Sequential(*layers)
        self.embed_dim = embed_dim

    def forward(self, embed_a: torch.Tensor, embed_b_next: torch.Tensor) -> torch.Tensor:
        if embed_a.shape[-1] != self.embed_dim or embed_b_next.shape[-1] != self.embed_dim:
            raise ValueError(
                f"expected embeddings of dim {self.embed_dim}, got "
                f"{embed_a.shape[-1]} and {embed_b_next.shape[-1]}")
        return self.net(torch.cat([embed_a, embed_b_next], dim=-1))


def inverse_dynamics_objective(view_embeds1: torch.Tensor, view_embeds2: torch.Tensor,
                               actions: torch.Tensor, head: InverseDynamicsHead) -> torch.Tensor:
    """Cross-view action recovery: -0.5 * (MSE_1 + MSE_2), maximized (<= 0).

    Embeddings are [..., T, E]; `actions` are the T-1 actions between
    consecutive frames. Prediction 1 uses (view1_t, view2_{t+1}), prediction 2
    uses (view2_t, view1_{t+1}).
    """
    if view_embeds1.shape[-2] < 2:
        raise ValueError("need at least two timesteps for inverse dynamics")
    a1 = head(view_embeds1[..., :-1, :], view_embeds2[..., 1:, :])
    a2 = head(view_embeds2[..., :-1, :], view_embeds1[..., 1:, :])
    mse1 = (a1 - actions).square().mean()
    mse2 = (a2 - actions).square().mean()
    return -0.5 * (mse1 + mse2)
