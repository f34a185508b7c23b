"""Training diagnostics: gradient alignment between objective terms, and a
probe decoder trained on frozen latents.

The alignment meter differentiates the representation term and the dynamics
(KL) term of the active objective with respect to the conv encoder
parameters only, and reports their normalized inner product. Consistently
negative products mean the two terms pull the encoder in opposing
directions. The probe decoder visualizes what a trained representation
retains: it reconstructs pixels from detached features, so no gradient ever
reaches the model under inspection.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import Config
from .nets import ConvDecoder, postprocess, preprocess
from .objectives import OBJECTIVES, VARIANT_TERMS, WorldModel
from .toyenv import TrajectoryBatch


@dataclass(frozen=True)
class ConflictRecord:
    step: int
    inner_product: float  # in [-1, 1]

    def __post_init__(self):
        if abs(self.inner_product) > 1.0 + 1e-9:
            raise ValueError(f"normalized inner product out of range: {self.inner_product}")


def normalized_gradient_alignment(term_a: torch.Tensor, term_b: torch.Tensor,
                                  parameters: Sequence[torch.Tensor]) -> Optional[float]:
    """<g_a, g_b> / (|g_a| |g_b|) over the given parameters; None if either
    gradient vanishes. Uses autograd.grad, so `.grad` fields stay untouched."""
    params = [p for p in parameters if p.requires_grad]
    grads_a = torch.autograd.grad(term_a, params, retain_graph=True, allow_unused=True)
    grads_b = torch.autograd.grad(term_b, params, retain_graph=True, allow_unused=True)
    flat_a = torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1)
                        for g, p in zip(grads_a, params)])
    flat_b = torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1)
                        for g, p in zip(grads_b, params)])
    norm_a = flat_a.norm()
    norm_b = flat_b.norm()
    if float(norm_a) == 0.0 or float(norm_b) == 0.0:
        return None
    value = float(flat_a @ flat_b / (norm_a * norm_b))
    return max(-1.0, min(1.0, value))


def gradient_conflict_sample(wm: WorldModel, batch: TrajectoryBatch, variant: str,
                             step: int, cfg: Config,
                             generator: Optional[torch.Generator] = None,
                             aug_rng: Optional[np.random.Generator] = None,
                             ) -> Optional[ConflictRecord]:
    """Alignment of the representation-term and KL-term encoder gradients.

    Returns None for the (counted-by-caller) undefined case of a vanishing
    gradient. Model parameters are read, never written.
    """
    if variant not in VARIANT_TERMS:
        raise ValueError(f"unknown objective variant {variant!r}")
    repr_name, dyn_name = VARIANT_TERMS[variant]
    out = OBJECTIVES[variant](wm, batch, float(step), cfg, generator, aug_rng)
    terms = out.breakdown.terms
    for name in (repr_name, dyn_name):
        if name not in terms:
            raise ValueError(
                f"objective variant {variant!r} did not produce term {name!r} "
                f"(got {sorted(terms)}); required for the alignment diagnostic")
    value = normalized_gradient_alignment(terms[repr_name], terms[dyn_name],
                                          list(wm.encoder.parameters()))
    if value is None:
        return None
    return ConflictRecord(step, value)


def conflict_ratio(records: Sequence[ConflictRecord]) -> float:
    """Fraction of records with a positive inner product."""
    if not records:
        raise ValueError("conflict_ratio needs at least one record")
    return sum(1 for r in records if r.inner_product > 0) / len(records)


def parameter_digest(module: torch.nn.Module) -> str:
    """Hash of all parameter bytes; used to assert diagnostics do not mutate."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class ProbeResult:
    decoder: ConvDecoder
    losses: list[float]


def train_probe_decoder(wm: WorldModel, sample_batch: Callable[[], TrajectoryBatch],
                        steps: int, lr: float = 1e-3,
                        generator: Optional[torch.Generator] = None,
                        base_channels: Optional[int] = None) -> ProbeResult:
    """Fit a fresh decoder to frames from detached rollout features.

    The world model is used only under no_grad, so its parameters are
    bit-identical before and after.
    """
    decoder = ConvDecoder(wm.feature_dim, base_channels or wm.encoder.net[0].out_channels)
    decoder = decoder.to(wm.dtype)
    opt = torch.optim.Adam(decoder.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        batch = sample_batch()
        with torch.no_grad():
            embeds = wm.encode(batch.obs)
            actions = torch.as_tensor(batch.actions, dtype=wm.dtype)
            pairs = wm.observe(embeds, actions, generator)
            features = torch.stack([p.state.feature for p in pairs], dim=1)
            target = preprocess(batch.obs, dtype=wm.dtype)
        recon = decoder(features)
        loss = (recon - target).square().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return ProbeResult(decoder, losses)


def probe_decode(decoder: ConvDecoder, features: torch.Tensor) -> np.ndarray:
    """Decode features to uint8 frames [..., H, W, C]."""
    with torch.no_grad():
        return postprocess(decoder(features))


def masked_reconstruction_error(recon: np.ndarray, target: np.ndarray,
                                mask: np.ndarray) -> tuple[float, float]:
    """Mean squared pixel error inside and outside a boolean [H, W] mask."""
    diff = (recon.astype(np.float64) - target.astype(np.float64)) ** 2
    inside = float(diff[mask].mean())
    outside = float(diff[~mask].mean())
    return inside, outside
