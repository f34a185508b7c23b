"""Network building blocks: MLPs, conv encoder/decoder, parameter freezing."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import torch
import torch.nn as nn


def mlp(in_dim: int, hidden: int, out_dim: int, hidden_layers: int, act=nn.ELU) -> nn.Sequential:
    """Dense stack with `hidden_layers` hidden layers and a linear output."""
    layers: list[nn.Module] = []
    d = in_dim
    for _ in range(hidden_layers):
        layers += [nn.Linear(d, hidden), act()]
        d = hidden
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


def conv_output_size(size: int, n_layers: int, kernel: int, stride: int = 2) -> int:
    for _ in range(n_layers):
        size = (size - kernel) // stride + 1
        if size < 1:
            raise ValueError(
                f"conv stack reduces spatial size below 1 (image too small for "
                f"{n_layers} layers of kernel {kernel}, stride {stride})"
            )
    return size


class ConvEncoder(nn.Module):
    """Strided conv stack with ReLU; flattens the final feature map.

    Input is a float tensor [N, C, H, W] already scaled to [-0.5, 0.5];
    `encode_pixels` below handles uint8 conversion and layout.
    """

    def __init__(self, channels=(32, 64, 128, 256), kernel: int = 4, image_size: int = 64,
                 in_channels: int = 3):
        super().__init__()
        self.image_size = image_size
        layers: list[nn.Module] = []
        cin = in_channels
        for c in channels:
            layers += [nn.Conv2d(cin, c, kernel, stride=2), nn.ReLU()]
            cin = c
        self.net = nn.Sequential(*layers)
        out = conv_output_size(image_size, len(channels), kernel)
        self.embed_dim = channels[-1] * out * out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.image_size or x.shape[-2] != self.image_size:
            raise ValueError(
                f"expected {self.image_size}x{self.image_size} frames, got {tuple(x.shape[-2:])}"
            )
        return self.net(x).flatten(1)


class ConvDecoder(nn.Module):
    """Transposed-conv mirror producing 64x64x3 frames in [-0.5, 0.5] space.

    The dense layer maps features to a 1x1 map of 32*c channels (c = first
    encoder channel count), followed by four transposed convs: 1->5->13->30->64.
    """

    def __init__(self, feature_dim: int, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.d0 = 32 * c
        self.dense = nn.Linear(feature_dim, self.d0)
        self.net = nn.Sequential(
            nn.ConvTranspose2d(self.d0, 4 * c, 5, stride=2), nn.ReLU(),
            nn.ConvTranspose2d(4 * c, 2 * c, 5, stride=2), nn.ReLU(),
            nn.ConvTranspose2d(2 * c, c, 6, stride=2), nn.ReLU(),
            nn.ConvTranspose2d(c, 3, 6, stride=2),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        lead = features.shape[:-1]
        x = self.dense(features.reshape(-1, features.shape[-1]))
        x = self.net(x.reshape(-1, self.d0, 1, 1))
        return x.reshape(*lead, 3, 64, 64)


class SimSiamPredictor(nn.Module):
    """Two dense layers without normalization; first activation is ReLU."""

    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def preprocess(obs: np.ndarray | torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 [..., H, W, C] -> float [..., C, H, W] scaled to [-0.5, 0.5]."""
    x = torch.as_tensor(np.asarray(obs)) if not isinstance(obs, torch.Tensor) else obs
    x = x.to(dtype) / 255.0 - 0.5
    return x.movedim(-1, -3)


def postprocess(x: torch.Tensor) -> np.ndarray:
    """float [..., C, H, W] in [-0.5, 0.5] space -> uint8 [..., H, W, C]."""
    x = ((x.movedim(-3, -1) + 0.5) * 255.0).clamp(0, 255)
    return x.detach().cpu().numpy().astype(np.uint8)


@contextmanager
def freeze_parameters(*modules: nn.Module):
    """Temporarily set requires_grad=False; values still flow, gradients stop."""
    params = [p for m in modules for p in m.parameters()]
    prev = [p.requires_grad for p in params]
    try:
        for p in params:
            p.requires_grad_(False)
        yield
    finally:
        for p, r in zip(params, prev):
            p.requires_grad_(r)


def global_grad_norm_clip(parameters, max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(
        [p for p in parameters if p.grad is not None], max_norm))
