"""Conditional PatchGAN-style Wasserstein critic."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, DimensionError

N_LAYERS = 4


@dataclass(frozen=True)
class CriticConfig:
    base_channels: int = 64
    kernel_size: int = 4
    leaky_slope: float = 0.2
    clip_value: float = 0.01
    in_channels: int = 2  # 2 = conditional (m_z, x); 1 = unconditional (x only)
    norm_first: bool = False

    def __post_init__(self):
        if self.in_channels not in (1, 2):
            raise ConfigError("in_channels must be 1 (unconditional) or 2 (conditional)")
        if self.clip_value <= 0:
            raise ConfigError("clip_value must be positive")
        if self.base_channels < 1 or self.kernel_size < 2:
            raise ConfigError("invalid critic sizing")

    @property
    def conditional(self) -> bool:
        return self.in_channels == 2

    def receptive_field(self) -> int:
        """Input window side length seen by one final-conv activation."""
        rf, jump = 1, 1
        for _ in range(N_LAYERS):
            rf += (self.kernel_size - 1) * jump
            jump *= 2
        return rf


class PatchCritic(nn.Module):
    """Four stride-2 convs (channels doubling from ``base_channels``) + linear head."""

    def __init__(self, image_shape: tuple[int, int], cfg: CriticConfig = CriticConfig()):
        super().__init__()
        H, W = image_shape
        if H % 2**N_LAYERS or W % 2**N_LAYERS:
            raise DimensionError(f"critic input {H}x{W} must be divisible by {2 ** N_LAYERS}")
        self.cfg = cfg
        self.image_shape = (H, W)
        pad = (cfg.kernel_size - 1) // 2
        layers = []
        c_in = cfg.in_channels
        for j in range(N_LAYERS):
            c_out = cfg.base_channels * 2**j
            block = [nn.Conv2d(c_in, c_out, cfg.kernel_size, stride=2, padding=pad)]
            if j > 0 or cfg.norm_first:
                block.append(nn.BatchNorm2d(c_out))
            block.append(nn.LeakyReLU(cfg.leaky_slope))
            layers.append(nn.Sequential(*block))
            c_in = c_out
        self.layers = nn.ModuleList(layers)
        self.head = nn.Linear(c_in * (H // 2**N_LAYERS) * (W // 2**N_LAYERS), 1)

    def features(self, inputs: torch.Tensor) -> torch.Tensor:
        x = inputs
        for layer in self.layers:
            x = layer(x)
        return x

    def pack(self, m_z: torch.Tensor | None, x: torch.Tensor) -> torch.Tensor:
        """Stack magnitude channels; complex inputs are reduced by modulus."""
        x = x.abs() if x.is_complex() else x
        if x.shape[-2:] != self.image_shape:
            raise DimensionError(f"critic built for {self.image_shape}, got {tuple(x.shape[-2:])}")
        if not self.cfg.conditional:
            return x.unsqueeze(1)
        if m_z is None:
            raise DimensionError("conditional critic needs the zero-filled image")
        m_z = m_z.abs() if m_z.is_complex() else m_z
        if m_z.shape != x.shape:
            raise DimensionError(f"condition {tuple(m_z.shape)} and candidate {tuple(x.shape)} differ")
        return torch.stack([m_z, x], dim=1)

    def forward(self, m_z, x) -> torch.Tensor:
        """One real score per batch element, shape ``(B,)``."""
        h = self.features(self.pack(m_z, x))
        return self.head(h.flatten(1)).squeeze(1)

    def named_arrays(self) -> dict[str, torch.Tensor]:
        """Parameters and BN buffers keyed ``critic/layer{j}/...``."""
        out = {}
        for j, layer in enumerate(self.layers):
            for name, t in layer.state_dict(keep_vars=True).items():
                idx, attr = name.split(".", 1)
                kind = "conv" if isinstance(layer[int(idx)], nn.Conv2d) else "bn"
                out[f"critic/layer{j}/{kind}/{attr}"] = t
        out["critic/head/weight"] = self.head.weight
        out["critic/head/bias"] = self.head.bias
        return out


def critic_forward(critic: PatchCritic, m_z, x, training: bool = True) -> torch.Tensor:
    """Score pairs with batch-norm in batch-statistics (``training``) or running mode."""
    critic.train(training)
    return critic(m_z, x)


@torch.no_grad()
def clip_weights(critic: nn.Module, c: float) -> nn.Module:
    """Clamp every trainable parameter to ``[-c, c]`` in place.

    Batch-norm running statistics are buffers, not parameters, and are left alone.
    """
    if c <= 0:
        raise ConfigError("clip value must be positive")
    for p in critic.parameters():
        p.clamp_(-c, c)
    return critic
