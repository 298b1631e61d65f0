"""Densely connected unrolled reconstruction network (DCI-Net).

Each of the ``N`` iterations sees a stack of ``G + 1`` complex images: its
direct input (the previous output) followed by up to ``G`` earlier outputs,
padded with the zero-filled image when fewer exist. The block output is::

    out_k = x + reg_k(stack) - dc_k(x)

where ``dc_k`` is the lambda-weighted coil-combined k-space residual of ``x``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DimensionError
from .operators import adjoint_recon, apply_mask, forward_model, mask_tensor, zero_fill

CONVS_PER_UNIT = 3
KERNEL_SIZE = 5


@dataclass(frozen=True)
class DCIConfig:
    n_iterations: int = 20
    growth: int = 5
    kernels: int = 40
    leaky_slope: float = 0.1
    final_activation: bool = False

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ConfigError("n_iterations must be >= 1")
        if self.growth < 0:
            raise ConfigError("growth must be >= 0")
        if self.kernels < 1:
            raise ConfigError("kernels must be >= 1")

    @property
    def n_connections(self) -> int:
        return self.growth + 1

    def expected_param_count(self) -> int:
        c, g = self.kernels, self.growth
        per_iter = 25 * c * 2 * (g + 1) + c + 25 * c * c + c + 25 * 2 * c + 2 + 1
        return self.n_iterations * per_iter


def complex_to_channels(x: torch.Tensor) -> torch.Tensor:
    """``(B, K, H, W)`` complex -> ``(B, 2K, H, W)`` real, planes interleaved re/im."""
    b, k, h, w = x.shape
    return torch.view_as_real(x).permute(0, 1, 4, 2, 3).reshape(b, 2 * k, h, w)


def channels_to_complex(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`complex_to_channels`."""
    b, c, h, w = x.shape
    if c % 2:
        raise DimensionError(f"need an even number of real planes, got {c}")
    x = x.reshape(b, c // 2, 2, h, w).permute(0, 1, 3, 4, 2).contiguous()
    return torch.view_as_complex(x)


def data_consistency_unit(m, k_u, maps, mask, lam, check: bool = False):
    """Coil-combined undersampled k-space residual of ``m``, scaled by ``lam``.

    Shapes: ``m`` (B, H, W), ``k_u`` and ``maps`` (B, C, H, W), ``mask`` (B, W).
    With ``check`` the precondition ``mask * k_u == k_u`` is verified.
    """
    if check and not torch.allclose(apply_mask(k_u, mask), k_u):
        raise ContractError("k_u contains samples outside the mask")
    residual = forward_model(m, maps, mask) - k_u
    return adjoint_recon(residual, maps) * lam


class RegularizationUnit(nn.Module):
    """conv5x5 -> lrelu -> conv5x5 -> lrelu -> conv5x5 over the connection stack."""

    def __init__(self, n_connections: int, kernels: int, leaky_slope: float = 0.1, final_activation: bool = False):
        super().__init__()
        pad = KERNEL_SIZE // 2
        self.n_connections = n_connections
        self.conv1 = nn.Conv2d(2 * n_connections, kernels, KERNEL_SIZE, padding=pad)
        self.conv2 = nn.Conv2d(kernels, kernels, KERNEL_SIZE, padding=pad)
        self.conv3 = nn.Conv2d(kernels, 2, KERNEL_SIZE, padding=pad)
        self.leaky_slope = leaky_slope
        self.final_activation = final_activation

    def convs(self):
        return (self.conv1, self.conv2, self.conv3)

    def forward(self, connections: torch.Tensor) -> torch.Tensor:
        """``connections`` is complex ``(B, G+1, H, W)``; returns complex ``(B, H, W)``."""
        if connections.ndim != 4 or connections.shape[1] != self.n_connections:
            raise DimensionError(
                f"expected (B, {self.n_connections}, H, W) connections, got {tuple(connections.shape)}"
            )
        x = complex_to_channels(connections)
        x = F.leaky_relu(self.conv1(x), self.leaky_slope)
        x = F.leaky_relu(self.conv2(x), self.leaky_slope)
        x = self.conv3(x)
        if self.final_activation:
            x = F.leaky_relu(x, self.leaky_slope)
        return channels_to_complex(x)[:, 0]


def regularization_unit(connections: torch.Tensor, unit: RegularizationUnit) -> torch.Tensor:
    return unit(connections)


class DCIBlock(nn.Module):
    def __init__(self, cfg: DCIConfig):
        super().__init__()
        self.reg = RegularizationUnit(cfg.n_connections, cfg.kernels, cfg.leaky_slope, cfg.final_activation)
        self.lam = nn.Parameter(torch.tensor(1.0))

    def forward(self, connections, k_u, maps, mask, check=False):
        direct = connections[:, 0]
        dc = data_consistency_unit(direct, k_u, maps, mask, self.lam, check=check)
        return direct + self.reg(connections) - dc


class DCINet(nn.Module):
    """Unrolled generator mapping undersampled k-space to a complex image."""

    def __init__(self, cfg: DCIConfig = DCIConfig()):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(DCIBlock(cfg) for _ in range(cfg.n_iterations))

    def forward(self, k_u, maps, mask, return_all: bool = False, check: bool = False):
        mask = mask_tensor(mask, dtype=k_u.real.dtype, device=k_u.device)
        if mask.ndim == 1:
            mask = mask.expand(k_u.shape[0], -1)
        m_z = zero_fill(k_u, maps)
        history = [m_z] * self.cfg.n_connections
        outputs = []
        for block in self.blocks:
            out = block(torch.stack(history, dim=1), k_u, maps, mask, check=check)
            outputs.append(out)
            history = [out] + history[:-1]
        return outputs if return_all else outputs[-1]

    # -- checkpoint naming -------------------------------------------------

    def named_arrays(self) -> dict[str, torch.Tensor]:
        """Parameters keyed ``iter{k}/conv{j}/weight|bias`` and ``iter{k}/lambda``."""
        out = {}
        for k, block in enumerate(self.blocks):
            for j, conv in enumerate(block.reg.convs()):
                out[f"iter{k}/conv{j}/weight"] = conv.weight
                out[f"iter{k}/conv{j}/bias"] = conv.bias
            out[f"iter{k}/lambda"] = block.lam
        return out

    def load_arrays(self, arrays: Mapping[str, torch.Tensor]) -> None:
        own = self.named_arrays()
        if set(arrays) != set(own):
            missing = sorted(set(own) - set(arrays))[:3]
            extra = sorted(set(arrays) - set(own))[:3]
            raise ConfigError(f"generator parameters do not match config (missing {missing}, extra {extra})")
        with torch.no_grad():
            for name, param in own.items():
                value = torch.as_tensor(arrays[name])
                if value.shape != param.shape:
                    raise ConfigError(f"{name}: shape {tuple(value.shape)} != {tuple(param.shape)}")
                param.copy_(value)


def dci_forward(k_u, maps, mask, net: DCINet, cfg: DCIConfig | None = None):
    if cfg is not None and cfg != net.cfg:
        raise ConfigError("network was built for a different DCIConfig")
    return net(k_u, maps, mask)


def init_params(cfg: DCIConfig, seed: int = 0, dtype=torch.float32) -> DCINet:
    """Build a DCI-Net with fan-in scaled normal weights, zero biases, lambda = 1.

    The last conv of each unit is scaled down so the untrained network starts
    close to a plain data-consistency cascade.
    """
    gen = torch.Generator().manual_seed(seed)
    net = DCINet(cfg).to(dtype)
    with torch.no_grad():
        for block in net.blocks:
            for j, conv in enumerate(block.reg.convs()):
                fan_in = conv.in_channels * KERNEL_SIZE * KERNEL_SIZE
                std = np.sqrt(2.0 / fan_in) if j < CONVS_PER_UNIT - 1 else 0.1 / np.sqrt(fan_in)
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=dtype) * std)
                conv.bias.zero_()
            block.lam.fill_(1.0)
    return net


def count_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
