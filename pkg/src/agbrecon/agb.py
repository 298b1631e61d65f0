"""Adaptive Gradient Balancing for a WGAN critic plus a pixel-wise loss.

The generator minimizes ``-(1/beta) mean D(m_z, G(K_u)) + mean MSE``; the
critic maximizes ``(1/beta)(mean D(real) - mean D(fake))`` under weight
clipping. ``beta`` grows whenever the moving SD of the WGAN pixel gradients
exceeds ``ratio`` times the moving SD of the MSE pixel gradients.

Any generator ``G(k_u, maps, mask) -> image`` and critic
``D(m_z, x) -> (B,) scores`` pair works here.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .critic import clip_weights
from .errors import ConfigError, DimensionError, InvalidStateError, NonFiniteError

MODES = ("cwgan-agb", "cwgan-fixed", "wgan", "mse-only")
LOG_FIELDS = ("step", "wgan_loss", "mse_loss", "gen_total", "critic_loss", "beta", "g_ma", "p_ma", "wall_ms")


@dataclass(frozen=True)
class AGBConfig:
    lr: float = 5e-4
    beta_init: float = 10.0
    clip: float = 0.01
    ma_decay: float = 0.99
    ratio: float = 10.0
    rate: float = 0.01
    n_discriminator: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 4
    max_epochs: int = 600
    seed: int = 0
    eps: float = 1e-12

    def __post_init__(self):
        if not 0 < self.ma_decay < 1:
            raise ConfigError("ma_decay must lie in (0, 1)")
        if self.ratio <= 0:
            raise ConfigError("ratio must be positive")
        if not 0 < self.rate < 1:
            raise ConfigError("rate must lie in (0, 1)")
        if self.beta_init <= 0:
            raise ConfigError("beta_init must be positive")
        if self.clip <= 0:
            raise ConfigError("clip must be positive")
        if self.n_discriminator < 1:
            raise ConfigError("n_discriminator must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")


@dataclass
class AGBState:
    beta: float = 10.0
    g_ma: float = 0.0
    p_ma: float = 0.0
    step: int = 0
    n_increases: int = 0

    @classmethod
    def initial(cls, cfg: AGBConfig) -> "AGBState":
        return cls(beta=cfg.beta_init)


@dataclass
class LossReport:
    step: int
    wgan_loss: float
    mse_loss: float
    gen_total: float
    critic_loss: float
    beta: float
    g_ma: float
    p_ma: float
    wall_ms: float = 0.0

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, k))) for k in LOG_FIELDS[1:]]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def mse_loss(m_f: torch.Tensor, m_g: torch.Tensor) -> torch.Tensor:
    """Mean of ``|m_f - m_g|^2`` over pixels (and over the batch, if any)."""
    if m_f.shape != m_g.shape:
        raise DimensionError(f"shape mismatch {tuple(m_f.shape)} vs {tuple(m_g.shape)}")
    diff = m_f - m_g
    if diff.is_complex():
        return (diff.real**2 + diff.imag**2).mean()
    return (diff**2).mean()


def wgan_losses(scores_real: torch.Tensor, scores_fake: torch.Tensor, beta: float):
    """Return ``(critic_objective, generator_wgan_term)``, both scaled by ``1/beta``.

    The critic ascends the objective; the generator descends its term.
    """
    if beta <= 0:
        raise InvalidStateError(f"beta must be positive, got {beta}")
    if scores_real.shape != scores_fake.shape:
        raise DimensionError("real and fake score batches differ in length")
    m = scores_fake.shape[0]
    critic_obj = (scores_real.sum() - scores_fake.sum()) / (m * beta)
    gen_term = -scores_fake.sum() / (m * beta)
    return critic_obj, gen_term


def gradient_sd(g: torch.Tensor) -> float:
    """Population SD over all scalar entries; complex real/imag parts are pooled."""
    if g.numel() == 0:
        raise ValueError("SD of an empty array")
    if g.is_complex():
        g = torch.view_as_real(g)
    return float(g.double().std(correction=0))


def update_balance(state: AGBState, cfg: AGBConfig) -> AGBState:
    """Grow beta by ``(1 + rate)`` and shrink ``g_ma`` by ``(1 - rate)`` if WGAN gradients dominate."""
    if state.g_ma > (state.p_ma + cfg.eps) * cfg.ratio:
        return dataclasses.replace(
            state,
            beta=state.beta * (1 + cfg.rate),
            g_ma=state.g_ma * (1 - cfg.rate),
            n_increases=state.n_increases + 1,
        )
    return state


def balance_holds(state: AGBState, cfg: AGBConfig) -> bool:
    return state.g_ma <= (state.p_ma + cfg.eps) * cfg.ratio


def moving_average(previous: float, value: float, decay: float) -> float:
    return previous * decay + (1 - decay) * value


def _finite(*values) -> bool:
    return all(math.isfinite(float(v.detach()) if isinstance(v, torch.Tensor) else float(v)) for v in values)


class AGBTrainer:
    """Owns generator/critic weights, both Adam optimizers and the balance state.

    ``mode`` selects the regime:

    * ``cwgan-agb``: conditional critic, adaptive beta
    * ``cwgan-fixed``: conditional critic, WGAN term divided by constant ``fixed_weight``
    * ``wgan``: unconditional critic (scores the candidate alone), constant weight
    * ``mse-only``: no critic at all
    """

    def __init__(
        self,
        generator: nn.Module,
        critic: nn.Module | None,
        cfg: AGBConfig = AGBConfig(),
        mode: str = "cwgan-agb",
        fixed_weight: float = 100.0,
        diagnostics_dir=None,
        record_wall_time: bool = False,
    ):
        if mode not in MODES:
            raise ConfigError(f"unknown mode '{mode}', expected one of {MODES}")
        if mode != "mse-only" and critic is None:
            raise ConfigError(f"mode '{mode}' needs a critic")
        if fixed_weight <= 0:
            raise ConfigError("fixed_weight must be positive")
        self.generator = generator
        self.critic = critic if mode != "mse-only" else None
        self.cfg = cfg
        self.mode = mode
        self.fixed_weight = fixed_weight
        self.diagnostics_dir = Path(diagnostics_dir) if diagnostics_dir else None
        self.record_wall_time = record_wall_time
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.gen_opt = torch.optim.Adam(generator.parameters(), lr=cfg.lr, betas=betas)
        self.critic_opt = (
            torch.optim.Adam(self.critic.parameters(), lr=cfg.lr, betas=betas, maximize=True)
            if self.critic is not None
            else None
        )
        self.state = AGBState.initial(cfg)
        if mode in ("cwgan-fixed", "wgan"):
            self.state.beta = float(fixed_weight)
        self.last_critic_loss = 0.0

    @property
    def adaptive(self) -> bool:
        return self.mode == "cwgan-agb"

    def _score(self, m_z, real, fake):
        """Score real and fake pairs in one critic pass (shared batch statistics)."""
        n = real.shape[0]
        cond = torch.cat([m_z, m_z]) if m_z is not None else None
        scores = self.critic(cond, torch.cat([real, fake]))
        return scores[:n], scores[n:]

    def _condition(self, batch):
        return batch.m_z if getattr(self.critic, "cfg", None) is None or self.critic.cfg.conditional else None

    def critic_step(self, batch) -> float:
        """One Adam ascent step on the beta-scaled critic objective, then clip."""
        with torch.no_grad():
            fake = self.generator(batch.k_u, batch.maps, batch.mask)
        self.critic.train()
        real_scores, fake_scores = self._score(self._condition(batch), batch.m_f.abs(), fake.abs())
        objective, _ = wgan_losses(real_scores, fake_scores, self.state.beta)
        if not _finite(objective):
            self._abort("critic objective is not finite", objective=objective.item())
        self.critic_opt.zero_grad(set_to_none=True)
        objective.backward()
        self.critic_opt.step()
        clip_weights(self.critic, self.cfg.clip)
        self.last_critic_loss = -objective.item()
        return objective.item()

    def generator_step(self, batch) -> LossReport:
        t0 = time.perf_counter()
        m_g = self.generator(batch.k_u, batch.maps, batch.mask)
        mse = mse_loss(batch.m_f, m_g)
        grad_mse = torch.autograd.grad(mse, m_g, retain_graph=True)[0]

        if self.critic is not None:
            self.critic.train()
            _, fake_scores = self._score(self._condition(batch), batch.m_f.abs(), m_g.abs())
            _, wgan_term = wgan_losses(fake_scores, fake_scores, self.state.beta)
            grad_gan = torch.autograd.grad(wgan_term, m_g, retain_graph=True)[0]
        else:
            wgan_term = torch.zeros((), dtype=mse.dtype)
            grad_gan = torch.zeros_like(m_g)

        total = wgan_term + mse
        if not _finite(total) or not torch.isfinite(torch.view_as_real(grad_gan + grad_mse)).all():
            self._abort("generator loss or pixel gradients are not finite", mse=mse.item(), wgan=wgan_term.item())

        self.gen_opt.zero_grad(set_to_none=True)
        # total depends on theta only through m_g, so backprop the summed pixel gradient
        m_g.backward(grad_gan + grad_mse)
        self.gen_opt.step()

        state = self.state
        if self.critic is not None:
            # per-sample gradients of batch-mean losses sum to the batch-mean gradient
            sd_gan = gradient_sd(grad_gan.sum(dim=0))
            sd_mse = gradient_sd(grad_mse.sum(dim=0))
            state.g_ma = moving_average(state.g_ma, sd_gan, self.cfg.ma_decay)
            state.p_ma = moving_average(state.p_ma, sd_mse, self.cfg.ma_decay)
            if self.adaptive:
                state = update_balance(state, self.cfg)
        state.step += 1
        self.state = state

        wall = (time.perf_counter() - t0) * 1000.0 if self.record_wall_time else 0.0
        report = LossReport(
            step=state.step,
            wgan_loss=wgan_term.item(),
            mse_loss=mse.item(),
            gen_total=total.item(),
            critic_loss=self.last_critic_loss,
            beta=state.beta,
            g_ma=state.g_ma,
            p_ma=state.p_ma,
            wall_ms=wall,
        )
        if not _finite(report.beta, report.g_ma, report.p_ma):
            self._abort("balance state is not finite", **report.to_dict())
        return report

    def _abort(self, message: str, **details):
        path = None
        if self.diagnostics_dir is not None:
            self.diagnostics_dir.mkdir(parents=True, exist_ok=True)
            path = self.diagnostics_dir / f"diagnostics_step{self.state.step}.json"
            payload = {"message": message, "mode": self.mode, "state": dataclasses.asdict(self.state), **details}
            path.write_text(json.dumps(payload, indent=2, default=str))
        raise NonFiniteError(f"{message} (step {self.state.step})", diagnostics_path=path)

    # -- serialization ----------------------------------------------------

    def state_dict(self) -> dict:
        out = {
            "generator": self.generator.state_dict(),
            "gen_opt": self.gen_opt.state_dict(),
            "agb_state": dataclasses.asdict(self.state),
            "last_critic_loss": self.last_critic_loss,
        }
        if self.critic is not None:
            out["critic"] = self.critic.state_dict()
            out["critic_opt"] = self.critic_opt.state_dict()
        return out

    def load_state_dict(self, sd: dict) -> None:
        self.generator.load_state_dict(sd["generator"])
        self.gen_opt.load_state_dict(sd["gen_opt"])
        self.state = AGBState(**sd["agb_state"])
        self.last_critic_loss = sd.get("last_critic_loss", 0.0)
        if self.critic is not None:
            self.critic.load_state_dict(sd["critic"])
            self.critic_opt.load_state_dict(sd["critic_opt"])
