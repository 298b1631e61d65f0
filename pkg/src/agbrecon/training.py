"""Outer training loop: batch stream, validation, checkpoints and resume."""

from __future__ import annotations

import csv
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .agb import LOG_FIELDS, AGBConfig, AGBTrainer, LossReport
from .critic import CriticConfig, PatchCritic, clip_weights
from .data import Batch, KSpaceSample, iterate_batches, read_split
from .dcinet import DCIConfig, init_params
from .errors import ConfigError, ResumeMismatchError
from .metrics import DeskExtractor, FeatureExtractor, fid_between_image_sets, mean_nmse

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("epoch", "split", "nmse_mean", "fid")


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


class BatchStream:
    """Endless, resumable stream of augmented training batches.

    Epoch ``e`` is a fresh permutation seeded by ``(seed, e)``; the position
    ``(epoch, index)`` is all that is needed to resume it exactly.
    """

    def __init__(self, samples, batch_size, seed, augment=True, workers=1, dtype=torch.complex64):
        if len(samples) < batch_size:
            raise ConfigError(f"training split has {len(samples)} samples, fewer than batch size {batch_size}")
        self.samples = samples
        self.batch_size = batch_size
        self.seed = seed
        self.augment = augment
        self.workers = workers
        self.dtype = dtype
        self.epoch = 0
        self.index = 0
        self._it = None

    @property
    def batches_per_epoch(self) -> int:
        return len(self.samples) // self.batch_size

    def _open(self):
        it = iterate_batches(
            self.samples,
            self.batch_size,
            shuffle_seed=epoch_seed(self.seed, self.epoch),
            augment=self.augment,
            drop_last=True,
            workers=self.workers,
            dtype=self.dtype,
        )
        for _ in range(self.index):
            next(it)
        return it

    def next(self) -> tuple[Batch, bool]:
        """Next batch and whether it was the last one of its epoch."""
        if self._it is None:
            self._it = self._open()
        batch = next(self._it)
        self.index += 1
        finished = self.index >= self.batches_per_epoch
        if finished:
            self.epoch += 1
            self.index = 0
            self._it = None
        return batch, finished

    def position(self) -> dict:
        return {"epoch": self.epoch, "index": self.index}

    def seek(self, epoch: int, index: int) -> None:
        self.epoch, self.index, self._it = epoch, index, None


@torch.no_grad()
def reconstruct(generator, samples: Sequence[KSpaceSample], batch_size=8, dtype=torch.complex64):
    """Run the generator over samples; returns ``(m_g, m_z, m_f)`` numpy stacks."""
    generator.eval()
    outs, zfs, refs = [], [], []
    for batch in iterate_batches(samples, batch_size, shuffle_seed=None, dtype=dtype):
        outs.append(generator(batch.k_u, batch.maps, batch.mask).numpy())
        zfs.append(batch.m_z.numpy())
        refs.append(batch.m_f.numpy())
    generator.train()
    return np.concatenate(outs), np.concatenate(zfs), np.concatenate(refs)


def evaluate_split(generator, samples, extractor: FeatureExtractor | None = None, dtype=torch.complex64) -> dict:
    """Mean NMSE and FID of reconstructions (and zero-fill) against ground truth."""
    extractor = extractor or DeskExtractor()
    m_g, m_z, m_f = reconstruct(generator, samples, dtype=dtype)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fid_g = fid_between_image_sets(m_f, m_g, extractor) if len(samples) >= 2 else float("nan")
        fid_z = fid_between_image_sets(m_f, m_z, extractor) if len(samples) >= 2 else float("nan")
    return {
        "nmse_mean": mean_nmse(m_g, m_f),
        "fid": fid_g,
        "zf_nmse_mean": mean_nmse(m_z, m_f),
        "zf_fid": fid_z,
    }


@dataclass
class TrainResult:
    trainer: AGBTrainer
    reports: list[LossReport] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def build_models(gen_cfg: DCIConfig, critic_cfg: CriticConfig, image_shape, mode: str, seed: int, dtype=torch.float32):
    torch.manual_seed(seed)
    generator = init_params(gen_cfg, seed=seed, dtype=dtype)
    critic = None
    if mode != "mse-only":
        if mode == "wgan":
            critic_cfg = CriticConfig(**{**critic_cfg.__dict__, "in_channels": 1})
        critic = PatchCritic(image_shape, critic_cfg).to(dtype)
        # clipped from the start so the Lipschitz constraint holds on step 0
        clip_weights(critic, critic_cfg.clip_value)
    return generator, critic


def save_checkpoint(path, trainer: AGBTrainer, stream: BatchStream, config_hash: str, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "mode": trainer.mode,
        "trainer": trainer.state_dict(),
        "generator_arrays": {k: v.detach().clone() for k, v in trainer.generator.named_arrays().items()}
        if hasattr(trainer.generator, "named_arrays")
        else {},
        "critic_arrays": {k: v.detach().clone() for k, v in trainer.critic.named_arrays().items()}
        if trainer.critic is not None and hasattr(trainer.critic, "named_arrays")
        else {},
        "stream": stream.position(),
        "step": trainer.state.step,
        **(extra or {}),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def _truncate_log(log_path: Path, last_step: int) -> None:
    if not log_path.exists():
        return
    with log_path.open(newline="") as f:
        rows = list(csv.reader(f))
    kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= last_step] if rows else []
    with log_path.open("w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(kept)


def _truncate_metrics(path: Path, last_epoch: int) -> None:
    if not path.exists():
        return
    with path.open(newline="") as f:
        rows = list(csv.reader(f))
    kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= last_epoch] if rows else []
    with path.open("w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(kept)


def train(
    dataset,
    gen_cfg: DCIConfig,
    critic_cfg: CriticConfig,
    agb_cfg: AGBConfig,
    mode: str = "cwgan-agb",
    *,
    fixed_weight: float = 100.0,
    max_steps: int | None = None,
    out_dir=None,
    checkpoint_every: int = 0,
    resume: bool = False,
    config_hash: str = "",
    augment: bool = True,
    validate: bool = True,
    extractor: FeatureExtractor | None = None,
    callbacks: Iterable[Callable[[LossReport], None]] = (),
    epoch_callbacks: Iterable[Callable[[int, dict], None]] = (),
    workers: int = 1,
    record_wall_time: bool = False,
    dtype=torch.float32,
) -> TrainResult:
    """Run alternating critic/generator updates until a step or epoch budget is hit.

    ``dataset`` is a container path or a dict ``{"train": [...], "val": [...]}``
    of in-memory samples. With ``out_dir`` the loss log (``losses.csv``),
    validation metrics (``metrics.csv``) and ``checkpoint.pt`` are written
    there; ``resume`` continues from that checkpoint.
    """
    if isinstance(dataset, dict):
        train_samples, val_samples = dataset["train"], dataset.get("val", [])
    else:
        train_samples, val_samples = read_split(dataset, "train"), read_split(dataset, "val")
    if not train_samples:
        raise ConfigError("empty training split")
    cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
    image_shape = train_samples[0].m_f.shape

    generator, critic = build_models(gen_cfg, critic_cfg, image_shape, mode, agb_cfg.seed, dtype)
    out_dir = Path(out_dir) if out_dir else None
    trainer = AGBTrainer(
        generator,
        critic,
        agb_cfg,
        mode=mode,
        fixed_weight=fixed_weight,
        diagnostics_dir=out_dir / "diagnostics" if out_dir else None,
        record_wall_time=record_wall_time,
    )
    stream = BatchStream(train_samples, agb_cfg.batch_size, agb_cfg.seed, augment, workers, cdtype)
    extractor = extractor or DeskExtractor()

    log_path = out_dir / "losses.csv" if out_dir else None
    metrics_path = out_dir / "metrics.csv" if out_dir else None
    ckpt_path = out_dir / "checkpoint.pt" if out_dir else None
    result = TrainResult(trainer=trainer, checkpoint=ckpt_path)

    if resume:
        if ckpt_path is None or not ckpt_path.exists():
            raise ConfigError("resume requested but no checkpoint found")
        ckpt = load_checkpoint(ckpt_path)
        if ckpt.get("config_hash") != config_hash:
            raise ResumeMismatchError(
                f"checkpoint config hash {ckpt.get('config_hash')!r} != current {config_hash!r}"
            )
        trainer.load_state_dict(ckpt["trainer"])
        stream.seek(**ckpt["stream"])
        _truncate_log(log_path, trainer.state.step)
        _truncate_metrics(metrics_path, ckpt["stream"]["epoch"])
    elif out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        for p in (log_path, metrics_path):
            p.unlink(missing_ok=True)

    log_file = metrics_file = None
    if out_dir:
        new_log = not log_path.exists()
        log_file = log_path.open("a", newline="")
        log_writer = csv.writer(log_file, lineterminator="\n")
        if new_log:
            log_writer.writerow(LOG_FIELDS)
        new_metrics = not metrics_path.exists()
        metrics_file = metrics_path.open("a", newline="")
        metrics_writer = csv.writer(metrics_file, lineterminator="\n")
        if new_metrics:
            metrics_writer.writerow(METRIC_FIELDS)

    def end_epoch(epoch_done: int):
        if not (validate and val_samples):
            return
        metrics = evaluate_split(generator, val_samples, extractor, dtype=cdtype)
        metrics = {"epoch": epoch_done, "split": "val", **metrics}
        result.metrics.append(metrics)
        if metrics_file:
            metrics_writer.writerow([epoch_done, "val", repr(metrics["nmse_mean"]), repr(metrics["fid"])])
            metrics_file.flush()
        for cb in epoch_callbacks:
            cb(epoch_done, metrics)

    try:
        while True:
            if max_steps is not None and trainer.state.step >= max_steps:
                break
            if stream.epoch >= agb_cfg.max_epochs:
                break
            if trainer.critic is not None:
                for _ in range(agb_cfg.n_discriminator):
                    batch, done = stream.next()
                    trainer.critic_step(batch)
                    if done:
                        end_epoch(stream.epoch)
            batch, done = stream.next()
            report = trainer.generator_step(batch)
            result.reports.append(report)
            if log_file:
                log_writer.writerow(report.row())
            for cb in callbacks:
                cb(report)
            if done:
                end_epoch(stream.epoch)
            if ckpt_path and checkpoint_every and trainer.state.step % checkpoint_every == 0:
                log_file.flush()
                save_checkpoint(ckpt_path, trainer, stream, config_hash)
    finally:
        if log_file:
            log_file.close()
        if metrics_file:
            metrics_file.close()
    if ckpt_path:
        save_checkpoint(ckpt_path, trainer, stream, config_hash)
    return result
