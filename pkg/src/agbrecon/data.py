"""Dataset container, ingestion and augmented batch streams.

Container layout (HDF5)::

    /                    attrs: manifest fields, format_version, created_utc
    /train/<id>/k_full   complex64 (C, H, W)
    /train/<id>/maps     complex64 (C, H, W)
    /train/<id>/mask     uint8 (W,)      attrs: R, n_center, seed
    /val/...  /test/...
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import h5py
import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigError, PersistError, SplitNotFoundError
from .operators import SamplingMask, adjoint_recon, apply_mask, fft2c, make_mask, zero_fill
from .phantom import gen_phantom, gen_sensitivity_maps

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
MAX_ROTATION_DEG = 20.0


@dataclass(frozen=True)
class DatasetManifest:
    train: int = 8
    val: int = 2
    test: int = 2
    H: int = 64
    W: int = 64
    n_coils: int = 4
    R: float = 4.0
    n_center: int = 12
    density_exponent: float = 3.0
    seed: int = 0
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        for split in SPLITS:
            if getattr(self, split) < 1:
                raise ConfigError(f"split '{split}' must hold at least one sample")
        if self.H < 32 or self.W < 32 or self.H % 2 or self.W % 2:
            raise ConfigError(f"H, W must be even and >= 32, got {self.H}x{self.W}")
        if self.n_coils < 1:
            raise ConfigError("n_coils must be >= 1")
        if self.R < 1:
            raise ConfigError("R must be >= 1")
        if int(np.floor(self.W / self.R + 0.5)) < self.n_center:
            raise ConfigError("line budget round(W/R) is smaller than n_center")

    def counts(self) -> dict[str, int]:
        return {split: getattr(self, split) for split in SPLITS}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class KSpaceSample:
    """One fully sampled multi-coil slice plus its undersampling mask.

    ``m_f`` and ``m_z`` are derived from the stored arrays.
    """

    id: str
    k_full: np.ndarray
    maps: np.ndarray
    mask: SamplingMask
    m_f: np.ndarray = field(repr=False)
    m_z: np.ndarray = field(repr=False)

    @classmethod
    def from_arrays(cls, id, k_full, maps, mask: SamplingMask) -> "KSpaceSample":
        m_f, m_z = derive_images(k_full, maps, mask)
        return cls(id=id, k_full=k_full, maps=maps, mask=mask, m_f=m_f, m_z=m_z)

    @property
    def k_u(self) -> np.ndarray:
        return self.k_full * self.mask.columns[None, None, :].astype(self.k_full.real.dtype)


def derive_images(k_full: np.ndarray, maps: np.ndarray, mask: SamplingMask):
    k = torch.from_numpy(np.ascontiguousarray(k_full))
    s = torch.from_numpy(np.ascontiguousarray(maps))
    m_f = adjoint_recon(k, s)
    m_z = zero_fill(apply_mask(k, mask), s)
    return m_f.numpy(), m_z.numpy()


@dataclass
class Batch:
    """Stacked tensors for a minibatch of samples."""

    ids: list[str]
    k_u: torch.Tensor  # (B, C, H, W) complex
    maps: torch.Tensor  # (B, C, H, W) complex
    mask: torch.Tensor  # (B, W) real
    m_z: torch.Tensor  # (B, H, W) complex
    m_f: torch.Tensor  # (B, H, W) complex

    @classmethod
    def from_samples(cls, samples: Sequence[KSpaceSample], dtype=torch.complex64) -> "Batch":
        real = torch.float64 if dtype == torch.complex128 else torch.float32

        def stack(name):
            return torch.from_numpy(np.stack([getattr(s, name) for s in samples])).to(dtype)

        return cls(
            ids=[s.id for s in samples],
            k_u=torch.from_numpy(np.stack([s.k_u for s in samples])).to(dtype),
            maps=stack("maps"),
            mask=torch.from_numpy(np.stack([s.mask.columns for s in samples])).to(real),
            m_z=stack("m_z"),
            m_f=stack("m_f"),
        )

    def __len__(self):
        return len(self.ids)

    def to(self, dtype) -> "Batch":
        real = torch.float64 if dtype == torch.complex128 else torch.float32
        return Batch(
            self.ids,
            self.k_u.to(dtype),
            self.maps.to(dtype),
            self.mask.to(real),
            self.m_z.to(dtype),
            self.m_f.to(dtype),
        )


def _sample_rng(seed: int, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, SPLITS.index(split), index])


def make_sample(manifest: DatasetManifest, split: str, index: int) -> KSpaceSample:
    """Generate one sample; seeds derive from (manifest seed, split, index)."""
    ss = _sample_rng(manifest.seed, split, index)
    phantom_seed, maps_seed, mask_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    H, W = manifest.H, manifest.W
    image = gen_phantom(H, W, phantom_seed)
    maps = gen_sensitivity_maps(H, W, manifest.n_coils, maps_seed).astype(np.complex64)
    mask = make_mask(W, manifest.R, manifest.n_center, manifest.density_exponent, mask_seed)
    k_full = fft2c(torch.from_numpy(maps.astype(np.complex128) * image[None])).numpy()
    return KSpaceSample.from_arrays(f"{split}-{index:05d}", k_full.astype(np.complex64), maps, mask)


def build_dataset(manifest: DatasetManifest, out_path, workers: int = 1) -> Path:
    """Generate every split and write the HDF5 container atomically."""
    if not isinstance(manifest, DatasetManifest):
        raise ConfigError("build_dataset needs a DatasetManifest")
    out_path = Path(out_path)
    tmp_path = out_path.with_name(out_path.name + ".partial")
    jobs = [(split, i) for split in SPLITS for i in range(getattr(manifest, split))]
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            samples = list(pool.map(lambda job: make_sample(manifest, *job), jobs))
        with h5py.File(tmp_path, "w") as f:
            for key, value in manifest.to_dict().items():
                f.attrs[key] = value
            f.attrs["created_utc"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
            for split in SPLITS:
                f.create_group(split)
            for (split, _), sample in zip(jobs, samples):
                _write_sample(f[split].create_group(sample.id), sample)
        os.replace(tmp_path, out_path)
    except OSError as exc:
        try:
            tmp_path.unlink(missing_ok=True)
        except OSError:
            pass
        raise PersistError(f"failed to write dataset to {out_path}: {exc}") from exc
    logger.info("wrote %d samples to %s", len(jobs), out_path)
    return out_path


def _write_sample(group: h5py.Group, sample: KSpaceSample) -> None:
    group.create_dataset("k_full", data=sample.k_full.astype(np.complex64))
    group.create_dataset("maps", data=sample.maps.astype(np.complex64))
    mask = group.create_dataset("mask", data=sample.mask.columns.astype(np.uint8))
    mask.attrs["R"] = sample.mask.R
    mask.attrs["n_center"] = sample.mask.n_center
    mask.attrs["seed"] = -1 if sample.mask.seed is None else int(sample.mask.seed)


def _read_sample(group: h5py.Group, id: str) -> KSpaceSample:
    m = group["mask"]
    seed = int(m.attrs.get("seed", -1))
    mask = SamplingMask(
        columns=m[()],
        R=float(m.attrs.get("R", 1.0)),
        n_center=int(m.attrs.get("n_center", 0)),
        seed=None if seed < 0 else seed,
    )
    return KSpaceSample.from_arrays(id, group["k_full"][()], group["maps"][()], mask)


def read_manifest(path) -> DatasetManifest:
    with h5py.File(path, "r") as f:
        names = {fld.name for fld in dataclasses.fields(DatasetManifest)}
        values = {k: v.item() if hasattr(v, "item") else v for k, v in f.attrs.items() if k in names}
    return DatasetManifest(**values)


def read_split(path, split: str) -> list[KSpaceSample]:
    with h5py.File(path, "r") as f:
        if split not in f:
            raise SplitNotFoundError(f"split '{split}' not in {path}")
        group = f[split]
        return [_read_sample(group[name], name) for name in sorted(group)]


def dataset_checksum(path) -> str:
    """SHA-256 over all arrays and attributes, ignoring ``created_utc``."""
    digest = hashlib.sha256()
    with h5py.File(path, "r") as f:
        attrs = {k: np.asarray(v).tolist() for k, v in f.attrs.items() if k != "created_utc"}
        digest.update(json.dumps(attrs, sort_keys=True).encode())

        def visit(name, obj):
            digest.update(name.encode())
            if isinstance(obj, h5py.Dataset):
                digest.update(np.ascontiguousarray(obj[()]).tobytes())
            digest.update(json.dumps({k: np.asarray(v).tolist() for k, v in obj.attrs.items()}, sort_keys=True).encode())

        f.visititems(visit)
    return digest.hexdigest()


def draw_augmentation(rng: np.random.Generator) -> tuple[bool, float]:
    """Random horizontal flip (p = 0.5) and rotation angle in degrees."""
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    return flip, angle


def augment_sample(sample: KSpaceSample, flip: bool, angle: float) -> KSpaceSample:
    """Flip/rotate the ground-truth image and re-simulate its k-space.

    Real and imaginary planes are rotated with the same bilinear kernel. Coil
    maps and mask are left in place since they belong to the scanner.
    """
    image = sample.m_f.astype(np.complex128)
    if flip:
        image = image[:, ::-1]
    if angle != 0.0:
        rot = lambda plane: ndimage.rotate(plane, angle, reshape=False, order=1, mode="constant")
        image = rot(image.real) + 1j * rot(image.imag)
    maps = sample.maps
    k_full = fft2c(torch.from_numpy(maps.astype(np.complex128) * image[None])).numpy()
    return KSpaceSample.from_arrays(sample.id, k_full.astype(sample.k_full.dtype), maps, sample.mask)


def _augmentation_rng(shuffle_seed: int, sample_id: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(sample_id.encode()).digest()[:8], "little")
    return np.random.default_rng([shuffle_seed, key])


def iterate_batches(
    samples: Sequence[KSpaceSample],
    batch_size: int,
    shuffle_seed: int | None = 0,
    augment: bool = False,
    drop_last: bool = False,
    workers: int = 1,
    dtype=torch.complex64,
) -> Iterator[Batch]:
    """Batch stream over in-memory samples (see :func:`load_batches`)."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))

    def prepare(idx):
        sample = samples[idx]
        if augment:
            flip, angle = draw_augmentation(_augmentation_rng(shuffle_seed or 0, sample.id))
            sample = augment_sample(sample, flip, angle)
        return sample

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            if drop_last and len(chunk) < batch_size:
                break
            yield Batch.from_samples(list(pool.map(prepare, chunk)), dtype=dtype)


def load_batches(
    path,
    split: str,
    batch_size: int,
    shuffle_seed: int | None = 0,
    augment: bool = False,
    **kwargs,
) -> Iterator[Batch]:
    """Yield batches from one split of a container.

    With ``augment`` each sample gets a flip/rotation drawn from a generator
    seeded by ``(shuffle_seed, sample id)``, so the stream is reproducible
    regardless of worker count.
    """
    samples = read_split(path, split)
    yield from iterate_batches(samples, batch_size, shuffle_seed, augment, **kwargs)
