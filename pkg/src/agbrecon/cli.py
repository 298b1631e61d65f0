"""Command-line entry point: ``agbrecon <subcommand> [options]``.

Exit codes: 0 success, 1 runtime abort, 2 usage error, 3 config schema violation.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import h5py
import numpy as np
import torch
from PIL import Image

from .config import SchemaViolation, load_config
from .data import SPLITS, KSpaceSample, build_dataset, read_split
from .dcinet import init_params
from .errors import ConfigError, NonFiniteError, ReconError
from .metrics import get_extractor
from .operators import SamplingMask, make_mask
from .training import METRIC_FIELDS, evaluate_split, load_checkpoint, reconstruct, train

logger = logging.getLogger("agbrecon")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_SCHEMA = 0, 1, 2, 3


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("RECON_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agbrecon", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset container")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="container path (overrides paths.dataset)")

    t = sub.add_parser("train", help="train a generator (and critic) from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--mode", choices=["cwgan-agb", "cwgan-fixed", "wgan", "mse-only"])
    t.add_argument("--seed", type=int)
    t.add_argument("--dataset", help="overrides paths.dataset")
    t.add_argument("--run-dir", help="overrides paths.run_dir")
    t.add_argument("--resume", action="store_true", help="continue from run_dir/checkpoint.pt")

    e = sub.add_parser("evaluate", help="NMSE/FID on a split plus an image grid")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--dataset")
    e.add_argument("--out-dir")

    r = sub.add_parser("reconstruct", help="reconstruct one sample file")
    r.add_argument("--config", required=True)
    r.add_argument("--checkpoint")
    r.add_argument("--input", required=True, help="HDF5 with maps, mask and k_u or k_full")
    r.add_argument("--output", required=True, help=".npy (complex), .png (magnitude) or .h5")

    m = sub.add_parser("make-mask", help="write a sampling mask for inspection")
    m.add_argument("--config")
    m.add_argument("--width", type=int)
    m.add_argument("--acceleration", type=float)
    m.add_argument("--n-center", type=int)
    m.add_argument("--density-exponent", type=float)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True, help=".npy (uint8 columns) or .png (H x W preview)")
    return p


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "dataset", None):
        cfg = cfg.override("paths", "dataset", str(Path(args.dataset).resolve()))
    if getattr(args, "run_dir", None):
        cfg = cfg.override("paths", "run_dir", str(Path(args.run_dir).resolve()))
    return cfg.check()


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out).resolve() if args.out else cfg.path("dataset")
    build_dataset(cfg.manifest, out, workers=num_workers())
    cfg.override("paths", "dataset", str(out)).write_frozen(out.with_name(out.stem + ".config.json"))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.mode:
        cfg = cfg.override("train", "mode", args.mode)
    if args.seed is not None:
        cfg = cfg.override("agb", "seed", args.seed)
    if args.max_steps is not None:
        cfg = cfg.override("train", "max_steps", args.max_steps)
    run_dir = cfg.path("run_dir")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_frozen(run_dir / "resolved_config.json")
    t = cfg.train
    result = train(
        cfg.path("dataset"),
        cfg.generator,
        cfg.critic,
        cfg.agb,
        cfg.mode,
        fixed_weight=t["fixed_weight"],
        max_steps=t["max_steps"],
        out_dir=run_dir,
        checkpoint_every=t["checkpoint_every"],
        resume=args.resume,
        config_hash=cfg.config_hash(),
        augment=t["augment"],
        validate=t["validate"],
        extractor=get_extractor(cfg.extractor),
        workers=num_workers(),
        record_wall_time=t["record_wall_time"],
    )
    state = result.trainer.state
    print(f"trained {state.step} steps, beta={state.beta:.4g}; checkpoint {result.checkpoint}")
    return EXIT_OK


def _load_generator(cfg, checkpoint):
    ckpt_path = Path(checkpoint) if checkpoint else cfg.path("run_dir") / "checkpoint.pt"
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint {ckpt_path} not found")
    ckpt = load_checkpoint(ckpt_path)
    generator = init_params(cfg.generator)
    arrays = ckpt.get("generator_arrays")
    if arrays:
        generator.load_arrays(arrays)
    else:
        generator.load_state_dict(ckpt["trainer"]["generator"])
    return generator.eval(), ckpt


def _to_uint8(img: np.ndarray, vmax: float) -> np.ndarray:
    return (np.clip(img / max(vmax, 1e-12), 0, 1) * 255 + 0.5).astype(np.uint8)


def write_grid(path, m_f, m_g, m_z, n_rows: int = 4) -> Path:
    """Rows of ``fully sampled | reconstruction | zero-fill | |difference|``."""
    rows = []
    for i in range(min(n_rows, len(m_f))):
        ref = np.abs(m_f[i])
        vmax = ref.max()
        diff = np.abs(m_f[i] - m_g[i])
        tiles = [
            _to_uint8(ref, vmax),
            _to_uint8(np.abs(m_g[i]), vmax),
            _to_uint8(np.abs(m_z[i]), vmax),
            _to_uint8(diff, max(diff.max(), 1e-12)),
        ]
        rows.append(np.concatenate(tiles, axis=1))
    grid = np.concatenate(rows, axis=0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid, mode="L").save(path)
    return Path(path)


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    generator, ckpt = _load_generator(cfg, args.checkpoint)
    samples = read_split(cfg.path("dataset"), args.split)
    extractor = get_extractor(cfg.extractor)
    metrics = evaluate_split(generator, samples, extractor)
    out_dir = Path(args.out_dir) if args.out_dir else cfg.path("run_dir") / f"eval_{args.split}"
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_frozen(out_dir / "resolved_config.json")
    epoch = ckpt.get("stream", {}).get("epoch", 0)
    with (out_dir / "metrics.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        w.writerow([epoch, args.split, repr(metrics["nmse_mean"]), repr(metrics["fid"])])
        w.writerow([epoch, f"{args.split}/zero-fill", repr(metrics["zf_nmse_mean"]), repr(metrics["zf_fid"])])
    m_g, m_z, m_f = reconstruct(generator, samples)
    write_grid(out_dir / "grid.png", m_f, m_g, m_z)
    print(
        f"{args.split}: nmse={metrics['nmse_mean']:.5g} fid={metrics['fid']:.5g} "
        f"(zero-fill nmse={metrics['zf_nmse_mean']:.5g}) -> {out_dir}"
    )
    return EXIT_OK


def read_sample_file(path) -> KSpaceSample:
    with h5py.File(path, "r") as f:
        maps = f["maps"][()]
        cols = f["mask"][()]
        mask = SamplingMask(columns=cols, R=float(f["mask"].attrs.get("R", 1.0)), n_center=int(f["mask"].attrs.get("n_center", 0)))
        k = f["k_full"][()] if "k_full" in f else f["k_u"][()]
    return KSpaceSample.from_arrays(Path(path).stem, k, maps, mask)


def write_sample_file(path, sample: KSpaceSample, undersampled: bool = True) -> Path:
    with h5py.File(path, "w") as f:
        if undersampled:
            f.create_dataset("k_u", data=sample.k_u.astype(np.complex64))
        else:
            f.create_dataset("k_full", data=sample.k_full.astype(np.complex64))
        f.create_dataset("maps", data=sample.maps.astype(np.complex64))
        m = f.create_dataset("mask", data=sample.mask.columns)
        m.attrs["R"] = sample.mask.R
        m.attrs["n_center"] = sample.mask.n_center
    return Path(path)


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    generator, _ = _load_generator(cfg, args.checkpoint)
    sample = read_sample_file(args.input)
    image = reconstruct(generator, [sample])[0][0]
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".png":
        Image.fromarray(_to_uint8(np.abs(image), np.abs(image).max()), mode="L").save(out)
    elif out.suffix in (".h5", ".hdf5"):
        with h5py.File(out, "w") as f:
            f.create_dataset("image", data=image.astype(np.complex64))
    else:
        np.save(out, image.astype(np.complex64))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_make_mask(args) -> int:
    data = load_config(args.config).raw["data"] if args.config else {}
    width = args.width or data.get("W", 256)
    R = args.acceleration or data.get("R", 4.0)
    n_center = args.n_center if args.n_center is not None else data.get("n_center", 12)
    exponent = args.density_exponent if args.density_exponent is not None else data.get("density_exponent", 3.0)
    mask = make_mask(width, R, n_center, exponent, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".png":
        Image.fromarray(mask.as_matrix(data.get("H", width)) * 255, mode="L").save(out)
    else:
        np.save(out, mask.columns.astype(np.uint8))
    print(f"{mask.n_sampled}/{width} lines ({n_center} central) -> {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "reconstruct": cmd_reconstruct,
    "make-mask": cmd_make_mask,
}


def run_cli(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return COMMANDS[args.command](args)
    except SchemaViolation as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except NonFiniteError as exc:
        print(f"aborted: {exc}; diagnostics: {exc.diagnostics_path}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ReconError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
