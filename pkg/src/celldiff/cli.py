"""``celldiff`` command line: train, sample, fid, extractor, simulate, memristor-sweep, gradcheck.

Every option can also come from a ``key = value`` config file passed with
``--config``; explicit flags win over the file, which wins over defaults.
Each run writes ``manifest.json`` into its output directory. Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

log = logging.getLogger("celldiff")


@dataclass
class Opt:
    flag: str
    type: Callable = str
    default: Any = None
    help: str = ""
    choices: tuple | None = None
    is_bool: bool = False

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


COMMON = [
    Opt("--seed", int, 0, "seed for every random draw of the run"),
    Opt("--out", str, None, "output directory (default runs/<command>)"),
]

MODEL = [
    Opt("--block", str, "conv", "denoiser block kind", ("conv", "cellnn", "mcellnn")),
    Opt("--features", int, 32, "base feature width C"),
    Opt("--T", int, 400, "diffusion steps"),
    Opt("--beta-min", float, 1e-4),
    Opt("--beta-max", float, 0.02),
    Opt("--dt", float, 0.01, "cell integration time step"),
    Opt("--steps", int, 100, "cell integration steps"),
]

COMMANDS: dict[str, list[Opt]] = {
    "train": MODEL + [
        Opt("--data", str, "toy", "toy, toy-blobs, digits, mnist or an MNIST directory"),
        Opt("--n", int, 1000, "images for synthetic datasets"),
        Opt("--epochs", int, 10),
        Opt("--batch", int, 16),
        Opt("--lr", float, 1e-4),
        Opt("--resume", str, None, "checkpoint to continue from"),
    ],
    "sample": [
        Opt("--ckpt", str, None, "trained model checkpoint"),
        Opt("--n", int, 16, "images (per class with --per-class)"),
        Opt("--class", int, None, "condition every sample on this class"),
        Opt("--per-class", _bool, False, "one row of n samples per class", is_bool=True),
        Opt("--format", str, "pgm", choices=("pgm", "png")),
    ],
    "fid": [
        Opt("--gen-ckpt", str, None, "model checkpoint to sample from"),
        Opt("--gen-data", str, None, "dataset drawn with --seed as the generated set instead of a checkpoint"),
        Opt("--data", str, "toy", "reference dataset"),
        Opt("--n", int, 200, "generated images"),
        Opt("--n-ref", int, 1000, "reference images (also the synthetic dataset size)"),
        Opt("--extractor", str, None, "feature extractor checkpoint (default: train one on --data)"),
        Opt("--extractor-epochs", int, 5),
        Opt("--method", str, None, "label for the CSV row"),
    ],
    "extractor": [
        Opt("--data", str, "toy"),
        Opt("--n", int, 1000),
        Opt("--epochs", int, 5),
        Opt("--batch", int, 64),
        Opt("--lr", float, 1e-3),
        Opt("--holdout", float, 0.2),
    ],
    "simulate": [
        Opt("--demo", str, "heat", choices=("heat",)),
        Opt("--size", int, 16),
        Opt("--lambda", float, 1.0, "diffusion coefficient"),
        Opt("--steps", int, 100),
        Opt("--dt", float, 0.01),
        Opt("--every", int, 10, "frame interval"),
    ],
    "memristor-sweep": [
        Opt("--amp", float, 1.0),
        Opt("--freq", float, 1.0),
        Opt("--cycles", int, 3),
        Opt("--dt", float, None, "time step (default period/1000)"),
        Opt("--m0", float, 0.5),
        Opt("--params", str, None, "JSON file overriding device parameters"),
    ],
    "gradcheck": [
        Opt("--block", str, "conv", choices=("conv", "cellnn", "mcellnn")),
        Opt("--size", int, 8),
        Opt("--steps", int, 20),
        Opt("--channels", int, 2),
        Opt("--h", float, 1e-4),
        Opt("--tol", float, None, "max relative error (default 1e-4, 1e-3 for mcellnn)"),
    ],
}


class UsageError(Exception):
    pass


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys may use dashes or underscores."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="celldiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file of defaults for this command")
        for o in opts + COMMON:
            if o.is_bool:
                p.add_argument(o.flag, dest=o.dest, action="store_const", const=True, default=None, help=o.help)
            else:
                p.add_argument(o.flag, dest=o.dest, type=o.type, choices=o.choices, default=None, help=o.help)
    return parser


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Flags > config file > defaults."""
    opts = COMMANDS[args.command] + COMMON
    file_cfg = read_config_file(args.config) if args.config else {}
    known = {o.dest for o in opts}
    unknown = sorted(set(file_cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    cfg: dict[str, Any] = {}
    for o in opts:
        value = getattr(args, o.dest)
        if value is None and o.dest in file_cfg:
            try:
                value = o.type(file_cfg[o.dest])
            except ValueError as exc:
                raise UsageError(f"config key {o.dest}: {exc}") from None
            if o.choices and value not in o.choices:
                raise UsageError(f"config key {o.dest}: {value!r} not in {list(o.choices)}")
        cfg[o.dest] = o.default if value is None else value
    if cfg["out"] is None:
        cfg["out"] = str(Path("runs") / args.command)
    return cfg


class Run:
    """Output directory plus the manifest describing it."""

    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        self.started = time.time()
        self.extra: dict[str, Any] = {}

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(str(p))
        return p

    def write_manifest(self, status: str) -> Path:
        manifest = {
            "command": self.command,
            "config": self.cfg,
            "seed": self.cfg.get("seed"),
            "started": self.started,
            "finished": time.time(),
            "status": status,
            "outputs": self.outputs,
            **self.extra,
        }
        p = self.out / "manifest.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
        return p


# -- commands ------------------------------------------------------------------


def _dataset(name: str, n: int, seed: int, split: str = "train"):
    from .data_io import load_dataset, load_mnist

    if split == "test" and (name == "mnist" or Path(name).is_dir()):
        return load_mnist(None if name == "mnist" else name, "test")
    return load_dataset(name, n=n, seed=seed)


def cmd_train(cfg: dict, run: Run) -> int:
    from .estimators import DiffusionGenerator

    data = _dataset(cfg["data"], cfg["n"], cfg["seed"])
    est = DiffusionGenerator(block_kind=cfg["block"], base_features=cfg["features"], epochs=cfg["epochs"],
                             batch_size=cfg["batch"], learning_rate=cfg["lr"], T=cfg["T"],
                             beta_min=cfg["beta_min"], beta_max=cfg["beta_max"], dt=cfg["dt"],
                             steps=cfg["steps"], seed=cfg["seed"])
    ckpt_dir = run.out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    def report(epoch, mean):
        print(f"epoch {epoch} mean loss {mean:.6f}", flush=True)

    labels = data.labels if len(np.unique(data.labels)) > 1 else None
    est.fit(data.images, labels, checkpoint_dir=ckpt_dir, resume=cfg["resume"], on_epoch=report)
    est.result_.write_csv(run.path("loss.csv"))
    run.outputs.extend(str(p) for p in est.result_.checkpoints)
    if est.result_.checkpoints:
        shutil.copyfile(est.result_.checkpoints[-1], run.path("model.cndf"))
    run.extra["epoch_losses"] = est.epoch_losses_
    return 0


def _load_generator(path):
    from .estimators import DiffusionGenerator

    return DiffusionGenerator.from_checkpoint(path)


def cmd_sample(cfg: dict, run: Run) -> int:
    from .data_io import write_image_grid

    if not cfg["ckpt"]:
        raise UsageError("--ckpt is required")
    if cfg["n"] < 1:
        raise UsageError(f"--n must be >= 1, got {cfg['n']} (an empty image grid cannot be written)")
    est = _load_generator(cfg["ckpt"])
    if cfg["per_class"]:
        if not est.num_classes_:
            raise UsageError("--per-class needs a class-conditional checkpoint")
        labels = np.repeat(np.arange(est.num_classes_), cfg["n"])
        images = est.sample(len(labels), label=torch.from_numpy(labels), seed=cfg["seed"])
        ncols = cfg["n"]
    else:
        cls = cfg["class"]
        if cls is not None and not 0 <= cls < max(est.num_classes_, 1):
            raise UsageError(f"--class {cls} out of range for {est.num_classes_} classes")
        images = est.sample(cfg["n"], label=cls, seed=cfg["seed"])
        ncols = None
    np.save(run.path("samples.npy"), images)
    write_image_grid(images, run.path(f"samples.{cfg['format']}"), cfg["format"], ncols=ncols)
    print(f"wrote {len(images)} samples to {run.out}")
    return 0


def _extractor(cfg: dict, reference, run: Run):
    from .data_io import load_checkpoint
    from .evalkit import FeatureExtractorClassifier, train_feature_extractor

    if cfg["extractor"]:
        return FeatureExtractorClassifier.from_checkpoint(load_checkpoint(cfg["extractor"]))
    ext, acc = train_feature_extractor(reference, seed=cfg["seed"], epochs=cfg["extractor_epochs"])
    run.extra["extractor_holdout_accuracy"] = acc
    return ext


def cmd_fid(cfg: dict, run: Run) -> int:
    from .evalkit import fid

    if bool(cfg["gen_ckpt"]) == bool(cfg["gen_data"]):
        raise UsageError("give exactly one of --gen-ckpt or --gen-data")
    if cfg["n"] < 2:
        raise UsageError("--n must be >= 2")
    reference = _dataset(cfg["data"], cfg["n_ref"], cfg["seed"])
    ext = _extractor(cfg, reference, run)
    if cfg["gen_ckpt"]:
        est = _load_generator(cfg["gen_ckpt"])
        labels = torch.arange(cfg["n"]) % est.num_classes_ if est.num_classes_ else None
        generated = est.sample(cfg["n"], label=labels, seed=cfg["seed"])
        method = cfg["method"] or est.block_kind
    else:
        generated = _dataset(cfg["gen_data"], cfg["n"], cfg["seed"]).images[:cfg["n"]]
        method = cfg["method"] or cfg["gen_data"]
    ref_images = reference.images[:cfg["n_ref"]]
    value = fid(generated, ref_images, ext)
    row = [method, cfg["data"], len(generated), len(ref_images), repr(value)]
    with open(run.path("fid.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "dataset", "n_gen", "n_ref", "fid"])
        w.writerow(row)
    print("method,dataset,n_gen,n_ref,fid")
    print(",".join(str(x) for x in row))
    run.extra["fid"] = value
    return 0


def cmd_extractor(cfg: dict, run: Run) -> int:
    from .data_io import save_checkpoint
    from .evalkit import train_feature_extractor

    data = _dataset(cfg["data"], cfg["n"], cfg["seed"])
    ext, acc = train_feature_extractor(data, holdout=cfg["holdout"], seed=cfg["seed"], epochs=cfg["epochs"],
                                       batch_size=cfg["batch"], learning_rate=cfg["lr"])
    save_checkpoint(run.path("extractor.cndf"), ext.to_checkpoint())
    run.extra["holdout_accuracy"] = acc
    print(f"held-out accuracy {acc:.4f}")
    return 0


def cmd_simulate(cfg: dict, run: Run) -> int:
    from .cellnn import heat_diffusion_demo
    from .data_io import write_image_grid

    size = cfg["size"]
    if size < 1 or cfg["steps"] < 0 or cfg["every"] < 1:
        raise UsageError("--size and --every must be >= 1 and --steps >= 0")
    rng = np.random.default_rng(cfg["seed"])
    x0 = torch.from_numpy(rng.uniform(-1, 1, (1, size, size)))
    frames = heat_diffusion_demo(x0, cfg["lambda"], cfg["steps"], cfg["dt"], every=cfg["every"])
    steps_at = [min(i * cfg["every"], cfg["steps"]) for i in range(len(frames))]
    sums = frames.sum(dim=(1, 2, 3))
    with open(run.path("trajectory.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", "sum", "variance", "min", "max"])
        for k, f in zip(steps_at, frames):
            w.writerow([k, repr(k * cfg["dt"]), repr(f.sum().item()), repr(f.var(unbiased=False).item()),
                        repr(f.min().item()), repr(f.max().item())])
    for i, f in enumerate(frames):
        write_image_grid(f.unsqueeze(0).numpy(), run.path(f"frame_{i:04d}.pgm"), "pgm")
    drift = float((sums - sums[0]).abs().max() / max(abs(sums[0].item()), 1e-300))
    run.extra["relative_sum_drift"] = drift
    print(f"heat demo: {len(frames)} frames, relative sum drift {drift:.3e}")
    return 0


def cmd_memristor_sweep(cfg: dict, run: Run) -> int:
    from .memristor import TaOxParams, memristor_sweep

    p = TaOxParams.from_file(cfg["params"]) if cfg["params"] else TaOxParams.defaults()
    trace = memristor_sweep(p, amplitude=cfg["amp"], frequency=cfg["freq"], cycles=cfg["cycles"],
                            dt=cfg["dt"], m0=cfg["m0"])
    trace.to_csv(run.path("sweep.csv"))
    print(f"wrote {len(trace)} samples, m in [{trace.m.min():.4f}, {trace.m.max():.4f}]")
    return 0


def cmd_gradcheck(cfg: dict, run: Run) -> int:
    from .denoiser import block_gradcheck

    tol = cfg["tol"]
    if tol is None:
        tol = cfg["tol"] = 1e-3 if cfg["block"] == "mcellnn" else 1e-4
    errs = block_gradcheck(cfg["block"], size=cfg["size"], steps=cfg["steps"], channels=cfg["channels"],
                           seed=cfg["seed"], h=cfg["h"])
    worst = max(errs.values())
    for name, e in errs.items():
        print(f"  {name}: {e:.3e}")
    ok = worst < tol
    print(f"gradcheck {cfg['block']}: max relative error {worst:.3e} (tol {tol:g}) {'PASS' if ok else 'FAIL'}")
    run.extra.update(max_relative_error=worst, tolerance=tol, passed=ok)
    return 0 if ok else 1


HANDLERS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "fid": cmd_fid,
    "extractor": cmd_extractor,
    "simulate": cmd_simulate,
    "memristor-sweep": cmd_memristor_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if "CELLDIFF_DATA_DIR" in os.environ:
        log.info("dataset root %s", os.environ["CELLDIFF_DATA_DIR"])
    try:
        cfg = resolve(args)
        run = Run(args.command, cfg)
    except (UsageError, OSError) as exc:
        parser.error(str(exc))
    try:
        code = HANDLERS[args.command](cfg, run)
    except UsageError as exc:
        run.write_manifest("usage-error")
        print(f"celldiff {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        run.write_manifest("failed")
        print(f"celldiff {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    run.write_manifest("ok" if code == 0 else "failed")
    return code


if __name__ == "__main__":
    sys.exit(main())
