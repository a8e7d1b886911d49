"""Denoising diffusion: noise schedule, corruption, training loss and sampling.

Timesteps are 1-based throughout: ``t = 1..T`` and ``alpha_bar[t - 1]`` is the
cumulative product up to step ``t``. All randomness comes from an explicit
``torch.Generator`` so runs are reproducible.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data_io import Checkpoint, Dataset, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def T(self) -> int:
        return self.beta.numel()

    @property
    def alpha(self) -> torch.Tensor:
        return 1.0 - self.beta


def make_schedule(T: int = 400, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linearly spaced ``beta_1..beta_T`` and cumulative ``alpha_bar``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    if T == 1 or beta_min == beta_max:
        beta = torch.full((T,), beta_min, dtype=torch.float64)
    else:
        beta = torch.linspace(beta_min, beta_max, T, dtype=torch.float64)
    return NoiseSchedule(beta, torch.cumprod(1.0 - beta, 0))


def _per_item(values: torch.Tensor, t, batch: int, ndim: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    v = values[t - 1]
    if v.numel() == 1:
        v = v.expand(batch)
    return v.reshape(-1, *([1] * (ndim - 1)))


def forward_noise(x0, t, eps, s: NoiseSchedule) -> torch.Tensor:
    """Closed-form marginal ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` scalar or per batch item."""
    x0 = torch.as_tensor(x0, dtype=torch.float64) if not isinstance(x0, torch.Tensor) else x0
    eps = torch.as_tensor(eps, dtype=x0.dtype) if not isinstance(eps, torch.Tensor) else eps
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} differs from image shape {tuple(x0.shape)}")
    tt = torch.as_tensor(t, dtype=torch.long)
    if ((tt < 1) | (tt > s.T)).any():
        raise ValueError(f"timestep out of range 1..{s.T}")
    if tt.dim() == 0:
        ab = s.alpha_bar[tt - 1].to(x0.dtype)
        return ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    ab = _per_item(s.alpha_bar, tt, x0.shape[0], x0.dim()).to(x0.dtype)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def dm_loss(net: Callable, images, labels, s: NoiseSchedule, generator: torch.Generator) -> torch.Tensor:
    """Noise-prediction MSE, averaged over batch and pixels.

    Draws ``t ~ U{1..T}`` per item, then ``eps ~ N(0, I)``, in that order.
    """
    dtype = images.dtype
    n = images.shape[0]
    if n == 0:
        raise ValueError("dm_loss needs a non-empty batch")
    t = torch.randint(1, s.T + 1, (n,), generator=generator)
    eps = torch.randn(images.shape, generator=generator, dtype=torch.float64).to(dtype)
    x_t = forward_noise(images, t, eps, s)
    return ((eps - net(x_t, t, labels)) ** 2).mean()


@torch.no_grad()
def sample(net: Callable, s: NoiseSchedule, n: int, shape: tuple[int, ...], label=None,
           generator: torch.Generator | None = None, dtype=torch.float64) -> torch.Tensor:
    """Ancestral sampling from ``x_T ~ N(0, I)`` down to ``x_0``, clipped to [-1, 1].

    Uses ``sigma_t^2 = beta_t`` and no noise on the final step.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    x = torch.randn((n, *shape), generator=generator, dtype=torch.float64).to(dtype)
    if n == 0:
        return x
    if label is not None:
        label = torch.as_tensor(label, dtype=torch.long).reshape(-1)
        if label.numel() == 1:
            label = label.expand(n)
    alpha = s.alpha
    for t in range(s.T, 0, -1):
        eps_hat = net(x, torch.full((n,), t, dtype=torch.long), label)
        coef = (s.beta[t - 1] / (1 - s.alpha_bar[t - 1]).sqrt()).to(dtype)
        x = (x - coef * eps_hat) / alpha[t - 1].sqrt().to(dtype)
        if t > 1:
            z = torch.randn((n, *shape), generator=generator, dtype=torch.float64).to(dtype)
            x = x + s.beta[t - 1].sqrt().to(dtype) * z
    return x.clamp(-1.0, 1.0)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    T: int = 400
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_min, self.beta_max)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    log: list[tuple[int, int, float]] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "loss"])
            for epoch, step, loss in self.log:
                w.writerow([epoch, step, repr(loss)])


def read_loss_csv(path) -> list[tuple[int, int, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["epoch"]), int(r["step"]), float(r["loss"])) for r in rows]


# -- checkpoint <-> training state ------------------------------------------------


def training_state(net: torch.nn.Module, opt: torch.optim.Optimizer, generator: torch.Generator,
                   epoch: int, config: dict) -> Checkpoint:
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    names = {id(p): name for name, p in net.named_parameters()}
    for name, p in net.named_parameters():
        arrays[f"param/{name}"] = p.detach().cpu().numpy().copy()
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            arrays[f"adam/step/{name}"] = np.asarray([float(st["step"])], dtype=np.float64)
            arrays[f"adam/exp_avg/{name}"] = st["exp_avg"].detach().cpu().numpy().copy()
            arrays[f"adam/exp_avg_sq/{name}"] = st["exp_avg_sq"].detach().cpu().numpy().copy()
    rng = generator.get_state().numpy().tobytes() if generator is not None else b""
    return Checkpoint(config=config, arrays=arrays, rng_state=rng, epoch=epoch)


def load_parameters(net: torch.nn.Module, ckpt: Checkpoint) -> None:
    with torch.no_grad():
        for name, p in net.named_parameters():
            key = f"param/{name}"
            if key not in ckpt.arrays:
                raise KeyError(f"checkpoint has no parameter {name!r}")
            arr = ckpt.arrays[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr.copy()).to(p.dtype))


def restore_training_state(net, opt, generator, ckpt: Checkpoint) -> int:
    load_parameters(net, ckpt)
    for name, p in net.named_parameters():
        key = f"adam/step/{name}"
        if key in ckpt.arrays:
            opt.state[p] = {
                "step": torch.tensor(float(ckpt.arrays[key][0]), dtype=torch.float32),
                "exp_avg": torch.from_numpy(ckpt.arrays[f"adam/exp_avg/{name}"].copy()).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(ckpt.arrays[f"adam/exp_avg_sq/{name}"].copy()).to(p.dtype),
            }
    if ckpt.rng_state:
        generator.set_state(torch.from_numpy(np.frombuffer(ckpt.rng_state, dtype=np.uint8).copy()))
    return ckpt.epoch


def make_optimizer(net: torch.nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(net.parameters(), lr=lr, foreach=False)


def train(
    net: torch.nn.Module,
    dataset: Dataset,
    cfg: TrainConfig,
    checkpoint_dir=None,
    resume=None,
    config_snapshot: dict | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Optimise ``net`` on the noise-prediction loss.

    Each epoch shuffles the data with the run generator, then steps Adam once
    per mini-batch. With ``checkpoint_dir`` a checkpoint ``epoch_XXX.cndf`` is
    written after every epoch; ``resume`` (path or :class:`Checkpoint`)
    continues from such a file, including optimizer moments and generator state.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    s = cfg.schedule()
    dtype = next(net.parameters()).dtype
    images = torch.from_numpy(dataset.images).to(dtype)
    labels = torch.from_numpy(dataset.labels)
    generator = torch.Generator().manual_seed(cfg.seed)
    opt = make_optimizer(net, cfg.learning_rate)
    start_epoch = 0
    if resume is not None:
        ckpt = load_checkpoint(resume) if not isinstance(resume, Checkpoint) else resume
        start_epoch = restore_training_state(net, opt, generator, ckpt)
    snapshot = dict(config_snapshot or {})
    snapshot.setdefault("train", cfg.to_dict())

    result = TrainResult()
    n = len(dataset)
    net.train()
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        perm = torch.randperm(n, generator=generator)
        losses = []
        for step, lo in enumerate(range(0, n, cfg.batch_size), start=1):
            idx = perm[lo:lo + cfg.batch_size]
            opt.zero_grad(set_to_none=True)
            loss = dm_loss(net, images[idx], labels[idx], s, generator)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"training diverged: loss {value} at epoch {epoch}, step {step}")
            loss.backward()
            opt.step()
            losses.append(value)
            result.log.append((epoch, step, value))
        mean = float(np.mean(losses))
        result.epoch_means.append(mean)
        log.info("epoch %d mean loss %.6f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"epoch_{epoch:03d}.cndf"
            save_checkpoint(path, training_state(net, opt, generator, epoch, snapshot))
            result.checkpoints.append(path)
    return result
