"""UNet-style noise predictor with interchangeable block kinds.

Layout (``C`` = ``base_features``)::

    in 1x1 -> pair(C) ----------------------------------------- skip ---+
               pool -> 1x1 C->2C -> pair(2C) ------------ skip ---+     |
                                     pool -> pair(2C)  (bottleneck)|     |
                                     up -> cat -> 1x1 4C->2C -> pair(2C)  |
                                               up -> cat -> 1x1 3C->C -> pair(C) -> out 1x1

Each ``pair`` holds two residual blocks of the configured kind. Every block
receives the time/class context as a per-channel bias on its input. Only
the blocks change between kinds; pooling, upsampling and projections are
fixed, so the three kinds have identical parameter counts.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cellnn import SolverConfig, TemplateSet, init_templates, integrate_layer
from .tensor_core import gradcheck_tensors
from .memristor import TaOxParams, integrate_mlayer

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


class BlockKind(str, enum.Enum):
    CONV = "conv"
    CELLNN = "cellnn"
    MCELLNN = "mcellnn"


@dataclass(frozen=True)
class DenoiserConfig:
    block_kind: BlockKind = BlockKind.CONV
    base_features: int = 32
    image_size: int = 8
    image_channels: int = 1
    num_classes: int = 2
    T: int = 400
    embed_dim: int = 16
    solver: SolverConfig = field(default_factory=SolverConfig)
    taox: TaOxParams = field(default_factory=TaOxParams)
    m0: float = 0.5
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "block_kind", BlockKind(self.block_kind))
        if self.image_size % 4:
            raise ValueError(f"image size {self.image_size} must be divisible by 4 (two 2x downsamplings)")
        if self.base_features < 1 or self.image_channels < 1:
            raise ValueError("base_features and image_channels must be positive")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be an even number >= 2")
        if self.num_classes < 0:
            raise ValueError("num_classes must be >= 0")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @property
    def context_dim(self) -> int:
        return self.embed_dim + self.num_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_kind"] = self.block_kind.value
        d["solver"] = {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in asdict(self.solver).items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["solver"] = SolverConfig(**d.get("solver", {}))
        d["taox"] = TaOxParams(**d.get("taox", {}))
        return cls(**d)


def time_embedding(t, T: int, dims: int) -> torch.Tensor:
    """Sinusoidal features of ``t / T`` at geometrically spaced frequencies 1..1000.

    The lowest frequency keeps ``sin(t / T)`` monotone on (0, 1], so distinct
    steps always map to distinct vectors.
    """
    scalar = not isinstance(t, torch.Tensor) or t.dim() == 0
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if ((t < 1) | (t > T)).any():
        raise ValueError(f"timestep out of range 1..{T}")
    half = dims // 2
    freqs = torch.logspace(0, 3, half, dtype=torch.float64) if half > 1 else torch.ones(1, dtype=torch.float64)
    ang = (t / T)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    return emb[0] if scalar else emb


class ConvBlock(nn.Module):
    """Residual pair of 3x3 convolutions: ``x + W2 * lrelu(W1 * x + b1)``."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=True)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.01))


class CellNNBlock(nn.Module):
    """Residual CellNN layer: ``x + y(x_cell(T))`` with the block input as the held input ``u``."""

    def __init__(self, channels: int, solver: SolverConfig):
        super().__init__()
        self.solver = solver
        self.A = nn.Parameter(torch.zeros(channels, channels, 3, 3))
        self.B = nn.Parameter(torch.zeros(channels, channels, 3, 3))
        self.Z = nn.Parameter(torch.zeros(channels))

    def templates(self) -> TemplateSet:
        return TemplateSet(self.A, self.B, self.Z, 1)

    def forward(self, x):
        return x + integrate_layer(x, self.templates(), self.solver)


class MCellNNBlock(CellNNBlock):
    def __init__(self, channels: int, solver: SolverConfig, taox: TaOxParams, m0: float = 0.5):
        super().__init__(channels, solver)
        self.taox = taox
        self.m0 = m0

    def forward(self, x):
        # memristor state starts from m0 on every call, so there is no hidden state
        return x + integrate_mlayer(x, self.templates(), self.taox, self.solver, self.m0)


def make_block(cfg: DenoiserConfig, channels: int) -> nn.Module:
    if cfg.block_kind is BlockKind.CONV:
        return ConvBlock(channels)
    if cfg.block_kind is BlockKind.CELLNN:
        return CellNNBlock(channels, cfg.solver)
    return MCellNNBlock(channels, cfg.solver, cfg.taox, cfg.m0)


class BlockPair(nn.Module):
    def __init__(self, cfg: DenoiserConfig, channels: int):
        super().__init__()
        self.blocks = nn.ModuleList([make_block(cfg, channels) for _ in range(2)])
        self.cond = nn.ModuleList([nn.Linear(cfg.context_dim, channels) for _ in range(2)])

    def forward(self, x, ctx):
        for block, cond in zip(self.blocks, self.cond):
            x = block(x + cond(ctx)[:, :, None, None])
        return x


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        c, ic = cfg.base_features, cfg.image_channels
        self.inp = nn.Conv2d(ic, c, 1)
        self.down1 = BlockPair(cfg, c)
        self.widen = nn.Conv2d(c, 2 * c, 1)
        self.down2 = BlockPair(cfg, 2 * c)
        self.mid = BlockPair(cfg, 2 * c)
        self.merge2 = nn.Conv2d(4 * c, 2 * c, 1)
        self.up2 = BlockPair(cfg, 2 * c)
        self.merge1 = nn.Conv2d(3 * c, c, 1)
        self.up1 = BlockPair(cfg, c)
        self.out = nn.Conv2d(c, ic, 1)

    def context(self, t, labels, batch: int) -> torch.Tensor:
        cfg = self.cfg
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and batch != 1:
            t = t.expand(batch)
        emb = time_embedding(t, cfg.T, cfg.embed_dim)
        parts = [emb]
        if cfg.num_classes:
            onehot = torch.zeros(batch, cfg.num_classes, dtype=torch.float64)
            if labels is not None:
                labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
                if labels.numel() == 1 and batch != 1:
                    labels = labels.expand(batch)
                onehot[torch.arange(batch), labels] = 1.0
            parts.append(onehot)
        return torch.cat(parts, dim=1).to(cfg.torch_dtype)

    def forward(self, x, t, labels=None):
        cfg = self.cfg
        if x.dim() != 4 or tuple(x.shape[1:]) != (cfg.image_channels, cfg.image_size, cfg.image_size):
            raise ValueError(
                f"expected input (N, {cfg.image_channels}, {cfg.image_size}, {cfg.image_size}), got {tuple(x.shape)}"
            )
        ctx = self.context(t, labels, x.shape[0])
        d1 = self.down1(self.inp(x), ctx)
        d2 = self.down2(self.widen(F.avg_pool2d(d1, 2)), ctx)
        h = self.mid(F.avg_pool2d(d2, 2), ctx)
        h = self.up2(self.merge2(torch.cat([F.interpolate(h, scale_factor=2, mode="nearest"), d2], 1)), ctx)
        h = self.up1(self.merge1(torch.cat([F.interpolate(h, scale_factor=2, mode="nearest"), d1], 1)), ctx)
        return self.out(h)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _init_parameters(net: nn.Module, generator: torch.Generator) -> None:
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                fan_in = module.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                module.weight.copy_((torch.rand(module.weight.shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound)
                if module.bias is not None:
                    module.bias.copy_((torch.rand(module.bias.shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound)
            elif isinstance(module, CellNNBlock):
                t = init_templates(module.A.shape[0], module.B.shape[1], 1, generator)
                module.A.copy_(t.A)
                module.B.copy_(t.B)
                module.Z.copy_(t.Z)


def build_denoiser(cfg: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Construct and deterministically initialise a denoiser."""
    net = Denoiser(cfg).to(cfg.torch_dtype)
    g = torch.Generator().manual_seed(seed)
    _init_parameters(net, g)
    return net


def denoise_predict(net: Denoiser, x_t, t, label=None) -> torch.Tensor:
    """Noise prediction for a batch ``x_t`` at step(s) ``t``."""
    x_t = torch.as_tensor(x_t, dtype=net.cfg.torch_dtype)
    squeeze = x_t.dim() == 3
    if squeeze:
        x_t = x_t.unsqueeze(0)
    out = net(x_t, t, label)
    return out.squeeze(0) if squeeze else out


def block_parameter_count(channels: int) -> int:
    """Trainable parameters of one block of any kind at ``channels`` width."""
    return 2 * 9 * channels * channels + channels


def with_solver(cfg: DenoiserConfig, **changes) -> DenoiserConfig:
    return replace(cfg, solver=replace(cfg.solver, **changes))



def block_gradcheck(kind: BlockKind | str, size: int = 8, steps: int = 20, channels: int = 2,
                    seed: int = 0, h: float = 1e-4) -> dict[str, float]:
    """Max relative error between autograd and central differences for one block.

    The block sees a seeded random ``size x size`` input and is scored by MSE
    against a seeded random target. Every trainable entry is checked.
    """
    cfg = DenoiserConfig(block_kind=kind, base_features=channels, solver=SolverConfig(steps=steps))
    block = make_block(cfg, channels).to(torch.float64)
    g = torch.Generator().manual_seed(seed)
    _init_parameters(block, g)
    u = torch.rand(1, channels, size, size, generator=g, dtype=torch.float64) - 0.5
    target = torch.rand(1, channels, size, size, generator=g, dtype=torch.float64) - 0.5
    params = dict(block.named_parameters())

    def loss():
        return ((block(u) - target) ** 2).mean()

    return gradcheck_tensors(loss, params, h=h)
