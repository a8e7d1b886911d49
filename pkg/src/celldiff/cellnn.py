"""Cellular neural network layer integrated with forward Euler.

State equation per cell::

    dx/dt = -x + A (*) y(x) + B (*) u + Z

where ``(*)`` is :func:`~celldiff.tensor_core.neighborhood_weighted_sum` and
``y`` is the saturating or leaky output function.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .tensor_core import (
    DEFAULT_DTYPE,
    BoundaryRule,
    _batched,
    _correlate,
    as_grid,
    neighborhood_weighted_sum,
)

# Any |x| beyond this during integration is treated as divergence.
BLOWUP_LIMIT = 1e6


class Nonlinearity(str, enum.Enum):
    SATURATING = "saturating"
    LEAKY = "leaky"


class InitialState(str, enum.Enum):
    ZERO = "zero"
    COPY_INPUT = "copy-input"


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 0.01
    steps: int = 100
    nonlinearity: Nonlinearity = Nonlinearity.LEAKY
    alpha: float = 0.01
    initial_state: InitialState = InitialState.ZERO
    boundary: BoundaryRule = BoundaryRule.ZERO

    def __post_init__(self):
        object.__setattr__(self, "nonlinearity", Nonlinearity(self.nonlinearity))
        object.__setattr__(self, "initial_state", InitialState(self.initial_state))
        object.__setattr__(self, "boundary", BoundaryRule(self.boundary))
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if not 0 <= self.alpha < 1:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")

    def output(self, x):
        if self.nonlinearity is Nonlinearity.SATURATING:
            return output_nonlinearity(x)
        return leaky_nonlinearity(x, self.alpha)


@dataclass
class TemplateSet:
    """Feedback ``A``, control ``B`` and bias ``Z`` templates of one layer.

    ``A``: (out_ch, out_ch, 2S+1, 2S+1), ``B``: (out_ch, in_ch, 2S+1, 2S+1),
    ``Z``: (out_ch,). Tensors may require grad; the layer is differentiable in all three.
    """

    A: torch.Tensor
    B: torch.Tensor
    Z: torch.Tensor
    radius: int = field(default=1)

    def __post_init__(self):
        self.A = as_grid(self.A) if not isinstance(self.A, torch.Tensor) else self.A
        self.B = as_grid(self.B) if not isinstance(self.B, torch.Tensor) else self.B
        self.Z = as_grid(self.Z) if not isinstance(self.Z, torch.Tensor) else self.Z
        k = 2 * self.radius + 1
        if self.A.dim() != 4 or self.B.dim() != 4:
            raise ValueError("A and B must be 4-D kernels (out_ch, in_ch, k, k)")
        if tuple(self.A.shape[-2:]) != (k, k) or tuple(self.B.shape[-2:]) != (k, k):
            raise ValueError(f"template spatial size must be {k}x{k} for radius {self.radius}")
        out_ch = self.A.shape[0]
        if self.A.shape[1] != out_ch:
            raise ValueError(f"A must map state channels to state channels, got shape {tuple(self.A.shape)}")
        if self.B.shape[0] != out_ch:
            raise ValueError(f"B has {self.B.shape[0]} output channels, A has {out_ch}")
        if self.Z.shape != (out_ch,):
            raise ValueError(f"Z must have shape ({out_ch},), got {tuple(self.Z.shape)}")

    @property
    def out_channels(self) -> int:
        return self.A.shape[0]

    @property
    def in_channels(self) -> int:
        return self.B.shape[1]

    @classmethod
    def zeros(cls, out_ch: int, in_ch: int, radius: int = 1, dtype=DEFAULT_DTYPE) -> "TemplateSet":
        k = 2 * radius + 1
        return cls(
            torch.zeros(out_ch, out_ch, k, k, dtype=dtype),
            torch.zeros(out_ch, in_ch, k, k, dtype=dtype),
            torch.zeros(out_ch, dtype=dtype),
            radius,
        )

    @classmethod
    def identity_control(cls, channels: int, radius: int = 1, dtype=DEFAULT_DTYPE) -> "TemplateSet":
        """A = 0, Z = 0, B passes each input channel straight through."""
        t = cls.zeros(channels, channels, radius, dtype)
        for c in range(channels):
            t.B[c, c, radius, radius] = 1.0
        return t

    def num_parameters(self) -> int:
        return self.A.numel() + self.B.numel() + self.Z.numel()


def init_templates(
    out_ch: int,
    in_ch: int,
    radius: int = 1,
    generator: torch.Generator | None = None,
    dtype=DEFAULT_DTYPE,
) -> TemplateSet:
    """Random templates for training.

    A is drawn from U(-0.1/fan, 0.1/fan) so the feedback loop starts
    contractive; B and Z use the usual 1/sqrt(fan_in) uniform range.
    """
    k = 2 * radius + 1
    fan_a = out_ch * k * k
    fan_b = in_ch * k * k
    bound_b = 1.0 / math.sqrt(fan_b)

    def uniform(shape, bound):
        return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound

    return TemplateSet(
        uniform((out_ch, out_ch, k, k), 0.1 / fan_a),
        uniform((out_ch, in_ch, k, k), bound_b),
        uniform((out_ch,), bound_b),
        radius,
    )


class _LeakyFn(torch.autograd.Function):
    """Leaky output function that keeps only its input for the backward pass."""

    @staticmethod
    def forward(ctx, x, alpha):
        ctx.save_for_backward(x)
        ctx.alpha = alpha
        sat = x.clamp(-1.0, 1.0)
        return sat if alpha == 0 else sat + alpha * (x - sat)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        slope = torch.where(x.abs() <= 1, torch.ones_like(x), torch.full_like(x, ctx.alpha))
        return grad * slope, None


def _elementwise(fn, x):
    if isinstance(x, torch.Tensor):
        return fn(x)
    arr = np.asarray(x, dtype=np.float64)
    out = fn(torch.as_tensor(arr)).numpy()
    return float(out) if out.ndim == 0 else out


def output_nonlinearity(x):
    """Piecewise-linear saturation ``0.5|x+1| - 0.5|x-1|``, range [-1, 1].

    Evaluated as a clamp, which equals the absolute-value form exactly in
    real arithmetic and avoids its rounding in the linear region.
    """
    return _elementwise(lambda t: _LeakyFn.apply(t, 0.0), x)


def leaky_nonlinearity(x, alpha: float = 0.01):
    """Identity on [-1, 1]; slope ``alpha`` outside, continuous at the knees."""
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    return _elementwise(lambda t: _LeakyFn.apply(t, float(alpha)), x)


def _check_shapes(x: torch.Tensor, u: torch.Tensor, t: TemplateSet):
    if x.shape[1] != t.out_channels:
        raise ValueError(f"state has {x.shape[1]} channels, templates expect {t.out_channels}")
    if u.shape[1] != t.in_channels:
        raise ValueError(f"input has {u.shape[1]} channels, templates expect {t.in_channels}")
    if x.shape[0] != u.shape[0] or x.shape[-2:] != u.shape[-2:]:
        raise ValueError(f"state shape {tuple(x.shape)} incompatible with input shape {tuple(u.shape)}")


def control_term(u: torch.Tensor, t: TemplateSet, boundary=BoundaryRule.ZERO) -> torch.Tensor:
    """``B (*) u + Z``; constant over the integration because u is held fixed."""
    return neighborhood_weighted_sum(u, t.B, t.radius, boundary) + t.Z.view(1, -1, 1, 1)


def _rhs(x, drive, t: TemplateSet, cfg: SolverConfig):
    return -x + neighborhood_weighted_sum(cfg.output(x), t.A, t.radius, cfg.boundary) + drive


def cellnn_rhs(x, u, t: TemplateSet, cfg: SolverConfig = SolverConfig()) -> torch.Tensor:
    """Time derivative of the cell states for a constant input ``u``."""
    x, squeeze = _batched(as_grid(x, t.A.dtype))
    u, _ = _batched(as_grid(u, t.A.dtype))
    _check_shapes(x, u, t)
    out = _rhs(x, control_term(u, t, cfg.boundary), t, cfg)
    return out.squeeze(0) if squeeze else out


def initial_state(u: torch.Tensor, t: TemplateSet, cfg: SolverConfig) -> torch.Tensor:
    if cfg.initial_state is InitialState.ZERO:
        return u.new_zeros((u.shape[0], t.out_channels, *u.shape[-2:]))
    if u.shape[1] != t.out_channels:
        raise ValueError("copy-input initial state needs as many input as state channels")
    return u.clone()


def guard_state(x: torch.Tensor, step: int, what: str = "state") -> None:
    with torch.no_grad():
        peak = x.abs().max().item() if x.numel() else 0.0
    if not math.isfinite(peak) or peak > BLOWUP_LIMIT:
        raise FloatingPointError(
            f"CellNN {what} diverged at integration step {step} (max |x| = {peak:.3g})"
        )


class EulerStepper:
    """Forward-Euler update ``x + dt * rhs(x)`` for a fixed input.

    Evaluated as ``(1 - dt) x + (dt A) (*) y(x) + dt (B (*) u + Z)`` so only
    the state and its output are kept for backpropagation at each step.
    """

    def __init__(self, u: torch.Tensor, t: TemplateSet, cfg: SolverConfig):
        self.cfg = cfg
        self.radius = t.radius
        self.decay = 1.0 - cfg.dt
        self.feedback = cfg.dt * t.A
        self.forcing = cfg.dt * control_term(u, t, cfg.boundary)

    def feedback_term(self, x: torch.Tensor) -> torch.Tensor:
        return _correlate(self.cfg.output(x), self.feedback, self.radius, self.cfg.boundary)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return torch.add(self.feedback_term(x) + self.forcing, x, alpha=self.decay)


def integrate_states(u, t: TemplateSet, cfg: SolverConfig = SolverConfig(), x0=None) -> torch.Tensor:
    """Final state ``x(steps * dt)`` under forward Euler. ``x0`` overrides ``cfg.initial_state``."""
    u, squeeze = _batched(as_grid(u, t.A.dtype))
    x = initial_state(u, t, cfg) if x0 is None else _batched(as_grid(x0, t.A.dtype))[0]
    _check_shapes(x, u, t)
    step = EulerStepper(u, t, cfg)
    for k in range(cfg.steps):
        x = step(x)
        guard_state(x, k + 1)
    return x.squeeze(0) if squeeze else x


def integrate_layer(u, t: TemplateSet, cfg: SolverConfig = SolverConfig()) -> torch.Tensor:
    """Layer output ``y(x(T))`` after ``cfg.steps`` Euler steps of size ``cfg.dt``."""
    return cfg.output(integrate_states(u, t, cfg))


def conv_equivalent(u, B, Z, cfg: SolverConfig = SolverConfig()) -> torch.Tensor:
    """Fixed point of the A = 0 dynamics passed through the output function.

    With no feedback the state relaxes to ``B (*) u + Z``, which is a single
    convolution layer.
    """
    B = as_grid(B)
    Z = as_grid(Z, B.dtype)
    u, squeeze = _batched(as_grid(u, B.dtype))
    if Z.shape != (B.shape[0],):
        raise ValueError(f"Z must have shape ({B.shape[0]},), got {tuple(Z.shape)}")
    radius = (B.shape[-1] - 1) // 2
    out = cfg.output(neighborhood_weighted_sum(u, B, radius, cfg.boundary) + Z.view(1, -1, 1, 1))
    return out.squeeze(0) if squeeze else out


def heat_templates(channels: int, lam: float, dtype=DEFAULT_DTYPE) -> TemplateSet:
    """A = {center 1 - 4 lam, N/S/E/W lam}, B = 0, Z = 0, applied per channel."""
    t = TemplateSet.zeros(channels, channels, 1, dtype)
    for c in range(channels):
        t.A[c, c] = torch.tensor(
            [[0.0, lam, 0.0], [lam, 1.0 - 4.0 * lam, lam], [0.0, lam, 0.0]], dtype=dtype
        )
    return t


def heat_diffusion_demo(x0, lam: float, steps: int, dt: float, every: int = 1) -> torch.Tensor:
    """Integrate the CellNN with a Laplacian feedback template.

    In the linear region of the output function the state equation collapses
    to ``dx/dt = lam * laplacian(x)`` with zero-flux edges. Returns the
    trajectory sampled every ``every`` steps, including the initial frame,
    shaped ``(frames, C, H, W)``.
    """
    x0 = as_grid(x0)
    if x0.dim() == 2:
        x0 = x0.unsqueeze(0)
    if x0.dim() != 3:
        raise ValueError(f"x0 must be (H, W) or (C, H, W), got {tuple(x0.shape)}")
    if lam < 0:
        raise ValueError(f"coupling lambda must be non-negative, got {lam}")
    if lam * dt > 1 / 8:
        raise ValueError(f"unstable: lambda*dt = {lam * dt:g} exceeds 1/8")
    if x0.abs().max().item() > 1:
        raise ValueError("heat demo requires |x0| <= 1 so cells stay in the linear region")
    t = heat_templates(x0.shape[0], lam, x0.dtype)
    cfg = SolverConfig(dt=dt, steps=1, nonlinearity=Nonlinearity.SATURATING, boundary=BoundaryRule.REPLICATE)
    x = x0.unsqueeze(0)
    step = EulerStepper(torch.zeros_like(x), t, cfg)
    frames = [x0.clone()]
    with torch.no_grad():
        for k in range(1, steps + 1):
            x = step(x)
            guard_state(x, k)
            if k % every == 0:
                frames.append(x[0].clone())
    return torch.stack(frames)


def with_steps(cfg: SolverConfig, steps: int) -> SolverConfig:
    return replace(cfg, steps=steps)
