"""Grid arithmetic and gradient plumbing shared by every layer.

Grids are torch tensors laid out ``(batch, channel, row, col)``; a bare
``(channel, row, col)`` grid is accepted wherever a batch is and is returned
in the same rank. Reverse-mode differentiation is delegated to
``torch.autograd``; :class:`Tape` adds the parameter registry and the
id-based ``backprop`` contract on top of it.
"""

from __future__ import annotations

import enum
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_DTYPE = torch.float64


class BoundaryRule(str, enum.Enum):
    """How cells outside the array are treated by neighborhood sums."""

    ZERO = "zero"
    REPLICATE = "replicate"


def as_grid(data, dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    """Convert array-like data to a float tensor without copying tensors already in ``dtype``."""
    if isinstance(data, torch.Tensor):
        return data if data.dtype == dtype else data.to(dtype)
    return torch.as_tensor(np.asarray(data), dtype=dtype)


def _batched(g: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if g.dim() == 3:
        return g.unsqueeze(0), True
    if g.dim() == 4:
        return g, False
    raise ValueError(f"grid must have shape (C, H, W) or (N, C, H, W), got {tuple(g.shape)}")


def pad_grid(g: torch.Tensor, radius: int, boundary: BoundaryRule | str = BoundaryRule.ZERO) -> torch.Tensor:
    boundary = BoundaryRule(boundary)
    if radius == 0:
        return g
    pads = (radius, radius, radius, radius)
    if boundary is BoundaryRule.ZERO:
        return F.pad(g, pads)
    return F.pad(g, pads, mode="replicate")


def neighborhood_weighted_sum(
    g: torch.Tensor,
    w: torch.Tensor,
    radius: int | None = None,
    boundary: BoundaryRule | str = BoundaryRule.ZERO,
) -> torch.Tensor:
    """Template-weighted sum over the ``radius``-neighborhood of every cell.

    ``w`` has shape ``(out_ch, in_ch, 2S+1, 2S+1)`` and entry ``w[o, i, dr+S, dc+S]``
    weights the input cell at offset ``(dr, dc)``. This is a cross-correlation,
    the same convention as ``torch.nn.functional.conv2d``.
    """
    g, squeeze = _batched(g)
    if w.dim() != 4:
        raise ValueError(f"kernel must have shape (out_ch, in_ch, k, k), got {tuple(w.shape)}")
    k = w.shape[-1]
    if radius is None:
        radius = (k - 1) // 2
    if w.shape[-2] != 2 * radius + 1 or k != 2 * radius + 1:
        raise ValueError(
            f"kernel spatial size {tuple(w.shape[-2:])} does not match radius {radius} "
            f"(expected {2 * radius + 1}x{2 * radius + 1})"
        )
    if g.shape[1] != w.shape[1]:
        raise ValueError(f"grid has {g.shape[1]} channels but kernel expects {w.shape[1]} input channels")
    out = _correlate(g, w, radius, BoundaryRule(boundary))
    return out.squeeze(0) if squeeze else out


def _correlate(g: torch.Tensor, w: torch.Tensor, radius: int, boundary: BoundaryRule) -> torch.Tensor:
    if boundary is BoundaryRule.ZERO:
        return F.conv2d(g, w, padding=radius)
    return F.conv2d(pad_grid(g, radius, boundary), w)


def check_finite(x: torch.Tensor, what: str = "grid") -> None:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"{what} contains non-finite values")


class Tape:
    """Registry of trainable parameters addressed by integer id.

    Operations on registered tensors are recorded by torch autograd; calling
    :meth:`backprop` walks the recorded graph once and returns fresh gradient
    arrays, so accumulators start from zero on every pass and the tape can be
    reused for the next forward evaluation.
    """

    def __init__(self, dtype: torch.dtype = DEFAULT_DTYPE):
        self.dtype = dtype
        self._params: dict[int, torch.Tensor] = {}
        self._names: dict[int, str] = {}

    def register(self, value, name: str | None = None) -> int:
        if isinstance(value, torch.nn.Parameter) or (isinstance(value, torch.Tensor) and value.requires_grad):
            tensor = value
        else:
            tensor = as_grid(value, self.dtype).clone().requires_grad_(True)
        pid = len(self._params)
        self._params[pid] = tensor
        self._names[pid] = name if name is not None else f"p{pid}"
        return pid

    def register_module(self, module: torch.nn.Module) -> list[int]:
        return [self.register(p, name) for name, p in module.named_parameters()]

    def __getitem__(self, pid: int) -> torch.Tensor:
        try:
            return self._params[pid]
        except KeyError:
            raise KeyError(f"parameter id {pid} is not registered on this tape") from None

    def __len__(self) -> int:
        return len(self._params)

    def ids(self) -> list[int]:
        return list(self._params)

    def name(self, pid: int) -> str:
        return self._names[pid]

    def backprop(self, loss: torch.Tensor, params: Iterable[int] | None = None) -> dict[int, torch.Tensor]:
        return backprop(loss, self, params)


def backprop(loss: torch.Tensor, tape: Tape, params: Iterable[int] | None = None) -> dict[int, torch.Tensor]:
    """Gradients of a scalar ``loss`` with respect to registered parameters.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        shape = tuple(loss.shape) if isinstance(loss, torch.Tensor) else type(loss).__name__
        raise ValueError(f"backprop needs a scalar loss, got {shape}")
    ids = tape.ids() if params is None else list(params)
    tensors = [tape[pid] for pid in ids]
    if not loss.requires_grad:
        return {pid: torch.zeros_like(t) for pid, t in zip(ids, tensors)}
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {
        pid: (torch.zeros_like(t) if g is None else g.detach())
        for pid, t, g in zip(ids, tensors, grads)
    }


def finite_diff_gradient(f: Callable[[np.ndarray], float], p, h: float = 1e-4) -> np.ndarray:
    """Central-difference estimate ``(f(p + h e_i) - f(p - h e_i)) / 2h`` per component."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    p = np.array(p, dtype=np.float64)
    scalar = p.ndim == 0
    flat = p.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(flat.reshape(p.shape)))
        flat[i] = orig - h
        fm = float(f(flat.reshape(p.shape)))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(()) if scalar else grad.reshape(p.shape)


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """Componentwise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck_tensors(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-4,
    indices: Mapping[str, Iterable[int]] | None = None,
    floor: float = 1e-8,
) -> dict[str, float]:
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    ``params`` are leaf tensors that ``loss_fn`` closes over; they are perturbed
    in place under ``no_grad`` and restored afterwards. Returns the maximum
    relative error per parameter name. ``indices`` restricts the check to a
    subset of flat positions per parameter.
    """
    loss = loss_fn()
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    worst: dict[str, float] = {}
    for name, g in zip(names, grads):
        t = params[name]
        g = torch.zeros_like(t) if g is None else g
        flat_t = t.data.view(-1)
        flat_g = g.reshape(-1)
        pos = range(flat_t.numel()) if indices is None or name not in indices else indices[name]
        errs = []
        for i in pos:
            orig = flat_t[i].item()
            with torch.no_grad():
                flat_t[i] = orig + h
                fp = loss_fn().item()
                flat_t[i] = orig - h
                fm = loss_fn().item()
                flat_t[i] = orig
            fd = (fp - fm) / (2 * h)
            errs.append(float(relative_error(flat_g[i].item(), fd, floor)))
        worst[name] = max(errs) if errs else 0.0
    return worst
