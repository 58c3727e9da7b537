"""Channel-last tensor primitives and the gradient contract.

Tensors are ``torch.Tensor`` objects laid out as ``(..., H, W, C)``: any
number of leading batch axes, then the spatial plane, then channels.
Convolutions are cross-correlations with "same" zero padding, the usual
deep-learning convention; kernels are stored ``K x K x Cin x Cout``.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Iterable, Mapping

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, ShapeError

Tensor = torch.Tensor

_threads = os.environ.get("TTCAST_THREADS")
if _threads:
    torch.set_num_threads(max(1, int(_threads)))


@contextlib.contextmanager
def precision(dtype: str | torch.dtype = "float64"):
    """Temporarily switch the default dtype (64-bit mode for gradient checks)."""
    if isinstance(dtype, str):
        dtype = {"float32": torch.float32, "float64": torch.float64}[dtype]
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield dtype
    finally:
        torch.set_default_dtype(previous)


def tensor(data, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(data, dtype=torch.get_default_dtype()).clone()
    if t.numel() == 0 or any(s < 1 for s in t.shape):
        raise ShapeError(f"extents must be >= 1, got {tuple(t.shape)}")
    return t.requires_grad_(requires_grad)


def _spatial_pad(k: int) -> int:
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    return k // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 2D cross-correlation of ``(..., H, W, Cin)`` with ``(K, K, Cin, Cout)``."""
    if kernel.dim() != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"kernel must be K x K x Cin x Cout, got {tuple(kernel.shape)}")
    k, _, cin, cout = kernel.shape
    pad = _spatial_pad(k)
    if x.dim() < 3 or x.shape[-1] != cin:
        raise ShapeError(f"input channels {tuple(x.shape)[-1:]} do not match kernel Cin={cin}")
    if bias is not None and tuple(bias.shape) != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {tuple(bias.shape)}")
    lead = x.shape[:-3]
    h, w = x.shape[-3], x.shape[-2]
    xb = x.reshape(-1, h, w, cin).permute(0, 3, 1, 2)
    weight = kernel.permute(3, 2, 0, 1)
    out = F.conv2d(xb, weight, bias, padding=pad)
    return out.permute(0, 2, 3, 1).reshape(*lead, h, w, cout)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Spatially same-padded, temporally valid 3D convolution.

    ``x`` is ``(..., H, W, Tw, Cin)`` and ``kernel`` is ``(K, K, Tw, Cin, Cout)``.
    The kernel spans the whole time axis, so the result loses it:
    ``(..., H, W, Cout)``.
    """
    if kernel.dim() != 5:
        raise ShapeError(f"kernel must be K x K x Tw x Cin x Cout, got {tuple(kernel.shape)}")
    k, k2, tw, cin, cout = kernel.shape
    if x.dim() < 4 or x.shape[-2] != tw:
        raise ShapeError(f"temporal extent {tuple(x.shape)[-2:-1]} does not match kernel Tw={tw}")
    if x.shape[-1] != cin:
        raise ShapeError(f"input channels {x.shape[-1]} do not match kernel Cin={cin}")
    # fold (Tw, Cin) into one channel axis; identical arithmetic to a valid time conv
    flat = x.reshape(*x.shape[:-2], tw * cin)
    return conv2d(flat, kernel.reshape(k, k2, tw * cin, cout), bias)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return a * b


def scale(a: Tensor, s) -> Tensor:
    return a * s


def concat_channels(*parts: Tensor) -> Tensor:
    base = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != base:
            raise ShapeError(
                f"concat_channels: non-channel extents {tuple(p.shape[:-1])} != {tuple(base)}"
            )
    return torch.cat(parts, dim=-1)


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "add": add,
    "mul": mul,
    "scale": scale,
    "concat_channels": concat_channels,
}


def elementwise(op: str, *args):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def uniform_kernel(shape: Iterable[int], fan_in: int, generator: torch.Generator) -> Tensor:
    """Kernel drawn uniformly from +-sqrt(1/fan_in)."""
    bound = math.sqrt(1.0 / fan_in)
    u = torch.rand(tuple(shape), generator=generator, dtype=torch.float64)
    return ((2.0 * u - 1.0) * bound).to(torch.get_default_dtype())


class GradientContext:
    """Registry of named trainable tensors plus reverse-mode differentiation."""

    def __init__(self, params: Mapping[str, Tensor] | None = None):
        self.params: dict[str, Tensor] = {}
        for name, p in (params or {}).items():
            self.register(name, p)

    def register(self, name: str, param: Tensor) -> Tensor:
        if name in self.params:
            raise ConfigError(f"parameter {name!r} registered twice")
        param.requires_grad_(True)
        self.params[name] = param
        return param

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise LookupError(f"parameter {name!r} is not registered") from None

    def gradient(self, loss: Tensor, names: Iterable[str] | None = None,
                 retain_graph: bool = True) -> dict[str, Tensor]:
        names = list(self.params) if names is None else list(names)
        return gradient(loss, {n: self[n] for n in names}, retain_graph=retain_graph)


def gradient(loss: Tensor, params: Mapping[str, Tensor],
             retain_graph: bool = True) -> dict[str, Tensor]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``params``.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.numel() != 1:
        raise ContractError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    for n in names:
        if not params[n].requires_grad:
            raise LookupError(f"parameter {n!r} does not participate in gradients")
    grads = torch.autograd.grad(
        loss.reshape(()), [params[n] for n in names],
        retain_graph=retain_graph, allow_unused=True,
    )
    return {
        n: torch.zeros_like(params[n]) if g is None else g
        for n, g in zip(names, grads)
    }
