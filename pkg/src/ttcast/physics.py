"""Discrete PDE operators on channel-last fields and the latent physics losses.

All spatial operators use the 5-point stencil with replicate (zero normal
gradient) boundaries and act on the two axes before the channel axis.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError, ShapeError

KINDS = ("none", "diffusion", "wave")


def laplacian(v: torch.Tensor) -> torch.Tensor:
    up = torch.cat([v[..., :1, :, :], v[..., :-1, :, :]], dim=-3)
    down = torch.cat([v[..., 1:, :, :], v[..., -1:, :, :]], dim=-3)
    left = torch.cat([v[..., :, :1, :], v[..., :, :-1, :]], dim=-2)
    right = torch.cat([v[..., :, 1:, :], v[..., :, -1:, :]], dim=-2)
    return up + down + left + right - 4.0 * v


def _check(*fields):
    shape = fields[0].shape
    for f in fields[1:]:
        if f.shape != shape:
            raise ShapeError(f"field shapes differ: {tuple(shape)} vs {tuple(f.shape)}")


def diffusion_step(v, alpha):
    return v + alpha * laplacian(v)


def wave_step(v, v_prev, c2):
    """Leapfrog update: ``v`` is the current level, ``v_prev`` the one before."""
    _check(v, v_prev)
    return 2.0 * v - v_prev + c2 * laplacian(v)


def g_dif(h, h_tilde, alpha):
    """Mean-square diffusion residual between a state and its update."""
    _check(h, h_tilde)
    r = h_tilde - h - alpha * laplacian(h)
    return (r * r).mean()


def g_wave(h_prev, h, h_next, c2):
    _check(h_prev, h, h_next)
    r = h_next - 2.0 * h + h_prev - c2 * laplacian(h)
    return (r * r).mean()


def _softplus_inverse(x: float) -> float:
    if x == 0.0:
        return -math.inf
    return x + math.log(-math.expm1(-x))


class PhysicsSpec(nn.Module):
    """Which PDE constrains a layer's latent states, with learnable coefficients.

    ``alpha`` and ``c2`` are stored as softplus pre-activations so they stay
    non-negative during training. ``lam`` is the loss weight the trainer
    applies to the accumulated residual.
    """

    def __init__(self, kind: str = "none", alpha: float = 0.1, c2: float = 0.1,
                 lam: float = 0.1):
        super().__init__()
        if kind not in KINDS:
            raise ConfigError(f"physics kind must be one of {KINDS}, got {kind!r}")
        self.kind = kind
        self.lam = float(lam)
        # only the coefficient the chosen PDE uses is trainable
        for name, value, used in (("alpha_raw", alpha, "diffusion"), ("c2_raw", c2, "wave")):
            raw = torch.tensor(_softplus_inverse(value))
            if kind == used:
                setattr(self, name, nn.Parameter(raw))
            else:
                self.register_buffer(name, raw)

    @property
    def alpha(self):
        return F.softplus(self.alpha_raw)

    @property
    def c2(self):
        return F.softplus(self.c2_raw)

    def set_coefficients(self, alpha=None, c2=None):
        with torch.no_grad():
            if alpha is not None:
                self.alpha_raw.fill_(_softplus_inverse(float(alpha)))
            if c2 is not None:
                self.c2_raw.fill_(_softplus_inverse(float(c2)))

    def step_loss(self, maps, tildes):
        """Residual for one time step given the per-order maps and updated maps.

        Diffusion pairs each map with its own update. Wave needs three levels,
        so consecutive orders act as a micro-time axis:
        ``(H[o], H~[o], H~[o+1])`` for ``o = 1 .. m-1``.
        """
        if self.kind == "none":
            raise ContractError("physics kind 'none' has no residual; skip the call")
        if len(maps) != len(tildes):
            raise ShapeError("maps and updated maps must have equal length")
        if self.kind == "diffusion":
            alpha = self.alpha
            terms = [g_dif(h, ht, alpha) for h, ht in zip(maps, tildes)]
        else:
            c2 = self.c2
            terms = [g_wave(maps[o], tildes[o], tildes[o + 1], c2)
                     for o in range(len(maps) - 1)]
        if not terms:
            return maps[0].new_zeros(())
        return torch.stack(terms).sum()


def sequence_physics_loss(hidden_history, spec: PhysicsSpec):
    """Unweighted physics objective summed over time steps and orders.

    ``hidden_history`` is a sequence of ``(maps, updated_maps)`` pairs, one
    per time step, each holding the ``m`` per-order tensors.
    """
    if spec.kind == "none":
        raise ContractError("physics kind 'none' has no residual; skip the call")
    total = None
    for maps, tildes in hidden_history:
        term = spec.step_loss(maps, tildes)
        total = term if total is None else total + term
    if total is None:
        raise ContractError("hidden history is empty")
    return total
