"""Stacked recurrent forecaster with block skip connections and rollout."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from . import cttd
from .cells import ConvLstmCell, PittConvLstmCell
from .errors import ConfigError, ContractError
from .physics import PhysicsSpec
from .tensor_core import conv2d, uniform_kernel

CELL_KINDS = ("convlstm", "tt", "pitt-diffusion", "pitt-wave")
_PHYSICS_OF = {"tt": "none", "pitt-diffusion": "diffusion", "pitt-wave": "wave"}


@dataclass
class NetworkConfig:
    blocks: int = 4
    layers_per_block: int = 3
    channels: tuple = (32, 48, 48, 32)
    cell: str = "pitt-wave"
    order: int = 3
    steps: int = 3
    rank: int = 8
    kernel: int = 3
    frame_channels: int = 2
    alpha: float = 0.1
    c2: float = 0.1
    lam: float = 0.1
    seed: int = 0
    frame_shape: tuple = field(default=(30, 50))  # (D, P): the image plane

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.frame_shape = tuple(int(s) for s in self.frame_shape)
        if self.cell not in CELL_KINDS:
            raise ConfigError(f"cell must be one of {CELL_KINDS}, got {self.cell!r}")
        if len(self.channels) != self.blocks:
            raise ConfigError(f"{self.blocks} blocks need {self.blocks} channel widths, "
                              f"got {self.channels}")
        if self.layers_per_block < 1:
            raise ConfigError("layers_per_block must be >= 1")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel}")
        if not 1 <= self.order <= self.steps:
            raise ConfigError(f"need 1 <= order <= steps, got {self.order}, {self.steps}")

    @property
    def physics_kind(self) -> str:
        return _PHYSICS_OF.get(self.cell, "none")

    def block_inputs(self) -> list[int]:
        """Input width of each block's first layer.

        Block ``b >= 2`` sees the previous block's output concatenated with
        the output of block ``b - 2``.
        """
        widths = []
        for b in range(self.blocks):
            w = self.frame_channels if b == 0 else self.channels[b - 1]
            if b >= 2:
                w += self.channels[b - 2]
            widths.append(w)
        return widths

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["frame_shape"] = list(self.frame_shape)
        return d


PAPER_PRESET = dict(blocks=4, layers_per_block=3, channels=(32, 48, 48, 32),
                    order=3, steps=3, rank=8, kernel=3)
DESK_PRESET = dict(blocks=2, layers_per_block=2, channels=(8, 8),
                   order=3, steps=3, rank=8, kernel=3)
DESK_PCS = 16
PAPER_PCS = 50


def preset(name: str, **overrides) -> NetworkConfig:
    base = {"paper": PAPER_PRESET, "desk": DESK_PRESET}.get(name)
    if base is None:
        raise ConfigError(f"unknown preset {name!r}")
    return NetworkConfig(**{**base, **overrides})


class Network(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        g = torch.Generator().manual_seed(config.seed)
        self.layers = nn.ModuleList()
        self.block_of: list[int] = []
        for b, (width_in, width) in enumerate(zip(config.block_inputs(), config.channels)):
            for i in range(config.layers_per_block):
                s = width_in if i == 0 else width
                self.layers.append(self._make_cell(s, width, g))
                self.block_of.append(b)
        last = config.channels[-1]
        self.out_kernel = nn.Parameter(uniform_kernel(
            (1, 1, last, config.frame_channels), last, g))
        self.out_bias = nn.Parameter(torch.zeros(config.frame_channels))

    def _make_cell(self, s, c, g):
        cfg = self.config
        if cfg.cell == "convlstm":
            return ConvLstmCell(s, c, cfg.kernel, generator=g)
        spec = PhysicsSpec(cfg.physics_kind, alpha=cfg.alpha, c2=cfg.c2, lam=cfg.lam)
        return PittConvLstmCell(s, c, cfg.kernel, cfg.order, cfg.steps, cfg.rank,
                                physics=spec, generator=g)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def dense_equivalent_count(self) -> int:
        """Parameter count with every tensor-train chain replaced by its dense kernel."""
        total = self.param_count()
        if self.config.cell == "convlstm":
            return total
        cfg = self.config
        for cell in self.layers:
            ranks = cell.chain.rank_vector
            total += (cttd.dense_equivalent_count(cfg.order, cfg.kernel, ranks)
                      - cttd.chain_param_count(cfg.order, cfg.kernel, ranks))
        return total

    def init_state(self, batch_shape):
        h, w = self.config.frame_shape
        return [cell.init_state(batch_shape, h, w) for cell in self.layers]

    def step(self, x, states):
        """One time step through every layer; returns (frame, states, residual)."""
        cfg = self.config
        block_out = []
        new_states = []
        residual = None
        inp = x
        for idx, cell in enumerate(self.layers):
            b = self.block_of[idx]
            if idx and self.block_of[idx - 1] != b:
                block_out.append(inp)
                if b >= 2:
                    inp = torch.cat([inp, block_out[b - 2]], dim=-1)
            inp, st, r = cell.step(inp, states[idx])
            new_states.append(st)
            if r is not None:
                residual = r if residual is None else residual + r
        frame = conv2d(inp, self.out_kernel, self.out_bias)
        return frame, new_states, residual

    def rollout(self, context, horizon: int, teacher=None, sampling_ratio: float = 0.0,
                generator: torch.Generator | None = None, return_residual: bool = False):
        """Forecast ``horizon`` frames after ``context``.

        ``context`` is ``(B, T, H, W, C)``. Each forecast frame after the first
        is fed back as the next input, except that with probability
        ``sampling_ratio`` (drawn independently per sample and frame) the
        matching ``teacher`` frame is fed instead.
        """
        if context.dim() != 5 or context.shape[1] < 1:
            raise ContractError(f"context must be (B, T>=1, H, W, C), got {tuple(context.shape)}")
        if horizon < 1:
            raise ContractError(f"horizon must be >= 1, got {horizon}")
        if not 0.0 <= sampling_ratio <= 1.0:
            raise ContractError(f"sampling_ratio must lie in [0, 1], got {sampling_ratio}")
        if sampling_ratio > 0:
            if teacher is None:
                raise ContractError("sampling_ratio > 0 requires teacher frames")
            if teacher.shape[1] < horizon - 1:
                raise ContractError(f"teacher has {teacher.shape[1]} frames, horizon "
                                    f"{horizon} needs {horizon - 1}")
        batch = context.shape[0]
        states = self.init_state((batch,))
        residual = None

        def advance(x):
            nonlocal states, residual
            frame, states, r = self.step(x, states)
            if r is not None:
                residual = r if residual is None else residual + r
            return frame

        frame = None
        for t in range(context.shape[1]):
            frame = advance(context[:, t])
        preds = [frame]
        for k in range(1, horizon):
            nxt = frame
            if sampling_ratio > 0:
                draw = torch.rand(batch, generator=generator, dtype=torch.float64)
                use = (draw < sampling_ratio).to(frame.dtype).view(batch, 1, 1, 1)
                nxt = use * teacher[:, k - 1] + (1 - use) * frame
            frame = advance(nxt)
            preds.append(frame)
        out = torch.stack(preds, dim=1)
        if return_residual:
            if residual is None:
                residual = out.new_zeros(())
            return out, residual
        return out


def build(config: NetworkConfig) -> Network:
    return Network(config)
