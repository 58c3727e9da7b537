"""Recurrent cells: first-order ConvLSTM and the higher-order tensor-train cell.

Cells are stateless modules. State travels explicitly through ``step`` so a
single set of weights can drive concurrent rollouts. Gate channels are
ordered (input, forget, candidate, output) along the ``4C`` axis.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from . import cttd
from .errors import ConfigError
from .physics import PhysicsSpec
from .tensor_core import conv2d, conv3d, uniform_kernel

FORGET_BIAS = 1.0


def _gate_bias(hidden: int) -> nn.Parameter:
    b = torch.zeros(4 * hidden)
    b[hidden:2 * hidden] = FORGET_BIAS
    return nn.Parameter(b)


def lstm_update(gates, memory):
    """Split pre-activations into (I, F, C~, O) and advance memory and hidden."""
    i, f, g, o = gates.chunk(4, dim=-1)
    i, f, o = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o)
    memory = f * memory + i * torch.tanh(g)
    return o * torch.tanh(memory), memory


class LstmState(NamedTuple):
    hidden: torch.Tensor
    memory: torch.Tensor


class ConvLstmCell(nn.Module):
    def __init__(self, in_channels: int, hidden: int, kernel: int = 3,
                 generator: torch.Generator | None = None):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel}")
        g = generator or torch.Generator().manual_seed(0)
        self.in_channels, self.hidden, self.kernel = in_channels, hidden, kernel
        self.w_input = nn.Parameter(uniform_kernel(
            (kernel, kernel, in_channels, 4 * hidden), kernel * kernel * in_channels, g))
        self.t_hidden = nn.Parameter(uniform_kernel(
            (kernel, kernel, hidden, 4 * hidden), kernel * kernel * hidden, g))
        self.bias = _gate_bias(hidden)

    def init_state(self, batch_shape, height, width) -> LstmState:
        z = torch.zeros(*batch_shape, height, width, self.hidden,
                        dtype=self.w_input.dtype)
        return LstmState(z, z)

    def step(self, x, state: LstmState):
        gates = conv2d(x, self.w_input, self.bias) + conv2d(state.hidden, self.t_hidden)
        hidden, memory = lstm_update(gates, state.memory)
        return hidden, LstmState(hidden, memory), None


class PittState(NamedTuple):
    history: tuple  # previous hidden states, newest first, length n
    memory: torch.Tensor


class PittConvLstmCell(nn.Module):
    """Higher-order ConvLSTM cell with a tensor-train state-to-state path.

    The last ``steps`` hidden states feed ``order`` sliding windows. Each
    window is folded to ``rank`` channels by a 3D kernel, mixed by a 1x1 map
    ``J`` (the physics-constrained update), and the ``order`` results drive a
    convolutional tensor-train chain whose output adds to the gate
    pre-activations. With ``physics.kind == "none"`` the ``J`` maps are fixed
    identities and the cell is the plain tensor-train ConvLSTM.
    """

    def __init__(self, in_channels: int, hidden: int, kernel: int = 3, order: int = 3,
                 steps: int = 3, rank: int = 8, physics: PhysicsSpec | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel}")
        if not 1 <= order <= steps:
            raise ConfigError(f"need 1 <= order <= steps, got order={order}, steps={steps}")
        g = generator or torch.Generator().manual_seed(0)
        self.in_channels, self.hidden, self.kernel = in_channels, hidden, kernel
        self.order, self.steps, self.rank = order, steps, rank
        self.window = steps - order + 1
        self.physics = physics if physics is not None else PhysicsSpec("none")

        self.w_input = nn.Parameter(uniform_kernel(
            (kernel, kernel, in_channels, 4 * hidden), kernel * kernel * in_channels, g))
        self.bias = _gate_bias(hidden)
        fan = kernel * kernel * self.window * hidden
        self.window_kernels = nn.ParameterList(
            nn.Parameter(uniform_kernel((kernel, kernel, self.window, hidden, rank), fan, g))
            for _ in range(order)
        )
        eye = torch.eye(rank)
        if self.physics.kind == "none":
            self.register_buffer("j_weight", eye.expand(order, rank, rank).clone())
            self.register_buffer("j_bias", torch.zeros(order, rank))
        else:
            self.j_weight = nn.Parameter(eye.expand(order, rank, rank).clone())
            self.j_bias = nn.Parameter(torch.zeros(order, rank))
        ranks = [rank] * order + [4 * hidden]
        self.cores = nn.ParameterList(
            nn.Parameter(uniform_kernel((kernel, kernel, ranks[l], ranks[l + 1]),
                                        kernel * kernel * ranks[l], g))
            for l in range(order)
        )

    @property
    def chain(self) -> cttd.CttdChain:
        return cttd.CttdChain(list(self.cores))

    def init_state(self, batch_shape, height, width) -> PittState:
        z = torch.zeros(*batch_shape, height, width, self.hidden,
                        dtype=self.w_input.dtype)
        return PittState((z,) * self.steps, z)

    def window_map(self, history):
        """Per-order maps from sliding windows over the hidden history.

        Window ``o`` (1-based) stacks lags ``o .. o + n - m`` oldest first along
        a time axis and applies its 3D kernel.
        """
        maps = []
        for o in range(self.order):
            lags = history[o:o + self.window]
            stacked = torch.stack(lags[::-1], dim=-2)
            maps.append(conv3d(stacked, self.window_kernels[o]))
        return maps

    def physics_update(self, maps):
        """Apply the 1x1 ``J`` maps; return updated maps and this step's residual."""
        tildes = [m @ self.j_weight[o] + self.j_bias[o] for o, m in enumerate(maps)]
        if self.physics.kind == "none":
            return tildes, None
        return tildes, self.physics.step_loss(maps, tildes)

    def step(self, x, state: PittState):
        maps = self.window_map(state.history)
        tildes, residual = self.physics_update(maps)
        gates = conv2d(x, self.w_input, self.bias) + cttd.apply(self.chain, tildes)
        hidden, memory = lstm_update(gates, state.memory)
        history = (hidden,) + state.history[:-1]
        return hidden, PittState(history, memory), residual
