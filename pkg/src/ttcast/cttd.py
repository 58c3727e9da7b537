"""Convolutional tensor-train chains.

A chain of ``m`` cores factorizes a large state-to-state kernel. Core ``l``
has shape ``K x K x R_l x R_{l+1}``. :func:`apply` evaluates the chain
sequentially; :func:`compose` materializes the equivalent dense kernel and
exists only as a test oracle (its size grows with ``m``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ShapeError
from .tensor_core import conv2d


@dataclass
class CttdChain:
    cores: list  # torch tensors or arrays, K x K x R_l x R_{l+1}

    def __post_init__(self):
        if not self.cores:
            raise ShapeError("a chain needs at least one core")
        for l, core in enumerate(self.cores):
            if len(core.shape) != 4 or core.shape[0] != core.shape[1]:
                raise ShapeError(f"core {l} must be K x K x R_in x R_out, got {tuple(core.shape)}")
            if l and core.shape[2] != self.cores[l - 1].shape[3]:
                raise ShapeError(
                    f"core {l} input rank {core.shape[2]} != core {l - 1} output rank "
                    f"{self.cores[l - 1].shape[3]}"
                )

    @property
    def order(self) -> int:
        return len(self.cores)

    @property
    def rank_vector(self) -> tuple[int, ...]:
        return tuple(int(c.shape[2]) for c in self.cores) + (int(self.cores[-1].shape[3]),)

    @property
    def kernel_sizes(self) -> tuple[int, ...]:
        return tuple(int(c.shape[0]) for c in self.cores)


def apply(chain: CttdChain, inputs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Run the chain over per-core feature maps.

    ``V`` starts at zero; at each core the matching input is added and the
    sum is convolved: ``V <- core_l * (V + U_l)``. Returns the final ``V``.
    """
    if len(inputs) != chain.order:
        raise ShapeError(f"chain of order {chain.order} needs {chain.order} inputs, got {len(inputs)}")
    v = None
    for l, (core, u) in enumerate(zip(chain.cores, inputs)):
        if u.shape[-1] != core.shape[2]:
            raise ShapeError(f"input {l} has {u.shape[-1]} channels, core expects {core.shape[2]}")
        v = conv2d(u if v is None else v + u, core)
    return v


def _full_conv2d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full (untruncated) 2D convolution of two kernels along the spatial axes."""
    ka, kb = a.shape[0], b.shape[0]
    out = np.zeros((ka + kb - 1, ka + kb - 1), dtype=np.float64)
    for i in range(kb):
        for j in range(kb):
            out[i:i + ka, j:j + ka] += b[i, j] * a
    return out


def compose(chain: CttdChain) -> np.ndarray:
    """Dense kernel equivalent to the whole chain.

    Slice ``[:, :, r1, r_last]`` is the sum over all intermediate rank paths
    of the full convolution of the cores along that path. Its spatial extent
    is ``sum(K_l - 1) + 1``.
    """
    cores = [np.asarray(c.detach().cpu() if torch.is_tensor(c) else c, dtype=np.float64)
             for c in chain.cores]
    acc = cores[0]
    for core in cores[1:]:
        k_new = acc.shape[0] + core.shape[0] - 1
        nxt = np.zeros((k_new, k_new, acc.shape[2], core.shape[3]))
        for r_in in range(acc.shape[2]):
            for r_mid in range(acc.shape[3]):
                for r_out in range(core.shape[3]):
                    nxt[:, :, r_in, r_out] += _full_conv2d(
                        acc[:, :, r_in, r_mid], core[:, :, r_mid, r_out])
        acc = nxt
    return acc


def param_count(chain: CttdChain) -> int:
    return int(sum(np.prod(c.shape) for c in chain.cores))


def chain_param_count(m: int, k: int, ranks: Sequence[int]) -> int:
    """Parameter count of an ``m``-core chain with rank vector ``ranks`` (length m+1)."""
    if len(ranks) != m + 1:
        raise ShapeError(f"rank vector must have {m + 1} entries, got {len(ranks)}")
    return sum(k * k * ranks[l] * ranks[l + 1] for l in range(m))


def dense_equivalent_count(m: int, k: int, ranks: Sequence[int]) -> int:
    """Size of the unfactorized higher-order kernel the chain stands in for.

    One ``K x K`` spatial mode per order plus the two boundary ranks:
    ``K**(2m) * R_1 * R_{m+1}``. Equals the chain count when ``m == 1``.
    """
    if len(ranks) != m + 1:
        raise ShapeError(f"rank vector must have {m + 1} entries, got {len(ranks)}")
    return (k * k) ** m * ranks[0] * ranks[-1]
