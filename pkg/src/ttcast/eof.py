"""Empirical orthogonal functions per depth slice and channel.

Each ``(depth, channel)`` slice of a ``T x D x H x W x C`` series is flattened
to a ``T x (H*W)`` matrix, centred on its temporal mean and factorized by SVD.
The leading ``P`` right singular vectors are the EOFs; the matching columns
of ``U @ diag(s)`` are the principal components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import VolumeSequence
from .errors import ConfigError, ContractError, NumericError, ShapeError

DEFAULT_PCS = 50


@dataclass
class EofBasis:
    eofs: np.ndarray             # D x C x P x (H*W), orthonormal rows per (d, c)
    singular_values: np.ndarray  # D x C x min(T, H*W), non-increasing
    mean: np.ndarray             # D x C x (H*W)
    spatial_shape: tuple

    @property
    def n_components(self) -> int:
        return self.eofs.shape[2]

    @property
    def depth(self) -> int:
        return self.eofs.shape[0]

    @property
    def channels(self) -> int:
        return self.eofs.shape[1]


@dataclass
class PcSequence:
    data: np.ndarray  # T x D x P x C
    basis: EofBasis | None
    time_step_hours: float = 12.0


def fit(s: np.ndarray, p: int):
    """Truncated SVD of ``s`` (``T x N``): returns ``(pcs, eofs, singular_values)``.

    ``pcs @ eofs`` is the best rank-``p`` approximation of ``s`` in the
    Frobenius norm. No centring happens here.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"expected a T x N matrix, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise NumericError("matrix contains non-finite values")
    if not 1 <= p <= min(s.shape):
        raise ConfigError(f"P={p} must lie in [1, min(T, H*W)={min(s.shape)}]")
    try:
        u, sv, vt = np.linalg.svd(s, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from None
    return u[:, :p] * sv[:p], vt[:p], sv


def _slices(x: np.ndarray):
    t, d, h, w, c = x.shape
    return np.asarray(x, dtype=np.float64).transpose(1, 4, 0, 2, 3).reshape(d, c, t, h * w)


def _as_array(x) -> np.ndarray:
    data = x.data if isinstance(x, VolumeSequence) else np.asarray(x)
    if data.ndim != 5:
        raise ShapeError(f"expected T x D x H x W x C, got shape {data.shape}")
    return data


def compress(x, p: int = DEFAULT_PCS, center: bool = True) -> PcSequence:
    data = _as_array(x)
    t, d, h, w, c = data.shape
    if not 1 <= p <= min(t, h * w):
        raise ConfigError(f"P={p} must lie in [1, min(T, H*W)={min(t, h * w)}]")
    slices = _slices(data)
    mean = slices.mean(axis=2) if center else np.zeros((d, c, h * w))
    pcs = np.empty((t, d, p, c))
    eofs = np.empty((d, c, p, h * w))
    svals = np.empty((d, c, min(t, h * w)))
    for di in range(d):
        for ci in range(c):
            pc, e, sv = fit(slices[di, ci] - mean[di, ci], p)
            pcs[:, di, :, ci] = pc
            eofs[di, ci] = e
            svals[di, ci] = sv
    basis = EofBasis(eofs, svals, mean, (h, w))
    step = x.time_step_hours if isinstance(x, VolumeSequence) else 12.0
    return PcSequence(pcs, basis, step)


def project(x, basis: EofBasis) -> PcSequence:
    """PCs of new data on a fitted basis (EOF rows are orthonormal)."""
    data = _as_array(x)
    t, d, h, w, c = data.shape
    if (h, w) != tuple(basis.spatial_shape) or (d, c) != (basis.depth, basis.channels):
        raise ShapeError(f"data {data.shape} does not match basis "
                         f"(D={basis.depth}, H x W={basis.spatial_shape}, C={basis.channels})")
    centred = _slices(data) - basis.mean[:, :, None, :]
    pcs = np.einsum("dctn,dcpn->tdpc", centred, basis.eofs)
    step = x.time_step_hours if isinstance(x, VolumeSequence) else 12.0
    return PcSequence(pcs, basis, step)


def reconstruct(pcs) -> VolumeSequence:
    basis = pcs.basis if isinstance(pcs, PcSequence) else None
    if basis is None:
        raise ContractError("reconstruction needs the EOF basis the PCs came from")
    return VolumeSequence(reconstruct_array(pcs.data, basis), pcs.time_step_hours)


def reconstruct_array(pcs: np.ndarray, basis: EofBasis) -> np.ndarray:
    """``... x D x P x C`` PCs back to ``... x D x H x W x C`` fields (float64)."""
    pcs = np.asarray(pcs, dtype=np.float64)
    if pcs.shape[-3:] != (basis.depth, basis.n_components, basis.channels):
        raise ShapeError(f"PC block {pcs.shape[-3:]} does not match basis "
                         f"{(basis.depth, basis.n_components, basis.channels)}")
    h, w = basis.spatial_shape
    fields = np.einsum("...dpc,dcpn->...dnc", pcs, basis.eofs)
    fields = fields + basis.mean.transpose(0, 2, 1)
    return fields.reshape(*pcs.shape[:-2], h, w, basis.channels)
