"""Frame-wise MSE and SSIM in PC space and in reconstructed physical space."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError

WINDOW = 11
SIGMA = 1.5


def _check(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    return pred, truth


def mse(pred, truth) -> float:
    pred, truth = _check(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def mse_per_frame(pred, truth) -> np.ndarray:
    """MSE within each index of the leading (time) axis."""
    pred, truth = _check(pred, truth)
    d = (pred - truth) ** 2
    return d.reshape(d.shape[0], -1).mean(axis=1)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return g


def window_size_for(shape, size: int = WINDOW) -> int:
    """Largest odd window no bigger than ``size`` that fits the frame."""
    fit = min(size, *shape[:2])
    return fit if fit % 2 else fit - 1


def _filter_valid(x, g):
    # separable valid-mode correlation along the first two axes
    k = len(g)
    h, w = x.shape[:2]
    rows = sum(g[i] * x[i:h - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim(a, b, dynamic_range: float, window: int = WINDOW, sigma: float = SIGMA) -> float:
    """Mean SSIM over valid Gaussian-window positions.

    Frames are ``H x W`` or ``H x W x C``; channels are scored separately and
    averaged. The window shrinks to fit frames smaller than ``window``.
    """
    a, b = _check(a, b)
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], dynamic_range, window, sigma)
                              for c in range(a.shape[-1])]))
    if a.ndim != 2:
        raise ShapeError(f"frames must be H x W or H x W x C, got {a.shape}")
    size = window_size_for(a.shape, window)
    g = gaussian_window(size, sigma)
    L = dynamic_range if dynamic_range > 0 else 1.0
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    mu_ab = mu_a * mu_b
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_ab
    num = (2.0 * mu_ab + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def dynamic_range_of(truth) -> float:
    truth = np.asarray(truth)
    L = float(truth.max() - truth.min())
    return L if L > 0 else 1.0


@dataclass
class SpaceReport:
    mse: np.ndarray
    ssim: np.ndarray
    window: int
    window_shrunk: bool

    @property
    def mean_mse(self) -> float:
        return float(self.mse.mean())

    @property
    def mean_ssim(self) -> float:
        return float(self.ssim.mean())


@dataclass
class EvalReport:
    horizon: int
    spaces: dict = field(default_factory=dict)  # "pc" / "physical" -> SpaceReport

    @property
    def primary(self) -> SpaceReport:
        return self.spaces.get("physical", self.spaces["pc"])

    def rows(self):
        for space, rep in self.spaces.items():
            for i in range(self.horizon):
                yield i, space, float(rep.mse[i]), float(rep.ssim[i])

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "space", "mse", "ssim"])
            for i, space, m, s in self.rows():
                w.writerow([i, space, repr(m), repr(s)])


def score_space(pred, truth) -> SpaceReport:
    """``pred``/``truth`` are ``T x ... x H x W x C``; extra axes are averaged."""
    pred, truth = _check(pred, truth)
    L = dynamic_range_of(truth)
    t = pred.shape[0]
    frames_p = pred.reshape(t, -1, *pred.shape[-3:])
    frames_t = truth.reshape(t, -1, *truth.shape[-3:])
    scores = np.array([
        np.mean([ssim(frames_p[i, j], frames_t[i, j], L) for j in range(frames_p.shape[1])])
        for i in range(t)
    ])
    win = window_size_for(pred.shape[-3:-1])
    return SpaceReport(mse_per_frame(pred, truth), scores, win, win < WINDOW)


def evaluate(pred, truth, basis=None, csv_path=None) -> EvalReport:
    """Score PC-space forecasts ``T x D x P x C``; with a basis also physical space.

    In PC space each frame is a ``D x P`` image with ``C`` channels; in physical
    space each depth slice is an ``H x W`` image and scores average over depth.
    """
    pred, truth = _check(pred, truth)
    report = EvalReport(horizon=pred.shape[0])
    report.spaces["pc"] = score_space(pred, truth)
    if basis is not None:
        from .eof import reconstruct_array
        report.spaces["physical"] = score_space(reconstruct_array(pred, basis),
                                                 reconstruct_array(truth, basis))
    if csv_path is not None:
        report.write_csv(csv_path)
    return report


def persistence(context, horizon: int) -> np.ndarray:
    """Repeat the last context frame ``horizon`` times (leading axis is time)."""
    last = np.asarray(context)[-1]
    return np.repeat(last[None], horizon, axis=0)
