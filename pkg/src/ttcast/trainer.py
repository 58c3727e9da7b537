"""Objective, ADAM, the teacher-forcing / learning-rate schedule, fitting and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as vseq
from . import eof, metrics
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .network import Network, NetworkConfig

log = logging.getLogger(__name__)

CONTEXT = 10
HORIZON = 10


@dataclass
class TrainConfig:
    initial_lr: float = 1e-4
    lr_decay_factor: float = 0.98
    lr_decay_every: int = 5
    patience: int = 20
    ramp_epochs: int = 50
    stop_patience: int = 50
    improvement_tol: float = 1e-5
    lam: float = 0.1
    batch_size: int = 4
    max_epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    context: int = CONTEXT
    horizon: int = HORIZON

    def __post_init__(self):
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ConfigError(f"lr_decay_factor must lie in (0, 1), got {self.lr_decay_factor}")
        if self.patience < 1 or self.stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.ramp_epochs < 1 or self.lr_decay_every < 1:
            raise ConfigError("ramp_epochs and lr_decay_every must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")


# Desk-scale training knobs: the full preset's lr and patience suit long
# runs on the full network; the small network needs a faster schedule to
# converge within 50 epochs.
TRAIN_PRESETS = {
    "paper": {},
    "desk": {"initial_lr": 3e-3, "batch_size": 16, "patience": 5, "ramp_epochs": 10,
             "stop_patience": 20, "max_epochs": 50},
}


def train_preset(name: str, **overrides) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    return TrainConfig(**{**TRAIN_PRESETS[name], **overrides})


# --- objective -------------------------------------------------------------

def total_loss(pred, truth, physics_residual=0.0, lam: float = 0.0):
    """``MAE + MSE + lam * residual``; returns ``(total, mae, mse)``."""
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and truth {tuple(truth.shape)} differ")
    diff = pred - truth
    l1 = diff.abs().mean()
    l2 = (diff * diff).mean()
    return l1 + l2 + lam * physics_residual, l1, l2


# --- ADAM ------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected ADAM update, applied to ``params`` in place."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name!r} has shape {tuple(g.shape)}, "
                                 f"parameter {tuple(p.shape)}")
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    return state


# --- schedule --------------------------------------------------------------

@dataclass
class ScheduleState:
    """Bookkeeping for teacher forcing, learning-rate decay and stopping.

    Phases: ``teacher`` (ratio 1), ``sampling`` (ratio ramps to 0) and
    ``decay`` (ramp continues, learning rate decays). Each phase change
    needs ``patience`` consecutive epochs without improvement.
    """
    epoch: int = 0
    best: float = math.inf
    stagnant: int = 0
    phase: str = "teacher"
    ramp_pos: int = 0
    decay_pos: int = 0
    sampling_ratio: float = 1.0
    lr: float = 1e-4
    stop: bool = False
    history: list = field(default_factory=list)

    @classmethod
    def initial(cls, config: TrainConfig) -> "ScheduleState":
        return cls(lr=config.initial_lr)


def schedule_tick(val_loss: float, state: ScheduleState, config: TrainConfig) -> ScheduleState:
    """Record one epoch's validation loss; set ratio and lr for the next epoch."""
    state.history.append(float(val_loss))
    state.epoch += 1
    if val_loss < state.best - config.improvement_tol:
        state.best = float(val_loss)
        state.stagnant = 0
    else:
        state.stagnant += 1

    if state.phase != "teacher":
        state.ramp_pos += 1
    if state.phase == "decay":
        state.decay_pos += 1

    if state.stagnant >= config.patience:
        if state.phase == "teacher":
            state.phase, state.stagnant = "sampling", 0
        elif state.phase == "sampling":
            state.phase, state.stagnant = "decay", 0
    if state.phase != "teacher":
        state.sampling_ratio = max(0.0, 1.0 - state.ramp_pos / config.ramp_epochs)
    if state.phase == "decay":
        state.lr = config.initial_lr * config.lr_decay_factor ** (
            state.decay_pos // config.lr_decay_every)
    state.stop = (state.epoch >= config.max_epochs
                  or (state.phase == "decay" and state.stagnant >= config.stop_patience))
    return state


# --- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"PITT"
CKPT_VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8", "u8": "u1"}


@dataclass
class Checkpoint:
    network_config: dict
    train_config: dict
    params: dict                      # name -> ndarray (f32)
    adam_step: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    basis: eof.EofBasis | None = None
    norm: vseq.NormStats | None = None
    rng_state: bytes = b""
    extra: dict = field(default_factory=dict)


def _arrays_of(ck: Checkpoint):
    for name in sorted(ck.params):
        yield f"param/{name}", "f32", ck.params[name]
    for name in sorted(ck.adam_m):
        yield f"adam_m/{name}", "f32", ck.adam_m[name]
        yield f"adam_v/{name}", "f32", ck.adam_v[name]
    if ck.basis is not None:
        yield "eof/eofs", "f64", ck.basis.eofs
        yield "eof/singular_values", "f64", ck.basis.singular_values
        yield "eof/mean", "f64", ck.basis.mean
    if ck.rng_state:
        yield "rng/torch", "u8", np.frombuffer(ck.rng_state, dtype=np.uint8)


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, dt, arr in _arrays_of(ck):
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(np.shape(arr)),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    meta = {
        "format": "PITT",
        "version": CKPT_VERSION,
        "network_config": ck.network_config,
        "train_config": ck.train_config,
        "adam_step": ck.adam_step,
        "schedule": ck.schedule,
        "basis_spatial_shape": list(ck.basis.spatial_shape) if ck.basis is not None else None,
        "norm": ck.norm.to_dict() if ck.norm is not None else None,
        "extra": ck.extra,
        "tensors": entries,
        "payload_bytes": len(payload),
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    head = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob
    head += b"\0" * ((-len(head)) % 8)
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(ck: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    tmp.replace(path)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:4] != CKPT_MAGIC:
        raise FormatError("bad magic, not a checkpoint", "magic")
    version, mlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", "version")
    if len(buf) < 12 + mlen:
        raise FormatError("file truncated inside metadata", "metadata")
    try:
        meta = json.loads(buf[12:12 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata ({exc})", "metadata") from None
    start = 12 + mlen
    start += (-start) % 8
    nbytes = meta.get("payload_bytes", -1)
    if len(buf) != start + nbytes + 4:
        raise FormatError(f"expected {start + nbytes + 4} bytes, file has {len(buf)}", "payload")
    payload = buf[start:start + nbytes]
    (crc,) = struct.unpack_from("<I", buf, start + nbytes)
    if zlib.crc32(payload) != crc:
        raise FormatError("CRC-32 mismatch", "digest")

    arrays = {}
    for e in meta["tensors"]:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise FormatError(f"unknown dtype {e['dtype']!r}", e["name"])
        count = math.prod(e["shape"]) if e["shape"] else 1
        if count * np.dtype(dt).itemsize != e["nbytes"]:
            raise FormatError("shape does not match byte count", e["name"])
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).copy()

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    basis = None
    if "eof/eofs" in arrays:
        basis = eof.EofBasis(arrays["eof/eofs"], arrays["eof/singular_values"],
                             arrays["eof/mean"], tuple(meta["basis_spatial_shape"]))
    norm = vseq.NormStats.from_dict(meta["norm"]) if meta.get("norm") else None
    rng = arrays["rng/torch"].tobytes() if "rng/torch" in arrays else b""
    return Checkpoint(meta["network_config"], meta["train_config"], group("param/"),
                      meta["adam_step"], group("adam_m/"), group("adam_v/"),
                      meta["schedule"], basis, norm, rng, meta.get("extra", {}))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def network_from_checkpoint(ck: Checkpoint) -> Network:
    cfg = dict(ck.network_config)
    net = Network(NetworkConfig(**cfg))
    load_params(net, ck.params)
    return net


def load_params(net: Network, params: dict) -> None:
    own = dict(net.named_parameters())
    missing = set(own) ^ set(params)
    if missing:
        raise FormatError(f"parameter sets differ: {sorted(missing)[:5]}", "params")
    with torch.no_grad():
        for name, p in own.items():
            src = torch.from_numpy(np.asarray(params[name]))
            if tuple(src.shape) != tuple(p.shape):
                raise FormatError(f"shape {tuple(src.shape)} != {tuple(p.shape)}", name)
            p.copy_(src.to(p.dtype))


# --- data preparation ------------------------------------------------------

@dataclass
class Prepared:
    train: np.ndarray        # N x 20 x D x P x C, normalized PCs
    val: np.ndarray
    basis: eof.EofBasis
    norm: vseq.NormStats
    val_raw_pcs: np.ndarray  # validation PCs before normalization


def prepare(seq, n_pcs: int, train_fraction: float = 0.8,
            window: int = CONTEXT + HORIZON) -> Prepared:
    """Split, fit EOFs on the training span, project validation, normalize, window."""
    train, val = vseq.split(seq, train_fraction, window)
    pcs_train = eof.compress(train, n_pcs)
    pcs_val = eof.project(val, pcs_train.basis)
    norm = vseq.fit_normalizer(pcs_train.data)
    tr, _ = vseq.normalize(pcs_train.data, norm)
    va, _ = vseq.normalize(pcs_val.data, norm)
    return Prepared(vseq.windows(tr, window).astype(np.float32),
                    vseq.windows(va, window).astype(np.float32),
                    pcs_train.basis, norm, pcs_val.data)


# --- fitting ---------------------------------------------------------------

LOG_FIELDS = ["epoch", "lr", "sampling_ratio", "train_l1", "train_l2", "train_ldp",
              "val_mse", "val_ssim"]


_PHYSICS_ONLY = ("j_weight", "j_bias", "physics.")


def _trainable(net, lam: float | None = None):
    """Parameters the optimizer updates.

    With ``lam == 0`` the physics term is gone, so the update maps ``J`` and
    the PDE coefficients stay frozen and a PITT cell trains exactly like the
    plain tensor-train cell.
    """
    params = {n: p for n, p in net.named_parameters() if p.requires_grad}
    if lam == 0:
        params = {n: p for n, p in params.items()
                  if not any(tag in n for tag in _PHYSICS_ONLY)}
    return params


def evaluate_windows(net: Network, windows: np.ndarray, config: TrainConfig,
                     batch: int = 64):
    """Autoregressive validation: returns (total loss, mse, ssim, predictions)."""
    x = torch.from_numpy(windows).to(torch.get_default_dtype())
    ctx, tgt = x[:, :config.context], x[:, config.context:config.context + config.horizon]
    preds, resid = [], 0.0
    with torch.no_grad():
        for i in range(0, len(x), batch):
            p, r = net.rollout(ctx[i:i + batch], config.horizon, return_residual=True)
            preds.append(p)
            resid += float(r) * len(p)
        pred = torch.cat(preds)
        loss, _, l2 = total_loss(pred, tgt, resid / len(x), config.lam)
    pn, tn = pred.numpy(), tgt.numpy()
    L = metrics.dynamic_range_of(tn)
    s = np.mean([metrics.ssim(pn[i, k], tn[i, k], L)
                 for i in range(len(pn)) for k in range(pn.shape[1])])
    return float(loss), float(l2), float(s), pn


def persistence_mse(windows: np.ndarray, config: TrainConfig) -> float:
    """Validation MSE of repeating the last context frame over the horizon."""
    last = windows[:, config.context - 1:config.context].astype(np.float64)
    tgt = windows[:, config.context:config.context + config.horizon].astype(np.float64)
    return metrics.mse(np.broadcast_to(last, tgt.shape), tgt)


@dataclass
class FitResult:
    log: list
    best_val_mse: float
    best_val_loss: float
    best_epoch: int
    checkpoint: Checkpoint


def make_checkpoint(net, adam: AdamState, sched: ScheduleState, config: TrainConfig,
                    gen: torch.Generator, basis=None, norm=None, extra=None) -> Checkpoint:
    names = list(_trainable(net, config.lam))
    return Checkpoint(
        network_config=net.config.to_dict(),
        train_config=asdict(config),
        params={n: p.detach().cpu().numpy().astype(np.float32).copy()
                for n, p in net.named_parameters()},
        adam_step=adam.step,
        adam_m={n: adam.m[n].detach().numpy().astype(np.float32).copy()
                for n in names if n in adam.m},
        adam_v={n: adam.v[n].detach().numpy().astype(np.float32).copy()
                for n in names if n in adam.v},
        schedule=asdict(sched),
        basis=basis, norm=norm,
        rng_state=bytes(gen.get_state().numpy().tobytes()),
        extra=dict(extra or {}),
    )


def fit(net: Network, train_windows: np.ndarray, val_windows: np.ndarray,
        config: TrainConfig, out_dir=None, basis=None, norm=None,
        resume: Checkpoint | None = None, epochs: int | None = None,
        extra: dict | None = None) -> FitResult:
    """Minimize ``MAE + MSE + lam * L_dp`` over mini-batches of windows.

    Writes ``train_log.csv``, ``last.ckpt`` (every epoch) and ``best.ckpt``
    (lowest validation loss) into ``out_dir`` when given. ``epochs`` caps the
    number of epochs run in this call (used to split a run for resuming).
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for cell in net.layers:
        if hasattr(cell, "physics"):
            cell.physics.lam = config.lam
    params = _trainable(net, config.lam)
    gen = torch.Generator().manual_seed(config.seed)
    adam = AdamState()
    sched = ScheduleState.initial(config)
    rows: list[dict] = []
    best = (math.inf, math.inf, -1)
    best_ck = None
    if resume is not None:
        load_params(net, resume.params)
        adam = AdamState(resume.adam_step,
                         {n: torch.from_numpy(v.copy()).to(params[n].dtype)
                          for n, v in resume.adam_m.items()},
                         {n: torch.from_numpy(v.copy()).to(params[n].dtype)
                          for n, v in resume.adam_v.items()})
        sched = ScheduleState(**resume.schedule)
        gen.set_state(torch.from_numpy(np.frombuffer(resume.rng_state, dtype=np.uint8).copy()))
        rows = list(resume.extra.get("log", []))
        b = resume.extra.get("best", [math.inf, math.inf, -1])
        best = (float(b[0]), float(b[1]), int(b[2]))

    x_all = torch.from_numpy(train_windows).to(torch.get_default_dtype())
    n = len(x_all)
    ran = 0
    while not sched.stop and (epochs is None or ran < epochs):
        order = torch.randperm(n, generator=gen)
        sums = np.zeros(3)
        for i in range(0, n, config.batch_size):
            xb = x_all[order[i:i + config.batch_size]]
            ctx = xb[:, :config.context]
            tgt = xb[:, config.context:config.context + config.horizon]
            pred, resid = net.rollout(ctx, config.horizon, teacher=tgt,
                                      sampling_ratio=sched.sampling_ratio, generator=gen,
                                      return_residual=True)
            loss, l1, l2 = total_loss(pred, tgt, resid, config.lam)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {sched.epoch + 1}; "
                                   "last good checkpoint retained")
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
            grads = {k: torch.zeros_like(p) if g is None else g
                     for (k, p), g in zip(params.items(), grads)}
            adam_step(params, grads, adam, sched.lr, config.beta1, config.beta2, config.eps)
            sums += np.array([l1.item(), l2.item(), float(resid.detach())]) * len(xb)
        val_loss, val_mse, val_ssim, _ = evaluate_windows(net, val_windows, config)
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {sched.epoch + 1}")
        row = {"epoch": sched.epoch + 1, "lr": sched.lr, "sampling_ratio": sched.sampling_ratio,
               "train_l1": sums[0] / n, "train_l2": sums[1] / n, "train_ldp": sums[2] / n,
               "val_mse": val_mse, "val_ssim": val_ssim}
        rows.append(row)
        log.info("epoch %d loss %.6f val_mse %.6f", row["epoch"], row["train_l1"] + row["train_l2"],
                 val_mse)
        improved = val_loss < best[0]
        schedule_tick(val_loss, sched, config)
        if improved:
            best = (val_loss, val_mse, row["epoch"])
        state_extra = {**(extra or {}), "log": rows, "best": list(best)}
        ck = make_checkpoint(net, adam, sched, config, gen, basis, norm, state_extra)
        if improved:
            best_ck = ck
        if out is not None:
            save_checkpoint(ck, out / "last.ckpt")
            if improved:
                save_checkpoint(ck, out / "best.ckpt")
            write_log(rows, out / "train_log.csv")
        ran += 1
    if best_ck is None:
        best_ck = make_checkpoint(net, adam, sched, config, gen, basis, norm,
                                  {**(extra or {}), "log": rows, "best": list(best)})
    return FitResult(rows, best[1], best[0], best[2], best_ck)


def write_log(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(r[k])) if k != "epoch" else int(r[k]) for k in LOG_FIELDS})
