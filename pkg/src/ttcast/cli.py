"""Command-line entry point: ``ttcast {gen-data,train,predict,evaluate,render,replay}``.

Settings resolve as flags over ``--config`` file over built-in defaults. The
resolved settings are written to a run manifest next to the outputs, and
``ttcast replay MANIFEST`` reruns a command from one.

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, data, eof, metrics, trainer
from .errors import ConfigError, ContractError, FormatError, NumericError, ShapeError
from .network import DESK_PCS, PAPER_PCS, build, preset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
PC_AXES = ("time", "depth", "pc", "unit", "channel")
LOG_FLOOR = 1e-6

# Heatmap colour ramp: piecewise linear between these (position, RGB) stops,
# from the smallest log-magnitude (dark blue) to the largest (dark red).
RAMP = (
    (0.00, (0, 0, 96)),
    (0.25, (0, 96, 255)),
    (0.50, (0, 224, 224)),
    (0.75, (255, 224, 0)),
    (1.00, (160, 0, 0)),
)

REQUIRED = object()

DEFAULTS = {
    "gen-data": {"kind": "wave", "shape": "200,4,16,16", "alpha": 0.1, "c2": 0.2,
                 "seed": 0, "substeps": 1, "out": REQUIRED},
    "train": {"data": REQUIRED, "cell": "pitt-wave", "preset": "desk", "pcs": None,
              "lambda": 0.1, "epochs": None, "seed": 0, "lr": None, "batch_size": None,
              "out_dir": REQUIRED},
    "predict": {"checkpoint": REQUIRED, "context": REQUIRED, "context_frames": 10,
                "horizon": 10, "out": REQUIRED},
    "evaluate": {"pred": REQUIRED, "truth": REQUIRED, "truth_start": 0, "basis_from": None,
                 "out_csv": REQUIRED},
    "render": {"in": REQUIRED, "frame": 0, "depth": 0, "scale": 8, "vmin": None,
               "vmax": None, "out": REQUIRED},
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttcast", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ttcast {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def command(name, help_):
        c = sub.add_parser(name, help=help_, argument_default=S)
        c.add_argument("--config", help="JSON file of settings (flags override it)")
        c.add_argument("--manifest", help="where to write the run manifest")
        return c

    c = command("gen-data", "write a synthetic diffusion/wave field as VSEQ1")
    c.add_argument("--kind", choices=("diffusion", "wave", "mixed"))
    c.add_argument("--shape", help="T,D,H,W")
    c.add_argument("--alpha", type=float)
    c.add_argument("--c2", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--substeps", type=int)
    c.add_argument("--out")

    c = command("train", "compress, split, normalize and fit a network")
    c.add_argument("--data")
    c.add_argument("--cell", choices=("convlstm", "tt", "pitt-diffusion", "pitt-wave"))
    c.add_argument("--preset", choices=("paper", "desk"))
    c.add_argument("--pcs", type=int)
    c.add_argument("--lambda", type=float)
    c.add_argument("--epochs", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--batch-size", type=int)
    c.add_argument("--out-dir")

    c = command("predict", "forecast from a checkpoint and a context sequence")
    c.add_argument("--checkpoint")
    c.add_argument("--context", help="VSEQ1 file; its last --context-frames frames are used")
    c.add_argument("--context-frames", type=int)
    c.add_argument("--horizon", type=int)
    c.add_argument("--out", help="PC-space output; the physical one gets a .physical suffix")

    c = command("evaluate", "per-frame MSE/SSIM report as CSV")
    c.add_argument("--pred")
    c.add_argument("--truth")
    c.add_argument("--truth-start", type=int, help="first truth frame matching pred frame 0")
    c.add_argument("--basis-from", help="checkpoint whose EOF basis links PC and physical space")
    c.add_argument("--out-csv")

    c = command("render", "log velocity-magnitude heatmap as a binary PPM")
    c.add_argument("--in")
    c.add_argument("--frame", type=int)
    c.add_argument("--depth", type=int)
    c.add_argument("--scale", type=int)
    c.add_argument("--vmin", type=float)
    c.add_argument("--vmax", type=float)
    c.add_argument("--out")

    c = sub.add_parser("replay", help="rerun a command from its manifest")
    c.add_argument("manifest_file")
    return p


def resolve(command: str, flags: dict, config_file=None) -> dict:
    """Defaults, then the config file, then explicit flags."""
    settings = dict(DEFAULTS[command])
    if config_file:
        try:
            loaded = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_file}: {exc}") from exc
        loaded = loaded.get(command, loaded)
        unknown = set(loaded) - set(settings)
        if unknown:
            raise ConfigError(f"unknown settings for {command}: {sorted(unknown)}")
        settings.update(loaded)
    settings.update(flags)
    missing = [k for k, v in settings.items() if v is REQUIRED]
    if missing:
        raise ConfigError(f"{command}: missing --{', --'.join(k.replace('_', '-') for k in missing)}")
    return settings


# --- commands: each returns (artifacts, dataset digest) --------------------

def _parse_shape(text):
    try:
        dims = tuple(int(v) for v in str(text).split(","))
    except ValueError as exc:
        raise ConfigError(f"--shape must be T,D,H,W integers, got {text!r}") from exc
    if len(dims) != 4:
        raise ConfigError(f"--shape needs 4 values T,D,H,W, got {text!r}")
    return dims


def cmd_gen_data(cfg):
    t, d, h, w = _parse_shape(cfg["shape"])
    seq = data.generate_synthetic(cfg["kind"], t, d, h, w, alpha=cfg["alpha"], c2=cfg["c2"],
                                  seed=cfg["seed"], substeps=cfg["substeps"])
    digest = data.save(seq, cfg["out"])
    print(f"wrote {cfg['out']} shape {'x'.join(map(str, seq.shape))} sha256 {digest}")
    return {"data": cfg["out"]}, digest


def cmd_train(cfg):
    seq = data.load(cfg["data"])
    digest = data.file_digest(cfg["data"])
    pcs = cfg["pcs"] or (PAPER_PCS if cfg["preset"] == "paper" else DESK_PCS)
    overrides = {"seed": cfg["seed"], "lam": cfg["lambda"]}
    for key, name in (("epochs", "max_epochs"), ("lr", "initial_lr"),
                      ("batch_size", "batch_size")):
        if cfg[key] is not None:
            overrides[name] = cfg[key]
    tcfg = trainer.train_preset(cfg["preset"], **overrides)
    # materialize preset-dependent defaults so the manifest is self-contained
    cfg.update(pcs=pcs, epochs=tcfg.max_epochs, lr=tcfg.initial_lr, batch_size=tcfg.batch_size)
    prep = trainer.prepare(seq, pcs)
    net = build(preset(cfg["preset"], cell=cfg["cell"], seed=cfg["seed"], lam=cfg["lambda"],
                       frame_shape=(seq.shape[1], pcs)))
    print(f"# cell {cfg['cell']} preset {cfg['preset']} parameters {net.param_count()} "
          f"pcs {pcs} train_windows {len(prep.train)} val_windows {len(prep.val)}")
    base = trainer.persistence_mse(prep.val, tcfg)
    out = Path(cfg["out_dir"])
    res = trainer.fit(net, prep.train, prep.val, tcfg, out_dir=out, basis=prep.basis,
                      norm=prep.norm, extra={"persistence_val_mse": base,
                                             "parameters": net.param_count()})
    print(f"best epoch {res.best_epoch} val_mse {res.best_val_mse:.6g} "
          f"persistence {base:.6g}")
    return {"best_checkpoint": str(out / "best.ckpt"), "last_checkpoint": str(out / "last.ckpt"),
            "log": str(out / "train_log.csv")}, digest


def _physical_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".physical" + out.suffix)


def _pc_sequence(pcs, step) -> data.VolumeSequence:
    return data.VolumeSequence(np.asarray(pcs)[:, :, :, None, :], step, PC_AXES)


def _require_basis(ck, path):
    if ck.basis is None or ck.norm is None:
        raise FormatError(f"checkpoint {path} carries no EOF basis/normalization", "basis")
    return ck.basis


def cmd_predict(cfg):
    if cfg["horizon"] < 1:
        raise ConfigError(f"--horizon must be >= 1, got {cfg['horizon']}")
    ck = trainer.load_checkpoint(cfg["checkpoint"])
    basis = _require_basis(ck, cfg["checkpoint"])
    net = trainer.network_from_checkpoint(ck)
    seq = data.load(cfg["context"])
    digest = data.file_digest(cfg["context"])
    n = cfg["context_frames"]
    warmup = net.config.steps if net.config.cell != "convlstm" else 1
    if n < warmup or len(seq) < n:
        raise ConfigError(f"need at least {max(n, warmup)} context frames (network warm-up "
                          f"{warmup}); file has {len(seq)}, asked for {n}")
    ctx = eof.project(seq.data[-n:], basis).data
    z, _ = data.normalize(ctx, ck.norm)
    with torch.no_grad():
        x = torch.from_numpy(z[None].astype(np.float32)).to(torch.get_default_dtype())
        pred = net.rollout(x, cfg["horizon"])[0].double().numpy()
    pcs = data.denormalize(pred, ck.norm)
    data.save(_pc_sequence(pcs, seq.time_step_hours), cfg["out"])
    phys = _physical_path(cfg["out"])
    data.save(data.VolumeSequence(eof.reconstruct_array(pcs, basis), seq.time_step_hours), phys)
    print(f"wrote {cfg['out']} and {phys} ({cfg['horizon']} frames)")
    return {"pcs": cfg["out"], "physical": str(phys)}, digest


def _spaces(seq, basis):
    """Return ``(pc, physical)`` arrays for a loaded file, either possibly None."""
    if "pc" in seq.axes:
        pcs = seq.data[:, :, :, 0, :].astype(np.float64)
        return pcs, (eof.reconstruct_array(pcs, basis) if basis is not None else None)
    phys = seq.data.astype(np.float64)
    return (eof.project(phys, basis).data if basis is not None else None), phys


def cmd_evaluate(cfg):
    basis = None
    if cfg["basis_from"]:
        basis = _require_basis(trainer.load_checkpoint(cfg["basis_from"]), cfg["basis_from"])
    pred, truth = data.load(cfg["pred"]), data.load(cfg["truth"])
    digest = data.file_digest(cfg["truth"])
    start, horizon = cfg["truth_start"], len(pred)
    if start < 0 or start + horizon > len(truth):
        raise ShapeError(f"truth has {len(truth)} frames; frames {start}..{start + horizon - 1} "
                         "are needed")
    truth = data.VolumeSequence(truth.data[start:start + horizon], truth.time_step_hours,
                                truth.axes)
    p_pc, p_phys = _spaces(pred, basis)
    t_pc, t_phys = _spaces(truth, basis)
    report = metrics.EvalReport(horizon)
    if p_pc is not None and t_pc is not None:
        report.spaces["pc"] = metrics.score_space(p_pc, t_pc)
    if p_phys is not None and t_phys is not None:
        report.spaces["physical"] = metrics.score_space(p_phys, t_phys)
    if not report.spaces:
        raise ConfigError("pred and truth live in different spaces; pass --basis-from")
    report.write_csv(cfg["out_csv"])
    for space, rep in report.spaces.items():
        print(f"{space}: mean mse {rep.mean_mse:.6g} mean ssim {rep.mean_ssim:.6g}")
    return {"csv": cfg["out_csv"]}, digest


def log_magnitude(frame) -> np.ndarray:
    """``lg(max(sqrt(u^2 + v^2), 1e-6))`` of an ``H x W x C`` frame (u, v = channels 0, 1)."""
    frame = np.asarray(frame, dtype=np.float64)
    mag = np.sqrt(np.sum(frame[..., :2] ** 2, axis=-1))
    return np.log10(np.maximum(mag, LOG_FLOOR))


def colorize(values, vmin=None, vmax=None) -> np.ndarray:
    """Map a 2D array onto ``RAMP``; a constant image gets the lowest colour."""
    lo = float(values.min()) if vmin is None else vmin
    hi = float(values.max()) if vmax is None else vmax
    t = np.zeros_like(values) if hi <= lo else np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    stops = np.array([s for s, _ in RAMP])
    colours = np.array([c for _, c in RAMP], dtype=np.float64)
    rgb = np.stack([np.interp(t, stops, colours[:, k]) for k in range(3)], axis=-1)
    return np.floor(rgb + 0.5).astype(np.uint8)


def ppm_bytes(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def cmd_render(cfg):
    seq = data.load(cfg["in"])
    digest = data.file_digest(cfg["in"])
    if "pc" in seq.axes:
        raise FormatError(f"{cfg['in']} holds PCs; render the .physical file", "axes")
    t, d = seq.shape[:2]
    if not 0 <= cfg["frame"] < t:
        raise ConfigError(f"--frame {cfg['frame']} out of range [0, {t})")
    if not 0 <= cfg["depth"] < d:
        raise ConfigError(f"--depth {cfg['depth']} out of range [0, {d})")
    if cfg["scale"] < 1:
        raise ConfigError("--scale must be >= 1")
    rgb = colorize(log_magnitude(seq.data[cfg["frame"], cfg["depth"]]), cfg["vmin"], cfg["vmax"])
    rgb = rgb.repeat(cfg["scale"], axis=0).repeat(cfg["scale"], axis=1)
    Path(cfg["out"]).write_bytes(ppm_bytes(rgb))
    print(f"wrote {cfg['out']} ({rgb.shape[1]}x{rgb.shape[0]})")
    return {"image": cfg["out"]}, digest


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "render": cmd_render}


def _manifest_path(command, cfg, explicit):
    if explicit:
        return Path(explicit)
    if command == "train":
        return Path(cfg["out_dir"]) / "manifest.json"
    out = cfg.get("out") or cfg.get("out_csv")
    return Path(str(out) + ".manifest.json")


def run(command: str, cfg: dict, manifest=None) -> dict:
    artifacts, digest = COMMANDS[command](cfg)
    record = {"tool": "ttcast", "version": __version__, "command": command, "config": cfg,
              "seed": cfg.get("seed"), "artifacts": artifacts, "dataset_digest": digest}
    path = _manifest_path(command, cfg, manifest)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


def replay(manifest_file) -> dict:
    try:
        record = json.loads(Path(manifest_file).read_text())
        command, cfg = record["command"], record["config"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"unreadable manifest {manifest_file}: {exc}", "manifest") from exc
    if command not in COMMANDS:
        raise FormatError(f"unknown command {command!r}", "command")
    return run(command, resolve(command, cfg), manifest_file)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            replay(args.manifest_file)
        else:
            flags = {k: v for k, v in vars(args).items()
                     if k not in ("command", "verbose", "config", "manifest")}
            cfg = resolve(args.command, flags, getattr(args, "config", None))
            run(args.command, cfg, getattr(args, "manifest", None))
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
