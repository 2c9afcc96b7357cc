"""Command-line interface: ``ivvae <command> [flags]``.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import io
from .autoencoder import ModelConfig, VideoVAE, sample_posterior, LatentPosterior
from .errors import (
    ConfigurationError,
    DataError,
    IncompatibleCheckpointError,
    InvalidFrameCountError,
    InvalidInputError,
    IVVAEError,
    ShapeError,
    StaleCacheError,
    UndefinedMetricError,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
VARIANT_NAMES = {"baseline": "baseline-causal", "gcconv": "baseline-gc", "ivvae": "iv-vae"}
COMMANDS = ("train-image", "inflate", "train-video", "encode", "decode", "reconstruct",
            "stream-reconstruct", "eval", "per-frame-profile", "motion-score", "curate", "compare")


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


def _resolution(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like HxW, got {text!r}") from None


def _bins(text: str) -> list[float]:
    try:
        return [math.inf if t.strip() in ("inf", "+inf") else float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bins must be comma-separated edges, got {text!r}") from None


def _cache_dir() -> Optional[Path]:
    d = os.environ.get("IVVAE_CACHE_DIR")
    if not d:
        return None
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _side_file(out: Path, suffix: str) -> Path:
    """Intermediate artifact path: in IVVAE_CACHE_DIR when set, else beside ``out``."""
    base = _cache_dir() or out.parent
    return base / (out.name + suffix)


def _emit(obj):
    print(json.dumps(obj, default=lambda o: "inf" if o == math.inf else str(o)))


def _load_config(path) -> dict:
    if path is None:
        return {}
    from .training import load_yaml_config

    return load_yaml_config(path)


def _read_tensor(path) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(io.read_video(path)))


def _check_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise NumericError(f"{what} contains non-finite values")


# --------------------------------------------------------------------------
# Commands


def cmd_train_image(a) -> dict:
    from .data import SyntheticVideos, data_source_from_dir
    from .training import TrainConfig, train_image_vae

    doc = _load_config(a.config)
    model_doc = dict(doc.get("model", {}))
    model_doc["variant"] = "image"
    if a.z is not None:
        model_doc["z"] = a.z
    model_doc.setdefault("z", 4)
    train_doc = dict(doc.get("train", {}))
    train_doc.update(stage="image", frames=1)
    if a.resolution:
        train_doc["resolution"] = a.resolution
    if a.seed is not None:
        train_doc["seed"] = a.seed
    if a.deterministic:
        train_doc["deterministic"] = True
    if a.steps is not None:
        train_doc["steps"] = a.steps
    cfg = TrainConfig.from_dict(train_doc)
    data = data_source_from_dir(a.inp, 1) if a.inp else SyntheticVideos(1, cfg.resolution, seed=cfg.seed)
    out = Path(a.out)
    log = _side_file(out, ".losses.csv")
    if log.exists():
        log.unlink()
    res = train_image_vae(data, cfg, model_config=ModelConfig.from_dict(model_doc), log_path=log)
    io.save_model(res.model, out, {"stage": "image", "steps": cfg.steps, "seed": cfg.seed})
    return {"checkpoint": str(out), "loss_log": str(log), "steps": cfg.steps,
            "final_total": res.history[-1]["total"] if res.history else None}


def cmd_inflate(a) -> dict:
    from .ktc import inflate_image_vae, init_ktc_from_image_vae

    if not a.model:
        raise UsageError("inflate needs --model (an image VAE checkpoint)")
    image = io.load_model(a.model)
    variant = VARIANT_NAMES[a.variant or "ivvae"]
    doc = image.config.to_dict()
    doc["variant"] = variant
    doc["z"] = a.z if a.z is not None else (2 * image.config.z if variant == "iv-vae" else image.config.z)
    cfg_doc = _load_config(a.config).get("model", {})
    doc.update({k: v for k, v in cfg_doc.items() if k in ("inflation_placement",)})
    cfg = ModelConfig.from_dict(doc)
    model = init_ktc_from_image_vae(image, cfg) if variant == "iv-vae" else inflate_image_vae(image, cfg)
    io.save_model(model, a.out, {"stage": "init", "from": str(a.model)})
    return {"checkpoint": str(a.out), "variant": variant, "z": cfg.z}


def cmd_train_video(a) -> dict:
    from .data import SyntheticVideos, data_source_from_dir
    from .training import TrainConfig, train_video_vae

    if not a.model:
        raise UsageError("train-video needs --model (an inflated or KTC-initialized checkpoint)")
    model = io.load_model(a.model)
    doc = dict(_load_config(a.config).get("train", {}))
    doc["stage"] = "video"
    for key, val in (("frames", a.frames), ("resolution", a.resolution), ("seed", a.seed), ("steps", a.steps)):
        if val is not None:
            doc[key] = val
    if a.deterministic:
        doc["deterministic"] = True
    cfg = TrainConfig.from_dict(doc)
    data = (data_source_from_dir(a.inp, cfg.frames) if a.inp
            else SyntheticVideos(cfg.frames, cfg.resolution, seed=cfg.seed))
    out = Path(a.out)
    log = _side_file(out, ".losses.csv")
    if log.exists():
        log.unlink()
    res = train_video_vae(data, model, cfg, log_path=log)
    io.save_model(res.model, out, {"stage": "video", "steps": cfg.steps, "seed": cfg.seed})
    return {"checkpoint": str(out), "loss_log": str(log), "steps": cfg.steps,
            "final_total": res.history[-1]["total"] if res.history else None}


def _need(a, *names):
    for n in names:
        if getattr(a, n) in (None, []):
            raise UsageError(f"{a.command} needs --{n.replace('inp', 'in').replace('_', '-')}")


def cmd_encode(a) -> dict:
    from .autoencoder import encode

    _need(a, "model", "inp", "out")
    model = io.load_model(a.model)
    x = _read_tensor(a.inp).to(next(model.parameters()).dtype)
    with torch.no_grad():
        post = encode(x, model)
    z = post.mean if a.seed is None else sample_posterior(post, a.seed)
    _check_finite(z, "latent")
    io.write_raw_video(a.out, z)
    return {"latent": str(a.out), "shape": list(z.shape)}


def cmd_decode(a) -> dict:
    from .autoencoder import decode

    _need(a, "model", "inp", "out")
    model = io.load_model(a.model)
    z = _read_tensor(a.inp).to(next(model.parameters()).dtype)
    with torch.no_grad():
        y = decode(z, model)
    _check_finite(y, "reconstruction")
    io.write_video(a.out, y.clamp(-1, 1))
    return {"video": str(a.out), "shape": list(y.shape)}


def _reconstruct(a, mode: str) -> dict:
    from .metrics import evaluate, write_report
    from .streaming import overlap_reconstruct, single_reconstruct, stream_reconstruct

    _need(a, "model", "inp", "out")
    model = io.load_model(a.model)
    x = _read_tensor(a.inp).to(next(model.parameters()).dtype)
    progress = []

    def record(rec):
        progress.append({"chunk": rec.index, "frames": rec.frames, "seconds": rec.seconds})
        print(json.dumps({"progress": progress[-1]}), file=sys.stderr)

    if mode == "single":
        y = single_reconstruct(x, model)
    elif mode == "cache":
        y = stream_reconstruct(x, model, on_chunk=record)
    else:
        if a.clip_len is None:
            raise UsageError("--mode overlap needs --clip-len")
        y = overlap_reconstruct(x, model, a.clip_len, on_chunk=record)
    _check_finite(y, "reconstruction")
    out = Path(a.out)
    io.write_video(out, y)
    report_path = _side_file(out, ".metrics.json")
    write_report(report_path, [evaluate(x, y.clamp(-1, 1), video_id=Path(a.inp).name)])
    return {"video": str(out), "report": str(report_path), "mode": mode, "chunks": len(progress) or 1}


def cmd_reconstruct(a) -> dict:
    return _reconstruct(a, a.mode or "single")


def cmd_stream_reconstruct(a) -> dict:
    return _reconstruct(a, a.mode or "cache")


def _pair(a):
    _need(a, "inp", "recon")
    x, y = io.read_video(a.inp), io.read_video(a.recon)
    if x.shape != y.shape:
        raise DataError(f"reference {x.shape} and reconstruction {y.shape} differ in shape")
    return x, y


def cmd_eval(a) -> dict:
    from .metrics import evaluate, write_report

    x, y = _pair(a)
    rep = evaluate(x, y, video_id=Path(a.inp).name)
    if a.out:
        write_report(a.out, [rep])
    return rep.to_dict()


def cmd_per_frame_profile(a) -> dict:
    from .metrics import per_position_ssim, ssim_frames, to_unit_range

    x, y = _pair(a)
    ux, uy = to_unit_range(x), to_unit_range(y)
    frames = ssim_frames(ux, uy)[0]
    pos = per_position_ssim(ux, uy)
    if a.out:
        with open(a.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["position", "ssim"])
            for p, v in enumerate(pos):
                w.writerow([p, repr(v)])
    return {"per_position_ssim": pos, "std": float(np.std(pos)), "per_frame_ssim": frames.tolist()}


def cmd_motion_score(a) -> dict:
    from .motion import FlowFileEstimator, MotionRecord, motion_score

    _need(a, "inp")
    interval = a.frame_interval or 1
    p = Path(a.inp)
    if p.is_dir() and not list(p.glob("*.png")):
        paths = sorted(q for q in p.iterdir() if q.suffix == ".ivv" or q.is_dir())
    else:
        paths = [p]
    if not paths:
        raise DataError(f"{p}: no videos found")
    records = []
    for path in paths:
        est = None
        if a.flow_dir:
            est = FlowFileEstimator(sorted(Path(a.flow_dir, path.stem).glob("*.flo")))
        v = io.read_video(path)
        records.append(MotionRecord(path.stem, motion_score((v + 1) / 2, interval, est), interval))
    if a.out:
        io.write_motion_csv(a.out, records)
    return {"records": [{"id": r.video_id, "score": r.score, "frame_interval": r.frame_interval}
                        for r in records]}


def cmd_curate(a) -> dict:
    from .motion import DEFAULT_BINS, curate_uniform

    _need(a, "inp", "n")
    records = io.read_motion_csv(a.inp)
    ids = curate_uniform(records, a.bins or DEFAULT_BINS, a.n, a.seed or 0)
    if a.out:
        Path(a.out).write_text("".join(i + "\n" for i in ids))
    return {"selected": ids}


def cmd_compare(a) -> dict:
    """Side-by-side metric table of several reports, and loss curves of
    several training logs, written under ``--out``."""
    from .metrics import read_report
    from .training import smoothed

    _need(a, "out")
    if not a.reports and not a.logs:
        raise UsageError("compare needs --reports and/or --logs")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    result = {}
    if a.reports:
        rows = []
        for path in a.reports:
            _, agg = read_report(path)
            pps = agg.per_position_ssim or [float("nan")] * 4
            rows.append([Path(path).name, agg.psnr, agg.ssim, agg.info_preservation, *pps])
        header = ["run", "psnr", "ssim", "info_preservation"] + [f"ssim_pos{i}" for i in range(4)]
        with open(out / "metrics_table.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)
        result["table"] = str(out / "metrics_table.csv")
    if a.logs:
        curves = {Path(p).name: io.read_loss_log(p) for p in a.logs}
        n = max(len(c) for c in curves.values())
        with open(out / "loss_curves.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step"] + [f"{k}_smoothed_total" for k in curves])
            sm = {k: smoothed([r["total"] for r in c]) for k, c in curves.items()}
            for s in range(n):
                w.writerow([s] + [repr(float(sm[k][s])) if s < len(sm[k]) else "" for k in curves])
        result["curves"] = str(out / "loss_curves.csv")
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt

            fig, ax = plt.subplots(figsize=(6, 4))
            for k, v in sm.items():
                ax.plot(v, label=k)
            ax.set_xlabel("step")
            ax.set_ylabel("smoothed total loss")
            ax.legend()
            fig.savefig(out / "loss_curves.png", dpi=100)
            plt.close(fig)
            result["plot"] = str(out / "loss_curves.png")
        except ImportError:
            pass
    return result


HANDLERS = {
    "train-image": cmd_train_image, "inflate": cmd_inflate, "train-video": cmd_train_video,
    "encode": cmd_encode, "decode": cmd_decode, "reconstruct": cmd_reconstruct,
    "stream-reconstruct": cmd_stream_reconstruct, "eval": cmd_eval,
    "per-frame-profile": cmd_per_frame_profile, "motion-score": cmd_motion_score,
    "curate": cmd_curate, "compare": cmd_compare,
}


def _shared(p: argparse.ArgumentParser):
    p.add_argument("--model", help="checkpoint file")
    p.add_argument("--config", help="YAML config with optional model: and train: sections")
    p.add_argument("--in", dest="inp", help="input file or directory")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--deterministic", action="store_true", help="deterministic kernels, single thread")
    p.add_argument("--mode", choices=("single", "cache", "overlap"), help="reconstruction mode")
    p.add_argument("--clip-len", type=int, help="clip length for --mode overlap")
    p.add_argument("--frames", type=int, help="frames per training clip")
    p.add_argument("--resolution", type=_resolution, help="HxW")
    p.add_argument("--z", type=int, help="latent channels")
    p.add_argument("--variant", choices=tuple(VARIANT_NAMES), help="video model variant")
    p.add_argument("--frame-interval", type=int, help="frame interval for motion scores")
    p.add_argument("--bins", type=_bins, help="comma-separated motion bin edges, e.g. 0,2,4,inf")
    p.add_argument("--n", type=int, help="number of videos to select")
    p.add_argument("--steps", type=int, help="training steps (overrides the config)")
    p.add_argument("--recon", help="reconstruction to compare against --in")
    p.add_argument("--flow-dir", help="directory of external flow files, one subdirectory per video")
    p.add_argument("--reports", nargs="+", help="metric report JSON files")
    p.add_argument("--logs", nargs="+", help="loss log CSV files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivvae", description="Video VAE toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    for name in COMMANDS:
        doc = (HANDLERS[name].__doc__ or "").strip().split("\n")[0] or None
        _shared(sub.add_parser(name, help=doc))
    return parser


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    if args.deterministic:
        from .training import set_determinism

        set_determinism(args.seed or 0, True)
    elif args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        _emit(HANDLERS[args.command](args))
        return EXIT_OK
    except (UsageError, ConfigurationError) as e:
        print(f"ivvae {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IncompatibleCheckpointError, InvalidInputError, InvalidFrameCountError,
            ShapeError, FileNotFoundError, UndefinedMetricError) as e:
        print(f"ivvae {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, StaleCacheError, IVVAEError, FloatingPointError, AssertionError) as e:
        print(f"ivvae {args.command}: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(run_command())
