"""On-disk formats.

Checkpoint (``.ckpt``)::

    b"IVCK" | uint64 LE manifest length | manifest (JSON, UTF-8) | blob

The manifest holds the format version, the model config, free-form
metadata and a tensor index (name, dtype, shape, offset, nbytes); the blob
is the little-endian tensor bytes in index order.  Serialization is
canonical, so ``save(load(c))`` reproduces ``c`` byte for byte.

Raw video (``.ivv``)::

    b"IVV1" | uint8 dtype code | uint32 LE C, T, H, W | row-major payload

Flow (``.flo``-like)::

    b"IVFL" | uint32 LE H, W | float32 LE u (H*W) | float32 LE v (H*W)
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .errors import DataError, IncompatibleCheckpointError

CKPT_MAGIC = b"IVCK"
CKPT_VERSION = 1
VIDEO_MAGIC = b"IVV1"
FLOW_MAGIC = b"IVFL"
VIDEO_DTYPES = {1: np.dtype("<f4")}
_TENSOR_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "int64": np.dtype("<i8")}


# --------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    config: dict
    tensors: dict  # name -> numpy array, in index order
    meta: dict = field(default_factory=dict)

    def manifest_and_blob(self) -> tuple[bytes, bytes]:
        index, chunks, offset = [], [], 0
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            key = arr.dtype.name
            if key not in _TENSOR_DTYPES:
                raise IncompatibleCheckpointError(f"unsupported tensor dtype {key} for {name!r}")
            data = np.ascontiguousarray(arr, dtype=_TENSOR_DTYPES[key]).tobytes()
            index.append({"name": name, "dtype": key, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
        manifest = {"format_version": CKPT_VERSION, "model_config": self.config,
                    "meta": self.meta, "tensors": index}
        text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return text, b"".join(chunks)

    def to_bytes(self) -> bytes:
        manifest, blob = self.manifest_and_blob()
        return CKPT_MAGIC + struct.pack("<Q", len(manifest)) + manifest + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 12 or data[:4] != CKPT_MAGIC:
            raise DataError("not a checkpoint file (bad magic)")
        (n,) = struct.unpack("<Q", data[4:12])
        if 12 + n > len(data):
            raise DataError("truncated checkpoint manifest")
        try:
            manifest = json.loads(data[12:12 + n].decode("utf-8"))
        except ValueError as e:
            raise DataError(f"corrupt checkpoint manifest: {e}") from None
        if manifest.get("format_version") != CKPT_VERSION:
            raise IncompatibleCheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
        blob = memoryview(data)[12 + n:]
        tensors, seen, expected = {}, set(), 0
        for entry in manifest["tensors"]:
            name = entry["name"]
            if name in seen:
                raise DataError(f"tensor {name!r} appears twice")
            seen.add(name)
            dt = _TENSOR_DTYPES.get(entry["dtype"])
            if dt is None:
                raise DataError(f"unknown dtype {entry['dtype']!r}")
            count = int(np.prod(entry["shape"], dtype=np.int64))
            if entry["offset"] != expected or entry["nbytes"] != count * dt.itemsize:
                raise DataError(f"inconsistent index entry for {name!r}")
            end = entry["offset"] + entry["nbytes"]
            if end > len(blob):
                raise DataError("truncated checkpoint blob")
            arr = np.frombuffer(blob[entry["offset"]:end], dtype=dt).reshape(entry["shape"]).copy()
            tensors[name] = arr
            expected = end
        if expected != len(blob):
            raise DataError("trailing bytes after checkpoint blob")
        return cls(manifest["model_config"], tensors, manifest.get("meta", {}))

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except FileNotFoundError:
            raise DataError(f"no such checkpoint: {path}") from None


def checkpoint_from_model(model, meta: Optional[dict] = None) -> Checkpoint:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    return Checkpoint(model.config.to_dict(), tensors, dict(meta or {}))


def model_from_checkpoint(ckpt: Checkpoint):
    from .autoencoder import ModelConfig, VideoVAE

    model = VideoVAE(ModelConfig.from_dict(ckpt.config))
    own = model.state_dict()
    missing = set(own) - set(ckpt.tensors)
    extra = set(ckpt.tensors) - set(own)
    if missing or extra:
        raise IncompatibleCheckpointError(
            f"checkpoint does not match the model (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})"
        )
    dtypes = {a.dtype for a in ckpt.tensors.values()}
    if dtypes == {np.dtype("<f8")}:
        model = model.double()
    state = {}
    for k, v in own.items():
        arr = ckpt.tensors[k]
        if tuple(arr.shape) != tuple(v.shape):
            raise IncompatibleCheckpointError(f"{k}: shape {arr.shape} vs model {tuple(v.shape)}")
        state[k] = torch.from_numpy(arr)
    model.load_state_dict(state)
    return model


def save_model(model, path, meta: Optional[dict] = None):
    checkpoint_from_model(model, meta).save(path)


def load_model(path):
    return model_from_checkpoint(Checkpoint.load(path))


# --------------------------------------------------------------------------
# Videos


def write_raw_video(path, video):
    v = video.detach().cpu().numpy() if hasattr(video, "detach") else np.asarray(video)
    if v.ndim != 4:
        raise DataError(f"raw video must be [C,T,H,W], got {v.shape}")
    header = VIDEO_MAGIC + struct.pack("<B4I", 1, *v.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_raw_video(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"no such video file: {path}") from None
    if len(data) < 21 or data[:4] != VIDEO_MAGIC:
        raise DataError(f"{path}: not a raw video file")
    code, *dims = struct.unpack("<B4I", data[4:21])
    dt = VIDEO_DTYPES.get(code)
    if dt is None:
        raise DataError(f"{path}: unknown dtype code {code}")
    payload = data[21:]
    if len(payload) != int(np.prod(dims)) * dt.itemsize:
        raise DataError(f"{path}: payload has {len(payload)} bytes, header promises {dims}")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(np.float32)


def read_png_dir(path) -> np.ndarray:
    """Frames ``*.png`` of a directory in name order -> ``[3, T, H, W]`` in [-1, 1]."""
    from PIL import Image

    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise DataError(f"{path}: no PNG frames")
    frames = []
    for f in files:
        with Image.open(f) as im:
            frames.append(np.asarray(im.convert("RGB"), dtype=np.float32))
    if len({fr.shape for fr in frames}) != 1:
        raise DataError(f"{path}: frames differ in size")
    v = np.stack(frames).transpose(3, 0, 1, 2)
    return v / 127.5 - 1.0


def write_png_dir(path, video):
    from PIL import Image

    v = video.detach().cpu().numpy() if hasattr(video, "detach") else np.asarray(video)
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    pix = np.clip(np.rint((v + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 3, 0)
    for t, frame in enumerate(pix):
        Image.fromarray(frame).save(out / f"{t:05d}.png")


def read_video(path) -> np.ndarray:
    """Raw video file or PNG frame directory."""
    p = Path(path)
    if p.is_dir():
        return read_png_dir(p)
    return read_raw_video(p)


def write_video(path, video):
    p = Path(path)
    if p.suffix == "" or p.is_dir():
        write_png_dir(p, video)
    else:
        write_raw_video(p, video)


# --------------------------------------------------------------------------
# Flow files


def write_flow(path, flow):
    u = np.ascontiguousarray(flow.u, dtype="<f4")
    v = np.ascontiguousarray(flow.v, dtype="<f4")
    Path(path).write_bytes(FLOW_MAGIC + struct.pack("<2I", *u.shape) + u.tobytes() + v.tobytes())


def read_flow(path):
    from .motion import FlowField

    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FLOW_MAGIC:
        raise DataError(f"{path}: not a flow file")
    h, w = struct.unpack("<2I", data[4:12])
    n = h * w * 4
    if len(data) != 12 + 2 * n:
        raise DataError(f"{path}: flow payload does not match {h}x{w}")
    u = np.frombuffer(data[12:12 + n], dtype="<f4").reshape(h, w)
    v = np.frombuffer(data[12 + n:], dtype="<f4").reshape(h, w)
    return FlowField(u, v)


# --------------------------------------------------------------------------
# CSV


def write_motion_csv(path, records: Iterable):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "score", "frame_interval"])
        for r in records:
            w.writerow([r.video_id, repr(float(r.score)), r.frame_interval])


def read_motion_csv(path) -> list:
    from .motion import MotionRecord

    out = []
    try:
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                out.append(MotionRecord(row["id"], float(row["score"]), int(row["frame_interval"])))
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed motion CSV ({e})") from None
    return out


LOSS_FIELDS = ("step", "mae", "kl", "perceptual", "total")


class LossLog:
    """Append-only CSV loss log."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(LOSS_FIELDS)

    def append(self, row: dict):
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([row["step"]] + [repr(float(row[k])) for k in LOSS_FIELDS[1:]])


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{"step": int(r["step"]), **{k: float(r[k]) for k in LOSS_FIELDS[1:]}}
                for r in csv.DictReader(f)]
