"""Binary file formats, all little-endian.

GSF (sequence file)::

    b"GPRS" | u32 version=1 | u32 S | u32 D | u32 C | f32[S*D*C] in (frame, depth, channel) order

with poses in a sibling CSV (``frame,utm_x,utm_y``, one row per frame).

NTC (named tensor container)::

    b"NTC1" | u32 count | count x (u32 name_len | name utf-8 | u32 rank | u32 dims[rank] | f32 data)
            | u32 meta_len | meta (utf-8 JSON)

Values pass through float32; arrays that are already float32-exact round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .gpr_sim import GprSequence

GSF_MAGIC = b"GPRS"
GSF_VERSION = 1
GSF_HEADER = struct.Struct("<4sIIII")
NTC_MAGIC = b"NTC1"
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


def pose_csv_path(gsf_path) -> Path:
    return Path(gsf_path).with_suffix(".csv")


def write_poses_csv(path, poses: np.ndarray, frame_ids=None) -> None:
    poses = np.asarray(poses, dtype=np.float64)
    ids = range(len(poses)) if frame_ids is None else frame_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "utm_x", "utm_y"])
        for i, (x, y) in zip(ids, poses):
            # repr keeps every bit of the float64 pose
            w.writerow([int(i), repr(float(x)), repr(float(y))])


def read_poses_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """``(frame_ids, poses)`` from a pose CSV."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"cannot read pose file {path}: {exc}") from exc
    if not rows or rows[0] != ["frame", "utm_x", "utm_y"]:
        raise FormatError(f"{path}: expected header frame,utm_x,utm_y")
    try:
        ids = np.array([int(r[0]) for r in rows[1:]], dtype=np.int64)
        poses = np.array([[float(r[1]), float(r[2])] for r in rows[1:]], dtype=np.float64).reshape(-1, 2)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed row ({exc})") from exc
    return ids, poses


def write_gsf(path, seq: GprSequence) -> None:
    """Write frames to ``path`` and poses to the sibling CSV."""
    frames = np.ascontiguousarray(seq.frames, dtype=_F32)
    Path(path).write_bytes(GSF_HEADER.pack(GSF_MAGIC, GSF_VERSION, *frames.shape) + frames.tobytes())
    write_poses_csv(pose_csv_path(path), seq.poses)


def read_gsf(path) -> GprSequence:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < GSF_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, S, D, C = GSF_HEADER.unpack_from(raw)
    if magic != GSF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != GSF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = GSF_HEADER.size + 4 * S * D * C
    if len(raw) != expected:
        raise FormatError(f"{path}: {len(raw)} bytes, header implies {expected}")
    frames = np.frombuffer(raw, dtype=_F32, offset=GSF_HEADER.size).reshape(S, D, C).astype(np.float64)
    ids, poses = read_poses_csv(pose_csv_path(path))
    if len(poses) != S or not np.array_equal(ids, np.arange(S)):
        raise FormatError(f"{pose_csv_path(path)}: expected frames 0..{S - 1}, got {len(poses)} rows")
    return GprSequence(frames, poses)


def write_ntc(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    parts = [NTC_MAGIC, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=_F32)
        bname = name.encode("utf-8")
        parts += [_U32.pack(len(bname)), bname, _U32.pack(arr.ndim)]
        parts += [_U32.pack(n) for n in arr.shape]
        parts.append(arr.tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts += [_U32.pack(len(blob)), blob]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def read_ntc(path) -> tuple[dict[str, np.ndarray], dict]:
    """``(tensors as float64 arrays, metadata)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    r = _Reader(raw, path)
    if r.take(4) != NTC_MAGIC:
        raise FormatError(f"{path}: not an NTC file")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        try:
            name = r.take(r.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: tensor name is not UTF-8") from exc
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * count), dtype=_F32).reshape(shape)
        tensors[name] = data.astype(np.float64)
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad metadata block ({exc})") from exc
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return tensors, meta


CHECKPOINT_KIND = "edenet-checkpoint"
DESCRIPTOR_KIND = "edenet-descriptors"


def save_checkpoint(path, ck) -> None:
    """Write a :class:`edenet.training.Checkpoint` as NTC; parameters must be float32-exact."""
    for name, arr in ck.tensors.items():
        if not np.array_equal(np.asarray(arr, dtype=_F32), arr):
            raise FormatError(f"parameter {name} is not float32-exact; snap it before saving")
    meta = {"kind": CHECKPOINT_KIND, "net_config": ck.net_config.to_dict(), "step": ck.step, **ck.extra}
    write_ntc(path, ck.tensors, meta)


def load_checkpoint(path):
    from .network import NetConfig
    from .training import Checkpoint

    tensors, meta = read_ntc(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise FormatError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
    extra = {k: v for k, v in meta.items() if k not in ("kind", "net_config", "step")}
    return Checkpoint(tensors, NetConfig.from_dict(meta["net_config"]), int(meta["step"]), extra)


def save_descriptors(path, descriptors: np.ndarray, poses: np.ndarray, frame_ids, meta: dict | None = None) -> None:
    """Descriptors as NTC, poses and frame ids in the sibling CSV."""
    write_ntc(path, {"descriptors": descriptors}, {"kind": DESCRIPTOR_KIND, **(meta or {})})
    write_poses_csv(pose_csv_path(path), poses, frame_ids)


def load_descriptors(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """``(descriptors, poses, frame_ids, meta)``."""
    tensors, meta = read_ntc(path)
    if meta.get("kind") != DESCRIPTOR_KIND or "descriptors" not in tensors:
        raise FormatError(f"{path}: not a descriptor file")
    desc = tensors["descriptors"]
    ids, poses = read_poses_csv(pose_csv_path(path))
    if desc.ndim != 2 or len(desc) != len(poses):
        raise FormatError(f"{path}: {desc.shape} descriptors but {len(poses)} pose rows")
    return desc, poses, ids, meta
