"""Bit-exact binary tensor files and the scene manifest.

Tensor file layout (all little-endian):

    magic   4 bytes  b"U4DT"
    version u16      currently 1
    ndim    u16
    shape   ndim * u32
    dtype   u8       0 = f32, 1 = u8, 2 = u16
    data    row-major buffer, product(shape) elements

The manifest is UTF-8 JSON indexing every per-frame perception input plus the
per-scene config block; see ``docs/manifest.md`` for the schema.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SceneConfig
from .errors import (
    BadBBox,
    DanglingPath,
    IoFailure,
    MalformedHeader,
    MissingField,
    ShapeMismatch,
    UnsupportedDtype,
)

MAGIC = b"U4DT"
VERSION = 1

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("uint16"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_tensor(path, array: np.ndarray):
    """Write ``array`` to ``path`` in the binary tensor format."""
    arr = np.asarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise UnsupportedDtype(f"dtype {arr.dtype} not supported (use f32/u8/u16)")
    header = MAGIC + struct.pack("<HH", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", _DTYPE_CODES[arr.dtype])
    try:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_tensor(path) -> np.ndarray:
    """Read a tensor file, validating header and payload size."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise MalformedHeader(f"{path}: bad magic or truncated header")
    version, ndim = struct.unpack_from("<HH", blob, 4)
    if version != VERSION:
        raise MalformedHeader(f"{path}: unsupported version {version}")
    offset = 8
    if len(blob) < offset + 4 * ndim + 1:
        raise MalformedHeader(f"{path}: truncated shape block")
    shape = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    (code,) = struct.unpack_from("<B", blob, offset)
    offset += 1
    if code not in _CODE_DTYPES:
        raise UnsupportedDtype(f"{path}: unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    expected = count * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise ShapeMismatch(
            f"{path}: declared {expected} data bytes, found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(shape)


@dataclass
class TrackEntry:
    """One person's state in one frame."""

    frame: int
    present: bool
    bbox: tuple[float, float, float, float] | None = None  # x_min,y_min,x_max,y_max
    mask_path: str | None = None
    keypoints_path: str | None = None
    theta: np.ndarray | None = None  # n_b x 4 unit quaternions, root first
    beta: np.ndarray | None = None   # 10-vector
    root: np.ndarray | None = None   # provisional world root translation


@dataclass
class PersonTrack:
    person_id: int
    entries: dict[int, TrackEntry] = field(default_factory=dict)


@dataclass
class SceneManifest:
    root_dir: Path
    n_frames: int
    height: int
    width: int
    cameras: dict[str, dict]
    frames: list[dict]
    tracks: list[PersonTrack]
    body_template: str | None
    config: SceneConfig
    ground_truth: str | None = None

    def resolve(self, rel: str) -> Path:
        return self.root_dir / rel

    def track_by_id(self, person_id: int) -> PersonTrack:
        for track in self.tracks:
            if track.person_id == person_id:
                return track
        raise KeyError(person_id)


def _require(mapping: dict, key: str, ctx: str):
    if key not in mapping:
        raise MissingField(f"{ctx}: missing field '{key}'")
    return mapping[key]


def _check_path(root: Path, rel: str, ctx: str) -> str:
    if not (root / rel).exists():
        raise DanglingPath(f"{ctx}: path '{rel}' does not resolve")
    return rel


def load_manifest(path) -> SceneManifest:
    """Parse and validate a scene manifest JSON file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{path}: invalid JSON ({exc})") from exc
    root = path.parent

    height = int(_require(data, "height", "manifest"))
    width = int(_require(data, "width", "manifest"))
    frames = _require(data, "frames", "manifest")
    cameras = _require(data, "cameras", "manifest")

    for idx, frame in enumerate(frames):
        ctx = f"frame {idx}"
        for key in ("image", "point_map", "confidence"):
            _check_path(root, _require(frame, key, ctx), ctx)
        if frame.get("sky_mask"):
            _check_path(root, frame["sky_mask"], ctx)
        cam_id = _require(frame, "camera_id", ctx)
        if cam_id not in cameras:
            raise MissingField(f"{ctx}: camera_id '{cam_id}' not in cameras table")

    tracks = []
    for tdata in data.get("tracks", []):
        pid = int(_require(tdata, "person_id", "track"))
        track = PersonTrack(person_id=pid)
        for edata in tdata.get("frames", []):
            ctx = f"person {pid} frame {edata.get('frame')}"
            t = int(_require(edata, "frame", ctx))
            present = bool(edata.get("present", False))
            entry = TrackEntry(frame=t, present=present)
            if "bbox" in edata and edata["bbox"] is not None:
                x0, y0, x1, y1 = (float(v) for v in edata["bbox"])
                if not (0 <= x0 <= x1 < width and 0 <= y0 <= y1 < height):
                    raise BadBBox(f"{ctx}: bbox {edata['bbox']} outside [0,{width})x[0,{height})")
                entry.bbox = (x0, y0, x1, y1)
            if edata.get("mask"):
                entry.mask_path = _check_path(root, edata["mask"], ctx)
            if edata.get("keypoints"):
                entry.keypoints_path = _check_path(root, edata["keypoints"], ctx)
            if present:
                theta = _require(edata, "theta", ctx)
                beta = _require(edata, "beta", ctx)
                entry.theta = np.asarray(theta, dtype=np.float64).reshape(-1, 4)
                entry.beta = np.asarray(beta, dtype=np.float64).reshape(-1)
            if edata.get("root") is not None:
                entry.root = np.asarray(edata["root"], dtype=np.float64).reshape(3)
            track.entries[t] = entry
        tracks.append(track)
    tracks.sort(key=lambda tr: tr.person_id)

    cfg = SceneConfig.from_dict(data.get("config", {}))
    template = data.get("body_template")
    if template:
        _check_path(root, template, "manifest")

    return SceneManifest(
        root_dir=root,
        n_frames=len(frames),
        height=height,
        width=width,
        cameras=cameras,
        frames=frames,
        tracks=tracks,
        body_template=template,
        config=cfg,
        ground_truth=data.get("ground_truth"),
    )
