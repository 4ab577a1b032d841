"""File codecs: PPM frames and PFM depth (via OpenCV), pose/loss/metrics CSV and weight checkpoints."""
import csv
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import cv2
import numpy as np

from app.errors import DomainError, FormatError
from app.geometry import Pose
from app.image import ImageBuffer, ScalarMap

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DCKPT001"
# Pose files written with ~6 significant digits are accepted and re-orthonormalized.
POSE_READ_TOL = 1e-5


def _imread(path) -> np.ndarray:
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise FormatError(path, 0, "unreadable or unsupported image file")
    return data


def _imwrite(path, data: np.ndarray) -> None:
    if not cv2.imwrite(str(path), data):
        raise FormatError(path, 0, "OpenCV could not encode the image")


def write_ppm(path, img: ImageBuffer) -> None:
    data = img.data
    if img.channels == 1:
        data = np.repeat(data, 3, axis=2)
    pixels = np.rint(data * 255.0).astype(np.uint8)
    _imwrite(path, cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR))


def read_ppm(path) -> ImageBuffer:
    pixels = _imread(path)
    if pixels.dtype != np.uint8:
        raise FormatError(path, 0, f"only 8-bit PPM is supported, got {pixels.dtype}")
    if pixels.ndim == 2:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_GRAY2RGB)
    else:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB)
    return ImageBuffer(pixels.astype(np.float64) / 255.0)


def write_pfm(path, data: np.ndarray) -> None:
    """2-D arrays become single-channel ``Pf``, RGB arrays ``PF``."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
    _imwrite(path, np.ascontiguousarray(data))


def read_pfm(path) -> np.ndarray:
    data = _imread(path)
    if data.dtype != np.float32:
        raise FormatError(path, 0, f"expected float PFM data, got {data.dtype}")
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_BGR2RGB)
    return data.astype(np.float64)


def write_depth(path, depth: ScalarMap) -> None:
    write_pfm(path, depth.data)


def read_depth(path) -> ScalarMap:
    data = read_pfm(path)
    if data.ndim != 2:
        raise FormatError(path, 0, "depth files must be single-channel (Pf)")
    return ScalarMap(data)


def write_poses_csv(path, poses: Sequence[Pose]) -> None:
    """One pose per line: the 3x4 ``[R | t]`` flattened row-major."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for pose in poses:
            writer.writerow([repr(float(x)) for x in pose.matrix().ravel()])


def _nearest_rotation(rotation: np.ndarray) -> np.ndarray:
    if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > POSE_READ_TOL:
        raise DomainError("rotation is not orthonormal")
    u, _, vt = np.linalg.svd(rotation)
    nearest = u @ vt
    if np.linalg.det(nearest) < 0:
        raise DomainError("rotation determinant is not +1")
    return nearest


def read_poses_csv(path) -> List[Pose]:
    poses = []
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 12:
                raise FormatError(path, line_no, f"expected 12 values per line, got {len(row)}")
            try:
                values = np.array([float(x) for x in row]).reshape(3, 4)
                poses.append(Pose(_nearest_rotation(values[:, :3]), values[:, 3]))
            except ValueError as exc:
                raise FormatError(path, line_no, str(exc))
    return poses


def write_rows_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(x) if isinstance(x, float) else x for x in row])


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: Mapping = None) -> None:
    """Magic, 8-byte little-endian header length, JSON header, then fp64 payload."""
    entries = []
    offset = 0
    for name, array in tensors.items():
        array = np.asarray(array, dtype=np.float64)
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        offset += array.size
    header = json.dumps({"tensors": entries, "metadata": dict(metadata or {})}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for array in tensors.values():
            fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    logger.info(f"Checkpoint written: {path} ({offset} values)")


def read_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(path, 0, "bad checkpoint magic")
    if len(raw) < 16:
        raise FormatError(path, 8, "truncated header length")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(path, 16, f"invalid JSON header: {exc}")
    base = 16 + header_len
    if len(raw) < base:
        raise FormatError(path, len(raw), "truncated JSON header")
    if (len(raw) - base) % 8:
        raise FormatError(path, base, f"payload of {len(raw) - base} bytes is not a whole number of fp64 values")
    payload = np.frombuffer(raw[base:], dtype="<f8")
    tensors = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > payload.size:
            raise FormatError(path, base + 8 * start, f"tensor {entry['name']} exceeds payload")
        tensors[entry["name"]] = payload[start:start + size].reshape(entry["shape"]).astype(np.float64)
    return tensors, header.get("metadata", {})
