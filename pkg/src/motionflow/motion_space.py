"""Disentangled facial motion parameters and the implicit-keypoint transform.

A frame of motion is ``(expression, rotation, translation, scale)``: ``K``
per-keypoint expression offsets, three Euler angles, a translation and a
positive scale. Flattened it has ``3K + 7`` entries (70 for ``K = 21``) in the
fixed order expression, rotation, translation, scale.

Rotation convention: angles are ``(pitch, yaw, roll)`` in radians and

    R = Rx(pitch) @ Ry(yaw) @ Rz(roll)

with the usual right-handed elementary matrices. Keypoints are row vectors
and are rotated by right multiplication, ``x_c @ R``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DimensionError, ValidationError
from .validation import check_array

DEFAULT_NUM_KEYPOINTS = 21
DEFAULT_FPS = 25.0
EPS_DIV = 1e-8

_MSEQ_MAGIC = b"MSEQ"
_MSEQ_HEADER = struct.Struct("<4sIIIf")
_NORM_MAGIC = b"NORM"
_NORM_HEADER = struct.Struct("<4sII")


def motion_dim(num_keypoints: int = DEFAULT_NUM_KEYPOINTS) -> int:
    return 3 * num_keypoints + 7


def num_keypoints_for(dim: int) -> int:
    if dim < 10 or (dim - 7) % 3:
        raise DimensionError(f"{dim} is not a valid motion vector length (3K + 7)")
    return (dim - 7) // 3


# Field slices inside a flattened frame.
def expression_slice(k: int = DEFAULT_NUM_KEYPOINTS) -> slice:
    return slice(0, 3 * k)


def rotation_slice(k: int = DEFAULT_NUM_KEYPOINTS) -> slice:
    return slice(3 * k, 3 * k + 3)


def translation_slice(k: int = DEFAULT_NUM_KEYPOINTS) -> slice:
    return slice(3 * k + 3, 3 * k + 6)


def scale_index(k: int = DEFAULT_NUM_KEYPOINTS) -> int:
    return 3 * k + 6


@dataclass
class KeypointSet:
    points: np.ndarray

    def __post_init__(self):
        self.points = check_array(self.points, ndim=2, name="keypoints")
        if self.points.shape[0] < 1 or self.points.shape[1] != 3:
            raise DimensionError(f"keypoints must be K x 3 with K >= 1, got {self.points.shape}")

    @property
    def num_keypoints(self) -> int:
        return self.points.shape[0]

    def flatten(self) -> np.ndarray:
        return self.points.reshape(-1).copy()


@dataclass
class MotionParams:
    rotation: np.ndarray
    expression: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = check_array(self.rotation, shape=(3,), name="rotation")
        self.expression = check_array(self.expression, ndim=2, name="expression")
        if self.expression.shape[1] != 3:
            raise DimensionError(f"expression must be K x 3, got {self.expression.shape}")
        self.translation = check_array(self.translation, shape=(3,), name="translation")
        self.scale = float(self.scale)
        if not np.isfinite(self.scale):
            raise ValidationError("scale must be finite")
        if self.scale <= 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")

    @property
    def num_keypoints(self) -> int:
        return self.expression.shape[0]

    @classmethod
    def neutral(cls, num_keypoints: int = DEFAULT_NUM_KEYPOINTS) -> "MotionParams":
        return cls(np.zeros(3), np.zeros((num_keypoints, 3)), np.zeros(3), 1.0)

    def __eq__(self, other):
        if not isinstance(other, MotionParams):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.expression, other.expression)
            and np.array_equal(self.translation, other.translation)
            and self.scale == other.scale
        )


def rotation_matrix(angles) -> np.ndarray:
    """Rotation matrix for ``(pitch, yaw, roll)``; broadcasts over leading axes."""
    angles = np.asarray(angles, dtype=np.float64)
    pitch, yaw, roll = angles[..., 0], angles[..., 1], angles[..., 2]
    cx, sx = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cz, sz = np.cos(roll), np.sin(roll)
    one, zero = np.ones_like(cx), np.zeros_like(cx)
    rx = np.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(*cx.shape, 3, 3)
    ry = np.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(*cx.shape, 3, 3)
    rz = np.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(*cx.shape, 3, 3)
    return rx @ ry @ rz


def compose_keypoints(xc: KeypointSet, mp: MotionParams) -> KeypointSet:
    """Driven keypoints ``S * (x_c @ R + delta) + t``."""
    if xc.num_keypoints != mp.num_keypoints:
        raise DimensionError(
            f"keypoint count mismatch: {xc.num_keypoints} canonical vs {mp.num_keypoints} expression"
        )
    rot = rotation_matrix(mp.rotation)
    return KeypointSet(mp.scale * (xc.points @ rot + mp.expression) + mp.translation)


def flatten(mp: MotionParams) -> np.ndarray:
    return np.concatenate(
        [mp.expression.reshape(-1), mp.rotation, mp.translation, [mp.scale]]
    )


def unflatten(v, num_keypoints: int = DEFAULT_NUM_KEYPOINTS) -> MotionParams:
    v = np.asarray(v, dtype=np.float64)
    k = num_keypoints
    if v.ndim != 1 or v.shape[0] != motion_dim(k):
        raise DimensionError(f"expected a vector of length {motion_dim(k)}, got shape {v.shape}")
    return MotionParams(
        rotation=v[rotation_slice(k)].copy(),
        expression=v[expression_slice(k)].reshape(k, 3).copy(),
        translation=v[translation_slice(k)].copy(),
        scale=v[scale_index(k)],
    )


@dataclass
class MotionSequence:
    """``T`` frames stored as a ``T x (3K+7)`` array in flatten order."""

    data: np.ndarray
    fps: float = DEFAULT_FPS
    num_keypoints: int = field(default=None)

    def __post_init__(self):
        self.data = check_array(self.data, ndim=2, name="motion sequence")
        if self.data.shape[0] < 1:
            raise ValidationError("a motion sequence needs at least one frame")
        if self.num_keypoints is None:
            self.num_keypoints = num_keypoints_for(self.data.shape[1])
        elif self.data.shape[1] != motion_dim(self.num_keypoints):
            raise DimensionError(
                f"frame length {self.data.shape[1]} does not match K={self.num_keypoints}"
            )
        self.fps = float(self.fps)

    @classmethod
    def from_frames(cls, frames, fps: float = DEFAULT_FPS) -> "MotionSequence":
        frames = list(frames)
        ks = {f.num_keypoints for f in frames}
        if len(ks) != 1:
            raise DimensionError("all frames must share the same keypoint count")
        return cls(np.stack([flatten(f) for f in frames]), fps, ks.pop())

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, i) -> MotionParams:
        return unflatten(self.data[i], self.num_keypoints)

    @property
    def frames(self) -> list:
        return [self[i] for i in range(len(self))]

    @property
    def duration(self) -> float:
        return len(self) / self.fps


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = check_array(self.mean, ndim=1, name="mean")
        self.std = check_array(self.std, shape=self.mean.shape, name="std")
        if np.any(self.std <= 0):
            raise ValidationError("normalization std must be strictly positive")

    def save(self, path):
        d = self.mean.shape[0]
        with open(path, "wb") as fh:
            fh.write(_NORM_HEADER.pack(_NORM_MAGIC, 1, d))
            fh.write(self.mean.astype("<f4").tobytes())
            fh.write(self.std.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "NormStats":
        raw = Path(path).read_bytes()
        magic, version, d = _NORM_HEADER.unpack_from(raw)
        if magic != _NORM_MAGIC or version != 1:
            raise ValidationError(f"{path}: not a NORM v1 file")
        body = np.frombuffer(raw, dtype="<f4", offset=_NORM_HEADER.size).astype(np.float64)
        if body.shape[0] != 2 * d:
            raise ValidationError(f"{path}: truncated stats payload")
        return cls(body[:d], body[d:])


def _as_array(seq):
    return seq.data if isinstance(seq, MotionSequence) else np.asarray(seq, dtype=np.float64)


def normalize(seq, stats: NormStats) -> np.ndarray:
    x = _as_array(seq)
    if x.shape[-1] != stats.mean.shape[0]:
        raise DimensionError(f"stats dimension {stats.mean.shape[0]} != frame length {x.shape[-1]}")
    return (x - stats.mean) / stats.std


def denormalize(x, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stats.mean.shape[0]:
        raise DimensionError(f"stats dimension {stats.mean.shape[0]} != frame length {x.shape[-1]}")
    return x * stats.std + stats.mean


def smoothness(seq) -> float:
    """Temporal smoothness score in ``(0, 1]``.

    ``1 / (1 + r)`` with ``r = mean|second difference| / (mean|first difference| + 1e-8)``
    and ``|.|`` the per-frame Euclidean norm. Constant and linear motion score 1;
    a frame-rate square wave (``r = 2``) scores 1/3.
    """
    x = _as_array(seq)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValidationError("smoothness needs at least 3 frames")
    d1 = np.linalg.norm(np.diff(x, n=1, axis=0), axis=1).mean()
    d2 = np.linalg.norm(np.diff(x, n=2, axis=0), axis=1).mean()
    return float(1.0 / (1.0 + d2 / (d1 + EPS_DIV)))


def write_mseq(path, seq: MotionSequence):
    with open(path, "wb") as fh:
        fh.write(_MSEQ_HEADER.pack(_MSEQ_MAGIC, 1, len(seq), seq.num_keypoints, seq.fps))
        fh.write(seq.data.astype("<f4").tobytes())


def read_mseq(path) -> MotionSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _MSEQ_HEADER.size:
        raise ValidationError(f"{path}: file too short for an MSEQ header")
    magic, version, t, k, fps = _MSEQ_HEADER.unpack_from(raw)
    if magic != _MSEQ_MAGIC or version != 1:
        raise ValidationError(f"{path}: not an MSEQ v1 file")
    body = np.frombuffer(raw, dtype="<f4", offset=_MSEQ_HEADER.size)
    if body.shape[0] != t * motion_dim(k):
        raise ValidationError(f"{path}: payload holds {body.shape[0]} values, header says {t} frames")
    return MotionSequence(body.reshape(t, motion_dim(k)).astype(np.float64), fps, k)


class MseqWriter:
    """Append frames to an MSEQ1 file as they become available.

    The frame count in the header is patched on every append so the file is
    valid after each write.
    """

    def __init__(self, path, num_keypoints: int = DEFAULT_NUM_KEYPOINTS, fps: float = DEFAULT_FPS):
        self.path = Path(path)
        self.num_keypoints = num_keypoints
        self.fps = float(fps)
        self.count = 0
        self._fh = open(self.path, "wb")
        self._write_header()

    def _write_header(self):
        self._fh.seek(0)
        self._fh.write(_MSEQ_HEADER.pack(_MSEQ_MAGIC, 1, self.count, self.num_keypoints, self.fps))
        self._fh.seek(0, 2)

    def append(self, frames):
        frames = check_array(frames, shape=(None, motion_dim(self.num_keypoints)), name="frames")
        self._fh.write(frames.astype("<f4").tobytes())
        self.count += frames.shape[0]
        self._write_header()
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_text(path, seq: MotionSequence):
    """One frame per line, values space-separated in flatten order."""
    np.savetxt(path, seq.data, fmt="%.9g", delimiter=" ")


def read_text(path, fps: float = DEFAULT_FPS) -> MotionSequence:
    return MotionSequence(np.loadtxt(path, ndmin=2), fps)
