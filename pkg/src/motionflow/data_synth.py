"""Synthetic oracle dataset with a known audio-to-motion rule.

Per clip:

* audio: seeded Gaussian noise smoothed by a length-5 moving average,
* lip dims (the expression coordinates of ``lip_keypoints``):
  ``a[emotion] * audio @ G[identity]`` with ``G[identity]`` a shared base gain
  plus ``identity_mix`` times an identity-specific gain,
* other expression dims: a constant per-identity offset,
* rotation: per-identity sinusoids ``amp * sin(2 pi f n / fps + phase)``,
* translation and scale: per-identity constants near the neutral pose.

Everything derives from ``OracleSpec.seed``, so regeneration is bit-exact.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .conditioning import read_afea, write_afea
from .exceptions import ConfigError, ValidationError
from .motion_space import (KeypointSet, MotionSequence, NormStats, expression_slice, motion_dim,
                           read_mseq, rotation_slice, scale_index, translation_slice, write_mseq)

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
MOVING_AVERAGE = 5


@dataclass
class OracleSpec:
    seed: int = 0
    n_clips: int = 64
    clip_frames: int = 200
    audio_dim: int = 64
    n_identities: int = 8
    num_emotions: int = 4
    num_keypoints: int = 21
    lip_keypoints: tuple = (17, 18, 19, 20)
    emotion_amplitudes: tuple = None
    gain_scale: float = 0.1
    identity_mix: float = 0.5
    pose_freq_range: tuple = (0.15, 0.5)
    pose_amp_range: tuple = (0.05, 0.2)
    fps: float = 25.0

    def __post_init__(self):
        if self.emotion_amplitudes is None:
            self.emotion_amplitudes = tuple(np.linspace(0.5, 1.5, self.num_emotions).tolist())
        self.lip_keypoints = tuple(int(k) for k in self.lip_keypoints)
        self.emotion_amplitudes = tuple(float(a) for a in self.emotion_amplitudes)
        if len(self.emotion_amplitudes) != self.num_emotions:
            raise ConfigError("need one emotion amplitude per emotion")
        if any(a <= 0 for a in self.emotion_amplitudes):
            raise ConfigError("emotion amplitudes must be positive")
        if min(self.pose_amp_range) <= 0:
            raise ConfigError("pose amplitudes must be positive")
        if not self.lip_keypoints or max(self.lip_keypoints) >= self.num_keypoints:
            raise ConfigError("lip keypoints must be valid keypoint indices")
        if self.n_clips < 1 or self.clip_frames < 1 or self.n_identities < 1:
            raise ConfigError("n_clips, clip_frames and n_identities must be positive")

    @property
    def lip_dims(self) -> tuple:
        return tuple(3 * k + c for k in self.lip_keypoints for c in range(3))

    @property
    def motion_dim(self) -> int:
        return motion_dim(self.num_keypoints)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = " ".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "OracleSpec":
        types = {f.name: f for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ConfigError(f"unknown oracle spec key {key!r}")
            default = types[key].default
            if key == "lip_keypoints":
                kwargs[key] = tuple(int(x) for x in value.split())
            elif key in ("emotion_amplitudes", "pose_freq_range", "pose_amp_range"):
                kwargs[key] = tuple(float(x) for x in value.split())
            elif isinstance(default, int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


@dataclass
class ClipRecord:
    clip_id: str
    audio: np.ndarray
    identity: KeypointSet
    emotion: int
    motion: MotionSequence
    identity_id: int = 0

    def __post_init__(self):
        if self.audio.shape[0] != len(self.motion):
            raise ValidationError(
                f"clip {self.clip_id}: {self.audio.shape[0]} audio frames vs {len(self.motion)} motion frames"
            )

    def __len__(self):
        return len(self.motion)


@dataclass
class Window:
    clip_id: str
    start: int
    audio: np.ndarray
    motion: np.ndarray
    identity: np.ndarray
    emotion: int
    guide: np.ndarray = field(init=False)

    def __post_init__(self):
        self.guide = self.motion[0].copy()


def _rng(spec: OracleSpec, *key) -> np.random.Generator:
    return np.random.default_rng([spec.seed, *key])


def base_gain(spec: OracleSpec) -> np.ndarray:
    rng = _rng(spec, 2)
    return rng.normal(scale=spec.gain_scale / np.sqrt(spec.audio_dim), size=(spec.audio_dim, len(spec.lip_dims)))


def identity_params(spec: OracleSpec, identity_id: int) -> dict:
    rng = _rng(spec, 0, identity_id)
    k, n_lip = spec.num_keypoints, len(spec.lip_dims)
    own = rng.normal(scale=spec.gain_scale / np.sqrt(spec.audio_dim), size=(spec.audio_dim, n_lip))
    lo_f, hi_f = spec.pose_freq_range
    lo_a, hi_a = spec.pose_amp_range
    return {
        "keypoints": rng.normal(scale=0.3, size=(k, 3)),
        "gain": base_gain(spec) + spec.identity_mix * own,
        "expression_offset": rng.normal(scale=0.01, size=3 * k),
        "pose_freq": rng.uniform(lo_f, hi_f, size=3),
        "pose_amp": rng.uniform(lo_a, hi_a, size=3),
        "pose_phase": rng.uniform(0, 2 * np.pi, size=3),
        "translation": rng.normal(scale=0.02, size=3),
        "scale": 1.0 + 0.05 * rng.standard_normal(),
    }


def clip_identity(spec: OracleSpec, clip_index: int) -> int:
    return clip_index % spec.n_identities


def clip_emotion(spec: OracleSpec, clip_index: int) -> int:
    return (clip_index // spec.n_identities) % spec.num_emotions


def clip_audio(spec: OracleSpec, clip_index: int) -> np.ndarray:
    raw = _rng(spec, 1, clip_index).standard_normal((spec.clip_frames + MOVING_AVERAGE - 1, spec.audio_dim))
    kernel = np.ones(MOVING_AVERAGE) / MOVING_AVERAGE
    return np.stack([np.convolve(raw[:, j], kernel, mode="valid") for j in range(spec.audio_dim)], axis=1)


def lip_motion(audio, gain, amplitude: float) -> np.ndarray:
    """The oracle's linear audio-to-lip map."""
    return amplitude * (np.asarray(audio) @ gain)


def clip_motion(spec: OracleSpec, audio: np.ndarray, identity_id: int, emotion: int) -> np.ndarray:
    p = identity_params(spec, identity_id)
    k = spec.num_keypoints
    num_frames = audio.shape[0]
    out = np.zeros((num_frames, motion_dim(k)))
    out[:, expression_slice(k)] = p["expression_offset"]
    out[:, list(spec.lip_dims)] = lip_motion(audio, p["gain"], spec.emotion_amplitudes[emotion])
    n = np.arange(num_frames)[:, None]
    out[:, rotation_slice(k)] = p["pose_amp"] * np.sin(2 * np.pi * p["pose_freq"] * n / spec.fps + p["pose_phase"])
    out[:, translation_slice(k)] = p["translation"]
    out[:, scale_index(k)] = p["scale"]
    return out


def clip_id_for(index: int) -> str:
    return f"clip_{index:04d}"


def generate_dataset(spec: OracleSpec) -> list:
    clips = []
    for i in range(spec.n_clips):
        ident, emo = clip_identity(spec, i), clip_emotion(spec, i)
        audio = clip_audio(spec, i)
        motion = clip_motion(spec, audio, ident, emo)
        clips.append(ClipRecord(
            clip_id=clip_id_for(i), audio=audio,
            identity=KeypointSet(identity_params(spec, ident)["keypoints"]),
            emotion=emo, motion=MotionSequence(motion, spec.fps, spec.num_keypoints),
            identity_id=ident,
        ))
    return clips


def segment_windows(clip: ClipRecord, window: int = 80, stride=None, count=None, seed=0) -> list:
    """Cut training windows from a clip.

    With ``stride`` the windows tile the clip deterministically; otherwise
    ``count`` start frames (default 1) are drawn uniformly with ``seed``.
    """
    num_frames = len(clip)
    if num_frames < window:
        log.warning("clip %s has %d frames, shorter than the %d-frame window; skipped",
                    clip.clip_id, num_frames, window)
        return []
    last = num_frames - window
    if stride is not None:
        starts = range(0, last + 1, int(stride))
    else:
        starts = np.random.default_rng(seed).integers(0, last + 1, size=count or 1)
    ident = clip.identity.flatten()
    return [Window(clip.clip_id, int(s), clip.audio[s:s + window], clip.motion.data[s:s + window],
                   ident, clip.emotion) for s in starts]


def segment_dataset(clips, window: int = 80, stride=None, count=None, seed=0):
    """Windows from every clip and the number of clips skipped as too short."""
    windows, skipped = [], 0
    for i, clip in enumerate(clips):
        w = segment_windows(clip, window, stride, count, seed=[seed, i])
        skipped += not w
        windows.extend(w)
    return windows, skipped


def compute_norm_stats(data) -> NormStats:
    """Per-dimension mean/std over all frames; std floored at ``1e-6``."""
    arrays = [c.motion.data if isinstance(c, ClipRecord) else np.asarray(c, dtype=np.float64) for c in data]
    if not arrays:
        raise ValidationError("cannot compute statistics of an empty dataset")
    frames = np.concatenate(arrays, axis=0)
    if frames.shape[0] < 2:
        raise ValidationError("need at least 2 frames to compute statistics")
    return NormStats(frames.mean(axis=0), np.maximum(frames.std(axis=0), STD_FLOOR))


def is_validation(clip_id: str, fraction: float = 0.1) -> bool:
    return zlib.crc32(clip_id.encode()) % 1000 < round(1000 * fraction)


def split_train_val(clips, fraction: float = 0.1):
    train = [c for c in clips if not is_validation(c.clip_id, fraction)]
    val = [c for c in clips if is_validation(c.clip_id, fraction)]
    return train, val


def _write_meta(path: Path, clip: ClipRecord):
    kp = " ".join(repr(float(x)) for x in clip.identity.flatten())
    path.write_text(
        f"clip_id = {clip.clip_id}\nemotion = {clip.emotion}\nidentity_id = {clip.identity_id}\n"
        f"num_keypoints = {clip.identity.num_keypoints}\nidentity_keypoints = {kp}\n"
    )


def read_meta(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, _, value = (s.strip() for s in line.partition("="))
            out[key] = value
    return out


def save_dataset(out_dir, clips, spec: OracleSpec = None, stats: NormStats = None) -> NormStats:
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    for clip in clips:
        write_mseq(out / "clips" / f"{clip.clip_id}.mseq", clip.motion)
        write_afea(out / "clips" / f"{clip.clip_id}.afea", clip.audio)
        _write_meta(out / "clips" / f"{clip.clip_id}.meta", clip)
    stats = stats or compute_norm_stats(split_train_val(clips)[0] or clips)
    stats.save(out / "stats.norm")
    if spec is not None:
        (out / "manifest.txt").write_text(spec.to_text())
    return stats


def load_clip(clip_dir, clip_id: str) -> ClipRecord:
    d = Path(clip_dir)
    meta = read_meta(d / f"{clip_id}.meta")
    k = int(meta["num_keypoints"])
    kp = np.array([float(x) for x in meta["identity_keypoints"].split()]).reshape(k, 3)
    return ClipRecord(
        clip_id=clip_id, audio=read_afea(d / f"{clip_id}.afea").features, identity=KeypointSet(kp),
        emotion=int(meta["emotion"]), motion=read_mseq(d / f"{clip_id}.mseq"),
        identity_id=int(meta.get("identity_id", 0)),
    )


def load_dataset(data_dir):
    """Returns ``(clips, stats, spec)``; ``spec`` is None when no manifest exists."""
    d = Path(data_dir)
    if not (d / "clips").is_dir():
        raise ValidationError(f"{d} does not contain a clips/ directory")
    ids = sorted(p.stem for p in (d / "clips").glob("*.meta"))
    clips = [load_clip(d / "clips", i) for i in ids]
    stats = NormStats.load(d / "stats.norm") if (d / "stats.norm").exists() else None
    spec = OracleSpec.from_text((d / "manifest.txt").read_text()) if (d / "manifest.txt").exists() else None
    return clips, stats, spec
