"""Condition features: audio, identity, emotion, guide motion and timestep.

Every condition may be absent. Absent conditions are replaced by a learned
null embedding of the same shape, which is what classifier-free guidance
evaluates against.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
import torch
from torch import nn

from .exceptions import ConfigError, DimensionError, ValidationError
from .motion_space import KeypointSet
from .validation import check_array, check_probability, check_unit_interval

CONDITION_KEYS = ("audio", "emotion", "identity", "guide")

DEFAULT_DROPOUT = {"audio": 0.5, "emotion": 0.1, "identity": 0.1, "guide": 0.1}

_AFEA_MAGIC = b"AFEA"
_AFEA_HEADER = struct.Struct("<4sIII")


@dataclass
class AudioFeatureSequence:
    features: np.ndarray

    def __post_init__(self):
        self.features = check_array(self.features, ndim=2, name="audio features")
        if self.features.shape[0] < 1:
            raise ValidationError("audio feature sequence needs at least one frame")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class EmotionCondition:
    label: int
    num_emotions: int = 8

    def __post_init__(self):
        if not 0 <= int(self.label) < self.num_emotions:
            raise ValidationError(f"emotion label {self.label} outside [0, {self.num_emotions})")
        self.label = int(self.label)


@dataclass
class GuideMotion:
    frame: np.ndarray

    def __post_init__(self):
        self.frame = check_array(self.frame, ndim=1, name="guide motion")


def write_afea(path, audio):
    feats = audio.features if isinstance(audio, AudioFeatureSequence) else np.asarray(audio)
    with open(path, "wb") as fh:
        fh.write(_AFEA_HEADER.pack(_AFEA_MAGIC, 1, feats.shape[0], feats.shape[1]))
        fh.write(feats.astype("<f4").tobytes())


def read_afea(path) -> AudioFeatureSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _AFEA_HEADER.size:
        raise ValidationError(f"{path}: file too short for an AFEA header")
    magic, version, t, d = _AFEA_HEADER.unpack_from(raw)
    if magic != _AFEA_MAGIC or version != 1:
        raise ValidationError(f"{path}: not an AFEA v1 file")
    body = np.frombuffer(raw, dtype="<f4", offset=_AFEA_HEADER.size)
    if body.shape[0] != t * d:
        raise ValidationError(f"{path}: payload holds {body.shape[0]} values, header says {t}x{d}")
    return AudioFeatureSequence(body.reshape(t, d).astype(np.float64))


class AudioProvider(Protocol):
    """Source of frame-aligned audio features."""

    def features(self) -> AudioFeatureSequence: ...


class FileAudioProvider:
    def __init__(self, path):
        self.path = Path(path)

    def features(self) -> AudioFeatureSequence:
        return read_afea(self.path)


class SyntheticAudioProvider:
    """Audio features of one clip of the synthetic oracle dataset."""

    def __init__(self, spec, clip_index: int):
        self.spec = spec
        self.clip_index = clip_index

    def features(self) -> AudioFeatureSequence:
        from .data_synth import clip_audio

        return AudioFeatureSequence(clip_audio(self.spec, self.clip_index))


@dataclass
class ConditionSet:
    """Conditions for one sequence; ``None`` marks a dropped (null) condition.

    ``identity`` holds canonical keypoints, ``guide`` a normalized flattened
    motion frame and ``emotion`` an integer label.
    """

    audio: Optional[np.ndarray] = None
    identity: Optional[np.ndarray] = None
    emotion: Optional[int] = None
    guide: Optional[np.ndarray] = None

    def __post_init__(self):
        if isinstance(self.audio, AudioFeatureSequence):
            self.audio = self.audio.features
        if isinstance(self.identity, KeypointSet):
            self.identity = self.identity.flatten()
        if isinstance(self.emotion, EmotionCondition):
            self.emotion = self.emotion.label
        if isinstance(self.guide, GuideMotion):
            self.guide = self.guide.frame
        if self.audio is not None:
            self.audio = check_array(self.audio, ndim=2, name="audio")
        if self.identity is not None:
            self.identity = check_array(self.identity, name="identity").reshape(-1)
        if self.guide is not None:
            self.guide = check_array(self.guide, ndim=1, name="guide")
        if self.emotion is not None:
            self.emotion = int(self.emotion)

    def without(self, key: str) -> "ConditionSet":
        if key not in CONDITION_KEYS:
            raise ConfigError(f"unknown condition {key!r}; expected one of {CONDITION_KEYS}")
        return replace(self, **{key: None})

    def present(self) -> dict:
        return {k: getattr(self, k) is not None for k in CONDITION_KEYS}

    def to_batch(self, num_frames: int, motion_dim: int, audio_dim: int, identity_dim: int,
                 dtype=torch.float32) -> "ConditionBatch":
        return ConditionBatch.collate([self], num_frames, motion_dim, audio_dim, identity_dim, dtype)


@dataclass
class ConditionBatch:
    """Batched conditions as tensors plus per-sample ``keep`` masks.

    Rows whose mask is False are placeholders; the model substitutes the
    learned null embedding for them.
    """

    audio: torch.Tensor
    identity: torch.Tensor
    emotion: torch.Tensor
    guide: torch.Tensor
    keep: dict = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.audio.shape[0]

    @classmethod
    def collate(cls, sets, num_frames, motion_dim, audio_dim, identity_dim, dtype=torch.float32):
        b = len(sets)
        audio = np.zeros((b, num_frames, audio_dim))
        identity = np.zeros((b, identity_dim))
        emotion = np.zeros(b, dtype=np.int64)
        guide = np.zeros((b, motion_dim))
        keep = {k: np.zeros(b, dtype=bool) for k in CONDITION_KEYS}
        for i, cs in enumerate(sets):
            if cs.audio is not None:
                if cs.audio.shape[0] != num_frames:
                    raise ValidationError(f"audio has {cs.audio.shape[0]} frames, expected {num_frames}")
                if cs.audio.shape[1] != audio_dim:
                    raise DimensionError(f"audio feature size {cs.audio.shape[1]} != {audio_dim}")
                audio[i], keep["audio"][i] = cs.audio, True
            if cs.identity is not None:
                if cs.identity.shape[0] != identity_dim:
                    raise DimensionError(f"identity length {cs.identity.shape[0]} != {identity_dim}")
                identity[i], keep["identity"][i] = cs.identity, True
            if cs.emotion is not None:
                emotion[i], keep["emotion"][i] = cs.emotion, True
            if cs.guide is not None:
                if cs.guide.shape[0] != motion_dim:
                    raise DimensionError(f"guide length {cs.guide.shape[0]} != {motion_dim}")
                guide[i], keep["guide"][i] = cs.guide, True
        return cls(
            audio=torch.as_tensor(audio, dtype=dtype),
            identity=torch.as_tensor(identity, dtype=dtype),
            emotion=torch.as_tensor(emotion),
            guide=torch.as_tensor(guide, dtype=dtype),
            keep={k: torch.as_tensor(v) for k, v in keep.items()},
        )

    def without(self, key: str) -> "ConditionBatch":
        if key not in CONDITION_KEYS:
            raise ConfigError(f"unknown condition {key!r}; expected one of {CONDITION_KEYS}")
        keep = dict(self.keep)
        keep[key] = torch.zeros_like(keep[key])
        return replace(self, keep=keep)

    def with_keep(self, **masks) -> "ConditionBatch":
        keep = dict(self.keep)
        for k, m in masks.items():
            keep[k] = keep[k] & m
        return replace(self, keep=keep)

    def to(self, dtype) -> "ConditionBatch":
        return replace(self, audio=self.audio.to(dtype), identity=self.identity.to(dtype),
                       guide=self.guide.to(dtype))


def apply_condition_dropout(cs: ConditionSet, probs=None, rng_seed=0) -> ConditionSet:
    """Independently null each condition with its own probability.

    One uniform draw per condition, in ``CONDITION_KEYS`` order, from a
    generator seeded with ``rng_seed``.
    """
    probs = {**DEFAULT_DROPOUT, **(probs or {})}
    unknown = set(probs) - set(CONDITION_KEYS)
    if unknown:
        raise ConfigError(f"unknown conditions in dropout probabilities: {sorted(unknown)}")
    rng = np.random.default_rng(rng_seed)
    draws = rng.random(len(CONDITION_KEYS))
    out = cs
    for key, u in zip(CONDITION_KEYS, draws):
        if u < check_probability(probs[key], f"dropout[{key}]"):
            out = out.without(key)
    return out


def dropout_masks(batch_size: int, probs, generator: torch.Generator) -> dict:
    """Per-sample keep masks for a training batch."""
    probs = {**DEFAULT_DROPOUT, **(probs or {})}
    u = torch.rand(len(CONDITION_KEYS), batch_size, generator=generator, dtype=torch.float64)
    return {k: u[i] >= check_probability(probs[k], f"dropout[{k}]") for i, k in enumerate(CONDITION_KEYS)}


def sinusoidal_embed(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Interleaved ``(sin, cos)`` features of ``t``; shape ``(*t.shape, dim)``."""
    if dim % 2:
        raise ConfigError("sinusoidal embedding dimension must be even")
    t = torch.as_tensor(t)
    if not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype) / half
    )
    args = t[..., None] * freqs
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).flatten(-2)


def expand_to_sequence(vec: torch.Tensor, num_frames: int):
    """Broadcast ``(..., d)`` to ``(..., T, d)`` and return frame positions ``0..T-1``."""
    if num_frames < 1:
        raise ValidationError("sequence length must be >= 1")
    tokens = vec.unsqueeze(-2).expand(*vec.shape[:-1], num_frames, vec.shape[-1])
    return tokens, torch.arange(num_frames)


class IdentityEncoder(nn.Module):
    """Two-layer perceptron over flattened canonical keypoints."""

    def __init__(self, in_dim: int, d_model: int, activation: str = "silu"):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, d_model)
        self.fc2 = nn.Linear(d_model, d_model)
        if activation == "silu":
            self.act = nn.SiLU()
        elif activation == "linear":
            self.act = nn.Identity()
        else:
            raise ConfigError(f"unsupported activation {activation!r}")

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


def encode_identity(encoder: IdentityEncoder, xc) -> np.ndarray:
    """Identity feature of canonical keypoints ``xc`` as a ``d_model`` vector."""
    flat = xc.flatten() if isinstance(xc, KeypointSet) else check_array(xc, name="keypoints").reshape(-1)
    w = encoder.fc1.weight
    if flat.shape[0] != w.shape[1]:
        raise DimensionError(f"identity encoder expects {w.shape[1]} values, got {flat.shape[0]}")
    with torch.no_grad():
        return encoder(torch.as_tensor(flat, dtype=w.dtype)).numpy()


class TimestepEmbedder(nn.Module):
    def __init__(self, d_model: int, freq_dim: int = 256, time_scale: float = 1000.0):
        super().__init__()
        self.freq_dim = freq_dim
        self.time_scale = time_scale
        self.mlp = nn.Sequential(nn.Linear(freq_dim, d_model), nn.SiLU(), nn.Linear(d_model, d_model))

    def forward(self, t):
        return self.mlp(sinusoidal_embed(t * self.time_scale, self.freq_dim))


class ConditionEncoder(nn.Module):
    """Projects raw conditions to ``d_model`` tokens and builds ``f_t``.

    The emotion table has ``num_emotions + 1`` rows; the last row is the null
    emotion. It is shared between the emotion stream and the timestep feature.
    """

    def __init__(self, d_model: int, motion_dim: int, audio_dim: int, identity_dim: int,
                 num_emotions: int = 8, freq_dim: int = 256):
        super().__init__()
        self.d_model = d_model
        self.num_emotions = num_emotions
        self.motion_in = nn.Linear(motion_dim, d_model)
        self.audio_proj = nn.Linear(audio_dim, d_model)
        self.identity = IdentityEncoder(identity_dim, d_model)
        self.emotion = nn.Embedding(num_emotions + 1, d_model)
        self.timestep = TimestepEmbedder(d_model, freq_dim)
        self.guide_type = nn.Parameter(torch.zeros(d_model))
        self.null_audio = nn.Parameter(torch.zeros(d_model))
        self.null_identity = nn.Parameter(torch.zeros(d_model))
        self.null_guide = nn.Parameter(torch.zeros(d_model))
        for p in (self.guide_type, self.null_audio, self.null_identity, self.null_guide):
            nn.init.normal_(p, std=0.02)
        nn.init.normal_(self.emotion.weight, std=0.02)

    def emotion_embedding(self, cond: ConditionBatch) -> torch.Tensor:
        labels = torch.where(cond.keep["emotion"], cond.emotion, torch.full_like(cond.emotion, self.num_emotions))
        if torch.any(labels < 0) or torch.any(labels > self.num_emotions):
            raise ValidationError("emotion label out of range")
        return self.emotion(labels)

    def timestep_features(self, t, cond: ConditionBatch) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=self.null_audio.dtype)
        check_unit_interval(t.detach().numpy(), "t")
        if t.dim() == 0:
            t = t.expand(cond.batch_size)
        return self.timestep(t) + self.emotion_embedding(cond)

    def audio_tokens(self, cond: ConditionBatch) -> torch.Tensor:
        tok = self.audio_proj(cond.audio)
        return torch.where(cond.keep["audio"][:, None, None], tok, self.null_audio)

    def identity_vector(self, cond: ConditionBatch) -> torch.Tensor:
        vec = self.identity(cond.identity)
        return torch.where(cond.keep["identity"][:, None], vec, self.null_identity)

    def guide_token(self, cond: ConditionBatch) -> torch.Tensor:
        tok = self.motion_in(cond.guide) + self.guide_type
        return torch.where(cond.keep["guide"][:, None], tok, self.null_guide)
