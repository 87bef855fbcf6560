"""Motion transformer with joint attention and coarse-to-fine stream fusion.

The token sequence is made of four segments, always in the order
motion, audio, emotion, identity:

* motion: one guide-motion prefix token followed by ``T`` noisy frames,
* audio: ``T`` projected audio frames,
* emotion and identity: their feature vectors expanded to ``T`` tokens.

Every token carries a frame position (the prefix sits at frame 0) used by the
rotary embedding, so all modalities share one time axis.

A stage groups segments into streams. Each stream has its own weights (a
"path": AdaLN modulation, QKV/output projections and feed-forward network);
attention is computed jointly over the concatenation of all streams. The
default schedule runs four streams, then two (motion vs. audio+emotion+
identity), then a single merged stream.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import ConditionBatch, ConditionEncoder, ConditionSet
from .exceptions import ConfigError, DimensionError, ValidationError

VARIANTS = ("c2f", "caba", "no_c2f", "maf")
SEGMENTS = ("motion", "audio", "emotion", "identity")

# stage -> list of (path name, segments routed through that path)
_STAGE_STREAMS = {
    "four": [("motion", ("motion",)), ("audio", ("audio",)),
             ("emotion", ("emotion",)), ("identity", ("identity",))],
    "two": [("motion", ("motion",)), ("cond", ("audio", "emotion", "identity"))],
    "two_maf": [("motion", ("motion", "emotion", "identity")), ("audio", ("audio",))],
    "single": [("joint", SEGMENTS)],
}


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_four_stream: int = 3
    n_two_stream: int = 6
    n_single_stream: int = 12
    rope_base: float = 10000.0
    num_keypoints: int = 21
    audio_dim: int = 64
    num_emotions: int = 8
    variant: str = "c2f"
    ffn_ratio: int = 4
    time_freq_dim: int = 256

    def __post_init__(self):
        self.variant = str(self.variant).lower()
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim={self.head_dim} must be even for rotary embeddings")
        if min(self.n_four_stream, self.n_two_stream, self.n_single_stream) < 0:
            raise ConfigError("block counts must be >= 0")
        if self.time_freq_dim % 2:
            raise ConfigError("time_freq_dim must be even")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def motion_dim(self) -> int:
        return 3 * self.num_keypoints + 7

    @property
    def identity_dim(self) -> int:
        return 3 * self.num_keypoints

    @property
    def total_blocks(self) -> int:
        return self.n_four_stream + self.n_two_stream + self.n_single_stream

    def stages(self) -> list:
        """``(stage name, stream layout key, block count)`` in execution order."""
        if self.variant == "no_c2f":
            return [("four", "four", self.total_blocks)]
        if self.variant == "caba":
            return [("caba", None, self.total_blocks)]
        two = "two_maf" if self.variant == "maf" else "two"
        return [("four", "four", self.n_four_stream), ("two", two, self.n_two_stream),
                ("single", "single", self.n_single_stream)]

    def to_dict(self) -> dict:
        return asdict(self)


def rope_apply(x: torch.Tensor, positions, base: float = 10000.0) -> torch.Tensor:
    """Rotate interleaved channel pairs of ``x`` by position-dependent angles.

    ``x`` is ``(..., L, n_heads, head_dim)``; ``positions`` holds ``L`` integer
    frame indices. Pair ``i`` is rotated by ``pos * base**(-2i/head_dim)``.
    """
    hd = x.shape[-1]
    if hd % 2:
        raise ConfigError(f"rotary embedding needs an even head_dim, got {hd}")
    positions = torch.as_tensor(positions)
    if positions.shape[-1] != x.shape[-3]:
        raise DimensionError(f"{positions.shape[-1]} positions for {x.shape[-3]} tokens")
    inv_freq = base ** (-torch.arange(0, hd, 2, dtype=x.dtype) / hd)
    angles = positions.to(x.dtype)[..., None] * inv_freq
    cos, sin = torch.cos(angles)[..., None, :], torch.sin(angles)[..., None, :]
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1).flatten(-2)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def _zero_(linear: nn.Linear):
    nn.init.zeros_(linear.weight)
    nn.init.zeros_(linear.bias)


def _attend(q, k, v):
    # q, k, v: (B, L, H, hd)
    q, k, v = (a.transpose(1, 2) for a in (q, k, v))
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    out = torch.softmax(logits, dim=-1) @ v
    return out.transpose(1, 2).flatten(-2)


class StreamPath(nn.Module):
    """Weights of one modality path inside a block."""

    def __init__(self, d_model: int, ffn_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.norm2 = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.mod = nn.Linear(d_model, 6 * d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.ffn_in = nn.Linear(d_model, ffn_ratio * d_model)
        self.ffn_out = nn.Linear(ffn_ratio * d_model, d_model)
        _zero_(self.mod)

    def modulation(self, f_t):
        return self.mod(F.silu(f_t)).chunk(6, dim=-1)

    def ffn(self, x):
        return self.ffn_out(F.gelu(self.ffn_in(x), approximate="tanh"))


def adaln_modulate(tokens, f_t, path: StreamPath):
    """Attention-branch AdaLN: returns modulated tokens and the two residual gates."""
    shift, scale, gate, _, _, gate_ffn = path.modulation(f_t)
    return modulate(path.norm1(tokens), shift, scale), (gate, gate_ffn)


def joint_attention(streams, positions, paths, n_heads: int, rope_base: float = 10000.0):
    """Attention over the concatenation of per-stream projections.

    ``streams[i]`` is ``(B, L_i, d)`` and is projected with ``paths[i].qkv``;
    queries and keys are rotated by ``positions[i]``. The attended sequence is
    split back at the original boundaries and each piece goes through its own
    ``paths[i].proj``.
    """
    if not streams:
        raise ValidationError("joint attention needs at least one stream")
    d = streams[0].shape[-1]
    if any(s.shape[-1] != d for s in streams):
        raise DimensionError("all streams must share d_model")
    hd = d // n_heads
    qs, ks, vs = [], [], []
    for x, pos, path in zip(streams, positions, paths):
        q, k, v = path.qkv(x).unflatten(-1, (3, n_heads, hd)).unbind(-3)
        qs.append(rope_apply(q, pos, rope_base))
        ks.append(rope_apply(k, pos, rope_base))
        vs.append(v)
    out = _attend(torch.cat(qs, 1), torch.cat(ks, 1), torch.cat(vs, 1))
    pieces = out.split([s.shape[1] for s in streams], dim=1)
    return [path.proj(p) for p, path in zip(pieces, paths)]


class StreamBlock(nn.ModuleDict):
    """One motion transformer block with a path per stream."""

    def __init__(self, path_names, d_model: int, n_heads: int, rope_base: float, ffn_ratio: int = 4):
        super().__init__({name: StreamPath(d_model, ffn_ratio) for name in path_names})
        self.n_heads = n_heads
        self.rope_base = rope_base

    def forward(self, streams, positions, f_t):
        paths = list(self.values())
        mods = [path.modulation(f_t) for path in paths]
        normed = [modulate(path.norm1(x), m[0], m[1]) for x, path, m in zip(streams, paths, mods)]
        attn = joint_attention(normed, positions, paths, self.n_heads, self.rope_base)
        out = []
        for x, a, path, m in zip(streams, attn, paths, mods):
            _, _, gate, shift, scale, gate_ffn = m
            x = x + gate.unsqueeze(1) * a
            x = x + gate_ffn.unsqueeze(1) * path.ffn(modulate(path.norm2(x), shift, scale))
            out.append(x)
        return out


class CrossAttentionBlock(nn.Module):
    """Ablation block: motion self-attention, then motion queries over conditions."""

    def __init__(self, d_model: int, n_heads: int, rope_base: float, ffn_ratio: int = 4):
        super().__init__()
        self.n_heads = n_heads
        self.rope_base = rope_base
        self.norm1 = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.norm2 = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.norm3 = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.norm_ctx = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.mod = nn.Linear(d_model, 9 * d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.cross_q = nn.Linear(d_model, d_model)
        self.cross_kv = nn.Linear(d_model, 2 * d_model)
        self.cross_proj = nn.Linear(d_model, d_model)
        self.ffn_in = nn.Linear(d_model, ffn_ratio * d_model)
        self.ffn_out = nn.Linear(ffn_ratio * d_model, d_model)
        _zero_(self.mod)

    def forward(self, x, x_pos, ctx, ctx_pos, f_t):
        hd = x.shape[-1] // self.n_heads
        s1, c1, g1, s2, c2, g2, s3, c3, g3 = self.mod(F.silu(f_t)).chunk(9, dim=-1)
        h = modulate(self.norm1(x), s1, c1)
        q, k, v = self.qkv(h).unflatten(-1, (3, self.n_heads, hd)).unbind(-3)
        a = _attend(rope_apply(q, x_pos, self.rope_base), rope_apply(k, x_pos, self.rope_base), v)
        x = x + g1.unsqueeze(1) * self.proj(a)

        h = modulate(self.norm2(x), s2, c2)
        q = self.cross_q(h).unflatten(-1, (self.n_heads, hd))
        k, v = self.cross_kv(self.norm_ctx(ctx)).unflatten(-1, (2, self.n_heads, hd)).unbind(-3)
        a = _attend(rope_apply(q, x_pos, self.rope_base), rope_apply(k, ctx_pos, self.rope_base), v)
        x = x + g2.unsqueeze(1) * self.cross_proj(a)

        h = modulate(self.norm3(x), s3, c3)
        return x + g3.unsqueeze(1) * self.ffn_out(F.gelu(self.ffn_in(h), approximate="tanh"))


class FinalLayer(nn.Module):
    def __init__(self, d_model: int, motion_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.mod = nn.Linear(d_model, 2 * d_model)
        self.out = nn.Linear(d_model, motion_dim)
        _zero_(self.mod)
        _zero_(self.out)

    def forward(self, x, f_t):
        shift, scale = self.mod(F.silu(f_t)).chunk(2, dim=-1)
        return self.out(modulate(self.norm(x), shift, scale))


class MotionDiT(nn.Module):
    """Velocity network ``v(z_t, t, conditions)`` over motion windows."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = ConditionEncoder(d, cfg.motion_dim, cfg.audio_dim, cfg.identity_dim,
                                      cfg.num_emotions, cfg.time_freq_dim)
        for stage, layout, n in cfg.stages():
            if stage == "caba":
                blocks = [CrossAttentionBlock(d, cfg.n_heads, cfg.rope_base, cfg.ffn_ratio) for _ in range(n)]
            else:
                names = [name for name, _ in _STAGE_STREAMS[layout]]
                blocks = [StreamBlock(names, d, cfg.n_heads, cfg.rope_base, cfg.ffn_ratio) for _ in range(n)]
            self.add_module(stage, nn.ModuleList(blocks))
        self.final = FinalLayer(d, cfg.motion_dim)

    def _segments(self, z, t, cond: ConditionBatch):
        emb = self.embed
        num_frames = z.shape[1]
        motion = torch.cat([emb.guide_token(cond)[:, None], emb.motion_in(z)], dim=1)
        audio = emb.audio_tokens(cond)
        f_e = emb.emotion_embedding(cond)
        emotion = f_e[:, None].expand(-1, num_frames, -1)
        identity = emb.identity_vector(cond)[:, None].expand(-1, num_frames, -1)
        frames = torch.arange(num_frames)
        pos = {
            "motion": torch.cat([torch.zeros(1, dtype=frames.dtype), frames]),
            "audio": frames, "emotion": frames, "identity": frames,
        }
        seg = {"motion": motion, "audio": audio, "emotion": emotion, "identity": identity}
        f_t = emb.timestep(t) + f_e
        return seg, pos, f_t

    def _prepare(self, z, t, cond):
        z = torch.as_tensor(z, dtype=self.embed.null_audio.dtype)
        squeeze = z.dim() == 2
        if squeeze:
            z = z[None]
        if z.dim() != 3 or z.shape[-1] != self.cfg.motion_dim:
            raise DimensionError(f"expected (B, T, {self.cfg.motion_dim}) motion, got {tuple(z.shape)}")
        b, num_frames, _ = z.shape
        if isinstance(cond, ConditionSet):
            cond = cond.to_batch(num_frames, self.cfg.motion_dim, self.cfg.audio_dim,
                                 self.cfg.identity_dim, z.dtype)
        if cond.batch_size != b:
            if cond.batch_size != 1:
                raise DimensionError(f"condition batch {cond.batch_size} != motion batch {b}")
            cond = ConditionBatch(cond.audio.expand(b, -1, -1), cond.identity.expand(b, -1),
                                  cond.emotion.expand(b), cond.guide.expand(b, -1),
                                  {k: v.expand(b) for k, v in cond.keep.items()})
        if cond.audio.shape[1] != num_frames:
            raise ValidationError(
                f"audio has {cond.audio.shape[1]} frames but the motion window has {num_frames}"
            )
        cond = cond.to(z.dtype)
        t = torch.as_tensor(t, dtype=z.dtype)
        if float(t.min()) < 0.0 or float(t.max()) > 1.0:
            raise ValidationError("t must lie in [0, 1]")
        if t.dim() == 0:
            t = t.expand(b)
        return z, t, cond, squeeze

    def forward(self, z, t, cond):
        z, t, cond, squeeze = self._prepare(z, t, cond)
        seg, pos, f_t = self._segments(z, t, cond)
        for stage, layout, _ in self.cfg.stages():
            blocks = getattr(self, stage)
            if stage == "caba":
                ctx_names = ("audio", "emotion", "identity")
                ctx = torch.cat([seg[n] for n in ctx_names], dim=1)
                ctx_pos = torch.cat([pos[n] for n in ctx_names])
                for block in blocks:
                    seg["motion"] = block(seg["motion"], pos["motion"], ctx, ctx_pos, f_t)
                continue
            groups = [members for _, members in _STAGE_STREAMS[layout]]
            streams = [torch.cat([seg[m] for m in g], dim=1) for g in groups]
            positions = [torch.cat([pos[m] for m in g]) for g in groups]
            for block in blocks:
                streams = block(streams, positions, f_t)
            for g, s in zip(groups, streams):
                for m, piece in zip(g, s.split([seg[m].shape[1] for m in g], dim=1)):
                    seg[m] = piece
        out = self.final(seg["motion"][:, 1:], f_t)
        return out[0] if squeeze else out


def _path_params(d: int, r: int) -> int:
    # mod (6d), qkv (3d), proj (d), ffn (r d, d)
    return (d * 6 * d + 6 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * r * d + r * d) + (r * d * d + d)


def _cross_block_params(d: int, r: int) -> int:
    return ((d * 9 * d + 9 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * d + d)
            + (d * 2 * d + 2 * d) + (d * d + d) + (d * r * d + r * d) + (r * d * d + d))


def _embedding_params(cfg: ModelConfig) -> int:
    d, f = cfg.d_model, cfg.time_freq_dim
    return (
        (cfg.motion_dim * d + d)                                  # motion input projection
        + (cfg.audio_dim * d + d)                                 # audio projection
        + (cfg.identity_dim * d + d) + (d * d + d)                # identity perceptron
        + (cfg.num_emotions + 1) * d                              # emotion table incl. null row
        + (f * d + d) + (d * d + d)                               # timestep perceptron
        + 4 * d                                                   # guide type, audio/identity/guide nulls
        + (d * 2 * d + 2 * d) + (d * cfg.motion_dim + cfg.motion_dim)  # final layer
    )


def param_count(cfg: ModelConfig) -> int:
    """Number of learnable scalars of ``MotionDiT(cfg)`` (closed form)."""
    d, r = cfg.d_model, cfg.ffn_ratio
    total = _embedding_params(cfg)
    for stage, layout, n in cfg.stages():
        if stage == "caba":
            total += n * _cross_block_params(d, r)
        else:
            total += n * len(_STAGE_STREAMS[layout]) * _path_params(d, r)
    return total


def enumerate_params(cfg: ModelConfig) -> int:
    """Parameter count by instantiating the model on the meta device."""
    with torch.device("meta"):
        model = MotionDiT(cfg)
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> MotionDiT:
    """Construct a model with weights drawn from a private RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MotionDiT(cfg)
    return model.to(dtype)
