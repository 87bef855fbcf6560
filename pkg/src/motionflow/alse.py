"""Lip-motion sync expert: a twin-encoder scorer of audio/motion windows.

Sliding windows of ``W`` frames are flattened and embedded by one small
perceptron per modality; the sync score is the cosine similarity of the
L2-normalised embeddings and the sync loss is ``(1 - cos) / 2`` averaged over
windows, so it lies in ``[0, 1]``.

The expert sees normalized motion restricted to ``lip_dims``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import roc_auc_score
from torch import nn

from .checkpoint import load_checkpoint, load_into, module_tensors, save_checkpoint
from .exceptions import ConfigError, ValidationError

DEFAULT_LIP_DIMS = tuple(range(51, 63))


@dataclass
class SyncExpertConfig:
    window: int = 5
    lip_dims: tuple = DEFAULT_LIP_DIMS
    embed_dim: int = 64
    hidden_dim: int = 128
    audio_dim: int = 64
    motion_dim: int = 70
    shift_min: int = 10
    lr: float = 1e-3
    steps: int = 1500
    batch_size: int = 128

    def __post_init__(self):
        self.lip_dims = tuple(int(i) for i in self.lip_dims)
        if self.window < 1:
            raise ConfigError("sync window must be >= 1")
        if not self.lip_dims or min(self.lip_dims) < 0 or max(self.lip_dims) >= self.motion_dim:
            raise ConfigError("lip_dims must be a non-empty list of indices below motion_dim")
        if self.shift_min < 1:
            raise ConfigError("shift_min must be >= 1")


def sliding_windows(x: torch.Tensor, window: int) -> torch.Tensor:
    """``(..., T, D)`` -> ``(..., T - W + 1, W * D)`` with stride 1."""
    return x.unfold(-2, window, 1).transpose(-1, -2).flatten(-2)


class SyncExpert(nn.Module):
    def __init__(self, cfg: SyncExpertConfig):
        super().__init__()
        self.cfg = cfg
        w, h, e = cfg.window, cfg.hidden_dim, cfg.embed_dim
        self.audio_enc = nn.Sequential(nn.Linear(w * cfg.audio_dim, h), nn.SiLU(), nn.Linear(h, e))
        self.motion_enc = nn.Sequential(nn.Linear(w * len(cfg.lip_dims), h), nn.SiLU(), nn.Linear(h, e))

    def embed(self, audio, motion):
        """Un-normalised window embeddings for aligned ``audio`` and ``motion``."""
        audio = torch.as_tensor(audio, dtype=self.dtype)
        motion = torch.as_tensor(motion, dtype=self.dtype)
        if audio.shape[-2] != motion.shape[-2]:
            raise ValidationError(f"audio has {audio.shape[-2]} frames, motion has {motion.shape[-2]}")
        if audio.shape[-2] < self.cfg.window:
            raise ValidationError(f"need at least {self.cfg.window} frames, got {audio.shape[-2]}")
        lips = motion[..., list(self.cfg.lip_dims)]
        return (self.audio_enc(sliding_windows(audio, self.cfg.window)),
                self.motion_enc(sliding_windows(lips, self.cfg.window)))

    @property
    def dtype(self):
        return self.audio_enc[0].weight.dtype

    def forward(self, audio, motion):
        return encode_windows(self, audio, motion)


def encode_windows(expert: SyncExpert, audio, motion):
    """L2-normalised ``(audio, motion)`` embeddings, one row per window."""
    ea, em = expert.embed(audio, motion)
    return F.normalize(ea, dim=-1, eps=1e-12), F.normalize(em, dim=-1, eps=1e-12)


def sync_scores(expert: SyncExpert, audio, motion) -> torch.Tensor:
    ea, em = encode_windows(expert, audio, motion)
    return (ea * em).sum(-1)


def alse_loss(expert: SyncExpert, audio, motion) -> torch.Tensor:
    return torch.mean((1.0 - sync_scores(expert, audio, motion)) / 2.0)


def _sample_pairs(sequences, cfg: SyncExpertConfig, n: int, rng: np.random.Generator):
    """Aligned and misaligned window pairs drawn from the same clip."""
    w, s_min = cfg.window, cfg.shift_min
    usable = [i for i, (a, _) in enumerate(sequences) if a.shape[0] >= w + s_min]
    if not usable:
        raise ValidationError(
            f"no sequence has the {w + s_min} frames needed for a window plus a {s_min}-frame shift"
        )
    audio, pos, neg = [], [], []
    for _ in range(n):
        a, m = sequences[usable[rng.integers(len(usable))]]
        num_frames = a.shape[0]
        start = int(rng.integers(0, num_frames - w + 1))
        shifts = [d for d in range(-(num_frames - w), num_frames - w + 1)
                  if abs(d) >= s_min and 0 <= start + d <= num_frames - w]
        if not shifts:
            start = 0
            shifts = list(range(s_min, num_frames - w + 1))
        d = shifts[rng.integers(len(shifts))]
        audio.append(a[start:start + w])
        pos.append(m[start:start + w])
        neg.append(m[start + d:start + d + w])
    return np.stack(audio), np.stack(pos), np.stack(neg)


def pretrain_expert(sequences, cfg: SyncExpertConfig = None, seed: int = 0, log=None) -> SyncExpert:
    """Contrastive pretraining on ``[(audio T x D_a, normalized motion T x D), ...]``.

    Each step pairs audio windows with their aligned motion (label 1) and with
    motion shifted by at least ``shift_min`` frames in the same clip (label 0);
    the loss is binary cross-entropy on ``(1 + cos) / 2``.
    """
    cfg = cfg or SyncExpertConfig()
    sequences = [(np.asarray(a, dtype=np.float32), np.asarray(m, dtype=np.float32)) for a, m in sequences]
    if not sequences:
        raise ValidationError("empty dataset")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        expert = SyncExpert(cfg)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(expert.parameters(), lr=cfg.lr)
    labels = torch.cat([torch.ones(cfg.batch_size), torch.zeros(cfg.batch_size)])
    for step in range(cfg.steps):
        a, pos, neg = _sample_pairs(sequences, cfg, cfg.batch_size, rng)
        a = torch.from_numpy(np.concatenate([a, a]))
        m = torch.from_numpy(np.concatenate([pos, neg]))
        cos = sync_scores(expert, a, m).squeeze(-1)
        p = ((1 + cos) / 2).clamp(1e-6, 1 - 1e-6)
        loss = F.binary_cross_entropy(p, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None and (step % 100 == 0 or step == cfg.steps - 1):
            log(step, float(loss.detach()))
    return expert.eval()


@torch.no_grad()
def sync_auc(expert: SyncExpert, sequences, shift: int = 10, n_pairs: int = 2000, seed: int = 1) -> float:
    """ROC AUC of sync scores separating aligned from ``shift``-frame-shifted windows."""
    cfg = SyncExpertConfig(**{**asdict(expert.cfg), "shift_min": shift})
    rng = np.random.default_rng(seed)
    sequences = [(np.asarray(a, dtype=np.float32), np.asarray(m, dtype=np.float32)) for a, m in sequences]
    a, pos, neg = _sample_pairs(sequences, cfg, n_pairs, rng)
    a = torch.from_numpy(a).to(expert.dtype)
    s_pos = sync_scores(expert, a, torch.from_numpy(pos)).reshape(-1).numpy()
    s_neg = sync_scores(expert, a, torch.from_numpy(neg)).reshape(-1).numpy()
    y = np.concatenate([np.ones_like(s_pos), np.zeros_like(s_neg)])
    return float(roc_auc_score(y, np.concatenate([s_pos, s_neg])))


def save_expert(path, expert: SyncExpert, extra: dict = None):
    save_checkpoint(path, module_tensors(expert), "alse", asdict(expert.cfg), extra)


def load_expert(path) -> SyncExpert:
    manifest, tensors = load_checkpoint(path)
    if manifest["kind"] != "alse":
        raise ValidationError(f"{path} holds a {manifest['kind']!r} checkpoint, expected 'alse'")
    expert = SyncExpert(SyncExpertConfig(**manifest["config"]))
    return load_into(expert, tensors).eval()
