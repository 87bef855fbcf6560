"""Training loop, chunked streaming generation and evaluation."""
from __future__ import annotations

import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .alse import SyncExpert, alse_loss
from .checkpoint import load_checkpoint, load_into, module_tensors, save_checkpoint
from .conditioning import DEFAULT_DROPOUT, ConditionBatch, ConditionSet, dropout_masks
from .data_synth import ClipRecord
from .dit import ModelConfig, MotionDiT, build_model, param_count
from .exceptions import ConfigError, DivergenceError, ProtocolError, ValidationError
from .flow import (SYNC_THRESHOLD, SamplerConfig, euler_sample, make_flow_state, predict_clean,
                   rf_loss, total_loss, velocity_loss)
from .motion_space import (DEFAULT_FPS, MotionSequence, NormStats, denormalize, normalize,
                           num_keypoints_for, scale_index, smoothness)
from .validation import check_array

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-3
LOG_FIELDS = ("epoch", "step", "loss_rf", "loss_vel", "loss_alse", "lambda_sync", "val_mse")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 10
    steps_per_epoch: Optional[int] = None
    seed: int = 0
    window: int = 80
    dropout: dict = field(default_factory=lambda: dict(DEFAULT_DROPOUT))
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None
    t_sampler: str = "uniform"
    rf_weight: float = 1.0
    vel_weight: float = 1.0
    tau: float = SYNC_THRESHOLD
    alse_path: Optional[str] = None
    variant: Optional[str] = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0 or self.window < 3:
            raise ConfigError("batch_size >= 1, epochs >= 0 and window >= 3 are required")
        self.betas = tuple(self.betas)
        self.dropout = {**DEFAULT_DROPOUT, **self.dropout}


@dataclass
class LogRecord:
    epoch: int
    step: int
    loss_rf: float
    loss_vel: float
    loss_alse: float
    lambda_sync: float
    val_mse: float = float("nan")

    def line(self) -> str:
        vals = (getattr(self, f) for f in LOG_FIELDS)
        return ", ".join(str(v) if isinstance(v, int) else repr(float(v)) for v in vals)


@dataclass
class TrainResult:
    model: MotionDiT
    stats: NormStats
    records: list
    epoch_val: list

    @property
    def sync_fraction(self) -> float:
        if not self.records:
            return 0.0
        return float(np.mean([r.lambda_sync for r in self.records]))


class _WindowSampler:
    """Draws normalized training windows from a list of clips."""

    def __init__(self, clips, stats: NormStats, window: int, dtype=torch.float32):
        usable = [c for c in clips if len(c) >= window]
        if not usable:
            raise ValidationError(f"no clip has the {window} frames needed for a training window")
        skipped = len(clips) - len(usable)
        if skipped:
            log.warning("%d clips shorter than %d frames were skipped", skipped, window)
        self.window = window
        self.dtype = dtype
        self.motion = [normalize(c.motion, stats) for c in usable]
        self.audio = [c.audio for c in usable]
        self.identity = [c.identity.flatten() for c in usable]
        self.emotion = [c.emotion for c in usable]

    def batch(self, idx, starts):
        w = self.window
        z0 = np.stack([self.motion[i][s:s + w] for i, s in zip(idx, starts)])
        audio = np.stack([self.audio[i][s:s + w] for i, s in zip(idx, starts)])
        ident = np.stack([self.identity[i] for i in idx])
        emo = np.array([self.emotion[i] for i in idx], dtype=np.int64)
        as_t = lambda a: torch.as_tensor(a, dtype=self.dtype)  # noqa: E731
        cond = ConditionBatch(as_t(audio), as_t(ident), torch.as_tensor(emo), as_t(z0[:, 0]),
                              {k: torch.ones(len(idx), dtype=torch.bool)
                               for k in ("audio", "emotion", "identity", "guide")})
        return as_t(z0), cond

    def random_batch(self, rng: np.random.Generator, size: int):
        idx = rng.integers(len(self.motion), size=size)
        starts = [int(rng.integers(0, self.motion[i].shape[0] - self.window + 1)) for i in idx]
        return self.batch(idx, starts)

    def first_windows(self):
        return self.batch(list(range(len(self.motion))), [0] * len(self.motion))

    def tiled_windows(self):
        """Non-overlapping windows covering every clip from its first frame."""
        idx, starts = [], []
        for i, m in enumerate(self.motion):
            for s in range(0, m.shape[0] - self.window + 1, self.window):
                idx.append(i)
                starts.append(s)
        return self.batch(idx, starts)


def validation_mse(model, clips, stats: NormStats, window: int = 80, n_draws: int = 2, seed: int = 0,
                   dims=None) -> float:
    """Velocity-regression MSE on tiled windows of held-out clips.

    Averages over ``n_draws`` seeded (t, noise) draws with all conditions
    present; ``dims`` restricts the error to a subset of motion dimensions.
    """
    sampler = clips if isinstance(clips, _WindowSampler) else _WindowSampler(clips, stats, window)
    z0, cond = sampler.tiled_windows()
    was_training = model.training
    model.eval()
    total = 0.0
    with torch.no_grad():
        for k in range(n_draws):
            state = make_flow_state(z0, torch.Generator().manual_seed(seed + k))
            pred = model(state.zt, state.t, cond)
            if dims is not None:
                pred, target = pred[..., list(dims)], state.target[..., list(dims)]
            else:
                target = state.target
            total += float(rf_loss(pred, target))
    model.train(was_training)
    return total / n_draws


def train(clips, model_cfg: ModelConfig, train_cfg: TrainConfig, *, stats: NormStats = None,
          val_clips=None, expert: SyncExpert = None, log_path=None, model: MotionDiT = None,
          progress=None) -> TrainResult:
    """Fit the velocity network on ``clips``.

    Each step draws random windows, applies per-condition dropout, noises the
    windows along the straight path and minimises ``L_RF + L_vel`` plus the
    gated sync loss when ``expert`` is given.
    """
    if not clips:
        raise ValidationError("training needs a non-empty dataset")
    if train_cfg.variant is not None and train_cfg.variant != model_cfg.variant:
        model_cfg = ModelConfig(**{**model_cfg.to_dict(), "variant": train_cfg.variant})
    if stats is None:
        from .data_synth import compute_norm_stats
        stats = compute_norm_stats(clips)
    if model is None:
        model = build_model(model_cfg, seed=train_cfg.seed)
    sampler = _WindowSampler(clips, stats, train_cfg.window)
    val_sampler = _WindowSampler(val_clips, stats, train_cfg.window) if val_clips else None
    if expert is not None:
        expert.requires_grad_(False)

    steps = train_cfg.steps_per_epoch or max(
        1, math.ceil(sum(m.shape[0] for m in sampler.motion) / (train_cfg.window * train_cfg.batch_size))
    )
    rng = np.random.default_rng(train_cfg.seed)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, betas=train_cfg.betas, eps=train_cfg.adam_eps)
    records, epoch_val = [], []
    log_fh = open(log_path, "w") if log_path else None
    if log_fh:
        log_fh.write("# " + ", ".join(LOG_FIELDS) + "\n")
    model.train()
    try:
        global_step = 0
        for epoch in range(train_cfg.epochs):
            for step in range(steps):
                z0, cond = sampler.random_batch(rng, train_cfg.batch_size)
                cond = cond.with_keep(**dropout_masks(z0.shape[0], train_cfg.dropout, gen))
                state = make_flow_state(z0, gen, train_cfg.t_sampler)
                pred = model(state.zt, state.t, cond)
                l_rf = rf_loss(pred, state.target)
                l_vel = velocity_loss(pred, state.target)
                l_sync = None
                if expert is not None:
                    l_sync = alse_loss(expert, cond.audio, predict_clean(state.zt, state.t, pred))
                loss, lam = total_loss(pred, state, l_sync, train_cfg.tau,
                                       train_cfg.rf_weight, train_cfg.vel_weight)
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"loss became {float(loss.detach())} at epoch {epoch} step {step} "
                        f"(rf={float(l_rf.detach())}, vel={float(l_vel.detach())}); lower the learning rate"
                    )
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if train_cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
                opt.step()
                rec = LogRecord(epoch, global_step, float(l_rf.detach()), float(l_vel.detach()),
                                float("nan") if l_sync is None else float(l_sync.detach()), lam)
                if step == steps - 1 and val_sampler is not None:
                    rec.val_mse = validation_mse(model, val_sampler, stats, seed=train_cfg.seed + 1)
                    epoch_val.append(rec.val_mse)
                records.append(rec)
                if log_fh:
                    log_fh.write(rec.line() + "\n")
                global_step += 1
            if progress is not None:
                progress(epoch, records[-steps:])
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return TrainResult(model, stats, records, epoch_val)


def read_metrics_log(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        vals = [v.strip() for v in line.split(",")]
        out.append(LogRecord(int(vals[0]), int(vals[1]), *(float(v) for v in vals[2:])))
    return out


def save_model(path, model: MotionDiT, stats: NormStats = None, extra: dict = None):
    meta = dict(extra or {})
    if stats is not None:
        meta["stats_mean"] = stats.mean.tolist()
        meta["stats_std"] = stats.std.tolist()
    save_checkpoint(path, module_tensors(model), "dit", model.cfg.to_dict(), meta)


def load_model(path):
    """Returns ``(model, stats or None, manifest)``."""
    manifest, tensors = load_checkpoint(path)
    if manifest["kind"] != "dit":
        raise ValidationError(f"{path} holds a {manifest['kind']!r} checkpoint, expected 'dit'")
    model = MotionDiT(ModelConfig(**manifest["config"]))
    load_into(model, tensors).eval()
    extra = manifest.get("extra", {})
    stats = None
    if "stats_mean" in extra:
        stats = NormStats(np.array(extra["stats_mean"]), np.array(extra["stats_std"]))
    return model, stats, manifest


def _finalize(z: np.ndarray, stats: NormStats, fps: float) -> MotionSequence:
    raw = denormalize(z, stats)
    k = num_keypoints_for(raw.shape[-1])
    raw[..., scale_index(k)] = np.maximum(raw[..., scale_index(k)], SCALE_FLOOR)
    return MotionSequence(raw, fps, k)


def generate(model, cond, num_frames: int, sampler_cfg: SamplerConfig = None, stats: NormStats = None,
             fps: float = DEFAULT_FPS) -> MotionSequence:
    """Sample one window with guidance and map it back to raw motion units."""
    if stats is None:
        raise ConfigError("generation needs normalization statistics")
    z = euler_sample(model, cond, num_frames, sampler_cfg or SamplerConfig())
    return _finalize(z.numpy().astype(np.float64), stats, fps)


def generate_batch(model, conds, num_frames: int, sampler_cfg: SamplerConfig = None,
                   stats: NormStats = None, fps: float = DEFAULT_FPS) -> list:
    if stats is None:
        raise ConfigError("generation needs normalization statistics")
    cfg = model.cfg
    batch = ConditionBatch.collate(conds, num_frames, cfg.motion_dim, cfg.audio_dim, cfg.identity_dim)
    z = euler_sample(model, batch, num_frames, sampler_cfg or SamplerConfig(), batch_size=len(conds))
    return [_finalize(zi.numpy().astype(np.float64), stats, fps) for zi in z]


def clip_conditions(clip: ClipRecord, stats: NormStats, start: int = 0, num_frames: int = None) -> ConditionSet:
    """Conditions for ``clip[start:start+num_frames]`` with the window's first frame as guide."""
    num_frames = num_frames or len(clip) - start
    return ConditionSet(
        audio=clip.audio[start:start + num_frames], identity=clip.identity.flatten(),
        emotion=clip.emotion, guide=normalize(clip.motion.data[start], stats),
    )


class StreamSession:
    """Chunk-by-chunk generation where each chunk is guided by the previous chunk's last frame.

    ``guide`` is kept in normalized coordinates. Before the first chunk it is
    the user-supplied frame (normalized) or ``None`` (the null guide).
    """

    def __init__(self, model, stats: NormStats, identity, emotion: int, guide=None,
                 sampler_cfg: SamplerConfig = None, chunk_length: int = 100, fps: float = DEFAULT_FPS):
        if stats is None:
            raise ConfigError("streaming needs normalization statistics")
        if chunk_length < 1:
            raise ConfigError("chunk_length must be >= 1")
        self.model = model
        self.stats = stats
        self.identity = np.asarray(identity, dtype=np.float64).reshape(-1)
        self.emotion = emotion
        self.sampler_cfg = sampler_cfg or SamplerConfig()
        self.chunk_length = chunk_length
        self.fps = fps
        self.guide = None if guide is None else normalize(np.asarray(guide, dtype=np.float64), stats)
        self.emitted = 0
        self.next_index = 0
        self.closed = False
        self.history = []

    def push(self, index: int, audio_chunk) -> MotionSequence:
        if self.closed:
            raise ProtocolError("stream already ended with a partial chunk")
        if index != self.next_index:
            raise ProtocolError(f"expected chunk {self.next_index}, got chunk {index}")
        audio = check_array(audio_chunk, ndim=2, name="audio chunk")
        n = audio.shape[0]
        if n < 1 or n > self.chunk_length:
            raise ValidationError(f"chunk has {n} frames; expected 1..{self.chunk_length}")
        if n < self.chunk_length:
            pad = np.repeat(audio[-1:], self.chunk_length - n, axis=0)
            audio = np.concatenate([audio, pad])
            self.closed = True
        cond = ConditionSet(audio=audio, identity=self.identity, emotion=self.emotion, guide=self.guide)
        cfg = SamplerConfig(self.sampler_cfg.n_steps, self.sampler_cfg.cfg_scales,
                            self.sampler_cfg.seed + index)
        z = euler_sample(self.model, cond, self.chunk_length, cfg).numpy().astype(np.float64)[:n]
        self.history.append({"index": index, "guide": None if self.guide is None else self.guide.copy(),
                             "normalized": z.copy()})
        self.guide = z[-1].copy()
        self.emitted += n
        self.next_index += 1
        return _finalize(z, self.stats, self.fps)


def stream(session: StreamSession, audio_chunks):
    """Yield generated frames chunk by chunk, in arrival order."""
    for i, chunk in enumerate(audio_chunks):
        yield session.push(i, chunk)


def stream_pipeline(session: StreamSession, producer, maxsize: int = 2):
    """Run ``producer`` (an iterable of audio chunks) on a thread feeding an ordered queue.

    Generation of chunk ``k + 1`` starts only after chunk ``k`` is emitted.
    """
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    errors = []

    def produce():
        try:
            for i, chunk in enumerate(producer):
                q.put((i, chunk))
        except Exception as exc:  # forwarded to the consumer
            errors.append(exc)
        finally:
            q.put(None)

    thread = threading.Thread(target=produce, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is None:
            break
        yield session.push(*item)
    thread.join()
    if errors:
        raise errors[0]


def real_time_factor(inference_seconds: float, num_frames: int, fps: float = DEFAULT_FPS) -> float:
    """Inference time divided by the duration of the generated output."""
    return inference_seconds / (num_frames / fps)


def chunk_continuity(frames: np.ndarray, chunk_length: int):
    """Boundary and median intra-chunk first-difference magnitudes."""
    diffs = np.linalg.norm(np.diff(frames, axis=0), axis=1)
    boundary_idx = np.arange(chunk_length - 1, frames.shape[0] - 1, chunk_length)
    mask = np.ones(diffs.shape[0], dtype=bool)
    mask[boundary_idx] = False
    return diffs[boundary_idx], float(np.median(diffs[mask]))


def _pearson(a, b) -> float:
    a, b = a - a.mean(), b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else 0.0


def evaluate_predictions(preds, clips, lip_dims, *, stats: NormStats = None, expert: SyncExpert = None,
                         fps: float = DEFAULT_FPS) -> dict:
    """Score raw predicted sequences against the matching prefix of each clip."""
    lip = list(lip_dims)
    pred_lip, true_lip, smooth, sync = [], [], [], []
    for pred, clip in zip(preds, clips):
        p = pred.data if isinstance(pred, MotionSequence) else np.asarray(pred, dtype=np.float64)
        truth = clip.motion.data[:p.shape[0]]
        pred_lip.append(p[:, lip])
        true_lip.append(truth[:, lip])
        if p.shape[0] >= 3:
            smooth.append(smoothness(p))
        if expert is not None and stats is not None:
            with torch.no_grad():
                sync.append(float(alse_loss(expert, clip.audio[:p.shape[0]], normalize(p, stats))))
    pl, tl = np.concatenate(pred_lip), np.concatenate(true_lip)
    mse = float(np.mean((pl - tl) ** 2))
    var = float(np.mean(tl.var(axis=0)))
    report = {
        "n_sequences": len(pred_lip),
        "frames": int(pl.shape[0]),
        "lip_mse": mse,
        "lip_var": var,
        "lip_mse_ratio": mse / var if var > 0 else float("nan"),
        "lip_corr": float(np.mean([_pearson(pl[:, j], tl[:, j]) for j in range(pl.shape[1])])),
        "smoothness": float(np.mean(smooth)) if smooth else float("nan"),
    }
    if sync:
        report["alse_loss"] = float(np.mean(sync))
    return report


def evaluate(model, clips, stats: NormStats, lip_dims, *, sampler_cfg: SamplerConfig = None,
             expert: SyncExpert = None, window: int = 80, fps: float = DEFAULT_FPS) -> dict:
    """Generate the first ``window`` frames of every clip and score them."""
    if not clips:
        raise ValidationError("evaluation needs at least one clip")
    conds = [clip_conditions(c, stats, 0, window) for c in clips]
    start = time.perf_counter()
    preds = generate_batch(model, conds, window, sampler_cfg, stats, fps)
    elapsed = time.perf_counter() - start
    report = evaluate_predictions(preds, clips, lip_dims, stats=stats, expert=expert, fps=fps)
    n_frames = window * len(clips)
    report.update({
        "variant": model.cfg.variant,
        "param_count": param_count(model.cfg),
        "fps": n_frames / elapsed,
        "rtf": real_time_factor(elapsed, n_frames, fps),
    })
    return report


def format_report(report: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in report.items())


def write_report_csv(path, reports: list):
    keys = list(dict.fromkeys(k for r in reports for k in r))
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in reports:
            fh.write(",".join(str(r.get(k, "")) for k in keys) + "\n")
