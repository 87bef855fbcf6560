"""scikit-learn style wrappers around the functional API.

Hyperparameters are constructor arguments (so ``get_params``/``set_params``
and ``clone`` work); learned state lives in trailing-underscore attributes.
``X`` is always a list of :class:`~motionflow.data_synth.ClipRecord`.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .alse import SyncExpertConfig, alse_loss, pretrain_expert, sync_auc, sync_scores
from .conditioning import DEFAULT_DROPOUT, ConditionSet
from .data_synth import ClipRecord, compute_norm_stats
from .dit import ModelConfig, param_count
from .engine import (StreamSession, TrainConfig, clip_conditions, evaluate, evaluate_predictions, generate,
                     generate_batch, stream, train)
from .exceptions import ValidationError
from .flow import SamplerConfig
from .motion_space import DEFAULT_FPS, MotionSequence, NormStats, denormalize, normalize
from .validation import check_array, check_is_fitted


def _check_clips(X, name="X"):
    clips = list(X)
    if not clips:
        raise ValidationError(f"{name} must contain at least one clip")
    for c in clips:
        if not isinstance(c, ClipRecord):
            raise ValidationError(f"{name} must hold ClipRecord objects, got {type(c).__name__}")
    return clips


def _frames(X):
    if isinstance(X, MotionSequence):
        return X.data
    if isinstance(X, (list, tuple)):
        parts = [c.motion.data if isinstance(c, ClipRecord) else
                 c.data if isinstance(c, MotionSequence) else check_array(c, ndim=2) for c in X]
        return np.concatenate(parts)
    return check_array(X, ndim=2, name="X")


class MotionNormalizer(TransformerMixin, BaseEstimator):
    """Per-dimension standardization of motion frames."""

    def fit(self, X, y=None):
        self.stats_ = compute_norm_stats([_frames(X)])
        self.n_features_in_ = self.stats_.mean.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return normalize(check_array(X, shape=(None, self.n_features_in_), name="X"), self.stats_)

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        return denormalize(check_array(X, shape=(None, self.n_features_in_), name="X"), self.stats_)


class SyncExpertEstimator(BaseEstimator):
    """Audio/lip sync scorer; ``score`` is the aligned-vs-shifted ROC AUC."""

    def __init__(self, window=5, lip_dims=tuple(range(51, 63)), embed_dim=64, hidden_dim=128, shift_min=10,
                 lr=1e-3, steps=1500, batch_size=128, seed=0):
        self.window = window
        self.lip_dims = lip_dims
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.shift_min = shift_min
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.seed = seed

    def _sequences(self, clips):
        return [(c.audio, normalize(c.motion.data, self.stats_)) for c in clips]

    def fit(self, X, y=None, stats: NormStats = None):
        clips = _check_clips(X)
        self.stats_ = stats or compute_norm_stats(clips)
        cfg = SyncExpertConfig(window=self.window, lip_dims=tuple(self.lip_dims), embed_dim=self.embed_dim,
                               hidden_dim=self.hidden_dim, audio_dim=clips[0].audio.shape[1],
                               motion_dim=clips[0].motion.data.shape[1], shift_min=self.shift_min, lr=self.lr,
                               steps=self.steps, batch_size=self.batch_size)
        self.expert_ = pretrain_expert(self._sequences(clips), cfg, seed=self.seed)
        return self

    def decision_function(self, audio, motion):
        """Per-window cosine sync scores for raw (unnormalized) ``motion``."""
        check_is_fitted(self, "expert_")
        m = normalize(check_array(motion, ndim=2, name="motion"), self.stats_)
        return sync_scores(self.expert_, check_array(audio, ndim=2, name="audio"), m).detach().numpy()

    def loss(self, audio, motion) -> float:
        check_is_fitted(self, "expert_")
        m = normalize(check_array(motion, ndim=2, name="motion"), self.stats_)
        return float(alse_loss(self.expert_, audio, m).detach())

    def score(self, X, y=None, shift=10, n_pairs=2000):
        check_is_fitted(self, "expert_")
        return sync_auc(self.expert_, self._sequences(_check_clips(X)), shift=shift, n_pairs=n_pairs)


class MotionGenerator(BaseEstimator):
    """Audio-conditioned motion generator trained with rectified flow.

    ``predict(X)`` generates the first ``window`` frames of every clip from
    its audio, identity, emotion and first frame; ``score`` is the mean
    per-dimension lip correlation with the ground truth.
    """

    def __init__(self, d_model=128, n_heads=4, n_four_stream=3, n_two_stream=6, n_single_stream=12,
                 variant="c2f", lr=1e-4, batch_size=16, epochs=10, steps_per_epoch=None, window=80,
                 grad_clip=None, audio_dropout=DEFAULT_DROPOUT["audio"], n_steps=10, cfg_audio=0.0,
                 cfg_emotion=0.0, cfg_identity=0.0, lip_dims=tuple(range(51, 63)), seed=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_four_stream = n_four_stream
        self.n_two_stream = n_two_stream
        self.n_single_stream = n_single_stream
        self.variant = variant
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.window = window
        self.grad_clip = grad_clip
        self.audio_dropout = audio_dropout
        self.n_steps = n_steps
        self.cfg_audio = cfg_audio
        self.cfg_emotion = cfg_emotion
        self.cfg_identity = cfg_identity
        self.lip_dims = lip_dims
        self.seed = seed

    def model_config(self, clips) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_heads=self.n_heads, n_four_stream=self.n_four_stream,
                           n_two_stream=self.n_two_stream, n_single_stream=self.n_single_stream,
                           variant=self.variant, num_keypoints=clips[0].identity.num_keypoints,
                           audio_dim=clips[0].audio.shape[1],
                           num_emotions=max(max(c.emotion for c in clips) + 1, 1))

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                           steps_per_epoch=self.steps_per_epoch, seed=self.seed, window=self.window,
                           grad_clip=self.grad_clip, dropout={**DEFAULT_DROPOUT, "audio": self.audio_dropout})

    def sampler_config(self, seed=None) -> SamplerConfig:
        scales = {k: v for k, v in (("audio", self.cfg_audio), ("emotion", self.cfg_emotion),
                                    ("identity", self.cfg_identity)) if v}
        return SamplerConfig(self.n_steps, scales, self.seed if seed is None else seed)

    @property
    def n_parameters_(self) -> int:
        check_is_fitted(self, "model_")
        return param_count(self.model_.cfg)

    def fit(self, X, y=None, *, val_clips=None, expert=None, stats: NormStats = None, log_path=None,
            model_config: ModelConfig = None):
        clips = _check_clips(X)
        result = train(clips, model_config or self.model_config(clips), self.train_config(), stats=stats,
                       val_clips=val_clips, expert=expert, log_path=log_path)
        self.model_ = result.model
        self.stats_ = result.stats
        self.records_ = result.records
        self.val_history_ = result.epoch_val
        return self

    def sample(self, cond: ConditionSet, num_frames: int, seed=None) -> MotionSequence:
        check_is_fitted(self, ["model_", "stats_"])
        return generate(self.model_, cond, num_frames, self.sampler_config(seed), self.stats_)

    def predict(self, X, num_frames=None):
        check_is_fitted(self, ["model_", "stats_"])
        clips = _check_clips(X)
        n = num_frames or self.window
        conds = [clip_conditions(c, self.stats_, 0, n) for c in clips]
        return generate_batch(self.model_, conds, n, self.sampler_config(), self.stats_)

    def evaluate(self, X, expert=None) -> dict:
        check_is_fitted(self, ["model_", "stats_"])
        return evaluate(self.model_, _check_clips(X), self.stats_, self.lip_dims,
                        sampler_cfg=self.sampler_config(), expert=expert, window=self.window)

    def score(self, X, y=None):
        preds = self.predict(X)
        return evaluate_predictions(preds, _check_clips(X), self.lip_dims)["lip_corr"]

    def stream(self, audio_chunks, identity, emotion: int, guide=None, chunk_length=100, fps=DEFAULT_FPS):
        """Yield one :class:`MotionSequence` per audio chunk."""
        check_is_fitted(self, ["model_", "stats_"])
        session = StreamSession(self.model_, self.stats_, identity, emotion, guide, self.sampler_config(),
                                chunk_length, fps)
        return stream(session, audio_chunks)
