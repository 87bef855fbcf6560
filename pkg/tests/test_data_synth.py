import logging

import numpy as np
import pytest

from motionflow.data_synth import (OracleSpec, clip_audio, clip_motion, compute_norm_stats, generate_dataset,
                                   identity_params, is_validation, load_dataset, save_dataset, segment_dataset,
                                   segment_windows, split_train_val)
from motionflow.exceptions import ConfigError, ValidationError
from motionflow.motion_space import MotionParams, normalize, unflatten


def test_default_spec_shape():
    spec = OracleSpec()
    assert (spec.n_clips, spec.clip_frames, spec.num_emotions, spec.n_identities) == (64, 200, 4, 8)
    assert spec.motion_dim == 70
    assert spec.lip_dims == tuple(range(51, 63))


def test_generation_is_deterministic(small_spec):
    a, b = generate_dataset(small_spec), generate_dataset(small_spec)
    for x, y in zip(a, b):
        assert x.motion.data.tobytes() == y.motion.data.tobytes()
        assert x.audio.tobytes() == y.audio.tobytes()
        assert (x.emotion, x.identity_id) == (y.emotion, y.identity_id)
    other = generate_dataset(OracleSpec(**{**small_spec.to_dict(), "seed": small_spec.seed + 1}))
    assert not np.array_equal(a[0].audio, other[0].audio)


def test_zero_audio_gives_zero_lips(small_spec):
    audio = np.zeros((10, small_spec.audio_dim))
    motion = clip_motion(small_spec, audio, 0, 1)
    assert np.all(motion[:, list(small_spec.lip_dims)] == 0)


def test_doubling_emotion_amplitude_doubles_lips(small_spec):
    amps = list(small_spec.emotion_amplitudes)
    amps[2] *= 2
    doubled = OracleSpec(**{**small_spec.to_dict(), "emotion_amplitudes": tuple(amps)})
    audio = clip_audio(small_spec, 0)
    lips = list(small_spec.lip_dims)
    base = clip_motion(small_spec, audio, 1, 2)
    twice = clip_motion(doubled, audio, 1, 2)
    assert np.array_equal(twice[:, lips], 2 * base[:, lips])
    other = np.setdiff1d(np.arange(70), lips)
    assert np.array_equal(twice[:, other], base[:, other])
    # other labels untouched
    assert np.array_equal(clip_motion(doubled, audio, 1, 0), clip_motion(small_spec, audio, 1, 0))


def test_lips_are_linear_in_audio(small_spec, rng):
    g = identity_params(small_spec, 0)["gain"]
    a = rng.normal(size=(6, small_spec.audio_dim))
    b = rng.normal(size=(6, small_spec.audio_dim))
    lips = list(small_spec.lip_dims)
    ma = clip_motion(small_spec, a, 0, 0)[:, lips]
    mb = clip_motion(small_spec, b, 0, 0)[:, lips]
    mab = clip_motion(small_spec, a + b, 0, 0)[:, lips]
    np.testing.assert_allclose(mab, ma + mb, atol=1e-12)
    np.testing.assert_allclose(ma, small_spec.emotion_amplitudes[0] * a @ g, atol=1e-12)


def test_frames_are_valid_motion_params(small_clips):
    for clip in small_clips:
        for frame in clip.motion.data:
            assert isinstance(unflatten(frame, 21), MotionParams)


def test_segment_windows(small_clips):
    clip = small_clips[0]
    ws = segment_windows(clip, window=40, stride=1)
    assert len(ws) == 1 and ws[0].start == 0
    ws = segment_windows(clip, window=10, stride=5)
    assert [w.start for w in ws] == list(range(0, 31, 5))
    for w in ws:
        assert w.audio.shape[0] == w.motion.shape[0] == 10
        assert np.array_equal(w.guide, w.motion[0])
    rnd = segment_windows(clip, window=10, count=20, seed=4)
    assert rnd and all(0 <= w.start <= 30 for w in rnd)
    assert [w.start for w in rnd] == [w.start for w in segment_windows(clip, window=10, count=20, seed=4)]


def test_short_clips_are_skipped_with_warning(small_clips, caplog):
    with caplog.at_level(logging.WARNING):
        assert segment_windows(small_clips[0], window=80) == []
    assert "shorter than" in caplog.text
    windows, skipped = segment_dataset(small_clips, window=80)
    assert windows == [] and skipped == len(small_clips)


def test_window_length_eighty_on_default_clips():
    spec = OracleSpec(n_clips=3)
    windows, skipped = segment_dataset(generate_dataset(spec), window=80, count=4)
    assert skipped == 0 and len(windows) == 12
    assert all(w.audio.shape == (80, 64) and w.motion.shape == (80, 70) for w in windows)


def test_norm_stats(small_clips):
    stats = compute_norm_stats(small_clips)
    frames = np.concatenate([c.motion.data for c in small_clips])
    n = frames.shape[0]
    mean = frames.sum(axis=0) / n
    var = ((frames - mean) ** 2).sum(axis=0) / n
    np.testing.assert_allclose(stats.mean, mean, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(stats.std, np.maximum(np.sqrt(var), 1e-6), rtol=1e-10)
    z = normalize(frames, stats)
    varying = np.sqrt(var) > 1e-6
    assert np.all(np.abs(z.mean(axis=0)) <= 1e-5)
    assert np.all(np.abs(z.std(axis=0)[varying] - 1) <= 1e-3)


def test_norm_stats_floor_and_errors():
    stats = compute_norm_stats([np.ones((5, 70))])
    assert np.all(stats.std == 1e-6)
    with pytest.raises(ValidationError):
        compute_norm_stats([])
    with pytest.raises(ValidationError):
        compute_norm_stats([np.ones((1, 70))])


def test_split_is_stable_and_disjoint():
    clips = generate_dataset(OracleSpec(n_clips=64, clip_frames=10))
    train, val = split_train_val(clips)
    assert len(train) + len(val) == 64 and val
    assert {c.clip_id for c in train}.isdisjoint({c.clip_id for c in val})
    assert [c.clip_id for c in val] == [c.clip_id for c in clips if is_validation(c.clip_id)]


def test_spec_text_roundtrip():
    spec = OracleSpec(seed=5, num_emotions=3, lip_keypoints=(1, 2))
    assert OracleSpec.from_text(spec.to_text()) == spec
    with pytest.raises(ConfigError):
        OracleSpec.from_text("seed = 1\nbogus = 2\n")
    with pytest.raises(ConfigError):
        OracleSpec(num_emotions=3, emotion_amplitudes=(1.0, 2.0))


def test_dataset_roundtrip(tmp_path, small_spec, small_clips):
    stats = save_dataset(tmp_path, small_clips, small_spec)
    for ext in ("mseq", "afea", "meta"):
        assert (tmp_path / "clips" / f"{small_clips[0].clip_id}.{ext}").exists()
    clips, loaded_stats, spec = load_dataset(tmp_path)
    assert spec == small_spec
    np.testing.assert_array_equal(loaded_stats.mean, stats.mean.astype(np.float32))
    for a, b in zip(small_clips, clips):
        assert a.clip_id == b.clip_id and a.emotion == b.emotion and a.identity_id == b.identity_id
        np.testing.assert_array_equal(b.motion.data, a.motion.data.astype(np.float32))
        np.testing.assert_array_equal(b.audio, a.audio.astype(np.float32))
        np.testing.assert_allclose(b.identity.points, a.identity.points, rtol=1e-15)
    with pytest.raises(ValidationError):
        load_dataset(tmp_path / "nowhere")
