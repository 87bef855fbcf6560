import hashlib

import numpy as np
import pytest
import torch

from motionflow.alse import SyncExpertConfig, pretrain_expert
from motionflow.conditioning import ConditionSet
from motionflow.data_synth import compute_norm_stats
from motionflow.dit import ModelConfig, build_model
from motionflow.engine import (StreamSession, TrainConfig, chunk_continuity, clip_conditions, evaluate,
                               evaluate_predictions, generate, generate_batch, load_model, read_metrics_log,
                               real_time_factor, save_model, stream, stream_pipeline, train)
from motionflow.exceptions import ConfigError, DivergenceError, ProtocolError, ValidationError
from motionflow.flow import SamplerConfig
from motionflow.motion_space import normalize, scale_index

from .conftest import randomize_


def quick_cfg(**kw):
    base = dict(lr=1e-3, batch_size=4, epochs=2, steps_per_epoch=3, window=20, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def file_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def toy_model(small_clips):
    cfg = ModelConfig(d_model=16, n_heads=2, n_four_stream=1, n_two_stream=1, n_single_stream=1,
                      audio_dim=8, num_emotions=4, time_freq_dim=16)
    model = randomize_(build_model(cfg), std=0.1, seed=4).eval()
    return model, compute_norm_stats(small_clips)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig(dropout={"audio": 0.2})
    assert cfg.dropout["audio"] == 0.2 and cfg.dropout["emotion"] == 0.1
    assert cfg.betas == (0.9, 0.999) and cfg.adam_eps == 1e-8 and cfg.lr == 1e-4


def test_toy_loss_decreases(small_clips, tiny_cfg):
    cfg = TrainConfig(lr=3e-3, batch_size=8, epochs=5, steps_per_epoch=8, window=20, seed=0)
    result = train(small_clips, tiny_cfg, cfg)
    per_epoch = [np.mean([r.loss_rf + r.loss_vel for r in result.records if r.epoch == e]) for e in range(5)]
    assert all(b < a for a, b in zip(per_epoch, per_epoch[1:])), per_epoch


def test_zero_learning_rate_leaves_parameters(small_clips, tiny_cfg):
    model = randomize_(build_model(tiny_cfg), seed=1)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(small_clips, tiny_cfg, quick_cfg(lr=0.0, epochs=1), model=model)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_training_is_deterministic(small_clips, tiny_cfg, tmp_path):
    paths = []
    for run in range(2):
        r = train(small_clips, tiny_cfg, quick_cfg(), log_path=tmp_path / f"log{run}.txt")
        save_model(tmp_path / f"m{run}.ckpt", r.model, r.stats)
        paths.append(tmp_path / f"m{run}.ckpt")
    assert file_hash(paths[0]) == file_hash(paths[1])
    assert file_hash(tmp_path / "log0.txt") == file_hash(tmp_path / "log1.txt")
    r = train(small_clips, tiny_cfg, quick_cfg(seed=1))
    save_model(tmp_path / "other.ckpt", r.model, r.stats)
    assert file_hash(tmp_path / "other.ckpt") != file_hash(paths[0])


def test_metrics_log_without_expert(small_clips, tiny_cfg, tmp_path):
    train_clips, val_clips = small_clips[:10], small_clips[10:]
    r = train(train_clips, tiny_cfg, quick_cfg(), val_clips=val_clips, log_path=tmp_path / "m.log")
    recs = read_metrics_log(tmp_path / "m.log")
    assert len(recs) == 6 == len(r.records)
    assert all(rec.lambda_sync == 0.0 and np.isnan(rec.loss_alse) for rec in recs)
    assert [rec.step for rec in recs] == list(range(6))
    assert np.isfinite(recs[2].val_mse) and np.isnan(recs[1].val_mse)
    assert len(r.epoch_val) == 2
    assert (tmp_path / "m.log").read_text().startswith("# epoch, step")


def test_training_with_expert_gates_sync_loss(small_clips, tiny_cfg):
    stats = compute_norm_stats(small_clips)
    seqs = [(c.audio, normalize(c.motion.data, stats)) for c in small_clips]
    expert = pretrain_expert(seqs, SyncExpertConfig(audio_dim=8, embed_dim=8, hidden_dim=16, steps=5,
                                                    shift_min=5), seed=0)
    r = train(small_clips, tiny_cfg, quick_cfg(tau=1.01), stats=stats, expert=expert)
    assert all(rec.lambda_sync == 1.0 and 0 <= rec.loss_alse <= 1 for rec in r.records)
    r = train(small_clips, tiny_cfg, quick_cfg(tau=0.0), stats=stats, expert=expert)
    assert all(rec.lambda_sync == 0.0 for rec in r.records)
    assert not any(p.requires_grad for p in expert.parameters())


def test_divergence_is_reported(small_clips, tiny_cfg):
    model = build_model(tiny_cfg)
    with torch.no_grad():
        model.final.out.bias.fill_(float("nan"))
    with pytest.raises(DivergenceError, match="loss became nan"):
        train(small_clips, tiny_cfg, quick_cfg(), model=model)


def test_train_rejects_empty_and_short_data(small_clips, tiny_cfg):
    with pytest.raises(ValidationError):
        train([], tiny_cfg, quick_cfg())
    with pytest.raises(ValidationError):
        train(small_clips, tiny_cfg, quick_cfg(window=80))


def test_variant_override(small_clips, tiny_cfg):
    r = train(small_clips, tiny_cfg, quick_cfg(epochs=1, steps_per_epoch=1, variant="caba"))
    assert r.model.cfg.variant == "caba"


def test_generate_output(toy_model, small_clips):
    model, stats = toy_model
    cs = clip_conditions(small_clips[0], stats, 0, 30)
    a = generate(model, cs, 30, SamplerConfig(n_steps=4, seed=2), stats)
    b = generate(model, cs, 30, SamplerConfig(n_steps=4, seed=2), stats)
    assert len(a) == 30 and a.fps == 25.0
    assert np.array_equal(a.data, b.data)
    assert np.all(a.data[:, scale_index(21)] > 0)
    a.frames  # every frame is a valid MotionParams
    with pytest.raises(ConfigError):
        generate(model, cs, 30, SamplerConfig(), None)


def test_batched_generation_matches_single(toy_model, small_clips):
    model, stats = toy_model
    conds = [clip_conditions(c, stats, 0, 20) for c in small_clips[:3]]
    batch = generate_batch(model, conds, 20, SamplerConfig(n_steps=3), stats)
    assert len(batch) == 3 and all(len(s) == 20 for s in batch)
    single = generate(model, conds[1], 20, SamplerConfig(n_steps=3), stats)
    # the batch draws one noise tensor for all sequences, so only the shapes line up
    assert single.data.shape == batch[1].data.shape


def make_session(toy_model, clip, chunk=100, guide=None, seed=0):
    model, stats = toy_model
    return StreamSession(model, stats, clip.identity.flatten(), clip.emotion, guide,
                         SamplerConfig(n_steps=3, seed=seed), chunk_length=chunk)


def test_stream_emits_every_frame_and_propagates_guide(toy_model, small_clips, rng):
    audio = rng.normal(size=(300, 8))
    session = make_session(toy_model, small_clips[0])
    out = list(stream(session, [audio[:100], audio[100:200], audio[200:]]))
    assert [len(s) for s in out] == [100, 100, 100] and session.emitted == 300
    h = session.history
    assert h[0]["guide"] is None
    for k in range(2):
        assert np.array_equal(h[k + 1]["guide"], h[k]["normalized"][-1])


def test_stream_partial_chunk_and_protocol(toy_model, small_clips, rng):
    session = make_session(toy_model, small_clips[0], chunk=10)
    session.push(0, rng.normal(size=(10, 8)))
    with pytest.raises(ProtocolError):
        session.push(2, rng.normal(size=(10, 8)))
    tail = session.push(1, rng.normal(size=(4, 8)))
    assert len(tail) == 4 and session.emitted == 14
    with pytest.raises(ProtocolError):
        session.push(2, rng.normal(size=(10, 8)))
    with pytest.raises(ValidationError):
        make_session(toy_model, small_clips[0], chunk=10).push(0, rng.normal(size=(11, 8)))


def test_stream_is_deterministic_and_pipeline_agrees(toy_model, small_clips, rng):
    audio = rng.normal(size=(25, 8))
    chunks = [audio[:10], audio[10:20], audio[20:]]
    guide = small_clips[0].motion.data[0]
    a = np.concatenate([s.data for s in stream(make_session(toy_model, small_clips[0], 10, guide), chunks)])
    b = np.concatenate([s.data for s in stream(make_session(toy_model, small_clips[0], 10, guide), chunks)])
    c = np.concatenate([s.data for s in stream_pipeline(make_session(toy_model, small_clips[0], 10, guide),
                                                          iter(chunks))])
    assert a.shape == (25, 70) and np.array_equal(a, b) and np.array_equal(a, c)


def test_pipeline_forwards_producer_errors(toy_model, small_clips, rng):
    def producer():
        yield rng.normal(size=(10, 8))
        raise OSError("audio source failed")

    with pytest.raises(OSError, match="audio source failed"):
        list(stream_pipeline(make_session(toy_model, small_clips[0], 10), producer()))


def test_metric_definitions():
    assert real_time_factor(5.0, 250, 25.0) == 0.5
    frames = np.array([[0.0], [1.0], [2.0], [5.0], [6.0], [7.0]])
    boundary, median = chunk_continuity(frames, 3)
    assert np.array_equal(boundary, [3.0]) and median == 1.0


def test_ground_truth_evaluation(small_clips):
    preds = [c.motion.data[:20] for c in small_clips]
    report = evaluate_predictions(preds, small_clips, range(51, 63))
    assert report["lip_mse"] == 0.0 and report["lip_corr"] == pytest.approx(1.0)
    assert report["frames"] == 20 * len(small_clips)
    noisy = [p + 0.1 for p in preds]
    assert evaluate_predictions(noisy, small_clips, range(51, 63))["lip_mse"] == pytest.approx(0.01)


def test_evaluate_report_fields(toy_model, small_clips):
    model, stats = toy_model
    report = evaluate(model, small_clips[:2], stats, range(51, 63), sampler_cfg=SamplerConfig(n_steps=2),
                      window=20)
    for key in ("lip_mse", "lip_corr", "smoothness", "param_count", "fps", "rtf", "variant"):
        assert key in report
    assert report["rtf"] > 0 and report["variant"] == "c2f"
    with pytest.raises(ValidationError):
        evaluate(model, [], stats, range(51, 63))


def test_model_checkpoint_carries_stats(toy_model, tmp_path):
    model, stats = toy_model
    save_model(tmp_path / "m.ckpt", model, stats)
    _, loaded, manifest = load_model(tmp_path / "m.ckpt")
    np.testing.assert_allclose(loaded.mean, stats.mean)
    assert manifest["kind"] == "dit"
