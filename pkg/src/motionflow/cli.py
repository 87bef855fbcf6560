"""Command-line interface.

Every command writes artifacts to disk and prints ``key = value`` lines.
Failures print one ``ERROR:<kind>:<message>`` line on stderr and exit
nonzero. A run configuration is a plain-text file of ``section.key = value``
lines (sections ``data``, ``model``, ``train``, ``sampler``, ``alse``);
command-line flags override it and the effective configuration is echoed to
``config.txt`` in every output directory.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .alse import SyncExpertConfig, load_expert, pretrain_expert, save_expert, sync_auc
from .checkpoint import read_manifest
from .conditioning import DEFAULT_DROPOUT, ConditionSet, read_afea
from .data_synth import (OracleSpec, generate_dataset, load_dataset, read_meta, save_dataset, split_train_val)
from .dit import ModelConfig, param_count
from .engine import (StreamSession, TrainConfig, evaluate, evaluate_predictions, format_report, generate,
                     load_model, save_model, train, write_report_csv)
from .exceptions import ConfigError, MotionFlowError, ValidationError
from .flow import SamplerConfig
from .motion_space import MseqWriter, NormStats, normalize, read_mseq, write_mseq, write_text

log = logging.getLogger("motionflow")

SECTIONS = ("data", "model", "train", "sampler", "alse")
_OPTIONAL_INT_KEYS = {"steps_per_epoch"}
_TUPLE_KEYS = {"lip_keypoints", "emotion_amplitudes", "pose_freq_range", "pose_amp_range", "lip_dims", "betas"}


def _sampler_defaults():
    return {"n_steps": 10, "seed": 0, "cfg_audio": 0.0, "cfg_emotion": 0.0, "cfg_identity": 0.0,
            "cfg_guide": 0.0, "chunk_length": 100}


def _train_defaults():
    d = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)
         if f.name not in ("dropout", "alse_path", "variant")}
    d.update({f"dropout_{k}": v for k, v in DEFAULT_DROPOUT.items()})
    return d


def _alse_defaults():
    d = asdict(SyncExpertConfig())
    for k in ("audio_dim", "motion_dim", "lip_dims"):
        d.pop(k)
    return d


def _model_defaults():
    d = ModelConfig().to_dict()
    for k in ("audio_dim", "num_keypoints"):
        d.pop(k)  # taken from the dataset
    return d


def default_sections() -> dict:
    return {
        "data": OracleSpec().to_dict(),
        "model": _model_defaults(),
        "train": _train_defaults(),
        "sampler": _sampler_defaults(),
        "alse": _alse_defaults(),
    }


def _coerce(key, value: str, default):
    value = value.strip()
    if key in _TUPLE_KEYS or isinstance(default, tuple):
        kind = int if key == "lip_keypoints" else float
        return tuple(kind(x) for x in value.replace(",", " ").split())
    if value.lower() in ("none", ""):
        return None
    if key in _OPTIONAL_INT_KEYS:
        return int(value)
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float) or default is None:
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _fmt(v):
    if isinstance(v, tuple):
        return " ".join(repr(x) for x in v)
    return str(v)


@dataclass
class RunConfig:
    """All tunable values, grouped by section; unknown keys are rejected."""

    values: dict = field(default_factory=default_sections)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'section.key = value'")
            key, _, value = (s.strip() for s in line.partition("="))
            cfg.set(key, value, where=f"{source}:{n}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        return cls.from_text(p.read_text(), str(p))

    def set(self, dotted: str, value, where: str = "flag"):
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or key not in self.values[section]:
            raise ConfigError(f"{where}: unknown config key {dotted!r}")
        default = default_sections()[section][key]
        self.values[section][key] = _coerce(key, value, default) if isinstance(value, str) else value

    def override(self, **kv):
        for dotted, value in kv.items():
            if value is not None:
                self.set(dotted.replace("__", "."), value)

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            for key, value in self.values[section].items():
                lines.append(f"{section}.{key} = {_fmt(value)}")
        return "\n".join(lines) + "\n"

    def oracle_spec(self) -> OracleSpec:
        return OracleSpec(**self.values["data"])

    def model_config(self, audio_dim: int, num_keypoints: int) -> ModelConfig:
        return ModelConfig(**self.values["model"], audio_dim=audio_dim, num_keypoints=num_keypoints)

    def train_config(self, alse_path=None) -> TrainConfig:
        t = dict(self.values["train"])
        dropout = {k: t.pop(f"dropout_{k}") for k in DEFAULT_DROPOUT}
        return TrainConfig(**t, dropout=dropout, alse_path=alse_path)

    def sampler_config(self) -> SamplerConfig:
        s = self.values["sampler"]
        scales = {k: s[f"cfg_{k}"] for k in ("audio", "emotion", "identity", "guide") if s[f"cfg_{k}"]}
        return SamplerConfig(s["n_steps"], scales, s["seed"])

    def alse_config(self, audio_dim, motion_dim, lip_dims) -> SyncExpertConfig:
        return SyncExpertConfig(**self.values["alse"], audio_dim=audio_dim, motion_dim=motion_dim,
                                lip_dims=tuple(lip_dims))


def format_defaults() -> str:
    return RunConfig().to_text()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"ERROR:usage:{message}\n")
        sys.exit(2)


class _Formatter(logging.Formatter):
    COLORS = {"WARNING": "\033[33m", "ERROR": "\033[31m", "INFO": "\033[36m"}

    def __init__(self, color: bool):
        super().__init__("%(levelname)s %(message)s")
        self.color = color

    def format(self, record):
        text = super().format(record)
        if self.color and record.levelname in self.COLORS:
            return f"{self.COLORS[record.levelname]}{text}\033[0m"
        return text


def _setup_logging(verbose: bool):
    handler = logging.StreamHandler(sys.stderr)
    color = sys.stderr.isatty() and "NO_COLOR" not in os.environ
    handler.setFormatter(_Formatter(color))
    root = logging.getLogger("motionflow")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if verbose else logging.WARNING)
    root.propagate = False


def _emit(**kv):
    for k, v in kv.items():
        print(f"{k} = {v}")


def _prepare_out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ValidationError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise ValidationError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepare_out_file(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not force:
        raise ValidationError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out_dir: Path, cfg: RunConfig, **extra):
    text = cfg.to_text() + "".join(f"run.{k} = {v}\n" for k, v in extra.items())
    (out_dir / "config.txt").write_text(text)


def _select(clips, split: str):
    train_clips, val_clips = split_train_val(clips)
    return {"train": train_clips, "val": val_clips, "all": clips}[split]


def _load_identity(meta_path):
    meta = read_meta(meta_path)
    if "identity_keypoints" not in meta:
        raise ValidationError(f"{meta_path} has no identity_keypoints entry")
    kp = np.array([float(x) for x in meta["identity_keypoints"].split()])
    return kp, int(meta["emotion"]) if "emotion" in meta else None


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_tree(path) -> str:
    """Digest of every file below ``path`` (relative names and bytes)."""
    h = hashlib.sha256()
    root = Path(path)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# commands

def cmd_gen_data(args, cfg: RunConfig):
    cfg.override(data__seed=args.seed, data__n_clips=args.n_clips)
    spec = cfg.oracle_spec()
    out = _prepare_out_dir(args.out, args.force)
    clips = generate_dataset(spec)
    save_dataset(out, clips, spec)
    _echo_config(out, cfg, command="gen-data")
    _emit(clips=len(clips), frames_per_clip=spec.clip_frames, stats=out / "stats.norm",
          manifest=out / "manifest.txt")


def cmd_pretrain_alse(args, cfg: RunConfig):
    cfg.override(alse__steps=args.steps, alse__lr=args.lr)
    clips, stats, spec = load_dataset(args.data)
    if stats is None:
        raise ConfigError(f"{args.data} has no stats.norm")
    lip_dims = spec.lip_dims if spec else SyncExpertConfig().lip_dims
    seed = cfg.values["train"]["seed"] if args.seed is None else args.seed
    train_clips, val_clips = split_train_val(clips)
    scfg = cfg.alse_config(clips[0].audio.shape[1], clips[0].motion.data.shape[1], lip_dims)
    seqs = lambda cs: [(c.audio, normalize(c.motion.data, stats)) for c in cs]  # noqa: E731
    out = _prepare_out_file(args.out, args.force)
    expert = pretrain_expert(seqs(train_clips or clips), scfg, seed=seed,
                             log=lambda s, l: log.info("alse step %d loss %.5f", s, l))
    auc = sync_auc(expert, seqs(val_clips or clips), shift=scfg.shift_min)
    save_expert(out, expert, extra={"val_auc": auc, "seed": seed})
    (out.parent / (out.name + ".config.txt")).write_text(cfg.to_text())
    _emit(checkpoint=out, val_auc=f"{auc:.4f}", shift=scfg.shift_min)


def cmd_train(args, cfg: RunConfig):
    cfg.override(model__variant=args.variant, train__epochs=args.epochs, train__lr=args.lr,
                 train__batch_size=args.batch_size, train__steps_per_epoch=args.steps_per_epoch,
                 train__seed=args.seed, train__window=args.window)
    clips, stats, _ = load_dataset(args.data)
    train_clips, val_clips = split_train_val(clips)
    mcfg = cfg.model_config(clips[0].audio.shape[1], clips[0].identity.num_keypoints)
    tcfg = cfg.train_config(args.alse)
    expert = load_expert(args.alse) if args.alse else None
    out = _prepare_out_dir(args.out, args.force)
    _echo_config(out, cfg, command="train", alse=args.alse)

    def progress(epoch, recs):
        log.info("epoch %d loss_rf %.5f val_mse %s", epoch, np.mean([r.loss_rf for r in recs]), recs[-1].val_mse)

    start = time.process_time()
    result = train(train_clips or clips, mcfg, tcfg, stats=stats, val_clips=val_clips, expert=expert,
                   log_path=out / "metrics.log", progress=progress)
    save_model(out / "model.ckpt", result.model, result.stats, extra={"variant": mcfg.variant})
    _emit(checkpoint=out / "model.ckpt", metrics=out / "metrics.log", variant=mcfg.variant,
          param_count=param_count(mcfg), steps=len(result.records),
          final_loss_rf=f"{result.records[-1].loss_rf:.6f}" if result.records else "nan",
          final_val_mse=f"{result.epoch_val[-1]:.6f}" if result.epoch_val else "nan",
          sync_fraction=f"{result.sync_fraction:.4f}", cpu_seconds=f"{time.process_time() - start:.1f}")


def _sampler_from(args, cfg: RunConfig) -> SamplerConfig:
    cfg.override(sampler__n_steps=args.steps, sampler__seed=args.seed, sampler__cfg_audio=args.cfg_audio,
                 sampler__cfg_emotion=args.cfg_emotion, sampler__cfg_identity=args.cfg_identity)
    return cfg.sampler_config()


def _conditioning(args, stats: NormStats):
    identity, meta_emotion = _load_identity(args.identity)
    emotion = args.emotion if args.emotion is not None else meta_emotion
    if emotion is None:
        raise ConfigError("no --emotion given and the identity file has no emotion entry")
    guide = read_mseq(args.guide).data[0] if args.guide else None
    return identity, emotion, guide


def cmd_sample(args, cfg: RunConfig):
    sampler_cfg = _sampler_from(args, cfg)
    model, stats, _ = load_model(args.model)
    if stats is None:
        raise ConfigError(f"{args.model} carries no normalization statistics")
    audio = read_afea(args.audio).features
    frames = args.frames or audio.shape[0]
    if frames > audio.shape[0]:
        raise ValidationError(f"--frames {frames} exceeds the {audio.shape[0]} audio frames")
    identity, emotion, guide = _conditioning(args, stats)
    cond = ConditionSet(audio=audio[:frames], identity=identity, emotion=emotion,
                        guide=None if guide is None else normalize(guide, stats))
    out = _prepare_out_file(args.out, args.force)
    start = time.perf_counter()
    seq = generate(model, cond, frames, sampler_cfg, stats)
    elapsed = time.perf_counter() - start
    write_mseq(out, seq)
    if args.text:
        write_text(args.text, seq)
    (out.parent / (out.name + ".config.txt")).write_text(cfg.to_text())
    _emit(output=out, frames=len(seq), steps=sampler_cfg.n_steps, seconds=f"{elapsed:.3f}",
          rtf=f"{elapsed / seq.duration:.4f}", sha256=sha256_file(out))


def cmd_stream(args, cfg: RunConfig):
    sampler_cfg = _sampler_from(args, cfg)
    cfg.override(sampler__chunk_length=args.chunk_length)
    model, stats, _ = load_model(args.model)
    if stats is None:
        raise ConfigError(f"{args.model} carries no normalization statistics")
    chunk_dir = Path(args.chunks)
    paths = sorted(chunk_dir.glob("*.afea"))
    if not paths:
        raise ValidationError(f"no .afea chunks in {chunk_dir}")
    identity, emotion, guide = _conditioning(args, stats)
    session = StreamSession(model, stats, identity, emotion, guide, sampler_cfg,
                            cfg.values["sampler"]["chunk_length"])
    out = _prepare_out_file(args.out, args.force)
    start = time.perf_counter()
    with MseqWriter(out, model.cfg.num_keypoints) as writer:
        for i, p in enumerate(paths):
            seq = session.push(i, read_afea(p).features)
            writer.append(seq.data)
            log.info("chunk %d (%s): %d frames", i, p.name, len(seq))
    elapsed = time.perf_counter() - start
    (out.parent / (out.name + ".config.txt")).write_text(cfg.to_text())
    _emit(output=out, chunks=len(paths), frames=session.emitted, seconds=f"{elapsed:.3f}",
          rtf=f"{elapsed / (session.emitted / session.fps):.4f}", sha256=sha256_file(out))


def cmd_eval(args, cfg: RunConfig):
    clips, stats, spec = load_dataset(args.data)
    clips = _select(clips, args.split)
    if not clips:
        raise ValidationError(f"split {args.split!r} is empty")
    lip_dims = spec.lip_dims if spec else SyncExpertConfig().lip_dims
    expert = load_expert(args.alse) if args.alse else None
    window = args.window
    if args.ground_truth:
        preds = [c.motion.data[:window] for c in clips]
        report = evaluate_predictions(preds, clips, lip_dims, stats=stats, expert=expert)
        report["variant"] = "ground_truth"
    else:
        if not args.model:
            raise ConfigError("eval needs --model unless --ground-truth is given")
        sampler_cfg = _sampler_from(args, cfg)
        model, model_stats, _ = load_model(args.model)
        report = evaluate(model, clips, model_stats or stats, lip_dims, sampler_cfg=sampler_cfg,
                          expert=expert, window=window)
    report["split"] = args.split
    sys.stdout.write(format_report(report))
    if args.csv:
        write_report_csv(args.csv, [report])


def cmd_inspect(args, cfg: RunConfig):
    if args.defaults:
        sys.stdout.write(format_defaults())
        return
    if not args.path:
        raise ConfigError("inspect needs a path (or --defaults)")
    p = Path(args.path)
    head = p.read_bytes()[:4]
    if head == b"MFCK":
        m = read_manifest(p)
        _emit(kind=m["kind"], version=m["version"], tensors=len(m["tensors"]),
              parameters=sum(int(np.prod(t["shape"])) for t in m["tensors"]))
        for k, v in sorted(m["config"].items()):
            print(f"config.{k} = {_fmt(tuple(v)) if isinstance(v, list) else v}")
        for k, v in sorted(m["extra"].items()):
            if not isinstance(v, list):
                print(f"extra.{k} = {v}")
        if args.tensors:
            for t in m["tensors"]:
                print(f"tensor {t['name']} {'x'.join(map(str, t['shape'])) or 'scalar'} {t['dtype']}")
    elif head == b"MSEQ":
        seq = read_mseq(p)
        _emit(kind="mseq", frames=len(seq), num_keypoints=seq.num_keypoints, fps=seq.fps,
              duration=seq.duration)
    elif head == b"AFEA":
        a = read_afea(p).features
        _emit(kind="afea", frames=a.shape[0], dim=a.shape[1])
    elif head == b"NORM":
        s = NormStats.load(p)
        _emit(kind="norm", dim=s.mean.shape[0])
    else:
        raise ValidationError(f"{p}: unrecognised file type")


def _add_sampler_flags(p):
    p.add_argument("--steps", type=int, default=None, help="Euler steps (default 10)")
    p.add_argument("--cfg-audio", type=float, default=None, help="audio guidance scale (default 0)")
    p.add_argument("--cfg-emotion", type=float, default=None, help="emotion guidance scale (default 0)")
    p.add_argument("--cfg-identity", type=float, default=None, help="identity guidance scale (default 0)")
    p.add_argument("--seed", type=int, default=None, help="noise seed (default 0)")


def _add_condition_flags(p):
    p.add_argument("--identity", required=True, help="clip .meta file holding identity_keypoints")
    p.add_argument("--emotion", type=int, default=None, help="emotion label (default: from the .meta file)")
    p.add_argument("--guide", default=None, help="MSEQ file whose first frame is the initial guide")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.HelpFormatter
    parser = _Parser(prog="motionflow", description=__doc__.split("\n\n")[0], formatter_class=fmt)
    parser.add_argument("--config", default=None, help="plain-text run configuration file")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic oracle dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="oracle seed (default 0)")
    p.add_argument("--n-clips", type=int, default=None, help="number of clips (default 64)")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-alse", help="pretrain the lip-sync expert", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--steps", type=int, default=None, help="optimizer steps (default 1500)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-3)")
    p.add_argument("--seed", type=int, default=None, help="seed (default: train.seed)")
    p.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    p.set_defaults(func=cmd_pretrain_alse)

    p = sub.add_parser("train", help="train the motion generator", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", choices=["c2f", "caba", "no_c2f", "maf"], default=None,
                   help="block schedule (default c2f)")
    p.add_argument("--epochs", type=int, default=None, help="epochs (default 10)")
    p.add_argument("--steps-per-epoch", type=int, default=None, help="steps per epoch (default: one pass)")
    p.add_argument("--batch-size", type=int, default=None, help="batch size (default 16)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-4)")
    p.add_argument("--window", type=int, default=None, help="training window in frames (default 80)")
    p.add_argument("--seed", type=int, default=None, help="seed (default 0)")
    p.add_argument("--alse", default=None, help="sync expert checkpoint enabling the gated sync loss")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate motion for one audio file", formatter_class=fmt)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--audio", required=True, help="AFEA audio feature file")
    _add_condition_flags(p)
    p.add_argument("--frames", type=int, default=None, help="frames to generate (default: audio length)")
    p.add_argument("--out", required=True, help="output MSEQ file")
    p.add_argument("--text", default=None, help="optional plain-text export")
    p.add_argument("--force", action="store_true", help="overwrite the output")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("stream", help="generate chunk by chunk from a directory of AFEA chunks",
                       formatter_class=fmt)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--chunks", required=True, help="directory of .afea chunks, read in lexicographic order")
    _add_condition_flags(p)
    p.add_argument("--chunk-length", type=int, default=None, help="frames per chunk (default 100)")
    p.add_argument("--out", required=True, help="output MSEQ file, written incrementally")
    p.add_argument("--force", action="store_true", help="overwrite the output")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("eval", help="score a model (or the ground truth) on a dataset split", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", default=None, help="model checkpoint")
    p.add_argument("--split", choices=["train", "val", "all"], default="val", help="clips to score (default val)")
    p.add_argument("--window", type=int, default=80, help="frames generated per clip (default 80)")
    p.add_argument("--alse", default=None, help="sync expert checkpoint for the sync score")
    p.add_argument("--ground-truth", action="store_true", help="score the dataset's own motion")
    p.add_argument("--csv", default=None, help="also write the report as CSV")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="describe a checkpoint or data file", formatter_class=fmt)
    p.add_argument("path", nargs="?", default=None, help="file to describe")
    p.add_argument("--tensors", action="store_true", help="list checkpoint tensors")
    p.add_argument("--defaults", action="store_true", help="print the default run configuration")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = RunConfig.load(args.config)
        args.func(args, cfg)
    except MotionFlowError as exc:
        sys.stderr.write(f"ERROR:{exc.kind}:{exc}\n")
        return 1
    except (OSError, KeyError) as exc:
        sys.stderr.write(f"ERROR:io:{exc}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
