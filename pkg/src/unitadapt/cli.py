"""``unitadapt`` command line: one entry point, one subcommand per pipeline stage."""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from sklearn.exceptions import NotFittedError as SklearnNotFitted

from . import corpus, verify
from .audio import griffin_lim
from .config import load_config
from .estimator import AdaptiveDiffusionTTS, UnitQuantizer
from .exceptions import CheckpointError, ConfigurationError, UnitAdaptError, UsageError

logger = logging.getLogger("unitadapt")

ARCH_KEYS = ("n_mels", "n_units", "hidden", "n_blocks", "n_heads", "spk_dim", "dec_channels")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _config(args, **flag_overrides):
    cfg = load_config(args.config, args.preset, args.set or ())
    for dotted, value in flag_overrides.items():
        if value is not None:
            section, key = dotted.split(".")
            cfg.set(section, key, value, "flag")
    return cfg


def _load_entries(manifest, cfg, require_transcripts=False):
    entries = corpus.read_manifest(_existing(manifest, "manifest"), require_transcripts)
    mels = [corpus.load_utterance_mel(e.path, cfg.mel_config()) for e in entries]
    return entries, mels


def _load_base(path):
    """A full (non-adapted) checkpoint as an estimator."""
    _existing(path, "checkpoint")
    _, meta = corpus.read_container(path)
    if "base" in meta:
        raise CheckpointError(f"{path} is an adapted checkpoint; this command needs a base checkpoint")
    return AdaptiveDiffusionTTS.load(path)


def _check_arch(est, cfg):
    want = cfg.estimator_params()
    diff = {k: (getattr(est, k), want[k]) for k in ARCH_KEYS if getattr(est, k) != want[k]}
    if diff:
        raise ConfigurationError(f"config disagrees with checkpoint architecture: {diff}")


def _load_quantizer(path, cfg):
    q = UnitQuantizer.load(_existing(path, "codebook"))
    if q.extractor != cfg["units"]["extractor"]:
        raise ConfigurationError(
            f"codebook uses extractor {q.extractor!r} but the config asks for {cfg['units']['extractor']!r}"
        )
    return q


def _write_output(args, mel, sidecar, cfg):
    out = Path(args.out)
    corpus.write_mel(out, mel, cfg.mel_config().digest(), meta={"seed": sidecar["seed"]})
    out.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    if args.wav:
        from scipy.io import wavfile

        mcfg = cfg.mel_config()
        if mel.shape[1] != mcfg.n_mels:
            raise ConfigurationError(f"mel has {mel.shape[1]} bins, audio settings expect {mcfg.n_mels}")
        y = griffin_lim(mel, mcfg)
        wavfile.write(out.with_suffix(".wav"), mcfg.sample_rate_hz, (np.clip(y, -1, 1) * 32767).astype(np.int16))
    logger.info("wrote %s (%d frames)", out, len(mel))


# -- subcommands ----------------------------------------------------------

def cmd_make_toy_corpus(args):
    toy = corpus.make_toy_corpus(n_speakers=args.n_speakers, n_utts=args.n_utts, seed=args.seed,
                                 n_mels=args.n_mels, n_heldout=args.n_heldout)
    manifest = corpus.write_toy_corpus(toy, args.out_dir)
    preset = load_config(preset="toy", overrides=[f"model.n_mels={args.n_mels}", f"mel.n_mels={args.n_mels}"])
    (Path(args.out_dir) / "config.json").write_text(preset.to_json() + "\n")
    print(manifest)


def cmd_fit_kmeans(args):
    cfg = _config(args, **{"units.K": args.K, "units.extractor": args.extractor, "units.seed": args.seed})
    _, mels = _load_entries(args.manifest, cfg)
    u = cfg["units"]
    q = UnitQuantizer(u["K"], u["extractor"], u["max_iters"], u["seed"]).fit(mels)
    q.save(args.out, cfg.digest())
    print(f"codebook K={q.codebook_.K} extractor={q.extractor} -> {args.out}")


def cmd_extract_units(args):
    cfg = _config(args)
    entries, mels = _load_entries(args.manifest, cfg)
    q = _load_quantizer(args.codebook, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for entry, sq, mel in zip(entries, q.transform(mels), mels):
        lines.append(json.dumps({"id": entry.id, "u": sq.u.tolist(), "d_u": sq.d_u.tolist(),
                                 "n_frames": len(mel), "config_hash": cfg.digest()}, sort_keys=True))
    corpus._atomic_write(out_dir / "units.jsonl", ("\n".join(lines) + "\n").encode())
    print(f"{len(lines)} utterances -> {out_dir / 'units.jsonl'}")


def cmd_train(args):
    cfg = _config(args, **{"pretrain.steps": args.steps})
    entries, mels = _load_entries(args.manifest, cfg, require_transcripts=True)
    texts = [e.tokens if e.tokens is not None else e.transcript for e in entries]
    speakers = [e.speaker for e in entries]
    metrics = args.metrics or str(Path(args.out).with_suffix(".metrics.jsonl"))
    total = cfg["pretrain"]["steps"]
    if args.resume:
        est = _load_base(args.resume)
        _check_arch(est, cfg)
        if "pretrain" not in est.trainer_states_:
            raise CheckpointError(f"{args.resume} carries no pretraining state to resume")
        done = int(est.trainer_states_["pretrain"][1]["step_count"])
        est.set_params(warm_start=True, metrics_path=metrics)
    else:
        est = AdaptiveDiffusionTTS(**cfg.estimator_params(), metrics_path=metrics)
        done = 0
    start = time.perf_counter()
    est.fit(mels, texts, speakers, n_steps=max(total - done, 0))
    est.save(args.out, cfg.digest())
    print(f"pretrained {total - done} steps in {time.perf_counter() - start:.1f}s -> {args.out}")


def cmd_train_unit_encoder(args):
    cfg = _config(args, **{"unit_encoder.steps": args.steps})
    entries, mels = _load_entries(args.manifest, cfg)
    est = _load_base(args.checkpoint)
    _check_arch(est, cfg)
    if "pretrain" not in est.trainer_states_:
        raise CheckpointError(f"{args.checkpoint} has not been pretrained")
    q = _load_quantizer(args.codebook, cfg)
    est.set_params(unit_lr=cfg["unit_encoder"]["lr"], unit_steps=cfg["unit_encoder"]["steps"],
                   metrics_path=args.metrics or str(Path(args.out).with_suffix(".metrics.jsonl")))
    est.fit_unit_encoder(mels, [e.speaker for e in entries], quantizer=q)
    est.save(args.out, cfg.digest())
    print(f"unit encoder trained -> {args.out}")


def cmd_finetune(args):
    cfg = _config(args, **{"finetune.steps": args.steps, "finetune.lr": args.lr})
    est = _load_base(args.checkpoint)
    _check_arch(est, cfg)
    if not est.unit_encoder_trained_:
        raise CheckpointError(f"{args.checkpoint} has no trained unit encoder; run train-unit-encoder first")
    q = _load_quantizer(args.codebook, cfg)
    ref = corpus.load_utterance_mel(_existing(args.reference, "reference"), cfg.mel_config())
    embedding = np.load(args.embedding) if args.embedding else None
    est.set_params(finetune_lr=cfg["finetune"]["lr"], finetune_steps=cfg["finetune"]["steps"],
                   finetune_batch_size=cfg["finetune"]["batch_size"],
                   min_reference_seconds=cfg["finetune"]["min_reference_seconds"], metrics_path=args.metrics)
    start = time.perf_counter()
    est.adapt(ref, q, speaker=args.speaker, embedding=embedding, seed=args.seed)
    est.save_adapted(args.out, args.speaker, args.checkpoint, cfg.digest())
    info = est.adapted_[args.speaker].info
    print(f"adapted {args.speaker!r} ({info['steps']} steps, init {info['init_from']}) "
          f"in {time.perf_counter() - start:.1f}s -> {args.out}")


def _sampling_model(args):
    _existing(args.checkpoint, "checkpoint")
    est = AdaptiveDiffusionTTS.load(args.checkpoint)
    speaker = args.speaker
    if speaker is None:
        if len(est.adapted_) != 1:
            raise UsageError("--speaker is required unless the checkpoint holds exactly one adapted speaker")
        speaker = next(iter(est.adapted_))
    return est, speaker


def _sidecar(cfg, est, args, speaker, gamma, n_steps, **extra):
    return {"seed": args.seed, "N": n_steps, "gamma": gamma, "speaker": speaker,
            "config_hash": cfg.digest(), "checkpoint": str(args.checkpoint),
            "checkpoint_sha256": corpus.file_digest(args.checkpoint),
            "checkpoint_config_hash": getattr(est, "config_hash_", None), **extra}


def cmd_synthesize(args):
    cfg = _config(args, **{"sample.tts_gamma": args.gamma, "sample.n_steps": args.n_steps})
    est, speaker = _sampling_model(args)
    gamma, n_steps = cfg["sample"]["tts_gamma"], cfg["sample"]["n_steps"]
    est.set_params(temperature=cfg["sample"]["temperature"])
    mel, d = est.synthesize(args.text, speaker, gamma=gamma, n_steps=n_steps, seed=args.seed,
                            return_durations=True)
    _write_output(args, mel, _sidecar(cfg, est, args, speaker, gamma, n_steps, text=args.text,
                                      durations=d.tolist()), cfg)


def cmd_convert(args):
    cfg = _config(args, **{"sample.vc_gamma": args.gamma, "sample.n_steps": args.n_steps})
    est, speaker = _sampling_model(args)
    q = _load_quantizer(args.codebook, cfg)
    source = corpus.load_utterance_mel(_existing(args.source, "source"), cfg.mel_config())
    gamma, n_steps = cfg["sample"]["vc_gamma"], cfg["sample"]["n_steps"]
    est.set_params(temperature=cfg["sample"]["temperature"])
    mel = est.convert(source, speaker, q, gamma=gamma, n_steps=n_steps, seed=args.seed)
    _write_output(args, mel, _sidecar(cfg, est, args, speaker, gamma, n_steps, source=str(args.source)), cfg)


def cmd_verify(args):
    if not verify.run_all(seed=args.seed):
        raise UnitAdaptError("invariant checks failed")


# -- parser -----------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="unitadapt", description="Unit-based speaker adaptation for diffusion TTS.")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON or YAML config file")
    common.add_argument("--preset", help="named preset applied before the config file (e.g. toy)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-toy-corpus", help="write the synthetic multi-speaker corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-speakers", type=int, default=2)
    p.add_argument("--n-utts", type=int, default=100)
    p.add_argument("--n-heldout", type=int, default=1)
    p.add_argument("--n-mels", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy_corpus)

    p = sub.add_parser("fit-kmeans", parents=[common], help="fit a unit codebook")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--K", type=int)
    p.add_argument("--extractor")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_fit_kmeans)

    p = sub.add_parser("extract-units", parents=[common], help="write squeezed units per utterance")
    p.add_argument("--manifest", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_extract_units)

    p = sub.add_parser("train", parents=[common], help="pretrain on transcribed speech")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="total pretraining steps (including resumed ones)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--metrics", help="metrics JSONL path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-unit-encoder", parents=[common], help="train the unit encoder, decoder frozen")
    p.add_argument("--manifest", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_train_unit_encoder)

    p = sub.add_parser("finetune", parents=[common], help="adapt to one untranscribed reference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--reference", required=True, help="mel file or WAV")
    p.add_argument("--speaker", required=True, help="name for the adapted speaker")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--embedding", help=".npy speaker vector to start from")
    p.add_argument("--seed", type=int)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_finetune)

    for name, func, help_ in (("synthesize", cmd_synthesize, "text-to-speech"),
                              ("convert", cmd_convert, "voice conversion")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--checkpoint", required=True, help="base or adapted checkpoint")
        p.add_argument("--speaker", help="speaker name (defaults to the adapted speaker)")
        p.add_argument("--out", required=True, help="output mel file; a .json sidecar is written next to it")
        p.add_argument("--gamma", type=float)
        p.add_argument("--n-steps", type=int)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--wav", action="store_true", help="also write a lossy Griffin-Lim WAV for listening")
        if name == "synthesize":
            p.add_argument("--text", required=True)
        else:
            p.add_argument("--codebook", required=True)
            p.add_argument("--source", required=True, help="mel file or WAV")
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="run the fast invariant checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("UNITADAPT_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UnitAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SklearnNotFitted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigurationError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
