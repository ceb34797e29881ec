"""Command-line entry point: ``corrdistill {augment,distill,probe,gradcheck}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .augment import DistortionPlan, DistortionSpec, apply_plan, measure_snr, read_wav, write_wav
from .config import RunConfig, load_config
from .corpus import load_wav_corpus, synthetic_corpus
from .exceptions import CorrDistillError
from .models import StudentModel, TeacherModel, init_student_from_teacher, load_checkpoint
from .probe import build_probe_dataset, forest_train, probe_accuracy, probe_report
from .trainer import checkpoint_name, select_checkpoint, train_distill

logger = logging.getLogger("corrdistill")

RUN_LOG = "run_log.jsonl"
SELECTED = "selected_checkpoint.txt"


def _plan_from_args(args) -> DistortionPlan:
    specs = []
    if args.reverb is not None:
        specs.append(DistortionSpec("reverb", rt60_s=args.reverb))
    if args.pitch is not None:
        specs.append(DistortionSpec("pitch_shift", semitones=args.pitch))
    if args.notch_center is not None:
        specs.append(DistortionSpec("band_reject", center_hz=args.notch_center, q=args.notch_q))
    if args.kind is not None:
        specs.append(DistortionSpec(args.kind, snr_db=args.snr))
    return DistortionPlan(tuple(specs), args.seed)


def cmd_augment(args) -> int:
    clean = read_wav(args.input, args.sample_rate)
    plan = _plan_from_args(args)
    out = apply_plan(clean, plan)
    write_wav(args.output, out)
    record = {"snr": plan.effective_snr_db, **plan.to_dict()}
    residual = out.samples - clean.samples
    if plan.specs and all(s.additive for s in plan.specs) and np.any(residual):
        # after clipping, so it can sit slightly off the target
        record["measured_snr_db"] = measure_snr(clean, clean.with_samples(residual))
    print(json.dumps(record))
    return 0


def _wav_corpus(cfg: RunConfig, corpus_dir):
    """WAV files cropped or zero-padded to ``utterance_s`` so they batch together."""
    n = int(round(cfg.utterance_s * cfg.sample_rate))
    wavs = load_wav_corpus(corpus_dir, cfg.sample_rate)
    return [w.with_samples(np.pad(w.samples[:n], (0, max(0, n - len(w))))) for w in wavs]


def _corpora(cfg: RunConfig, corpus_dir):
    if corpus_dir:
        wavs = _wav_corpus(cfg, corpus_dir)
        n_dev = min(cfg.dev_size, len(wavs) - 1)
        if n_dev < 1:
            raise CorrDistillError("corpus directory needs at least two files (train + dev)")
        return wavs[:-n_dev], wavs[-n_dev:]
    train = synthetic_corpus(cfg.corpus_size, cfg.corpus_seed, cfg.utterance_s, cfg.sample_rate)
    dev = synthetic_corpus(cfg.dev_size, cfg.corpus_seed + 1, cfg.utterance_s, cfg.sample_rate)
    return train, dev


def cmd_distill(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    train, dev = _corpora(cfg, args.corpus_dir)
    teacher = TeacherModel(cfg.teacher_config())
    teacher.save(out / "teacher")
    student = init_student_from_teacher(teacher, cfg.student_blocks, cfg.head_init, cfg.seed)
    _, records = train_distill(
        cfg.training(), teacher, student, train, dev,
        log_path=out / RUN_LOG, checkpoint_dir=out / "checkpoints",
    )
    saved = {r.step: checkpoint_name(r.step) for r in records if r.dev_loss is not None}
    best = select_checkpoint(records, saved)
    (out / SELECTED).write_text(best + "\n")
    print(json.dumps({"steps": len(records), "selected_checkpoint": best,
                      "final_loss": records[-1].report["l_total"]}))
    return 0


def _load_embedder(path):
    meta, _ = load_checkpoint(path)
    return TeacherModel.load(path) if meta.get("role") == "teacher" else StudentModel.load(path)


def cmd_probe(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    model = _load_embedder(args.checkpoint)
    if args.corpus_dir:
        corpus = _wav_corpus(cfg, args.corpus_dir)
    else:
        corpus = synthetic_corpus(cfg.probe_size, cfg.corpus_seed + 2, cfg.utterance_s, cfg.sample_rate)
    forest_cfg = cfg.forest()
    data = build_probe_dataset(model, corpus, seed=forest_cfg.seed, n_mels=model.config.input_dim)
    acc = probe_accuracy(forest_train(data, forest_cfg), data)
    print(probe_report(acc, forest_cfg))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    result = run_suite(args.seeds)
    for line in result.lines():
        print(line)
    return 0 if result.passed else 1


# config keys that have their own spelling on the command line
_ALIASES = {"learning_rate": ["--lr"], "n_trees": ["--n-trees"], "max_depth": ["--max-depth"],
            "max_features": ["--max-features"]}


def _add_config_flags(parser: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        flags = [f"--{key.replace('_', '-')}"] + [a for a in _ALIASES.get(key, []) if a != f"--{key.replace('_', '-')}"]
        parser.add_argument(*flags, dest=f"cfg_{key}", default=None, metavar="VALUE")


def _overrides(args) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrdistill", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("augment", help="distort a mono 16-bit WAV file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--kind", choices=["gaussian", "white", "pink", "babble"])
    p.add_argument("--snr", type=float, help="target SNR in dB, [10, 20)")
    p.add_argument("--reverb", type=float, metavar="RT60_S")
    p.add_argument("--pitch", type=float, metavar="SEMITONES")
    p.add_argument("--notch-center", type=float, metavar="HZ")
    p.add_argument("--notch-q", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-rate", type=int, default=None, help="reject files with another rate")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("distill", help="run distillation pre-training")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--corpus-dir", help="directory of WAV files (default: built-in synthetic corpus)")
    p.add_argument("--synthetic", action="store_true", help="use the built-in synthetic corpus")
    p.add_argument("--out", required=True)
    _add_config_flags(p, RunConfig.keys())
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("probe", help="noise-classification probe on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--corpus-dir")
    p.add_argument("--synthetic", action="store_true")
    _add_config_flags(p, ["n_trees", "max_depth", "max_features", "forest_seed", "probe_size",
                          "corpus_seed", "utterance_s", "sample_rate"])
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CorrDistillError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
