"""Command-line entry point: ``sleepssl <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _split_list(s: str | None):
    return [x for x in s.split(",") if x] if s else None


def _epochs(shards: str, cohorts, splits):
    from .preprocess import EpochSet
    from .shards import load_split

    return EpochSet.concat([load_split(shards, cohorts, s) for s in splits])


def _head(args, **base):
    from .evaluation import HeadConfig

    fields = dict(base)
    for name in ("base_lr", "max_steps", "batch_size"):
        v = getattr(args, name, None)
        if v is not None:
            fields[name] = v
    fields["seed"] = args.seed
    return HeadConfig(**fields)


def _emit(reports, out: str | None) -> None:
    docs = [json.loads(r.to_json()) for r in reports]
    text = json.dumps(docs if len(docs) != 1 else docs[0], indent=1)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    print(text)


def cmd_synth(args) -> int:
    from .corpus import CorpusSpec, corpus_stats, synth_corpus, write_corpus

    if args.config:
        spec = ex.load_config(args.config).corpus_spec()
    elif args.spec:
        try:
            spec = CorpusSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except (ValueError, TypeError, KeyError) as exc:
            raise ex.ConfigError(str(exc)) from None
    else:
        raise ex.ConfigError("synth needs --config or --spec")
    corpus = synth_corpus(spec)
    out = Path(args.out)
    if args.manifest_only:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(corpus.manifest))
    else:
        write_corpus(corpus, out)
    ex._write_csv(out / "corpus_stats.csv", corpus_stats(corpus))
    print(f"{len(corpus)} nights -> {out} (corpus hash {corpus.corpus_hash})")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .corpus import load_corpus
    from .shards import build_shards

    ratios = tuple(float(x) for x in args.ratios.split(","))
    index = build_shards(load_corpus(args.corpus), args.out, ratios, args.seed)
    for s in index["shards"]:
        print(f"{s['file']}: {s['count']} epochs, {len(s['patients'])} patients")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .encoder import EncoderConfig
    from .pretrain import PretrainConfig, pretrain
    from .shards import load_split

    overrides = {k: v for k, v in dict(batch_size=args.batch_size, base_lr=args.lr, total_steps=args.steps,
                                       augmentation=args.augmentation, seed=args.seed).items() if v is not None}
    try:
        cfg = PretrainConfig.for_objective(args.objective, **overrides)
        enc = EncoderConfig.from_preset(args.preset)
    except (ValueError, KeyError) as exc:
        raise ex.ConfigError(str(exc)) from None
    data = load_split(args.shards, _split_list(args.cohorts), "train")
    res = pretrain(data, enc, cfg, out_dir=args.out)
    print(f"{len(res.log)} steps, final loss {res.log[-1]['loss']:.4f} -> {args.out}")
    return EXIT_OK


def _eval_inputs(args):
    from .encoder import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    cohorts = _split_list(args.cohorts)
    train = _epochs(args.shards, cohorts, _split_list(args.train_splits))
    test = _epochs(args.shards, cohorts, _split_list(args.test_splits))
    return ckpt, train, test


def cmd_probe(args) -> int:
    from .evaluation import get_task, hr_probe, linear_probe

    ckpt, train, test = _eval_inputs(args)
    cfg = _head(args)
    task = get_task(args.task)
    rep = hr_probe(ckpt, train, test, args.setting, cfg) if task.is_regression else \
        linear_probe(ckpt, train, test, task, args.setting, cfg)
    _emit([rep], args.out)
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .evaluation import finetune

    ckpt, train, test = _eval_inputs(args)
    cfg = _head(args, base_lr=1e-4, max_epochs=args.epochs, standardize=False)
    _emit([finetune(ckpt, train, test, args.task, args.setting, cfg)], args.out)
    return EXIT_OK


def cmd_fewshot(args) -> int:
    from .evaluation import extract_embeddings, fewshot

    ckpt, train, test = _eval_inputs(args)
    model = ckpt.build()
    X_tr, X_te = extract_embeddings(model, train, args.setting), extract_embeddings(model, test, args.setting)
    reps = [fewshot(ckpt, train, test, args.task, int(k), args.seed, args.setting, _head(args),
                    train_embeddings=X_tr, test_embeddings=X_te) for k in _split_list(args.k)]
    _emit(reps, args.out)
    return EXIT_OK


def cmd_missing_sweep(args) -> int:
    from .evaluation import MISSING_SETTINGS, extract_embeddings, get_task, linear_probe

    ckpt, train, test = _eval_inputs(args)
    model = ckpt.build()
    reps = []
    for setting in _split_list(args.settings) or list(MISSING_SETTINGS):
        X_tr, X_te = extract_embeddings(model, train, setting), extract_embeddings(model, test, setting)
        for t in _split_list(args.tasks):
            reps.append(linear_probe(ckpt, train, test, get_task(t), setting, _head(args),
                                     train_embeddings=X_tr, test_embeddings=X_te))
    _emit(reps, args.out)
    return EXIT_OK


def cmd_disease(args) -> int:
    import numpy as np

    from .aggregation import DiseaseHeadConfig, embed_nights, train_disease_head
    from .encoder import load_checkpoint
    from .shards import load_split

    index = json.loads((Path(args.shards) / "index.json").read_text())
    labels = {int(p): np.asarray(v) for p, v in index["diseases"].items()}
    model = load_checkpoint(args.checkpoint).build()
    cohorts = _split_list(args.cohorts)
    train = _epochs(args.shards, cohorts, _split_list(args.train_splits))
    test = _epochs(args.shards, cohorts, _split_list(args.test_splits))
    seq_tr, seq_te = embed_nights(model, train, labels), embed_nights(model, test, labels)
    cfg = DiseaseHeadConfig(seed=args.seed, max_epochs=args.epochs)
    reps = [train_disease_head(kind, seq_tr, seq_te, args.disease, cfg) for kind in _split_list(args.aggregators)]
    _emit(reps, args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    stages = tuple(_split_list(args.stages))
    print(ex.run(args.config, args.root, stages=stages))
    return EXIT_OK


def cmd_scale(args) -> int:
    print(ex.scale_study(args.config, args.root))
    return EXIT_OK


def cmd_mix(args) -> int:
    print(ex.mix_study(args.config, args.root))
    return EXIT_OK


def cmd_report(args) -> int:
    print(ex.report(args.run_dir))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sleepssl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic PSG corpus")
    s.add_argument("--config", help="experiment config (its synth section is used)")
    s.add_argument("--spec", help="corpus spec JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--manifest-only", action="store_true", help="write labels and stats, not waveforms")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="preprocess a corpus into split shards")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ratios", default="0.8,0.1,0.1")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("pretrain", help="self-supervised pretraining")
    s.add_argument("--shards", required=True)
    s.add_argument("--cohorts")
    s.add_argument("--objective", default="dino")
    s.add_argument("--augmentation")
    s.add_argument("--preset", default="tiny")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    def eval_args(s, task=True):
        s.add_argument("--checkpoint", required=True, help="checkpoint directory (config.json + weights.bin)")
        s.add_argument("--shards", required=True)
        s.add_argument("--cohorts")
        s.add_argument("--train-splits", default="train")
        s.add_argument("--test-splits", default="test")
        if task:
            s.add_argument("--task", default="staging-4class")
        s.add_argument("--setting", default="full")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--base-lr", type=float)
        s.add_argument("--max-steps", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--out")

    s = sub.add_parser("probe", help="linear probe on frozen embeddings")
    eval_args(s)
    s.set_defaults(func=cmd_probe)
    s = sub.add_parser("finetune", help="full fine-tuning")
    eval_args(s)
    s.add_argument("--epochs", type=int, default=5)
    s.set_defaults(func=cmd_finetune)
    s = sub.add_parser("fewshot", help="K-shot linear probe")
    eval_args(s)
    s.add_argument("--k", default="1,5,50")
    s.set_defaults(func=cmd_fewshot)
    s = sub.add_parser("missing-sweep", help="linear probes under every missing-channel setting")
    eval_args(s, task=False)
    s.add_argument("--tasks", default="staging-4class")
    s.add_argument("--settings")
    s.set_defaults(func=cmd_missing_sweep)
    s = sub.add_parser("disease", help="patient-level disease heads")
    eval_args(s, task=False)
    s.add_argument("--disease", default="hypertension")
    s.add_argument("--aggregators", default="mean,recurrent,mil,topk")
    s.add_argument("--epochs", type=int, default=50)
    s.set_defaults(func=cmd_disease)

    for name, func, help_ in (("run", cmd_run, "run a config end to end"),
                              ("scale-study", cmd_scale, "fraction x preset scaling grid"),
                              ("mix-study", cmd_mix, "single- vs multi-source pretraining")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config")
        s.add_argument("--root", help=f"run root (default ${ex.RUN_ROOT_ENV} or ./runs)")
        if name == "run":
            s.add_argument("--stages", default="synth,preprocess,pretrain,eval")
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="consolidate a run directory into tables and plots")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ex.StageError, FloatingPointError, RuntimeError, OSError, ValueError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
