"""Command line front end.

    cdvae corpus   --config run.yaml [--seed N]
    cdvae train    --config run.yaml [--seed N] [--mode NAME] [--resume]
    cdvae convert  --config run.yaml [--checkpoint PATH] [--pairs A:B,...|--all-pairs]
                   [--path MCC_MCC] [--gv-postfilter]
    cdvae evaluate --config run.yaml --conversions PATH [--checkpoint PATH]
                   [--metrics mcd,msd,gv,dem] [--out PATH]

Exit codes: 0 success, 1 any package error (message on stderr), 2 usage.
Log verbosity comes from CDVAE_LOG_LEVEL (debug, info, warn; default warn).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .conversion import batch_convert, parse_path
from .errors import CdvaeError, ConfigError
from .evaluation import format_report_table, load_conversion_manifest, report, save_report
from .featureio import load_manifest
from .synthetic import generate_synthetic_corpus
from .training import init_state, prepare_training_data, restore, train

log = logging.getLogger(__name__)

_LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}


def _setup_logging():
    name = os.environ.get("CDVAE_LOG_LEVEL", "warn").lower()
    if name not in _LOG_LEVELS:
        raise ConfigError(f"CDVAE_LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=_LOG_LEVELS[name],
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _silence_threshold(cfg: RunConfig) -> float:
    return float(cfg.evaluation.get("silence_threshold_db", 40.0))


def _parse_pairs(text: str) -> list:
    pairs = []
    for token in text.split(","):
        parts = token.strip().split(":")
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"--pairs expects SRC:TGT[,SRC:TGT...], got {token!r}")
        pairs.append((parts[0], parts[1]))
    return pairs


def _resolve_pairs(args, cfg: RunConfig, manifest) -> list:
    if getattr(args, "pairs", None):
        return _parse_pairs(args.pairs)
    if getattr(args, "all_pairs", False) or cfg.conversion.get("all_pairs"):
        spk = manifest.speaker_ids
        return [(a, b) for a in spk for b in spk if a != b]
    doc = cfg.conversion.get("pairs")
    if doc:
        return [tuple(p) if isinstance(p, (list, tuple)) else tuple(p.split(":")) for p in doc]
    raise ConfigError("no conversion pairs: pass --pairs/--all-pairs or set conversion.pairs")


def cmd_corpus(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    manifest = generate_synthetic_corpus(cfg.synth, cfg.seed, cfg.corpus_root)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"corpus: {len(manifest.utterances)} utterances "
          f"({counts['train']} train / {counts['val']} val / {counts['test']} test), "
          f"{len(manifest.speaker_ids)} speakers -> {cfg.corpus_root}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, mode=args.mode)
    manifest = load_manifest(cfg.corpus_root / "manifest.json")
    data, stats = prepare_training_data(manifest, cfg.mode, _silence_threshold(cfg))
    for dom in cfg.mode.domains:
        have = int(stats[dom].minimum.shape[0])
        want = int(cfg.arch.input_dims[dom])
        if have != want:
            raise ConfigError(
                f"arch.input_dims[{dom}]={want} but the corpus has {have} dims after energy split")

    ckpt = cfg.checkpoint_path
    if args.resume:
        state, _ = restore(ckpt, config=cfg.train, expect_arch=cfg.arch)
        log.info("resumed from %s at counters %s", ckpt, state.counters)
    else:
        state = init_state(cfg.arch, cfg.train, manifest.speaker_ids, stats, cfg.seed)
    state = train(state, data, cfg.train, checkpoint_path=ckpt)

    cfg.output_root.mkdir(parents=True, exist_ok=True)
    log_path = cfg.output_root / "train_log.jsonl"
    with open(log_path, "w") as fh:
        for rec in state.loss_log:
            fh.write(json.dumps(rec) + "\n")
    print(f"trained {cfg.mode.name} seed={cfg.seed}: counters={state.counters} "
          f"checkpoint={ckpt} log={log_path}")
    return 0


def cmd_convert(args) -> int:
    cfg = load_config(args.config)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.checkpoint_path
    state, _ = restore(ckpt)
    manifest = load_manifest(cfg.corpus_root / "manifest.json")
    pairs = _resolve_pairs(args, cfg, manifest)
    path = parse_path(args.path or cfg.conversion.get("path", "MCC_MCC"))
    apply_gv = bool(args.gv_postfilter or cfg.conversion.get("gv_postfilter", False))
    system = args.system or state.bundle.mode.name
    out_dir = Path(args.out) if args.out else cfg.output_root / "conversions" / system
    doc = batch_convert(
        state.bundle, state.norm_stats, manifest, pairs, out_dir,
        path=path, apply_gv=apply_gv, system=system,
        split=cfg.conversion.get("split", "test"),
        silence_threshold_db=_silence_threshold(cfg))
    print(f"converted {len(doc['entries'])} utterances over {len(pairs)} pairs -> {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    metrics = tuple(m.strip() for m in args.metrics.split(",")) if args.metrics \
        else tuple(cfg.evaluation.get("metrics", ("mcd", "msd", "gv", "dem")))
    corpus_manifest = load_manifest(cfg.corpus_root / "manifest.json")
    conv_path = Path(args.conversions)
    if conv_path.is_dir():
        conv_path = conv_path / "manifest.json"
    conv_doc = load_conversion_manifest(conv_path)

    bundle = norm_stats = None
    if "dem" in metrics:
        ckpt = Path(args.checkpoint) if args.checkpoint else cfg.checkpoint_path
        state, _ = restore(ckpt)
        bundle, norm_stats = state.bundle, state.norm_stats

    rep = report(corpus_manifest, conv_doc, bundle, norm_stats, metrics=metrics,
                 silence_threshold_db=_silence_threshold(cfg),
                 split=cfg.evaluation.get("split", "test"))
    out = Path(args.out) if args.out else cfg.output_root / "reports" / f"{rep['system'] or 'report'}.json"
    save_report(rep, out)
    print(format_report_table(rep))
    print(f"report -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("corpus", help="generate the synthetic two-factor corpus")
    common(p)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.add_argument("--mode", default=None,
                   help="override config mode (VAE, CDVAE, CDVAE_GAN, CDVAE_CLS_GAN)")
    p.add_argument("--resume", action="store_true", help="continue from the config checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert utterances with a trained checkpoint")
    common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default from config)")
    p.add_argument("--pairs", default=None, help="SRC:TGT[,SRC:TGT...] speaker pairs")
    p.add_argument("--all-pairs", action="store_true", help="every ordered speaker pair")
    p.add_argument("--path", default=None, help="conversion path, e.g. MCC_MCC or SP_SP")
    p.add_argument("--gv-postfilter", action="store_true", help="variance-match converted tracks")
    p.add_argument("--system", default=None, help="label for the output manifest")
    p.add_argument("--out", default=None, help="output directory for converted archives")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", help="score converted archives against references")
    common(p)
    p.add_argument("--conversions", required=True, help="conversion output dir or manifest.json")
    p.add_argument("--checkpoint", default=None, help="checkpoint for latent metrics")
    p.add_argument("--metrics", default=None, help="comma list of mcd,msd,gv,dem")
    p.add_argument("--out", default=None, help="where to write the JSON report")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except (CdvaeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
