"""Command line entry point: ``masr {mine,stats,synth,train,eval,gradcheck}``.

Errors print ``error[<category>]: <message>`` on stderr and exit with the
category's code (2 config, 3 parse/schema, 4 ingestion/report, 5 I/O,
6 numeric, 1 failed gradient check).
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from . import annotations as ann
from .config import load_dataclass
from .data import SynthSpec, build_dataset, generate_corpus, read_features, write_corpus
from .errors import ConfigError, MasrError, ParseError
from .evaluator import evaluate, export_embeddings, write_report
from .gradcheck import STEP, TOLERANCE, run_gradcheck
from .model import MasrParams, ModelShape
from .trainer import TrainConfig, load_state, read_config, run, save_state, write_loss_history

log = logging.getLogger("masr")


@dataclass(frozen=True)
class MineConfig:
    xi: float = ann.DEFAULT_XI
    beta: int = ann.DEFAULT_BETA
    collision_policy: str = "error"
    sources: str = None


def _mine(args):
    cfg = load_dataclass(
        MineConfig, args.config,
        xi=args.xi, beta=args.beta, collision_policy=args.collision_policy, sources=args.sources,
    )
    if cfg.sources is None:
        raise ConfigError("no detector sources given (use --sources or 'sources = <file>' in --config)")
    ann._check_xi(cfg.xi)
    ann._check_beta(cfg.beta)
    if cfg.collision_policy not in ann.COLLISION_POLICIES:
        raise ConfigError(f"collision_policy must be one of {ann.COLLISION_POLICIES}")
    sources_path = Path(cfg.sources)
    if args.config and not sources_path.is_absolute() and not sources_path.exists():
        sources_path = Path(args.config).parent / sources_path
    sources = ann.load_sources(sources_path)
    categories = ann.read_categories(args.categories) if args.categories else None
    records = ann.read_detections(args.detections)

    result = ann.mine(records, sources, categories, cfg.xi, cfg.beta, cfg.collision_policy)
    stats = ann.compute_statistics(result.annotations, result.raw, result.score_filtered)
    out = Path(args.out)
    ann.emit_annotations(result.annotations, result.vocabulary, out)
    (out / "stats.txt").write_text(ann.format_statistics(stats, result.vocabulary), encoding="utf-8")
    (out / "stats.tsv").write_text(ann.statistics_rows(stats, result.vocabulary), encoding="utf-8")
    print(f"mined {stats.n_images} images over {result.vocabulary.m} attributes "
          f"(xi={cfg.xi}, beta={cfg.beta}) -> {out}")
    return 0


def _stats(args):
    annotations, vocab = ann.load_annotations(args.annotations)
    stats = ann.compute_statistics(annotations)
    text = ann.format_statistics(stats, vocab)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.txt").write_text(text, encoding="utf-8")
        (out / "stats.tsv").write_text(ann.statistics_rows(stats, vocab), encoding="utf-8")
    sys.stdout.write(text)
    return 0


def _synth(args):
    try:
        data = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(args.spec, exc.lineno, exc.msg) from None
    if not isinstance(data, dict):
        raise ConfigError(f"{args.spec}: expected a JSON object")
    spec = SynthSpec.from_dict(data)
    corpus = generate_corpus(spec, args.seed)
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.categories)} synthetic images ({spec.K} classes) -> {args.out}")
    return 0


def _load_split(annotations_dir, features_path, xi, category_names=None):
    annotations, vocab = ann.load_annotations(annotations_dir)
    features = read_features(features_path)
    return build_dataset(annotations, features, xi, category_names, vocab.labels)


def _train(args):
    if args.checkpoint:
        state, config, extra = load_state(args.checkpoint)
        if args.epochs_total is not None:
            config = TrainConfig(**{**config.__dict__, "epochs_total": args.epochs_total}).validate()
        categories = extra.get("category_names") or None
    else:
        config = read_config(
            args.config, seed=args.seed, cascade_depth=args.cascade_depth, epochs_total=args.epochs_total,
        )
        state, categories = None, None
    dataset = _load_split(args.annotations, args.features, config.xi, categories)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def on_epoch(s):
        if args.save_every and s.epoch % args.save_every == 0:
            save_state(out / f"epoch_{s.epoch:03d}.ckpt", s, config, dataset.category_names, dataset.attribute_labels)
        log.info("epoch %d  L_cls %.4f  L_att %.4f  L_MASR %.4f", *s.loss_history[-1])

    state = run(config, dataset, state, until=args.until, on_epoch=on_epoch)
    save_state(out / "checkpoint.ckpt", state, config, dataset.category_names, dataset.attribute_labels)
    write_loss_history(state.loss_history, out / "loss_history.tsv")
    print(f"trained to epoch {state.epoch} -> {out}")
    return 0


def _eval(args):
    if args.zero_params:
        if args.checkpoint:
            raise ConfigError("--zero-params and --checkpoint are mutually exclusive")
        dataset = _load_split(args.annotations, args.features, args.xi)
        shape = ModelShape(dataset.d, dataset.m, dataset.K, depth=args.cascade_depth or 2)
        params = MasrParams.zeros(shape)
        mode = args.mode or "joint"
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --zero-params")
        state, config, extra = load_state(args.checkpoint)
        params = state.params
        dataset = _load_split(args.annotations, args.features, config.xi, extra.get("category_names") or None)
        mode = args.mode or ("joint" if state.epoch > config.epochs_phase1 else "scene_only")
    report = evaluate(params, dataset, mode)
    out = Path(args.out)
    write_report(report, out)
    if args.embeddings:
        export_embeddings(dataset, params, out / "embeddings.tsv")
    sys.stdout.write((out / "report.txt").read_text(encoding="utf-8"))
    return 0


def _gradcheck(args):
    results = run_gradcheck(args.configs, args.seed, args.tol, STEP)
    failed = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.rel_error)
    for r in failed:
        print(f"FAIL config {r.config} {r.group}: relative error {r.rel_error:.3e}")
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed over {args.configs} "
          f"configurations (worst {worst.rel_error:.3e} at {worst.group}, tolerance {args.tol:g})")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="masr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mine", help="mine attribute annotations from detector outputs")
    p.add_argument("detections", help="line-delimited JSON detection records")
    p.add_argument("--sources", help="JSON list of detector sources and their label sets")
    p.add_argument("--categories", help="image_id<TAB>category file (else records carry 'category')")
    p.add_argument("--config", help="key = value file (xi, beta, collision_policy, sources)")
    p.add_argument("--xi", type=float)
    p.add_argument("--beta", type=int)
    p.add_argument("--collision-policy", choices=ann.COLLISION_POLICIES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_mine)

    p = sub.add_parser("stats", help="statistics of a mined annotation set")
    p.add_argument("annotations", help="directory holding vocabulary.tsv and annotations.tsv")
    p.add_argument("--out")
    p.set_defaults(func=_stats)

    p = sub.add_parser("synth", help="generate a seeded synthetic corpus")
    p.add_argument("spec", help="JSON corpus spec")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_synth)

    p = sub.add_parser("train", help="two-phase MASR training")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--config", help="key = value TrainConfig file")
    p.add_argument("--seed", type=int)
    p.add_argument("--cascade-depth", type=int)
    p.add_argument("--epochs-total", type=int)
    p.add_argument("--checkpoint", help="resume from this training checkpoint")
    p.add_argument("--until", type=int, help="stop after this epoch (checkpoint can resume)")
    p.add_argument("--save-every", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--zero-params", action="store_true", help="evaluate all-zero parameters")
    p.add_argument("--cascade-depth", type=int)
    p.add_argument("--xi", type=float, default=ann.DEFAULT_XI)
    p.add_argument("--mode", choices=("scene_only", "joint"))
    p.add_argument("--embeddings", action="store_true", help="also write embeddings.tsv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--configs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=TOLERANCE)
    p.set_defaults(func=_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except MasrError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
