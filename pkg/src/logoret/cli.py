"""``logoret`` command line: synth, featurize, train, index, query, run, eval, serve.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import descriptor, evaluation, pipeline, synth, training
from .errors import LogoRetError
from .index import PrototypeIndex, Prototype

log = logging.getLogger("logoret")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        rec = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        if record.exc_info:
            rec["exc"] = self.formatException(record.exc_info)
        return json.dumps(rec)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger("logoret")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _pipeline_config(args, head=None) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig(
        crop_size=getattr(args, "crop_size", 224),
        pooling=getattr(args, "pooling", "max"),
        toy_grid=getattr(args, "grid", 4),
        threshold=getattr(args, "threshold", None) if getattr(args, "threshold", None) is not None else 0.45,
        top_n=getattr(args, "top_n", None),
        whitening=getattr(args, "whitening", None) is not None,
    )
    if head is not None:
        cfg.toy_channels = head.in_dim
    elif getattr(args, "channels", None):
        cfg.toy_channels = args.channels
    return cfg


def _read_whitening(args):
    path = getattr(args, "whitening", None)
    return descriptor.read_whitening(path) if path else None


# -- subcommands ----------------------------------------------------------------------

def cmd_assets(args) -> int:
    manifest = synth.make_demo_assets(args.out, args.classes, args.backgrounds, args.seed)
    _print({"logos": str(manifest), "backgrounds": str(Path(args.out) / "backgrounds")})
    return 0


def cmd_synth(args) -> int:
    overrides = {"seed": args.seed, "per_class": args.per_class}
    cfg = synth.SynthConfig.from_file(args.config, **overrides) if args.config else synth.SynthConfig(**overrides)
    records = synth.generate_dataset(args.backgrounds, args.logos, cfg, args.out)
    _print({"records": len(records), "manifest": str(Path(args.out) / "manifest.jsonl")})
    return 0


def cmd_featurize(args) -> int:
    """Crop every record of a dataset (or logos) manifest and write toy feature maps."""
    src = Path(args.manifest)
    out = Path(args.out)
    (out / "fmaps").mkdir(parents=True, exist_ok=True)
    cfg = _pipeline_config(args)
    lines = []
    for i, rec in enumerate(evaluation.read_jsonl(src)):
        if "path" in rec:
            image = synth.load_rgba(src.parent / rec["path"])
            h, w = image.shape[:2]
            box = evaluation.BBox(0, 0, w, h)
        else:
            image = synth.load_rgba(Path(args.images) / rec["image"])
            box = evaluation.BBox(*rec["bbox"])
        fm = pipeline.toy_featurize(pipeline.crop_resize(image, box, cfg.crop_size), cfg.toy_grid, cfg.toy_channels)
        name = f"fmaps/{i:06d}.fmap"
        descriptor.write_fmap(out / name, fm)
        entry = {"class": rec["class"], "input": name, "pooling": cfg.pooling}
        if "image" in rec:
            entry.update(image=rec["image"], bbox=box.as_list())
        lines.append(json.dumps(entry, sort_keys=True))
    (out / "train.jsonl").write_text("".join(line + "\n" for line in lines))
    _print({"samples": len(lines), "manifest": str(out / "train.jsonl")})
    return 0


def cmd_train(args) -> int:
    samples = training.load_training_manifest(args.manifest)
    cfg = training.TrainConfig(
        margin=args.margin, learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
        mining=args.mining, seed=args.seed, out_dim=args.out_dim,
    )
    head, history = training.train_head(samples, cfg)
    training.write_head(args.out, head)
    if args.log:
        training.write_training_log(args.log, history)
    if args.whiten_out:
        x = np.stack([s.pooled_input for s in samples])
        z = x @ head.weights.T + head.bias
        t = descriptor.fit_whitening(z / np.linalg.norm(z, axis=1, keepdims=True), eps=args.whiten_eps)
        descriptor.write_whitening(args.whiten_out, t)
    _print({"head": args.out, "final_loss": history[-1]["mean_loss"], "epochs": len(history)})
    return 0


def _logo_descriptor(path, head, cfg, whitening):
    return pipeline.embed_image(synth.load_rgba(path), head, cfg, whitening)


def cmd_index_build(args) -> int:
    head = training.read_head(args.head)
    cfg = _pipeline_config(args, head)
    whitening = _read_whitening(args)
    index = PrototypeIndex()
    protos = []
    for cls, variants in synth.read_logos_manifest(args.logos).items():
        for variant, path in variants:
            v = _logo_descriptor(path, head, cfg, whitening)
            protos.append(Prototype(cls, variant, v, {"source": path.name}))
    index.add_many(protos)
    index.save(args.out)
    _print({"index": args.out, "prototypes": len(index), "dim": index.dim})
    return 0


def _query_vector(args):
    if args.descriptor:
        return descriptor.read_desc(args.descriptor)
    if not (args.image and args.head):
        raise UsageError("give --descriptor, or --image together with --head")
    head = training.read_head(args.head)
    return _logo_descriptor(args.image, head, _pipeline_config(args, head), _read_whitening(args))


def cmd_index_add(args) -> int:
    index = PrototypeIndex.load(args.index) if Path(args.index).exists() else PrototypeIndex()
    v = _query_vector(args)
    index.add(Prototype(args.class_id, args.variant, descriptor.l2_normalize(v) if args.normalize else v))
    index.save(args.index)
    _print({"prototypes": len(index)})
    return 0


def cmd_index_remove(args) -> int:
    index = PrototypeIndex.load(args.index)
    removed = index.remove(args.class_id, args.variant)
    index.save(args.index)
    _print({"removed": removed, "prototypes": len(index)})
    return 0


def cmd_index_stats(args) -> int:
    index = PrototypeIndex.load(args.index)
    _print({"count": len(index), "dim": index.dim, "classes": len(index.classes())})
    return 0


def cmd_query(args) -> int:
    index = PrototypeIndex.load(args.index)
    v = descriptor.l2_normalize(_query_vector(args))
    hits = index.query(v, args.k, args.threshold if args.threshold is not None else 0.0)
    _print([{"class": h.class_id, "variant": h.variant_id, "similarity": h.similarity} for h in hits])
    return 0


def cmd_run(args) -> int:
    head = training.read_head(args.head)
    index = PrototypeIndex.load(args.index)
    cfg = _pipeline_config(args, head)
    if args.backend == "precomputed":
        if not args.fmaps:
            raise UsageError("--backend precomputed needs --fmaps")
        backend = pipeline.FeaturizerBackend.precomputed(args.fmaps)
    else:
        backend = pipeline.FeaturizerBackend()
    proposals = pipeline.load_proposals(args.proposals)
    detections, summary = pipeline.run_pipeline(
        args.images, proposals, backend, head, index, cfg, _read_whitening(args))
    pipeline.write_detections(args.out, detections)
    _print({"detections": args.out, **summary})
    return 0


def cmd_eval(args) -> int:
    report = evaluation.evaluate_detections(
        evaluation.load_detections(args.detections),
        evaluation.load_ground_truth(args.truth),
        args.iou,
        per_class=args.per_class,
    )
    text = json.dumps(report, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_serve(args) -> int:
    from .service import ServiceConfig, serve

    serve(ServiceConfig(
        host=args.host, port=args.port, index_path=args.index, head_path=args.head,
        token=args.token, read_only=args.read_only,
        threshold=args.threshold if args.threshold is not None else 0.45,
    ))
    return 0


# -- parser -------------------------------------------------------------------------

def _add_featurizer_flags(p, channels=True):
    p.add_argument("--crop-size", type=int, default=224)
    p.add_argument("--grid", type=int, default=4, help="toy featurizer grid (cells per side)")
    p.add_argument("--pooling", choices=descriptor.POOLINGS, default="max")
    if channels:
        p.add_argument("--channels", type=int, default=descriptor.DEFAULT_DIM, help="toy featurizer depth")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="logoret", description="Prototype-retrieval logo detection toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("assets", help="write procedural demo logos and backgrounds")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--backgrounds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_assets)

    p = sub.add_parser("synth", help="stamp logos into backgrounds")
    p.add_argument("--backgrounds", required=True)
    p.add_argument("--logos", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-class", type=int, default=1)
    p.add_argument("--config", help="JSON file with SynthConfig ranges")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="write toy feature maps and a training manifest")
    p.add_argument("--manifest", required=True, help="synth dataset manifest or logos manifest")
    p.add_argument("--images", default=".", help="directory holding dataset images")
    p.add_argument("--out", required=True)
    _add_featurizer_flags(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train the affine head with triplet loss")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--margin", type=float, default=0.6)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--mining", choices=("random", "batch_hard"), default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dim", type=int)
    p.add_argument("--whiten-out", help="also fit PCA whitening on the training embeddings")
    p.add_argument("--whiten-eps", type=float, default=descriptor.DEFAULT_WHITEN_EPS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build and edit prototype indexes")
    isub = p.add_subparsers(dest="index_command", parser_class=_Parser)
    q = isub.add_parser("build", help="index every logo of a logos manifest")
    q.add_argument("--logos", required=True)
    q.add_argument("--head", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--whitening")
    _add_featurizer_flags(q, channels=False)
    q.set_defaults(func=cmd_index_build)
    q = isub.add_parser("add", help="add or replace one prototype")
    q.add_argument("--index", required=True)
    q.add_argument("--class", dest="class_id", required=True)
    q.add_argument("--variant", default="0")
    q.add_argument("--descriptor")
    q.add_argument("--image")
    q.add_argument("--head")
    q.add_argument("--whitening")
    q.add_argument("--normalize", action="store_true", help="l2-normalize the descriptor first")
    _add_featurizer_flags(q, channels=False)
    q.set_defaults(func=cmd_index_add)
    q = isub.add_parser("remove", help="remove a class or one of its variants")
    q.add_argument("--index", required=True)
    q.add_argument("--class", dest="class_id", required=True)
    q.add_argument("--variant")
    q.set_defaults(func=cmd_index_remove)
    q = isub.add_parser("stats", help="print prototype count and dimension")
    q.add_argument("--index", required=True)
    q.set_defaults(func=cmd_index_stats)

    p = sub.add_parser("query", help="k-NN query against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--descriptor")
    p.add_argument("--image")
    p.add_argument("--head")
    p.add_argument("--whitening")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--threshold", type=float)
    _add_featurizer_flags(p, channels=False)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("run", help="classify Level-1 proposals")
    p.add_argument("--images", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--backend", choices=("toy", "precomputed"), default="toy")
    p.add_argument("--fmaps", help="JSONL map of (image, bbox) to .fmap for the precomputed backend")
    p.add_argument("--threshold", type=float)
    p.add_argument("--top-n", type=int)
    p.add_argument("--whitening")
    p.add_argument("--out", default="detections.jsonl")
    _add_featurizer_flags(p, channels=False)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="mAP report for detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--per-class", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="HTTP service for index updates and queries")
    p.add_argument("--index", required=True)
    p.add_argument("--head")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--token", help="shared bearer token (default: $LOGORET_TOKEN)")
    p.add_argument("--read-only", action="store_true")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            # bare command or bare `index`
            target = parser if args.command is None else parser._subparsers._group_actions[0].choices[args.command]
            target.print_help(sys.stderr)
            return 1
        _setup_logging(args.verbose)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return exc.code or 0
    except (LogoRetError, OSError, ValueError, KeyError) as exc:
        print(f"logoret: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
