"""``voxelseg`` command line: synth, preprocess, train, predict, evaluate, cv.

Exit status: 0 on success, 1 for invalid input or configuration, 2 for
runtime failures (I/O, divergence, anything unexpected).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from voxelseg import config as cfgmod
from voxelseg import evaluation, pipeline, unet3d
from voxelseg.errors import ValidationError
from voxelseg.phantom import generate_set
from voxelseg.preprocess import preprocess_sample
from voxelseg.volume_io import Sample, read_mvf, write_mvf

log = logging.getLogger("voxelseg")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> cfgmod.PipelineConfig:
    cfg = cfgmod.resolve(args.config)
    return cfg.with_overrides(seed=args.seed, max_epochs=getattr(args, "max_epochs", None))


def cmd_synth(args) -> None:
    cfg = _config(args)
    if args.n < 1:
        raise UsageError("-n must be >= 1")
    out = _out_dir(args, cfg.paths.data)
    cfgmod.write_resolved(cfg, out)
    for sample in generate_set(args.n, cfg.phantom, cfg.seed):
        write_mvf(sample, out / sample.id)
    log.info("wrote %d phantoms to %s", args.n, out)


def cmd_preprocess(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg.paths.cache)
    cfgmod.write_resolved(cfg, out)
    entries = []
    for raw in pipeline.load_dir(args.input):
        done = preprocess_sample(raw, cfg.preprocess)
        write_mvf(done, out / done.id)
        entries.append(pipeline.manifest_entry(raw, done))
    (out / "manifest.json").write_text(json.dumps({"samples": entries}, indent=2) + "\n")


def _split_ids(text: str | None) -> list[str]:
    return [t for t in (text or "").split(",") if t]


def cmd_train(args) -> None:
    cfg = _config(args)
    samples = pipeline.ensure_preprocessed(pipeline.load_dir(args.data), cfg)
    by_id = {s.id: s for s in samples}
    if args.fold is not None:
        folds = evaluation.cv_split(len(samples), args.k, cfg.seed)
        if not 0 <= args.fold < len(folds):
            raise UsageError(f"--fold must lie in [0, {len(folds)})")
        val_idx = set(folds[args.fold])
        train = [s for i, s in enumerate(samples) if i not in val_idx]
        val = [s for i, s in enumerate(samples) if i in val_idx]
    else:
        train_ids, val_ids = _split_ids(args.train_ids), _split_ids(args.val_ids)
        missing = [i for i in train_ids + val_ids if i not in by_id]
        if missing:
            raise UsageError(f"unknown sample id(s): {', '.join(missing)}")
        train = [by_id[i] for i in train_ids] if train_ids else list(samples)
        val = [by_id[i] for i in val_ids]
    out = _out_dir(args, cfg.paths.out)
    cfgmod.write_resolved(cfg, out)
    pipeline.train_model(train, val, cfg, cfg.seed, out)


def _inputs(paths) -> list[Sample]:
    samples = []
    for p in map(Path, paths):
        samples += pipeline.load_dir(p) if p.is_dir() else [read_mvf(p)]
    return samples


def cmd_predict(args) -> None:
    cfg = _config(args)
    model = unet3d.load_model(args.checkpoint)
    out = _out_dir(args, cfg.paths.out)
    cfgmod.write_resolved(cfg, out)
    for sample in pipeline.ensure_preprocessed(_inputs(args.data), cfg):
        probs = pipeline.predict_probabilities(model, sample, cfg.patch)
        pred = pipeline.labels_from_probs(probs)
        pipeline.write_prediction(sample, pred, out, probs if cfg.eval.save_probabilities else None)


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg.paths.out)
    cfgmod.write_resolved(cfg, out)
    gts = {s.id: s for s in pipeline.load_dir(args.gt)}
    preds = pipeline.load_dir(args.pred)
    missing = [p.id for p in preds if p.id not in gts]
    if missing:
        raise UsageError(f"no ground truth for: {', '.join(missing)}")
    gt_list = pipeline.ensure_preprocessed([gts[p.id] for p in preds], cfg)
    rows = pipeline.evaluate_pairs(preds, gt_list, cfg, out / "overlays")
    report = evaluation.aggregate([rows])
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "metrics.json")


def cmd_cv(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg.paths.out)
    report = pipeline.run_cv(pipeline.load_dir(args.data), args.k, cfg, out)
    avg = report.average
    log.info("AVG lungs DSC %.4f infection DSC %.4f", avg["lungs_dsc"], avg["covid_dsc"])


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="config file, or a preset name: desk (default) or full")
    common.add_argument("--seed", type=int, help="override [seed] value")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="voxelseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic phantoms")
    p.add_argument("-n", type=int, default=10)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="clip, normalize, z-score, resample")
    p.add_argument("input", help="directory of MVF samples")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="fit a model")
    p.add_argument("data", help="directory of MVF samples")
    p.add_argument("--fold", type=int, help="hold out this fold of a -k split for validation")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--train-ids", help="comma-separated sample ids (default: all)")
    p.add_argument("--val-ids", help="comma-separated sample ids for validation loss")
    p.add_argument("--max-epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="segment samples with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data", nargs="+", help="MVF samples or directories")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    p.add_argument("pred", help="directory of predicted MVF samples")
    p.add_argument("gt", help="directory of ground-truth MVF samples")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cv", parents=[common], help="k-fold cross-validation")
    p.add_argument("data", help="directory of MVF samples")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--max-epochs", type=int)
    p.set_defaults(func=cmd_cv)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"voxelseg: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"voxelseg: invalid input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        print(f"voxelseg: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
