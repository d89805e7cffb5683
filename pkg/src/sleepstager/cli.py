"""Command-line entry point.

Failures print ``error: <category>: <message>`` on stderr and exit with
status 1 (usage errors exit with 2, as argparse does).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .aggregate import (SCHEMES, decide, fuse, read_hypnogram, read_posterior_grid,
                        write_hypnogram, write_posterior_grid)
from .config import load_config, schema_text
from .errors import ConfigError, SleepStagerError
from .metrics import evaluate
from .network import MODES
from .render import render_hypnogram
from .signal_io import find_bundles, load_bundle, write_bundle
from .synth import DEFAULT_CHANNELS, SynthConfig, generate_corpus
from .tfr import recording_images
from .training import PRECISIONS, write_history_csv


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_synth(args) -> int:
    channels = tuple(c.strip() for c in args.channels.split(",") if c.strip())
    cfg = SynthConfig(n_epochs=args.epochs_per_subject, channels=channels)
    out = Path(args.out_dir)
    for bundle in generate_corpus(args.subjects, args.epochs_per_subject, args.seed, cfg):
        write_bundle(bundle, out / bundle.subject_id)
    print(f"wrote {args.subjects} bundles to {out}")
    return 0


def _config_with_overrides(args):
    config = load_config(args.config)
    updates = {}
    for attr, key in (("arch", "model__arch"), ("mode", "model__mode"), ("tau", "model__tau"),
                      ("q", "model__filters_per_width"), ("seed", "run__seed"),
                      ("out_dir", "data__out_dir")):
        value = getattr(args, attr, None)
        if value is not None:
            updates[key] = str(Path(value).resolve()) if attr == "out_dir" else value
    return config.replace(**updates) if updates else config


def cmd_preprocess(args) -> int:
    config = _config_with_overrides(args)
    recs = pipeline.load_recordings(config, _log)
    print(f"{len(recs)} TF-image caches in {config.cache_dir}")
    return 0


def cmd_train(args) -> int:
    config = _config_with_overrides(args)
    recs = pipeline.load_recordings(config, _log)
    plan = pipeline.split_plan(config, recs)
    if not 0 <= args.fold < len(plan):
        raise ConfigError(f"fold {args.fold} outside 0..{len(plan) - 1}", "fold")
    fold = plan[args.fold]
    params, spec, std, history = pipeline.train_fold(config, recs, fold, args.fold, log=_log)
    out = Path(args.out_dir) if args.out_dir else config.out_dir / f"fold_{args.fold:02d}"
    out.mkdir(parents=True, exist_ok=True)
    write_history_csv(out / "history.csv", history)
    pipeline.save_fold_checkpoint(out / "model.ssck", config, fold, args.fold, params, spec,
                                  std, history)
    print(f"checkpoint {out / 'model.ssck'} (best pass {pipeline.best_pass(history)})")
    return 0


def _bundle_paths(paths):
    out = []
    for p in paths:
        out += find_bundles(p)
    if not out:
        raise ConfigError("no recording bundles found", "bundle")
    return out


def cmd_predict(args) -> int:
    params, spec, std, extra = pipeline.load_fold_model(args.checkpoint)
    fbs = pipeline.filter_banks(extra["channels"], extra["n_filters"], extra["fb_kind"])
    dtype = PRECISIONS[extra.get("precision", "float64")]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for path in _bundle_paths(args.bundle):
        bundle = pipeline.prepare_bundle(load_bundle(path), not args.no_trim)
        # same float32 rounding as the preprocessing cache
        images = recording_images(bundle, extra["channels"], fbs).astype(np.float32)
        post = pipeline.recording_posteriors(params, spec, std, images.astype(np.float64), dtype)
        write_posterior_grid(out / f"{bundle.subject_id}.sspg", pipeline.posterior_grid(post, spec))
        print(out / f"{bundle.subject_id}.sspg")
    return 0


def cmd_aggregate(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for g in args.grid:
        grid = read_posterior_grid(g)
        hyp = decide(fuse(grid, args.voting))
        target = out / (Path(g).stem + ".txt")
        write_hypnogram(target, hyp.labels)
        print(target)
    return 0


def _labels(path: str, trim: bool) -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        return np.asarray(pipeline.prepare_bundle(load_bundle(p), trim).labels, dtype=np.int64)
    return read_hypnogram(p)


def cmd_evaluate(args) -> int:
    if len(args.truth) != len(args.pred):
        raise ConfigError(f"{len(args.truth)} truth inputs for {len(args.pred)} predictions",
                          "pred")
    truth = [_labels(t, not args.no_trim) for t in args.truth]
    pred = [read_hypnogram(p) for p in args.pred]
    report = evaluate(truth, pred, stratify=True)
    text = report.to_text()
    if args.out:
        base = Path(args.out)
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_suffix(".txt").write_text(text)
        base.with_suffix(".csv").write_text(report.to_csv())
    print(text, end="")
    return 0


def cmd_run(args) -> int:
    config = _config_with_overrides(args)
    result = pipeline.run_experiment(config, jobs=args.jobs, log=_log)
    print(json.dumps(result.summary["pooled"], indent=2, sort_keys=True))
    return 0


def cmd_render(args) -> int:
    truth = _labels(args.truth, not args.no_trim)
    pred = read_hypnogram(args.pred)
    svg, txt = render_hypnogram(truth, pred, args.out)
    print(txt.read_text(), end="")
    print(f"wrote {svg} and {txt}")
    return 0


def cmd_schema(args) -> int:
    print(schema_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sleepstager", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic recording bundles")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--epochs-per-subject", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", default=",".join(DEFAULT_CHANNELS))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="build TF-image caches for every bundle")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the model of one fold")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--arch", choices=("onemax", "deepcnn"))
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--tau", type=int)
    p.add_argument("--q", type=int, help="filters per width")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write posterior grids for bundles")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", nargs="+", required=True, help="bundle directories or their parent")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-trim", action="store_true", help="keep epochs outside the in-bed range")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("aggregate", help="fuse posterior grids into hypnograms")
    p.add_argument("--grid", nargs="+", required=True)
    p.add_argument("--voting", choices=SCHEMES, default="multiplicative")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("evaluate", help="score hypnograms against ground truth")
    p.add_argument("--truth", nargs="+", required=True, help="bundle directories or hypnograms")
    p.add_argument("--pred", nargs="+", required=True, help="hypnogram files, same order")
    p.add_argument("--out", help="write <out>.txt and <out>.csv")
    p.add_argument("--no-trim", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="end-to-end cross-validated experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, help="concurrent fold workers (overrides [run] jobs)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--tau", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("render-hypnogram", help="draw truth above prediction (SVG + text)")
    p.add_argument("--truth", required=True, help="bundle directory or hypnogram file")
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True, help="output path; .svg and .txt are written")
    p.add_argument("--no-trim", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("schema", help="print every config section and key")
    p.set_defaults(func=cmd_schema)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", None) is not None and args.jobs < 1:
        print("error: config: [jobs] must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except SleepStagerError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
