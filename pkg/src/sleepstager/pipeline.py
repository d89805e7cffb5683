"""End-to-end experiment: preprocess, split, train, predict, fuse, score.

Output layout under ``out_dir``::

    config.ini              validated configuration echo
    summary.json            fold and pooled scores (no timings)
    report.txt, report.csv  pooled report (sum of fold confusion matrices)
    run.log                 wall-clock timings per stage
    fold_XX/
        model.ssck          retained checkpoint (with standardizer)
        history.csv
        report.txt, report.csv
        grids/<subject>.sspg
        hypnograms/<subject>.txt

All outputs except ``run.log`` are bit-identical across reruns with the
same configuration, seed and job count.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .aggregate import (SCHEMES, PosteriorGrid, decide, fuse, read_posterior_grid,
                        scatter_decisions, write_hypnogram, write_posterior_grid)
from .config import ExperimentConfig
from .errors import ConfigError, ShapeError, SleepStagerError, SplitError
from .metrics import EvalReport, confusion, report_from_confusion, stratify_transitions
from .network import (ContextConfig, DeepCnnSpec, ModelParams, ModelSpec, OneMaxCnnSpec,
                      load_checkpoint, predict, save_checkpoint)
from .signal_io import (TARGET_RATE_HZ, Fold, RecordingBundle, SplitPlan, find_bundles,
                        load_bundle, make_split_plan, resample_bundle, trim_in_bed)
from .tfr import (NFFT, FilterBank, Standardizer, bundle_digest, filterbank_digest,
                  make_triangular_filterbank, read_tf_cache, recording_images, write_tf_cache)
from .training import PRECISIONS, build_dataset, train, write_history_csv

N_BINS = NFFT // 2 + 1


class StageError(SleepStagerError):
    """Wraps a module error with the fold and stage it happened in."""

    def __init__(self, stage: str, fold: int | None, cause: SleepStagerError):
        self.category = cause.category
        where = stage if fold is None else f"fold {fold}, {stage}"
        super().__init__(f"{where}: {cause}")


@dataclass
class Recording:
    subject_id: str
    images: np.ndarray  # (N, P, M, T), float32-rounded cache values
    labels: np.ndarray


def _timer(log: Callable[[str], None] | None):
    start = time.perf_counter()

    def lap(msg):
        if log is not None:
            log(f"{msg} ({time.perf_counter() - start:.2f}s)")
    return lap


# ---------------------------------------------------------------------------
# preprocessing

def filter_banks(channels: Sequence[str], n_filters: int, kind: str) -> list[FilterBank | None]:
    """One bank per channel; a learnable bank keeps raw spectrogram planes."""
    if kind == "learnable":
        return [None] * len(channels)
    fb = make_triangular_filterbank(n_filters, N_BINS, TARGET_RATE_HZ)
    return [fb] * len(channels)


def prepare_bundle(bundle: RecordingBundle, trim: bool = True) -> RecordingBundle:
    if bundle.sample_rate_hz != TARGET_RATE_HZ:
        bundle = resample_bundle(bundle)
    if trim and bundle.in_bed_range is not None:
        bundle = trim_in_bed(bundle)
    return bundle


def cached_images(bundle: RecordingBundle, channels: Sequence[str],
                  fbs: Sequence[FilterBank | None], cache_dir: Path,
                  log: Callable[[str], None] | None = None) -> np.ndarray:
    """TF images for a bundle, through a hash-verified cache file.

    A cache is reused only when its channel names, filter-bank digest and
    source digest all match; otherwise it is rebuilt. Values always come
    from the file, so cached and fresh runs see the same numbers.
    """
    missing = [c for c in channels if c not in bundle.channel_names]
    if missing:
        raise ConfigError(f"{bundle.subject_id} has no channel {missing[0]!r}", "data.channels")
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{bundle.subject_id}.sstf"
    fb_hash, src_hash = filterbank_digest(fbs), bundle_digest(bundle)
    if path.is_file():
        cache = read_tf_cache(path)
        if (cache.fb_digest == fb_hash and cache.source_digest == src_hash
                and cache.channel_names == tuple(channels)):
            return cache.images
        if log:
            log(f"cache for {bundle.subject_id} is stale; rebuilding")
    images = recording_images(bundle, channels, fbs)
    write_tf_cache(path, images, channels, fb_hash, src_hash)
    return read_tf_cache(path).images


def load_recordings(config: ExperimentConfig, log=None) -> dict[str, Recording]:
    fbs = filter_banks(config.channels, config.get("features", "n_filters"),
                       config.get("features", "kind"))
    paths = find_bundles(config.path("bundle_dir"))
    if not paths:
        raise ConfigError("no recording bundles found", "data.bundle_dir")
    out: dict[str, Recording] = {}
    for p in paths:
        bundle = prepare_bundle(load_bundle(p), config.get("data", "trim_in_bed"))
        if bundle.subject_id in out:
            raise SplitError(f"duplicate subject id {bundle.subject_id!r} ({p})")
        images = cached_images(bundle, config.channels, fbs, config.cache_dir, log)
        out[bundle.subject_id] = Recording(bundle.subject_id, images,
                                           np.asarray(bundle.labels, dtype=np.int64))
    return out


def split_plan(config: ExperimentConfig, recordings: dict[str, Recording]) -> SplitPlan:
    k = config.get("split", "k")
    return make_split_plan(sorted(recordings), config.get("split", "protocol"), config.seed,
                           config.get("split", "n_validation"), k if k else None)


# ---------------------------------------------------------------------------
# model pieces

def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def model_spec(config: ExperimentConfig, input_dims: tuple[int, int, int]) -> ModelSpec:
    ctx = ContextConfig(config.get("model", "tau"), config.get("model", "mode"))
    p, m, t = input_dims
    learnable = config.get("features", "kind") == "learnable"
    dims = (p, config.get("features", "n_filters"), t) if learnable else (p, m, t)
    common = dict(context=ctx, dropout_rate=config.get("training", "dropout"),
                  lambda_reg=config.get("training", "lambda_reg"),
                  learnable_fb_bins=m if learnable else None)
    if config.get("model", "arch") == "deepcnn":
        return DeepCnnSpec(dims, **common)
    return OneMaxCnnSpec(dims, config.get("model", "filters_per_width"),
                         config.get("model", "filter_widths"), head=config.get("model", "head"),
                         **common)


def recording_posteriors(params: ModelParams, spec: ModelSpec, standardizer: Standardizer,
                         images: np.ndarray, dtype=np.float64) -> np.ndarray:
    """(N, S, Y) slot posteriors for one recording."""
    data = build_dataset([("", standardizer.apply(images), np.zeros(len(images), np.int64))],
                         spec.context, spec.n_classes)
    return predict(params, spec, data.inputs(), dtype=dtype)


def posterior_grid(post: np.ndarray, spec: ModelSpec) -> PosteriorGrid:
    if spec.context.mode == "one_to_many":
        return scatter_decisions(post, spec.context.tau, len(post))
    return PosteriorGrid(post.copy(), np.ones(post.shape[:2], dtype=bool), 0)


def standardizer_payload(std: Standardizer) -> dict:
    return {"mean": [float(v) for v in std.mean], "std": [float(v) for v in std.std]}


def standardizer_from_payload(d: dict) -> Standardizer:
    return Standardizer(np.asarray(d["mean"], dtype=np.float64),
                        np.asarray(d["std"], dtype=np.float64))


# ---------------------------------------------------------------------------
# one fold

@dataclass
class FoldResult:
    index: int
    fold: Fold
    confusion: np.ndarray
    strata: dict[str, np.ndarray]
    slot_correct: np.ndarray  # per offset
    slot_count: np.ndarray
    scheme_correct: dict[str, int]
    n_epochs: int
    best_pass: int
    timings: list[str] = field(default_factory=list)


def train_fold(config: ExperimentConfig, recordings: dict[str, Recording], fold: Fold,
               index: int, log=None):
    """Train one fold; returns (params, spec, standardizer, history)."""
    std = Standardizer.fit([recordings[s].images for s in fold.train])
    sample = recordings[fold.train[0]].images
    spec = model_spec(config, tuple(sample.shape[1:]))
    ctx = spec.context

    def dataset(subjects):
        return build_dataset([(s, std.apply(recordings[s].images), recordings[s].labels)
                              for s in subjects], ctx, spec.n_classes)

    tcfg = config.training(fold_seed(config.seed, index))
    params, history = train(spec, dataset(fold.train), dataset(fold.validation), tcfg, log=log)
    return params, spec, std, history


def best_pass(history: list[dict]) -> int:
    """Pass whose parameters were retained: best validation accuracy, earliest on ties."""
    return max(history, key=lambda h: (h["val_accuracy"], -h["pass"]))["pass"]


def save_fold_checkpoint(path, config: ExperimentConfig, fold: Fold, index: int,
                         params: ModelParams, spec: ModelSpec, std: Standardizer,
                         history: list[dict]) -> None:
    """Checkpoint plus everything `predict` needs to rebuild the inputs."""
    save_checkpoint(path, params, spec, extra={
        "fold": index, "best_pass": best_pass(history),
        "standardizer": standardizer_payload(std),
        "channels": list(config.channels), "n_filters": config.get("features", "n_filters"),
        "fb_kind": config.get("features", "kind"),
        "precision": config.get("training", "precision"),
        "test_subjects": list(fold.test),
    })


def run_fold(config: ExperimentConfig, recordings: dict[str, Recording], fold: Fold,
             index: int) -> FoldResult:
    timings: list[str] = []
    lap = _timer(timings.append)
    fold_dir = config.out_dir / f"fold_{index:02d}"
    (fold_dir / "grids").mkdir(parents=True, exist_ok=True)
    (fold_dir / "hypnograms").mkdir(parents=True, exist_ok=True)
    try:
        params, spec, std, history = train_fold(config, recordings, fold, index,
                                                log=lambda m: timings.append(f"fold {index} {m}"))
    except SleepStagerError as exc:
        raise StageError("train", index, exc) from exc
    lap(f"fold {index} trained")
    write_history_csv(fold_dir / "history.csv", history)
    ckpt = fold_dir / "model.ssck"
    save_fold_checkpoint(ckpt, config, fold, index, params, spec, std, history)
    # predictions come from the stored checkpoint, exactly as `predict` would see it
    params, spec, _ = load_checkpoint(ckpt)
    dtype = PRECISIONS[config.get("training", "precision")]
    voting = config.get("aggregation", "voting")
    s = 2 * spec.context.tau + 1 if spec.context.mode == "one_to_many" else 1
    slot_correct, slot_count = np.zeros(s, np.int64), np.zeros(s, np.int64)
    scheme_correct = {k: 0 for k in SCHEMES}
    cm = np.zeros((spec.n_classes,) * 2, np.int64)
    strata = {"non_transition": cm.copy(), "transition": cm.copy()}
    n_epochs = 0
    try:
        for subject in fold.test:
            rec = recordings[subject]
            post = recording_posteriors(params, spec, std, rec.images, dtype)
            gpath = fold_dir / "grids" / f"{subject}.sspg"
            write_posterior_grid(gpath, posterior_grid(post, spec))
            grid = read_posterior_grid(gpath)
            y = rec.labels
            for j in range(s):
                have = grid.present[:, j]
                slot_correct[j] += int(np.sum(np.argmax(grid.probs[have, j], axis=1) == y[have]))
                slot_count[j] += int(have.sum())
            for scheme in SCHEMES:
                scheme_correct[scheme] += int(np.sum(decide(fuse(grid, scheme)).labels == y))
            pred = decide(fuse(grid, voting)).labels
            write_hypnogram(fold_dir / "hypnograms" / f"{subject}.txt", pred)
            cm += confusion(y, pred, spec.n_classes)
            stable, trans = stratify_transitions(y)
            strata["non_transition"] += confusion(y[stable], pred[stable], spec.n_classes)
            strata["transition"] += confusion(y[trans], pred[trans], spec.n_classes)
            n_epochs += len(y)
    except SleepStagerError as exc:
        raise StageError("predict", index, exc) from exc
    report = _report(cm, strata)
    (fold_dir / "report.txt").write_text(report.to_text())
    (fold_dir / "report.csv").write_text(report.to_csv())
    lap(f"fold {index} evaluated")
    return FoldResult(index, fold, cm, strata, slot_correct, slot_count, scheme_correct,
                      n_epochs, best_pass(history), timings)


def _report(cm: np.ndarray, strata: dict[str, np.ndarray]) -> EvalReport:
    report = report_from_confusion(cm)
    report.strata = {k: report_from_confusion(v) for k, v in strata.items()}
    return report


def _run_fold_job(args):
    config, recordings, fold, index = args
    return run_fold(config, recordings, fold, index)


# ---------------------------------------------------------------------------
# experiment

@dataclass
class ExperimentResult:
    folds: list[FoldResult]
    fold_reports: list[EvalReport]
    pooled: EvalReport
    summary: dict


def _ratio(a, b):
    return float(a) / float(b) if b else None


def _slot_accuracy(correct, count, tau: int) -> dict:
    """Accuracy per output slot k, keyed "-1", "0", "1", ...

    Grid column j holds decisions made by input n + j - tau about epoch n,
    i.e. that input's slot k = tau - j. So "-1" is the left prediction (an
    input's decision about its left neighbour) and "0" the classification.
    """
    return {str(tau - j): _ratio(c, n) for j, (c, n) in enumerate(zip(correct, count))}


def _fold_summary(r: FoldResult, report: EvalReport, tau: int) -> dict:
    return {
        "fold": r.index,
        "test_subjects": list(r.fold.test),
        "validation_subjects": list(r.fold.validation),
        "n_train_subjects": len(r.fold.train),
        "best_pass": r.best_pass,
        "epochs": r.n_epochs,
        "accuracy": report.overall_accuracy,
        "kappa": report.kappa,
        "macro_f1": report.macro_f1,
        "slot_accuracy": _slot_accuracy(r.slot_correct, r.slot_count, tau),
        "voting_accuracy": {k: _ratio(v, r.n_epochs) for k, v in r.scheme_correct.items()},
    }


def run_experiment(config: ExperimentConfig, jobs: int | None = None,
                   log: Callable[[str], None] | None = None) -> ExperimentResult:
    """Run every fold of the split plan and write all outputs."""
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config.to_text())
    log_lines: list[str] = []

    def emit(msg):
        log_lines.append(msg)
        if log is not None:
            log(msg)

    lap = _timer(emit)
    try:
        recordings = load_recordings(config, emit)
    except SleepStagerError as exc:
        raise StageError("preprocess", None, exc) from exc
    lap(f"preprocessed {len(recordings)} recordings")
    try:
        plan = split_plan(config, recordings)
    except SleepStagerError as exc:
        raise StageError("split", None, exc) from exc

    jobs = jobs or config.get("run", "jobs")
    tasks = [(config, recordings, fold, i) for i, fold in enumerate(plan.folds)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_job, tasks))
    else:
        results = [_run_fold_job(t) for t in tasks]
    for r in results:
        for line in r.timings:
            emit(line)

    tau = config.get("model", "tau") if config.get("model", "mode") == "one_to_many" else 0
    fold_reports = [_report(r.confusion, r.strata) for r in results]
    pooled = _report(sum(r.confusion for r in results),
                     {k: sum(r.strata[k] for r in results) for k in results[0].strata})
    total = sum(r.n_epochs for r in results)
    slot_c = sum(r.slot_correct for r in results)
    slot_n = sum(r.slot_count for r in results)
    summary = {
        "mode": config.get("model", "mode"),
        "arch": config.get("model", "arch"),
        "tau": config.get("model", "tau"),
        "voting": config.get("aggregation", "voting"),
        "seed": config.seed,
        "folds": [_fold_summary(r, rep, tau) for r, rep in zip(results, fold_reports)],
        "pooled": {
            "epochs": total,
            "accuracy": pooled.overall_accuracy,
            "kappa": pooled.kappa,
            "macro_f1": pooled.macro_f1,
            "mean_sensitivity": pooled.mean_sensitivity,
            "mean_specificity": pooled.mean_specificity,
            "mean_selectivity": pooled.mean_selectivity,
            "slot_accuracy": _slot_accuracy(slot_c, slot_n, tau),
            "voting_accuracy": {k: _ratio(sum(r.scheme_correct[k] for r in results), total)
                                for k in SCHEMES},
            "flags": pooled.flags,
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(pooled.to_text())
    (out / "report.csv").write_text(pooled.to_csv())
    lap("experiment finished")
    with open(out / "run.log", "w") as fh:
        fh.write("\n".join(log_lines) + "\n")
    return ExperimentResult(results, fold_reports, pooled, summary)


def load_fold_model(path) -> tuple[ModelParams, ModelSpec, Standardizer, dict]:
    params, spec, extra = load_checkpoint(path)
    if "standardizer" not in extra:
        raise ShapeError(f"{path}: checkpoint carries no standardizer")
    return params, spec, standardizer_from_payload(extra["standardizer"]), extra
