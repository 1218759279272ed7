"""``rinq`` command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
Every output records a ``run`` hash of the command and its effective
configuration (``manifest`` for experiment runs).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import container
from .dictionary import PUBLISHED_T1_SEGMENTS, PUBLISHED_T2_SEGMENTS, GridSpec, build_grid
from .dictionary import Dictionary, compress_svd, generate_dictionary, match_map
from .evaluation import QuantitativeMap, error_map, relative_mean_error, render_error, render_map, write_metrics, write_pgm
from .experiments import EXPERIMENT_PRESETS, ExperimentManifest, ExperimentStepError, run_experiment
from .models import PRESETS, ConfigError, ModelConfig, Network, build_preset, describe
from .phantom import DEFAULT_PRESET, CorruptionConfig, Phantom, SignalStack, UniformRanges, corrupt
from .phantom import make_phantom, render_ground_truth, synthesize_signals
from .pipeline import (
    TRAIN_PRESETS,
    Checkpoint,
    NumericError,
    SampleSet,
    TrainConfig,
    extract_samples,
    infer_map,
    split_dataset,
    train,
    write_history,
)
from .seqsim import AcquisitionSchedule, FaLobes, make_schedule

log = logging.getLogger("rinq")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


# output locations and execution knobs do not change results
_NOT_HASHED = ("func", "workers", "verbose", "out", "render")


def _run_hash(args) -> str:
    doc = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in _NOT_HASHED}
    return container.digest(doc)


def _load_schedule(path) -> AcquisitionSchedule:
    if not Path(path).is_file():
        raise UsageError(f"schedule file not found: {path}")
    return AcquisitionSchedule.load(path)


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input not found: {path}")
    return p


def _load_truth(path) -> QuantitativeMap:
    """Ground truth from a ``.mrfm`` map or a phantom stem."""
    p = Path(path)
    if p.suffix == ".mrfm":
        return QuantitativeMap.load(_need(p))
    if not p.with_suffix(".json").is_file():
        raise UsageError(f"ground truth not found: {path}")
    return render_ground_truth(Phantom.load(p))


def _model_config(args) -> ModelConfig:
    if getattr(args, "model_config", None):
        return ModelConfig.from_json(json.loads(_need(args.model_config).read_text()))
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    return build_preset(args.preset, args.n_reps, args.size)


# ------------------------------------------------------------- commands


def cmd_schedule(args):
    fa = FaLobes(lobe_length=args.lobe_length)
    s = make_schedule(args.n_reps, fa, args.tr_min, args.tr_max, args.te, not args.no_inversion, args.seed)
    s.save(args.out)
    print(f"schedule {s.fingerprint()} ({s.n_reps} reps) -> {args.out}")


def cmd_dict_gen(args):
    schedule = _load_schedule(args.schedule)
    if args.grid == "paper-grid":
        spec = GridSpec(PUBLISHED_T1_SEGMENTS, PUBLISHED_T2_SEGMENTS, args.t2_le_t1)
    else:
        spec = GridSpec.from_json(json.loads(_need(args.grid).read_text()))
    grid = build_grid(spec)
    d = generate_dictionary(grid, schedule, args.K, args.workers, spec)
    if args.rank:
        basis, _ = compress_svd(d, args.rank)  # attaches the basis to d
        log.info("rank %d keeps %.6f of the energy", args.rank, basis.energy_fraction())
    d.meta = {"run": _run_hash(args)}
    d.save(args.out)
    print(f"dictionary {d.n_entries} x {d.n_reps} -> {args.out}")


def cmd_phantom(args):
    preset = UniformRanges() if args.preset == "uniform" else DEFAULT_PRESET
    ph = make_phantom(args.size[0], args.size[1], args.regions, args.seed, preset)
    ph.save(args.out)
    print(f"phantom {ph.shape} with {len(ph.region_params)} regions -> {args.out}.json/.pgm")


def cmd_simulate(args):
    schedule = _load_schedule(args.schedule)
    _need(Path(args.phantom).with_suffix(".json"))
    stack = synthesize_signals(Phantom.load(args.phantom), schedule, args.K)
    stack.meta = {"run": _run_hash(args)}
    stack.save(args.out)
    print(f"signal stack {stack.signals.shape} -> {args.out}")


def cmd_corrupt(args):
    stack = SignalStack.load(_need(args.stack))
    cc = CorruptionConfig(args.noise_sigma, args.interference_k, args.interference_scale, args.seed)
    out = corrupt(stack, cc)
    if not cc.is_identity():
        out.meta = {**out.meta, "run": _run_hash(args)}
    out.save(args.out)
    print(f"corrupted stack -> {args.out}")


def cmd_split(args):
    s = split_dataset(args.ids, args.mode, tuple(args.ratios), seed=args.seed)
    doc = {**s.to_json(), "run": _run_hash(args)}
    Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(json.dumps(s.to_json()))


def _sample_sets(pairs, cfg) -> SampleSet:
    sets = []
    for stack_path, gt_path in pairs:
        stack = SignalStack.load(_need(stack_path))
        sets.append(extract_samples(stack, _load_truth(gt_path), cfg.patch, cfg.channels, source=stack_path))
    return SampleSet.concat(sets)


def cmd_train(args):
    cfg = _model_config(args)
    if not args.train or not args.val:
        raise UsageError("train needs --train and --val STACK GT pairs")
    train_set = _sample_sets(args.train, cfg)
    val_set = _sample_sets(args.val, cfg)
    preset = TRAIN_PRESETS.get(cfg.name, {})
    tc = TrainConfig(
        learning_rate=args.lr if args.lr is not None else preset.get("learning_rate", 1e-3),
        batch_size=args.batch_size if args.batch_size is not None else preset.get("batch_size", 128),
        epochs=args.epochs,
        seed=args.seed,
    )
    net = Network(cfg, seed=args.seed)
    best, history = train(net, train_set, val_set, tc, {"run": _run_hash(args), "train_config": asdict(tc)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    best.save(out / "checkpoint.rnqc")
    write_history(out / "history.csv", history)
    print(f"best epoch {best.epoch}: validation root-MSE {best.validation_root_mse_ms:.3f} ms -> {out}")


def _save_map(qmap: QuantitativeMap, path, args):
    qmap.save(path, {"run": _run_hash(args)})
    if args.render:
        rdir = Path(args.render)
        rdir.mkdir(parents=True, exist_ok=True)
        for ch in ("t1", "t2"):
            write_pgm(rdir / f"{Path(path).stem}_{ch}.pgm", render_map(qmap, ch))


def cmd_infer(args):
    ckpt = Checkpoint.load(_need(args.checkpoint))
    qmap = infer_map(ckpt.network(), SignalStack.load(_need(args.stack)))
    _save_map(qmap, args.out, args)
    print(f"map -> {args.out}")


def cmd_match(args):
    d = Dictionary.load(_need(args.dictionary))
    stack = SignalStack.load(_need(args.stack))
    if stack.schedule_fingerprint != d.schedule_fingerprint:
        log.warning("stack and dictionary come from different schedules")
    qmap = match_map(stack, d, stack.mask, compressed=args.compressed, workers=args.workers)
    _save_map(qmap, args.out, args)
    print(f"map -> {args.out}")


def cmd_evaluate(args):
    pred = QuantitativeMap.load(_need(args.pred))
    gt = _load_truth(args.gt)
    metrics = relative_mean_error(pred, gt)
    metrics["run"] = _run_hash(args)
    write_metrics(args.out, metrics)
    if args.render:
        rdir = Path(args.render)
        rdir.mkdir(parents=True, exist_ok=True)
        for ch in ("t1", "t2"):
            write_pgm(rdir / f"{ch}_error.pgm", render_error(error_map(pred, gt, ch)))
    print(
        f"T1 {metrics['t1']['rme_percent']:.2f} ± {metrics['t1']['std_percent']:.2f} %, "
        f"T2 {metrics['t2']['rme_percent']:.2f} ± {metrics['t2']['std_percent']:.2f} %"
    )


def cmd_describe(args):
    print(describe(_model_config(args)))


def cmd_experiment(args):
    m = ExperimentManifest.load(_need(args.manifest)) if args.manifest else ExperimentManifest()
    m.seed = args.seed
    if args.out:
        m.output_dir = str(args.out)
    if args.epochs is not None:
        m.training.epochs = args.epochs
    if args.gt:
        m.gt = args.gt
    if args.models:
        m.models = args.models
    report = run_experiment(m, args.preset)
    for row in report["rows"]:
        print(f"{row['model']:<14} val root-MSE {row['val_root_mse_ms']:9.3f} ms (epoch {row['best_epoch']})")
    print(f"report -> {Path(m.output_dir) / 'report.md'}")


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rinq", description="MRF simulation, matching and network reconstruction")
    p.add_argument("-v", "--verbose", action="store_true")
    default_workers = int(os.environ.get("RINQ_WORKERS", "1") or 1)
    p.add_argument("--workers", type=int, default=default_workers, help="worker count (default: $RINQ_WORKERS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("schedule", help="generate an acquisition schedule JSON")
    s.add_argument("--n-reps", type=int, default=1000)
    s.add_argument("--tr-min", type=float, default=12.0)
    s.add_argument("--tr-max", type=float, default=15.0)
    s.add_argument("--te", type=float, default=2.0)
    s.add_argument("--lobe-length", type=int, default=250)
    s.add_argument("--no-inversion", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("dict-gen", help="simulate a fingerprint dictionary")
    s.add_argument("--grid", default="paper-grid", help="'paper-grid' or a GridSpec JSON file")
    s.add_argument("--t2-le-t1", action="store_true", help="drop pairs with T2 > T1")
    s.add_argument("--schedule", required=True)
    s.add_argument("--rank", type=int, default=0, help="attach an SVD basis of this rank")
    s.add_argument("--K", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dict_gen)

    s = sub.add_parser("phantom", help="generate a piecewise-constant phantom")
    s.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    s.add_argument("--regions", type=int, default=40)
    s.add_argument("--preset", choices=("uniform", "tissue"), default="uniform")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output stem")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("simulate", help="noiseless signal stack for a phantom")
    s.add_argument("--phantom", required=True, help="phantom stem")
    s.add_argument("--schedule", required=True)
    s.add_argument("--K", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("corrupt", help="add noise and interference to a stack")
    s.add_argument("--stack", required=True)
    s.add_argument("--noise-sigma", type=float, default=0.05)
    s.add_argument("--interference-k", type=int, default=8)
    s.add_argument("--interference-scale", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("split", help="partition stack ids")
    s.add_argument("ids", nargs="+")
    s.add_argument("--mode", choices=("random_slice", "leave_one_out"), default="random_slice")
    s.add_argument("--ratios", type=int, nargs=3, default=(8, 2, 2))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    def model_args(s, n_reps=990, size="desk"):
        s.add_argument("--preset", default="rnn1-complex", help=f"one of {', '.join(PRESETS)}")
        s.add_argument("--model-config", help="ModelConfig JSON (overrides --preset)")
        s.add_argument("--n-reps", type=int, default=n_reps)
        s.add_argument("--size", choices=("full", "desk"), default=size)

    s = sub.add_parser("train", help="train one configuration")
    model_args(s)
    s.add_argument("--train", nargs=2, action="append", metavar=("STACK", "GT"), help="repeatable")
    s.add_argument("--val", nargs=2, action="append", metavar=("STACK", "GT"), help="repeatable")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict a map with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--stack", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--render", help="directory for PGM renders")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("match", help="template-match a stack against a dictionary")
    s.add_argument("--dictionary", required=True)
    s.add_argument("--stack", required=True)
    s.add_argument("--compressed", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--render", help="directory for PGM renders")
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("evaluate", help="relative mean error against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True, help=".mrfm map or phantom stem")
    s.add_argument("--out", required=True)
    s.add_argument("--render", help="directory for error-map PGMs")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("describe", help="print a layer table")
    model_args(s, n_reps=3000, size="full")
    s.set_defaults(func=cmd_describe)

    s = sub.add_parser("experiment", help="run a paired-configuration experiment")
    s.add_argument("preset", choices=sorted(EXPERIMENT_PRESETS))
    s.add_argument("--manifest", help="ExperimentManifest JSON")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--gt", choices=("phantom", "dictionary"), default=None)
    s.add_argument("--models", nargs="+", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_experiment)
    return p


def _exit_code(exc: BaseException) -> int:
    while isinstance(exc, ExperimentStepError) and exc.__cause__ is not None:
        exc = exc.__cause__
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (UsageError, ConfigError, ValueError, FileNotFoundError, KeyError)):
        return EXIT_USAGE
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # mapped to documented exit codes
        code = _exit_code(exc)
        if code == 1:
            raise
        print(f"rinq {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
