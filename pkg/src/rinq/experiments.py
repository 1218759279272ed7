"""Experiment manifests and the paired-configuration runner.

A manifest fixes the synthetic benchmark (schedule, phantoms, corruption,
split) through ``data_seed`` and the training randomness through ``seed``.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import container
from .dictionary import GridSpec, build_grid, generate_dictionary, match_map
from .evaluation import error_map, relative_mean_error, render_error, render_map, write_metrics, write_pgm
from .models import Network, build_preset, count_params
from .phantom import (
    DEFAULT_PRESET,
    CorruptionConfig,
    UniformRanges,
    corrupt,
    make_phantom,
    render_ground_truth,
    synthesize_signals,
)
from .pipeline import (
    TRAIN_PRESETS,
    SampleSet,
    TrainConfig,
    extract_samples,
    infer_map,
    split_dataset,
    train,
    write_history,
)
from .seqsim import FaLobes, make_schedule

log = logging.getLogger(__name__)


class ExperimentStepError(RuntimeError):
    """A named sub-step failed; the original exception is ``__cause__``."""

    def __init__(self, step: str, exc: BaseException):
        super().__init__(f"experiment step {step!r} failed: {exc}")
        self.step = step

EXPERIMENT_PRESETS = {
    "exp1-input-type": ["cnn1-mag", "cnn1-complex", "rnn1-mag", "rnn1-complex"],
    "exp2-arch": ["cnn1-complex", "rnn1-complex"],
    "exp3-quantile": ["rnn1-complex", "rnn3-complex"],
    "all-models": ["cnn1-mag", "rnn1-mag", "cnn1-complex", "rnn1-complex", "rnn3-complex"],
}


@dataclass
class ScheduleSection:
    n_reps: int = 990
    tr_min_ms: float = 12.0
    tr_max_ms: float = 15.0
    te_ms: float = 2.0
    inversion: bool = True
    lobe_length: int = 250


@dataclass
class PhantomSection:
    count: int = 3
    height: int = 64
    width: int = 64
    n_regions: int = 40
    preset: str = "uniform"  # uniform | tissue


@dataclass
class CorruptionSection:
    noise_sigma: float = 0.05
    interference_k: int = 8
    interference_scale: float = 0.1


@dataclass
class SplitSection:
    mode: str = "random_slice"
    ratios: tuple = (1, 1, 1)


@dataclass
class TrainSection:
    epochs: int = 40
    model_size: str = "desk"
    overrides: dict = field(default_factory=dict)  # preset name -> TrainConfig fields


@dataclass
class ExperimentManifest:
    seed: int = 0
    data_seed: int = 2024
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    phantoms: PhantomSection = field(default_factory=PhantomSection)
    corruption: CorruptionSection = field(default_factory=CorruptionSection)
    split: SplitSection = field(default_factory=SplitSection)
    training: TrainSection = field(default_factory=TrainSection)
    models: list = field(default_factory=list)
    gt: str = "phantom"  # phantom | dictionary
    output_dir: str = "runs/experiment"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentManifest":
        doc = dict(doc)
        sections = {
            "schedule": ScheduleSection,
            "phantoms": PhantomSection,
            "corruption": CorruptionSection,
            "split": SplitSection,
            "training": TrainSection,
        }
        for key, kind in sections.items():
            if key in doc:
                doc[key] = kind(**doc[key])
        if "split" in doc:
            doc["split"].ratios = tuple(doc["split"].ratios)
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        return cls.from_json(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        doc = self.to_json()
        doc.pop("output_dir")
        return container.digest(doc)

    def data_digest(self) -> str:
        doc = self.to_json()
        keep = ("data_seed", "schedule", "phantoms", "corruption", "split", "gt")
        return container.digest({k: doc[k] for k in keep})


@dataclass
class Benchmark:
    schedule: object
    phantoms: list
    stacks: dict  # id -> corrupted SignalStack
    clean: dict
    truth: dict  # id -> QuantitativeMap
    split: object


def build_benchmark(m: ExperimentManifest) -> Benchmark:
    s = m.schedule
    schedule = make_schedule(
        s.n_reps,
        FaLobes(lobe_length=s.lobe_length),
        s.tr_min_ms,
        s.tr_max_ms,
        s.te_ms,
        s.inversion,
        seed=m.data_seed,
    )
    preset = UniformRanges() if m.phantoms.preset == "uniform" else DEFAULT_PRESET
    phantoms, stacks, clean, truth = [], {}, {}, {}
    dictionary = None
    if m.gt == "dictionary":
        dictionary = generate_dictionary(build_grid(GridSpec()), schedule)
    for i in range(m.phantoms.count):
        sid = f"phantom{i}"
        ph = make_phantom(m.phantoms.height, m.phantoms.width, m.phantoms.n_regions, m.data_seed * 1000 + i, preset)
        sig = synthesize_signals(ph, schedule)
        cc = CorruptionConfig(seed=m.data_seed * 1000 + i, **asdict(m.corruption))
        phantoms.append(ph)
        clean[sid] = sig
        stacks[sid] = corrupt(sig, cc)
        if dictionary is not None:
            truth[sid] = match_map(sig, dictionary, sig.mask)
            truth[sid].provenance = "ground-truth"
        else:
            truth[sid] = render_ground_truth(ph)
    split = split_dataset(sorted(stacks), m.split.mode, m.split.ratios, seed=m.data_seed)
    return Benchmark(schedule, phantoms, stacks, clean, truth, split)


def _samples(bench: Benchmark, ids, cfg) -> SampleSet:
    return SampleSet.concat(
        [extract_samples(bench.stacks[i], bench.truth[i], cfg.patch, cfg.channels, "discard", source=i) for i in ids]
    )


def run_config(m: ExperimentManifest, bench: Benchmark, name: str, outdir: Path) -> dict:
    cfg = build_preset(name, m.schedule.n_reps, m.training.model_size)
    tc = TrainConfig(epochs=m.training.epochs, seed=m.seed, **{**TRAIN_PRESETS[name], **m.training.overrides.get(name, {})})
    train_set = _samples(bench, bench.split.train, cfg)
    val_set = _samples(bench, bench.split.validation, cfg)
    net = Network(cfg, seed=m.seed)
    meta = {"manifest": m.digest(), "data": m.data_digest(), "preset": name}
    t0 = time.perf_counter()
    best, history = train(net, train_set, val_set, tc, meta)
    elapsed = time.perf_counter() - t0
    cdir = outdir / name
    cdir.mkdir(parents=True, exist_ok=True)
    best.save(cdir / "checkpoint.rnqc")
    write_history(cdir / "history.csv", history)
    net = best.network()
    test_metrics = {}
    for sid in bench.split.test:
        pred = infer_map(net, bench.stacks[sid])
        gt = bench.truth[sid]
        metrics = relative_mean_error(pred, gt)
        metrics["manifest"] = m.digest()
        write_metrics(cdir / f"metrics_{sid}.json", metrics)
        pred.save(cdir / f"map_{sid}.mrfm", {"manifest": m.digest()})
        for ch in ("t1", "t2"):
            write_pgm(cdir / f"{sid}_{ch}.pgm", render_map(pred, ch))
            write_pgm(cdir / f"{sid}_{ch}_error.pgm", render_error(error_map(pred, gt, ch)))
        test_metrics[sid] = {ch: metrics[ch] for ch in ("t1", "t2")}
    return {
        "model": name,
        "config_hash": container.digest(cfg.to_json()),
        "n_params": count_params(cfg),
        "learning_rate": tc.learning_rate,
        "batch_size": tc.batch_size,
        "epochs": tc.epochs,
        "best_epoch": best.epoch,
        "val_root_mse_ms": best.validation_root_mse_ms,
        "checkpoint_sha256": container.file_digest(cdir / "checkpoint.rnqc"),
        "test": test_metrics,
        "_seconds": elapsed,
    }


def report_markdown(report: dict) -> str:
    lines = [
        f"# {report['preset']}  (manifest {report['manifest']})",
        "",
        "| model | validation root-MSE [ms] | best epoch | params | config |",
        "|---|---|---|---|---|",
    ]
    for r in report["rows"]:
        lines.append(
            f"| {r['model']} | {r['val_root_mse_ms']:.2f} | {r['best_epoch']} | {r['n_params']:,} | {r['config_hash']} |"
        )
    lines += ["", "| model | test map | T1 RME ± std [%] | T2 RME ± std [%] |", "|---|---|---|---|"]
    for r in report["rows"]:
        for sid, t in r["test"].items():
            lines.append(
                f"| {r['model']} | {sid} | {t['t1']['rme_percent']:.1f} ± {t['t1']['std_percent']:.1f} "
                f"| {t['t2']['rme_percent']:.1f} ± {t['t2']['std_percent']:.1f} |"
            )
    return "\n".join(lines) + "\n"


def run_experiment(m: ExperimentManifest, preset: str, bench: Benchmark | None = None) -> dict:
    if preset not in EXPERIMENT_PRESETS:
        raise ValueError(f"unknown experiment preset {preset!r}; choose from {sorted(EXPERIMENT_PRESETS)}")
    names = m.models or EXPERIMENT_PRESETS[preset]
    outdir = Path(m.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    # the output location is not an input; leaving it out keeps reruns byte-identical
    recorded = {k: v for k, v in m.to_json().items() if k != "output_dir"}
    (outdir / "manifest.json").write_text(json.dumps(recorded, indent=1, sort_keys=True))
    if bench is None:
        try:
            bench = build_benchmark(m)
        except Exception as exc:
            raise ExperimentStepError("benchmark", exc) from exc
    rows, timings = [], {}
    for name in names:
        try:
            row = run_config(m, bench, name, outdir)
        except Exception as exc:
            raise ExperimentStepError(name, exc) from exc
        timings[name] = row.pop("_seconds")
        rows.append(row)
    report = {
        "preset": preset,
        "manifest": m.digest(),
        "data": m.data_digest(),
        "split": bench.split.to_json(),
        "rows": rows,
    }
    # timings are not deterministic and stay out of the metrics report
    (outdir / "timings.json").write_text(json.dumps(timings, indent=1))
    write_metrics(outdir / "report.json", report)
    (outdir / "report.md").write_text(report_markdown(report))
    return report


# (better, worse): the first model should reach a lower validation root-MSE
EXPECTED_ORDERINGS = [
    ("rnn1-complex", "rnn1-mag"),
    ("rnn1-complex", "cnn1-complex"),
    ("rnn3-complex", "rnn1-complex"),
]


def ordering_margins(losses: dict, orderings=EXPECTED_ORDERINGS, margin: float = 0.05) -> list[dict]:
    """Check ``better < worse`` per ordering from per-seed validation losses.

    ``losses[name]`` lists one loss per seed, aligned across names. The margin
    of a seed is ``(worse - better) / worse``; an ordering holds when the
    median margin over seeds is at least ``margin``.
    """
    out = []
    for better, worse in orderings:
        per_seed = [(w - b) / w for b, w in zip(losses[better], losses[worse])]
        med = statistics.median(per_seed)
        out.append({
            "better": better,
            "worse": worse,
            "margins": per_seed,
            "median_margin": med,
            "holds": med >= margin,
        })
    return out


def run_orderings(m: ExperimentManifest, seeds, preset: str = "all-models") -> dict:
    """Train every model of ``preset`` once per seed on one shared benchmark."""
    bench = build_benchmark(m)
    root = Path(m.output_dir)
    losses, reports = {}, {}
    for seed in seeds:
        ms = ExperimentManifest.from_json({**m.to_json(), "seed": seed, "output_dir": str(root / f"seed{seed}")})
        rep = run_experiment(ms, preset, bench)
        reports[seed] = rep
        for row in rep["rows"]:
            losses.setdefault(row["model"], []).append(row["val_root_mse_ms"])
    names = set(losses)
    checks = ordering_margins(losses, [o for o in EXPECTED_ORDERINGS if set(o) <= names])
    summary = {"manifest": m.digest(), "seeds": list(seeds), "losses": losses, "orderings": checks}
    write_metrics(root / "orderings.json", summary)
    return summary
