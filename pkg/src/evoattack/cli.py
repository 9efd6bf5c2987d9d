"""Command line entry point.

    evoattack make-synth --out DIR
    evoattack train   --kind dnn --out DIR
    evoattack distill --kind dnn --temperature 10 --out DIR
    evoattack attack  --model DIR/model.w --image-index 7 [--target 2] --out DIR
    evoattack batch   --model DIR/model.w --mode targeted --n 100 --out DIR
    evoattack report  --results DIR/results.jsonl --out DIR

Exit status: 0 on success, 1 on domain errors (shortfall, skipped sample,
malformed input files), 2 on usage errors. Progress goes to stderr; every
command writes ``config.json`` with all effective parameters to the output
directory, which defaults to ``$EVOATTACK_OUT`` or ``./out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .attack import NONTARGETED, TARGETED, AttackResult, AttackSpec, ShortfallError, batch_attack, run_attack
from .datasets import DatasetFormatError, gen_synthetic, load_cifar10, load_idx, split, write_idx
from .ga import GAParams
from .models import (Classifier, ModelConfig, TrainingDiverged, WeightsFormatError, accuracy, distill,
                     load_weights, save_weights, train)
from .report import (export_histogram_csv, export_mean_trend_csv, export_summary_csv, export_trend_csv,
                     perturbation, summarize, write_delta_image, write_image, write_raw)

log = logging.getLogger("evoattack")

OUT_ENV = "EVOATTACK_OUT"

# Population / iterations / crossover / mutation / Gaussian mean / Gaussian sigma per dataset.
PROFILES = {
    "mnist": dict(population_size=100, generations=200, crossover_prob=0.5, mutation_prob=0.05,
                  gaussian_mean=0.0, gaussian_sigma=30.0),
    "cifar10": dict(population_size=200, generations=200, crossover_prob=0.5, mutation_prob=0.05,
                    gaussian_mean=0.0, gaussian_sigma=20.0),
    "imagenet": dict(population_size=300, generations=100, crossover_prob=0.5, mutation_prob=0.05,
                     gaussian_mean=0.0, gaussian_sigma=40.0),
}
PROFILES["synth"] = dict(PROFILES["mnist"])

GA_FLAGS = {
    "population": "population_size", "generations": "generations",
    "crossover_prob": "crossover_prob", "swap_prob": "swap_prob",
    "mutation_prob": "mutation_prob", "gaussian_mean": "gaussian_mean",
    "gaussian_sigma": "gaussian_sigma", "epsilon": "init_epsilon",
    "tournament_size": "tournament_size", "step_cap": "step_cap",
    "zero_factor": "zero_mutation_factor", "workers": "workers",
}


class UsageError(Exception):
    pass


# -- argument parsing -----------------------------------------------------------------

def _common(p):
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./out)")
    p.add_argument("--seed", type=int, default=0)


def _data(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--data", choices=["synth", "idx", "cifar10"], default="synth")
    g.add_argument("--images", help="IDX image file (--data idx)")
    g.add_argument("--labels", help="IDX label file (--data idx)")
    g.add_argument("--cifar", nargs="+", help="CIFAR-10 binary batch files (--data cifar10)")
    g.add_argument("--classes", type=int, default=10, help="synthetic classes")
    g.add_argument("--per-class", type=int, default=100, help="synthetic samples per class")
    g.add_argument("--data-seed", type=int, default=0, help="synthetic generation and split seed")
    g.add_argument("--train-fraction", type=float, default=0.8)


def _model(p, temperature=1.0):
    g = p.add_argument_group("model")
    g.add_argument("--kind", choices=["lr", "dnn", "cnn"], default="dnn")
    g.add_argument("--hidden", type=int, nargs="+", default=[128, 128])
    g.add_argument("--conv-filters", type=int, default=8)
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--lr", type=float, default=0.1)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--temperature", type=float, default=temperature)
    g.add_argument("--accuracy-floor", type=float, default=0.0)


def _ga(p):
    g = p.add_argument_group("attack")
    g.add_argument("--model", required=True, help="weights file")
    g.add_argument("--profile", choices=sorted(PROFILES), help="GA defaults (default: matches --data)")
    g.add_argument("--population", type=int)
    g.add_argument("--generations", type=int)
    g.add_argument("--crossover-prob", type=float)
    g.add_argument("--swap-prob", type=float)
    g.add_argument("--mutation-prob", type=float)
    g.add_argument("--gaussian-mean", type=float)
    g.add_argument("--gaussian-sigma", type=float)
    g.add_argument("--epsilon", type=float, help="initialisation half-width in [0,1] units")
    g.add_argument("--tournament-size", type=int)
    g.add_argument("--step-cap", type=float, help="mutation noise cap in multiples of sigma")
    g.add_argument("--zero-factor", type=float, help="mutation rate factor for zero-origin pixels")
    g.add_argument("--workers", type=int, help="threads for fitness evaluation")
    g.add_argument("--penalty", type=float, default=AttackSpec.penalty)
    g.add_argument("--metric", choices=["0", "2", "inf"], default="2")
    g.add_argument("--early-stop", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evoattack", description="Black-box evolutionary adversarial attacks.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synth", help="write the synthetic dataset as IDX files")
    _common(p)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--data-seed", type=int, default=0)

    p = sub.add_parser("train", help="train a classifier")
    _common(p)
    _data(p)
    _model(p)

    p = sub.add_parser("distill", help="train a defensively distilled classifier")
    _common(p)
    _data(p)
    _model(p, temperature=10.0)
    p.add_argument("--serve-temperature", type=float, default=1.0)

    p = sub.add_parser("attack", help="attack one test image")
    _common(p)
    _data(p)
    _ga(p)
    p.add_argument("--image-index", type=int, required=True, help="index into the test split")
    p.add_argument("--target", type=int, help="target label (omit for a non-targeted attack)")

    p = sub.add_parser("batch", help="attack the first N correctly classified test images")
    _common(p)
    _data(p)
    _ga(p)
    p.add_argument("--mode", choices=[NONTARGETED, TARGETED], default=NONTARGETED)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1, help="concurrent attacks (results do not depend on it)")
    p.add_argument("--model-id", default=None)

    p = sub.add_parser("report", help="summarise result records")
    _common(p)
    p.add_argument("--results", nargs="+", required=True, help="JSON-lines result files")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--model-id", default="")
    return parser


# -- helpers ----------------------------------------------------------------------------

def out_dir(args) -> Path:
    path = Path(args.out or os.environ.get(OUT_ENV) or "out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _validate_data(args):
    if args.data == "idx" and not (args.images and args.labels):
        raise UsageError("--data idx needs --images and --labels")
    if args.data == "cifar10" and not args.cifar:
        raise UsageError("--data cifar10 needs --cifar")
    if not 0 < args.train_fraction < 1:
        raise UsageError("--train-fraction must lie strictly between 0 and 1")


def load_data(args):
    if args.data == "idx":
        data = load_idx(args.images, args.labels)
    elif args.data == "cifar10":
        data = load_cifar10(args.cifar)
    else:
        data = gen_synthetic(args.classes, args.per_class, args.data_seed)
    return split(data, args.train_fraction, args.data_seed)


def model_config(args, data) -> ModelConfig:
    return ModelConfig(kind=args.kind, input_shape=data.shape, num_classes=data.num_classes,
                       hidden=tuple(args.hidden), conv_filters=args.conv_filters,
                       learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                       seed=args.seed, temperature=args.temperature, accuracy_floor=args.accuracy_floor)


def ga_params(args, seed) -> GAParams:
    profile = args.profile or {"idx": "mnist"}.get(args.data, args.data)
    values = dict(PROFILES[profile], seed=seed)
    for flag, name in GA_FLAGS.items():
        if getattr(args, flag) is not None:
            values[name] = getattr(args, flag)
    try:
        return GAParams(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def attack_spec(args, mode, label, ga) -> AttackSpec:
    metric = math.inf if args.metric == "inf" else int(args.metric)
    return AttackSpec(mode=mode, label=label, distance_p=metric, penalty=args.penalty, ga=ga,
                      early_stop=args.early_stop)


def write_config(out: Path, args, **extra):
    echo = {k: v for k, v in vars(args).items()}
    echo.update(extra)
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True, default=str) + "\n")


# -- commands -------------------------------------------------------------------------------

def cmd_make_synth(args):
    out = out_dir(args)
    data = gen_synthetic(args.classes, args.per_class, args.data_seed)
    write_idx(data, out / "synth-images.idx", out / "synth-labels.idx")
    write_config(out, args)
    log.info("wrote %d synthetic images to %s", len(data), out)
    return 0


def _train_report(out, weights, train_set, test_set, name="model.w"):
    save_weights(weights, out / name)
    metrics = {"train_accuracy": accuracy(weights, train_set), "test_accuracy": accuracy(weights, test_set),
               "below_floor": weights.below_floor}
    log.info("%s: train %.4f  test %.4f", name, metrics["train_accuracy"], metrics["test_accuracy"])
    return metrics


def cmd_train(args):
    _validate_data(args)
    train_set, test_set = load_data(args)
    cfg = model_config(args, train_set)
    out = out_dir(args)
    write_config(out, args, model_config=cfg.to_dict())
    weights = train(cfg, train_set, args.seed)
    metrics = _train_report(out, weights, train_set, test_set)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    return 0


def cmd_distill(args):
    _validate_data(args)
    train_set, test_set = load_data(args)
    cfg = model_config(args, train_set)
    out = out_dir(args)
    write_config(out, args, model_config=cfg.to_dict())
    student, teacher = distill(cfg, cfg, args.temperature, train_set, args.seed,
                               serve_temperature=args.serve_temperature)
    metrics = {"student": _train_report(out, student, train_set, test_set),
               "teacher": _train_report(out, teacher, train_set, test_set, "teacher.w")}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    return 0


def _load_model(args, test_set):
    weights = load_weights(args.model)
    if weights.config.num_features != test_set.num_features:
        raise UsageError(f"model expects {weights.config.num_features} inputs, data has {test_set.num_features}")
    return Classifier(weights)


def cmd_attack(args):
    _validate_data(args)
    ga = ga_params(args, args.seed)
    _, test_set = load_data(args)
    if not 0 <= args.image_index < len(test_set):
        raise UsageError(f"--image-index must lie in [0, {len(test_set)})")
    oracle = _load_model(args, test_set)
    x, true_label = test_set.images[args.image_index], int(test_set.labels[args.image_index])
    if args.target is None:
        spec = attack_spec(args, NONTARGETED, true_label, ga)
    else:
        spec = attack_spec(args, TARGETED, args.target, ga)
    try:
        spec.validate(x.size, oracle.num_classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = out_dir(args)
    write_config(out, args, ga=asdict(ga), attack=spec.to_dict())

    result = run_attack(oracle, x, spec, true_label)
    result.sample_index = args.image_index
    (out / "result.json").write_text(result.to_json() + "\n")
    if result.status == "skipped":
        log.error("sample %d is not classified correctly; attack skipped", args.image_index)
        return 1
    export_trend_csv(result.trend, out / "trend.csv")
    delta = perturbation(x, result.adversarial)
    write_raw(result.adversarial, out / "adversarial.f64")
    write_raw(delta, out / "delta.f64")
    write_image(result.adversarial, test_set.shape, out / ("adversarial" + (".pgm" if test_set.shape[2] == 1 else ".ppm")))
    write_delta_image(delta, test_set.shape, out / "delta.ppm")
    log.info("success=%s distance=%.6f predicted=%s queries=%d", result.success, result.distance,
             result.predicted_label, result.queries)
    return 0


def cmd_batch(args):
    _validate_data(args)
    if args.n < 1 or args.jobs < 1:
        raise UsageError("--n and --jobs must be positive")
    ga = ga_params(args, 0)
    _, test_set = load_data(args)
    oracle = _load_model(args, test_set)
    template = attack_spec(args, args.mode, 0, ga)
    try:
        template.validate(test_set.num_features, oracle.num_classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = out_dir(args)
    write_config(out, args, ga=asdict(ga), attack=template.to_dict())

    results = batch_attack(oracle, test_set, template, args.n, targeted_all_labels=args.mode == TARGETED,
                           seed=args.seed, jobs=args.jobs)
    with open(out / "results.jsonl", "w") as fh:
        for r in results:
            fh.write(r.to_json() + "\n")
    write_raw(np.stack([r.adversarial for r in results]), out / "adversarial.f64")
    summary = summarize(results, model=args.model_id or Path(args.model).stem)
    _write_summary(out, summary)
    log.info("%d attacks, success %.4f, mean L%s %s", summary.n, summary.success_prob, args.metric,
             summary.distance_mean)
    return 0


def _write_summary(out, summary, suffix=""):
    export_summary_csv(summary, out / f"summary{suffix}.csv")
    export_mean_trend_csv(summary, out / f"trend_mean{suffix}.csv")
    export_histogram_csv(summary, out / f"histogram{suffix}.csv")


def cmd_report(args):
    records = []
    for path in args.results:
        with open(path) as fh:
            records += [AttackResult.from_record(json.loads(line)) for line in fh if line.strip()]
    if not records:
        raise ShortfallError(0, 1)
    out = out_dir(args)
    write_config(out, args)
    summaries = []
    for mode in sorted({r.mode for r in records}):
        s = summarize([r for r in records if r.mode == mode], model=args.model_id, bins=args.bins)
        _write_summary(out, s, suffix=f"_{mode}")
        summaries.append(s)
    export_summary_csv(summaries, out / "summary.csv")
    return 0


COMMANDS = {"make-synth": cmd_make_synth, "train": cmd_train, "distill": cmd_distill,
            "attack": cmd_attack, "batch": cmd_batch, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"evoattack: error: {exc}", file=sys.stderr)
        return 2
    except (ShortfallError, DatasetFormatError, WeightsFormatError, TrainingDiverged, FileNotFoundError) as exc:
        print(f"evoattack: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
