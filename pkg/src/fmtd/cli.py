"""Command-line front end.

Subcommands: train-base, fork, attack, evaluate, sweep, bench.  Every
command takes --config/--seed/--out plus targeted overrides, writes its
artifacts plus a resolved-config snapshot into --out, and never mutates its
inputs.  Exit codes: 0 success, 2 bad configuration, 3 I/O error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .attack import AttackSuite, build_attack_suite, load_suite, save_suite
from .bench import bench_inference
from .config import (
    ConfigError,
    DatasetNotFoundError,
    RunConfig,
    load_config,
    load_datasets,
    write_resolved,
)
from .data import IdxError
from .defense import DefenseConfigError
from .evaluation import (
    SweepGrid,
    evaluate,
    oracle_for,
    reports_to_csv,
    reports_to_json,
    sweep,
)
from .forkgen import ForkConfig, generate_ensemble, load_ensemble, save_ensemble
from .kvformat import KvError
from .nncore import (
    ModelFormatError,
    StopRule,
    TrainingDivergedError,
    file_hash,
    init_params,
    load_model,
    model_hash,
    preset,
    save_model,
    train,
)
from .rng import derive_seed

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _parse_overrides(args: argparse.Namespace) -> dict[str, str]:
    """Map CLI flags onto the flat config keys; flags win over the config file."""
    mapping = {
        "seed": "seed",
        "arch": "arch",
        "data": "data.kind",
        "mnist_dir": "data.mnist_dir",
        "contrast": "data.contrast",
        "classes": "data.classes",
        "per_class": "data.per_class",
        "image_side": "data.image_side",
        "validation_count": "data.validation_count",
        "epochs": "train.max_epochs",
        "batch_size": "train.batch_size",
        "learning_rate": "train.learning_rate",
        "stop": "train.stop_rule",
        "n": "fork.n",
        "w": "fork.w",
        "kappa": "attack.kappa",
        "kind": "attack.kind",
        "sample_count": "attack.sample_count",
        "iterations": "attack.inner_iterations",
        "t": "defense.t",
        "ts": "defense.ts",
        "mode": "defense.mode",
        "fusion": "defense.fusion",
    }
    overrides: dict[str, str] = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    return overrides


def _config_of(args: argparse.Namespace) -> RunConfig:
    return load_config(getattr(args, "config", None), _parse_overrides(args))


def _arch_for(config: RunConfig):
    side = 28 if config.data.kind == "mnist" else config.data.image_side
    classes = 10 if config.data.kind == "mnist" else config.data.classes
    return preset(config.arch, input_side=side, classes=classes)


def cmd_train_base(args: argparse.Namespace) -> int:
    config = _config_of(args)
    out = Path(args.out)
    train_set, val_set, _ = load_datasets(config)
    model = init_params(_arch_for(config), derive_seed(config.seed, "base-init"), provenance="base")
    best, history = train(
        model, train_set, val_set, config.train, StopRule(config.stop_rule),
        seed=derive_seed(config.seed, "base-train"),
    )
    out.mkdir(parents=True, exist_ok=True)
    save_model(best, out / "base.fmtd")
    (out / "history.csv").write_text("\n".join(history.csv_rows()) + "\n", encoding="utf-8")
    write_resolved(config, out, {"train_set": train_set.name, "val_accuracy": f"{history.best_val_accuracy:.6f}"})
    print(f"trained {out / 'base.fmtd'} val_accuracy={history.best_val_accuracy:.4f} "
          f"epochs={history.epochs_run()} ({history.stop_reason})")
    return EXIT_OK


def cmd_fork(args: argparse.Namespace) -> int:
    config = _config_of(args)
    base = load_model(args.base)
    train_set, val_set, _ = load_datasets(config)
    ensemble = generate_ensemble(base, config.fork_config(), train_set, val_set)
    save_ensemble(ensemble, args.out)
    write_resolved(config, args.out, {"base": file_hash(args.base)})
    accs = ensemble.per_model_val_accuracy
    print(f"generated {ensemble.n} forks in {ensemble.wall_time_s:.1f}s "
          f"val_accuracy=[{min(accs):.4f}, {max(accs):.4f}]")
    return EXIT_OK


def cmd_attack(args: argparse.Namespace) -> int:
    config = _config_of(args)
    model = load_model(args.model)
    _, _, test_set = load_datasets(config)
    suite = build_attack_suite(
        model, test_set, config.attack_kind, config.attack,
        seed=derive_seed(config.seed, "attack"), sample_count=config.attack_sample_count,
    )
    save_suite(suite, args.out)
    write_resolved(config, args.out, {"model": file_hash(args.model)})
    converged = sum(ex.converged for ex in suite.examples)
    print(f"built {config.attack_kind} suite: {len(suite.examples)} examples, "
          f"{converged} converged")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _config_of(args)
    ensemble = load_ensemble(args.ensemble)
    suite = load_suite(args.suite) if args.suite else None
    _, _, test_set = load_datasets(config)
    oracle = oracle_for(test_set, suite) if config.defense.mode == "human-in-the-loop" else None
    report = evaluate(
        ensemble, test_set, suite, config.defense, oracle,
        fusion=config.fusion, seed=config.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(reports_to_csv([report]), encoding="utf-8")
    (out / "report.json").write_text(reports_to_json([report]), encoding="utf-8")
    write_resolved(config, out, {
        "ensemble": ensemble.base_hash,
        "suite": suite.base_model_hash if suite else "none",
    })
    print(f"p1={report.p1:.4f} p7={report.p7:.4f} p13={report.p13:.4f} p15={report.p15:.4f}")
    return EXIT_OK


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _config_of(args)
    base = load_model(args.base)
    suite = load_suite(args.suite)
    train_set, val_set, test_set = load_datasets(config)
    grid = SweepGrid(
        n_values=_int_list(args.n_values),
        w_values=_float_list(args.w_values),
        thresholds=_float_list(args.t_values),
        modes=tuple(args.modes.split(",")),
        seeds=_int_list(args.seeds),
        fusion=config.fusion,
    )
    reports = sweep(base, grid, train_set, val_set, test_set, suite, fork_hyper=config.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(reports_to_csv(reports), encoding="utf-8")
    (out / "sweep.json").write_text(reports_to_json(reports), encoding="utf-8")
    write_resolved(config, out, {"base": file_hash(args.base), "suite": suite.base_model_hash})
    print(f"swept {len(reports)} cells -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    config = _config_of(args)
    ensemble = load_ensemble(args.ensemble)
    _, _, test_set = load_datasets(config)
    modes: list[tuple[str, float | None]] = []
    for mode in args.bench_modes.split(","):
        if mode == "full":
            modes.append(("full", None))
        elif mode == "serial":
            modes.extend(("serial", ts) for ts in _float_list(args.ts_values))
        else:
            raise ConfigError(f"unknown bench mode {mode!r}")
    report = bench_inference(
        ensemble, test_set, list(_int_list(args.batch_sizes)), modes,
        repetitions=args.repetitions, seed=config.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(report.csv(), encoding="utf-8")
    write_resolved(config, out, {"ensemble": ensemble.base_hash})
    for ts, ratio in sorted(report.cost_ratio.items()):
        print(f"serial ts={ts:g}: cost ratio {ratio:.3f}")
    print(f"wrote {out / 'bench.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmtd", description=__doc__)
    parser.add_argument("--version", action="version", version=f"fmtd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="run seed (overrides config)")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--data", choices=["synthetic", "mnist"], help="dataset kind")
        p.add_argument("--mnist-dir", dest="mnist_dir", help="directory with the four MNIST IDX files")
        p.add_argument("--contrast", type=float, help="synthetic template contrast")
        p.add_argument("--classes", type=int, help="synthetic class count")
        p.add_argument("--per-class", dest="per_class", type=int, help="synthetic samples per class")
        p.add_argument("--image-side", dest="image_side", type=int, help="synthetic image side")
        p.add_argument("--validation-count", dest="validation_count", type=int)

    def train_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--epochs", type=int, help="epoch budget")
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--stop", choices=["plateau", "fixed"], help="stop rule")

    p = sub.add_parser("train-base", help="train the base classifier")
    common(p)
    train_flags(p)
    p.add_argument("--arch", choices=["cnn-a", "cnn-a-small"])
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("fork", help="generate the fork-model ensemble")
    common(p)
    train_flags(p)
    p.add_argument("--base", required=True, help="base model file")
    p.add_argument("--n", type=int, help="ensemble size")
    p.add_argument("--w", type=float, help="perturbation intensity")
    p.set_defaults(func=cmd_fork)

    p = sub.add_parser("attack", help="build an adversarial-example suite")
    common(p)
    p.add_argument("--model", required=True, help="model file to attack")
    p.add_argument("--kind", choices=["targeted-grid", "non-targeted"])
    p.add_argument("--kappa", type=float, help="attack strength")
    p.add_argument("--sample-count", dest="sample_count", type=int, help="non-targeted basis count")
    p.add_argument("--iterations", type=int, help="inner gradient-descent iterations")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="run the defense metrics over a suite")
    common(p)
    p.add_argument("--ensemble", required=True, help="ensemble directory")
    p.add_argument("--suite", help="attack-suite directory; omit for clean-side metrics only")
    p.add_argument("--t", type=float, help="full-fusion detection threshold")
    p.add_argument("--ts", type=float, help="serial detection threshold")
    p.add_argument("--mode", choices=["autonomous", "human-in-the-loop"])
    p.add_argument("--fusion", choices=["full", "serial"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid over N, w, threshold, mode, seeds")
    common(p)
    train_flags(p)
    p.add_argument("--base", required=True, help="base model file")
    p.add_argument("--suite", required=True, help="attack-suite directory")
    p.add_argument("--n-values", dest="n_values", default="3,6,10,20")
    p.add_argument("--w-values", dest="w_values", default="0.2")
    p.add_argument("--t-values", dest="t_values", default="1.0")
    p.add_argument("--modes", default="autonomous")
    p.add_argument("--seeds", default="0")
    p.add_argument("--fusion", choices=["full", "serial"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="inference-cost measurement")
    common(p)
    p.add_argument("--ensemble", required=True, help="ensemble directory")
    p.add_argument("--batch-sizes", dest="batch_sizes", default="1,16")
    p.add_argument("--bench-modes", dest="bench_modes", default="full,serial")
    p.add_argument("--ts-values", dest="ts_values", default="0.5,1.0")
    p.add_argument("--repetitions", type=int, default=100)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DefenseConfigError, KvError) as exc:
        print(f"fmtd: bad configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetNotFoundError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"fmtd: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ModelFormatError, IdxError, OSError) as exc:
        print(f"fmtd: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDivergedError as exc:
        print(f"fmtd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"fmtd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
