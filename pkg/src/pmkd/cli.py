"""Command-line entry point.

Every training command resolves a RunConfig (file + flag overrides),
creates a fresh run directory holding the resolved config, a metrics CSV
(one epoch per line) and checkpoints, and is bit-reproducible for a
fixed config and seed.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, load_config
from .data import AugmentPolicy, DatasetContainer, default_policy, import_cifar
from .data import normalize_images
from .distill import (
    Ensemble,
    evaluate,
    run_phase,
    run_pipeline,
    supervised_config,
    transplant_weights,
)
from .models import ArchSpec, build, init_weights, param_count
from .stream import StreamState, equivalence_check, plan_stream

_METRICS_HEADER = "phase,epoch,lr,fkd,lkd,ce,total,test_acc\n"
_DEFAULT_RHOS = (0.01, 0.1, 0.5, 1.0, 2.0, 5.0)

_OVERRIDE_FLAGS = {
    "arch": str, "num_classes": int, "filter_mode": str, "surgery": str,
    "dataset_kind": str, "train_data": str, "test_data": str,
    "epochs": int, "batch_size": int, "rho": float, "tau": float,
    "alpha": float, "base_lr": float, "pacemaker_mode": str, "augment": str,
}


def _add_common(p: argparse.ArgumentParser, training: bool) -> None:
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    for key, typ in _OVERRIDE_FLAGS.items():
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"ov_{key}",
                       type=typ, default=None)
    p.add_argument("--out", help="run directory (must not exist)")
    if training:
        p.add_argument("--seed", type=int, required=True,
                       help="master seed (mandatory for training)")
        p.add_argument("--repeat", type=int, default=1, metavar="K",
                       help="run with seeds seed..seed+K-1 and summarize")
        p.add_argument("--repeat-same-seed", action="store_true",
                       help="repeat with the identical seed instead")
    else:
        p.add_argument("--seed", type=int, default=0)


def _resolve(args) -> RunConfig:
    overrides = {}
    for kv in args.set:
        if "=" not in kv:
            raise ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in _OVERRIDE_FLAGS:
        val = getattr(args, f"ov_{key}", None)
        if val is not None:
            overrides[key] = val
    cfg = load_config(args.config, overrides)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _make_run_dir(args, command: str) -> Path:
    if args.out:
        run_dir = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path("runs") / f"{command}-s{args.seed}-{stamp}"
    if run_dir.exists():
        raise FileExistsError(f"run directory {run_dir} already exists; "
                              f"refusing to overwrite")
    run_dir.mkdir(parents=True)
    return run_dir


def _write_resolved(run_dir: Path, cfg: RunConfig) -> None:
    (run_dir / "config.resolved").write_text(cfg.to_text())


def _metrics_writer(path: Path):
    path.write_text(_METRICS_HEADER)

    def write(rec):
        with path.open("a") as fh:
            fh.write(f"{rec.phase},{rec.epoch},{rec.lr:.8g},{rec.fkd:.8g},"
                     f"{rec.lkd:.8g},{rec.ce:.8g},{rec.total:.8g},"
                     f"{rec.test_acc:.6f}\n")

    return write


def _load_datasets(cfg: RunConfig):
    if not cfg.train_data or not cfg.test_data:
        raise ConfigError("train_data and test_data paths are required")
    kind = cfg.dataset_kind if cfg.dataset_kind != "custom" else None
    train = DatasetContainer.load(cfg.train_data, kind=kind)
    test = DatasetContainer.load(cfg.test_data, kind=kind)
    if cfg.augment == "auto":
        policy = default_policy(cfg.dataset_kind)
    else:
        policy = AugmentPolicy(enabled=cfg.augment == "on")
    return train, test, policy


def _load_model(path, cfg: RunConfig, mode: str):
    model = build(cfg.arch_spec(), mode, cfg.surgery)
    ckpt.load_checkpoint(path, model)
    return model


def _load_pacemaker(path, cfg: RunConfig) -> Ensemble:
    items = ckpt.read_checkpoint_items(path)
    prefixes = {n.split(".", 1)[0] for n, _ in items}
    dcfg = cfg.distill_config()
    col = build(cfg.arch_spec(), "column", cfg.surgery)
    row = None
    if "row" in prefixes:
        row = build(cfg.arch_spec(), "row_student", cfg.surgery)
        mode = "ensemble"
    else:
        mode = "column_only"
    pm = Ensemble(row, col, mode, dcfg.ensemble_average)
    expected = pm.state_items()
    if len(items) != len(expected):
        raise ckpt.MismatchError(f"{path}: pacemaker checkpoint holds "
                                 f"{len(items)} tensors, expected {len(expected)}")
    for (gn, ga), (en, ea) in zip(items, expected):
        if gn != en or ga.shape != ea.shape:
            raise ckpt.MismatchError(f"{path}: tensor {gn!r} does not match "
                                     f"expected {en!r} {ea.shape}")
        ea[...] = ga
    return pm


def _repeat_seeds(args) -> list[int]:
    if args.repeat_same_seed:
        return [args.seed] * max(args.repeat, 1)
    return [args.seed + i for i in range(max(args.repeat, 1))]


def _run_repeated(args, run_dir: Path, runner) -> None:
    """seed-repeat protocol: per-seed accuracy, mean and signed deviations."""
    seeds = _repeat_seeds(args)
    results = []
    summary = run_dir / "seeds_summary.txt"
    try:
        for i, seed in enumerate(seeds):
            sub = run_dir if len(seeds) == 1 else run_dir / f"run{i}_seed{seed}"
            if sub != run_dir:
                sub.mkdir()
            acc = runner(seed, sub)
            results.append((seed, acc))
            print(f"seed {seed}: accuracy {acc:.6f}")
    finally:
        if results:
            accs = np.array([a for _, a in results])
            mean = accs.mean()
            lines = [f"seed {s} accuracy {a:.6f} deviation {a - mean:+.6f}"
                     for s, a in results]
            lines.append(f"mean {mean:.6f} over {len(results)} runs")
            summary.write_text("\n".join(lines) + "\n")
            if len(results) > 1:
                print(f"mean {mean:.6f}  deviations "
                      + " ".join(f"{a - mean:+.4f}" for _, a in results))


# ---------------------------------------------------------------------------
# commands

def cmd_import_dataset(args) -> int:
    train, test = import_cifar(args.variant, args.train_file, args.test_file)
    train.save(args.out_train)
    test.save(args.out_test)
    print(f"imported {args.variant}: train {train.count} records, "
          f"test {test.count} records, {train.num_classes} classes")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _resolve(args)
    train, test, policy = _load_datasets(cfg)
    run_dir = _make_run_dir(args, "train-teacher")
    _write_resolved(run_dir, cfg)

    def runner(seed, sub: Path) -> float:
        sub.mkdir(exist_ok=True)
        model = init_weights(build(cfg.arch_spec(), cfg.filter_mode,
                                   cfg.surgery), seed)
        sup = supervised_config(cfg.distill_config())
        on_epoch = _metrics_writer(sub / "metrics.csv")
        report = run_phase(None, model, train, test, sup, phase_id=0,
                           seed=seed, policy=policy, on_epoch=on_epoch)
        name = "teacher.pmkd" if cfg.filter_mode == "teacher" \
            else f"baseline_{cfg.filter_mode}.pmkd"
        ckpt.save_checkpoint(model, sub / name)
        return report.final_test_acc if report.records \
            else evaluate(model, test)

    _run_repeated(args, run_dir, runner)
    print(f"run directory: {run_dir}")
    return 0


def cmd_run_pipeline(args) -> int:
    cfg = _resolve(args)
    train, test, policy = _load_datasets(cfg)
    run_dir = _make_run_dir(args, "run-pipeline")
    _write_resolved(run_dir, cfg)
    teacher = _load_model(args.teacher, cfg, "teacher")

    def runner(seed, sub: Path) -> float:
        sub.mkdir(exist_ok=True)
        on_epoch = _metrics_writer(sub / "metrics.csv")
        student, reports = run_pipeline(
            cfg.arch_spec(), teacher, train, test, cfg.distill_config(),
            seed=seed, out_dir=sub, policy=policy, on_epoch=on_epoch,
            surgery=cfg.surgery)
        for r in reports:
            tail = f"{r.final_test_acc:.6f}" if r.records else "n/a"
            print(f"phase {r.phase}: final test accuracy {tail}")
        return reports[-1].final_test_acc if reports[-1].records \
            else evaluate(student, test)

    _run_repeated(args, run_dir, runner)
    print(f"run directory: {run_dir}")
    return 0


def cmd_run_phase(args) -> int:
    cfg = _resolve(args)
    train, test, policy = _load_datasets(cfg)
    run_dir = _make_run_dir(args, f"run-phase{args.phase}")
    _write_resolved(run_dir, cfg)
    dcfg = cfg.distill_config()
    spec = cfg.arch_spec()

    def runner(seed, sub: Path) -> float:
        sub.mkdir(exist_ok=True)
        on_epoch = _metrics_writer(sub / "metrics.csv")
        if args.phase == 1:
            teacher = _load_model(args.teacher, cfg, "teacher")
            row = None
            if dcfg.pacemaker_mode == "ensemble":
                row = init_weights(build(spec, "row_student", cfg.surgery),
                                   seed + 1)
            col = init_weights(build(spec, "column", cfg.surgery), seed + 2)
            pm = Ensemble(row, col, dcfg.pacemaker_mode, dcfg.ensemble_average)
            report = run_phase(teacher, pm, train, test, dcfg, 1, seed,
                               policy, on_epoch)
            ckpt.save_checkpoint(pm, sub / "phase1_pacemaker.pmkd")
            trained = pm
        elif args.phase == 2:
            pm = _load_pacemaker(args.pacemaker, cfg)
            student = init_weights(build(spec, "row_student", cfg.surgery),
                                   seed + 3)
            report = run_phase(pm, student, train, test, dcfg, 2, seed,
                               policy, on_epoch)
            ckpt.save_checkpoint(student, sub / "phase2_student.pmkd")
            trained = student
        else:
            teacher = _load_model(args.teacher, cfg, "teacher")
            student = build(spec, "row_student", cfg.surgery)
            if args.student:
                ckpt.load_checkpoint(args.student, student)
            elif args.pacemaker:
                pm = _load_pacemaker(args.pacemaker, cfg)
                if pm.row is None:
                    raise ConfigError(
                        "phase 3 needs --student when the pacemaker has no "
                        "row member (column-only mode)")
                transplant_weights(pm.row, student)
            else:
                raise ConfigError("phase 3 needs --pacemaker (transplant) or "
                                  "--student (resume)")
            report = run_phase(teacher, student, train, test, dcfg, 3, seed,
                               policy, on_epoch)
            ckpt.save_checkpoint(student, sub / "phase3_student.pmkd")
            trained = student
        return report.final_test_acc if report.records \
            else evaluate(trained, test)

    _run_repeated(args, run_dir, runner)
    print(f"run directory: {run_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    kind = cfg.dataset_kind if cfg.dataset_kind != "custom" else None
    data = DatasetContainer.load(args.data, kind=kind)
    model = _load_model(args.checkpoint, cfg, cfg.filter_mode)
    acc = evaluate(model, data, batch_size=cfg.batch_size)
    print(f"{acc:.6f}")
    return 0


def cmd_sweep_rho(args) -> int:
    cfg = _resolve(args)
    train, test, policy = _load_datasets(cfg)
    run_dir = _make_run_dir(args, "sweep-rho")
    _write_resolved(run_dir, cfg)
    teacher = _load_model(args.teacher, cfg, "teacher")
    rhos = [float(r) for r in args.rhos.split(",")] if args.rhos \
        else list(_DEFAULT_RHOS)
    results = []
    for rho in rhos:
        sub = run_dir / f"rho_{rho:g}"
        sub.mkdir()
        dcfg = cfg.distill_config()
        dcfg.rho = rho
        dcfg.validate()
        on_epoch = _metrics_writer(sub / "metrics.csv")
        student, reports = run_pipeline(cfg.arch_spec(), teacher, train, test,
                                        dcfg, seed=args.seed, out_dir=sub,
                                        policy=policy, on_epoch=on_epoch,
                                        surgery=cfg.surgery)
        acc = reports[-1].final_test_acc if reports[-1].records \
            else evaluate(student, test)
        results.append((rho, acc))
        print(f"rho {rho:g}: final student accuracy {acc:.6f}")
    summary = "\n".join(f"rho {r:g} accuracy {a:.6f}" for r, a in results)
    (run_dir / "sweep_summary.txt").write_text(summary + "\n")
    print(f"run directory: {run_dir}")
    return 0


def cmd_param_report(args) -> int:
    cfg = _resolve(args)
    spec = cfg.arch_spec()
    teacher = build(spec, "teacher", cfg.surgery)
    student = build(spec, "row_student", cfg.surgery)
    ct = param_count(teacher, convs_only=True)
    cs = param_count(student, convs_only=True)
    wt = param_count(teacher)
    ws = param_count(student)
    print(f"architecture {spec.name} ({spec.num_classes} classes)")
    print(f"swappable conv weights: teacher {ct}  student {cs}  "
          f"ratio {cs / ct:.10f}")
    print(f"whole model:            teacher {wt}  student {ws}  "
          f"ratio {ws / wt:.10f}")
    return 0


def cmd_stream_infer(args) -> int:
    cfg = _resolve(args)
    model = _load_model(args.checkpoint, cfg, "row_student")
    stats = DatasetContainer.load(args.stats)
    c, h, w = stats.channels, stats.height, stats.width
    plan = plan_stream(model, (h, w))
    state = StreamState(plan)
    src = sys.stdin.buffer if args.input == "-" else open(args.input, "rb")
    logits = None
    try:
        for _ in range(h):
            raw = src.read(c * w)
            if len(raw) != c * w:
                raise IOError(f"short read: expected {c * w} bytes per row")
            row_u8 = np.frombuffer(raw, np.uint8).reshape(1, c, 1, w)
            row = normalize_images(row_u8, stats.mean, stats.std)[0, :, 0, :]
            _, logits = state.push_row(row)
    finally:
        if src is not sys.stdin.buffer:
            src.close()
    for v in logits:
        print(f"{v:.6f}")
    return 0


def cmd_equiv_check(args) -> int:
    cfg = _resolve(args)
    model = _load_model(args.checkpoint, cfg, "row_student")
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for t in range(args.trials):
        img = rng.standard_normal((3, args.height, args.width)
                                  ).astype(np.float32)
        diff = equivalence_check(model, img)
        worst = max(worst, diff)
        print(f"trial {t}: max abs logit diff {diff:.3e}")
    ok = worst < args.tolerance
    print(f"worst {worst:.3e} {'<' if ok else '>='} tolerance "
          f"{args.tolerance:g} -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pmkd",
        description="pacemaker distillation training and single-row "
                    "streaming inference")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("import-dataset", help="convert raw CIFAR binaries")
    sp.add_argument("--variant", choices=("cifar10", "cifar100"), required=True)
    sp.add_argument("--train-file", action="append", required=True)
    sp.add_argument("--test-file", action="append", required=True)
    sp.add_argument("--out-train", required=True)
    sp.add_argument("--out-test", required=True)
    sp.set_defaults(fn=cmd_import_dataset)

    sp = sub.add_parser("train-teacher", help="supervised training "
                                              "(teacher or baselines)")
    _add_common(sp, training=True)
    sp.set_defaults(fn=cmd_train_teacher)

    sp = sub.add_parser("run-pipeline", help="the three-phase distillation")
    _add_common(sp, training=True)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp.set_defaults(fn=cmd_run_pipeline)

    sp = sub.add_parser("run-phase", help="one distillation phase")
    sp.add_argument("phase", type=int, choices=(1, 2, 3))
    _add_common(sp, training=True)
    sp.add_argument("--teacher", help="teacher checkpoint (phases 1 and 3)")
    sp.add_argument("--pacemaker", help="phase-1 pacemaker checkpoint")
    sp.add_argument("--student", help="student checkpoint to resume (phase 3)")
    sp.set_defaults(fn=cmd_run_phase)

    sp = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    _add_common(sp, training=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="dataset container")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("sweep-rho", help="pipeline across feature-loss weights")
    _add_common(sp, training=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--rhos", help="comma list (default 0.01,0.1,0.5,1,2,5)")
    sp.set_defaults(fn=cmd_sweep_rho)

    sp = sub.add_parser("param-report", help="teacher/student parameter ratio")
    _add_common(sp, training=False)
    sp.set_defaults(fn=cmd_param_report)

    sp = sub.add_parser("stream-infer", help="row-by-row inference on raw "
                                             "8-bit rows")
    _add_common(sp, training=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--stats", required=True,
                    help="dataset container supplying shape and mean/std")
    sp.add_argument("--input", default="-", help="row bytes file, or - for stdin")
    sp.set_defaults(fn=cmd_stream_infer)

    sp = sub.add_parser("equiv-check", help="stream vs batch logits")
    _add_common(sp, training=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--trials", type=int, default=10)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--height", type=int, default=32)
    sp.add_argument("--width", type=int, default=32)
    sp.set_defaults(fn=cmd_equiv_check)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # one-line diagnostic, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
