"""Command-line harness: data generation, training, evaluation, checks,
cost accounting, heatmap export, and the experiment recipes.

Exit codes: 0 success, 1 validation error (bad flags, bad config, missing
or malformed files), 2 runtime failure (diverged training, failed
finite-difference check).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import gradcheck as gc
from .config import DEFAULTS, canonical_lines, load_config, student_config, \
    teacher_config, train_settings
from .data import CLASS_NAMES, generate_split, read_dataset, to_float, write_dataset
from .distill import TeacherTrace, predict_logits, settings_fingerprint, train_online
from .errors import ConfigError, FsceError, TrainingDivergedError
from .metrics import accuracy, confusion_matrix, grad_cam, silhouette_score, write_pgm
from .models import PRESETS, build_model, count_flops, count_params, \
    get_preset, load_checkpoint
from .tensor import Tensor, no_grad

# id, frequency, spatial, kd: the 2x2x2 grid in its canonical row order
ABLATION_ROWS = (
    (1, 0, 0, 0),
    (2, 1, 0, 0),
    (3, 0, 1, 0),
    (4, 0, 0, 1),
    (5, 1, 1, 0),
    (6, 1, 0, 1),
    (7, 0, 1, 1),
    (8, 1, 1, 1),
)
SWEEP_TEMPERATURES = (1.0, 3.0, 5.0, 7.0, 9.0)
SWEEP_ALPHAS = (0.1, 0.3, 0.5, 0.7, 0.9)
SWEEP_INSERTIONS = ("pre", "s1", "s2", "s4")


class _Parser(argparse.ArgumentParser):
    """argparse that reports flag errors through the normal exit-1 path."""

    def error(self, message):
        raise ConfigError(message)


def _fmt_acc(v: float) -> str:
    return format(float(v), ".10g")


def _class_names(k: int):
    if k <= len(CLASS_NAMES):
        return CLASS_NAMES[:k]
    return tuple(f"c{i}" for i in range(k))


# ------------------------------------------------------------------ gen-data

def cmd_gen_data(args) -> int:
    images, labels = generate_split(args.seed, args.part, args.per_class,
                                    args.classes, args.size, args.looks)
    write_dataset(args.out, images, labels, args.classes)
    print(f"wrote {images.shape[0]} images ({args.classes} classes, "
          f"{args.size}x{args.size}, {args.looks:g} looks, part={args.part}) "
          f"to {args.out}")
    return 0


# --------------------------------------------------------------------- train

def _load_values(config_path, seed_override=None):
    values = load_config(config_path) if config_path else dict(DEFAULTS)
    if seed_override is not None:
        values = dict(values)
        values["seed"] = seed_override
    return values


def _echo_config(values):
    print("config:")
    for line in canonical_lines(values):
        print(f"  {line}")


def cmd_train(args) -> int:
    values = _load_values(args.config, args.seed)
    _echo_config(values)
    s_cfg = student_config(values)
    t_cfg = teacher_config(values)
    settings = train_settings(values)
    tr_images, tr_labels, k = read_dataset(args.data_train)
    te_images, te_labels, k2 = read_dataset(args.data_test)
    if k != s_cfg.num_classes or k2 != s_cfg.num_classes:
        raise ConfigError(f"model has {s_cfg.num_classes} classes, datasets "
                          f"have {k} (train) and {k2} (test)")
    trace = TeacherTrace.load(args.trace) if args.trace else None
    result = train_online(s_cfg, t_cfg, tr_images, tr_labels,
                          te_images, te_labels, settings=settings,
                          seed=values["seed"], csv_path=args.log,
                          ckpt_path=args.ckpt_out, teacher_trace=trace,
                          record_trace=bool(args.record_trace))
    if args.record_trace:
        result.trace.save(args.record_trace)
        print(f"teacher trace -> {args.record_trace}")
    print(f"final train accuracy {_fmt_acc(result.final_train_acc)}")
    print(f"final test accuracy {_fmt_acc(result.final_test_acc)}")
    return 0


# ---------------------------------------------------------------------- eval

def _features_batched(model, images, batch_size=64):
    was_training = model.training
    model.eval()
    out = []
    try:
        x = to_float(images)
        with no_grad():
            for i in range(0, x.shape[0], batch_size):
                out.append(model.features(
                    Tensor(x[i:i + batch_size][:, None], constant=True)).data.copy())
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0)


def cmd_eval(args) -> int:
    model, cfg, _seed = load_checkpoint(args.ckpt)
    images, labels, k = read_dataset(args.data)
    if k != cfg.num_classes:
        raise ConfigError(f"checkpoint has {cfg.num_classes} classes, "
                          f"dataset has {k}")
    logits = predict_logits(model, images, args.batch_size)
    pred = logits.argmax(axis=1)
    acc = accuracy(pred, labels)
    hits = int((pred == labels).sum())
    print(f"accuracy {_fmt_acc(acc)} ({hits}/{labels.shape[0]})")
    names = _class_names(k)
    cm = confusion_matrix(pred, labels, k)
    width = max(6, max(len(n) for n in names) + 1)
    print("confusion (rows = true, cols = predicted):")
    print(" " * width + "".join(f"{n:>{width}}" for n in names))
    for i, name in enumerate(names):
        print(f"{name:>{width}}" + "".join(f"{v:>{width}d}" for v in cm[i]))
    if args.silhouette:
        feats = _features_batched(model, images, args.batch_size)
        print(f"silhouette {_fmt_acc(silhouette_score(feats, labels))}")
    return 0


# ----------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    names = args.cases.split(",") if args.cases else None
    results = gc.run_all(names, step=args.step)
    name_w = max(len(r["name"]) for r in results) + 2
    print(f"{'case':<{name_w}}{'rel err':>12}{'threshold':>12}  status")
    for r in results:
        status = "ok" if r["ok"] else "FAIL"
        print(f"{r['name']:<{name_w}}{r['rel_err']:>12.3e}"
              f"{r['threshold']:>12.0e}  {status}")
    bad = [r for r in results if not r["ok"]]
    if bad:
        print(f"{len(bad)} of {len(results)} case(s) above threshold",
              file=sys.stderr)
        return 2
    print(f"all {len(results)} cases within threshold")
    return 0


# --------------------------------------------------------------------- count

def cmd_count(args) -> int:
    presets = [args.preset] if args.preset else list(PRESETS)
    print("convention: 1 multiply-add = 2 FLOPs; conv = 2*Cout*Hout*Wout*"
          "(Cin/groups)*kh*kw (+ Cout*Hout*Wout if biased); BN 2/element; "
          "activation 1/element; pool/add/scale 1 per element; "
          "wavelet analysis/synthesis 8*C*H*W each")
    print(f"input 1x{args.size}x{args.size}")
    print(f"{'model':<24}{'params':>12}{'flops':>16}")
    for name in presets:
        base = get_preset(name)
        for label, cfg in ((name, base),
                           (f"{name}+dsaf@s1",
                            dataclasses.replace(base, insertion="s1"))):
            model = build_model(cfg, seed=0)
            p = count_params(model)
            f = count_flops(model, (1, args.size, args.size))
            print(f"{label:<24}{p:>12}{f:>16}")
    return 0


# ------------------------------------------------------------------- gradcam

def cmd_gradcam(args) -> int:
    model, cfg, _seed = load_checkpoint(args.ckpt)
    images, labels, k = read_dataset(args.data)
    if k != cfg.num_classes:
        raise ConfigError(f"checkpoint has {cfg.num_classes} classes, "
                          f"dataset has {k}")
    tap = args.tap or (cfg.insertion if cfg.insertion != "none" else "s1")
    os.makedirs(args.out, exist_ok=True)
    names = _class_names(k)
    n = min(args.count, images.shape[0])
    for i in range(n):
        label = int(labels[i])
        heat = grad_cam(model, images[i], label, tap)
        write_pgm(os.path.join(args.out, f"input_{i:03d}.pgm"), images[i])
        write_pgm(os.path.join(args.out, f"cam_{i:03d}_{names[label]}.pgm"), heat)
    print(f"wrote {n} input/heatmap pairs (tap {tap}) to {args.out}")
    return 0


# ------------------------------------------------------------------- recipes

def _add_benchmark_flags(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="base config file (defaults otherwise)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated run seeds")
    p.add_argument("--epochs", type=int, default=None,
                   help="override epochs (default 40, or the config value)")
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--looks", type=float, default=1.0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--trace-dir", default=None,
                   help="teacher trace cache (default OUT/traces)")


def _benchmark_setup(args):
    values = dict(load_config(args.config) if args.config else DEFAULTS)
    if args.epochs is not None:
        values["train.epochs"] = args.epochs
    elif not args.config:
        values["train.epochs"] = 40
    values["model.num_classes"] = args.classes
    seeds = [int(s) for s in args.seeds.split(",")]
    if not seeds:
        raise ConfigError("need at least one seed")
    tr = generate_split(args.data_seed, "train", args.per_class, args.classes,
                        args.size, args.looks)
    te = generate_split(args.data_seed, "test", args.test_per_class,
                        args.classes, args.size, args.looks)
    os.makedirs(args.out, exist_ok=True)
    trace_dir = args.trace_dir or os.path.join(args.out, "traces")
    os.makedirs(trace_dir, exist_ok=True)
    return values, seeds, tr, te, trace_dir


def _run_recipe_row(values, seed, tr, te, trace_dir):
    """One training run; the teacher trajectory is cached on disk and
    replayed for every run that shares its fingerprint. Recipes only need
    the final accuracy, so the intermediate test-set passes are skipped."""
    settings = dataclasses.replace(train_settings(values), eval_every=0)
    s_cfg = student_config(values)
    t_cfg = teacher_config(values)
    trace = None
    record = False
    trace_path = None
    if t_cfg is not None:
        fp = settings_fingerprint(t_cfg, seed, settings, tr[0], tr[1])
        trace_path = os.path.join(trace_dir, f"teacher-{fp[:16]}.npz")
        if os.path.exists(trace_path):
            trace = TeacherTrace.load(trace_path)
        else:
            record = True
    result = train_online(s_cfg, t_cfg, tr[0], tr[1], te[0], te[1],
                          settings=settings, seed=seed,
                          teacher_trace=trace, record_trace=record)
    if record:
        result.trace.save(trace_path)
    return result.final_test_acc


def _write_summary(path, header_cols, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header_cols) + "\n")
        for row in rows:
            fh.write(",".join(str(v) if isinstance(v, (int, str)) else _fmt_acc(v)
                              for v in row) + "\n")


def cmd_ablate(args) -> int:
    values, seeds, tr, te, trace_dir = _benchmark_setup(args)
    rows = []
    for rid, freq, spatial, kd in ABLATION_ROWS:
        v = dict(values)
        v["kd.enabled"] = bool(kd)
        if freq and spatial:
            v["model.branches"] = "both"
        elif freq:
            v["model.branches"] = "frequency"
        elif spatial:
            v["model.branches"] = "spatial"
        else:
            v["model.insertion"] = "none"
        accs = []
        for seed in seeds:
            acc = _run_recipe_row(v, seed, tr, te, trace_dir)
            print(f"id={rid} frequency={freq} spatial={spatial} kd={kd} "
                  f"seed={seed} test_acc={_fmt_acc(acc)}")
            accs.append(acc)
        rows.append((rid, freq, spatial, kd, *accs, float(np.mean(accs))))
    header = ["id", "frequency", "spatial", "kd"] \
        + [f"acc_seed{s}" for s in seeds] + ["mean_acc"]
    summary = os.path.join(args.out, "summary.csv")
    _write_summary(summary, header, rows)
    base, full = rows[0][-1], rows[-1][-1]
    print(f"summary -> {summary}")
    print(f"mean accuracy: id=1 {_fmt_acc(base)}, id=8 {_fmt_acc(full)}")
    return 0


def cmd_sweep_kd(args) -> int:
    values, seeds, tr, te, trace_dir = _benchmark_setup(args)
    values["kd.enabled"] = True
    combos = []
    for t in SWEEP_TEMPERATURES:
        combos.append((t, values["kd.alpha"]))
    for a in SWEEP_ALPHAS:
        if (values["kd.T"], a) not in combos:
            combos.append((values["kd.T"], a))
    rows = []
    for t, a in combos:
        v = dict(values)
        v["kd.T"] = float(t)
        v["kd.alpha"] = float(a)
        accs = []
        for seed in seeds:
            acc = _run_recipe_row(v, seed, tr, te, trace_dir)
            print(f"T={t:g} alpha={a:g} seed={seed} test_acc={_fmt_acc(acc)}")
            accs.append(acc)
        rows.append((f"{t:g}", f"{a:g}", *accs, float(np.mean(accs))))
    header = ["temperature", "alpha"] + [f"acc_seed{s}" for s in seeds] \
        + ["mean_acc"]
    summary = os.path.join(args.out, "summary.csv")
    _write_summary(summary, header, rows)
    print(f"summary -> {summary}")
    return 0


def cmd_sweep_insert(args) -> int:
    values, seeds, tr, te, trace_dir = _benchmark_setup(args)
    rows = []
    for ins in SWEEP_INSERTIONS:
        v = dict(values)
        v["model.insertion"] = ins
        accs = []
        for seed in seeds:
            acc = _run_recipe_row(v, seed, tr, te, trace_dir)
            print(f"insertion={ins} seed={seed} test_acc={_fmt_acc(acc)}")
            accs.append(acc)
        rows.append((ins, *accs, float(np.mean(accs))))
    header = ["insertion"] + [f"acc_seed{s}" for s in seeds] + ["mean_acc"]
    summary = os.path.join(args.out, "summary.csv")
    _write_summary(summary, header, rows)
    print(f"summary -> {summary}")
    return 0


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fsce", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic speckle dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--part", choices=("train", "test"), default="train")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--looks", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the co-training loop")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data-train", required=True)
    p.add_argument("--data-test", required=True)
    p.add_argument("--log", help="per-epoch metrics CSV")
    p.add_argument("--ckpt-out", help="student checkpoint path")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--trace", help="replay this teacher trace")
    p.add_argument("--record-trace", help="record the teacher trace here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--silhouette", action="store_true",
                   help="also report the feature-space silhouette")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--cases", help="comma-separated case names (default all)")
    p.add_argument("--step", type=float, default=gc.DEFAULT_STEP)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count", help="parameter and FLOP accounting")
    p.add_argument("--preset", help="single preset (default: all)")
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("gradcam", help="export class-activation heatmaps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tap", help="tap point (default: the insertion stage)")
    p.add_argument("--count", type=int, default=8)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("ablate", help="the 8-row component grid")
    _add_benchmark_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-kd", help="temperature and alpha sweep")
    _add_benchmark_flags(p)
    p.set_defaults(func=cmd_sweep_kd)

    p = sub.add_parser("sweep-insert", help="insertion point sweep")
    _add_benchmark_flags(p)
    p.set_defaults(func=cmd_sweep_insert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.func(args) or 0)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FsceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        name = exc.filename if exc.filename else exc
        print(f"error: no such file: {name}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
