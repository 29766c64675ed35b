"""Command line entry point: ``canonkit {gen-data,train,eval,bench,gradcheck}``.

Exit codes: 0 success, 1 a check failed, 2 bad input or configuration,
3 unreadable or malformed artifact (checkpoint, IDX file, unwritable output).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from canonkit import gradcheck
from canonkit.canon import CanonConfig
from canonkit.data import Dataset, gen_shapes, load_idx, stabilizer_trivial, write_idx
from canonkit.errors import (
    BudgetMismatchError,
    CanonkitError,
    CheckpointError,
    ConfigError,
    DimensionError,
    GroupError,
    ParseError,
)
from canonkit.harness import (
    LOG_COLUMNS,
    Canonicalizer,
    DatasetConfig,
    TrainConfig,
    benchmark_canon,
    evaluate,
    load_model,
    save_model,
    train,
)
from canonkit.nets import backbone_spec, gcnn_spec, init_params
from canonkit.symmetry import make_group

log = logging.getLogger("canonkit")

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_ARTIFACT = 0, 1, 2, 3
DATA_ENV = "CANONKIT_DATA_DIR"
IDX_FILES = {
    "train": ("train-images.idx", "train-labels.idx"),
    "test": ("test-images.idx", "test-labels.idx"),
}
META_FILE = "meta.json"
CHECKPOINT_FILE = "model.ckpt"


class InputError(CanonkitError):
    """Bad command line input (missing file, unparsable value)."""


class ArtifactError(CanonkitError):
    """An output location cannot be written."""


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows, comments=()) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _data_dir(arg: str | None, fallback: str | None = None) -> Path | None:
    d = arg or os.environ.get(DATA_ENV) or fallback
    return Path(d) if d else None


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(cfg: dict, assignment: str) -> str:
    """Apply ``key=value`` to a raw config dict, returning the resolved dotted key.

    Dotted keys address nested sections; a bare key resolves to a top-level
    field first, then to a ``canon`` or ``dataset`` field.
    """
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    value = _parse_value(raw)
    parts = key.split(".")
    if len(parts) == 1:
        top = {f for f in TrainConfig.__dataclass_fields__}
        if key in top:
            parts = [key]
        elif key in CanonConfig.__dataclass_fields__:
            parts = ["canon", key]
        elif key in DatasetConfig.__dataclass_fields__:
            parts = ["dataset", key]
        else:
            raise ConfigError(f"unknown config key {key!r}")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key!r} does not address a config section")
    node[parts[-1]] = value
    return ".".join(parts)


def load_config(path: str | None, overrides=(), seed: int | None = None) -> tuple[TrainConfig, list[str]]:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be an object")
    applied = []
    for a in overrides:
        k = apply_override(raw, a)
        applied.append(f"{k}={a.partition('=')[2]}")
    if seed is not None:
        raw["seed"] = seed
        applied.append(f"seed={seed}")
    try:
        cfg = TrainConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return cfg, applied


def load_split(data_dir: Path, which: str) -> Dataset:
    img, lab = (data_dir / f for f in IDX_FILES[which])
    if not img.is_file() or not lab.is_file():
        raise InputError(f"dataset not found: expected {img} and {lab}")
    ds = load_idx(img, lab)
    meta_path = data_dir / META_FILE
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if "num_classes" in meta:
            ds.meta["num_classes"] = int(meta["num_classes"])
    return ds


def datasets_for(dcfg: DatasetConfig, data_dir_arg: str | None) -> tuple[Dataset, Dataset]:
    """(train, test) for a dataset config; IDX sources read ``data_dir``."""
    if dcfg.source == "synthetic" and not data_dir_arg:
        train_ds = gen_shapes(dcfg.seed, dcfg.n_train_per_class, dcfg.num_classes, dcfg.size)
        test_ds = gen_shapes(dcfg.seed + 1, dcfg.n_test_per_class, dcfg.num_classes, dcfg.size)
        return train_ds, test_ds
    d = _data_dir(data_dir_arg, dcfg.data_dir)
    if d is None:
        raise InputError(f"dataset not found: no data directory (use --data-dir or {DATA_ENV})")
    if not d.is_dir():
        raise InputError(f"dataset not found: {d}")
    return load_split(d, "train"), load_split(d, "test")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    d = _data_dir(args.data_dir or args.out_dir)
    if d is None:
        raise InputError(f"no output directory (use --data-dir or {DATA_ENV})")
    d = _out_dir(d)
    group = make_group(args.group)
    train_ds = gen_shapes(args.seed, args.n_train_per_class, args.num_classes, args.size)
    test_ds = gen_shapes(args.seed + 1, args.n_test_per_class, args.num_classes, args.size)
    trivial = all(stabilizer_trivial(x, group) for ds in (train_ds, test_ds) for x in ds.images)
    try:
        for which, ds in (("train", train_ds), ("test", test_ds)):
            write_idx(ds, *(d / f for f in IDX_FILES[which]))
        meta = {
            "seed": args.seed,
            "num_classes": args.num_classes,
            "n_train_per_class": args.n_train_per_class,
            "n_test_per_class": args.n_test_per_class,
            "size": args.size,
            "group": group.name,
            "stabilizer": "trivial" if trivial else "nontrivial",
        }
        (d / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ArtifactError(f"cannot write dataset to {d}: {exc}") from exc
    print(f"wrote {len(train_ds)} train and {len(test_ds)} test samples to {d}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, applied = load_config(args.config, args.set or (), args.seed)
    train_ds, test_ds = datasets_for(cfg.dataset, args.data_dir)
    out = _out_dir(args.out_dir)
    model, tlog = train(cfg, train_ds, test_ds)
    try:
        save_model(model, out / CHECKPOINT_FILE)
    except OSError as exc:
        raise ArtifactError(f"cannot write checkpoint: {exc}") from exc
    comments = [f"setup={cfg.setup} group={cfg.group} seed={cfg.seed}"]
    comments += [f"override {a}" for a in applied]
    rows = [[r[c] for c in LOG_COLUMNS] for r in tlog.rows]
    _write_csv(out / "train_log.csv", LOG_COLUMNS, rows, comments)
    print(f"checkpoint: {out / CHECKPOINT_FILE}")
    return EXIT_OK


METRIC_COLUMNS = ("setup", "group", "acc", "g_avg_acc", "identity_metric")


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise InputError(f"checkpoint not found: {ckpt}")
    model = load_model(ckpt)
    _, test_ds = datasets_for(model.cfg.dataset, args.data_dir)
    m = evaluate(model, test_ds)
    row = (model.cfg.setup, model.cfg.group, m.acc, m.g_avg_acc, m.identity_metric)
    out = _out_dir(args.out_dir)
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, [row])
    width = max(len(c) for c in METRIC_COLUMNS)
    for name, v in zip(METRIC_COLUMNS, row):
        print(f"{name:<{width}}  {_fmt(v)}")
    return EXIT_OK


def _widths(text: str) -> tuple[int, ...]:
    try:
        w = tuple(int(t) for t in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"widths must be comma-separated integers, got {text!r}") from exc
    if not w or min(w) < 1:
        raise ConfigError(f"widths must be positive, got {text!r}")
    return w


def cmd_bench(args) -> int:
    group = make_group(args.group)
    ccfg = CanonConfig(embed_dim=args.embed_dim, vref_seed=args.seed)
    opt_spec = backbone_spec(widths=_widths(args.opt_widths), embed_dim=args.embed_dim, image_size=args.size)
    gspec = gcnn_spec(group.name, widths=_widths(args.gcnn_widths), image_size=args.size)
    canons = [
        Canonicalizer("opt", init_params(opt_spec, args.seed), opt_spec, ccfg, name="opt_cnn"),
        Canonicalizer("direct", init_params(gspec, args.seed + 1), gspec, name="direct_gcnn"),
    ]
    x = gen_shapes(args.seed, -(-args.batch_size // 4), 4, args.size).images[:args.batch_size]
    rep = benchmark_canon(canons, x, group, repeats=args.repeats)
    out = _out_dir(args.out_dir)
    header = ["repeat"] + [f"{n}_seconds" for n in rep.names] + ["ratio"]
    rows = [[i, *t, float(t[0] / t[1])] for i, t in enumerate(rep.times)]
    rows.append(["median", *rep.median, rep.ratio])
    _write_csv(out / "bench.csv", header, rows,
               comments=[f"group={group.name} batch={len(x)} params={rep.param_counts}"])
    for n, med, iqr, pc in zip(rep.names, rep.median, rep.iqr, rep.param_counts):
        print(f"{n:<12} params {pc:>7d}  median {med * 1e3:9.3f} ms  iqr {iqr * 1e3:8.3f} ms")
    print(f"ratio {rep.ratio!r}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.only or list(gradcheck.REGISTRY)
    unknown = [n for n in names if n not in gradcheck.REGISTRY]
    if unknown:
        raise ConfigError(f"unknown gradcheck entries: {', '.join(unknown)}")
    results = gradcheck.run_all(args.seed, names)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="canonkit", description="Learned canonicalization toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write the synthetic glyph dataset as IDX files")
    g.add_argument("--data-dir", help=f"output directory (default ${DATA_ENV})")
    g.add_argument("--out-dir", help="alias for --data-dir")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-classes", type=int, default=4)
    g.add_argument("--n-train-per-class", type=int, default=500)
    g.add_argument("--n-test-per-class", type=int, default=125)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--group", default="c4", help="group for the stabilizer check")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one setup and write a checkpoint")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    t.add_argument("--seed", type=int)
    t.add_argument("--data-dir", help=f"IDX dataset directory (default ${DATA_ENV})")
    t.add_argument("--out-dir", default="runs/train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir")
    e.add_argument("--out-dir", default="runs/eval")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="time optimization vs direct canonicalization")
    b.add_argument("--group", default="c4")
    b.add_argument("--opt-widths", default="16,32,32")
    b.add_argument("--gcnn-widths", default="16,32")
    b.add_argument("--embed-dim", type=int, default=128)
    b.add_argument("--size", type=int, default=16)
    b.add_argument("--batch-size", type=int, default=64)
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out-dir", default="runs/bench")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--only", nargs="+", metavar="NAME")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        with threadpool_limits(args.threads):
            return args.func(args)
    except (InputError, ConfigError, DimensionError, GroupError, BudgetMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CheckpointError, ParseError, ArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
