"""Experiment driver: train / bound / sweep / distances / gen-data.

Every command is deterministic given its seeds; CSV outputs use repr()
for floats so reruns are byte-identical. Exit codes: 0 success, 1 config
error, 2 data error, 3 numerical failure.
"""

import argparse
import hashlib
import math
import os
import sys

import numpy as np

from .bounds import CSV_HEADER, ZeroNormError, bound_report
from .checkpoint import (
    CheckpointError,
    check_compatible,
    load_checkpoint,
    restore_network,
    save_checkpoint,
)
from .config import (
    ConfigError,
    parse_config_text,
    resolve_data_paths,
    _resolve_selectors,
)
from .data import DataError, Dataset, dataset_to_idx_arrays, load_idx, \
    synthetic_transfer_pair, write_idx_images, write_idx_labels
from .linalg import matrix_view
from .optim import DivergenceError, train
from .regularizers import CONSTRAINT_KINDS, constraint_distance

HISTOGRAM_BINS = 15
BOUNDARY_REL_TOL = 1e-3


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _read_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    cfg = parse_config_text(text, os.path.dirname(os.path.abspath(path)))
    return cfg, hashlib.sha256(text.encode("utf-8")).digest()


def _prepare_network(cfg):
    """Build the seeded network, optionally warm-started from a checkpoint."""
    net = cfg.build_network()
    if cfg.init_from:
        ck = load_checkpoint(cfg.init_from)
        indices = net.param_layer_indices()
        skip = {indices[-1]} if cfg.reinit_head else set()
        for i in indices:
            if i in skip:
                continue
            params = net.layers[i].params()
            for pname in params:
                key = f"layer{i}.{pname}"
                if key not in ck.entries:
                    raise ConfigError(
                        f"init_from checkpoint lacks entry {key!r}")
                values = ck.entries[key][0]
                if values.shape != params[pname].shape:
                    raise ConfigError(
                        f"init_from shape mismatch at {key!r}: checkpoint "
                        f"{values.shape}, architecture {params[pname].shape}"
                    )
                np.copyto(params[pname], values)
    net.capture_reference()
    return net


def _metrics_header(net):
    columns = ["epoch", "train_loss", "train_acc", "test_acc", "penalty", "lr"]
    for i in net.param_layer_indices():
        columns.append(f"dist_mars_layer{i}")
        columns.append(f"dist_fro_layer{i}")
    return ",".join(columns)


def _metrics_row(net, record):
    cells = [record["epoch"], record["train_loss"], record["train_acc"],
             record["test_acc"], record["penalty"], record["lr"]]
    for i in net.param_layer_indices():
        cells.append(record["distances"][i]["mars"])
        cells.append(record["distances"][i]["frobenius"])
    return ",".join(_fmt(c) for c in cells)


def cmd_train(args):
    cfg, config_hash = _read_config(args.config)
    train_ds, test_ds = cfg.load_datasets()
    net = _prepare_network(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)

    initial_path = os.path.join(cfg.out_dir, "initial.ckpt")
    final_path = os.path.join(cfg.out_dir, "final.ckpt")
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    save_checkpoint(initial_path, net, config_hash, epoch=0)

    with open(metrics_path, "w", encoding="utf-8") as f:
        f.write(_metrics_header(net) + "\n")

        def sink(record):
            f.write(_metrics_row(net, record) + "\n")
            f.flush()
            test = record["test_acc"]
            print(f"epoch {record['epoch']:3d}  loss {record['train_loss']:.6f}"
                  f"  acc {record['train_acc']:.4f}"
                  + (f"  test {test:.4f}" if test is not None else ""))

        train(net, train_ds, cfg.train_config(), sink=sink, eval_data=test_ds)

    save_checkpoint(final_path, net, config_hash, epoch=cfg.epochs)
    print(f"wrote {initial_path}, {final_path}, {metrics_path}")
    return 0


def _reference_from(ck):
    """Reference list (aligned with layer indices) from a checkpoint's params."""
    net0 = restore_network(ck)
    reference = [None] * len(net0.layers)
    for i in net0.param_layer_indices():
        reference[i] = {k: v.copy() for k, v in net0.layers[i].params().items()}
    return reference


def _write_csv(path, header, rows):
    exists = os.path.exists(path)
    with open(path, "a", encoding="utf-8") as f:
        if not exists:
            f.write(header + "\n")
        for row in rows:
            f.write(row + "\n")


def cmd_bound(args):
    ck_init = load_checkpoint(args.init)
    ck_final = load_checkpoint(args.final)
    check_compatible(ck_init, ck_final)
    net = restore_network(ck_final)
    reference = _reference_from(ck_init)

    (train_images, train_labels), _ = resolve_data_paths(args.data)
    dataset = load_idx(train_images, train_labels, name="train")
    if args.limit:
        dataset = dataset.subset(args.limit)

    epoch = int(ck_final.meta.get("epoch", 0))
    report = bound_report(net, dataset, reference, rho=args.rho, delta=args.delta,
                          margin=args.margin, epoch=epoch)
    print(report.text_block())
    if args.csv:
        _write_csv(args.csv, CSV_HEADER, [report.csv_row()])
        print(f"appended to {args.csv}")
    else:
        print(CSV_HEADER)
        print(report.csv_row())
    return 0


SWEEP_HEADER = ("factor,train_loss,train_acc,test_acc,"
                "mars,frobenius,spectral,risk,conf")


def cmd_sweep(args):
    cfg, _ = _read_config(args.config)
    factors = []
    for token in args.factors.split(","):
        token = token.strip()
        if token:
            factors.append(float(token))
    if not factors or any(c <= 0 for c in factors):
        raise ConfigError("factors must be a comma list of positive numbers")
    if not (cfg.constraints.entries or cfg.penalties.entries):
        raise ConfigError("sweep needs constraint or penalty directives to scale")

    train_ds, test_ds = cfg.load_datasets()
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_path = os.path.join(cfg.out_dir, "sweep.csv")
    with open(out_path, "w", encoding="utf-8") as f:
        f.write(SWEEP_HEADER + "\n")
        f.flush()
        for c in factors:
            net = _prepare_network(cfg)
            _, history = train(net, train_ds, cfg.train_config(scale=c),
                               eval_data=test_ds)
            last = history[-1]
            report = bound_report(net, train_ds, rho=cfg.rho, delta=cfg.delta,
                                  margin=cfg.margin, epoch=cfg.epochs)
            cells = [c, last["train_loss"], last["train_acc"], last["test_acc"],
                     report.mars, report.frobenius, report.spectral,
                     report.empirical_risk, report.confidence]
            f.write(",".join(_fmt(v) for v in cells) + "\n")
            f.flush()
            print(f"factor {c!r}: train_acc {last['train_acc']:.4f}"
                  + (f", test_acc {last['test_acc']:.4f}"
                     if last["test_acc"] is not None else ""))
    print(f"wrote {out_path}")
    return 0


def _histogram_lines(values, label):
    """Fixed-bin text histogram over [0, max]; total width 15 bins."""
    values = np.asarray(values, dtype=np.float64)
    top = float(values.max()) if values.size else 0.0
    lines = [f"{label} histogram ({HISTOGRAM_BINS} bins over [0, {top!r}]):"]
    if top == 0.0:
        lines.append(f"  [0, 0] {'#' * len(values)} {len(values)}")
        return lines
    counts, edges = np.histogram(values, bins=HISTOGRAM_BINS, range=(0.0, top))
    for k in range(HISTOGRAM_BINS):
        closing = "]" if k == HISTOGRAM_BINS - 1 else ")"
        lines.append(
            f"  [{edges[k]:.6g}, {edges[k + 1]:.6g}{closing} "
            f"{'#' * int(counts[k])} {int(counts[k])}"
        )
    return lines


def _parse_constraint_flag(text, param_indices):
    directives = {}
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        selector, sep, value = token.partition("=")
        if not sep:
            raise ConfigError(f"constraint flag expects <sel>=<kind>:<gamma>, "
                              f"got {token!r}")
        kind, sep2, amount = value.partition(":")
        if not sep2 or kind not in CONSTRAINT_KINDS:
            raise ConfigError(f"bad constraint value {value!r}")
        gamma = math.inf if amount == "inf" else float(amount)
        directives[selector.strip()] = (kind, gamma)
    return _resolve_selectors(directives, param_indices, "constraint",
                              CONSTRAINT_KINDS)


DISTANCES_HEADER = "layer,kind,dist_mars,dist_frobenius,gamma,constraint_kind,boundary"


def cmd_distances(args):
    ck_init = load_checkpoint(args.init)
    ck_final = load_checkpoint(args.final)
    check_compatible(ck_init, ck_final)
    net = restore_network(ck_final)
    net_init = restore_network(ck_init)

    param_indices = net.param_layer_indices()
    constraints = {}
    if args.constraints:
        constraints = _parse_constraint_flag(args.constraints, param_indices)

    rows = []
    mars_values = []
    fro_values = []
    for i in param_indices:
        w = matrix_view(net.layers[i].params()["weight"])
        w0 = matrix_view(net_init.layers[i].params()["weight"])
        d_mars = constraint_distance(w, w0, "mars")
        d_fro = constraint_distance(w, w0, "frobenius")
        mars_values.append(d_mars)
        fro_values.append(d_fro)
        gamma = kind = boundary = None
        if i in constraints:
            kind, gamma = constraints[i]
            dist = d_mars if kind == "mars" else d_fro
            boundary = abs(gamma - dist) <= BOUNDARY_REL_TOL * gamma
        layer_kind = type(net.layers[i]).__name__.replace("Layer", "").lower()
        rows.append(",".join(_fmt(v) for v in
                             [i, layer_kind, d_mars, d_fro, gamma, kind, boundary]))

    for line in _histogram_lines(mars_values, "MARS distance"):
        print(line)
    for line in _histogram_lines(fro_values, "Frobenius distance"):
        print(line)
    if args.csv:
        _write_csv(args.csv, DISTANCES_HEADER, rows)
        print(f"appended to {args.csv}")
    else:
        print(DISTANCES_HEADER)
        for row in rows:
            print(row)
    return 0


def cmd_gen_data(args):
    if args.n_test < 1:
        raise ConfigError("n-test must be >= 1")
    pretrain, finetune = synthetic_transfer_pair(
        args.seed, args.n_pre, args.n_fine + args.n_test, args.dim,
        args.classes, args.shift)
    fine_train = Dataset(finetune.inputs[: args.n_fine],
                         finetune.labels[: args.n_fine], args.classes, "train")
    fine_test = Dataset(finetune.inputs[args.n_fine :],
                        finetune.labels[args.n_fine :], args.classes, "test")

    os.makedirs(args.out, exist_ok=True)
    written = []
    for tag, ds in (("pretrain", pretrain), ("train", fine_train),
                    ("test", fine_test)):
        images, labels = dataset_to_idx_arrays(ds)
        image_path = os.path.join(args.out, f"{tag}-images-idx3-ubyte")
        label_path = os.path.join(args.out, f"{tag}-labels-idx1-ubyte")
        write_idx_images(image_path, images)
        write_idx_labels(label_path, labels)
        written += [image_path, label_path]

    meta_path = os.path.join(args.out, "meta.txt")
    with open(meta_path, "w", encoding="utf-8") as f:
        for key in ("seed", "n_pre", "n_fine", "n_test", "dim", "classes", "shift"):
            f.write(f"{key} = {_fmt(getattr(args, key))}\n")
    written.append(meta_path)
    for path in written:
        print(f"wrote {path}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="distreg",
                     description="distance-regularized fine-tuning experiments")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", parents=[], help="train per a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bound", help="evaluate bound measures for a checkpoint pair")
    p.add_argument("--init", required=True)
    p.add_argument("--final", required=True)
    p.add_argument("--data", required=True, help="directory with IDX files")
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--limit", type=int, default=None,
                   help="evaluate on the first N training examples (match "
                        "train_limit)")
    p.add_argument("--csv", default=None, help="append the CSV row to this file")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("sweep", help="rerun training across regularizer scales")
    p.add_argument("--config", required=True)
    p.add_argument("--factors", required=True, help="comma list of scale factors")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("distances", help="per-layer distances between checkpoints")
    p.add_argument("--init", required=True)
    p.add_argument("--final", required=True)
    p.add_argument("--constraints", default=None,
                   help="comma list of <selector>=<kind>:<gamma>")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_distances)

    p = sub.add_parser("gen-data", help="write synthetic transfer IDX files")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-pre", type=int, default=2000, dest="n_pre")
    p.add_argument("--n-fine", type=int, default=1000, dest="n_fine")
    p.add_argument("--n-test", type=int, default=500, dest="n_test")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--shift", type=float, default=0.15)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help()
            return 1
        return args.func(args)
    except (DivergenceError, ZeroNormError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
