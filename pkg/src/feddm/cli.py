"""Command line entry point: ``feddm run | msgsize | calibrate-dp | partition-stats``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .accounting import PayloadReport, classes_per_client
from .config import ConfigError, ExperimentConfig, parse_config, parse_text, replace
from .data import (DataFormatError, Dataset, dirichlet_partition, gen_1d_binary, gen_blobs,
                   label_entropy, load_cifar_bin, load_idx, select_classes)
from .distillation import dump_synthetic_images
from .federation import run_protocol
from .models import Architecture, param_count
from .privacy import (DpBudget, check_budget, epsilon_for_sigma, gaussian_sigma,
                      simplified_sigma, tailbound_sigma)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("feddm")


class DataLoadError(Exception):
    """A dataset could not be read or generated."""


# data --------------------------------------------------------------------------------

def _data_seeds(seed):
    train_ss, test_ss = np.random.SeedSequence([int(seed), 7]).spawn(2)
    return train_ss, test_ss


def _load_files(cfg: ExperimentConfig):
    if cfg.dataset == "idx":
        paths = [cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels]
        if not all(paths):
            raise ConfigError("train_images: the idx dataset needs train/test image and label paths")
        train = load_idx(cfg.train_images, cfg.train_labels, cfg.num_classes)
        test = load_idx(cfg.test_images, cfg.test_labels, cfg.num_classes)
    else:
        if not cfg.cifar_train or not cfg.cifar_test:
            raise ConfigError("cifar_train: the cifar dataset needs cifar_train and cifar_test paths")
        train = load_cifar_bin(cfg.cifar_train, cfg.num_classes, cfg.cifar_label_bytes)
        test = load_cifar_bin(cfg.cifar_test, cfg.num_classes, cfg.cifar_label_bytes)
    classes = cfg.classes or list(range(cfg.num_classes))
    if cfg.classes or cfg.per_class is not None:
        train = select_classes(train, classes, cfg.per_class, seed=cfg.seed)
    test = select_classes(test, classes, cfg.test_per_class, seed=cfg.seed)
    return train, test


def build_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Architecture]:
    """Training set, held-out set and model architecture for ``cfg``."""
    train_ss, test_ss = _data_seeds(cfg.seed)
    try:
        if cfg.dataset == "blobs":
            args = (cfg.blobs_classes, cfg.blobs_dim, cfg.blobs_spread)
            train = gen_blobs(cfg.blobs_per_class, *args, train_ss)
            test = gen_blobs(cfg.test_per_class, *args, test_ss)
        elif cfg.dataset == "1d-binary":
            train = gen_1d_binary(cfg.binary_n, train_ss)
            test = gen_1d_binary(cfg.binary_n, test_ss)
        else:
            train, test = _load_files(cfg)
    except (OSError, DataFormatError) as exc:
        raise DataLoadError(str(exc)) from exc

    shape = train.example_shape
    if cfg.model == "logistic-1d":
        arch = Architecture.logistic_1d()
    elif cfg.model == "mlp":
        arch = Architecture.mlp((train.example_floats, *cfg.hidden, train.num_classes), input_shape=shape)
    else:
        if len(shape) != 3:
            raise ConfigError(f"model: convnet-lite needs image data, dataset {cfg.dataset!r} has shape {shape}")
        arch = Architecture.convnet_lite(shape, train.num_classes, cfg.channels)
    if cfg.dump_images and len(shape) != 3:
        raise ConfigError(f"dump_images: dataset {cfg.dataset!r} has no image shape")
    return train, test, arch


# run ---------------------------------------------------------------------------------

def versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__, "feddm": __version__}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:
        out["numba"] = None
    return out


def write_manifest(cfg: ExperimentConfig, path, extra=None) -> None:
    manifest = {
        "config_text": cfg.to_text(),
        "config": cfg.as_dict(),
        "seed": cfg.seed,
        "versions": versions(),
        "kernel_backend": _kernels.BACKEND,
    }
    manifest.update(extra or {})
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_config(path) -> ExperimentConfig:
    """Read a flat config file, or the config stored in a run manifest (``*.json``)."""
    path = Path(path)
    if path.suffix == ".json":
        if not path.is_file():
            raise ConfigError(f"config: file not found: {path}")
        try:
            manifest = json.loads(path.read_text())
            text = manifest["config_text"]
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"config: {path} is not a run manifest ({exc})") from None
        return parse_text(text, source=str(path))
    return parse_config(path)


def run_experiment(cfg: ExperimentConfig):
    """Run one experiment and write its artifacts into ``cfg.out``. Returns the RunHistory."""
    train, test, arch = build_data(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    partition = dirichlet_partition(train.y, cfg.clients, cfg.alpha, cfg.seed)
    write_manifest(cfg, out / "manifest.json", {
        "partition_sizes": partition.sizes,
        "param_count": param_count(arch),
        "train_size": len(train),
        "test_size": len(test),
    })

    on_round = None
    if cfg.dump_images:
        def on_round(r, syn_sets):
            if r == cfg.rounds:
                for syn in syn_sets:
                    dump_synthetic_images(syn, out / "synthetic")

    hist = run_protocol(cfg.run_config(), train, test, arch, partition, on_round=on_round)
    hist.write_csv(out / "history.csv", wall_time=cfg.record_wall_time)
    return hist


# subcommands -------------------------------------------------------------------------

def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        changes["out"] = args.out
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    return replace(cfg, **changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    hist = run_experiment(cfg)
    final = hist.records[-1]
    print(f"{cfg.protocol}: {cfg.rounds} rounds, final accuracy {final.test_accuracy:.4f}, "
          f"{final.cumulative_floats} floats uploaded; artifacts in {cfg.out}")
    return EXIT_OK


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def cmd_msgsize(args) -> int:
    if args.cpc is not None:
        if args.example_floats is None:
            raise ConfigError("example_floats: --example-floats is required together with --cpc")
        cpc, floats, params = args.cpc, args.example_floats, args.param_count
        ipc, rounds = args.ipc or 10, args.rounds or 1
    else:
        cfg = _experiment_config(args)
        train, _, arch = build_data(cfg)
        partition = dirichlet_partition(train.y, cfg.clients, cfg.alpha, cfg.seed)
        cpc = classes_per_client(partition, train.y)
        floats = args.example_floats or train.example_floats
        params = args.param_count or param_count(arch)
        ipc, rounds = args.ipc or cfg.ipc, args.rounds or cfg.rounds
    if ipc < 1 or rounds < 1 or floats < 1 or min(cpc, default=0) < 0 or not cpc:
        raise ConfigError("ipc: ipc, rounds, example floats must be >= 1 and cpc non-empty")
    report = PayloadReport(list(cpc), ipc, floats, rounds, params)
    print(report.to_csv() if args.csv else report.format_text(), end="" if args.csv else "\n")
    return EXIT_OK


def cmd_calibrate_dp(args) -> int:
    try:
        budget = DpBudget(args.epsilon, args.delta)
    except ValueError as exc:
        raise ConfigError(f"epsilon: {exc}") from None
    print(f"epsilon                {budget.epsilon:g}")
    print(f"delta                  {budget.delta:g}")
    print(f"gaussian sigma         {gaussian_sigma(budget):.6f}")
    print(f"simplified sigma       {simplified_sigma(budget):.6f}")
    if args.q is not None and args.steps is not None:
        if not 0 < args.q <= 1 or args.steps < 1:
            raise ConfigError("q: need 0 < q <= 1 and steps >= 1")
        tq2 = args.steps * args.q ** 2
        print(f"T*q^2                  {tq2:g}")
        print(f"within T*q^2 <= eps/2  {'yes' if check_budget(args.q, args.steps, budget.epsilon) else 'no'}")
        if tq2 < budget.epsilon:
            print(f"tail-bound sigma       {tailbound_sigma(budget, args.q, args.steps):.6f}")
        else:
            print("tail-bound sigma       undefined (T*q^2 >= eps)")
    if args.sigma is not None:
        print(f"epsilon at sigma={args.sigma:g}  {epsilon_for_sigma(args.sigma, budget.delta):.6f}")
    return EXIT_OK


def cmd_partition_stats(args) -> int:
    cfg = _experiment_config(args)
    changes = {k: v for k, v in (("alpha", args.alpha), ("clients", args.clients)) if v is not None}
    if changes:
        cfg = replace(cfg, **changes)
    train, _, _ = build_data(cfg)
    partition = dirichlet_partition(train.y, cfg.clients, cfg.alpha, cfg.seed)
    hist = partition.class_histograms(train.y, train.num_classes)
    if args.csv:
        print("client," + ",".join(f"class_{c}" for c in range(train.num_classes)) + ",total,entropy")
        for k, row in enumerate(hist):
            print(f"{k}," + ",".join(str(int(v)) for v in row) + f",{int(row.sum())},{label_entropy(row):.6f}")
        return EXIT_OK
    print(f"alpha={cfg.alpha:g} clients={cfg.clients} seed={cfg.seed} n={len(train)}")
    width = max(5, len(str(int(hist.max()))) + 1)
    print("client " + "".join(f"{'c' + str(c):>{width}}" for c in range(train.num_classes))
          + f"{'total':>8}{'entropy':>9}")
    for k, row in enumerate(hist):
        print(f"{k:>6} " + "".join(f"{int(v):>{width}}" for v in row)
              + f"{int(row.sum()):>8}{label_entropy(row):>9.3f}")
    present = (hist > 0).sum(axis=1)
    print(f"mean classes per client {present.mean():.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddm", description="Desk-scale FedDM simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="flat key=value config file or a run manifest.json")
        p.add_argument("--seed", type=int, help="override the config seed")
        if out:
            p.add_argument("--out", help="output directory (overrides the config)")
            p.add_argument("--workers", type=int, help="client worker processes")

    p = sub.add_parser("run", help="run one experiment and write history.csv + manifest.json")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("msgsize", help="per-round upload in floats")
    common(p, out=False)
    p.add_argument("--cpc", type=_int_list, help="classes held per client, e.g. 9,9,9")
    p.add_argument("--ipc", type=int, help="synthetic examples per class")
    p.add_argument("--example-floats", type=int, help="floats per example, e.g. 3072")
    p.add_argument("--param-count", type=int, help="model size for the weight-based comparison")
    p.add_argument("--rounds", type=int, help="rounds for the cumulative total")
    p.add_argument("--csv", action="store_true", help="print CSV instead of a table")
    p.set_defaults(func=cmd_msgsize)

    p = sub.add_parser("calibrate-dp", help="noise multiplier for an (epsilon, delta) budget")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--q", type=float, help="sampling rate per step")
    p.add_argument("--steps", type=int, help="number of noisy steps T")
    p.add_argument("--sigma", type=float, help="also report the epsilon reached by this sigma")
    p.set_defaults(func=cmd_calibrate_dp)

    p = sub.add_parser("partition-stats", help="per-client class histograms of a Dirichlet split")
    common(p, out=False)
    p.add_argument("--alpha", type=float, help="Dirichlet concentration")
    p.add_argument("--clients", type=int, help="number of clients")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_partition_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataLoadError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
