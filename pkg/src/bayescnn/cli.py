"""Command-line driver: ``bayescnn {train,eval,uncertainty,prune,compare}``.

Exit codes: 0 success, 1 usage error (bad flag, missing data), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import data, pruning, training, zoo
from .uncertainty import DEFAULT_T, dataset_uncertainty

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DEFAULT_DATA_DIR = os.environ.get("BAYESCNN_DATA_DIR", "data/mnist")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p, train=True):
    p.add_argument("--data-dir", default=DEFAULT_DATA_DIR,
                   help="directory holding the MNIST IDX or CIFAR-10 binary files")
    p.add_argument("--dataset", choices=("mnist", "cifar10"), default=None,
                   help="defaults to mnist for lenet5, cifar10 for the AlexNets")
    p.add_argument("--seed", type=int, default=0 if train else None,
                   help="run seed (eval commands default to the checkpoint's seed)")
    p.add_argument("--eval-draws", type=int, default=DEFAULT_T)
    p.add_argument("--subset-per-class", type=int, default=None,
                   help="keep only the first K training examples of each class")
    p.add_argument("--val-size", type=int, default=None, help="use the first N test examples")
    p.add_argument("--out-dir", default="runs/latest")
    if train:
        p.add_argument("--epochs", type=int, default=10)
        p.add_argument("--batch-size", type=int, default=256)
        p.add_argument("--lr", type=float, default=0.001)
        p.add_argument("--train-draws", type=int, default=1)
        p.add_argument("--sigma-p", type=float, default=1.0)
        p.add_argument("--rho-init", type=float, default=training.TrainingConfig.rho_init)
        p.add_argument("--l2-lambda", type=float, default=0.0005)
        p.add_argument("--no-l2", action="store_true", help="disable the L2 term on means")
        p.add_argument("--kl-mode", choices=("closed_form", "monte_carlo"), default="closed_form")
        p.add_argument("--early-stopping", action="store_true",
                       help="stop after 5 epochs without val_acc improvement")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bayescnn", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train one architecture and write metrics.csv")
    p.add_argument("--arch", default="lenet5-bayes")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    p.add_argument("--checkpoint", required=True)
    _common(p, train=False)

    p = sub.add_parser("uncertainty", help="mean aleatoric / epistemic traces of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-inputs", type=int, default=1000)
    _common(p, train=False)

    p = sub.add_parser("prune", help="magnitude-prune a checkpoint, optionally fine-tune")
    p.add_argument("--checkpoint", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--threshold", type=float)
    g.add_argument("--target-sparsity", type=float)
    p.add_argument("--finetune-epochs", type=int, default=0)
    _common(p)

    p = sub.add_parser("compare", help="train the Bayesian and frequentist twins on the same data")
    p.add_argument("--arch", default="lenet5", help="base name: lenet5, alexnet or alexnet-half")
    _common(p)
    return parser


def _config(args) -> training.TrainingConfig:
    return training.TrainingConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
        train_draws=args.train_draws, eval_draws=args.eval_draws,
        l2_lambda=0.0 if args.no_l2 else args.l2_lambda, seed=args.seed,
        sigma_p=args.sigma_p, kl_mode=args.kl_mode, rho_init=args.rho_init,
        early_stopping=args.early_stopping)


def _dataset_name(args, arch: str) -> str:
    if args.dataset:
        return args.dataset
    return "mnist" if arch.startswith("lenet5") else "cifar10"


def _load(args, arch: str) -> tuple:
    name = _dataset_name(args, arch)
    if not os.path.isdir(args.data_dir):
        raise UsageError(f"data directory {args.data_dir!r} does not exist")
    try:
        if name == "mnist":
            train_set = data.load_mnist(args.data_dir, "train")
            val_set = data.load_mnist(args.data_dir, "test")
        else:
            names = [os.path.join(args.data_dir, f"data_batch_{i}.bin") for i in range(1, 6)]
            train_set = data.load_cifar10_binary([p for p in names if os.path.exists(p)] or names,
                                                 split="train")
            val_set = data.load_cifar10_binary(os.path.join(args.data_dir, "test_batch.bin"),
                                               split="test")
    except FileNotFoundError as exc:
        raise UsageError(f"missing data: {exc}") from None
    if getattr(args, "subset_per_class", None):
        train_set = train_set.subset_per_class(args.subset_per_class)
    if args.val_size:
        val_set = val_set.head(args.val_size)
    return train_set, val_set


def _write_json(out_dir, name, payload):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def cmd_train(args):
    zoo.parse_arch(args.arch)
    config = _config(args)
    train_set, val_set = _load(args, args.arch)
    result = training.train(config, args.arch, train_set, val_set, out_dir=args.out_dir)
    _write_json(args.out_dir, "config.json", {"arch": args.arch, **config.to_dict()})
    last = result.metrics[-1]
    print(json.dumps({"epochs": len(result.metrics), "val_acc": last.val_acc,
                      "out_dir": args.out_dir}))


def _load_checkpoint(path):
    if not os.path.exists(path):
        raise UsageError(f"checkpoint {path!r} not found")
    return training.load_checkpoint(path)


def _eval_seed(args, meta) -> int:
    if args.seed is not None:
        return args.seed
    return (meta.get("config") or {}).get("seed", 0)


def cmd_eval(args):
    model, meta, _ = _load_checkpoint(args.checkpoint)
    _, val_set = _load(args, meta["architecture"])
    acc, nll = training.evaluate(model, val_set, args.eval_draws,
                                 training.eval_rng(_eval_seed(args, meta)))
    report = pruning.sparsity_report(model) if model.is_bayesian else None
    payload = {"val_acc": acc, "nll": nll, "epoch": meta["epoch"],
               "sparsity": report.sparsity if report else 0.0}
    _write_json(args.out_dir, "eval.json", payload)
    print(json.dumps(payload))


def cmd_uncertainty(args):
    model, meta, _ = _load_checkpoint(args.checkpoint)
    _, val_set = _load(args, meta["architecture"])
    subset = val_set.head(args.n_inputs)
    ale, epi = dataset_uncertainty(model, subset, args.eval_draws,
                                   training.eval_rng(_eval_seed(args, meta)))
    payload = {"aleatoric": ale, "epistemic": epi, "n_inputs": len(subset),
               "T": args.eval_draws, "epoch": meta["epoch"]}
    _write_json(args.out_dir, "uncertainty.json", payload)
    print(json.dumps(payload))


def cmd_prune(args):
    model, meta, _ = _load_checkpoint(args.checkpoint)
    if not model.is_bayesian:
        raise UsageError("pruning needs a Bayesian checkpoint")
    tau = args.threshold
    if tau is None:
        tau = pruning.threshold_for_sparsity(model, args.target_sparsity)
    pruned, masks, report = pruning.prune_threshold(model, tau)
    os.makedirs(args.out_dir, exist_ok=True)
    if args.finetune_epochs:
        train_set, val_set = _load(args, meta["architecture"])
        config = _config(args)
        pruning.fine_tune(pruned, masks, train_set, args.finetune_epochs, config, val_set,
                          out_dir=args.out_dir)
    report.to_csv(os.path.join(args.out_dir, "sparsity.csv"))
    path = os.path.join(args.out_dir, "pruned.npz")
    training.save_checkpoint(path, pruned, epoch=meta["epoch"])
    payload = {"tau": tau, "sparsity": report.sparsity, "retained": report.retained,
               "total": report.total, "l1_before": report.l1_before,
               "l1_after": report.l1_after, "checkpoint": path}
    _write_json(args.out_dir, "prune.json", payload)
    print(json.dumps(payload))


def cmd_compare(args):
    if args.arch not in zoo.ARCHITECTURES:
        raise UsageError(f"--arch must be one of {zoo.ARCHITECTURES}")
    config = _config(args)
    train_set, val_set = _load(args, args.arch)
    rows = {}
    for kind in ("bayes", "freq"):
        arch = f"{args.arch}-{kind}"
        out = os.path.join(args.out_dir, arch)
        result = training.train(config, arch, train_set, val_set, out_dir=out)
        rows[arch] = {"val_acc": result.metrics[-1].val_acc,
                      "params": result.model.num_scalars(),
                      "seconds": sum(m.wall_time for m in result.metrics)}
    _write_json(args.out_dir, "compare.json", rows)
    print(json.dumps(rows))


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "uncertainty": cmd_uncertainty,
            "prune": cmd_prune, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "bayescnn: error: a command is required")
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"{parser.format_usage()}bayescnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, ArithmeticError, OSError) as exc:
        print(f"bayescnn: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
