"""Shared helpers for the experiment scripts (run from the repository root)."""

import argparse

from hexform import cli


def task_args(estimator, *extra):
    """Namespace equivalent to ``hexform finetune`` with the given flags."""
    argv = ["finetune"] + (["--estimator", estimator] if estimator else []) + list(extra)
    return cli.build_parser().parse_args(argv)


def base_parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--estimator", help="estimator checkpoint (trained on the fly if omitted)")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=5)
    return p
