"""``hexform`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage, 3 contract violation
(for example serving a model that is not HE-ready). ``HEXFORM_SEED``
overrides the default of every ``--seed`` flag.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import SyntheticTaskSpec, TaskKind, gen_synthetic
from .errors import (
    DepthExceeded, DidNotConverge, HexformError, InvalidSpec, KeyMismatch, NonFiniteMaskValue, UnsupportedOp,
)
from .estimator import train_estimator
from .he import DEFAULT_COEFFS, DEGREES, Backend, HeParams, KeyPair, decrypt, encrypt, he_forward
from .model import ActivationMode, ModelConfig, TransformerModel
from .train import FinetuneConfig, evaluate, fine_tune, metric_from_logits
from .workflow import WorkflowConfig, WorkflowSchedule, is_he_ready, run_workflow

log = logging.getLogger("hexform")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONTRACT = 0, 1, 2, 3
BATCH_GRID = (4, 8, 16, 32, 128)
_CONTRACT = (UnsupportedOp, KeyMismatch, DepthExceeded)
_USAGE = (InvalidSpec, NonFiniteMaskValue)


class Failure(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def default_seed():
    raw = os.environ.get("HEXFORM_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise Failure(EXIT_USAGE, f"HEXFORM_SEED must be an integer, got {raw!r}") from None


def write_report(pairs, path=None, stream=None):
    """key=value lines, to ``path`` and/or ``stream``."""
    text = "".join(f"{k}={v}\n" for k, v in pairs)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    if stream is not None:
        stream.write(text)
        stream.flush()
    return text


def _fmt(x):
    return f"{x:.4f}" if isinstance(x, float) else str(x)


# -- train-estimator ------------------------------------------------------------------


def cmd_train_estimator(args):
    try:
        est, report = train_estimator(args.dim, args.seed, steps=args.steps, lr=args.lr)
        code = EXIT_OK
    except DidNotConverge as exc:
        est, report = exc.estimator, exc.report
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    checkpoint.save_estimator(est, args.out, report)
    sys.stdout.write("".join(line + "\n" for line in report.lines()))
    return code


# -- finetune / sweep --------------------------------------------------------------------


def _task_data(args):
    kind = TaskKind(args.task)
    spec = SyntheticTaskSpec(kind=kind, num_classes=3 if kind is TaskKind.TAG else 2, seed=args.seed,
                             train_size=args.train_size, dev_size=args.dev_size)
    train, dev = gen_synthetic(spec, args.seed)
    return spec, train, dev


def _estimator(args, dim):
    if args.estimator:
        est = checkpoint.load_estimator(args.estimator)
        if est.dim != dim:
            raise Failure(EXIT_USAGE, f"estimator trained for rows of {est.dim}, model needs {dim}")
        return est
    est, report = train_estimator(dim, args.seed, steps=args.estimator_steps, strict=False)
    log.info("estimator heldout_mse=%.3e converged=%s", report.heldout_mse, report.converged)
    return est


def he_metric(model, ds, backend=Backend.SHADOW, seed=0, params=None):
    """Dev metric of the encrypted forward (client ReLU done locally)."""
    key = KeyPair.generate(backend, seed)
    params = params or HeParams()
    emb = model.embed(ds.tokens).data
    ct = encrypt(emb, key, params)

    def channel(c):
        return encrypt(np.maximum(decrypt(c, key), 0.0), key, params)

    out, _ = he_forward(model, ct, channel, ds.mask)
    return metric_from_logits(decrypt(out, key), ds)


def _workflow_config(args):
    ft = FinetuneConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                        weight_decay=args.weight_decay, seed=args.seed)
    return WorkflowConfig(finetune=ft, distill_steps=args.distill_steps, seed=args.seed)


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except HexformError as exc:
        code = EXIT_CONTRACT if isinstance(exc, _CONTRACT) else EXIT_RUNTIME
        raise Failure(code, f"stage {name} failed: {type(exc).__name__}: {exc}") from exc


def finetune_pipeline(args, mask_value=None, weight_decay=None, with_baselines=True):
    """Baseline, ReLU-only and the approximation workflow. Returns (model, report pairs)."""
    if mask_value is not None:
        args = argparse.Namespace(**{**vars(args), "mask_value": mask_value})
    if weight_decay is not None:
        args = argparse.Namespace(**{**vars(args), "weight_decay": weight_decay})
    spec, train, dev = _task_data(args)
    cfg = ModelConfig(num_labels=spec.num_labels, token_level=spec.kind is TaskKind.TAG,
                      max_seq_len=spec.seq_len, vocab_size=spec.vocab_size, mask_value=args.mask_value)
    start = TransformerModel.init(cfg, args.seed)
    start.vocab = train.vocab
    hp = _workflow_config(args)
    report = [("task", spec.kind.value), ("schedule", args.schedule), ("seed", args.seed),
              ("mask_value", args.mask_value), ("weight_decay", args.weight_decay)]
    if with_baselines:
        base, _ = _stage("baseline", fine_tune, start, train, dev, hp.finetune)
        report.append(("baseline", _fmt(evaluate(base, dev))))
        relu_only, _ = _stage("relu", fine_tune, start.copy(activation_mode=ActivationMode.RELU), train, dev,
                              hp.finetune)
        report.append(("relu", _fmt(evaluate(relu_only, dev))))
    est = _stage("estimator", _estimator, args, spec.seq_len)
    model, metrics = _stage("workflow", run_workflow, start, train, dev, args.schedule, est, hp)
    for key in ("relu-s", "max-pre-ln", "distill-init-mse", "distill-mse", "relu-s-l"):
        if key in metrics:
            report.append((key, _fmt(metrics[key])))
    if not is_he_ready(model):
        raise Failure(EXIT_CONTRACT, "stage he failed: workflow output is not HE-ready")
    report.append(("he", _fmt(_stage("he", he_metric, model, dev, seed=args.seed))))
    return model, report


def cmd_finetune(args):
    model, report = finetune_pipeline(args)
    if args.out:
        out = checkpoint.save_model(model, args.out)
        write_report(report, out / "report.txt")
    write_report(report, stream=sys.stdout)
    return EXIT_OK


def cmd_sweep(args):
    if not args.values:
        raise Failure(EXIT_USAGE, "--values needs at least one value")
    rows = []
    print("value\tmetric\tmax_pre_ln", flush=True)
    for v in args.values:
        kw = {"mask_value": v} if args.param == "mask-value" else {"weight_decay": v}
        if args.param == "weight-decay" and v < 0:
            raise Failure(EXIT_USAGE, "weight decay must be non-negative")
        _, report = finetune_pipeline(args, with_baselines=False, **kw)
        r = dict(report)
        rows.append((v, r["relu-s-l"], r.get("max-pre-ln", "nan")))
        print(f"{v}\t{r['relu-s-l']}\t{r.get('max-pre-ln', 'nan')}", flush=True)
    if args.out:
        Path(args.out).write_text("value\tmetric\tmax_pre_ln\n" + "".join(f"{a}\t{b}\t{c}\n" for a, b, c in rows),
                                  encoding="utf-8")
    return EXIT_OK


# -- serve / query ---------------------------------------------------------------------------


def _he_params(args):
    coeffs = DEFAULT_COEFFS if args.he_coeffs is None else tuple(int(c) for c in args.he_coeffs.split(","))
    try:
        return HeParams(args.he_degree, coeffs, args.scale_bits)
    except ValueError as exc:
        raise Failure(EXIT_USAGE, str(exc)) from None


def cmd_serve(args):
    from .protocol import InferenceServer

    params = _he_params(args)
    try:
        model = checkpoint.load_model(args.checkpoint)
    except (OSError, HexformError) as exc:
        raise Failure(EXIT_RUNTIME, f"cannot load checkpoint: {exc}") from exc
    if not is_he_ready(model):
        raise Failure(EXIT_CONTRACT, "model not HE-ready")
    server = InferenceServer(model, params, Backend.parse(args.backend))

    def ready(port):
        print(f"listening host={args.host} port={port}", flush=True)

    try:
        server.serve_tcp(args.host, args.port, ready)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_query(args):
    from .protocol import ClientSession, StreamTransport

    transport = StreamTransport.connect(args.host, args.port, timeout=args.timeout)
    try:
        client = ClientSession(transport, args.seed)
        client.connect()
        logits, depth = client.query(args.text)
    finally:
        transport.close()
    flat = np.asarray(logits).reshape(-1)
    pairs = [("logits", ",".join(repr(float(x)) for x in flat)), ("shape", "x".join(map(str, np.shape(logits))))]
    pairs += sorted(depth.items())
    write_report(pairs, stream=sys.stdout)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------


def _add_task_args(p, seed):
    p.add_argument("--task", choices=[k.value for k in TaskKind], default="classify")
    p.add_argument("--schedule", choices=[s.value for s in WorkflowSchedule], default="two-stages")
    p.add_argument("--mask-value", type=float, default=-3.0)
    p.add_argument("--weight-decay", type=float, default=0.1)
    p.add_argument("--batch", type=int, choices=BATCH_GRID, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--distill-steps", type=int, default=300)
    p.add_argument("--estimator", help="estimator checkpoint directory (trained on the fly if absent)")
    p.add_argument("--estimator-steps", type=int, default=100_000)
    p.add_argument("--train-size", type=int, default=2000)
    p.add_argument("--dev-size", type=int, default=500)
    p.add_argument("--seed", type=int, default=seed)


def build_parser(seed=0):
    parser = argparse.ArgumentParser(prog="hexform", description="Transformer inference under a leveled HE arithmetic contract.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-estimator", help="train the softmax estimation network")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_estimator)

    p = sub.add_parser("finetune", help="run the approximation workflow on a synthetic task")
    _add_task_args(p, seed)
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sweep", help="dev metric and pre-LN magnitude across one hyper-parameter")
    _add_task_args(p, seed)
    p.add_argument("--param", choices=["mask-value", "weight-decay"], required=True)
    p.add_argument("--values", type=float, nargs="*", default=[])
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve", help="host encrypted inference sessions over TCP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7878)
    p.add_argument("--he-degree", type=int, choices=DEGREES, default=8192)
    p.add_argument("--he-coeffs", help="comma-separated bit widths from {20,30,60}")
    p.add_argument("--scale-bits", type=int, default=30)
    p.add_argument("--backend", choices=["shadow", "fixedpoint"], default="shadow")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("query", help="run one encrypted query against a server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7878)
    p.add_argument("--text", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--timeout", type=float, default=600.0)
    p.set_defaults(func=cmd_query)
    return parser


def main(argv=None):
    try:
        parser = build_parser(default_seed())
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except Failure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except _USAGE as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _CONTRACT as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (HexformError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
