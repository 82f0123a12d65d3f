"""Turning an exact model into an add/mul/ReLU-only one.

Stages: swap GELU and softmax for ReLU and the estimator, fine-tune, attach
affine norms (calibrated, then distilled from the exact LayerNorms), drop the
exact LayerNorms. Four schedules order these stages differently.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import EmptyCalibration, MissingAffineNorm, NonFiniteLoss, NonFiniteValue
from .model import ActivationMode, NormMode, SoftmaxMode
from .norms import AffineNorm, affine_norm_forward, ln_forward
from .optim import AdamW
from .tensor import HE_PRIMITIVES, Tensor, add, backward, blas_matmul, mse_loss, op_trace
from .train import FinetuneConfig, evaluate, fine_tune

log = logging.getLogger(__name__)


class WorkflowSchedule(str, Enum):
    TWO_STAGES = "two-stages"
    JOINT_FT_S = "joint-s"
    JOINT_FT_LN = "joint-ln"
    JOINT_FT_S_LN = "joint-s-ln"


def replace_ops(model, estimator):
    """ReLU activation and estimated softmax; weights are left as they are."""
    out = model.copy(activation_mode=ActivationMode.RELU, softmax_mode=SoftmaxMode.ESTIMATED)
    out.estimator = estimator.copy(frozen=True)
    return out


def _exact_view(model):
    if not model.has_exact_ln():
        raise MissingAffineNorm("model has no exact LayerNorm to read from")
    # shares tensors with ``model``; only used for read-only passes
    return type(model)(model.config.replace(norm_mode=NormMode.LAYERNORM), model.params, model.estimator, model.vocab)


def capture_norm_inputs(model, batch):
    """Inputs to every norm site on the exact-LayerNorm path."""
    cap = {}
    with blas_matmul():
        _exact_view(model)(batch.tokens, mask=batch.mask, capture=cap)
    return {k: v.data for k, v in cap.items()}


def init_affine_from_calibration(model, batches, stats="feature"):
    """Affine params that freeze each LayerNorm's statistics at calibration
    averages: gamma/sqrt(v+eps) and beta - gamma_t * m.

    ``stats="feature"``: m, v are per-feature mean and variance over all
    unpadded calibration tokens (vectors). ``stats="token"``: each token's own
    mean and variance, averaged over tokens (scalars broadcast to every feature).
    """
    if stats not in ("feature", "token"):
        raise ValueError(f"stats must be 'feature' or 'token', got {stats!r}")
    batches = list(batches)
    if not batches:
        raise EmptyCalibration("need at least one calibration batch")
    rows = {}
    for batch in batches:
        keep = ~batch.mask
        for site, x in capture_norm_inputs(model, batch).items():
            rows.setdefault(site, []).append(x[keep])
    eps = model.config.ln_eps
    out = {}
    for site in model.config.norm_sites():
        xs = np.concatenate(rows.get(site, [np.zeros((0, model.config.hidden_size))]))
        if len(xs) == 0:
            raise EmptyCalibration(f"no unpadded tokens reached {site}")
        if stats == "feature":
            m, v = xs.mean(0), xs.var(0)
        else:
            m, v = xs.mean(-1).mean(), xs.var(-1).mean()
        gamma = model.params[f"{site}.ln.gamma"].data
        beta = model.params[f"{site}.ln.beta"].data
        g = gamma / np.sqrt(v + eps)
        out[site] = AffineNorm(Tensor(g), Tensor(beta - g * m))
    return out


def attach_affine(model, affines):
    out = model.copy()
    for site, p in affines.items():
        out.params[f"{site}.affine.gamma"] = Tensor(p.gamma.data)
        out.params[f"{site}.affine.beta"] = Tensor(p.beta.data)
    return out


def _site_loss(model, captured):
    eps = model.config.ln_eps
    total, per_site = None, {}
    for site, x in captured.items():
        xt = Tensor(x)
        teacher = ln_forward(xt, model.params[f"{site}.ln.gamma"].data, model.params[f"{site}.ln.beta"].data, eps)
        loss = mse_loss(affine_norm_forward(xt, model.affine(site)), teacher.data)
        per_site[site] = loss.item()
        total = loss if total is None else add(total, loss)
    return total, per_site


def distill_mse(model, ds, batch_size=64):
    """Mean per-site output MSE between exact LayerNorm and affine norm."""
    acc = {}
    n = 0
    for batch in ds.batches(batch_size):
        _, per = _site_loss(model, capture_norm_inputs(model, batch))
        for k, v in per.items():
            acc[k] = acc.get(k, 0.0) + v * len(batch)
        n += len(batch)
    return {k: v / n for k, v in acc.items()}


def max_pre_ln_activation(model, ds, batch_size=64):
    peak = 0.0
    for batch in ds.batches(batch_size):
        for x in capture_norm_inputs(model, batch).values():
            peak = max(peak, float(np.abs(x).max()))
    return peak


@dataclass
class DistillReport:
    steps: int
    final_loss: float
    per_site_loss: dict = field(default_factory=dict)


def ln_distill(model, data, steps=300, lr=1e-3, batch_size=32, seed=0):
    """Train only the affine norms to reproduce each exact LayerNorm's output.

    The loss is the sum over norm sites of the per-site output MSE, with both
    norms fed the same (exact-path) input. Everything else stays frozen.
    """
    if not model.has_affine():
        raise MissingAffineNorm("attach affine norms before distilling")
    model = model.copy()
    sites = model.config.norm_sites()
    params = []
    for s in sites:
        for part in ("gamma", "beta"):
            p = model.params[f"{s}.affine.{part}"]
            p.requires_grad = True
            params.append(p)
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    step, epoch, per_site, final = 0, 0, {}, float("nan")
    try:
        while step < steps:
            for batch in data.batches(batch_size, seed=seed * 7919 + epoch):
                if step >= steps:
                    break
                opt.zero_grad()
                loss, per_site = _site_loss(model, capture_norm_inputs(model, batch))
                backward(loss)
                opt.step()
                final = loss.item()
                step += 1
            epoch += 1
    except NonFiniteValue as exc:
        raise NonFiniteLoss(
            f"LN-distill hit non-finite values ({exc}); attention outputs overflowed, "
            "raise weight_decay during fine-tuning"
        ) from exc
    for p in params:
        p.requires_grad = False
        p.grad = None
    return model, DistillReport(step, final, per_site)


def drop_ln(model):
    """Remove the exact LayerNorms; forward routes through affine norms only."""
    missing = [s for s in model.config.norm_sites() if f"{s}.affine.gamma" not in model.params]
    if missing:
        raise MissingAffineNorm(f"no affine norm at {', '.join(missing)}")
    out = model.copy(norm_mode=NormMode.AFFINE)
    for s in model.config.norm_sites():
        out.params.pop(f"{s}.ln.gamma", None)
        out.params.pop(f"{s}.ln.beta", None)
    return out


def he_violations(model):
    """Primitives outside {add, mul, relu} in a forward pass, with the first site each appeared."""
    cfg = model.config
    emb = Tensor(np.zeros((cfg.max_seq_len, cfg.hidden_size)))
    with op_trace() as tr:
        model(embeddings=emb, mask=np.zeros(cfg.max_seq_len, dtype=bool))
    return tr.illegal(HE_PRIMITIVES)


def is_he_ready(model):
    cfg = model.config
    return (
        cfg.activation_mode is ActivationMode.RELU
        and cfg.softmax_mode is SoftmaxMode.ESTIMATED
        and cfg.norm_mode is NormMode.AFFINE
        and not any(k.endswith(".ln.gamma") for k in model.params)
        and not he_violations(model)
    )


@dataclass
class WorkflowConfig:
    finetune: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(lr=3e-4, epochs=3))
    distill_steps: int = 300
    distill_lr: float = 1e-2
    distill_batch: int = 32
    calibration_batches: int = 4
    calibration_stats: str = "feature"
    seed: int = 0


def _trainable(model, train_estimator):
    affine = model.config.norm_mode is NormMode.AFFINE

    def pick(name):
        if name.startswith("estimator."):
            return train_estimator
        if ".ln." in name:
            return not affine
        if ".affine." in name:
            return affine
        return True

    return pick


def run_workflow(pretrained, train, dev, schedule, estimator, hp=None):
    """Returns ``(he_ready_model, metrics)``; metrics maps stage name to dev metric."""
    hp = hp or WorkflowConfig()
    schedule = WorkflowSchedule(schedule)
    train_s = schedule in (WorkflowSchedule.JOINT_FT_S, WorkflowSchedule.JOINT_FT_S_LN)
    joint_ln = schedule in (WorkflowSchedule.JOINT_FT_LN, WorkflowSchedule.JOINT_FT_S_LN)
    metrics = {}

    model = replace_ops(pretrained, estimator)
    model.estimator.frozen = not train_s
    calib = list(train.batches(hp.distill_batch, seed=hp.seed))[: hp.calibration_batches]
    if joint_ln:
        model = attach_affine(model, init_affine_from_calibration(model, calib, hp.calibration_stats))
        model = model.copy(norm_mode=NormMode.AFFINE)
        model, hist = fine_tune(model, train, dev, hp.finetune, _trainable(model, train_s))
        metrics["relu-s-l"] = evaluate(model, dev)
    else:
        model, hist = fine_tune(model, train, dev, hp.finetune, _trainable(model, train_s))
        metrics["relu-s"] = evaluate(model, dev)
        metrics["max-pre-ln"] = max_pre_ln_activation(model, dev)
        model = attach_affine(model, init_affine_from_calibration(model, calib, hp.calibration_stats))
        metrics["distill-init-mse"] = float(np.mean(list(distill_mse(model, dev).values())))
        model, _ = ln_distill(model, train, hp.distill_steps, hp.distill_lr, hp.distill_batch, hp.seed)
        metrics["distill-mse"] = float(np.mean(list(distill_mse(model, dev).values())))
    model.estimator.frozen = True
    model = drop_ln(model).absorb_scale()
    if not joint_ln:
        metrics["relu-s-l"] = evaluate(model, dev)
    return model, metrics
