"""Task fine-tuning loop, prediction and dev metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import TaskKind
from .optim import AdamW
from .tensor import backward, blas_matmul, cross_entropy, mse_loss, reshape

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 5
    weight_decay: float = 0.1
    seed: int = 0


def task_loss(model, batch):
    logits = model(batch.tokens, mask=batch.mask)
    if batch.kind is TaskKind.REGRESS:
        return mse_loss(reshape(logits, (len(batch),)), batch.labels)
    if batch.kind is TaskKind.TAG:
        return cross_entropy(logits, batch.labels, weights=~batch.mask)
    return cross_entropy(logits, batch.labels)


def predict(model, ds, batch_size=256):
    with blas_matmul():
        return np.concatenate([model(b.tokens, mask=b.mask).data for b in ds.batches(batch_size)])


def pearson(pred, target):
    p, t = pred - pred.mean(), target - target.mean()
    denom = np.sqrt((p * p).sum() * (t * t).sum())
    return float((p * t).sum() / denom) if denom > 0 else 0.0


def token_f1(pred, gold, mask):
    """Micro F1 over non-O (non-zero) tags at unpadded positions."""
    keep = ~mask
    p, g = pred[keep], gold[keep]
    tp = np.sum((p == g) & (g != 0))
    n_pred, n_gold = np.sum(p != 0), np.sum(g != 0)
    if tp == 0:
        return 0.0
    prec, rec = tp / n_pred, tp / n_gold
    return float(2 * prec * rec / (prec + rec))


def metric_from_logits(logits, ds):
    """Dev metric on a 0-100 scale: accuracy, Pearson x100, or token F1 x100."""
    if ds.kind is TaskKind.REGRESS:
        return 100.0 * pearson(logits.reshape(-1), ds.labels)
    if ds.kind is TaskKind.TAG:
        return 100.0 * token_f1(logits.argmax(-1), ds.labels, ds.mask)
    return 100.0 * float(np.mean(logits.argmax(-1) == ds.labels))


def evaluate(model, ds):
    return metric_from_logits(predict(model, ds), ds)


def fine_tune(model, train, dev, cfg, trainable=lambda name: True, select_best=True):
    """Train a copy of ``model``; returns (model, per-epoch dev metrics).

    Only parameters whose name passes ``trainable`` receive updates. With
    ``select_best`` the returned weights are those of the best dev epoch.
    """
    model = model.copy()
    params = model.parameters()
    chosen = []
    for name, p in params.items():
        p.requires_grad = bool(trainable(name))
        if p.requires_grad:
            chosen.append(p)
    opt = AdamW(chosen, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history, best, best_state = [], -np.inf, None
    for epoch in range(cfg.epochs):
        with blas_matmul():
            for batch in train.batches(cfg.batch_size, seed=cfg.seed * 1000 + epoch):
                opt.zero_grad()
                loss = task_loss(model, batch)
                backward(loss)
                opt.step()
        metric = evaluate(model, dev)
        history.append(metric)
        log.info("epoch %d dev %.2f", epoch, metric)
        if select_best and metric > best:
            best = metric
            best_state = {k: p.data for k, p in params.items()}
    if select_best and best_state is not None:
        for k, p in params.items():
            p.data = best_state[k]
    for p in params.values():
        p.requires_grad = False
        p.grad = None
    return model, history
