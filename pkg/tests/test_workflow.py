import hashlib

import numpy as np
import pytest

from hexform.data import SyntheticTaskSpec, gen_synthetic
from hexform.errors import EmptyCalibration, MissingAffineNorm
from hexform.model import ModelConfig, NormMode, TransformerModel
from hexform.norms import AffineNorm
from hexform.tensor import Tensor, backward, op_trace
from hexform.train import FinetuneConfig
from hexform.workflow import (
    WorkflowConfig, WorkflowSchedule, attach_affine, capture_norm_inputs, distill_mse, drop_ln,
    _site_loss, he_violations, init_affine_from_calibration, is_he_ready, ln_distill, replace_ops, run_workflow,
)

SMALL = dict(vocab_size=40, max_seq_len=16, hidden_size=16, num_heads=2, ffn_size=32)


@pytest.fixture(scope="module")
def tiny_task():
    spec = SyntheticTaskSpec(vocab_size=40, train_size=96, dev_size=32)
    return gen_synthetic(spec)


@pytest.fixture(scope="module")
def approx(quick_estimator):
    return replace_ops(TransformerModel.init(ModelConfig(**SMALL), 0), quick_estimator)


def digest(model, skip=()):
    h = hashlib.sha256()
    for k in sorted(model.params):
        if not any(s in k for s in skip):
            h.update(k.encode())
            h.update(np.ascontiguousarray(model.params[k].data).tobytes())
    return h.hexdigest()


def estimator_bytes(model):
    return b"".join(model.estimator.params[k].data.tobytes() for k in sorted(model.estimator.params))


def test_calibration_matches_formula(approx, tiny_task):
    train, _ = tiny_task
    batch = next(train.batches(32))
    # independent recomputation of the statistics from the captured activations
    raw = capture_norm_inputs(approx, batch)
    keep = ~batch.mask
    for stats in ("feature", "token"):
        out = init_affine_from_calibration(approx, [batch], stats)
        for site, x in raw.items():
            xs = x[keep]
            m, v = (xs.mean(0), xs.var(0)) if stats == "feature" else (xs.mean(-1).mean(), xs.var(-1).mean())
            gamma = approx.params[f"{site}.ln.gamma"].data
            beta = approx.params[f"{site}.ln.beta"].data
            g = gamma / np.sqrt(v + approx.config.ln_eps)
            np.testing.assert_allclose(out[site].gamma.data, g, rtol=1e-12)
            np.testing.assert_allclose(out[site].beta.data, beta - g * m, rtol=1e-12, atol=1e-12)


def test_calibration_trivial_cases(approx, tiny_task):
    train, _ = tiny_task
    batch = next(train.batches(8))
    model = approx.copy()
    eps = model.config.ln_eps
    for site in model.config.norm_sites():
        model.params[f"{site}.ln.gamma"].data = np.full(16, 2.0)
        model.params[f"{site}.ln.beta"].data = np.full(16, 0.5)
    # the embedding site sees the raw embeddings; make them constant so v = 0
    model.params["embed.token"].data = np.full_like(model.params["embed.token"].data, 3.0)
    model.params["embed.position"].data = np.zeros_like(model.params["embed.position"].data)
    out = init_affine_from_calibration(model, [batch])["embed"]
    np.testing.assert_allclose(out.gamma.data, 2.0 / np.sqrt(eps))
    assert np.isfinite(out.beta.data).all()


def test_calibration_on_unit_statistics_keeps_ln_params(approx, tiny_task, monkeypatch):
    # rows and columns of this +-1 pattern both have mean 0 and variance 1
    row = np.where(np.arange(16) % 2 == 0, 1.0, -1.0)
    x = np.stack([row, -row] * 8)
    batch = next(tiny_task[0].batches(1))
    batch.mask[:] = False
    monkeypatch.setattr("hexform.workflow.capture_norm_inputs",
                        lambda m, b: {s: x[None] for s in m.config.norm_sites()})
    eps = approx.config.ln_eps
    for stats in ("feature", "token"):
        out = init_affine_from_calibration(approx, [batch], stats)
        for site, p in out.items():
            gamma = approx.params[f"{site}.ln.gamma"].data
            np.testing.assert_allclose(p.gamma.data, gamma / np.sqrt(1 + eps), rtol=1e-15)
            np.testing.assert_allclose(p.gamma.data, gamma, rtol=1e-5)
            np.testing.assert_array_equal(p.beta.data, approx.params[f"{site}.ln.beta"].data)


def test_calibration_needs_a_batch(approx):
    with pytest.raises(EmptyCalibration):
        init_affine_from_calibration(approx, [])


def test_calibration_rejects_unknown_statistic(approx, tiny_task):
    with pytest.raises(ValueError):
        init_affine_from_calibration(approx, [next(tiny_task[0].batches(4))], "batch")


def test_distill_loss_has_a_fixed_point_at_exact_match(approx):
    # standardized rows make LN exactly affine, so the calibrated affine is optimal
    rng = np.random.default_rng(3)
    sites = approx.config.norm_sites()
    captured = {}
    for s in sites:
        x = rng.normal(size=(5, 16))
        captured[s] = (x - x.mean(-1, keepdims=True)) / x.std(-1, keepdims=True)
    eps = approx.config.ln_eps
    affines = {}
    for s in sites:
        g = approx.params[f"{s}.ln.gamma"].data / np.sqrt(1 + eps)
        affines[s] = AffineNorm(Tensor(g), Tensor(approx.params[f"{s}.ln.beta"].data))
    model = attach_affine(approx, affines)
    params = []
    for s in sites:
        for part in ("gamma", "beta"):
            p = model.params[f"{s}.affine.{part}"]
            p.requires_grad = True
            params.append(p)
    loss, per_site = _site_loss(model, captured)
    backward(loss)
    assert loss.item() < 1e-28
    for p in params:
        np.testing.assert_allclose(p.grad, 0.0, atol=1e-13)


def test_distill_touches_only_affine(approx, tiny_task):
    train, dev = tiny_task
    model = attach_affine(approx, init_affine_from_calibration(approx, [next(train.batches(32))]))
    before = digest(model, skip=(".affine.",))
    est = estimator_bytes(model)
    init_mse = np.mean(list(distill_mse(model, dev).values()))
    out, _ = ln_distill(model, train, steps=40, lr=1e-2)
    assert digest(out, skip=(".affine.",)) == before
    assert estimator_bytes(out) == est
    assert np.mean(list(distill_mse(out, dev).values())) < init_mse
    # the input model is untouched
    assert digest(model) != digest(out)


def test_distill_needs_affine(approx, tiny_task):
    with pytest.raises(MissingAffineNorm):
        ln_distill(approx, tiny_task[0], steps=1)


def test_drop_ln_requires_affine_everywhere(approx):
    with pytest.raises(MissingAffineNorm):
        drop_ln(approx)
    partial = attach_affine(approx, {"embed": AffineNorm.identity(16)})
    with pytest.raises(MissingAffineNorm, match="layers.0.attn"):
        drop_ln(partial)


def test_drop_ln_output_has_only_he_primitives(approx, tiny_task):
    affines = init_affine_from_calibration(approx, [next(tiny_task[0].batches(32))])
    dropped = drop_ln(attach_affine(approx, affines))
    assert dropped.config.norm_mode is NormMode.AFFINE
    assert not dropped.has_exact_ln()
    assert he_violations(dropped) == {}
    batch = next(tiny_task[1].batches(8))
    with op_trace() as tr:
        dropped(batch.tokens, mask=batch.mask)
    assert tr.primitives == {"add", "mul", "relu"}
    assert not is_he_ready(dropped.copy(norm_mode=NormMode.LAYERNORM))


def test_affine_and_exact_paths_share_the_first_norm_input(approx, tiny_task):
    # the embed site input is independent of the norm choice, so LN vs affine is the only difference there
    affines = init_affine_from_calibration(approx, [next(tiny_task[0].batches(32))])
    both = attach_affine(approx, affines)
    batch = next(tiny_task[1].batches(8))
    cap = {}
    both.copy(norm_mode=NormMode.AFFINE)(batch.tokens, mask=batch.mask, capture=cap)
    exact = capture_norm_inputs(both, batch)
    np.testing.assert_array_equal(cap["embed"].data, exact["embed"])


def test_replace_ops_is_idempotent(approx, quick_estimator):
    again = replace_ops(approx, quick_estimator)
    assert again.config == approx.config
    assert digest(again) == digest(approx)
    assert estimator_bytes(again) == estimator_bytes(approx)
    assert again.estimator.frozen


@pytest.mark.parametrize("schedule", list(WorkflowSchedule))
def test_every_schedule_ends_he_ready(schedule, quick_estimator, tiny_task):
    train, dev = tiny_task
    start = TransformerModel.init(ModelConfig(**SMALL), 1)
    hp = WorkflowConfig(finetune=FinetuneConfig(epochs=1, batch_size=32), distill_steps=5)
    est_before = b"".join(quick_estimator.params[k].data.tobytes() for k in sorted(quick_estimator.params))
    model, metrics = run_workflow(start, train, dev, schedule, quick_estimator, hp)
    assert is_he_ready(model)
    assert model.config.scale_absorbed
    assert "relu-s-l" in metrics
    assert model.estimator.frozen
    frozen = schedule in (WorkflowSchedule.TWO_STAGES, WorkflowSchedule.JOINT_FT_LN)
    assert (estimator_bytes(model) == est_before) is frozen
    if schedule in (WorkflowSchedule.TWO_STAGES, WorkflowSchedule.JOINT_FT_S):
        assert {"relu-s", "max-pre-ln", "distill-init-mse", "distill-mse"} <= set(metrics)
