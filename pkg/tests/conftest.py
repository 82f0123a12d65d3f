import numpy as np
import pytest
from hypothesis import settings

from hexform.estimator import train_estimator
from hexform.model import ModelConfig, TransformerModel
from hexform.norms import AffineNorm
from hexform.workflow import attach_affine, drop_ln, replace_ops

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")

ACCEPTANCE = {}


@pytest.fixture(scope="session")
def quick_estimator():
    est, _ = train_estimator(16, 0, steps=2000, strict=False)
    return est


def make_he_ready(estimator, seed=0, **config):
    """Random-init model pushed through the structural steps of the workflow
    (no training): ReLU, estimated softmax, calibrated-free affine norms."""
    cfg = ModelConfig(**config)
    model = replace_ops(TransformerModel.init(cfg, seed), estimator)
    rng = np.random.default_rng(seed + 1)
    affines = {
        s: AffineNorm.identity(cfg.hidden_size) for s in cfg.norm_sites()
    }
    for s, p in affines.items():
        p.gamma.data = 1.0 + 0.1 * rng.standard_normal(cfg.hidden_size)
        p.beta.data = 0.1 * rng.standard_normal(cfg.hidden_size)
    model = drop_ln(attach_affine(model, affines)).absorb_scale()
    model.vocab = [f"w{i}" for i in range(cfg.vocab_size)]
    return model


@pytest.fixture(scope="session")
def he_model(quick_estimator):
    return make_he_ready(quick_estimator)


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
