import numpy as np
import pytest

from conftest import make_he_ready
from hexform.checkpoint import BLOB, MANIFEST, load_estimator, load_model, read_manifest, save_estimator, save_model
from hexform.errors import CheckpointError
from hexform.estimator import estimate_softmax, train_estimator
from hexform.model import ModelConfig, TransformerModel
from hexform.tensor import Tensor


def assert_same_params(a, b, atol):
    assert list(a.params) == list(b.params)
    for name in a.params:
        np.testing.assert_allclose(b.params[name].data, a.params[name].data, atol=atol, err_msg=name)


def test_exact_model_round_trip(tmp_path):
    cfg = ModelConfig(num_layers=1, hidden_size=32, num_heads=2, ffn_size=64, max_seq_len=8,
                      vocab_size=30, token_level=True, num_labels=3, mask_value=-4.5)
    model = TransformerModel.init(cfg, 3)
    save_model(model, tmp_path)
    back = load_model(tmp_path)
    assert back.config == cfg and back.estimator is None
    assert_same_params(model, back, 1e-6)
    entries = read_manifest(tmp_path)
    assert entries["sections"] == "model"
    floats = sum(p.data.size for p in model.params.values())
    assert (tmp_path / BLOB).stat().st_size == 4 * floats
    ids = np.array([2, 5, 6, 0, 0, 0, 0, 0])
    mask = ids == 0
    np.testing.assert_allclose(back(ids, mask=mask).data, model(ids, mask=mask).data, atol=1e-5)


def test_he_ready_round_trip_keeps_every_section(tmp_path, quick_estimator):
    model = make_he_ready(quick_estimator)
    save_model(model, tmp_path)
    back = load_model(tmp_path)
    assert read_manifest(tmp_path)["sections"] == "model,affine,estimator"
    assert_same_params(model, back, 1e-6)
    assert back.estimator.dim == quick_estimator.dim
    assert back.vocab == model.vocab
    ids = np.arange(16) % 7 + 2
    np.testing.assert_allclose(back(ids).data, model(ids).data, atol=1e-4)


def test_estimator_checkpoints_are_byte_identical(tmp_path):
    blobs = []
    for i in range(2):
        est, report = train_estimator(8, 11, steps=300, strict=False)
        out = save_estimator(est, tmp_path / str(i), report)
        blobs.append(((out / MANIFEST).read_bytes(), (out / BLOB).read_bytes()))
        assert (out / "report.txt").exists()
    assert blobs[0] == blobs[1]
    back = load_estimator(tmp_path / "0")
    assert back.dim == 8
    x = np.random.default_rng(0).uniform(-3, 3, (5, 8))
    np.testing.assert_allclose(estimate_softmax(Tensor(x), back).data, estimate_softmax(Tensor(x), est).data, atol=1e-5)


def test_damaged_checkpoints_are_rejected(tmp_path):
    model = TransformerModel.init(ModelConfig(num_layers=1, hidden_size=16, num_heads=2, ffn_size=32,
                                              max_seq_len=4, vocab_size=10), 0)
    save_model(model, tmp_path)
    blob = (tmp_path / BLOB).read_bytes()
    (tmp_path / BLOB).write_bytes(blob[:-4])
    with pytest.raises(CheckpointError):
        load_model(tmp_path)
    (tmp_path / BLOB).write_bytes(blob + b"\0\0\0\0")
    with pytest.raises(CheckpointError):
        load_model(tmp_path)
    (tmp_path / BLOB).write_bytes(blob)
    manifest = (tmp_path / MANIFEST).read_text()
    (tmp_path / MANIFEST).write_text(manifest.replace("format_version=1", "format_version=9"))
    with pytest.raises(CheckpointError):
        load_model(tmp_path)
    (tmp_path / MANIFEST).write_text(manifest + "config.colour=red\n")
    with pytest.raises(CheckpointError):
        load_model(tmp_path)
    (tmp_path / MANIFEST).write_text(manifest)
    with pytest.raises(CheckpointError):
        load_estimator(tmp_path)
