"""Checkpoint directories: ``manifest.txt`` plus ``params.bin``.

The manifest is key=value text. Every parameter gets one inventory line::

    param.<name>=<dims joined by x> float32 <byte offset>

and ``params.bin`` is the little-endian float32 concatenation in manifest
order. Exact-model parameters come first, then the affine-norm section, then
the estimator section (names prefixed ``estimator.``). An optional
``vocab.txt`` holds one token per line.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .estimator import SoftmaxEstimator
from .model import ModelConfig, TransformerModel
from .tensor import Tensor

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
BLOB = "params.bin"
VOCAB = "vocab.txt"


def _config_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if hasattr(v, "value"):
        return v.value
    return repr(v) if isinstance(v, float) else str(v)


def _parse_config(fields):
    types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    out = {}
    for k, raw in fields.items():
        if k not in types:
            raise CheckpointError(f"unknown config field {k!r}")
        t = str(types[k])
        if t == "bool":
            out[k] = raw == "true"
        elif t == "int":
            out[k] = int(raw)
        elif t == "float":
            out[k] = float(raw)
        else:
            out[k] = raw
    return ModelConfig(**out)


def _sections(model):
    plain, affine = [], []
    for name in model.params:
        (affine if ".affine." in name else plain).append(name)
    return plain, affine


def _write(directory, header, tensors, vocab=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"format_version={FORMAT_VERSION}"] + [f"{k}={v}" for k, v in header]
    chunks, offset = [], 0
    for name, arr in tensors:
        a = np.ascontiguousarray(arr, dtype="<f4")
        dims = "x".join(str(d) for d in a.shape) or "scalar"
        lines.append(f"param.{name}={dims} float32 {offset}")
        chunks.append(a.tobytes())
        offset += a.nbytes
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    (directory / BLOB).write_bytes(b"".join(chunks))
    if vocab is not None:
        (directory / VOCAB).write_text("".join(f"{w}\n" for w in vocab), encoding="utf-8")
    return directory


def read_manifest(directory):
    entries = {}
    for n, line in enumerate((Path(directory) / MANIFEST).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"manifest line {n} is not key=value")
        entries[key] = value
    if entries.get("format_version") != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported checkpoint format {entries.get('format_version')!r}")
    return entries


def _read_params(directory, entries):
    blob = (Path(directory) / BLOB).read_bytes()
    params, expected = {}, 0
    for key, value in entries.items():
        if not key.startswith("param."):
            continue
        dims, dtype, offset = value.split()
        if dtype != "float32":
            raise CheckpointError(f"unsupported dtype {dtype}")
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        count = int(np.prod(shape))
        offset = int(offset)
        if offset != expected or offset + 4 * count > len(blob):
            raise CheckpointError(f"inventory entry {key} does not match the blob")
        params[key[len("param."):]] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        expected = offset + 4 * count
    if expected != len(blob):
        raise CheckpointError(f"blob has {len(blob)} bytes, inventory covers {expected}")
    return params


def _vocab(directory):
    path = Path(directory) / VOCAB
    return path.read_text(encoding="utf-8").splitlines() if path.exists() else None


def save_model(model, directory):
    plain, affine = _sections(model)
    header = [(f"config.{f.name}", _config_value(getattr(model.config, f.name)))
              for f in dataclasses.fields(ModelConfig)]
    header.append(("sections", ",".join(
        ["model"] + (["affine"] if affine else []) + (["estimator"] if model.estimator is not None else []))))
    tensors = [(n, model.params[n].data) for n in plain + affine]
    if model.estimator is not None:
        header.append(("estimator.dim", str(model.estimator.dim)))
        tensors += [(f"estimator.{k}", v.data) for k, v in model.estimator.params.items()]
    return _write(directory, header, tensors, model.vocab)


def load_model(directory):
    entries = read_manifest(directory)
    config = _parse_config({k[len("config."):]: v for k, v in entries.items() if k.startswith("config.")})
    raw = _read_params(directory, entries)
    params, est_params = {}, {}
    for name, arr in raw.items():
        if name.startswith("estimator."):
            est_params[name[len("estimator."):]] = Tensor(arr)
        else:
            params[name] = Tensor(arr)
    estimator = None
    if est_params:
        estimator = SoftmaxEstimator(int(entries["estimator.dim"]), est_params)
    return TransformerModel(config, params, estimator, _vocab(directory))


def save_estimator(estimator, directory, report=None):
    header = [("kind", "estimator"), ("estimator.dim", str(estimator.dim))]
    tensors = [(f"estimator.{k}", v.data) for k, v in estimator.params.items()]
    out = _write(directory, header, tensors)
    if report is not None:
        (out / "report.txt").write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    return out


def load_estimator(directory):
    entries = read_manifest(directory)
    if "estimator.dim" not in entries:
        raise CheckpointError("checkpoint has no estimator section")
    raw = _read_params(directory, entries)
    params = {k[len("estimator."):]: Tensor(v) for k, v in raw.items() if k.startswith("estimator.")}
    return SoftmaxEstimator(int(entries["estimator.dim"]), params)
