"""Checkpoint files.

Layout::

    b"CFXM" | version (1 byte) | header length (uint32 LE) | JSON header | float64 LE payload

The header lists each component MLP with its spec; the payload concatenates
all parameters of all components in header order.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .models import (AttributeEditor, AttributePredictor, Classifier, LatentGenerator, Mlp,
                     MlpSpec)

MAGIC = b"CFXM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _header_for(model, extra: dict | None) -> tuple[dict, list[Mlp]]:
    comps = model.components()
    header = {
        "kind": model.kind,
        "components": [{"name": k, "spec": m.spec.to_dict()} for k, m in comps.items()],
        "metrics": getattr(model, "metrics", {}),
    }
    if isinstance(model, LatentGenerator):
        header["image_shape"] = list(model.image_shape)
    if isinstance(model, (AttributeEditor, AttributePredictor)):
        header["attribute_names"] = list(model.attribute_names)
    if isinstance(model, AttributeEditor):
        header["image_shape"] = list(model.image_shape)
        if model.predictor is not None:
            header["predictor_metrics"] = model.predictor.metrics
    header["param_count"] = sum(m.spec.param_count() for m in comps.values())
    if extra:
        header["extra"] = extra
    return header, list(comps.values())


def to_bytes(model, extra: dict | None = None) -> bytes:
    header, mlps = _header_for(model, extra)
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.concatenate([p.ravel() for m in mlps for p in m.params]).astype("<f8")
    return MAGIC + bytes([VERSION]) + struct.pack("<I", len(text)) + text + payload.tobytes()


def save_checkpoint(model, path: str | os.PathLike, extra: dict | None = None) -> None:
    data = to_bytes(model, extra)
    with open(path, "wb") as f:
        f.write(data)


def read_header(data: bytes) -> tuple[dict, int]:
    if len(data) < 9 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if data[4] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data[4]}")
    (n,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + n:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(data[9:9 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    for key in ("kind", "components", "param_count"):
        if key not in header:
            raise CheckpointError(f"header missing {key!r}")
    return header, 9 + n


def from_bytes(data: bytes, expected_kind: str | None = None):
    header, offset = read_header(data)
    kind = header["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"checkpoint holds a {kind!r}, expected {expected_kind!r}")
    specs = {c["name"]: MlpSpec.from_dict(c["spec"]) for c in header["components"]}
    declared = sum(s.param_count() for s in specs.values())
    if declared != header["param_count"]:
        raise CheckpointError("parameter count in header disagrees with component specs")
    body = data[offset:]
    if len(body) != 8 * declared:
        raise CheckpointError(f"payload holds {len(body) // 8} values, header declares {declared}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    mlps, pos = {}, 0
    for name, spec in specs.items():
        params = []
        for shape in spec.param_shapes():
            size = int(np.prod(shape))
            params.append(flat[pos:pos + size].reshape(shape).copy())
            pos += size
        mlps[name] = Mlp(spec, params)
    metrics = header.get("metrics", {})
    if kind == "classifier":
        return Classifier(mlps["mlp"], metrics)
    if kind == "latent_generator":
        return LatentGenerator(mlps["decoder"], tuple(header["image_shape"]),
                               encoder=mlps.get("encoder"), metrics=metrics)
    if kind == "attribute_predictor":
        return AttributePredictor(mlps["mlp"], header["attribute_names"], metrics)
    if kind == "attribute_editor":
        pred = None
        if "predictor" in mlps:
            pred = AttributePredictor(mlps["predictor"], header["attribute_names"],
                                      header.get("predictor_metrics", {}))
        return AttributeEditor(mlps["encoder"], mlps["decoder"], header["attribute_names"],
                               tuple(header["image_shape"]), predictor=pred, metrics=metrics)
    raise CheckpointError(f"unknown model kind {kind!r}")


def load_checkpoint(path: str | os.PathLike, expected_kind: str | None = None):
    with open(path, "rb") as f:
        return from_bytes(f.read(), expected_kind)
