"""Model files: layer specs plus base64-encoded little-endian float32
parameters in one JSON document. The byte encoding is platform independent
and the parameter round trip is bit-exact, so models can move between
machines (and implementations) without rounding.
"""

from __future__ import annotations

import base64
import binascii
import json
from pathlib import Path

import numpy as np

from .network import LayerSpec, Network
from .optim import AdaGradState

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def encode_f32(arr: np.ndarray) -> str:
    """Little-endian float32 bytes, base64."""
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_f32(data: str, shape: tuple) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ModelFormatError(f"corrupt base64 parameter data: {exc}") from exc
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ModelFormatError(f"parameter blob is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def encode_f64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def decode_f64(data: str, shape: tuple) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ModelFormatError(f"corrupt base64 optimizer data: {exc}") from exc
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise ModelFormatError(f"optimizer blob is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def serialize_model(net: Network, include_optimizer: bool = False) -> dict:
    """Network -> JSON-ready document."""
    doc: dict = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "alpha": net.alpha,
        "beta": net.beta,
        "layers": [spec.to_doc() for spec in net.specs],
        "params": {
            key: {"shape": list(arr.shape), "data": encode_f32(arr)}
            for key, arr in net.parameters().items()
        },
    }
    if include_optimizer:
        doc["optimizer"] = {
            key: {"shape": list(st.accum.shape), "data": encode_f64(st.accum)}
            for key, st in net.opt_states.items()
            if st.accum is not None
        }
    return doc


def deserialize_model(doc: dict) -> Network:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported format version {doc.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    specs = [LayerSpec.from_doc(d) for d in doc["layers"]]
    net = Network.from_specs(
        specs,
        tuple(doc["input_shape"]),
        seed=0,
        alpha=doc.get("alpha", 0.01),
        beta=doc.get("beta", 1.0),
    )
    params = net.parameters()
    if set(doc["params"]) != set(params):
        raise ModelFormatError(
            f"parameter keys {sorted(doc['params'])} do not match layers {sorted(params)}"
        )
    for key, entry in doc["params"].items():
        arr = decode_f32(entry["data"], tuple(entry["shape"]))
        if arr.shape != params[key].shape:
            raise ModelFormatError(f"{key}: shape {arr.shape} != {params[key].shape}")
        i, name = key.split(":")
        net.layers[int(i)].params[name] = arr
    for key, entry in doc.get("optimizer", {}).items():
        if key not in net.opt_states:
            raise ModelFormatError(f"optimizer state for unknown parameter {key}")
        net.opt_states[key] = AdaGradState(
            net.alpha, net.beta, decode_f64(entry["data"], tuple(entry["shape"]))
        )
    return net


def save_model(net: Network, path, include_optimizer: bool = False) -> None:
    Path(path).write_text(json.dumps(serialize_model(net, include_optimizer), sort_keys=True))


def load_model(path) -> Network:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"not a JSON model file: {exc}") from exc
    return deserialize_model(doc)
