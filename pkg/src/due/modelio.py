"""Single-file binary model container.

Layout (all integers little-endian)::

    magic    8 bytes   b"DUEMODEL"
    version  uint32
    hlen     uint32    length of the JSON header in bytes
    header   hlen bytes UTF-8 JSON: configs, GP metadata, scaler flag, array index
    arrays   for each entry of header["arrays"], in order:
               nlen uint32, name (UTF-8), ndim uint32, shape (ndim x uint64),
               count uint64, data (count x float64 little-endian)
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import gp as G
from .datasets import Scaler
from .features import FeatureExtractor, FeatureExtractorConfig
from .training import DUEModel, TrainConfig, substream

MAGIC = b"DUEMODEL"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Raised for files that are not model containers or use another format version."""


def _write_array(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    encoded = name.encode()
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(struct.pack("<Q", arr.size))
    buf.write(arr.tobytes())


def _read_exact(fh, size: int) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise ModelFormatError("truncated model file")
    return data


def _read_array(fh) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, nlen).decode()
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    (count,) = struct.unpack("<Q", _read_exact(fh, 8))
    if int(np.prod(shape, dtype=np.int64)) != count:
        raise ModelFormatError(f"array {name!r}: shape {shape} does not match {count} values")
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)
    return name, data.reshape(shape)


def model_arrays(model: DUEModel) -> dict[str, np.ndarray]:
    arrays = {f"extractor/{k}": v for k, v in model.extractor.state().items()}
    arrays.update({f"gp/{k}": v for k, v in model.gp.state().items()})
    if model.scaler is not None:
        arrays["scaler/mean"] = np.asarray(model.scaler.mean)
        arrays["scaler/std"] = np.asarray(model.scaler.std)
    return arrays


def save_model(model: DUEModel, path) -> None:
    arrays = model_arrays(model)
    lik = model.gp.likelihood
    header = {
        "feature_extractor": asdict(model.extractor.config),
        "train": asdict(model.config),
        "gp": {
            "kernel": model.gp.kernel,
            "num_outputs": model.gp.num_outputs,
            "likelihood": "softmax" if isinstance(lik, G.SoftmaxLikelihood) else "gaussian",
            "mc_samples": getattr(lik, "mc_samples", None),
        },
        "arrays": list(arrays),
    }
    encoded = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(encoded)))
    buf.write(encoded)
    for name, arr in arrays.items():
        _write_array(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> DUEModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    with path.open("rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ModelFormatError(f"{path} is not a model file (bad magic)")
        version, hlen = struct.unpack("<II", _read_exact(fh, 8))
        if version != FORMAT_VERSION:
            raise ModelFormatError(f"model format version {version} is not supported (expected {FORMAT_VERSION})")
        header = json.loads(_read_exact(fh, hlen).decode())
        arrays = dict(_read_array(fh) for _ in header["arrays"])
    fe_config = FeatureExtractorConfig(**header["feature_extractor"])
    cfg = TrainConfig(**header["train"])
    extractor = FeatureExtractor(fe_config, substream(cfg.seed, "weights"))
    extractor.load_state({k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("extractor/")})
    meta = header["gp"]
    if meta["likelihood"] == "softmax":
        lik = G.SoftmaxLikelihood(meta["num_outputs"], meta["mc_samples"])
    else:
        lik = G.GaussianLikelihood.create()
    gp = G.SVGP(arrays["gp/Z"], meta["num_outputs"], meta["kernel"], 1.0, 1.0, lik)
    gp.load_state({k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("gp/")})
    scaler = Scaler(arrays["scaler/mean"], arrays["scaler/std"]) if "scaler/mean" in arrays else None
    return DUEModel(extractor, gp, cfg, scaler)
