"""Post-training dynamic int8 weight quantization and latency benchmarks.

Linear-layer weights are stored as int8 with one symmetric per-tensor
scale (zero-point 0); biases, norms, and embeddings stay float32, and
activations are never quantized. Inference dequantizes on the fly and is
numerically equivalent to running the dequantized weights.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .audio_io import AudioClip
from .errors import CheckpointError
from .model import ModelConfig, ModelParams, count_params, forward, save_checkpoint

_QUANT_SUFFIX = "_w"  # every linear weight tensor


def quantized_tensor_names(cfg: ModelConfig) -> list[str]:
    return [n for n in model_mod.param_shapes(cfg) if n.endswith(_QUANT_SUFFIX)]


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class QuantizedParams:
    """int8 linear weights with per-tensor scales; everything else float32."""

    cfg: ModelConfig
    int8_weights: dict[str, np.ndarray]
    scales: dict[str, float]
    float_tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    _dequantized: ModelParams | None = field(default=None, repr=False)

    def dequantize(self) -> ModelParams:
        """Materialize float parameters (cached) for running the forward pass."""
        if self._dequantized is None:
            tensors = {k: v.copy() for k, v in self.float_tensors.items()}
            for name, q in self.int8_weights.items():
                tensors[name] = (q.astype(np.float64) * self.scales[name]).astype(np.float32)
            self._dequantized = ModelParams(self.cfg, tensors)
        return self._dequantized


def quantize_dynamic(params: ModelParams, metadata: dict | None = None) -> QuantizedParams:
    """Symmetric per-tensor int8 quantization of every linear weight.

    scale = max|W| / 127 and values round half away from zero, so the
    element-wise dequantization error is bounded by scale / 2. All-zero
    tensors quantize to zeros with scale 1.
    """
    int8_weights: dict[str, np.ndarray] = {}
    scales: dict[str, float] = {}
    float_tensors: dict[str, np.ndarray] = {}
    quantized = set(quantized_tensor_names(params.cfg))
    for name, tensor in params.tensors.items():
        if name not in quantized:
            float_tensors[name] = tensor.copy()
            continue
        amax = float(np.max(np.abs(tensor.astype(np.float64))))
        scale = amax / 127.0 if amax > 0.0 else 1.0
        scale = float(np.float32(scale))
        q = _round_half_away(tensor.astype(np.float64) / scale)
        int8_weights[name] = np.clip(q, -127, 127).astype(np.int8)
        scales[name] = scale
    return QuantizedParams(params.cfg, int8_weights, scales, float_tensors,
                           metadata or {})


def qforward(qparams: QuantizedParams, batch: np.ndarray) -> np.ndarray:
    """Eval-mode forward pass through the quantized model."""
    return forward(qparams.dequantize(), batch, training=False)


# ---------------------------------------------------------------------------
# Quantized checkpoint: magic "TSCQ", config, dtype-tagged tensor table
# ---------------------------------------------------------------------------

_QCKPT_MAGIC = b"TSCQ"
_QCKPT_VERSION = 1
_DTYPE_F32 = 0
_DTYPE_I8 = 1


def save_quantized(path, qparams: QuantizedParams) -> None:
    cfg_blob = json.dumps(
        {f.name: getattr(qparams.cfg, f.name) for f in qparams.cfg.__dataclass_fields__.values()},
        sort_keys=True,
    ).encode("utf-8")
    meta_blob = json.dumps(qparams.metadata, sort_keys=True).encode("utf-8")
    entries = [(n, qparams.float_tensors[n], None) for n in qparams.float_tensors]
    entries += [(n, qparams.int8_weights[n], qparams.scales[n]) for n in qparams.int8_weights]
    with open(path, "wb") as fh:
        fh.write(_QCKPT_MAGIC)
        fh.write(struct.pack("<I", _QCKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, tensor, scale in entries:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            if scale is None:
                fh.write(struct.pack("<Bf", _DTYPE_F32, 0.0))
                payload = np.ascontiguousarray(tensor, dtype="<f4").tobytes()
            else:
                fh.write(struct.pack("<Bf", _DTYPE_I8, scale))
                payload = np.ascontiguousarray(tensor, dtype=np.int8).tobytes()
            fh.write(struct.pack("<B", tensor.ndim))
            for dim in tensor.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(payload)


def load_quantized(path) -> QuantizedParams:
    def read_exact(fh, n, what):
        data = fh.read(n)
        if len(data) < n:
            raise CheckpointError(f"truncated quantized checkpoint while reading {what}")
        return data

    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _QCKPT_MAGIC:
            raise CheckpointError(f"bad quantized-checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", read_exact(fh, 4, "version"))
        if version != _QCKPT_VERSION:
            raise CheckpointError(f"quantized checkpoint version {version} unsupported")
        (cfg_len,) = struct.unpack("<I", read_exact(fh, 4, "config"))
        cfg = ModelConfig(**json.loads(read_exact(fh, cfg_len, "config").decode("utf-8")))
        (meta_len,) = struct.unpack("<I", read_exact(fh, 4, "metadata"))
        metadata = json.loads(read_exact(fh, meta_len, "metadata").decode("utf-8"))
        (count,) = struct.unpack("<I", read_exact(fh, 4, "tensor count"))
        int8_weights, scales, float_tensors = {}, {}, {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", read_exact(fh, 2, "name"))
            name = read_exact(fh, name_len, "name").decode("utf-8")
            dtype_tag, scale = struct.unpack("<Bf", read_exact(fh, 5, name))
            (ndim,) = struct.unpack("<B", read_exact(fh, 1, name))
            shape = tuple(struct.unpack("<I", read_exact(fh, 4, name))[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            if dtype_tag == _DTYPE_I8:
                payload = read_exact(fh, size, name)
                int8_weights[name] = np.frombuffer(payload, dtype=np.int8).reshape(shape).copy()
                scales[name] = float(scale)
            elif dtype_tag == _DTYPE_F32:
                payload = read_exact(fh, size * 4, name)
                float_tensors[name] = (
                    np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
                )
            else:
                raise CheckpointError(f"unknown dtype tag {dtype_tag} for tensor {name}")
    return QuantizedParams(cfg, int8_weights, scales, float_tensors, metadata)


def weight_payload_bytes(params_or_q) -> int:
    """Serialized bytes of just the linear-weight payloads (excluding scales)."""
    if isinstance(params_or_q, QuantizedParams):
        return sum(t.size for t in params_or_q.int8_weights.values())
    names = quantized_tensor_names(params_or_q.cfg)
    return sum(params_or_q.tensors[n].size * 4 for n in names)


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    mean_ms: float
    min_ms: float
    max_ms: float
    feature_mean_ms: float
    runs: int
    param_count: int
    serialized_bytes: int
    quantized: bool

    def to_json_line(self) -> str:
        return json.dumps({
            "mean_ms": self.mean_ms, "min_ms": self.min_ms, "max_ms": self.max_ms,
            "feature_mean_ms": self.feature_mean_ms, "runs": self.runs,
            "param_count": self.param_count, "serialized_bytes": self.serialized_bytes,
            "quantized": self.quantized,
        }, sort_keys=True)


def bench(params_or_q, pipeline, window_samples: int, n_runs: int = 10,
          warmup: int = 3, serialized_bytes: int | None = None) -> BenchReport:
    """Wall-clock latency of feature extraction and one forward pass.

    Runs single-threaded on a deterministic input; the first ``warmup``
    measurements are discarded. Model and feature time are reported
    separately.
    """
    quantized = isinstance(params_or_q, QuantizedParams)
    params = params_or_q.dequantize() if quantized else params_or_q
    cfg = params.cfg

    wave = np.sin(2 * np.pi * 440.0 * np.arange(window_samples) / 44100.0)
    clip = AudioClip(wave, 44100)

    feature_times, model_times = [], []
    for run in range(warmup + n_runs):
        t0 = time.perf_counter()
        example = pipeline.extract(clip)
        t1 = time.perf_counter()
        forward(params, example[None, ...], training=False)
        t2 = time.perf_counter()
        if run >= warmup:
            feature_times.append((t1 - t0) * 1e3)
            model_times.append((t2 - t1) * 1e3)

    if serialized_bytes is None:
        with tempfile.NamedTemporaryFile(suffix=".tsck", delete=False) as tmp:
            tmp_path = tmp.name
        try:
            if quantized:
                save_quantized(tmp_path, params_or_q)
            else:
                save_checkpoint(tmp_path, params)
            serialized_bytes = os.path.getsize(tmp_path)
        finally:
            os.unlink(tmp_path)

    return BenchReport(
        mean_ms=float(np.mean(model_times)),
        min_ms=float(np.min(model_times)),
        max_ms=float(np.max(model_times)),
        feature_mean_ms=float(np.mean(feature_times)),
        runs=n_runs,
        param_count=count_params(cfg),
        serialized_bytes=int(serialized_bytes),
        quantized=quantized,
    )
