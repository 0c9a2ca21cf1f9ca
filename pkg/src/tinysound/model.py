"""Tiny BERT-style encoder for audio features.

Continuous inputs (feature matrices) pass through a per-position batch
normalization and a learned linear mapping to the hidden size, with no
positional encoding; token inputs use embedding + positional tables
instead. Encoder layers use post-LayerNorm residuals, GELU, and a
feed-forward width fixed at 4x hidden. Classification reads the first
sequence position through a tanh pooler.

Tensors are stored float32 (the checkpoint payload format) and all
arithmetic runs in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import erf

from .errors import CheckpointError, ConfigError

CONTINUOUS = "continuous"
TOKENS = "tokens"

_INIT_STD = 0.02
_INIT_BOUND = 2.0  # in units of std
_LN_EPS = 1e-12
_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ModelConfig:
    input_mode: str = CONTINUOUS
    input_dim: int = 128  # feature width F, or vocabulary size in tokens mode
    seq_len: int = 430
    hidden: int = 16
    layers: int = 1
    heads: int = 2
    classes: int = 6
    use_positional: bool | None = None
    share_layers: bool = False
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.input_mode not in (CONTINUOUS, TOKENS):
            raise ConfigError(f"input_mode must be continuous or tokens, got {self.input_mode!r}")
        for name in ("input_dim", "seq_len", "hidden", "layers", "heads", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.use_positional is None:
            object.__setattr__(self, "use_positional", self.input_mode == TOKENS)
        if self.input_mode == CONTINUOUS and self.use_positional:
            raise ConfigError("continuous inputs use no positional encoding")

    @property
    def ffn_dim(self) -> int:
        return 4 * self.hidden

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def n_layer_blocks(self) -> int:
        return 1 if self.share_layers else self.layers


def _layer_shapes(cfg: ModelConfig, i: int) -> dict[str, tuple[int, ...]]:
    h, f4 = cfg.hidden, cfg.ffn_dim
    p = f"layer{i}_"
    return {
        p + "q_w": (h, h), p + "q_b": (h,),
        p + "k_w": (h, h), p + "k_b": (h,),
        p + "v_w": (h, h), p + "v_b": (h,),
        p + "o_w": (h, h), p + "o_b": (h,),
        p + "attn_ln_g": (h,), p + "attn_ln_b": (h,),
        p + "ffn_in_w": (f4, h), p + "ffn_in_b": (f4,),
        p + "ffn_out_w": (h, f4), p + "ffn_out_b": (h,),
        p + "ffn_ln_g": (h,), p + "ffn_ln_b": (h,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map for every tensor, running stats included."""
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.input_mode == CONTINUOUS:
        shapes["bn_gamma"] = (cfg.seq_len,)
        shapes["bn_beta"] = (cfg.seq_len,)
        shapes["bn_running_mean"] = (cfg.seq_len,)
        shapes["bn_running_var"] = (cfg.seq_len,)
        shapes["map_w"] = (cfg.hidden, cfg.input_dim)
        shapes["map_b"] = (cfg.hidden,)
    else:
        shapes["tok_emb"] = (cfg.input_dim, cfg.hidden)
        if cfg.use_positional:
            shapes["pos_emb"] = (cfg.seq_len, cfg.hidden)
    shapes["seg_emb"] = (2, cfg.hidden)
    shapes["emb_ln_g"] = (cfg.hidden,)
    shapes["emb_ln_b"] = (cfg.hidden,)
    for i in range(cfg.n_layer_blocks):
        shapes.update(_layer_shapes(cfg, i))
    shapes["pooler_w"] = (cfg.hidden, cfg.hidden)
    shapes["pooler_b"] = (cfg.hidden,)
    shapes["cls_w"] = (cfg.classes, cfg.hidden)
    shapes["cls_b"] = (cfg.classes,)
    return shapes


_STATE_TENSORS = ("bn_running_mean", "bn_running_var")


def learnable_names(cfg: ModelConfig) -> list[str]:
    return [n for n in param_shapes(cfg) if n not in _STATE_TENSORS]


@dataclass
class ModelParams:
    """Config plus the full named-tensor set (float32 storage)."""

    cfg: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.cfg)
        if set(self.tensors) != set(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ConfigError(f"tensor set mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ConfigError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ConfigError(f"{name} contains NaN or Inf")

    def layer_name(self, layer_index: int, suffix: str) -> str:
        block = 0 if self.cfg.share_layers else layer_index
        return f"layer{block}_{suffix}"


def _truncated_normal(rng: np.random.Generator, shape, std=_INIT_STD) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > _INIT_BOUND * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > _INIT_BOUND * std
    return out.astype(np.float32)


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Truncated-normal weights, zero biases, unit scales, fresh running stats."""
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("_g", "gamma")) or name == "bn_running_var":
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(("_w", "emb")):
            tensors[name] = _truncated_normal(rng, shape)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Cached activations from a training-mode forward pass."""

    batch: np.ndarray
    bn_xhat: np.ndarray | None
    bn_out: np.ndarray | None
    embedded: np.ndarray  # input to the embedding LayerNorm
    emb_ln: tuple
    emb_drop: np.ndarray | None
    encoder_in: np.ndarray
    layers: list[dict] = field(default_factory=list)
    h0: np.ndarray | None = None
    pooled: np.ndarray | None = None
    pool_drop: np.ndarray | None = None
    cls_in: np.ndarray | None = None


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    out = x - x.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)
    return out


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mean) * inv_std
    return g * xhat + b, (xhat, inv_std)


def _dropout_mask(rng, shape, rate) -> np.ndarray:
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _attention(w, params: ModelParams, layer: int, x: np.ndarray):
    cfg = params.cfg
    name = params.layer_name
    b, seq, h = x.shape
    heads, dh = cfg.heads, cfg.head_dim

    def split(y):
        return y.reshape(b, seq, heads, dh).transpose(0, 2, 1, 3)

    q = split(x @ w[name(layer, "q_w")].T + w[name(layer, "q_b")])
    k = split(x @ w[name(layer, "k_w")].T + w[name(layer, "k_b")])
    v = split(x @ w[name(layer, "v_w")].T + w[name(layer, "v_b")])
    scores = q @ k.swapaxes(-1, -2) / np.sqrt(dh)
    probs = softmax(scores)
    context = (probs @ v).transpose(0, 2, 1, 3).reshape(b, seq, h)
    out = context @ w[name(layer, "o_w")].T + w[name(layer, "o_b")]
    return out, {"q": q, "k": k, "v": v, "probs": probs, "context": context}


def forward(params: ModelParams, batch: np.ndarray, training: bool = False,
            rng: np.random.Generator | None = None, freeze_stats: bool = False):
    """Run the encoder; returns logits, plus a ForwardTrace when training.

    Training mode normalizes with batch statistics (and updates the running
    stats unless ``freeze_stats``) and applies dropout, which requires
    ``rng`` when the configured rate is nonzero.
    """
    cfg = params.cfg
    batch = np.asarray(batch)
    if cfg.input_mode == CONTINUOUS:
        if batch.ndim != 3 or batch.shape[1:] != (cfg.seq_len, cfg.input_dim):
            raise ValueError(
                f"expected batch of shape (B, {cfg.seq_len}, {cfg.input_dim}), got {batch.shape}"
            )
        batch = batch.astype(np.float64)
    else:
        if batch.ndim != 2 or batch.shape[1] != cfg.seq_len:
            raise ValueError(f"expected token batch of shape (B, {cfg.seq_len}), got {batch.shape}")
        if batch.min() < 0 or batch.max() >= cfg.input_dim:
            raise ValueError("token id outside the vocabulary")
        batch = batch.astype(np.int64)

    drop_rate = cfg.dropout_rate if training else 0.0
    if drop_rate > 0.0 and rng is None:
        raise ValueError("training forward with dropout needs an rng")
    w = {k: v.astype(np.float64) for k, v in params.tensors.items()}

    bn_xhat = bn_out = None
    if cfg.input_mode == CONTINUOUS:
        if training and not freeze_stats:
            mean = batch.mean(axis=(0, 2))
            var = batch.var(axis=(0, 2))
            n = batch.shape[0] * batch.shape[2]
            if n > 1:  # unbiased variance feeds the running estimate
                run_var = var * n / (n - 1)
            else:
                run_var = var
            rm = params.tensors["bn_running_mean"]
            rv = params.tensors["bn_running_var"]
            rm[...] = ((1 - _BN_MOMENTUM) * rm + _BN_MOMENTUM * mean).astype(np.float32)
            rv[...] = ((1 - _BN_MOMENTUM) * rv + _BN_MOMENTUM * run_var).astype(np.float32)
        else:
            mean = w["bn_running_mean"]
            var = w["bn_running_var"]
        bn_xhat = (batch - mean[None, :, None]) / np.sqrt(var[None, :, None] + _BN_EPS)
        bn_out = w["bn_gamma"][None, :, None] * bn_xhat + w["bn_beta"][None, :, None]
        embedded = bn_out @ w["map_w"].T + w["map_b"]
    else:
        embedded = w["tok_emb"][batch]
        if cfg.use_positional:
            embedded = embedded + w["pos_emb"][None, :, :]
    embedded = embedded + w["seg_emb"][0]

    normed, emb_ln = layer_norm(embedded, w["emb_ln_g"], w["emb_ln_b"])
    emb_drop = None
    x = normed
    if drop_rate > 0.0:
        emb_drop = _dropout_mask(rng, x.shape, drop_rate)
        x = x * emb_drop

    trace = ForwardTrace(
        batch=batch, bn_xhat=bn_xhat, bn_out=bn_out, embedded=embedded,
        emb_ln=emb_ln, emb_drop=emb_drop, encoder_in=x,
    ) if training else None

    for layer in range(cfg.layers):
        attn_out, attn_cache = _attention(w, params, layer, x)
        attn_mask = None
        if drop_rate > 0.0:
            attn_mask = _dropout_mask(rng, attn_out.shape, drop_rate)
            attn_out = attn_out * attn_mask
        residual1 = x + attn_out
        x1, ln1 = layer_norm(residual1, w[params.layer_name(layer, "attn_ln_g")],
                             w[params.layer_name(layer, "attn_ln_b")])
        ffn_pre = x1 @ w[params.layer_name(layer, "ffn_in_w")].T + w[params.layer_name(layer, "ffn_in_b")]
        ffn_act = gelu(ffn_pre)
        ffn_out = ffn_act @ w[params.layer_name(layer, "ffn_out_w")].T + w[params.layer_name(layer, "ffn_out_b")]
        ffn_mask = None
        if drop_rate > 0.0:
            ffn_mask = _dropout_mask(rng, ffn_out.shape, drop_rate)
            ffn_out = ffn_out * ffn_mask
        residual2 = x1 + ffn_out
        x2, ln2 = layer_norm(residual2, w[params.layer_name(layer, "ffn_ln_g")],
                             w[params.layer_name(layer, "ffn_ln_b")])
        if trace is not None:
            trace.layers.append({
                "x_in": x, "attn": attn_cache, "attn_mask": attn_mask,
                "ln1": ln1, "x1": x1, "ffn_pre": ffn_pre, "ffn_act": ffn_act,
                "ffn_mask": ffn_mask, "ln2": ln2,
            })
        x = x2

    h0 = x[:, 0, :]
    pooled = np.tanh(h0 @ w["pooler_w"].T + w["pooler_b"])
    cls_in = pooled
    pool_mask = None
    if drop_rate > 0.0:
        pool_mask = _dropout_mask(rng, pooled.shape, drop_rate)
        cls_in = pooled * pool_mask
    logits = cls_in @ w["cls_w"].T + w["cls_b"]

    if trace is not None:
        trace.h0 = h0
        trace.pooled = pooled
        trace.pool_drop = pool_mask
        trace.cls_in = cls_in
        return logits, trace
    return logits


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------

def count_params(cfg: ModelConfig) -> int:
    """Learnable parameter count (running stats excluded).

    Continuous mode follows the closed form
    2L + (F*H + H) + 2H + 2H + blocks*(12H^2 + 13H) + (H^2 + H) + (H*C + C).
    """
    h, c = cfg.hidden, cfg.classes
    if cfg.input_mode == CONTINUOUS:
        input_part = 2 * cfg.seq_len + (cfg.input_dim * h + h)
    else:
        input_part = cfg.input_dim * h
        if cfg.use_positional:
            input_part += cfg.seq_len * h
    layer_block = 12 * h * h + 13 * h
    return (
        input_part
        + 2 * h  # segment bias table
        + 2 * h  # embedding LayerNorm
        + cfg.n_layer_blocks * layer_block
        + (h * h + h)  # pooler
        + (h * c + c)  # classifier
    )


PER_POSITION = "per_position"
TOTAL = "total"


def mult_add_breakdown(cfg: ModelConfig, convention: str = TOTAL) -> dict[str, int]:
    """Multiply-add counts per component.

    ``total`` is the true MAC count of one forward pass, including the
    L^2 * H attention score/value products. ``per_position`` counts each
    weight matrix once plus L for the batch norm, approximating parameter-
    count-style accounting tools.
    """
    h, c, seq, layers = cfg.hidden, cfg.classes, cfg.seq_len, cfg.layers
    f = cfg.input_dim if cfg.input_mode == CONTINUOUS else 0
    if convention == PER_POSITION:
        parts = {
            "batch_norm": seq if cfg.input_mode == CONTINUOUS else 0,
            "mapping": f * h,
            "attention": layers * 4 * h * h,
            "ffn": layers * 8 * h * h,
            "pooler": h * h,
            "classifier": h * c,
        }
    elif convention == TOTAL:
        parts = {
            "batch_norm": seq * cfg.input_dim if cfg.input_mode == CONTINUOUS else 0,
            "mapping": seq * f * h,
            "attention_proj": layers * 4 * seq * h * h,
            "attention_scores": layers * seq * seq * h,
            "attention_values": layers * seq * seq * h,
            "ffn": layers * 8 * seq * h * h,
            "pooler": h * h,
            "classifier": h * c,
        }
    else:
        raise ValueError(f"unknown convention {convention!r}")
    return parts


def count_mult_adds(cfg: ModelConfig, convention: str = TOTAL) -> int:
    return sum(mult_add_breakdown(cfg, convention).values())


# ---------------------------------------------------------------------------
# Checkpoints: magic "TSCK", version, config, metadata, step, tensor tables
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"TSCK"
_CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    opt_tensors: dict[str, np.ndarray] | None
    step: int
    metadata: dict


def _write_json_block(fh, obj) -> None:
    blob = json.dumps(obj, sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) < n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _read_json_block(fh, what: str):
    (size,) = struct.unpack("<I", _read_exact(fh, 4, what))
    return json.loads(_read_exact(fh, size, what).decode("utf-8"))


def _write_tensor_table(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", tensor.ndim))
        for dim in tensor.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def _read_tensor_table(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name"))
        name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(fh, 1, name))
        shape = tuple(
            struct.unpack("<I", _read_exact(fh, 4, name))[0] for _ in range(ndim)
        )
        size = int(np.prod(shape)) if shape else 1
        payload = _read_exact(fh, size * 4, name)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return tensors


def save_checkpoint(path, params: ModelParams,
                    opt_tensors: dict[str, np.ndarray] | None = None,
                    step: int = 0, metadata: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        _write_json_block(fh, asdict(params.cfg))
        _write_json_block(fh, metadata or {})
        fh.write(struct.pack("<Q", step))
        _write_tensor_table(fh, params.tensors)
        if opt_tensors is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            _write_tensor_table(fh, opt_tensors)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _CKPT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} unsupported (expected {_CKPT_VERSION})"
            )
        cfg = ModelConfig(**_read_json_block(fh, "config"))
        metadata = _read_json_block(fh, "metadata")
        (step,) = struct.unpack("<Q", _read_exact(fh, 8, "step"))
        tensors = _read_tensor_table(fh)
        (has_opt,) = struct.unpack("<B", _read_exact(fh, 1, "optimizer flag"))
        opt_tensors = _read_tensor_table(fh) if has_opt else None
    return Checkpoint(ModelParams(cfg, tensors), opt_tensors, step, metadata)
