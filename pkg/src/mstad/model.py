"""Multiscale-fusion transformer and its window-level anomaly-score head.

Each configured scale downsamples the raw window, encodes it with its own
transformer stack, and is remapped back to the full window length; a learned
attention coefficient per scale weights the sum that feeds the score head.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeMismatchError

CHECKPOINT_FORMAT = "mstad-checkpoint"
CHECKPOINT_VERSION = 1


def default_scale_factors(num_scales: int) -> tuple:
    return tuple(2**i for i in range(num_scales))


@dataclass
class ModelConfig:
    """Hyperparameters of the multiscale transformer."""

    feature_dim: int
    window_len: int = 60
    model_dim: int = 64
    heads: int = 4
    layers_per_scale: int = 2
    ffn_dim: int | None = None
    num_scales: int = 3
    scale_factors: tuple | None = None
    activation: str = "gelu"
    dropout: float = 0.0

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.model_dim
        if self.scale_factors is None:
            self.scale_factors = default_scale_factors(self.num_scales)
        else:
            self.scale_factors = tuple(int(f) for f in self.scale_factors)
        self.validate()

    def validate(self) -> None:
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.window_len < 1:
            raise ConfigError(f"window_len must be >= 1, got {self.window_len}")
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} must be divisible by heads {self.heads}"
            )
        if len(self.scale_factors) != self.num_scales:
            raise ConfigError(
                f"num_scales {self.num_scales} != len(scale_factors) {self.scale_factors}"
            )
        if self.scale_factors[0] != 1:
            raise ConfigError(f"first scale factor must be 1, got {self.scale_factors}")
        if any(b <= a for a, b in zip(self.scale_factors, self.scale_factors[1:])):
            raise ConfigError(f"scale factors must be strictly increasing: {self.scale_factors}")
        if self.window_len < self.scale_factors[-1]:
            raise ConfigError(
                f"window_len {self.window_len} shorter than max scale factor "
                f"{self.scale_factors[-1]}"
            )
        if self.activation not in ag.ACTIVATION_KINDS:
            raise ConfigError(
                f"unknown activation {self.activation!r}; valid: {ag.ACTIVATION_KINDS}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def scale_len(self, scale_index: int) -> int:
        return math.ceil(self.window_len / self.scale_factors[scale_index])

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "window_len": self.window_len,
            "model_dim": self.model_dim,
            "heads": self.heads,
            "layers_per_scale": self.layers_per_scale,
            "ffn_dim": self.ffn_dim,
            "num_scales": self.num_scales,
            "scale_factors": list(self.scale_factors),
            "activation": self.activation,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "scale_factors" in d and d["scale_factors"] is not None:
            d["scale_factors"] = tuple(d["scale_factors"])
        return cls(**d)


@dataclass
class EncoderLayerWeights:
    """Views into one per-scale encoder layer's parameters."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


class ModelParams:
    """All learnable tensors, addressable by stable dotted names."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def snapshot(self) -> dict:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def restore(self, snap: dict) -> None:
        for name, arr in snap.items():
            self.tensors[name].data = arr.copy()

    def layer_weights(self, scale: int, layer: int) -> EncoderLayerWeights:
        p = f"scale{scale}.layer{layer}."
        t = self.tensors
        return EncoderLayerWeights(
            wq=t[p + "attn.wq"],
            wk=t[p + "attn.wk"],
            wv=t[p + "attn.wv"],
            wo=t[p + "attn.wo"],
            ffn_w1=t[p + "ffn.w1"],
            ffn_b1=t[p + "ffn.b1"],
            ffn_w2=t[p + "ffn.w2"],
            ffn_b2=t[p + "ffn.b2"],
            ln1_gain=t[p + "ln1.gain"],
            ln1_bias=t[p + "ln1.bias"],
            ln2_gain=t[p + "ln2.gain"],
            ln2_bias=t[p + "ln2.bias"],
        )


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization: projection weights uniform within the
    symmetric fan bound, biases and positional encodings normal(0, 0.02),
    layer-norm gains one."""
    rng = np.random.default_rng(seed)
    d = config.model_dim
    tensors: dict = {}

    def weight(name, fan_in, fan_out, shape=None):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        arr = rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))
        tensors[name] = Tensor._wrap(arr, True)

    def small_normal(name, shape):
        tensors[name] = Tensor._wrap(rng.normal(0.0, 0.02, size=shape), True)

    def ones(name, shape):
        tensors[name] = Tensor._wrap(np.ones(shape), True)

    weight("input_proj.weight", config.feature_dim, d)
    small_normal("input_proj.bias", (d,))
    for s in range(config.num_scales):
        small_normal(f"scale{s}.pos", (config.scale_len(s), d))
        for l in range(config.layers_per_scale):
            p = f"scale{s}.layer{l}."
            weight(p + "attn.wq", d, d)
            weight(p + "attn.wk", d, d)
            weight(p + "attn.wv", d, d)
            weight(p + "attn.wo", d, d)
            weight(p + "ffn.w1", d, config.ffn_dim)
            small_normal(p + "ffn.b1", (config.ffn_dim,))
            weight(p + "ffn.w2", config.ffn_dim, d)
            small_normal(p + "ffn.b2", (d,))
            ones(p + "ln1.gain", (d,))
            small_normal(p + "ln1.bias", (d,))
            ones(p + "ln2.gain", (d,))
            small_normal(p + "ln2.bias", (d,))
    for s in range(config.num_scales):
        weight(f"scale{s}.align.weight", d, d)
        small_normal(f"scale{s}.align.bias", (d,))
    weight("fusion.proj", d, d)
    weight("fusion.vec", d, 1)
    weight("head.weight", d, 1)
    small_normal("head.bias", (1,))
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# forward building blocks (x carries leading batch axes: [B, T, d] or [T, d])


def positional_encode(x: Tensor, pos: Tensor) -> Tensor:
    """Add learnable per-position vectors to the projected window."""
    if x.shape[-2:] != pos.shape:
        raise ShapeMismatchError(f"positional encoding {pos.shape} does not match input {x.shape}")
    return ag.add(x, pos)


def self_attention(h: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int,
                   return_weights: bool = False):
    """Scaled dot-product multi-head attention without causal masking.

    Fused head projections: column block i of wq/wk/wv is head i. Returns the
    output, and optionally the row-stochastic attention weights [..., h, T, T].
    """
    d = h.shape[-1]
    head_dim = d // heads
    t_len = h.shape[-2]
    lead = h.shape[:-2]

    def split_heads(x):
        x = ag.reshape(x, lead + (t_len, heads, head_dim))
        return ag.swapaxes(x, -3, -2)  # [..., h, T, head_dim]

    q = split_heads(ag.matmul(h, wq))
    k = split_heads(ag.matmul(h, wk))
    v = split_heads(ag.matmul(h, wv))
    scores = ag.matmul(q, ag.swapaxes(k, -1, -2))
    attn = ag.softmax(scores, axis=-1, prescale=1.0 / math.sqrt(head_dim))
    ctx = ag.matmul(attn, v)  # [..., h, T, head_dim]
    merged = ag.reshape(ag.swapaxes(ctx, -3, -2), lead + (t_len, d))
    out = ag.matmul(merged, wo)
    if return_weights:
        return out, attn
    return out


def encoder_layer(h: Tensor, w: EncoderLayerWeights, activation: str, heads: int,
                  dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Post-norm transformer layer: LN(h + MHA(h)), then LN(· + FFN(·))."""
    attn_out = self_attention(h, w.wq, w.wk, w.wv, w.wo, heads)
    if dropout > 0.0:
        attn_out = ag.dropout(attn_out, dropout, rng)
    h1 = ag.layer_norm(ag.add(h, attn_out), w.ln1_gain, w.ln1_bias)
    ff = ag.affine(ag.activation(ag.affine(h1, w.ffn_w1, w.ffn_b1), activation),
                   w.ffn_w2, w.ffn_b2)
    if dropout > 0.0:
        ff = ag.dropout(ff, dropout, rng)
    return ag.layer_norm(ag.add(h1, ff), w.ln2_gain, w.ln2_bias)


def build_scale_inputs(x: Tensor, scale_factors) -> list:
    """Downsampled copies of the raw window, one per scale; scale one is the
    window itself."""
    t_len = x.shape[-2]
    if t_len < max(scale_factors):
        raise DataError(
            f"window of length {t_len} shorter than max scale factor {max(scale_factors)}"
        )
    return [x if f == 1 else ag.avg_pool_time(x, f) for f in scale_factors]


def align_scale(h_s: Tensor, weight: Tensor, bias: Tensor, target_len: int) -> Tensor:
    """Remap a scale's features to the common length, then per-scale affine map."""
    up = ag.upsample_time(h_s, target_len)
    return ag.affine(up, weight, bias)


def fuse_scales(aligned: list, proj: Tensor, vec: Tensor):
    """Attention-weighted fusion across scales.

    Per scale, the scalar score is the time-mean of vecᵀ·tanh(proj·h_t); the
    softmax of the scores weights the sum of aligned features. Returns
    (fused [..., T, d], weights [..., S]).
    """
    if not aligned:
        raise ContractError("fuse_scales needs at least one aligned scale")
    lead = aligned[0].shape[:-2]
    t_len, d = aligned[0].shape[-2:]
    scores = []
    for h in aligned:
        if h.shape != aligned[0].shape:
            raise ShapeMismatchError(
                f"aligned scales disagree: {h.shape} vs {aligned[0].shape}"
            )
        u = ag.tanh(ag.matmul(h, proj))              # [..., T, d]
        s = ag.mean_over_axis(ag.matmul(u, vec), -2)  # [..., 1]
        scores.append(s)
    weights = ag.softmax(ag.concat_last_axis(scores), axis=-1)  # [..., S]
    stacked = ag.concat_along(
        [ag.reshape(h, lead + (1, t_len, d)) for h in aligned], -3
    )  # [..., S, T, d]
    w4 = ag.reshape(weights, lead + (len(aligned), 1, 1))
    fused = ag.sum_over_axis(ag.mul(w4, stacked), -3)  # [..., T, d]
    return fused, weights


def forward_windows(windows, params: ModelParams, train_mode: bool = False,
                    dropout_rng: np.random.Generator | None = None):
    """Score a batch of windows.

    windows: array-like [B, T, d_in]. Returns (scores [B], scale weights
    [B, S], fused features [B, T, d]) as Tensors on the active tape.
    """
    cfg = params.config
    x = windows if isinstance(windows, Tensor) else Tensor(np.asarray(windows, dtype=np.float64))
    if x.data.ndim != 3 or x.shape[1] != cfg.window_len or x.shape[2] != cfg.feature_dim:
        raise ShapeMismatchError(
            f"expected windows [B, {cfg.window_len}, {cfg.feature_dim}], got {x.shape}"
        )
    batch = x.shape[0]
    dropout = cfg.dropout if train_mode else 0.0
    scale_inputs = build_scale_inputs(x, cfg.scale_factors)
    aligned = []
    for s, x_s in enumerate(scale_inputs):
        h = ag.affine(x_s, params["input_proj.weight"], params["input_proj.bias"])
        h = positional_encode(h, params[f"scale{s}.pos"])
        for l in range(cfg.layers_per_scale):
            h = encoder_layer(h, params.layer_weights(s, l), cfg.activation, cfg.heads,
                              dropout, dropout_rng)
        aligned.append(
            align_scale(h, params[f"scale{s}.align.weight"], params[f"scale{s}.align.bias"],
                        cfg.window_len)
        )
    fused, weights = fuse_scales(aligned, params["fusion.proj"], params["fusion.vec"])
    pooled = ag.mean_over_axis(fused, -2)  # [B, d]
    logit = ag.affine(pooled, params["head.weight"], params["head.bias"])  # [B, 1]
    scores = ag.reshape(ag.sigmoid(logit), (batch,))
    if not np.all(np.isfinite(scores.data)):
        raise NumericError(f"non-finite score; first bad stage: {_locate_nan(windows, params)}")
    return scores, weights, fused


def _locate_nan(windows, params: ModelParams) -> str:
    """Re-run the forward stages eagerly to name where NaN first appears."""
    cfg = params.config
    x = windows if isinstance(windows, Tensor) else Tensor._wrap(
        np.asarray(windows, dtype=np.float64), False
    )
    try:
        scale_inputs = build_scale_inputs(x, cfg.scale_factors)
        aligned = []
        for s, x_s in enumerate(scale_inputs):
            h = ag.add(ag.matmul(x_s, params["input_proj.weight"]), params["input_proj.bias"])
            if not np.all(np.isfinite(h.data)):
                return f"input_projection(scale={s})"
            h = positional_encode(h, params[f"scale{s}.pos"])
            for l in range(cfg.layers_per_scale):
                h = encoder_layer(h, params.layer_weights(s, l), cfg.activation, cfg.heads)
                if not np.all(np.isfinite(h.data)):
                    return f"encoder(scale={s}, layer={l})"
            al = align_scale(h, params[f"scale{s}.align.weight"],
                             params[f"scale{s}.align.bias"], cfg.window_len)
            if not np.all(np.isfinite(al.data)):
                return f"alignment(scale={s})"
            aligned.append(al)
        fused, weights = fuse_scales(aligned, params["fusion.proj"], params["fusion.vec"])
        if not np.all(np.isfinite(weights.data)) or not np.all(np.isfinite(fused.data)):
            return "fusion"
        return "head"
    except Exception:  # diagnostics only; never masks the original error
        return "unknown"


@dataclass
class ForwardResult:
    score: float
    scale_weights: list
    fused: np.ndarray


def forward(window, params: ModelParams) -> ForwardResult:
    """Score one window [T, d_in]; higher score means more anomalous."""
    arr = np.asarray(window, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"expected a [T, d_in] window, got {arr.shape}")
    scores, weights, fused = forward_windows(arr[None, :, :], params)
    return ForwardResult(
        score=float(scores.data[0]),
        scale_weights=[float(v) for v in weights.data[0]],
        fused=fused.data[0],
    )


def score_windows(windows, params: ModelParams, batch_size: int = 256) -> np.ndarray:
    """Deterministic scores for many windows, without recording a tape."""
    arr = np.asarray(windows, dtype=np.float64)
    out = np.empty(arr.shape[0])
    for start in range(0, arr.shape[0], batch_size):
        chunk = arr[start:start + batch_size]
        scores, _, _ = forward_windows(chunk, params)
        out[start:start + chunk.shape[0]] = scores.data
    return out


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Versioned JSON container: config plus named flat arrays. Values
    round-trip bitwise (shortest-repr float serialization)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "extra": extra or {},
        "params": {
            name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in params.named()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_checkpoint(path) -> tuple:
    """Returns (ModelParams, extra dict)."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig.from_dict(doc["config"])
    tensors = {}
    for name, entry in doc["params"].items():
        arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        tensors[name] = Tensor._wrap(arr, True)
    return ModelParams(config, tensors), doc.get("extra", {})
