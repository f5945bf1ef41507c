"""The fusion classifier: linear modality encoders, cross-attention, MLP head.

Each modality is encoded to a single latent vector per sample
(linear -> ReLU -> dropout -> layernorm). The sensor latent queries the
image latent through multi-head cross-attention with a residual back onto
the sensor path, a bias-free two-layer FFN (expansion 2) refines the fused
vector, and a two-layer MLP produces class logits. Samples with a missing
image use a learned substitute vector in place of the raw image features.

With one token per modality the softmax inside cross-attention runs over a
single key, so the attention weights are identically 1 and the query/key
projections receive zero gradient; heads are kept anyway so the module
stays a faithful multi-head block when token counts grow.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Batch, make_batch

CHECKPOINT_FORMAT = "crossfuse-checkpoint"
CHECKPOINT_VERSION = 1

# kind -> model class; baselines register themselves on import
MODEL_REGISTRY: dict[str, type] = {}


def register_model(kind: str):
    def wrap(cls):
        MODEL_REGISTRY[kind] = cls
        cls.kind = kind
        return cls
    return wrap


@dataclass
class ModelConfig:
    d_sensor: int = 28
    d_image: int = 512
    d_latent: int = 64
    num_heads: int = 2
    dropout: float = 0.4
    head_hidden: int = 64
    n_classes: int = 5
    # small enough that latent rows come out unit-variance to ~1e-9 while
    # still guarding the exactly-constant row
    ln_eps: float = 1e-12
    attn_output_projection: bool = True

    def __post_init__(self):
        if self.d_latent % self.num_heads != 0:
            raise ValueError(
                f"d_latent ({self.d_latent}) must divide evenly into "
                f"{self.num_heads} heads"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {
            "d_sensor": self.d_sensor, "d_image": self.d_image,
            "d_latent": self.d_latent, "num_heads": self.num_heads,
            "dropout": self.dropout, "head_hidden": self.head_hidden,
            "n_classes": self.n_classes, "ln_eps": self.ln_eps,
            "attn_output_projection": self.attn_output_projection,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def build(self, seed: int) -> "FusionModel":
        return FusionModel.init(self, seed)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _uniform_fan_in(rng: np.random.Generator, out_dim: int, in_dim: int) -> T.Tensor:
    # U(-sqrt(3/fan_in), sqrt(3/fan_in)) has std exactly 1/sqrt(fan_in)
    bound = math.sqrt(3.0 / in_dim)
    return T.Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)),
                    requires_grad=True)


def _zeros(rows: int, cols: int) -> T.Tensor:
    return T.Tensor(np.zeros((rows, cols)), requires_grad=True)


def _ones(rows: int, cols: int) -> T.Tensor:
    return T.Tensor(np.ones((rows, cols)), requires_grad=True)


@dataclass
class EncoderParams:
    sensor_weight: T.Tensor
    sensor_bias: T.Tensor
    sensor_ln_gain: T.Tensor
    sensor_ln_bias: T.Tensor
    image_weight: T.Tensor
    image_bias: T.Tensor
    image_ln_gain: T.Tensor
    image_ln_bias: T.Tensor


@dataclass
class FusionParams:
    query_weight: T.Tensor
    key_weight: T.Tensor
    value_weight: T.Tensor
    out_weight: T.Tensor
    ffn_in_weight: T.Tensor
    ffn_out_weight: T.Tensor


@dataclass
class HeadParams:
    hidden_weight: T.Tensor
    out_weight: T.Tensor


@dataclass
class ModelParams:
    encoder: EncoderParams
    fusion: FusionParams
    head: HeadParams
    missing_image_token: T.Tensor

    def named(self) -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        for group_name, group in (("encoder", self.encoder),
                                  ("fusion", self.fusion), ("head", self.head)):
            for field_name in group.__dataclass_fields__:
                out[f"{group_name}.{field_name}"] = getattr(group, field_name)
        out["missing_image_token"] = self.missing_image_token
        return out


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, unit layernorm gains."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    d, h = cfg.d_latent, cfg.head_hidden
    encoder = EncoderParams(
        sensor_weight=_uniform_fan_in(rng, d, cfg.d_sensor),
        sensor_bias=_zeros(1, d),
        sensor_ln_gain=_ones(1, d),
        sensor_ln_bias=_zeros(1, d),
        image_weight=_uniform_fan_in(rng, d, cfg.d_image),
        image_bias=_zeros(1, d),
        image_ln_gain=_ones(1, d),
        image_ln_bias=_zeros(1, d),
    )
    fusion = FusionParams(
        query_weight=_uniform_fan_in(rng, d, d),
        key_weight=_uniform_fan_in(rng, d, d),
        value_weight=_uniform_fan_in(rng, d, d),
        out_weight=_uniform_fan_in(rng, d, d),
        ffn_in_weight=_uniform_fan_in(rng, 2 * d, d),
        ffn_out_weight=_uniform_fan_in(rng, d, 2 * d),
    )
    head = HeadParams(
        hidden_weight=_uniform_fan_in(rng, h, d),
        out_weight=_uniform_fan_in(rng, cfg.n_classes, h),
    )
    return ModelParams(encoder=encoder, fusion=fusion, head=head,
                       missing_image_token=_zeros(1, cfg.d_image))


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _project(x: T.Tensor, weight: T.Tensor, bias: T.Tensor) -> T.Tensor:
    return T.add(T.matmul(x, T.transpose(weight)), bias)


def _encode_one(x: T.Tensor, weight, bias, ln_gain, ln_bias, cfg: ModelConfig,
                train_mode: bool, rng) -> T.Tensor:
    h = T.relu(_project(x, weight, bias))
    if train_mode and cfg.dropout > 0.0:
        h = T.dropout(h, cfg.dropout, rng)
    return T.layernorm(h, ln_gain, ln_bias, eps=cfg.ln_eps)


def substitute_missing_images(batch: Batch, token: T.Tensor) -> T.Tensor:
    """Missing rows get the learned token; gradient reaches it via the mask."""
    base = T.Tensor(np.where(batch.image_missing[:, None], 0.0, batch.image))
    mask = T.Tensor(batch.image_missing.astype(float).reshape(-1, 1))
    return T.add(base, T.matmul(mask, token))


def encode(batch: Batch, params: ModelParams, cfg: ModelConfig,
           train_mode: bool = False,
           rng: np.random.Generator | None = None) -> tuple[T.Tensor, T.Tensor]:
    """Per-modality latents, shape (batch, d_latent) each."""
    if train_mode and cfg.dropout > 0.0 and rng is None:
        raise ValueError("train-mode encode needs an rng for dropout masks")
    enc = params.encoder
    z_s = _encode_one(T.Tensor(batch.sensor), enc.sensor_weight, enc.sensor_bias,
                      enc.sensor_ln_gain, enc.sensor_ln_bias, cfg, train_mode, rng)
    x_i = substitute_missing_images(batch, params.missing_image_token)
    z_i = _encode_one(x_i, enc.image_weight, enc.image_bias,
                      enc.image_ln_gain, enc.image_ln_bias, cfg, train_mode, rng)
    return z_s, z_i


def multi_head_attention(
    query_tokens: list[T.Tensor],
    context_tokens: list[T.Tensor],
    query_weight: T.Tensor,
    key_weight: T.Tensor,
    value_weight: T.Tensor,
    out_weight: T.Tensor | None,
    num_heads: int,
) -> list[T.Tensor]:
    """Scaled dot-product attention over per-sample token lists.

    Tokens are (batch, d) tensors; attention mixes the context tokens of each
    sample independently, so batch rows never attend across samples.
    """
    d = query_tokens[0].shape[1]
    if d % num_heads != 0:
        raise T.DimensionError(f"token width {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    wq_t, wk_t, wv_t = (T.transpose(w) for w in (query_weight, key_weight, value_weight))
    q = [T.matmul(tok, wq_t) for tok in query_tokens]
    k = [T.matmul(tok, wk_t) for tok in context_tokens]
    v = [T.matmul(tok, wv_t) for tok in context_tokens]
    inv_scale = 1.0 / math.sqrt(dh)
    outputs = []
    for q_tok in q:
        head_outs = []
        for h in range(num_heads):
            lo, hi = h * dh, (h + 1) * dh
            q_h = T.slice_cols(q_tok, lo, hi)
            scores = [
                T.scale(T.rowsum(T.mul(q_h, T.slice_cols(k_tok, lo, hi))), inv_scale)
                for k_tok in k
            ]
            weights = T.softmax_rows(T.concat_cols(scores))
            mixed = None
            for j, v_tok in enumerate(v):
                term = T.mul(T.slice_cols(v_tok, lo, hi),
                             T.slice_cols(weights, j, j + 1))
                mixed = term if mixed is None else T.add(mixed, term)
            head_outs.append(mixed)
        merged = T.concat_cols(head_outs)
        if out_weight is not None:
            merged = T.matmul(merged, T.transpose(out_weight))
        outputs.append(merged)
    return outputs


def feed_forward(x: T.Tensor, in_weight: T.Tensor, out_weight: T.Tensor) -> T.Tensor:
    """Bias-free two-layer FFN with ReLU."""
    return T.matmul(T.relu(T.matmul(x, T.transpose(in_weight))),
                    T.transpose(out_weight))


def fuse(z_s: T.Tensor, z_i: T.Tensor, params: FusionParams,
         cfg: ModelConfig) -> T.Tensor:
    """Sensor-query cross-attention over the image latent, residuals, FFN."""
    if z_s.shape != z_i.shape:
        raise T.DimensionError(f"fuse shape mismatch: {z_s.shape} vs {z_i.shape}")
    attended = multi_head_attention(
        [z_s], [z_i],
        params.query_weight, params.key_weight, params.value_weight,
        params.out_weight if cfg.attn_output_projection else None,
        cfg.num_heads,
    )[0]
    fused = T.add(attended, z_s)
    return T.add(feed_forward(fused, params.ffn_in_weight, params.ffn_out_weight),
                 fused)


def classify(z_out: T.Tensor, params: HeadParams) -> tuple[T.Tensor, T.Tensor]:
    """Two-layer MLP head; returns (logits, row-softmax probabilities)."""
    logits = T.matmul(T.relu(T.matmul(z_out, T.transpose(params.hidden_weight))),
                      T.transpose(params.out_weight))
    return logits, T.softmax_rows(logits)


# ---------------------------------------------------------------------------
# model wrapper and checkpoints
# ---------------------------------------------------------------------------

@register_model("fusion")
class FusionModel:
    """Trainer-facing wrapper bundling config and parameters."""

    def __init__(self, config: ModelConfig, params: ModelParams):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "FusionModel":
        return cls(config, init_params(config, seed))

    @classmethod
    def from_config_dict(cls, d: dict, seed: int = 0) -> "FusionModel":
        return cls.init(ModelConfig.from_dict(d), seed)

    def parameters(self) -> dict[str, T.Tensor]:
        return self.params.named()

    def make_batch(self, samples) -> Batch:
        return make_batch(samples, image_dim=self.config.d_image)

    def forward(self, batch: Batch, train_mode: bool = False,
                rng: np.random.Generator | None = None):
        """Returns (logits, z_s, z_i); the latents feed the correlation loss."""
        z_s, z_i = encode(batch, self.params, self.config, train_mode, rng)
        z_out = fuse(z_s, z_i, self.params.fusion, self.config)
        logits = T.matmul(
            T.relu(T.matmul(z_out, T.transpose(self.params.head.hidden_weight))),
            T.transpose(self.params.head.out_weight),
        )
        return logits, z_s, z_i

    def predict_proba(self, batch: Batch) -> np.ndarray:
        logits, _, _ = self.forward(batch, train_mode=False)
        return T.softmax_rows(logits).data

    def config_dict(self) -> dict:
        return self.config.to_dict()


def _encode_array(t: T.Tensor) -> dict:
    return {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}


def _decode_array(d: dict) -> np.ndarray:
    arr = np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])
    return arr


def save_checkpoint(model, path: str | Path) -> None:
    """Versioned JSON container of named arrays; reload is bit-exact."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": model.config_dict(),
        "params": {name: _encode_array(t) for name, t in model.parameters().items()},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path):
    with Path(path).open(encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version "
                         f"{payload.get('version')}")
    kind = payload["kind"]
    if kind not in MODEL_REGISTRY:
        raise ValueError(
            f"{path}: unknown model kind {kind!r}; known: {sorted(MODEL_REGISTRY)}"
        )
    model = MODEL_REGISTRY[kind].from_config_dict(payload["config"], seed=0)
    params = model.parameters()
    stored = payload["params"]
    if set(stored) != set(params):
        raise ValueError(
            f"{path}: parameter names do not match the {kind!r} architecture"
        )
    for name, t in params.items():
        arr = _decode_array(stored[name])
        if tuple(arr.shape) != t.shape:
            raise ValueError(f"{path}: shape mismatch for {name}: "
                             f"stored {arr.shape}, expected {t.shape}")
        t.data = arr
    return model
