"""Comparison architectures and the benchmark / tau-sweep harnesses.

All baselines ride the same tensor stack, trainer, augmentation, and
ensemble protocol as the fusion model, differing only in architecture and
in training on cross-entropy alone (the correlation regularizer needs the
dual-encoder form). Missing images are zero-filled here; only the fusion
model carries a learned substitute.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .data import Batch, SplitDataset, make_batch
from .metrics import compute_metrics, ensemble_predict, ensemble_weights
from .model import (
    ModelConfig,
    feed_forward,
    multi_head_attention,
    register_model,
)
from .training import TrainConfig, train_ensemble

log = logging.getLogger(__name__)

BASELINE_KINDS = ("transformer_concat", "perceiver", "perceiverio_classic",
                  "sensor_only", "image_only")

# Reference results reported on the proprietary Strasbourg Cathedral
# monitoring dataset. That data is not distributable, so these numbers ship
# purely as report annotations for comparison and are never asserted by tests.
REFERENCE_BENCHMARK = {
    "fusion": {"accuracy": 0.769, "f1": 0.770, "precision": 0.868, "recall": 0.769},
    "perceiverio_classic": {"accuracy": 0.615, "f1": 0.624, "precision": 0.700,
                            "recall": 0.615},
    "perceiver": {"accuracy": 0.615, "f1": 0.604, "precision": 0.670,
                  "recall": 0.615},
    "transformer_concat": {"accuracy": 0.538, "f1": 0.516, "precision": 0.654,
                           "recall": 0.538},
    "sensor_only": {"accuracy": 0.615, "f1": 0.591, "precision": 0.615,
                    "recall": 0.615},
    "image_only": {"accuracy": 0.462, "f1": 0.405, "precision": 0.462,
                   "recall": 0.462},
}

# Same provenance: ensemble accuracy per diagonal correlation target.
REFERENCE_TAU_CURVE = {0.1: 0.538, 0.3: 0.692, 0.5: 0.538, 0.7: 0.538, 0.9: 0.615}


@dataclass
class BaselineConfig:
    kind: str = "transformer_concat"
    d_sensor: int = 28
    d_image: int = 512
    latent_dim: int = 32
    dropout: float = 0.4
    num_layers: int = 1
    num_heads: int = 2
    num_latents: int = 4
    hidden_dim: int = 64
    n_classes: int = 5
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(
                f"unknown baseline kind {self.kind!r}; expected one of {BASELINE_KINDS}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.num_layers < 1 or self.num_latents < 1:
            raise ValueError("num_layers and num_latents must be >= 1")
        width = self.token_width()
        if width % self.num_heads != 0:
            raise ValueError(
                f"token width {width} not divisible by {self.num_heads} heads"
            )
        for warning in self.ignored_field_warnings():
            log.warning(warning)

    def token_width(self) -> int:
        return self.hidden_dim if self.kind in ("sensor_only", "image_only") \
            else self.latent_dim

    def ignored_field_warnings(self) -> list[str]:
        defaults = BaselineConfig.__dataclass_fields__
        out = []
        if self.kind not in ("perceiver", "perceiverio_classic") and \
                self.num_latents != defaults["num_latents"].default:
            out.append(f"num_latents is ignored for kind {self.kind!r}")
        if self.kind in ("sensor_only", "image_only") and \
                self.latent_dim != defaults["latent_dim"].default:
            out.append(f"latent_dim is ignored for kind {self.kind!r}; "
                       "unimodal encoders use hidden_dim")
        return out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "d_sensor": self.d_sensor, "d_image": self.d_image,
            "latent_dim": self.latent_dim, "dropout": self.dropout,
            "num_layers": self.num_layers, "num_heads": self.num_heads,
            "num_latents": self.num_latents, "hidden_dim": self.hidden_dim,
            "n_classes": self.n_classes, "ln_eps": self.ln_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        return cls(**d)

    def build(self, seed: int):
        return build_baseline(self, seed=seed)


# ---------------------------------------------------------------------------
# shared parameter helpers
# ---------------------------------------------------------------------------

def _uniform(rng, out_dim, in_dim):
    bound = math.sqrt(3.0 / in_dim)
    return T.Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)),
                    requires_grad=True)


def _add_projection(params, prefix, rng, out_dim, in_dim):
    params[f"{prefix}.weight"] = _uniform(rng, out_dim, in_dim)
    params[f"{prefix}.bias"] = T.Tensor(np.zeros((1, out_dim)), requires_grad=True)
    params[f"{prefix}.ln_gain"] = T.Tensor(np.ones((1, out_dim)), requires_grad=True)
    params[f"{prefix}.ln_bias"] = T.Tensor(np.zeros((1, out_dim)), requires_grad=True)


def _add_block(params, prefix, rng, d):
    for name in ("query_weight", "key_weight", "value_weight", "out_weight"):
        params[f"{prefix}.{name}"] = _uniform(rng, d, d)
    params[f"{prefix}.ffn_in_weight"] = _uniform(rng, 2 * d, d)
    params[f"{prefix}.ffn_out_weight"] = _uniform(rng, d, 2 * d)
    for name in ("ln1_gain", "ln2_gain"):
        params[f"{prefix}.{name}"] = T.Tensor(np.ones((1, d)), requires_grad=True)
    for name in ("ln1_bias", "ln2_bias"):
        params[f"{prefix}.{name}"] = T.Tensor(np.zeros((1, d)), requires_grad=True)


def _add_head(params, rng, n_classes, in_dim, hidden):
    params["head.hidden_weight"] = _uniform(rng, hidden, in_dim)
    params["head.out_weight"] = _uniform(rng, n_classes, hidden)


def _add_latents(params, prefix, rng, count, d):
    for j in range(count):
        params[f"{prefix}.token{j}"] = _uniform(rng, 1, d)


class _BaselineBase:
    """Parameter-dict model following the trainer protocol."""

    def __init__(self, config: BaselineConfig, params: dict[str, T.Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: BaselineConfig, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
        return cls(config, cls._init_params(config, rng))

    @classmethod
    def from_config_dict(cls, d: dict, seed: int = 0):
        return cls.init(BaselineConfig.from_dict(d), seed)

    def parameters(self) -> dict[str, T.Tensor]:
        return self.params

    def config_dict(self) -> dict:
        return self.config.to_dict()

    def make_batch(self, samples) -> Batch:
        return make_batch(samples, image_dim=self.config.d_image)

    # -- shared forward pieces ------------------------------------------------

    def _project(self, x: T.Tensor, prefix: str, train_mode: bool, rng) -> T.Tensor:
        p = self.params
        h = T.relu(T.add(T.matmul(x, T.transpose(p[f"{prefix}.weight"])),
                         p[f"{prefix}.bias"]))
        if train_mode and self.config.dropout > 0.0:
            h = T.dropout(h, self.config.dropout, rng)
        return T.layernorm(h, p[f"{prefix}.ln_gain"], p[f"{prefix}.ln_bias"],
                           eps=self.config.ln_eps)

    def _block(self, queries: list[T.Tensor], context: list[T.Tensor],
               prefix: str) -> list[T.Tensor]:
        """Post-LN attention block: LN(x + attn), then LN(h + FFN(h))."""
        p = self.params
        attended = multi_head_attention(
            queries, context,
            p[f"{prefix}.query_weight"], p[f"{prefix}.key_weight"],
            p[f"{prefix}.value_weight"], p[f"{prefix}.out_weight"],
            self.config.num_heads,
        )
        out = []
        for q_tok, a_tok in zip(queries, attended):
            h = T.layernorm(T.add(q_tok, a_tok), p[f"{prefix}.ln1_gain"],
                            p[f"{prefix}.ln1_bias"], eps=self.config.ln_eps)
            f = feed_forward(h, p[f"{prefix}.ffn_in_weight"],
                             p[f"{prefix}.ffn_out_weight"])
            out.append(T.layernorm(T.add(h, f), p[f"{prefix}.ln2_gain"],
                                   p[f"{prefix}.ln2_bias"], eps=self.config.ln_eps))
        return out

    def _latent_tokens(self, prefix: str, n_rows: int) -> list[T.Tensor]:
        ones = T.Tensor(np.ones((n_rows, 1)))
        return [T.matmul(ones, self.params[f"{prefix}.token{j}"])
                for j in range(self.config.num_latents)]

    def _head(self, x: T.Tensor) -> T.Tensor:
        return T.matmul(
            T.relu(T.matmul(x, T.transpose(self.params["head.hidden_weight"]))),
            T.transpose(self.params["head.out_weight"]),
        )

    @staticmethod
    def _mean_tokens(tokens: list[T.Tensor]) -> T.Tensor:
        acc = tokens[0]
        for tok in tokens[1:]:
            acc = T.add(acc, tok)
        return T.scale(acc, 1.0 / len(tokens))

    def forward(self, batch: Batch, train_mode: bool = False, rng=None):
        if train_mode and self.config.dropout > 0.0 and rng is None:
            raise ValueError("train-mode forward needs an rng for dropout masks")
        logits = self._forward_logits(batch, train_mode, rng)
        return logits, None, None

    def predict_proba(self, batch: Batch) -> np.ndarray:
        logits, _, _ = self.forward(batch, train_mode=False)
        return T.softmax_rows(logits).data


@register_model("transformer_concat")
class ConcatTransformerBaseline(_BaselineBase):
    """Concatenate both modalities, project, one self-attention block, head."""

    @staticmethod
    def _init_params(cfg: BaselineConfig, rng) -> dict[str, T.Tensor]:
        params: dict[str, T.Tensor] = {}
        _add_projection(params, "proj", rng, cfg.latent_dim,
                        cfg.d_sensor + cfg.d_image)
        for layer in range(cfg.num_layers):
            _add_block(params, f"block{layer}", rng, cfg.latent_dim)
        _add_head(params, rng, cfg.n_classes, cfg.latent_dim, cfg.hidden_dim)
        return params

    def _forward_logits(self, batch, train_mode, rng):
        x = T.concat_cols([T.Tensor(batch.sensor), T.Tensor(batch.image)])
        tokens = [self._project(x, "proj", train_mode, rng)]
        for layer in range(self.config.num_layers):
            tokens = self._block(tokens, tokens, f"block{layer}")
        return self._head(tokens[0])


@register_model("perceiver")
class PerceiverBaseline(_BaselineBase):
    """Learnable latents cross-attend to the projected concat input."""

    @staticmethod
    def _init_params(cfg: BaselineConfig, rng) -> dict[str, T.Tensor]:
        params: dict[str, T.Tensor] = {}
        _add_projection(params, "proj", rng, cfg.latent_dim,
                        cfg.d_sensor + cfg.d_image)
        _add_latents(params, "latents", rng, cfg.num_latents, cfg.latent_dim)
        _add_block(params, "cross", rng, cfg.latent_dim)
        for layer in range(cfg.num_layers):
            _add_block(params, f"block{layer}", rng, cfg.latent_dim)
        _add_head(params, rng, cfg.n_classes, cfg.latent_dim, cfg.hidden_dim)
        return params

    def _forward_logits(self, batch, train_mode, rng):
        x = T.concat_cols([T.Tensor(batch.sensor), T.Tensor(batch.image)])
        inputs = [self._project(x, "proj", train_mode, rng)]
        latents = self._latent_tokens("latents", len(batch))
        latents = self._block(latents, inputs, "cross")
        for layer in range(self.config.num_layers):
            latents = self._block(latents, latents, f"block{layer}")
        return self._head(self._mean_tokens(latents))


@register_model("perceiverio_classic")
class PerceiverIOClassicBaseline(_BaselineBase):
    """Independent per-modality latent encoders, concatenated, MLP decoder."""

    @staticmethod
    def _init_params(cfg: BaselineConfig, rng) -> dict[str, T.Tensor]:
        params: dict[str, T.Tensor] = {}
        for mod, in_dim in (("sensor", cfg.d_sensor), ("image", cfg.d_image)):
            _add_projection(params, f"{mod}_proj", rng, cfg.latent_dim, in_dim)
            _add_latents(params, f"{mod}_latents", rng, cfg.num_latents,
                         cfg.latent_dim)
            _add_block(params, f"{mod}_cross", rng, cfg.latent_dim)
            for layer in range(cfg.num_layers):
                _add_block(params, f"{mod}_block{layer}", rng, cfg.latent_dim)
        # the decoder reads the flattened concatenation of every latent
        _add_head(params, rng, cfg.n_classes,
                  2 * cfg.num_latents * cfg.latent_dim, cfg.hidden_dim)
        return params

    def _encode_modality(self, x: T.Tensor, mod: str, train_mode, rng):
        inputs = [self._project(x, f"{mod}_proj", train_mode, rng)]
        latents = self._latent_tokens(f"{mod}_latents", x.shape[0])
        latents = self._block(latents, inputs, f"{mod}_cross")
        for layer in range(self.config.num_layers):
            latents = self._block(latents, latents, f"{mod}_block{layer}")
        return latents

    def _forward_logits(self, batch, train_mode, rng):
        lat_s = self._encode_modality(T.Tensor(batch.sensor), "sensor",
                                      train_mode, rng)
        lat_i = self._encode_modality(T.Tensor(batch.image), "image",
                                      train_mode, rng)
        return self._head(T.concat_cols(lat_s + lat_i))


class _UnimodalBaseline(_BaselineBase):
    modality = ""

    @classmethod
    def _init_params(cls, cfg: BaselineConfig, rng) -> dict[str, T.Tensor]:
        in_dim = cfg.d_sensor if cls.modality == "sensor" else cfg.d_image
        params: dict[str, T.Tensor] = {}
        _add_projection(params, "proj", rng, cfg.hidden_dim, in_dim)
        for layer in range(cfg.num_layers):
            _add_block(params, f"block{layer}", rng, cfg.hidden_dim)
        _add_head(params, rng, cfg.n_classes, cfg.hidden_dim, cfg.hidden_dim)
        return params

    def _forward_logits(self, batch, train_mode, rng):
        x = T.Tensor(batch.sensor if self.modality == "sensor" else batch.image)
        tokens = [self._project(x, "proj", train_mode, rng)]
        for layer in range(self.config.num_layers):
            tokens = self._block(tokens, tokens, f"block{layer}")
        return self._head(tokens[0])


@register_model("sensor_only")
class SensorOnlyBaseline(_UnimodalBaseline):
    modality = "sensor"


@register_model("image_only")
class ImageOnlyBaseline(_UnimodalBaseline):
    modality = "image"


def build_baseline(cfg: BaselineConfig, seed: int = 0, dims: dict | None = None):
    """Instantiate the architecture named by cfg.kind (dims override inputs)."""
    if dims:
        cfg = replace(cfg, **dims)
    classes = {
        "transformer_concat": ConcatTransformerBaseline,
        "perceiver": PerceiverBaseline,
        "perceiverio_classic": PerceiverIOClassicBaseline,
        "sensor_only": SensorOnlyBaseline,
        "image_only": ImageOnlyBaseline,
    }
    return classes[cfg.kind].init(cfg, seed)


# ---------------------------------------------------------------------------
# benchmark and sweep harnesses
# ---------------------------------------------------------------------------

def _evaluate_ensemble(results, data: SplitDataset) -> dict:
    """Seed-level and weighted-ensemble test metrics for one trained family."""
    models = [m for m, _ in results]
    records = [r for _, r in results]
    test_batch = models[0].make_batch(data.test)
    per_seed_acc = []
    for model in models:
        pred = model.predict_proba(test_batch).argmax(axis=1)
        per_seed_acc.append(float((pred == test_batch.labels).mean()))
    weights = ensemble_weights([r.best_val_accuracy for r in records])
    probs, labels = ensemble_predict(models, weights, test_batch)
    report = compute_metrics(test_batch.labels, labels,
                             n_classes=models[0].config.n_classes)
    return {
        "per_seed_test_accuracy": per_seed_acc,
        "mean_seed_test_accuracy": float(np.mean(per_seed_acc)),
        "std_seed_test_accuracy": float(np.std(per_seed_acc)),
        "per_seed_val_accuracy": [r.best_val_accuracy for r in records],
        "ensemble_weights": weights.to_list(),
        "ensemble": report.to_dict(),
    }


def run_benchmark(
    data: SplitDataset,
    train_cfg: TrainConfig,
    kinds: list[str] | None = None,
    model_cfg: ModelConfig | None = None,
    baseline_cfg: BaselineConfig | None = None,
    n_seeds: int = 10,
    jobs: int = 1,
) -> dict:
    """Train the fusion model plus every requested baseline kind and rank them.

    Every family runs the identical trainer, augmentation, seed set, and
    ensemble protocol; the ranking orders families by ensemble test accuracy
    with name as the deterministic tie-break.
    """
    kinds = list(BASELINE_KINDS) if kinds is None else list(kinds)
    unknown = set(kinds) - set(BASELINE_KINDS)
    if unknown:
        raise ValueError(f"unknown baseline kinds: {sorted(unknown)}")
    model_cfg = model_cfg if model_cfg is not None else ModelConfig()
    baseline_cfg = baseline_cfg if baseline_cfg is not None else BaselineConfig(
        d_sensor=model_cfg.d_sensor, d_image=model_cfg.d_image,
        n_classes=model_cfg.n_classes,
    )
    families: list[tuple[str, object]] = [("fusion", model_cfg)]
    families += [(kind, replace(baseline_cfg, kind=kind)) for kind in kinds]
    rows = {}
    for name, cfg in families:
        log.info("benchmark: training %s (%d seeds)", name, n_seeds)
        results = train_ensemble(cfg, train_cfg, data, n_seeds=n_seeds, jobs=jobs)
        row = _evaluate_ensemble(results, data)
        row["kind"] = name
        row["reference"] = REFERENCE_BENCHMARK.get(name)
        rows[name] = row
    ranking = sorted(rows, key=lambda k: (-rows[k]["ensemble"]["accuracy"], k))
    return {"n_seeds": n_seeds, "models": rows, "ranking": ranking}


def benchmark_csv(report: dict) -> str:
    """Plot-ready accuracy ranking table."""
    lines = ["kind,ensemble_accuracy,ensemble_f1,ensemble_precision,"
             "ensemble_recall,mean_seed_test_accuracy,reference_accuracy"]
    for name in report["ranking"]:
        row = report["models"][name]
        ens = row["ensemble"]
        ref = row["reference"]
        ref_acc = "" if ref is None else repr(ref["accuracy"])
        lines.append(
            f"{name},{ens['accuracy']!r},{ens['weighted_f1']!r},"
            f"{ens['weighted_precision']!r},{ens['weighted_recall']!r},"
            f"{row['mean_seed_test_accuracy']!r},{ref_acc}"
        )
    return "\n".join(lines) + "\n"


def run_tau_sweep(
    data: SplitDataset,
    train_cfg: TrainConfig,
    taus: list[float] = (0.1, 0.3, 0.5, 0.7, 0.9),
    model_cfg: ModelConfig | None = None,
    n_seeds: int = 10,
    jobs: int = 1,
) -> dict:
    """Ensemble accuracy of the fusion model per diagonal correlation target."""
    taus = list(taus)
    if not taus:
        raise ValueError("tau sweep needs at least one value")
    model_cfg = model_cfg if model_cfg is not None else ModelConfig()
    points = []
    total_runs = 0
    for tau in taus:
        cfg = replace(train_cfg, bt=replace(train_cfg.bt, tau=tau))
        log.info("tau sweep: tau=%.3f (%d seeds)", tau, n_seeds)
        results = train_ensemble(model_cfg, cfg, data, n_seeds=n_seeds, jobs=jobs)
        total_runs += len(results)
        row = _evaluate_ensemble(results, data)
        points.append({
            "tau": tau,
            "mean_seed_test_accuracy": row["mean_seed_test_accuracy"],
            "ensemble_accuracy": row["ensemble"]["accuracy"],
            "per_seed_test_accuracy": row["per_seed_test_accuracy"],
            "reference_accuracy": REFERENCE_TAU_CURVE.get(round(tau, 4)),
        })
    return {"taus": taus, "n_seeds": n_seeds, "total_runs": total_runs,
            "points": points}


def sweep_csv(report: dict) -> str:
    """Plot-ready (tau, accuracy) series."""
    lines = ["tau,mean_seed_test_accuracy,ensemble_accuracy,reference_accuracy"]
    for p in report["points"]:
        ref = "" if p["reference_accuracy"] is None else repr(p["reference_accuracy"])
        lines.append(f"{p['tau']!r},{p['mean_seed_test_accuracy']!r},"
                     f"{p['ensemble_accuracy']!r},{ref}")
    return "\n".join(lines) + "\n"
