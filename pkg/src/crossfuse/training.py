"""AdamW training loop with early stopping, plateau LR decay, and ensembles.

Every source of randomness is derived from the run seed through fixed-purpose
seed sequences (init / shuffling / dropout / augmentation), so toggling any
one of them leaves the others' streams untouched and reruns are bit-exact.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .data import AugmentConfig, SplitDataset, augment, make_batch
from .losses import BTConfig, total_loss

log = logging.getLogger(__name__)

# sub-seed purposes; tuples (seed, PURPOSE, ...) feed SeedSequence
_INIT, _SHUFFLE, _DROPOUT, _AUGMENT = 0, 1, 2, 3

_IMPROVEMENT_TOL = 1e-6


class NonFiniteGradientError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


class EnsembleRunError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.05
    batch_size: int = 8
    max_epochs: int = 30
    early_stop_patience: int = 5
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    bt: BTConfig = field(default_factory=BTConfig)
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("lr must be > 0, batch_size >= 1, max_epochs >= 0")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0 < self.plateau_factor <= 1:
            raise ValueError(f"plateau_factor must be in (0, 1], got {self.plateau_factor}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "weight_decay": self.weight_decay,
            "batch_size": self.batch_size, "max_epochs": self.max_epochs,
            "early_stop_patience": self.early_stop_patience,
            "plateau_factor": self.plateau_factor,
            "plateau_patience": self.plateau_patience, "seed": self.seed,
            "betas": list(self.betas), "adam_eps": self.adam_eps,
            "bt": self.bt.to_dict(),
            "augment": None if self.augment is None else {
                "replication": self.augment.replication,
                "noise_sigma": self.augment.noise_sigma,
                "feature_dropout_p": self.augment.feature_dropout_p,
                "scale_range": list(self.augment.scale_range),
                "seed": self.augment.seed,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if "bt" in d and isinstance(d["bt"], dict):
            d["bt"] = BTConfig.from_dict(d["bt"])
        if d.get("augment") is not None and isinstance(d["augment"], dict):
            a = dict(d["augment"])
            if "scale_range" in a:
                a["scale_range"] = tuple(a["scale_range"])
            d["augment"] = AugmentConfig(**a)
        return cls(**d)


def _decays(name: str) -> bool:
    # standard exclusion: biases and layernorm affine parameters
    return "bias" not in name and "gain" not in name


class AdamW:
    """Decoupled weight decay Adam over a named parameter dict.

    Decay multiplies the parameter by (1 - lr * wd) before the adaptive
    update; bias and gain parameters are exempt.
    """

    def __init__(self, params: dict[str, T.Tensor], weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise NonFiniteGradientError(
                    f"non-finite gradient in parameter {name!r}"
                )
            if self.weight_decay > 0 and _decays(name):
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass
class TrainRecord:
    seed: int
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_accuracy: float | None = None
    stopped_epoch: int | None = None  # index of the last completed epoch

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "epochs": self.epochs, "steps": self.steps,
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "stopped_epoch": self.stopped_epoch,
        }


def evaluate_split(model, samples) -> tuple[float, float]:
    """Eval-mode (accuracy, mean cross-entropy) over one split as one batch."""
    batch = make_batch(samples, image_dim=model.config.d_image)
    logits, _, _ = model.forward(batch, train_mode=False)
    ce = T.cross_entropy(logits, batch.labels).item()
    accuracy = float((logits.data.argmax(axis=1) == batch.labels).mean())
    return accuracy, ce


def _augment_seed(run_seed: int, cfg: AugmentConfig) -> int:
    return int(np.random.SeedSequence((run_seed, _AUGMENT, cfg.seed))
               .generate_state(1)[0])


def train_one(model_cfg, train_cfg: TrainConfig, data: SplitDataset):
    """Train one model; returns (model holding best-val params, TrainRecord)."""
    if not data.train or not data.val:
        raise ValueError("training needs nonempty train and val splits")
    seed = train_cfg.seed
    record = TrainRecord(seed=seed)
    model = model_cfg.build(seed)
    if train_cfg.max_epochs == 0:
        return model, record

    train_samples = data.train
    if train_cfg.augment is not None:
        aug = replace(train_cfg.augment,
                      seed=_augment_seed(seed, train_cfg.augment))
        train_samples = augment(train_samples, aug)

    optimizer = AdamW(model.parameters(), weight_decay=train_cfg.weight_decay,
                      betas=train_cfg.betas, eps=train_cfg.adam_eps)
    lr = train_cfg.lr
    n = len(train_samples)
    best_snapshot = None
    best_val_loss = np.inf
    plateau_bad = 0

    for epoch in range(train_cfg.max_epochs):
        order = np.random.default_rng(
            np.random.SeedSequence((seed, _SHUFFLE, epoch))).permutation(n)
        epoch_ce = epoch_bt = epoch_total = 0.0
        n_steps = 0
        for step, start in enumerate(range(0, n, train_cfg.batch_size)):
            chunk = order[start:start + train_cfg.batch_size]
            batch = make_batch([train_samples[i] for i in chunk],
                               image_dim=model.config.d_image)
            drop_rng = np.random.default_rng(
                np.random.SeedSequence((seed, _DROPOUT, epoch, step)))
            with T.Tape() as tape:
                logits, z_s, z_i = model.forward(batch, train_mode=True,
                                                 rng=drop_rng)
                parts = total_loss(logits, batch.labels, z_s, z_i, epoch,
                                   train_cfg.bt)
            total_value = parts.total.item()
            if not np.isfinite(total_value):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch} step {step}"
                )
            tape.backward(parts.total)
            optimizer.step(lr)
            optimizer.zero_grad()
            record.steps.append(parts.log_record(epoch, step))
            epoch_ce += parts.ce
            epoch_bt += parts.bt
            epoch_total += total_value
            n_steps += 1

        val_accuracy, val_loss = evaluate_split(model, data.val)
        record.epochs.append({
            "epoch": epoch,
            "train_total": epoch_total / n_steps,
            "train_ce": epoch_ce / n_steps,
            "train_bt": epoch_bt / n_steps,
            "lambda": record.steps[-1]["lambda"],
            "val_accuracy": val_accuracy,
            "val_loss": val_loss,
            "lr": lr,
        })
        log.info("seed %d epoch %d: train %.4f val_acc %.4f val_loss %.4f lr %.2e",
                 seed, epoch, epoch_total / n_steps, val_accuracy, val_loss, lr)

        if record.best_val_accuracy is None or \
                val_accuracy > record.best_val_accuracy + _IMPROVEMENT_TOL:
            record.best_val_accuracy = val_accuracy
            record.best_epoch = epoch
            best_snapshot = {k: t.data.copy()
                             for k, t in model.parameters().items()}
        if val_loss < best_val_loss - _IMPROVEMENT_TOL:
            best_val_loss = val_loss
            plateau_bad = 0
        else:
            plateau_bad += 1
            if plateau_bad >= train_cfg.plateau_patience:
                lr *= train_cfg.plateau_factor
                plateau_bad = 0
                log.info("seed %d epoch %d: plateau, lr -> %.2e", seed, epoch, lr)

        record.stopped_epoch = epoch
        if epoch - record.best_epoch >= train_cfg.early_stop_patience:
            log.info("seed %d: early stop at epoch %d (best %d)",
                     seed, epoch, record.best_epoch)
            break

    if best_snapshot is not None:
        for name, t in model.parameters().items():
            t.data = best_snapshot[name]
    return model, record


def train_ensemble(model_cfg, train_cfg: TrainConfig, data: SplitDataset,
                   n_seeds: int = 10, jobs: int = 1):
    """Independent runs with seeds seed+0..seed+n_seeds-1, merged by seed.

    Runs share no mutable state, so the result is identical for any `jobs`.
    """
    if n_seeds < 1:
        raise ValueError(f"n_seeds must be >= 1, got {n_seeds}")
    seeds = [train_cfg.seed + k for k in range(n_seeds)]

    def run(seed: int):
        # replace() shares the nested configs by reference; train_one never
        # mutates them, so concurrent runs stay independent
        cfg = replace(train_cfg, seed=seed)
        try:
            return train_one(model_cfg, cfg, data)
        except Exception as exc:
            raise EnsembleRunError(f"run with seed {seed} failed: {exc}") from exc

    if jobs <= 1:
        return [run(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run, seeds))
