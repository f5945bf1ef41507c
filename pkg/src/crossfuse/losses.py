"""Classification loss with a complementarity-targeted Barlow Twins term.

The regularizer standardizes the two modality latents over the batch,
forms their cross-correlation matrix, and pushes the diagonal toward a
target correlation `tau` (1.0 recovers the classic redundancy-reduction
objective; smaller values keep modality-specific structure) while `alpha`
suppresses off-diagonal correlations. Its weight decays stepwise with the
epoch index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T

log = logging.getLogger(__name__)


class BatchSizeError(ValueError):
    """Batch statistics require at least two samples."""


@dataclass
class BTConfig:
    tau: float = 0.3
    alpha: float = 0.05
    lambda0: float = 0.01
    decay_base: float = 0.98
    decay_every: int = 5
    eps: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.alpha < 0 or self.lambda0 < 0:
            raise ValueError("alpha and lambda0 must be >= 0")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau, "alpha": self.alpha, "lambda0": self.lambda0,
            "decay_base": self.decay_base, "decay_every": self.decay_every,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BTConfig":
        return cls(**d)


@dataclass
class CorrelationMatrix:
    matrix: T.Tensor
    batch_size: int


def _as_tensor(x) -> T.Tensor:
    return x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=float))


def standardize_batch(z: T.Tensor, eps: float = 1e-5) -> T.Tensor:
    """Zero-mean unit-variance per feature over the batch (population variance).

    Population variance makes the self-correlation diagonal exactly 1, which
    anchors the tau = 1 optimum. Differentiable through mean and variance.
    """
    z = _as_tensor(z)
    if z.shape[0] < 2:
        raise BatchSizeError(
            f"batch standardization needs >= 2 samples, got {z.shape[0]}"
        )
    return T.batch_standardize(z, eps=eps)


def cross_correlation(z_a: T.Tensor, z_b: T.Tensor) -> CorrelationMatrix:
    """C[j][k] = (1/N) sum_n z_a[n][j] * z_b[n][k] for standardized inputs."""
    z_a, z_b = _as_tensor(z_a), _as_tensor(z_b)
    if z_a.shape != z_b.shape:
        raise T.DimensionError(
            f"cross_correlation shape mismatch: {z_a.shape} vs {z_b.shape}"
        )
    n = z_a.shape[0]
    c = T.scale(T.matmul(T.transpose(z_a), z_b), 1.0 / n)
    return CorrelationMatrix(matrix=c, batch_size=n)


def barlow_twins_loss(corr, tau: float, alpha: float) -> T.Tensor:
    """sum_j (C_jj - tau)^2 + alpha * sum_{j != k} C_jk^2 as a scalar tensor."""
    c = corr.matrix if isinstance(corr, CorrelationMatrix) else _as_tensor(corr)
    d, d2 = c.shape
    if d != d2:
        raise T.DimensionError(f"correlation matrix must be square, got {c.shape}")
    eye = T.Tensor(np.eye(d))
    on_dev = T.mul(T.sub(c, T.Tensor(tau * np.eye(d))), eye)
    on_diag = T.total_sum(T.mul(on_dev, on_dev))
    off = T.mul(c, T.Tensor(1.0 - np.eye(d)))
    off_diag = T.total_sum(T.mul(off, off))
    return T.add(on_diag, T.scale(off_diag, alpha))


def lambda_schedule(epoch: int, cfg: BTConfig) -> float:
    """Stepwise exponential decay: lambda0 * base^(epoch // decay_every)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lambda0 * cfg.decay_base ** (epoch // cfg.decay_every)


@dataclass
class LossBreakdown:
    """Scalar loss tensor plus the logged decomposition."""

    total: T.Tensor
    ce: float
    bt: float
    lam: float
    bt_skipped: bool = False

    def log_record(self, epoch: int, step: int) -> dict:
        return {
            "epoch": epoch, "step": step, "ce": self.ce, "bt": self.bt,
            "lambda": self.lam, "total": self.total.item(),
        }


def total_loss(
    logits: T.Tensor,
    labels: np.ndarray,
    z_s: T.Tensor | None,
    z_i: T.Tensor | None,
    epoch: int,
    cfg: BTConfig,
) -> LossBreakdown:
    """Mean cross-entropy plus the scheduled Barlow Twins term.

    Models without a dual-latent form pass z_s = z_i = None and train on
    cross-entropy alone. A batch of one cannot be standardized, so the
    regularizer is skipped there with a warning rather than an error.
    """
    ce = T.cross_entropy(logits, labels)
    lam = lambda_schedule(epoch, cfg)
    if z_s is None or z_i is None:
        return LossBreakdown(total=ce, ce=ce.item(), bt=0.0, lam=lam,
                             bt_skipped=True)
    if z_s.shape[0] < 2:
        log.warning("batch of size 1: skipping the correlation term")
        return LossBreakdown(total=ce, ce=ce.item(), bt=0.0, lam=lam,
                             bt_skipped=True)
    corr = cross_correlation(
        standardize_batch(z_s, eps=cfg.eps), standardize_batch(z_i, eps=cfg.eps)
    )
    bt = barlow_twins_loss(corr, tau=cfg.tau, alpha=cfg.alpha)
    if cfg.lambda0 == 0.0:
        # keep total == ce bit-exact when the regularizer is disabled
        return LossBreakdown(total=ce, ce=ce.item(), bt=bt.item(), lam=lam)
    total = T.add(ce, T.scale(bt, lam))
    return LossBreakdown(total=total, ce=ce.item(), bt=bt.item(), lam=lam)
