"""Central finite-difference checking of tape gradients.

The FD side never touches the tape: it re-runs the forward closure with
perturbed leaf values and differences scalar losses, so it stays an
independent oracle for the backward pass.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
# Relative error denominators are floored so exactly-zero gradient pairs
# (e.g. parameters behind a single-key softmax) compare cleanly.
_DENOM_FLOOR = 1e-8


def fd_gradient(f: Callable[[], float], leaf: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. every entry of leaf.

    Mutates leaf.data in place entry by entry and restores it.
    """
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.max(np.abs(analytic - numeric)))
    denom = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), _DENOM_FLOOR)
    return diff / denom


def jitter_parameters(model, seed: int, scale: float = 0.3) -> None:
    """Shift every parameter to a generic point before an FD comparison.

    Freshly initialized models sit on non-differentiable symmetry points:
    the zero missing-image token puts whole rows exactly on the ReLU kink
    and the zero-variance layernorm guard. FD straddles those cliffs while
    the backward pass reports the (correct) one-sided subgradient, so checks
    run at a jittered point where the loss is smooth.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x71)))
    for t in model.parameters().values():
        t.data = t.data + rng.uniform(-scale, scale, size=t.shape)


def model_gradcheck(model, batch, bt_cfg=None, dropout_seed: int = 0,
                    h: float = DEFAULT_STEP) -> dict[str, float]:
    """FD-vs-backward errors for every parameter through the training loss.

    Runs the model in train mode with a dropout generator rebuilt from the
    same seed on every evaluation, so the FD oracle sees a fixed mask.
    """
    from .losses import BTConfig, total_loss

    cfg = bt_cfg if bt_cfg is not None else BTConfig()

    def loss_fn():
        rng = np.random.default_rng(np.random.SeedSequence((dropout_seed, 0xD0)))
        logits, z_s, z_i = model.forward(batch, train_mode=True, rng=rng)
        return total_loss(logits, batch.labels, z_s, z_i, epoch=0, cfg=cfg).total

    return check_gradients(loss_fn, model.parameters(), h=h)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    leaves: Mapping[str, Tensor],
    h: float = DEFAULT_STEP,
) -> dict[str, float]:
    """Compare tape gradients of loss_fn against finite differences.

    loss_fn must rebuild the forward pass from the current leaf values on
    every call (any internal randomness must be re-seeded identically).
    Returns the per-leaf relative error.
    """
    for t in leaves.values():
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {}
    for name, t in leaves.items():
        analytic[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        t.zero_grad()

    def value() -> float:
        return loss_fn().item()

    errors = {}
    for name, t in leaves.items():
        errors[name] = relative_error(analytic[name], fd_gradient(value, t, h=h))
    return errors
