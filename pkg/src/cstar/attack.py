"""L-infinity PGD adversarial examples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .nn import Model, loss_and_grad


@dataclass(frozen=True)
class AdvConfig:
    """Attack settings. ``delta`` is the L-inf budget, ``step`` the per-iteration size."""

    delta: float = 8 / 255
    step: float = 2 / 255
    iters: int = 50
    random_init: bool = False

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.step <= 0:
            raise ValueError(f"step must be > 0, got {self.step}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")


def _project(x_adv: np.ndarray, x: np.ndarray, delta: float) -> np.ndarray:
    # L-inf ball first, then the valid pixel box.
    return np.clip(np.clip(x_adv, x - delta, x + delta), 0.0, 1.0)


def pgd(model: Model, x: np.ndarray, y: np.ndarray, cfg: AdvConfig,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Run ``cfg.iters`` signed-gradient ascent steps on the loss, projecting each time.

    Gradients are taken in eval mode, so batch norm uses running statistics.
    ``rng`` is only used for the random start.
    """
    if cfg.random_init and cfg.delta > 0:
        rng = rng if rng is not None else np.random.default_rng()
        x_adv = _project(x + rng.uniform(-cfg.delta, cfg.delta, size=x.shape), x, cfg.delta)
    else:
        x_adv = x.copy()
    for _ in range(cfg.iters):
        _, _, gx = loss_and_grad(model, x_adv, y, mode="eval", need_params=False)
        if not np.all(np.isfinite(gx)):
            raise NumericError("non-finite input gradient during PGD")
        x_adv = _project(x_adv + cfg.step * np.sign(gx), x, cfg.delta)
    return x_adv
