"""Adam with named parameter groups, built for the SLAM loop.

The optimizer never owns parameters: ``step`` takes a gradient and returns
the increment to apply, so callers can retract pose tangents onto SE(3)
and clamp map parameters themselves. Groups can grow and shrink in sync
with map densification/pruning; new rows start with zero moments.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Adam"]


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._groups: dict[str, dict] = {}

    def register(self, name: str, shape, lr) -> None:
        """Add a parameter group. ``lr`` may be a scalar or a per-entry array."""
        shape = tuple(shape) if not isinstance(shape, int) else (shape,)
        self._groups[name] = {
            "m": np.zeros(shape),
            "v": np.zeros(shape),
            "lr": np.asarray(lr, dtype=np.float64),
            "t": 0,
        }

    def __contains__(self, name: str) -> bool:
        return name in self._groups

    def step(self, name: str, grad: np.ndarray) -> np.ndarray:
        """Return the parameter increment for one Adam step on ``grad``."""
        g = self._groups[name]
        grad = np.asarray(grad, dtype=np.float64)
        g["t"] += 1
        g["m"] = self.beta1 * g["m"] + (1.0 - self.beta1) * grad
        g["v"] = self.beta2 * g["v"] + (1.0 - self.beta2) * grad * grad
        m_hat = g["m"] / (1.0 - self.beta1 ** g["t"])
        v_hat = g["v"] / (1.0 - self.beta2 ** g["t"])
        return -g["lr"] * m_hat / (np.sqrt(v_hat) + self.eps)

    def append_rows(self, name: str, count: int) -> None:
        g = self._groups[name]
        pad = (count,) + g["m"].shape[1:]
        g["m"] = np.concatenate([g["m"], np.zeros(pad)])
        g["v"] = np.concatenate([g["v"], np.zeros(pad)])

    def keep_rows(self, name: str, mask: np.ndarray) -> None:
        g = self._groups[name]
        g["m"] = g["m"][mask].copy()
        g["v"] = g["v"][mask].copy()

    def clone(self) -> "Adam":
        c = Adam(self.beta1, self.beta2, self.eps)
        for name, g in self._groups.items():
            c._groups[name] = {
                "m": g["m"].copy(),
                "v": g["v"].copy(),
                "lr": g["lr"].copy() if isinstance(g["lr"], np.ndarray) else g["lr"],
                "t": g["t"],
            }
        return c
