"""Two-way Gumbel-Softmax switch between an adapter branch and the identity."""

from __future__ import annotations

import enum

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ADAPTER, IDENTITY = 0, 1
LOG_PI_FLOOR = -30.0
U_CLAMP = 1e-12


class Decision(str, enum.Enum):
    ADAPTER = "adapter"
    IDENTITY = "identity"


class SwitchParams:
    """Trainable logits (index 0 = adapter, 1 = identity) and a fixed temperature."""

    def __init__(self, logits=(0.0, 0.0), tau: float = 0.1, requires_grad: bool = True):
        if not tau > 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != (2,):
            raise ValueError(f"switch needs 2 logits, got shape {logits.shape}")
        self.logits = Tensor(logits, requires_grad=requires_grad, name="switch.logits")
        self.tau = float(tau)

    @property
    def pi(self) -> np.ndarray:
        return ad._softmax_np(self.logits.values)

    def parameters(self) -> list[Tensor]:
        return [self.logits]

    def to_dict(self) -> dict:
        return {"logits": self.logits.values.tolist(), "tau": self.tau,
                "decision": hard_decision(self).value, "pi": self.pi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SwitchParams":
        return cls(d["logits"], d["tau"])


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), U_CLAMP, 1.0 - U_CLAMP)
    return -np.log(-np.log(u))


def gumbel_sample(rng: np.random.Generator, size: int = 2) -> np.ndarray:
    return gumbel_from_uniform(rng.random(size))


def _log_pi(logits: np.ndarray):
    z = logits - logits.max()
    lp = z - np.log(np.exp(z).sum())
    clamped = lp < LOG_PI_FLOOR
    return np.maximum(lp, LOG_PI_FLOOR), clamped


def gs_forward(p: SwitchParams, g, straight_through: bool = False) -> Tensor:
    """Relaxed one-hot sample ``softmax((log pi + g) / tau)``.

    With ``straight_through`` the forward value is the hard one-hot of the
    sample while gradients follow the relaxed sample.
    """
    g = np.asarray(g, dtype=np.float64)
    lp, clamped = _log_pi(p.logits.values)
    pi = ad._softmax_np(p.logits.values)
    y = ad._softmax_np((lp + g) / p.tau)
    out = y
    if straight_through:
        out = np.zeros_like(y)
        out[int(np.argmax(y))] = 1.0

    def back(up):
        gz = y * (up - (up * y).sum()) / p.tau
        gz = np.where(clamped, 0.0, gz)
        # d log_softmax: (I - 1 pi^T)^T applied to gz
        return (gz - pi * gz.sum(),)

    return ad.get_tape().record("gumbel_softmax", Tensor(out), (p.logits,), back)


def mix(y: Tensor, branch_adapter: Tensor, branch_identity: Tensor) -> Tensor:
    """``y[0] * adapter + y[1] * identity`` with gradients to all three inputs."""
    if branch_adapter.shape != branch_identity.shape:
        raise ShapeError(f"mix: shape mismatch {branch_adapter.shape} vs {branch_identity.shape}")
    if y.shape != (2,):
        raise ShapeError(f"mix: switch weights must have shape (2,), got {y.shape}")
    yv, av, hv = y.values, branch_adapter.values, branch_identity.values

    def back(g):
        gy = np.array([np.vdot(g, av), np.vdot(g, hv)]) if y.requires_grad else None
        return gy, g * yv[0], g * yv[1]

    return ad.get_tape().record("mix", Tensor(yv[0] * av + yv[1] * hv),
                                (y, branch_adapter, branch_identity), back)


def hard_decision(p: SwitchParams) -> Decision:
    """Adapter only when its probability is strictly larger; ties pick the identity."""
    lg = p.logits.values
    return Decision.ADAPTER if lg[ADAPTER] > lg[IDENTITY] else Decision.IDENTITY
