"""SGD with (Nesterov) momentum, L2 weight decay and learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

SCHEDULES = ("constant", "step", "per_phase_constant")


@dataclass(frozen=True)
class OptimizerSpec:
    """Hyper-parameters shared by every phase of a run.

    ``schedule`` is one of:

    * ``constant`` -- ``base_lr`` at every epoch;
    * ``step`` -- ``base_lr * step_factor ** (epoch // step_every)`` over the
      run's global epoch counter;
    * ``per_phase_constant`` -- each phase's own ``lr``; when ``step_factor``
      and ``step_every`` are set it additionally decays within the phase.
    """

    base_lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    schedule: str = "per_phase_constant"
    step_factor: float | None = None
    step_every: int | None = None

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"optimizer.lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"optimizer.momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"optimizer.weight_decay must be >= 0, got {self.weight_decay}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "step" and (self.step_factor is None or self.step_every is None):
            raise ConfigError("step schedule needs step_factor and step_every")
        if self.step_factor is not None and not 0 < self.step_factor <= 1:
            raise ConfigError(f"step_factor must lie in (0, 1], got {self.step_factor}")
        if self.step_every is not None and self.step_every < 1:
            raise ConfigError(f"step_every must be >= 1, got {self.step_every}")


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    lr: float = 0.0

    @classmethod
    def fresh(cls, params) -> "OptimizerState":
        """Zero velocity for every (key, tensor) in ``params``."""
        return cls({key: np.zeros_like(t.data) for key, t in params})


def effective_lr(spec: OptimizerSpec, epoch: int, phase=None, phase_start: int = 0) -> float:
    """Learning rate for global epoch ``epoch``.

    ``phase`` is anything with an ``lr`` attribute; ``phase_start`` is the
    global epoch at which it began (only used by in-phase step decay).
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if spec.schedule == "constant":
        return spec.base_lr
    if spec.schedule == "step":
        return spec.base_lr * spec.step_factor ** (epoch // spec.step_every)
    lr = spec.base_lr if phase is None or phase.lr is None else phase.lr
    if spec.step_factor is not None and spec.step_every is not None:
        lr *= spec.step_factor ** ((epoch - phase_start) // spec.step_every)
    return lr


def sgd_step(params, grads: dict, state: OptimizerState, spec: OptimizerSpec, lr: float | None = None):
    """Update ``params`` in place and return ``(params, state)``.

    ``params`` is a sequence of ``(key, Tensor)``; ``grads`` maps key to
    gradient array.  Plain SGD when momentum is 0::

        W <- W - lr * (g + wd * W)

    otherwise with ``d = g + wd * W``::

        v <- mu * v - lr * d
        W <- W + v                    (classical)
        W <- W + mu * v - lr * d      (Nesterov, look-ahead form)
    """
    lr = state.lr if lr is None else lr
    mu, wd = spec.momentum, spec.weight_decay
    for key, _ in params:
        g = grads.get(key)
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {key}")
    for key, t in params:
        g = grads.get(key)
        if g is None:
            continue
        w = t.data
        d = g + wd * w if wd else g
        if mu == 0.0:
            t.data = w - lr * d
            continue
        v = state.velocity.get(key)
        if v is None:
            v = np.zeros_like(w)
        v = mu * v - lr * d
        state.velocity[key] = v
        if spec.nesterov:
            t.data = w + (mu * v - lr * d)
        else:
            t.data = w + v
    return params, state
