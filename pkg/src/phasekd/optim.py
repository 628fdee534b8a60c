"""SGD and Adam with classic L2-coupled weight decay."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, StructureError
from .nn import ParameterSet


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be non-negative")


def zero_grads(params: ParameterSet) -> None:
    for _, t in params.items():
        t.grad = None


class Optimizer:
    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet) -> None:
        cfg = self.cfg
        trainable = params.trainable()
        for name, p in trainable:
            if p.grad is None:
                raise StructureError(f"no gradient for trainable parameter {name!r}")
        self.t += 1
        for name, p in trainable:
            g = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
            if cfg.kind == "sgd":
                if cfg.momentum:
                    buf = self.m.get(name)
                    buf = g.copy() if buf is None else cfg.momentum * buf + g
                    self.m[name] = buf
                    g = buf
                p.data = p.data - cfg.learning_rate * g
            else:
                m = self.m.get(name, 0.0)
                v = self.v.get(name, 0.0)
                m = cfg.beta1 * m + (1 - cfg.beta1) * g
                v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
                self.m[name], self.v[name] = m, v
                m_hat = m / (1 - cfg.beta1 ** self.t)
                v_hat = v / (1 - cfg.beta2 ** self.t)
                p.data = p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)

    def state_bytes(self) -> bytes:
        arrays = {"t": np.array(self.t)}
        arrays.update({f"m/{k}": v for k, v in self.m.items()})
        arrays.update({f"v/{k}": v for k, v in self.v.items()})
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()

    def load_state_bytes(self, blob: bytes) -> None:
        with np.load(io.BytesIO(blob)) as z:
            self.t = int(z["t"])
            self.m = {k[2:]: z[k].copy() for k in z.files if k.startswith("m/")}
            self.v = {k[2:]: z[k].copy() for k in z.files if k.startswith("v/")}


def step(params: ParameterSet, cfg: OptimizerConfig, state: Optimizer | None = None) -> Optimizer:
    """Functional form: one update using the gradients stored on ``params``."""
    state = state or Optimizer(cfg)
    state.step(params)
    return state
