"""Parameter containers, the frame encoder and the two causal temporal decoders."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as tc
from .errors import ParameterError, ShapeError, StructureError
from .tensor import Tensor


class ParameterSet:
    """Ordered ``name -> Tensor`` mapping with a per-parameter trainable flag."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise StructureError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for name in self._params:
            if name.startswith(prefix):
                self._trainable[name] = flag

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if self._trainable[n]]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def copy(self) -> "ParameterSet":
        """Deep, storage-independent copy (values, names, flags)."""
        out = ParameterSet()
        for name, t in self._params.items():
            out.add(name, t.data.copy(), self._trainable[name])
        return out

    def equals(self, other: "ParameterSet") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(t.data, other[n].data) for n, t in self.items())


def snapshot(params: ParameterSet) -> ParameterSet:
    return params.copy()


def load_snapshot(model, snap: ParameterSet) -> None:
    """Copy ``snap`` values into ``model.params`` in place."""
    params = model.params if hasattr(model, "params") else model
    if params.names() != snap.names():
        missing = set(params.names()) ^ set(snap.names())
        raise StructureError(f"parameter names differ: {sorted(missing)}")
    for name, t in params.items():
        src = snap[name].data
        if src.shape != t.shape:
            raise StructureError(f"{name}: shape {src.shape} != {t.shape}")
        t.data = src.copy()
        t.grad = None


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _linear_params(params: ParameterSet, name: str, n_in: int, n_out: int, rng) -> None:
    params.add(f"{name}.weight", glorot(rng, (n_in, n_out), n_in, n_out))
    params.add(f"{name}.bias", np.zeros(n_out))


def linear(params: ParameterSet, name: str, x: Tensor) -> Tensor:
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


@dataclass(frozen=True)
class EncoderConfig:
    raw_dim: int = 128
    hidden_dim: int = 256
    feature_dim: int = 256
    n_classes: int = 7
    proj_hidden: int = 0  # 0 -> feature_dim
    proj_dim: int = 64


class EncoderModel:
    """MLP backbone with a phase classifier head and a projection head on the same features."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ph = cfg.proj_hidden or cfg.feature_dim
        self.params = ParameterSet()
        _linear_params(self.params, "backbone.0", cfg.raw_dim, cfg.hidden_dim, rng)
        _linear_params(self.params, "backbone.1", cfg.hidden_dim, cfg.feature_dim, rng)
        _linear_params(self.params, "classifier", cfg.feature_dim, cfg.n_classes, rng)
        _linear_params(self.params, "projection.0", cfg.feature_dim, ph, rng)
        _linear_params(self.params, "projection.1", ph, cfg.proj_dim, rng)

    def features(self, batch) -> Tensor:
        batch = tc.as_tensor(batch)
        if batch.ndim != 2 or batch.shape[1] != self.cfg.raw_dim:
            raise ShapeError(f"encoder expects (n, {self.cfg.raw_dim}), got {batch.shape}")
        h = tc.relu(linear(self.params, "backbone.0", batch))
        return tc.relu(linear(self.params, "backbone.1", h))

    def project(self, feats: Tensor) -> Tensor:
        return linear(self.params, "projection.1", tc.relu(linear(self.params, "projection.0", feats)))

    def forward(self, batch) -> tuple[Tensor, Tensor, Tensor]:
        feats = self.features(batch)
        return feats, linear(self.params, "classifier", feats), self.project(feats)

    __call__ = forward


@dataclass(frozen=True)
class GruConfig:
    feature_dim: int = 256
    hidden: int = 128
    layers: int = 1
    n_classes: int = 7


class GruDecoder:
    def __init__(self, cfg: GruConfig = GruConfig(), seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params = ParameterSet()
        H = cfg.hidden
        d_in = cfg.feature_dim
        for i in range(cfg.layers):
            p = f"gru.{i}"
            self.params.add(f"{p}.w_ih", glorot(rng, (d_in, 3 * H), d_in, 3 * H))
            self.params.add(f"{p}.w_hh", glorot(rng, (H, 3 * H), H, 3 * H))
            self.params.add(f"{p}.b_ih", np.zeros(3 * H))
            self.params.add(f"{p}.b_hh", np.zeros(3 * H))
            d_in = H
        _linear_params(self.params, "out", H, cfg.n_classes, rng)

    @property
    def n_stages(self) -> int:
        return 1

    def forward(self, features) -> list[Tensor]:
        x = tc.as_tensor(features)
        if x.ndim != 2 or x.shape[1] != self.cfg.feature_dim or x.shape[0] < 1:
            raise ShapeError(f"GRU decoder expects (L>=1, {self.cfg.feature_dim}), got {x.shape}")
        for i in range(self.cfg.layers):
            p = f"gru.{i}"
            x = tc.gru_sequence(x, self.params[f"{p}.w_ih"], self.params[f"{p}.w_hh"],
                                self.params[f"{p}.b_ih"], self.params[f"{p}.b_hh"])
        return [linear(self.params, "out", x)]

    __call__ = forward

    def infer_many(self, sequences) -> list[list[np.ndarray]]:
        """Inference over several sequences at once (zero-padded at the end, which
        causality makes harmless). Returns per-sequence, per-stage logits."""
        lengths = [len(s) for s in sequences]
        B, Lmax = len(sequences), max(lengths)
        x = np.zeros((Lmax, B, self.cfg.feature_dim))
        for b, s in enumerate(sequences):
            x[: lengths[b], b] = s
        for i in range(self.cfg.layers):
            p = f"gru.{i}"
            gi = x @ self.params[f"{p}.w_ih"].data + self.params[f"{p}.b_ih"].data
            x = tc.gru_scan(gi, self.params[f"{p}.w_hh"].data, self.params[f"{p}.b_hh"].data)[1:]
        logits = x @ self.params["out.weight"].data + self.params["out.bias"].data
        return [[logits[: lengths[b], b].copy()] for b in range(B)]


@dataclass(frozen=True)
class TcnConfig:
    feature_dim: int = 256
    channels: int = 64
    stages: int = 2
    blocks: int = 8
    kernel: int = 3
    n_classes: int = 7


class TcnDecoder:
    """Multi-stage causal dilated TCN; stage s > 0 refines softmax(stage s-1 logits).

    Each residual block is ``x + conv1x1(relu(dilated_causal_conv(x)))`` with the
    dilation doubling per block.
    """

    def __init__(self, cfg: TcnConfig = TcnConfig(), seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params = ParameterSet()
        C, K = cfg.channels, cfg.kernel
        for s in range(cfg.stages):
            d_in = cfg.feature_dim if s == 0 else cfg.n_classes
            p = f"stage.{s}"
            self._conv(f"{p}.in", C, d_in, 1, rng)
            for b in range(cfg.blocks):
                self._conv(f"{p}.block.{b}.dilated", C, C, K, rng)
                self._conv(f"{p}.block.{b}.pointwise", C, C, 1, rng)
            self._conv(f"{p}.out", cfg.n_classes, C, 1, rng)

    def _conv(self, name, c_out, c_in, k, rng):
        self.params.add(f"{name}.weight", glorot(rng, (c_out, c_in, k), c_in * k, c_out * k))
        self.params.add(f"{name}.bias", np.zeros(c_out))

    def _apply(self, name, x, dilation=1):
        return tc.conv1d_causal(x, self.params[f"{name}.weight"], dilation, self.params[f"{name}.bias"])

    @property
    def n_stages(self) -> int:
        return self.cfg.stages

    def forward(self, features) -> list[Tensor]:
        x = tc.as_tensor(features)
        if x.ndim != 2 or x.shape[1] != self.cfg.feature_dim or x.shape[0] < 1:
            raise ShapeError(f"TCN decoder expects (L>=1, {self.cfg.feature_dim}), got {x.shape}")
        h = tc.transpose(x)
        stages = []
        for s in range(self.cfg.stages):
            p = f"stage.{s}"
            if s > 0:
                h = tc.transpose(tc.softmax_with_temperature(stages[-1], 1.0))
            f = self._apply(f"{p}.in", h)
            for b in range(self.cfg.blocks):
                g = tc.relu(self._apply(f"{p}.block.{b}.dilated", f, 2 ** b))
                f = f + self._apply(f"{p}.block.{b}.pointwise", g)
            stages.append(tc.transpose(self._apply(f"{p}.out", f)))
        return stages

    __call__ = forward

    def infer_many(self, sequences) -> list[list[np.ndarray]]:
        with tc.no_grad():
            return [[o.data for o in self.forward(s)] for s in sequences]


def build_decoder(kind: str, feature_dim: int, n_classes: int, seed: int = 0, **kw):
    if kind == "gru":
        return GruDecoder(GruConfig(feature_dim=feature_dim, n_classes=n_classes, **kw), seed)
    if kind == "tcn":
        return TcnDecoder(TcnConfig(feature_dim=feature_dim, n_classes=n_classes, **kw), seed)
    raise ParameterError(f"unknown decoder kind {kind!r}")
