"""INI-style run configuration with four fixed sections.

Every key has a typed default; unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
from typing import Any

from .data import AugmentConfig, PhaseModel
from .errors import ConfigError
from .losses import DecoderLossConfig, EncoderLossConfig
from .nn import EncoderConfig
from .optim import OptimizerConfig
from .trainer import DecoderRunConfig, EncoderRunConfig, PipelineConfig

_PM = PhaseModel()

DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {
        "seed": 0,
        "n_videos": 80,
        "n_phases": _PM.n_phases,
        "raw_dim": _PM.raw_dim,
        "duration_mu": _PM.duration_mu,
        "duration_sigma": _PM.duration_sigma,
        "skip_prob": _PM.skip_prob,
        "noise_sigma": _PM.noise_sigma,
        "drift_sigma": _PM.drift_sigma,
        "prototype_scale": _PM.prototype_scale,
        "confusable_pairs": ",".join(f"{a}-{b}" for a, b in _PM.confusable_pairs),
        "confusable_factor": _PM.confusable_factor,
        "prototype_seed": _PM.prototype_seed,
        "min_length": 0,
        "max_length": 0,
    },
    "encoder": {
        "epochs": 100,
        "batch_size": 64,
        "optimizer": "sgd",
        "learning_rate": 1e-2,
        "weight_decay": 1e-5,
        "momentum": 0.0,
        "tau0": 0.9995,
        "self_kd": True,
        "similarity": "mse",
        "kl_temperature": 1.0,
        "symmetrize": False,
        "hidden_dim": 256,
        "feature_dim": 256,
        "proj_hidden": 0,
        "proj_dim": 64,
        "aug_noise": 0.3,
        "aug_mask": 0.1,
        "aug_scale": 0.2,
        "frames_per_epoch": 0,
        "seed": 0,
    },
    "decoder": {
        "epochs": 30,
        "kind": "gru",
        "optimizer": "adam",
        "learning_rate": 1e-3,
        "weight_decay": 0.0,
        "lambda": 0.3,
        "tau": 8.0,
        "temperature": 2.0,
        "teacher_frame_offset": 1,
        "self_kd": True,
        "gru_hidden": 128,
        "gru_layers": 1,
        "tcn_channels": 64,
        "tcn_stages": 2,
        "tcn_blocks": 8,
        "tcn_kernel": 3,
        "seed": 0,
    },
    "experiment": {
        "n_train": 40,
        "seeds": (0,),
        "decoders": "gru,tcn",
        "k_list": (5, 10, 20),
        "modes": "drop_entirely,drop_labels",
        "out_dir": "runs",
    },
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _parse(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


class RunConfig:
    def __init__(self, values: dict[str, dict[str, Any]] | None = None):
        self.values = {s: dict(d) for s, d in DEFAULTS.items()}
        for section, items in (values or {}).items():
            for key, v in items.items():
                self.set(section, key, v)

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        self.values[section][key] = _parse(section, key, value) if isinstance(value, str) else value

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg = cls()
        for section in cp.sections():
            for key, raw in cp.items(section):
                cfg.set(section, key, raw)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_text(f.read())

    def dump(self) -> str:
        out = []
        for section, items in self.values.items():
            out.append(f"[{section}]")
            out.extend(f"{k} = {_fmt(v)}" for k, v in items.items())
            out.append("")
        return "\n".join(out)

    # -- typed views -----------------------------------------------------------
    def phase_model(self) -> PhaseModel:
        d = self["data"]
        pairs = []
        for tok in str(d["confusable_pairs"]).split(","):
            tok = tok.strip()
            if not tok:
                continue
            try:
                a, b = (int(x) for x in tok.split("-"))
            except ValueError as exc:
                raise ConfigError(f"[data] confusable_pairs: bad pair {tok!r} (expected a-b)") from exc
            pairs.append((a, b))
        return PhaseModel(
            n_phases=d["n_phases"], raw_dim=d["raw_dim"], duration_mu=tuple(d["duration_mu"]),
            duration_sigma=tuple(d["duration_sigma"]), skip_prob=tuple(d["skip_prob"]),
            noise_sigma=d["noise_sigma"], drift_sigma=d["drift_sigma"], prototype_scale=d["prototype_scale"],
            confusable_pairs=tuple(pairs), confusable_factor=d["confusable_factor"],
            prototype_seed=d["prototype_seed"],
        )

    def length_range(self):
        d = self["data"]
        if not d["min_length"] and not d["max_length"]:
            return None
        return (max(1, d["min_length"]), d["max_length"] or 10**9)

    def encoder_run(self) -> EncoderRunConfig:
        e = self["encoder"]
        return EncoderRunConfig(
            epochs=e["epochs"], batch_size=e["batch_size"],
            optimizer=OptimizerConfig(e["optimizer"], e["learning_rate"], e["weight_decay"], e["momentum"]),
            tau0=e["tau0"],
            loss=EncoderLossConfig(e["similarity"], e["proj_dim"], e["symmetrize"], e["kl_temperature"]),
            enc_kd_enabled=e["self_kd"],
            model=EncoderConfig(raw_dim=self["data"]["raw_dim"], hidden_dim=e["hidden_dim"],
                                feature_dim=e["feature_dim"], n_classes=self["data"]["n_phases"],
                                proj_hidden=e["proj_hidden"], proj_dim=e["proj_dim"]),
            augment=AugmentConfig(e["aug_noise"], e["aug_mask"], e["aug_scale"]),
            frames_per_epoch=e["frames_per_epoch"], seed=e["seed"],
        )

    def decoder_run(self) -> DecoderRunConfig:
        d = self["decoder"]
        if d["kind"] not in ("gru", "tcn"):
            raise ConfigError(f"[decoder] kind must be gru or tcn, got {d['kind']!r}")
        return DecoderRunConfig(
            epochs=d["epochs"],
            optimizer=OptimizerConfig(d["optimizer"], d["learning_rate"], d["weight_decay"]),
            loss=DecoderLossConfig(d["lambda"], d["tau"], d["temperature"], d["teacher_frame_offset"]),
            dec_kd_enabled=d["self_kd"], decoder_kind=d["kind"],
            gru_hidden=d["gru_hidden"], gru_layers=d["gru_layers"], tcn_channels=d["tcn_channels"],
            tcn_stages=d["tcn_stages"], tcn_blocks=d["tcn_blocks"], tcn_kernel=d["tcn_kernel"], seed=d["seed"],
        )

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(self.encoder_run(), self.decoder_run(), self["experiment"]["n_train"],
                              self["data"]["n_phases"])

    def with_overrides(self, **sections) -> "RunConfig":
        out = RunConfig(self.values)
        for section, items in sections.items():
            for k, v in items.items():
                out.set(section, k, v)
        return out


def load(path=None) -> RunConfig:
    return RunConfig.from_file(path) if path else RunConfig()

