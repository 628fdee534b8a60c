"""Synthetic phase videos: ordered phases, log-normal durations, noisy prototype frames."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class PhaseModel:
    n_phases: int = 7
    raw_dim: int = 128
    # median duration (frames at 1 FPS) and log-space spread per phase
    duration_mu: tuple[float, ...] = (30.0, 100.0, 40.0, 150.0, 35.0, 80.0, 30.0)
    duration_sigma: tuple[float, ...] = (0.3,) * 7
    skip_prob: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.05, 0.1, 0.1)
    noise_sigma: float = 1.0
    drift_sigma: float = 0.04
    prototype_scale: float = 0.3
    confusable_pairs: tuple[tuple[int, int], ...] = ((2, 3),)
    confusable_factor: float = 0.5
    prototype_seed: int = 1234

    def validate(self) -> None:
        C = self.n_phases
        if C < 2:
            raise ParameterError("need at least 2 phases")
        if self.raw_dim < 1:
            raise ParameterError("raw_dim must be >= 1")
        for name in ("duration_mu", "duration_sigma", "skip_prob"):
            if len(getattr(self, name)) != C:
                raise ParameterError(f"{name} must have {C} entries")
        if min(self.duration_mu) < 1 or min(self.duration_sigma) < 0:
            raise ParameterError("durations must be >= 1 frame with non-negative spread")
        if any(not 0.0 <= p < 1.0 for p in self.skip_prob):
            raise ParameterError("skip probabilities must lie in [0, 1)")
        if self.noise_sigma < 0 or self.drift_sigma < 0 or self.prototype_scale < 0:
            raise ParameterError("noise, drift and prototype scale must be non-negative")
        for a, b in self.confusable_pairs:
            if not (0 <= a < C and 0 <= b < C) or a == b:
                raise ParameterError(f"bad confusable pair ({a}, {b})")

    def prototypes(self) -> np.ndarray:
        """``(C, raw_dim)`` phase centres; confusable partners pulled toward each other."""
        rng = np.random.default_rng(self.prototype_seed)
        protos = rng.standard_normal((self.n_phases, self.raw_dim)) * self.prototype_scale
        for a, b in self.confusable_pairs:
            protos[b] = protos[a] + self.confusable_factor * (protos[b] - protos[a])
        return protos


@dataclass
class VideoSample:
    video_id: int
    frames: np.ndarray  # (L, raw_dim)
    labels: np.ndarray  # (L,) int
    labeled: bool = True

    def __len__(self) -> int:
        return len(self.labels)


def _phase_sequence(spec: PhaseModel, rng: np.random.Generator) -> list[int]:
    keep = rng.random(spec.n_phases) >= np.asarray(spec.skip_prob)
    if keep.sum() < 2:
        for c in range(spec.n_phases):
            if keep.sum() >= 2:
                break
            keep[c] = True
    return [c for c in range(spec.n_phases) if keep[c]]


def generate_video(spec: PhaseModel, video_id: int, seed: int, protos: np.ndarray | None = None,
                   length_range: tuple[int, int] | None = None) -> VideoSample:
    rng = np.random.default_rng([seed, video_id])
    if protos is None:
        protos = spec.prototypes()
    phases = _phase_sequence(spec, rng)
    mu = np.log(np.asarray(spec.duration_mu)[phases])
    sig = np.asarray(spec.duration_sigma)[phases]
    durs = np.maximum(1, np.rint(np.exp(rng.normal(mu, sig))).astype(np.int64))
    if length_range is not None:
        lo, hi = length_range
        total = durs.sum()
        if total < lo or total > hi:
            target = min(max(total, lo), hi)
            durs = np.maximum(1, np.rint(durs * target / total).astype(np.int64))
    labels = np.repeat(np.asarray(phases, dtype=np.int64), durs)
    frames = np.empty((labels.size, spec.raw_dim))
    start = 0
    for c, d in zip(phases, durs):
        drift = np.cumsum(rng.standard_normal((d, spec.raw_dim)) * spec.drift_sigma, axis=0)
        noise = rng.standard_normal((d, spec.raw_dim)) * spec.noise_sigma
        frames[start:start + d] = protos[c] + drift + noise
        start += d
    return VideoSample(video_id, frames, labels)


def generate_dataset(spec: PhaseModel, n_videos: int = 80, length_range: tuple[int, int] | None = None,
                     seed: int = 0) -> list[VideoSample]:
    """Per-video RNG streams come from ``(seed, video_id)``, so any subset regenerates identically."""
    spec.validate()
    if n_videos < 1:
        raise ParameterError("n_videos must be >= 1")
    if length_range is not None and not 1 <= length_range[0] <= length_range[1]:
        raise ParameterError(f"bad length_range {length_range}")
    protos = spec.prototypes()
    return [generate_video(spec, i, seed, protos, length_range) for i in range(n_videos)]


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.3
    mask_rate: float = 0.1
    scale_range: float = 0.2


def augment_batch(frames: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Additive noise, then random coordinate masking, then a random global scale per row."""
    x = np.asarray(frames, dtype=np.float64)
    if cfg.noise_sigma:
        x = x + rng.standard_normal(x.shape) * cfg.noise_sigma
    if cfg.mask_rate:
        x = x * (rng.random(x.shape) >= cfg.mask_rate)
    if cfg.scale_range:
        s = rng.uniform(1 - cfg.scale_range, 1 + cfg.scale_range, size=x.shape[:-1] + (1,))
        x = x * s
    return x


def augment(frame, seed: int, view_index: int, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    rng = np.random.default_rng([seed, view_index])
    return augment_batch(np.asarray(frame, dtype=np.float64)[None, :], rng, cfg)[0]


def split(dataset: Sequence[VideoSample], n_train: int) -> tuple[list[VideoSample], list[VideoSample]]:
    if not 0 < n_train < len(dataset):
        raise ParameterError(f"n_train must lie in [1, {len(dataset) - 1}], got {n_train}")
    ordered = sorted(dataset, key=lambda v: v.video_id)
    return ordered[:n_train], ordered[n_train:]


def exclude_videos(train: Sequence[VideoSample], k: int, mode: str, seed: int = 0) -> list[VideoSample]:
    """Drop ``k`` random videos entirely, or keep them but mark them unlabeled."""
    if mode not in ("drop_entirely", "drop_labels"):
        raise ParameterError(f"unknown exclusion mode {mode!r}")
    if not 0 <= k < len(train):
        raise ParameterError(f"k must lie in [0, {len(train) - 1}], got {k}")
    rng = np.random.default_rng([seed, k, 0xE7C1])
    chosen = {train[i].video_id for i in rng.choice(len(train), size=k, replace=False)} if k else set()
    if mode == "drop_entirely":
        return [v for v in train if v.video_id not in chosen]
    return [replace(v, labeled=False) if v.video_id in chosen else v for v in train]
