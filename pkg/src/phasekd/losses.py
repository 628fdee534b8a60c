"""Training objectives for the encoder and decoder stages.

Encoder:  cross-entropy + similarity between the student projection and the
(detached) teacher projection, weighted 1:1.
Decoder:  per stage, cross-entropy + lambda * truncated MSE between
temperature-scaled student and teacher log-probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tc
from .errors import LabelError, ParameterError, SequenceLengthError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderLossConfig:
    similarity_kind: str = "mse"  # "mse" | "kl"
    proj_dim: int = 64
    symmetrize: bool = False
    kl_temperature: float = 1.0

    def __post_init__(self):
        if self.similarity_kind not in ("mse", "kl"):
            raise ParameterError(f"similarity_kind must be 'mse' or 'kl', got {self.similarity_kind!r}")
        if self.proj_dim < 1:
            raise ParameterError("proj_dim must be >= 1")


@dataclass(frozen=True)
class DecoderLossConfig:
    lam: float = 0.3
    tau: float = 8.0
    temperature: float = 2.0
    teacher_frame_offset: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ParameterError("lambda must be non-negative")
        if not self.tau > 0 or not self.temperature > 0:
            raise ParameterError("tau and temperature must be positive")
        if self.teacher_frame_offset not in (0, 1):
            raise ParameterError("teacher_frame_offset must be 0 or 1")


def cross_entropy(logits, labels, mask=None) -> Tensor:
    """Mean negative log-likelihood; with ``mask`` the mean runs over masked-in rows only.

    An all-zero mask yields an exact 0 that is still connected to ``logits``.
    """
    logits = tc.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    C = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelError(f"labels must lie in [0, {C})")
    nll = tc.neg(tc.gather_rows(tc.log_softmax(logits), labels))
    if mask is None:
        return tc.reduce_mean(nll)
    mask = np.asarray(mask, dtype=np.float64)
    return tc.reduce_sum(nll * mask) / max(float(mask.sum()), 1.0)


def _pair_check(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"similarity: student {a.shape} vs teacher {b.shape}")


def feature_similarity_mse(z_student, z_teacher, mask=None) -> Tensor:
    """Mean squared L2 distance of row-normalized pairs (= mean of 2 - 2cos)."""
    zs = tc.as_tensor(z_student)
    zt = tc.as_tensor(z_teacher).detach()
    _pair_check(zs, zt)
    diff = tc.l2_normalize(zs) - tc.l2_normalize(zt)
    per_row = tc.reduce_sum(tc.square(diff), axis=1)
    if mask is None:
        return tc.reduce_mean(per_row)
    mask = np.asarray(mask, dtype=np.float64)
    return tc.reduce_sum(per_row * mask) / max(float(mask.sum()), 1.0)


def feature_similarity_kl(z_student, z_teacher, T: float = 1.0, mask=None) -> Tensor:
    """Batch-mean KL(softmax(z_teacher/T) || softmax(z_student/T))."""
    zs = tc.as_tensor(z_student)
    zt = tc.as_tensor(z_teacher).detach()
    _pair_check(zs, zt)
    log_p = tc.log_softmax(zt, T).data
    log_q = tc.log_softmax(zs, T)
    per_row = tc.reduce_sum(tc.mul(np.exp(log_p), tc.sub(log_p, log_q)), axis=1)
    if mask is None:
        return tc.reduce_mean(per_row)
    mask = np.asarray(mask, dtype=np.float64)
    return tc.reduce_sum(per_row * mask) / max(float(mask.sum()), 1.0)


def similarity(z_student, z_teacher, cfg: EncoderLossConfig, mask=None) -> Tensor:
    if cfg.similarity_kind == "kl":
        return feature_similarity_kl(z_student, z_teacher, cfg.kl_temperature, mask)
    return feature_similarity_mse(z_student, z_teacher, mask)


def encoder_loss_terms(logits, labels, z_student, z_teacher, cfg: EncoderLossConfig,
                       label_mask=None, swapped=None) -> dict[str, Tensor]:
    """Components of the encoder objective.

    ``swapped`` is the optional ``(z_student_view2, z_teacher_view1)`` pair used
    when ``cfg.symmetrize`` is set.
    """
    ce = cross_entropy(logits, labels, label_mask)
    sim = similarity(z_student, z_teacher, cfg)
    if cfg.symmetrize:
        if swapped is None:
            raise ParameterError("symmetrize=True needs the swapped projection pair")
        sim = sim + similarity(swapped[0], swapped[1], cfg)
    return {"ce": ce, "sim": sim, "total": ce + sim}


def encoder_self_kd_loss(logits, labels, z_student, z_teacher, cfg: EncoderLossConfig = EncoderLossConfig(),
                         label_mask=None, swapped=None) -> Tensor:
    return encoder_loss_terms(logits, labels, z_student, z_teacher, cfg, label_mask, swapped)["total"]


def truncated_mse_smoothing(student_logits, teacher_logits, cfg: DecoderLossConfig = DecoderLossConfig()) -> Tensor:
    s_logits = tc.as_tensor(student_logits)
    t_logits = tc.as_tensor(teacher_logits).detach()
    if s_logits.shape != t_logits.shape or s_logits.ndim != 2:
        raise ShapeError(f"T-MSE: student {s_logits.shape} vs teacher {t_logits.shape}")
    L = s_logits.shape[0]
    off = cfg.teacher_frame_offset
    if L < 1 + off:
        raise SequenceLengthError(f"sequence of length {L} too short for teacher offset {off}")
    s = tc.log_softmax(s_logits, cfg.temperature)
    t = tc.log_softmax(t_logits, cfg.temperature)
    delta = tc.abs(s[off:] - t[: L - off])
    return tc.reduce_mean(tc.square(tc.clamp_max(delta, cfg.tau)))


def decoder_loss_terms(student_stages: Sequence[Tensor], labels, teacher_stages=None,
                       cfg: DecoderLossConfig = DecoderLossConfig(), labeled: bool = True) -> dict:
    """Stage-summed CE and T-MSE; ``None`` for a term that does not apply.

    The smoothing term is skipped when there is no teacher or ``lam == 0``;
    CE is skipped for unlabeled sequences.
    """
    ce = tmse = None
    use_kd = teacher_stages is not None and cfg.lam > 0
    if use_kd and len(teacher_stages) != len(student_stages):
        raise ShapeError("teacher and student stage counts differ")
    for i, s in enumerate(student_stages):
        if labeled:
            term = cross_entropy(s, labels)
            ce = term if ce is None else ce + term
        if use_kd:
            term = truncated_mse_smoothing(s, teacher_stages[i], cfg)
            tmse = term if tmse is None else tmse + term
    total = None
    if ce is not None:
        total = ce
    if tmse is not None:
        weighted = tmse * cfg.lam
        total = weighted if total is None else total + weighted
    return {"ce": ce, "tmse": tmse, "total": total}


def decoder_self_kd_loss(student_stages, labels, teacher_stages=None,
                         cfg: DecoderLossConfig = DecoderLossConfig(), labeled: bool = True) -> Tensor:
    total = decoder_loss_terms(student_stages, labels, teacher_stages, cfg, labeled)["total"]
    return tc.Tensor(0.0) if total is None else total
