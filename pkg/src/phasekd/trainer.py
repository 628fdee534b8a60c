"""Two-stage self-distillation pipeline: encoder training, feature extraction, decoder training."""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .data import AugmentConfig, VideoSample, augment_batch, exclude_videos, split
from .ema import EmaSchedule, TeacherState, ema_update, maybe_promote_teacher, schedule_value
from .errors import ConfigError, StructureError
from .losses import DecoderLossConfig, EncoderLossConfig, cross_entropy, decoder_loss_terms, encoder_loss_terms
from .metrics import MetricsReport, evaluate_predictions
from .nn import EncoderConfig, EncoderModel, ParameterSet, build_decoder, load_snapshot, snapshot
from .optim import Optimizer, OptimizerConfig, zero_grads

log = logging.getLogger(__name__)

LOG_FIELDS = ("stage", "epoch", "step", "loss", "ce", "kd", "accuracy", "tau", "teacher_epoch", "test_loss")


class TrainingLog:
    """Append-only records with a fixed field order; serialized as JSON lines."""

    def __init__(self):
        self.records: list[dict] = []
        # video_id -> {"ce": n, "kd": n} loss-term contributions
        self.counters: dict[int, dict[str, int]] = {}

    def append(self, **fields) -> None:
        unknown = set(fields) - set(LOG_FIELDS)
        if unknown:
            raise StructureError(f"unknown log fields {sorted(unknown)}")
        self.records.append({k: fields.get(k) for k in LOG_FIELDS})

    def count(self, video_id: int, term: str, n: int = 1) -> None:
        c = self.counters.setdefault(int(video_id), {"ce": 0, "kd": 0})
        c[term] += int(n)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)


# -- encoder -------------------------------------------------------------------
@dataclass(frozen=True)
class EncoderRunConfig:
    epochs: int = 100
    batch_size: int = 64
    optimizer: OptimizerConfig = OptimizerConfig("sgd", 1e-2, 1e-5)
    tau0: float = 0.9995
    loss: EncoderLossConfig = EncoderLossConfig()
    enc_kd_enabled: bool = True
    model: EncoderConfig = EncoderConfig()
    augment: AugmentConfig = AugmentConfig()
    frames_per_epoch: int = 0  # 0: every training frame once per epoch
    seed: int = 0


Observer = Callable[[str, int, EncoderModel, "EncoderModel | None"], None]


def train_encoder(videos: Sequence[VideoSample], cfg: EncoderRunConfig = EncoderRunConfig(),
                  observer: Observer | None = None) -> tuple[EncoderModel, TrainingLog]:
    """Frame-level training with an optional EMA teacher.

    With ``enc_kd_enabled`` each step feeds view 1 to the student and view 2 to
    the teacher; the teacher is updated by EMA after every optimizer step and
    discarded at the end. ``observer(event, step, student, teacher)`` is called
    at ``"before_step"``, ``"after_optimizer"`` and ``"after_ema"``.
    """
    if not videos:
        raise ConfigError("empty training set")
    frames = np.concatenate([v.frames for v in videos])
    labels = np.concatenate([v.labels for v in videos])
    mask = np.concatenate([np.full(len(v), float(v.labeled)) for v in videos])
    owner = np.concatenate([np.full(len(v), i) for i, v in enumerate(videos)])
    kd = cfg.enc_kd_enabled
    if not kd and not mask.any():
        raise ConfigError("no labeled frames and self-distillation disabled: nothing to train")
    model_cfg = replace(cfg.model, raw_dim=frames.shape[1], proj_dim=cfg.loss.proj_dim)
    if cfg.loss.symmetrize and not kd:
        raise ConfigError("symmetrize requires the self-distillation teacher")

    student = EncoderModel(model_cfg, cfg.seed)
    teacher = None
    if kd:
        teacher = EncoderModel(model_cfg, cfg.seed)
        load_snapshot(teacher, student.params)
    else:
        student.params.set_trainable("projection.", False)
    opt = Optimizer(cfg.optimizer)

    N = len(frames)
    per_epoch = min(cfg.frames_per_epoch or N, N)
    steps_per_epoch = math.ceil(per_epoch / cfg.batch_size)
    schedule = EmaSchedule(cfg.tau0, max(1, cfg.epochs * steps_per_epoch))
    order_rng = np.random.default_rng([cfg.seed, 0x5EED])
    trace = TrainingLog()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(N)[:per_epoch]
        correct = seen = 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if observer:
                observer("before_step", step, student, teacher)
            x = frames[idx]
            v1 = augment_batch(x, np.random.default_rng([cfg.seed, step, 1]), cfg.augment)
            _, logits, proj = student(v1)
            m = mask[idx]
            if kd:
                v2 = augment_batch(x, np.random.default_rng([cfg.seed, step, 2]), cfg.augment)
                with tc.no_grad():
                    z_t = teacher(v2)[2]
                    swapped = None
                    if cfg.loss.symmetrize:
                        z_t1 = teacher(v1)[2]
                if cfg.loss.symmetrize:
                    swapped = (student(v2)[2], z_t1)
                terms = encoder_loss_terms(logits, labels[idx], proj, z_t, cfg.loss, m, swapped)
                total, ce, sim = terms["total"], terms["ce"], terms["sim"]
            else:
                total = ce = cross_entropy(logits, labels[idx], m)
                sim = None
            zero_grads(student.params)
            total.backward()
            opt.step(student.params)
            if observer:
                observer("after_optimizer", step, student, teacher)
            tau = None
            if kd:
                tau = schedule_value(schedule, step)
                ema_update(teacher.params, student.params, tau)
                if observer:
                    observer("after_ema", step, student, teacher)

            lab = m > 0
            ce_per_video = np.bincount(owner[idx][lab], minlength=len(videos))
            kd_per_video = np.bincount(owner[idx], minlength=len(videos)) if kd else None
            for i, v in enumerate(videos):
                if ce_per_video[i]:
                    trace.count(v.video_id, "ce", ce_per_video[i])
                if kd and kd_per_video[i]:
                    trace.count(v.video_id, "kd", kd_per_video[i])
            pred = logits.data.argmax(axis=1)
            correct += int(((pred == labels[idx]) & lab).sum())
            seen += int(lab.sum())
            batch_acc = float(((pred == labels[idx]) & lab).sum() / lab.sum()) if lab.any() else None
            trace.append(stage="encoder", epoch=epoch, step=step, loss=total.item(), ce=ce.item(),
                         kd=None if sim is None else sim.item(), accuracy=batch_acc, tau=tau)
            step += 1
        trace.append(stage="encoder_epoch", epoch=epoch, step=step,
                     accuracy=correct / seen if seen else None)
        log.debug("encoder epoch %d acc %s", epoch, correct / seen if seen else None)
    # the teacher is training-only scaffolding
    return student, trace


@dataclass
class FeatureSequence:
    video_id: int
    features: np.ndarray
    labels: np.ndarray
    labeled: bool = True

    def __len__(self):
        return len(self.labels)


def extract_features(encoder: EncoderModel, videos: Sequence[VideoSample], chunk: int = 4096) -> list[FeatureSequence]:
    """Backbone output per frame, no augmentation, order preserved."""
    out = []
    with tc.no_grad():
        for v in videos:
            parts = [encoder.features(v.frames[i:i + chunk]).data for i in range(0, len(v), chunk)]
            out.append(FeatureSequence(v.video_id, np.concatenate(parts), v.labels.copy(), v.labeled))
    return out


# -- decoder -------------------------------------------------------------------
@dataclass(frozen=True)
class DecoderRunConfig:
    epochs: int = 30
    optimizer: OptimizerConfig = OptimizerConfig("adam", 1e-3, 0.0)
    loss: DecoderLossConfig = DecoderLossConfig()
    dec_kd_enabled: bool = True
    decoder_kind: str = "gru"
    gru_hidden: int = 128
    gru_layers: int = 1
    tcn_channels: int = 64
    tcn_stages: int = 2
    tcn_blocks: int = 8
    tcn_kernel: int = 3
    seed: int = 0

    def architecture(self) -> dict:
        if self.decoder_kind == "gru":
            return {"hidden": self.gru_hidden, "layers": self.gru_layers}
        if self.decoder_kind == "tcn":
            return {"channels": self.tcn_channels, "stages": self.tcn_stages,
                    "blocks": self.tcn_blocks, "kernel": self.tcn_kernel}
        raise ConfigError(f"unknown decoder kind {self.decoder_kind!r}")


def make_decoder(cfg: DecoderRunConfig, feature_dim: int, n_classes: int):
    return build_decoder(cfg.decoder_kind, feature_dim, n_classes, cfg.seed, **cfg.architecture())


def predict(model, seq: FeatureSequence) -> np.ndarray:
    with tc.no_grad():
        return model(seq.features)[-1].data.argmax(axis=1)


def _frame_accuracy(model, seqs: Sequence[FeatureSequence]) -> float:
    seqs = [s for s in seqs if s.labeled]
    if not seqs:
        return 0.0
    outs = model.infer_many([s.features for s in seqs])
    correct = sum(int((o[-1].argmax(axis=1) == s.labels).sum()) for o, s in zip(outs, seqs))
    return correct / sum(len(s) for s in seqs)


@dataclass
class DecoderResult:
    model: object
    log: TrainingLog
    accuracy_history: list[float]
    teacher_history: list[TeacherState | None]  # teacher active during each epoch
    test_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    test_predictions: dict[int, np.ndarray] = field(default_factory=dict)
    kd_per_epoch: list[float] = field(default_factory=list)


def train_decoder(train_seqs: Sequence[FeatureSequence], cfg: DecoderRunConfig = DecoderRunConfig(),
                  test_seqs: Sequence[FeatureSequence] | None = None, n_classes: int = 7,
                  selection_seqs: Sequence[FeatureSequence] | None = None) -> DecoderResult:
    """One full video per Adam step; best-epoch teacher promoted at each epoch end.

    ``selection_seqs`` (default: the labeled training videos) are scored at
    each epoch end to pick the teacher. With ``test_seqs`` the per-epoch test
    cross-entropy is tracked and predictions are kept from its argmin epoch.
    """
    if not train_seqs:
        raise ConfigError("empty training set")
    F = train_seqs[0].features.shape[1]
    model = make_decoder(cfg, F, n_classes)
    teacher_model = make_decoder(cfg, F, n_classes)
    opt = Optimizer(cfg.optimizer)
    kd = cfg.dec_kd_enabled and cfg.loss.lam > 0
    selection_seqs = train_seqs if selection_seqs is None else selection_seqs
    rng = np.random.default_rng([cfg.seed, 0xDEC])
    trace = TrainingLog()
    result = DecoderResult(model, trace, [], [])
    snaps: dict[int, ParameterSet] = {}
    teacher: TeacherState | None = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        result.teacher_history.append(teacher)
        kd_sum = 0.0
        # the teacher is frozen for the whole epoch
        t_out = teacher_model.infer_many([s.features for s in train_seqs]) if kd and teacher else None
        for vi in rng.permutation(len(train_seqs)):
            seq = train_seqs[vi]
            stages = model(seq.features)
            t_stages = None if t_out is None else [tc.Tensor(o) for o in t_out[vi]]
            terms = decoder_loss_terms(stages, seq.labels, t_stages, cfg.loss, seq.labeled)
            if terms["total"] is None:
                continue
            if terms["ce"] is not None:
                trace.count(seq.video_id, "ce")
            if terms["tmse"] is not None:
                trace.count(seq.video_id, "kd")
            zero_grads(model.params)
            terms["total"].backward()
            opt.step(model.params)
            kd_val = terms["tmse"].item() if terms["tmse"] is not None else 0.0
            kd_sum += kd_val
            trace.append(stage="decoder", epoch=epoch, step=step, loss=terms["total"].item(),
                         ce=None if terms["ce"] is None else terms["ce"].item(), kd=kd_val,
                         teacher_epoch=None if teacher is None else teacher.source_epoch)
            step += 1
        result.kd_per_epoch.append(kd_sum)

        acc = _frame_accuracy(model, selection_seqs)
        result.accuracy_history.append(acc)
        snaps[epoch] = snapshot(model.params)
        teacher = maybe_promote_teacher(result.accuracy_history, snaps)
        snaps = {teacher.source_epoch: snaps[teacher.source_epoch]}
        if kd:
            load_snapshot(teacher_model, teacher.params)

        test_loss = None
        if test_seqs:
            losses, preds = [], {}
            outs = model.infer_many([s.features for s in test_seqs])
            with tc.no_grad():
                for s, out in zip(test_seqs, outs):
                    losses.append(sum(cross_entropy(o, s.labels).item() for o in out))
                    preds[s.video_id] = out[-1].argmax(axis=1)
            test_loss = float(np.mean(losses))
            result.test_losses.append(test_loss)
            if result.best_epoch is None or test_loss < result.test_losses[result.best_epoch - 1]:
                result.best_epoch = epoch
                result.test_predictions = preds
        prev = result.teacher_history[-1]
        trace.append(stage="decoder_epoch", epoch=epoch, step=step, accuracy=acc, kd=kd_sum,
                     teacher_epoch=None if prev is None else prev.source_epoch, test_loss=test_loss)
    return result


# -- pipeline / experiment drivers --------------------------------------------------
@dataclass(frozen=True)
class PipelineConfig:
    encoder: EncoderRunConfig = EncoderRunConfig()
    decoder: DecoderRunConfig = DecoderRunConfig()
    n_train: int = 40
    n_classes: int = 7

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, encoder=replace(self.encoder, seed=seed), decoder=replace(self.decoder, seed=seed))

    def with_arms(self, enc_kd: bool, dec_kd: bool, decoder_kind: str | None = None) -> "PipelineConfig":
        dec = replace(self.decoder, dec_kd_enabled=dec_kd)
        if decoder_kind:
            dec = replace(dec, decoder_kind=decoder_kind)
        return replace(self, encoder=replace(self.encoder, enc_kd_enabled=enc_kd), decoder=dec)


@dataclass
class PipelineResult:
    report: MetricsReport
    encoder_log: TrainingLog
    decoder: DecoderResult
    test_seqs: list[FeatureSequence]


def encode_splits(dataset: Sequence[VideoSample], cfg: PipelineConfig,
                  exclusion: tuple[int, str] | None = None):
    train, test = split(dataset, cfg.n_train)
    if exclusion is not None and exclusion[0] > 0:
        train = exclude_videos(train, exclusion[0], exclusion[1], cfg.encoder.seed)
    enc_cfg = replace(cfg.encoder, model=replace(cfg.encoder.model, n_classes=cfg.n_classes))
    encoder, enc_log = train_encoder(train, enc_cfg)
    return encoder, enc_log, extract_features(encoder, train), extract_features(encoder, test)


def run_pipeline(dataset: Sequence[VideoSample], cfg: PipelineConfig = PipelineConfig(),
                 exclusion: tuple[int, str] | None = None, label: str = "", encoded=None) -> PipelineResult:
    """Encoder -> features -> decoder -> test metrics at the lowest-test-loss epoch.

    ``encoded`` may carry a precomputed ``encode_splits`` result for the same
    encoder config and exclusion; training is deterministic, so reuse is exact.
    """
    _, enc_log, train_f, test_f = encoded or encode_splits(dataset, cfg, exclusion)
    dec = train_decoder(train_f, cfg.decoder, test_f, cfg.n_classes)
    gts = {s.video_id: s.labels for s in test_f}
    report = evaluate_predictions(dec.test_predictions, gts, cfg.n_classes, label)
    return PipelineResult(report, enc_log, dec, test_f)


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("PHASEKD_THREADS")
    limit = int(cap) if cap else min(4, os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def _run_jobs(jobs: list[Callable[[], object]]):
    n = worker_count(len(jobs))
    if n == 1:
        return [j() for j in jobs]
    with ThreadPoolExecutor(max_workers=n) as pool:
        futures = [pool.submit(j) for j in jobs]
        return [f.result() for f in futures]


ARMS = ((False, False), (True, False), (False, True), (True, True))


@dataclass
class ArmResult:
    decoder_kind: str
    enc_kd: bool
    dec_kd: bool
    seed: int
    report: MetricsReport
    decoder: DecoderResult | None = None


def run_ablation_grid(dataset: Sequence[VideoSample], base: PipelineConfig = PipelineConfig(),
                      decoder_kinds: Sequence[str] = ("gru", "tcn"),
                      seeds: Sequence[int] = (0,)) -> list[ArmResult]:
    """{enc off/on} x {dec off/on} per decoder kind and seed, in configuration order.

    Encoders are trained once per (seed, enc flag) and shared across arms.
    """
    enc_jobs = {}
    for seed in seeds:
        for enc_kd in (False, True):
            cfg = base.with_seed(seed).with_arms(enc_kd, False)
            enc_jobs[(seed, enc_kd)] = (lambda c=cfg: encode_splits(dataset, c))
    keys = list(enc_jobs)
    encoded = dict(zip(keys, _run_jobs([enc_jobs[k] for k in keys])))

    specs = [(kind, seed, e, d) for kind in decoder_kinds for seed in seeds for e, d in ARMS]

    def job(kind, seed, e, d):
        cfg = base.with_seed(seed).with_arms(e, d, kind)
        res = run_pipeline(dataset, cfg, label=f"{kind} enc={int(e)} dec={int(d)} seed={seed}",
                           encoded=encoded[(seed, e)])
        return ArmResult(kind, e, d, seed, res.report, res.decoder)

    return _run_jobs([(lambda s=s: job(*s)) for s in specs])


@dataclass
class ReducedRow:
    block: str  # "full", "baseline/training", "self-kd/training", "self-kd/classification loss"
    k: int
    mode: str | None
    seed: int
    report: MetricsReport
    counters: dict[int, dict[str, int]]
    encoder_counters: dict[int, dict[str, int]]
    unlabeled_ids: list[int]


REDUCED_BLOCKS = (
    ("baseline", False, "drop_entirely"),
    ("self-kd", True, "drop_entirely"),
    ("self-kd", True, "drop_labels"),
)


def run_reduced_data(dataset: Sequence[VideoSample], base: PipelineConfig = PipelineConfig(),
                     k_list: Sequence[int] = (5, 10, 20),
                     modes: Sequence[str] = ("drop_entirely", "drop_labels"),
                     seeds: Sequence[int] = (0,)) -> list[ReducedRow]:
    """Table-4-shaped grid: full-data baseline and self-KD rows, then one block per
    (arm, exclusion mode) over ``k_list``. ``k = 0`` rows are full-data runs."""
    specs = []
    for seed in seeds:
        for name, kd in (("baseline", False), ("self-kd", True)):
            specs.append((f"{name}/full", kd, 0, None, seed))
        for name, kd, mode in REDUCED_BLOCKS:
            if mode not in modes:
                continue
            where = "training" if mode == "drop_entirely" else "classification loss"
            for k in k_list:
                specs.append((f"{name}/{where}", kd, k, mode, seed))

    def job(block, kd, k, mode, seed):
        cfg = base.with_seed(seed).with_arms(kd, kd)
        exclusion = (k, mode) if mode else None
        res = run_pipeline(dataset, cfg, exclusion, label=f"{block} k={k} seed={seed}")
        train, _ = split(dataset, cfg.n_train)
        if exclusion and k:
            train = exclude_videos(train, k, mode, cfg.encoder.seed)
        unlabeled = [v.video_id for v in train if not v.labeled]
        return ReducedRow(block, k, mode, seed, res.report, res.decoder.log.counters,
                          res.encoder_log.counters, unlabeled)

    return _run_jobs([(lambda s=s: job(*s)) for s in specs])
