import math
from dataclasses import replace

import numpy as np
import pytest

from phasekd.data import PhaseModel, generate_dataset, split
from phasekd.errors import ConfigError
from phasekd.trainer import (ARMS, REDUCED_BLOCKS, EncoderRunConfig, encode_splits, extract_features,
                             run_ablation_grid, run_pipeline, run_reduced_data, train_decoder, train_encoder,
                             worker_count)


def _features(tiny_dataset, tiny_pipeline, enc_kd=False):
    _, _, train_f, test_f = encode_splits(tiny_dataset, tiny_pipeline.with_arms(enc_kd, False))
    return train_f, test_f


# -- encoder --------------------------------------------------------------------
def test_encoder_baseline_has_no_teacher(tiny_dataset, tiny_pipeline):
    seen = []
    cfg = replace(tiny_pipeline.encoder, enc_kd_enabled=False)
    _, log = train_encoder(tiny_dataset[:6], cfg, lambda ev, i, s, t: seen.append((ev, t)))
    assert {ev for ev, _ in seen} == {"before_step", "after_optimizer"}
    assert all(t is None for _, t in seen)
    steps = [r for r in log.records if r["stage"] == "encoder"]
    assert all(r["kd"] is None and r["tau"] is None for r in steps)


def test_encoder_tau_schedule_logged(tiny_dataset, tiny_pipeline):
    _, log = train_encoder(tiny_dataset[:6], replace(tiny_pipeline.encoder, epochs=2))
    taus = [r["tau"] for r in log.records if r["stage"] == "encoder"]
    assert taus[0] == 0.9995 and all(b >= a for a, b in zip(taus, taus[1:]))


def test_teacher_changes_only_at_ema(tiny_dataset, tiny_pipeline):
    events = []

    def obs(ev, i, student, teacher):
        events.append((ev, teacher.params.copy()))

    train_encoder(tiny_dataset[:6], replace(tiny_pipeline.encoder, epochs=2), obs)
    for (ev_a, a), (ev_b, b) in zip(events, events[1:]):
        if ev_b == "after_ema":
            assert not a.equals(b)
        else:
            assert a.equals(b), (ev_a, ev_b)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_encoder_losses_finite(tiny_dataset, tiny_pipeline, seed):
    _, log = train_encoder(tiny_dataset[:6], replace(tiny_pipeline.encoder, seed=seed))
    assert all(math.isfinite(r["loss"]) for r in log.records if r["stage"] == "encoder")


def test_encoder_zero_noise_one_epoch_separates_training_frames():
    spec = PhaseModel(noise_sigma=0.0, drift_sigma=0.0)
    train, _ = split(generate_dataset(spec, 80, seed=0), 40)
    enc, _ = train_encoder(train, EncoderRunConfig(epochs=1))
    x = np.concatenate([v.frames for v in train])
    y = np.concatenate([v.labels for v in train])
    assert (enc.forward(x)[1].data.argmax(axis=1) == y).mean() == 1.0


def test_encoder_needs_something_to_train(tiny_dataset, tiny_pipeline):
    unlabeled = [replace(v, labeled=False) for v in tiny_dataset[:3]]
    with pytest.raises(ConfigError):
        train_encoder(unlabeled, replace(tiny_pipeline.encoder, enc_kd_enabled=False))
    with pytest.raises(ConfigError):
        train_encoder([], tiny_pipeline.encoder)


def test_extract_features(tiny_dataset, tiny_pipeline):
    enc, _ = train_encoder(tiny_dataset[:6], tiny_pipeline.encoder)
    a, b = extract_features(enc, tiny_dataset[:3]), extract_features(enc, tiny_dataset[:3])
    for u, v, src in zip(a, b, tiny_dataset):
        assert u.features.tobytes() == v.features.tobytes() and len(u.features) == len(src)
    for _, p in enc.params.items():
        p.data[...] = 0.0
    assert all(np.all(f.features == 0) for f in extract_features(enc, tiny_dataset[:2]))


# -- decoder --------------------------------------------------------------------
@pytest.mark.parametrize("kind", ["gru", "tcn"])
def test_decoder_first_epoch_has_no_smoothing(tiny_dataset, tiny_pipeline, kind):
    train_f, test_f = _features(tiny_dataset, tiny_pipeline)
    res = train_decoder(train_f, replace(tiny_pipeline.decoder, decoder_kind=kind), test_f)
    assert res.kd_per_epoch[0] == 0.0 and res.teacher_history[0] is None
    assert all(k > 0 for k in res.kd_per_epoch[1:])
    first = [r for r in res.log.records if r["stage"] == "decoder" and r["epoch"] == 1]
    assert all(r["kd"] == 0.0 and r["teacher_epoch"] is None for r in first)
    # the teacher used in epoch e is the best of epochs 1..e-1
    for e, st in enumerate(res.teacher_history[1:], start=2):
        hist = res.accuracy_history[: e - 1]
        assert st.source_epoch == int(np.argmax(hist)) + 1


def test_decoder_baseline_never_distills(tiny_dataset, tiny_pipeline):
    train_f, test_f = _features(tiny_dataset, tiny_pipeline)
    res = train_decoder(train_f, replace(tiny_pipeline.decoder, dec_kd_enabled=False), test_f)
    assert res.kd_per_epoch == [0.0] * 3
    assert all(c.get("kd", 0) == 0 for c in res.log.counters.values())


def test_decoder_best_epoch_is_lowest_test_loss(tiny_dataset, tiny_pipeline):
    train_f, test_f = _features(tiny_dataset, tiny_pipeline)
    res = train_decoder(train_f, tiny_pipeline.decoder, test_f)
    assert res.best_epoch == int(np.argmin(res.test_losses)) + 1
    assert set(res.test_predictions) == {s.video_id for s in test_f}


def test_decoder_unlabeled_videos_only_distill(tiny_dataset, tiny_pipeline):
    train_f, test_f = _features(tiny_dataset, tiny_pipeline)
    train_f[0] = replace(train_f[0], labeled=False)
    res = train_decoder(train_f, tiny_pipeline.decoder, test_f)
    c = res.log.counters[train_f[0].video_id]
    assert c.get("ce", 0) == 0 and c["kd"] == 2


# -- pipeline / drivers ------------------------------------------------------------
def test_pipeline_is_deterministic(tiny_dataset, tiny_pipeline):
    a = run_pipeline(tiny_dataset, tiny_pipeline)
    b = run_pipeline(tiny_dataset, tiny_pipeline)
    assert a.report.mean == b.report.mean and a.report.std == b.report.std
    assert a.decoder.model.params.equals(b.decoder.model.params)


def test_ablation_grid_structure_and_baseline_equality(tiny_dataset, tiny_pipeline):
    rows = run_ablation_grid(tiny_dataset, tiny_pipeline, ("gru", "tcn"), seeds=(0,))
    assert len(rows) == 8
    assert [(r.decoder_kind, r.enc_kd, r.dec_kd) for r in rows] == [(k, e, d) for k in ("gru", "tcn") for e, d in ARMS]
    solo = run_pipeline(tiny_dataset, tiny_pipeline.with_arms(False, False, "gru"))
    assert rows[0].report.mean == solo.report.mean
    assert rows[0].decoder.model.params.equals(solo.decoder.model.params)


def test_ablation_grid_independent_of_thread_count(tiny_dataset, tiny_pipeline, monkeypatch):
    monkeypatch.setenv("PHASEKD_THREADS", "1")
    serial = run_ablation_grid(tiny_dataset, tiny_pipeline, ("gru",), seeds=(0,))
    monkeypatch.setenv("PHASEKD_THREADS", "4")
    assert worker_count(8) == 4
    threaded = run_ablation_grid(tiny_dataset, tiny_pipeline, ("gru",), seeds=(0,))
    assert [r.report.mean for r in serial] == [r.report.mean for r in threaded]


def test_reduced_data_grid(tiny_dataset, tiny_pipeline):
    rows = run_reduced_data(tiny_dataset, tiny_pipeline, k_list=(0, 2), seeds=(0,))
    blocks = [(r.block, r.k) for r in rows]
    assert blocks[:2] == [("baseline/full", 0), ("self-kd/full", 0)]
    assert len(rows) == 2 + len(REDUCED_BLOCKS) * 2
    full = {r.block: r for r in rows if r.k == 0}
    for r in rows:
        if r.k == 0 and r.mode:
            ref = full["self-kd/full"] if r.block.startswith("self-kd") else full["baseline/full"]
            assert r.report.mean == ref.report.mean
        if r.mode == "drop_labels" and r.k:
            assert len(r.unlabeled_ids) == r.k
            for vid in r.unlabeled_ids:
                assert r.counters[vid].get("ce", 0) == 0 and r.counters[vid]["kd"] > 0
                assert r.encoder_counters[vid].get("ce", 0) == 0 and r.encoder_counters[vid]["kd"] > 0
        if r.mode == "drop_entirely" and r.k:
            assert len(r.counters) == tiny_pipeline.n_train - r.k
