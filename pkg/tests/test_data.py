import numpy as np
import pytest

from phasekd.data import (AugmentConfig, PhaseModel, augment, augment_batch, exclude_videos, generate_dataset,
                          generate_video, split)
from phasekd.errors import ParameterError


def test_default_dataset_shape():
    ds = generate_dataset(PhaseModel(), 80, seed=0)
    assert len(ds) == 80 and [v.video_id for v in ds] == list(range(80))
    assert {int(c) for v in ds for c in v.labels} == set(range(7))
    for v in ds:
        assert v.frames.shape == (len(v.labels), 128)


def test_phases_are_ordered_and_at_least_two():
    for v in generate_dataset(PhaseModel(), 40, seed=3):
        assert np.all(np.diff(v.labels) >= 0)
        assert len(np.unique(v.labels)) >= 2


def test_noise_free_frames_equal_prototypes():
    spec = PhaseModel(noise_sigma=0.0, drift_sigma=0.0)
    protos = spec.prototypes()
    for v in generate_dataset(spec, 5, seed=1):
        np.testing.assert_array_equal(v.frames, protos[v.labels])


def test_same_seed_is_bitwise_identical_and_subset_stable():
    a = generate_dataset(PhaseModel(), 6, seed=9)
    b = generate_dataset(PhaseModel(), 6, seed=9)
    for u, v in zip(a, b):
        assert u.frames.tobytes() == v.frames.tobytes() and u.labels.tobytes() == v.labels.tobytes()
    single = generate_video(PhaseModel(), 4, 9)
    assert single.frames.tobytes() == a[4].frames.tobytes()
    c = generate_dataset(PhaseModel(), 6, seed=10)
    assert a[0].frames.shape != c[0].frames.shape or not np.array_equal(a[0].frames, c[0].frames)


def test_length_range_is_respected_approximately():
    ds = generate_dataset(PhaseModel(), 10, length_range=(100, 150), seed=0)
    for v in ds:
        assert 90 <= len(v) <= 160


def test_confusable_pair_is_closer():
    p = PhaseModel().prototypes()
    d23 = np.linalg.norm(p[2] - p[3])
    others = [np.linalg.norm(p[a] - p[b]) for a in range(7) for b in range(a + 1, 7) if (a, b) != (2, 3)]
    assert d23 < min(others)


@pytest.mark.parametrize("kw", [{"n_phases": 1}, {"skip_prob": (0.0,) * 6 + (1.0,)},
                                {"confusable_pairs": ((0, 0),)}, {"noise_sigma": -1.0},
                                {"duration_mu": (10.0,) * 6}])
def test_phase_model_validation(kw):
    with pytest.raises(ParameterError):
        generate_dataset(PhaseModel(**kw), 2)


def test_augment_identity_and_full_mask():
    x = np.random.default_rng(0).standard_normal(16)
    np.testing.assert_array_equal(augment(x, 1, 0, AugmentConfig(0.0, 0.0, 0.0)), x)
    np.testing.assert_array_equal(augment(x, 1, 0, AugmentConfig(0.0, 1.0, 0.0)), 0.0)


def test_augment_views_differ_and_are_reproducible():
    x = np.ones(16)
    a, b = augment(x, 5, 1), augment(x, 5, 2)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, augment(x, 5, 1))
    batch = augment_batch(np.ones((3, 4)), np.random.default_rng(0))
    assert batch.shape == (3, 4)


def test_split():
    ds = generate_dataset(PhaseModel(), 80, seed=0)
    tr, te = split(ds, 40)
    assert len(tr) == 40 and len(te) == 40
    assert not {v.video_id for v in tr} & {v.video_id for v in te}
    tr, te = split(ds, 79)
    assert len(te) == 1
    with pytest.raises(ParameterError):
        split(ds, 80)


def test_exclude_videos():
    train = generate_dataset(PhaseModel(), 40, seed=0)
    assert exclude_videos(train, 0, "drop_entirely") == train
    for k in (5, 10, 20):
        dropped = exclude_videos(train, k, "drop_entirely", seed=1)
        kept = exclude_videos(train, k, "drop_labels", seed=1)
        assert len(dropped) == 40 - k and len(kept) == 40
        unlabeled = {v.video_id for v in kept if not v.labeled}
        assert len(unlabeled) == k
        assert unlabeled == {v.video_id for v in train} - {v.video_id for v in dropped}
    assert all(v.labeled for v in train)
    with pytest.raises(ParameterError):
        exclude_videos(train, 3, "drop_some")
    with pytest.raises(ParameterError):
        exclude_videos(train, 40, "drop_entirely")
