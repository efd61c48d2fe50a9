import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynamind.data import (EEGRecording, RegionPartition, SyntheticWorldSpec, TrialPair, VideoClip, build_world,
                           generate_synthetic_dataset, load_dataset, load_region_map, partition_channels,
                           partition_for, segment_temporal, split_by_class_count, write_dataset)
from dynamind.data.synthetic import synthetic_channel_names
from dynamind.errors import LoadError, ValidationError


def _rec(c=4, t=12, seed=0):
    data = np.random.default_rng(seed).standard_normal((c, t))
    return EEGRecording(data, 200.0, tuple(f"ch{i}" for i in range(c)))


SMALL = SyntheticWorldSpec(num_concepts=4, trials_per_concept=3, channels=16, samples=24, frames=3,
                           height=16, width=16, dim_image=6, dim_text=5, dim_category=4)


# ---- types

def test_eeg_rejects_nan():
    data = np.zeros((2, 5))
    data[1, 3] = np.nan
    with pytest.raises(ValidationError):
        EEGRecording(data, 200.0, ("a", "b"))


def test_eeg_rejects_duplicate_channel_names():
    with pytest.raises(ValidationError):
        EEGRecording(np.zeros((2, 5)), 200.0, ("a", "a"))


def test_video_rejects_out_of_range_values():
    frames = np.full((2, 8, 8, 3), 0.5)
    frames[0, 0, 0, 0] = 1.5
    with pytest.raises(ValidationError):
        VideoClip(frames)


def test_video_needs_two_frames():
    with pytest.raises(ValidationError):
        VideoClip(np.zeros((1, 8, 8, 3)))


def test_spec_rejects_negative_noise():
    with pytest.raises(ValidationError):
        SyntheticWorldSpec(noise_std=-0.1)


# ---- partitions

def test_partition_two_blocks():
    rec = _rec()
    blocks = partition_channels(rec, RegionPartition({"A": (0, 1), "B": (2, 3)}))
    assert [b.shape for b in blocks] == [(2, 12), (2, 12)]
    np.testing.assert_array_equal(blocks[1], rec.data[2:4])


def test_partition_single_region_is_identity():
    rec = _rec()
    (block,) = partition_channels(rec, RegionPartition({"all": (0, 1, 2, 3)}))
    np.testing.assert_array_equal(block, rec.data)


def test_partition_index_out_of_range():
    with pytest.raises(ValidationError):
        partition_channels(_rec(), RegionPartition({"A": (0, 4)}))


def test_partition_rejects_overlap():
    with pytest.raises(ValidationError):
        RegionPartition({"A": (0, 1), "B": (1, 2)})


def test_shipped_five_lobe_map_covers_62_channels():
    spec = load_region_map("default")
    assert list(spec["regions"]) == ["frontal", "central", "temporal", "parietal", "occipital"]
    part = partition_for(list(spec["channels"]), "default")
    rec = EEGRecording(np.zeros((62, 10)), 200.0, tuple(spec["channels"]))
    blocks = partition_channels(rec, part)
    assert len(blocks) == 5
    assert sum(b.shape[0] for b in blocks) == 62


def test_four_region_map_has_four_blocks():
    spec = load_region_map("4region")
    part = partition_for(list(spec["channels"]), "4region")
    assert part.K == 4
    assert sorted(part.channel_order()) == list(range(62))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2 ** 31 - 1))
def test_partition_reassembly_is_row_permutation(k, seed):
    rng = np.random.default_rng(seed)
    c = 12
    perm = rng.permutation(c)
    cuts = np.sort(rng.choice(np.arange(1, c), size=k - 1, replace=False)) if k > 1 else []
    regions = {f"r{i}": tuple(int(x) for x in chunk) for i, chunk in enumerate(np.split(perm, cuts))}
    rec = _rec(c=c, t=7, seed=seed % 1000)
    stacked = np.concatenate(partition_channels(rec, RegionPartition(regions)))
    np.testing.assert_array_equal(stacked, rec.data[perm])


# ---- windows

def test_segment_exact_division():
    windows = segment_temporal(_rec(t=12), 6)
    assert len(windows) == 6 and all(w.shape == (4, 2) for w in windows)


def test_segment_one_window_is_identity():
    rec = _rec(t=12)
    (w,) = segment_temporal(rec, 1)
    np.testing.assert_array_equal(w, rec.data)


def test_segment_drops_remainder():
    rec = _rec(t=13)
    windows = segment_temporal(rec, 6)
    assert all(w.shape == (4, 2) for w in windows)
    np.testing.assert_array_equal(np.concatenate(windows, axis=1), rec.data[:, :12])


def test_segment_too_many_windows():
    with pytest.raises(ValidationError):
        segment_temporal(_rec(t=5), 6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40))
def test_segment_concatenation_is_prefix(t, n):
    rec = _rec(c=2, t=t)
    if n > t:
        with pytest.raises(ValidationError):
            segment_temporal(rec, n)
        return
    joined = np.concatenate(segment_temporal(rec, n), axis=1)
    np.testing.assert_array_equal(joined, rec.data[:, :joined.shape[1]])
    assert joined.shape[1] == n * (t // n)


# ---- synthetic generator

def test_synthetic_is_deterministic():
    a, b = generate_synthetic_dataset(SMALL), generate_synthetic_dataset(SMALL)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.eeg.data, y.eeg.data)
        np.testing.assert_array_equal(x.video.frames, y.video.frames)
        np.testing.assert_array_equal(x.emb_text, y.emb_text)


def test_synthetic_targets_depend_only_on_concept():
    trials = generate_synthetic_dataset(SyntheticWorldSpec(**{**SMALL.__dict__, "noise_std": 0.0}))
    same = [t for t in trials if t.concept_id == 1]
    np.testing.assert_array_equal(same[0].emb_text, same[1].emb_text)
    assert not np.array_equal(same[0].emb_text, trials[0].emb_text)


def test_synthetic_noise_free_eeg_recovers_trajectory():
    spec = SyntheticWorldSpec(**{**SMALL.__dict__, "noise_std": 0.0})
    world = build_world(spec)
    A = world.forward_matrix()  # [C * S, L]
    s = world.window_samples
    for trial in generate_synthetic_dataset(spec, world)[:5]:
        for i, window in enumerate(segment_temporal(trial.eeg, spec.frames)):
            z, *_ = np.linalg.lstsq(A, window[:, :s].astype(np.float64).reshape(-1), rcond=None)
            assert np.max(np.abs(z - trial.latent_trajectory[i])) < 1e-5
            # EEG is stored as float32; the least-squares residual sits at that precision
            assert np.linalg.norm(A @ z - window.reshape(-1)) < 1e-5 * max(1.0, np.linalg.norm(window))


def test_linear_probe_separates_noise_free_concepts():
    spec = SyntheticWorldSpec(num_concepts=10, trials_per_concept=8, channels=16, samples=24, frames=3,
                              height=16, width=16, latent_dim=8, noise_std=0.0)
    trials = generate_synthetic_dataset(spec)
    X = np.stack([t.eeg.data.reshape(-1) for t in trials]).astype(np.float64)
    y = np.array([t.concept_id for t in trials])
    Y = np.eye(spec.num_concepts)[y]
    Xb = np.hstack([X, np.ones((len(X), 1))])
    W, *_ = np.linalg.lstsq(Xb, Y, rcond=None)
    assert np.mean((Xb @ W).argmax(1) == y) == 1.0


def test_synthetic_coarse_ids_follow_table():
    from dynamind.data import load_concept_table

    table = load_concept_table()
    for t in generate_synthetic_dataset(SMALL):
        assert t.coarse_id == table.coarse_of(t.concept_id)


# ---- on-disk round trip

def test_dataset_round_trip_is_byte_identical(tmp_path):
    trials = generate_synthetic_dataset(SMALL)
    write_dataset(trials, tmp_path)
    loaded = load_dataset(tmp_path, workers=2)
    assert [t.trial_id for t in loaded] == [t.trial_id for t in trials]
    for a, b in zip(trials, loaded):
        assert a.eeg.data.tobytes() == b.eeg.data.tobytes()
        assert a.video.frames.tobytes() == b.video.frames.tobytes()
        for name in ("emb_image", "emb_text", "emb_category"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
        assert (a.concept_id, a.coarse_id, a.eeg.channel_names) == (b.concept_id, b.coarse_id, b.eeg.channel_names)


def test_empty_manifest_gives_empty_list(tmp_path):
    (tmp_path / "manifest.json").write_text("[]")
    assert load_dataset(tmp_path) == []


def test_missing_eeg_file_names_the_path(tmp_path):
    write_dataset(generate_synthetic_dataset(SMALL)[:2], tmp_path)
    missing = tmp_path / "eeg" / "c00_t000.f32"
    missing.unlink()
    with pytest.raises(LoadError, match="c00_t000"):
        load_dataset(tmp_path)


def test_label_out_of_range_is_rejected(tmp_path):
    write_dataset(generate_synthetic_dataset(SMALL)[:2], tmp_path)
    entries = json.loads((tmp_path / "manifest.json").read_text())
    entries[0]["concept_id"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(entries))
    with pytest.raises(ValidationError, match="concept_id"):
        load_dataset(tmp_path)


def test_nan_signal_is_rejected(tmp_path):
    from dynamind.data import write_array

    write_dataset(generate_synthetic_dataset(SMALL)[:1], tmp_path)
    bad = np.zeros((16, 24), dtype=np.float32)
    bad[0, 0] = np.nan
    write_array(tmp_path / "eeg" / "c00_t000.f32", bad)
    with pytest.raises(ValidationError, match="NaN"):
        load_dataset(tmp_path)


# ---- splits

def _corpus(trials_per_concept=10, concepts=40):
    names = synthetic_channel_names(2)
    video = VideoClip(np.zeros((2, 8, 8, 3)))
    eeg = EEGRecording(np.zeros((2, 4)), 200.0, names)
    emb = np.zeros(2)
    return [TrialPair(f"c{c}_t{k}", eeg, video, c, 0, emb, emb, emb)
            for c in range(concepts) for k in range(trials_per_concept)]


def test_split_all_classes_in_both_halves():
    train, test = split_by_class_count(_corpus(), 40)
    assert {t.concept_id for t in train} == {t.concept_id for t in test} == set(range(40))


def test_split_ten_classes():
    _, test = split_by_class_count(_corpus(), 10)
    assert {t.concept_id for t in test} == set(range(10))


def test_split_35_per_concept_gives_7_test():
    train, test = split_by_class_count(_corpus(35, 3), 3, 0.2)
    counts = np.bincount([t.concept_id for t in test])
    assert counts.tolist() == [7, 7, 7]
    assert len(train) == 3 * 28


def test_split_rejects_bad_fraction():
    with pytest.raises(ValidationError):
        split_by_class_count(_corpus(), 10, holdout_fraction=1.0)


def test_split_is_deterministic_and_prefix_consistent():
    trials = _corpus()
    _, t40 = split_by_class_count(trials, 40, seed=3)
    _, t40b = split_by_class_count(trials, 40, seed=3)
    _, t10 = split_by_class_count(trials, 10, seed=3)
    assert [t.trial_id for t in t40] == [t.trial_id for t in t40b]
    assert [t.trial_id for t in t10] == [t.trial_id for t in t40 if t.concept_id < 10]
