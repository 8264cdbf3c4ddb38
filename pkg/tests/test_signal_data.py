from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecgrobust import signal_data as sd


def test_load_degenerate_row(tmp_path):
    path = tmp_path / "beats.csv"
    path.write_text(",".join(["0.0"] * 187 + ["0"]) + "\n")
    (s,) = sd.load_beat_dataset(path, "train")
    assert s.label == 0 and np.all(s.values == 0)


def test_round_trip_three_rows(tmp_path):
    rng = np.random.default_rng(0)
    samples = [sd.BeatSample(rng.uniform(-1, 1, 187), lab) for lab in (0, 1, 4)]
    path = tmp_path / "beats.csv"
    sd.write_beat_dataset(samples, path)
    back = sd.load_beat_dataset(path, "test")
    assert [s.label for s in back] == [0, 1, 4]
    for a, b in zip(samples, back):
        assert np.array_equal(a.values, b.values)


def test_load_rejects_bad_rows(tmp_path):
    short = tmp_path / "short.csv"
    short.write_text(",".join(["0"] * 10) + "\n")
    with pytest.raises(sd.DataFormatError, match="row 1"):
        sd.load_beat_dataset(short)
    text = tmp_path / "text.csv"
    text.write_text(",".join(["0"] * 187 + ["0"]) + "\n" + ",".join(["x"] * 187 + ["0"]) + "\n")
    with pytest.raises(sd.DataFormatError, match="row 2"):
        sd.load_beat_dataset(text)
    label = tmp_path / "label.csv"
    label.write_text(",".join(["0"] * 187 + ["7"]) + "\n")
    with pytest.raises(sd.DataValidationError):
        sd.load_beat_dataset(label)


def _beats(counts):
    out = []
    for label, n in counts.items():
        out += [sd.BeatSample(np.full(187, label * 0.1 + i * 1e-3), label) for i in range(n)]
    return out


def test_upsampling_counts():
    out = sd.balance_by_upsampling(_beats({0: 3, 1: 1}), seed=0)
    assert Counter(s.label for s in out) == {0: 3, 1: 3}


def test_upsampling_fixed_point():
    data = _beats({0: 2, 1: 2, 2: 2})
    assert sd.balance_by_upsampling(data, seed=3) == data


def test_upsampling_members_brute_force():
    data = _beats({0: 5, 1: 2, 2: 1})
    out = sd.balance_by_upsampling(data, seed=7)
    assert Counter(s.label for s in out) == {0: 5, 1: 5, 2: 5}
    assert out[:len(data)] == data
    for s in out[len(data):]:
        # every duplicate is one of the originals of the same class
        assert any(o is s and o.label == s.label for o in data)


def test_upsampling_empty():
    with pytest.raises(sd.DataValidationError):
        sd.balance_by_upsampling([], seed=0)


@given(st.dictionaries(st.integers(0, 4), st.integers(1, 6), min_size=1), st.integers(0, 100))
@settings(max_examples=30, deadline=None)
def test_upsampling_keeps_originals(counts, seed):
    data = _beats(counts)
    out = sd.balance_by_upsampling(data, seed)
    ids = Counter(id(s) for s in out)
    assert all(ids[id(s)] >= 1 for s in data)
    assert len(set(Counter(s.label for s in out).values())) == 1


def test_split_sizes_published():
    train, val = sd.split_train_val(list(range(87554)), 0.2, seed=0)
    assert (len(train), len(val)) == (70043, 17511)
    assert not set(train) & set(val)


def test_split_small_and_deterministic():
    train, val = sd.split_train_val(list(range(10)), 0.2, seed=5)
    assert len(val) == 2
    assert sd.split_train_val(list(range(10)), 0.2, seed=5) == (train, val)
    with pytest.raises(ValueError):
        sd.split_train_val(list(range(10)), 1.0, seed=0)


def _corpus(per_class, n_classes=9, multi=()):
    recs = []
    for c in range(n_classes):
        for j in range(per_class):
            recs.append(sd.Recording(np.ones((12, 10)) * (c + 1), None, f"c{c}-{j}", (c,)))
    for i, labels in enumerate(multi):
        recs.append(sd.Recording(np.ones((12, 10)), None, f"multi-{i}", labels))
    return recs


def test_cpsc_boundary_counts():
    with pytest.raises(sd.DataValidationError, match="class 0"):
        sd.prepare_cpsc_corpus(_corpus(54), seed=0)
    train, val, test, split = sd.prepare_cpsc_corpus(_corpus(55), seed=0, balance=False)
    assert (len(train), len(val), len(test)) == (0, 45, 450)
    train, val, test, split = sd.prepare_cpsc_corpus(_corpus(56), seed=0, balance=False)
    assert len(train) == 9 and Counter(r.label for r in train) == {c: 1 for c in range(9)}


def test_cpsc_split_properties():
    recs = _corpus(60, multi=[(1, 5), (0, 2)])
    train, val, test, split = sd.prepare_cpsc_corpus(recs, seed=3)
    ids = [set(split.train_ids), set(split.val_ids), set(split.test_ids)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert "multi-0" not in set().union(*ids) and "multi-1" not in set().union(*ids)
    assert len(set().union(*ids)) == 9 * 60
    assert Counter(r.label for r in val) == {c: 5 for c in range(9)}
    assert Counter(r.label for r in test) == {c: 50 for c in range(9)}
    assert all(r.leads.shape[0] == 8 for r in train + val + test)


def test_cpsc_published_counts():
    # class sizes chosen so 477 multi-label of 6877 are removed
    sizes = [918, 1098, 704, 207, 1695, 556, 672, 825, 202]
    scale = 6400 / sum(sizes)
    counts = [int(s * scale) for s in sizes]
    counts[0] += 6400 - sum(counts)
    recs = []
    for c, n in enumerate(counts):
        recs += [sd.Recording(np.zeros((12, 4)), None, f"{c}-{j}", (c,)) for j in range(n)]
    recs += [sd.Recording(np.zeros((12, 4)), None, f"m{j}", (0, 1)) for j in range(477)]
    assert len(recs) == 6877
    train, val, test, split = sd.prepare_cpsc_corpus(recs, seed=0, balance=False)
    assert (len(split.train_ids), len(val), len(test)) == (5905, 45, 450)


def test_lead_removal_indices():
    leads = np.arange(12)[:, None] * np.ones((12, 3))
    rec = sd.remove_leads(sd.Recording(leads, 0, "a"))
    assert rec.leads[:, 0].tolist() == [0, 1, 6, 7, 8, 9, 10, 11]


def test_split_spec_round_trip(tmp_path):
    spec = sd.SplitSpec(["a", "b"], ["c"], ["d"], 4)
    spec.save(tmp_path / "split.json")
    assert sd.SplitSpec.load(tmp_path / "split.json") == spec
    with pytest.raises(sd.DataValidationError):
        sd.SplitSpec(["a"], ["a"], [], 0)


@pytest.mark.parametrize("lead, expected", [
    ([0.5, -2.0], [0.25, -1.0]),
    ([0.0, 0.0], [0.0, 0.0]),
    ([3.0, -3.0], [1.0, -1.0]),
])
def test_maxabs_scaling(lead, expected):
    rec = sd.scale_leads_maxabs(sd.Recording(np.array([lead]), 0, "x"))
    assert rec.leads[0].tolist() == expected


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_maxabs_idempotent_and_bounded(values):
    rec = sd.scale_leads_maxabs(sd.Recording(np.array([values]), 0, "x"))
    assert np.all(np.abs(rec.leads) <= 1.0)
    again = sd.scale_leads_maxabs(rec)
    np.testing.assert_allclose(again.leads, rec.leads, rtol=0, atol=1e-15)


def test_maxabs_transformer_matches_function():
    X = np.random.default_rng(0).normal(size=(3, 2, 7))
    out = sd.MaxAbsLeadScaler().fit_transform(X)
    for i in range(3):
        np.testing.assert_array_equal(out[i], sd.scale_leads_maxabs(sd.Recording(X[i], 0, "r")).leads)


def test_pad_exact_and_truncate():
    leads = np.ones((8, sd.CPSC_PAD_LENGTH))
    sig, mask = sd.pad_and_mask(leads)
    assert np.array_equal(sig, leads) and mask.all()
    long = np.random.default_rng(0).normal(size=(8, 72000))
    sig, mask = sd.pad_and_mask(long, mode="train_random", seed=1)
    assert np.array_equal(sig, long[:, :33792]) and mask.all()


def test_pad_eval_left_index_scan():
    leads = np.random.default_rng(0).uniform(0.1, 1, size=(8, 3000))
    sig, mask = sd.pad_and_mask(leads, mode="eval_left")
    for t in range(sd.CPSC_PAD_LENGTH):
        assert mask[0, t] == (1.0 if t < 3000 else 0.0)
    assert np.all(sig[:, 3000:] == 0)
    assert np.array_equal(sig[:, :3000], leads)


@given(st.integers(1, 400), st.integers(0, 10_000), st.sampled_from(["train_random", "eval_left"]))
@settings(max_examples=40, deadline=None)
def test_pad_mask_invariants(T, seed, mode):
    leads = np.random.default_rng(seed).uniform(0.1, 1, size=(2, T))
    sig, mask = sd.pad_and_mask(leads, target_len=256, mode=mode, seed=seed)
    assert np.array_equal(sig * mask, sig)
    assert mask.sum() == min(T, 256)
    ones = np.flatnonzero(mask[0])
    assert np.all(np.diff(ones) == 1)  # one contiguous segment


def test_collate_builds_masked_batch():
    recs = [sd.Recording(np.ones((8, n)), i % 2, f"r{i}") for i, n in enumerate((10, 20, 5))]
    batch = sd.collate_recordings(recs, target_len=32)
    assert batch.signals.shape == (3, 8, 32) and batch.mask.shape == (3, 1, 32)
    assert batch.mask.sum(axis=(1, 2)).tolist() == [10, 20, 5]
    assert batch.labels.tolist() == [0, 1, 0]


def test_synth_beats_contract():
    assert sd.synth_beats(0, 5, 187, seed=1) == []
    data = sd.synth_beats(10, 5, 187, seed=1)
    assert len(data) == 50 and Counter(s.label for s in data) == {c: 10 for c in range(5)}
    assert all(np.all(np.abs(s.values) <= 1) for s in data)
    again = sd.synth_beats(10, 5, 187, seed=1)
    assert all(np.array_equal(a.values, b.values) for a, b in zip(data, again))
    with pytest.raises(ValueError):
        sd.synth_beats(1, 1)


def test_synth_beats_linear_probe_beats_chance():
    from sklearn.linear_model import LogisticRegression

    X, y = sd.beats_to_arrays(sd.synth_beats(60, seed=2))
    Xt, yt = sd.beats_to_arrays(sd.synth_beats(30, seed=3))
    assert LogisticRegression(max_iter=2000).fit(X, y).score(Xt, yt) > 0.5


def test_recording_corpus_round_trip(tmp_path):
    recs = sd.synth_recordings(2, n_classes=3, min_len=50, max_len=80, seed=0, multi_label_every=4)
    manifest = sd.write_recording_corpus(recs, tmp_path / "corpus", tmp_path / "manifest.csv")
    back = sd.load_recording_corpus(tmp_path / "corpus", manifest)
    assert [r.id for r in back] == [r.id for r in recs]
    assert [r.labels for r in back] == [r.labels for r in recs]
    assert all(np.array_equal(a.leads, b.leads) for a, b in zip(back, recs))
