import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.neighbors import NearestCentroid

from gsnf.data import (Dataset, IrregularSeries, SynthSpec, collate, compute_stats, generate_synthetic,
                       load_dataset, normalize_impute, save_dataset, segment_assignment,
                       simulate_exact, split)
from gsnf.exceptions import ConfigError, DatasetError

ACCEPTANCE_SPEC = dict(coupling=(1.5, 2.5), class_graphs=True, noise_std=0.2)


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def test_empty_file_gives_empty_dataset(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert len(load_dataset(p)) == 0


def test_decreasing_times_name_the_index(tmp_path):
    rec = {"times": [0.1, 0.5, 0.4], "values": [[1], [2], [3]], "mask": [[1], [1], [1]], "label": 0}
    ok = {**rec, "times": [0.1, 0.2, 0.3]}
    with pytest.raises(DatasetError, match="index 2") as exc:
        load_dataset(_write(tmp_path / "d.jsonl", [ok, rec]))
    assert exc.value.line == 2


def test_malformed_record_reports_line(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"times": [0.0], "values": [[1]], "mask": [[1]], "label": 0}\n{not json}\n')
    with pytest.raises(DatasetError) as exc:
        load_dataset(p)
    assert exc.value.line == 2


def test_null_values_are_zero_imputed(tmp_path):
    rec = {"times": [0.0, 1.0], "values": [[None, 2.0], [1.0, 3.0]], "mask": [[0, 1], [1, 1]], "label": 1}
    ds = load_dataset(_write(tmp_path / "n.jsonl", [rec]))
    assert ds[0].values[0, 0] == 0.0 and ds[0].label == 1


def test_times_rescaled_to_unit_interval(tmp_path):
    recs = [{"times": [2.0, 4.0], "values": [[0], [0]], "mask": [[1], [1]], "label": 0},
            {"times": [3.0, 6.0], "values": [[0], [0]], "mask": [[1], [1]], "label": 1}]
    ds = load_dataset(_write(tmp_path / "t.jsonl", recs))
    np.testing.assert_allclose(ds[0].times, [0.0, 0.5])
    np.testing.assert_allclose(ds[1].times, [0.25, 1.0])


def test_round_trip_is_bit_exact(tmp_path):
    ds = generate_synthetic(SynthSpec(n_vars=3, length=6, n_samples=10, seed=2))
    save_dataset(ds, tmp_path / "r.jsonl")
    back = load_dataset(tmp_path / "r.jsonl")
    for a, b in zip(ds, back):
        assert np.array_equal(a.times, b.times) and np.array_equal(a.values, b.values)
        assert np.array_equal(a.mask, b.mask) and a.label == b.label


def test_normalize_examples():
    const = IrregularSeries([0.0, 0.5, 1.0], np.full((3, 2), 4.0), np.ones((3, 2)), 0)
    out = normalize_impute(Dataset([const]))
    assert np.all(out[0].values == 0.0)
    s = IrregularSeries([0.0, 1.0], [[1.0, 5.0], [3.0, 7.0]], [[1, 0], [1, 1]], 0)
    out = normalize_impute(Dataset([s]))
    assert out[0].values[0, 1] == 0.0


def test_normalized_moments(rng):
    ds = generate_synthetic(SynthSpec(n_vars=4, length=10, n_samples=50, seed=1))
    train, val, test = split(ds)
    out = normalize_impute(train, compute_stats(train))
    vals = np.concatenate([s.values for s in out])
    mask = np.concatenate([s.mask for s in out])
    for d in range(4):
        obs = vals[mask[:, d] == 1, d]
        assert abs(obs.mean()) <= 1e-6 and abs(obs.std() - 1) <= 1e-6
    assert np.all(vals[mask == 0] == 0)


def test_stats_ignore_held_out_entries():
    ds = generate_synthetic(SynthSpec(n_vars=3, length=8, n_samples=30, seed=4))
    train, val, test = split(ds)
    before = compute_stats(train)
    for s in list(val) + list(test):
        s.values[:] = s.values * 1000 + 7
    after = compute_stats(train)
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_unobserved_variable_defaults():
    s = IrregularSeries([0.0, 1.0], [[1.0, 0.0], [2.0, 0.0]], [[1, 0], [1, 0]], 0)
    mean, std = compute_stats(Dataset([s]))
    assert mean[1] == 0.0 and std[1] == 1.0


def test_zero_coupling_is_constant():
    ds = generate_synthetic(SynthSpec(n_vars=3, length=5, n_samples=4, coupling=(0.0, 0.0),
                                      noise_std=0.0, missing_rate=0.0))
    for s in ds:
        assert np.all(s.values == s.values[0])


def test_no_missingness_gives_full_mask():
    ds = generate_synthetic(SynthSpec(n_vars=3, length=5, n_samples=6, missing_rate=0.0))
    assert all(np.all(s.mask == 1) for s in ds)


def test_integrator_matches_matrix_exponential(rng):
    spec = SynthSpec(n_vars=4, length=7, n_samples=5, noise_std=0.0, missing_rate=0.0, seed=9)
    ds, truth = generate_synthetic(spec, return_truth=True)
    times = np.stack([s.times for s in ds])
    exact = simulate_exact(truth["K"], truth["x0"], times)
    assert np.abs(truth["clean"] - exact).max() <= 1e-6
    assert np.abs(np.stack([s.values for s in ds]) - exact).max() <= 1e-6


def test_spec_validation():
    for bad in (dict(missing_rate=1.0), dict(noise_std=-1), dict(graph=[[1.0, 0.0], [0.5, 0.4]], n_vars=2),
                dict(coupling=())):
        with pytest.raises(ConfigError):
            SynthSpec(**bad)
    with pytest.raises(ConfigError):
        SynthSpec.from_dict({"bogus": 1})


@pytest.mark.parametrize("spec", [{}, ACCEPTANCE_SPEC])
def test_classes_separable_by_nearest_centroid(spec):
    ds = generate_synthetic(SynthSpec(**spec))
    feats = np.stack([(s.values * s.mask).sum(0) / np.maximum(s.mask.sum(0), 1) for s in ds])
    y = ds.labels
    order = np.random.default_rng(0).permutation(len(y))
    tr, te = order[: len(y) // 2], order[len(y) // 2:]
    acc = NearestCentroid().fit(feats[tr], y[tr]).score(feats[te], y[te])
    assert acc > 0.7
    assert np.bincount(y).tolist() == [300, 300]


def _labelled(n, classes=2):
    return Dataset([IrregularSeries([0.0], [[float(i)]], [[1]], i % classes) for i in range(n)])


def test_split_sizes_and_determinism():
    ds = _labelled(10)
    parts = split(ds, seed=3)
    assert [len(p) for p in parts] == [8, 1, 1]
    again = split(ds, seed=3)
    for a, b in zip(parts, again):
        assert [s.values[0, 0] for s in a] == [s.values[0, 0] for s in b]


@given(st.integers(9, 200), st.integers(2, 4), st.integers(0, 1000))
def test_split_is_stratified(n, k, seed):
    ds = _labelled(n, k)
    if np.bincount(ds.labels).min() < 3:
        return
    parts = split(ds, seed=seed)
    assert sum(len(p) for p in parts) == n
    overall = np.bincount(ds.labels, minlength=k) / n
    for part in parts:
        if len(part):
            counts = np.bincount(part.labels, minlength=k)
            assert np.all(np.abs(counts - overall * len(part)) <= 1 + 1e-9)


def test_split_rejects_tiny_class():
    ds = Dataset(_labelled(8).samples + [IrregularSeries([0.0], [[0.0]], [[1]], 5)])
    with pytest.raises(DatasetError):
        split(ds)
    with pytest.raises(ConfigError):
        split(_labelled(10), (0.5, 0.1, 0.1))


def test_segments_and_collate():
    np.testing.assert_array_equal(segment_assignment(7, 2), [0, 0, 0, 1, 1, 1, 1])
    with pytest.raises(ConfigError):
        segment_assignment(3, 4)
    a = IrregularSeries(np.linspace(0, 1, 5), np.ones((5, 2)), np.ones((5, 2)), 0)
    b = IrregularSeries(np.linspace(0, 1, 3), np.ones((3, 2)), np.ones((3, 2)), 1)
    batch = collate([a, b], 2)
    assert batch.values.shape == (2, 5, 2)
    np.testing.assert_array_equal(batch.valid[1], [1, 1, 1, 0, 0])
    np.testing.assert_allclose(batch.seg_weights.sum(-1), 1.0)
