import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import column_mean_loops
from pecon.datamodel import (
    Dataset,
    EhrStats,
    PatientSample,
    SyntheticConfig,
    average_subvolumes,
    filter_subsegmental,
    fit_ehr_stats,
    generate_synthetic,
    load_manifest,
    make_batches,
    normalize_ehr,
    read_matrix,
    save_dataset,
    synthesize,
    write_ehr_csv,
    write_matrix,
)
from pecon.errors import (
    DuplicatePatientError,
    EmptyInputError,
    FormatError,
    ManifestError,
    MissingFileError,
    ShapeError,
    WidthMismatchError,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def sample(pid, d=4, D_e=3, label=0, pe_type="none", split="train", n=2, value=0.0):
    return PatientSample(pid, np.full((n, d), value, np.float32), np.full(D_e, value), label, pe_type, split)


def toy_dataset(pe_types):
    samples = [
        sample(f"p{k}", label=int(t != "none"), pe_type=t, value=float(k)) for k, t in enumerate(pe_types)
    ]
    return Dataset(samples, 4, 3)


# --- averaging ----------------------------------------------------------------


def test_average_single_row():
    np.testing.assert_array_equal(average_subvolumes([[1.0, 2.0, 3.0]]), [1, 2, 3])


def test_average_symmetric_rows():
    np.testing.assert_array_equal(average_subvolumes([[1.0, 0.0], [-1.0, 0.0]]), [0, 0])


def test_average_matches_loops():
    x = np.random.default_rng(0).normal(size=(5, 8))
    np.testing.assert_allclose(average_subvolumes(x), column_mean_loops(x.tolist()), rtol=1e-14, atol=1e-15)


def test_average_empty():
    with pytest.raises(EmptyInputError):
        average_subvolumes(np.zeros((0, 3)))


@settings(max_examples=50, deadline=None)
@given(x=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=finite), alpha=finite)
def test_average_permutation_invariant_and_linear(x, alpha):
    avg = average_subvolumes(x)
    perm = np.random.default_rng(0).permutation(x.shape[0])
    np.testing.assert_allclose(average_subvolumes(x[perm]), avg, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(average_subvolumes(alpha * x), alpha * avg, rtol=1e-12, atol=1e-6)


# --- EHR scaling --------------------------------------------------------------


def test_normalize_endpoints_degenerate_and_clamp():
    stats = EhrStats(np.array([0.0, 5.0, 2.0]), np.array([10.0, 5.0, 4.0]))
    np.testing.assert_array_equal(normalize_ehr([0.0, 5.0, 4.0], stats), [0, 0, 1])
    np.testing.assert_array_equal(normalize_ehr([-1.0, 5.0, 1.0], stats), [0, 0, 0])
    np.testing.assert_array_equal(normalize_ehr([11.0, 7.0, 3.0], stats), [1, 0, 0.5])


def test_normalize_width_mismatch():
    with pytest.raises(ShapeError):
        normalize_ehr([1.0, 2.0], EhrStats(np.zeros(3), np.ones(3)))


@settings(max_examples=50, deadline=None)
@given(x=arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 4)), elements=finite))
def test_normalize_is_idempotent_on_own_stats(x):
    stats = EhrStats(x.min(0), x.max(0))
    once = normalize_ehr(x, stats)
    assert np.all((once >= 0) & (once <= 1))
    again = normalize_ehr(once, EhrStats(once.min(0), once.max(0)))
    keep = x.max(0) > x.min(0)
    np.testing.assert_allclose(again[:, keep], once[:, keep], atol=1e-12)


def test_fit_stats_uses_given_split():
    ds = toy_dataset(["none", "central", "none"])
    stats = fit_ehr_stats(ds)
    np.testing.assert_array_equal(stats.minimum, 0.0)
    np.testing.assert_array_equal(stats.maximum, 2.0)


# --- filtering and batching ---------------------------------------------------


def test_filter_subsegmental():
    ds = toy_dataset(["none", "central", "subsegmental", "segmental", "none"])
    out = filter_subsegmental(ds)
    assert out.patient_ids == ["p0", "p1", "p3", "p4"]
    assert (out.d, out.D_e) == (ds.d, ds.D_e)
    assert filter_subsegmental(out).patient_ids == out.patient_ids
    clean = toy_dataset(["none", "central"])
    assert filter_subsegmental(clean).patient_ids == clean.patient_ids


def test_filter_ten_samples_two_subsegmental():
    types = ["none", "subsegmental", "central", "none", "segmental", "subsegmental", "none", "none", "central", "none"]
    assert len(filter_subsegmental(toy_dataset(types))) == 8


def test_batches_drop_and_keep_last():
    ds = toy_dataset(["none"] * 10)
    assert [len(b) for b in make_batches(ds, 4, seed=1, drop_last=True)] == [4, 4]
    assert [len(b) for b in make_batches(ds, 4, seed=1, drop_last=False)] == [4, 4, 2]
    a = make_batches(ds, 4, seed=9)
    b = make_batches(ds, 4, seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        make_batches(ds, 0)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(0, 40), bs=st.integers(1, 12), seed=st.integers(0, 2**32 - 1), drop=st.booleans())
def test_batches_partition_indices(n, bs, seed, drop):
    ds = toy_dataset(["none"] * n)
    batches = make_batches(ds, bs, seed=seed, drop_last=drop)
    flat = np.concatenate(batches) if batches else np.array([], dtype=int)
    assert len(set(flat.tolist())) == len(flat)
    expected = (n // bs) * bs if drop else n
    assert len(flat) == expected


# --- formats ------------------------------------------------------------------


def test_matrix_round_trip(tmp_path):
    m = np.random.default_rng(1).normal(size=(3, 5)).astype(np.float32)
    path = tmp_path / "x.pecn"
    write_matrix(path, m)
    raw = path.read_bytes()
    assert raw[:5] == b"PECN\x01" and len(raw) == 13 + 4 * 15
    assert read_matrix(path).tobytes() == m.tobytes()


@pytest.mark.parametrize("mutate", [lambda b: b[:10], lambda b: b"XXXX" + b[4:], lambda b: b[:4] + b"\x02" + b[5:], lambda b: b + b"\0"])
def test_matrix_format_errors(tmp_path, mutate):
    path = tmp_path / "x.pecn"
    write_matrix(path, np.ones((2, 2)))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError):
        read_matrix(path)


def write_manifest(root, rows):
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "label", "pe_type", "split", "ct_path", "ehr_path"])
        w.writerows(rows)
    return root / "manifest.csv"


def small_files(root, widths=(("p1", 4), ("p2", 4), ("p3", 4))):
    for pid, d in widths:
        write_matrix(root / f"{pid}.pecn", np.ones((2, d)))
    write_ehr_csv(root / "ehr.csv", [pid for pid, _ in widths], np.ones((len(widths), 3)))


def test_manifest_preserves_order(tmp_path):
    small_files(tmp_path)
    rows = [
        ["p3", "0", "none", "train", "p3.pecn", "ehr.csv"],
        ["p1", "1", "central", "val", "p1.pecn", "ehr.csv"],
        ["p2", "1", "subsegmental", "test", "p2.pecn", "ehr.csv"],
    ]
    ds = load_manifest(write_manifest(tmp_path, rows))
    assert ds.patient_ids == ["p3", "p1", "p2"]
    assert (ds.d, ds.D_e) == (4, 3)


def test_manifest_duplicate_id(tmp_path):
    small_files(tmp_path)
    rows = [["p1", "0", "none", "train", "p1.pecn", "ehr.csv"], ["p1", "0", "none", "val", "p2.pecn", "ehr.csv"]]
    with pytest.raises(DuplicatePatientError, match="p1") as info:
        load_manifest(write_manifest(tmp_path, rows))
    assert info.value.row == 2


def test_manifest_width_mismatch(tmp_path):
    small_files(tmp_path, (("p1", 32), ("p2", 16)))
    rows = [["p1", "0", "none", "train", "p1.pecn", "ehr.csv"], ["p2", "0", "none", "train", "p2.pecn", "ehr.csv"]]
    with pytest.raises(WidthMismatchError) as info:
        load_manifest(write_manifest(tmp_path, rows))
    assert info.value.row == 2


@pytest.mark.parametrize(
    "row,error",
    [
        (["p1", "0", "none", "train", "missing.pecn", "ehr.csv"], MissingFileError),
        (["p1", "0", "none", "train", "p1.pecn", "nope.csv"], MissingFileError),
        (["p1", "2", "none", "train", "p1.pecn", "ehr.csv"], ManifestError),
        (["p1", "1", "none", "train", "p1.pecn", "ehr.csv"], ManifestError),
        (["p1", "0", "weird", "train", "p1.pecn", "ehr.csv"], ManifestError),
        (["p1", "0", "none", "holdout", "p1.pecn", "ehr.csv"], ManifestError),
        (["p1", "0", "none", "train"], ManifestError),
        (["p9", "0", "none", "train", "p1.pecn", "ehr.csv"], ManifestError),
    ],
)
def test_manifest_malformed_rows(tmp_path, row, error):
    small_files(tmp_path)
    with pytest.raises(error) as info:
        load_manifest(write_manifest(tmp_path, [row]))
    assert info.value.row == 1


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingFileError):
        load_manifest(tmp_path / "none.csv")


def test_sample_invariants():
    with pytest.raises(ValueError):
        sample("a", label=1, pe_type="none")
    with pytest.raises(ValueError):
        sample("a", label=0, pe_type="central")
    with pytest.raises(DuplicatePatientError):
        Dataset([sample("a"), sample("a")], 4, 3)


# --- synthetic generator ------------------------------------------------------

SMALL = dict(num_train=40, num_val=10, num_test=10, d=8, D_e=5, latent_dim=3)


def test_generator_round_trip_is_exact(tmp_path):
    ds = synthesize(SyntheticConfig(**SMALL, seed=3))
    loaded = load_manifest(generate_synthetic(SyntheticConfig(**SMALL, seed=3), tmp_path))
    assert loaded.patient_ids == ds.patient_ids
    for a, b in zip(ds, loaded):
        assert a.ct_subvolumes.tobytes() == b.ct_subvolumes.tobytes()
        assert a.ehr_features.tobytes() == b.ehr_features.tobytes()
        assert (a.label, a.pe_type, a.split) == (b.label, b.pe_type, b.split)


def test_generator_is_byte_identical(tmp_path):
    cfg = SyntheticConfig(**SMALL, seed=7)
    generate_synthetic(cfg, tmp_path / "a")
    generate_synthetic(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_generator_structure():
    cfg = SyntheticConfig(**{**SMALL, "num_train": 400}, subsegmental_fraction=0.3, seed=1)
    ds = synthesize(cfg)
    assert [len(ds.split(s)) for s in ("train", "val", "test")] == [400, 10, 10]
    ehr = ds.ehr_matrix()
    assert np.all((ehr > 0) & (ehr < 1))
    n_sub = [s.ct_subvolumes.shape[0] for s in ds]
    assert min(n_sub) >= 2 and max(n_sub) <= 6
    positives = [s for s in ds if s.label == 1]
    assert {s.pe_type for s in positives} == {"central", "segmental", "subsegmental"}
    assert 0.3 < len(positives) / len(ds) < 0.5


def linear_probe_accuracy(train, test):
    x = np.c_[train.ct_matrix(), np.ones(len(train))]
    w, *_ = np.linalg.lstsq(x, 2.0 * train.labels() - 1, rcond=None)
    pred = np.c_[test.ct_matrix(), np.ones(len(test))] @ w > 0
    return np.mean(pred == test.labels())


def test_noiseless_large_separation_is_linearly_separable():
    ds = synthesize(SyntheticConfig(**{**SMALL, "num_test": 200}, class_separation=20.0, noise_scale=0.0, seed=2))
    assert linear_probe_accuracy(ds.split("train"), ds.split("test")) == 1.0


def test_zero_separation_carries_no_label_information():
    from pecon.evaluation import auroc

    aucs = []
    for seed in range(5):
        ds = synthesize(SyntheticConfig(num_train=400, num_val=10, num_test=400, class_separation=0.0, seed=seed))
        train, test = ds.split("train"), ds.split("test")
        x = np.c_[train.ct_matrix(), np.ones(len(train))]
        w, *_ = np.linalg.lstsq(x, 2.0 * train.labels() - 1, rcond=None)
        aucs.append(auroc(np.c_[test.ct_matrix(), np.ones(len(test))] @ w, test.labels()))
    assert abs(np.mean(aucs) - 0.5) < 0.05


def test_save_dataset_layout(tmp_path):
    ds = toy_dataset(["none", "central"])
    manifest = save_dataset(ds, tmp_path)
    assert (tmp_path / "ct" / "p0.pecn").is_file() and (tmp_path / "ehr_train.csv").is_file()
    assert load_manifest(manifest).patient_ids == ["p0", "p1"]


@pytest.mark.parametrize(
    "field,value",
    [("num_train", 0), ("positive_fraction", 1.0), ("subsegmental_fraction", 1.0), ("noise_scale", -1), ("subvolumes_per_patient", (3, 2))],
)
def test_synthetic_config_validation(field, value):
    with pytest.raises(ValueError):
        SyntheticConfig(**{field: value})
