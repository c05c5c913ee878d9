import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paneldx.data import (
    Panel,
    PanelScheme,
    PatientRecord,
    SplitSpec,
    Standardizer,
    SyntheticSpec,
    cheap_informative_panel_spec,
    generate_synthetic,
    load_csv,
    load_scheme,
    random_mask_augment,
    records_matrix,
    save_csv,
    save_scheme,
    split,
)
from paneldx.errors import ContractError, ParseError, SchemaError, StratificationError


def two_feature_scheme():
    return PanelScheme(("a", "b"), (Panel("p0", 5.0, (0, 1)),))


# -- csv ------------------------------------------------------------------


def test_load_csv_basic(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,y\n1.0,2.0,0\n3.0,4.0,1\n5.0,6.0,0\n")
    recs = load_csv(str(p), two_feature_scheme())
    assert len(recs) == 3
    np.testing.assert_array_equal(recs[1].features, [3.0, 4.0])
    assert [r.label for r in recs] == [0, 1, 0]


def test_load_csv_empty_cell_is_missing(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,y\n1.0,,1\n")
    recs = load_csv(str(p), two_feature_scheme())
    assert recs[0].known.tolist() == [1, 0]
    assert np.isnan(recs[0].features[1])


def test_load_csv_schema_error(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,c,y\n1.0,2.0,0\n")
    with pytest.raises(SchemaError):
        load_csv(str(p), two_feature_scheme())


def test_load_csv_parse_error_carries_line(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,y\n1.0,2.0,0\nbogus,2.0,1\n")
    with pytest.raises(ParseError, match="line 3"):
        load_csv(str(p), two_feature_scheme())


def test_csv_round_trip(tmp_path):
    scheme = two_feature_scheme()
    recs = [PatientRecord(np.array([1.5, np.nan]), 1, "r1"),
            PatientRecord(np.array([-2.0, 0.25]), 0, "r2")]
    path = tmp_path / "out.csv"
    save_csv(recs, scheme, str(path))
    back = load_csv(str(path), scheme)
    assert back[0].known.tolist() == [1, 0]
    np.testing.assert_array_equal(back[1].features, [-2.0, 0.25])


def test_scheme_round_trip(tmp_path):
    scheme = PanelScheme(("age", "a", "b"), (Panel("p", 44.0, (1, 2)),), visible=(0,))
    path = tmp_path / "scheme.yaml"
    save_scheme(scheme, str(path))
    assert load_scheme(str(path)) == scheme


def test_scheme_validation():
    with pytest.raises(SchemaError):
        PanelScheme(("a", "b"), (Panel("p", 1.0, (0,)),))  # b uncovered
    with pytest.raises(SchemaError):
        PanelScheme(("a",), (Panel("p", 1.0, (0,)),), visible=(0,))  # overlap
    with pytest.raises(SchemaError):
        PanelScheme(("a",), (Panel("p", -1.0, (0,)),))


# -- synthesis ---------------------------------------------------------------


def test_synthetic_imbalance_within_binomial_bound():
    # 3 sigma of Binomial(20000, 0.1) is 3*sqrt(.1*.9/20000) ~ 0.00636 < 0.6%
    spec = cheap_informative_panel_spec(n=20000, pos_fraction=0.1)
    recs, _ = generate_synthetic(spec, seed=11)
    frac = np.mean([r.label for r in recs])
    assert abs(frac - 0.1) < 0.006


def test_synthetic_zero_shift_classes_identical():
    spec = cheap_informative_panel_spec(n=4000, pos_fraction=0.5, shift=0.0)
    recs, _ = generate_synthetic(spec, seed=5)
    x, y, _ = records_matrix(recs)
    # label carries no information: class-conditional means agree within noise
    gap = np.abs(x[y == 1].mean(axis=0) - x[y == 0].mean(axis=0))
    assert np.all(gap < 5.0 / np.sqrt(2000))


def test_synthetic_deterministic():
    spec = cheap_informative_panel_spec(n=100)
    a, _ = generate_synthetic(spec, seed=3)
    b, _ = generate_synthetic(spec, seed=3)
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.features, rb.features)
        assert ra.label == rb.label


def test_synthetic_rejects_bad_covariance():
    scheme = two_feature_scheme()
    with pytest.raises(ContractError):
        SyntheticSpec(scheme, 10, 0.5, np.zeros(2), np.zeros(2),
                      cov_neg=np.array([[1.0, 2.0], [2.0, 1.0]]),
                      cov_pos=np.eye(2))


# -- masking --------------------------------------------------------------------


def test_mask_augment_support():
    scheme = PanelScheme(("a", "b"), (Panel("p0", 1.0, (0,)), Panel("p1", 1.0, (1,))))
    rec = PatientRecord(np.array([1.0, 2.0]), 0, "r")
    out = random_mask_augment([rec], 4, seed=0, scheme=scheme)
    assert len(out) == 4
    for _, mask in out:
        assert mask.tolist() in ([0, 0], [0, 1], [1, 0], [1, 1])


def test_mask_augment_all_visible():
    scheme = PanelScheme(("a", "b"), (), visible=(0, 1))
    rec = PatientRecord(np.array([1.0, 2.0]), 0, "r")
    out = random_mask_augment([rec], 3, seed=0, scheme=scheme)
    for _, mask in out:
        assert mask.tolist() == [1, 1]


def test_mask_augment_binomial():
    scheme = PanelScheme(("a",), (Panel("p0", 1.0, (0,)),))
    rec = PatientRecord(np.array([1.0]), 0, "r")
    out = random_mask_augment([rec], 1000, seed=42, scheme=scheme)
    observed = sum(int(mask[0]) for _, mask in out)
    assert abs(observed - 500) <= 3 * np.sqrt(250)


@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_mask_augment_panel_atomicity(seed, copies):
    scheme = PanelScheme(("v", "a", "b", "c"),
                         (Panel("p0", 1.0, (1, 2)), Panel("p1", 2.0, (3,))),
                         visible=(0,))
    rec = PatientRecord(np.arange(4, dtype=float), 1, "r")
    for _, mask in random_mask_augment([rec], copies, seed=seed, scheme=scheme):
        assert scheme.is_panel_atomic(mask)


# -- splitting -------------------------------------------------------------------


def make_records(n, n_pos):
    return [PatientRecord(np.array([float(i)]), 1 if i < n_pos else 0, f"r{i}")
            for i in range(n)]


def test_split_sizes_match_fractions():
    recs = make_records(100, 30)
    parts = split(recs, SplitSpec((0.25, 0.50, 0.05, 0.10, 0.10), seed=1))
    assert [len(p) for p in parts] == [25, 50, 5, 10, 10]


def test_split_degenerate_all_in_first():
    recs = make_records(10, 4)
    parts = split(recs, SplitSpec((1.0, 0.0, 0.0, 0.0, 0.0), seed=0))
    assert len(parts[0]) == 10 and all(len(p) == 0 for p in parts[1:])


def test_split_stratification_error():
    recs = make_records(10, 1)
    with pytest.raises(StratificationError):
        split(recs, SplitSpec((0.2, 0.2, 0.2, 0.2, 0.2), seed=0))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_split_partition_property(seed):
    recs = make_records(60, 24)
    parts = split(recs, SplitSpec((0.25, 0.50, 0.05, 0.10, 0.10), seed=seed))
    ids = [r.id for part in parts for r in part]
    assert sorted(ids) == sorted(r.id for r in recs)
    assert len(set(ids)) == len(recs)
    # stratification within 1 record of proportional
    for part in parts:
        if part:
            npos = sum(r.label for r in part)
            assert abs(npos - 0.4 * len(part)) <= 1.0 + 1e-9


def test_standardizer_train_statistics():
    rng = np.random.default_rng(2)
    recs = [PatientRecord(rng.normal(3.0, 2.0, size=4), int(i % 2), f"r{i}")
            for i in range(200)]
    std = Standardizer.fit(recs)
    transformed = std.transform(recs)
    x, _, _ = records_matrix(transformed)
    assert np.all(np.abs(x.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(x.var(axis=0) - 1.0) < 1e-9)
