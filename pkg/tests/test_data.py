"""Cohort loading, encoding, synthetic generation, and fold planning."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binomtest

from popfusion.data import (AttributeSpec, Cohort, CohortSchema, SubjectRecord,
                            compute_fc_vector, encode_phenotypes, load_cohort,
                            make_fold_plan, stratified_subsample,
                            synthetic_attribute_agreement)
from popfusion.errors import ValidationError
from helpers import pairwise_pearson_oracle, small_cohort


# ---- compute_fc_vector -----------------------------------------------------


def test_fc_vector_length_116_rois():
    ts = np.random.default_rng(0).normal(size=(116, 30))
    assert compute_fc_vector(ts).shape == (6670,)


def test_fc_identical_rows_correlate_to_one():
    rng = np.random.default_rng(1)
    row = rng.normal(size=20)
    ts = np.stack([row, row, rng.normal(size=20)])
    vec = compute_fc_vector(ts)
    assert vec[0] == pytest.approx(1.0)


def test_fc_matches_direct_formula_oracle():
    ts = np.random.default_rng(2).normal(size=(3, 25))
    np.testing.assert_allclose(compute_fc_vector(ts), pairwise_pearson_oracle(ts),
                               atol=1e-12)


def test_fc_constant_row_correlates_to_zero():
    ts = np.vstack([np.full(10, 2.0), np.random.default_rng(3).normal(size=10)])
    assert compute_fc_vector(ts)[0] == 0.0


def test_fc_rejects_short_or_nonfinite_series():
    with pytest.raises(ValidationError):
        compute_fc_vector(np.ones((4, 2)))
    bad = np.ones((3, 5))
    bad[1, 2] = np.nan
    with pytest.raises(ValidationError):
        compute_fc_vector(bad)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(3, 12), st.integers(0, 10_000))
def test_fc_oracle_equivalence_fuzz(n_roi, t, seed):
    ts = np.random.default_rng(seed).normal(size=(n_roi, t))
    np.testing.assert_allclose(compute_fc_vector(ts), pairwise_pearson_oracle(ts),
                               atol=1e-12)


# ---- encode_phenotypes -------------------------------------------------------


SCHEMA = CohortSchema(attributes=(
    AttributeSpec(name="site", kind="categorical", vocabulary=("KKI", "NYU", "PKU")),
    AttributeSpec(name="age", kind="continuous", tolerance=2.0),
))


def test_encode_sorted_vocabulary_ordinal():
    out = encode_phenotypes(["s1"], [{"site": "NYU", "age": "9"}], SCHEMA)
    assert out[0, 0] == 1.0


def test_encode_continuous_passthrough():
    out = encode_phenotypes(["s1"], [{"site": "KKI", "age": 12.4}], SCHEMA)
    assert out[0, 1] == 12.4


def test_encode_unknown_category_names_subject():
    with pytest.raises(ValidationError, match="s7"):
        encode_phenotypes(["s7"], [{"site": "XYZ", "age": 1.0}], SCHEMA)


def test_encode_missing_attribute_names_subject():
    with pytest.raises(ValidationError, match="s9"):
        encode_phenotypes(["s9"], [{"site": "KKI"}], SCHEMA)


def test_encode_order_stable_under_permutation():
    rng = np.random.default_rng(4)
    rows = [{"site": ["KKI", "NYU", "PKU"][rng.integers(3)], "age": float(i)}
            for i in range(8)]
    ids = [f"s{i}" for i in range(8)]
    base = encode_phenotypes(ids, rows, SCHEMA)
    perm = rng.permutation(8)
    permuted = encode_phenotypes([ids[i] for i in perm], [rows[i] for i in perm],
                                 SCHEMA)
    np.testing.assert_array_equal(permuted, base[perm])


# ---- load_cohort ---------------------------------------------------------------


def _write_inputs(tmp_path, n0=5, n1=4, n_roi=6, missing_imaging=()):
    rng = np.random.default_rng(0)
    d1 = n_roi * (n_roi - 1) // 2
    ids = [f"sub{i:03d}" for i in range(n0 + n1)]
    labels = [0] * n0 + [1] * n1
    pheno = tmp_path / "phenotypes.tsv"
    with pheno.open("w") as fh:
        fh.write("subject_id\tlabel\tsite\tage\n")
        for sid, y in zip(ids, labels):
            fh.write(f"{sid}\t{y}\tKKI\t{10 + y}\n")
    stacked = tmp_path / "imaging.tsv"
    keep = [sid for sid in ids if sid not in missing_imaging]
    np.savetxt(stacked, rng.normal(size=(len(keep), d1)), delimiter="\t")
    (tmp_path / "imaging.tsv.index").write_text("\n".join(keep) + "\n")
    return stacked, pheno


def test_load_cohort_stacked_matrix(tmp_path):
    stacked, pheno = _write_inputs(tmp_path)
    cohort = load_cohort(stacked, pheno, SCHEMA)
    assert cohort.n_subjects == 9 and cohort.n_roi == 6
    assert cohort.labels().sum() == 4


def test_load_cohort_abide_sized_counts(tmp_path):
    stacked, pheno = _write_inputs(tmp_path, n0=468, n1=403, n_roi=8)
    cohort = load_cohort(stacked, pheno, SCHEMA)
    assert cohort.n_subjects == 871
    counts = np.bincount(cohort.labels())
    assert counts[0] == 468 and counts[1] == 403


def test_load_cohort_single_subject_rejected(tmp_path):
    stacked, pheno = _write_inputs(tmp_path, n0=1, n1=0)
    with pytest.raises(ValidationError):
        load_cohort(stacked, pheno, SCHEMA)


def test_load_cohort_missing_imaging_errors_then_drops(tmp_path):
    stacked, pheno = _write_inputs(tmp_path, missing_imaging=("sub003",))
    with pytest.raises(ValidationError, match="sub003"):
        load_cohort(stacked, pheno, SCHEMA)
    with pytest.warns(UserWarning, match="dropping 1"):
        cohort = load_cohort(stacked, pheno, SCHEMA, drop_missing=True)
    assert cohort.n_subjects == 8


def test_load_cohort_per_subject_files(tmp_path):
    rng = np.random.default_rng(5)
    pheno = tmp_path / "phenotypes.tsv"
    with pheno.open("w") as fh:
        fh.write("subject_id\tlabel\tsite\tage\n")
        for i in range(6):
            fh.write(f"s{i}\t{i % 2}\tNYU\t{9 + i}\n")
    img_dir = tmp_path / "imaging"
    img_dir.mkdir()
    for i in range(6):
        if i < 3:  # ROI x T time series
            np.savetxt(img_dir / f"s{i}.txt", rng.normal(size=(5, 30)))
        else:      # symmetric FC matrix
            m = rng.normal(size=(5, 5))
            np.savetxt(img_dir / f"s{i}.txt", (m + m.T) / 2)
    cohort = load_cohort(img_dir, pheno, SCHEMA)
    assert cohort.n_subjects == 6 and cohort.n_roi == 5
    assert all(r.imaging_raw.shape == (10,) for r in cohort.records)


def test_cohort_rejects_inconsistent_widths():
    rec = lambda sid, d: SubjectRecord(sid, np.zeros(d), np.zeros(2), 0)
    records = [rec("a", 15), SubjectRecord("b", np.zeros(16), np.zeros(2), 1)]
    with pytest.raises(ValidationError):
        Cohort(records=records, schema=SCHEMA, n_roi=6)


# ---- generate_synthetic_cohort ---------------------------------------------------


def test_synthetic_zero_informativeness_agreement_near_half():
    hits = total = 0
    for seed in range(10):
        cohort = small_cohort(seed=seed, n=120, informativeness=(0.0, 0.0))
        agreement = synthetic_attribute_agreement(cohort, 0)
        hits += round(agreement * cohort.n_subjects)
        total += cohort.n_subjects
    assert binomtest(hits, total, 0.5).pvalue > 0.01


def test_synthetic_determinism_byte_identical():
    a = small_cohort(seed=7)
    b = small_cohort(seed=7)
    np.testing.assert_array_equal(a.imaging_matrix(), b.imaging_matrix())
    np.testing.assert_array_equal(a.phenotype_matrix(), b.phenotype_matrix())
    np.testing.assert_array_equal(a.labels(), b.labels())


def test_synthetic_full_informativeness_is_deterministic_function():
    cohort = small_cohort(seed=3, n=60, informativeness=(1.0, 1.0))
    assert synthetic_attribute_agreement(cohort, 0) == 1.0
    assert synthetic_attribute_agreement(cohort, 1) == 1.0


def test_synthetic_rejects_tiny_cohort():
    with pytest.raises(ValidationError):
        small_cohort(n=3)


def test_synthetic_informative_features_separate_classes():
    cohort = small_cohort(seed=1, n=100)
    x, y = cohort.imaging_matrix(), cohort.labels()
    gap = np.abs(x[y == 1].mean(axis=0) - x[y == 0].mean(axis=0))
    assert (gap > 0.3).sum() >= 6  # the shifted subset stands out


# ---- make_fold_plan ----------------------------------------------------------------


def _check_plan(plan, labels, n_folds):
    n = len(labels)
    test_union = []
    for train_idx, val_idx, test_idx in plan.folds:
        combined = np.concatenate([train_idx, val_idx, test_idx])
        assert len(combined) == n and len(np.unique(combined)) == n
        test_union.append(test_idx)
        for idx, share in ((test_idx, 1), (val_idx, 1), (train_idx, n_folds - 2)):
            assert abs(len(idx) - share * n / n_folds) <= 1 + 1e-9
            for c in (0, 1):
                exact = share * (labels == c).sum() / n_folds
                assert abs((labels[idx] == c).sum() - exact) <= 1 + 1e-9
    allt = np.concatenate(test_union)
    assert len(allt) == n and len(np.unique(allt)) == n


def test_fold_plan_abide_sized():
    labels = np.array([0] * 468 + [1] * 403)
    plan = make_fold_plan(labels, 10, seed=0)
    sizes = {len(f[2]) for f in plan.folds}
    assert sizes <= {87, 88}
    _check_plan(plan, labels, 10)


def test_fold_plan_exact_stratification_small():
    labels = np.tile([0, 1], 10)
    plan = make_fold_plan(labels, 10, seed=1)
    for _, _, test_idx in plan.folds:
        assert len(test_idx) == 2
        assert labels[test_idx].sum() == 1
    _check_plan(plan, labels, 10)


def test_fold_plan_deterministic():
    labels = np.random.default_rng(2).integers(0, 2, 57)
    labels[:12] = 0
    labels[-12:] = 1
    a = make_fold_plan(labels, 5, seed=9)
    b = make_fold_plan(labels, 5, seed=9)
    for fa, fb in zip(a.folds, b.folds):
        for x, y in zip(fa, fb):
            np.testing.assert_array_equal(x, y)


def test_fold_plan_rejects_small_class():
    labels = np.array([0] * 30 + [1] * 4)
    with pytest.raises(ValidationError):
        make_fold_plan(labels, 10, seed=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 10), st.integers(0, 400), st.integers(0, 400),
       st.integers(0, 99))
def test_fold_plan_invariants_fuzz(n_folds, extra0, extra1, seed):
    n0 = n_folds + extra0
    n1 = n_folds + extra1
    labels = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    np.random.default_rng(seed).shuffle(labels)
    plan = make_fold_plan(labels, n_folds, seed)
    _check_plan(plan, labels, n_folds)


def test_stratified_subsample_sizes():
    labels = np.array([0] * 80 + [1] * 40)
    idx = stratified_subsample(labels, 0.2, seed=0)
    assert len(idx) == 24
    counts = np.bincount(labels[idx])
    assert abs(counts[0] - 16) <= 1 and abs(counts[1] - 8) <= 1
