import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdloss.annotations import (MISSING, AnnotationMatrix, Dataset, DatasetFormatError,
                                   annotation_variance, compute_majority, dumps_dataset,
                                   load_dataset, majority_dataset, parse_dataset_lines,
                                   save_dataset, validate)

from conftest import make_dataset


class TestComputeMajority:
    def test_clear_majority(self):
        label, frac, tie = compute_majority([1, 1, 0])
        assert (label, tie) == (1, False)
        assert frac == pytest.approx(2 / 3, abs=1e-4)

    def test_unanimous(self):
        assert compute_majority([0, 0, 0, 0]) == (0, 1.0, False)

    def test_tie_goes_to_lowest_class(self):
        assert compute_majority([1, 0]) == (0, 0.5, True)

    def test_missing_entries_are_skipped(self):
        assert compute_majority([MISSING, 1, MISSING, 1, 0]) == (1, 2 / 3, False)

    def test_empty_row_errors(self):
        with pytest.raises(ValueError, match="no annotations"):
            compute_majority([])
        with pytest.raises(ValueError, match="no annotations"):
            compute_majority([MISSING, MISSING])

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=12), st.randoms())
    def test_permutation_invariant(self, row, rnd):
        shuffled = list(row)
        rnd.shuffle(shuffled)
        assert compute_majority(row) == compute_majority(shuffled)


class TestAnnotationVariance:
    @pytest.mark.parametrize("row, expected", [([1, 1, 1], 0.0), ([1, 0], 0.25), ([1, 1, 0], 2 / 9)])
    def test_hand_cases(self, row, expected):
        assert annotation_variance(row) == pytest.approx(expected, abs=1e-12)

    def test_non_binary_errors(self):
        with pytest.raises(ValueError, match="binary"):
            annotation_variance([0, 1, 2], num_classes=3)

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=20))
    def test_flip_invariant_and_bounds(self, row):
        v = annotation_variance(row)
        assert v == annotation_variance([1 - c for c in row])
        assert 0.0 <= v <= 0.25
        assert (v == 0.0) == (len(set(row)) == 1)

    @given(st.integers(1, 10))
    def test_maximized_at_even_split(self, half):
        n = 2 * half
        best = annotation_variance([1] * half + [0] * half)
        assert best == 0.25
        for ones in range(n + 1):
            if ones != half:
                assert annotation_variance([1] * ones + [0] * (n - ones)) < best


class TestValidate:
    def test_valid(self):
        assert validate(make_dataset([[0, 1], [1, MISSING]])) == []

    def test_unannotated_sample_named(self):
        problems = validate(make_dataset([[0, 1], [MISSING, MISSING]]))
        assert len(problems) == 1
        assert "s1" in problems[0]

    def test_nonfinite_feature_named(self):
        feats = np.zeros((2, 3))
        feats[1, 2] = np.nan
        problems = validate(make_dataset([[0, 1], [1, 1]], feats))
        assert len(problems) == 1
        assert "row 1" in problems[0]

    def test_reports_every_violation(self):
        feats = np.zeros((3, 2))
        feats[0, 0] = np.inf
        labels = [[0, 5], [MISSING, MISSING], [1, 0]]
        problems = validate(make_dataset(labels, feats))
        assert len(problems) == 3


def _line(sid, feats, ann, truth=None):
    rec = {"id": sid, "features": feats, "annotations": ann}
    if truth is not None:
        rec["truth"] = truth
    return json.dumps(rec)


class TestLoad:
    def test_two_lines_three_annotators(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(_line("x", [0.1, 0.2], {"ann1": 1, "ann2": 0}) + "\n"
                        + _line("y", [0.3, 0.4], {"ann3": 1}) + "\n")
        ds = load_dataset(path)
        assert (ds.num_samples, ds.num_annotators) == (2, 3)
        assert ds.annotator_ids == ("ann1", "ann2", "ann3")
        assert ds.annotations.labels.tolist() == [[1, 0, MISSING], [MISSING, MISSING, 1]]

    def test_duplicate_annotator_rejected(self):
        text = '{"id": "x", "features": [1.0], "annotations": {"a": 1, "a": 0}}'
        with pytest.raises(DatasetFormatError, match="line 1"):
            parse_dataset_lines([text])

    def test_malformed_line_reports_line_number(self):
        lines = [_line("x", [1.0], {"a": 1}), "{not json"]
        with pytest.raises(DatasetFormatError, match="line 2"):
            parse_dataset_lines(lines)

    def test_unknown_class_rejected(self):
        with pytest.raises(DatasetFormatError):
            parse_dataset_lines([_line("x", [1.0], {"a": 2})], num_classes=2)

    def test_inconsistent_dimension_rejected(self):
        lines = [_line("x", [1.0], {"a": 1}), _line("y", [1.0, 2.0], {"a": 0})]
        with pytest.raises(DatasetFormatError, match="line 2"):
            parse_dataset_lines(lines)

    def test_round_trip(self, tmp_path):
        ds = make_dataset([[0, 1, MISSING], [MISSING, 1, 1]])
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        assert load_dataset(path) == ds


@st.composite
def canonical_datasets(draw):
    n = draw(st.integers(1, 6))
    a = draw(st.integers(1, 4))
    d = draw(st.integers(1, 3))
    floats = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
    feats = np.array(draw(st.lists(st.lists(floats, min_size=d, max_size=d), min_size=n, max_size=n)))
    labels = np.array(draw(st.lists(st.lists(st.integers(-1, 1), min_size=a, max_size=a),
                                    min_size=n, max_size=n)))
    labels[(labels == MISSING).all(axis=1), 0] = 1
    truth = np.array(draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)))
    with_truth = draw(st.booleans())
    ds = Dataset(feats, AnnotationMatrix(labels, 2), [f"id{i}" for i in range(n)],
                 truth if with_truth else None)
    return ds.canonical()


@settings(max_examples=60, deadline=None)
@given(canonical_datasets())
def test_round_trip_property(ds):
    assert parse_dataset_lines(dumps_dataset(ds).splitlines(), num_classes=2) == ds


def test_majority_dataset_has_one_annotator():
    ds = make_dataset([[0, 1, 1], [0, 0, MISSING], [1, 0, MISSING]])
    maj = majority_dataset(ds)
    assert maj.num_annotators == 1
    assert maj.annotations.labels[:, 0].tolist() == [1, 0, 0]
