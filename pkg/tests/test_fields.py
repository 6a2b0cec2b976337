import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lagcast.fields import (
    DBZ_FLOOR, DatasetSplit, FieldSequence, FieldValidationError, FilterParams, RainField,
    ReflectivityField, build_split, dbz_to_rain, is_rainy_enough, rain_to_dbz, split_counts,
    split_targets, split_violations,
)


def field_of(value, shape=(8, 8)):
    return RainField(np.full(shape, float(value)))


def test_rain_to_dbz_examples():
    # independent evaluation of 10*log10(200 * R**1.6)
    for r, expected in [(1.0, 10 * math.log10(200.0)), (10.0, 10 * math.log10(200.0 * 10 ** 1.6))]:
        dbz = rain_to_dbz(field_of(r)).values[0, 0]
        assert dbz == pytest.approx(expected, abs=1e-9)
    assert 10 * math.log10(200.0) == pytest.approx(23.0103, abs=1e-4)
    assert 10 * math.log10(200.0 * 10 ** 1.6) == pytest.approx(39.0103, abs=1e-4)
    assert 200.0 * 10 ** 1.6 == pytest.approx(7962.14, abs=0.01)


def test_zero_rain_maps_to_floor():
    assert np.all(rain_to_dbz(field_of(0.0)).values == DBZ_FLOOR)
    assert np.all(rain_to_dbz(field_of(0.005)).values == DBZ_FLOOR)


def test_dbz_to_rain_examples():
    assert dbz_to_rain(ReflectivityField(np.full((8, 8), 23.0103))).values[0, 0] == pytest.approx(1.0, rel=1e-4)
    assert dbz_to_rain(ReflectivityField(np.full((8, 8), 39.0103))).values[0, 0] == pytest.approx(10.0, rel=1e-4)
    assert np.all(dbz_to_rain(ReflectivityField(np.full((8, 8), DBZ_FLOOR))).values == 0.0)


def test_non_finite_rejected():
    bad = np.zeros((8, 8))
    bad[2, 3] = np.nan
    with pytest.raises(FieldValidationError):
        RainField(bad)
    with pytest.raises(FieldValidationError):
        RainField(-np.ones((8, 8)))
    with pytest.raises(FieldValidationError):
        RainField(np.zeros((4, 8)))


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=0.01, max_value=300.0))
def test_marshall_palmer_round_trip(r):
    back = dbz_to_rain(rain_to_dbz(field_of(r))).values[0, 0]
    assert abs(back - r) <= 1e-6 * r


def test_rainy_enough_examples():
    assert not is_rainy_enough(field_of(0.0, (20, 20)))
    v = np.zeros((20, 20))
    v.ravel()[:20] = 1.0  # exactly 5 % of 400 cells
    assert is_rainy_enough(RainField(v))
    v = np.zeros((10, 100))
    v.ravel()[:49] = 100.0  # 4.9 %
    assert np.count_nonzero(v >= 0.6) / v.size < 0.05
    assert not is_rainy_enough(RainField(v))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(0, 399), st.floats(0.0, 50.0))
def test_rainy_enough_monotone(seed, cell, bump):
    rng = np.random.default_rng(seed)
    v = rng.exponential(0.3, (20, 20))
    before = is_rainy_enough(RainField(v))
    v2 = v.copy()
    v2.ravel()[cell] += bump
    after = is_rainy_enough(RainField(v2))
    assert after or not before


def test_sequence_requires_consecutive_timestamps():
    a = RainField(np.zeros((8, 8)), timestamp=0)
    b = RainField(np.zeros((8, 8)), timestamp=2)
    with pytest.raises(FieldValidationError):
        FieldSequence((a, b))
    c = RainField(np.zeros((9, 8)), timestamp=1)
    with pytest.raises(FieldValidationError):
        FieldSequence((a, c))


def test_split_counts():
    assert split_counts(100) == (68, 12, 20)


def test_split_of_dry_archive_is_empty():
    archive = [RainField(np.zeros((8, 8)), timestamp=t) for t in range(40)]
    split = build_split(archive)
    assert split.train == split.validation == split.test == []


def test_build_split_too_short():
    with pytest.raises(ValueError):
        build_split([RainField(np.zeros((8, 8)), timestamp=t) for t in range(5)])


def _random_archive(rng, n_frames, rainy_p=0.3, gap_p=0.01):
    fields = []
    t = 0
    for _ in range(n_frames):
        if rng.random() < gap_p:
            t += int(rng.integers(2, 6))
        v = np.zeros((8, 8))
        if rng.random() < rainy_p:
            v[:2, :] = 1.0
        fields.append(RainField(v, timestamp=t))
        t += 1
    return fields


def test_split_1000_frames_disjoint():
    rng = np.random.default_rng(3)
    archive = _random_archive(rng, 1000, rainy_p=0.3)
    split = build_split(archive, FilterParams(seed=1))
    ts = [f.timestamp for f in archive]
    assert len(split.all_targets()) > 200
    assert split_violations(split, ts) == []


def test_split_pruning_keeps_train_and_test_counts_sane():
    targets = list(range(11, 111))  # 100 chained targets
    split = split_targets(targets, FilterParams(seed=0))
    assert len(split.test) == 20
    assert split_violations(split) == []
    assert len(split.train) <= 68


def test_violation_checker_catches_overlap():
    bad = DatasetSplit(train=[20], validation=[25], test=[])
    assert split_violations(bad)
