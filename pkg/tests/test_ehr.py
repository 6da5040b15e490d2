import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmsn.data import BINARY_VALUES, POSITION_VALUES, SEX_VALUES, VIEW_VALUES, EhrRecord
from mmsn.ehr import (
    BUNDLES,
    FEATURE_GROUP_NAMES,
    FEATURES,
    VOCABULARIES,
    FeatureGroupSpec,
    assemble,
    assemble_batch,
    encode_age,
    encode_onehot,
    parse_feature_group,
)
from mmsn.errors import AgeOutOfRange, UnknownFeatureGroup, UnknownValue

records = st.builds(
    EhrRecord,
    age=st.integers(18, 100),
    sex=st.sampled_from(SEX_VALUES),
    view=st.sampled_from(VIEW_VALUES),
    position=st.sampled_from(POSITION_VALUES),
    icu_admission=st.sampled_from(BINARY_VALUES),
    in_hospital_mortality=st.sampled_from(BINARY_VALUES),
)
feature_subsets = st.sets(st.sampled_from(FEATURES), min_size=1)


def test_encode_age_bounds():
    assert encode_age(18) == 0.0
    assert encode_age(100) == 1.0
    assert encode_age(59) == 0.5
    with pytest.raises(AgeOutOfRange):
        encode_age(17)
    with pytest.raises(AgeOutOfRange):
        encode_age(101)


def test_encode_age_affine_increasing():
    vals = np.array([encode_age(a) for a in range(18, 101)])
    assert np.all(np.diff(vals) > 0)
    np.testing.assert_allclose(np.diff(vals), 1 / 82)


def test_encode_onehot():
    np.testing.assert_array_equal(encode_onehot("Male", ["Male", "Female"]), [1, 0])
    np.testing.assert_array_equal(encode_onehot("PA", ["AP", "L", "PA", "LL"]), [0, 0, 1, 0])
    np.testing.assert_array_equal(encode_onehot("Recumbent", ["Erect", "Recumbent"]), [0, 1])
    with pytest.raises(UnknownValue):
        encode_onehot("Supine", ["Erect", "Recumbent"])


def test_group_dimensions():
    assert FeatureGroupSpec.parse("D").dim == 3
    assert FeatureGroupSpec.parse("D+SM+SI").dim == 13
    dims = {name: FeatureGroupSpec.parse(name).dim for name in FEATURE_GROUP_NAMES}
    assert dims == {"sex": 2, "age": 1, "view": 4, "pos": 2, "mort": 2, "icu": 2,
                    "D": 3, "SM": 6, "SI": 4, "D+SM": 9, "D+SI": 7, "SM+SI": 10, "D+SM+SI": 13}


def test_single_sex_feature():
    rec = EhrRecord(30, "Female", "PA", "Erect", "Negative", "Negative")
    np.testing.assert_array_equal(assemble(rec, FeatureGroupSpec.parse("sex")), [0, 1])


def test_canonical_order():
    rec = EhrRecord(59, "Male", "L", "Recumbent", "Positive", "Negative")
    v = assemble(rec, FeatureGroupSpec.parse("SI+D"))
    np.testing.assert_array_equal(v, [0.5, 1, 0, 0, 1, 1, 0])


def test_invalid_groups():
    for bad in ("bogus", "D+bogus", "", "sex+sex"):
        with pytest.raises(UnknownFeatureGroup):
            FeatureGroupSpec.parse(bad)
    assert parse_feature_group("none") is None
    assert parse_feature_group(None) is None


@given(records, feature_subsets, feature_subsets)
def test_dimension_additivity(rec, a, b):
    b = b - a
    if not b:
        return
    va = assemble(rec, FeatureGroupSpec(a))
    vb = assemble(rec, FeatureGroupSpec(b))
    vab = assemble(rec, FeatureGroupSpec(a | b))
    assert vab.size == va.size + vb.size


@given(records, feature_subsets)
def test_onehot_blocks_sum_to_one(rec, feats):
    spec = FeatureGroupSpec(feats)
    v = assemble(rec, spec)
    offset = 0
    for f in spec.features:
        width = 1 if f == "age" else len(VOCABULARIES[f])
        block = v[offset : offset + width]
        if f == "age":
            assert 0.0 <= block[0] <= 1.0
        else:
            assert block.sum() == 1.0 and set(block) <= {0.0, 1.0}
        offset += width
    n_onehot = sum(f != "age" for f in spec.features)
    expected = n_onehot + (encode_age(rec.age) if "age" in spec.features else 0.0)
    assert v.sum() == pytest.approx(expected)


def test_bundles_cover_all_features():
    assert sorted(f for b in BUNDLES.values() for f in b) == sorted(FEATURES)


def test_assemble_batch_shape():
    recs = [EhrRecord(20 + i, "Male", "AP", "Erect", "Negative", "Positive") for i in range(4)]
    assert assemble_batch(recs, FeatureGroupSpec.parse("D+SM+SI")).shape == (4, 13)
    assert assemble_batch([], FeatureGroupSpec.parse("icu")).shape == (0, 2)
