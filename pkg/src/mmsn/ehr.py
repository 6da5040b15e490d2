"""Fixed-width numeric encoding of the tabular EHR fields."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .data import AGE_MAX, AGE_MIN, BINARY_VALUES, POSITION_VALUES, SEX_VALUES, VIEW_VALUES, EhrRecord
from .errors import AgeOutOfRange, UnknownFeatureGroup, UnknownValue

# canonical concatenation order; vocabularies in their listed order
FEATURES = ("age", "sex", "view", "pos", "icu", "mort")
VOCABULARIES = {
    "sex": SEX_VALUES,
    "view": VIEW_VALUES,
    "pos": POSITION_VALUES,
    "icu": BINARY_VALUES,
    "mort": BINARY_VALUES,
}
FEATURE_DIMS = {"age": 1, **{k: len(v) for k, v in VOCABULARIES.items()}}

BUNDLES = {
    "D": ("age", "sex"),
    "SM": ("view", "pos"),
    "SI": ("icu", "mort"),
}

# the thirteen variants compared in the linear-evaluation table
FEATURE_GROUP_NAMES = (
    "sex", "age", "view", "pos", "mort", "icu",
    "D", "SM", "SI", "D+SM", "D+SI", "SM+SI", "D+SM+SI",
)

_RECORD_ATTR = {
    "sex": "sex",
    "view": "view",
    "pos": "position",
    "icu": "icu_admission",
    "mort": "in_hospital_mortality",
}


class FeatureGroupSpec:
    """An ordered, duplicate-free subset of the six EHR features."""

    def __init__(self, features: Iterable[str]):
        feats = list(features)
        if not feats:
            raise UnknownFeatureGroup("feature group must be non-empty")
        unknown = [f for f in feats if f not in FEATURES]
        if unknown:
            raise UnknownFeatureGroup(f"unknown features {unknown}")
        if len(set(feats)) != len(feats):
            raise UnknownFeatureGroup(f"duplicate features in {feats}")
        self.features = tuple(f for f in FEATURES if f in feats)

    @classmethod
    def parse(cls, name: str) -> "FeatureGroupSpec":
        """Parse names like ``sex``, ``D`` or ``D+SM+SI``."""
        feats: list[str] = []
        for part in name.split("+"):
            part = part.strip()
            if part in BUNDLES:
                feats.extend(BUNDLES[part])
            elif part in FEATURES:
                feats.append(part)
            else:
                raise UnknownFeatureGroup(f"unknown feature group {name!r}")
        return cls(feats)

    @property
    def dim(self) -> int:
        return sum(FEATURE_DIMS[f] for f in self.features)

    @property
    def name(self) -> str:
        return "+".join(self.features)

    def __eq__(self, other):
        return isinstance(other, FeatureGroupSpec) and self.features == other.features

    def __hash__(self):
        return hash(self.features)

    def __repr__(self):
        return f"FeatureGroupSpec({self.name!r})"


def parse_feature_group(name: str | None) -> FeatureGroupSpec | None:
    """``None`` or ``"none"`` selects vanilla MSN (no EHR branch)."""
    if name is None or name == "none":
        return None
    return FeatureGroupSpec.parse(name)


def encode_age(age: int) -> float:
    if not AGE_MIN <= age <= AGE_MAX:
        raise AgeOutOfRange(age)
    return (age - AGE_MIN) / (AGE_MAX - AGE_MIN)


def encode_onehot(value: str, vocabulary: Sequence[str]) -> np.ndarray:
    try:
        idx = list(vocabulary).index(value)
    except ValueError:
        raise UnknownValue(f"{value!r} not in {tuple(vocabulary)}") from None
    out = np.zeros(len(vocabulary), dtype=np.float64)
    out[idx] = 1.0
    return out


def assemble(record: EhrRecord, spec: FeatureGroupSpec) -> np.ndarray:
    parts = []
    for feat in spec.features:
        if feat == "age":
            parts.append(np.array([encode_age(record.age)]))
        else:
            parts.append(encode_onehot(getattr(record, _RECORD_ATTR[feat]), VOCABULARIES[feat]))
    return np.concatenate(parts)


def assemble_batch(records: Sequence[EhrRecord], spec: FeatureGroupSpec) -> np.ndarray:
    return np.stack([assemble(r, spec) for r in records]) if records else np.zeros((0, spec.dim))
