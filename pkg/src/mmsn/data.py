"""Samples, manifests, patient-level splits and a synthetic CXR+EHR generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import (
    AgeOutOfRange,
    DuplicateSampleId,
    EmptyResult,
    InvalidEnumValue,
    InvalidSize,
    MissingColumn,
    TooFewPatients,
)

CONDITIONS = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "Pleural Effusion",
    "Pneumonia",
    "Pneumothorax",
    "Pleural Other",
    "Support Devices",
    "No Finding",
)
N_LABELS = len(CONDITIONS)

AGE_MIN, AGE_MAX = 18, 100
SEX_VALUES = ("Male", "Female")
VIEW_VALUES = ("AP", "L", "PA", "LL")
POSITION_VALUES = ("Erect", "Recumbent")
BINARY_VALUES = ("Negative", "Positive")

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.80, 0.05, 0.15)

MANIFEST_COLUMNS = (
    "sample_id",
    "patient_id",
    "image_path",
    "age",
    "sex",
    "view",
    "position",
    "icu",
    "mortality",
) + tuple(f"l{i}" for i in range(N_LABELS))

# synthetic generator: which label indices are tied to what
COUPLED_LABEL = 3  # Edema := texture AND icu in ehr_coupled mode
DEVICE_LABEL = 12  # Support Devices <=> visible line motif
NO_FINDING = 13


@dataclass(frozen=True)
class LabelVector:
    values: tuple[int, ...]

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        if len(vals) != N_LABELS:
            raise ValueError(f"label vector must have {N_LABELS} entries, got {len(vals)}")
        if any(v not in (0, 1) for v in vals):
            raise ValueError(f"label entries must be 0/1, got {vals}")
        object.__setattr__(self, "values", vals)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.int64)

    def __getitem__(self, idx: int) -> int:
        return self.values[idx]


@dataclass(frozen=True)
class EhrRecord:
    age: int
    sex: str
    view: str
    position: str
    icu_admission: str
    in_hospital_mortality: str

    def __post_init__(self):
        validate_ehr(self)


def validate_ehr(rec: EhrRecord, row: int = -1) -> None:
    if isinstance(rec.age, bool) or int(rec.age) != rec.age or not AGE_MIN <= rec.age <= AGE_MAX:
        raise AgeOutOfRange(rec.age, row if row >= 0 else None)
    for name, vocab in (
        ("sex", SEX_VALUES),
        ("view", VIEW_VALUES),
        ("position", POSITION_VALUES),
        ("icu_admission", BINARY_VALUES),
        ("in_hospital_mortality", BINARY_VALUES),
    ):
        value = getattr(rec, name)
        if value not in vocab:
            raise InvalidEnumValue(row, name, value)


@dataclass(frozen=True)
class Sample:
    """One image paired with its EHR record and 14 binary labels.

    ``image`` holds the pixels in memory (h x w floats in [0, 1]); samples read
    from a manifest carry ``image_path`` instead and load lazily.
    """

    sample_id: str
    patient_id: str
    ehr: EhrRecord
    labels: LabelVector
    image: np.ndarray | None = field(default=None, compare=False, repr=False)
    image_path: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")

    def pixels(self, root: str | Path | None = None) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise FileNotFoundError(f"sample {self.sample_id} has neither pixels nor a path")
        path = Path(self.image_path)
        if not path.is_absolute() and root is not None:
            path = Path(root) / path
        return load_image(path)


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[Sample, ...]
    split: str = "train"
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        seen: set[str] = set()
        for s in self.samples:
            if s.sample_id in seen:
                raise DuplicateSampleId(f"sample_id {s.sample_id!r} appears twice")
            seen.add(s.sample_id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, idx: int) -> Sample:
        return self.samples[idx]

    @property
    def patient_ids(self) -> set[str]:
        return {s.patient_id for s in self.samples}

    def image(self, idx: int) -> np.ndarray:
        return self.samples[idx].pixels(self.root)

    def labels(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, N_LABELS), dtype=np.int64)
        return np.stack([s.labels.as_array() for s in self.samples])


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def save_image(image: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------- manifests


def _parse_row(row: dict, rownum: int) -> Sample:
    try:
        age = int(row["age"])
    except (TypeError, ValueError):
        raise InvalidEnumValue(rownum, "age", row["age"]) from None
    if not AGE_MIN <= age <= AGE_MAX:
        raise AgeOutOfRange(age, rownum)
    ehr_fields = {
        "sex": (row["sex"], SEX_VALUES),
        "view": (row["view"], VIEW_VALUES),
        "position": (row["position"], POSITION_VALUES),
        "icu": (row["icu"], BINARY_VALUES),
        "mortality": (row["mortality"], BINARY_VALUES),
    }
    for name, (value, vocab) in ehr_fields.items():
        if value not in vocab:
            raise InvalidEnumValue(rownum, name, value)
    labels = []
    for i in range(N_LABELS):
        raw = row[f"l{i}"].strip()
        if raw not in ("0", "1"):
            raise InvalidEnumValue(rownum, f"l{i}", raw)
        labels.append(int(raw))
    if not row["patient_id"]:
        raise InvalidEnumValue(rownum, "patient_id", row["patient_id"])
    ehr = EhrRecord(
        age=age,
        sex=row["sex"],
        view=row["view"],
        position=row["position"],
        icu_admission=row["icu"],
        in_hospital_mortality=row["mortality"],
    )
    return Sample(
        sample_id=row["sample_id"],
        patient_id=row["patient_id"],
        ehr=ehr,
        labels=LabelVector(tuple(labels)),
        image_path=row["image_path"],
    )


def load_manifest(path: str | Path, split: str | None = None) -> DatasetManifest:
    """Read and validate a manifest CSV.

    The split defaults to the file stem when it names one (``train.csv``),
    otherwise ``train``. Relative image paths resolve against the CSV's folder.
    """
    path = Path(path)
    if split is None:
        split = path.stem if path.stem in SPLITS else "train"
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"{path}: missing columns {missing}")
        samples = [_parse_row(row, i) for i, row in enumerate(reader, start=1)]
    return DatasetManifest(tuple(samples), split=split, root=path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path, image_dir: str = "images") -> Path:
    """Write ``manifest`` as CSV, dumping in-memory images as 8-bit PNGs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in manifest:
        rel = s.image_path
        if rel is None or s.image is not None:
            rel = f"{image_dir}/{s.sample_id}.png"
            target = path.parent / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            save_image(s.pixels(manifest.root), target)
        e = s.ehr
        rows.append(
            [s.sample_id, s.patient_id, rel, e.age, e.sex, e.view, e.position,
             e.icu_admission, e.in_hospital_mortality, *s.labels.values]
        )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return path


def split_by_patient(
    samples: Sequence[Sample],
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Assign whole patients to train/val/test.

    Patient counts per split use largest-remainder rounding, and every split
    with a positive fraction receives at least one patient.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    patients = sorted({s.patient_id for s in samples})
    n = len(patients)
    if n < 3:
        raise TooFewPatients(f"need at least 3 distinct patients, got {n}")

    raw = [f * n for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i in range(3):
        if fractions[i] > 0 and counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1

    rng = np.random.default_rng(seed)
    shuffled = [patients[i] for i in rng.permutation(n)]
    assignment: dict[str, str] = {}
    start = 0
    for split, c in zip(SPLITS, counts):
        for pid in shuffled[start : start + c]:
            assignment[pid] = split
        start += c

    buckets: dict[str, list[Sample]] = {s: [] for s in SPLITS}
    for s in samples:
        buckets[assignment[s.patient_id]].append(s)
    return tuple(DatasetManifest(tuple(buckets[s]), split=s) for s in SPLITS)  # type: ignore[return-value]


def subsample_fraction(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Uniformly draw ceil(fraction * N) samples without replacement."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n_total = len(manifest)
    # round first so 0.07 * 100 does not ceil to 8
    n_keep = math.ceil(round(fraction * n_total, 9))
    if n_keep == 0:
        raise EmptyResult(f"fraction {fraction} of {n_total} samples is empty")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n_total, size=n_keep, replace=False))
    return replace(manifest, samples=tuple(manifest.samples[i] for i in idx))


# ---------------------------------------------------------------- synthetic data

# rough prevalence of each condition among synthetic images
LABEL_PRIORS = np.array(
    [0.20, 0.20, 0.05, 0.12, 0.03, 0.02, 0.03, 0.22, 0.24, 0.07, 0.04, 0.01, 0.29, 0.0]
)
# qualitative EHR frequencies: AP most common view, few lateral-left scans, etc.
VIEW_PROBS = (0.55, 0.17, 0.26, 0.02)
POSITION_PROBS = (0.62, 0.38)
MALE_PROB = 0.53
ICU_PROB = 0.45
MORTALITY_PROB = 0.10
TEXTURE_PROB = 0.5


def _gauss(yy, xx, cy, cx, sy, sx):
    return np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2) / 2)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 0.55 - 0.25 * _gauss(yy, xx, 0.5, 0.3, 0.22, 0.12) - 0.25 * _gauss(yy, xx, 0.5, 0.7, 0.22, 0.12)
    for _ in range(4):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        s = rng.uniform(0.04, 0.12)
        img += rng.uniform(-0.08, 0.08) * _gauss(yy, xx, cy, cx, s, s)
    img += rng.normal(0.0, 0.02, size=(size, size))
    return img


def _patch_slot(rng: np.random.Generator, size: int, p: int) -> tuple[int, int]:
    margin = size // 8
    y = int(rng.integers(margin, size - margin - p + 1))
    x = int(rng.integers(margin, size - margin - p + 1))
    return y, x


def _plant_texture(img, rng, size):
    p = max(size // 3, 8)
    y, x = _patch_slot(rng, size, p)
    yy, xx = np.mgrid[0:p, 0:p]
    checker = ((yy // 4 + xx // 4) % 2) * 2.0 - 1.0
    img[y : y + p, x : x + p] += 0.4 * checker


def _plant_bar(img, rng, size):
    p = max(size // 4, 8)
    y, x = _patch_slot(rng, size, p)
    img[y + p // 3 : y + 2 * p // 3, x : x + p] += 0.35


def _plant_ring(img, rng, size):
    p = max(size // 4, 8)
    y, x = _patch_slot(rng, size, p)
    yy, xx = np.mgrid[0:p, 0:p] - (p - 1) / 2
    r = np.sqrt(yy**2 + xx**2)
    img[y : y + p, x : x + p] += 0.35 * ((r > p * 0.28) & (r < p * 0.45))


def _plant_band(img, rng, size):
    h = max(size // 8, 4)
    img[size - size // 6 - h : size - size // 6, size // 8 : size - size // 8] += 0.3


def _plant_device(img, rng, size):
    x0 = int(rng.integers(size // 3, 2 * size // 3))
    w = max(size // 16, 2)
    img[size // 12 : size - size // 12, x0 : x0 + w] = 0.97


# labels rendered into the image in both modes
_LABEL_MOTIFS = {0: _plant_bar, 1: _plant_ring, 8: _plant_band}


def generate_synthetic_dataset(
    n_patients: int,
    images_per_patient: int,
    image_size: int = 128,
    label_model: str = "independent",
    seed: int = 0,
    with_latents: bool = False,
):
    """Procedural grayscale "radiographs" with planted, label-bearing motifs.

    Labels 0, 1 and 8 always draw a matching motif (bar, ring, basal band).
    Support Devices (label 12) draws a bright vertical line. In ``ehr_coupled``
    mode the line appears exactly for ICU patients and label 3 is
    ``texture AND icu == Positive`` where the texture is a planted checkerboard
    patch; in ``independent`` mode both follow their priors with the texture
    drawn whenever label 3 is on. No Finding is set iff no other label is.

    Each patient draws from its own seed stream, so output does not depend on
    call order or threading. Pixels are quantized to 1/255 so an 8-bit PNG
    round trip is lossless.

    With ``with_latents`` the hidden per-sample draws (``texture``, ``device``)
    are returned alongside the samples as a list of dicts.
    """
    if image_size < 96:
        raise InvalidSize(f"image_size must be >= 96, got {image_size}")
    if n_patients < 1 or images_per_patient < 1:
        raise InvalidSize("n_patients and images_per_patient must be >= 1")
    if label_model not in ("independent", "ehr_coupled"):
        raise ValueError(f"unknown label_model {label_model!r}")
    coupled = label_model == "ehr_coupled"

    samples = []
    latents = []
    for p in range(n_patients):
        rng = np.random.default_rng(np.random.SeedSequence([seed, p]))
        pid = f"p{p:05d}"
        base_age = int(np.clip(np.rint(rng.normal(62, 17)), AGE_MIN, AGE_MAX))
        sex = "Male" if rng.random() < MALE_PROB else "Female"
        icu = "Positive" if rng.random() < ICU_PROB else "Negative"
        mort = "Positive" if rng.random() < MORTALITY_PROB else "Negative"
        for k in range(images_per_patient):
            age = min(base_age + int(rng.integers(0, 2)), AGE_MAX)
            view = VIEW_VALUES[int(rng.choice(4, p=VIEW_PROBS))]
            position = POSITION_VALUES[int(rng.choice(2, p=POSITION_PROBS))]
            labels = (rng.random(N_LABELS) < LABEL_PRIORS).astype(int)
            if coupled:
                texture = bool(rng.random() < TEXTURE_PROB)
                labels[DEVICE_LABEL] = int(icu == "Positive")
                labels[COUPLED_LABEL] = int(texture and icu == "Positive")
            else:
                texture = bool(labels[COUPLED_LABEL])
            labels[NO_FINDING] = int(not labels[:NO_FINDING].any())

            img = _background(rng, image_size)
            for idx, plant in _LABEL_MOTIFS.items():
                if labels[idx]:
                    plant(img, rng, image_size)
            if texture:
                _plant_texture(img, rng, image_size)
            if labels[DEVICE_LABEL]:
                _plant_device(img, rng, image_size)
            img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0

            ehr = EhrRecord(age, sex, view, position, icu, mort)
            latents.append({"texture": texture, "device": bool(labels[DEVICE_LABEL])})
            samples.append(
                Sample(
                    sample_id=f"{pid}_{k:03d}",
                    patient_id=pid,
                    ehr=ehr,
                    labels=LabelVector(tuple(int(v) for v in labels)),
                    image=img,
                )
            )
    return (samples, latents) if with_latents else samples
