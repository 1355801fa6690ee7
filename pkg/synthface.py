"""
Synthetic stand-in for a multi-group face dataset.

Every subject owns a unit identity vector u. Rendering projects u through a
dataset-wide matrix P into a 16x16 spatial pattern centred on mid-grey, then
applies its group transform: a per-group affine intensity map, a fixed
per-group texture mask and Gaussian pixel noise. Identity therefore lives in
the spatial pattern and the group in global intensity/texture statistics.
"""

import functools
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, field_validator

from artifacts import PathLike, csv_text, json_text, read_csv, write_atomic
from errors import ArtifactError, DataError
from numgrad import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

IMAGE_SIDE = 16
N_PIXELS = IMAGE_SIDE * IMAGE_SIDE
IDENTITY_DIM = 8
BASE_LEVEL = 0.5
PROJECTION_STD = 0.1
TEXTURE_WEIGHT = 0.15
NOISE_SIGMA = 0.05
DEFAULT_PROJECTION_SEED = 1234
DEFAULT_MASK_SEED = 4321


class GroupLabel(str, Enum):
    A = "A"
    E = "E"
    C = "C"
    I = "I"

    @property
    def index(self) -> int:
        return _ORDER[self.value]

    @property
    def full_name(self) -> str:
        return GROUP_NAMES[self]

    def __lt__(self, other):
        return self.index < GroupLabel(other).index

    def __le__(self, other):
        return self.index <= GroupLabel(other).index

    def __gt__(self, other):
        return self.index > GroupLabel(other).index

    def __ge__(self, other):
        return self.index >= GroupLabel(other).index

    def __str__(self):
        return self.value


_ORDER = {"A": 0, "E": 1, "C": 2, "I": 3}
GROUPS = (GroupLabel.A, GroupLabel.E, GroupLabel.C, GroupLabel.I)
GROUP_NAMES = {
    GroupLabel.A: "african",
    GroupLabel.E: "asian",
    GroupLabel.C: "caucasian",
    GroupLabel.I: "indian",
}
# (gain, bias) of the affine intensity map
GROUP_INTENSITY = {
    GroupLabel.A: (0.6, 0.05),
    GroupLabel.E: (0.8, 0.15),
    GroupLabel.C: (1.0, 0.30),
    GroupLabel.I: (0.8, 0.05),
}


def parse_group(value) -> GroupLabel:
    if isinstance(value, GroupLabel):
        return value
    text = str(value).strip()
    if text.upper() in _ORDER:
        return GroupLabel(text.upper())
    for group, name in GROUP_NAMES.items():
        if text.lower() == name:
            return group
    raise DataError(f"Unknown group '{value}'", {"group": value})


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@functools.lru_cache(maxsize=8)
def identity_projection(seed: int = DEFAULT_PROJECTION_SEED) -> np.ndarray:
    rng = np.random.default_rng([seed, 17])
    projection = rng.normal(0.0, PROJECTION_STD, (N_PIXELS, IDENTITY_DIM))
    projection.setflags(write=False)
    return projection


@functools.lru_cache(maxsize=32)
def texture_mask(group: GroupLabel, seed: int = DEFAULT_MASK_SEED) -> np.ndarray:
    rng = np.random.default_rng([seed, 1000 + parse_group(group).index])
    mask = rng.uniform(-1.0, 1.0, (IMAGE_SIDE, IMAGE_SIDE))
    mask = mask - mask.mean()
    mask.setflags(write=False)
    return mask


@dataclass(frozen=True, eq=False)
class SubjectLatent:
    subject_id: int
    u: np.ndarray
    group: GroupLabel


@dataclass(frozen=True, eq=False)
class Sample:
    pixels: np.ndarray
    sample_id: int
    subject_id: int
    group: GroupLabel
    render_seed: int
    source_group: Optional[GroupLabel] = None
    parent_id: Optional[int] = None

    @property
    def is_synthesized(self) -> bool:
        return self.source_group is not None

    @property
    def provenance(self) -> str:
        return "synthesized" if self.is_synthesized else "original"

    @property
    def home_group(self) -> GroupLabel:
        return self.source_group if self.is_synthesized else self.group

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(N_PIXELS)


def make_subject(
    seed: int, group: GroupLabel, subject_id: Optional[int] = None
) -> SubjectLatent:
    group = parse_group(group)
    rng = np.random.default_rng([int(seed), group.index])
    u = rng.standard_normal(IDENTITY_DIM)
    u = u / np.linalg.norm(u)
    if subject_id is None:
        subject_id = seed
    return SubjectLatent(subject_id=subject_id, u=u, group=group)


def identity_pattern(
    subject: SubjectLatent, projection: Optional[np.ndarray] = None
) -> np.ndarray:
    projection = identity_projection() if projection is None else projection
    return (projection @ subject.u).reshape(IMAGE_SIDE, IMAGE_SIDE)


def render_image(
    subject: SubjectLatent,
    group: GroupLabel,
    noise_seed: int,
    *,
    projection: Optional[np.ndarray] = None,
    noise_sigma: float = NOISE_SIGMA,
    mask_seed: int = DEFAULT_MASK_SEED,
    sample_id: int = 0,
) -> Sample:
    group = parse_group(group)
    gain, bias = GROUP_INTENSITY[group]
    pixels = gain * (BASE_LEVEL + identity_pattern(subject, projection)) + bias
    pixels = pixels + TEXTURE_WEIGHT * texture_mask(group, mask_seed)
    if noise_sigma > 0:
        rng = np.random.default_rng(noise_seed)
        pixels = pixels + rng.normal(0.0, noise_sigma, pixels.shape)
    return Sample(
        pixels=np.clip(pixels, 0.0, 1.0),
        sample_id=sample_id,
        subject_id=subject.subject_id,
        group=group,
        render_seed=int(noise_seed),
    )


def decode_identity(
    pixels: np.ndarray,
    group: GroupLabel,
    projection: Optional[np.ndarray] = None,
    mask_seed: int = DEFAULT_MASK_SEED,
) -> np.ndarray:
    """Least-squares estimate of u from rendered pixels (pseudo-inverse of P)."""
    group = parse_group(group)
    projection = identity_projection() if projection is None else projection
    gain, bias = GROUP_INTENSITY[group]
    pattern = (pixels - bias - TEXTURE_WEIGHT * texture_mask(group, mask_seed)) / gain
    return np.linalg.pinv(projection) @ (pattern.reshape(N_PIXELS) - BASE_LEVEL)


def group_features(
    pixels: np.ndarray, mask_seed: int = DEFAULT_MASK_SEED
) -> np.ndarray:
    """
    Mean intensity followed by the Pearson correlation with each group's
    texture mask, for a batch of images shaped (N, 16, 16) or (N, 256).
    Constant images get zero correlations.
    """
    images = np.asarray(pixels, dtype=np.float64).reshape(-1, N_PIXELS)
    centred = images - images.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centred, axis=1)
    features = [images.mean(axis=1)]
    for group in GROUPS:
        mask = texture_mask(group, mask_seed).reshape(N_PIXELS)
        mask = mask / np.linalg.norm(mask)
        corr = np.zeros(len(images))
        nonzero = norms > 0
        corr[nonzero] = (centred[nonzero] @ mask) / norms[nonzero]
        features.append(corr)
    return np.stack(features, axis=1)


class GenerationConfig(BaseModel):
    subjects_per_group: Dict[GroupLabel, int]
    images_per_subject: int = Field(4, ge=1)
    seed: int = Field(0, ge=0)
    split: Literal["train", "verification"] = "train"
    id_offset: int = Field(0, ge=0)
    noise_sigma: float = Field(NOISE_SIGMA, ge=0.0)
    projection_seed: int = Field(DEFAULT_PROJECTION_SEED, ge=0)

    @field_validator("subjects_per_group")
    @classmethod
    def _every_group_counted(cls, counts: Dict[GroupLabel, int]):
        missing = [g.value for g in GROUPS if g not in counts]
        if missing:
            raise ValueError(f"missing subject counts for groups {missing}")
        zero = [g.value for g, n in counts.items() if n < 1]
        if zero:
            raise ValueError(f"subject counts must be >= 1 (groups {zero})")
        return {g: counts[g] for g in GROUPS}

    @classmethod
    def balanced(cls, subjects: int, images: int, **kwargs) -> "GenerationConfig":
        return cls(
            subjects_per_group={g: subjects for g in GROUPS},
            images_per_subject=images,
            **kwargs,
        )


@dataclass
class DomainDataset:
    samples: List[Sample]
    split: str = "train"
    _by_id: Dict[int, Sample] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_id = {}
        homes: Dict[int, GroupLabel] = {}
        for sample in self.samples:
            if sample.sample_id in self._by_id:
                raise DataError(
                    f"Duplicate sample id {sample.sample_id}",
                    {"sample_id": sample.sample_id},
                )
            self._by_id[sample.sample_id] = sample
            home = homes.setdefault(sample.subject_id, sample.home_group)
            if home != sample.home_group:
                raise DataError(
                    f"Subject {sample.subject_id} appears with home groups "
                    f"{home} and {sample.home_group}",
                    {"subject_id": sample.subject_id},
                )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, sample_id: int) -> Sample:
        return self._by_id[sample_id]

    @property
    def subjects_per_group(self) -> Dict[GroupLabel, int]:
        subjects = {g: set() for g in GROUPS}
        for sample in self.samples:
            subjects[sample.home_group].add(sample.subject_id)
        return {g: len(ids) for g, ids in subjects.items()}

    @property
    def samples_per_group(self) -> Dict[GroupLabel, int]:
        counts = {g: 0 for g in GROUPS}
        for sample in self.samples:
            counts[sample.home_group] += 1
        return counts

    @property
    def images_per_subject(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for sample in self.samples:
            counts[sample.subject_id] = counts.get(sample.subject_id, 0) + 1
        return dict(sorted(counts.items()))

    def subject_ids(self) -> List[int]:
        return sorted({s.subject_id for s in self.samples})

    def in_group(self, group: GroupLabel, original_only: bool = False) -> List[Sample]:
        group = parse_group(group)
        return [
            s
            for s in self.samples
            if s.group == group and not (original_only and s.is_synthesized)
        ]

    def originals(self) -> "DomainDataset":
        originals = [s for s in self.samples if not s.is_synthesized]
        return DomainDataset(originals, self.split)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.split.encode())
        for s in self.samples:
            source = s.source_group.value if s.source_group else ""
            digest.update(
                f"{s.sample_id},{s.subject_id},{s.group.value},"
                f"{source},{s.render_seed};".encode()
            )
            digest.update(np.ascontiguousarray(s.pixels, dtype="<f8").tobytes())
        return digest.hexdigest()


def pixel_matrix(samples: Sequence[Sample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, N_PIXELS))
    return np.stack([s.flat() for s in samples])


def build_dataset(cfg: GenerationConfig) -> DomainDataset:
    projection = identity_projection(cfg.projection_seed)
    samples: List[Sample] = []
    subject_id = cfg.id_offset
    for group in GROUPS:
        for _ in range(cfg.subjects_per_group[group]):
            subject = make_subject(derive_seed(cfg.seed, subject_id), group, subject_id)
            for k in range(cfg.images_per_subject):
                samples.append(
                    render_image(
                        subject,
                        group,
                        derive_seed(cfg.seed, subject_id, k),
                        projection=projection,
                        noise_sigma=cfg.noise_sigma,
                        sample_id=len(samples),
                    )
                )
            subject_id += 1
    logger.debug("Built %s dataset with %d samples", cfg.split, len(samples))
    return DomainDataset(samples, split=cfg.split)


SAMPLES_CSV_HEADER = [
    "sample_id",
    "subject_id",
    "group",
    "provenance",
    "source_group",
    "render_seed",
]


def export_dataset(dataset: DomainDataset, directory: PathLike) -> List[Path]:
    directory = Path(directory)
    pixels = (
        np.stack([s.pixels for s in dataset.samples])
        if dataset.samples
        else np.zeros((0, IMAGE_SIDE, IMAGE_SIDE))
    )
    parents = np.array(
        [-1 if s.parent_id is None else s.parent_id for s in dataset.samples],
        dtype=np.float64,
    )
    save_checkpoint(directory / "pixels.ftns", {"pixels": pixels, "parent_id": parents})
    rows = [
        [
            s.sample_id,
            s.subject_id,
            s.group.value,
            s.provenance,
            s.source_group.value if s.source_group else "",
            s.render_seed,
        ]
        for s in dataset.samples
    ]
    write_atomic(directory / "samples.csv", csv_text(SAMPLES_CSV_HEADER, rows))
    write_atomic(
        directory / "dataset.json",
        json_text(
            {
                "split": dataset.split,
                "samples": len(dataset),
                "fingerprint": dataset.fingerprint(),
            }
        ),
    )
    return [
        directory / "pixels.ftns",
        directory / "samples.csv",
        directory / "dataset.json",
    ]


def load_dataset(directory: PathLike) -> DomainDataset:
    directory = Path(directory)
    for name in ("pixels.ftns", "samples.csv", "dataset.json"):
        if not (directory / name).exists():
            raise ArtifactError(
                f"Dataset file missing: {directory / name}",
                {"path": str(directory / name)},
            )
    blocks = load_checkpoint(directory / "pixels.ftns")
    rows = read_csv(directory / "samples.csv")
    meta = json.loads((directory / "dataset.json").read_text())
    if len(rows) != len(blocks["pixels"]):
        raise ArtifactError(
            "samples.csv and pixels.ftns disagree on the sample count",
            {"rows": len(rows), "pixels": len(blocks["pixels"])},
        )
    samples = []
    for row, pixels, parent in zip(rows, blocks["pixels"], blocks["parent_id"]):
        source = row["source_group"]
        samples.append(
            Sample(
                pixels=pixels.copy(),
                sample_id=int(row["sample_id"]),
                subject_id=int(row["subject_id"]),
                group=parse_group(row["group"]),
                render_seed=int(row["render_seed"]),
                source_group=parse_group(source) if source else None,
                parent_id=None if parent < 0 else int(parent),
            )
        )
    dataset = DomainDataset(samples, split=meta["split"])
    if dataset.fingerprint() != meta["fingerprint"]:
        raise ArtifactError(
            f"Dataset fingerprint mismatch in {directory}", {"path": str(directory)}
        )
    return dataset


def with_provenance(sample: Sample, pixels: np.ndarray, target: GroupLabel) -> Sample:
    """Copy of an original sample re-labelled as synthesized into `target`."""
    return replace(
        sample,
        pixels=pixels,
        group=target,
        source_group=sample.group,
        parent_id=sample.sample_id,
    )
