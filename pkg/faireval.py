"""
Verification-protocol evaluation and per-group fairness statistics.

Accuracy follows the k-fold threshold protocol: for each fold the threshold
that maximizes accuracy on the remaining folds is applied to the held-out
fold. Candidate thresholds are the midpoints between adjacent distinct
similarity values plus one sentinel below the minimum and one above the
maximum, so the scan is exact for a threshold classifier.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import KFold
from sklearn.pipeline import Pipeline
from sklearn.preprocessing import StandardScaler

from artifacts import csv_text
from errors import DataError, DomainError
from synthface import (
    DEFAULT_MASK_SEED,
    GROUP_NAMES,
    GROUPS,
    DomainDataset,
    GroupLabel,
    Sample,
    derive_seed,
    group_features,
    parse_group,
    pixel_matrix,
)

logger = logging.getLogger(__name__)

GROUP_COLUMNS = [GROUP_NAMES[g] for g in GROUPS]
REPORT_CSV_HEADER = ["loss", "dataset"] + GROUP_COLUMNS + ["avg", "stdv"]
TRANSFER_CSV_HEADER = ["mapping", "success_rate"]


def _result(per_group, avg, stdv, lfw=None):
    return {"per_group": per_group, "avg": avg, "stdv": stdv, "lfw": lfw}


# Per-group verification accuracies (%) reported for the full-scale system,
# keyed by (table, loss, training set). "lfw" is the mixed-population score.
REFERENCE_RESULTS: Dict[Tuple[str, str, str], Dict] = {
    ("balanced", "softmax", "VGGFace2 1200"): _result(
        (69.10, 73.70, 79.25, 76.78), 74.71, 4.37, 96.13
    ),
    ("balanced", "softmax", "VGGFace2 1200 Races"): _result(
        (70.65, 75.68, 80.27, 78.28), 76.22, 4.16, 96.27
    ),
    ("balanced", "cosface", "VGGFace2 1200"): _result(
        (82.78, 82.68, 87.53, 85.41), 84.60, 2.33, 98.16
    ),
    ("balanced", "cosface", "VGGFace2 1200 Races"): _result(
        (83.22, 83.23, 87.95, 85.77), 85.04, 2.28, 98.65
    ),
    ("balanced", "arcface", "VGGFace2 1200"): _result(
        (80.91, 81.78, 86.86, 83.70), 83.31, 2.64, 98.16
    ),
    ("balanced", "arcface", "VGGFace2 1200 Races"): _result(
        (81.28, 82.83, 85.95, 84.72), 83.69, 2.06, 98.63
    ),
    # The STDV figures of this pair match neither the n-1 nor the n convention.
    ("imbalanced", "arcface", "VGGFace2"): _result(
        (89.45, 87.61, 94.71, 91.21), 90.75, 2.91, 99.51
    ),
    ("imbalanced", "arcface", "VGGFace2 8631 Races"): _result(
        (90.10, 87.73, 93.72, 90.50), 90.51, 2.45, 99.51
    ),
    ("downsampled", "softmax", "balanced 1000"): _result(
        (67.95, 73.5, 77.77, 75.78), 73.75, 4.24
    ),
    ("downsampled", "cosface", "balanced 1000"): _result(
        (77.15, 78.0, 82.8, 80.42), 79.59, 2.55
    ),
    ("downsampled", "arcface", "balanced 1000"): _result(
        (74.75, 77.63, 83.18, 80.97), 79.13, 3.71
    ),
}


@dataclass(frozen=True)
class VerificationPair:
    a: int
    b: int
    same: bool
    group: GroupLabel


class EvaluationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_pos: int = Field(300, ge=1)
    n_neg: int = Field(300, ge=1)
    folds: int = Field(10, ge=2)
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)


def make_pairs(
    dataset: DomainDataset,
    group: GroupLabel,
    n_pos: int = 300,
    n_neg: int = 300,
    seed: int = 0,
) -> List[VerificationPair]:
    """Sample same- and different-subject pairs of original images in one group."""
    group = parse_group(group)
    samples = sorted(
        dataset.in_group(group, original_only=True), key=lambda s: s.sample_id
    )
    per_subject: Dict[int, int] = {}
    for s in samples:
        per_subject[s.subject_id] = per_subject.get(s.subject_id, 0) + 1
    eligible = sum(1 for n in per_subject.values() if n >= 2)
    if eligible < 2:
        raise DataError(
            f"Group {group} needs at least 2 subjects with 2+ images, has {eligible}",
            {
                "group": group.value,
                "required_subjects": 2,
                "available_subjects": eligible,
            },
        )

    ids = np.array([s.sample_id for s in samples])
    subjects = np.array([s.subject_id for s in samples])
    i, j = np.triu_indices(len(samples), k=1)
    same = subjects[i] == subjects[j]
    pos, neg = np.flatnonzero(same), np.flatnonzero(~same)
    if n_pos > len(pos) or n_neg > len(neg):
        raise DataError(
            f"Group {group} cannot supply {n_pos} positive and {n_neg} negative pairs",
            {
                "group": group.value,
                "required_pos": n_pos,
                "available_pos": int(len(pos)),
                "required_neg": n_neg,
                "available_neg": int(len(neg)),
            },
        )
    rng = np.random.default_rng(seed)
    chosen = np.concatenate(
        [rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)]
    )
    chosen = chosen[rng.permutation(len(chosen))]
    return [
        VerificationPair(int(ids[i[k]]), int(ids[j[k]]), bool(same[k]), group)
        for k in chosen
    ]


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    return np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)


def _stack(embeddings: Mapping[int, np.ndarray], ids: Sequence[int]) -> np.ndarray:
    return np.stack([np.asarray(embeddings[i], dtype=np.float64) for i in ids])


def pair_similarities(
    embeddings: Mapping[int, np.ndarray], pairs: Sequence[VerificationPair]
) -> np.ndarray:
    """Cosine similarity per pair; a zero embedding scores 0 against everything."""
    ids = {p.a for p in pairs} | {p.b for p in pairs}
    missing = sorted(ids - set(embeddings))
    if missing:
        raise DataError(
            f"{len(missing)} paired samples have no embedding",
            {"sample_ids": missing[:10]},
        )
    a = _unit_rows(_stack(embeddings, [p.a for p in pairs]))
    b = _unit_rows(_stack(embeddings, [p.b for p in pairs]))
    return np.sum(a * b, axis=1)


def candidate_thresholds(similarities: np.ndarray) -> np.ndarray:
    values = np.unique(similarities)
    midpoints = (values[:-1] + values[1:]) / 2.0
    return np.concatenate([[values[0] - 1.0], midpoints, [values[-1] + 1.0]])


def best_threshold(similarities: np.ndarray, labels: np.ndarray) -> float:
    """Best threshold for 'same if similarity > t'; ties go to the smallest t."""
    candidates = candidate_thresholds(similarities)
    predictions = similarities[None, :] > candidates[:, None]
    accuracy = np.mean(predictions == labels[None, :], axis=1)
    return float(candidates[int(np.argmax(accuracy))])


def threshold_accuracy(similarities, labels, folds: int = 10) -> float:
    similarities = np.asarray(similarities, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if folds < 2:
        raise DomainError("Verification needs at least 2 folds", {"folds": folds})
    if len(similarities) < folds:
        raise DataError(
            f"{len(similarities)} pairs cannot be split into {folds} folds",
            {"pairs": len(similarities), "folds": folds},
        )
    usable = len(similarities) - len(similarities) % folds
    if usable < len(similarities):
        logger.warning(
            "Truncating %d pairs to %d so they split evenly into %d folds",
            len(similarities),
            usable,
            folds,
        )
        similarities, labels = similarities[:usable], labels[:usable]

    held_out = []
    for train, test in KFold(n_splits=folds, shuffle=False).split(similarities):
        threshold = best_threshold(similarities[train], labels[train])
        held_out.append(np.mean((similarities[test] > threshold) == labels[test]))
    return float(np.mean(held_out) * 100.0)


def verify_accuracy(
    embeddings: Mapping[int, np.ndarray],
    pairs: Sequence[VerificationPair],
    folds: int = 10,
) -> float:
    """k-fold verification accuracy (%) on cosine similarity of unit embeddings."""
    if len(pairs) < folds:
        raise DataError(
            f"{len(pairs)} pairs cannot be split into {folds} folds",
            {"pairs": len(pairs), "folds": folds},
        )
    labels = np.array([p.same for p in pairs], dtype=bool)
    return threshold_accuracy(pair_similarities(embeddings, pairs), labels, folds)


class GroupReport(BaseModel):
    accuracies: Dict[GroupLabel, float]
    avg: float
    stdv: float
    loss: str = ""
    dataset: str = ""
    fingerprint: str = ""
    seed: int = 0
    pooled: Optional[float] = None

    def accuracy(self, group: GroupLabel) -> float:
        return self.accuracies[parse_group(group)]

    def csv_row(self) -> List[str]:
        return (
            [self.loss, self.dataset]
            + [f"{self.accuracies[g]:.2f}" for g in GROUPS]
            + [f"{self.avg:.2f}", f"{self.stdv:.2f}"]
        )


def group_report(
    per_group_accuracies: Union[Mapping[GroupLabel, float], Sequence[float]],
    loss: str = "",
    dataset: str = "",
    fingerprint: str = "",
    seed: int = 0,
    pooled: Optional[float] = None,
) -> GroupReport:
    """Average and sample (n-1) standard deviation of the group accuracies, 2 dp."""
    if isinstance(per_group_accuracies, Mapping):
        accuracies = {parse_group(g): float(v) for g, v in per_group_accuracies.items()}
        if set(accuracies) != set(GROUPS):
            raise DataError(
                "A report needs one accuracy per group",
                {"groups": sorted(g.value for g in accuracies)},
            )
    else:
        values = [float(v) for v in per_group_accuracies]
        if len(values) != len(GROUPS):
            raise DataError("A report needs four accuracies", {"count": len(values)})
        accuracies = dict(zip(GROUPS, values))
    values = np.array([accuracies[g] for g in GROUPS])
    if np.any(values < 0) or np.any(values > 100):
        raise DataError("Accuracies must lie in [0, 100]", {"values": values.tolist()})
    return GroupReport(
        accuracies={g: accuracies[g] for g in GROUPS},
        avg=round(float(np.mean(values)), 2),
        stdv=round(float(np.std(values, ddof=1)), 2),
        loss=loss,
        dataset=dataset,
        fingerprint=fingerprint,
        seed=seed,
        pooled=pooled,
    )


def evaluate_embeddings(
    embeddings: Mapping[int, np.ndarray],
    verification: DomainDataset,
    cfg: Optional[EvaluationConfig] = None,
    **metadata,
) -> GroupReport:
    """Per-group verification accuracy plus the pooled accuracy over all pairs."""
    cfg = cfg or EvaluationConfig()
    pairs = {
        g: make_pairs(
            verification, g, cfg.n_pos, cfg.n_neg, derive_seed(cfg.seed, g.index)
        )
        for g in GROUPS
    }

    def accuracy(group: GroupLabel) -> float:
        return verify_accuracy(embeddings, pairs[group], cfg.folds)

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        accuracies = list(pool.map(accuracy, GROUPS))
    everything = [p for g in GROUPS for p in pairs[g]]
    rng = np.random.default_rng(derive_seed(cfg.seed, len(GROUPS)))
    everything = [everything[i] for i in rng.permutation(len(everything))]
    pooled = round(verify_accuracy(embeddings, everything, cfg.folds), 2)
    return group_report(dict(zip(GROUPS, accuracies)), pooled=pooled, **metadata)


class ClassifierConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    C: float = Field(1.0, gt=0)
    max_iter: int = Field(1000, ge=1)
    mask_seed: int = Field(DEFAULT_MASK_SEED, ge=0)


class GroupClassifier:
    """Logistic model over mean intensity and per-group texture correlations."""

    def __init__(self, pipeline: Pipeline, fallback: GroupLabel, cfg: ClassifierConfig):
        self.pipeline = pipeline
        self.fallback = fallback
        self.cfg = cfg

    def predict(self, samples: Union[Sequence[Sample], np.ndarray]) -> List[GroupLabel]:
        if not isinstance(samples, np.ndarray):
            samples = pixel_matrix(list(samples))
        pixels = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
        if len(pixels) == 0:
            return []
        predicted = self.pipeline.predict(group_features(pixels, self.cfg.mask_seed))
        constant = np.ptp(pixels, axis=1) == 0
        return [
            self.fallback if flat else parse_group(p)
            for p, flat in zip(predicted, constant)
        ]

    def accuracy(self, samples: Sequence[Sample]) -> float:
        predicted = self.predict(samples)
        hits = [p == s.group for p, s in zip(predicted, samples)]
        return 100.0 * float(np.mean(hits))


def train_group_classifier(
    dataset: DomainDataset, cfg: Optional[ClassifierConfig] = None
) -> GroupClassifier:
    cfg = cfg or ClassifierConfig()
    samples = sorted(dataset.originals(), key=lambda s: s.sample_id)
    groups = {s.group for s in samples}
    if len(groups) < 2:
        raise DataError(
            "Group classifier needs samples from at least two groups",
            {"groups": sorted(g.value for g in groups)},
        )
    features = group_features(pixel_matrix(samples), cfg.mask_seed)
    labels = np.array([s.group.value for s in samples])
    pipeline = Pipeline(
        [
            ("scale", StandardScaler()),
            ("logistic", LogisticRegression(C=cfg.C, max_iter=cfg.max_iter)),
        ]
    )
    pipeline.fit(features, labels)
    counts = {g: sum(1 for s in samples if s.group == g) for g in GROUPS}
    fallback = max(GROUPS, key=lambda g: (counts[g], -g.index))
    return GroupClassifier(pipeline, fallback, cfg)


@dataclass
class TransferAssessment:
    rates: Dict[Tuple[GroupLabel, GroupLabel], float] = field(default_factory=dict)
    counts: Dict[Tuple[GroupLabel, GroupLabel], int] = field(default_factory=dict)
    overall: float = 0.0

    def to_csv(self) -> str:
        rows = [
            [f"{src.value}->{tgt.value}", f"{rate:.2f}"]
            for (src, tgt), rate in self.rates.items()
        ]
        rows.append(["overall", f"{self.overall:.2f}"])
        return csv_text(TRANSFER_CSV_HEADER, rows)


def transfer_success(
    translated: Sequence[Sample], classifier: GroupClassifier
) -> TransferAssessment:
    """Share (%) of translated samples the classifier assigns to their target group."""
    originals = [s.sample_id for s in translated if not s.is_synthesized]
    if originals:
        raise DataError(
            f"{len(originals)} original samples passed to transfer assessment",
            {"sample_ids": originals[:10]},
        )
    if not translated:
        raise DataError("No translated samples to assess", {"samples": 0})
    predicted = classifier.predict(translated)
    hits: Dict[Tuple[GroupLabel, GroupLabel], int] = {}
    counts: Dict[Tuple[GroupLabel, GroupLabel], int] = {}
    for sample, label in zip(translated, predicted):
        key = (sample.source_group, sample.group)
        counts[key] = counts.get(key, 0) + 1
        hits[key] = hits.get(key, 0) + int(label == sample.group)
    order = sorted(counts, key=lambda m: (m[0].index, m[1].index))
    return TransferAssessment(
        rates={m: 100.0 * hits[m] / counts[m] for m in order},
        counts={m: counts[m] for m in order},
        overall=100.0 * sum(hits.values()) / sum(counts.values()),
    )


@dataclass
class ReportDelta:
    loss: str
    per_group: Dict[GroupLabel, float]
    d_avg: float
    d_stdv: float

    @property
    def stdv_decreased(self) -> bool:
        return self.d_stdv < 0

    @property
    def is_zero(self) -> bool:
        return self.d_avg == 0 and self.d_stdv == 0 and not any(self.per_group.values())


def compare_reports(baseline: GroupReport, treated: GroupReport) -> ReportDelta:
    """treated minus baseline, per group and for AVG/STDV, rounded to 2 decimals."""
    if set(baseline.accuracies) != set(treated.accuracies):
        raise DataError(
            "Reports cover different groups",
            {
                "baseline": sorted(g.value for g in baseline.accuracies),
                "treated": sorted(g.value for g in treated.accuracies),
            },
        )
    if baseline.loss and treated.loss and baseline.loss != treated.loss:
        raise DataError(
            f"Cannot compare a {baseline.loss} report with a {treated.loss} report",
            {"baseline": baseline.loss, "treated": treated.loss},
        )
    return ReportDelta(
        loss=baseline.loss or treated.loss,
        per_group={
            g: round(treated.accuracies[g] - baseline.accuracies[g], 2)
            for g in GROUPS
            if g in baseline.accuracies
        },
        d_avg=round(treated.avg - baseline.avg, 2),
        d_stdv=round(treated.stdv - baseline.stdv, 2),
    )


def reports_csv(reports: Sequence[GroupReport]) -> str:
    return csv_text(REPORT_CSV_HEADER, [r.csv_row() for r in reports])


def read_reports_csv(rows: Sequence[Mapping[str, str]]) -> List[GroupReport]:
    reports = []
    for row in rows:
        try:
            report = GroupReport(
                accuracies={g: float(row[GROUP_NAMES[g]]) for g in GROUPS},
                avg=float(row["avg"]),
                stdv=float(row["stdv"]),
                loss=row["loss"],
                dataset=row["dataset"],
            )
        except (KeyError, ValueError) as e:
            raise DataError(f"Malformed report row: {e}", {"row": dict(row)})
        reports.append(report)
    return reports


def _markdown_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(c)) for c in column) for column in zip(header, *rows)]

    def line(cells):
        return "| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |"

    divider = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(header), divider] + [line(r) for r in rows]) + "\n"


def reports_markdown(reports: Sequence[GroupReport]) -> str:
    titles = [c.capitalize() for c in GROUP_COLUMNS]
    header = ["Loss", "Dataset"] + titles + ["AVG", "STDV", "Pooled"]
    rows = [
        r.csv_row() + ["" if r.pooled is None else f"{r.pooled:.2f}"] for r in reports
    ]
    return _markdown_table(header, rows)


def delta_csv(deltas: Sequence[ReportDelta]) -> str:
    header = ["loss"] + GROUP_COLUMNS + ["d_avg", "d_stdv", "stdv_decreased"]
    rows = [
        [d.loss]
        + [f"{d.per_group[g]:.2f}" for g in GROUPS]
        + [f"{d.d_avg:.2f}", f"{d.d_stdv:.2f}", "yes" if d.stdv_decreased else "no"]
        for d in deltas
    ]
    return csv_text(header, rows)


def delta_markdown(deltas: Sequence[ReportDelta]) -> str:
    titles = ["Δ" + c.capitalize() for c in GROUP_COLUMNS]
    header = ["Loss"] + titles + ["ΔAVG", "ΔSTDV", "STDV down"]
    rows = [
        [d.loss]
        + [f"{d.per_group[g]:+.2f}" for g in GROUPS]
        + [f"{d.d_avg:+.2f}", f"{d.d_stdv:+.2f}", "yes" if d.stdv_decreased else "no"]
        for d in deltas
    ]
    return _markdown_table(header, rows)
