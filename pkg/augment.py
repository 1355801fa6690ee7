"""
Per-subject augmentation: each original image is followed by its
translations into the plan's target groups.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

from cycletrans import MappingRegistry, translate
from errors import ConfigError, DataError, MappingError
from synthface import GROUPS, DomainDataset, GroupLabel, Sample, parse_group

logger = logging.getLogger(__name__)

PLAN_NAMES = ("full", "skip-dominant", "none")


def _others(group: GroupLabel) -> Tuple[GroupLabel, ...]:
    return tuple(t for t in GROUPS if t != group)


@dataclass(frozen=True)
class AugmentationPlan:
    name: str
    targets: Mapping[GroupLabel, Tuple[GroupLabel, ...]]
    skip: FrozenSet[GroupLabel] = frozenset()
    registry: Optional[MappingRegistry] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "skip", frozenset(parse_group(g) for g in self.skip))
        normalized: Dict[GroupLabel, Tuple[GroupLabel, ...]] = {}
        for group in GROUPS:
            listed = {parse_group(t) for t in self.targets.get(group, ())}
            targets = tuple(sorted(listed))
            if group in targets:
                raise MappingError(
                    f"Plan '{self.name}' maps group {group} to itself",
                    {"group": group.value},
                )
            if group in self.skip and targets:
                raise MappingError(
                    f"Plan '{self.name}' skips group {group} but lists targets for it",
                    {"group": group.value, "targets": [t.value for t in targets]},
                )
            normalized[group] = targets
        object.__setattr__(self, "targets", normalized)

    def targets_for(self, group: GroupLabel) -> Tuple[GroupLabel, ...]:
        return self.targets[parse_group(group)]

    @property
    def is_empty(self) -> bool:
        return not any(self.targets.values())

    def require_registry(self) -> MappingRegistry:
        if self.registry is None:
            raise MappingError(
                f"Plan '{self.name}' has no translator registry", {"plan": self.name}
            )
        return self.registry


def full_plan(registry: Optional[MappingRegistry] = None) -> AugmentationPlan:
    return AugmentationPlan("full", {g: _others(g) for g in GROUPS}, registry=registry)


def skip_plan(
    skip: Sequence[GroupLabel],
    registry: Optional[MappingRegistry] = None,
    name: str = "skip",
) -> AugmentationPlan:
    skip = frozenset(parse_group(g) for g in skip)
    targets = {g: () if g in skip else _others(g) for g in GROUPS}
    return AugmentationPlan(name, targets, skip, registry)


def dominant_group(dataset: DomainDataset) -> GroupLabel:
    """Group with the most original samples; ties go to the earliest group."""
    counts = dataset.originals().samples_per_group
    return max(GROUPS, key=lambda g: (counts[g], -g.index))


def skip_dominant_plan(
    dataset: DomainDataset, registry: Optional[MappingRegistry] = None
) -> AugmentationPlan:
    return skip_plan([dominant_group(dataset)], registry, name="skip-dominant")


def empty_plan(registry: Optional[MappingRegistry] = None) -> AugmentationPlan:
    return AugmentationPlan(
        "none", {g: () for g in GROUPS}, frozenset(GROUPS), registry
    )


def make_plan(
    name: str,
    dataset: Optional[DomainDataset] = None,
    registry: Optional[MappingRegistry] = None,
) -> AugmentationPlan:
    if name == "full":
        return full_plan(registry)
    if name == "none":
        return empty_plan(registry)
    if name == "skip-dominant":
        if dataset is None:
            raise ConfigError(
                "Plan 'skip-dominant' needs the training dataset", {"field": "plan"}
            )
        return skip_dominant_plan(dataset, registry)
    raise ConfigError(
        f"Unknown augmentation plan '{name}'",
        {"field": "plan", "allowed": list(PLAN_NAMES)},
    )


def augmented_size(dataset: DomainDataset, plan: AugmentationPlan) -> int:
    return sum(1 + len(plan.targets_for(s.group)) for s in dataset)


def augment_image(sample: Sample, plan: AugmentationPlan) -> List[Sample]:
    """[sample] followed by its translation into each target group, in order."""
    if sample.is_synthesized:
        raise DataError(
            f"Sample {sample.sample_id} is already synthesized; "
            "chained translation is not allowed",
            {"sample_id": sample.sample_id},
        )
    targets = plan.targets_for(sample.group)
    if not targets:
        return [sample]
    registry = plan.require_registry()
    return [sample] + [translate(sample, sample.group, t, registry) for t in targets]


def _check_trained(dataset: DomainDataset, plan: AugmentationPlan) -> None:
    registry = plan.require_registry()
    for group in sorted({s.group for s in dataset}):
        for target in plan.targets_for(group):
            pair, _ = registry.lookup(group, target)
            if not pair.trained:
                raise MappingError(
                    f"Translator pair_{pair.name} is not trained", {"pair": pair.name}
                )


def build_augmented_dataset(
    dataset: DomainDataset, plan: AugmentationPlan
) -> DomainDataset:
    """
    Concatenate augment_image over every sample. Originals keep their ids;
    synthesized samples take fresh ids above the largest original id.
    """
    if dataset.split != "train":
        raise DataError(
            f"Only the training split is augmented, got '{dataset.split}'",
            {"split": dataset.split},
        )
    synthesized = [s.sample_id for s in dataset if s.is_synthesized]
    if synthesized:
        raise DataError(
            f"Dataset already holds {len(synthesized)} synthesized samples; "
            "chained translation is not allowed",
            {"count": len(synthesized)},
        )
    if not plan.is_empty:
        _check_trained(dataset, plan)

    next_id = max((s.sample_id for s in dataset), default=-1) + 1
    samples: List[Sample] = []
    for sample in dataset:
        for out in augment_image(sample, plan):
            if out is not sample:
                out = replace(out, sample_id=next_id)
                next_id += 1
            samples.append(out)
    logger.info(
        "Augmented %d samples to %d with plan '%s'",
        len(dataset),
        len(samples),
        plan.name,
    )
    return DomainDataset(samples, split=dataset.split)
