"""
Experiment orchestration: config files, the phased pipeline, run manifests,
report comparison and seed sweeps.

Phases run in order gen -> train-translators -> augment -> train -> eval.
Each phase has a key derived from the configuration it depends on; a phase
whose key and output hashes already match the manifest is skipped. The
manifest is removed while phases run and written last, so it never lists
files that are missing or stale.
"""

import hashlib
import json
import logging
import os
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    List,
    Literal,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from artifacts import (
    PathLike,
    csv_text,
    format_float,
    read_csv,
    sha256_file,
    write_atomic,
)
from augment import build_augmented_dataset, make_plan
from cycletrans import (
    MappingRegistry,
    TranslationConfig,
    build_registry,
    load_registry,
    save_registry,
    train_registry,
    translate,
)
from errors import ArtifactError, ConfigError
from faireval import (
    ClassifierConfig,
    EvaluationConfig,
    GroupReport,
    ReportDelta,
    compare_reports,
    delta_csv,
    delta_markdown,
    evaluate_embeddings,
    read_reports_csv,
    reports_csv,
    reports_markdown,
    train_group_classifier,
    transfer_success,
)
from reclosses import (
    LOSS_KINDS,
    LossKind,
    RecognitionConfig,
    TrainingRun,
    load_run,
    save_run,
    train_recognizer,
)
from synthface import (
    GROUP_NAMES,
    GROUPS,
    NOISE_SIGMA,
    DomainDataset,
    GenerationConfig,
    build_dataset,
    derive_seed,
    export_dataset,
    load_dataset,
)

logger = logging.getLogger(__name__)

PHASES = ("gen", "train-translators", "augment", "train", "eval")
SEED_OFFSETS = {
    "data": 0,
    "verification": 1,
    "translators": 2,
    "recognition": 3,
    "evaluation": 4,
}
DEFAULT_OUT = "fairtrans-out"
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "verification")


def tool_version() -> str:
    try:
        return version("fairtrans")
    except PackageNotFoundError:
        return "0.1.0"


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    subjects: Tuple[int, int, int, int] = (5, 5, 5, 5)
    images: int = Field(20, ge=2)
    verification_subjects: int = Field(10, ge=2)
    verification_images: int = Field(10, ge=2)
    noise_sigma: float = Field(NOISE_SIGMA, ge=0)
    seed: int = Field(0, ge=0)

    @field_validator("subjects", mode="before")
    @classmethod
    def _split_counts(cls, value):
        if isinstance(value, str):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            return tuple(parts * 4 if len(parts) == 1 else parts)
        if isinstance(value, int):
            return (value,) * 4
        return value

    @field_validator("subjects")
    @classmethod
    def _positive(cls, value):
        if any(n < 1 for n in value):
            raise ValueError("every group needs at least one subject")
        return value


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    out: Optional[str] = None
    plan: Literal["full", "skip-dominant", "none"] = "full"
    losses: Tuple[LossKind, ...] = LOSS_KINDS
    workers: int = Field(1, ge=1)
    data: DataSection = DataSection()
    translators: TranslationConfig = TranslationConfig()
    recognition: Dict[LossKind, RecognitionConfig] = {}
    evaluation: EvaluationConfig = EvaluationConfig()
    classifier: ClassifierConfig = ClassifierConfig()

    @field_validator("losses", mode="before")
    @classmethod
    def _split_losses(cls, value):
        if isinstance(value, str):
            value = [p for p in (part.strip() for part in value.split(",")) if p]
        if not value:
            raise ValueError("at least one loss kind is required")
        return tuple(value)

    @field_validator("losses")
    @classmethod
    def _dedupe(cls, value):
        return tuple(k for k in LOSS_KINDS if k in value)

    def _phase_seed(self, section: BaseModel, offset: str) -> int:
        if "seed" in section.model_fields_set:
            return section.seed
        return derive_seed(self.seed, SEED_OFFSETS[offset])

    def generation(self, split: str) -> GenerationConfig:
        seed = self._phase_seed(self.data, "data")
        if split == "train":
            return GenerationConfig(
                subjects_per_group=dict(zip(GROUPS, self.data.subjects)),
                images_per_subject=self.data.images,
                seed=seed,
                split="train",
                noise_sigma=self.data.noise_sigma,
            )
        return GenerationConfig.balanced(
            self.data.verification_subjects,
            self.data.verification_images,
            seed=derive_seed(seed, SEED_OFFSETS["verification"]),
            split="verification",
            id_offset=sum(self.data.subjects),
            noise_sigma=self.data.noise_sigma,
        )

    def translation(self) -> TranslationConfig:
        return self.translators.model_copy(
            update={"seed": self._phase_seed(self.translators, "translators")}
        )

    def recognition_for(self, kind: LossKind) -> RecognitionConfig:
        section = self.recognition.get(kind, RecognitionConfig())
        seed = self._phase_seed(section, "recognition")
        return section.model_copy(update={"seed": seed})

    def evaluation_config(self) -> EvaluationConfig:
        seed = self._phase_seed(self.evaluation, "evaluation")
        return self.evaluation.model_copy(
            update={"seed": seed, "workers": self.workers}
        )

    def with_overrides(
        self,
        seed: Optional[int] = None,
        out: Optional[str] = None,
        plan: Optional[str] = None,
    ) -> "ExperimentConfig":
        update: Dict[str, Any] = {}
        if seed is not None:
            update["seed"] = seed
        if out is not None:
            update["out"] = str(out)
        if plan is not None:
            update["plan"] = plan
        if not update:
            return self
        return self.model_validate({**self.model_dump(exclude_unset=True), **update})

    def snapshot(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", exclude={"out"})


TOP_LEVEL_SECTIONS = ("run", "data", "translators", "evaluation", "classifier")


def parse_config_text(
    text: str, source: str = "<config>"
) -> Tuple[Dict[str, Any], Dict[Tuple[str, ...], int]]:
    """
    Parse `[section]` / `key = value` lines into nested dicts.

    Returns the nested values and the line number of every key and section
    header, keyed by its path, so validation errors can point at a line.
    """
    values: Dict[str, Any] = {}
    lines: Dict[Tuple[str, ...], int] = {}
    path: Tuple[str, ...] = ()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        at = f"{source}:{lineno}"
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]") or not line[1:-1].strip():
                raise ConfigError(
                    f"{at}: malformed section header", {"line": lineno}
                )
            name = line[1:-1].strip().lower()
            parts = tuple(name.split("."))
            if parts[0] == "recognition" and len(parts) == 2:
                path = parts
            elif len(parts) == 1 and parts[0] in TOP_LEVEL_SECTIONS:
                path = () if parts[0] == "run" else parts
            else:
                raise ConfigError(
                    f"{at}: unknown section [{name}]", {"line": lineno, "field": name}
                )
            if path and path in lines:
                raise ConfigError(
                    f"{at}: duplicate section [{name}]",
                    {"line": lineno, "field": name},
                )
            lines.setdefault(path, lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"{at}: expected 'key = value'", {"line": lineno})
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{at}: missing key", {"line": lineno})
        target = values
        for part in path:
            target = target.setdefault(part, {})
        if key in target:
            field = ".".join(path + (key,))
            raise ConfigError(
                f"{at}: duplicate key {field}", {"line": lineno, "field": field}
            )
        target[key] = value
        lines[path + (key,)] = lineno
    return values, lines


def _error_line(loc: Sequence[Any], lines: Dict[Tuple[str, ...], int]) -> Optional[int]:
    parts = tuple(str(p) for p in loc)
    for end in range(len(parts), -1, -1):
        if parts[:end] in lines:
            return lines[parts[:end]]
    return None


def load_config(path: PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}", {"path": str(path)})
    values, lines = parse_config_text(text, str(path))
    try:
        return ExperimentConfig.model_validate(values)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"])
        line = _error_line(first["loc"], lines)
        where = f"{path}:{line}" if line else str(path)
        raise ConfigError(
            f"{where}: {field}: {first['msg']}",
            {"line": line, "field": field, "errors": e.error_count()},
        )


def resolve_out(config: ExperimentConfig, out: Optional[PathLike] = None) -> Path:
    """CLI flag, then config file, then FAIRTRANS_OUT, then the default."""
    return Path(out or config.out or os.getenv("FAIRTRANS_OUT") or DEFAULT_OUT)


class PhaseRecord(BaseModel):
    key: str
    files: Dict[str, str]
    seconds: float


class RunManifest(BaseModel):
    tool_version: str
    seed: int
    config: Dict[str, Any]
    fingerprints: Dict[str, str] = {}
    phases: Dict[str, PhaseRecord] = {}

    @property
    def files(self) -> Dict[str, str]:
        inventory: Dict[str, str] = {}
        for record in self.phases.values():
            inventory.update(record.files)
        return dict(sorted(inventory.items()))


def _digest(payload: Any) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


class Experiment:
    """One output directory and the phases that fill it."""

    def __init__(self, config: ExperimentConfig, out_dir: PathLike):
        self.config = config
        self.out = Path(out_dir)
        self._cache: Dict[str, Any] = {}
        self.manifest = self._load_manifest()

    # Paths

    @property
    def manifest_path(self) -> Path:
        return self.out / MANIFEST_NAME

    def dataset_dir(self, split: str) -> Path:
        return self.out / "datasets" / split

    @property
    def translators_dir(self) -> Path:
        return self.out / "translators"

    @property
    def runs_dir(self) -> Path:
        return self.out / "runs"

    @property
    def reports_dir(self) -> Path:
        return self.out / "reports"

    @property
    def dataset_label(self) -> str:
        if self.config.plan == "none":
            return "baseline"
        return f"augmented-{self.config.plan}"

    def _load_manifest(self) -> RunManifest:
        fresh = RunManifest(
            tool_version=tool_version(),
            seed=self.config.seed,
            config=self.config.snapshot(),
        )
        if not self.manifest_path.exists():
            return fresh
        try:
            previous = RunManifest.model_validate_json(self.manifest_path.read_text())
        except ValidationError:
            logger.warning("Ignoring unreadable manifest %s", self.manifest_path)
            return fresh
        fresh.phases = previous.phases
        fresh.fingerprints = previous.fingerprints
        return fresh

    # Phase keys

    def phase_key(self, phase: str) -> str:
        c = self.config
        if phase == "gen":
            splits = [c.generation(s).model_dump(mode="json") for s in SPLITS]
            return _digest(["gen"] + splits)
        if phase == "train-translators":
            translation = c.translation().model_dump(mode="json")
            return _digest([phase, self.phase_key("gen"), translation])
        if phase == "augment":
            return _digest([phase, self.phase_key("train-translators"), c.plan])
        if phase == "train":
            upstream = self.phase_key("gen" if c.plan == "none" else "augment")
            recognition = {
                k.value: c.recognition_for(k).model_dump(mode="json") for k in c.losses
            }
            return _digest([phase, upstream, recognition])
        if phase == "eval":
            evaluation = c.evaluation_config().model_dump(
                mode="json", exclude={"workers"}
            )
            upstream = [self.phase_key("train"), evaluation]
            if c.plan != "none":
                classifier = c.classifier.model_dump(mode="json")
                upstream += [self.phase_key("train-translators"), classifier]
            return _digest([phase, upstream])
        raise ConfigError(
            f"Unknown phase '{phase}'", {"field": "phase", "allowed": list(PHASES)}
        )

    def is_current(self, phase: str) -> bool:
        record = self.manifest.phases.get(phase)
        if record is None or record.key != self.phase_key(phase):
            return False
        for rel, digest in record.files.items():
            path = self.out / rel
            if not path.exists() or sha256_file(path) != digest:
                return False
        return True

    def applies(self, phase: str) -> bool:
        if self.config.plan != "none":
            return True
        return phase not in ("train-translators", "augment")

    # Artifacts, loaded from disk when not produced in this process

    def _artifact(self, name: str, loader: Callable[[], Any]) -> Any:
        if name not in self._cache:
            self._cache[name] = loader()
        return self._cache[name]

    def dataset(self, split: str) -> DomainDataset:
        return self._artifact(
            f"dataset:{split}", lambda: load_dataset(self.dataset_dir(split))
        )

    def registry(self) -> MappingRegistry:
        cfg = self.config.translation()
        return self._artifact(
            "registry", lambda: load_registry(self.translators_dir, cfg)
        )

    def training_dataset(self) -> DomainDataset:
        return self.dataset("train" if self.config.plan == "none" else "augmented")

    def run_for(self, kind: LossKind) -> TrainingRun:
        seed = self.config.recognition_for(kind).seed
        return self._artifact(
            f"run:{kind.value}", lambda: load_run(self.runs_dir, kind, seed)
        )

    # Phases

    def _gen(self) -> List[Path]:
        files = []
        for split in SPLITS:
            dataset = build_dataset(self.config.generation(split))
            self._cache[f"dataset:{split}"] = dataset
            files += export_dataset(dataset, self.dataset_dir(split))
            self.manifest.fingerprints[split] = dataset.fingerprint()
        return files

    def _train_translators(self) -> List[Path]:
        cfg = self.config.translation()
        registry = build_registry(GROUPS, cfg, seed=cfg.seed)
        traces = train_registry(
            registry, self.dataset("train"), cfg, workers=self.config.workers
        )
        self._cache["registry"] = registry
        files = save_registry(registry, self.translators_dir)
        for name, trace in traces.items():
            path = self.translators_dir / f"trace_{name}.csv"
            write_atomic(path, trace.to_csv())
            files.append(path)
        return files

    def _augment(self) -> List[Path]:
        train = self.dataset("train")
        plan = make_plan(self.config.plan, train, self.registry())
        augmented = build_augmented_dataset(train, plan)
        self._cache["dataset:augmented"] = augmented
        self.manifest.fingerprints["augmented"] = augmented.fingerprint()
        return export_dataset(augmented, self.dataset_dir("augmented"))

    def _train(self) -> List[Path]:
        dataset = self.training_dataset()
        files = []
        for kind in self.config.losses:
            run = train_recognizer(dataset, kind, self.config.recognition_for(kind))
            self._cache[f"run:{kind.value}"] = run
            files += save_run(run, self.runs_dir)
        return files

    def _eval(self) -> List[Path]:
        verification = self.dataset("verification")
        cfg = self.config.evaluation_config()
        files = []
        reports = []
        for kind in self.config.losses:
            run = self.run_for(kind)
            vectors = run.embed(verification.samples)
            embeddings = {
                s.sample_id: row for s, row in zip(verification.samples, vectors)
            }
            report = evaluate_embeddings(
                embeddings,
                verification,
                cfg,
                loss=kind.value,
                dataset=self.dataset_label,
                fingerprint=run.fingerprint,
                seed=run.seed,
            )
            reports.append(report)
            stem = self.reports_dir / f"report_{kind.value}"
            files.append(write_atomic(stem.with_suffix(".csv"), reports_csv([report])))
            files.append(
                write_atomic(stem.with_suffix(".md"), reports_markdown([report]))
            )
        summary = self.reports_dir / "summary.md"
        write_atomic(summary, reports_markdown(reports))
        files.append(summary)

        if self.config.plan != "none":
            classifier = train_group_classifier(
                self.dataset("train"), self.config.classifier
            )
            registry = self.registry()
            translated = [
                translate(sample, sample.group, target, registry)
                for sample in verification
                for target in GROUPS
                if target != sample.group
            ]
            assessment = transfer_success(translated, classifier)
            path = self.reports_dir / "transfer.csv"
            write_atomic(path, assessment.to_csv())
            files.append(path)
            logger.info("Transfer success overall: %.2f%%", assessment.overall)
        return files

    def run_phase(self, phase: str, resume: bool = True) -> bool:
        """Run one phase unless it is already current; returns whether it ran."""
        if not self.applies(phase):
            logger.info("Phase %s does not apply to plan '%s'", phase, self.config.plan)
            return False
        if resume and self.is_current(phase):
            logger.info("Phase %s is up to date, skipping", phase)
            return False
        handler = {
            "gen": self._gen,
            "train-translators": self._train_translators,
            "augment": self._augment,
            "train": self._train,
            "eval": self._eval,
        }[phase]
        if self.manifest_path.exists():
            self.manifest_path.unlink()
        logger.info("Running phase %s", phase)
        started = time.perf_counter()
        files = handler()
        self.manifest.phases[phase] = PhaseRecord(
            key=self.phase_key(phase),
            files={str(p.relative_to(self.out)): sha256_file(p) for p in files},
            seconds=round(time.perf_counter() - started, 3),
        )
        return True

    def write_manifest(self) -> Path:
        text = self.manifest.model_dump_json(indent=2) + "\n"
        return write_atomic(self.manifest_path, text)

    def run(self, phases: Sequence[str] = PHASES, resume: bool = True) -> RunManifest:
        for phase in phases:
            self.run_phase(phase, resume=resume)
        self.write_manifest()
        return self.manifest


def run_experiment(
    config: Union[ExperimentConfig, PathLike],
    out: Optional[PathLike] = None,
    seed: Optional[int] = None,
    phases: Sequence[str] = PHASES,
    resume: bool = True,
) -> RunManifest:
    """Execute the pipeline, or a subset of its phases, into the output directory."""
    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    config = config.with_overrides(seed=seed)
    out_dir = resolve_out(config, out)
    logger.info(
        "Experiment seed %d, plan '%s', output %s", config.seed, config.plan, out_dir
    )
    return Experiment(config, out_dir).run(phases, resume=resume)


def load_reports(directory: PathLike) -> Dict[LossKind, GroupReport]:
    reports_dir = Path(directory) / "reports"
    reports: Dict[LossKind, GroupReport] = {}
    for path in sorted(reports_dir.glob("report_*.csv")):
        for report in read_reports_csv(read_csv(path)):
            reports[LossKind.parse(report.loss)] = report
    return reports


def compare_exit_code(deltas: Sequence[ReportDelta]) -> int:
    """0 when nothing changed or STDV fell for a strict majority of losses, else 3."""
    if all(d.is_zero for d in deltas):
        return 0
    decreased = sum(1 for d in deltas if d.stdv_decreased)
    return 0 if decreased * 2 > len(deltas) else 3


def compare(
    baseline_dir: PathLike, treated_dir: PathLike, out: Optional[PathLike] = None
) -> Tuple[List[ReportDelta], int]:
    baseline, treated = load_reports(baseline_dir), load_reports(treated_dir)
    if not baseline or not treated:
        empty = baseline_dir if not baseline else treated_dir
        raise ArtifactError(f"No reports found in {empty}", {"path": str(empty)})
    if set(baseline) != set(treated):
        missing = sorted(k.value for k in set(baseline) ^ set(treated))
        raise ArtifactError(
            f"Reports without a counterpart: {', '.join(missing)}",
            {
                "missing": missing,
                "baseline": str(baseline_dir),
                "treated": str(treated_dir),
            },
        )
    deltas = [
        compare_reports(baseline[k], treated[k]) for k in LOSS_KINDS if k in baseline
    ]
    out_dir = Path(out) if out else Path(treated_dir) / "compare"
    write_atomic(out_dir / "delta.csv", delta_csv(deltas))
    write_atomic(out_dir / "delta.md", delta_markdown(deltas))
    return deltas, compare_exit_code(deltas)


SWEEP_CSV_HEADER = (
    ["seed", "loss"] + [f"d_{GROUP_NAMES[g]}" for g in GROUPS] + ["d_avg", "d_stdv"]
)


def seed_sweep(
    config: Union[ExperimentConfig, PathLike],
    seeds: Sequence[int],
    out: Optional[PathLike] = None,
) -> List[List[str]]:
    """
    Run baseline (plan none) and treated runs per seed and summarize the deltas.

    The treated plan is the config's plan, or `full` when the config itself
    is the baseline. Rows: one per (seed, loss kind), then one median row
    per loss kind.
    """
    if len(seeds) < 3:
        raise ConfigError(
            "A sweep needs at least 3 seeds", {"field": "seeds", "count": len(seeds)}
        )
    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    root = resolve_out(config, out)
    treated_plan = "full" if config.plan == "none" else config.plan

    per_kind: Dict[LossKind, List[ReportDelta]] = {k: [] for k in config.losses}
    rows: List[List[str]] = []
    for seed in seeds:
        seed_dir = root / f"seed_{seed}"
        for plan, label in (("none", "baseline"), (treated_plan, "treated")):
            run_experiment(
                config.with_overrides(seed=seed, plan=plan), out=seed_dir / label
            )
        deltas, _ = compare(
            seed_dir / "baseline", seed_dir / "treated", seed_dir / "compare"
        )
        for delta in deltas:
            kind = LossKind.parse(delta.loss)
            per_kind[kind].append(delta)
            rows.append(
                [str(seed), kind.value]
                + [format_float(delta.per_group[g]) for g in GROUPS]
                + [format_float(delta.d_avg), format_float(delta.d_stdv)]
            )
    for kind, deltas in per_kind.items():
        columns = [[d.per_group[g] for d in deltas] for g in GROUPS]
        columns += [[d.d_avg for d in deltas], [d.d_stdv for d in deltas]]
        rows.append(
            ["median", kind.value] + [format_float(np.median(c)) for c in columns]
        )
    write_atomic(root / "sweep.csv", csv_text(SWEEP_CSV_HEADER, rows))
    logger.info("Sweep over %d seeds written to %s", len(seeds), root / "sweep.csv")
    return rows
