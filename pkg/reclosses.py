"""
Embedding backbone, margin heads and the recognition training loop.

Classes are subject identities. Synthesized samples keep the subject id of
the image they were translated from, so augmentation adds images to an
existing class rather than creating new ones.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from artifacts import PathLike, json_text, write_atomic
from errors import ArtifactError, ConfigError, DataError, DomainError
from numgrad import (
    MLP,
    ParameterSet,
    Tensor,
    adam_step,
    backward,
    cross_entropy,
    load_checkpoint,
    no_grad,
    save_checkpoint,
)
from synthface import N_PIXELS, DomainDataset, Sample, derive_seed, pixel_matrix

logger = logging.getLogger(__name__)

COS_CLAMP = 1e-7


class LossKind(str, Enum):
    SOFTMAX = "softmax"
    COSFACE = "cosface"
    ARCFACE = "arcface"

    @classmethod
    def parse(cls, value) -> "LossKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError(
                f"Unknown loss kind '{value}'",
                {
                    "field": "loss",
                    "value": str(value),
                    "allowed": [k.value for k in cls],
                },
            )

    def __str__(self):
        return self.value


LOSS_KINDS = (LossKind.SOFTMAX, LossKind.COSFACE, LossKind.ARCFACE)
DEFAULT_MARGIN = {LossKind.SOFTMAX: 0.0, LossKind.COSFACE: 0.35, LossKind.ARCFACE: 0.3}
MARGIN_UPPER = {
    LossKind.SOFTMAX: math.inf,
    LossKind.COSFACE: 1.0,
    LossKind.ARCFACE: math.pi / 2,
}
DEFAULT_SCALE = 16.0


class Backbone:
    """Dense encoder 256 -> hidden -> d with rectifier hidden units."""

    def __init__(
        self,
        embedding_dim: int = 32,
        hidden: int = 64,
        n_pixels: int = N_PIXELS,
        seed: int = 0,
    ):
        self.embedding_dim = embedding_dim
        sizes = (n_pixels, hidden, embedding_dim)
        self.net = MLP(sizes, hidden="relu", output="linear", seed=seed)

    @property
    def params(self) -> ParameterSet:
        return self.net.params

    def __call__(self, x) -> Tensor:
        return self.net(x)


class MarginHead:
    def __init__(
        self,
        kind: Union[LossKind, str],
        n_classes: int,
        embedding_dim: int = 32,
        margin: Optional[float] = None,
        scale: float = DEFAULT_SCALE,
        seed: int = 0,
    ):
        self.kind = LossKind.parse(kind)
        if n_classes < 1:
            raise DataError("A head needs at least one class", {"n_classes": n_classes})
        self.n_classes = n_classes
        self.margin = DEFAULT_MARGIN[self.kind] if margin is None else float(margin)
        self.scale = float(scale)
        _check_margin(self.kind, self.margin, self.scale)
        rng = np.random.default_rng(seed)
        bound = math.sqrt(6.0 / (embedding_dim + n_classes))
        self.params = ParameterSet()
        self.params.add("W", rng.uniform(-bound, bound, (embedding_dim, n_classes)))
        if self.kind == LossKind.SOFTMAX:
            self.params.add("b", np.zeros(n_classes))

    @property
    def W(self) -> Tensor:
        return self.params["W"]

    @property
    def b(self) -> Optional[Tensor]:
        return self.params["b"] if "b" in self.params else None

    def cosines(self, z: Tensor) -> Tensor:
        """cos(theta_j) between each unit embedding and each unit class weight."""
        return z.l2_normalize() @ self.W.T.l2_normalize().T

    def loss(self, z: Tensor, y: Sequence[int]) -> Tensor:
        if self.kind == LossKind.SOFTMAX:
            return softmax_loss(self, z, y)
        if self.kind == LossKind.COSFACE:
            return cosface_loss(self, z, y)
        return arcface_loss(self, z, y)


def _check_margin(kind: LossKind, m: float, s: float) -> None:
    if s <= 0:
        raise DomainError("Scale s must be positive", {"scale": s})
    upper = MARGIN_UPPER[kind]
    if not 0 <= m < upper:
        raise DomainError(
            f"{kind} margin must lie in [0, {upper})", {"kind": kind.value, "margin": m}
        )


def _require_kind(head: MarginHead, kind: LossKind) -> None:
    if head.kind != kind:
        raise DomainError(
            f"{kind} loss called on a {head.kind} head",
            {"expected": kind.value, "actual": head.kind.value},
        )


def _one_hot(y: Sequence[int], n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise DomainError(
            "Label out of range",
            {"n_classes": n_classes, "min": int(y.min()), "max": int(y.max())},
        )
    onehot = np.zeros((y.size, n_classes))
    onehot[np.arange(y.size), y] = 1.0
    return onehot


def embed(
    samples: Union[Sequence[Sample], np.ndarray], backbone: Backbone
) -> np.ndarray:
    """Raw embeddings; consumers normalize explicitly."""
    x = samples if isinstance(samples, np.ndarray) else pixel_matrix(list(samples))
    with no_grad():
        return backbone(Tensor(np.asarray(x).reshape(len(x), -1))).numpy()


def softmax_loss(head: MarginHead, z: Tensor, y: Sequence[int]) -> Tensor:
    _require_kind(head, LossKind.SOFTMAX)
    return cross_entropy(z @ head.W + head.b, y)


def cosface_loss(
    head: MarginHead,
    z: Tensor,
    y: Sequence[int],
    m: Optional[float] = None,
    s: Optional[float] = None,
) -> Tensor:
    """Cross-entropy over s*(cos(theta_y) - m) for the true class."""
    _require_kind(head, LossKind.COSFACE)
    m = head.margin if m is None else m
    s = head.scale if s is None else s
    _check_margin(LossKind.COSFACE, m, s)
    onehot = _one_hot(y, head.n_classes)
    logits = (head.cosines(z) - m * onehot) * s
    return cross_entropy(logits, y)


def arcface_loss(
    head: MarginHead,
    z: Tensor,
    y: Sequence[int],
    m: Optional[float] = None,
    s: Optional[float] = None,
) -> Tensor:
    """Cross-entropy with true-class logit s*cos(theta_y + m), angle capped at pi."""
    _require_kind(head, LossKind.ARCFACE)
    m = head.margin if m is None else m
    s = head.scale if s is None else s
    _check_margin(LossKind.ARCFACE, m, s)
    onehot = _one_hot(y, head.n_classes)
    cos = head.cosines(z)
    cos_y = (cos * onehot).sum(axis=1).clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    shifted = (cos_y.arccos() + m).clamp(high=math.pi).cos().reshape(len(onehot), 1)
    logits = (cos * (1.0 - onehot) + shifted * onehot) * s
    return cross_entropy(logits, y)


class RecognitionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    margin: Optional[float] = Field(None, ge=0)
    scale: float = Field(DEFAULT_SCALE, gt=0)
    epochs: int = Field(20, ge=0)
    batch: int = Field(32, ge=1)
    lr: float = Field(1e-2, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    seed: int = Field(0, ge=0)
    embedding_dim: int = Field(32, ge=1)
    hidden: int = Field(64, ge=1)


@dataclass
class TrainingRun:
    kind: LossKind
    backbone: Backbone
    head: MarginHead
    classes: List[int]
    config: RecognitionConfig
    fingerprint: str
    trace: List[float] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def stem(self) -> str:
        return f"run_{self.kind.value}_{self.seed}"

    def embed(self, samples) -> np.ndarray:
        return embed(samples, self.backbone)

    def parameters(self) -> ParameterSet:
        return ParameterSet.combine(
            {"backbone": self.backbone.params, "head": self.head.params}
        )

    def state_dict(self):
        return self.parameters().state_dict()


def _build_models(kind: LossKind, n_classes: int, cfg: RecognitionConfig):
    backbone = Backbone(cfg.embedding_dim, cfg.hidden, seed=derive_seed(cfg.seed, 0))
    head = MarginHead(
        kind,
        n_classes,
        cfg.embedding_dim,
        cfg.margin,
        cfg.scale,
        seed=derive_seed(cfg.seed, 1),
    )
    return backbone, head


def train_recognizer(
    dataset: DomainDataset,
    kind: Union[LossKind, str],
    cfg: Optional[RecognitionConfig] = None,
) -> TrainingRun:
    """
    Minimize the selected loss with Adam over shuffled mini-batches.

    Args:
        dataset: training split; every subject needs at least two images
        kind: softmax, cosface or arcface
        cfg: recognition hyperparameters; margin None means the kind's default

    Returns:
        A TrainingRun whose trace holds one loss value per optimizer step.
    """
    kind = LossKind.parse(kind)
    cfg = cfg or RecognitionConfig()
    counts = dataset.images_per_subject
    if not counts:
        raise DataError("Cannot train a recognizer on an empty dataset", {"samples": 0})
    singletons = [sid for sid, n in counts.items() if n < 2]
    if singletons:
        raise DataError(
            f"{len(singletons)} subjects have a single image; "
            "every subject needs at least two",
            {"subjects": singletons[:10], "count": len(singletons)},
        )
    classes = sorted(counts)
    class_index = {sid: i for i, sid in enumerate(classes)}
    x = pixel_matrix(dataset.samples)
    y = np.array([class_index[s.subject_id] for s in dataset.samples], dtype=np.int64)

    backbone, head = _build_models(kind, len(classes), cfg)
    run = TrainingRun(kind, backbone, head, classes, cfg, dataset.fingerprint())
    params = run.parameters()
    rng = np.random.default_rng(derive_seed(cfg.seed, 2))

    logger.info(
        "Training %s recognizer: %d samples, %d classes, %d epochs",
        kind,
        len(x),
        len(classes),
        cfg.epochs,
    )
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch):
            idx = order[start : start + cfg.batch]
            params.zero_grad()
            loss = head.loss(backbone(Tensor(x[idx])), y[idx])
            backward(loss)
            adam_step(params, cfg.lr, cfg.beta1, cfg.beta2)
            run.trace.append(loss.item())
        logger.debug(
            "%s epoch %d: last batch loss %.4f", kind, epoch + 1, run.trace[-1]
        )
    params.zero_grad()
    return run


def save_run(run: TrainingRun, directory: PathLike) -> List[Path]:
    directory = Path(directory)
    weights = directory / f"{run.stem}.ftns"
    manifest = directory / f"{run.stem}.json"
    save_checkpoint(weights, run.state_dict())
    write_atomic(
        manifest,
        json_text(
            {
                "kind": run.kind.value,
                "seed": run.seed,
                "config": run.config.model_dump(),
                "dataset_fingerprint": run.fingerprint,
                "classes": run.classes,
                "trace": run.trace,
            }
        ),
    )
    return [weights, manifest]


def load_run(directory: PathLike, kind: Union[LossKind, str], seed: int) -> TrainingRun:
    kind = LossKind.parse(kind)
    directory = Path(directory)
    stem = f"run_{kind.value}_{seed}"
    manifest_path = directory / f"{stem}.json"
    if not manifest_path.exists():
        raise ArtifactError(
            f"Training run not found: {manifest_path}", {"path": str(manifest_path)}
        )
    meta = json.loads(manifest_path.read_text())
    cfg = RecognitionConfig(**meta["config"])
    backbone, head = _build_models(kind, len(meta["classes"]), cfg)
    run = TrainingRun(
        kind,
        backbone,
        head,
        list(meta["classes"]),
        cfg,
        meta["dataset_fingerprint"],
        list(meta["trace"]),
    )
    run.parameters().load_state_dict(load_checkpoint(directory / f"{stem}.ftns"))
    return run
