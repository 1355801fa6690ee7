"""
Cycle-consistent adversarial translation between group domains.

One TranslatorPair per unordered group pair holds G (source -> target),
F (target -> source) and the discriminators D_src, D_tgt. Generators add a
per-pixel gain on the centred input to the dense net before the logistic
output, so the spatial pattern that carries a subject passes through while
the net learns the group transform. The registry
resolves each of the 12 directed mappings over four groups to one of the
six pairs and a direction.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Callable,
    Dict,
    Iterator,
    List,
    Literal,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from artifacts import PathLike, csv_text, format_float
from errors import ArtifactError, DataError, DomainError, MappingError
from numgrad import (
    MLP,
    ParameterSet,
    Tensor,
    adam_step,
    as_tensor,
    backward,
    load_checkpoint,
    no_grad,
    save_checkpoint,
)
from synthface import (
    GROUPS,
    IMAGE_SIDE,
    N_PIXELS,
    DomainDataset,
    GroupLabel,
    Sample,
    derive_seed,
    parse_group,
    pixel_matrix,
    with_provenance,
)

logger = logging.getLogger(__name__)

D_CLAMP = 1e-7
SKIP_GAIN = 4.0
SKIP_CENTRE = 0.5

Network = Callable[[Tensor], Tensor]
DirectedMapping = Tuple[GroupLabel, GroupLabel]
Batch = Union[Sequence[Sample], np.ndarray, Tensor]


class TranslationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(2000, ge=0)
    batch: int = Field(8, ge=1)
    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    seed: int = Field(0, ge=0)
    lam: float = Field(10.0, ge=0)
    loss_form: Literal["log", "lsq"] = "log"
    non_saturating: bool = False
    d_steps: int = Field(1, ge=1)
    g_steps: int = Field(1, ge=1)
    generator_hidden: int = Field(64, ge=1)
    skip_gain: float = Field(SKIP_GAIN, ge=0)
    discriminator_hidden: int = Field(32, ge=1)
    log_every: int = Field(200, ge=1)


def as_batch(batch: Batch) -> Tensor:
    if isinstance(batch, Tensor):
        data = batch.data
    elif isinstance(batch, np.ndarray):
        data = batch
    else:
        data = pixel_matrix(list(batch))
    if len(data) == 0:
        raise DataError("Batch must not be empty", {"batch_size": 0})
    data = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
    if np.any(data < 0) or np.any(data > 1):
        raise DataError(
            "Batch pixels must lie in [0, 1]",
            {"min": float(data.min()), "max": float(data.max())},
        )
    return batch if isinstance(batch, Tensor) and batch.ndim == 2 else Tensor(data)


def _adversarial_value(D: Network, real: Tensor, fake: Tensor, form: str) -> Tensor:
    d_real = D(real)
    d_fake = D(fake)
    if form == "lsq":
        return -(((d_real - 1.0) * (d_real - 1.0)).mean() + (d_fake * d_fake).mean())
    d_real = d_real.clamp(D_CLAMP, 1.0 - D_CLAMP)
    d_fake = d_fake.clamp(D_CLAMP, 1.0 - D_CLAMP)
    return d_real.log().mean() + (1.0 - d_fake).log().mean()


def _l1_per_image(reconstruction: Tensor, original: Tensor) -> Tensor:
    return (reconstruction - original).abs().sum(axis=1).mean()


def adversarial_loss(
    G: Network, D_tgt: Network, batch_src: Batch, batch_tgt: Batch, form: str = "log"
) -> Tensor:
    """E[log D_tgt(x_tgt)] + E[log(1 - D_tgt(G(x_src)))] over batch means."""
    x_src, x_tgt = as_batch(batch_src), as_batch(batch_tgt)
    return _adversarial_value(D_tgt, x_tgt, G(x_src), form)


def cycle_consistency_loss(
    G: Network, F: Network, batch_src: Batch, batch_tgt: Batch
) -> Tensor:
    """Batch-averaged per-image L1 norms of F(G(x)) - x and G(F(y)) - y."""
    x, y = as_batch(batch_src), as_batch(batch_tgt)
    return _l1_per_image(F(G(x)), x) + _l1_per_image(G(F(y)), y)


def cycle_residuals(
    G: Network, F: Network, batch_src: Batch, batch_tgt: Batch
) -> np.ndarray:
    """Flattened reconstruction residuals; the L1 kinks sit where these cross zero."""
    x, y = as_batch(batch_src), as_batch(batch_tgt)
    with no_grad():
        forward = (F(G(x)) - x).data
        back = (G(F(y)) - y).data
    return np.concatenate([forward.ravel(), back.ravel()])


class Generator:
    """sigmoid(skip * (x - 0.5) + net(x)) with a tanh hidden layer in net."""

    def __init__(
        self,
        n_pixels: int = N_PIXELS,
        hidden: int = 64,
        skip_gain: float = SKIP_GAIN,
        seed: int = 0,
    ):
        self.net = MLP((n_pixels, hidden, n_pixels), "tanh", "linear", seed)
        self.params = self.net.params
        self.params.add("skip", np.full(n_pixels, float(skip_gain)))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        return ((x - SKIP_CENTRE) * self.params["skip"] + self.net(x)).sigmoid()


class TranslatorPair:
    def __init__(
        self,
        source: GroupLabel,
        target: GroupLabel,
        lam: float = 10.0,
        seed: int = 0,
        n_pixels: int = N_PIXELS,
        generator_hidden: int = 64,
        discriminator_hidden: int = 32,
        skip_gain: float = SKIP_GAIN,
    ):
        self.source, self.target = parse_group(source), parse_group(target)
        if self.source == self.target:
            raise MappingError(
                f"Translator pair needs two distinct groups, got {self.source} twice",
                {"source": self.source.value, "target": self.target.value},
            )
        self.lam = lam
        self.trained = False
        disc_sizes = (n_pixels, discriminator_hidden, 1)
        self.G = Generator(n_pixels, generator_hidden, skip_gain, derive_seed(seed, 0))
        self.F = Generator(n_pixels, generator_hidden, skip_gain, derive_seed(seed, 1))
        self.D_src = MLP(disc_sizes, "tanh", "sigmoid", derive_seed(seed, 2))
        self.D_tgt = MLP(disc_sizes, "tanh", "sigmoid", derive_seed(seed, 3))

    @classmethod
    def from_config(
        cls, source, target, cfg: TranslationConfig, seed: int = 0
    ) -> "TranslatorPair":
        return cls(
            source,
            target,
            lam=cfg.lam,
            seed=seed,
            generator_hidden=cfg.generator_hidden,
            discriminator_hidden=cfg.discriminator_hidden,
            skip_gain=cfg.skip_gain,
        )

    @property
    def name(self) -> str:
        return f"{self.source.value}{self.target.value}"

    @property
    def filename(self) -> str:
        return f"pair_{self.name}.ftns"

    def generator_params(self) -> ParameterSet:
        return ParameterSet.combine({"G": self.G.params, "F": self.F.params})

    def discriminator_params(self) -> ParameterSet:
        return ParameterSet.combine(
            {"D_src": self.D_src.params, "D_tgt": self.D_tgt.params}
        )

    def parameters(self) -> ParameterSet:
        return ParameterSet.combine(
            {
                "G": self.G.params,
                "F": self.F.params,
                "D_src": self.D_src.params,
                "D_tgt": self.D_tgt.params,
            }
        )

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = self.parameters().state_dict()
        state["lambda"] = np.array([self.lam])
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.parameters().load_state_dict(state)
        if "lambda" in state:
            self.lam = float(state["lambda"][0])


def total_translation_loss(
    pair: TranslatorPair, batch_src: Batch, batch_tgt: Batch, form: str = "log"
) -> Tensor:
    """L_GAN(G, D_tgt) + L_GAN(F, D_src) + lambda * L_cyc(G, F)."""
    if pair.lam < 0:
        raise DomainError(
            "Cycle weight lambda must be non-negative", {"lambda": pair.lam}
        )
    x, y = as_batch(batch_src), as_batch(batch_tgt)
    adv_g, adv_f, cyc = _translation_terms(pair, x, y, form)
    return adv_g + adv_f + pair.lam * cyc


def _translation_terms(pair: TranslatorPair, x: Tensor, y: Tensor, form: str):
    g_x, f_y = pair.G(x), pair.F(y)
    adv_g = _adversarial_value(pair.D_tgt, y, g_x, form)
    adv_f = _adversarial_value(pair.D_src, x, f_y, form)
    cyc = _l1_per_image(pair.F(g_x), x) + _l1_per_image(pair.G(f_y), y)
    return adv_g, adv_f, cyc


def _generator_objective(
    pair: TranslatorPair, x: Tensor, y: Tensor, cfg: TranslationConfig
):
    if not cfg.non_saturating:
        adv_g, adv_f, cyc = _translation_terms(pair, x, y, cfg.loss_form)
        return adv_g + adv_f + pair.lam * cyc, cyc
    g_x, f_y = pair.G(x), pair.F(y)
    adv = _fooling_loss(pair.D_tgt(g_x), cfg.loss_form)
    adv = adv + _fooling_loss(pair.D_src(f_y), cfg.loss_form)
    cyc = _l1_per_image(pair.F(g_x), x) + _l1_per_image(pair.G(f_y), y)
    return adv + pair.lam * cyc, cyc


def _fooling_loss(d_fake: Tensor, form: str) -> Tensor:
    if form == "lsq":
        return ((d_fake - 1.0) * (d_fake - 1.0)).mean()
    return -d_fake.clamp(D_CLAMP, 1.0 - D_CLAMP).log().mean()


@dataclass
class TranslationTrace:
    pair: str
    loss_G: List[float] = field(default_factory=list)
    loss_D_src: List[float] = field(default_factory=list)
    loss_D_tgt: List[float] = field(default_factory=list)
    loss_cyc: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.loss_G)

    def to_csv(self) -> str:
        losses = zip(self.loss_G, self.loss_D_src, self.loss_D_tgt)
        rows = [
            [step, format_float(g), format_float(ds), format_float(dt)]
            for step, (g, ds, dt) in enumerate(losses)
        ]
        return csv_text(["step", "loss_G", "loss_D_src", "loss_D_tgt"], rows)


def train_pair(
    pair: TranslatorPair, dataset: DomainDataset, cfg: TranslationConfig
) -> Tuple[TranslatorPair, TranslationTrace]:
    """
    Alternate discriminator ascent on the adversarial terms with generator
    descent on the full objective, discriminators frozen during the latter.
    """
    pools = {
        group: pixel_matrix(dataset.in_group(group, original_only=True))
        for group in (pair.source, pair.target)
    }
    for group, pool in pools.items():
        if len(pool) < cfg.batch:
            raise DataError(
                f"Group {group} has {len(pool)} original samples, "
                f"batch needs {cfg.batch}",
                {"group": group.value, "required": cfg.batch, "available": len(pool)},
            )
    src_pool, tgt_pool = pools[pair.source], pools[pair.target]
    rng = np.random.default_rng(cfg.seed)
    gen_params = pair.generator_params()
    disc_params = pair.discriminator_params()
    trace = TranslationTrace(pair.name)

    def draw():
        x = src_pool[rng.choice(len(src_pool), cfg.batch, replace=False)]
        y = tgt_pool[rng.choice(len(tgt_pool), cfg.batch, replace=False)]
        return Tensor(x), Tensor(y)

    for step in range(cfg.steps):
        for _ in range(cfg.d_steps):
            x, y = draw()
            with no_grad():
                fake_tgt, fake_src = pair.G(x), pair.F(y)
            disc_params.zero_grad()
            loss_d_tgt = -_adversarial_value(pair.D_tgt, y, fake_tgt, cfg.loss_form)
            loss_d_src = -_adversarial_value(pair.D_src, x, fake_src, cfg.loss_form)
            backward(loss_d_tgt + loss_d_src)
            adam_step(disc_params, cfg.lr, cfg.beta1, cfg.beta2)

        for _ in range(cfg.g_steps):
            x, y = draw()
            gen_params.zero_grad()
            with disc_params.frozen():
                loss_g, cyc = _generator_objective(pair, x, y, cfg)
                backward(loss_g)
            adam_step(gen_params, cfg.lr, cfg.beta1, cfg.beta2)

        trace.loss_G.append(loss_g.item())
        trace.loss_D_src.append(loss_d_src.item())
        trace.loss_D_tgt.append(loss_d_tgt.item())
        trace.loss_cyc.append(cyc.item())
        if (step + 1) % cfg.log_every == 0:
            logger.debug(
                "pair %s step %d: G=%.4f D_src=%.4f D_tgt=%.4f cyc=%.4f",
                pair.name,
                step + 1,
                trace.loss_G[-1],
                trace.loss_D_src[-1],
                trace.loss_D_tgt[-1],
                trace.loss_cyc[-1],
            )
    gen_params.zero_grad()
    disc_params.zero_grad()
    pair.trained = True
    return pair, trace


class MappingRegistry:
    """The six pairs over four groups and the twelve directed lookups into them."""

    def __init__(self, pairs: Sequence[TranslatorPair]):
        self.pairs: Tuple[TranslatorPair, ...] = tuple(pairs)
        self._lookup: Dict[DirectedMapping, Tuple[TranslatorPair, bool]] = {}
        for pair in self.pairs:
            self._lookup[(pair.source, pair.target)] = (pair, True)
            self._lookup[(pair.target, pair.source)] = (pair, False)

    def __iter__(self) -> Iterator[TranslatorPair]:
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def mappings(self) -> List[DirectedMapping]:
        return sorted(self._lookup, key=lambda m: (m[0].index, m[1].index))

    def lookup(self, src: GroupLabel, tgt: GroupLabel) -> Tuple[TranslatorPair, bool]:
        """Resolve src -> tgt to (pair, True) for G or (pair, False) for F."""
        src, tgt = parse_group(src), parse_group(tgt)
        if src == tgt:
            raise MappingError(
                f"No mapping from {src} to itself", {"source": src.value}
            )
        if (src, tgt) not in self._lookup:
            raise MappingError(
                f"Unknown mapping {src}->{tgt}",
                {"source": src.value, "target": tgt.value},
            )
        return self._lookup[(src, tgt)]

    def generator(self, src: GroupLabel, tgt: GroupLabel) -> Network:
        pair, forward = self.lookup(src, tgt)
        return pair.G if forward else pair.F


def build_registry(
    groups: Sequence[GroupLabel] = GROUPS,
    cfg: Optional[TranslationConfig] = None,
    seed: int = 0,
) -> MappingRegistry:
    cfg = cfg or TranslationConfig()
    parsed = [parse_group(g) for g in groups]
    names = {"groups": [g.value for g in parsed]}
    if len(set(parsed)) != len(parsed):
        raise MappingError("Duplicate groups in registry request", names)
    if len(parsed) != 4:
        raise MappingError("Registry needs exactly four groups", names)
    pairs = [
        TranslatorPair.from_config(a, b, cfg, seed=derive_seed(seed, a.index, b.index))
        for a, b in itertools.combinations(sorted(parsed), 2)
    ]
    return MappingRegistry(pairs)


def train_registry(
    registry: MappingRegistry,
    dataset: DomainDataset,
    cfg: TranslationConfig,
    workers: int = 1,
) -> Dict[str, TranslationTrace]:
    """Train all six pairs, each with its own derived seed, in a fixed order."""

    def job(pair: TranslatorPair) -> TranslationTrace:
        pair_cfg = cfg.model_copy(
            update={"seed": derive_seed(cfg.seed, pair.source.index, pair.target.index)}
        )
        logger.info("Training translator pair %s for %d steps", pair.name, cfg.steps)
        return train_pair(pair, dataset, pair_cfg)[1]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        traces = list(pool.map(job, registry.pairs))
    return {trace.pair: trace for trace in traces}


def translate(
    sample: Sample, src: GroupLabel, tgt: GroupLabel, registry: MappingRegistry
) -> Sample:
    src, tgt = parse_group(src), parse_group(tgt)
    if src == tgt:
        raise MappingError(f"Cannot translate {src} into itself", {"source": src.value})
    if sample.is_synthesized:
        raise DataError(
            f"Sample {sample.sample_id} is already synthesized; "
            "chained translation is not allowed",
            {"sample_id": sample.sample_id},
        )
    if sample.group != src:
        raise DataError(
            f"Sample {sample.sample_id} belongs to {sample.group}, not {src}",
            {"sample_id": sample.sample_id, "group": sample.group.value},
        )
    generator = registry.generator(src, tgt)
    with no_grad():
        out = generator(Tensor(sample.flat()[None, :])).data[0]
    return with_provenance(sample, out.reshape(IMAGE_SIDE, IMAGE_SIDE), tgt)


def save_registry(registry: MappingRegistry, directory: PathLike) -> List[Path]:
    directory = Path(directory)
    paths = []
    for pair in registry:
        path = directory / pair.filename
        save_checkpoint(path, pair.state_dict())
        paths.append(path)
    return paths


def load_registry(
    directory: PathLike, cfg: Optional[TranslationConfig] = None
) -> MappingRegistry:
    directory = Path(directory)
    registry = build_registry(GROUPS, cfg)
    for pair in registry:
        path = directory / pair.filename
        if not path.exists():
            raise ArtifactError(
                f"Translator pair {pair.name} has no trained weights ({path})",
                {"pair": pair.name, "path": str(path)},
            )
        pair.load_state_dict(load_checkpoint(path))
        pair.trained = True
    return registry
