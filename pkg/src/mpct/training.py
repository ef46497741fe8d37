"""Optimization: Adam, the block-linear learning-rate schedule, random
domain-triple selection and the alternating critic/generator update."""

from __future__ import annotations

import ctypes
import ctypes.util
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Gradients, ParamSet
from .data import DomainDataset, minibatch_iter, stream_rng
from .errors import ConfigError, MPCTError, NumericDomainError
from .losses import LossBundle, Minibatch, Objectives, StepContext, build_objectives, rotations
from .metrics import Classifier, MetricsReport, evaluate
from .models import CONDITIONAL, PAIRWISE, DiscriminatorBank, DiscriminatorSpec, GeneratorSpec, TranslatorBank

MODE_NAMES = {
    "pairwise-cyclegan": PAIRWISE,
    "conditional-stargan": CONDITIONAL,
    PAIRWISE: PAIRWISE,
    CONDITIONAL: CONDITIONAL,
}


class TrainingDiverged(MPCTError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainingConfig:
    n_domains: int = 3
    mode: str = "conditional-stargan"
    alpha: float = 0.1
    beta: float = 0.1
    lr0: float = 1e-4
    decay_block: int = 10
    epochs: int = 10
    max_steps: int = 0
    batch_size: int = 1
    consistency_enabled: bool = True
    seed: int = 0
    auxiliary_domain: int | None = None
    saturating_gan: bool = False
    pixel_mean: bool = True
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 100
    gen_width: int = 16
    gen_down: int = 2
    gen_res: int = 2
    disc_width: int = 16
    disc_layers: int = 3
    learnable_label: bool = False

    def validate(self) -> None:
        if self.mode not in MODE_NAMES:
            raise ConfigError(f"mode must be one of {sorted(MODE_NAMES)}, got {self.mode!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be >= 0 (got {self.alpha}, {self.beta})")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.n_domains < 2:
            raise ConfigError(f"n_domains must be >= 2, got {self.n_domains}")
        if self.n_domains == 2:
            if self.auxiliary_domain is None:
                raise ConfigError("two-domain training needs auxiliary_domain")
            if self.auxiliary_domain != 3:
                raise ConfigError(f"auxiliary_domain must be 3 (the id after the task domains), "
                                  f"got {self.auxiliary_domain}")
        elif self.auxiliary_domain is not None:
            raise ConfigError("auxiliary_domain is only used when n_domains = 2")
        for name in ("decay_block", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("epochs and max_steps must be >= 0")

    @property
    def translator_mode(self) -> str:
        return MODE_NAMES[self.mode]

    @property
    def task_domains(self) -> list[int]:
        return list(range(1, self.n_domains + 1))

    @property
    def all_domains(self) -> list[int]:
        return self.task_domains + ([self.auxiliary_domain] if self.n_domains == 2 else [])

    def generator_spec(self, channels: int) -> GeneratorSpec:
        return GeneratorSpec(base_width=self.gen_width, n_down=self.gen_down, n_res=self.gen_res,
                             channels=channels, learnable_label=self.learnable_label)

    def discriminator_spec(self, channels: int) -> DiscriminatorSpec:
        return DiscriminatorSpec(base_width=self.disc_width, n_layers=self.disc_layers, channels=channels)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ParamSet) -> "OptimizerState":
        return cls({n: np.zeros(p.shape) for n, p in params.items()},
                   {n: np.zeros(p.shape) for n, p in params.items()})


def adam_step(state: OptimizerState, params: ParamSet, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place. Nothing changes if any gradient is non-finite."""
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericDomainError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: ParamSet, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = OptimizerState.zeros(params)

    def step(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        adam_step(self.state, self.params, grads, lr, self.beta1, self.beta2, self.eps)


def lr_at(epoch: int, lr0: float, total_epochs: int, block: int = 10) -> float:
    """Constant for the first block, then lr0 * (1 - b / B) where b is the
    index of the current ``block``-epoch block and B = ceil(total / block)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    b = epoch // block
    if b == 0:
        return lr0
    n_blocks = max(1, math.ceil(total_epochs / block))
    return lr0 * max(0.0, 1.0 - b / n_blocks)


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class TripleSelection:
    i: int
    j: int
    k: int

    def __post_init__(self):
        if len({self.i, self.j, self.k}) != 3:
            raise ConfigError(f"triple domains must be distinct, got {(self.i, self.j, self.k)}")

    def __iter__(self):
        return iter((self.i, self.j, self.k))

    def subset(self) -> frozenset:
        return frozenset((self.i, self.j, self.k))


def sample_triple(n_domains: int, rng: np.random.Generator,
                  domains: Sequence[int] | None = None) -> TripleSelection:
    """Uniform 3-subset of the domains, roles set by a uniform rotation."""
    if n_domains < 3:
        raise ConfigError(f"triple sampling needs >= 3 domains, got {n_domains}; "
                          "use an auxiliary domain for two-domain translation")
    domains = list(domains) if domains is not None else list(range(1, n_domains + 1))
    a, b, c = sorted(int(d) for d in rng.choice(domains, size=3, replace=False))
    return TripleSelection(*((a, b, c), (b, c, a), (c, a, b))[int(rng.integers(3))])


# ---------------------------------------------------------------- trainer


def default_eval_plan(config: TrainingConfig) -> tuple[list, list]:
    """(translation pairs, consistency triples) scored during evaluation."""
    tasks = config.task_domains
    if config.n_domains == 2:
        aux = config.auxiliary_domain
        return [(1, 2), (2, 1)], [(1, 2, aux), (2, 1, aux)]
    pairs = [(i, j) for i in tasks for j in tasks if i != j]
    triples = [(i, j, k) for i, j in pairs for k in tasks if k not in (i, j)]
    return pairs, triples


class Trainer:
    """Models, optimizers and input streams of one run."""

    def __init__(self, config: TrainingConfig, train_sets: Mapping[int, DomainDataset]):
        config.validate()
        self.config = config
        missing = [d for d in config.all_domains if d not in train_sets]
        if missing:
            raise ConfigError(f"no training data for domains {missing}")
        shapes = {train_sets[d].image_shape for d in config.all_domains}
        if len(shapes) != 1:
            raise ConfigError(f"all domains must share one image shape, got {sorted(shapes)}")
        self.image_shape = shapes.pop()
        channels = self.image_shape[0]
        domains = config.all_domains
        mode = config.translator_mode
        self.bank = TranslatorBank.build(mode, domains, config.generator_spec(channels), seed=config.seed)
        self.discs = DiscriminatorBank.build(mode, domains, config.discriminator_spec(channels),
                                             self.image_shape, seed=config.seed + 100003)
        self.gen_params = self.bank.params()
        self.disc_params = self.discs.params()
        adam = dict(beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
        self.opt_g = Adam(self.gen_params, **adam)
        self.opt_d = Adam(self.disc_params, **adam)
        self.train_sets = dict(train_sets)
        self.streams = {d: minibatch_iter(train_sets[d], config.batch_size, stream_rng(config.seed, d))
                        for d in domains}
        self.triple_rng = stream_rng(config.seed, 0)
        self.step = 0
        self.last_checkpoint: str | None = None
        largest = max(len(train_sets[d]) for d in domains)
        self.steps_per_epoch = math.ceil(largest / config.batch_size)

    @property
    def total_steps(self) -> int:
        if self.config.max_steps:
            return self.config.max_steps
        return self.config.epochs * self.steps_per_epoch

    @property
    def schedule_epochs(self) -> int:
        return max(self.config.epochs, math.ceil(self.total_steps / self.steps_per_epoch))

    def lr(self) -> float:
        c = self.config
        return lr_at(self.step // self.steps_per_epoch, c.lr0, self.schedule_epochs, c.decay_block)

    def next_roles(self) -> list[tuple[int, int, int]]:
        c = self.config
        if c.n_domains >= 3:
            return rotations(*sample_triple(c.n_domains, self.triple_rng))
        return [(1, 2, c.auxiliary_domain)]

    def next_batches(self, roles: Sequence[tuple[int, int, int]]) -> dict[int, Minibatch]:
        needed = sorted({d for r in roles for d in r})
        return {d: next(self.streams[d]) for d in needed}

    def objectives(self, batches: Mapping[int, Minibatch], roles: Sequence[tuple[int, int, int]],
                   consistency_enabled: bool | None = None) -> Objectives:
        c = self.config
        ctx = StepContext(self.bank, dict(batches), self.discs, pixel_mean=c.pixel_mean)
        enabled = c.consistency_enabled if consistency_enabled is None else consistency_enabled
        return build_objectives(ctx, roles, c.alpha, c.beta if c.translator_mode == CONDITIONAL else 0.0,
                                consistency_enabled=enabled, saturating=c.saturating_gan)

    def gradients(self, obj: Objectives) -> tuple[Gradients, Gradients]:
        """(generator grads, critic grads) from one shared forward pass."""
        return ad.backward(obj.generator, self.gen_params), ad.backward(obj.discriminator, self.disc_params)

    def train_step(self, batches: Mapping[int, Minibatch] | None = None,
                   roles: Sequence[tuple[int, int, int]] | None = None, lr: float | None = None,
                   update_discriminator: bool = True) -> LossBundle:
        """One critic update followed by one generator update.

        Both gradients are taken from the same forward pass; the critic's
        objective never reaches generator parameters.
        """
        roles = list(roles) if roles is not None else self.next_roles()
        batches = batches if batches is not None else self.next_batches(roles)
        lr = self.lr() if lr is None else lr
        obj = self.objectives(batches, roles)
        values = [v for v in obj.bundle.as_row().values() if v is not None]
        if not np.all(np.isfinite(values)):
            raise TrainingDiverged(f"non-finite loss at step {self.step}; last good checkpoint: {self.last_checkpoint}")
        grads_g, grads_d = self.gradients(obj)
        try:
            if update_discriminator:
                self.opt_d.step(grads_d, lr)
            self.opt_g.step(grads_g, lr)
        except NumericDomainError as exc:
            raise TrainingDiverged(f"{exc} at step {self.step}; last good checkpoint: {self.last_checkpoint}") from exc
        self.step += 1
        return obj.bundle


LOSS_FIELDS = ("dual", "consistency", "gan", "cls_real", "cls_fake", "total", "total_G", "total_D")


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    reports: list[MetricsReport] = field(default_factory=list)

    @property
    def final(self) -> MetricsReport | None:
        return self.reports[-1] if self.reports else None


_allocator_tuned = False


def tune_allocator() -> bool:
    """Keep freed activation buffers in the glibc heap instead of returning them
    to the OS after every op. Training allocates and drops the same large arrays
    each step; with mmap-backed allocations every step pays fresh page faults.
    Returns False where glibc's mallopt is unavailable."""
    global _allocator_tuned
    if _allocator_tuned:
        return True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"))
        mallopt = libc.mallopt
    except (OSError, AttributeError, TypeError):
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    _allocator_tuned = bool(mallopt(m_mmap_threshold, 32 << 20)) and bool(mallopt(m_trim_threshold, 128 << 20))
    return _allocator_tuned


def train(config: TrainingConfig, train_sets: Mapping[int, DomainDataset],
          eval_sets: Mapping[int, DomainDataset] | None = None, *,
          metrics: Sequence[str] = ("gap", "psnr"), classifier: Classifier | None = None,
          pairs: Sequence[tuple[int, int]] | None = None,
          triples: Sequence[tuple[int, int, int]] | None = None,
          on_eval: Callable[[Trainer, dict], None] | None = None,
          trainer: Trainer | None = None) -> tuple[Trainer, TrainHistory]:
    """Run the whole schedule, evaluating at step 0, every ``eval_every``
    steps and after the last step."""
    tune_allocator()
    trainer = trainer or Trainer(config, train_sets)
    default_pairs, default_triples = default_eval_plan(config)
    pairs = default_pairs if pairs is None else list(pairs)
    triples = default_triples if triples is None else list(triples)
    eval_sets = eval_sets if eval_sets is not None else train_sets
    history = TrainHistory()
    pending: list[LossBundle] = []

    def record():
        report = evaluate(trainer.bank, eval_sets, step=trainer.step, pairs=pairs, triples=triples,
                          metrics=metrics, classifier=classifier)
        row = {"step": trainer.step, "epoch": trainer.step // trainer.steps_per_epoch, "lr": trainer.lr()}
        for name in LOSS_FIELDS:
            vals = [getattr(b, name) for b in pending if getattr(b, name) is not None]
            row[name] = float(np.mean(vals)) if vals else None
        row.update(report.values)
        history.rows.append(row)
        history.reports.append(report)
        pending.clear()
        if on_eval is not None:
            on_eval(trainer, row)

    record()
    while trainer.step < trainer.total_steps:
        pending.append(trainer.train_step())
        if trainer.step % config.eval_every == 0 or trainer.step == trainer.total_steps:
            record()
    return trainer, history


def config_dict(config: TrainingConfig) -> dict:
    return asdict(config)
