"""Dual, multi-path consistency, adversarial and classification losses.

All terms of one training step are built from a single :class:`StepContext`,
which memoizes every translation and every critic score. The two-hop
translations penalized by the consistency term are therefore the very same
tensors that enter the fake batches scored by the discriminators.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .models import DiscriminatorBank, TranslatorBank

ONE_HOP = "one-hop"
TWO_HOP = "two-hop"


@dataclass
class Minibatch:
    domain: int
    images: Tensor

    def __post_init__(self):
        if not isinstance(self.images, Tensor):
            self.images = Tensor(self.images)
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ShapeError(f"minibatch images must be (B>=1, C, H, W), got {self.images.shape}")
        d = self.images.data
        if d.min() < -1.0 or d.max() > 1.0:
            raise ValueError(f"minibatch for domain {self.domain} has values outside [-1, 1]")

    @property
    def size(self) -> int:
        return self.images.shape[0]


@dataclass
class FakeImages:
    images: Tensor
    provenance: str
    source: int
    target: int
    via: int | None = None

    @property
    def size(self) -> int:
        return self.images.shape[0]


@dataclass
class FakeBatchSet:
    """Generated images attributed to each domain l (the fake batch of l)."""

    parts: dict[int, list[FakeImages]] = field(default_factory=dict)

    def __getitem__(self, domain: int) -> list[FakeImages]:
        return self.parts[domain]

    def count(self, domain: int) -> int:
        return int(np.sum([p.size for p in self.parts[domain]]))

    def domains(self) -> list[int]:
        return list(self.parts)


def rotations(i: int, j: int, k: int) -> list[tuple[int, int, int]]:
    """Role assignments summed by the three-domain objective."""
    return [(i, j, k), (i, k, j), (j, k, i)]


class StepContext:
    """Memoized translations and critic scores for one set of minibatches."""

    def __init__(self, bank: TranslatorBank, batches: dict[int, Minibatch] | Sequence[Minibatch],
                 discs: DiscriminatorBank | None = None, pixel_mean: bool = True):
        if not isinstance(batches, dict):
            batches = {b.domain: b for b in batches}
        self.bank = bank
        self.discs = discs
        self.batches = batches
        self.pixel_mean = pixel_mean
        self._one: dict[tuple, Tensor] = {}
        self._two: dict[tuple, Tensor] = {}
        self._scores: dict[tuple, tuple] = {}

    def batch(self, domain: int) -> Minibatch:
        try:
            return self.batches[domain]
        except KeyError:
            raise ConfigError(f"no minibatch for domain {domain}") from None

    def x(self, domain: int) -> Tensor:
        return self.batch(domain).images

    # ---- translations

    def one_hop(self, p: int, q: int) -> Tensor:
        """f_{p,q} applied to the minibatch of p."""
        key = (p, q)
        if key not in self._one:
            self._one[key] = self.bank.translate(p, q, self.x(p))
        return self._one[key]

    def two_hop(self, p: int, m: int, q: int) -> Tensor:
        """f_{m,q}(f_{p,m}(x)) for x in the minibatch of p."""
        key = (p, m, q)
        if key not in self._two:
            self._two[key] = self.bank.translate(m, q, self.one_hop(p, m))
        return self._two[key]

    def prefetch(self, roles: Iterable[tuple[int, int, int]]) -> None:
        """Evaluate every translation the given role triples need, batched."""
        ones, twos = [], []
        for i, j, k in roles:
            for key in ((i, j), (j, i), (i, k), (j, k)):
                if key not in self._one and key not in ones:
                    ones.append(key)
            for key in ((i, j, i), (j, i, j), (i, k, j), (j, k, i)):
                if key not in self._two and key not in twos:
                    twos.append(key)
        for key in twos:
            if key[:2] not in self._one and key[:2] not in ones:
                ones.append(key[:2])
        for key, y in zip(ones, self.bank.translate_many([(p, q, self.x(p)) for p, q in ones])):
            self._one[key] = y
        reqs = [(m, q, self._one[(p, m)]) for p, m, q in twos]
        for key, y in zip(twos, self.bank.translate_many(reqs)):
            self._two[key] = y

    # ---- critic scores

    def _critics(self) -> DiscriminatorBank:
        if self.discs is None:
            raise ConfigError("this step context has no discriminators")
        return self.discs

    def fake_key(self, part: FakeImages) -> tuple:
        return (part.source, part.via, part.target)

    def score(self, domain: int, key: tuple, images: Tensor) -> tuple[Tensor, Tensor | None]:
        full = (domain,) + key
        if full not in self._scores:
            self._scores[full] = self._critics().critic(domain)(images)
        return self._scores[full]

    def score_real(self, domain: int) -> tuple[Tensor, Tensor | None]:
        return self.score(domain, ("real",), self.x(domain))

    def score_fake(self, domain: int, part: FakeImages) -> tuple[Tensor, Tensor | None]:
        return self.score(domain, self.fake_key(part), part.images)

    def prefetch_scores(self, roles: Iterable[tuple[int, int, int]]) -> None:
        reqs: list = []
        keys: list = []
        for i, j, k in roles:
            fakes = assemble_fake_batches(self, i, j, k)
            for l in (i, j, k):
                items = [((l, "real"), self.x(l))]
                items += [((l,) + self.fake_key(part), part.images) for part in fakes[l]]
                for key, img in items:
                    if key not in self._scores and key not in keys:
                        keys.append(key)
                        reqs.append((l, img))
        for key, res in zip(keys, self._critics().score_many(reqs)):
            self._scores[key] = res


def _l1_term(ctx: StepContext, a: Tensor, b: Tensor) -> Tensor:
    # (1/|B|) sum over the batch of per-image L1; optionally per pixel too
    norm = a.shape[0] * (int(np.prod(a.shape[1:])) if ctx.pixel_mean else 1)
    return ad.mul(ad.l1_distance(a, b), 1.0 / norm)


def _distinct(*domains: int) -> None:
    if len(set(domains)) != len(domains):
        raise ConfigError(f"domains must be pairwise distinct, got {domains}")


def dual_loss(ctx: StepContext, i: int, j: int) -> Tensor:
    """Round-trip reconstruction error i->j->i plus j->i->j."""
    _distinct(i, j)
    return ad.add(_l1_term(ctx, ctx.x(i), ctx.two_hop(i, j, i)),
                  _l1_term(ctx, ctx.x(j), ctx.two_hop(j, i, j)))


def consistency_loss(ctx: StepContext, i: int, j: int, k: int) -> Tensor:
    """Disagreement between direct translations and the detours through k."""
    _distinct(i, j, k)
    return ad.add(_l1_term(ctx, ctx.one_hop(i, j), ctx.two_hop(i, k, j)),
                  _l1_term(ctx, ctx.one_hop(j, i), ctx.two_hop(j, k, i)))


def assemble_fake_batches(ctx: StepContext, i: int, j: int, k: int) -> FakeBatchSet:
    _distinct(i, j, k)
    parts = {
        k: [FakeImages(ctx.one_hop(i, k), ONE_HOP, i, k), FakeImages(ctx.one_hop(j, k), ONE_HOP, j, k)],
    }
    for l, p in ((i, j), (j, i)):
        parts[l] = [FakeImages(ctx.one_hop(p, l), ONE_HOP, p, l),
                    FakeImages(ctx.two_hop(p, k, l), TWO_HOP, p, l, via=k)]
    return FakeBatchSet({l: parts[l] for l in (i, j, k)})


def _fake_mean(ctx: StepContext, fakes: FakeBatchSet, domain: int, fn) -> Tensor:
    total = None
    for part in fakes[domain]:
        term = ad.sum(fn(ctx.score_fake(domain, part), part))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / fakes.count(domain))


def gan_loss(ctx: StepContext, i: int, j: int, k: int, fakes: FakeBatchSet | None = None) -> Tensor:
    """Sum over the three domains of mean log d(real) + mean log(1 - d(fake))."""
    fakes = fakes if fakes is not None else assemble_fake_batches(ctx, i, j, k)
    total = None
    for l in (i, j, k):
        real = ad.mean(ad.log(ctx.score_real(l)[0]))
        fake = _fake_mean(ctx, fakes, l, lambda s, part: ad.log(ad.sub(1.0, s[0])))
        term = ad.add(real, fake)
        total = term if total is None else ad.add(total, term)
    return total


def generator_adversarial_loss(ctx: StepContext, i: int, j: int, k: int,
                               fakes: FakeBatchSet | None = None) -> Tensor:
    """Non-saturating generator surrogate: sum over domains of -mean log d(fake)."""
    fakes = fakes if fakes is not None else assemble_fake_batches(ctx, i, j, k)
    total = None
    for l in (i, j, k):
        term = _fake_mean(ctx, fakes, l, lambda s, part: ad.mul(ad.log(s[0]), -1.0))
        total = term if total is None else ad.add(total, term)
    return total


def _nll(logits: Tensor | None, cls: int) -> Tensor:
    if logits is None:
        raise ConfigError("classification loss needs a discriminator with a classification head")
    return ad.mul(ad.getitem(ad.log_softmax(logits, axis=1), (slice(None), cls)), -1.0)


def cls_losses(ctx: StepContext, i: int, j: int, k: int,
               fakes: FakeBatchSet | None = None) -> tuple[Tensor, Tensor]:
    """Domain-classification cross entropy on real images and on fakes.

    Fakes are scored against the domain they were generated for.
    """
    discs = ctx._critics()
    if not discs.has_classifier:
        raise ConfigError("classification loss needs a discriminator with a classification head")
    fakes = fakes if fakes is not None else assemble_fake_batches(ctx, i, j, k)
    real_total = fake_total = None
    for l in (i, j, k):
        c = discs.label(l)
        real = ad.mean(_nll(ctx.score_real(l)[1], c))
        fake = _fake_mean(ctx, fakes, l, lambda s, part: _nll(s[1], c))
        real_total = real if real_total is None else ad.add(real_total, real)
        fake_total = fake if fake_total is None else ad.add(fake_total, fake)
    return real_total, fake_total


def total_loss(dual, consistency, gan, alpha: float):
    """dual + consistency + alpha * gan; works on tensors and floats alike."""
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    return dual + consistency + alpha * gan


def stargan_split_losses(dual, consistency, gan, cls_fake, cls_real, alpha: float, beta: float):
    """(generator objective, discriminator objective) for the labelled-critic setup."""
    if alpha < 0 or beta < 0:
        raise ConfigError(f"alpha and beta must be >= 0, got {alpha}, {beta}")
    total_g = dual + consistency + alpha * gan + beta * cls_fake
    total_d = -alpha * gan + beta * cls_real
    return total_g, total_d


def triple_total_loss(ctx: StepContext, i: int, j: int, k: int, alpha: float) -> Tensor:
    """Sum of the per-pair objective over the three role rotations of {i, j, k}."""
    _distinct(i, j, k)
    total = None
    for a, b, c in rotations(i, j, k):
        term = total_loss(dual_loss(ctx, a, b), consistency_loss(ctx, a, b, c),
                          gan_loss(ctx, a, b, c), alpha)
        total = term if total is None else total + term
    return total


@dataclass
class LossBundle:
    dual: float
    consistency: float
    gan: float
    cls_real: float | None
    cls_fake: float | None
    total: float
    total_G: float
    total_D: float

    def as_row(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Objectives:
    """Differentiable objectives of one step plus their reported values."""

    bundle: LossBundle
    generator: Tensor
    discriminator: Tensor
    consistency: Tensor


def build_objectives(ctx: StepContext, roles: Sequence[tuple[int, int, int]], alpha: float,
                     beta: float = 0.0, consistency_enabled: bool = True,
                     saturating: bool = False) -> Objectives:
    """Assemble generator and discriminator objectives summed over ``roles``.

    The discriminator objective only reaches critic parameters when
    differentiated with respect to them, which is the same as scoring
    detached fakes.
    """
    ctx.prefetch(roles)
    ctx.prefetch_scores(roles)
    use_cls = ctx._critics().has_classifier and beta > 0
    sums: dict[str, Tensor | None] = dict.fromkeys(("dual", "cons", "gan", "gan_g", "cls_r", "cls_f"))

    def acc(name, t):
        sums[name] = t if sums[name] is None else ad.add(sums[name], t)

    for i, j, k in roles:
        fakes = assemble_fake_batches(ctx, i, j, k)
        acc("dual", dual_loss(ctx, i, j))
        acc("cons", consistency_loss(ctx, i, j, k))
        acc("gan", gan_loss(ctx, i, j, k, fakes))
        if not saturating:
            acc("gan_g", generator_adversarial_loss(ctx, i, j, k, fakes))
        if use_cls:
            r, f = cls_losses(ctx, i, j, k, fakes)
            acc("cls_r", r)
            acc("cls_f", f)
    cons_used = sums["cons"] if consistency_enabled else 0.0
    gan_g = sums["gan"] if saturating else sums["gan_g"]
    if use_cls:
        obj_g, obj_d = stargan_split_losses(sums["dual"], cons_used, gan_g, sums["cls_f"], sums["cls_r"], alpha, beta)
        reported_d = -alpha * sums["gan"].item() + beta * sums["cls_r"].item()
    else:
        obj_g = total_loss(sums["dual"], cons_used, gan_g, alpha)
        obj_d = ad.mul(sums["gan"], -alpha)
        reported_d = -alpha * sums["gan"].item()
    dual_v, cons_v, gan_v = sums["dual"].item(), sums["cons"].item(), sums["gan"].item()
    bundle = LossBundle(
        dual=dual_v,
        consistency=cons_v,
        gan=gan_v,
        cls_real=sums["cls_r"].item() if use_cls else None,
        cls_fake=sums["cls_f"].item() if use_cls else None,
        total=total_loss(dual_v, cons_v if consistency_enabled else 0.0, gan_v, alpha),
        total_G=obj_g.item(),
        total_D=reported_d,
    )
    return Objectives(bundle, obj_g, obj_d, sums["cons"])
