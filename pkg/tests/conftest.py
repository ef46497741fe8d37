import numpy as np
import pytest

from mpct import autodiff as ad
from mpct.autodiff import Tensor
from mpct.losses import Minibatch
from mpct.models import (CONDITIONAL, PAIRWISE, DiscriminatorBank, DiscriminatorSpec, GeneratorSpec,
                         TranslatorBank)

TINY_GEN = GeneratorSpec(base_width=4, n_down=2, n_res=1)
TINY_DISC = DiscriminatorSpec(base_width=4, n_layers=2)


class MapBank:
    """Translator double: translation (i, j) is ``fns[(i, j)](x)``."""

    def __init__(self, fns, domains=(1, 2, 3)):
        self.fns = fns
        self.domains = tuple(domains)

    def translate(self, i, j, x):
        return self.fns[(i, j)](x)

    def translate_many(self, requests):
        return [self.translate(i, j, x) for i, j, x in requests]


def identity_bank(domains=(1, 2, 3)):
    return MapBank({(i, j): (lambda x: x) for i in domains for j in domains if i != j}, domains)


def offset_bank(offsets, domains=(1, 2, 3)):
    return MapBank({key: (lambda x, c=c: ad.add(x, c)) for key, c in offsets.items()}, domains)


class FnCritics:
    """Critic double: domain l scores images with ``fns[l](x) -> (prob, logits)``."""

    has_classifier = False

    def __init__(self, fns):
        self.fns = fns
        self.domains = tuple(sorted(fns))

    def critic(self, l):
        return self.fns[l]

    def label(self, l):
        return self.domains.index(l)

    def score_many(self, requests):
        return [self.fns[l](x) for l, x in requests]


def pixel_prob(x):
    """Probability equal to each image's first pixel."""
    return ad.reshape(ad.getitem(x, (slice(None), 0, 0, 0)), (x.shape[0],)), None


def random_batches(rng, domains=(1, 2, 3), size=1, shape=(3, 8, 8), sizes=None):
    out = {}
    for d in domains:
        b = sizes[d] if sizes else size
        out[d] = Minibatch(d, rng.uniform(-1, 1, size=(b,) + shape))
    return out


def build_models(mode, domains=(1, 2, 3), seed=0, shape=(3, 8, 8), gen=TINY_GEN, disc=TINY_DISC):
    bank = TranslatorBank.build(mode, domains, gen, seed=seed)
    discs = DiscriminatorBank.build(mode, domains, disc, shape, seed=seed + 1)
    return bank, discs


def zero_heads(discs, adv=True, cls=True):
    for d in discs.critics.values():
        if adv:
            d.params["adv.w"].data[:] = 0.0
            d.params["adv.b"].data[:] = 0.0
        if cls and d.n_classes:
            d.params["cls.w"].data[:] = 0.0
            d.params["cls.b"].data[:] = 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=[PAIRWISE, CONDITIONAL])
def mode(request):
    return request.param


def scalar_tensor(v):
    return Tensor(np.array(v, dtype=float), requires_grad=True)
