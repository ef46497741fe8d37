import numpy as np
import pytest
from conftest import TINY_DISC, TINY_GEN
from hypothesis import given, settings
from hypothesis import strategies as st

from mpct.data import SynthTransformSpec, synth_build
from mpct.errors import ConfigError, ShapeError
from mpct.losses import Minibatch, StepContext, _l1_term
from mpct.metrics import (Classifier, ClassifierGateError, FeatureStats, classification_error, consistency_gap,
                          evaluate, feature_stats, frechet_distance, mean_psnr, psnr, stats_from_features,
                          train_eval_classifier)
from mpct.models import CONDITIONAL, PAIRWISE, TranslatorBank

PERMS = ((0, 1, 2), (1, 2, 0), (2, 0, 1))


def perm_sets(count, seed=0):
    return synth_build(count, (3, 16, 16), [SynthTransformSpec("channel_permutation", p) for p in PERMS], seed)


@pytest.fixture(scope="module")
def classifier():
    return train_eval_classifier(perm_sets(40), TINY_DISC, seed=0, steps=150)


@pytest.fixture(scope="module")
def held_out():
    return perm_sets(30, seed=99)


def gauss(mu, var):
    return FeatureStats(np.array([float(mu)]), np.array([[float(var)]]), 10)


def test_psnr_examples():
    a = np.zeros((3, 4, 4))
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 1.0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ShapeError):
        psnr(a, np.zeros((3, 4, 5)))


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(0)
    b = rng.uniform(0, 1, size=(3, 16, 16))
    noise = rng.uniform(-1, 1, size=b.shape)
    vals = [psnr(b, b + amp * noise) for amp in (0.05, 0.1, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_mean_psnr_maps_to_unit_range():
    x = np.zeros((2, 3, 4, 4))
    # a 0.2 offset in [-1, 1] is 0.1 in [0, 1]
    assert mean_psnr(x + 0.2, x) == pytest.approx(20.0, abs=1e-9)


def test_frechet_examples():
    assert frechet_distance(gauss(0, 1), gauss(3, 1)) == pytest.approx(9.0, abs=1e-12)
    assert frechet_distance(gauss(0, 1), gauss(0, 4)) == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(1)
    s = stats_from_features(rng.normal(size=(50, 6)))
    assert frechet_distance(s, s) == pytest.approx(0.0, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_frechet_symmetric_and_nonnegative(seed, dim):
    rng = np.random.default_rng(seed)
    s1 = stats_from_features(rng.normal(size=(20, dim)) @ rng.normal(size=(dim, dim)))
    s2 = stats_from_features(rng.normal(size=(15, dim)) + 0.5)
    d12, d21 = frechet_distance(s1, s2), frechet_distance(s2, s1)
    assert d12 >= 0
    assert abs(d12 - d21) <= 1e-8 * max(1.0, d12)


def test_frechet_matches_commuting_closed_form():
    # diagonal covariances commute: tr sqrt(S1 S2) = sum sqrt(a_i b_i)
    a, b = np.array([1.0, 4.0, 0.25]), np.array([9.0, 1.0, 0.0])
    s1 = FeatureStats(np.zeros(3), np.diag(a), 5)
    s2 = FeatureStats(np.ones(3), np.diag(b), 5)
    expected = 3.0 + np.sum(a + b - 2 * np.sqrt(a * b))
    assert frechet_distance(s1, s2) == pytest.approx(expected, abs=1e-12)


def test_feature_stats_properties(classifier, held_out):
    one = held_out[1].images[:1]
    dup = feature_stats(classifier, np.repeat(one, 10, axis=0))
    assert np.allclose(dup.covariance, 0.0, atol=1e-20)
    imgs = held_out[2].images
    s = feature_stats(classifier, imgs)
    p = feature_stats(classifier, imgs[::-1])
    assert np.allclose(s.mean, p.mean, rtol=0, atol=1e-12)
    assert np.allclose(s.covariance, p.covariance, rtol=0, atol=1e-12)
    twice = feature_stats(classifier, np.concatenate([imgs, imgs]))
    assert np.allclose(twice.mean, s.mean, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        feature_stats(classifier, one)


def test_classifier_passes_gate_on_permuted_domains(classifier, held_out):
    assert classifier.accuracy >= 0.99
    errs = classification_error(classifier, {d: held_out[d].images for d in (1, 2, 3)})
    assert all(e <= 0.02 for e in errs.values())
    wrong = classification_error(classifier, {1: held_out[2].images, 2: held_out[3].images, 3: held_out[1].images})
    assert all(e >= 0.98 for e in wrong.values())
    with pytest.raises(ShapeError):
        classification_error(classifier, {1: held_out[1].images[:0]})


def test_classifier_deterministic(classifier, held_out):
    again = train_eval_classifier(perm_sets(40), TINY_DISC, seed=0, steps=150)
    for (_, a), (_, b) in zip(classifier.net.params.items(), again.net.params.items()):
        assert np.array_equal(a.data, b.data)
    x = held_out[3].images
    assert np.array_equal(classifier.features(x), classifier.features(x))


def test_classifier_errors():
    sets = perm_sets(40)
    with pytest.raises(ConfigError):
        train_eval_classifier({1: sets[1]}, TINY_DISC)
    weak = Classifier(None, (1, 2), accuracy=0.5)
    with pytest.raises(ClassifierGateError):
        classification_error(weak, {1: np.zeros((1, 3, 8, 8))})


class IdentityBank:
    def translate(self, i, j, x):
        return x

    def translate_many(self, reqs):
        return [x for _, _, x in reqs]


def test_consistency_gap_identity_zero(held_out):
    assert consistency_gap(IdentityBank(), 1, 2, 3, held_out[1].images) == 0.0
    with pytest.raises(ConfigError):
        consistency_gap(IdentityBank(), 1, 2, 2, held_out[1].images)


@pytest.mark.parametrize("mode", [PAIRWISE, CONDITIONAL])
def test_consistency_gap_equals_loss_term(mode):
    bank = TranslatorBank.build(mode, (1, 2, 3), TINY_GEN, seed=1)
    images = np.random.default_rng(0).uniform(-1, 1, size=(5, 3, 8, 8))
    ctx = StepContext(bank, [Minibatch(1, images)])
    term = _l1_term(ctx, ctx.one_hop(1, 2), ctx.two_hop(1, 3, 2)).item()
    gap = consistency_gap(bank, 1, 2, 3, images, chunk=2)
    assert gap >= 0
    assert gap == pytest.approx(term, rel=1e-12)


def test_evaluate_keys_and_purity(held_out):
    bank = TranslatorBank.build(CONDITIONAL, (1, 2, 3), TINY_GEN, seed=0)
    small = perm_sets(4)
    kw = dict(step=0, pairs=[(1, 2), (2, 1)], triples=[(1, 2, 3)])
    a = evaluate(bank, small, **kw)
    b = evaluate(bank, small, **kw)
    assert a.values == b.values
    assert {"gap/1-2|3", "gap_mean", "psnr/1-2", "psnr/2-1", "psnr_mean"} <= set(a.values)
    assert set(evaluate(bank, small, metrics=("psnr",), **kw).values) == {"psnr/1-2", "psnr/2-1", "psnr_mean"}
    with pytest.raises(ConfigError):
        evaluate(bank, small, metrics=("bleu",), **kw)


def test_evaluate_with_classifier(classifier, held_out):
    bank = TranslatorBank.build(PAIRWISE, (1, 2, 3), TINY_GEN, seed=0, pairs=[(1, 2), (2, 1)])
    rep = evaluate(bank, held_out, step=3, pairs=[(1, 2)], triples=[], metrics=("cls_error", "fid"),
                   classifier=classifier)
    assert 0 <= rep.values["cls_error/1-2"] <= 1
    assert rep.values["fid/1-2"] >= 0
    assert rep.classification_errors() == {"cls_error/1-2": rep.values["cls_error/1-2"]}
