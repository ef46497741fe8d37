"""Evaluation metrics: PSNR, Frechet distance over classifier features,
classification error of translated images and the consistency gap."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DomainDataset, stream_rng
from .errors import ConfigError, MPCTError, ShapeError
from .models import Discriminator, DiscriminatorSpec, TranslatorBank

GATE_ACCURACY = 0.98
EIG_FLOOR = 1e-12


class ClassifierGateError(MPCTError):
    """The evaluation classifier is not accurate enough to score images."""


def to_unit(x: np.ndarray) -> np.ndarray:
    """Map [-1, 1] images to [0, 1]."""
    return (np.asarray(x) + 1.0) / 2.0


def psnr(a: np.ndarray, b: np.ndarray, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    if max_value <= 0:
        raise ValueError(f"max_value must be positive, got {max_value}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(max_value**2 / mse))


def mean_psnr(restored: np.ndarray, clean: np.ndarray) -> float:
    """Average per-image PSNR of [-1, 1] stacks, computed on [0, 1]."""
    vals = [psnr(to_unit(r), to_unit(c)) for r, c in zip(restored, clean)]
    return float(np.mean(vals))


@dataclass
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 2:
            raise ValueError(f"feature statistics need >= 2 samples, got {self.sample_count}")


def stats_from_features(feats: np.ndarray) -> FeatureStats:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise ValueError(f"need a (n >= 2, d) feature matrix, got {feats.shape}")
    cov = np.cov(feats, rowvar=False, ddof=1).reshape(feats.shape[1], feats.shape[1])
    return FeatureStats(feats.mean(axis=0), (cov + cov.T) / 2.0, len(feats))


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    w = np.where(w > EIG_FLOOR, w, 0.0)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(s1: FeatureStats, s2: FeatureStats) -> float:
    """Frechet distance between the Gaussians N(mu1, S1) and N(mu2, S2).

    The cross term tr((S1 S2)^(1/2)) is evaluated as the trace of the square
    root of the symmetric PSD matrix S1^(1/2) S2 S1^(1/2).
    """
    if s1.mean.shape != s2.mean.shape:
        raise ShapeError(f"frechet_distance: dimensions {s1.mean.shape} and {s2.mean.shape} differ")
    diff = s1.mean - s2.mean
    r1 = _sqrt_psd(s1.covariance)
    inner = r1 @ s2.covariance @ r1
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    cross = float(np.sum(np.sqrt(np.where(w > EIG_FLOOR, w, 0.0))))
    value = float(diff @ diff + np.trace(s1.covariance) + np.trace(s2.covariance) - 2.0 * cross)
    return max(value, 0.0)


class Classifier:
    """Domain classifier with the discriminator architecture."""

    def __init__(self, net: Discriminator, domains: Sequence[int], accuracy: float):
        self.net = net
        self.domains = tuple(domains)
        self.accuracy = accuracy

    @property
    def passed_gate(self) -> bool:
        return self.accuracy >= GATE_ACCURACY

    def require_gate(self) -> None:
        if not self.passed_gate:
            raise ClassifierGateError(
                f"evaluation classifier held-out accuracy {self.accuracy:.4f} is below {GATE_ACCURACY}")

    def _batches(self, images: np.ndarray, size: int = 64):
        for start in range(0, len(images), size):
            yield Tensor(images[start : start + size])

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Predicted domain ids."""
        out = []
        with ad.no_grad():
            for x in self._batches(images):
                _, logits = self.net(x)
                out.append(np.argmax(logits.data, axis=1))
        idx = np.concatenate(out)
        return np.array(self.domains)[idx]

    def features(self, images: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return np.concatenate([self.net.features(x).data for x in self._batches(images)])


def train_eval_classifier(datasets: Mapping[int, DomainDataset], arch: DiscriminatorSpec | None = None,
                          seed: int = 0, steps: int = 300, batch_size: int = 16, lr: float = 1e-3,
                          holdout: float = 0.2) -> Classifier:
    """Fit a domain classifier on a split of ``datasets`` and measure held-out accuracy."""
    from .training import Adam

    if len(datasets) < 2:
        raise ConfigError(f"classifier needs >= 2 domains, got {len(datasets)}")
    for d in datasets.values():
        if len(d) < 20:
            raise ConfigError(f"classifier needs >= 20 images per domain, domain {d.domain} has {len(d)}")
    arch = arch or DiscriminatorSpec()
    domains = sorted(datasets)
    rng = stream_rng(seed, 104729)
    train_x, train_y, test_x, test_y = [], [], [], []
    for label, dom in enumerate(domains):
        imgs = datasets[dom].images
        order = rng.permutation(len(imgs))
        n_test = max(1, int(round(holdout * len(imgs))))
        test_x.append(imgs[order[:n_test]])
        test_y.append(np.full(n_test, label))
        train_x.append(imgs[order[n_test:]])
        train_y.append(np.full(len(imgs) - n_test, label))
    train_x, train_y = np.concatenate(train_x), np.concatenate(train_y)
    test_x, test_y = np.concatenate(test_x), np.concatenate(test_y)

    net = Discriminator(arch, train_x.shape[1:], n_classes=len(domains), seed=seed)
    opt = Adam(net.params, beta1=0.9)
    for _ in range(steps):
        pick = rng.choice(len(train_x), size=min(batch_size, len(train_x)), replace=False)
        _, logits = net(Tensor(train_x[pick]))
        onehot = np.eye(len(domains))[train_y[pick]]
        loss = ad.mul(ad.sum(ad.mul(ad.log_softmax(logits, axis=1), Tensor(onehot))), -1.0 / len(pick))
        opt.step(ad.backward(loss, net.params), lr)
    clf = Classifier(net, domains, accuracy=1.0)
    clf.accuracy = float(np.mean(clf.predict(test_x) == np.array(domains)[test_y]))
    return clf


def classification_error(classifier: Classifier, generated: Mapping[int, np.ndarray]) -> dict[int, float]:
    """Fraction of images per intended target domain classified as another domain."""
    classifier.require_gate()
    out = {}
    for target, images in generated.items():
        if len(images) == 0:
            raise ShapeError(f"no generated images for target domain {target}")
        out[target] = float(np.mean(classifier.predict(np.asarray(images)) != target))
    return out


def feature_stats(classifier: Classifier, images: np.ndarray) -> FeatureStats:
    """Mean and unbiased covariance of penultimate classifier activations."""
    if len(images) < 2:
        raise ValueError(f"feature statistics need >= 2 images, got {len(images)}")
    return stats_from_features(classifier.features(np.asarray(images)))


def translate_images(bank: TranslatorBank, i: int, j: int, images: np.ndarray, chunk: int = 32) -> np.ndarray:
    with ad.no_grad():
        return np.concatenate([bank.translate(i, j, Tensor(images[s : s + chunk])).data
                               for s in range(0, len(images), chunk)])


def consistency_gap(bank: TranslatorBank, i: int, j: int, k: int, images: np.ndarray, chunk: int = 32) -> float:
    """Mean per-pixel |f_ij(x) - f_kj(f_ik(x))| over ``images`` from domain i."""
    if len({i, j, k}) != 3:
        raise ConfigError(f"consistency gap needs distinct domains, got {(i, j, k)}")
    total = 0.0
    with ad.no_grad():
        for s in range(0, len(images), chunk):
            x = Tensor(images[s : s + chunk])
            direct, via = bank.translate_many([(i, j, x), (i, k, x)])
            total += float(np.abs(direct.data - bank.translate(k, j, via).data).sum())
    return total / np.asarray(images).size


@dataclass
class MetricsReport:
    step: int
    values: dict[str, float] = field(default_factory=dict)

    def classification_errors(self) -> dict[str, float]:
        return {k: v for k, v in self.values.items() if k.startswith("cls_error/")}


def evaluate(bank: TranslatorBank, eval_sets: Mapping[int, DomainDataset], *, step: int,
             pairs: Sequence[tuple[int, int]], triples: Sequence[tuple[int, int, int]],
             metrics: Sequence[str] = ("gap", "psnr"), classifier: Classifier | None = None) -> MetricsReport:
    """Compute the requested metric families on held-out sets.

    Keys: ``gap/i-j|k``, ``psnr/i-j``, ``cls_error/i-j``, ``fid/i-j`` and the
    means ``gap_mean``, ``psnr_mean``, ``cls_error_mean``, ``fid_mean``.
    """
    values: dict[str, float] = {}
    wanted = set(metrics)
    unknown = wanted - {"gap", "psnr", "cls_error", "fid"}
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}")
    if "gap" in wanted and triples:
        gaps = [consistency_gap(bank, i, j, k, eval_sets[i].images) for i, j, k in triples]
        values.update({f"gap/{i}-{j}|{k}": g for (i, j, k), g in zip(triples, gaps)})
        values["gap_mean"] = float(np.mean(gaps))
    need_translations = wanted & {"psnr", "cls_error", "fid"}
    outputs = {(i, j): translate_images(bank, i, j, eval_sets[i].images) for i, j in pairs} if need_translations else {}
    if "psnr" in wanted:
        from .data import paired_targets

        vals = []
        for (i, j), out in outputs.items():
            if eval_sets[i].has_ground_truth and eval_sets[j].has_ground_truth:
                v = mean_psnr(out, paired_targets(eval_sets[i], eval_sets[j]))
                values[f"psnr/{i}-{j}"] = v
                vals.append(v)
        if vals:
            values["psnr_mean"] = float(np.mean(vals))
    if "cls_error" in wanted:
        if classifier is None:
            raise ConfigError("cls_error metric needs an evaluation classifier")
        errs = []
        for (i, j), out in outputs.items():
            e = classification_error(classifier, {j: out})[j]
            values[f"cls_error/{i}-{j}"] = e
            errs.append(e)
        values["cls_error_mean"] = float(np.mean(errs))
    if "fid" in wanted:
        if classifier is None:
            raise ConfigError("fid metric needs an evaluation classifier")
        fids = []
        for (i, j), out in outputs.items():
            v = frechet_distance(feature_stats(classifier, out), feature_stats(classifier, eval_sets[j].images))
            values[f"fid/{i}-{j}"] = v
            fids.append(v)
        values["fid_mean"] = float(np.mean(fids))
    return MetricsReport(step, values)
