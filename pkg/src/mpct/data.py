"""Synthetic domains with a hidden ground-truth pairing, PNG ingestion and
unaligned minibatch streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .losses import Minibatch

KINDS = ("identity", "channel_permutation", "uniform_noise", "stripe_overlay", "brightness_shift")

# disjoint per-channel colour ranges: every base pixel has R > G > B, which
# makes channel-permuted domains separable from their channel statistics
_PALETTE = ((0.3, 1.0), (-0.3, 0.3), (-1.0, -0.3))


@dataclass(frozen=True)
class SynthTransformSpec:
    kind: str = "identity"
    permutation: tuple = (0, 1, 2)
    amplitude: float = 0.2
    period: int = 6
    intensity: float = 0.6
    shift: float = 0.2
    seed: int = 0

    def validate(self, channels: int = 3) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "channel_permutation" and sorted(self.permutation) != list(range(channels)):
            raise ConfigError(f"permutation {self.permutation} is not a permutation of {channels} channels")
        if self.kind == "uniform_noise" and not 0 < self.amplitude <= 1:
            raise ConfigError(f"noise amplitude must be in (0, 1], got {self.amplitude}")
        if self.kind == "stripe_overlay":
            if self.period < 2:
                raise ConfigError(f"stripe period must be >= 2, got {self.period}")
            if not 0 < self.intensity <= 1:
                raise ConfigError(f"stripe intensity must be in (0, 1], got {self.intensity}")
        if self.kind == "brightness_shift" and not -1 <= self.shift <= 1:
            raise ConfigError(f"brightness shift must be in [-1, 1], got {self.shift}")

    def apply(self, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Transform a (n, C, H, W) stack in [-1, 1]; output stays in [-1, 1]."""
        if self.kind == "identity":
            return images.copy()
        if self.kind == "channel_permutation":
            return images[:, list(self.permutation)].copy()
        if self.kind == "uniform_noise":
            noise = rng.uniform(-self.amplitude, self.amplitude, size=images.shape)
            return np.clip(images + noise, -1.0, 1.0)
        if self.kind == "stripe_overlay":
            n, _, h, w = images.shape
            rows, cols = np.indices((h, w))
            phase = rng.integers(0, self.period, size=n)
            mask = ((rows[None] + cols[None] + phase[:, None, None]) % self.period == 0)[:, None]
            return np.where(mask, (1 - self.intensity) * images + self.intensity, images)
        return np.clip(images + self.shift, -1.0, 1.0)


def invert_permutation(perm: Sequence[int]) -> tuple:
    inv = np.empty(len(perm), dtype=int)
    inv[list(perm)] = np.arange(len(perm))
    return tuple(int(v) for v in inv)


@dataclass
class DomainRegistry:
    names: dict[int, str]

    def __post_init__(self):
        ids = sorted(self.names)
        if len(ids) < 2:
            raise ConfigError(f"need at least 2 domains, got {len(ids)}")
        if ids != list(range(1, len(ids) + 1)):
            raise ConfigError(f"domain ids must be contiguous from 1, got {ids}")

    @property
    def n_domains(self) -> int:
        return len(self.names)

    @property
    def ids(self) -> list[int]:
        return sorted(self.names)


@dataclass
class DomainDataset:
    """Images of one domain as a (n, C, H, W) array in [-1, 1].

    ``_pairing`` maps each image to the base image it was made from. It only
    exists for synthetic domains and is read exclusively through
    :func:`paired_targets`.
    """

    domain: int
    images: np.ndarray
    name: str = ""
    _pairing: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) == 0:
            raise DataError(f"domain {self.domain}: expected a non-empty (n, C, H, W) stack, got {self.images.shape}")
        if self.images.min() < -1.0 or self.images.max() > 1.0:
            raise DataError(f"domain {self.domain}: images outside [-1, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    @property
    def has_ground_truth(self) -> bool:
        return self._pairing is not None


def paired_targets(src: DomainDataset, dst: DomainDataset) -> np.ndarray:
    """Images of ``dst`` aligned with ``src``: row m is the ``dst`` rendition of
    the base image behind ``src.images[m]``."""
    if src._pairing is None or dst._pairing is None:
        raise DataError(f"domains {src.domain} and {dst.domain} carry no ground-truth pairing")
    where = np.empty(int(dst._pairing.max()) + 1, dtype=int)
    where[dst._pairing] = np.arange(len(dst._pairing))
    return dst.images[where[src._pairing]]


def _draw_color(rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(lo, hi) for lo, hi in _PALETTE])


def base_images(count: int, image_shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Random rectangles and discs on a plain background."""
    c, h, w = image_shape
    if c != 3:
        raise ConfigError(f"synthetic images are RGB, got {c} channels")
    out = np.empty((count, c, h, w))
    rows, cols = np.indices((h, w))
    for n in range(count):
        img = np.broadcast_to(_draw_color(rng)[:, None, None], (c, h, w)).copy()
        for _ in range(rng.integers(1, 4)):
            color = _draw_color(rng)
            if rng.random() < 0.5:
                y0, x0 = rng.integers(0, h - 2), rng.integers(0, w - 2)
                y1 = min(h, y0 + rng.integers(3, max(4, h // 2)))
                x1 = min(w, x0 + rng.integers(3, max(4, w // 2)))
                mask = (rows >= y0) & (rows < y1) & (cols >= x0) & (cols < x1)
            else:
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                r = rng.uniform(2, max(3, min(h, w) / 4))
                mask = (rows - cy) ** 2 + (cols - cx) ** 2 <= r * r
            img[:, mask] = color[:, None]
        out[n] = img
    return out


def synth_build(base_count: int, image_shape: tuple, specs: Mapping[int, SynthTransformSpec] | Sequence[SynthTransformSpec],
                seed: int) -> dict[int, DomainDataset]:
    """One dataset per domain, each a transformed and independently shuffled
    copy of a common set of base images."""
    if base_count < 1:
        raise ConfigError(f"base_count must be >= 1, got {base_count}")
    if not isinstance(specs, Mapping):
        specs = {n + 1: s for n, s in enumerate(specs)}
    for s in specs.values():
        s.validate(image_shape[0])
    base = base_images(base_count, tuple(image_shape), np.random.default_rng([seed, 0]))
    out = {}
    for domain, spec in sorted(specs.items()):
        rng = np.random.default_rng([seed, domain, spec.seed])
        transformed = spec.apply(base, rng)
        order = rng.permutation(base_count)
        out[domain] = DomainDataset(domain, transformed[order], spec.kind, _pairing=order)
    return out


def load_image_dir(path, image_shape: tuple, domain: int = 1) -> DomainDataset:
    """Decode every PNG in ``path`` (sorted by name), resize, map to [-1, 1]."""
    from PIL import Image

    path = Path(path)
    if not path.is_dir():
        raise ConfigError(f"image directory {path} does not exist")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise ConfigError(f"image directory {path} contains no PNG files")
    c, h, w = image_shape
    if c != 3:
        raise ConfigError(f"PNG ingestion produces RGB images, got {c} channels")
    out = np.empty((len(files), c, h, w))
    for n, f in enumerate(files):
        try:
            with Image.open(f) as im:
                if im.mode not in ("RGB", "RGBA", "L", "P"):
                    raise DataError(f"{f}: unsupported PNG mode {im.mode} (need 8-bit RGB)")
                im = im.convert("RGB")
                if im.size != (w, h):
                    im = im.resize((w, h), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float64)
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"cannot decode image {f}: {exc}") from exc
        out[n] = arr.transpose(2, 0, 1) / 127.5 - 1.0
    return DomainDataset(domain, out, path.name)


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator per (seed, stream id)."""
    return np.random.default_rng([seed, 7919, stream])


def minibatch_iter(dataset: DomainDataset, batch_size: int, rng: np.random.Generator,
                   epochs: int | None = None) -> Iterator[Minibatch]:
    """Reshuffle every epoch; the last short batch of an epoch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            yield Minibatch(dataset.domain, dataset.images[order[start : start + batch_size]])
        epoch += 1
