"""Generators, discriminators and the binary checkpoint format.

Generators follow the usual translation layout (strided conv downsampling,
residual blocks at the bottleneck, transposed-conv upsampling, tanh output),
sized so a 32x32 step trains in tens of milliseconds on one CPU core.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import CheckpointError, ConfigError, ShapeError

PAIRWISE = "pairwise"
CONDITIONAL = "conditional"
MODES = (PAIRWISE, CONDITIONAL)

MAGIC = b"MPCT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    base_width: int = 16
    n_down: int = 2
    n_res: int = 2
    kernel: int = 3
    channels: int = 3
    learnable_label: bool = False

    def validate(self) -> None:
        for name in ("base_width", "kernel", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"GeneratorSpec.{name} must be positive, got {getattr(self, name)}")
        if self.n_down < 0 or self.n_res < 0:
            raise ConfigError("GeneratorSpec.n_down and n_res must be >= 0")
        if self.kernel % 2 == 0:
            raise ConfigError(f"GeneratorSpec.kernel must be odd, got {self.kernel}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_width: int = 16
    n_layers: int = 3
    kernel: int = 3
    channels: int = 3
    slope: float = 0.2

    def validate(self) -> None:
        for name in ("base_width", "n_layers", "kernel", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"DiscriminatorSpec.{name} must be positive, got {getattr(self, name)}")


def _he(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def one_hot(domain: int, n_domains: int) -> np.ndarray:
    """Domain ids are 1-based."""
    if not 1 <= domain <= n_domains:
        raise ConfigError(f"domain {domain} outside [1, {n_domains}]")
    v = np.zeros(n_domains)
    v[domain - 1] = 1.0
    return v


class Generator:
    """Image-to-image network; with ``n_labels`` > 0 the target label is
    appended to the input as constant channels.

    Convolutions followed by instance norm carry no bias: the normalization
    would cancel it and leave a parameter with an identically zero gradient.
    """

    def __init__(self, spec: GeneratorSpec, n_labels: int = 0, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.n_labels = n_labels
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        k = spec.kernel
        p = self.params
        cin = spec.channels + n_labels
        if n_labels and spec.learnable_label:
            p.add("label_embedding", Tensor(np.eye(n_labels), requires_grad=True))
        width = spec.base_width
        for i in range(spec.n_down):
            p.add(f"down{i}.w", _he(rng, (width, cin, k, k), cin * k * k))
            p.add(f"down{i}.gamma", Tensor(np.ones(width), requires_grad=True))
            p.add(f"down{i}.beta", Tensor(np.zeros(width), requires_grad=True))
            cin, width = width, width * 2
        width = cin
        for r in range(spec.n_res):
            for j in (1, 2):
                p.add(f"res{r}.conv{j}.w", _he(rng, (width, width, k, k), width * k * k))
                p.add(f"res{r}.conv{j}.gamma", Tensor(np.ones(width), requires_grad=True))
                p.add(f"res{r}.conv{j}.beta", Tensor(np.zeros(width), requires_grad=True))
        for i in range(spec.n_down):
            last = i == spec.n_down - 1
            cout = spec.channels if last else width // 2
            p.add(f"up{i}.w", _he(rng, (width, cout, k, k), width * k * k // 4))
            if last:
                p.add(f"up{i}.b", Tensor(np.zeros(cout), requires_grad=True))
            else:
                p.add(f"up{i}.gamma", Tensor(np.ones(cout), requires_grad=True))
                p.add(f"up{i}.beta", Tensor(np.zeros(cout), requires_grad=True))
            width = cout
        if spec.n_down == 0:
            p.add("out.w", _he(rng, (spec.channels, width, k, k), width * k * k))
            p.add("out.b", Tensor(np.zeros(spec.channels), requires_grad=True))

    @property
    def param_count(self) -> int:
        return self.params.count()

    def label_planes(self, targets: Sequence[int], hw: tuple) -> Tensor:
        """Constant (B, N, H, W) block encoding each sample's target domain."""
        n = self.n_labels
        codes = np.stack([one_hot(t, n) for t in targets])
        if "label_embedding" in self.params:
            rows = ad.matmul(Tensor(codes), self.params["label_embedding"])
            return ad.mul(ad.reshape(rows, (len(targets), n, 1, 1)), Tensor(np.ones((1, 1) + hw)))
        return Tensor(np.broadcast_to(codes[:, :, None, None], (len(targets), n) + hw))

    def __call__(self, x: Tensor, targets: Sequence[int] | None = None) -> Tensor:
        spec, p = self.spec, self.params
        if x.ndim != 4 or x.shape[1] != spec.channels:
            raise ShapeError(f"generator expects (B, {spec.channels}, H, W), got {x.shape}")
        if x.shape[2] % (2 ** spec.n_down) or x.shape[3] % (2 ** spec.n_down):
            raise ShapeError(f"image extent {x.shape[2:]} not divisible by {2 ** spec.n_down}")
        pad = spec.kernel // 2
        h = x
        if self.n_labels:
            if targets is None or len(targets) != x.shape[0]:
                raise ConfigError("conditional generator needs one target label per sample")
            h = ad.concat_channels([x, self.label_planes(targets, x.shape[2:])])
        for i in range(spec.n_down):
            h = ad.conv2d(h, p[f"down{i}.w"], None, stride=2, padding=pad)
            h = ad.relu(ad.normalize_instance(h, p[f"down{i}.gamma"], p[f"down{i}.beta"]))
        for r in range(spec.n_res):
            skip = h
            for j in (1, 2):
                h = ad.conv2d(h, p[f"res{r}.conv{j}.w"], None, stride=1, padding=pad)
                h = ad.normalize_instance(h, p[f"res{r}.conv{j}.gamma"], p[f"res{r}.conv{j}.beta"])
                if j == 1:
                    h = ad.relu(h)
            h = ad.add(h, skip)
        for i in range(spec.n_down):
            bias = p[f"up{i}.b"] if f"up{i}.b" in p else None
            h = ad.conv_transpose2d(h, p[f"up{i}.w"], bias, stride=2, padding=pad, output_padding=1)
            if i < spec.n_down - 1:
                h = ad.relu(ad.normalize_instance(h, p[f"up{i}.gamma"], p[f"up{i}.beta"]))
        if spec.n_down == 0:
            h = ad.conv2d(h, p["out.w"], p["out.b"], stride=1, padding=pad)
        return ad.tanh(h)


def build_generator(spec: GeneratorSpec, conditional: bool, n_domains: int, seed: int) -> Generator:
    if conditional and n_domains < 2:
        raise ConfigError(f"conditional generator needs n_domains >= 2, got {n_domains}")
    return Generator(spec, n_labels=n_domains if conditional else 0, seed=seed)


class Discriminator:
    """Strided conv trunk with a real/fake probability head and an optional
    domain-classification head."""

    def __init__(self, spec: DiscriminatorSpec, image_shape: tuple, n_classes: int = 0, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.image_shape = tuple(image_shape)
        self.n_classes = n_classes
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        k, pad = spec.kernel, spec.kernel // 2
        cin, width = spec.channels, spec.base_width
        h, w = self.image_shape[1:]
        for i in range(spec.n_layers):
            self.params.add(f"conv{i}.w", _he(rng, (width, cin, k, k), cin * k * k))
            self.params.add(f"conv{i}.b", Tensor(np.zeros(width), requires_grad=True))
            if h % 2 or w % 2:
                raise ConfigError(f"discriminator with {spec.n_layers} layers too deep for {image_shape}")
            h, w = (h + 2 * pad - k) // 2 + 1, (w + 2 * pad - k) // 2 + 1
            cin, width = width, width * 2
        self.feature_dim = cin * h * w
        self.params.add("adv.w", Tensor(rng.normal(0.0, 1.0 / np.sqrt(self.feature_dim), size=(self.feature_dim, 1)), requires_grad=True))
        self.params.add("adv.b", Tensor(np.zeros(1), requires_grad=True))
        if n_classes:
            self.params.add("cls.w", Tensor(rng.normal(0.0, 1.0 / np.sqrt(self.feature_dim), size=(self.feature_dim, n_classes)), requires_grad=True))
            self.params.add("cls.b", Tensor(np.zeros(n_classes), requires_grad=True))

    @property
    def param_count(self) -> int:
        return self.params.count()

    def features(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.image_shape:
            raise ShapeError(f"discriminator expects (B,) + {self.image_shape}, got {x.shape}")
        h = x
        for i in range(self.spec.n_layers):
            h = ad.conv2d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], stride=2,
                          padding=self.spec.kernel // 2)
            h = ad.leaky_relu(h, self.spec.slope)
        return ad.flatten(h)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        feats = self.features(x)
        p = self.params
        prob = ad.sigmoid(ad.reshape(ad.add(ad.matmul(feats, p["adv.w"]), p["adv.b"]), (x.shape[0],)))
        logits = ad.add(ad.matmul(feats, p["cls.w"]), p["cls.b"]) if self.n_classes else None
        return prob, logits


def discriminate(d: Discriminator, x: Tensor) -> tuple[Tensor, Tensor | None]:
    return d(x)


class TranslatorBank:
    """All translation maps of one experiment.

    ``pairwise``: one dedicated generator per ordered domain pair.
    ``conditional``: one shared generator fed the target label.
    """

    def __init__(self, mode: str, domains: Sequence[int], generators: dict):
        if mode not in MODES:
            raise ConfigError(f"unknown translator mode {mode!r}")
        self.mode = mode
        self.domains = tuple(domains)
        self.generators = generators

    @classmethod
    def build(cls, mode: str, domains: Sequence[int], spec: GeneratorSpec, seed: int,
              pairs: Iterable[tuple[int, int]] | None = None) -> "TranslatorBank":
        domains = tuple(domains)
        if mode == CONDITIONAL:
            return cls(mode, domains, {None: build_generator(spec, True, len(domains), seed)})
        if pairs is None:
            pairs = [(i, j) for i in domains for j in domains if i != j]
        gens = {}
        for n, (i, j) in enumerate(sorted(pairs)):
            gens[(i, j)] = build_generator(spec, False, len(domains), seed * 1009 + n)
        return cls(mode, domains, gens)

    @property
    def spec(self) -> GeneratorSpec:
        return next(iter(self.generators.values())).spec

    def params(self) -> ParamSet:
        if self.mode == CONDITIONAL:
            return ParamSet.merged({"G": self.generators[None].params})
        return ParamSet.merged({f"G.{i}-{j}": g.params for (i, j), g in self.generators.items()})

    def _label(self, j: int) -> int:
        return self.domains.index(j) + 1

    def _generator(self, i: int, j: int) -> Generator:
        if i == j:
            raise ConfigError(f"translation needs distinct domains, got {i} -> {j}")
        if self.mode == CONDITIONAL:
            if j not in self.domains:
                raise ConfigError(f"domain {j} not in {self.domains}")
            return self.generators[None]
        try:
            return self.generators[(i, j)]
        except KeyError:
            raise ConfigError(f"no generator for pair ({i}, {j})") from None

    def translate(self, i: int, j: int, x: Tensor) -> Tensor:
        g = self._generator(i, j)
        if self.mode == CONDITIONAL:
            return g(x, [self._label(j)] * x.shape[0])
        return g(x)

    def translate_many(self, requests: Sequence[tuple[int, int, Tensor]]) -> list[Tensor]:
        """Evaluate several translations, batching requests that share a network.

        Generators act per sample (instance norm), so batching does not
        change any output.
        """
        groups: dict = {}
        for n, (i, j, x) in enumerate(requests):
            self._generator(i, j)
            key = None if self.mode == CONDITIONAL else (i, j)
            groups.setdefault(key, []).append(n)
        out: list = [None] * len(requests)
        for key, members in groups.items():
            if len(members) == 1:
                i, j, x = requests[members[0]]
                out[members[0]] = self.translate(i, j, x)
                continue
            xs = [requests[n][2] for n in members]
            batch = ad.concat(xs, axis=0)
            if self.mode == CONDITIONAL:
                labels = [self._label(requests[n][1]) for n in members for _ in range(requests[n][2].shape[0])]
                y = self.generators[None](batch, labels)
            else:
                y = self.generators[key](batch)
            start = 0
            for n, x in zip(members, xs):
                out[n] = ad.getitem(y, slice(start, start + x.shape[0]))
                start += x.shape[0]
        return out


class DiscriminatorBank:
    """Per-domain discriminators (pairwise) or one shared critic with a
    classification head (conditional)."""

    def __init__(self, mode: str, domains: Sequence[int], critics: dict):
        self.mode = mode
        self.domains = tuple(domains)
        self.critics = critics

    @classmethod
    def build(cls, mode: str, domains: Sequence[int], spec: DiscriminatorSpec, image_shape: tuple,
              seed: int) -> "DiscriminatorBank":
        domains = tuple(domains)
        if mode == CONDITIONAL:
            return cls(mode, domains, {None: Discriminator(spec, image_shape, len(domains), seed)})
        return cls(mode, domains, {l: Discriminator(spec, image_shape, 0, seed * 1013 + n)
                                   for n, l in enumerate(domains)})

    @property
    def has_classifier(self) -> bool:
        return any(d.n_classes for d in self.critics.values())

    def critic(self, domain: int) -> Discriminator:
        if domain not in self.domains:
            raise ConfigError(f"domain {domain} not in {self.domains}")
        return self.critics[None] if self.mode == CONDITIONAL else self.critics[domain]

    def label(self, domain: int) -> int:
        """0-based class index of ``domain`` for the classification head."""
        return self.domains.index(domain)

    def params(self) -> ParamSet:
        if self.mode == CONDITIONAL:
            return ParamSet.merged({"D": self.critics[None].params})
        return ParamSet.merged({f"D.{l}": d.params for l, d in self.critics.items()})

    def score_many(self, requests: Sequence[tuple[int, Tensor]]) -> list[tuple[Tensor, Tensor | None]]:
        """(prob, logits) per request, one forward pass per distinct critic."""
        groups: dict = {}
        for n, (l, _) in enumerate(requests):
            groups.setdefault(id(self.critic(l)), []).append(n)
        out: list = [None] * len(requests)
        for members in groups.values():
            critic = self.critic(requests[members[0]][0])
            xs = [requests[n][1] for n in members]
            prob, logits = critic(ad.concat(xs, axis=0) if len(xs) > 1 else xs[0])
            start = 0
            for n, x in zip(members, xs):
                sl = slice(start, start + x.shape[0])
                if len(xs) == 1:
                    out[n] = (prob, logits)
                else:
                    out[n] = (ad.getitem(prob, sl), ad.getitem(logits, sl) if logits is not None else None)
                start += x.shape[0]
        return out


# ---------------------------------------------------------------- checkpoints
#
# Layout (little endian):
#   b"MPCT" | u32 version | u32 n_domains | u8 mode (0 pairwise, 1 conditional)
#   | u32 len + UTF-8 JSON metadata (specs, domain ids, image shape, pairs, step)
#   | u32 record count | records
# record: u16 name length | name | u8 ndim | ndim x u32 extents | f64 values


@dataclass
class Checkpoint:
    bank: TranslatorBank
    discs: DiscriminatorBank
    image_shape: tuple
    extra: dict = field(default_factory=dict)


def _named_params(bank: TranslatorBank, discs: DiscriminatorBank) -> ParamSet:
    return ParamSet.merged({"gen": bank.params(), "disc": discs.params()})


def checkpoint_save(path, bank: TranslatorBank, discs: DiscriminatorBank, image_shape: tuple,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    first_critic = next(iter(discs.critics.values()))
    meta = {
        "domains": list(bank.domains),
        "gen_spec": asdict(bank.spec),
        "disc_spec": asdict(first_critic.spec),
        "image_shape": list(image_shape),
        "pairs": [list(k) for k in bank.generators if k is not None],
        "extra": extra or {},
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIB", FORMAT_VERSION, len(bank.domains), MODES.index(bank.mode)))
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    params = _named_params(bank, discs)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path, n_domains: int | None = None) -> Checkpoint:
    """Parse and validate the whole file before building any model."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not an MPCT checkpoint")
    version, stored_n, mode_byte = r.unpack("<IIB")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if mode_byte >= len(MODES):
        raise CheckpointError(f"{path}: unknown mode byte {mode_byte}")
    if n_domains is not None and stored_n != n_domains:
        raise ConfigError(f"{path}: checkpoint has {stored_n} domains, expected {n_domains}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted metadata") from exc
    (count,) = r.unpack("<I")
    values: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        values[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last record")

    mode = MODES[mode_byte]
    domains = meta["domains"]
    if len(domains) != stored_n:
        raise CheckpointError(f"{path}: header and metadata disagree on domain count")
    gspec = GeneratorSpec(**meta["gen_spec"])
    dspec = DiscriminatorSpec(**meta["disc_spec"])
    image_shape = tuple(meta["image_shape"])
    pairs = [tuple(p) for p in meta["pairs"]] or None
    bank = TranslatorBank.build(mode, domains, gspec, seed=0, pairs=pairs)
    discs = DiscriminatorBank.build(mode, domains, dspec, image_shape, seed=0)
    params = _named_params(bank, discs)
    if set(params) != set(values):
        raise CheckpointError(f"{path}: parameter names do not match the stored architecture")
    for name, t in params.items():
        if t.shape != values[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {values[name].shape} vs {t.shape}")
        t.data[...] = values[name]
    return Checkpoint(bank, discs, image_shape, meta.get("extra", {}))
