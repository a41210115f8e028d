"""Frozen-model adapter contracts and the differentiable composition
text embeddings -> conditioning -> denoised latent -> image -> classifier.

Every objective in the package is built from three calls defined here:
``encode_prompt``, ``generate`` and ``ClassifierProbe.response``.
"""
from __future__ import annotations

import hashlib
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

SOS = "<sos>"
EOS = "<eos>"
LEARNABLE_MARK = "*"


class UnknownTokenError(KeyError):
    def __init__(self, token: str):
        super().__init__(token)
        self.token = token

    def __str__(self) -> str:
        return f"token {self.token!r} is not in the vocabulary"


class NonFiniteLatentError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite latent values after denoising step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# Vocabulary and prompt templates
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Vocabulary:
    """Word list plus the frozen token-embedding table (V x d).

    Whitespace-split words are looked up directly unless ``text_to_ids`` /
    ``ids_to_text`` are given (subword tokenizers of real text encoders).
    """

    words: tuple[str, ...]
    table: torch.Tensor
    sos: str = SOS
    eos: str = EOS
    specials: frozenset[str] = frozenset()
    text_to_ids: Callable[[str], list[int]] | None = None
    ids_to_text: Callable[[list[int]], str] | None = None

    def __post_init__(self):
        if self.table.shape[0] != len(self.words):
            raise ValueError("embedding table rows must match the word count")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    def __len__(self) -> int:
        return len(self.words)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def index(self, word: str) -> int:
        # template markers resolve to this vocabulary's own boundary tokens
        word = {SOS: self.sos, EOS: self.eos}.get(word, word)
        if word in self._index:
            return self._index[word]
        if self.text_to_ids is not None:
            ids = list(self.text_to_ids(word))
            if len(ids) == 1:
                return ids[0]
        raise UnknownTokenError(word)

    def tokenize(self, text: str) -> list[int]:
        if self.text_to_ids is not None:
            return list(self.text_to_ids(text))
        return [self.index(w) for w in text.lower().split()]

    def _skip(self) -> set[str]:
        return {self.sos, self.eos} | set(self.specials)

    def decode(self, ids: Iterable[int]) -> str:
        ids = [i for i in ids if self.words[i] not in self._skip()]
        if self.ids_to_text is not None:
            return self.ids_to_text(ids).strip()
        return " ".join(self.words[i] for i in ids)

    def token_text(self, i: int) -> str:
        """Human-readable text of a single token."""
        return self.decode([i])

    def content_mask(self) -> torch.Tensor:
        """True for tokens that may be selected as prompt words."""
        skip = self._skip()
        return torch.tensor([w not in skip for w in self.words])


@dataclass(frozen=True)
class Fixed:
    token: str


@dataclass(frozen=True)
class Learnable:
    slot: int


Slot = Union[Fixed, Learnable]


@dataclass(frozen=True)
class PromptTemplate:
    """Token sequence mixing frozen vocabulary words and learnable slots.

    ``PromptTemplate.parse("the shape of *")`` gives
    ``[<sos>, the, shape, of, slot0, <eos>]``.
    """

    slots: tuple[Slot, ...]

    def __post_init__(self):
        if len(self.slots) < 2 or self.slots[0] != Fixed(SOS) or self.slots[-1] != Fixed(EOS):
            raise ValueError("template must start with <sos> and end with <eos>")
        found = sorted(s.slot for s in self.slots if isinstance(s, Learnable))
        if found != list(range(len(found))):
            raise ValueError(f"learnable slots must be numbered 0..n-1, got {found}")

    @classmethod
    def parse(cls, text: str) -> "PromptTemplate":
        slots: list[Slot] = [Fixed(SOS)]
        n = 0
        for word in text.lower().split():
            if word == LEARNABLE_MARK:
                slots.append(Learnable(n))
                n += 1
            else:
                slots.append(Fixed(word))
        slots.append(Fixed(EOS))
        return cls(tuple(slots))

    @classmethod
    def with_prefix(cls, prefix: str = "", n_learnable: int = 1) -> "PromptTemplate":
        return cls.parse(" ".join([prefix.strip()] + [LEARNABLE_MARK] * n_learnable))

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def n_learnable(self) -> int:
        return sum(isinstance(s, Learnable) for s in self.slots)

    @property
    def learnable_positions(self) -> list[int]:
        """Sequence positions of slots 0..n-1, in slot order."""
        pos = {s.slot: i for i, s in enumerate(self.slots) if isinstance(s, Learnable)}
        return [pos[k] for k in range(len(pos))]

    def render(self, fill: Sequence[str] | None = None) -> str:
        words = []
        for s in self.slots[1:-1]:
            if isinstance(s, Fixed):
                words.append(s.token)
            else:
                words.append(fill[s.slot] if fill is not None else LEARNABLE_MARK)
        return " ".join(words)

    def to_config(self) -> str:
        return self.render()


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]

    @classmethod
    def from_text(cls, vocab: Vocabulary, text: str) -> "TokenSequence":
        return cls(tuple([vocab.index(vocab.sos)] + vocab.tokenize(text) + [vocab.index(vocab.eos)]))

    def validate(self, vocab: Vocabulary) -> None:
        if not self.tokens or self.tokens[0] != vocab.index(vocab.sos):
            raise ValueError("first token must be <sos>")
        if self.tokens[-1] != vocab.index(vocab.eos):
            raise ValueError("last token must be <eos>")
        bad = [t for t in self.tokens if not 0 <= t < len(vocab)]
        if bad:
            raise ValueError(f"token indices out of range: {bad}")


@dataclass
class EmbeddingSequence:
    matrix: torch.Tensor  # N x d
    learnable: tuple[bool, ...]

    def __len__(self) -> int:
        return self.matrix.shape[0]


def encode_prompt(template: PromptTemplate, learnable: torch.Tensor | None,
                  vocab: Vocabulary) -> EmbeddingSequence:
    """Fill a template: frozen slots from the vocabulary table, learnable
    slots from rows of ``learnable`` (row k feeds slot k)."""
    n = template.n_learnable
    rows_given = 0 if learnable is None else learnable.shape[0]
    if rows_given != n:
        raise ValueError(f"template has {n} learnable slots but {rows_given} rows were given")
    rows, flags = [], []
    for s in template.slots:
        if isinstance(s, Fixed):
            rows.append(vocab.table[vocab.index(s.token)])
            flags.append(False)
        else:
            rows.append(learnable[s.slot].to(vocab.table.dtype))
            flags.append(True)
    return EmbeddingSequence(torch.stack(rows), tuple(flags))


def embed_tokens(tokens: TokenSequence, vocab: Vocabulary) -> EmbeddingSequence:
    tokens.validate(vocab)
    idx = torch.tensor(tokens.tokens)
    return EmbeddingSequence(vocab.table[idx], (False,) * len(tokens.tokens))


# ---------------------------------------------------------------------------
# Latents and images
# ---------------------------------------------------------------------------

@dataclass
class LatentCode:
    values: torch.Tensor  # B x latent_shape
    seeds: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.seeds)


@dataclass
class ImageBatch:
    """B x C x H x W pixels in ``value_range``.

    ``regions`` is optional ground-truth metadata (concept name -> B x H x W
    bool) emitted only by synthetic generators.
    """

    pixels: torch.Tensor
    value_range: tuple[float, float] = (0.0, 1.0)
    regions: dict[str, torch.Tensor] | None = None

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def __getitem__(self, idx) -> "ImageBatch":
        if isinstance(idx, int):
            idx = slice(idx, idx + 1)
        regions = None if self.regions is None else {k: v[idx] for k, v in self.regions.items()}
        return ImageBatch(self.pixels[idx], self.value_range, regions)

    @staticmethod
    def cat(batches: Sequence["ImageBatch"]) -> "ImageBatch":
        regions = None
        if batches and all(b.regions is not None for b in batches):
            regions = {k: torch.cat([b.regions[k] for b in batches]) for k in batches[0].regions}
        return ImageBatch(torch.cat([b.pixels for b in batches]), batches[0].value_range, regions)


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

class GeneratorPipeline(ABC):
    """Text encoder, K-step denoiser and decoder of a frozen latent generator."""

    backend_id: str = ""
    vocab: Vocabulary
    latent_shape: tuple[int, ...]
    # optional: class index -> ImageBatch of that class's typical inputs,
    # used to rank features by weight x activation
    probe_images: Callable[[int], "ImageBatch"] | None = None
    image_shape: tuple[int, int, int]
    max_steps: int = 8

    @abstractmethod
    def encode_text(self, emb: torch.Tensor) -> torch.Tensor:
        """N x d token embeddings -> conditioning states."""

    @abstractmethod
    def denoise(self, latents: LatentCode, cond: torch.Tensor, steps: int,
                check: Callable[[int, torch.Tensor], None]) -> torch.Tensor:
        """Run ``steps`` consistency steps; call ``check(i, z)`` after each."""

    @abstractmethod
    def decode(self, latents: torch.Tensor) -> ImageBatch:
        ...

    @abstractmethod
    def modules(self) -> list[nn.Module]:
        """Every frozen network, for checksumming."""

    def sample_latents(self, seeds: Sequence[int]) -> LatentCode:
        dtype = self.vocab.table.dtype
        vals = []
        for s in seeds:
            g = torch.Generator().manual_seed(int(s))
            vals.append(torch.randn(self.latent_shape, generator=g, dtype=torch.float32))
        if not vals:
            return LatentCode(torch.empty((0, *self.latent_shape), dtype=dtype), ())
        return LatentCode(torch.stack(vals).to(dtype), tuple(int(s) for s in seeds))

    def checksum(self) -> str:
        return weights_checksum(self.modules() + [self.vocab.table])


def _check_finite(step: int, z: torch.Tensor) -> None:
    if not torch.isfinite(z).all():
        raise NonFiniteLatentError(step)


def generate(pipeline: GeneratorPipeline, emb: EmbeddingSequence | torch.Tensor,
             z: LatentCode, steps: int = 4) -> ImageBatch:
    """x(z) = decode(denoise(z, encode_text(emb))) for every latent in ``z``."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if tuple(z.values.shape[1:]) != tuple(pipeline.latent_shape):
        raise ValueError(f"latent shape {tuple(z.values.shape[1:])} does not match "
                         f"the generator's {tuple(pipeline.latent_shape)}")
    matrix = emb.matrix if isinstance(emb, EmbeddingSequence) else emb
    cond = pipeline.encode_text(matrix)
    latents = pipeline.denoise(z, cond, steps, _check_finite)
    return pipeline.decode(latents)


# ---------------------------------------------------------------------------
# Classifier probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassTarget:
    index: int


@dataclass(frozen=True)
class FeatureTarget:
    index: int


Target = Union[ClassTarget, FeatureTarget]


def parse_target(text: str) -> Target:
    """'class:3' / 'feature:7' -> target."""
    kind, _, idx = text.partition(":")
    if kind == "class":
        return ClassTarget(int(idx))
    if kind == "feature":
        return FeatureTarget(int(idx))
    raise ValueError(f"bad target {text!r}; expected class:<c> or feature:<j>")


def target_name(t: Target) -> str:
    return f"class:{t.index}" if isinstance(t, ClassTarget) else f"feature:{t.index}"


@dataclass
class ProbeOutput:
    logits: torch.Tensor    # B x C
    features: torch.Tensor  # B x F


@dataclass(eq=False)
class ClassifierProbe:
    """Frozen classifier plus the probe points the objectives read.

    ``feature_layer`` names the module whose output is the hidden feature
    vector; ``head_layer`` names the final linear classification layer.
    With ``feature_point="pre"`` the output of ``pre_feature_layer`` is read
    instead.
    """

    model: nn.Module
    feature_layer: str
    head_layer: str
    input_size: tuple[int, int]
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    class_names: tuple[str, ...]
    pre_feature_layer: str | None = None
    feature_point: str = "post"
    source_range: tuple[float, float] = (0.0, 1.0)
    backend_id: str = ""
    _modules: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self._modules = dict(self.model.named_modules())
        if self.feature_point not in ("post", "pre"):
            raise ValueError("feature_point must be 'post' or 'pre'")
        layer = self.pre_feature_layer if self.feature_point == "pre" else self.feature_layer
        for name in (layer, self.head_layer):
            if name not in self._modules:
                raise ValueError(f"classifier has no module named {name!r}")

    @property
    def n_classes(self) -> int:
        return self.head.weight.shape[0]

    @property
    def n_features(self) -> int:
        return self.head.weight.shape[1]

    @property
    def head(self) -> nn.Linear:
        return self._modules[self.head_layer]

    def available(self) -> str:
        return f"class:0..{self.n_classes - 1}, feature:0..{self.n_features - 1}"

    def validate(self, target: Target) -> None:
        limit = self.n_classes if isinstance(target, ClassTarget) else self.n_features
        if not isinstance(target, (ClassTarget, FeatureTarget)) or not 0 <= target.index < limit:
            raise ValueError(f"unknown probe target {target!r}; available: {self.available()}")

    def preprocess(self, images: ImageBatch) -> torch.Tensor:
        x = images.pixels
        lo, hi = images.value_range
        if (lo, hi) != (0.0, 1.0):
            x = (x - lo) / (hi - lo)
        if tuple(x.shape[-2:]) != tuple(self.input_size):
            x = F.interpolate(x, size=self.input_size, mode="bilinear", align_corners=False)
        mean = torch.tensor(self.mean, dtype=x.dtype).view(1, -1, 1, 1)
        std = torch.tensor(self.std, dtype=x.dtype).view(1, -1, 1, 1)
        return (x - mean) / std

    def forward(self, images: ImageBatch) -> ProbeOutput:
        layer = self.pre_feature_layer if self.feature_point == "pre" else self.feature_layer
        captured = {}
        me = threading.get_ident()

        def hook(_m, _inp, out):
            # the model is shared between jobs; only keep this thread's pass
            if threading.get_ident() == me:
                captured["f"] = out

        handle = self._modules[layer].register_forward_hook(hook)
        try:
            logits = self.model(self.preprocess(images))
        finally:
            handle.remove()
        return ProbeOutput(logits, captured["f"].flatten(1))

    def response(self, images: ImageBatch, target: Target) -> torch.Tensor:
        """Per-image scalar: class logit (pre-softmax) or hidden feature."""
        self.validate(target)
        out = self.forward(images)
        if isinstance(target, ClassTarget):
            return out.logits[:, target.index]
        return out.features[:, target.index]

    def checksum(self) -> str:
        return weights_checksum([self.model])


def probe(p: ClassifierProbe, images: ImageBatch, target: Target) -> torch.Tensor:
    return p.response(images, target)


def weights_checksum(items: Sequence[nn.Module | torch.Tensor]) -> str:
    h = hashlib.sha256()
    for item in items:
        tensors = [item] if isinstance(item, torch.Tensor) else \
            [t for _, t in sorted(item.state_dict().items())]
        for t in tensors:
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Backend registry
# ---------------------------------------------------------------------------

Factory = Callable[[dict], tuple[GeneratorPipeline, ClassifierProbe]]
_REGISTRY: dict[str, Factory] = {}


class BackendUnavailable(RuntimeError):
    pass


def register_backend(name: str):
    def deco(fn: Factory) -> Factory:
        _REGISTRY[name] = fn
        return fn
    return deco


def load_backend(name: str, config: dict | None = None) -> tuple[GeneratorPipeline, ClassifierProbe]:
    # importing registers the built-in backends
    from . import toy  # noqa: F401
    from . import adapters  # noqa: F401

    if name not in _REGISTRY:
        raise BackendUnavailable(f"unknown backend {name!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[name](dict(config or {}))


def available_backends() -> list[str]:
    from . import toy  # noqa: F401
    from . import adapters  # noqa: F401
    return sorted(_REGISTRY)
