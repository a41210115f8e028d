"""CPU-scale generator/classifier pair with planted biases.

The generator renders a scene of colored primitives: four fruit-like blobs,
each with its own home position, and three patterned 16x16 patches in fixed
corners.
A prompt decides *which* primitives appear through a softmax over concept
channels; the diffusion noise moves the blob, textures the background and,
through a small noise-by-prompt interaction, perturbs the concept logits.

The classifier's hidden layer is hand-wired so every feature is a known
detector (a blob color in the center, or a patch color in a corner); only
its final linear head is fitted, once, on rendered scenes where some
classes always co-occur with a corner patch.  Ground truth for spurious
discovery is therefore known exactly: a feature is spurious for its class
iff it detects a patch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .pipeline import (EOS, SOS, ClassifierProbe, GeneratorPipeline, ImageBatch,
                       LatentCode, Vocabulary, register_backend, weights_checksum)

OBJECTS = ("tomato", "lime", "plum", "lemon")
PATCHES = ("stripes", "checker", "dots")
CONCEPTS = OBJECTS + PATCHES

COLORS = {
    "tomato": (0.90, 0.10, 0.10),
    "lime": (0.15, 0.85, 0.15),
    "plum": (0.45, 0.05, 0.75),
    "lemon": (0.95, 0.90, 0.05),
    "stripes": (0.05, 0.80, 0.90),
    "checker": (1.00, 0.50, 0.00),
    "dots": (0.05, 0.15, 0.90),
}
CORNERS = {"stripes": "tl", "checker": "tr", "dots": "bl"}

# class -> (planted context patch, number of spurious top features)
BIAS_TABLE = {
    "tomato": (None, 0),
    "lime": ("stripes", 2),
    "plum": ("checker", 3),
    "lemon": ("dots", 5),
}

FILLER_WORDS = (
    "a", "an", "the", "of", "shape", "texture", "photo", "image", "picture",
    "thing", "object", "scene", "red", "green", "purple", "yellow", "blue",
    "orange", "cyan", "round", "small", "big", "bright", "dark", "pattern",
)
DEFAULT_WORDS = CONCEPTS + FILLER_WORDS
HARD_ORACLE_WORDS = CONCEPTS + ("thing",)
PAD = "<pad>"

IMAGE = 64
LATENT_HW = 8
PATCH = 16
BLOB_RADIUS = 12.0
# (row, col) blob centers, on the edge midpoints so no blob meets a corner patch
OBJECT_HOMES = {"tomato": (14.0, 32.0), "lime": (32.0, 14.0), "plum": (32.0, 50.0), "lemon": (50.0, 32.0)}
CLASSIFIER_INPUT = 56


@dataclass
class ToyConfig:
    seed: int = 0
    words: tuple[str, ...] = DEFAULT_WORDS
    embed_dim: int = 16
    cond_dim: int = 16
    concept_gain: float = 2.0
    residual_noise: float = 0.2     # fraction of initial concept noise left after all steps
    interaction: float = 0.3        # noise-by-prompt coupling strength
    max_offset: float = 2.5         # blob jitter, pixels
    train_per_class: int = 150
    val_per_class: int = 100
    min_accuracy: float = 0.95
    label_smoothing: float = 0.05   # caps head confidence so no class CE sits at ~0


def _rng(seed: int, *key: int) -> torch.Generator:
    s = np.random.SeedSequence([seed, *key]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(s))


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

class ToyTextEncoder(nn.Module):
    """cond = W . mean of token embeddings."""

    def __init__(self, embed_dim: int, cond_dim: int, g: torch.Generator):
        super().__init__()
        self.proj = nn.Linear(embed_dim, cond_dim, bias=False)
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(cond_dim, embed_dim, generator=g) * (1.5 / math.sqrt(embed_dim)))

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.proj(emb.mean(0))


class ToyDenoiser(nn.Module):
    """Consistency-style updates of the concept channels toward prompt targets.

    Latent layout (C x 8 x 8): one channel per concept, followed by four
    noise channels that are carried through
    unchanged (blob offset x/y, background texture, interaction source).
    """

    def __init__(self, n_concepts: int, cond_dim: int, interaction: float,
                 residual_noise: float, g: torch.Generator):
        super().__init__()
        self.n_concepts = n_concepts
        self.targets = nn.Linear(cond_dim, n_concepts, bias=False)
        self.coupling = nn.Linear(cond_dim, n_concepts, bias=False)
        self.noise_readout = nn.Linear(LATENT_HW * LATENT_HW, n_concepts, bias=False)
        self.register_buffer("interaction", torch.tensor(float(interaction)))
        self.register_buffer("residual_noise", torch.tensor(float(residual_noise)))
        with torch.no_grad():
            self.coupling.weight.copy_(torch.randn(n_concepts, cond_dim, generator=g) / math.sqrt(cond_dim))
            r = torch.randn(n_concepts, LATENT_HW * LATENT_HW, generator=g)
            self.noise_readout.weight.copy_(r / r.norm(dim=1, keepdim=True))

    def drift(self, z: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Per-concept target values, B x n_concepts."""
        u = self.noise_readout(z[:, -1].flatten(1))
        return self.targets(cond) + self.interaction * u * self.coupling(cond)

    def forward(self, z: torch.Tensor, cond: torch.Tensor, steps: int, check=None) -> torch.Tensor:
        keep = self.residual_noise ** (1.0 / steps)
        k = self.n_concepts
        for i in range(steps):
            d = self.drift(z, cond)
            d = d[:, :, None, None]
            concepts = keep * z[:, :k] + (1 - keep) * d
            z = torch.cat([concepts, z[:, k:]], 1)
            if check is not None:
                check(i, z)
        return z


def _patch_pattern(name: str) -> torch.Tensor:
    y, x = torch.meshgrid(torch.arange(PATCH), torch.arange(PATCH), indexing="ij")
    if name == "stripes":
        m = (y // 2) % 2 == 0
    elif name == "checker":
        m = (y // 4 + x // 4) % 2 == 0
    else:
        m = (y % 4 < 2) & (x % 4 < 2)
    return m.float()


def _corner_slice(corner: str) -> tuple[slice, slice]:
    rows = slice(0, PATCH) if corner[0] == "t" else slice(IMAGE - PATCH, IMAGE)
    cols = slice(0, PATCH) if corner[1] == "l" else slice(IMAGE - PATCH, IMAGE)
    return rows, cols


class ToyDecoder(nn.Module):
    def __init__(self, concept_gain: float, max_offset: float):
        super().__init__()
        n = len(CONCEPTS)
        self.register_buffer("gain", torch.tensor(float(concept_gain)))
        self.register_buffer("max_offset", torch.tensor(float(max_offset)))
        self.register_buffer("colors", torch.tensor([COLORS[c] for c in CONCEPTS]))
        layers = torch.zeros(len(PATCHES), IMAGE, IMAGE)
        for i, p in enumerate(PATCHES):
            r, c = _corner_slice(CORNERS[p])
            layers[i, r, c] = _patch_pattern(p)
        self.register_buffer("patch_alpha", layers)
        # Chebyshev distance of each pixel center from its patch's outer corner
        square = torch.zeros(len(PATCHES), IMAGE, IMAGE, dtype=torch.bool)
        cdist = torch.full((len(PATCHES), IMAGE, IMAGE), float(IMAGE))
        idx = torch.arange(IMAGE, dtype=torch.float32) + 0.5
        for i, p in enumerate(PATCHES):
            r, c = _corner_slice(CORNERS[p])
            square[i, r, c] = True
            ry = idx if CORNERS[p][0] == "t" else IMAGE - idx
            rx = idx if CORNERS[p][1] == "l" else IMAGE - idx
            d = torch.maximum(ry.view(-1, 1), rx.view(1, -1))
            cdist[i] = torch.where(square[i], d, cdist[i])
        self.register_buffer("patch_square", square)
        self.register_buffer("corner_dist", cdist)
        self.n = n

    def amplitudes(self, z: torch.Tensor) -> torch.Tensor:
        # centered and softly norm-bounded: logits stay in a range where no
        # concept's gradient vanishes, yet a uniform mix stays reachable
        m = z[:, : self.n].mean((2, 3))
        m = m - m.mean(1, keepdim=True)
        m = m / torch.sqrt(1.0 + m.var(1, unbiased=False, keepdim=True))
        return torch.softmax(self.gain * m, 1)

    def render(self, amps: torch.Tensor, offsets: torch.Tensor, background: torch.Tensor):
        # Amplitude sets the *extent* of a primitive, not its opacity, so a
        # half-present concept is a smaller shape of the right color rather
        # than a washed-out one no detector responds to.
        B = amps.shape[0]
        dtype = amps.dtype
        ys = torch.arange(IMAGE, dtype=dtype).view(1, IMAGE, 1) + 0.5
        xs = torch.arange(IMAGE, dtype=dtype).view(1, 1, IMAGE) + 0.5
        dy = offsets[:, 1].view(B, 1, 1)
        dx = offsets[:, 0].view(B, 1, 1)
        scale = torch.sqrt(amps + 1e-8)
        img = background
        regions = {}
        colors = self.colors.to(dtype)
        for k, name in enumerate(OBJECTS):
            hy, hx = OBJECT_HOMES[name]
            dist = torch.sqrt((ys - hy - dy) ** 2 + (xs - hx - dx) ** 2 + 1e-12)
            radius = (BLOB_RADIUS + 2) * scale[:, k].view(B, 1, 1) - 2
            a = torch.sigmoid(radius - dist)
            img = img * (1 - a[:, None]) + a[:, None] * colors[k].view(1, 3, 1, 1)
            regions[name] = (a > 0.5).detach()
        for i, name in enumerate(PATCHES):
            k = len(OBJECTS) + i
            extent = (PATCH + 1) * scale[:, k].view(B, 1, 1) - 1
            cover = torch.sigmoid(4 * (extent - self.corner_dist[i].to(dtype)))
            a = cover * self.patch_alpha[i].to(dtype)
            img = img * (1 - a[:, None]) + a[:, None] * colors[k].view(1, 3, 1, 1)
            regions[name] = (cover > 0.5).detach() & self.patch_square[i]
        return img, regions

    def forward(self, z: torch.Tensor) -> ImageBatch:
        amps = self.amplitudes(z)
        noise = z[:, self.n:]
        offsets = self.max_offset * torch.tanh(0.5 * LATENT_HW * noise[:, :2].mean((2, 3)))
        tex = F.interpolate(noise[:, 2:3], size=(IMAGE, IMAGE), mode="bilinear", align_corners=False)
        background = (0.5 + 0.04 * tex).expand(-1, 3, -1, -1)
        img, regions = self.render(amps, offsets, background)
        return ImageBatch(img, (0.0, 1.0), regions)


class ToyGenerator(GeneratorPipeline):
    backend_id = "toy"
    max_steps = 8

    def __init__(self, vocab: Vocabulary, text: ToyTextEncoder, denoiser: ToyDenoiser, decoder: ToyDecoder):
        self.vocab = vocab
        self.text = text
        self.denoiser = denoiser
        self.decoder = decoder
        self.latent_shape = (len(CONCEPTS) + 4, LATENT_HW, LATENT_HW)
        self.image_shape = (3, IMAGE, IMAGE)
        for m in self.modules():
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)

    def encode_text(self, emb):
        return self.text(emb)

    def denoise(self, latents: LatentCode, cond, steps, check):
        return self.denoiser(latents.values, cond, steps, check)

    def decode(self, latents):
        return self.decoder(latents)

    def modules(self):
        return [self.text, self.denoiser, self.decoder]


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

REGIONS = {
    "full": (0.0, 1.0, 0.0, 1.0),
    "center": (0.1, 0.9, 0.1, 0.9),
    "tl": (0.0, 0.25, 0.0, 0.25),
    "tr": (0.0, 0.25, 0.75, 1.0),
    "bl": (0.75, 1.0, 0.0, 0.25),
    "br": (0.75, 1.0, 0.75, 1.0),
}
# (region, gain, bias) per detector variant
OBJECT_VARIANTS = [("full", 10.0, 0.0), ("center", 8.0, 0.05), ("full", 14.0, 0.1),
                   ("center", 12.0, 0.0), ("full", 6.0, 0.2)]
PATCH_VARIANTS = [(None, 3.0, 0.0), (None, 4.0, 0.05), (None, 2.0, 0.1),
                  (None, 5.0, 0.0), (None, 3.5, 0.05)]
NORM_MEAN = (0.5, 0.5, 0.5)
NORM_STD = (0.25, 0.25, 0.25)
COLOR_SIGMA = 0.2


# Weak detectors for objects that have no core feature: they sit outside the
# owner's top 5 but keep the object from being invisible to the classifier.
WEAK_VARIANTS = [("full", 1.5, 0.0), ("center", 1.0, 0.0)]


@dataclass(frozen=True)
class FeatureSpec:
    index: int
    owner: str        # class whose top-5 this feature belongs to
    detects: str      # concept name
    kind: str         # "core" | "spurious"
    weak: bool = False


def feature_layout() -> list[FeatureSpec]:
    specs = []
    for cls in OBJECTS:
        patch, n_spur = BIAS_TABLE[cls]
        for v in range(5 - n_spur):
            specs.append(FeatureSpec(len(specs), cls, cls, "core"))
        for v in range(n_spur):
            specs.append(FeatureSpec(len(specs), cls, patch, "spurious"))
    for cls in OBJECTS:
        if BIAS_TABLE[cls][1] == 5:
            for v in WEAK_VARIANTS:
                specs.append(FeatureSpec(len(specs), cls, cls, "core", weak=True))
    return specs


class ColorResponse(nn.Module):
    """Per-pixel color match against each concept color.

    Polynomial tails, (1 + d^2/s^2)^-2, keep a usable gradient toward a
    color that is only faintly present.
    """

    def __init__(self):
        super().__init__()
        mean = torch.tensor(NORM_MEAN).view(1, 3)
        std = torch.tensor(NORM_STD).view(1, 3)
        centers = (torch.tensor([COLORS[c] for c in CONCEPTS]) - mean) / std
        self.register_buffer("centers", centers)
        self.register_buffer("inv_var", torch.tensor(1.0 / (COLOR_SIGMA / NORM_STD[0]) ** 2))

    def forward(self, x):
        d2 = ((x[:, None] - self.centers.to(x.dtype)[None, :, :, None, None]) ** 2).sum(2)
        return (1.0 + d2 * self.inv_var) ** -2


class RegionPool(nn.Module):
    def __init__(self, size: int):
        super().__init__()
        masks = torch.zeros(len(REGIONS), size, size)
        for i, (y0, y1, x0, x1) in enumerate(REGIONS.values()):
            masks[i, round(y0 * size):round(y1 * size), round(x0 * size):round(x1 * size)] = 1
        self.register_buffer("masks", masks / masks.sum((1, 2), keepdim=True))

    def forward(self, r):
        return torch.einsum("bkhw,rhw->bkr", r, self.masks.to(r.dtype)).flatten(1)


class ToyClassifier(nn.Module):
    def __init__(self, specs: list[FeatureSpec], n_classes: int):
        super().__init__()
        self.color = ColorResponse()
        self.pool = RegionPool(CLASSIFIER_INPUT)
        region_names = list(REGIONS)
        n_in = len(CONCEPTS) * len(REGIONS)
        self.fc = nn.Linear(n_in, len(specs))
        self.fc_act = nn.ReLU()
        self.head = nn.Linear(len(specs), n_classes)
        w = torch.zeros(len(specs), n_in)
        b = torch.zeros(len(specs))
        counters: dict[tuple[str, str], int] = {}
        for s in specs:
            k = CONCEPTS.index(s.detects)
            v = counters.get((s.owner, s.kind, s.weak), 0)
            counters[(s.owner, s.kind, s.weak)] = v + 1
            if s.weak:
                region, gain, bias = WEAK_VARIANTS[v]
            elif s.kind == "core":
                region, gain, bias = OBJECT_VARIANTS[v]
            else:
                _, gain, bias = PATCH_VARIANTS[v]
                region = CORNERS[s.detects]
            w[s.index, k * len(REGIONS) + region_names.index(region)] = gain
            b[s.index] = bias
        with torch.no_grad():
            self.fc.weight.copy_(w)
            self.fc.bias.copy_(b)

    def features(self, x):
        return self.fc_act(self.fc(self.pool(self.color(x))))

    def forward(self, x):
        return self.head(self.features(x))


# ---------------------------------------------------------------------------
# world
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ToyWorld:
    config: ToyConfig
    generator: ToyGenerator
    probe: ClassifierProbe
    features: list[FeatureSpec]
    accuracy: float
    class_names: tuple[str, ...] = OBJECTS
    bias_table: dict = field(default_factory=lambda: dict(BIAS_TABLE))

    def checksum(self) -> str:
        return weights_checksum(self.generator.modules() + [self.generator.vocab.table, self.probe.model])

    def ground_truth(self) -> dict[tuple[int, int], str]:
        """(class index, feature index) -> 'core' | 'spurious' for each
        class's planted top-5 features."""
        return {(self.class_names.index(s.owner), s.index): s.kind for s in self.features if not s.weak}

    def annotations(self) -> list:
        """Ground truth as annotation rows (the toy objects are inanimate)."""
        from .discovery import Annotation

        return [Annotation(c, self.class_names[c], j, label, "inanimate")
                for (c, j), label in sorted(self.ground_truth().items())]

    def to(self, dtype: torch.dtype) -> "ToyWorld":
        """Copy with every frozen tensor cast (float64 for gradient checks)."""
        g = self.generator
        vocab = Vocabulary(g.vocab.words, g.vocab.table.to(dtype), g.vocab.sos, g.vocab.eos, g.vocab.specials)
        text = _clone(g.text, dtype)
        den = _clone(g.denoiser, dtype)
        dec = _clone(g.decoder, dtype)
        gen = ToyGenerator(vocab, text, den, dec)
        probe = _toy_probe(_clone(self.probe.model, dtype), self.probe.feature_point)
        world = ToyWorld(self.config, gen, probe, self.features, self.accuracy)
        gen.probe_images = world.class_scenes
        return world

    def render_scene(self, amps: torch.Tensor, seeds) -> ImageBatch:
        """Render explicit concept amplitudes (B x 7) with noise from ``seeds``."""
        z = self.generator.sample_latents(seeds).values
        dec = self.generator.decoder
        noise = z[:, len(CONCEPTS):]
        offsets = dec.max_offset * torch.tanh(0.5 * LATENT_HW * noise[:, :2].mean((2, 3)))
        tex = F.interpolate(noise[:, 2:3], size=(IMAGE, IMAGE), mode="bilinear", align_corners=False)
        bg = (0.5 + 0.04 * tex).expand(-1, 3, -1, -1)
        img, regions = dec.render(amps.to(z.dtype), offsets, bg)
        return ImageBatch(img, (0.0, 1.0), regions)


    def class_scenes(self, cls: int, n: int = 64, seed_base: int = 40_000) -> ImageBatch:
        """Rendered scenes of one class as it appears in the training data
        (object plus its planted context patch, if any)."""
        g = _rng(self.config.seed, 5, cls)
        amps = _scene_amplitudes(torch.full((n,), cls), g)
        return self.render_scene(amps, range(seed_base, seed_base + n))


def _clone(m: nn.Module, dtype):
    import copy
    out = copy.deepcopy(m).to(dtype)
    for p in out.parameters():
        p.requires_grad_(False)
    return out


def _toy_probe(model: ToyClassifier, feature_point: str = "post") -> ClassifierProbe:
    return ClassifierProbe(
        model=model, feature_layer="fc_act", pre_feature_layer="fc", head_layer="head",
        input_size=(CLASSIFIER_INPUT, CLASSIFIER_INPUT), mean=NORM_MEAN, std=NORM_STD,
        class_names=OBJECTS, feature_point=feature_point, backend_id="toy")


def _scene_amplitudes(labels: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    amps = torch.zeros(len(labels), len(CONCEPTS))
    for i, c in enumerate(labels.tolist()):
        cls = OBJECTS[c]
        amps[i, c] = 0.75 + 0.25 * torch.rand((), generator=g)
        patch = BIAS_TABLE[cls][0]
        if patch is not None:
            amps[i, CONCEPTS.index(patch)] = 0.75 + 0.25 * torch.rand((), generator=g)
    return amps


class SanityGateError(RuntimeError):
    pass


def build_world(seed: int = 0, config: ToyConfig | None = None, **overrides) -> ToyWorld:
    """Deterministic world from one seed; fits the classifier head and
    rejects the seed if validation accuracy is below ``min_accuracy``."""
    cfg = config or ToyConfig(seed=seed)
    if overrides:
        cfg = ToyConfig(**{**cfg.__dict__, **overrides})
    cfg.seed = seed

    words = (SOS, EOS, PAD) + tuple(cfg.words)
    table = torch.randn(len(words), cfg.embed_dim, generator=_rng(seed, 1))
    vocab = Vocabulary(words, table, SOS, EOS, frozenset({PAD}))

    text = ToyTextEncoder(cfg.embed_dim, cfg.cond_dim, _rng(seed, 2))
    den = ToyDenoiser(len(CONCEPTS), cfg.cond_dim, cfg.interaction, cfg.residual_noise, _rng(seed, 3))
    # Concept targets are wired so "<sos> w <eos>" drives exactly concept w.
    with torch.no_grad():
        sos, eos = table[vocab.index(SOS)], table[vocab.index(EOS)]
        conds = torch.stack([text(torch.stack([sos, table[vocab.index(c)], eos])) for c in CONCEPTS])
        den.targets.weight.copy_(torch.linalg.pinv(conds).T)
    dec = ToyDecoder(cfg.concept_gain, cfg.max_offset)
    gen = ToyGenerator(vocab, text, den, dec)

    specs = feature_layout()
    model = ToyClassifier(specs, len(OBJECTS))
    probe = _toy_probe(model)
    world = ToyWorld(cfg, gen, probe, specs, accuracy=float("nan"))

    g = _rng(seed, 4)
    n_tr = cfg.train_per_class * len(OBJECTS)
    y_tr = torch.arange(n_tr) % len(OBJECTS)
    x_tr = world.render_scene(_scene_amplitudes(y_tr, g), range(10_000, 10_000 + n_tr))
    # background-only scenes carry a uniform label: an empty image names no class
    n_bg = cfg.train_per_class
    x_bg = world.render_scene(torch.zeros(n_bg, len(CONCEPTS)), range(30_000, 30_000 + n_bg))
    eps = cfg.label_smoothing
    targets = torch.cat([(1 - eps) * F.one_hot(y_tr, len(OBJECTS)).float() + eps / len(OBJECTS),
                         torch.full((n_bg, len(OBJECTS)), 1.0 / len(OBJECTS))])
    with torch.no_grad():
        f_tr = model.features(probe.preprocess(ImageBatch.cat([x_tr, x_bg])))
    _fit_head(model.head, f_tr, targets)

    n_va = cfg.val_per_class * len(OBJECTS)
    y_va = torch.arange(n_va) % len(OBJECTS)
    x_va = world.render_scene(_scene_amplitudes(y_va, g), range(20_000, 20_000 + n_va))
    with torch.no_grad():
        pred = probe.forward(x_va).logits.argmax(1)
    world.accuracy = float((pred == y_va).float().mean())
    if world.accuracy < cfg.min_accuracy:
        raise SanityGateError(f"seed {seed}: validation accuracy {world.accuracy:.3f} < {cfg.min_accuracy}")
    for p in model.parameters():
        p.requires_grad_(False)
    return world


def _fit_head(head: nn.Linear, feats: torch.Tensor, targets: torch.Tensor, steps: int = 400) -> None:
    """Multinomial logistic regression on soft labels with L2, full batch."""
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    head.weight.requires_grad_(True)
    head.bias.requires_grad_(True)
    opt = torch.optim.Adam(head.parameters(), lr=0.05)
    for _ in range(steps):
        opt.zero_grad()
        loss = F.cross_entropy(head(feats), targets) + 1e-4 * head.weight.pow(2).sum()
        loss.backward()
        opt.step()
    head.weight.requires_grad_(False)
    head.bias.requires_grad_(False)


@register_backend("toy")
def _toy_backend(cfg: dict):
    keys = set(ToyConfig.__dataclass_fields__) - {"seed", "words"}
    unknown = set(cfg) - keys - {"world_seed", "vocabulary", "feature_point"}
    if unknown:
        raise ValueError(f"unknown toy backend keys: {sorted(unknown)}")
    overrides = {k: v for k, v in cfg.items() if k in keys}
    if cfg.get("vocabulary") == "hard-oracle":
        overrides["words"] = HARD_ORACLE_WORDS
    world = build_world(int(cfg.get("world_seed", 0)), **overrides)
    world.generator.probe_images = world.class_scenes
    if cfg.get("feature_point", "post") != "post":
        world.probe.feature_point = cfg["feature_point"]
    return world.generator, world.probe
