"""Draw images from an optimized prompt and score them with the classifier."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .pipeline import (ClassifierProbe, ClassTarget, EmbeddingSequence,
                       GeneratorPipeline, ImageBatch, Target, generate, target_name)


@dataclass
class SampleSet:
    images: ImageBatch | None
    seeds: tuple[int, ...]
    record_id: str
    logits: torch.Tensor | None = None     # n x C
    features: torch.Tensor | None = None   # n x F

    def __len__(self) -> int:
        return len(self.seeds)

    def response(self, target: Target) -> np.ndarray:
        """Per-image softmax probability (class targets) or activation (feature targets)."""
        if self.logits is None:
            raise ValueError("sample set was drawn without a probe")
        if isinstance(target, ClassTarget):
            return torch.softmax(self.logits.double(), 1)[:, target.index].numpy()
        return self.features[:, target.index].double().numpy()


def embedding_id(matrix: torch.Tensor) -> str:
    return hashlib.sha256(matrix.detach().cpu().contiguous().numpy().tobytes()).hexdigest()[:16]


def _matrix(record_or_emb) -> torch.Tensor:
    if isinstance(record_or_emb, EmbeddingSequence):
        return record_or_emb.matrix
    if isinstance(record_or_emb, torch.Tensor):
        return record_or_emb
    return record_or_emb.final_embeddings


def sample(record, pipeline: GeneratorPipeline, n: int, seed_base: int = 0,
           probe: ClassifierProbe | None = None, steps: int | None = None,
           chunk: int = 16) -> SampleSet:
    """``n`` images from latent seeds ``seed_base .. seed_base + n - 1``.

    ``record`` is a RunRecord, an EmbeddingSequence or a raw N x d matrix.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    matrix = _matrix(record)
    d = pipeline.vocab.dim
    if matrix.dim() != 2 or matrix.shape[1] != d:
        raise ValueError(f"embedding shape {tuple(matrix.shape)} does not fit the generator "
                         f"(expects N x {d})")
    if steps is None:
        steps = getattr(record, "config", {}).get("inference_steps", 4)
    seeds = tuple(range(seed_base, seed_base + n))
    rid = embedding_id(matrix)
    if n == 0:
        return SampleSet(None, seeds, rid)
    batches, logits, feats = [], [], []
    with torch.no_grad():
        for i in range(0, n, chunk):
            z = pipeline.sample_latents(seeds[i:i + chunk])
            imgs = generate(pipeline, matrix, z, steps)
            batches.append(imgs)
            if probe is not None:
                out = probe.forward(imgs)
                logits.append(out.logits)
                feats.append(out.features)
    images = ImageBatch.cat(batches)
    if probe is None:
        return SampleSet(images, seeds, rid)
    return SampleSet(images, seeds, rid, torch.cat(logits), torch.cat(feats))


@dataclass(frozen=True)
class Stats:
    mean: float
    std: float
    min: float
    max: float


def score(samples: SampleSet, probe: ClassifierProbe | None, targets: Sequence[Target]) -> dict[str, Stats]:
    """Per-target mean/std/min/max over the sample set (population std)."""
    for t in targets:
        if probe is not None:
            probe.validate(t)
    out = {}
    for t in targets:
        v = samples.response(t) if len(samples) else np.array([])
        if len(v) == 0:
            out[target_name(t)] = Stats(float("nan"), float("nan"), float("nan"), float("nan"))
        else:
            out[target_name(t)] = Stats(float(v.mean()), float(v.std()), float(v.min()), float(v.max()))
    return out


def to_uint8(images: ImageBatch) -> np.ndarray:
    """B x H x W x 3 uint8 (round-half-even of the [0, 255] rescale)."""
    lo, hi = images.value_range
    x = ((images.pixels.detach().double() - lo) / (hi - lo)).clamp(0, 1) * 255
    return torch.round(x).to(torch.uint8).permute(0, 2, 3, 1).cpu().numpy()


def save_samples(samples: SampleSet, directory: str | Path, targets: Sequence[Target] = ()) -> Path:
    """Write one PNG per sample plus ``samples.csv`` (seed, file, per-target scores)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = [target_name(t) for t in targets]
    cols = {n: samples.response(t) for n, t in zip(names, targets)}
    arrays = to_uint8(samples.images) if len(samples) else []
    with open(directory / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "file"] + names)
        for i, seed in enumerate(samples.seeds):
            fname = f"sample_{seed:08d}.png"
            Image.fromarray(arrays[i]).save(directory / fname, optimize=False)
            w.writerow([seed, fname] + [repr(float(cols[n][i])) for n in names])
    return directory / "samples.csv"


def load_manifest(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        for k in list(r):
            if k not in ("seed", "file"):
                r[k] = float(r[k])
    return rows
