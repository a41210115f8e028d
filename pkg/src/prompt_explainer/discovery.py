"""Core/spurious audit of a class's most important hidden features.

For each of the top-k features of class c: optimize CE(c) - lam * phi_j,
draw samples, segment them with the class name, and call the feature core
when the mean object-pixel fraction reaches delta.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .pipeline import ClassifierProbe, GeneratorPipeline, ImageBatch, PromptTemplate
from .sampler import SampleSet, sample
from .segmentation import SegmentationMask, Segmenter, segment
from .soft_prompt import AllRestartsDiverged, OptimizerConfig, RunRecord, combined, optimize

log = logging.getLogger(__name__)

CORE, SPURIOUS, INCONCLUSIVE = "core", "spurious", "inconclusive"


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureRanking:
    cls: int
    indices: tuple[int, ...]
    scores: tuple[float, ...]
    method: str     # "weight-x-activation" | "abs-weight"


def rank_features(probe: ClassifierProbe, cls: int, k: int = 5,
                  probe_images: ImageBatch | None = None, chunk: int = 64) -> FeatureRanking:
    """Top-k features of class ``cls`` by w[c, j] * mean activation over
    ``probe_images``, or by |w[c, j]| without a probe set. Ties go to the
    lower index."""
    w = probe.head.weight.detach().double()
    if not 0 <= cls < w.shape[0]:
        raise ValueError(f"class {cls} out of range 0..{w.shape[0] - 1}")
    if not 1 <= k <= w.shape[1]:
        raise ValueError(f"k={k} outside 1..{w.shape[1]} (feature count)")
    if probe_images is not None and len(probe_images) > 0:
        acts = []
        with torch.no_grad():
            for i in range(0, len(probe_images), chunk):
                acts.append(probe.forward(probe_images[i:i + chunk]).features.double())
        score = w[cls] * torch.cat(acts).mean(0)
        method = "weight-x-activation"
    else:
        score = w[cls].abs()
        method = "abs-weight"
    vals = score.tolist()
    order = sorted(range(len(vals)), key=lambda j: (-vals[j], j))[:k]
    return FeatureRanking(cls, tuple(order), tuple(vals[j] for j in order), method)


# ---------------------------------------------------------------------------
# verdicts
# ---------------------------------------------------------------------------

def object_fraction(mask: SegmentationMask | torch.Tensor) -> float:
    m = mask.mask if isinstance(mask, SegmentationMask) else mask
    return float(m.sum().item()) / float(m.numel())


def classify_feature(r_samples: Sequence[float], delta: float) -> str:
    """core iff mean(r) >= delta."""
    r = np.asarray(list(r_samples), dtype=np.float64)
    if r.size == 0:
        raise ValueError("no r samples")
    if np.any((r < 0) | (r > 1)) or not np.all(np.isfinite(r)):
        raise ValueError("r samples must lie in [0, 1]")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return CORE if mean_fraction(r) >= delta else SPURIOUS


def mean_fraction(r_samples: Sequence[float]) -> float:
    # exact sum, so the mean cannot depend on sample order
    r = [float(x) for x in r_samples]
    return math.fsum(r) / len(r)


@dataclass
class DiscoveryConfig:
    k: int = 5
    n_samples: int = 10
    delta: float = 0.05
    lam: float = 1.0
    prefix: str = ""
    sample_seed_base: int = 1_000_000
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass
class FeatureAudit:
    cls: int
    class_name: str
    feature: int
    rank: int
    importance: float
    r_samples: list[float]
    mean_r: float
    delta: float
    verdict: str
    seeds: list[int] = field(default_factory=list)
    heldout_loss: float = float("nan")
    error: str = ""
    artifacts: dict[str, str] = field(default_factory=dict)
    record: RunRecord | None = field(default=None, repr=False)
    samples: SampleSet | None = field(default=None, repr=False)
    masks: list[SegmentationMask] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("record", "samples", "masks")}
        d["mean_r"] = None if not np.isfinite(self.mean_r) else self.mean_r
        d["heldout_loss"] = None if not np.isfinite(self.heldout_loss) else self.heldout_loss
        return d


def optimize_feature_for_class(cls: int, feature: int, lam: float, pipeline: GeneratorPipeline,
                               probe: ClassifierProbe, cfg: OptimizerConfig | None = None,
                               template: PromptTemplate | None = None) -> RunRecord:
    template = template or PromptTemplate.with_prefix("", 1)
    return optimize(template, combined(cls, feature, lam), pipeline, probe, cfg)


def audit_feature(cls: int, feature: int, pipeline: GeneratorPipeline, probe: ClassifierProbe,
                  segmenter: Segmenter, cfg: DiscoveryConfig, rank: int = 0,
                  importance: float = float("nan")) -> FeatureAudit:
    name = probe.class_names[cls]
    template = PromptTemplate.with_prefix(cfg.prefix, 1)
    base = FeatureAudit(cls, name, feature, rank, importance, [], float("nan"), cfg.delta, INCONCLUSIVE)
    try:
        record = optimize_feature_for_class(cls, feature, cfg.lam, pipeline, probe, cfg.optimizer, template)
    except AllRestartsDiverged as exc:
        log.warning("class %d feature %d: %s", cls, feature, exc)
        base.error = str(exc)
        return base
    samples = sample(record, pipeline, cfg.n_samples, cfg.sample_seed_base, probe=probe)
    masks = [segment(samples.images[i], name, segmenter) for i in range(len(samples))]
    r = [object_fraction(m) for m in masks]
    base.r_samples = r
    base.mean_r = mean_fraction(r)
    base.verdict = classify_feature(r, cfg.delta)
    base.seeds = list(samples.seeds)
    base.heldout_loss = record.heldout_loss
    base.record, base.samples, base.masks = record, samples, masks
    return base


def audit_class(cls: int, pipeline: GeneratorPipeline, probe: ClassifierProbe, segmenter: Segmenter,
                cfg: DiscoveryConfig | None = None, probe_images: ImageBatch | None = None,
                features: Sequence[int] | None = None) -> list[FeatureAudit]:
    """Audit the top-k features of ``cls`` (or an explicit feature list).

    A feature whose every restart diverged gets verdict "inconclusive"; the
    remaining features are still audited.
    """
    cfg = cfg or DiscoveryConfig()
    if features is None:
        ranking = rank_features(probe, cls, cfg.k, probe_images)
        pairs = list(zip(ranking.indices, ranking.scores))
    else:
        pairs = [(j, float("nan")) for j in features]
    return [audit_feature(cls, j, pipeline, probe, segmenter, cfg, rank=i, importance=s)
            for i, (j, s) in enumerate(pairs)]


# ---------------------------------------------------------------------------
# agreement with human annotations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Annotation:
    class_id: int
    class_name: str
    feature: int
    label: str        # core | spurious
    animacy: str = "unknown"


ANNOTATION_FIELDS = ("class_id", "class_name", "feature_index", "label", "animacy")


def read_annotations(path: str | Path) -> list[Annotation]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(ANNOTATION_FIELDS[:4]) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"annotation file lacks columns {sorted(missing)}")
        for i, row in enumerate(reader, start=2):
            label = row["label"].strip().lower()
            if label not in (CORE, SPURIOUS):
                raise ValueError(f"line {i}: label must be core or spurious, got {row['label']!r}")
            animacy = (row.get("animacy") or "unknown").strip().lower()
            if animacy not in ("animate", "inanimate", "unknown"):
                raise ValueError(f"line {i}: bad animacy {animacy!r}")
            out.append(Annotation(int(row["class_id"]), row["class_name"], int(row["feature_index"]),
                                  label, animacy))
    return out


def write_annotations(path: str | Path, annotations: Iterable[Annotation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANNOTATION_FIELDS)
        for a in annotations:
            w.writerow([a.class_id, a.class_name, a.feature, a.label, a.animacy])


def bias_level(n_spurious: int) -> str:
    if n_spurious == 0:
        return "unbiased"
    if n_spurious == 5:
        return "biased"
    return "medium"


@dataclass
class AgreementReport:
    overall: float | None
    n: int
    by_bias: dict[str, float | None]
    by_animacy: dict[str, float | None]
    counts: dict[str, dict[str, int]]
    unmatched: list[tuple[int, int]]
    inconclusive: list[tuple[int, int]]

    def to_json(self) -> dict:
        d = asdict(self)
        d["unmatched"] = [list(p) for p in self.unmatched]
        d["inconclusive"] = [list(p) for p in self.inconclusive]
        return d


def _frac(hits: int, n: int) -> float | None:
    return hits / n if n else None


def agreement(verdicts: Mapping[tuple[int, int], str] | Sequence[FeatureAudit],
              annotations: Sequence[Annotation]) -> AgreementReport:
    """Fraction of (class, feature) verdicts that match the annotation,
    overall and per group.

    A class's bias level comes from how many of its annotated features are
    labelled spurious. Verdict pairs without an annotation are listed as
    unmatched; inconclusive verdicts are listed separately. Neither counts
    toward any denominator.
    """
    if not isinstance(verdicts, Mapping):
        verdicts = {(a.cls, a.feature): a.verdict for a in verdicts}
    ann = {(a.class_id, a.feature): a for a in annotations}
    n_spur: dict[int, int] = {}
    for a in annotations:
        n_spur[a.class_id] = n_spur.get(a.class_id, 0) + (a.label == SPURIOUS)
    unmatched = sorted(p for p in verdicts if p not in ann)
    inconclusive = sorted(p for p, v in verdicts.items() if p in ann and v == INCONCLUSIVE)
    groups: dict[str, list[int]] = {}
    hits = total = 0
    for p, v in sorted(verdicts.items()):
        if p not in ann or v == INCONCLUSIVE:
            continue
        ok = int(v == ann[p].label)
        hits += ok
        total += 1
        for g in ("bias:" + bias_level(n_spur[p[0]]), "animacy:" + ann[p].animacy):
            groups.setdefault(g, [0, 0])
            groups[g][0] += ok
            groups[g][1] += 1
    by_bias = {b: _frac(*groups.get("bias:" + b, [0, 0])) for b in ("unbiased", "medium", "biased")}
    by_animacy = {a: _frac(*groups["animacy:" + a]) for a in ("animate", "inanimate", "unknown")
                  if "animacy:" + a in groups}
    counts = {g: {"agree": h, "total": n} for g, (h, n) in sorted(groups.items())}
    return AgreementReport(_frac(hits, total), total, by_bias, by_animacy, counts, unmatched, inconclusive)
