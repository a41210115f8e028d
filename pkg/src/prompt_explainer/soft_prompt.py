"""Gradient descent over learnable prompt rows, with fresh latent noise at
every step and independent restarts selected on held-out noise."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .pipeline import (ClassifierProbe, ClassTarget, EmbeddingSequence, FeatureTarget,
                       GeneratorPipeline, ImageBatch, PromptTemplate, encode_prompt, generate)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Objective:
    """What to minimize.

    class_ce:  CE(logits, c)
    feature:   -phi_j
    combined:  CE(logits, c) - lam * phi_j
    """

    kind: str
    cls: int | None = None
    feature: int | None = None
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in ("class_ce", "feature", "combined"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.kind in ("class_ce", "combined") and self.cls is None:
            raise ValueError(f"{self.kind} objective needs a class")
        if self.kind in ("feature", "combined") and self.feature is None:
            raise ValueError(f"{self.kind} objective needs a feature")
        if self.kind == "combined" and not self.lam >= 0:
            raise ValueError("lambda must be non-negative")

    def validate(self, probe: ClassifierProbe) -> None:
        if self.cls is not None:
            probe.validate(ClassTarget(self.cls))
        if self.feature is not None:
            probe.validate(FeatureTarget(self.feature))

    def describe(self) -> str:
        if self.kind == "class_ce":
            return f"CE(class {self.cls})"
        if self.kind == "feature":
            return f"-phi(feature {self.feature})"
        return f"CE(class {self.cls}) - {self.lam:g}*phi(feature {self.feature})"


def class_ce(c: int) -> Objective:
    return Objective("class_ce", cls=c)


def feature_max(j: int) -> Objective:
    return Objective("feature", feature=j)


def combined(c: int, j: int, lam: float = 1.0) -> Objective:
    return Objective("combined", cls=c, feature=j, lam=lam)


def per_image_loss(objective: Objective, images: ImageBatch, probe: ClassifierProbe) -> torch.Tensor:
    out = probe.forward(images)
    B = out.logits.shape[0]
    terms = []
    if objective.kind in ("class_ce", "combined"):
        target = torch.full((B,), objective.cls, dtype=torch.long)
        terms.append(F.cross_entropy(out.logits, target, reduction="none"))
    if objective.kind == "feature":
        terms.append(-out.features[:, objective.feature])
    elif objective.kind == "combined":
        terms.append(-objective.lam * out.features[:, objective.feature])
    return sum(terms)


def loss(objective: Objective, images: ImageBatch, probe: ClassifierProbe) -> torch.Tensor:
    """Batch-mean objective; may be non-finite, which callers treat as divergence."""
    return per_image_loss(objective, images, probe).mean()


# ---------------------------------------------------------------------------
# configuration and records
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    lr: float = 0.05
    steps: int = 200
    batch: int = 2
    restarts: int = 3
    seed: int = 0
    clip_norm: float = 1.0
    divergence: float = 10.0
    init: str = "gaussian-matched"
    neutral_token: str = "thing"
    inference_steps: int = 4
    heldout: int = 32
    final_window: int = 20
    fix_noise: bool = False   # ablation: reuse the step-0 latents at every step

    def __post_init__(self):
        for name in ("lr", "batch", "restarts", "clip_norm", "divergence", "heldout", "final_window"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not 1 <= self.inference_steps <= 8:
            raise ValueError("inference_steps must be in 1..8")
        if self.init not in ("gaussian-matched", "neutral-token-copy"):
            raise ValueError(f"unknown init strategy {self.init!r}")


def _seed_words(*key: int, n: int = 1) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(list(key)).generate_state(n)]


def training_seeds(run_seed: int, restart: int, step: int, batch: int) -> list[int]:
    return _seed_words(run_seed, 1, restart, step, n=batch)


def heldout_seeds(run_seed: int, n: int) -> list[int]:
    return _seed_words(run_seed, 2, n=n)


def restart_seed(run_seed: int, restart: int) -> int:
    return _seed_words(run_seed, 3, restart)[0]


@dataclass
class StepRecord:
    step: int
    loss: float
    seeds: tuple[int, ...]
    per_seed: tuple[float, ...]


@dataclass
class RestartResult:
    restart: int
    seed: int
    trace: list[StepRecord] = field(default_factory=list)
    diverged: bool = False
    reason: str = ""
    initial_heldout: float = math.nan
    final_train: float = math.nan
    heldout: float = math.nan
    learnable: torch.Tensor | None = None
    embeddings: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class RunRecord:
    config: dict
    template: str
    objective: Objective
    restarts: list[RestartResult]
    selected: int
    heldout_seeds: tuple[int, ...]
    kind: str = "soft"
    text: str | None = None

    @property
    def best(self) -> RestartResult:
        return self.restarts[self.selected]

    @property
    def final_embeddings(self) -> torch.Tensor:
        return self.best.embeddings

    @property
    def trace(self) -> list[StepRecord]:
        return self.best.trace

    @property
    def losses(self) -> list[float]:
        return [s.loss for s in self.best.trace]

    @property
    def heldout_loss(self) -> float:
        return self.best.heldout

    def training_seeds(self) -> set[int]:
        return {s for r in self.restarts for st in r.trace for s in st.seeds}

    def select(self) -> int:
        return select_restart(self.restarts)


def select_restart(restarts: Sequence[RestartResult]) -> int:
    """argmin held-out loss over non-diverged restarts, ties to the lowest index."""
    ok = [r for r in restarts if not r.diverged and math.isfinite(r.heldout)]
    if not ok:
        raise AllRestartsDiverged([r.seed for r in restarts])
    return min(ok, key=lambda r: (r.heldout, r.restart)).restart


class AllRestartsDiverged(RuntimeError):
    def __init__(self, seeds: Sequence[int]):
        super().__init__(f"every restart diverged (restart seeds {list(seeds)})")
        self.seeds = list(seeds)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_learnable(template: PromptTemplate, strategy: str, seed: int,
                   table: torch.Tensor, neutral_index: int | None = None) -> torch.Tensor:
    n, d = template.n_learnable, table.shape[1]
    if strategy == "neutral-token-copy":
        if neutral_index is None:
            raise ValueError("neutral-token-copy needs a neutral token")
        return table[neutral_index].detach().clone().expand(n, d).clone()
    if strategy == "gaussian-matched":
        g = torch.Generator().manual_seed(int(seed))
        mean = table.mean(0)
        std = table.std(0)
        return (mean + std * torch.randn(n, d, generator=g, dtype=torch.float32).to(table.dtype)).detach()
    raise ValueError(f"unknown init strategy {strategy!r}")


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

class Parameterization(Protocol):
    """How optimized parameters become an embedding sequence."""

    def init(self, restart: int, seed: int) -> torch.Tensor: ...

    def embed(self, params: torch.Tensor, step: int) -> EmbeddingSequence: ...

    def final(self, params: torch.Tensor) -> EmbeddingSequence: ...


class SoftRows:
    def __init__(self, template: PromptTemplate, pipeline: GeneratorPipeline, cfg: OptimizerConfig):
        self.template = template
        self.vocab = pipeline.vocab
        self.cfg = cfg

    def init(self, restart: int, seed: int) -> torch.Tensor:
        neutral = self.vocab.index(self.cfg.neutral_token) if self.cfg.init == "neutral-token-copy" else None
        return init_learnable(self.template, self.cfg.init, seed, self.vocab.table, neutral)

    def embed(self, params, step):
        return encode_prompt(self.template, params, self.vocab)

    def final(self, params):
        return encode_prompt(self.template, params.detach(), self.vocab)


def evaluate_embedding(emb: EmbeddingSequence | torch.Tensor, pipeline: GeneratorPipeline,
                       probe: ClassifierProbe, objective: Objective, seeds: Sequence[int],
                       steps: int = 4, chunk: int = 16) -> list[float]:
    """Per-seed objective values under fixed embeddings."""
    out: list[float] = []
    with torch.no_grad():
        for i in range(0, len(seeds), chunk):
            z = pipeline.sample_latents(seeds[i:i + chunk])
            images = generate(pipeline, emb, z, steps)
            out.extend(per_image_loss(objective, images, probe).tolist())
    return out


def _mean(xs: Sequence[float]) -> float:
    return float(np.mean(xs)) if len(xs) else math.nan


def run_restart(param: Parameterization, objective: Objective, pipeline: GeneratorPipeline,
                probe: ClassifierProbe, cfg: OptimizerConfig, restart: int,
                heldout: Sequence[int], lr: float | None = None) -> tuple[RestartResult, torch.Tensor]:
    seed = restart_seed(cfg.seed, restart)
    res = RestartResult(restart=restart, seed=seed)
    params = param.init(restart, seed).clone().requires_grad_(True)
    res.initial_heldout = _mean(evaluate_embedding(param.final(params), pipeline, probe, objective,
                                                   heldout, cfg.inference_steps))
    opt = torch.optim.Adam([params], lr=lr or cfg.lr)
    initial = None
    for step in range(cfg.steps):
        seeds = training_seeds(cfg.seed, restart, 0 if cfg.fix_noise else step, cfg.batch)
        z = pipeline.sample_latents(seeds)
        emb = param.embed(params, step)
        try:
            images = generate(pipeline, emb, z, cfg.inference_steps)
        except FloatingPointError as exc:
            res.diverged, res.reason = True, str(exc)
            break
        per = per_image_loss(objective, images, probe)
        value = per.mean()
        v = float(value.detach())
        if initial is None:
            initial = v
        if not math.isfinite(v):
            res.diverged, res.reason = True, f"non-finite loss at step {step}"
            break
        if v > initial + (cfg.divergence - 1) * max(abs(initial), 1.0):
            res.diverged, res.reason = True, f"loss {v:.4g} exceeded {cfg.divergence:g}x the initial {initial:.4g} at step {step}"
            break
        res.trace.append(StepRecord(step, v, tuple(seeds), tuple(float(x) for x in per.detach())))
        opt.zero_grad()
        value.backward()
        if not torch.isfinite(params.grad).all():
            # reduced-precision backends can overflow in the backward pass
            res.diverged, res.reason = True, f"non-finite gradient at step {step}"
            break
        torch.nn.utils.clip_grad_norm_([params], cfg.clip_norm)
        opt.step()
    if res.diverged:
        log.warning("restart %d (seed %d) diverged: %s", restart, seed, res.reason)
        return res, params.detach()
    final = param.final(params)
    window = [s for st in res.trace[-cfg.final_window:] for s in st.seeds]
    window = list(dict.fromkeys(window))
    res.final_train = _mean(evaluate_embedding(final, pipeline, probe, objective, window, cfg.inference_steps))
    res.heldout = _mean(evaluate_embedding(final, pipeline, probe, objective, heldout, cfg.inference_steps))
    res.embeddings = final.matrix.detach().clone()
    return res, params.detach()


def optimize(template: PromptTemplate, objective: Objective, pipeline: GeneratorPipeline,
             probe: ClassifierProbe, cfg: OptimizerConfig | None = None) -> RunRecord:
    cfg = cfg or OptimizerConfig()
    return drive(SoftRows(template, pipeline, cfg), template, objective, pipeline, probe, cfg)


def drive(param: Parameterization, template: PromptTemplate, objective: Objective,
          pipeline: GeneratorPipeline, probe: ClassifierProbe, cfg: OptimizerConfig,
          kind: str = "soft") -> RunRecord:
    """Run every restart of ``param`` and select one on held-out noise."""
    objective.validate(probe)
    if template.n_learnable < 1:
        raise ValueError("template has no learnable slots")
    held = heldout_seeds(cfg.seed, cfg.heldout)
    results = []
    for r in range(cfg.restarts):
        res, params = run_restart(param, objective, pipeline, probe, cfg, r, held)
        res.learnable = params
        results.append(res)
    record = RunRecord(config=asdict(cfg), template=template.render(), objective=objective,
                       restarts=results, selected=select_restart(results), heldout_seeds=tuple(held),
                       kind=kind)
    _check_disjoint(record, held)
    return record


def _check_disjoint(record: RunRecord, seeds: Sequence[int]) -> None:
    overlap = record.training_seeds() & set(seeds)
    if overlap:
        raise ValueError(f"held-out seeds overlap training seeds: {sorted(overlap)[:5]}")


def evaluate_generalization(record: RunRecord, pipeline: GeneratorPipeline, probe: ClassifierProbe,
                            objective: Objective, seeds: Sequence[int], steps: int | None = None) -> float:
    """Mean objective of the selected embeddings over held-out latent seeds."""
    _check_disjoint(record, seeds)
    k = steps or record.config.get("inference_steps", 4)
    return _mean(evaluate_embedding(record.final_embeddings, pipeline, probe, objective, seeds, k))
