"""Discrete prompt search: one vocabulary-length logit vector per slot,
relaxed with Gumbel-Softmax and read back as words."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .pipeline import (ClassifierProbe, EmbeddingSequence, GeneratorPipeline, PromptTemplate,
                       TokenSequence, Vocabulary, embed_tokens, encode_prompt)
from .soft_prompt import Objective, OptimizerConfig, RunRecord, drive

log = logging.getLogger(__name__)

MIN_TEMPERATURE = 1e-4


@dataclass(frozen=True)
class GumbelConfig:
    initial_temperature: float = 1.0
    final_temperature: float = 0.1
    hard: bool = True
    seed: int = 0
    init_scale: float = 0.01   # std of the initial logits

    def __post_init__(self):
        if not (self.initial_temperature > 0 and self.final_temperature > 0):
            raise ValueError("temperatures must be positive")
        if self.final_temperature > self.initial_temperature:
            raise ValueError("final temperature must not exceed the initial one")

    def temperature(self, step: int, total: int) -> float:
        """Geometric anneal from initial (step 0) to final (step total-1)."""
        if total <= 1:
            return self.initial_temperature
        frac = min(max(step / (total - 1), 0.0), 1.0)
        return self.initial_temperature * (self.final_temperature / self.initial_temperature) ** frac


def gumbel_noise(shape: tuple[int, ...], seed: int, *key: int, dtype=torch.float32) -> torch.Tensor:
    s = int(np.random.SeedSequence([seed, 4, *key]).generate_state(1)[0])
    u = torch.rand(shape, generator=torch.Generator().manual_seed(s), dtype=torch.float64)
    u = u.clamp(1e-12, 1 - 1e-12)
    return (-torch.log(-torch.log(u))).to(dtype)


def masked_argmax(logits: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Row-wise argmax; ties go to the lowest index."""
    if mask is not None:
        logits = logits.masked_fill(~mask, -torch.inf)
    best = logits.max(-1, keepdim=True).values
    hits = logits == best
    idx = torch.arange(logits.shape[-1]).expand_as(logits)
    return torch.where(hits, idx, logits.shape[-1]).min(-1).values


def gumbel_select(logits: torch.Tensor, table: torch.Tensor, cfg: GumbelConfig, step: int,
                  total_steps: int = 1, key: tuple[int, ...] = (),
                  mask: torch.Tensor | None = None,
                  temperature: float | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Soft weights (n x V, rows on the simplex) and the selected embedding
    rows (n x d).

    With ``cfg.hard`` the forward value is exactly the table row at the argmax
    of the perturbed logits while the gradient follows the soft weights.
    """
    squeeze = logits.dim() == 1
    if squeeze:
        logits = logits[None]
    tau = cfg.temperature(step, total_steps) if temperature is None else temperature
    if tau < MIN_TEMPERATURE:
        log.warning("temperature %.3g below %.3g, clamped", tau, MIN_TEMPERATURE)
        tau = MIN_TEMPERATURE
    g = gumbel_noise(tuple(logits.shape), cfg.seed, *key, step, dtype=logits.dtype)
    y = (logits + g) / tau
    if mask is not None:
        y = y.masked_fill(~mask, -torch.inf)
    weights = torch.softmax(y, -1)
    soft_rows = weights @ table
    if cfg.hard:
        idx = masked_argmax(y.detach())
        rows = table[idx] + (soft_rows - soft_rows.detach())
    else:
        rows = soft_rows
    if squeeze:
        return weights[0], rows[0]
    return weights, rows


class HardLogits:
    """Parameterization for ``drive``: the optimized tensor is n x V logits."""

    def __init__(self, template: PromptTemplate, vocab: Vocabulary, cfg: OptimizerConfig,
                 gumbel: GumbelConfig):
        self.template = template
        self.vocab = vocab
        self.cfg = cfg
        self.gumbel = gumbel
        self.mask = vocab.content_mask()
        self._restart = 0

    def init(self, restart: int, seed: int) -> torch.Tensor:
        self._restart = restart
        g = torch.Generator().manual_seed(int(seed))
        n, V = self.template.n_learnable, len(self.vocab)
        return (self.gumbel.init_scale * torch.randn(n, V, generator=g, dtype=torch.float64)).to(self.vocab.table.dtype)

    def embed(self, params: torch.Tensor, step: int) -> EmbeddingSequence:
        _, rows = gumbel_select(params, self.vocab.table, self.gumbel, step, self.cfg.steps,
                                key=(self.cfg.seed, self._restart), mask=self.mask)
        return encode_prompt(self.template, rows, self.vocab)

    def words(self, params: torch.Tensor) -> list[str]:
        return [self.vocab.token_text(i) for i in masked_argmax(params.detach(), self.mask).tolist()]

    def final(self, params: torch.Tensor) -> EmbeddingSequence:
        idx = masked_argmax(params.detach(), self.mask)
        return encode_prompt(self.template, self.vocab.table[idx], self.vocab)


def optimize_hard(template: PromptTemplate, objective: Objective, pipeline: GeneratorPipeline,
                  probe: ClassifierProbe, cfg: OptimizerConfig | None = None,
                  gumbel: GumbelConfig | None = None) -> tuple[RunRecord, str]:
    cfg = cfg or OptimizerConfig()
    gumbel = gumbel or GumbelConfig(seed=cfg.seed)
    param = HardLogits(template, pipeline.vocab, cfg, gumbel)
    record = drive(param, template, objective, pipeline, probe, cfg, kind="hard")
    for r in record.restarts:
        if r.learnable is not None:
            r.extra["words"] = param.words(r.learnable)
    record.config["gumbel"] = asdict(gumbel)
    record.text = template.render(record.best.extra["words"])
    return record, record.text


def encode_text(text: str, vocab: Vocabulary) -> EmbeddingSequence:
    """Embeddings of a plain prompt string, for re-running a decoded hard prompt."""
    tokens = TokenSequence.from_text(vocab, text)
    tokens.validate(vocab)
    return embed_tokens(tokens, vocab)
