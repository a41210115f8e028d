import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from prompt_explainer.pipeline import PromptTemplate, encode_prompt, generate
from prompt_explainer.soft_prompt import (AllRestartsDiverged, Objective, OptimizerConfig, RestartResult,
                                          class_ce, combined, evaluate_generalization, feature_max,
                                          heldout_seeds, init_learnable, optimize, per_image_loss,
                                          restart_seed, select_restart, training_seeds)

TEMPLATE = PromptTemplate.with_prefix("", 1)


def quick(**kw):
    base = dict(steps=6, restarts=2, heldout=4, final_window=3)
    base.update(kw)
    return OptimizerConfig(**base)


# --- objectives -------------------------------------------------------------

def test_objective_validation(world):
    with pytest.raises(ValueError):
        Objective("class_ce")
    with pytest.raises(ValueError):
        Objective("feature")
    with pytest.raises(ValueError):
        combined(0, 1, lam=-0.5)
    with pytest.raises(ValueError):
        Objective("mse", cls=0)
    with pytest.raises(ValueError):
        class_ce(99).validate(world.probe)
    with pytest.raises(ValueError):
        feature_max(99).validate(world.probe)


def test_per_image_loss_matches_manual_formula(world):
    imgs = world.class_scenes(2, n=5)
    out = world.probe.forward(imgs)
    logp = out.logits.double().log_softmax(1)[:, 2]
    phi = out.features.double()[:, 11]
    ce = per_image_loss(class_ce(2), imgs, world.probe).double()
    assert torch.allclose(ce, -logp, atol=1e-5)
    assert torch.allclose(per_image_loss(feature_max(11), imgs, world.probe).double(), -phi)
    comb = per_image_loss(combined(2, 11, 0.7), imgs, world.probe).double()
    assert torch.allclose(comb, -logp - 0.7 * phi, atol=1e-5)


def test_combined_with_zero_lambda_is_class_ce(world):
    imgs = world.class_scenes(0, n=3)
    a = per_image_loss(combined(0, 4, 0.0), imgs, world.probe)
    b = per_image_loss(class_ce(0), imgs, world.probe)
    assert torch.equal(a, b)


@pytest.mark.parametrize("objective", [class_ce(1), feature_max(7), combined(2, 13, 1.0)],
                         ids=["ce", "feature", "combined"])
def test_gradient_matches_central_differences(world64, objective):
    gen, probe = world64.generator, world64.probe
    z = gen.sample_latents([11, 12])
    e0 = init_learnable(TEMPLATE, "gaussian-matched", 3, gen.vocab.table)

    def f(e):
        return per_image_loss(objective, generate(gen, encode_prompt(TEMPLATE, e, gen.vocab), z), probe).mean()

    e = e0.clone().requires_grad_(True)
    f(e).backward()
    g = e.grad.numpy().ravel()
    h = 1e-4
    fd = np.empty_like(g)
    with torch.no_grad():
        for i in range(g.size):
            d = torch.zeros_like(e0).view(-1)
            d[i] = h
            d = d.view_as(e0)
            fd[i] = (f(e0 + d).item() - f(e0 - d).item()) / (2 * h)
    assert np.isclose(g, fd, rtol=1e-3, atol=1e-9).mean() >= 0.95


# --- configuration and seeds ------------------------------------------------

@pytest.mark.parametrize("kw", [dict(lr=0), dict(batch=0), dict(restarts=0), dict(steps=-1),
                                dict(inference_steps=9), dict(init="zeros"), dict(heldout=0)])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        OptimizerConfig(**kw)


@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 4), st.integers(0, 300))
def test_seed_streams_are_disjoint(run_seed, restart, step):
    train = set(training_seeds(run_seed, restart, step, 4))
    held = set(heldout_seeds(run_seed, 32))
    assert not train & held
    assert training_seeds(run_seed, restart, step, 4) == training_seeds(run_seed, restart, step, 4)
    assert restart_seed(run_seed, restart) not in train


def result(i, heldout, diverged=False):
    return RestartResult(restart=i, seed=i, heldout=heldout, diverged=diverged)


@given(st.lists(st.tuples(st.floats(-5, 5, allow_nan=False), st.booleans()), min_size=1, max_size=6))
def test_select_restart_is_argmin_over_survivors(items):
    rs = [result(i, h, d) for i, (h, d) in enumerate(items)]
    ok = [(h, i) for i, (h, d) in enumerate(items) if not d]
    if not ok:
        with pytest.raises(AllRestartsDiverged):
            select_restart(rs)
    else:
        assert select_restart(rs) == min(ok)[1]


def test_select_restart_ties_lowest_and_skips_nan():
    assert select_restart([result(0, math.nan), result(1, 0.5), result(2, 0.5)]) == 1


# --- optimizer behaviour ----------------------------------------------------

def test_record_structure_and_fresh_noise(world):
    cfg = quick()
    rec = optimize(TEMPLATE, class_ce(1), world.generator, world.probe, cfg)
    assert len(rec.restarts) == 2
    for r in rec.restarts:
        assert [s.step for s in r.trace] == list(range(cfg.steps))
        assert all(len(s.seeds) == cfg.batch for s in r.trace)
        # a fresh batch every step
        assert len({s.seeds for s in r.trace}) == cfg.steps
        assert all(math.isclose(s.loss, np.mean(s.per_seed), rel_tol=1e-6) for s in r.trace)
    assert not rec.training_seeds() & set(rec.heldout_seeds)
    assert rec.final_embeddings.shape == (len(TEMPLATE), world.generator.vocab.dim)
    assert rec.selected == select_restart(rec.restarts)


def test_fix_noise_reuses_step_zero_batch(world):
    rec = optimize(TEMPLATE, class_ce(1), world.generator, world.probe, quick(fix_noise=True, restarts=1))
    assert len({s.seeds for s in rec.trace}) == 1


def test_optimize_is_deterministic(world):
    a = optimize(TEMPLATE, feature_max(3), world.generator, world.probe, quick())
    b = optimize(TEMPLATE, feature_max(3), world.generator, world.probe, quick())
    assert a.losses == b.losses
    assert torch.equal(a.final_embeddings, b.final_embeddings)


def test_zero_steps_leaves_init(world):
    rec = optimize(TEMPLATE, class_ce(0), world.generator, world.probe, quick(steps=0))
    for r in rec.restarts:
        assert r.trace == []
        assert r.heldout == r.initial_heldout


def test_fixed_tokens_are_untouched(world):
    t = PromptTemplate.parse("the shape of *")
    rec = optimize(t, class_ce(2), world.generator, world.probe, quick())
    v = world.generator.vocab
    for i, w in enumerate(["the", "shape", "of"], start=1):
        assert torch.equal(rec.final_embeddings[i], v.table[v.index(w)])


def test_every_restart_diverging_raises(world):
    with pytest.raises(AllRestartsDiverged) as exc:
        optimize(TEMPLATE, class_ce(1), world.generator, world.probe, quick(divergence=1e-6))
    assert len(exc.value.seeds) == 2


def test_template_without_slots_rejected(world):
    with pytest.raises(ValueError):
        optimize(PromptTemplate.parse("tomato"), class_ce(0), world.generator, world.probe, quick())


def test_neutral_token_init(world):
    v = world.generator.vocab
    e = init_learnable(TEMPLATE, "neutral-token-copy", 0, v.table, v.index("thing"))
    assert torch.equal(e[0], v.table[v.index("thing")])
    g = init_learnable(PromptTemplate.with_prefix("", 200), "gaussian-matched", 0, v.table)
    assert torch.allclose(g.mean(0), v.table.mean(0), atol=0.3)


def test_generalization_rejects_training_seeds(world):
    rec = optimize(TEMPLATE, class_ce(1), world.generator, world.probe, quick(restarts=1))
    used = sorted(rec.training_seeds())[:2]
    with pytest.raises(ValueError):
        evaluate_generalization(rec, world.generator, world.probe, class_ce(1), used)
    fresh = heldout_seeds(12345, 8)
    v = evaluate_generalization(rec, world.generator, world.probe, class_ce(1), fresh)
    assert math.isfinite(v)


def test_learning_reduces_loss(world):
    rec = optimize(TEMPLATE, class_ce(2), world.generator, world.probe, quick(steps=60, restarts=1))
    assert rec.heldout_loss < rec.best.initial_heldout
