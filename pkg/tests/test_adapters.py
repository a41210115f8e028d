"""Latent consistency adapter, checked on a randomly initialized miniature
model so no downloads are needed."""
import pytest
import torch

from prompt_explainer.adapters import clip_vocabulary, describe, guidance_embedding
from prompt_explainer.pipeline import BackendUnavailable, PromptTemplate, encode_prompt, generate, load_backend
from prompt_explainer.soft_prompt import OptimizerConfig, class_ce, optimize, per_image_loss

pytest.importorskip("diffusers")


def test_text_path_matches_token_ids(ldm):
    gen, _ = ldm
    enc = gen.text_encoder
    V = gen.vocab.table.shape[0]
    ids = [V - 2, 5, 17, 3, V - 1]
    padded = ids + [gen.pad_id] * (gen.context_length - len(ids))
    with torch.no_grad():
        want = enc(input_ids=torch.tensor([padded])).last_hidden_state
        got = gen.encode_text(gen.vocab.table[ids])
    assert torch.allclose(got, want, atol=1e-5)


def test_guidance_embedding_matches_reference():
    from diffusers import LatentConsistencyModelPipeline

    for w in (0.0, 1.5, 7.0):
        ref = LatentConsistencyModelPipeline.get_guidance_scale_embedding(None, torch.tensor([w]), embedding_dim=16)
        # the reference takes log(10000) in float32, hence the tolerance
        assert torch.allclose(guidance_embedding(w, 16), ref, atol=1e-3)
    assert guidance_embedding(2.0, 7).shape == (1, 7)


def test_vocabulary_without_tokenizer(ldm):
    gen, _ = ldm
    vocab, pad = clip_vocabulary(gen.text_encoder)
    assert vocab.sos == "<|startoftext|>" and vocab.eos == "<|endoftext|>"
    assert pad == len(vocab) - 1
    assert not vocab.content_mask()[-2:].any()


def test_generation_is_deterministic_and_differentiable(ldm):
    gen, probe = ldm
    t = PromptTemplate.with_prefix("", 1)
    e = gen.vocab.table[7:8].clone().requires_grad_(True)
    z = gen.sample_latents([1, 2])
    x = generate(gen, encode_prompt(t, e, gen.vocab), z, steps=2)
    assert tuple(x.pixels.shape) == (2, *gen.image_shape)
    per_image_loss(class_ce(1), x, probe).mean().backward()
    assert e.grad is not None and torch.isfinite(e.grad).all() and e.grad.abs().sum() > 0
    with torch.no_grad():
        again = generate(gen, encode_prompt(t, e.detach(), gen.vocab), z, steps=2)
    assert torch.equal(x.pixels.detach(), again.pixels)


def test_soft_prompt_runs_on_latent_backend(ldm):
    gen, probe = ldm
    rec = optimize(PromptTemplate.with_prefix("", 1), class_ce(0), gen, probe,
                   OptimizerConfig(steps=2, restarts=1, heldout=2, final_window=1, inference_steps=1))
    assert rec.final_embeddings.shape[1] == gen.vocab.table.shape[1]
    assert describe(gen)["backend"] == "ldm-tiny"


def test_missing_weights_are_backend_unavailable(tmp_path):
    with pytest.raises(BackendUnavailable):
        load_backend("ldm-consistency", {"model_id": str(tmp_path / "nowhere"), "local_files_only": True})
