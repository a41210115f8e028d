import threading

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from prompt_explainer.pipeline import (EOS, SOS, BackendUnavailable, ClassTarget, EmbeddingSequence,
                                       FeatureTarget, Fixed, ImageBatch, Learnable, LatentCode,
                                       NonFiniteLatentError, PromptTemplate, TokenSequence,
                                       UnknownTokenError, Vocabulary, available_backends, embed_tokens,
                                       encode_prompt, generate, load_backend, parse_target, target_name,
                                       weights_checksum)

WORDS = st.sampled_from(["a", "the", "shape", "of", "texture", "thing", "*"])


def small_vocab(dim=4):
    words = (SOS, EOS, "<pad>", "a", "the", "shape", "of", "texture", "thing")
    return Vocabulary(words, torch.arange(len(words) * dim, dtype=torch.float32).view(-1, dim),
                      specials=frozenset({"<pad>"}))


# --- vocabulary -------------------------------------------------------------

def test_vocab_rejects_mismatched_table():
    with pytest.raises(ValueError):
        Vocabulary(("a", "b"), torch.zeros(3, 2))


def test_unknown_token_names_the_token():
    with pytest.raises(UnknownTokenError) as exc:
        small_vocab().index("zebra")
    assert "zebra" in str(exc.value)


def test_content_mask_excludes_boundaries_and_specials():
    v = small_vocab()
    mask = v.content_mask()
    assert [w for w, m in zip(v.words, mask) if not m] == [SOS, EOS, "<pad>"]


def test_template_markers_map_to_vocab_boundaries():
    words = ("<|startoftext|>", "<|endoftext|>", "cat")
    v = Vocabulary(words, torch.eye(3), "<|startoftext|>", "<|endoftext|>")
    assert v.index(SOS) == 0 and v.index(EOS) == 1


def test_subword_hooks():
    words = ("<s>", "</s>", "ca", "t", "dog")
    v = Vocabulary(words, torch.eye(5), "<s>", "</s>",
                   text_to_ids=lambda t: {"cat": [2, 3], "dog": [4]}[t],
                   ids_to_text=lambda ids: "".join(words[i] for i in ids))
    assert v.index("dog") == 4
    assert v.tokenize("cat") == [2, 3]
    with pytest.raises(UnknownTokenError):
        v.index("cat")      # two tokens: not a single word
    assert v.decode([0, 2, 3, 1]) == "cat"
    assert v.token_text(4) == "dog"


# --- templates --------------------------------------------------------------

@given(st.lists(WORDS, max_size=8))
def test_template_parse_render_roundtrip(words):
    text = " ".join(words)
    t = PromptTemplate.parse(text)
    assert t.slots[0] == Fixed(SOS) and t.slots[-1] == Fixed(EOS)
    assert t.render() == text
    assert t.n_learnable == words.count("*")
    assert [t.slots[p] for p in t.learnable_positions] == [Learnable(k) for k in range(t.n_learnable)]


def test_template_requires_boundaries_and_contiguous_slots():
    with pytest.raises(ValueError):
        PromptTemplate((Fixed("a"), Fixed(EOS)))
    with pytest.raises(ValueError):
        PromptTemplate((Fixed(SOS), Learnable(1), Fixed(EOS)))


def test_with_prefix():
    t = PromptTemplate.with_prefix("the shape of", 2)
    assert t.render() == "the shape of * *"
    assert t.render(["x", "y"]) == "the shape of x y"


@given(st.lists(WORDS, max_size=6), st.integers(0, 2 ** 16))
def test_encode_prompt_places_rows(words, seed):
    v = small_vocab()
    t = PromptTemplate.parse(" ".join(words))
    rows = torch.randn(t.n_learnable, v.dim, generator=torch.Generator().manual_seed(seed))
    emb = encode_prompt(t, rows, v)
    assert emb.matrix.shape == (len(t), v.dim)
    assert sum(emb.learnable) == t.n_learnable
    for k, p in enumerate(t.learnable_positions):
        assert torch.equal(emb.matrix[p], rows[k])
    for i, s in enumerate(t.slots):
        if isinstance(s, Fixed):
            assert torch.equal(emb.matrix[i], v.table[v.index(s.token)])


def test_encode_prompt_row_count_checked():
    v = small_vocab()
    with pytest.raises(ValueError):
        encode_prompt(PromptTemplate.parse("a *"), torch.zeros(2, v.dim), v)


def test_encode_prompt_gradient_reaches_only_learnable_rows():
    v = small_vocab()
    rows = torch.zeros(1, v.dim, requires_grad=True)
    emb = encode_prompt(PromptTemplate.parse("the *"), rows, v)
    emb.matrix.sum().backward()
    assert torch.equal(rows.grad, torch.ones(1, v.dim))
    assert v.table.grad is None


def test_token_sequence_validation():
    v = small_vocab()
    seq = TokenSequence.from_text(v, "the shape")
    seq.validate(v)
    assert embed_tokens(seq, v).matrix.shape == (4, v.dim)
    with pytest.raises(ValueError):
        TokenSequence((3, 1)).validate(v)
    with pytest.raises(ValueError):
        TokenSequence((0, 99, 1)).validate(v)


# --- generation -------------------------------------------------------------

def test_generate_shapes_and_determinism(world):
    gen = world.generator
    emb = embed_tokens(TokenSequence.from_text(gen.vocab, "tomato"), gen.vocab)
    z = gen.sample_latents([3, 4, 5])
    a = generate(gen, emb, z)
    b = generate(gen, emb, gen.sample_latents([3, 4, 5]))
    assert a.pixels.shape == (3, *gen.image_shape)
    assert torch.equal(a.pixels, b.pixels)


def test_latent_draw_depends_only_on_seed(world):
    gen = world.generator
    both = gen.sample_latents([7, 8]).values
    assert torch.equal(both[1], gen.sample_latents([8]).values[0])


def test_generate_rejects_bad_inputs(world):
    gen = world.generator
    emb = embed_tokens(TokenSequence.from_text(gen.vocab, "lime"), gen.vocab)
    z = gen.sample_latents([0])
    with pytest.raises(ValueError):
        generate(gen, emb, z, steps=0)
    bad = LatentCode(torch.zeros(1, 2, 2, 2), (0,))
    with pytest.raises(ValueError):
        generate(gen, emb, bad)
    nan = LatentCode(torch.full_like(z.values, float("nan")), (0,))
    with pytest.raises(NonFiniteLatentError):
        generate(gen, emb, nan)


def test_generate_gradient_flows_to_embedding(world):
    gen = world.generator
    rows = gen.vocab.table[[gen.vocab.index("plum")]].clone().requires_grad_(True)
    emb = encode_prompt(PromptTemplate.parse("*"), rows, gen.vocab)
    img = generate(gen, emb, gen.sample_latents([1, 2]))
    world.probe.response(img, ClassTarget(2)).sum().backward()
    assert rows.grad is not None and torch.isfinite(rows.grad).all() and rows.grad.abs().sum() > 0


# --- classifier probe -------------------------------------------------------

def test_probe_targets(world):
    probe = world.probe
    assert parse_target("class:2") == ClassTarget(2)
    assert parse_target("feature:7") == FeatureTarget(7)
    assert target_name(FeatureTarget(3)) == "feature:3"
    with pytest.raises(ValueError):
        parse_target("neuron:1")
    with pytest.raises(ValueError) as exc:
        probe.validate(ClassTarget(probe.n_classes))
    assert "available" in str(exc.value)
    with pytest.raises(ValueError):
        probe.validate(FeatureTarget(-1))


def test_probe_response_matches_forward(world):
    probe = world.probe
    imgs = world.class_scenes(1, n=4)
    out = probe.forward(imgs)
    assert torch.equal(probe.response(imgs, ClassTarget(1)), out.logits[:, 1])
    assert torch.equal(probe.response(imgs, FeatureTarget(5)), out.features[:, 5])
    # features feed the head
    head = probe.head
    assert torch.allclose(out.logits, out.features @ head.weight.T + head.bias, atol=1e-5)


def test_probe_preprocess_value_range(world):
    probe = world.probe
    imgs = world.class_scenes(0, n=2)
    shifted = ImageBatch(imgs.pixels * 2 - 1, (-1.0, 1.0))
    assert torch.allclose(probe.preprocess(imgs), probe.preprocess(shifted), atol=1e-6)


def test_probe_concurrent_forward_is_isolated(world):
    probe = world.probe
    batches = [world.class_scenes(c, n=3) for c in range(4)]
    expected = [probe.forward(b).features for b in batches]
    got = [None] * 4

    def run(i):
        for _ in range(5):
            got[i] = probe.forward(batches[i]).features

    threads = [threading.Thread(target=run, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for e, g in zip(expected, got):
        assert torch.equal(e, g)


# --- checksums and registry -------------------------------------------------

def test_weights_checksum_sensitive_to_any_change():
    lin = torch.nn.Linear(3, 2)
    before = weights_checksum([lin])
    assert weights_checksum([lin]) == before
    with torch.no_grad():
        lin.bias[0] += 1e-7
    assert weights_checksum([lin]) != before


def test_registry():
    assert {"toy", "ldm-consistency", "ldm-tiny"} <= set(available_backends())
    with pytest.raises(BackendUnavailable):
        load_backend("no-such-backend")


def test_toy_backend_rejects_unknown_keys():
    with pytest.raises(ValueError):
        load_backend("toy", {"colour": "red"})


def test_embedding_sequence_len():
    assert len(EmbeddingSequence(torch.zeros(5, 2), (False,) * 5)) == 5
