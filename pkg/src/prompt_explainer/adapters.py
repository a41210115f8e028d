"""Adapters for real frozen models: a latent consistency text-to-image model
(diffusers) and a torchvision ImageNet classifier.

Both heavy dependencies are optional. Importing this module never imports
them; the backend factories do, and turn any failure into
``BackendUnavailable``.

Backends registered here:

``ldm-consistency``
    ``LatentConsistencyModelPipeline.from_pretrained(model_id)`` plus a
    torchvision classifier (``classifier`` block).
``ldm-tiny``
    Randomly initialized miniature versions of the same architectures. Only
    useful for smoke tests of the plumbing and gradient flow.
"""
from __future__ import annotations

import math
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .pipeline import (BackendUnavailable, ClassifierProbe, GeneratorPipeline, ImageBatch, LatentCode,
                       Vocabulary, register_backend)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_DTYPES = {"float32": torch.float32, "float16": torch.float16, "bfloat16": torch.bfloat16}


def _freeze(m: nn.Module, dtype: torch.dtype) -> nn.Module:
    if next(m.parameters()).dtype != dtype:
        m = m.to(dtype)
    m.eval()
    for p in m.parameters():
        p.requires_grad_(False)
    return m


def guidance_embedding(w: float, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of the guidance scale for guidance-distilled
    consistency models (1 x dim)."""
    w = torch.tensor([float(w) * 1000.0], dtype=torch.float64)
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=torch.float64) * -(math.log(10000.0) / (half - 1)))
    ang = w[:, None] * freqs[None]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb.to(dtype)


def _causal_mask(length: int, dtype: torch.dtype) -> torch.Tensor:
    m = torch.full((length, length), torch.finfo(dtype).min, dtype=dtype).triu(1)
    return m[None, None]


def step_noise_seed(seed: int) -> int:
    return int(np.random.SeedSequence([int(seed), 6]).generate_state(1)[0])


def clip_vocabulary(text_encoder: nn.Module, tokenizer=None) -> tuple[Vocabulary, int]:
    """Vocabulary over the text encoder's token-embedding table; also returns
    the padding token id."""
    table = text_encoder.get_input_embeddings().weight.detach()
    V = table.shape[0]
    if tokenizer is not None:
        words = tuple(tokenizer.convert_ids_to_tokens(list(range(V))))
        sos, eos = tokenizer.bos_token, tokenizer.eos_token
        pad = tokenizer.pad_token_id if tokenizer.pad_token_id is not None else tokenizer.eos_token_id
        specials = frozenset(tokenizer.all_special_tokens)
        vocab = Vocabulary(words, table, sos, eos, specials,
                           text_to_ids=lambda t: tokenizer(t, add_special_tokens=False).input_ids,
                           ids_to_text=lambda ids: tokenizer.decode(ids, skip_special_tokens=True))
        return vocab, int(pad)
    # no tokenizer: the last two rows act as the boundary tokens, as in CLIP
    words = tuple(f"tok{i}" for i in range(V - 2)) + ("<|startoftext|>", "<|endoftext|>")
    vocab = Vocabulary(words, table, words[-2], words[-1], frozenset(words[-2:]))
    return vocab, V - 1


class LatentConsistencyGenerator(GeneratorPipeline):
    """x(z) = D(denoise_K(z, tau(e))) for a latent consistency model.

    The learnable embeddings enter in place of the token-embedding lookup of
    the text encoder; positional embeddings and the transformer are applied
    as usual. The sequence is padded to the encoder's context length with the
    padding token's embedding.
    """

    backend_id = "ldm-consistency"

    def __init__(self, text_encoder: nn.Module, unet: nn.Module, vae: nn.Module, scheduler,
                 tokenizer=None, guidance_scale: float = 8.0, original_inference_steps: int = 50,
                 max_steps: int = 8, dtype: torch.dtype = torch.float32):
        self.text_encoder = _freeze(text_encoder, dtype)
        self.unet = _freeze(unet, dtype)
        self.vae = _freeze(vae, dtype)
        self.scheduler_config = dict(scheduler.config)
        self.guidance_scale = float(guidance_scale)
        self.original_inference_steps = int(original_inference_steps)
        self.max_steps = int(max_steps)
        self.dtype = dtype
        self.vocab, self.pad_id = clip_vocabulary(self.text_encoder, tokenizer)
        self.context_length = int(self.text_encoder.config.max_position_embeddings)
        scale = 2 ** (len(self.vae.config.block_out_channels) - 1)
        hw = int(self.unet.config.sample_size)
        self.latent_shape = (int(self.unet.config.in_channels), hw, hw)
        self.image_shape = (3, hw * scale, hw * scale)

    # text -----------------------------------------------------------------

    def encode_text(self, emb: torch.Tensor) -> torch.Tensor:
        n, L = emb.shape[0], self.context_length
        if n > L:
            raise ValueError(f"prompt has {n} tokens; the text encoder accepts at most {L}")
        pad = self.vocab.table[self.pad_id].to(self.dtype).expand(L - n, -1)
        full = torch.cat([emb.to(self.dtype), pad])[None]
        tm = getattr(self.text_encoder, "text_model", self.text_encoder)
        hidden = tm.embeddings(inputs_embeds=full)
        out = tm.encoder(inputs_embeds=hidden, attention_mask=_causal_mask(L, hidden.dtype))
        hidden = out[0] if isinstance(out, tuple) else out.last_hidden_state
        return tm.final_layer_norm(hidden)

    # denoising ------------------------------------------------------------

    def _scheduler(self, steps: int):
        from diffusers import LCMScheduler

        # a fresh scheduler per call: schedulers carry a step counter
        sched = LCMScheduler.from_config(self.scheduler_config)
        sched.set_timesteps(steps, original_inference_steps=self.original_inference_steps)
        return sched

    def denoise(self, latents: LatentCode, cond: torch.Tensor, steps: int,
                check: Callable[[int, torch.Tensor], None]) -> torch.Tensor:
        sched = self._scheduler(steps)
        x = latents.values.to(self.dtype) * sched.init_noise_sigma
        B = x.shape[0]
        cond = cond.expand(B, -1, -1)
        tcond = None
        dim = getattr(self.unet.config, "time_cond_proj_dim", None)
        if dim:
            tcond = guidance_embedding(self.guidance_scale - 1.0, dim, self.dtype).expand(B, -1)
        gens = [torch.Generator().manual_seed(step_noise_seed(s)) for s in latents.seeds]
        denoised = x
        for i, t in enumerate(sched.timesteps):
            pred = self.unet(x, t, timestep_cond=tcond, encoder_hidden_states=cond, return_dict=False)[0]
            x, denoised = sched.step(pred, t, x, generator=gens, return_dict=False)
            check(i, denoised)
        return denoised

    def decode(self, latents: torch.Tensor) -> ImageBatch:
        x = self.vae.decode(latents / self.vae.config.scaling_factor, return_dict=False)[0]
        return ImageBatch(x.to(torch.float32), value_range=(-1.0, 1.0))

    def modules(self) -> list[nn.Module]:
        return [self.text_encoder, self.unet, self.vae]


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

def _class_names(weights, n: int, path: str | None) -> tuple[str, ...]:
    if path:
        with open(path) as fh:
            names = tuple(line.strip() for line in fh if line.strip())
        if len(names) != n:
            raise ValueError(f"{path}: expected {n} class names, found {len(names)}")
        return names
    if weights is not None and "categories" in weights.meta:
        return tuple(weights.meta["categories"])
    return tuple(f"class_{i}" for i in range(n))


def torchvision_probe(arch: str = "resnet50", weights: str | None = None, checkpoint: str | None = None,
                      state_dict_key: str | None = None, strip_prefix: str = "",
                      num_classes: int = 1000, input_size: int = 224,
                      class_names: str | None = None) -> ClassifierProbe:
    """ResNet-style classifier; features are the pooled penultimate layer.

    ``checkpoint`` loads a state dict (e.g. an adversarially trained model);
    ``state_dict_key`` selects a nested entry and keys starting with
    ``strip_prefix`` have it removed.
    """
    import torchvision

    w = torchvision.models.get_model_weights(arch)[weights] if weights else None
    model = torchvision.models.get_model(arch, weights=w, num_classes=num_classes)
    if checkpoint:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        if state_dict_key:
            state = state[state_dict_key]
        if strip_prefix:
            state = {k[len(strip_prefix):]: v for k, v in state.items() if k.startswith(strip_prefix)}
        model.load_state_dict(state)
    return ClassifierProbe(model, "avgpool", "fc", (input_size, input_size), IMAGENET_MEAN, IMAGENET_STD,
                           _class_names(w, num_classes, class_names), pre_feature_layer="layer4",
                           backend_id=f"torchvision:{arch}")


def _probe_from(cfg: dict) -> ClassifierProbe:
    return torchvision_probe(**cfg)


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

def _unavailable(what: str, exc: BaseException) -> BackendUnavailable:
    return BackendUnavailable(f"{what}: {type(exc).__name__}: {exc}")


@register_backend("ldm-consistency")
def _ldm_backend(cfg: dict[str, Any]) -> tuple[GeneratorPipeline, ClassifierProbe]:
    model_id = cfg.get("model_id", "SimianLuo/LCM_Dreamshaper_v7")
    try:
        from diffusers import LatentConsistencyModelPipeline

        pipe = LatentConsistencyModelPipeline.from_pretrained(
            model_id, safety_checker=None, requires_safety_checker=False,
            local_files_only=bool(cfg.get("local_files_only", False)))
    except Exception as exc:  # import errors, missing weights, no network
        raise _unavailable(f"cannot load generator {model_id!r}", exc) from exc
    gen = LatentConsistencyGenerator(
        pipe.text_encoder, pipe.unet, pipe.vae, pipe.scheduler, pipe.tokenizer,
        guidance_scale=cfg.get("guidance_scale", 8.0),
        original_inference_steps=cfg.get("original_inference_steps", 50),
        max_steps=cfg.get("max_steps", 8),
        dtype=_DTYPES[cfg.get("dtype", "float32")])
    try:
        probe = _probe_from(dict(cfg.get("classifier", {"weights": "IMAGENET1K_V2"})))
    except Exception as exc:
        raise _unavailable("cannot load classifier", exc) from exc
    return gen, probe


def tiny_components(seed: int = 0, vocab_size: int = 64, image_size: int = 32):
    """Randomly initialized miniature text encoder / UNet / VAE / scheduler."""
    from diffusers import AutoencoderKL, LCMScheduler, UNet2DConditionModel
    from transformers import CLIPTextConfig, CLIPTextModel

    torch.manual_seed(seed)
    text = CLIPTextModel(CLIPTextConfig(vocab_size=vocab_size, hidden_size=32, intermediate_size=64,
                                        num_hidden_layers=2, num_attention_heads=4,
                                        max_position_embeddings=16, bos_token_id=vocab_size - 2,
                                        eos_token_id=vocab_size - 1, pad_token_id=vocab_size - 1))
    unet = UNet2DConditionModel(sample_size=image_size // 2, in_channels=4, out_channels=4,
                                block_out_channels=(32, 64), layers_per_block=1,
                                down_block_types=("CrossAttnDownBlock2D", "DownBlock2D"),
                                up_block_types=("UpBlock2D", "CrossAttnUpBlock2D"),
                                cross_attention_dim=32, attention_head_dim=8, norm_num_groups=8,
                                time_cond_proj_dim=16)
    vae = AutoencoderKL(in_channels=3, out_channels=3, latent_channels=4, block_out_channels=(8, 16),
                        down_block_types=("DownEncoderBlock2D",) * 2, up_block_types=("UpDecoderBlock2D",) * 2,
                        norm_num_groups=8, sample_size=image_size)
    sched = LCMScheduler(num_train_timesteps=1000, beta_schedule="scaled_linear",
                         beta_start=0.00085, beta_end=0.012)
    return text, unet, vae, sched


@register_backend("ldm-tiny")
def _tiny_backend(cfg: dict[str, Any]) -> tuple[GeneratorPipeline, ClassifierProbe]:
    seed = int(cfg.get("seed", 0))
    try:
        parts = tiny_components(seed, image_size=int(cfg.get("image_size", 32)))
        import torchvision
    except Exception as exc:
        raise _unavailable("tiny latent generator needs diffusers, transformers and torchvision", exc) from exc
    gen = LatentConsistencyGenerator(*parts, guidance_scale=cfg.get("guidance_scale", 8.0),
                                     original_inference_steps=cfg.get("original_inference_steps", 50),
                                     max_steps=int(cfg.get("max_steps", 4)))
    gen.backend_id = "ldm-tiny"
    torch.manual_seed(seed + 1)
    n = int(cfg.get("num_classes", 4))
    model = torchvision.models.resnet18(num_classes=n)
    probe = ClassifierProbe(model, "avgpool", "fc", (32, 32), IMAGENET_MEAN, IMAGENET_STD,
                            tuple(f"class_{i}" for i in range(n)), pre_feature_layer="layer4",
                            backend_id="torchvision:resnet18-random")
    return gen, probe


def describe(gen: GeneratorPipeline) -> dict[str, Sequence[int] | str]:
    return {"backend": gen.backend_id, "latent_shape": list(gen.latent_shape),
            "image_shape": list(gen.image_shape)}
