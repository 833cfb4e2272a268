"""Composite generation/editing model.

Wires the two frozen image encoders to the trainable parts: the
multimodal instruction encoder and the latent denoiser. The denoiser is
conditioned two ways at once: the encoded source image is concatenated to
the noisy latent along channels (zeros when the task has no source, so
pure generation always sees an all-zero conditioning latent), and the
encoded instruction sequence is read through cross-attention.
"""

from __future__ import annotations

from dataclasses import asdict
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .backbones import ConvAutoencoder, SemanticEncoder, ShapeError, build_backbones, freeze
from .checkpoints import load_tensors, load_module, module_tensors, save_tensors
from .config import RunConfig, config_from_dict
from .diffusion import Denoiser, NoiseSchedule, cfg_combine, ddim_sample, guidance_branches
from .forge import to_float_chw
from .fusion import BatchedCondition, ConditionSequence, InstructionEncoder, latent_tokens
from .grammar import MultimodalInstruction, parse


def as_image_tensor(img) -> torch.Tensor:
    """Accept uint8 (H, W, 3) arrays or float (3, H, W) tensors in [0, 1]."""
    if isinstance(img, np.ndarray):
        return to_float_chw(img)
    if isinstance(img, torch.Tensor):
        if img.dim() != 3 or img.shape[0] != 3:
            raise ShapeError(f"expected image (3, H, W), got {tuple(img.shape)}")
        return img.float()
    raise TypeError(f"unsupported image type {type(img).__name__}")


class EditorModel(nn.Module):
    """Frozen image encoders plus the trainable condition encoder and denoiser."""

    def __init__(self, cfg: RunConfig, ae: ConvAutoencoder, sem: SemanticEncoder):
        super().__init__()
        self.cfg = cfg
        b, f, d = cfg.backbone, cfg.fusion, cfg.diffusion
        if b.image_size % b.downsample_factor != 0:
            raise ValueError(f"image_size {b.image_size} not divisible by factor {b.downsample_factor}")
        self.latent_size = b.image_size // b.downsample_factor
        self.ae = freeze(ae)
        self.sem = freeze(sem)
        self.instr = InstructionEncoder(
            d_sem=b.d_sem,
            latent_channels=b.latent_channels,
            m_tokens=f.m_tokens,
            d_fusion=f.d_fusion,
            d_cond=f.d_cond,
            norm_mode=f.norm_mode,
            encoder_depth=f.encoder_depth,
            encoder_heads=f.encoder_heads,
            compressor_heads=f.compressor_heads,
            compressor_depth=f.compressor_depth,
            max_seq_len=f.max_seq_len,
            use_fusion=f.use_fusion,
        )
        self.denoiser = Denoiser(
            latent_channels=b.latent_channels,
            latent_size=self.latent_size,
            d_cond=f.d_cond,
            width=d.denoiser_width,
            depth=d.denoiser_depth,
            heads=d.heads,
            patch=d.denoiser_patch,
        )
        self.schedule = NoiseSchedule(d.T, d.beta_start, d.beta_end)

    def trainable_parameters(self):
        for p in self.instr.parameters():
            yield p
        for p in self.denoiser.parameters():
            yield p

    def frozen_fingerprint(self) -> torch.Tensor:
        """Cheap digest of the frozen encoder weights, for drift checks."""
        with torch.no_grad():
            parts = [t.detach().double().sum() for t in self.ae.state_dict().values()]
            parts += [t.detach().double().sum() for t in self.sem.state_dict().values()]
            return torch.stack(parts)

    # ----- feature extraction through the frozen encoders -----

    @torch.no_grad()
    def encode_image_latent(self, imgs: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) float -> scaled latents (B, C, S, S)."""
        return self.ae.encode_scaled(imgs)

    @torch.no_grad()
    def ref_features(self, imgs: list) -> list:
        """Per-image (semantic tokens, visual latent tokens) feature pairs.

        Runs each frozen encoder once over the whole stack.
        """
        if not imgs:
            return []
        batch = torch.stack([as_image_tensor(im) for im in imgs])
        sem_tokens = self.sem(batch)  # (B, n_patches, d_sem)
        vis_tokens = latent_tokens(self.ae.encode_scaled(batch))  # (B, n_v, C)
        return [(sem_tokens[i], vis_tokens[i]) for i in range(len(imgs))]

    # ----- condition encoding -----

    def encode_condition(self, instruction, ref_images=()) -> ConditionSequence:
        instr = parse(instruction) if isinstance(instruction, str) else instruction
        return self.instr.encode(instr, self.ref_features(list(ref_images)))

    def null_condition(self) -> ConditionSequence:
        """The empty instruction: begin/end markers only."""
        return self.instr.encode(parse(""), [])

    def predict_eps(self, x_t: torch.Tensor, cond_latent: torch.Tensor, t, cond_seq: ConditionSequence) -> torch.Tensor:
        """Noise prediction for a batch sharing one condition sequence."""
        tokens = cond_seq.tokens.unsqueeze(0).expand(x_t.shape[0], -1, -1)
        return self.denoiser(x_t, cond_latent, t, tokens)

    def prepare_batch(self, samples: list, cache: Optional[dict] = None) -> dict:
        """Encode a list of task samples for one training step.

        Respects each sample's dropout flags: ``drop_cond_input`` zeroes the
        conditioning latent, ``drop_mm`` swaps the instruction for the null
        condition (and drops its reference images with it).

        `cache`, if given, memoizes the frozen-encoder outputs (target and
        source latents, reference features) per sample id across steps; the
        frozen encoders dominate step time otherwise. Dropout is applied
        after the cache so flags never leak into it.
        """
        n = len(samples)
        if n == 0:
            raise ValueError("empty batch")
        # Cache misses encode one sample at a time: batched conv output for a
        # sample varies at the last bit with batch composition, and resumed
        # runs must retrace the original run exactly.
        if cache is None:
            targets = torch.stack([as_image_tensor(s.target) for s in samples])
            x0 = self.encode_image_latent(targets)
        else:
            for s in samples:
                if ("x0", s.sample_id) not in cache:
                    z = self.encode_image_latent(as_image_tensor(s.target).unsqueeze(0))
                    cache[("x0", s.sample_id)] = z[0].detach()
            x0 = torch.stack([cache[("x0", s.sample_id)] for s in samples])

        cond_latent = torch.zeros_like(x0)
        src_idx = [i for i, s in enumerate(samples) if s.source is not None and not s.drop_cond_input]
        if src_idx:
            if cache is None:
                srcs = torch.stack([as_image_tensor(samples[i].source) for i in src_idx])
                cond_latent[src_idx] = self.encode_image_latent(srcs)
            else:
                for i in src_idx:
                    if ("src", samples[i].sample_id) not in cache:
                        z = self.encode_image_latent(as_image_tensor(samples[i].source).unsqueeze(0))
                        cache[("src", samples[i].sample_id)] = z[0].detach()
                cond_latent[src_idx] = torch.stack([cache[("src", samples[i].sample_id)] for i in src_idx])

        null = parse("")
        instrs = []
        feats = []
        for s in samples:
            if s.drop_mm:
                instrs.append(null)
                feats.append([])
            elif cache is not None:
                key = ("refs", s.sample_id)
                if key not in cache:
                    cache[key] = [(a.detach(), b.detach()) for a, b in self.ref_features(list(s.ref_images))]
                instrs.append(s.instruction)
                feats.append(cache[key])
            else:
                instrs.append(s.instruction)
                feats.append(self.ref_features(list(s.ref_images)))
        batched: BatchedCondition = self.instr.encode_batch(instrs, feats)
        return {
            "x0": x0,
            "cond_latent": cond_latent,
            "cond_tokens": batched.tokens,
            "cond_pad_mask": batched.pad_mask,
        }

    # ----- sampling -----

    @torch.no_grad()
    def sample(
        self,
        instruction,
        ref_images=(),
        source=None,
        steps: Optional[int] = None,
        s_img: Optional[float] = None,
        s_mm: Optional[float] = None,
        seed: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
        probe=None,
        return_latent: bool = False,
    ):
        """Draw one image for an instruction.

        Guidance runs the denoiser up to three times per step (fully
        unconditional, image-only, fully conditioned); branches whose
        guidance coefficient is zero are skipped. ``probe``, if given, is
        called once with the resolved conditioning before sampling starts.
        Deterministic for a fixed seed or generator.
        """
        d = self.cfg.diffusion
        steps = d.sampler_steps if steps is None else steps
        s_img = d.s_img if s_img is None else s_img
        s_mm = d.s_mm if s_mm is None else s_mm

        instr = parse(instruction) if isinstance(instruction, str) else instruction
        cond = self.encode_condition(instr, ref_images)
        cond_tokens = cond.tokens.unsqueeze(0)

        C = self.cfg.backbone.latent_channels
        shape = (1, C, self.latent_size, self.latent_size)
        if source is None:
            cond_latent = torch.zeros(shape)
        else:
            cond_latent = self.encode_image_latent(as_image_tensor(source).unsqueeze(0))

        need_uu, need_iu, need_ic = guidance_branches(s_img, s_mm)
        null_tokens = None
        if need_uu or need_iu:
            null_tokens = self.null_condition().tokens.unsqueeze(0)
        zero_latent = torch.zeros(shape)

        if probe is not None:
            probe(
                {
                    "instruction": instr.serialize(),
                    "cond_latent": cond_latent.clone(),
                    "branches": (need_uu, need_iu, need_ic),
                    "steps": steps,
                    "s_img": s_img,
                    "s_mm": s_mm,
                    "cond_len": cond.length,
                    "n_refs": len(ref_images),
                }
            )

        def denoise_fn(x, t):
            eps_uu = self.denoiser(x, zero_latent, t, null_tokens) if need_uu else None
            if need_iu:
                # With no source the image-only branch equals the
                # unconditional one, so reuse it when available.
                if source is None and eps_uu is not None:
                    eps_iu = eps_uu
                else:
                    eps_iu = self.denoiser(x, cond_latent, t, null_tokens)
            else:
                eps_iu = None
            eps_ic = self.denoiser(x, cond_latent, t, cond_tokens) if need_ic else None
            return cfg_combine(eps_uu, eps_iu, eps_ic, s_img, s_mm)

        if generator is None and seed is not None:
            generator = torch.Generator().manual_seed(seed)
        clamp = d.x0_clamp if d.x0_clamp > 0 else None
        z0 = ddim_sample(denoise_fn, self.schedule, shape, steps, generator=generator, x0_clamp=clamp)
        if return_latent:
            return z0
        return self.ae.decode_scaled(z0).squeeze(0).clamp(0.0, 1.0)


def build_model(cfg: RunConfig, ae: ConvAutoencoder, sem: SemanticEncoder, seed: int = 0) -> EditorModel:
    """Seeded construction of the trainable parts around frozen encoders."""
    torch.manual_seed(seed)
    return EditorModel(cfg, ae, sem)


def save_model(path, model: EditorModel, extra_meta: Optional[dict] = None):
    meta = {"kind": "editor_model", "config": asdict(model.cfg)}
    if extra_meta:
        meta.update(extra_meta)
    save_tensors(path, module_tensors(model), meta)


def load_model(path) -> tuple:
    """Rebuild a saved model; returns (model, meta)."""
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "editor_model":
        raise ValueError(f"not an editor model checkpoint: {path}")
    cfg = config_from_dict(meta["config"])
    ae, sem = build_backbones(cfg.backbone, seed=0)
    model = EditorModel(cfg, ae, sem)
    load_module(model, tensors)
    freeze(model.ae)
    freeze(model.sem)
    return model, meta


def load_model_any(path) -> tuple:
    """Model from either a saved model or a trainer checkpoint.

    Trainer checkpoints carry optimizer tensors under an ``opt.`` prefix;
    those are dropped here. Returns (model, meta).
    """
    tensors, meta = load_tensors(path)
    kind = meta.get("kind")
    if kind not in ("editor_model", "trainer_state"):
        raise ValueError(f"checkpoint {path} holds no model (kind={kind!r})")
    cfg = config_from_dict(meta["config"])
    ae, sem = build_backbones(cfg.backbone, seed=0)
    model = EditorModel(cfg, ae, sem)
    load_module(model, {k: v for k, v in tensors.items() if not k.startswith("opt.")})
    freeze(model.ae)
    freeze(model.sem)
    return model, meta
