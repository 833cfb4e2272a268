"""Frozen-analog encoders: a convolutional autoencoder for visual features
and conditional latents, a small patch transformer for semantic tokens, and
a closed-vocabulary text embedder.

The two image encoders are pretrained once on shape-world renders (pixel
reconstruction for the autoencoder, augmentation-invariance contrastive for
the patch encoder), then frozen for the rest of the artifact. The text
embedder stays trainable and lives with the main model's parameters.
"""

from __future__ import annotations

import math
import re

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BackboneConfig, ForgeConfig
from .forge import VOCAB_WORDS, SceneGraph, gen_scene, render_u8, to_float_chw
from . import checkpoints


class ShapeError(ValueError):
    """Tensor has the wrong rank or channel count for this operation."""


class NonFinite(RuntimeError):
    """A forward pass produced NaN or Inf."""


# ---------------------------------------------------------------------------
# Tokenizer and text embedder
# ---------------------------------------------------------------------------

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

_TOKEN_RE = re.compile(r"[a-z]+|[^\sa-z]")


class Tokenizer:
    """Whitespace+punctuation tokenizer over the closed shape-world vocabulary.

    Lowercases input; anything outside the word list maps to the reserved
    unknown id, so encoding never fails. The image placeholder never reaches
    the tokenizer: the grammar consumes it before text is embedded.
    """

    def __init__(self, words=VOCAB_WORDS):
        self.words = tuple(words)
        self.id_of = {w: i + len(SPECIALS) for i, w in enumerate(self.words)}

    @property
    def vocab_size(self) -> int:
        return len(SPECIALS) + len(self.words)

    def encode(self, text: str) -> list:
        return [self.id_of.get(tok, UNK_ID) for tok in _TOKEN_RE.findall(text.lower())]

    def decode(self, ids) -> str:
        table = SPECIALS + self.words
        return " ".join(table[i] for i in ids)


class TextEmbedder(nn.Module):
    """Deterministic id -> vector lookup; trained with the main model."""

    def __init__(self, vocab_size: int, d: int):
        super().__init__()
        self.table = nn.Embedding(vocab_size, d)
        nn.init.normal_(self.table.weight, std=0.02)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table(ids)


def embed_text(embedder: TextEmbedder, ids) -> torch.Tensor:
    """Token ids -> (len, d); the empty sequence gives a (0, d) array."""
    if not torch.is_tensor(ids):
        ids = torch.tensor(list(ids), dtype=torch.long)
    if ids.numel() == 0:
        return embedder.table.weight.new_zeros((0, embedder.table.embedding_dim))
    return embedder(ids)


# ---------------------------------------------------------------------------
# Shared transformer block
# ---------------------------------------------------------------------------


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + MLP, bidirectional."""

    def __init__(self, d: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        hidden = int(d * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))

    def forward(self, x: torch.Tensor, key_padding_mask=None) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, key_padding_mask=key_padding_mask, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


# ---------------------------------------------------------------------------
# Convolutional autoencoder (visual feature / latent backbone)
# ---------------------------------------------------------------------------


class ConvAutoencoder(nn.Module):
    """Mean-only autoencoder: encode is deterministic, decode maps back to
    [0, 1] pixels. `latent_scale` is calibrated after pretraining so the
    scaled latents have roughly unit standard deviation."""

    def __init__(self, latent_channels: int = 4, downsample_factor: int = 4, width: int = 32):
        super().__init__()
        stages = int(round(math.log2(downsample_factor)))
        if 2**stages != downsample_factor or stages < 1:
            raise ValueError(f"downsample_factor must be a power of two >= 2, got {downsample_factor}")
        self.latent_channels = latent_channels
        self.downsample_factor = downsample_factor

        enc = [nn.Conv2d(3, width, 3, padding=1), nn.GELU()]
        w = width
        for _ in range(stages):
            enc += [nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.GELU()]
            w *= 2
        enc.append(nn.Conv2d(w, latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(latent_channels, w, 3, padding=1), nn.GELU()]
        for _ in range(stages):
            dec += [nn.ConvTranspose2d(w, w // 2, 4, stride=2, padding=1), nn.GELU()]
            w //= 2
        # full-resolution refinement before the output projection; without it
        # the upsampling tail smears shape boundaries, which the downstream
        # scene parser is sensitive to
        dec += [nn.Conv2d(w, w, 3, padding=1), nn.GELU()]
        dec.append(nn.Conv2d(w, 3, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or img.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W), got {tuple(img.shape)}")
        return self.encoder(img)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ShapeError(f"expected (B, {self.latent_channels}, h, w), got {tuple(z.shape)}")
        return torch.sigmoid(self.decoder(z))

    def encode_scaled(self, img: torch.Tensor) -> torch.Tensor:
        return self.encode(img) * self.latent_scale

    def decode_scaled(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode(z / self.latent_scale)


def vae_encode(model: ConvAutoencoder, img: torch.Tensor) -> torch.Tensor:
    """Single-image wrapper: (3, H, W) -> (C_lat, h, w), scaled."""
    if img.dim() == 3:
        return model.encode_scaled(img.unsqueeze(0)).squeeze(0)
    return model.encode_scaled(img)


def vae_decode(model: ConvAutoencoder, z: torch.Tensor) -> torch.Tensor:
    if z.dim() == 3:
        return model.decode_scaled(z.unsqueeze(0)).squeeze(0)
    return model.decode_scaled(z)


# ---------------------------------------------------------------------------
# Semantic patch encoder
# ---------------------------------------------------------------------------


class SemanticEncoder(nn.Module):
    """Patchify + linear embed + a couple of transformer blocks.

    `head` is the projection used only by the contrastive pretraining
    objective; downstream consumers read the token output.
    """

    def __init__(self, image_size: int = 32, patch_size: int = 4, d_sem: int = 64, depth: int = 2, heads: int = 4):
        super().__init__()
        if image_size % patch_size != 0:
            raise ValueError(f"patch_size {patch_size} must divide image_size {image_size}")
        self.n_patches = (image_size // patch_size) ** 2
        self.d_sem = d_sem
        self.patch = nn.Conv2d(3, d_sem, patch_size, stride=patch_size)
        self.pos = nn.Parameter(torch.zeros(1, self.n_patches, d_sem))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(d_sem, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(d_sem)
        self.head = nn.Sequential(nn.Linear(d_sem, d_sem), nn.GELU(), nn.Linear(d_sem, 64))

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or img.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W), got {tuple(img.shape)}")
        x = self.patch(img)  # (B, d, H/p, W/p)
        x = x.flatten(2).transpose(1, 2)  # (B, n, d)
        x = x + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def semantic_encode(model: SemanticEncoder, img: torch.Tensor) -> torch.Tensor:
    """Single-image wrapper: (3, H, W) -> (n_patches, d_sem)."""
    if img.dim() == 3:
        return model(img.unsqueeze(0)).squeeze(0)
    return model(img)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def render_pool(rng: np.random.Generator, fcfg: ForgeConfig, n: int) -> torch.Tensor:
    """Pre-render a mixed image pool: scenes, empty canvases, subject cards.

    The card slice matters: reference images are a single shape on white,
    and both frozen encoders must handle them as well as full scenes.
    """
    imgs = []
    for _ in range(n):
        u = rng.random()
        if u < 0.1:
            scene = gen_scene(rng, fcfg, n_objects=0)
        elif u < 0.35:
            base = gen_scene(rng, fcfg, n_objects=1)
            scene = SceneGraph(0, base.objects, base.canvas)  # white card
        else:
            scene = gen_scene(rng, fcfg)
        imgs.append(to_float_chw(render_u8(scene)))
    return torch.stack(imgs)


def _draw(pool: torch.Tensor, rng: np.random.Generator, n: int) -> torch.Tensor:
    idx = rng.integers(0, pool.shape[0], size=n)
    return pool[torch.from_numpy(idx)]


def _edge_weight(x: torch.Tensor) -> torch.Tensor:
    """Per-pixel loss weights, (B, 1, H, W). Pixels whose 3x3 neighborhood
    is not flat get extra weight: boundary fidelity decides whether a
    reconstruction still parses, while flat fills are easy everywhere."""
    pad = F.pad(x, (1, 1, 1, 1), mode="replicate")
    hi = F.max_pool2d(pad, 3, stride=1)
    lo = -F.max_pool2d(-pad, 3, stride=1)
    edge = ((hi - lo).amax(dim=1, keepdim=True) > 0.05).float()
    return 1.0 + 4.0 * edge


def pretrain_autoencoder(model: ConvAutoencoder, bcfg: BackboneConfig, fcfg: ForgeConfig, seed: int, steps=None) -> dict:
    """Pixel-reconstruction pretraining plus latent-scale calibration.

    Half of each batch reconstructs from a noised latent (noise up to
    decoder_noise_aug times the latent std). The decoder downstream of the
    denoiser sees imperfect latents, and without this it turns small latent
    errors into pixel speckle that shreds the scene parser.
    """
    rng = np.random.default_rng(seed)
    steps = bcfg.vae_pretrain_steps if steps is None else steps
    pool = render_pool(rng, fcfg, 2048)
    opt = torch.optim.Adam(model.parameters(), lr=bcfg.pretrain_lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1), eta_min=bcfg.pretrain_lr * 0.05)
    torch_gen = torch.Generator().manual_seed(seed)
    model.train()
    last = float("nan")
    for _ in range(steps):
        x = _draw(pool, rng, bcfg.pretrain_batch)
        z = model.encode(x)
        if bcfg.decoder_noise_aug > 0:
            half = z.shape[0] // 2
            sigma = torch.rand(z.shape[0] - half, 1, 1, 1, generator=torch_gen) * bcfg.decoder_noise_aug * z.detach().std()
            noise = torch.randn(z[half:].shape, generator=torch_gen)
            z = torch.cat([z[:half], z[half:] + sigma * noise])
        recon = model.decode(z)
        w = _edge_weight(x)
        loss = (w * (recon - x) ** 2).mean() + 0.2 * (w * (recon - x).abs()).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        last = float(loss.detach())
    model.eval()
    with torch.no_grad():
        calib = render_pool(rng, fcfg, 256)  # held out of the training pool
        z = model.encode(calib)
        std = float(z.std())
        model.latent_scale.fill_(1.0 / max(std, 1e-6))
        recon_l1 = float((model.decode(model.encode(calib)) - calib).abs().mean())
    return {"final_loss": last, "recon_l1": recon_l1, "latent_std_raw": std, "latent_scale": float(model.latent_scale)}


def _augment(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Translation roll + horizontal flip; color is left alone on purpose,
    the embedding has to stay color-aware for the similarity metrics."""
    out = []
    for img in x:
        dx, dy = int(rng.integers(-4, 5)), int(rng.integers(-4, 5))
        v = torch.roll(img, shifts=(dy, dx), dims=(1, 2))
        if rng.random() < 0.5:
            v = v.flip(2)
        out.append(v)
    return torch.stack(out)


def pretrain_semantic(model: SemanticEncoder, bcfg: BackboneConfig, fcfg: ForgeConfig, seed: int, steps=None) -> dict:
    """Augmentation-invariance contrastive pretraining (NT-Xent, temp 0.2)."""
    rng = np.random.default_rng(seed)
    steps = bcfg.sem_pretrain_steps if steps is None else steps
    pool = render_pool(rng, fcfg, 2048)
    opt = torch.optim.Adam(model.parameters(), lr=bcfg.pretrain_lr)
    temp = 0.2
    model.train()
    last = float("nan")
    for _ in range(steps):
        x = _draw(pool, rng, bcfg.pretrain_batch)
        v1, v2 = _augment(x, rng), _augment(x, rng)
        B = x.shape[0]
        z = torch.cat([model(v1).mean(dim=1), model(v2).mean(dim=1)])  # (2B, d)
        z = F.normalize(model.head(z), dim=-1)
        sim = z @ z.T / temp
        sim.fill_diagonal_(float("-inf"))
        targets = torch.cat([torch.arange(B, 2 * B), torch.arange(0, B)])
        loss = F.cross_entropy(sim, targets)
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = float(loss.detach())
    model.eval()
    return {"final_loss": last}


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


# ---------------------------------------------------------------------------
# Backbone persistence
# ---------------------------------------------------------------------------


def build_backbones(bcfg: BackboneConfig, seed: int):
    """Construct (autoencoder, semantic encoder) with seeded init."""
    torch.manual_seed(seed)
    ae = ConvAutoencoder(bcfg.latent_channels, bcfg.downsample_factor, bcfg.vae_width)
    sem = SemanticEncoder(bcfg.image_size, bcfg.patch_size, bcfg.d_sem, bcfg.sem_depth, bcfg.sem_heads)
    return ae, sem


def pretrain_backbones(bcfg: BackboneConfig, fcfg: ForgeConfig, seed: int):
    """Build, pretrain, and freeze both image encoders. Returns
    (autoencoder, semantic, stats)."""
    ae, sem = build_backbones(bcfg, seed)
    stats = {
        "autoencoder": pretrain_autoencoder(ae, bcfg, fcfg, seed + 1),
        "semantic": pretrain_semantic(sem, bcfg, fcfg, seed + 2),
    }
    freeze(ae)
    freeze(sem)
    return ae, sem, stats


def save_backbones(path, ae: ConvAutoencoder, sem: SemanticEncoder, bcfg: BackboneConfig, stats: dict):
    import dataclasses

    tensors = {}
    tensors.update(checkpoints.module_tensors(ae, "ae."))
    tensors.update(checkpoints.module_tensors(sem, "sem."))
    meta = {"kind": "backbones", "config": dataclasses.asdict(bcfg), "stats": stats}
    checkpoints.save_tensors(path, tensors, meta)


def load_backbones(path, bcfg: BackboneConfig):
    """Load frozen backbones; the stored config must match the requested one."""
    tensors, meta = checkpoints.load_tensors(path)
    if meta.get("kind") != "backbones":
        raise checkpoints.CheckpointError(f"{path} is not a backbone checkpoint")
    import dataclasses

    stored = meta.get("config", {})
    want = dataclasses.asdict(bcfg)
    for key in ("image_size", "patch_size", "d_sem", "sem_depth", "sem_heads", "latent_channels", "downsample_factor", "vae_width"):
        if stored.get(key) != want[key]:
            raise checkpoints.CheckpointError(
                f"backbone config mismatch for {key!r}: checkpoint {stored.get(key)}, requested {want[key]}"
            )
    ae, sem = build_backbones(bcfg, seed=0)
    checkpoints.load_module(ae, tensors, "ae.")
    checkpoints.load_module(sem, tensors, "sem.")
    freeze(ae)
    freeze(sem)
    return ae, sem, meta
