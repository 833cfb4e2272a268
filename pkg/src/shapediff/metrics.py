"""Metric kernels over shape-world images.

Pixel distances, embedding similarity through the frozen semantic
encoder, directional similarity in the trainable condition space, exact
instruction adherence via an oracle scene parser, and subject
preservation through ground-truth masks. All metrics operate on decoded
pixel space.

The oracle parser inverts the renderer: quantize to the closed palette,
take the modal color as background, split the rest into 8-connected
components per color, then classify each component by comparing its
cropped mask against candidate footprints. Bounding-box height equals the
object size for every shape (even-size triangles lose a column, never a
row), so height picks the candidate size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy import ndimage

from .forge import (
    PALETTE_RGB,
    SHAPES,
    SceneGraph,
    ShapeSpec,
    shape_footprint,
    to_float_chw,
    to_uint8_hwc,
)


class MissingMask(ValueError):
    """Subject preservation needs a nonempty ground-truth mask."""


class UnparseableRegion(ValueError):
    """A pixel region could not be classified as any known object.

    Only raised by strict parsing; adherence counts these regions as
    failed assertions instead.
    """


def _as_float_image(img) -> torch.Tensor:
    """uint8 (H, W, 3) array or float (3, H, W) tensor -> float (3, H, W)."""
    if isinstance(img, np.ndarray):
        return to_float_chw(img)
    if isinstance(img, torch.Tensor) and img.dim() == 3 and img.shape[0] == 3:
        return img.float()
    raise ValueError(f"expected uint8 (H, W, 3) or float (3, H, W), got {type(img).__name__}")


def _as_u8_image(img) -> np.ndarray:
    if isinstance(img, np.ndarray):
        if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected uint8 (H, W, 3), got {img.dtype} {img.shape}")
        return img
    return to_uint8_hwc(img)


# ---------------------------------------------------------------------------
# Pixel and embedding kernels
# ---------------------------------------------------------------------------


def l1(a, b) -> float:
    """Mean absolute pixel difference in [0, 1] space."""
    ta, tb = _as_float_image(a), _as_float_image(b)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    return float((ta - tb).abs().mean())


def l2(a, b) -> float:
    """Mean squared pixel difference in [0, 1] space."""
    ta, tb = _as_float_image(a), _as_float_image(b)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    return float(((ta - tb) ** 2).mean())


def _cosine(u: torch.Tensor, v: torch.Tensor, tol: float = 1e-12) -> float:
    nu, nv = float(u.norm()), float(v.norm())
    if nu < tol or nv < tol:
        return 0.0
    return float(torch.dot(u, v) / (nu * nv))


@torch.no_grad()
def pooled_embedding(img, sem) -> torch.Tensor:
    """Mean-pooled semantic token embedding of one image."""
    t = _as_float_image(img).unsqueeze(0)
    return sem(t).mean(dim=1).squeeze(0)


def emb_sim(a, b, sem) -> float:
    """Cosine similarity of mean-pooled semantic embeddings, in [-1, 1]."""
    return _cosine(pooled_embedding(a, sem), pooled_embedding(b, sem))


def delta_cosine(
    e_src_img: torch.Tensor,
    e_out_img: torch.Tensor,
    e_src_txt: torch.Tensor,
    e_tgt_txt: torch.Tensor,
    tol: float = 1e-8,
) -> float:
    """Core of directional similarity: cosine of the two embedding deltas.

    Returns 0 when either delta is shorter than tol, so unchanged inputs
    never produce a spurious direction.
    """
    d_img = e_out_img - e_src_img
    d_txt = e_tgt_txt - e_src_txt
    if float(d_img.norm()) < tol or float(d_txt.norm()) < tol:
        return 0.0
    return _cosine(d_img, d_txt)


class ConditionSpaceEmbedder:
    """Embeds images and captions in the one trainable sequence space.

    The caption side encodes plain text with no image slots; the image
    side encodes a bare placeholder instruction carrying the image, so
    both deltas live in the same learned condition space.
    """

    def __init__(self, model):
        self.model = model

    @torch.no_grad()
    def embed_text(self, caption: str) -> torch.Tensor:
        return self.model.encode_condition(caption, []).tokens.mean(dim=0)

    @torch.no_grad()
    def embed_image(self, img) -> torch.Tensor:
        return self.model.encode_condition("<imagehere>", [img]).tokens.mean(dim=0)


def dir_sim(src_img, out_img, src_cap: str, tgt_cap: str, embedder, tol: float = 1e-8) -> float:
    """Directional similarity: does the image move the way the caption says."""
    return delta_cosine(
        embedder.embed_image(src_img),
        embedder.embed_image(out_img),
        embedder.embed_text(src_cap),
        embedder.embed_text(tgt_cap),
        tol=tol,
    )


# ---------------------------------------------------------------------------
# Oracle scene parser
# ---------------------------------------------------------------------------

_EIGHT_CONN = np.ones((3, 3), dtype=int)


@dataclass
class ParseResult:
    scene: SceneGraph
    unparsed_regions: int  # connected regions that classify as no known object

    @property
    def clean(self) -> bool:
        return self.unparsed_regions == 0


def quantize_to_palette(img_u8: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (H, W) nearest palette indices (exact L2)."""
    diff = img_u8.astype(np.int32)[:, :, None, :] - PALETTE_RGB.astype(np.int32)[None, None, :, :]
    return np.argmin((diff * diff).sum(axis=-1), axis=-1)


def _classify_component(mask: np.ndarray, canvas: int):
    """Match one component against candidate footprints; None if nothing fits."""
    ys, xs = np.nonzero(mask)
    y0, y1 = int(ys.min()), int(ys.max())
    x0, x1 = int(xs.min()), int(xs.max())
    size = y1 - y0 + 1
    width = x1 - x0 + 1
    # every footprint is as tall as its size and never wider than that
    if size < 2 or width > size or x0 + size > canvas:
        return None
    crop = mask[y0 : y0 + size, x0 : x0 + size]
    best = None
    for shape in SHAPES:
        fp = shape_footprint(shape, size)
        inter = int((crop & fp).sum())
        union = int((crop | fp).sum())
        iou = inter / union if union else 0.0
        if best is None or iou > best[0]:
            best = (iou, shape)
    iou, shape = best
    cx = x0 + size // 2
    cy = y0 + size // 2
    return iou, shape, cx, cy, size


def parse_scene(
    img,
    min_area: int = 10,
    iou_min: float = 0.5,
    strict: bool = False,
) -> ParseResult:
    """Invert a rendered image back to a scene graph.

    Regions smaller than min_area or matching no footprint at iou_min are
    counted in ``unparsed_regions`` (or raise UnparseableRegion when
    strict). Objects come back sorted by (cy, cx); rendering is
    order-invariant for disjoint objects, so sorting loses nothing.
    """
    u8 = _as_u8_image(img)
    canvas = u8.shape[0]
    indices = quantize_to_palette(u8)
    counts = np.bincount(indices.ravel(), minlength=len(PALETTE_RGB))
    background = int(np.argmax(counts))

    objects = []
    unparsed = 0
    for color in np.nonzero(counts)[0]:
        if color == background:
            continue
        labels, n = ndimage.label(indices == color, structure=_EIGHT_CONN)
        for k in range(1, n + 1):
            mask = labels == k
            if int(mask.sum()) < min_area:
                unparsed += 1
                if strict:
                    raise UnparseableRegion(f"{int(mask.sum())}px region of color {color} is below min_area {min_area}")
                continue
            hit = _classify_component(mask, canvas)
            if hit is None or hit[0] < iou_min:
                unparsed += 1
                if strict:
                    raise UnparseableRegion(f"color-{color} region matches no footprint at iou >= {iou_min}")
                continue
            _, shape, cx, cy, size = hit
            objects.append(ShapeSpec(shape, int(color), cx, cy, size))

    objects.sort(key=lambda o: (o.cy, o.cx, o.size, o.shape, o.color))
    return ParseResult(SceneGraph(background, tuple(objects), canvas), unparsed)


def canonical(scene: SceneGraph) -> SceneGraph:
    """Scene with objects in the parser's sort order, for comparisons."""
    objs = sorted(scene.objects, key=lambda o: (o.cy, o.cx, o.size, o.shape, o.color))
    return SceneGraph(scene.background, tuple(objs), scene.canvas)


# ---------------------------------------------------------------------------
# Task-level metrics
# ---------------------------------------------------------------------------


def adherence(
    sample,
    generated,
    center_tol: int = 3,
    size_tol: int = 3,
    iou_min: float = 0.5,
    min_area: int = 10,
) -> float:
    """Fraction of target-scene assertions the generated image satisfies.

    Assertions: background color, region count, and one per expected
    object (shape and color exact, center and size within tolerance,
    greedy one-to-one matching). Unparseable regions count toward the
    region total but can match nothing.
    """
    expected = sample.scene_after
    res = parse_scene(generated, min_area=min_area, iou_min=iou_min)
    n_expected = len(expected.objects)
    total = 2 + n_expected
    score = 0
    if res.scene.background == expected.background:
        score += 1
    if len(res.scene.objects) + res.unparsed_regions == n_expected:
        score += 1
    taken = [False] * len(res.scene.objects)
    for want in expected.objects:
        for i, got in enumerate(res.scene.objects):
            if taken[i]:
                continue
            if (
                got.shape == want.shape
                and got.color == want.color
                and abs(got.cx - want.cx) <= center_tol
                and abs(got.cy - want.cy) <= center_tol
                and abs(got.size - want.size) <= size_tol
            ):
                taken[i] = True
                score += 1
                break
    return score / total


def subject_preservation(sample, generated, sem, ref_index: int = 0) -> tuple:
    """(embedding similarity, L1) between the extracted subject and its
    reference card.

    The subject is lifted out of the generated image through the
    ground-truth mask onto a white canvas at its original position, which
    is exactly how reference cards are rendered, so a perfect generation
    scores L1 = 0.
    """
    mask = sample.gt_mask
    if mask is None or not mask.any():
        raise MissingMask(f"sample {sample.sample_id or sample.task!r} has no usable gt_mask")
    gen_u8 = _as_u8_image(generated)
    if gen_u8.shape[:2] != mask.shape:
        raise ValueError(f"generated {gen_u8.shape[:2]} does not match mask {mask.shape}")
    ref = sample.ref_images[ref_index]
    extracted = np.full_like(gen_u8, 255)
    extracted[mask] = gen_u8[mask]
    return emb_sim(extracted, ref, sem), l1(extracted, ref)
