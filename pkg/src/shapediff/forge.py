"""Procedural shape world and the task-sample construction pipelines.

Scenes are a background color plus non-overlapping colored shapes on a
small square canvas. Rasterization is exact integer arithmetic with no
anti-aliasing, so every object has an analytic pixel footprint and every
task sample carries oracle ground truth: the target image is literally a
re-render of the post-edit scene graph.

Four sample builders cover the training tasks:

* ``make_subjectgen_sample``   "a photo of <imagehere> on a ... background"
* ``make_edit_sample``         recolor / remove / background ops, reformulated
* ``make_addition_sample``     "add <imagehere> to the [position] of <imagehere>"
* ``make_replacement_sample``  "replace the X with <imagehere> in <imagehere>"

plus filter predicates with pluggable scorers and a lossless on-disk
dataset format (PNG + JSONL + manifest).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import FilterConfig, ForgeConfig
from .grammar import (
    TEMPLATE_EXTRACT_ADD,
    TEMPLATE_EXTRACT_REPLACE,
    TEMPLATE_REFORMULATE_GLOBAL,
    TEMPLATE_REFORMULATE_LOCAL,
    MultimodalInstruction,
    RuleAnnotator,
    parse,
    validate_arity,
)


class ForgeError(RuntimeError):
    pass


class RetryExhausted(ForgeError):
    """Object placement kept colliding; scene config is too crowded."""


class ExhaustedDataset(ForgeError):
    """A required task split has no samples."""


# ---------------------------------------------------------------------------
# World constants
# ---------------------------------------------------------------------------

# (name, rgb). Index 0 is white and is reserved for backgrounds and the
# reference-image canvas; objects draw from the remaining colors so a
# subject is never invisible on its white reference card.
PALETTE = (
    ("white", (255, 255, 255)),
    ("black", (0, 0, 0)),
    ("gray", (128, 128, 128)),
    ("red", (220, 40, 40)),
    ("green", (40, 180, 60)),
    ("blue", (50, 80, 220)),
    ("yellow", (240, 220, 40)),
    ("purple", (150, 60, 200)),
    ("orange", (250, 150, 40)),
    ("cyan", (60, 200, 220)),
)

WHITE = 0
PALETTE_RGB = np.array([rgb for _, rgb in PALETTE], dtype=np.uint8)
COLOR_NAMES = tuple(name for name, _ in PALETTE)

SHAPES = ("circle", "square", "triangle")

TASKS = ("subject_gen", "edit", "comp_add", "comp_replace")

EDIT_OPS = ("recolor", "remove", "background")

# 3x3 grid of position words, indexed [row][col]
POSITION_WORDS = (
    ("top left", "top middle", "top right"),
    ("middle left", "middle", "middle right"),
    ("bottom left", "bottom middle", "bottom right"),
)

# closed token vocabulary for the text side: every word the builders can emit
VOCAB_WORDS = tuple(
    sorted(
        set(COLOR_NAMES)
        | set(SHAPES)
        | {"top", "bottom", "middle", "left", "right"}
        | {"a", "an", "and", "the", "of", "on", "in", "to", "at", "with", "it"}
        | {"photo", "background", "add", "replace", "recolor", "remove", "make"}
        | {",", "."}
    )
)


def position_word(cx: int, cy: int, canvas: int) -> str:
    row = min(2, cy * 3 // canvas)
    col = min(2, cx * 3 // canvas)
    return POSITION_WORDS[row][col]


# ---------------------------------------------------------------------------
# Scene graph and exact rasterization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShapeSpec:
    shape: str  # circle | square | triangle
    color: int  # palette index
    cx: int  # center, pixel coords
    cy: int
    size: int  # bounding-box side length

    def bbox(self):
        x0 = self.cx - self.size // 2
        y0 = self.cy - self.size // 2
        return x0, y0, self.size


@dataclass(frozen=True)
class SceneGraph:
    background: int
    objects: tuple  # of ShapeSpec
    canvas: int

    def without(self, idx: int) -> "SceneGraph":
        kept = tuple(o for i, o in enumerate(self.objects) if i != idx)
        return SceneGraph(self.background, kept, self.canvas)

    def replace_object(self, idx: int, new: ShapeSpec) -> "SceneGraph":
        objs = list(self.objects)
        objs[idx] = new
        return SceneGraph(self.background, tuple(objs), self.canvas)


def shape_footprint(shape: str, size: int) -> np.ndarray:
    """Exact (size, size) boolean footprint, integer arithmetic only."""
    if size < 2:
        raise ValueError(f"size must be >= 2, got {size}")
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        # offsets doubled to keep half-pixel centers in integers
        u = 2 * np.arange(size) - (size - 1)  # (size,)
        return (u[:, None] ** 2 + u[None, :] ** 2) <= size * size
    if shape == "triangle":
        # apex-up: row i spans mid +- hw(i), widening linearly to the base
        mask = np.zeros((size, size), dtype=bool)
        half = (size - 1) // 2
        mid = (size - 1) // 2
        for i in range(size):
            hw = (i * half) // (size - 1)
            mask[i, mid - hw : mid + hw + 1] = True
        return mask
    raise ValueError(f"unknown shape {shape!r}")


def object_mask(spec: ShapeSpec, canvas: int) -> np.ndarray:
    """Boolean (canvas, canvas) mask of one object's exact footprint."""
    x0, y0, s = spec.bbox()
    if x0 < 0 or y0 < 0 or x0 + s > canvas or y0 + s > canvas:
        raise ValueError(f"object {spec} does not fit a {canvas}px canvas")
    mask = np.zeros((canvas, canvas), dtype=bool)
    mask[y0 : y0 + s, x0 : x0 + s] = shape_footprint(spec.shape, s)
    return mask


def render_u8(scene: SceneGraph) -> np.ndarray:
    """Deterministic raster of a scene as uint8 (canvas, canvas, 3)."""
    img = np.empty((scene.canvas, scene.canvas, 3), dtype=np.uint8)
    img[:] = PALETTE_RGB[scene.background]
    for obj in scene.objects:
        img[object_mask(obj, scene.canvas)] = PALETTE_RGB[obj.color]
    return img


def to_float_chw(img_u8: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float32 (3, H, W) in [0, 1]."""
    if img_u8.dtype != np.uint8 or img_u8.ndim != 3 or img_u8.shape[2] != 3:
        raise ValueError(f"expected uint8 (H, W, 3), got {img_u8.dtype} {img_u8.shape}")
    return torch.from_numpy(img_u8.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def to_uint8_hwc(img: torch.Tensor) -> np.ndarray:
    """float (3, H, W) in [0, 1] -> uint8 (H, W, 3), round-to-nearest."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {tuple(img.shape)}")
    arr = img.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8)
    return arr.permute(1, 2, 0).contiguous().numpy()


def render(scene: SceneGraph) -> torch.Tensor:
    """Scene -> float image tensor (3, S, S) in [0, 1]."""
    return to_float_chw(render_u8(scene))


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def _boxes_disjoint(a, b) -> bool:
    ax, ay, asz = a
    bx, by, bsz = b
    return ax + asz <= bx or bx + bsz <= ax or ay + asz <= by or by + bsz <= ay


def gen_scene(rng: np.random.Generator, cfg: ForgeConfig, n_objects=None) -> SceneGraph:
    """Sample a valid scene: disjoint bounding boxes, pairwise-distinct
    object colors, object colors never equal to the background or white.

    Zero-object scenes are allowed when explicitly requested (generation
    backgrounds); the default count is drawn from the config range.
    """
    S = cfg.canvas
    if n_objects is None:
        n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    background = int(rng.integers(0, len(PALETTE)))
    used = {background, WHITE}
    objects = []
    boxes = []
    for _ in range(n_objects):
        for attempt in range(cfg.max_retries + 1):
            if attempt == cfg.max_retries:
                raise RetryExhausted(
                    f"could not place object {len(objects) + 1}/{n_objects} after {cfg.max_retries} tries"
                )
            size = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
            free = [c for c in range(len(PALETTE)) if c not in used]
            if not free:
                raise RetryExhausted("palette exhausted; too many objects for distinct colors")
            color = int(free[int(rng.integers(0, len(free)))])
            x0 = int(rng.integers(0, S - size + 1))
            y0 = int(rng.integers(0, S - size + 1))
            box = (x0, y0, size)
            if all(_boxes_disjoint(box, b) for b in boxes):
                objects.append(ShapeSpec(shape, color, x0 + size // 2, y0 + size // 2, size))
                boxes.append(box)
                used.add(color)
                break
    return SceneGraph(background, tuple(objects), S)


# ---------------------------------------------------------------------------
# Captions and descriptors
# ---------------------------------------------------------------------------


def object_phrase(obj: ShapeSpec) -> str:
    color = COLOR_NAMES[obj.color]
    article = "an" if color[0] in "aeiou" else "a"
    return f"{article} {color} {obj.shape}"


def object_descriptor(obj: ShapeSpec) -> str:
    """Unique referring phrase; colors are scene-unique so color+shape works."""
    return f"the {COLOR_NAMES[obj.color]} {obj.shape}"


def scene_caption(scene: SceneGraph) -> str:
    bg = COLOR_NAMES[scene.background]
    if not scene.objects:
        return f"a {bg} background"
    ordered = sorted(scene.objects, key=lambda o: (o.cy, o.cx, o.color))
    phrases = [object_phrase(o) for o in ordered]
    if len(phrases) == 1:
        listed = phrases[0]
    else:
        listed = ", ".join(phrases[:-1]) + " and " + phrases[-1]
    return f"{listed} on a {bg} background"


# ---------------------------------------------------------------------------
# Task samples
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TaskSample:
    """One training or eval record with oracle ground truth attached.

    ``ref_images`` fills the instruction's image slots in order; when the
    instruction references the source image, the source appears there too.
    Images are uint8 (S, S, 3); ``gt_mask`` is the exact footprint of the
    edited or placed subject.
    """

    task: str
    instruction: MultimodalInstruction
    ref_images: list
    source: np.ndarray | None
    target: np.ndarray
    gt_mask: np.ndarray | None
    captions: tuple  # (source_caption, target_caption)
    seed: int
    scene_before: SceneGraph | None
    scene_after: SceneGraph
    sample_id: str = ""
    drop_cond_input: bool = False  # set by condition dropout, never serialized
    drop_mm: bool = False

    def __eq__(self, other):
        if not isinstance(other, TaskSample):
            return NotImplemented
        def arr_eq(a, b):
            if a is None or b is None:
                return (a is None) == (b is None)
            return np.array_equal(a, b)
        return (
            self.task == other.task
            and self.instruction.raw == other.instruction.raw
            and len(self.ref_images) == len(other.ref_images)
            and all(arr_eq(a, b) for a, b in zip(self.ref_images, other.ref_images))
            and arr_eq(self.source, other.source)
            and arr_eq(self.target, other.target)
            and arr_eq(self.gt_mask, other.gt_mask)
            and tuple(self.captions) == tuple(other.captions)
            and self.seed == other.seed
            and self.scene_before == other.scene_before
            and self.scene_after == other.scene_after
            and self.sample_id == other.sample_id
        )


def _on_white(obj: ShapeSpec, canvas: int) -> np.ndarray:
    return render_u8(SceneGraph(WHITE, (obj,), canvas))


def _largest_object(scene: SceneGraph) -> int:
    """Main-subject pick: largest exact footprint, first on ties."""
    areas = [int(shape_footprint(o.shape, o.size).sum()) for o in scene.objects]
    return int(np.argmax(areas))


def apply_oracle_edit(sample: TaskSample) -> np.ndarray:
    """Independent ground-truth render of the sample's post-edit scene."""
    return render_u8(sample.scene_after)


def make_subjectgen_sample(scene: SceneGraph, rng: np.random.Generator, annotator=None, n_subjects: int = 1) -> TaskSample:
    """Subject-driven generation: render the reference subject(s) on the
    scene background, conditioned on nothing but the instruction."""
    if len(scene.objects) < n_subjects or n_subjects < 1:
        raise ForgeError(f"need >= {max(n_subjects, 1)} object(s), scene has {len(scene.objects)}")
    areas = [int(shape_footprint(o.shape, o.size).sum()) for o in scene.objects]
    order = sorted(range(len(scene.objects)), key=lambda i: -areas[i])
    picks = [scene.objects[i] for i in sorted(order[:n_subjects])]

    bg_name = COLOR_NAMES[scene.background]
    slots = " and ".join(["<imagehere>"] * n_subjects)
    raw = f"a photo of {slots} on a {bg_name} background"
    instr = parse(raw)
    refs = [_on_white(p, scene.canvas) for p in picks]
    scene_after = SceneGraph(scene.background, tuple(picks), scene.canvas)
    scene_before = SceneGraph(scene.background, (), scene.canvas)
    mask = object_mask(picks[0], scene.canvas)
    for p in picks[1:]:
        mask |= object_mask(p, scene.canvas)
    return TaskSample(
        task="subject_gen",
        instruction=instr,
        ref_images=refs,
        source=None,
        target=render_u8(scene_after),
        gt_mask=mask,
        captions=(scene_caption(scene_before), scene_caption(scene_after)),
        seed=0,
        scene_before=scene_before,
        scene_after=scene_after,
    )


def make_addition_sample(scene: SceneGraph, rng: np.random.Generator, annotator=None) -> TaskSample:
    """Compositional add: source is the scene with the main subject lifted
    out (exact inpainting by re-render), target is the full scene."""
    if not scene.objects:
        raise ForgeError("addition needs a scene with at least one object")
    annotator = annotator or RuleAnnotator()
    idx = _largest_object(scene)
    subject = scene.objects[idx]
    bg_scene = scene.without(idx)

    pos = position_word(subject.cx, subject.cy, scene.canvas)
    raw_text = f"add {object_phrase(subject)} to the {pos}"
    resp = json.loads(annotator.annotate(TEMPLATE_EXTRACT_ADD, raw_text))
    instr = parse(resp["template"] + " of <imagehere>")

    source = render_u8(bg_scene)
    return TaskSample(
        task="comp_add",
        instruction=instr,
        ref_images=[_on_white(subject, scene.canvas), source],
        source=source,
        target=render_u8(scene),
        gt_mask=object_mask(subject, scene.canvas),
        captions=(scene_caption(bg_scene), scene_caption(scene)),
        seed=0,
        scene_before=bg_scene,
        scene_after=scene,
    )


def make_replacement_sample(scene: SceneGraph, rng: np.random.Generator, annotator=None) -> TaskSample:
    """Compositional replace: swap one object for a new shape/color at the
    same spot; degenerate same-object swaps are redrawn."""
    if not scene.objects:
        raise ForgeError("replacement needs a scene with at least one object")
    annotator = annotator or RuleAnnotator()
    idx = int(rng.integers(0, len(scene.objects)))
    old = scene.objects[idx]
    other_colors = {o.color for i, o in enumerate(scene.objects) if i != idx}
    forbidden = other_colors | {scene.background, WHITE}
    free = [c for c in range(len(PALETTE)) if c not in forbidden]
    while True:
        new_shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        new_color = int(free[int(rng.integers(0, len(free)))])
        if (new_shape, new_color) != (old.shape, old.color):
            break
    new = ShapeSpec(new_shape, new_color, old.cx, old.cy, old.size)
    scene_after = scene.replace_object(idx, new)

    raw_text = f"replace {object_descriptor(old)} with {object_phrase(new)}"
    resp = json.loads(annotator.annotate(TEMPLATE_EXTRACT_REPLACE, raw_text))
    instr = parse(resp["template"] + " in <imagehere>")

    source = render_u8(scene)
    return TaskSample(
        task="comp_replace",
        instruction=instr,
        ref_images=[_on_white(new, scene.canvas), source],
        source=source,
        target=render_u8(scene_after),
        gt_mask=object_mask(new, scene.canvas),
        captions=(scene_caption(scene), scene_caption(scene_after)),
        seed=0,
        scene_before=scene,
        scene_after=scene_after,
    )


def make_edit_sample(scene: SceneGraph, rng: np.random.Generator, annotator=None) -> TaskSample:
    """Instruction edit: recolor an object, remove an object, or recolor
    the background. Object ops are local scope, background is global."""
    if not scene.objects:
        raise ForgeError("edit needs a scene with at least one object")
    annotator = annotator or RuleAnnotator()
    op = EDIT_OPS[int(rng.integers(0, len(EDIT_OPS)))]

    if op == "recolor":
        idx = int(rng.integers(0, len(scene.objects)))
        obj = scene.objects[idx]
        forbidden = {o.color for o in scene.objects} | {scene.background, WHITE}
        free = [c for c in range(len(PALETTE)) if c not in forbidden]
        new_color = int(free[int(rng.integers(0, len(free)))])
        scene_after = scene.replace_object(idx, dataclasses.replace(obj, color=new_color))
        text = f"recolor {object_descriptor(obj)} {COLOR_NAMES[new_color]}"
        template_id = TEMPLATE_REFORMULATE_LOCAL
        gt_mask = object_mask(obj, scene.canvas)
    elif op == "remove":
        idx = int(rng.integers(0, len(scene.objects)))
        obj = scene.objects[idx]
        scene_after = scene.without(idx)
        text = f"remove {object_descriptor(obj)}"
        template_id = TEMPLATE_REFORMULATE_LOCAL
        gt_mask = object_mask(obj, scene.canvas)
    else:  # background
        forbidden = {o.color for o in scene.objects} | {scene.background}
        free = [c for c in range(len(PALETTE)) if c not in forbidden]
        new_bg = int(free[int(rng.integers(0, len(free)))])
        scene_after = SceneGraph(new_bg, scene.objects, scene.canvas)
        text = f"make the background {COLOR_NAMES[new_bg]}"
        template_id = TEMPLATE_REFORMULATE_GLOBAL
        gt_mask = None

    resp = json.loads(annotator.annotate(template_id, text))
    instr = parse(resp["text"])
    source = render_u8(scene)
    return TaskSample(
        task="edit",
        instruction=instr,
        ref_images=[source],
        source=source,
        target=render_u8(scene_after),
        gt_mask=gt_mask,
        captions=(scene_caption(scene), scene_caption(scene_after)),
        seed=0,
        scene_before=scene,
        scene_after=scene_after,
    )


_BUILDERS = {
    "subject_gen": make_subjectgen_sample,
    "edit": make_edit_sample,
    "comp_add": make_addition_sample,
    "comp_replace": make_replacement_sample,
}


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------


def _mask_bbox_ratio(sample: TaskSample) -> float:
    if sample.gt_mask is None or not sample.gt_mask.any():
        return 0.0
    ys, xs = np.nonzero(sample.gt_mask)
    h = int(ys.max() - ys.min() + 1)
    w = int(xs.max() - xs.min() + 1)
    S = sample.gt_mask.shape[0]
    return (h * w) / (S * S)


def _fg_ratio(sample: TaskSample) -> float:
    if sample.gt_mask is None:
        return 0.0
    return float(sample.gt_mask.mean())


#: built-in geometric scorers; model-backed scorers drop in via the
#: ``scorers`` argument of apply_filters
BUILTIN_SCORERS = {
    "bbox": _mask_bbox_ratio,
    "entity": _mask_bbox_ratio,
    "fg": _fg_ratio,
}

_FILTER_KINDS = ("clip_t", "bbox", "entity", "fg", "aesthetic", "match")


def apply_filters(sample: TaskSample, cfg: FilterConfig, scorers=None) -> list:
    """Evaluate the enabled filter predicates; returns failed names.

    Range predicates (bbox/entity/fg) default to exact mask geometry;
    score predicates (clip_t/aesthetic/match) need a scorer entry, since
    the synthetic world has no model to produce them.
    """
    scorers = dict(scorers or {})
    failed = []
    for name in cfg.enabled:
        if name not in _FILTER_KINDS:
            raise ValueError(f"unknown filter {name!r}, expected one of {_FILTER_KINDS}")
        scorer = scorers.get(name, BUILTIN_SCORERS.get(name))
        if scorer is None:
            raise ValueError(f"filter {name!r} is enabled but has no scorer")
        score = float(scorer(sample))
        if name == "clip_t":
            ok = score >= cfg.min_clip_t_analog
        elif name == "bbox":
            ok = cfg.bbox_ratio[0] <= score <= cfg.bbox_ratio[1]
        elif name == "entity":
            ok = cfg.entity_ratio[0] <= score <= cfg.entity_ratio[1]
        elif name == "fg":
            ok = cfg.fg_ratio[0] <= score <= cfg.fg_ratio[1]
        elif name == "aesthetic":
            ok = score >= cfg.aesthetic_min
        else:  # match
            ok = score >= cfg.match_min
        if not ok:
            failed.append(name)
    return failed


# ---------------------------------------------------------------------------
# Forge driver
# ---------------------------------------------------------------------------


def forge_samples(
    counts: dict,
    cfg: ForgeConfig,
    filt: FilterConfig,
    seed: int,
    annotator=None,
    scorers=None,
):
    """Generate `counts[task]` valid samples per task.

    Deterministic in (counts, cfg, filt, seed). Every emitted sample is
    arity-checked and its target verified against the oracle re-render.
    Returns (samples, stats).
    """
    unknown = set(counts) - set(TASKS)
    if unknown:
        raise ValueError(f"unknown task(s) {sorted(unknown)}, expected {TASKS}")
    rng = np.random.default_rng(seed)
    annotator = annotator or RuleAnnotator()
    samples = []
    stats = {"emitted": {}, "filtered": {}, "attempts": {}}
    for task in TASKS:
        n = int(counts.get(task, 0))
        made, attempts, filtered = 0, 0, 0
        while made < n:
            attempts += 1
            if attempts > max(50, 20 * n):
                raise RetryExhausted(f"{task}: filters rejected too many samples ({filtered}/{attempts})")
            sample_seed = int(rng.integers(0, 2**31 - 1))
            srng = np.random.default_rng(sample_seed)
            scene = gen_scene(srng, cfg, n_objects=None)
            if not scene.objects:  # builders need at least one object
                continue
            sample = _BUILDERS[task](scene, srng, annotator=annotator)
            sample.seed = sample_seed
            sample.sample_id = f"{task}-{sample_seed:010d}-{made:06d}"
            if apply_filters(sample, filt, scorers):
                filtered += 1
                continue
            validate_arity(sample.instruction, len(sample.ref_images))
            if not np.array_equal(sample.target, apply_oracle_edit(sample)):
                raise ForgeError(f"oracle mismatch for {sample.sample_id}")  # pragma: no cover
            samples.append(sample)
            made += 1
        stats["emitted"][task] = made
        stats["filtered"][task] = filtered
        stats["attempts"][task] = attempts
    return samples, stats


# ---------------------------------------------------------------------------
# Dataset IO
# ---------------------------------------------------------------------------

_FORMAT_VERSION = 1


def _scene_to_json(scene):
    if scene is None:
        return None
    return {
        "background": scene.background,
        "canvas": scene.canvas,
        "objects": [[o.shape, o.color, o.cx, o.cy, o.size] for o in scene.objects],
    }


def _scene_from_json(d):
    if d is None:
        return None
    objs = tuple(ShapeSpec(s, c, cx, cy, sz) for s, c, cx, cy, sz in d["objects"])
    return SceneGraph(d["background"], objs, d["canvas"])


def _save_png(arr: np.ndarray, path: Path):
    if arr.dtype == np.bool_:
        Image.fromarray((arr * np.uint8(255)), mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def _load_png(path: Path, mask: bool = False):
    img = np.asarray(Image.open(path))
    if mask:
        return img > 127
    return img.astype(np.uint8)


def forge_config_hash(cfg: ForgeConfig, filt: FilterConfig) -> str:
    blob = json.dumps(
        {"forge": dataclasses.asdict(cfg), "filters": dataclasses.asdict(filt)}, sort_keys=True
    ).encode()
    return hashlib.sha256(blob).hexdigest()


def write_dataset(samples, path, cfg: ForgeConfig, filt: FilterConfig, seed: int, stats=None):
    """Write one split directory: images/, samples.jsonl, manifest.json.

    PNG is lossless 8-bit so the round trip is bit-exact. Every target is
    re-verified against its scene graph before anything is written.
    """
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    counts = {t: 0 for t in TASKS}
    with open(path / "samples.jsonl", "w", encoding="utf-8") as f:
        for sample in samples:
            if not np.array_equal(sample.target, apply_oracle_edit(sample)):
                raise ForgeError(f"oracle mismatch for {sample.sample_id}; refusing to write")
            counts[sample.task] += 1
            sid = sample.sample_id
            names = {"target": f"{sid}_target.png", "refs": []}
            _save_png(sample.target, path / "images" / names["target"])
            for i, ref in enumerate(sample.ref_images):
                name = f"{sid}_ref{i}.png"
                _save_png(ref, path / "images" / name)
                names["refs"].append(name)
            names["source"] = None
            if sample.source is not None:
                names["source"] = f"{sid}_source.png"
                _save_png(sample.source, path / "images" / names["source"])
            names["mask"] = None
            if sample.gt_mask is not None:
                names["mask"] = f"{sid}_mask.png"
                _save_png(sample.gt_mask, path / "images" / names["mask"])
            rec = {
                "id": sid,
                "task": sample.task,
                "instruction": sample.instruction.raw,
                "captions": list(sample.captions),
                "seed": sample.seed,
                "images": names,
                "scene_before": _scene_to_json(sample.scene_before),
                "scene_after": _scene_to_json(sample.scene_after),
            }
            f.write(json.dumps(rec) + "\n")
    manifest = {
        "version": _FORMAT_VERSION,
        "n_samples": len(samples),
        "counts": counts,
        "seed": seed,
        "forge_config": dataclasses.asdict(cfg),
        "filters": dataclasses.asdict(filt),
        "config_hash": forge_config_hash(cfg, filt),
        "stats": stats or {},
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def read_dataset(path):
    """Read a split directory back into (samples, manifest)."""
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise ExhaustedDataset(f"no dataset at {path} (missing manifest.json)")
    manifest = json.loads((path / "manifest.json").read_text())
    samples = []
    with open(path / "samples.jsonl", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            names = rec["images"]
            sample = TaskSample(
                task=rec["task"],
                instruction=parse(rec["instruction"]),
                ref_images=[_load_png(path / "images" / n) for n in names["refs"]],
                source=_load_png(path / "images" / names["source"]) if names["source"] else None,
                target=_load_png(path / "images" / names["target"]),
                gt_mask=_load_png(path / "images" / names["mask"], mask=True) if names["mask"] else None,
                captions=tuple(rec["captions"]),
                seed=rec["seed"],
                scene_before=_scene_from_json(rec["scene_before"]),
                scene_after=_scene_from_json(rec["scene_after"]),
                sample_id=rec["id"],
            )
            samples.append(sample)
    return samples, manifest


def dataset_hash(path) -> str:
    """Content hash of a split (manifest + records); used in run manifests."""
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / "manifest.json").read_bytes())
    h.update((path / "samples.jsonl").read_bytes())
    return h.hexdigest()
