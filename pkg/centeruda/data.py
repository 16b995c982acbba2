"""Procedural two-domain scenes, COCO manifests, augmentation and batching.

Source and target scenes share one layout stream per image index, so the same
seed places the same objects in both domains; only the appearance differs.
"""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from joblib import Parallel, delayed
from PIL import Image, ImageDraw, ImageFilter

from centeruda.codec import BoxAnnotation, encode_targets, stack_targets
from centeruda.errors import ConfigError, DataError, ParseError, ShapeError

logger = logging.getLogger(__name__)

CLASS_SHAPES = ("disc", "square", "triangle", "ring", "bar", "cross")
DOMAINS = ("source", "target")
ANNOTATIONS_FILE = "annotations.json"
IMAGES_DIR = "images"
BACKGROUND_LEVEL = 0.12
MIN_BOX_EXTENT = 2.0


@dataclass(frozen=True)
class DomainStyle:
    domain: str = "source"
    intensity_shift: float = 0.15
    noise_std: float = 0.06
    blur_radius: float = 1.2
    texture: float = 0.25


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple = (128, 128)
    num_classes: int = 6
    object_count: tuple = (1, 5)
    object_size: tuple = (12, 40)
    style: DomainStyle = field(default_factory=DomainStyle)
    labeled: bool = True

    @property
    def class_names(self):
        return list(CLASS_SHAPES[: self.num_classes])

    def validate(self):
        if not 1 <= self.num_classes <= len(CLASS_SHAPES):
            raise ConfigError(f"num_classes must be in [1, {len(CLASS_SHAPES)}] for procedural scenes")
        if self.style.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.style.domain!r}")
        lo, hi = self.object_size
        if lo < MIN_BOX_EXTENT or hi < lo or hi >= min(self.image_size):
            raise ConfigError(f"object size range {self.object_size} does not fit {self.image_size}")
        if self.object_count[0] < 0 or self.object_count[1] < self.object_count[0]:
            raise ConfigError(f"invalid object count range {self.object_count}")


@dataclass
class ManifestEntry:
    image_id: int
    image_path: Path
    width: int
    height: int
    annotations: Optional[list] = None


@dataclass
class DatasetManifest:
    split: str
    domain: str
    entries: list
    class_names: list
    labeled: bool = True
    path: Optional[Path] = None

    def __len__(self):
        return len(self.entries)

    @property
    def num_classes(self):
        return len(self.class_names)

    def num_annotations(self):
        return sum(len(e.annotations or []) for e in self.entries)


# scene generation

def _object_layout(spec, seed, index):
    rng = np.random.default_rng([seed, index, 0])
    H, W = spec.image_size
    lo, hi = spec.object_size
    objects = []
    for _ in range(int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))):
        class_id = int(rng.integers(spec.num_classes))
        shape = CLASS_SHAPES[class_id]
        size = int(rng.integers(lo, hi + 1))
        w = h = size
        if shape == "bar":
            thin = max(int(MIN_BOX_EXTENT) + 2, size // 3)
            w, h = (size, thin) if rng.random() < 0.5 else (thin, size)
        x1 = int(rng.integers(0, W - w + 1))
        y1 = int(rng.integers(0, H - h + 1))
        level = float(rng.uniform(0.55, 1.0))
        tint = rng.uniform(0.85, 1.0, size=3)
        objects.append((BoxAnnotation(x1, y1, x1 + w, y1 + h, class_id), level * tint))
    return objects


def _draw_shape(draw, shape, box, fill):
    x1, y1, x2, y2 = int(box.x1), int(box.y1), int(box.x2) - 1, int(box.y2) - 1
    if shape == "disc":
        draw.ellipse((x1, y1, x2, y2), fill=fill)
    elif shape in ("square", "bar"):
        draw.rectangle((x1, y1, x2, y2), fill=fill)
    elif shape == "triangle":
        draw.polygon([(x1, y2), ((x1 + x2) / 2, y1), (x2, y2)], fill=fill)
    elif shape == "ring":
        draw.ellipse((x1, y1, x2, y2), outline=fill, width=max(2, (x2 - x1) // 5))
    elif shape == "cross":
        t = max(1, (x2 - x1) // 6)
        cx, cy = (x1 + x2) // 2, (y1 + y2) // 2
        draw.rectangle((x1, cy - t, x2, cy + t), fill=fill)
        draw.rectangle((cx - t, y1, cx + t, y2), fill=fill)


def render_scene(spec, seed, index):
    """Render one scene as an H x W x 3 uint8 array plus its boxes."""
    H, W = spec.image_size
    objects = _object_layout(spec, seed, index)
    canvas = Image.new("RGB", (W, H), color=(int(BACKGROUND_LEVEL * 255),) * 3)
    mask = Image.new("L", (W, H), color=0)
    draw, draw_mask = ImageDraw.Draw(canvas), ImageDraw.Draw(mask)
    for box, color in objects:
        shape = CLASS_SHAPES[box.class_id]
        _draw_shape(draw, shape, box, tuple(int(round(c * 255)) for c in color))
        _draw_shape(draw_mask, shape, box, 255)

    style = spec.style
    if style.domain == "target":
        rng = np.random.default_rng([seed, index, 1])
        if style.blur_radius > 0:
            canvas = canvas.filter(ImageFilter.GaussianBlur(style.blur_radius))
        pixels = np.asarray(canvas, dtype=np.float64) / 255.0
        if style.texture > 0:
            ys, xs = np.mgrid[0:H, 0:W]
            fx, fy = rng.uniform(2.0, 6.0, size=2)
            phase = rng.uniform(0.0, 2 * np.pi)
            stripes = 0.5 * style.texture * (1 + np.sin(2 * np.pi * (fx * xs / W + fy * ys / H) + phase))
            background = (np.asarray(mask) == 0)[..., None]
            pixels = pixels + stripes[..., None] * background
        pixels = pixels + rng.uniform(-style.intensity_shift, style.intensity_shift)
        if style.noise_std > 0:
            pixels = pixels + rng.normal(0.0, style.noise_std, size=pixels.shape)
        canvas = Image.fromarray(np.round(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8))
    return np.asarray(canvas), [box for box, _ in objects]


def _write_scene(spec, seed, index, image_dir):
    pixels, boxes = render_scene(spec, seed, index)
    file_name = f"{spec.style.domain}_{index:05d}.png"
    path = Path(image_dir) / file_name
    try:
        Image.fromarray(pixels).save(path, format="PNG")
    except OSError as e:
        raise DataError(f"cannot write image ({e})", path=path) from e
    return file_name, boxes


def _coco_document(spec, split, seed, rows):
    H, W = spec.image_size
    images, annotations = [], []
    for image_id, (file_name, boxes) in enumerate(rows, start=1):
        images.append({"id": image_id, "file_name": f"{IMAGES_DIR}/{file_name}", "width": W, "height": H})
        if not spec.labeled:
            continue
        for box in boxes:
            annotations.append({
                "id": len(annotations) + 1,
                "image_id": image_id,
                "category_id": box.class_id + 1,
                "bbox": [box.x1, box.y1, box.width, box.height],
                "area": box.area,
                "iscrowd": 0,
            })
    return {
        "info": {"domain": spec.style.domain, "split": split, "labeled": spec.labeled, "seed": seed},
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": name} for i, name in enumerate(spec.class_names)],
    }


def generate_dataset(spec, count, seed, out_dir, split=None, jobs=1):
    """Write ``count`` scenes to ``<out_dir>/images`` plus ``annotations.json``."""
    spec.validate()
    if count < 0:
        raise ConfigError(f"count must be >= 0, got {count}")
    out_dir = Path(out_dir)
    image_dir = out_dir / IMAGES_DIR
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory ({e})", path=image_dir) from e

    split = split or spec.style.domain
    logger.info(f"Generating {count} {spec.style.domain} scenes in {out_dir} (seed={seed}, jobs={jobs})")
    rows = Parallel(n_jobs=jobs)(delayed(_write_scene)(spec, seed, i, image_dir) for i in range(count))
    document = _coco_document(spec, split, seed, rows)
    manifest_path = out_dir / ANNOTATIONS_FILE
    try:
        manifest_path.write_text(json.dumps(document, indent=2))
    except OSError as e:
        raise DataError(f"cannot write manifest ({e})", path=manifest_path) from e
    logger.info(f"Wrote {len(document['images'])} images and {len(document['annotations'])} annotations")
    return load_coco(manifest_path)


# COCO ingestion

def _require(record, keys, what, path, index):
    missing = [k for k in keys if k not in record]
    if missing:
        raise ParseError(f"{what} is missing {', '.join(missing)}", path=path, index=index)


def load_coco(manifest_path, check_files=True):
    path = Path(manifest_path)
    try:
        document = json.loads(path.read_text())
    except OSError as e:
        raise DataError(f"cannot read manifest ({e})", path=path) from e
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON ({e.msg} at line {e.lineno})", path=path) from e
    if not isinstance(document, dict):
        raise ParseError("manifest must be a JSON object", path=path)
    _require(document, ("images", "annotations", "categories"), "manifest", path, None)

    categories = sorted(document["categories"], key=lambda c: c["id"])
    for i, category in enumerate(categories):
        _require(category, ("id", "name"), "category", path, i)
    dense = {c["id"]: i for i, c in enumerate(categories)}

    entries = {}
    for i, image in enumerate(document["images"]):
        _require(image, ("id", "file_name", "width", "height"), "image", path, i)
        if image["id"] in entries:
            raise ParseError(f"duplicate image id {image['id']}", path=path, index=i)
        entries[image["id"]] = ManifestEntry(
            image_id=image["id"],
            image_path=path.parent / image["file_name"],
            width=int(image["width"]),
            height=int(image["height"]),
        )

    info = document.get("info") or {}
    labeled = bool(info.get("labeled", len(document["annotations"]) > 0))
    if labeled:
        for entry in entries.values():
            entry.annotations = []

    for i, ann in enumerate(document["annotations"]):
        _require(ann, ("image_id", "category_id", "bbox"), "annotation", path, i)
        bbox = ann["bbox"]
        if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
            raise ParseError(f"malformed bbox {bbox}", path=path, index=i)
        if ann["image_id"] not in entries:
            raise ParseError(f"annotation references unknown image id {ann['image_id']}", path=path, index=i)
        if ann["category_id"] not in dense:
            raise ParseError(f"annotation references unknown category {ann['category_id']}", path=path, index=i)
        if not labeled:
            continue
        x, y, w, h = (float(v) for v in bbox)
        entries[ann["image_id"]].annotations.append(BoxAnnotation(x, y, x + w, y + h, dense[ann["category_id"]]))

    if check_files:
        for entry in entries.values():
            if not entry.image_path.is_file():
                raise DataError("image file missing", path=entry.image_path)

    return DatasetManifest(
        split=info.get("split", path.parent.name),
        domain=info.get("domain", "source"),
        entries=list(entries.values()),
        class_names=[c["name"] for c in categories],
        labeled=labeled,
        path=path,
    )


def load_image(path):
    """Read an image as a 3 x H x W float32 array in [0, 1]."""
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.float32)
    except OSError as e:
        raise DataError(f"cannot read image ({e})", path=path) from e
    return np.ascontiguousarray(pixels.transpose(2, 0, 1) / 255.0)


# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    rot90_prob: float = 0.25
    max_translate: int = 8
    scale_range: tuple = (0.9, 1.1)
    brightness: float = 0.1
    noise_std: float = 0.02

    @classmethod
    def identity(cls):
        return cls(hflip_prob=0.0, rot90_prob=0.0, max_translate=0, scale_range=(1.0, 1.0),
                   brightness=0.0, noise_std=0.0)

    @property
    def is_identity(self):
        return self == AugmentConfig.identity()


def clip_boxes(boxes, width, height):
    """Clip to the image and drop boxes thinner than two pixels."""
    kept = []
    for box in boxes:
        box = box.clipped(width, height)
        if box.width >= MIN_BOX_EXTENT and box.height >= MIN_BOX_EXTENT:
            kept.append(box)
    if len(kept) < len(boxes):
        logger.debug(f"Dropped {len(boxes) - len(kept)} box(es) reduced below {MIN_BOX_EXTENT}px")
    return kept


def flip_horizontal(image, boxes):
    W = image.shape[2]
    flipped = [BoxAnnotation(W - b.x2, b.y1, W - b.x1, b.y2, b.class_id) for b in boxes]
    return np.ascontiguousarray(image[:, :, ::-1]), flipped


def rotate90(image, boxes, k=1):
    """Rotate counter-clockwise by k quarter turns (square images only)."""
    _, H, W = image.shape
    if H != W:
        raise ShapeError("rotate90", f"quarter-turn rotation needs a square image, got {H}x{W}")
    for _ in range(k % 4):
        image = np.rot90(image, 1, axes=(1, 2))
        boxes = [BoxAnnotation(b.y1, W - b.x2, b.y2, W - b.x1, b.class_id) for b in boxes]
    return np.ascontiguousarray(image), list(boxes)


def translate(image, boxes, dx, dy):
    """Shift content by whole pixels, filling uncovered area with zeros."""
    _, H, W = image.shape
    out = np.zeros_like(image)
    dst_y, src_y = slice(max(dy, 0), min(H + dy, H)), slice(max(-dy, 0), min(H - dy, H))
    dst_x, src_x = slice(max(dx, 0), min(W + dx, W)), slice(max(-dx, 0), min(W - dx, W))
    out[:, dst_y, dst_x] = image[:, src_y, src_x]
    moved = [BoxAnnotation(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy, b.class_id) for b in boxes]
    return out, clip_boxes(moved, W, H)


def _centered(scaled, size):
    if scaled >= size:
        off = (scaled - size) // 2
        return slice(off, off + size), slice(0, size), -off
    pad = (size - scaled) // 2
    return slice(0, scaled), slice(pad, pad + scaled), pad


def rescale(image, boxes, factor):
    """Uniform scale about the image center; the canvas keeps its size."""
    C, H, W = image.shape
    nh, nw = max(1, int(round(H * factor))), max(1, int(round(W * factor)))
    channels = [
        np.asarray(Image.fromarray(image[c].astype(np.float32)).resize((nw, nh), Image.Resampling.BILINEAR))
        for c in range(C)
    ]
    scaled = np.stack(channels).astype(image.dtype)
    src_y, dst_y, shift_y = _centered(nh, H)
    src_x, dst_x, shift_x = _centered(nw, W)
    out = np.zeros_like(image)
    out[:, dst_y, dst_x] = scaled[:, src_y, src_x]
    sx, sy = nw / W, nh / H
    moved = [
        BoxAnnotation(b.x1 * sx + shift_x, b.y1 * sy + shift_y, b.x2 * sx + shift_x, b.y2 * sy + shift_y, b.class_id)
        for b in boxes
    ]
    return np.clip(out, 0.0, 1.0), clip_boxes(moved, W, H)


def adjust_brightness(image, delta):
    return np.clip(image + delta, 0.0, 1.0).astype(image.dtype)


def add_gaussian_noise(image, std, rng):
    return np.clip(image + rng.normal(0.0, std, size=image.shape), 0.0, 1.0).astype(image.dtype)


def augment(image, boxes, config, seed):
    """Randomly flip, rotate, translate, rescale, brighten and add noise."""
    boxes = list(boxes)
    if config.is_identity:
        return image, boxes
    rng = np.random.default_rng(seed)
    _, H, W = image.shape
    if rng.random() < config.hflip_prob:
        image, boxes = flip_horizontal(image, boxes)
    if H == W and rng.random() < config.rot90_prob:
        image, boxes = rotate90(image, boxes, int(rng.integers(1, 4)))
    if config.max_translate > 0:
        dx, dy = (int(v) for v in rng.integers(-config.max_translate, config.max_translate + 1, size=2))
        image, boxes = translate(image, boxes, dx, dy)
    lo, hi = config.scale_range
    if (lo, hi) != (1.0, 1.0):
        image, boxes = rescale(image, boxes, float(rng.uniform(lo, hi)))
    if config.brightness > 0:
        image = adjust_brightness(image, float(rng.uniform(-config.brightness, config.brightness)))
    if config.noise_std > 0:
        image = add_gaussian_noise(image, config.noise_std, rng)
    return image, clip_boxes(boxes, W, H)


# batching

@dataclass
class DomainBatch:
    step: int
    epoch: int
    source: np.ndarray
    target: Optional[np.ndarray] = None


@dataclass
class PreparedBatch:
    images: np.ndarray
    image_ids: list
    targets: object = None


def batch_indices(n, batch_size, seed, epoch, stream=0):
    if n == 0:
        raise DataError("cannot batch an empty manifest")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch, stream]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def paired_batches(source, target, source_batch_size, target_batch_size, seed, epoch):
    """Yield one source batch paired with one target batch per step.

    The epoch length is the longer of the two streams; the shorter one cycles.
    """
    src = batch_indices(len(source), source_batch_size, seed, epoch, stream=0)
    if target is None:
        for step, indices in enumerate(src):
            yield DomainBatch(step, epoch, indices)
        return
    tgt = batch_indices(len(target), target_batch_size, seed, epoch, stream=1)
    for step in range(max(len(src), len(tgt))):
        yield DomainBatch(step, epoch, src[step % len(src)], tgt[step % len(tgt)])


def steps_per_epoch(source, target, source_batch_size, target_batch_size):
    src = -(-len(source) // source_batch_size)
    if target is None:
        return src
    return max(src, -(-len(target) // target_batch_size))


def image_seed(seed, epoch, step, position, domain):
    return [seed, epoch, step, position, DOMAINS.index(domain)]


def _load_one(entry, config, seed, use_boxes):
    image = load_image(entry.image_path)
    boxes = entry.annotations if use_boxes and entry.annotations is not None else []
    return augment(image, boxes, config, seed)


def prepare_batch(manifest, indices, augment_config, seed, epoch, step, domain, R=4, num_classes=None,
                  min_overlap=0.7, encode=True, dtype=np.float32, jobs=1):
    """Load, augment and (for labeled manifests) encode the images at ``indices``."""
    entries = [manifest.entries[int(i)] for i in indices]
    use_boxes = encode and manifest.labeled
    loaded = Parallel(n_jobs=jobs)(
        delayed(_load_one)(entry, augment_config, image_seed(seed, epoch, step, pos, domain), use_boxes)
        for pos, entry in enumerate(entries)
    )
    shapes = {img.shape for img, _ in loaded}
    if len(shapes) != 1:
        raise DataError(f"batch mixes image sizes {sorted(shapes)}", path=manifest.path)
    images = np.stack([img for img, _ in loaded]).astype(dtype)
    targets = None
    if use_boxes:
        C = num_classes or manifest.num_classes
        _, _, H, W = images.shape
        encoded = [encode_targets(boxes, (H, W), R, C, min_overlap) for _, boxes in loaded]
        targets = stack_targets(encoded, dtype=dtype)
    return PreparedBatch(images=images, image_ids=[e.image_id for e in entries], targets=targets)


def subset(manifest, limit):
    return replace(manifest, entries=manifest.entries[:limit])
