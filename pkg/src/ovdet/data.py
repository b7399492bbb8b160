"""Synthetic compositional scenes, image tiling and COCO-style annotation I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .text import BASE, NOVEL, ClassVocabulary, normalize_name

log = logging.getLogger(__name__)

COLORS: Dict[str, Tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (50, 90, 230),
    "yellow": (235, 215, 40),
    "magenta": (210, 50, 200),
    "cyan": (40, 210, 215),
}
SHAPES = ("circle", "square", "triangle", "cross", "ring")
PARTITIONS = {"train": 0, "eval": 1}


class GenerationError(RuntimeError):
    pass


class IngestionError(ValueError):
    pass


@dataclass
class ObjectAnn:
    class_name: str
    bbox: Tuple[float, float, float, float]  # x, y, w, h in pixels


@dataclass
class AnnotationRecord:
    image_id: int
    file_name: str
    width: int
    height: int
    objects: List[ObjectAnn] = field(default_factory=list)


@dataclass
class SceneSpec:
    canvas: int = 256
    shapes: Sequence[str] = SHAPES
    colors: Sequence[str] = ("red", "green", "blue")
    classes: Optional[Sequence[str]] = None   # explicit "<color> <shape>" list; default all combos
    novel: Sequence[str] = ()
    objects: Tuple[int, int] = (5, 25)
    size: Tuple[float, float] = (4 / 256, 24 / 256)  # fraction of canvas
    size_skew: float = 2.0                  # >1 skews sizes towards the small end
    color_jitter: int = 20
    clutter: float = 0.5
    max_overlap: float = 0.3
    max_retries: int = 200
    seed: int = 0

    def class_names(self) -> List[str]:
        if self.classes is not None:
            return [normalize_name(c) for c in self.classes]
        return [f"{c} {s}" for c in self.colors for s in self.shapes]

    def vocabulary(self) -> ClassVocabulary:
        return ClassVocabulary.from_names(self.class_names(), self.novel)


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` raster of a shape."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    r = size / 2.0
    if shape == "circle":
        m = (xx - c) ** 2 + (yy - c) ** 2 <= r * r
    elif shape == "square":
        m = np.ones((size, size), bool)
    elif shape == "triangle":
        m = np.abs(xx - c) <= yy / 2.0
    elif shape == "cross":
        t = max(size / 3.0, 1.0)
        m = (np.abs(xx - c) <= t / 2) | (np.abs(yy - c) <= t / 2)
    elif shape == "ring":
        d2 = (xx - c) ** 2 + (yy - c) ** 2
        m = (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    if not m.any():
        m[size // 2, size // 2] = True
    return m


def _box_iou_xywh(a, b) -> float:
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def scene_rng(seed: int, index: int, partition: str) -> np.random.Generator:
    return np.random.default_rng((seed ^ index, PARTITIONS[partition]))


def render_scene(spec: SceneSpec, rng: np.random.Generator, class_pool: Sequence[str],
                 forced: Sequence[str] = ()) -> Tuple[np.ndarray, List[ObjectAnn]]:
    n = spec.canvas
    bg = rng.uniform(70, 110)
    img = np.full((n, n, 3), bg) + rng.normal(0, 4, size=(n, n, 3))
    for _ in range(int(round(spec.clutter * 10))):
        w, h = rng.integers(4, max(5, n // 4), size=2)
        x, y = rng.integers(0, n - w + 1), rng.integers(0, n - h + 1)
        img[y:y + h, x:x + w] += rng.uniform(-18, 18)

    lo, hi = spec.objects
    count = max(int(rng.integers(lo, hi + 1)), len(forced))
    names = list(forced) + [class_pool[i] for i in rng.integers(0, len(class_pool), size=count - len(forced))]
    placed: List[ObjectAnn] = []
    for name in names:
        color, shape = name.split(" ", 1)
        for _ in range(spec.max_retries):
            u = rng.random() ** spec.size_skew
            size = int(round((spec.size[0] + (spec.size[1] - spec.size[0]) * u) * n))
            size = int(np.clip(size, 2, n))
            x, y = int(rng.integers(0, n - size + 1)), int(rng.integers(0, n - size + 1))
            m = shape_mask(shape, size)
            ys, xs = np.nonzero(m)
            box = (float(x + xs.min()), float(y + ys.min()),
                   float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))
            if all(_box_iou_xywh(box, o.bbox) <= spec.max_overlap for o in placed):
                break
        else:
            raise GenerationError(
                f"could not place '{name}' within max_overlap={spec.max_overlap} "
                f"after {spec.max_retries} retries")
        rgb = np.array(COLORS[color], float) + rng.integers(-spec.color_jitter, spec.color_jitter + 1, size=3)
        region = img[y:y + size, x:x + size]
        region[m] = rgb
        placed.append(ObjectAnn(name, box))
    return np.clip(np.round(img), 0, 255).astype(np.uint8), placed


def generate_scenes(spec: SceneSpec, count: int, partition: str = "train", id_offset: int = 0
                    ) -> Tuple[List[np.ndarray], List[AnnotationRecord]]:
    """Render ``count`` scenes; novel classes are withheld from the train partition.

    In the eval partition the first scene always carries one object of each
    novel class so that the split is never empty.
    """
    if partition not in PARTITIONS:
        raise ValueError(f"partition must be one of {sorted(PARTITIONS)}")
    if not spec.shapes or not spec.colors:
        raise ValueError("shape and color sets must be nonempty")
    vocab = spec.vocabulary()
    novel = set(vocab.names_with_role(NOVEL))
    pool = [c for c in vocab.names if partition == "eval" or c not in novel]
    if not pool:
        raise GenerationError("no classes available for this partition")
    images, records = [], []
    for i in range(count):
        rng = scene_rng(spec.seed, i, partition)
        forced = sorted(novel) if (partition == "eval" and i == 0) else ()
        img, objs = render_scene(spec, rng, pool, forced)
        image_id = id_offset + i
        images.append(img)
        records.append(AnnotationRecord(image_id, f"{partition}_{image_id:06d}.png",
                                        spec.canvas, spec.canvas, objs))
    return images, records


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TileSpec:
    tile: int = 800
    stride: int = 800
    min_fraction: float = 0.4

    def __post_init__(self):
        if not 0 < self.stride <= self.tile:
            raise ValueError("stride must satisfy 0 < stride <= tile")


@dataclass
class Tile:
    image: np.ndarray
    offset: Tuple[int, int]  # (x, y) of the tile's top-left corner in the source image
    objects: List[ObjectAnn]


def tile_offsets(length: int, tile: int, stride: int) -> List[int]:
    if length <= tile:
        return [0]
    offs = list(range(0, length - tile + 1, stride))
    if offs[-1] + tile < length:
        offs.append(length - tile)
    return offs


def tile_image(image: np.ndarray, objects: Sequence[ObjectAnn], spec: TileSpec = TileSpec()) -> List[Tile]:
    """Cut an image into ``spec.tile`` squares, clipping annotations to each tile.

    A clipped box is kept when its visible area is at least
    ``spec.min_fraction`` of the original area.  Images smaller than a tile
    are zero-padded on the bottom/right.
    """
    h, w = image.shape[:2]
    ph, pw = max(h, spec.tile), max(w, spec.tile)
    if (ph, pw) != (h, w):
        padded = np.zeros((ph, pw) + image.shape[2:], dtype=image.dtype)
        padded[:h, :w] = image
        image = padded
    tiles = []
    for oy in tile_offsets(ph, spec.tile, spec.stride):
        for ox in tile_offsets(pw, spec.tile, spec.stride):
            kept = []
            for obj in objects:
                x, y, bw, bh = obj.bbox
                x0, y0 = max(x, ox), max(y, oy)
                x1, y1 = min(x + bw, ox + spec.tile), min(y + bh, oy + spec.tile)
                if x1 <= x0 or y1 <= y0:
                    continue
                if (x1 - x0) * (y1 - y0) >= spec.min_fraction * bw * bh:
                    kept.append(ObjectAnn(obj.class_name, (x0 - ox, y0 - oy, x1 - x0, y1 - y0)))
            crop = image[oy:oy + spec.tile, ox:ox + spec.tile].copy()
            tiles.append(Tile(crop, (ox, oy), kept))
    return tiles


# ---------------------------------------------------------------------------
# annotation files
# ---------------------------------------------------------------------------

def to_coco(records: Sequence[AnnotationRecord], vocab: ClassVocabulary) -> dict:
    cat_id = {n: i + 1 for i, n in enumerate(vocab.names)}
    images, anns = [], []
    for rec in records:
        images.append({"id": rec.image_id, "file_name": rec.file_name,
                       "width": rec.width, "height": rec.height})
        for obj in rec.objects:
            anns.append({"id": len(anns) + 1, "image_id": rec.image_id,
                         "category_id": cat_id[obj.class_name], "bbox": list(obj.bbox)})
    cats = [{"id": cat_id[n], "name": n} for n in vocab.names]
    return {"images": images, "annotations": anns, "categories": cats}


def write_split(vocab: ClassVocabulary, path) -> None:
    Path(path).write_text("".join(n + "\n" for n in vocab.names_with_role(NOVEL)))


def save_dataset(root, images: Sequence[np.ndarray], records: Sequence[AnnotationRecord],
                 vocab: ClassVocabulary, name: str = "annotations.json") -> Path:
    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for img, rec in zip(images, records):
        Image.fromarray(img).save(root / "images" / rec.file_name)
    path = root / name
    path.write_text(json.dumps(to_coco(records, vocab), indent=1, sort_keys=True))
    write_split(vocab, root / "novel.txt")
    return path


class LoadedAnnotations(NamedTuple):
    records: List[AnnotationRecord]
    vocabulary: ClassVocabulary
    clipped: int


def load_annotations(path, split_path=None) -> LoadedAnnotations:
    """Parse a COCO-style file; boxes are clipped to the image and validated.

    ``split_path`` lists novel class names one per line; by default a
    ``novel.txt`` beside the annotation file is used when present.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    cats = sorted(doc.get("categories", []), key=lambda c: c["id"])
    names = {c["id"]: normalize_name(c["name"]) for c in cats}
    if split_path is None and (path.parent / "novel.txt").exists():
        split_path = path.parent / "novel.txt"
    novel = []
    if split_path is not None:
        novel = [ln for ln in Path(split_path).read_text().splitlines() if ln.strip()]
    vocab = ClassVocabulary.from_names([names[c["id"]] for c in cats], novel)

    records: Dict[int, AnnotationRecord] = {}
    for img in doc.get("images", []):
        records[img["id"]] = AnnotationRecord(img["id"], img["file_name"], int(img["width"]), int(img["height"]))
    clipped = 0
    for i, ann in enumerate(doc.get("annotations", [])):
        where = f"{path.name}: annotations[{i}] (id={ann.get('id')})"
        if ann["category_id"] not in names:
            raise IngestionError(f"{where}: undefined category id {ann['category_id']}")
        rec = records.get(ann["image_id"])
        if rec is None:
            raise IngestionError(f"{where}: unknown image id {ann['image_id']}")
        x, y, w, h = (float(v) for v in ann["bbox"])
        x0, y0 = max(x, 0.0), max(y, 0.0)
        x1, y1 = min(x + w, float(rec.width)), min(y + h, float(rec.height))
        box = (x, y, w, h)
        if (x0, y0, x1, y1) != (x, y, x + w, y + h):
            clipped += 1
            log.warning("%s: box clipped to image bounds", where)
            box = (x0, y0, x1 - x0, y1 - y0)
        if box[2] <= 0 or box[3] <= 0:
            raise IngestionError(f"{where}: box has no positive area after clipping")
        rec.objects.append(ObjectAnn(names[ann["category_id"]], box))
    return LoadedAnnotations([records[k] for k in sorted(records)], vocab, clipped)


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))
