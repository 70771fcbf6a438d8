"""COCO-format detection datasets: loading, validation and writing.

Bounding boxes follow the COCO convention ``[x, y, width, height]`` with a
top-left origin. Unknown keys on images, annotations and the top-level
document are carried through untouched so that a load/write round trip does
not lose information.
"""
from __future__ import annotations

import copy
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ConsistencyError, DatasetParseError, ValidationError

AUG_SUFFIX = "_aug"
AUG_EXT = ".png"


@dataclass(frozen=True)
class ObjectAnnotation:
    annotation_id: Any
    bbox: tuple[float, float, float, float]  # x, y, w, h
    category: str
    area: float
    iscrowd: bool = False
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def bbox_area(self) -> float:
        return float(self.bbox[2]) * float(self.bbox[3])


@dataclass(frozen=True)
class CategorySet:
    names: tuple[str, ...]
    ids: tuple[Any, ...]
    extra: tuple[dict, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            dupes = sorted({n for n in self.names if self.names.count(n) > 1})
            raise ValidationError(f"duplicate category names: {dupes}")
        if len(self.ids) != len(self.names):
            raise ValidationError("category ids and names differ in length")

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.index

    @property
    def index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.names)}

    def id_of(self, name: str):
        try:
            return self.ids[self.index[name]]
        except KeyError:
            raise ValidationError(f"unknown category {name!r}") from None

    def name_of(self, category_id) -> str:
        for cid, name in zip(self.ids, self.names):
            if cid == category_id:
                return name
        raise ValidationError(f"unknown category id {category_id!r}")


@dataclass
class DetectionSample:
    """One image and its annotated objects.

    ``image`` is an ``H x W x 3`` uint8 array, or ``None`` when the dataset was
    loaded without pixels.
    """

    image_id: Any
    file_name: str
    width: int
    height: int
    objects: list[ObjectAnnotation]
    image: np.ndarray | None = None
    source_path: Path | None = None
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def image_area(self) -> float:
        return float(self.width) * float(self.height)


def _parse_json(path: Path) -> dict:
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetParseError(f"{path}: not UTF-8", exc.start) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DatasetParseError(f"{path}: {exc.msg}", offset) from exc
    if not isinstance(doc, dict):
        raise DatasetParseError(f"{path}: top level must be a JSON object", 0)
    return doc


def _categories(doc: dict) -> CategorySet:
    cats = doc.get("categories")
    if not isinstance(cats, list):
        raise ValidationError("'categories' must be a list")
    try:
        cats = sorted(cats, key=lambda c: c["id"])
        return CategorySet(
            names=tuple(str(c["name"]) for c in cats),
            ids=tuple(c["id"] for c in cats),
            extra=tuple({k: v for k, v in c.items() if k not in ("id", "name")} for c in cats),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed category entry: {exc}") from exc


def validate_document(doc: dict) -> CategorySet:
    """Check structure and geometry of a parsed COCO document.

    Raises :class:`ValidationError` listing every offending annotation id.
    """
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise ValidationError(f"missing or non-list {key!r}")
    categories = _categories(doc)
    images = {}
    for img in doc["images"]:
        try:
            images[img["id"]] = (float(img["width"]), float(img["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed image entry {img!r}") from exc
    known_cats = set(categories.ids)

    missing_image, unknown_cat, bad_bbox = [], [], []
    for ann in doc["annotations"]:
        ann_id = ann.get("id")
        if ann.get("image_id") not in images:
            missing_image.append(ann_id)
            continue
        if ann.get("category_id") not in known_cats:
            unknown_cat.append(ann_id)
            continue
        bbox = ann.get("bbox")
        if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
            bad_bbox.append(ann_id)
            continue
        x, y, w, h = (float(v) for v in bbox)
        width, height = images[ann["image_id"]]
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
            bad_bbox.append(ann_id)

    if missing_image:
        raise ValidationError(
            f"annotations reference missing image ids: {missing_image}", missing_image
        )
    if unknown_cat:
        raise ValidationError(f"annotations with unknown category_id: {unknown_cat}", unknown_cat)
    if bad_bbox:
        raise ValidationError(f"bbox empty or outside image for annotations: {bad_bbox}", bad_bbox)
    ann_ids = [a.get("id") for a in doc["annotations"]]
    if len(set(map(repr, ann_ids))) != len(ann_ids):
        raise ValidationError("duplicate annotation ids")
    return categories


def _to_annotation(ann: dict, categories: CategorySet) -> ObjectAnnotation:
    x, y, w, h = (float(v) for v in ann["bbox"])
    area = ann.get("area")
    area = float(area) if area else w * h
    extra = {
        k: v
        for k, v in ann.items()
        if k not in ("id", "image_id", "bbox", "category_id", "area", "iscrowd")
    }
    return ObjectAnnotation(
        annotation_id=ann["id"],
        bbox=(x, y, w, h),
        category=categories.name_of(ann["category_id"]),
        area=area,
        iscrowd=bool(ann.get("iscrowd", 0)),
        extra=extra,
    )


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def load_dataset(
    annotation_file, image_root=None, *, load_images: bool = True
) -> tuple[CategorySet, Iterator[DetectionSample]]:
    """Parse and validate a COCO file, then stream samples in file order.

    Validation happens eagerly; pixels are read lazily as the stream is
    consumed. Pass ``load_images=False`` to skip pixel IO altogether.
    """
    annotation_file = Path(annotation_file)
    doc = _parse_json(annotation_file)
    categories = validate_document(doc)
    root = Path(image_root) if image_root is not None else annotation_file.parent

    by_image: dict[Any, list[dict]] = {}
    for ann in doc["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)

    def stream():
        for img in doc["images"]:
            objects = [_to_annotation(a, categories) for a in by_image.get(img["id"], [])]
            path = root / img["file_name"] if "file_name" in img else None
            pixels = None
            if load_images:
                if path is None or not path.exists():
                    raise ValidationError(f"image file missing for image id {img['id']!r}: {path}")
                pixels = read_image(path)
                if pixels.shape[:2] != (int(img["height"]), int(img["width"])):
                    raise ValidationError(
                        f"image {img['id']!r}: file is {pixels.shape[1]}x{pixels.shape[0]}, "
                        f"annotation says {img['width']}x{img['height']}",
                        [img["id"]],
                    )
            yield DetectionSample(
                image_id=img["id"],
                file_name=img.get("file_name", f"{img['id']}.png"),
                width=int(img["width"]),
                height=int(img["height"]),
                objects=objects,
                image=pixels,
                source_path=path,
                extra={k: v for k, v in img.items() if k not in ("id", "file_name", "width", "height")},
            )

    return categories, stream()


def load_document(annotation_file) -> dict:
    """Parse a COCO file without validation (for top-level key passthrough)."""
    return _parse_json(Path(annotation_file))


@dataclass
class OutputEntry:
    """A sample to emit, optionally with the plan and pixels of its edit."""

    sample: DetectionSample
    plan: Any = None  # AugmentationPlan; kept untyped to avoid an import cycle
    image: np.ndarray | None = None


def augmented_file_name(image_id) -> str:
    return f"{image_id}{AUG_SUFFIX}{AUG_EXT}"


def _annotation_dict(obj: ObjectAnnotation, image_id, categories: CategorySet) -> dict:
    out = {
        "id": obj.annotation_id,
        "image_id": image_id,
        "category_id": categories.id_of(obj.category),
        "bbox": [_num(v) for v in obj.bbox],
        "area": _num(obj.area),
        "iscrowd": int(obj.iscrowd),
    }
    out.update(obj.extra)
    return out


def _num(v: float):
    return int(v) if float(v).is_integer() else float(v)


def write_dataset(
    entries: Sequence[OutputEntry],
    categories: CategorySet,
    out_dir,
    *,
    top_level: dict | None = None,
    image_dir: str = "images",
) -> Path:
    """Write ``annotations.json`` plus an image folder under ``out_dir``.

    Entries with a plan get their planned annotation relabelled to the target
    category (bbox untouched, segmentation dropped) and their pixels saved as
    ``<image_id>_aug.png``. All other entries pass through, with the source
    image file copied verbatim.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / image_dir
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {img_dir}: {exc}") from exc

    images, annotations = [], []
    for entry in entries:
        s = entry.sample
        plan = entry.plan
        objects = list(s.objects)
        if plan is not None:
            idx = next(
                (i for i, o in enumerate(objects) if o.annotation_id == plan.annotation_id), None
            )
            if idx is None:
                raise ConsistencyError(
                    f"plan for image {s.image_id!r} references unknown annotation "
                    f"{plan.annotation_id!r}"
                )
            if entry.image is None:
                raise ConsistencyError(f"plan for image {s.image_id!r} has no augmented pixels")
            if plan.target_category not in categories:
                raise ConsistencyError(f"unknown target category {plan.target_category!r}")
            old = objects[idx]
            extra = {k: v for k, v in old.extra.items() if k != "segmentation"}
            objects[idx] = ObjectAnnotation(
                annotation_id=old.annotation_id,
                bbox=old.bbox,
                category=plan.target_category,
                area=old.bbox_area,
                iscrowd=old.iscrowd,
                extra=extra,
            )
            file_name = augmented_file_name(s.image_id)
            Image.fromarray(np.ascontiguousarray(entry.image, dtype=np.uint8)).save(
                img_dir / file_name
            )
        else:
            file_name = s.file_name
            dest = img_dir / file_name
            dest.parent.mkdir(parents=True, exist_ok=True)
            if s.source_path is not None and Path(s.source_path).exists():
                if Path(s.source_path).resolve() != dest.resolve():
                    shutil.copyfile(s.source_path, dest)
            elif s.image is not None:
                Image.fromarray(s.image).save(dest)

        img = {"id": s.image_id, "file_name": file_name, "width": s.width, "height": s.height}
        img.update(s.extra)
        images.append(img)
        annotations.extend(_annotation_dict(o, s.image_id, categories) for o in objects)

    doc = {k: copy.deepcopy(v) for k, v in (top_level or {}).items()
           if k not in ("images", "annotations", "categories")}
    doc["images"] = images
    doc["annotations"] = annotations
    doc["categories"] = [
        {"id": cid, "name": name, **extra}
        for cid, name, extra in zip(
            categories.ids, categories.names, categories.extra or [{}] * len(categories)
        )
    ]
    path = out_dir / "annotations.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path


def structural_view(categories: CategorySet, samples) -> tuple:
    """Hashable summary used for round-trip equality: names, ids, bboxes."""
    return (
        tuple(categories.names),
        tuple(
            (s.image_id, tuple((o.annotation_id, o.bbox, o.category) for o in s.objects))
            for s in samples
        ),
    )
