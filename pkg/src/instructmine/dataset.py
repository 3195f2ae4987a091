"""Annotated-dataset model, annotation/embedding file loading, fold splits,
and per-class candidate pools.

Two annotation formats are accepted: COCO-style JSON (images / annotations /
categories) and a "simple" JSON schema that additionally carries a word list
per class (see README). All ids are handled as opaque strings; numeric ids
from COCO files are stringified on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ChecksumMismatchError,
    ClassAbsentFromTrainSplitError,
    DanglingReferenceError,
    DimensionMismatchError,
    InvalidConfigError,
    MissingEmbeddingError,
    OutOfBoundsBBoxError,
    ParseError,
    TooFewImagesError,
)
from .index import GRID_SIZES, PatchKey
from .storage import BUNDLE_MAGIC, ByteReader, ByteWriter

DEFAULT_PROMPT_TEMPLATE = "a photo of {}"

_SECTION_PATCHES = 1
_SECTION_BBOXES = 2
_SECTION_TEXTS = 3


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int


@dataclass(frozen=True)
class BBox:
    bbox_id: str
    image_id: str
    class_id: str
    x: float
    y: float
    w: float
    h: float

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def xywh(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class ClassDef:
    class_id: str
    name: str
    words: tuple[str, ...]  # canonical name always first


@dataclass
class AnnotatedDataset:
    images: dict[str, ImageRecord]
    bboxes: dict[str, BBox]
    classes: dict[str, ClassDef]
    split_assignments: dict[str, int] | None = None
    bboxes_by_image: dict[str, list[BBox]] = field(init=False, repr=False)

    def __post_init__(self):
        by_image: dict[str, list[BBox]] = {i: [] for i in self.images}
        for bb in self.bboxes.values():
            by_image[bb.image_id].append(bb)
        for lst in by_image.values():
            lst.sort(key=lambda b: b.bbox_id)
        self.bboxes_by_image = by_image

    def image_ids(self) -> list[str]:
        return sorted(self.images)

    def class_ids(self) -> list[str]:
        return sorted(self.classes)

    def images_with_class(self, class_id: str, within: Iterable[str] | None = None) -> set[str]:
        ids = self.images.keys() if within is None else within
        return {
            i for i in ids
            if any(b.class_id == class_id for b in self.bboxes_by_image[i])
        }

    def fold_split(self, fold: int) -> tuple[list[str], list[str]]:
        """(train_ids, test_ids) for one fold, both sorted."""
        if self.split_assignments is None:
            raise InvalidConfigError("dataset has no fold assignments; call split_folds")
        train = sorted(i for i, f in self.split_assignments.items() if f != fold)
        test = sorted(i for i, f in self.split_assignments.items() if f == fold)
        return train, test

    def n_folds(self) -> int:
        if self.split_assignments is None:
            raise InvalidConfigError("dataset has no fold assignments")
        return max(self.split_assignments.values()) + 1


def _validate_dataset(ds: AnnotatedDataset) -> AnnotatedDataset:
    for bb in ds.bboxes.values():
        if bb.image_id not in ds.images:
            raise DanglingReferenceError(f"bbox {bb.bbox_id} references unknown image {bb.image_id}")
        if bb.class_id not in ds.classes:
            raise DanglingReferenceError(f"bbox {bb.bbox_id} references unknown class {bb.class_id}")
        img = ds.images[bb.image_id]
        if bb.w <= 0 or bb.h <= 0:
            raise OutOfBoundsBBoxError(f"bbox {bb.bbox_id} has non-positive size {bb.w}x{bb.h}")
        if bb.x < 0 or bb.y < 0 or bb.x + bb.w > img.width or bb.y + bb.h > img.height:
            raise OutOfBoundsBBoxError(
                f"bbox {bb.bbox_id} at ({bb.x},{bb.y},{bb.w},{bb.h}) exceeds "
                f"image {img.image_id} bounds {img.width}x{img.height}"
            )
    for cd in ds.classes.values():
        if not cd.words:
            raise ParseError(f"class {cd.class_id} has an empty word list")
    return ds


def _load_json(path: str | Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: expected a JSON object at top level")
    return doc


def load_annotations(path: str | Path, format: str = "simple_json") -> AnnotatedDataset:
    """Load and fully validate an annotated dataset."""
    doc = _load_json(path)
    if format == "coco_json":
        return _from_coco(doc)
    if format == "simple_json":
        return _from_simple(doc)
    raise InvalidConfigError(f"unknown annotation format {format!r}")


def _from_coco(doc: Mapping) -> AnnotatedDataset:
    try:
        images = {
            str(im["id"]): ImageRecord(str(im["id"]), int(im["width"]), int(im["height"]))
            for im in doc["images"]
        }
        classes = {}
        for cat in doc["categories"]:
            cid = str(cat["id"])
            name = str(cat["name"])
            extra = [str(w) for w in cat.get("words", []) if str(w) != name]
            classes[cid] = ClassDef(cid, name, (name, *extra))
        bboxes = {}
        for ann in doc["annotations"]:
            x, y, w, h = (float(v) for v in ann["bbox"])
            bid = str(ann["id"])
            bboxes[bid] = BBox(bid, str(ann["image_id"]), str(ann["category_id"]), x, y, w, h)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed COCO annotation document: {exc}") from exc
    return _validate_dataset(AnnotatedDataset(images, bboxes, classes))


def _from_simple(doc: Mapping) -> AnnotatedDataset:
    try:
        images = {
            str(im["id"]): ImageRecord(str(im["id"]), int(im["width"]), int(im["height"]))
            for im in doc["images"]
        }
        classes = {}
        for cd in doc["classes"]:
            cid = str(cd["id"])
            name = str(cd["name"])
            extra = [str(w) for w in cd.get("words", []) if str(w) != name]
            classes[cid] = ClassDef(cid, name, (name, *extra))
        bboxes = {}
        for ann in doc["annotations"]:
            x, y, w, h = (float(v) for v in ann["bbox"])
            bid = str(ann["id"])
            bboxes[bid] = BBox(bid, str(ann["image_id"]), str(ann["class_id"]), x, y, w, h)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed simple annotation document: {exc}") from exc
    return _validate_dataset(AnnotatedDataset(images, bboxes, classes))


def save_annotations(ds: AnnotatedDataset, path: str | Path) -> None:
    """Write the simple_json annotation schema (deterministic byte output)."""
    doc = {
        "format": "simple_json",
        "images": [
            {"id": im.image_id, "width": im.width, "height": im.height}
            for im in sorted(ds.images.values(), key=lambda i: i.image_id)
        ],
        "annotations": [
            {
                "id": bb.bbox_id,
                "image_id": bb.image_id,
                "class_id": bb.class_id,
                "bbox": [bb.x, bb.y, bb.w, bb.h],
            }
            for bb in sorted(ds.bboxes.values(), key=lambda b: b.bbox_id)
        ],
        "classes": [
            {"id": cd.class_id, "name": cd.name, "words": list(cd.words)}
            for cd in sorted(ds.classes.values(), key=lambda c: c.class_id)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class EmbeddingBundle:
    """All precomputed embeddings for one dataset, keyed for lookup."""

    dim: int
    patches: dict[PatchKey, np.ndarray]
    bboxes: dict[str, np.ndarray]
    texts: dict[str, np.ndarray]

    def patch_records(self, image_ids: Iterable[str] | None = None):
        """(PatchKey, vector) pairs in deterministic key order."""
        keep = None if image_ids is None else set(image_ids)
        for key in sorted(self.patches):
            if keep is None or key.image_id in keep:
                yield key, self.patches[key]


def grid_patch_keys(image_id: str) -> list[PatchKey]:
    """The 165 grid-patch keys every image must have."""
    keys = []
    for g in GRID_SIZES:
        for r in range(g):
            for c in range(g):
                keys.append(PatchKey(image_id, g, r, c))
    return keys


def validate_bundle(
    bundle: EmbeddingBundle,
    ds: AnnotatedDataset,
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE,
) -> None:
    """Check referential integrity of a bundle against a dataset.

    Every image needs its full 165-patch grid, every bbox a crop embedding,
    and every word of every class an embedding for its rendered prompt.
    """
    for image_id in ds.image_ids():
        for key in grid_patch_keys(image_id):
            if key not in bundle.patches:
                raise MissingEmbeddingError(f"missing grid patch embedding {key}")
    for bbox_id in sorted(ds.bboxes):
        if bbox_id not in bundle.bboxes:
            raise MissingEmbeddingError(f"missing bbox embedding {bbox_id!r}")
    for cd in sorted(ds.classes.values(), key=lambda c: c.class_id):
        for word in cd.words:
            prompt = prompt_template.format(word)
            if prompt not in bundle.texts:
                raise MissingEmbeddingError(f"missing text embedding for prompt {prompt!r}")
    known_images = set(ds.images)
    for key in bundle.patches:
        if key.image_id not in known_images:
            raise DanglingReferenceError(f"patch embedding for unknown image {key.image_id!r}")
    for vecs in (bundle.patches.values(), bundle.bboxes.values(), bundle.texts.values()):
        for v in vecs:
            if v.shape != (bundle.dim,):
                raise DimensionMismatchError(
                    f"bundle declares dimension {bundle.dim} but holds a vector of shape {v.shape}"
                )


def save_embeddings(bundle: EmbeddingBundle, path: str | Path) -> None:
    """Write the bundle in its binary envelope (see README for the layout)."""
    w = ByteWriter(BUNDLE_MAGIC)
    w.write_u32(bundle.dim)
    w.write_u32(3)  # section count
    sections = [
        (_SECTION_PATCHES, sorted(bundle.patches.items())),
        (_SECTION_BBOXES, sorted(bundle.bboxes.items())),
        (_SECTION_TEXTS, sorted(bundle.texts.items())),
    ]
    for tag, items in sections:
        w.write_u32(tag)
        w.write_u64(len(items))
    for tag, items in sections:
        for key, vec in items:
            if tag == _SECTION_PATCHES:
                w.write_str(key.image_id)
                w.write_u32(key.grid_size)
                w.write_u32(key.cell_row)
                w.write_u32(key.cell_col)
                w.write_str(key.bbox_id)
            else:
                w.write_str(key)
            w.write_f32_array(np.asarray(vec, dtype=np.float32))
    w.save(path)


def load_embeddings(path: str | Path, expected_dim: int | None = None) -> EmbeddingBundle:
    """Read a bundle file, verifying checksum and (optionally) dimension."""
    if not Path(path).exists():
        raise MissingEmbeddingError(f"embedding bundle not found: {path}")
    r = ByteReader(path, BUNDLE_MAGIC)
    dim = r.read_u32()
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatchError(f"bundle dimension {dim}, expected {expected_dim}")
    n_sections = r.read_u32()
    counts: dict[int, int] = {}
    for _ in range(n_sections):
        tag = r.read_u32()
        counts[tag] = r.read_u64()
    patches: dict[PatchKey, np.ndarray] = {}
    for _ in range(counts.get(_SECTION_PATCHES, 0)):
        image_id = r.read_str()
        grid = r.read_u32()
        row = r.read_u32()
        col = r.read_u32()
        bbox_id = r.read_str()
        patches[PatchKey(image_id, grid, row, col, bbox_id)] = r.read_f32_array(dim)
    bboxes: dict[str, np.ndarray] = {}
    for _ in range(counts.get(_SECTION_BBOXES, 0)):
        bbox_id = r.read_str()
        bboxes[bbox_id] = r.read_f32_array(dim)
    texts: dict[str, np.ndarray] = {}
    for _ in range(counts.get(_SECTION_TEXTS, 0)):
        prompt = r.read_str()
        texts[prompt] = r.read_f32_array(dim)
    if not r.done():
        raise ChecksumMismatchError(f"{path}: trailing bytes after final section")
    return EmbeddingBundle(dim=dim, patches=patches, bboxes=bboxes, texts=texts)


def split_folds(ds: AnnotatedDataset, n_folds: int, seed: int) -> AnnotatedDataset:
    """Partition image ids into n_folds near-equal groups (seeded, by image).

    Splitting happens at image granularity so no image's patches can leak
    between a fold's train and test indexes.
    """
    if n_folds < 2:
        raise InvalidConfigError(f"n_folds must be >= 2, got {n_folds}")
    ids = ds.image_ids()
    if len(ids) < n_folds:
        raise TooFewImagesError(f"{len(ids)} images cannot fill {n_folds} folds")
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    base, extra = divmod(len(ids), n_folds)
    assignments: dict[str, int] = {}
    pos = 0
    for f in range(n_folds):
        size = base + (1 if f < extra else 0)
        for image_id in perm[pos : pos + size]:
            assignments[image_id] = f
        pos += size
    return replace(ds, split_assignments=assignments)


@dataclass(frozen=True)
class PoolEntry:
    image_id: str
    bbox_id: str
    vector: np.ndarray


@dataclass(frozen=True)
class CandidatePool:
    """Per-class candidate queries: largest bbox crop per training image
    plus the embedded word list."""

    class_id: str
    visuals: tuple[PoolEntry, ...]
    words: tuple[tuple[str, np.ndarray], ...]  # (word, prompt embedding)
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE

    def prompt_for(self, word: str) -> str:
        return self.prompt_template.format(word)


def build_candidate_pool(
    ds: AnnotatedDataset,
    bundle: EmbeddingBundle,
    class_id: str,
    train_image_ids: Sequence[str],
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE,
) -> CandidatePool:
    """V_c and embedded L_c for one class over the training images.

    Per training image containing the class, the maximum-area bbox is kept
    (ties broken by lowest bbox_id).
    """
    if class_id not in ds.classes:
        raise DanglingReferenceError(f"unknown class {class_id!r}")
    visuals: list[PoolEntry] = []
    for image_id in sorted(train_image_ids):
        candidates = [b for b in ds.bboxes_by_image[image_id] if b.class_id == class_id]
        if not candidates:
            continue
        best = min(candidates, key=lambda b: (-b.area, b.bbox_id))
        if best.bbox_id not in bundle.bboxes:
            raise MissingEmbeddingError(f"missing bbox embedding {best.bbox_id!r}")
        visuals.append(PoolEntry(image_id, best.bbox_id, bundle.bboxes[best.bbox_id]))
    if not visuals:
        raise ClassAbsentFromTrainSplitError(
            f"class {class_id!r} has no instances in the training split"
        )
    words = []
    for word in ds.classes[class_id].words:
        prompt = prompt_template.format(word)
        if prompt not in bundle.texts:
            raise MissingEmbeddingError(f"missing text embedding for prompt {prompt!r}")
        words.append((word, bundle.texts[prompt]))
    return CandidatePool(
        class_id=class_id,
        visuals=tuple(visuals),
        words=tuple(words),
        prompt_template=prompt_template,
    )
