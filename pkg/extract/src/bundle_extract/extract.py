"""Grid-crop, bbox-crop and prompt extraction into an embedding bundle.

Each image is cropped into g*g equal cells for every grid size (cell edges
at floor(side / g) with the last cell absorbing the remainder), every
annotated bbox is cropped as-is (no padding), and every class word is
rendered through the prompt template. All crops and prompts go through one
frozen encoder and the vectors are written unnormalized.

Unreadable images are listed and skipped; the job continues and the sidecar
report marks the bundle incomplete.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import DEFAULT_MODEL, make_encoder
from .writer import write_bundle

DEFAULT_GRIDS = (1, 3, 5, 7, 9)
DEFAULT_PROMPT_TEMPLATE = "a photo of {}"


@dataclass(frozen=True)
class ExtractJob:
    annotations: str
    image_root: str
    output: str
    model: str = DEFAULT_MODEL
    grids: tuple[int, ...] = DEFAULT_GRIDS
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    batch_size: int = 32
    device: str = "cpu"
    annotation_format: str = "simple_json"

    def validate(self) -> None:
        if not self.grids:
            raise ValueError("grid set must be non-empty")
        for g in self.grids:
            if g < 1 or g % 2 == 0:
                raise ValueError(f"grid sizes must be odd positive integers, got {g}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ExtractResult:
    bundle_path: Path
    report_path: Path
    n_images: int
    n_patches: int
    n_bboxes: int
    n_texts: int
    failures: list[dict] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.failures


def grid_cells(width: int, height: int, g: int) -> list[tuple[int, int, int, int]]:
    """(left, top, right, bottom) boxes of the g x g equal split.

    Cell edges fall on floor(side / g) multiples; the last row/column
    absorbs the remainder, so a 226-pixel side at g=3 splits 75/75/76.
    """
    cw, ch = width // g, height // g
    cells = []
    for row in range(g):
        top = row * ch
        bottom = height if row == g - 1 else (row + 1) * ch
        for col in range(g):
            left = col * cw
            right = width if col == g - 1 else (col + 1) * cw
            cells.append((left, top, right, bottom))
    return cells


def load_annotations(path: str | Path, fmt: str = "simple_json") -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if fmt == "coco_json":
        images = [
            {
                "id": str(im["id"]),
                "file_name": im.get("file_name", f"{im['id']}.png"),
            }
            for im in doc["images"]
        ]
        bboxes = [
            {
                "id": str(a["id"]),
                "image_id": str(a["image_id"]),
                "bbox": [float(v) for v in a["bbox"]],
            }
            for a in doc["annotations"]
        ]
        classes = [
            {
                "name": str(c["name"]),
                "words": [str(c["name"])]
                + [str(w) for w in c.get("words", []) if str(w) != str(c["name"])],
            }
            for c in doc["categories"]
        ]
    elif fmt == "simple_json":
        images = [
            {
                "id": str(im["id"]),
                "file_name": im.get("file_name", f"{im['id']}.png"),
            }
            for im in doc["images"]
        ]
        bboxes = [
            {
                "id": str(a["id"]),
                "image_id": str(a["image_id"]),
                "bbox": [float(v) for v in a["bbox"]],
            }
            for a in doc["annotations"]
        ]
        classes = [
            {
                "name": str(c["name"]),
                "words": [str(c["name"])]
                + [str(w) for w in c.get("words", []) if str(w) != str(c["name"])],
            }
            for c in doc["classes"]
        ]
    else:
        raise ValueError(f"unknown annotation format {fmt!r}")
    return {"images": images, "bboxes": bboxes, "classes": classes}


def _encode_batched(encoder, images: list[Image.Image], batch_size: int) -> np.ndarray:
    parts = [
        encoder.encode_images(images[i : i + batch_size])
        for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(parts) if parts else np.empty((0, encoder.dim), np.float32)


def run_extract(job: ExtractJob) -> ExtractResult:
    job.validate()
    anno = load_annotations(job.annotations, job.annotation_format)
    encoder = make_encoder(job.model, job.device)
    root = Path(job.image_root)

    bboxes_by_image: dict[str, list[dict]] = {}
    for bb in anno["bboxes"]:
        bboxes_by_image.setdefault(bb["image_id"], []).append(bb)

    patches: dict[tuple[str, int, int, int], np.ndarray] = {}
    bbox_vecs: dict[str, np.ndarray] = {}
    failures: list[dict] = []

    for im in sorted(anno["images"], key=lambda i: i["id"]):
        image_id = im["id"]
        path = root / im["file_name"]
        try:
            with Image.open(path) as fh:
                image = fh.convert("RGB")
        except (OSError, ValueError) as exc:
            failures.append({"image_id": image_id, "path": str(path), "error": str(exc)})
            continue
        w, h = image.size

        crops: list[Image.Image] = []
        keys: list[tuple[str, int, int, int]] = []
        for g in job.grids:
            for pos, (left, top, right, bottom) in enumerate(grid_cells(w, h, g)):
                crops.append(image.crop((left, top, right, bottom)))
                keys.append((image_id, g, pos // g, pos % g))
        vecs = _encode_batched(encoder, crops, job.batch_size)
        for key, vec in zip(keys, vecs):
            patches[key] = vec

        boxes = sorted(bboxes_by_image.get(image_id, []), key=lambda b: b["id"])
        if boxes:
            crops = []
            for bb in boxes:
                x, y, bw, bh = bb["bbox"]
                crops.append(image.crop((int(x), int(y), int(x + bw), int(y + bh))))
            vecs = _encode_batched(encoder, crops, job.batch_size)
            for bb, vec in zip(boxes, vecs):
                bbox_vecs[bb["id"]] = vec

    prompts = sorted(
        {
            job.prompt_template.format(word)
            for cls in anno["classes"]
            for word in cls["words"]
        }
    )
    text_mat = encoder.encode_texts(prompts)
    texts = {prompt: vec for prompt, vec in zip(prompts, text_mat)}

    bundle_path = Path(job.output)
    bundle_path.parent.mkdir(parents=True, exist_ok=True)
    write_bundle(bundle_path, encoder.dim, patches, bbox_vecs, texts)

    report_path = bundle_path.with_suffix(bundle_path.suffix + ".report.json")
    report = {
        "model": job.model,
        "dim": encoder.dim,
        "grids": list(job.grids),
        "prompt_template": job.prompt_template,
        "images_encoded": len(anno["images"]) - len(failures),
        "patches": len(patches),
        "bboxes": len(bbox_vecs),
        "texts": len(texts),
        "failures": failures,
        "complete": not failures,
    }
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ExtractResult(
        bundle_path=bundle_path,
        report_path=report_path,
        n_images=len(anno["images"]) - len(failures),
        n_patches=len(patches),
        n_bboxes=len(bbox_vecs),
        n_texts=len(texts),
        failures=failures,
    )
