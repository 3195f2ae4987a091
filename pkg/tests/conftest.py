import numpy as np
import pytest

from instructmine.dataset import AnnotatedDataset, BBox, ClassDef, EmbeddingBundle, ImageRecord
from instructmine.index import PatchKey, build_index


def brute_force_ap(ids, positives, k):
    """Independent AP oracle: recounts precision at every rank from scratch."""
    ids = list(ids)[:k]
    numerator = 0.0
    for r in range(1, len(ids) + 1):
        if ids[r - 1] not in positives:
            continue
        hits_so_far = 0
        for j in range(r):
            if ids[j] in positives:
                hits_so_far += 1
        numerator += hits_so_far / r
    return numerator / min(len(positives), k)


def two_mode_instance():
    """Hand-built 12-image world with one dominant and one complementary pair.

    Class content splits into two orthogonal modes (5 images at e1, 3 at e2);
    4 negatives sit exactly between the modes, so a single query cannot
    separate everything but the right two-pair set can.
    """
    d = 8
    e1, e2, e3 = np.eye(d)[0], np.eye(d)[1], np.eye(d)[2]
    mid = (e1 + e2) / np.linalg.norm(e1 + e2)
    mix = 0.9 * e1 + 0.45 * e2
    mix = mix / np.linalg.norm(mix)

    content = {}
    for i in range(5):
        content[f"imgA{i}"] = e1
    for i in range(3):
        content[f"imgZ{i}"] = e2
    for i in range(4):
        content[f"imgM{i}"] = mid

    images = {img: ImageRecord(img, 100, 100) for img in content}
    # class-c bboxes live on the positive images; crop content varies per box
    crop_content = {
        "bb_a1": ("imgA0", e1),
        "bb_a2": ("imgA1", mix),
        "bb_b1": ("imgZ0", e2),
        "bb_b2": ("imgZ1", e3),
    }
    bboxes = {
        bid: BBox(bid, img, "c", 0, 0, 10, 10) for bid, (img, _) in crop_content.items()
    }
    classes = {"c": ClassDef("c", "alpha", ("alpha", "beta", "gamma"))}
    ds = AnnotatedDataset(images, bboxes, classes)

    patches = {PatchKey(img, 1, 0, 0): vec.astype(np.float32) for img, vec in content.items()}
    texts = {
        "a photo of alpha": e1.astype(np.float32),
        "a photo of beta": e2.astype(np.float32),
        "a photo of gamma": e3.astype(np.float32),
    }
    bundle = EmbeddingBundle(
        dim=d,
        patches=patches,
        bboxes={bid: vec.astype(np.float32) for bid, (_, vec) in crop_content.items()},
        texts=texts,
    )
    index = build_index(list(bundle.patch_records()), num_clusters=3, seed=0)
    positives = {img for img in content if img.startswith(("imgA", "imgZ"))}
    return ds, bundle, index, positives
