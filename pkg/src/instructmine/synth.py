"""Synthetic annotated world with known geometry for desk-scale evaluation.

The generator samples orthonormal class centers and builds every artifact the
real pipeline consumes: an annotated dataset, a full embedding bundle (165
grid patches per image, one crop per bbox, one text vector per prompt), and
the ground-truth centers.

The world is built so that the qualitative method ordering seen on real data
has a causal counterpart here:

* Object content sits near its class center, with correlated "submode"
  (subtype) offsets per image, so one centroid query is not automatically
  optimal and multi-pair coverage pays off.
* A fraction of background patches are "confusers" leaning toward another
  class's center, keeping retrieval off the AP = 1 ceiling.
* The canonical class word maps exactly to the class center, but synonym
  words are polysemous: their embeddings also point at a decoy direction,
  and decoy content is planted in a seeded fraction of other images. A
  query set that blindly includes every word retrieves those decoys; a
  selection procedure that scores words on retrieval performance learns to
  avoid or exploit them.

Noise and submode offsets scale with ``noise_sigma``: at zero noise every
object patch and the canonical text vector equal the class center exactly
and classes are perfectly separable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import (
    DEFAULT_PROMPT_TEMPLATE,
    AnnotatedDataset,
    BBox,
    ClassDef,
    EmbeddingBundle,
    ImageRecord,
    grid_patch_keys,
)
from .errors import InvalidConfigError
from .index import PatchKey


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 4
    images_per_class: int = 50
    dim: int = 64
    noise_sigma: float = 0.1
    seed: int = 0
    words_per_class: int = 4
    submodes_per_class: int = 3
    submode_scale: float = 1.6        # submode offset norm, in units of noise_sigma * sqrt(dim)
    text_jitter: float | None = None  # synonym jitter sigma; default 0.3 * noise_sigma
    bbox_noise: float | None = None   # on-target crop noise sigma; default 10 * noise_sigma
    distractor_strength: float = 0.52  # ceiling alignment of confuser patches to a center
    confuser_fraction: float = 0.3     # P(an image carries a confuser for a given class)
    polysemy: float | None = None      # decoy weight inside synonym embeddings; default 11 * noise_sigma
    decoy_rate: float = 0.06           # P(a non-class image hosts a decoy patch per synonym)
    decoy_strength: float = 0.6        # score ceiling of decoy patches under their synonym
    junk_dirs: int = 8                 # shared background-content directions
    junk_bg_rate: float = 0.15         # fraction of background patches leaning on junk
    crop_offtarget: float = 0.35       # P(a bbox crop captures junk instead of the object)
    crop_junk_strength: float = 0.62   # junk alignment of off-target crops
    text_ambiguity: float = 0.0        # blend of the next class's center into text vectors
    image_width: int = 640
    image_height: int = 480
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE

    @property
    def resolved_text_jitter(self) -> float:
        return 0.3 * self.noise_sigma if self.text_jitter is None else self.text_jitter

    @property
    def resolved_bbox_noise(self) -> float:
        return 10.0 * self.noise_sigma if self.bbox_noise is None else self.bbox_noise

    @property
    def resolved_polysemy(self) -> float:
        return 11.0 * self.noise_sigma if self.polysemy is None else self.polysemy

    def validate(self) -> None:
        if self.n_classes < 2:
            raise InvalidConfigError("n_classes must be >= 2")
        if self.dim < 8:
            raise InvalidConfigError("dim must be >= 8")
        if self.n_classes > self.dim:
            raise InvalidConfigError("need dim >= n_classes for orthonormal centers")
        if self.images_per_class < 1:
            raise InvalidConfigError("images_per_class must be >= 1")
        if self.words_per_class < 1 or self.submodes_per_class < 1:
            raise InvalidConfigError("words/submodes per class must be >= 1")
        for name in ("noise_sigma", "resolved_text_jitter", "resolved_bbox_noise", "resolved_polysemy"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{name} must be non-negative")
        for name in ("distractor_strength", "decoy_strength"):
            if not (0.0 <= getattr(self, name) < 1.0):
                raise InvalidConfigError(f"{name} must be in [0, 1)")
        for name in ("confuser_fraction", "decoy_rate", "junk_bg_rate", "crop_offtarget"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise InvalidConfigError(f"{name} must be in [0, 1]")
        if not (0.0 <= self.crop_junk_strength < 1.0):
            raise InvalidConfigError("crop_junk_strength must be in [0, 1)")
        if self.junk_dirs < 1:
            raise InvalidConfigError("junk_dirs must be >= 1")
        if not (0.0 <= self.text_ambiguity < 1.0):
            raise InvalidConfigError("text_ambiguity must be in [0, 1)")


def mode_b_config(**overrides) -> SynthConfig:
    """Preset where text is ambiguous but crops are clean.

    Text vectors lean strongly toward the next class while bbox crops carry
    almost no extra noise, so visual-only queries beat text-only ones.
    """
    base = dict(text_ambiguity=0.5, bbox_noise=0.03, text_jitter=0.05)
    base.update(overrides)
    return SynthConfig(**base)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _orthogonal_noise(noise_row: np.ndarray, query_basis: np.ndarray) -> np.ndarray:
    """Unit noise projected off the span of every query direction.

    Planted patches use this so that random cross-terms cannot smear their
    intended alignment bands under whichever query happens to align with the
    noise.
    """
    n = noise_row - query_basis.T @ (query_basis @ noise_row)
    return n / np.linalg.norm(n)


def _lean_patch(
    direction: np.ndarray, rho: float, noise_row: np.ndarray, query_basis: np.ndarray
) -> np.ndarray:
    """Unit vector with alignment exactly rho to ``direction``."""
    n = _orthogonal_noise(noise_row, query_basis)
    return rho * direction + np.sqrt(1.0 - rho**2) * n


def _decoy_patch(
    word_vec: np.ndarray,
    decoy_dir: np.ndarray,
    score: float,
    noise_row: np.ndarray,
    query_basis: np.ndarray,
) -> np.ndarray:
    """Unit patch scoring exactly ``score`` under its synonym's query.

    The remainder mixes the decoy direction's residual with orthogonal noise,
    so the patch reads as decoy content rather than scaled query text.
    """
    w = word_vec / np.linalg.norm(word_vec)
    d_res = decoy_dir - float(decoy_dir @ w) * w
    d_res /= np.linalg.norm(d_res)
    mix = d_res + _orthogonal_noise(noise_row, query_basis)
    mix -= float(mix @ w) * w
    mix /= np.linalg.norm(mix)
    return score * w + np.sqrt(1.0 - score**2) * mix


def synth_generate(
    config: SynthConfig,
) -> tuple[AnnotatedDataset, EmbeddingBundle, dict[str, np.ndarray]]:
    """Generate (dataset, bundle, ground-truth centers), deterministic per seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    c, d = config.n_classes, config.dim

    # orthonormal class centers from a QR factorization of a Gaussian matrix
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    centers = np.ascontiguousarray(q.T[:c])

    # submode offsets are orthogonal to their class center with a fixed norm,
    # so every class has the same object-to-center alignment band
    submodes = rng.standard_normal((c, config.submodes_per_class, d))
    for ci in range(c):
        submodes[ci] -= np.outer(submodes[ci] @ centers[ci], centers[ci])
    submodes /= np.linalg.norm(submodes, axis=2, keepdims=True)
    submode_offsets = (
        config.submode_scale * config.noise_sigma * np.sqrt(d) * submodes
    )

    class_ids = [f"c{ci:02d}" for ci in range(c)]
    classes: dict[str, ClassDef] = {}
    texts: dict[str, np.ndarray] = {}
    # one decoy direction per synonym word (index j >= 1): the "other sense"
    # of a polysemous word
    decoy_dirs = rng.standard_normal((c, config.words_per_class, d))
    decoy_dirs /= np.linalg.norm(decoy_dirs, axis=2, keepdims=True)
    word_vecs: dict[tuple[int, int], np.ndarray] = {}
    for ci, cid in enumerate(class_ids):
        name = f"class{ci:02d}"
        words = [name] + [f"{name} alt{j}" for j in range(1, config.words_per_class)]
        classes[cid] = ClassDef(cid, name, tuple(words))
        if config.text_ambiguity > 0.0:
            blend = (1.0 - config.text_ambiguity) * centers[ci]
            blend = blend + config.text_ambiguity * centers[(ci + 1) % c]
            base = blend / np.linalg.norm(blend)
        else:
            base = centers[ci]
        for j, word in enumerate(words):
            vec = base.copy()
            if j > 0:
                vec = vec + config.resolved_polysemy * decoy_dirs[ci, j]
                vec = vec + config.resolved_text_jitter * rng.standard_normal(d)
                vec = vec / np.linalg.norm(vec)
            word_vecs[(ci, j)] = vec.copy()
            texts[config.prompt_template.format(word)] = vec.astype(np.float32)

    # shared background-content directions; off-target crops point at one of
    # these, and so do some background patches, so a bad crop query retrieves
    # wrong images confidently instead of retrieving nothing
    junk = rng.standard_normal((config.junk_dirs, d))
    junk /= np.linalg.norm(junk, axis=1, keepdims=True)

    # orthonormal basis of every query/content direction in this world;
    # planted patches keep their noise orthogonal to it (see _lean_patch)
    stack = np.concatenate(
        [centers, decoy_dirs.reshape(-1, d), junk]
        + [v[None, :] for v in word_vecs.values()]
    )
    _, s_svd, vt_svd = np.linalg.svd(stack, full_matrices=False)
    query_basis = vt_svd[s_svd > 1e-10]

    images: dict[str, ImageRecord] = {}
    bboxes: dict[str, BBox] = {}
    patch_embeddings: dict[PatchKey, np.ndarray] = {}
    bbox_embeddings: dict[str, np.ndarray] = {}

    n_images = c * config.images_per_class
    w_img, h_img = config.image_width, config.image_height
    for i in range(n_images):
        ci = i // config.images_per_class
        submode = (i % config.images_per_class) % config.submodes_per_class
        image_id = f"img_{i:04d}"
        bbox_id = f"bb_{i:05d}"
        images[image_id] = ImageRecord(image_id, w_img, h_img)

        bw = int(rng.integers(80, 281))
        bh = int(rng.integers(80, 281))
        bx = int(rng.integers(0, w_img - bw + 1))
        by = int(rng.integers(0, h_img - bh + 1))
        bboxes[bbox_id] = BBox(bbox_id, image_id, class_ids[ci], bx, by, bw, bh)

        signal = centers[ci] + submode_offsets[ci, submode]
        if rng.uniform() < config.crop_offtarget:
            # the box content is dominated by background junk, not the object
            junk_dir = junk[int(rng.integers(config.junk_dirs))]
            strength = config.crop_junk_strength * rng.uniform(0.9, 1.0)
            crop = _lean_patch(junk_dir, strength, rng.standard_normal(d), query_basis)
        else:
            crop = signal + config.resolved_bbox_noise * rng.standard_normal(d)
            crop = crop / np.linalg.norm(crop)
        bbox_embeddings[bbox_id] = crop.astype(np.float32)

        keys = grid_patch_keys(image_id)
        noise = rng.standard_normal((len(keys), d))
        vecs = _unit_rows(noise)

        # junk background content, retrievable by off-target crop queries
        junk_roll = rng.uniform(size=len(keys))
        junk_pick = rng.integers(config.junk_dirs, size=len(keys))
        junk_rho = rng.uniform(0.6, 0.95, size=len(keys))
        for pos in np.flatnonzero(junk_roll < config.junk_bg_rate):
            vecs[pos] = _lean_patch(
                junk[junk_pick[pos]], float(junk_rho[pos]), vecs[pos], query_basis
            )

        # planted patches get distinct background slots so that confuser and
        # decoy content never stacks inside one patch
        slot_perm = list(rng.permutation(np.arange(1, len(keys))))

        # image-level confusers: with probability confuser_fraction per other
        # class, one background patch leans strongly toward that class center,
        # so every test fold reliably contains near-center distractor images
        conf_roll = rng.uniform(size=c)
        conf_rho = config.distractor_strength * rng.uniform(0.9, 1.0, size=c)
        for other in range(c):
            if other == ci or conf_roll[other] >= config.confuser_fraction:
                continue
            slot = int(slot_perm.pop())
            vecs[slot] = _lean_patch(centers[other], conf_rho[other], vecs[slot], query_basis)

        # decoy content: the other sense of a polysemous synonym, planted in
        # a fraction of images outside that synonym's class; the patch is
        # built to score exactly decoy_s under that synonym's own query
        decoy_roll = rng.uniform(size=(c, config.words_per_class))
        decoy_s = config.decoy_strength * rng.uniform(0.95, 1.0, size=(c, config.words_per_class))
        for other in range(c):
            if other == ci:
                continue
            for j in range(1, config.words_per_class):
                if decoy_roll[other, j] >= config.decoy_rate:
                    continue
                slot = int(slot_perm.pop())
                vecs[slot] = _decoy_patch(
                    word_vecs[(other, j)],
                    decoy_dirs[other, j],
                    decoy_s[other, j],
                    vecs[slot],
                    query_basis,
                )

        cx, cy = bx + bw / 2.0, by + bh / 2.0
        for pos, key in enumerate(keys):
            if _is_object_cell(key, cx, cy, w_img, h_img):
                vecs[pos] = signal + config.noise_sigma * noise[pos]
        vecs = _unit_rows(vecs)
        for pos, key in enumerate(keys):
            patch_embeddings[key] = vecs[pos].astype(np.float32)

    ds = AnnotatedDataset(images=images, bboxes=bboxes, classes=classes)
    bundle = EmbeddingBundle(
        dim=d, patches=patch_embeddings, bboxes=bbox_embeddings, texts=texts
    )
    ground_truth = {cid: centers[ci].copy() for ci, cid in enumerate(class_ids)}
    return ds, bundle, ground_truth


def _is_object_cell(key: PatchKey, cx: float, cy: float, w_img: int, h_img: int) -> bool:
    """True for the one cell per grid size that contains the bbox center."""
    g = key.grid_size
    row = min(g - 1, int(cy / h_img * g))
    col = min(g - 1, int(cx / w_img * g))
    return key.cell_row == row and key.cell_col == col
