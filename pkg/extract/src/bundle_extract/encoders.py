"""Frozen vision-language encoders behind one small interface.

``make_encoder`` understands two model families:

* ``clip-*`` — a pretrained CLIP checkpoint via ``transformers`` (needs the
  optional ``clip`` extra and downloaded weights);
* ``hash-<dim>`` — a deterministic stand-in that projects downsampled pixels
  (images) and hashed character trigrams (text) through a fixed random
  matrix seeded by the model name. No weights, exact reproducibility; used
  by the test suite and anywhere a real checkpoint is unavailable.

Both return unnormalized float32 vectors; normalization is the retrieval
engine's job.
"""

from __future__ import annotations

import zlib

import numpy as np
from PIL import Image

DEFAULT_MODEL = "clip-vit-base-patch32"

_HASH_IMAGE_SIDE = 32
_HASH_TEXT_BUCKETS = 4096


class EncoderUnavailableError(RuntimeError):
    """The requested encoder cannot run in this environment."""


class HashEncoder:
    """Deterministic pixel/text featurizer with CLIP-like interface."""

    def __init__(self, dim: int, model_name: str):
        self.dim = dim
        self.model_name = model_name
        rng = np.random.default_rng(zlib.crc32(model_name.encode("utf-8")))
        n_px = _HASH_IMAGE_SIDE * _HASH_IMAGE_SIDE * 3
        self._w_image = rng.standard_normal((n_px, dim)) / np.sqrt(n_px)
        self._w_text = rng.standard_normal((_HASH_TEXT_BUCKETS, dim)) / 8.0

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        out = np.empty((len(images), self.dim), dtype=np.float32)
        side = _HASH_IMAGE_SIDE
        for i, img in enumerate(images):
            small = img.convert("RGB").resize((side, side), Image.BILINEAR)
            px = np.asarray(small, dtype=np.float64).reshape(-1) / 255.0
            out[i] = np.tanh(px @ self._w_image).astype(np.float32)
        return out

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            counts = np.zeros(_HASH_TEXT_BUCKETS, dtype=np.float64)
            data = f"\x02{text}\x03"
            for j in range(len(data) - 2):
                bucket = zlib.crc32(data[j : j + 3].encode("utf-8")) % _HASH_TEXT_BUCKETS
                counts[bucket] += 1.0
            norm = np.linalg.norm(counts)
            if norm > 0:
                counts /= norm
            out[i] = np.tanh(counts @ self._w_text).astype(np.float32)
        return out


class ClipEncoder:
    """Pretrained CLIP checkpoint through transformers (lazy imports)."""

    def __init__(self, model_name: str, device: str = "cpu"):
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise EncoderUnavailableError(
                f"model {model_name!r} needs the 'clip' extra (torch + transformers)"
            ) from exc
        checkpoint = f"openai/{model_name}"
        try:
            self._model = CLIPModel.from_pretrained(checkpoint).to(device).eval()
            self._processor = CLIPProcessor.from_pretrained(checkpoint)
        except Exception as exc:  # weights absent or no network
            raise EncoderUnavailableError(
                f"could not load checkpoint {checkpoint!r}: {exc}"
            ) from exc
        self._device = device
        self.dim = int(self._model.config.projection_dim)
        self.model_name = model_name

    def encode_images(self, images) -> np.ndarray:
        import torch

        inputs = self._processor(images=images, return_tensors="pt").to(self._device)
        with torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        return feats.cpu().numpy().astype(np.float32)

    def encode_texts(self, texts) -> np.ndarray:
        import torch

        inputs = self._processor(
            text=texts, return_tensors="pt", padding=True, truncation=True
        ).to(self._device)
        with torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        return feats.cpu().numpy().astype(np.float32)


def make_encoder(model_name: str = DEFAULT_MODEL, device: str = "cpu"):
    if model_name.startswith("hash-"):
        try:
            dim = int(model_name.split("-", 1)[1])
        except ValueError as exc:
            raise EncoderUnavailableError(
                f"hash encoder name must look like 'hash-64', got {model_name!r}"
            ) from exc
        if dim < 8:
            raise EncoderUnavailableError("hash encoder dimension must be >= 8")
        return HashEncoder(dim, model_name)
    if model_name.startswith("clip-"):
        return ClipEncoder(model_name, device)
    raise EncoderUnavailableError(f"unknown model {model_name!r}")
