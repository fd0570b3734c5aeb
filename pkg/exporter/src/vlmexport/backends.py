"""Encoder and description-generator backends.

Every backend exposes the same small surface: a dense feature map for an
image, a batch text embedder, an optional per-image describer, and a
fingerprint string recorded in manifests so the engine can verify that
reference and test files came from the same encoders.

``HashProjBackend`` is fully deterministic and dependency-free: image
features are local color/gradient statistics pushed through a seeded random
projection, text is embedded with a signed character-trigram hashing trick.
It exists so pipelines and tests run without model weights; swap in the
transformers-backed backends for real runs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

# Prompt handed to the description generator (recorded in the manifest).
DESCRIBE_PROMPT = (
    "Describe this image in detail. Mention all visible objects, their "
    "parts, contexts, and characteristics like size, color, and texture. "
    "Also, describe the background/foreground context, including any "
    "natural scene or man-made structures, such as wall, ceiling, sky, and "
    "cloud. FOCUS ONLY on visible objects or contexts. Avoid speculation "
    "or guesses."
)


class BackendError(Exception):
    """A model invocation failed for one input."""


def _seed_from(tag: str) -> np.random.Generator:
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))


@dataclass
class HashProjBackend:
    """Deterministic offline backend (fixture-quality features)."""

    feature_dim: int = 32
    text_dim: int = 32
    grid: int = 7
    seed_tag: str = "hashproj:v1"

    @property
    def visual_fingerprint(self) -> str:
        return f"{self.seed_tag}:vis:d={self.feature_dim}:g={self.grid}"

    @property
    def text_fingerprint(self) -> str:
        return f"{self.seed_tag}:txt:d={self.text_dim}"

    @property
    def describer_fingerprint(self) -> str:
        return f"{self.seed_tag}:describe"

    def _projection(self) -> np.ndarray:
        rng = _seed_from(self.visual_fingerprint)
        return rng.normal(size=(6, self.feature_dim)) / math.sqrt(6)

    def feature_map(self, image: np.ndarray) -> np.ndarray:
        """(grid, grid, feature_dim) float32 from block color/gradient stats."""
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        img = img / 255.0
        h, w = img.shape[:2]
        gy, gx = np.gradient(img.mean(axis=2))
        grad = np.sqrt(gy**2 + gx**2)
        raw = np.zeros((self.grid, self.grid, 6))
        ys = np.linspace(0, h, self.grid + 1).astype(int)
        xs = np.linspace(0, w, self.grid + 1).astype(int)
        for p in range(self.grid):
            for q in range(self.grid):
                y0, y1 = ys[p], max(ys[p] + 1, ys[p + 1])
                x0, x1 = xs[q], max(xs[q] + 1, xs[q + 1])
                block = img[min(y0, h - 1) : min(y1, h), min(x0, w - 1) : min(x1, w)]
                gblock = grad[min(y0, h - 1) : min(y1, h), min(x0, w - 1) : min(x1, w)]
                raw[p, q, :3] = block.reshape(-1, 3).mean(axis=0)
                raw[p, q, 3] = block.std()
                raw[p, q, 4] = gblock.mean()
                raw[p, q, 5] = (p + q) / (2.0 * self.grid)
        feat = raw @ self._projection()
        return feat.astype(np.float32)

    def embed_text(self, strings: list[str]) -> np.ndarray:
        """Signed trigram-hash embeddings, L2-normalized, (n, text_dim)."""
        out = np.zeros((len(strings), self.text_dim), dtype=np.float64)
        for i, text in enumerate(strings):
            padded = f"  {text.lower()} "
            for t in range(len(padded) - 2):
                gram = padded[t : t + 3].encode("utf-8")
                digest = hashlib.blake2b(gram, digest_size=8, key=b"vlmexport").digest()
                value = int.from_bytes(digest, "little")
                bucket = value % self.text_dim
                sign = 1.0 if (value >> 32) & 1 else -1.0
                out[i, bucket] += sign
            norm = np.linalg.norm(out[i])
            if norm <= 1e-12:
                raise BackendError(f"text embeds to a zero vector: {text!r}")
            out[i] /= norm
        return out.astype(np.float32)

    def describe(self, image: np.ndarray, image_id: str) -> str:
        img = np.asarray(image, dtype=np.float64)
        tone = "bright" if img.mean() > 127 else "dark"
        h, w = img.shape[:2]
        return (
            f"the image shows a {tone} scene of {w} by {h} pixels with "
            f"varied regions and textures."
        )


class ClipBackend:
    """CLIP-based visual/text encoder via transformers (loaded lazily).

    Needs downloadable weights; raises BackendError with the underlying
    cause when the model stack is unavailable.
    """

    def __init__(self, model_name: str = "openai/clip-vit-base-patch16"):
        self.model_name = model_name
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor
        except Exception as exc:  # pragma: no cover - environment-dependent
            raise BackendError(f"transformers/torch unavailable: {exc}") from exc
        try:
            self._model = CLIPModel.from_pretrained(model_name)
            self._processor = CLIPProcessor.from_pretrained(model_name)
        except Exception as exc:  # pragma: no cover - needs model weights
            raise BackendError(f"cannot load {model_name}: {exc}") from exc
        self._model.eval()

    @property
    def visual_fingerprint(self) -> str:
        return f"clip:{self.model_name}:vision"

    @property
    def text_fingerprint(self) -> str:
        return f"clip:{self.model_name}:text"

    def feature_map(self, image: np.ndarray) -> np.ndarray:  # pragma: no cover
        import torch

        inputs = self._processor(images=image, return_tensors="pt")
        with torch.no_grad():
            out = self._model.vision_model(**inputs)
        tokens = out.last_hidden_state[0, 1:, :]  # drop CLS
        side = int(math.sqrt(tokens.shape[0]))
        return tokens.reshape(side, side, -1).numpy().astype(np.float32)

    def embed_text(self, strings: list[str]) -> np.ndarray:  # pragma: no cover
        import torch

        inputs = self._processor(text=strings, return_tensors="pt", padding=True)
        with torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        feats = feats / feats.norm(dim=-1, keepdim=True)
        return feats.numpy().astype(np.float32)


def make_backend(name: str, feature_dim: int = 32, text_dim: int = 32, grid: int = 7):
    if name == "hashproj":
        return HashProjBackend(feature_dim=feature_dim, text_dim=text_dim, grid=grid)
    if name.startswith("clip"):
        _, _, model = name.partition(":")
        return ClipBackend(model or "openai/clip-vit-base-patch16")
    raise BackendError(f"unknown backend {name!r}")
