"""Procedural image-caption data: colored shapes on a noisy background.

Sample ``index`` under ``seed`` is drawn from the counter-based stream
``key = stream_key(seed, 3, index)``:

* draw 0: class id ``below(key, 0, 16)``; shape = id // 4, color = id % 4
* draws 1-3: center x, center y, size (uniform, mapped to fixed ranges)
* draws 16..: background noise, one uniform per pixel channel, row-major

Captions read ``"a photo of a {color} {shape}"`` (6 words).  Images and
manifests go to disk as PNG + JSON Lines.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np

from . import rng
from .masking import truncate_text

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
N_CLASSES = len(SHAPES) * len(COLORS)
PAD, UNK = "<pad>", "<unk>"
MIN_RESOLUTION = 16

_RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
}
_NOISE_START = 16
_NOISE_LEVEL = 0.3


class DataError(ValueError):
    pass


@dataclass
class SyntheticSample:
    image: np.ndarray
    caption: str
    class_id: int


def class_name(class_id: int) -> str:
    """``"{color} {shape}"`` for a class id."""
    return f"{COLORS[class_id % 4]} {SHAPES[class_id // 4]}"


def caption_for(class_id: int) -> str:
    return f"a photo of a {class_name(class_id)}"


def class_names() -> list[str]:
    return [class_name(i) for i in range(N_CLASSES)]


def _shape_mask(shape: str, res: int, cx: float, cy: float, s: float) -> np.ndarray:
    c = (np.arange(res) + 0.5) / res
    u, v = np.meshgrid(c, c)
    du, dv = u - cx, v - cy
    if shape == "circle":
        return du * du + dv * dv <= s * s
    if shape == "square":
        h = 0.85 * s
        return (np.abs(du) <= h) & (np.abs(dv) <= h)
    if shape == "triangle":
        t = (dv + s) / (2 * s)  # 0 at apex, 1 at base
        return (t >= 0) & (t <= 1) & (np.abs(du) <= s * t)
    arm = s / 3
    return ((np.abs(du) <= arm) & (np.abs(dv) <= s)) | ((np.abs(dv) <= arm) & (np.abs(du) <= s))


def gen_sample(global_seed: int, index: int, resolution: int) -> SyntheticSample:
    if resolution < MIN_RESOLUTION:
        raise DataError(f"resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    key = rng.stream_key(global_seed, rng.TAG_SYNTH_DATA, index)
    cid = rng.below(key, 0, N_CLASSES)
    size = 0.22 + 0.12 * rng.uniform(key, 3)
    margin = size + 0.04
    cx = margin + (1 - 2 * margin) * rng.uniform(key, 1)
    cy = margin + (1 - 2 * margin) * rng.uniform(key, 2)
    noise = rng.uniform_array(key, _NOISE_START, resolution * resolution * 3)
    img = (_NOISE_LEVEL * noise).reshape(resolution, resolution, 3)
    mask = _shape_mask(SHAPES[cid // 4], resolution, cx, cy, size)
    img[mask] = _RGB[COLORS[cid % 4]]
    return SyntheticSample(img, caption_for(cid), cid)


def image_hash(image: np.ndarray) -> str:
    """SHA-256 of the image quantized to 8-bit, row-major RGB."""
    return hashlib.sha256(to_uint8(image).tobytes()).hexdigest()


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255 + 0.5), 0, 255).astype(np.uint8)


def resize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbor resize of ``[H, W, C]``; output pixel ``i`` reads ``floor(i * H / size)``."""
    h, w = image.shape[:2]
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return image[rows][:, cols]


class SyntheticSource:
    """Cycles through ``size`` procedural samples starting at ``offset``.

    Called with a resolution, yields ``(image, caption)`` forever; rendered
    images are cached per (index, resolution).
    """

    def __init__(self, seed: int = 0, size: int = 2048, offset: int = 0):
        if size < 1:
            raise DataError("size must be >= 1")
        self.seed, self.size, self.offset = seed, size, offset
        self._render = lru_cache(maxsize=None)(self._render_uncached)

    def _render_uncached(self, index: int, resolution: int) -> SyntheticSample:
        return gen_sample(self.seed, self.offset + index, resolution)

    def sample(self, i: int, resolution: int) -> SyntheticSample:
        return self._render(i % self.size, resolution)

    def __call__(self, resolution: int) -> Iterator[tuple[np.ndarray, str]]:
        i = 0
        while True:
            s = self.sample(i, resolution)
            yield s.image, s.caption
            i += 1

    def labeled(self, resolution: int, count: int | None = None) -> list[SyntheticSample]:
        return [self.sample(i, resolution) for i in range(count or self.size)]


# -- tokenizer --------------------------------------------------------------------

def toy_vocab() -> dict[str, int]:
    words = [PAD, UNK, "a", "photo", "of", *COLORS, *SHAPES]
    return {w: i for i, w in enumerate(words)}


def load_vocab(path) -> dict[str, int]:
    """One token per line; line number is the id."""
    words = [w.strip() for w in Path(path).read_text().splitlines() if w.strip()]
    vocab = {w: i for i, w in enumerate(words)}
    if PAD not in vocab or UNK not in vocab:
        raise DataError(f"vocab must contain {PAD} and {UNK}")
    return vocab


def save_vocab(vocab: dict[str, int], path) -> None:
    words = sorted(vocab, key=vocab.get)
    Path(path).write_text("\n".join(words) + "\n")


def word_tokenizer(caption: str, vocab: dict[str, int]) -> list[int]:
    unk = vocab[UNK]
    return [vocab.get(w, unk) for w in caption.lower().split()]


def tokenize_batch(captions, vocab: dict[str, int], text_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Token ids ``[B, text_len]`` and real-token mask for a list of captions."""
    rows = [truncate_text(word_tokenizer(c, vocab), text_len, vocab[PAD]) for c in captions]
    ids = np.array([r[0] for r in rows], dtype=np.int64).reshape(len(rows), text_len)
    real = np.array([r[1] for r in rows], dtype=bool).reshape(len(rows), text_len)
    return ids, real


def detokenize(ids, vocab: dict[str, int]) -> str:
    inv = {i: w for w, i in vocab.items()}
    return " ".join(inv[i] for i in ids if inv[i] != PAD)


# -- on-disk datasets -------------------------------------------------------------------

@dataclass
class ManifestEntry:
    image: str
    caption: str
    class_id: int | None = None
    split: str | None = None


def write_dataset(out_dir, seed: int, count: int, resolution: int, split: str = "train",
                  offset: int = 0) -> Path:
    """Render ``count`` samples to PNG files and write ``manifest.jsonl``."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i in range(count):
            s = gen_sample(seed, offset + i, resolution)
            name = f"images/{split}_{offset + i:07d}.png"
            Image.fromarray(to_uint8(s.image)).save(out / name)
            fh.write(json.dumps({"image": name, "caption": s.caption,
                                 "class_id": s.class_id, "split": split}) + "\n")
    return manifest


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append(ManifestEntry(rec["image"], rec["caption"], rec.get("class_id"),
                                             rec.get("split")))
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
    return entries


def ingest_folder(manifest_path, resolution: int | None = None, labeled: bool = False,
                  fail_fast: bool = True, split: str | None = None) -> Iterator:
    """Yield ``(image, caption)`` (or ``(image, caption, class_id)`` when
    ``labeled``) in manifest order, nearest-resized to ``resolution``.

    Paths are relative to the manifest's folder.  Unreadable files raise
    unless ``fail_fast`` is off, in which case they are skipped with a warning.
    """
    from PIL import Image

    root = Path(manifest_path).parent
    for e in read_manifest(manifest_path):
        if split is not None and e.split != split:
            continue
        try:
            with Image.open(root / e.image) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except (OSError, ValueError) as exc:
            if fail_fast:
                raise DataError(f"cannot read {e.image}: {exc}") from exc
            log.warning("skipping %s: %s", e.image, exc)
            continue
        if resolution is not None and img.shape[0] != resolution:
            img = resize_nearest(img, resolution)
        yield (img, e.caption, e.class_id) if labeled else (img, e.caption)


class ManifestSource:
    """Training stream over an on-disk dataset, cycling in manifest order."""

    def __init__(self, manifest_path, split: str | None = None):
        self.manifest_path = manifest_path
        self.split = split
        self._cache: dict[int, list] = {}

    def items(self, resolution: int) -> list:
        if resolution not in self._cache:
            self._cache[resolution] = list(
                ingest_folder(self.manifest_path, resolution, labeled=True, split=self.split))
        return self._cache[resolution]

    def __call__(self, resolution: int):
        items = self.items(resolution)
        if not items:
            raise DataError(f"{self.manifest_path} has no samples")
        i = 0
        while True:
            img, cap, _ = items[i % len(items)]
            yield img, cap
            i += 1

    def labeled(self, resolution: int, count: int | None = None) -> list[SyntheticSample]:
        items = self.items(resolution)[:count]
        return [SyntheticSample(img, cap, cid) for img, cap, cid in items]
