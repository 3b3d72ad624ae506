"""Paired image/report records: loading, preprocessing, tokenization, synthesis."""

from __future__ import annotations

import json
import os
import string
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

PAD, UNK, MASK = "[PAD]", "[UNK]", "[MASK]"
PAD_ID, UNK_ID, MASK_ID = 0, 1, 2
SPECIAL_TOKENS = (PAD, UNK, MASK)


class ManifestError(ValueError):
    """A manifest line could not be parsed or its image could not be read."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DimensionError(ValueError):
    pass


@dataclass
class Record:
    image: np.ndarray  # (H, W, C) float in [0, 1]
    report: str
    id: str = ""

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.ndim != 3:
            raise DimensionError(f"record {self.id!r}: image must be 2-D (+channels), got shape {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ValueError(f"record {self.id!r}: pixel values outside [0, 1]")
        self.image = img

    def check_grid(self, patch_size: int) -> None:
        h, w = self.image.shape[:2]
        if h % (2 * patch_size) or w % (2 * patch_size):
            raise DimensionError(
                f"record {self.id!r}: image {h}x{w} not divisible by 2*patch_size={2 * patch_size}"
            )


@dataclass(frozen=True)
class PatchGrid:
    grid_rows: int
    grid_cols: int
    patch_size: int

    @property
    def target_patch_size(self) -> int:
        return 2 * self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @classmethod
    def for_low_res(cls, height: int, width: int, patch_size: int) -> "PatchGrid":
        if height % patch_size or width % patch_size:
            raise DimensionError(f"{height}x{width} not divisible by patch size {patch_size}")
        return cls(height // patch_size, width // patch_size, patch_size)


@dataclass
class Vocabulary:
    tokens: list[str]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.tokens = list(self.tokens)
        if tuple(self.tokens[:3]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}, got {self.tokens[:3]}")
        self._index = {}
        for i, tok in enumerate(self.tokens):
            if tok in self._index:
                raise ValueError(f"duplicate token {tok!r} at index {i}")
            self._index[tok] = i
        if len(self.tokens) < 4:
            raise ValueError("vocabulary needs at least one non-special token")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def unk_id(self) -> int:
        return UNK_ID

    @property
    def mask_id(self) -> int:
        return MASK_ID

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        seen = list(SPECIAL_TOKENS)
        for w in words:
            if w not in seen:
                seen.append(w)
        return cls(seen)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n").rstrip("\r") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")


# --------------------------------------------------------------------------
# images


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read a grayscale (or RGB) PNG and rescale by its bit depth to [0, 1]."""
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = arr.astype(np.float64) / 65535.0
    elif mode in ("L", "RGB", "P"):
        arr = arr.astype(np.float64) / 255.0
    elif mode == "1":
        arr = arr.astype(np.float64)
    else:
        raise ValueError(f"unsupported image mode {mode!r}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.clip(arr, 0.0, 1.0)


def write_image(path: str | os.PathLike, image: np.ndarray, bits: int = 8) -> None:
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if bits == 8:
        Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)
    elif bits == 16:
        Image.fromarray(np.round(np.clip(img, 0, 1) * 65535).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def load_manifest(path: str | os.PathLike) -> list[Record]:
    """Read a JSON-lines manifest of ``{"image": ..., "report": ...}`` entries.

    Image paths are resolved relative to the manifest's directory. Blank lines
    are skipped but still count toward line numbers in error messages.
    """
    path = Path(path)
    root = path.parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON ({exc.msg})", lineno) from exc
            if not isinstance(entry, dict) or not isinstance(entry.get("image"), str) \
                    or not isinstance(entry.get("report"), str):
                raise ManifestError('entry needs string keys "image" and "report"', lineno)
            img_path = root / entry["image"]
            if not img_path.is_file():
                raise ManifestError(f"image file not found: {img_path}", lineno)
            try:
                image = read_image(img_path)
            except Exception as exc:  # PIL raises a zoo of types
                raise ManifestError(f"cannot read image {img_path}: {exc}", lineno) from exc
            records.append(Record(image, entry["report"], str(entry.get("id", f"{path.stem}:{lineno}"))))
    return records


def downsample(image: np.ndarray) -> np.ndarray:
    """2x2 mean pooling. Accepts (H, W) or (H, W, C)."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    if h % 2 or w % 2:
        raise DimensionError(f"downsample needs even dimensions, got {h}x{w}")
    blocks = img.reshape(h // 2, 2, w // 2, 2, *img.shape[2:])
    return blocks.mean(axis=(1, 3))


def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """Split (H, W[, C]) into row-major non-overlapping patches of shape (N, p*p*C).

    Each patch vector is laid out (row, col, channel).
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    x = img.reshape(rows, p, cols, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(rows * cols, p * p * c)


def unpatchify(patches: np.ndarray, p: int, rows: int, cols: int, channels: int = 1) -> np.ndarray:
    patches = np.asarray(patches)
    if patches.shape != (rows * cols, p * p * channels):
        raise DimensionError(f"expected {(rows * cols, p * p * channels)} patches, got {patches.shape}")
    x = patches.reshape(rows, cols, p, p, channels).transpose(0, 2, 1, 3, 4)
    return x.reshape(rows * p, cols * p, channels)


# --------------------------------------------------------------------------
# text


def _is_punctuation(ch: str) -> bool:
    return ch in string.punctuation or unicodedata.category(ch).startswith("P")


def basic_split(text: str) -> list[str]:
    """Lowercase, split on whitespace, and split punctuation into separate words."""
    words = []
    for chunk in text.lower().split():
        cur = []
        for ch in chunk:
            if _is_punctuation(ch):
                if cur:
                    words.append("".join(cur))
                    cur = []
                words.append(ch)
            else:
                cur.append(ch)
        if cur:
            words.append("".join(cur))
    return words


def wordpiece(word: str, vocab: Vocabulary, max_chars: int = 100) -> list[int]:
    """Greedy longest-match-first segmentation of a single word."""
    if len(word) > max_chars:
        return [UNK_ID]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            sub = word[start:end]
            if start > 0:
                sub = "##" + sub
            if sub in vocab:
                match = sub
                break
            end -= 1
        if match is None:
            return [UNK_ID]
        pieces.append(vocab.id(match))
        start = end
    return pieces


def tokenize(report: str, vocab: Vocabulary) -> list[int]:
    ids: list[int] = []
    for word in basic_split(report):
        ids.extend(wordpiece(word, vocab))
    return ids


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    out: list[str] = []
    for i in ids:
        tok = vocab.tokens[int(i)]
        if tok.startswith("##") and out:
            out[-1] += tok[2:]
        else:
            out.append(tok)
    return " ".join(out)


# --------------------------------------------------------------------------
# synthetic records

SHAPES = ("disc", "rectangle", "cross")
QUADRANTS = (("upper", "left"), ("upper", "right"), ("lower", "left"), ("lower", "right"))
SYNTH_WORDS = (
    "a", "in", "the", "quadrant", ".", "and", "no", "finding",
    *SHAPES, "upper", "lower", "left", "right", "bright", "faint",
)


def synth_vocabulary() -> Vocabulary:
    return Vocabulary.from_words(SYNTH_WORDS)


def draw_shape(canvas: np.ndarray, shape: str, cy: float, cx: float, size: float, value: float) -> None:
    """Paint one shape in place on a 2-D canvas (max-composited)."""
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    if shape == "disc":
        region = (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
    elif shape == "rectangle":
        region = (np.abs(yy - cy) <= size * 0.45) & (np.abs(xx - cx) <= size)
    elif shape == "cross":
        arm = max(size * 0.3, 1.0)
        region = ((np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= size)) | \
                 ((np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= size))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    np.maximum(canvas, np.where(region, value, 0.0), out=canvas)


def _synth_one(rng: np.random.Generator, image_size: int, shapes: Sequence[str] | None = None):
    # smooth per-image background ramp, so even shape-free patches differ between images
    base = rng.uniform(0.1, 0.3)
    tilt_y, tilt_x = rng.uniform(-0.08, 0.08, size=2)
    ramp = (np.arange(image_size) + 0.5) / image_size - 0.5
    canvas = base + tilt_y * ramp[:, None] + tilt_x * ramp[None, :]
    n_shapes = len(shapes) if shapes is not None else int(rng.integers(1, 4))
    quads = rng.permutation(4)[:n_shapes]
    half = image_size / 2
    phrases = []
    kinds = []
    for j, q in enumerate(quads):
        kind = shapes[j] if shapes is not None else SHAPES[int(rng.integers(len(SHAPES)))]
        vert, horiz = QUADRANTS[q]
        size = rng.uniform(0.16, 0.24) * image_size
        # centre stays inside the quadrant so the report's quadrant is exact
        y0 = 0.0 if vert == "upper" else half
        x0 = 0.0 if horiz == "left" else half
        cy = rng.uniform(y0 + size, y0 + half - size)
        cx = rng.uniform(x0 + size, x0 + half - size)
        bright = bool(rng.integers(2))
        value = rng.uniform(0.85, 1.0) if bright else rng.uniform(0.45, 0.6)
        draw_shape(canvas, kind, cy, cx, size, value)
        phrases.append(f"a {'bright' if bright else 'faint'} {kind} in the {vert} {horiz} quadrant")
        kinds.append(kind)
    report = " and ".join(phrases) + " ."
    # soft point-spread, one pixel at 64x64
    canvas = gaussian_filter(canvas, sigma=image_size / 64, mode="nearest")
    return np.clip(canvas, 0.0, 1.0)[:, :, None], report, kinds


def synth_generate(n: int, seed: int, image_size: int = 64) -> tuple[list[Record], Vocabulary]:
    """Deterministic toy records: 1-3 shapes per image with a templated report.

    Each shape lands in a distinct quadrant and the report names every shape,
    its brightness and its quadrant, so report content is recoverable from the
    image.
    """
    if n <= 0:
        raise ValueError(f"n must be >= 1, got {n}")
    if image_size <= 0 or image_size % 4:
        raise DimensionError(f"image_size must be a positive multiple of 4, got {image_size}")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        img, report, _ = _synth_one(rng, image_size)
        records.append(Record(img, report, f"synth-{seed}-{i}"))
    return records, synth_vocabulary()


def synth_shape_classification(n: int, seed: int, image_size: int = 64,
                               classes: Sequence[str] = ("rectangle", "disc")):
    """Single-shape images labelled by shape kind; label 1 marks ``classes[1]``."""
    if n <= 0:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for _ in range(n):
        y = int(rng.integers(2))
        img, _, _ = _synth_one(rng, image_size, shapes=[classes[y]])
        images.append(img)
        labels.append(y)
    return np.stack(images), np.asarray(labels, dtype=np.int64)[:, None]
