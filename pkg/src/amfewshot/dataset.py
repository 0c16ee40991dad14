"""Corpus ingestion and preprocessing.

Raw images of any size and 1 or 3 channels become normalized 3x32x32
float arrays. The on-disk layout is configurable through a path pattern
(default ``{char}/{instance}.png`` under the corpus root).
"""

import hashlib
import json
import re
from dataclasses import dataclass, field
from glob import glob
from pathlib import Path

import numpy as np
from PIL import Image

from .alphabet import SPLITS, AlphabetTable

IMAGE_SIZE = 32
IMAGES_PER_CHARACTER = 5

# channel statistics of the pretraining corpus used by the resnet trunk
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
# symmetric statistics for the from-scratch backbone
SCRATCH_MEAN = (0.5, 0.5, 0.5)
SCRATCH_STD = (0.5, 0.5, 0.5)

DEFAULT_PATH_PATTERN = "{char}/{instance}.png"

_INDEX_FORMAT_VERSION = 1

_PIL_RESAMPLE = {
    "bilinear": Image.Resampling.BILINEAR,
    "nearest": Image.Resampling.NEAREST,
    "bicubic": Image.Resampling.BICUBIC,
    "lanczos": Image.Resampling.LANCZOS,
}


class DatasetError(ValueError):
    """The image corpus is missing, malformed or inconsistent."""


@dataclass(frozen=True)
class PreprocessConfig:
    size: int = IMAGE_SIZE
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    interpolation: str = "bilinear"

    @staticmethod
    def for_backbone(descriptor: str) -> "PreprocessConfig":
        """Normalization matching a backbone's pretraining statistics."""
        if descriptor.startswith("resnet18"):
            return PreprocessConfig()
        return PreprocessConfig(mean=SCRATCH_MEAN, std=SCRATCH_STD)

    @staticmethod
    def identity() -> "PreprocessConfig":
        return PreprocessConfig(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))


def preprocess(raw, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Resize, replicate channels and normalize one raw image.

    `raw` may be a PIL image or an array of shape (H, W), (H, W, 1) or
    (H, W, 3), either uint8 in 0..255 or float in [0, 1]. The result is a
    float32 array of shape (3, size, size): intensities are scaled to
    [0, 1], single-channel input is replicated to 3 channels, and each
    channel is shifted/scaled by the configured mean/std.
    """
    if isinstance(raw, Image.Image):
        img = raw
    else:
        arr = np.asarray(raw)
        if arr.size == 0:
            raise DatasetError(f"zero-sized image (shape {arr.shape})")
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
            raise DatasetError(f"expected (H, W), (H, W, 1) or (H, W, 3) image, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            arr = np.clip(np.asarray(arr, dtype=np.float64) * 255.0, 0, 255).astype(np.uint8)
        img = Image.fromarray(arr)
    if img.width == 0 or img.height == 0:
        raise DatasetError(f"zero-sized image ({img.width}x{img.height})")
    img = img.convert("RGB")
    if img.size != (config.size, config.size):
        img = img.resize((config.size, config.size), _PIL_RESAMPLE[config.interpolation])
    pixels = np.asarray(img, dtype=np.float32) / 255.0  # (size, size, 3) in [0, 1]
    pixels = pixels.transpose(2, 0, 1)
    mean = np.asarray(config.mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(config.std, dtype=np.float32).reshape(3, 1, 1)
    return (pixels - mean) / std


@dataclass(frozen=True)
class GlyphImage:
    """One preprocessed glyph with its character / row / column labels."""

    pixels: np.ndarray  # (3, 32, 32) float32, normalized
    char_label: int
    row_label: int
    col_label: int
    instance_id: int
    split: str
    source_path: str | None = None

    def content_key(self) -> str:
        return hashlib.sha1(self.pixels.tobytes()).hexdigest()


class DatasetIndex:
    """Preprocessed corpus indexed by split and character.

    Immutable after construction; safe to share between threads.
    """

    def __init__(self, table: AlphabetTable, images):
        self.table = table
        by_char: dict[int, list[GlyphImage]] = {}
        for g in images:
            by_char.setdefault(g.char_label, []).append(g)
        self._by_char = {
            c: tuple(sorted(gs, key=lambda g: g.instance_id)) for c, gs in sorted(by_char.items())
        }

    def __len__(self):
        return sum(len(gs) for gs in self._by_char.values())

    @property
    def char_labels(self) -> tuple:
        return tuple(self._by_char)

    def images_of(self, char_label: int) -> tuple:
        return self._by_char.get(char_label, ())

    def chars_in(self, split: str) -> tuple:
        """Characters of a split that actually have images, sorted."""
        return tuple(c for c in self.table.split_classes(split) if c in self._by_char)

    def split_image_count(self, split: str) -> int:
        return sum(len(self._by_char[c]) for c in self.chars_in(split))

    def all_images(self):
        for gs in self._by_char.values():
            yield from gs


def _pattern_glob(pattern: str) -> str:
    return pattern.replace("{char}", "*").replace("{instance}", "*")


def _pattern_regex(pattern: str) -> re.Pattern:
    out = ""
    i = 0
    while i < len(pattern):
        if pattern.startswith("{char}", i):
            out += r"(?P<char>\d+)"
            i += len("{char}")
        elif pattern.startswith("{instance}", i):
            out += r"[^/]+"
            i += len("{instance}")
        elif pattern[i] == "*":
            out += r"[^/]*"
            i += 1
        else:
            out += re.escape(pattern[i])
            i += 1
    return re.compile(out + r"\Z")


def ingest(
    root,
    table: AlphabetTable,
    config: PreprocessConfig = PreprocessConfig(),
    path_pattern: str = DEFAULT_PATH_PATTERN,
) -> DatasetIndex:
    """Read, validate and preprocess a corpus directory.

    Every character in `table` must be present with exactly
    IMAGES_PER_CHARACTER readable images; files whose path maps to an
    unknown char_label are rejected. Instance ids 0..4 follow the sorted
    file order within each character.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"corpus root {root} is not a directory")
    matches = sorted(glob(str(root / _pattern_glob(path_pattern))))
    if not matches:
        raise DatasetError(f"no images found under {root} (pattern {path_pattern!r})")
    rx = _pattern_regex(path_pattern)
    files_by_char: dict[int, list[str]] = {}
    for path in matches:
        rel = str(Path(path).relative_to(root))
        m = rx.match(rel)
        if not m:
            continue
        char_label = int(m.group("char"))
        if char_label not in table:
            raise DatasetError(f"{path}: char_label {char_label} has no alphabet entry")
        files_by_char.setdefault(char_label, []).append(path)

    missing = [c for c in table.split_classes("train") + table.split_classes("val") + table.split_classes("test")
               if c not in files_by_char]
    if missing:
        raise DatasetError(
            f"char {missing[0]}: expected {IMAGES_PER_CHARACTER} images, found 0 "
            f"({len(missing)} characters missing in total)"
        )

    images = []
    for char_label, paths in sorted(files_by_char.items()):
        if len(paths) != IMAGES_PER_CHARACTER:
            raise DatasetError(
                f"char {char_label}: expected {IMAGES_PER_CHARACTER} images, found {len(paths)}"
            )
        entry = table.entry(char_label)
        for instance_id, path in enumerate(sorted(paths)):
            try:
                with Image.open(path) as img:
                    pixels = preprocess(img, config)
            except DatasetError:
                raise
            except Exception as e:
                raise DatasetError(f"{path}: unreadable image ({e})") from e
            images.append(
                GlyphImage(
                    pixels=pixels,
                    char_label=char_label,
                    row_label=entry.row_label,
                    col_label=entry.col_label,
                    instance_id=instance_id,
                    split=entry.split,
                    source_path=path,
                )
            )
    return DatasetIndex(table, images)


@dataclass
class ValidationReport:
    totals: dict = field(default_factory=dict)  # split -> image count
    total: int = 0
    anomalies: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.anomalies

    def summary(self) -> str:
        per_split = ", ".join(f"{s}: {self.totals.get(s, 0)}" for s in SPLITS)
        lines = [f"{self.total} images ({per_split})"]
        if self.anomalies:
            lines.append(f"{len(self.anomalies)} anomalies:")
            lines.extend(f"  - {a}" for a in self.anomalies)
        else:
            lines.append("no anomalies")
        return "\n".join(lines)


def validate_dataset(index: DatasetIndex) -> ValidationReport:
    """Check corpus invariants; failures are reported, never raised."""
    table = index.table
    report = ValidationReport()
    report.totals = {s: index.split_image_count(s) for s in SPLITS}
    report.total = len(index)

    for char_label in index.char_labels:
        if char_label not in table:
            report.anomalies.append(f"char {char_label}: image present but no alphabet entry")

    for char_label in sorted(e.char_label for e in table.entries):
        glyphs = index.images_of(char_label)
        if len(glyphs) != IMAGES_PER_CHARACTER:
            report.anomalies.append(
                f"char {char_label}: expected {IMAGES_PER_CHARACTER} images, found {len(glyphs)}"
            )
        entry = table.entry(char_label)
        seen_content: dict[str, int] = {}
        for g in glyphs:
            if g.pixels.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
                report.anomalies.append(
                    f"char {char_label}/{g.instance_id}: pixel shape {g.pixels.shape} != (3, {IMAGE_SIZE}, {IMAGE_SIZE})"
                )
            if (g.row_label, g.col_label, g.split) != (entry.row_label, entry.col_label, entry.split):
                report.anomalies.append(
                    f"char {char_label}/{g.instance_id}: labels "
                    f"{(g.row_label, g.col_label, g.split)} disagree with alphabet entry "
                    f"{(entry.row_label, entry.col_label, entry.split)}"
                )
            key = g.content_key()
            if key in seen_content:
                report.anomalies.append(
                    f"char {char_label}: instances {seen_content[key]} and {g.instance_id} "
                    f"have identical pixel content (duplicated file?)"
                )
            else:
                seen_content[key] = g.instance_id
        ids = [g.instance_id for g in glyphs]
        if len(set(ids)) != len(ids):
            report.anomalies.append(f"char {char_label}: duplicate instance ids {ids}")
    return report


def save_index(index: DatasetIndex, path):
    """Write a preprocessed corpus to a single binary cache file."""
    glyphs = list(index.all_images())
    header = {
        "format_version": _INDEX_FORMAT_VERSION,
        "table": [[e.char_label, e.row_label, e.col_label, e.split] for e in index.table.entries],
        "glyphs": [
            [g.char_label, g.instance_id, g.source_path or ""] for g in glyphs
        ],
    }
    np.savez_compressed(
        path,
        header=np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8),
        pixels=np.stack([g.pixels for g in glyphs]) if glyphs else np.zeros((0, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32),
    )


def load_index(path) -> DatasetIndex:
    """Load a cache file produced by save_index."""
    from .alphabet import AlphabetEntry

    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode("utf-8"))
        if header.get("format_version") != _INDEX_FORMAT_VERSION:
            raise DatasetError(
                f"{path}: cache format version {header.get('format_version')} != {_INDEX_FORMAT_VERSION}"
            )
        pixels = data["pixels"]
    table = AlphabetTable(AlphabetEntry(c, r, co, s) for c, r, co, s in header["table"])
    images = []
    for (char_label, instance_id, source_path), px in zip(header["glyphs"], pixels):
        entry = table.entry(char_label)
        images.append(
            GlyphImage(
                pixels=np.ascontiguousarray(px, dtype=np.float32),
                char_label=char_label,
                row_label=entry.row_label,
                col_label=entry.col_label,
                instance_id=instance_id,
                split=entry.split,
                source_path=source_path or None,
            )
        )
    return DatasetIndex(table, images)
