"""Bag manifests: loading, validation, size statistics and bag-aware batch plans."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import make_generator

SOURCES = ("book", "article", "synthetic")
REQUIRED = ("bag_id", "image_refs", "caption", "source")
DEFAULT_MAX_IMAGES = 32


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Bag:
    bag_id: str
    image_refs: tuple[str, ...]
    caption: str
    source: str = "synthetic"

    @property
    def size(self) -> int:
        return len(self.image_refs)


@dataclass
class BatchPlan:
    epoch_seed: int
    batches: list[list[str]] = field(default_factory=list)

    def bag_ids(self) -> list[str]:
        return [b for batch in self.batches for b in batch]


def _parse_line(raw: str, lineno: int, root: Path, resolve: bool) -> Bag:
    try:
        rec = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    for key in REQUIRED:
        if key not in rec:
            raise ManifestError(f"line {lineno}: missing field {key!r}")
    refs = rec["image_refs"]
    if not isinstance(refs, list) or not refs or not all(isinstance(r, str) and r for r in refs):
        raise ManifestError(f"line {lineno}: image_refs must be a non-empty list of paths")
    caption = rec["caption"]
    if not isinstance(caption, str) or not caption.strip():
        raise ManifestError(f"line {lineno}: empty caption")
    if rec["source"] not in SOURCES:
        raise ManifestError(f"line {lineno}: source must be one of {SOURCES}, got {rec['source']!r}")
    bag_id = rec["bag_id"]
    if not isinstance(bag_id, str) or not bag_id:
        raise ManifestError(f"line {lineno}: bag_id must be a non-empty string")
    resolved = []
    for ref in refs:
        path = Path(ref) if Path(ref).is_absolute() else root / ref
        if resolve and not path.is_file():
            raise ManifestError(f"line {lineno}: image ref {ref!r} does not resolve")
        resolved.append(str(path))
    return Bag(bag_id, tuple(resolved), caption, rec["source"])


def load_manifest(path, resolve: bool = True, decode: bool = False) -> list[Bag]:
    """Read a JSONL manifest; image refs are relative to the manifest's directory.

    ``decode`` additionally opens every image so that decode failures surface now
    rather than during training.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest {path} not found")
    root = path.parent
    bags, seen = [], {}
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            bag = _parse_line(raw, lineno, root, resolve)
            if bag.bag_id in seen:
                raise ManifestError(f"line {lineno}: duplicate bag_id {bag.bag_id!r} (first on line {seen[bag.bag_id]})")
            seen[bag.bag_id] = lineno
            if decode:
                for ref in bag.image_refs:
                    try:
                        load_image(ref)
                    except Exception as exc:
                        raise ManifestError(f"line {lineno}: cannot decode {ref!r}: {exc}") from None
            bags.append(bag)
    return bags


def write_manifest(path, bags: list[Bag], root=None):
    root = Path(root) if root is not None else Path(path).parent
    with Path(path).open("w", encoding="utf-8") as fh:
        for b in bags:
            refs = [str(Path(r).relative_to(root)) if Path(r).is_absolute() else r for r in b.image_refs]
            fh.write(json.dumps({"bag_id": b.bag_id, "image_refs": refs, "caption": b.caption,
                                 "source": b.source}) + "\n")


@dataclass
class BagStats:
    histogram: dict[int, int]
    total_bags: int
    total_images: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bag_size", "bags"])
        for size in sorted(self.histogram):
            w.writerow([size, self.histogram[size]])
        w.writerow(["total_bags", self.total_bags])
        w.writerow(["total_images", self.total_images])
        return buf.getvalue()


def bag_stats(bags: list[Bag]) -> BagStats:
    hist = Counter(b.size for b in bags)
    return BagStats(dict(sorted(hist.items())), len(bags), sum(b.size for b in bags))


def compose_batches(bags: list[Bag], max_images: int = DEFAULT_MAX_IMAGES, epoch_seed: int = 0) -> BatchPlan:
    """Shuffle bags and fill batches greedily in shuffled order without splitting a bag."""
    for b in bags:
        if b.size > max_images:
            raise ValueError(f"bag {b.bag_id!r} has {b.size} images, more than max_images={max_images}")
    order = make_generator(epoch_seed, "batch-plan").permutation(len(bags))
    plan = BatchPlan(epoch_seed)
    current, used = [], 0
    for i in order:
        bag = bags[i]
        if current and used + bag.size > max_images:
            plan.batches.append(current)
            current, used = [], 0
        current.append(bag.bag_id)
        used += bag.size
    if current:
        plan.batches.append(current)
    return plan


def load_image(path, size: int | None = None) -> np.ndarray:
    """Decode to a ``3 x S x S`` float array in [0, 1]; resized when ``size`` is given."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def save_image(path, image: np.ndarray):
    """Write a ``3 x H x W`` (or ``H x W``) array in [0, 1] as PNG."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)).save(path, format="PNG")


class ImageCache:
    """Decoded images keyed by path; images are immutable after load."""

    def __init__(self, size: int):
        self.size = size
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, path: str) -> np.ndarray:
        if path not in self._cache:
            self._cache[path] = load_image(path, self.size)
        return self._cache[path]

    def put(self, ref: str, image: np.ndarray):
        """Register an in-memory image under ``ref`` (used by synthetic fixtures)."""
        self._cache[ref] = np.asarray(image, dtype=np.float32)

    def bag(self, bag: Bag) -> np.ndarray:
        return np.stack([self(r) for r in bag.image_refs])
