"""Decoyed dataset construction.

Training images get a random-intensity square stamped into one corner and the
square's location recorded as a confounder mask; test images are left clean.
Each instance also carries an object-of-interest mask derived from the clean
image, which the distance-aware loss and the AR/AP metrics need.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, EmptyMaskError, ShapeError, SizeError

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
PARAMS_NAME = "params.json"
SPLITS = ("train", "test")


class Corner(str, enum.Enum):
    TL = "TL"
    TR = "TR"
    BL = "BL"
    BR = "BR"


CORNERS = (Corner.TL, Corner.TR, Corner.BL, Corner.BR)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # H x W x C, float in [0, 1]
    label: int

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[..., None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ShapeError(f"expected H x W x C with C in {{1, 3}}, got {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ShapeError(f"image must be at least 8x8, got {px.shape[:2]}")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px
        self.label = int(self.label)

    @property
    def shape(self) -> tuple:
        return self.pixels.shape


@dataclass
class DecoyInstance:
    image: LabeledImage
    obj_mask: np.ndarray
    con_mask: np.ndarray
    corner: Optional[Corner] = None
    patch_size: int = 0
    seed_trace: int = 0
    id: str = ""


def corner_box(height: int, width: int, size: int, corner: Corner) -> tuple[slice, slice]:
    """Row/col slices of the ``size`` x ``size`` square aligned to ``corner``."""
    corner = Corner(corner)
    rows = slice(0, size) if corner in (Corner.TL, Corner.TR) else slice(height - size, height)
    cols = slice(0, size) if corner in (Corner.TL, Corner.BL) else slice(width - size, width)
    return rows, cols


def stamp_confounder(image: LabeledImage, patch_size: int,
                     rng: np.random.Generator) -> tuple[LabeledImage, np.ndarray, Optional[Corner]]:
    """Replace a random corner square with i.i.d. uniform noise.

    The corner is drawn first, then the patch values, both from ``rng``, so a
    seeded generator reproduces the whole instance. ``patch_size=0`` is the
    identity and returns ``corner=None``.
    """
    h, w, c = image.pixels.shape
    if patch_size < 0 or patch_size > min(h, w) / 4:
        raise SizeError(f"patch_size={patch_size} exceeds min(H, W)/4 for a {h}x{w} image")
    mask = np.zeros((h, w), dtype=np.uint8)
    if patch_size == 0:
        return LabeledImage(image.pixels.copy(), image.label), mask, None

    corner = CORNERS[int(rng.integers(4))]
    rows, cols = corner_box(h, w, patch_size, corner)
    pixels = image.pixels.copy()
    pixels[rows, cols, :] = rng.random((patch_size, patch_size, c))
    mask[rows, cols] = 1
    return LabeledImage(pixels, image.label), mask, corner


@dataclass(frozen=True)
class ObjectMaskStrategy:
    """How to obtain A_obj for an image.

    ``kind`` is one of ``threshold`` (mean intensity > ``tau``),
    ``segmentation`` (externally supplied mask, binarized at 0.5) or
    ``corners`` (everything except the four ``patch_size`` corner squares).
    """

    kind: str
    tau: float = 0.1
    patch_size: int = 4

    def __post_init__(self):
        if self.kind not in ("threshold", "segmentation", "corners"):
            raise ConfigError(f"unknown object-mask strategy {self.kind!r}")

    @classmethod
    def parse(cls, text: str, patch_size: int = 4) -> "ObjectMaskStrategy":
        """Parse ``threshold[:tau]``, ``segmentation`` or ``corners[:size]``."""
        kind, _, arg = text.partition(":")
        aliases = {"intensity_threshold": "threshold", "provided_segmentation": "segmentation",
                   "provided": "segmentation", "complement_of_corners": "corners"}
        kind = aliases.get(kind, kind)
        if kind == "threshold":
            return cls("threshold", tau=float(arg) if arg else 0.1)
        if kind == "corners":
            return cls("corners", patch_size=int(arg) if arg else patch_size)
        return cls(kind)

    def __str__(self) -> str:
        if self.kind == "threshold":
            return f"threshold:{self.tau:g}"
        if self.kind == "corners":
            return f"corners:{self.patch_size}"
        return self.kind


def derive_object_mask(image: LabeledImage, strategy: ObjectMaskStrategy,
                       segmentation: Optional[np.ndarray] = None) -> np.ndarray:
    h, w, _ = image.pixels.shape
    if strategy.kind == "threshold":
        return (image.pixels.mean(axis=2) > strategy.tau).astype(np.uint8)
    if strategy.kind == "corners":
        mask = np.ones((h, w), dtype=np.uint8)
        for corner in CORNERS:
            mask[corner_box(h, w, strategy.patch_size, corner)] = 0
        return mask
    if segmentation is None:
        raise ShapeError("segmentation strategy needs an external mask")
    seg = np.asarray(segmentation, dtype=float)
    if seg.ndim == 3:
        seg = seg.mean(axis=2)
    if seg.shape != (h, w):
        raise ShapeError(f"segmentation shape {seg.shape} does not match image {(h, w)}")
    return (seg >= 0.5).astype(np.uint8)


def centroid(mask: np.ndarray) -> tuple[float, float]:
    """Mean (row, col) of the nonzero pixels of ``mask``."""
    rows, cols = np.nonzero(np.asarray(mask))
    if rows.size == 0:
        raise EmptyMaskError("centroid of an empty mask is undefined")
    return float(rows.mean()), float(cols.mean())


@dataclass
class SourceDataset:
    """Raw labeled images: uint8 arrays N x H x W x C plus integer labels.

    ``train_masks``/``test_masks`` are optional segmentations (N x H x W,
    values in [0, 1]) used by the ``segmentation`` strategy.
    """

    name: str
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    train_masks: Optional[np.ndarray] = None
    test_masks: Optional[np.ndarray] = None
    class_names: Sequence[str] = field(default_factory=tuple)

    def split(self, name: str):
        if name == "train":
            return self.train_images, self.train_labels, self.train_masks
        return self.test_images, self.test_labels, self.test_masks


@dataclass
class DecoyDatasetManifest:
    name: str
    root: Path
    records: list[dict]
    seed: int
    params: dict

    def split_records(self, split: str) -> list[dict]:
        return [r for r in self.records if r["split"] == split]

    @classmethod
    def read(cls, root) -> "DecoyDatasetManifest":
        root = Path(root)
        with open(root / MANIFEST_NAME) as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        params = json.loads((root / PARAMS_NAME).read_text())
        return cls(params["name"], root, records, params["seed"], params)


def instance_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-instance stream; lets instances be generated in any order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _save_png(path: Path, array: np.ndarray) -> None:
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[..., 0]
    Image.fromarray(array).save(path, format="PNG")


def _iter_split(source: SourceDataset, split: str, patch_size: int,
                strategy: ObjectMaskStrategy, seed: int) -> Iterator[DecoyInstance]:
    images, labels, masks = source.split(split)
    for i in range(len(images)):
        clean = LabeledImage(np.asarray(images[i], dtype=np.float64) / 255.0, int(labels[i]))
        seg = None if masks is None else masks[i]
        obj = derive_object_mask(clean, strategy, seg)
        if split == "train":
            img, con, corner = stamp_confounder(clean, patch_size, instance_rng(seed, i))
            size = patch_size if corner is not None else 0
        else:
            img, con, corner, size = clean, np.zeros(obj.shape, np.uint8), None, 0
        yield DecoyInstance(img, obj, con, corner, size, seed_trace=i, id=f"{split}-{i:06d}")


def build_decoy_dataset(source: SourceDataset, out_dir, patch_size: int = 4,
                        strategy: ObjectMaskStrategy | str = "threshold:0.1", seed: int = 0,
                        name: Optional[str] = None) -> DecoyDatasetManifest:
    """Write a decoyed copy of ``source`` under ``out_dir/<name>``.

    Train images are stamped with confounders; test images are copied as-is
    with empty confounder masks. Files are staged in a temporary directory and
    moved into place only once everything is written.
    """
    if isinstance(strategy, str):
        strategy = ObjectMaskStrategy.parse(strategy, patch_size)
    if source.train_images.ndim != 4 or source.test_images.ndim != 4:
        raise ShapeError("source images must be N x H x W x C")
    name = name or f"decoy-{source.name}"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    final = out_dir / name
    if final.exists() and not (final / MANIFEST_NAME).exists():
        raise FileExistsError(f"{final} exists and is not a decoy dataset")

    params = {"name": name, "source": source.name, "patch_size": patch_size,
              "strategy": str(strategy), "seed": seed,
              "n_train": int(len(source.train_images)), "n_test": int(len(source.test_images)),
              "class_names": list(source.class_names)}
    tmp = Path(tempfile.mkdtemp(prefix=f".{name}.", dir=out_dir))
    try:
        records = []
        for split in SPLITS:
            for sub in ("images", "obj_masks", "con_masks"):
                (tmp / split / sub).mkdir(parents=True)
            for inst in _iter_split(source, split, patch_size, strategy, seed):
                fname = f"{inst.id}.png"
                paths = {key: f"{split}/{key}/{fname}" for key in ("images", "obj_masks", "con_masks")}
                _save_png(tmp / paths["images"], to_uint8(inst.image.pixels))
                _save_png(tmp / paths["obj_masks"], inst.obj_mask.astype(np.uint8) * 255)
                _save_png(tmp / paths["con_masks"], inst.con_mask.astype(np.uint8) * 255)
                records.append({"id": inst.id, "split": split, "label": inst.image.label,
                                "corner": inst.corner.value if inst.corner else None,
                                "patch_size": inst.patch_size,
                                "paths": {"image": paths["images"], "obj_mask": paths["obj_masks"],
                                          "con_mask": paths["con_masks"]}})
        with open(tmp / MANIFEST_NAME, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (tmp / PARAMS_NAME).write_text(json.dumps(params, sort_keys=True, indent=1) + "\n")
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    log.info("wrote %d instances to %s", len(records), final)
    return DecoyDatasetManifest(name, final, records, seed, params)


@dataclass
class DecoySplit:
    """One split of a decoy dataset loaded into memory."""

    ids: list[str]
    images: np.ndarray  # N x H x W x C float32 in [0, 1]
    labels: np.ndarray  # N int64
    obj_masks: np.ndarray  # N x H x W uint8
    con_masks: np.ndarray  # N x H x W uint8
    corners: list[Optional[str]]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "DecoySplit":
        index = np.asarray(index)
        return DecoySplit([self.ids[i] for i in index], self.images[index], self.labels[index],
                          self.obj_masks[index], self.con_masks[index],
                          [self.corners[i] for i in index])

    def instance(self, i: int) -> DecoyInstance:
        corner = Corner(self.corners[i]) if self.corners[i] else None
        return DecoyInstance(LabeledImage(self.images[i].astype(np.float64), int(self.labels[i])),
                             self.obj_masks[i], self.con_masks[i], corner,
                             int(np.sqrt(self.con_masks[i].sum())), id=self.ids[i])


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def load_split(root, split: str, limit: Optional[int] = None) -> DecoySplit:
    manifest = DecoyDatasetManifest.read(root)
    recs = manifest.split_records(split)
    if limit is not None:
        recs = recs[:limit]
    if not recs:
        raise ValueError(f"split {split!r} of {root} is empty")
    images, objs, cons = [], [], []
    for rec in recs:
        img = _read_png(manifest.root / rec["paths"]["image"])
        images.append(img[..., None] if img.ndim == 2 else img)
        objs.append(_read_png(manifest.root / rec["paths"]["obj_mask"]) > 127)
        cons.append(_read_png(manifest.root / rec["paths"]["con_mask"]) > 127)
    return DecoySplit(
        ids=[r["id"] for r in recs],
        images=np.stack(images).astype(np.float32) / 255.0,
        labels=np.array([r["label"] for r in recs], dtype=np.int64),
        obj_masks=np.stack(objs).astype(np.uint8),
        con_masks=np.stack(cons).astype(np.uint8),
        corners=[r["corner"] for r in recs],
    )
