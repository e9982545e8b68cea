"""Source datasets: builtin downloads, a procedural offline set, and local files."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .decoygen import SourceDataset

BUILTINS = ("fashion-mnist", "cifar10", "synthetic")
SHAPE_NAMES = ("square", "disk", "hbar", "vbar")


def data_dir() -> Path:
    return Path(os.environ.get("XBLD_DATA_DIR", Path.home() / ".cache" / "xbld"))


def _torchvision(name: str) -> SourceDataset:
    from torchvision import datasets

    root = data_dir() / name
    cls = {"fashion-mnist": datasets.FashionMNIST, "cifar10": datasets.CIFAR10}[name]
    train = cls(str(root), train=True, download=True)
    test = cls(str(root), train=False, download=True)

    def arrays(ds):
        x = np.asarray(ds.data)
        if x.ndim == 3:
            x = x[..., None]
        return x.astype(np.uint8), np.asarray(ds.targets, dtype=np.int64)

    xtr, ytr = arrays(train)
    xte, yte = arrays(test)
    return SourceDataset(name, xtr, ytr, xte, yte, class_names=tuple(train.classes))


def synthetic_shapes(n_train: int = 1000, n_test: int = 400, size: int = 28,
                     seed: int = 0) -> SourceDataset:
    """Bright shapes on black, four classes, kept away from the corners.

    Meant for offline runs and tests; intensity thresholding recovers the
    object masks exactly.
    """
    rng = np.random.default_rng(seed)

    def draw(label: int) -> np.ndarray:
        img = np.zeros((size, size), dtype=np.float64)
        c = size // 2
        r0, c0 = c + rng.integers(-3, 4), c + rng.integers(-3, 4)
        half = int(rng.integers(size // 7, size // 5 + 1))
        val = rng.uniform(0.6, 1.0)
        rr, cc = np.mgrid[:size, :size]
        if label == 0:
            box = (abs(rr - r0) <= half) & (abs(cc - c0) <= half)
            inner = (abs(rr - r0) <= half - 2) & (abs(cc - c0) <= half - 2)
            img[box & ~inner] = val
        elif label == 1:
            img[(rr - r0) ** 2 + (cc - c0) ** 2 <= half ** 2] = val
        elif label == 2:
            img[(abs(rr - r0) <= 1) & (abs(cc - c0) <= half + 2)] = val
        else:
            img[(abs(cc - c0) <= 1) & (abs(rr - r0) <= half + 2)] = val
        return img

    def split(n):
        labels = rng.integers(0, len(SHAPE_NAMES), size=n)
        imgs = np.stack([draw(int(y)) for y in labels])
        return (np.rint(imgs * 255).astype(np.uint8)[..., None], labels.astype(np.int64))

    xtr, ytr = split(n_train)
    xte, yte = split(n_test)
    return SourceDataset("synthetic", xtr, ytr, xte, yte, class_names=SHAPE_NAMES)


def _from_npz(path: Path) -> SourceDataset:
    with np.load(path) as z:
        def img(key):
            x = z[key]
            return (x[..., None] if x.ndim == 3 else x).astype(np.uint8)

        return SourceDataset(path.stem, img("x_train"), z["y_train"].astype(np.int64),
                             img("x_test"), z["y_test"].astype(np.int64),
                             train_masks=z["m_train"] if "m_train" in z else None,
                             test_masks=z["m_test"] if "m_test" in z else None)


def _from_directory(path: Path) -> SourceDataset:
    """``<path>/<split>/<class>/<stem>.png`` with optional ``<split>_masks/`` twin tree."""
    classes = sorted(p.name for p in (path / "train").iterdir() if p.is_dir())
    out = {}
    for split in ("train", "test"):
        imgs, labels, masks = [], [], []
        mask_root = path / f"{split}_masks"
        for label, cname in enumerate(classes):
            for f in sorted((path / split / cname).glob("*.png")):
                with Image.open(f) as im:
                    imgs.append(np.asarray(im.convert("RGB")))
                labels.append(label)
                mf = mask_root / cname / f.name
                if mask_root.exists():
                    with Image.open(mf) as im:
                        masks.append(np.asarray(im.convert("L"), dtype=np.float64) / 255.0)
        out[split] = (np.stack(imgs), np.array(labels, dtype=np.int64),
                      np.stack(masks) if masks else None)
    return SourceDataset(path.name, out["train"][0], out["train"][1], out["test"][0],
                         out["test"][1], out["train"][2], out["test"][2], tuple(classes))


def load_source(spec: str, limit_train: Optional[int] = None,
                limit_test: Optional[int] = None, seed: int = 0) -> SourceDataset:
    """Resolve a builtin name or a local ``.npz`` / directory into a SourceDataset."""
    if spec == "synthetic":
        src = synthetic_shapes(n_train=limit_train or 1000, n_test=limit_test or 400, seed=seed)
    elif spec in BUILTINS:
        src = _torchvision(spec)
    else:
        path = Path(spec)
        if path.suffix == ".npz":
            src = _from_npz(path)
        elif path.is_dir():
            src = _from_directory(path)
        else:
            raise FileNotFoundError(f"no builtin or local dataset named {spec!r}")
    if limit_train is not None:
        src.train_images, src.train_labels = src.train_images[:limit_train], src.train_labels[:limit_train]
        if src.train_masks is not None:
            src.train_masks = src.train_masks[:limit_train]
    if limit_test is not None:
        src.test_images, src.test_labels = src.test_images[:limit_test], src.test_labels[:limit_test]
        if src.test_masks is not None:
            src.test_masks = src.test_masks[:limit_test]
    return src
