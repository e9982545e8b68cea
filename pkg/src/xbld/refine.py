"""Explanation-guided refinement of an already fitted model.

Each step recomputes Grad-CAMs on the current parameters, scores them against
the confounder masks, and takes an Adam step on the combined loss. Object
centroids depend only on the masks and are computed once.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .decoygen import DecoySplit
from .errors import ConfigError, EmptyMaskError, NumericInstabilityError
from .evalmetrics import accuracy
from .modelzoo import ModelHandle, batches
from .xblloss import METHODS, LossCoefficients, LossLog, combined_loss, grid_centroid, make_batch

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "ce", "expl", "reg", "total", "test_accuracy", "seconds")
IDENTITY_TOL = 1e-6


@dataclass
class RefineConfig:
    method: str = "xbl_d"
    epochs: int = 50
    coeffs: LossCoefficients = field(default_factory=LossCoefficients)
    stop_loss: Optional[float] = None
    seed: int = 0
    batch_size: int = 32
    eps: float = 0.0
    detach_scale: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")


@dataclass
class RefineTrace:
    epochs: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.epochs)

    def column(self, name: str) -> list[float]:
        return [e[name] for e in self.epochs]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
            writer.writeheader()
            for row in self.epochs:
                writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in TRACE_COLUMNS})


class CentroidCache:
    """Grid-resolution object centroids keyed by instance id.

    An entry is recomputed when the mask stored under its id changes.
    """

    def __init__(self, grid: tuple[int, int]):
        self.grid = tuple(grid)
        self._entries: dict[str, tuple[str, tuple[float, float]]] = {}
        self.skipped: set[str] = set()

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, ident: str, obj_mask: np.ndarray) -> tuple[float, float]:
        fp = hashlib.blake2b(np.ascontiguousarray(obj_mask, dtype=np.uint8).tobytes() +
                             repr(obj_mask.shape).encode(), digest_size=16).hexdigest()
        hit = self._entries.get(ident)
        if hit is not None and hit[0] == fp:
            return hit[1]
        try:
            g = grid_centroid(obj_mask, self.grid)
            self.skipped.discard(ident)
        except EmptyMaskError:
            g = (math.nan, math.nan)
            self.skipped.add(ident)
        self._entries[ident] = (fp, g)
        return g

    def lookup(self, ids, obj_masks) -> np.ndarray:
        return np.array([self.get(i, m) for i, m in zip(ids, obj_masks)], dtype=np.float64)


def centroid_cache(data: DecoySplit, grid: tuple[int, int]) -> CentroidCache:
    cache = CentroidCache(grid)
    cache.lookup(data.ids, data.obj_masks)
    if cache.skipped:
        log.warning("%d instance(s) have no object pixels after grid alignment", len(cache.skipped))
    return cache


def refine(handle: ModelHandle, data: DecoySplit, cfg: RefineConfig, out_dir=None,
           test: Optional[DecoySplit] = None) -> tuple[ModelHandle, RefineTrace]:
    """Refine a copy of ``handle`` with the configured explanation loss.

    Runs ``cfg.epochs`` epochs of Adam at the architecture's learning rate,
    stopping early once the epoch-mean total loss is at most ``cfg.stop_loss``.
    Passing ``test`` records a clean-test accuracy snapshot each epoch.
    """
    if cfg.coeffs.lambda2 == 0:
        warnings.warn(f"lambda2 = 0: refinement with {cfg.method} reduces to plain "
                      "cross-entropy training", RuntimeWarning, stacklevel=2)
    refined = ModelHandle(copy.deepcopy(handle.model), handle.spec, dict(handle.provenance))
    model = refined.model
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=handle.spec.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    cache = centroid_cache(data, handle.spec.feature_grid)
    out_dir = Path(out_dir) if out_dir else None
    losses = LossLog(out_dir / "losses.csv" if out_dir else None)
    trace = RefineTrace()
    last_good = copy.deepcopy(model.state_dict())
    step = 0
    refined.provenance.update({"method": cfg.method, "refine_epochs": cfg.epochs,
                               "refine_seed": cfg.seed, "lambda1": cfg.coeffs.lambda1,
                               "lambda2": cfg.coeffs.lambda2, "lam": cfg.coeffs.lam,
                               "parent": handle.provenance.get("method", "unrefined")})
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.time()
            sums = dict.fromkeys(("ce", "expl", "reg", "total"), 0.0)
            for idx in batches(len(data), cfg.batch_size, gen):
                ids = [data.ids[i] for i in idx]
                batch = make_batch(refined, data.images[idx], data.labels[idx], data.con_masks[idx],
                                   centroids=cache.lookup(ids, data.obj_masks[idx]), ids=ids)
                total, bd = combined_loss(refined, batch, cfg.coeffs, cfg.method, cfg.eps,
                                          cfg.detach_scale)
                if bd.identity_error() > IDENTITY_TOL:
                    raise AssertionError(f"loss breakdown identity violated at step {step}: {bd}")
                opt.zero_grad()
                total.backward()
                grads_ok = all(p.grad is None or torch.isfinite(p.grad).all() for p in model.parameters())
                if not grads_ok:
                    raise NumericInstabilityError(f"non-finite gradient at step {step}")
                opt.step()
                losses.append(step, bd)
                step += 1
                for k in sums:
                    sums[k] += getattr(bd, k) * len(idx)
            row = {k: v / len(data) for k, v in sums.items()}
            if not all(math.isfinite(v) for v in row.values()):
                raise NumericInstabilityError(f"non-finite epoch loss at epoch {epoch}")
            last_good = copy.deepcopy(model.state_dict())
            row["epoch"] = epoch
            row["test_accuracy"] = accuracy(refined, test.images, test.labels) if test is not None else None
            row["seconds"] = time.time() - t0
            model.train()
            trace.epochs.append(row)
            log.info("%s epoch %d total %.4f ce %.4f expl %.4f", cfg.method, epoch, row["total"],
                     row["ce"], row["expl"])
            if cfg.stop_loss is not None and row["total"] <= cfg.stop_loss:
                break
    except NumericInstabilityError:
        model.load_state_dict(last_good)
        if out_dir:
            refined.save(out_dir, {"aborted": True, "trace": trace.epochs})
        raise
    finally:
        losses.close()
    model.eval()
    if out_dir:
        trace.checkpoint = refined.save(out_dir, {"trace": trace.epochs,
                                                  "final_loss": trace.epochs[-1]["total"]})
        trace.write_csv(out_dir / "trace.csv")
    return refined, trace
