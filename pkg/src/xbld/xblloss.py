"""Explanation losses: distance-aware XBL-D plus the RRR and RRR-G baselines.

The XBL-D term for an instance is ``D_n * S_n``: ``D_n`` is the mean of the
smallest and largest Euclidean distance between the object centroid and the
confounder cells the Grad-CAM lights up, normalized by the grid diagonal and
held constant with respect to the parameters; ``S_n`` is the Grad-CAM mass on
the confounder cells, which carries the gradient.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyMaskError, NumericInstabilityError, ShapeError
from .explainer import grad_cam_tensor

log = logging.getLogger(__name__)

METHODS = ("xbl_d", "rrr", "rrr_g")


@dataclass(frozen=True)
class LossCoefficients:
    lambda1: float = 2.7
    lambda2: float = 0.1
    lam: float = 1e-5

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lam) < 0:
            raise ValueError("loss coefficients must be non-negative")


@dataclass
class LossBreakdown:
    ce: float
    expl: float
    reg: float
    total: float
    lambda1: float
    lambda2: float
    lam: float
    per_instance: list = field(default_factory=list)

    def identity_error(self) -> float:
        """Relative gap between ``total`` and the weighted sum of its terms."""
        expected = self.lambda1 * self.ce + self.lambda2 * self.expl + self.lam * self.reg
        return abs(self.total - expected) / max(abs(expected), 1e-12)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.ce, self.expl, self.reg, self.total))


class LossLog:
    """Appends ``step,ce,expl,reg,total`` rows; a no-op without a path."""

    columns = ("step", "ce", "expl", "reg", "total")

    def __init__(self, path: Optional[Path], append: bool = False):
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            fresh = not (append and path.exists())
            self._fh = open(path, "a" if append else "w", newline="")
            self._writer = csv.writer(self._fh)
            if fresh:
                self._writer.writerow(self.columns)

    def append(self, step: int, b: LossBreakdown) -> None:
        if self._fh is not None:
            self._writer.writerow([step, repr(b.ce), repr(b.expl), repr(b.reg), repr(b.total)])

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------- grid helpers

def align_mask_to_grid(mask, grid: tuple[int, int]):
    """Area-average ``mask`` down to ``grid`` and keep cells that are at least half set.

    Accepts a single H x W array or a batch (B, H, W) tensor/array and returns
    the same kind.
    """
    is_np = not torch.is_tensor(mask)
    t = torch.as_tensor(np.asarray(mask) if is_np else mask).to(torch.float64)
    single = t.ndim == 2
    if single:
        t = t[None]
    h, w = t.shape[-2:]
    if grid[0] > h or grid[1] > w:
        raise ShapeError(f"cannot align a {h}x{w} mask to a larger {grid} grid")
    if (h, w) == tuple(grid):
        out = (t >= 0.5).to(torch.uint8)
    else:
        out = (F.adaptive_avg_pool2d(t[:, None], grid)[:, 0] >= 0.5).to(torch.uint8)
    if single:
        out = out[0]
    return out.numpy() if is_np else out


def grid_diagonal(grid: tuple[int, int]) -> float:
    return math.hypot(grid[0] - 1, grid[1] - 1)


def grid_centroid(obj_mask: np.ndarray, grid: tuple[int, int]) -> tuple[float, float]:
    """Centroid of the object mask after alignment to the saliency grid."""
    from .decoygen import centroid

    return centroid(align_mask_to_grid(obj_mask, grid))


# ---------------------------------------------------------------- intersection & distance

@dataclass
class IntersectionSet:
    coords: list[tuple[int, int]]
    activations: list[float]
    instance_id: str = ""

    def __len__(self) -> int:
        return len(self.coords)


def intersect(expl, con_mask_grid: np.ndarray, eps: float = 0.0, instance_id: str = "") -> IntersectionSet:
    """Confounder cells where the explanation exceeds ``eps``."""
    values = np.asarray(getattr(expl, "values", expl))
    con = np.asarray(con_mask_grid)
    if values.shape != con.shape:
        raise ShapeError(f"explanation {values.shape} and mask {con.shape} differ in shape")
    rows, cols = np.nonzero((con > 0) & (values > eps))
    return IntersectionSet([(int(r), int(c)) for r, c in zip(rows, cols)],
                           [float(values[r, c]) for r, c in zip(rows, cols)], instance_id)


def distance_score(inter: IntersectionSet, g: tuple[float, float], grid_diag: float) -> float:
    """(min + max distance from ``g`` to the intersection) / 2 / ``grid_diag``; 0 if empty."""
    if grid_diag <= 0:
        raise ValueError("grid diagonal must be positive")
    if not len(inter):
        return 0.0
    pts = np.asarray(inter.coords, dtype=np.float64)
    d = np.hypot(pts[:, 0] - g[0], pts[:, 1] - g[1])
    return float((d.min() + d.max()) / 2.0 / grid_diag)


def distance_weights(cams: torch.Tensor, con_grid: torch.Tensor, centroids: torch.Tensor,
                     eps: float = 0.0) -> torch.Tensor:
    """Batched ``distance_score``; returns a detached (B,) tensor.

    ``centroids`` is (B, 2) in grid coordinates; rows with NaN give 0.
    """
    with torch.no_grad():
        b, h, w = cams.shape
        rr = torch.arange(h, dtype=torch.float64, device=cams.device).view(1, h, 1)
        cc = torch.arange(w, dtype=torch.float64, device=cams.device).view(1, 1, w)
        g = centroids.to(device=cams.device, dtype=torch.float64)
        dist = torch.sqrt((rr - g[:, 0, None, None]) ** 2 + (cc - g[:, 1, None, None]) ** 2)
        hit = (con_grid > 0) & (cams > eps)
        dmin = torch.where(hit, dist, torch.full_like(dist, math.inf)).amin(dim=(1, 2))
        dmax = torch.where(hit, dist, torch.full_like(dist, -math.inf)).amax(dim=(1, 2))
        any_hit = hit.flatten(1).any(dim=1) & torch.isfinite(g).all(dim=1)
        score = torch.where(any_hit, (dmin + dmax) / 2.0 / grid_diagonal((h, w)),
                            torch.zeros_like(dmin))
    return score.to(cams.dtype)


# ---------------------------------------------------------------- batches

@dataclass
class TensorBatch:
    """Model-ready batch: NCHW images plus masks at input and saliency-grid resolution."""

    x: torch.Tensor
    y: torch.Tensor
    con: torch.Tensor  # B x H x W
    con_grid: torch.Tensor  # B x H_s x W_s
    centroids: torch.Tensor  # B x 2, grid coordinates, NaN when the object mask is empty
    ids: list = field(default_factory=list)

    @property
    def valid(self) -> torch.Tensor:
        return torch.isfinite(self.centroids).all(dim=1)


def make_batch(handle, images, labels, con_masks, obj_masks=None, centroids=None,
               ids: Optional[Sequence[str]] = None) -> TensorBatch:
    """Build a TensorBatch; centroids are derived from ``obj_masks`` unless given."""
    x = handle.prepare(images)
    grid = handle.spec.feature_grid
    if centroids is None:
        if obj_masks is None:
            raise ValueError("need obj_masks or precomputed centroids")
        centroids = []
        for m in obj_masks:
            try:
                centroids.append(grid_centroid(m, grid))
            except EmptyMaskError:
                centroids.append((math.nan, math.nan))
    con = torch.as_tensor(np.asarray(con_masks), device=x.device).to(x.dtype)
    return TensorBatch(
        x=x,
        y=torch.as_tensor(np.asarray(labels, dtype=np.int64), device=x.device),
        con=con,
        con_grid=align_mask_to_grid(con, grid).to(x.dtype),
        centroids=torch.as_tensor(np.asarray(centroids, dtype=np.float64), device=x.device).view(-1, 2),
        ids=list(ids) if ids is not None else [str(i) for i in range(len(x))],
    )


def instances_to_batch(handle, instances) -> TensorBatch:
    return make_batch(handle, np.stack([i.image.pixels for i in instances]),
                      [i.image.label for i in instances], np.stack([i.con_mask for i in instances]),
                      obj_masks=[i.obj_mask for i in instances], ids=[i.id for i in instances])


# ---------------------------------------------------------------- losses

def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericInstabilityError(f"non-finite {what}")


def xbl_d_from_maps(cams: torch.Tensor, con_grid: torch.Tensor, centroids: torch.Tensor,
                    eps: float = 0.0) -> tuple[torch.Tensor, dict]:
    """XBL-D term from precomputed (B, H_s, W_s) explanation maps.

    Returns the mean of ``D_n * S_n`` over instances with a usable centroid,
    and per-instance diagnostics (distance, mass, term).
    """
    _check_finite(cams, "explanation activations")
    valid = torch.isfinite(centroids).all(dim=1)
    if not bool(valid.all()):
        warnings.warn(f"{int((~valid).sum())} instance(s) with empty object mask skipped "
                      "in the explanation loss", RuntimeWarning, stacklevel=2)
    dist = distance_weights(cams, con_grid, centroids, eps)
    mass = (cams * con_grid).sum(dim=(1, 2))
    terms = dist * mass
    if bool(valid.any()):
        loss = terms[valid].mean()
    else:
        loss = cams.sum() * 0.0
    diag = {"distance": dist.tolist(), "mass": mass.detach().tolist(),
            "term": terms.detach().tolist(), "valid": valid.tolist()}
    return loss, diag


def xbl_d_expl_loss(model, batch, eps: float = 0.0, detach_scale: bool = False,
                    return_logits: bool = False):
    """Differentiable XBL-D explanation loss for a batch.

    ``batch`` is a TensorBatch or a list of DecoyInstance. Grad-CAM targets
    the ground-truth labels.
    """
    if not isinstance(batch, TensorBatch):
        batch = instances_to_batch(model, batch)
    cams, logits = grad_cam_tensor(model, batch.x, batch.y, create_graph=True,
                                   detach_scale=detach_scale)
    loss, diag = xbl_d_from_maps(cams, batch.con_grid, batch.centroids, eps)
    if return_logits:
        return loss, diag, logits
    return loss, diag


def rrr_expl_loss(model, x: torch.Tensor, avoid: torch.Tensor,
                  return_logits: bool = False):
    """Sum over batch and pixels of (M * d/dx sum_k log p_k)^2.

    ``avoid`` is (B, H, W) at input resolution and broadcasts over channels.
    """
    net = getattr(model, "model", model)
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        logits = net(x)
        logp = F.log_softmax(logits, dim=1)
        gx, = torch.autograd.grad(logp.sum(), x, create_graph=True)
        _check_finite(gx, "input gradients")
        loss = ((avoid.to(gx.dtype)[:, None] * gx) ** 2).sum()
    if return_logits:
        return loss, logits
    return loss


def rrr_g_from_maps(cams: torch.Tensor, avoid_grid: torch.Tensor) -> torch.Tensor:
    return (cams * avoid_grid).sum()


def rrr_g_expl_loss(model, x: torch.Tensor, labels: torch.Tensor, avoid_grid: torch.Tensor,
                    return_logits: bool = False, detach_scale: bool = False):
    """Sum over batch and grid cells of M * GradCAM (sum reduction)."""
    cams, logits = grad_cam_tensor(model, x, labels, create_graph=True, detach_scale=detach_scale)
    _check_finite(cams, "explanation activations")
    loss = rrr_g_from_maps(cams, avoid_grid)
    if return_logits:
        return loss, logits
    return loss


def l2_penalty(model) -> torch.Tensor:
    net = getattr(model, "model", model)
    return sum((p ** 2).sum() for p in net.parameters())


def combined_loss(model, batch: TensorBatch, coeffs: LossCoefficients = LossCoefficients(),
                  method: str = "xbl_d", eps: float = 0.0,
                  detach_scale: bool = False) -> tuple[torch.Tensor, LossBreakdown]:
    """``lambda1 * CE + lambda2 * L_expl + lam * sum(theta^2)`` and its breakdown.

    The explanation term is skipped (and the CE logits come from a plain
    forward pass) when ``lambda2`` is zero.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    net = getattr(model, "model", model)
    per_instance: list = []
    if coeffs.lambda2 == 0:
        logits = net(batch.x)
        expl = logits.sum() * 0.0
    elif method == "xbl_d":
        expl, diag, logits = xbl_d_expl_loss(model, batch, eps, detach_scale, return_logits=True)
        per_instance = diag["term"]
    elif method == "rrr":
        expl, logits = rrr_expl_loss(model, batch.x, batch.con, return_logits=True)
    else:
        expl, logits = rrr_g_expl_loss(model, batch.x, batch.y, batch.con_grid,
                                       return_logits=True, detach_scale=detach_scale)
    ce = F.cross_entropy(logits, batch.y)
    reg = l2_penalty(model)
    total = coeffs.lambda1 * ce + coeffs.lambda2 * expl + coeffs.lam * reg
    _check_finite(total, "total loss")
    breakdown = LossBreakdown(ce=ce.item(), expl=expl.item(), reg=reg.item(), total=total.item(),
                              lambda1=coeffs.lambda1, lambda2=coeffs.lambda2, lam=coeffs.lam,
                              per_instance=per_instance)
    return total, breakdown
