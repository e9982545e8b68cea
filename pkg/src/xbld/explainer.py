"""Grad-CAM saliency maps.

``grad_cam_tensor`` is the batched, autograd-aware core used both for
evaluation and inside the explanation losses; the ``SaliencyMap`` wrappers are
the numpy-facing API.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .errors import ShapeError, UnsupportedArchitectureError


@dataclass
class SaliencyMap:
    values: np.ndarray
    target_class: int
    normalization: str = "minmax"
    resolution_tag: str = "native"

    @property
    def shape(self) -> tuple:
        return self.values.shape


def _unwrap(model) -> nn.Module:
    net = getattr(model, "model", model)
    if not hasattr(net, "forward_features") or not any(isinstance(m, nn.Conv2d) for m in net.modules()):
        raise UnsupportedArchitectureError(f"{type(net).__name__} exposes no convolutional features")
    return net


def minmax(cam: torch.Tensor, detach_scale: bool = False) -> torch.Tensor:
    """Per-map min-max scaling of a (B, H, W) tensor; flat maps become zero."""
    lo = cam.amin(dim=(1, 2), keepdim=True)
    span = cam.amax(dim=(1, 2), keepdim=True) - lo
    if detach_scale:
        span = span.detach()
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (cam - lo) / safe, torch.zeros_like(cam))


def grad_cam_tensor(model, x: torch.Tensor, classes: torch.Tensor, create_graph: bool = False,
                    detach_scale: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Min-max normalized Grad-CAM maps ``(B, H_s, W_s)`` plus the logits.

    Channel weights are the spatial mean of d(logit[class]) / dA^k over the
    last conv activations A^k. With ``create_graph`` the maps stay
    differentiable with respect to the parameters, which the explanation
    losses rely on.
    """
    net = _unwrap(model)
    with torch.enable_grad():
        logits, feats = net.forward_features(x)
        if not feats.requires_grad:
            raise UnsupportedArchitectureError("feature maps are not attached to the autograd graph")
        score = logits.gather(1, classes.view(-1, 1).to(logits.device)).sum()
        grads, = torch.autograd.grad(score, feats, create_graph=create_graph)
        weights = grads.mean(dim=(2, 3), keepdim=True)
        cam = F.relu((weights * feats).sum(dim=1))
        cam = minmax(cam, detach_scale)
    if not create_graph:
        cam, logits = cam.detach(), logits.detach()
    return cam, logits


def _as_batch(images) -> np.ndarray:
    arr = np.stack([getattr(im, "pixels", im) for im in images])
    return arr[..., None] if arr.ndim == 3 else arr


def batch_grad_cam(model, images: Sequence, classes: Sequence[int]) -> list[SaliencyMap]:
    """Grad-CAM for each (image, class) pair, in input order."""
    if len(images) != len(classes):
        raise ShapeError("images and classes must have equal length")
    x = model.prepare(_as_batch(images))
    cls = torch.as_tensor(np.asarray(classes, dtype=np.int64), device=x.device)
    num_classes = model.spec.num_classes
    if cls.numel() and (cls.min() < 0 or cls.max() >= num_classes):
        raise ValueError(f"target class outside [0, {num_classes})")
    cams, _ = grad_cam_tensor(model, x, cls)
    cams = cams.cpu().numpy()
    return [SaliencyMap(cams[i], int(classes[i])) for i in range(len(cams))]


def grad_cam(model, image, target_class: int) -> SaliencyMap:
    """Native-resolution, min-max normalized Grad-CAM of one image."""
    return batch_grad_cam(model, [image], [target_class])[0]


def upsample_tensor(maps: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if maps.shape[-2] > size[0] or maps.shape[-1] > size[1]:
        raise ShapeError(f"cannot upsample {tuple(maps.shape[-2:])} to smaller {tuple(size)}")
    if tuple(maps.shape[-2:]) == tuple(size):
        return maps.clamp(0, 1)
    out = F.interpolate(maps.unsqueeze(1), size=tuple(size), mode="bilinear", align_corners=False)
    return out.squeeze(1).clamp(0, 1)


def upsample(smap: SaliencyMap, to: tuple[int, int]) -> SaliencyMap:
    """Bilinear upsampling to input resolution, clipped to [0, 1]."""
    if smap.resolution_tag != "native":
        raise ShapeError("map is already at input resolution")
    vals = upsample_tensor(torch.as_tensor(smap.values, dtype=torch.float64)[None], to)[0]
    return SaliencyMap(vals.numpy(), smap.target_class, smap.normalization, "input")


def export_saliency(maps: Sequence[SaliencyMap], ids: Sequence[str], out_dir) -> list[Path]:
    """One 8-bit grayscale PNG per map."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for smap, ident in zip(maps, ids):
        path = out_dir / f"{ident}.png"
        q = np.clip(np.rint(smap.values * 255), 0, 255).astype(np.uint8)
        Image.fromarray(q).save(path)
        paths.append(path)
    return paths
