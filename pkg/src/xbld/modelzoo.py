"""CNN presets, the plain cross-entropy trainer, and checkpoint I/O."""

from __future__ import annotations

import copy
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .decoygen import DecoySplit
from .errors import ConfigError, NumericInstabilityError, ShapeError
from .xblloss import LossBreakdown, LossLog

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConvBlock:
    filters: int
    maxpool: bool = False


@dataclass(frozen=True)
class ArchitectureSpec:
    conv_blocks: tuple[ConvBlock, ...]
    fc_sizes: tuple[int, ...]
    num_classes: int
    input_shape: tuple[int, int, int]  # H, W, C
    learning_rate: float

    def __post_init__(self):
        if not self.conv_blocks:
            raise ConfigError("need at least one conv block")
        if not self.fc_sizes:
            raise ConfigError("need at least one fully connected layer")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")

    @property
    def feature_grid(self) -> tuple[int, int]:
        """Spatial size of the last conv block's output."""
        h, w, _ = self.input_shape
        for block in self.conv_blocks:
            if block.maxpool:
                h, w = h // 2, w // 2
        return h, w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(tuple(ConvBlock(**b) for b in d["conv_blocks"]), tuple(d["fc_sizes"]),
                   int(d["num_classes"]), tuple(d["input_shape"]), float(d["learning_rate"]))


PRESETS = {
    "fmnist": ArchitectureSpec((ConvBlock(160),), (992, 800), 10, (28, 28, 1), 1.158e-4),
    "cifar10": ArchitectureSpec((ConvBlock(250), ConvBlock(300)), (912,), 10, (32, 32, 3), 1.267e-4),
    "coco2": ArchitectureSpec(tuple(ConvBlock(f, True) for f in (160, 352, 416, 224)), (480,), 2,
                              (224, 224, 3), 1.789e-5),
}
DEFAULT_BATCH = {"fmnist": 32, "cifar10": 32, "coco2": 16}


def preset(name: str, **overrides) -> ArchitectureSpec:
    """Architecture for ``fmnist``, ``cifar10`` or ``coco2``.

    Keyword overrides (e.g. ``num_classes``) replace fields of the preset.
    """
    try:
        spec = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if overrides:
        spec = ArchitectureSpec(**{**spec.__dict__, **overrides})
    return spec


class ConvNet(nn.Module):
    """3x3 same-padded convs with ReLU, optional 2x2 max-pool, then an MLP head."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        h, w, c = spec.input_shape
        layers = []
        for block in spec.conv_blocks:
            layers += [nn.Conv2d(c, block.filters, 3, padding=1), nn.ReLU()]
            if block.maxpool:
                layers.append(nn.MaxPool2d(2))
            c = block.filters
        self.features = nn.Sequential(*layers)
        gh, gw = spec.feature_grid
        head, width = [], c * gh * gw
        for size in spec.fc_sizes:
            head += [nn.Linear(width, size), nn.ReLU()]
            width = size
        head.append(nn.Linear(width, spec.num_classes))
        self.head = nn.Sequential(*head)

    def forward_features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Logits and last-conv activations (NCHW) for an NCHW batch."""
        feats = self.features(x)
        return self.head(feats.flatten(1)), feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x)[0]


def get_device() -> torch.device:
    name = os.environ.get("XBLD_DEVICE", "auto")
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def to_nchw(images, device=None, dtype=None) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if x.ndim == 3:
        x = x.unsqueeze(-1)
    x = x.permute(0, 3, 1, 2).contiguous()
    return x.to(device=device, dtype=dtype or torch.get_default_dtype())


@dataclass
class ModelHandle:
    model: ConvNet
    spec: ArchitectureSpec
    provenance: dict = field(default_factory=dict)

    @property
    def device(self) -> torch.device:
        return next(self.model.parameters()).device

    @property
    def dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    def prepare(self, images) -> torch.Tensor:
        x = to_nchw(images, self.device, self.dtype)
        if tuple(x.shape[2:]) != self.spec.input_shape[:2] or x.shape[1] != self.spec.input_shape[2]:
            raise ShapeError(f"batch {tuple(x.shape)} (NCHW) does not match input_shape "
                             f"{self.spec.input_shape} (HWC)")
        return x

    def save(self, out_dir, extra_meta: Optional[dict] = None) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.save(self.model.state_dict(), out_dir / "checkpoint.pt")
        meta = {"spec": self.spec.to_dict(), "provenance": self.provenance, **(extra_meta or {})}
        (out_dir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        return out_dir

    @classmethod
    def load(cls, run_dir, device=None) -> "ModelHandle":
        run_dir = Path(run_dir)
        meta = json.loads((run_dir / "meta.json").read_text())
        spec = ArchitectureSpec.from_dict(meta["spec"])
        model = ConvNet(spec)
        state = torch.load(run_dir / "checkpoint.pt", map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        model.to(device or get_device()).eval()
        return cls(model, spec, meta.get("provenance", {}))


def build_model(spec: ArchitectureSpec, seed: int = 0, device=None, dtype=None) -> ModelHandle:
    torch.manual_seed(seed)
    model = ConvNet(spec).to(device=device or get_device(), dtype=dtype or torch.get_default_dtype())
    return ModelHandle(model, spec, {"seed": seed, "method": "unrefined"})


def forward_with_features(handle: ModelHandle, images) -> tuple[torch.Tensor, torch.Tensor]:
    """Logits ``(B, K)`` and channels-last feature maps ``(B, H_s, W_s, K_filters)``.

    ``images`` are channels-last. Both outputs stay on the autograd graph.
    """
    logits, feats = handle.model.forward_features(handle.prepare(images))
    return logits, feats.permute(0, 2, 3, 1)


@torch.no_grad()
def predict(handle: ModelHandle, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    handle.model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        out.append(handle.model(handle.prepare(images[i:i + batch_size])).argmax(1).cpu().numpy())
    return np.concatenate(out)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    stop_loss: Optional[float] = None
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def batches(n: int, batch_size: int, generator: torch.Generator) -> list[np.ndarray]:
    order = torch.randperm(n, generator=generator).numpy()
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (train_idx, val_idx); val is empty when fraction is 0."""
    n_val = int(round(n * fraction)) if n > 1 else 0
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_unrefined(spec: ArchitectureSpec, data: DecoySplit, cfg: TrainConfig,
                  out_dir=None, dataset_name: str = "") -> ModelHandle:
    """Train with cross-entropy only (Adam at the architecture's learning rate).

    The parameters with the best held-out accuracy are kept. When ``out_dir``
    is given, the checkpoint, metadata and per-step losses are written there.
    """
    if len(data) == 0:
        raise ValueError("training split is empty")
    if data.images.shape[1:] != spec.input_shape:
        raise ShapeError(f"data images {data.images.shape[1:]} do not match {spec.input_shape}")
    handle = build_model(spec, cfg.seed)
    model = handle.model
    opt = torch.optim.Adam(model.parameters(), lr=spec.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    tr_idx, val_idx = holdout_split(len(data), cfg.val_fraction, cfg.seed)
    labels = torch.as_tensor(data.labels, device=handle.device)
    losses = LossLog(Path(out_dir) / "losses.csv" if out_dir else None)
    best_acc, best_state, history = -1.0, None, []
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        t0, total = time.time(), 0.0
        for b in batches(len(tr_idx), cfg.batch_size, gen):
            idx = tr_idx[b]
            logits = model(handle.prepare(data.images[idx]))
            loss = F.cross_entropy(logits, labels[idx])
            if not torch.isfinite(loss):
                raise NumericInstabilityError(f"cross-entropy became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            ce = loss.item()
            losses.append(step, LossBreakdown(ce=ce, expl=0.0, reg=0.0, total=ce,
                                              lambda1=1.0, lambda2=0.0, lam=0.0))
            total += ce * len(idx)
            step += 1
        mean_loss = total / len(tr_idx)
        if len(val_idx):
            acc = float((predict(handle, data.images[val_idx]) == data.labels[val_idx]).mean())
        else:
            acc = -mean_loss
        history.append({"epoch": epoch + 1, "loss": mean_loss, "val_acc": acc,
                        "seconds": time.time() - t0})
        log.info("unrefined epoch %d loss %.4f val_acc %.4f", epoch + 1, mean_loss, acc)
        if acc > best_acc:
            best_acc, best_state = acc, copy.deepcopy(model.state_dict())
        if cfg.stop_loss is not None and mean_loss <= cfg.stop_loss:
            break
    losses.close()
    model.load_state_dict(best_state)
    model.eval()
    handle.provenance = {"dataset": dataset_name, "seed": cfg.seed, "epochs": len(history),
                         "method": "unrefined", "batch_size": cfg.batch_size}
    if out_dir:
        handle.save(out_dir, {"history": history, "final_loss": history[-1]["loss"]})
    return handle


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def is_finite_model(model: nn.Module) -> bool:
    return all(torch.isfinite(p).all() for p in model.parameters())


__all__ = ["ArchitectureSpec", "ConvBlock", "ConvNet", "ModelHandle", "TrainConfig", "PRESETS",
           "DEFAULT_BATCH", "preset", "build_model", "fit_unrefined", "forward_with_features",
           "predict", "get_device", "count_parameters"]
