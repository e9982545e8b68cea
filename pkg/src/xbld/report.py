"""Report tables, published reference numbers, and saliency galleries."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Optional, Sequence

import numpy as np

from .evalmetrics import EvalReport, write_curves_csv

DATASETS = MappingProxyType({
    "fmnist": "Decoy Fashion MNIST",
    "cifar10": "Decoy CIFAR-10",
    "coco2": "Decoy MS-COCO(2)",
})
METHOD_LABELS = MappingProxyType({
    "unrefined": "Unrefined", "xbl_d": "XBL-D", "rrr": "RRR", "rrr_g": "RRR-G",
    "rbr": "RBR", "cdep": "CDEP", "hint": "HINT", "ce": "CE",
})
REFERENCE_LABEL = "[paper, full scale]"
ACCURACY_COLUMNS = ("method", "dataset", "accuracy", "paper_reference_full_scale")
SUMMARY_COLUMNS = ("metric", "method", "dataset", "value", "threshold", "paper_reference_full_scale")


@dataclass(frozen=True)
class Reference:
    value: float
    citation: str


def _table(citation: str, rows: dict) -> MappingProxyType:
    return MappingProxyType({ds: MappingProxyType({m: Reference(v, f"{citation}, {DATASETS[ds]}")
                                                   for m, v in vals.items()})
                             for ds, vals in rows.items()})


# Published classification accuracy on the clean test sets.
ACCURACY_REFERENCE = _table("Table I", {
    "fmnist": {"unrefined": 0.862, "xbl_d": 0.904, "rrr": 0.894, "rrr_g": 0.786,
               "rbr": 0.876, "cdep": 0.767, "hint": 0.582, "ce": 0.858},
    "cifar10": {"unrefined": 0.789, "xbl_d": 0.843, "rrr": 0.810},
    "coco2": {"unrefined": 0.845, "xbl_d": 0.938, "rrr": 0.853},
})

# Published Activation Recall / Precision summaries.
AR_REFERENCE = _table("Table II AR", {
    "fmnist": {"unrefined": 0.280, "xbl_d": 0.557, "rrr": 0.335},
    "cifar10": {"unrefined": 0.419, "xbl_d": 0.516, "rrr": 0.432},
    "coco2": {"unrefined": 0.500, "xbl_d": 0.860, "rrr": 0.841},
})
AP_REFERENCE = _table("Table II AP", {
    "fmnist": {"unrefined": 0.318, "xbl_d": 0.663, "rrr": 0.425},
    "cifar10": {"unrefined": 0.168, "xbl_d": 0.342, "rrr": 0.181},
    "coco2": {"unrefined": 0.609, "xbl_d": 0.698, "rrr": 0.761},
})

# Threshold at which each summary value was read off the curves.
SUMMARY_THRESHOLD = MappingProxyType({
    ("AR", "fmnist"): 40, ("AP", "fmnist"): 40,
    ("AR", "cifar10"): 40, ("AP", "cifar10"): 95,
    ("AR", "coco2"): 40, ("AP", "coco2"): 95,
})


def _ordered_methods(computed: Sequence[str], reference: Sequence[str]) -> list[str]:
    order = list(METHOD_LABELS)
    seen = list(dict.fromkeys([*computed, *reference]))
    return sorted(seen, key=lambda m: order.index(m) if m in order else len(order))


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.6g}"


def emit_report(results: Sequence[EvalReport], dataset: str, out_dir,
                expected_methods: Optional[Sequence[str]] = None) -> tuple[list[Path], bool]:
    """Write accuracy.csv, summary_ar_ap.csv, curves.csv and comparison.txt.

    Published numbers go only into the ``paper_reference_full_scale`` column.
    Returns the written paths and whether every expected method had results.
    """
    if not results:
        raise ValueError("no results to report")
    if dataset not in DATASETS:
        raise ValueError(f"unknown dataset key {dataset!r}; choose from {sorted(DATASETS)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_method = {r.method: r for r in results}
    missing = [m for m in (expected_methods or []) if m not in by_method]
    ds_label = DATASETS[dataset]

    acc_ref = ACCURACY_REFERENCE.get(dataset, {})
    acc_rows = []
    for m in _ordered_methods(list(by_method), list(acc_ref) + missing):
        ref = acc_ref.get(m)
        acc_rows.append({"method": METHOD_LABELS.get(m, m), "dataset": ds_label,
                         "accuracy": _fmt(by_method[m].accuracy) if m in by_method else "",
                         "paper_reference_full_scale": _fmt(ref.value) if ref else ""})

    summary_rows = []
    for metric, refs in (("AR", AR_REFERENCE), ("AP", AP_REFERENCE)):
        t = SUMMARY_THRESHOLD[(metric, dataset)]
        table = refs.get(dataset, {})
        for m in _ordered_methods(list(by_method), list(table) + missing):
            value = None
            if m in by_method:
                curve = by_method[m].curve(metric)
                value = curve.at(t) if t in curve.thresholds else None
            ref = table.get(m)
            summary_rows.append({"metric": metric, "method": METHOD_LABELS.get(m, m),
                                 "dataset": ds_label, "value": _fmt(value), "threshold": t,
                                 "paper_reference_full_scale": _fmt(ref.value) if ref else ""})

    paths = [out_dir / "accuracy.csv", out_dir / "summary_ar_ap.csv", out_dir / "curves.csv",
             out_dir / "comparison.txt"]
    for path, cols, rows in ((paths[0], ACCURACY_COLUMNS, acc_rows),
                             (paths[1], SUMMARY_COLUMNS, summary_rows)):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            writer.writerows(rows)
    write_curves_csv([c for r in results for c in r.curves], paths[2])
    paths[3].write_text(_comparison_text(ds_label, acc_rows, summary_rows, missing))
    return paths, not missing


def _comparison_text(ds_label, acc_rows, summary_rows, missing) -> str:
    ref_col = f"reference {REFERENCE_LABEL}"
    lines = [f"Dataset: {ds_label} (computed values are desk scale)", "",
             "Classification accuracy (clean test set)",
             f"{'method':<12}{'computed':>12}  {ref_col}"]
    for r in acc_rows:
        lines.append(f"{r['method']:<12}{r['accuracy'] or '-':>12}  "
                     f"{r['paper_reference_full_scale'] or '-'}")
    lines += ["", "Explanation summary",
              f"{'metric':<8}{'method':<12}{'t':>4}{'computed':>12}  {ref_col}"]
    for r in summary_rows:
        lines.append(f"{r['metric']:<8}{r['method']:<12}{r['threshold']:>4}{r['value'] or '-':>12}  "
                     f"{r['paper_reference_full_scale'] or '-'}")
    if missing:
        lines += ["", "PARTIAL: no results for " + ", ".join(missing)]
    return "\n".join(lines) + "\n"


def saliency_gallery(handle, split, out_dir, n: int = 4, seed: int = 0,
                     indices: Optional[Sequence[int]] = None) -> tuple[Path, list[str]]:
    """One grid image: per instance the input, Grad-CAM overlay, object and confounder masks.

    Instances are drawn with a seeded generator unless ``indices`` is given.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evalmetrics import explain_split

    if indices is None:
        if n < 1:
            raise ValueError("gallery needs at least one instance")
        rng = np.random.default_rng(seed)
        indices = sorted(rng.choice(len(split), size=min(n, len(split)), replace=False).tolist())
    indices = list(indices)
    sub = split.subset(indices)
    maps = explain_split(handle, sub.images, sub.labels)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(len(indices), 4, figsize=(8, 2.1 * len(indices)), squeeze=False)
    for row, i in enumerate(range(len(indices))):
        img = sub.images[i]
        shown = img[..., 0] if img.shape[2] == 1 else img
        cmap = "gray" if img.shape[2] == 1 else None
        panels = [(shown, cmap, "input"), (shown, cmap, "Grad-CAM"),
                  (sub.obj_masks[i], "gray", "object mask"), (sub.con_masks[i], "gray", "confounder")]
        for ax, (data, cm, title) in zip(axes[row], panels):
            ax.imshow(data, cmap=cm, vmin=0, vmax=1)
            if title == "Grad-CAM":
                ax.imshow(maps[i], cmap="jet", alpha=0.5, vmin=0, vmax=1)
            ax.set_title(f"{sub.ids[i]} {title}" if title == "input" else title, fontsize=7)
            ax.axis("off")
    fig.tight_layout()
    path = out_dir / "gallery.png"
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path, list(sub.ids)
