"""Confusion matrices, per-class IoU and protocol-aware mIoU reports.

Truth labels of 255 are skipped entirely. A prediction of 255 against a
valid truth is kept in a separate "unpredicted" column and counts as a
false negative, so unvoted points hurt recall instead of vanishing.
"""

import csv
import json
import math
from pathlib import Path

import numpy as np

from .ingest import IGNORE_LABEL


class ConfusionMatrix:
    """C x C counts (rows truth, columns prediction) plus unpredicted tallies."""

    def __init__(self, class_names):
        self.class_names = list(class_names)
        c = len(self.class_names)
        self.counts = np.zeros((c, c), dtype=np.int64)
        self.unpredicted = np.zeros(c, dtype=np.int64)

    @property
    def class_count(self):
        return len(self.class_names)

    def accumulate(self, truth, pred):
        truth = np.asarray(truth).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if len(truth) != len(pred):
            raise ValueError(f"{len(truth)} truth labels vs {len(pred)} predictions")
        c = self.class_count
        for name, arr in (("truth", truth), ("prediction", pred)):
            bad = (arr != IGNORE_LABEL) & ((arr < 0) | (arr >= c))
            if bad.any():
                raise ValueError(
                    f"{name} label {int(arr[bad][0])} out of range for {c} classes"
                )
        keep = truth != IGNORE_LABEL
        t, p = truth[keep], pred[keep]
        unpred = p == IGNORE_LABEL
        np.add.at(self.unpredicted, t[unpred], 1)
        tv, pv = t[~unpred], p[~unpred]
        self.counts += np.bincount(tv * c + pv, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other):
        if other.class_names != self.class_names:
            raise ValueError("cannot merge matrices over different class sets")
        self.counts += other.counts
        self.unpredicted += other.unpredicted
        return self

    def tp_fp_fn(self, class_id):
        tp = int(self.counts[class_id, class_id])
        fp = int(self.counts[:, class_id].sum()) - tp
        fn = int(self.counts[class_id, :].sum()) - tp + int(self.unpredicted[class_id])
        return tp, fp, fn


def iou(cm, class_id):
    """TP / (TP + FP + FN); nan when the class never occurs."""
    tp, fp, fn = cm.tp_fp_fn(class_id)
    denom = tp + fp + fn
    if denom == 0:
        return float("nan")
    return tp / denom


def miou(cm, protocol=None):
    """Mean IoU over the protocol's included classes.

    Classes absent from both truth and prediction are excluded from the
    mean, as are the protocol's excluded_from_miou classes (still reported
    per class).
    """
    excluded = set()
    if protocol is not None:
        excluded = set(protocol.excluded_from_miou)
    vals = []
    for cid in range(cm.class_count):
        if cid in excluded:
            continue
        v = iou(cm, cid)
        if not math.isnan(v):
            vals.append(v)
    if not vals:
        return float("nan")
    return float(np.mean(vals))


def report(cm, protocol=None):
    """Per-class IoU table plus mIoU, as a plain dict."""
    excluded = set(protocol.excluded_from_miou) if protocol is not None else set()
    per_class = []
    for cid, name in enumerate(cm.class_names):
        tp, fp, fn = cm.tp_fp_fn(cid)
        v = iou(cm, cid)
        per_class.append(
            {
                "class_id": cid,
                "name": name,
                "tp": tp,
                "fp": fp,
                "fn": fn,
                "iou": None if math.isnan(v) else v,
                "in_miou": cid not in excluded,
            }
        )
    m = miou(cm, protocol)
    return {
        "classes": per_class,
        "miou": None if math.isnan(m) else m,
        "excluded_from_miou": sorted(excluded),
    }


def format_table(rep):
    """Aligned text table: one IoU column per class plus mIoU."""
    headers = [c["name"] + ("*" if not c["in_miou"] else "") for c in rep["classes"]]
    headers.append("mIoU")
    cells = []
    for c in rep["classes"]:
        cells.append("-" if c["iou"] is None else f"{100 * c['iou']:.2f}")
    cells.append("-" if rep["miou"] is None else f"{100 * rep['miou']:.2f}")
    widths = [max(len(h), len(v)) for h, v in zip(headers, cells)]
    head = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    row = "  ".join(v.rjust(w) for v, w in zip(cells, widths))
    note = "* excluded from mIoU" if rep["excluded_from_miou"] else ""
    lines = [head, row]
    if note:
        lines.append(note)
    return "\n".join(lines) + "\n"


def write_report(cm, protocol, out_dir, figure=True):
    """Emit report.json, report.csv, report.txt and an IoU bar figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rep = report(cm, protocol)

    with open(out_dir / "report.json", "w") as f:
        json.dump(rep, f, indent=2, sort_keys=True)
        f.write("\n")

    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class_id", "name", "tp", "fp", "fn", "iou", "in_miou"])
        for c in rep["classes"]:
            writer.writerow(
                [c["class_id"], c["name"], c["tp"], c["fp"], c["fn"],
                 "" if c["iou"] is None else f"{c['iou']:.6f}", int(c["in_miou"])]
            )
        writer.writerow(["", "mIoU", "", "", "",
                         "" if rep["miou"] is None else f"{rep['miou']:.6f}", ""])

    table = format_table(rep)
    with open(out_dir / "report.txt", "w") as f:
        f.write(table)

    if figure:
        _write_iou_figure(rep, out_dir / "iou_per_class.png")
    return rep


def _write_iou_figure(rep, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [c["name"] for c in rep["classes"]]
    vals = [0.0 if c["iou"] is None else 100 * c["iou"] for c in rep["classes"]]
    colors = ["#4878a8" if c["in_miou"] else "#b0b0b0" for c in rep["classes"]]

    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(names) + 1.5), 3.2))
    ax.bar(range(len(names)), vals, color=colors)
    if rep["miou"] is not None:
        ax.axhline(100 * rep["miou"], color="#c04040", lw=1.0, ls="--",
                   label=f"mIoU {100 * rep['miou']:.2f}")
        ax.legend(frameon=False, fontsize=8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=8)
    ax.set_ylabel("IoU (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
