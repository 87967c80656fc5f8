"""Back-project per-view logits onto scene points and vote.

Each point projects into each view; votes are the logits at its rounded
pixel, accumulated over views in ascending view_id order (float64 sums, so
parallel per-view contributions merged in that order match the serial run
bitwise). Occlusion tests the point's camera depth against the view's mesh
depth map with a margin: points more than `occlusion_margin` behind the
mesh surface are skipped; pixels without mesh coverage never occlude.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import camera, render
from .ingest import IGNORE_LABEL

VOTE_MODES = ("logits", "masks")


@dataclass
class FuseConfig:
    depth_range: tuple = (1.0, 30.0)
    occlusion_enabled: bool = True
    occlusion_margin: float = 0.5  # meters behind the mesh depth still voting
    vote_mode: str = "logits"

    def __post_init__(self):
        near, far = self.depth_range
        if not 0 < near < far:
            raise ValueError(f"bad depth range [{near}, {far}]")
        if self.occlusion_margin < 0:
            raise ValueError("occlusion_margin must be >= 0")
        if self.vote_mode not in VOTE_MODES:
            raise ValueError(f"vote_mode must be one of {VOTE_MODES}")


class VoteTable:
    """Per-point logit sums and vote counts."""

    def __init__(self, n_points, class_count):
        self.logit_sums = np.zeros((n_points, class_count), dtype=np.float64)
        self.counts = np.zeros(n_points, dtype=np.int64)

    @property
    def class_count(self):
        return self.logit_sums.shape[1]

    def add_votes(self, point_idx, rows):
        self.logit_sums[point_idx] += rows
        self.counts[point_idx] += 1

    def merge(self, other):
        self.logit_sums += other.logit_sums
        self.counts += other.counts
        return self


def view_votes(points, view, rendered, logits, cfg):
    """One view's contribution: (voting point indices, their logit rows).

    In mask mode, rows are the one-hot argmax of the pixel logits; all-zero
    pixels (rendered ignores) contribute a zero row in either mode.
    """
    if logits.grid.shape[1:] != rendered.point_depth.shape:
        raise ValueError(
            f"view {view.view_id}: logits grid {logits.grid.shape[1:]} != "
            f"image {rendered.point_depth.shape}"
        )
    k = view.intrinsics
    if (k.height, k.width) != rendered.point_depth.shape:
        raise ValueError(f"view {view.view_id}: rendered grids do not match intrinsics")

    uv, z, valid = camera.project(view, points)
    near, far = cfg.depth_range
    valid = valid & (z >= near) & (z <= far)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return idx, np.zeros((0, logits.class_count))

    u = camera.pixel_round(uv[idx, 0])
    v = camera.pixel_round(uv[idx, 1])
    if cfg.occlusion_enabled:
        occluded = z[idx] > rendered.mesh_depth[v, u] + cfg.occlusion_margin
        idx, u, v = idx[~occluded], u[~occluded], v[~occluded]
        if idx.size == 0:
            return idx, np.zeros((0, logits.class_count))

    rows = logits.grid[:, v, u].T.astype(np.float64)
    if cfg.vote_mode == "masks":
        onehot = np.zeros_like(rows)
        nonzero = np.any(rows != 0.0, axis=1)
        onehot[np.flatnonzero(nonzero), rows[nonzero].argmax(axis=1)] = 1.0
        rows = onehot
    return idx, rows


def backproject_view(scene, view, rendered, logits, cfg, table):
    """Accumulate one view's votes into the table (in place)."""
    if table.logit_sums.shape != (scene.n_points, logits.class_count):
        raise ValueError(
            f"vote table is {table.logit_sums.shape}, expected "
            f"({scene.n_points}, {logits.class_count})"
        )
    idx, rows = view_votes(scene.points, view, rendered, logits, cfg)
    table.add_votes(idx, rows)
    return table


def finalize_labels(table):
    """Argmax of summed logits; ties to the lowest class id; no votes -> 255."""
    labels = table.logit_sums.argmax(axis=1).astype(np.int32)
    labels[table.counts == 0] = IGNORE_LABEL
    return labels


# ---------------------------------------------------------------------------
# whole-scene fusion
# ---------------------------------------------------------------------------

_WORKER = {}


def _fuse_worker_init(scene, cfg, segmenter, channel_config, render_range, point_px):
    _WORKER.update(
        scene=scene,
        cfg=cfg,
        segmenter=segmenter,
        channel_config=channel_config,
        render_range=render_range,
        point_px=point_px,
    )


def _fuse_worker(view):
    w = _WORKER
    rendered = render.compose_view(
        w["scene"], view, w["channel_config"], w["render_range"], w["point_px"]
    )
    logits = w["segmenter"](rendered)
    idx, rows = view_votes(w["scene"].points, view, rendered, logits, w["cfg"])
    return view.view_id, idx, rows


def fuse_scene(
    scene,
    views,
    cfg,
    segmenter,
    channel_config="trimerge",
    render_range=render.DEFAULT_RENDER_RANGE,
    point_px=None,
    jobs=1,
    return_table=False,
):
    """Render every view, segment it, and vote the logits back onto points.

    Views are processed in ascending view_id order; with jobs > 1 the
    per-view contributions are computed in parallel but merged in that same
    order, so the result is bitwise identical to the serial run.
    """
    views = sorted(views, key=lambda v: v.view_id)
    table = VoteTable(scene.n_points, segmenter.class_count)

    if jobs <= 1 or len(views) <= 1:
        for view in views:
            rendered = render.compose_view(scene, view, channel_config, render_range, point_px)
            logits = segmenter(rendered)
            backproject_view(scene, view, rendered, logits, cfg, table)
    else:
        with ProcessPoolExecutor(
            max_workers=jobs,
            initializer=_fuse_worker_init,
            initargs=(scene, cfg, segmenter, channel_config, render_range, point_px),
        ) as pool:
            for _, idx, rows in pool.map(_fuse_worker, views, chunksize=1):
                table.add_votes(idx, rows)

    labels = finalize_labels(table)
    if return_table:
        return labels, table
    return labels


def fuse_summary(cfg, n_views, n_points, table):
    """Reproducibility record for one fusion run."""
    return {
        "depth_range": list(cfg.depth_range),
        "occlusion_enabled": cfg.occlusion_enabled,
        "occlusion_margin": cfg.occlusion_margin,
        "vote_mode": cfg.vote_mode,
        "n_views": int(n_views),
        "n_points": int(n_points),
        "voted_points": int((table.counts > 0).sum()),
        "total_votes": int(table.counts.sum()),
    }


# ---------------------------------------------------------------------------
# pseudo-label export
# ---------------------------------------------------------------------------

def export_pseudolabels(scene, labels, out_dir, ignore_id=0, scan_sizes=None):
    """Scatter fused labels back to one .label file per source scan.

    Files are uint32 with the semantic id in the low 16 bits; 255 (unvoted)
    becomes `ignore_id`. `scan_sizes` maps scan_id to the original point
    count; without it, cropped tail points cannot be reconstructed and the
    file covers max(point_index) + 1 entries.
    """
    labels = np.asarray(labels).reshape(-1)
    if len(labels) != scene.n_points:
        raise ValueError(f"{len(labels)} labels for {scene.n_points} points")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for sid in np.unique(scene.provenance[:, 0]):
        sel = scene.provenance[:, 0] == sid
        pidx = scene.provenance[sel, 1]
        if len(np.unique(pidx)) != len(pidx):
            raise ValueError(f"scan {sid}: duplicate provenance indices")
        size = int(pidx.max()) + 1
        if scan_sizes is not None:
            size = int(scan_sizes[int(sid)])
            if pidx.max() >= size:
                raise ValueError(f"scan {sid}: provenance index {pidx.max()} >= size {size}")
        out = np.full(size, ignore_id, dtype=np.int64)
        vals = labels[sel].astype(np.int64)
        vals[vals == IGNORE_LABEL] = ignore_id
        out[pidx] = vals
        path = out_dir / f"{int(sid):06d}.label"
        (out & 0xFFFF).astype("<u4").tofile(path)
        written.append(path)
    return written


def write_summary(summary, path):
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
