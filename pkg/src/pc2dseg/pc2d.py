"""Emit synthetic (image, label) training datasets from annotated scenes.

Scenes are drawn round-robin; each sample gets a fresh camera pose from its
own RNG stream (derived from the dataset seed and the sample id), so
parallel emission writes exactly what serial emission would. Samples whose
label image is nearly empty are re-drawn a bounded number of times.

Output layout, the contract for any external 2D training framework:
  images/shard_<k>/<sample>.png
  labels/shard_<k>/<sample>.png
  manifest.json
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import render, vgo
from .camera import CameraView, Intrinsics, Pose
from .ingest import IGNORE_LABEL, load_scene

DATASET_SCHEMA = "pc2d-dataset/1"
MIN_LABEL_FRACTION = 0.01
MAX_REDRAWS = 10


@dataclass
class DatasetSpec:
    scene_paths: list
    vgo_config: vgo.VgoConfig = field(default_factory=vgo.VgoConfig)
    channel_config: str = "trimerge"
    resolution: str = "LD"
    n_samples: int = 1
    seed: int = 0
    shard_size: int = 1000
    render_range: tuple = render.DEFAULT_RENDER_RANGE
    point_px: int | None = None

    def __post_init__(self):
        if not self.scene_paths:
            raise ValueError("dataset needs at least one scene")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.shard_size < 1:
            raise ValueError("shard_size must be >= 1")
        render.get_channel_config(self.channel_config)
        if isinstance(self.resolution, str):
            if self.resolution not in vgo.RESOLUTIONS:
                raise ValueError(f"resolution must be one of {sorted(vgo.RESOLUTIONS)}")
        else:
            w, h = self.resolution  # explicit (width, height) also accepted
            if w < 1 or h < 1:
                raise ValueError(f"bad resolution {self.resolution}")


_SCENES = {}


def _get_scene(path):
    scene = _SCENES.get(path)
    if scene is None:
        scene = load_scene(path)
        if not (scene.labels != IGNORE_LABEL).any():
            raise ValueError(f"{path}: scene has no labels; cannot supervise a dataset")
        _SCENES[path] = scene
    return scene


def _render_sample(spec, sample_id, out_dir):
    """Render one sample deterministically; returns its manifest entry."""
    scene_idx = sample_id % len(spec.scene_paths)
    scene_path = str(spec.scene_paths[scene_idx])
    scene = _get_scene(scene_path)
    cfg = replace(spec.vgo_config, resolution=spec.resolution)
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(sample_id)]))

    retries = 0
    while True:
        family = cfg.families[int(rng.integers(len(cfg.families)))]
        view = vgo.sample_view(scene, family, cfg, rng, view_id=sample_id)
        rendered = render.compose_view(
            scene, view, spec.channel_config, spec.render_range, spec.point_px
        )
        frac = float((rendered.label_image != IGNORE_LABEL).mean())
        if frac >= MIN_LABEL_FRACTION or retries >= MAX_REDRAWS:
            break
        retries += 1

    shard = sample_id // spec.shard_size
    image_rel = f"images/shard_{shard}/{sample_id:08d}.png"
    label_rel = f"labels/shard_{shard}/{sample_id:08d}.png"
    (out_dir / f"images/shard_{shard}").mkdir(parents=True, exist_ok=True)
    (out_dir / f"labels/shard_{shard}").mkdir(parents=True, exist_ok=True)
    render.write_view_png(rendered, out_dir / image_rel)
    render.write_label_png(rendered.label_image, out_dir / label_rel)

    k = view.intrinsics
    return {
        "sample_id": sample_id,
        "scene_id": scene_idx,
        "scene": scene_path,
        "family": view.pose_family,
        "pose": [float(x) for x in view.pose.matrix().ravel()],
        "intrinsics": {
            "width": k.width, "height": k.height,
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
        },
        "image": image_rel,
        "label": label_rel,
        "retries": retries,
        "label_fraction": frac,
    }


_EMIT_SPEC = {}


def _emit_worker_init(spec, out_dir):
    _EMIT_SPEC["spec"] = spec
    _EMIT_SPEC["out_dir"] = Path(out_dir)


def _emit_worker(sample_id):
    return _render_sample(_EMIT_SPEC["spec"], sample_id, _EMIT_SPEC["out_dir"])


def emit_dataset(spec, out_dir, overwrite=False, jobs=1):
    """Render n_samples (image, label) pairs plus a manifest; deterministic."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not overwrite:
        raise FileExistsError(f"{out_dir} already holds a dataset; pass overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)

    sample_ids = list(range(spec.n_samples))
    if jobs <= 1 or spec.n_samples <= 1:
        entries = [_render_sample(spec, sid, out_dir) for sid in sample_ids]
    else:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_emit_worker_init, initargs=(spec, out_dir)
        ) as pool:
            entries = list(pool.map(_emit_worker, sample_ids, chunksize=4))

    manifest = {
        "schema": DATASET_SCHEMA,
        "channel_config": spec.channel_config,
        "resolution": spec.resolution,
        "render_range": list(spec.render_range),
        "point_px": spec.point_px,
        "seed": spec.seed,
        "shard_size": spec.shard_size,
        "n_samples": spec.n_samples,
        "scenes": [str(p) for p in spec.scene_paths],
        "samples": entries,
    }
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def view_from_manifest_entry(entry):
    """Rebuild the exact camera of a manifest sample (for re-rendering)."""
    pose = Pose.from_matrix(np.asarray(entry["pose"], dtype=np.float64).reshape(3, 4))
    ik = entry["intrinsics"]
    intr = Intrinsics(ik["width"], ik["height"], ik["fx"], ik["fy"], ik["cx"], ik["cy"])
    return CameraView(pose, intr, int(entry["sample_id"]), entry.get("family", ""))
