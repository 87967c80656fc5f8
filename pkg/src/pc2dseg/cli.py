"""Command-line pipeline: prepare scenes, generate views, render, infer,
fuse, export pseudo-labels and evaluate.

Every command reads an optional JSON config file; explicit flags win over
config values. Each run writes a ``run_<command>.json`` next to its outputs
recording the resolved config and the sha256 of every artifact, so reruns
are directly diffable. Exit codes: 0 ok, 2 config error, 3 missing
artifact, 4 adapter failure.
"""

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, fuse, metrics, pc2d, render, segmenter, synthetic, tensorio, vgo
from . import ingest
from .camera import load_view_manifest, save_view_manifest
from .ingest import IGNORE_LABEL

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_ADAPTER = 4

SCHEMA_VERSIONS = {
    "scene": ingest.SCENE_SCHEMA,
    "views": "pc2d-views/1",
    "dataset": pc2d.DATASET_SCHEMA,
    "mapping": ingest.MAPPING_SCHEMA,
    "recipe": synthetic.RECIPE_SCHEMA,
    "tensor": "PC2DTNSR/1",
    "labels": "uint32-le-low16/1",
}


def _version_string():
    formats = ", ".join(f"{name}={schema}" for name, schema in sorted(SCHEMA_VERSIONS.items()))
    return f"pc2dseg {__version__} (file formats: {formats})"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run(out_dir, command, config, artifact_paths):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    for p in artifact_paths:
        p = Path(p)
        artifacts[str(p.relative_to(out_dir)) if p.is_relative_to(out_dir) else str(p)] = _sha256(p)
    doc = {"command": command, "config": config, "artifacts": artifacts}
    path = out_dir / f"run_{command}.json"
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


class Cfg:
    """Flag-over-config resolution: explicit flags beat the config file."""

    def __init__(self, args):
        self.args = vars(args)
        self.file = {}
        cfg_path = self.args.get("config")
        if cfg_path:
            if not Path(cfg_path).exists():
                raise FileNotFoundError(f"config file not found: {cfg_path}")
            with open(cfg_path) as f:
                self.file = json.load(f)
            if set(self.file) >= {"command", "config"}:  # replaying a run record
                self.file = self.file["config"]

    def get(self, key, default=None):
        v = self.args.get(key)
        if v is not None:
            return v
        v = self.file.get(key)
        if v is not None:
            return v
        return default

    def resolved(self, keys):
        return {k: self.get(k) for k in sorted(keys)}


def _parse_range(text):
    try:
        near, far = (float(x) for x in str(text).split(":"))
    except ValueError:
        raise ValueError(f"range must look like '1:30', got {text!r}") from None
    return near, far


def _vgo_config(cfg, seed=None):
    preset = cfg.get("vgo_preset")
    overrides = {}
    families = cfg.get("families")
    if families:
        overrides["families"] = tuple(f.strip() for f in str(families).split(","))
    for key, name in (
        ("poses_per_family", "poses_per_family"),
        ("hfov", "hfov_deg"),
        ("pos_jitter", "pos_jitter"),
        ("rot_jitter", "rot_jitter_deg"),
    ):
        v = cfg.get(key)
        if v is not None:
            overrides[name] = v
    overrides["seed"] = int(cfg.get("seed", 0)) if seed is None else seed
    overrides["resolution"] = cfg.get("resolution", "LD")
    if cfg.get("no_jitter"):
        overrides["pos_jitter"] = 0.0
        overrides["rot_jitter_deg"] = 0.0
    if preset:
        return vgo.VgoConfig.from_preset(preset, **overrides)
    return vgo.VgoConfig(**overrides)


def _fuse_config(cfg):
    occl = cfg.get("occlusion")
    return fuse.FuseConfig(
        depth_range=_parse_range(cfg.get("fuse_range", "1:30")),
        occlusion_enabled=True if occl is None else bool(occl),
        occlusion_margin=float(cfg.get("delta", 0.5)),
        vote_mode=cfg.get("vote_mode", "logits"),
    )


def _class_count(cfg, scene):
    classes = cfg.get("classes")
    if classes is not None:
        return int(classes)
    valid = scene.labels[scene.labels != IGNORE_LABEL]
    if valid.size == 0:
        raise ValueError("scene has no labels; pass --classes")
    return int(valid.max()) + 1


def _load_labels(path):
    """Labels from .npy, a scene .npz, or a directory of .label files."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"label source not found: {p}")
    if p.is_dir():
        files = sorted(p.glob("*.label"))
        if not files:
            raise FileNotFoundError(f"no .label files in {p}")
        parts = [(np.fromfile(f, dtype="<u4") & 0xFFFF).astype(np.int32) for f in files]
        return np.concatenate(parts)
    if p.suffix == ".npy":
        return np.load(p).astype(np.int32)
    if p.suffix == ".npz":
        return ingest.load_scene(p).labels
    raise ValueError(f"cannot read labels from {p}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_scene(args):
    cfg = Cfg(args)
    recipe_path = cfg.get("recipe")
    if not recipe_path:
        raise ValueError("gen-scene needs --recipe")
    out = Path(cfg.get("out", "."))
    recipe = synthetic.recipe_from_json(recipe_path)
    scene = synthetic.generate(recipe)
    scans, poses = synthetic.scene_to_scans(scene)
    ingest.write_sequence(scans, poses, out / "scans", out / "poses.txt", out / "labels")
    artifacts = sorted((out / "scans").glob("*.bin")) + sorted((out / "labels").glob("*.label"))
    artifacts.append(out / "poses.txt")
    if scene.mesh is not None:
        ingest.write_ply(scene.mesh, out / "mesh.ply")
        artifacts.append(out / "mesh.ply")
    _write_run(out, "gen-scene", {"recipe": str(recipe_path), "seed": recipe.seed}, artifacts)
    print(f"wrote {len(scans)} scans ({scene.n_points} points) to {out}")
    return EXIT_OK


def cmd_prepare(args):
    cfg = Cfg(args)
    scans_dir = cfg.get("scans")
    poses_file = cfg.get("poses")
    if not scans_dir or not poses_file:
        raise ValueError("prepare needs --scans and --poses")
    out = Path(cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)

    scans, poses = ingest.read_sequence(scans_dir, poses_file, cfg.get("labels"))
    scenes = ingest.assemble_scene(scans, poses, int(cfg.get("group_size", 100)))

    mesh_arg = cfg.get("mesh")
    mapping = None
    if cfg.get("mapping"):
        mapping = ingest.load_mapping(cfg.get("mapping"))

    artifacts = []
    for i, scene in enumerate(scenes):
        scene = ingest.normalize_intensity(scene)
        crop_z = cfg.get("crop_z")
        if crop_z is not None:
            scene = ingest.crop_ground(scene, float(crop_z))
        densify_k = cfg.get("densify_k")
        if densify_k is not None:
            unlabeled = int(cfg.get("unlabeled_id", 0))
            scene = ingest.densify_labels(scene, scene.labels != unlabeled, int(densify_k))
        if mapping is not None:
            scene = ingest.map_classes(scene, mapping)
        if mesh_arg:
            mp = Path(mesh_arg)
            mesh_file = mp / f"scene_{i:04d}.ply" if mp.is_dir() else mp
            if mp.is_file() and len(scenes) > 1:
                raise ValueError("one mesh file but several scenes; pass a mesh directory")
            if mesh_file.exists():
                scene.mesh = ingest.read_ply(mesh_file)
                ingest.ensure_mesh_attributes(scene)
        path = out / f"scene_{i:04d}.npz"
        ingest.save_scene(scene, path)
        artifacts.append(path)
        print(f"scene_{i:04d}: {scene.n_points} points, {len(scene.sensor_trajectory)} poses")

    keys = ("scans", "poses", "labels", "mesh", "group_size", "crop_z",
            "densify_k", "unlabeled_id", "mapping", "out")
    _write_run(out, "prepare", cfg.resolved(keys), artifacts)
    return EXIT_OK


def cmd_gen_views(args):
    cfg = Cfg(args)
    scene_path = cfg.get("scene")
    if not scene_path:
        raise ValueError("gen-views needs --scene")
    out = cfg.get("out")
    if not out:
        raise ValueError("gen-views needs --out")
    scene = ingest.load_scene(scene_path)
    config = _vgo_config(cfg)
    views = vgo.generate_views(scene, config)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_view_manifest(views, out)
    keys = ("scene", "vgo_preset", "families", "poses_per_family", "seed",
            "resolution", "hfov", "no_jitter", "out")
    _write_run(out.parent, "gen-views", cfg.resolved(keys), [out])
    print(f"{len(views)} views -> {out}")
    return EXIT_OK


_RENDER_CTX = {}


def _render_worker_init(scene_path, channels, rng, point_px, out_dir, tensors):
    _RENDER_CTX.update(
        scene=ingest.load_scene(scene_path), channels=channels, range=rng,
        point_px=point_px, out=Path(out_dir), tensors=tensors,
    )


def _render_worker(view):
    c = _RENDER_CTX
    rendered = render.compose_view(c["scene"], view, c["channels"], c["range"], c["point_px"])
    paths = _write_rendered(rendered, c["out"], c["tensors"])
    return [str(p) for p in paths]


def _write_rendered(rendered, out_dir, tensors):
    vid = rendered.view_id
    paths = [out_dir / f"{vid}.png", out_dir / f"{vid}.label.png"]
    render.write_view_png(rendered, paths[0])
    render.write_label_png(rendered.label_image, paths[1])
    if tensors:
        paths += [out_dir / f"{vid}.tensor", out_dir / f"{vid}.depth.tensor"]
        render.write_view_tensors(rendered, paths[2], paths[3])
    return paths


def cmd_render(args):
    cfg = Cfg(args)
    scene_path, views_path = cfg.get("scene"), cfg.get("views")
    if not scene_path or not views_path:
        raise ValueError("render needs --scene and --views")
    if not Path(views_path).exists():
        raise FileNotFoundError(f"view manifest not found: {views_path} (run gen-views)")
    out = Path(cfg.get("out", "renders"))
    out.mkdir(parents=True, exist_ok=True)
    views = load_view_manifest(views_path)
    channels = cfg.get("channels", "trimerge")
    rng = _parse_range(cfg.get("render_range", "1:30"))
    point_px = cfg.get("point_px")
    tensors = bool(cfg.get("tensors"))
    jobs = int(cfg.get("jobs", 1))

    artifacts = []
    if jobs <= 1:
        scene = ingest.load_scene(scene_path)
        for view in views:
            rendered = render.compose_view(scene, view, channels, rng, point_px)
            artifacts += _write_rendered(rendered, out, tensors)
    else:
        with ProcessPoolExecutor(
            max_workers=jobs,
            initializer=_render_worker_init,
            initargs=(scene_path, channels, rng, point_px, out, tensors),
        ) as pool:
            for paths in pool.map(_render_worker, views, chunksize=1):
                artifacts += [Path(p) for p in paths]

    keys = ("scene", "views", "channels", "render_range", "point_px", "tensors", "out")
    _write_run(out, "render", cfg.resolved(keys), artifacts)
    print(f"rendered {len(views)} views -> {out}")
    return EXIT_OK


def cmd_gen_dataset(args):
    cfg = Cfg(args)
    scenes_arg = cfg.get("scenes")
    if not scenes_arg:
        raise ValueError("gen-dataset needs --scenes")
    paths = []
    for part in str(scenes_arg).split(","):
        p = Path(part)
        if p.is_dir():
            paths += sorted(str(q) for q in p.glob("scene_*.npz"))
        elif p.exists():
            paths.append(str(p))
        else:
            raise FileNotFoundError(f"scene not found: {p} (run prepare)")
    if not paths:
        raise FileNotFoundError(f"no scene files under {scenes_arg} (run prepare)")
    out = Path(cfg.get("out", "dataset"))
    spec = pc2d.DatasetSpec(
        scene_paths=paths,
        vgo_config=_vgo_config(cfg),
        channel_config=cfg.get("channels", "trimerge"),
        resolution=cfg.get("resolution", "LD"),
        n_samples=int(cfg.get("n_samples", 1)),
        seed=int(cfg.get("seed", 0)),
        shard_size=int(cfg.get("shard_size", 1000)),
        render_range=_parse_range(cfg.get("render_range", "1:30")),
        point_px=cfg.get("point_px"),
    )
    manifest = pc2d.emit_dataset(spec, out, overwrite=bool(cfg.get("overwrite")), jobs=int(cfg.get("jobs", 1)))
    artifacts = [out / "manifest.json"]
    artifacts += [out / e["image"] for e in manifest["samples"]]
    artifacts += [out / e["label"] for e in manifest["samples"]]
    keys = ("scenes", "channels", "resolution", "n_samples", "seed", "shard_size",
            "render_range", "point_px", "vgo_preset", "families", "poses_per_family", "out")
    _write_run(out, "gen-dataset", cfg.resolved(keys), artifacts)
    print(f"{spec.n_samples} samples -> {out}")
    return EXIT_OK


def _load_rendered_for_view(renders_dir, view, config_name, need_channels, need_label):
    vid = view.view_id
    renders_dir = Path(renders_dir)
    depth_path = renders_dir / f"{vid}.depth.tensor"
    chan_path = renders_dir / f"{vid}.tensor"
    label_path = renders_dir / f"{vid}.label.png"
    if not depth_path.exists():
        raise FileNotFoundError(f"{depth_path} missing (run render --tensors)")
    if need_channels and not chan_path.exists():
        raise FileNotFoundError(f"{chan_path} missing (run render --tensors)")
    if need_label and not label_path.exists():
        raise FileNotFoundError(f"{label_path} missing (run render)")
    if need_channels:
        return render.read_view_tensors(
            chan_path, depth_path, label_path if label_path.exists() else None, vid, config_name
        )
    depths = tensorio.read_tensor(depth_path)
    label = render.read_label_png(label_path) if label_path.exists() else None
    return render.RenderedView(
        view_id=vid,
        channels=np.zeros((0,) + depths.shape[1:], dtype=np.float32),
        channel_names=(),
        point_depth=depths[0].astype(np.float64),
        mesh_depth=depths[1].astype(np.float64),
        label_image=label,
        channel_config_name=config_name,
    )


def cmd_infer(args):
    cfg = Cfg(args)
    renders_dir, views_path = cfg.get("renders"), cfg.get("views")
    if not renders_dir or not views_path:
        raise ValueError("infer needs --renders and --views")
    if not Path(views_path).exists():
        raise FileNotFoundError(f"view manifest not found: {views_path} (run gen-views)")
    views = load_view_manifest(views_path)
    out = Path(cfg.get("out", "logits"))
    out.mkdir(parents=True, exist_ok=True)
    classes = cfg.get("classes")
    if classes is None:
        raise ValueError("infer needs --classes")
    classes = int(classes)

    adapter_cmd = cfg.get("adapter_cmd")
    artifacts = []
    if adapter_cmd:
        rendered = [
            _load_rendered_for_view(renders_dir, v, cfg.get("channels", ""), True, False)
            for v in views
        ]
        tensors = segmenter.run_external(
            rendered, adapter_cmd, out, classes,
            channel_config=cfg.get("channels", ""),
            batch_size=int(cfg.get("batch_size", segmenter.DEFAULT_BATCH_SIZE)),
            timeout=cfg.get("timeout"),
        )
        artifacts = [out / f"{t.view_id}.logits" for t in tensors]
    else:
        ocfg = segmenter.OracleConfig(
            flip_prob=float(cfg.get("flip_prob", 0.0)),
            logit_scale=float(cfg.get("alpha", 1.0)),
            noise_sigma=float(cfg.get("sigma", 0.0)),
            seed=int(cfg.get("oracle_seed", 0)),
        )
        for v in views:
            rv = _load_rendered_for_view(renders_dir, v, "", False, True)
            logits = segmenter.oracle_infer(rv, classes, ocfg)
            path = out / f"{v.view_id}.logits"
            tensorio.write_tensor(path, logits.grid)
            artifacts.append(path)

    keys = ("renders", "views", "classes", "adapter_cmd", "batch_size",
            "flip_prob", "alpha", "sigma", "oracle_seed", "out")
    _write_run(out, "infer", cfg.resolved(keys), artifacts)
    print(f"logits for {len(views)} views -> {out}")
    return EXIT_OK


def cmd_fuse(args):
    cfg = Cfg(args)
    scene_path, views_path = cfg.get("scene"), cfg.get("views")
    if not scene_path or not views_path:
        raise ValueError("fuse needs --scene and --views")
    if not Path(views_path).exists():
        raise FileNotFoundError(f"view manifest not found: {views_path} (run gen-views)")
    scene = ingest.load_scene(scene_path)
    views = sorted(load_view_manifest(views_path), key=lambda v: v.view_id)
    out = Path(cfg.get("out", "fused"))
    out.mkdir(parents=True, exist_ok=True)
    fcfg = _fuse_config(cfg)
    channels = cfg.get("channels", "trimerge")
    rng = _parse_range(cfg.get("render_range", "1:30"))
    point_px = cfg.get("point_px")
    classes = _class_count(cfg, scene)
    jobs = int(cfg.get("jobs", 1))

    logits_dir = cfg.get("logits")
    adapter_cmd = cfg.get("adapter_cmd")
    if logits_dir:
        renders_dir = cfg.get("renders")
        if not renders_dir:
            raise ValueError("fuse --logits needs --renders for the depth maps")
        table = fuse.VoteTable(scene.n_points, classes)
        for view in views:
            rendered = _load_rendered_for_view(renders_dir, view, "", False, False)
            logits = segmenter.load_logits(
                Path(logits_dir) / f"{view.view_id}.logits", view.view_id,
                (rendered.height, rendered.width), classes,
            )
            fuse.backproject_view(scene, view, rendered, logits, fcfg, table)
        labels = fuse.finalize_labels(table)
    elif adapter_cmd:
        table = fuse.VoteTable(scene.n_points, classes)
        batch = int(cfg.get("batch_size", segmenter.DEFAULT_BATCH_SIZE))
        work = out / "adapter_work"
        for i in range(0, len(views), batch):
            chunk = views[i : i + batch]
            rendered = [render.compose_view(scene, v, channels, rng, point_px) for v in chunk]
            tensors = segmenter.run_external(
                rendered, adapter_cmd, work, classes,
                channel_config=channels, batch_size=batch, timeout=cfg.get("timeout"),
            )
            for view, rv, lg in zip(chunk, rendered, tensors):
                fuse.backproject_view(scene, view, rv, lg, fcfg, table)
        labels = fuse.finalize_labels(table)
    else:
        ocfg = segmenter.OracleConfig(
            flip_prob=float(cfg.get("flip_prob", 0.0)),
            logit_scale=float(cfg.get("alpha", 1.0)),
            noise_sigma=float(cfg.get("sigma", 0.0)),
            seed=int(cfg.get("oracle_seed", 0)),
        )
        seg = segmenter.OracleSegmenter(classes, ocfg)
        labels, table = fuse.fuse_scene(
            scene, views, fcfg, seg, channels, rng, point_px, jobs=jobs, return_table=True
        )

    labels_path = out / "labels.npy"
    np.save(labels_path, labels.astype(np.int32))
    summary = fuse.fuse_summary(fcfg, len(views), scene.n_points, table)
    summary["channel_config"] = channels if isinstance(channels, str) else channels.name
    summary["classes"] = classes
    fuse.write_summary(summary, out / "summary.json")

    keys = ("scene", "views", "channels", "render_range", "point_px", "delta",
            "fuse_range", "occlusion", "vote_mode", "classes", "logits", "renders",
            "adapter_cmd", "flip_prob", "alpha", "sigma", "oracle_seed", "jobs", "out")
    _write_run(out, "fuse", cfg.resolved(keys), [labels_path, out / "summary.json"])
    voted = summary["voted_points"]
    print(f"fused {len(views)} views over {scene.n_points} points ({voted} voted) -> {out}")
    return EXIT_OK


def cmd_pseudo_label(args):
    cfg = Cfg(args)
    scene_path, labels_path = cfg.get("scene"), cfg.get("labels")
    if not scene_path or not labels_path:
        raise ValueError("pseudo-label needs --scene and --labels")
    if not Path(labels_path).exists():
        raise FileNotFoundError(f"fused labels not found: {labels_path} (run fuse)")
    scene = ingest.load_scene(scene_path)
    labels = np.load(labels_path)
    out = Path(cfg.get("out", "pseudo_labels"))
    written = fuse.export_pseudolabels(scene, labels, out, ignore_id=int(cfg.get("ignore_id", 0)))
    keys = ("scene", "labels", "ignore_id", "out")
    _write_run(out, "pseudo-label", cfg.resolved(keys), written)
    print(f"{len(written)} label files -> {out}")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = Cfg(args)
    truth_path, pred_path = cfg.get("truth"), cfg.get("pred")
    if not truth_path or not pred_path:
        raise ValueError("evaluate needs --truth and --pred")
    truth = _load_labels(truth_path)
    pred = _load_labels(pred_path)
    protocol_arg = cfg.get("protocol")
    if protocol_arg:
        protocol = ingest.load_mapping(protocol_arg)
        names = protocol.class_names
    else:
        protocol = None
        valid = np.concatenate([truth[truth != IGNORE_LABEL], pred[pred != IGNORE_LABEL]])
        n = int(valid.max()) + 1 if valid.size else 1
        names = [f"class_{i}" for i in range(n)]
    cm = metrics.ConfusionMatrix(names).accumulate(truth, pred)
    out = Path(cfg.get("out", "report"))
    rep = metrics.write_report(cm, protocol, out, figure=not cfg.get("no_figure"))
    sys.stdout.write(metrics.format_table(rep))
    artifacts = [out / "report.json", out / "report.csv", out / "report.txt"]
    if not cfg.get("no_figure"):
        artifacts.append(out / "iou_per_class.png")
    keys = ("truth", "pred", "protocol", "no_figure", "out")
    _write_run(out, "evaluate", cfg.resolved(keys), artifacts)
    return EXIT_OK


def cmd_run_all(args):
    """Chain gen-scene? -> prepare -> per scene: gen-views, fuse, pseudo-label -> evaluate."""
    cfg = Cfg(args)
    out = Path(cfg.get("out", "run"))
    out.mkdir(parents=True, exist_ok=True)
    ns = argparse.Namespace(**{**vars(args)})

    if cfg.get("recipe"):
        ns.out = str(out / "scene_src")
        cmd_gen_scene(ns)
        ns.scans = str(out / "scene_src" / "scans")
        ns.poses = str(out / "scene_src" / "poses.txt")
        ns.labels = str(out / "scene_src" / "labels")
        if (out / "scene_src" / "mesh.ply").exists():
            ns.mesh = str(out / "scene_src" / "mesh.ply")

    ns.out = str(out / "scenes")
    cmd_prepare(ns)
    scene_files = sorted((out / "scenes").glob("scene_*.npz"))

    for scene_file in scene_files:
        stem = scene_file.stem
        ns.scene = str(scene_file)
        ns.out = str(out / "views" / f"{stem}.views.json")
        cmd_gen_views(ns)
        ns.views = ns.out
        ns.out = str(out / "fused" / stem)
        cmd_fuse(ns)
        ns.labels = str(out / "fused" / stem / "labels.npy")
        ns.out = str(out / "pseudo_labels" / stem)
        cmd_pseudo_label(ns)

        ns.truth = str(scene_file)
        ns.pred = str(out / "fused" / stem / "labels.npy")
        ns.out = str(out / "report" / stem)
        cmd_evaluate(ns)

    print(f"run-all complete -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON config file; explicit flags override it")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="worker processes (default 1)")


def _add_vgo_flags(p):
    p.add_argument("--vgo-preset", dest="vgo_preset", help="e.g. car_conic_top_bottom")
    p.add_argument("--families", help="comma-separated subset of car,conic,top,bottom")
    p.add_argument("--poses-per-family", dest="poses_per_family", type=int)
    p.add_argument("--resolution", choices=("LD", "HD"))
    p.add_argument("--hfov", type=float, help="horizontal field of view, degrees")
    p.add_argument("--pos-jitter", dest="pos_jitter", type=float)
    p.add_argument("--rot-jitter", dest="rot_jitter", type=float)
    p.add_argument("--no-jitter", dest="no_jitter", action="store_const", const=True)


def _add_render_flags(p):
    p.add_argument("--channels", help="channel config name (trimerge, trimerge_normals_XY)")
    p.add_argument("--render-range", dest="render_range", help="near:far meters, default 1:30")
    p.add_argument("--point-px", dest="point_px", type=int)


def _add_segmenter_flags(p):
    p.add_argument("--classes", type=int, help="class count (default: from scene labels)")
    p.add_argument("--flip-prob", dest="flip_prob", type=float)
    p.add_argument("--alpha", type=float, help="oracle logit scale")
    p.add_argument("--sigma", type=float, help="oracle logit noise")
    p.add_argument("--oracle-seed", dest="oracle_seed", type=int)
    p.add_argument("--adapter-cmd", dest="adapter_cmd", help="external segmenter command line")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--timeout", type=float, help="adapter timeout, seconds")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pc2dseg",
        description="Multi-view projection pipeline for Lidar semantic segmentation",
    )
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="synthesize a labeled scene from a recipe")
    p.add_argument("--recipe", help="scene recipe JSON")
    _add_common(p)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("prepare", help="assemble, normalize, crop and label scenes")
    p.add_argument("--scans", help="directory of NNNNNN.bin scans")
    p.add_argument("--poses", help="pose text file")
    p.add_argument("--labels", help="directory of NNNNNN.label files")
    p.add_argument("--mesh", help="mesh PLY file or directory of scene_NNNN.ply")
    p.add_argument("--group-size", dest="group_size", type=int)
    p.add_argument("--crop-z", dest="crop_z", type=float,
                   help="drop points below first pose z plus this offset")
    p.add_argument("--densify-k", dest="densify_k", type=int)
    p.add_argument("--unlabeled-id", dest="unlabeled_id", type=int)
    p.add_argument("--mapping", help="class mapping name or JSON path")
    _add_common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("gen-views", help="generate virtual camera views for a scene")
    p.add_argument("--scene", help="scene .npz")
    _add_vgo_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_gen_views)

    p = sub.add_parser("render", help="render views to PNGs (and raw tensors)")
    p.add_argument("--scene")
    p.add_argument("--views", help="view manifest JSON")
    p.add_argument("--tensors", action="store_const", const=True,
                   help="also write lossless channel and depth tensors")
    _add_render_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gen-dataset", help="emit a PC2D (image, label) dataset")
    p.add_argument("--scenes", help="scene files/directories, comma separated")
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--shard-size", dest="shard_size", type=int)
    p.add_argument("--overwrite", action="store_const", const=True)
    _add_vgo_flags(p)
    _add_render_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("infer", help="run a segmenter over rendered views")
    p.add_argument("--renders", help="directory from render --tensors")
    p.add_argument("--views", help="view manifest JSON")
    p.add_argument("--channels")
    _add_segmenter_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("fuse", help="vote per-view logits back onto scene points")
    p.add_argument("--scene")
    p.add_argument("--views")
    p.add_argument("--delta", type=float, help="occlusion margin, meters")
    p.add_argument("--fuse-range", dest="fuse_range", help="vote depth range near:far")
    p.add_argument("--occlusion", dest="occlusion", action="store_const", const=True)
    p.add_argument("--no-occlusion", dest="occlusion", action="store_const", const=False)
    p.add_argument("--vote-mode", dest="vote_mode", choices=fuse.VOTE_MODES)
    p.add_argument("--logits", help="directory of precomputed <view_id>.logits")
    p.add_argument("--renders", help="render dir with depth tensors (with --logits)")
    _add_render_flags(p)
    _add_segmenter_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("pseudo-label", help="export fused labels per source scan")
    p.add_argument("--scene")
    p.add_argument("--labels", help="fused labels .npy")
    p.add_argument("--ignore-id", dest="ignore_id", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("evaluate", help="confusion matrix, IoU table, report figure")
    p.add_argument("--truth", help=".npy, scene .npz, or directory of .label files")
    p.add_argument("--pred", help=".npy or directory of .label files")
    p.add_argument("--protocol", help="class mapping name or JSON path")
    p.add_argument("--no-figure", dest="no_figure", action="store_const", const=True)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-all", help="chain prepare, gen-views, fuse, pseudo-label, evaluate")
    p.add_argument("--recipe", help="optional synthetic scene recipe to start from")
    p.add_argument("--scans")
    p.add_argument("--poses")
    p.add_argument("--labels")
    p.add_argument("--mesh")
    p.add_argument("--group-size", dest="group_size", type=int)
    p.add_argument("--crop-z", dest="crop_z", type=float)
    p.add_argument("--densify-k", dest="densify_k", type=int)
    p.add_argument("--unlabeled-id", dest="unlabeled_id", type=int)
    p.add_argument("--mapping")
    p.add_argument("--delta", type=float)
    p.add_argument("--fuse-range", dest="fuse_range")
    p.add_argument("--occlusion", dest="occlusion", action="store_const", const=True)
    p.add_argument("--no-occlusion", dest="occlusion", action="store_const", const=False)
    p.add_argument("--vote-mode", dest="vote_mode", choices=fuse.VOTE_MODES)
    p.add_argument("--protocol")
    p.add_argument("--ignore-id", dest="ignore_id", type=int)
    p.add_argument("--no-figure", dest="no_figure", action="store_const", const=True)
    _add_vgo_flags(p)
    _add_render_flags(p)
    _add_segmenter_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_run_all)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or EXIT_OK
    except segmenter.AdapterError as exc:
        print(f"adapter error: {exc}", file=sys.stderr)
        return EXIT_ADAPTER
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, KeyError, FileExistsError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
