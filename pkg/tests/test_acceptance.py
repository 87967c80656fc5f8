"""Acceptance suite: every release criterion as one test, one PASS line each.

Run with `pytest tests/test_acceptance.py -v -s`. All checks use the
built-in oracle segmenter only; no external adapter is required.
"""

import hashlib
import math
import time

import numpy as np
import pytest

from pc2dseg import camera, fuse, ingest, render, synthetic, vgo
from pc2dseg.cli import main
from pc2dseg.fuse import FuseConfig, VoteTable, backproject_view, finalize_labels, fuse_scene
from pc2dseg.metrics import ConfusionMatrix, iou, miou
from pc2dseg.segmenter import LogitTensor, OracleConfig, OracleSegmenter

from conftest import make_view
from oracles import analytic_hidden, reference_fuse, reference_rasterize, reference_splat

CLOSED_LOOP_SECONDS = 300.0


def criterion(name, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_sha(root, pattern="*"):
    return {
        str(p.relative_to(root)): sha(p) for p in sorted(root.rglob(pattern)) if p.is_file()
    }


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

def test_closed_loop_exactness(demo_scene):
    # plane + 2 walls + boxes (~50k points), car_conic_top_bottom at 20
    # poses per family, zero-noise oracle, delta 0.5, range [1, 30], LD
    t0 = time.perf_counter()
    config = vgo.VgoConfig.from_preset(
        "car_conic_top_bottom", poses_per_family=20, seed=1, resolution="LD"
    )
    views = vgo.generate_views(demo_scene, config)
    labels, table = fuse_scene(
        demo_scene,
        views,
        FuseConfig(depth_range=(1.0, 30.0), occlusion_margin=0.5),
        OracleSegmenter(3, OracleConfig()),
        "trimerge",
        (1.0, 30.0),
        jobs=1,
        return_table=True,
    )
    elapsed = time.perf_counter() - t0

    voted = table.counts > 0
    cm = ConfusionMatrix(["ground", "wall", "box"]).accumulate(
        demo_scene.labels[voted], labels[voted]
    )
    m = miou(cm)
    criterion(
        "closed-loop exactness: mIoU >= 0.99 over points visible in >= 1 view",
        m >= 0.99,
        f"mIoU {m:.4f} over {int(voted.sum())} voted points",
    )
    criterion(
        "closed-loop runtime < 5 min single-threaded at LD",
        elapsed < CLOSED_LOOP_SECONDS,
        f"{elapsed:.1f}s for {len(views)} views",
    )


# ---------------------------------------------------------------------------
# occlusion
# ---------------------------------------------------------------------------

def test_occlusion_correctness(wall_fixture):
    scene = wall_fixture["scene"]
    views = wall_fixture["views"]
    rect = wall_fixture["rect"]
    hidden_idx = wall_fixture["hidden_idx"]
    seg = OracleSegmenter(3, OracleConfig())

    # the probes are analytically hidden from every frontal view
    for v in views:
        hidden = analytic_hidden(v.pose.translation, scene.points[hidden_idx], rect)
        assert hidden.all()

    counts = {}
    for delta in (0.0, 0.5, 5.0, np.inf):
        cfg = FuseConfig(depth_range=(1.0, 30.0), occlusion_enabled=True, occlusion_margin=delta)
        _, table = fuse_scene(scene, views, cfg, seg, "trimerge", (1.0, 30.0), return_table=True)
        counts[delta] = table.counts
    _, table_off = fuse_scene(
        scene, views, FuseConfig(occlusion_enabled=False), seg, "trimerge", (1.0, 30.0),
        return_table=True,
    )

    criterion(
        "occlusion on, delta=0: zero votes reach analytically hidden points",
        int(counts[0.0][hidden_idx].sum()) == 0,
        f"{int(counts[0.0][hidden_idx].sum())} stray votes",
    )
    criterion(
        "occlusion off: hidden points do receive votes",
        bool((table_off.counts[hidden_idx] > 0).all()),
    )
    deltas = [0.0, 0.5, 5.0, np.inf]
    monotone = all(
        np.all(counts[b] >= counts[a]) for a, b in zip(deltas, deltas[1:])
    )
    criterion("vote counts monotone in delta over {0, 0.5, 5, inf}", monotone)
    criterion(
        "delta -> inf limit equals occlusion disabled",
        np.array_equal(counts[np.inf], table_off.counts),
    )


# ---------------------------------------------------------------------------
# fusion equals brute force
# ---------------------------------------------------------------------------

def test_fusion_oracle_equivalence():
    rng = np.random.default_rng(77)
    n, c = 1000, 4
    points = np.stack(
        [rng.uniform(-8, 8, n), rng.uniform(-8, 8, n), rng.uniform(0, 3, n)], axis=1
    )
    cfg = FuseConfig(depth_range=(1.0, 30.0), occlusion_margin=0.5)
    view_data = []
    for vid, eye in enumerate([(-6, -12, 3), (0, -12, 2), (6, -12, 4), (0, 14, 3), (12, 0, 2)]):
        view = make_view(eye, (0, 0, 1), view_id=vid, width=48, height=24)
        mesh_depth = np.full((24, 48), np.inf)
        mesh_depth[:, ::2] = rng.uniform(5.0, 25.0, (24, 24))
        rendered = render.RenderedView(
            view_id=vid,
            channels=np.zeros((0, 24, 48), dtype=np.float32),
            channel_names=(),
            point_depth=np.full((24, 48), np.inf),
            mesh_depth=mesh_depth,
            label_image=None,
        )
        logits = LogitTensor(vid, rng.normal(size=(c, 24, 48)).astype(np.float32))
        view_data.append((view, rendered, logits))

    table = VoteTable(n, c)
    holder = type("S", (), {"n_points": n, "points": points})()
    for view, rendered, logits in view_data:
        backproject_view(holder, view, rendered, logits, cfg, table)
    got = finalize_labels(table)
    ref_sums, ref_counts, ref_labels = reference_fuse(points, view_data, cfg, c)

    criterion(
        "fusion equals brute-force reference bitwise (logit sums)",
        np.array_equal(table.logit_sums, ref_sums) and np.array_equal(table.counts, ref_counts),
    )
    criterion(
        "fusion equals brute-force reference exactly (labels, tie rule)",
        np.array_equal(got, ref_labels),
    )


# ---------------------------------------------------------------------------
# determinism of the CLI pipeline
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_scene(tmp_path_factory):
    base = tmp_path_factory.mktemp("accept_cli")
    recipe = synthetic.SceneRecipe(
        primitives=[
            synthetic.Primitive("plane", 0, 15.0, (0, 0, 0), (16.0, 16.0)),
            synthetic.Primitive("wall", 1, 40.0, (0, 4.0, 1.0), (10.0, 2.0), axis="y"),
            synthetic.Primitive("box", 2, 60.0, (3.0, -2.0, 0.5), (1.5, 1.5, 1.0)),
        ],
        trajectory=synthetic.TrajectorySpec(kind="line", start=(-5, 0, 1.7), end=(5, 0, 1.7), count=4),
        seed=5,
    )
    path = base / "recipe.json"
    synthetic.recipe_to_json(recipe, path)
    src = base / "src"
    assert main(["gen-scene", "--recipe", str(path), "--out", str(src)]) == 0
    scenes = base / "scenes"
    assert main([
        "prepare", "--scans", str(src / "scans"), "--poses", str(src / "poses.txt"),
        "--labels", str(src / "labels"), "--mesh", str(src / "mesh.ply"),
        "--group-size", "4", "--out", str(scenes),
    ]) == 0
    return base, scenes / "scene_0000.npz"


def test_determinism_and_parallel_merge(cli_scene):
    base, scene_file = cli_scene
    views_argv = ["gen-views", "--scene", str(scene_file), "--families", "car,conic,top",
                  "--poses-per-family", "2", "--seed", "21"]
    va, vb = base / "det_a.json", base / "det_b.json"
    assert main(views_argv + ["--out", str(va)]) == 0
    assert main(views_argv + ["--out", str(vb)]) == 0
    criterion("gen-views rerun is bitwise identical", sha(va) == sha(vb))

    render_argv = ["render", "--scene", str(scene_file), "--views", str(va), "--tensors"]
    ra, rb = base / "render_a", base / "render_b"
    assert main(render_argv + ["--out", str(ra)]) == 0
    assert main(render_argv + ["--out", str(rb), "--jobs", "8"]) == 0
    ha = {k: v for k, v in tree_sha(ra).items() if not k.startswith("run_")}
    hb = {k: v for k, v in tree_sha(rb).items() if not k.startswith("run_")}
    criterion("render rerun (and --jobs 8) is bitwise identical", ha == hb)

    fuse_argv = ["fuse", "--scene", str(scene_file), "--views", str(va)]
    fa, fb, fp = base / "fuse_a", base / "fuse_b", base / "fuse_p"
    assert main(fuse_argv + ["--out", str(fa)]) == 0
    assert main(fuse_argv + ["--out", str(fb)]) == 0
    assert main(fuse_argv + ["--out", str(fp), "--jobs", "8"]) == 0
    criterion(
        "fuse rerun is bitwise identical",
        sha(fa / "labels.npy") == sha(fb / "labels.npy")
        and sha(fa / "summary.json") == sha(fb / "summary.json"),
    )
    criterion(
        "fuse --jobs 8 equals serial bitwise (ordered merge)",
        sha(fa / "labels.npy") == sha(fp / "labels.npy"),
    )

    ds_argv = ["gen-dataset", "--scenes", str(scene_file), "--n-samples", "6",
               "--shard-size", "4", "--seed", "3", "--poses-per-family", "1"]
    da, db, dp = base / "ds_a", base / "ds_b", base / "ds_p"
    assert main(ds_argv + ["--out", str(da)]) == 0
    assert main(ds_argv + ["--out", str(db)]) == 0
    assert main(ds_argv + ["--out", str(dp), "--jobs", "8"]) == 0
    ha = {k: v for k, v in tree_sha(da).items() if not k.startswith("run_")}
    hb = {k: v for k, v in tree_sha(db).items() if not k.startswith("run_")}
    hp = {k: v for k, v in tree_sha(dp).items() if not k.startswith("run_")}
    criterion("gen-dataset rerun is bitwise identical", ha == hb)
    criterion("gen-dataset --jobs 8 equals serial bitwise", ha == hp)


# ---------------------------------------------------------------------------
# VGO contract
# ---------------------------------------------------------------------------

def test_vgo_contract(demo_scene):
    config = vgo.VgoConfig.from_preset("car_conic_top_bottom", seed=2)
    views = vgo.generate_views(demo_scene, config)
    per_family = {f: sum(v.pose_family == f for v in views) for f in vgo.FAMILIES}
    criterion(
        "paper preset emits exactly 800 views (4 x 200)",
        len(views) == 800 and all(n == 200 for n in per_family.values()),
        str(per_family),
    )

    clean = vgo.no_jitter(vgo.VgoConfig(seed=2, poses_per_family=25))
    sig_ok = True
    for v in vgo.generate_views(demo_scene, clean):
        fwd = v.pose.rotation[:, 2]
        if v.pose_family == "top":
            sig_ok &= bool(np.abs(fwd - (0, 0, -1)).max() < 1e-6)
        elif v.pose_family == "bottom":
            sig_ok &= bool(np.abs(fwd - (0, 0, 1)).max() < 1e-6)
        elif v.pose_family == "car":
            sig_ok &= bool(abs(fwd[2]) < 1e-12)
    jittered = vgo.VgoConfig(families=("car",), poses_per_family=100, seed=3, rot_jitter_deg=5.0)
    bound = math.sin(math.radians(5.0)) + 1e-12
    for v in vgo.generate_views(demo_scene, jittered):
        sig_ok &= bool(abs(v.pose.rotation[2, 2]) <= bound)
    criterion("family geometric signatures hold", sig_ok)


# ---------------------------------------------------------------------------
# MODO contract
# ---------------------------------------------------------------------------

def test_modo_contract(demo_scene, tmp_path):
    cfgs = render.CHANNEL_CONFIGS
    criterion(
        "trimerge channels are (point intensity, mesh intensity, mesh depth)",
        cfgs["trimerge"].channels == ("point_intensity", "mesh_intensity", "mesh_depth"),
    )
    criterion(
        "trimerge_normals_XY channels are (point intensity, mesh depth, normal X, normal Y)",
        cfgs["trimerge_normals_XY"].channels
        == ("point_intensity", "mesh_depth", "mesh_normal_x", "mesh_normal_y"),
    )

    view = make_view((0, -12, 5), (0, 0, 1), width=256, height=128)
    ok = True
    worst = 0.0
    for name in ("trimerge", "trimerge_normals_XY"):
        rv = render.compose_view(demo_scene, view, name)
        png = tmp_path / f"{name}.png"
        render.write_view_png(rv, png)
        back = render.read_view_png(png)
        err = float(np.abs(back - rv.channels).max())
        worst = max(worst, err)
        ok &= err <= 1.0 / 255.0
        di = rv.channel_names.index("mesh_depth")
        depth_err = float(
            np.abs(render.decode_depth(back[di]) - np.clip(rv.mesh_depth, 0, render.D_ENC)).max()
        )
        ok &= depth_err <= render.D_ENC / 255.0
        for ch in rv.channel_names:
            if ch.startswith("mesh_normal_"):
                ni = rv.channel_names.index(ch)
                ok &= float(np.abs(back[ni] - rv.channels[ni]).max()) <= 1.0 / 255.0
    criterion(
        "depth/normal encodings round-trip within 1/255 after PNG quantization",
        ok,
        f"worst channel error {worst:.6f}",
    )


# ---------------------------------------------------------------------------
# vote robustness under a noisy segmenter
# ---------------------------------------------------------------------------

def test_vote_robustness(demo_scene):
    config = vgo.VgoConfig.from_preset(
        "car_conic_top_bottom", poses_per_family=13, seed=4, resolution=(256, 128)
    )
    views = vgo.generate_views(demo_scene, config)  # 52 views
    assert len(views) >= 50
    seg = OracleSegmenter(3, OracleConfig(flip_prob=0.3, seed=11))
    cfg = FuseConfig(depth_range=(1.0, 30.0), occlusion_margin=0.5)

    table = VoteTable(demo_scene.n_points, 3)
    pixel_accs = []
    for view in sorted(views, key=lambda v: v.view_id):
        rendered = render.compose_view(demo_scene, view, "trimerge", (1.0, 30.0))
        logits = seg(rendered)
        known = rendered.label_image != ingest.IGNORE_LABEL
        if known.any():
            pred = logits.grid.argmax(axis=0)
            pixel_accs.append(float((pred[known] == rendered.label_image[known]).mean()))
        backproject_view(demo_scene, view, rendered, logits, cfg, table)
    labels = finalize_labels(table)

    voted = table.counts > 0
    fused_acc = float((labels[voted] == demo_scene.labels[voted]).mean())
    single = float(np.mean(pixel_accs))
    criterion(
        "fused accuracy beats mean single-view accuracy by >= 10 points (flip 0.3, 50+ views)",
        fused_acc >= single + 0.10,
        f"fused {fused_acc:.4f} vs single-view mean {single:.4f} over {len(views)} views",
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_metrics_exactness():
    cm = ConfusionMatrix(["a", "b"])
    cm.accumulate(np.array([1] * 50 + [0] * 50), np.array([1] * 100))
    criterion("hand confusion matrix: TP=50 FP=50 FN=0 gives IoU exactly 0.5", iou(cm, 1) == 0.5)

    cm2 = ConfusionMatrix(["a", "b"])
    cm2.accumulate(np.array([0, 0, 1, 1]), np.array([0, 0, 1, 1]))
    criterion("perfect prediction gives IoU exactly 1.0", miou(cm2) == 1.0)

    protocol = ingest.load_mapping("uda11_semantickitti")
    truth = np.arange(11).repeat(5)
    pred = truth.copy()
    for cid in protocol.excluded_from_miou:
        pred[truth == cid] = 0 if cid != 0 else 1
    cm3 = ConfusionMatrix(protocol.class_names).accumulate(truth, pred)
    names = {protocol.class_names[c] for c in protocol.excluded_from_miou}
    included = [c for c in range(11) if c not in protocol.excluded_from_miou]
    expect = float(np.mean([iou(cm3, c) for c in included]))
    criterion(
        "UDA protocol excludes other-vehicle/manmade from mIoU",
        names == {"other-vehicle", "manmade"} and miou(cm3, protocol) == pytest.approx(expect),
    )


# ---------------------------------------------------------------------------
# projection and rasterization math
# ---------------------------------------------------------------------------

def test_projection_math():
    rng = np.random.default_rng(19)
    worst = 0.0
    total = 0
    while total < 10_000:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        ang = rng.uniform(0, 2 * np.pi)
        kx, ky, kz = axis
        k = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
        rot = np.eye(3) + np.sin(ang) * k + (1 - np.cos(ang)) * (k @ k)
        pose = camera.Pose(rot, rng.uniform(-20, 20, 3))
        view = camera.CameraView(pose, camera.Intrinsics.from_hfov(1024, 512, 90.0), 0)
        cam_pts = np.stack(
            [rng.uniform(-8, 8, 2500), rng.uniform(-4, 4, 2500), rng.uniform(0.3, 60, 2500)], axis=1
        )
        world = pose.transform(cam_pts)
        uv, z, valid = camera.project(view, world)
        back = camera.unproject(view, uv[valid, 0], uv[valid, 1], z[valid])
        worst = max(worst, float(np.linalg.norm(back - world[valid], axis=1).max()))
        total += int(valid.sum())
    criterion(
        "project/unproject round trip within 1e-6 m over 10k random pairs",
        worst < 1e-6,
        f"worst {worst:.2e} m over {total} pairs",
    )

    view = make_view((0.5, -6.0, 2.0), (0, 0, 1.5), width=64, height=32)
    pts = np.stack(
        [rng.uniform(-6, 6, 500), rng.uniform(-2, 6, 500), rng.uniform(-1, 5, 500)], axis=1
    )
    win_ref, d_ref = reference_splat(pts, view, 2, (1.0, 30.0))
    win, d = render.splat_index(pts, view, 2, (1.0, 30.0))
    splat_ok = np.array_equal(win, win_ref) and np.array_equal(d, d_ref)

    nv = 24
    verts = np.stack(
        [rng.uniform(-8, 8, nv), rng.uniform(-4, 4, nv), rng.uniform(3.0, 20.0, nv)], axis=1
    )
    tris = rng.integers(0, nv, (30, 3))
    keep = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    mesh = ingest.Mesh(vertices=verts, triangles=tris[keep])
    front = camera.CameraView(camera.Pose.identity(), camera.Intrinsics.from_hfov(48, 24, 90.0), 0)
    tri_ref, w_ref, dm_ref = reference_rasterize(mesh, front)
    tri, w, dm = render.rasterize_index(mesh, front)
    mesh_ok = (
        np.array_equal(tri, tri_ref) and np.array_equal(dm, dm_ref) and np.array_equal(w, w_ref)
    )
    criterion("rasterizer equals brute-force z-buffer exactly", splat_ok and mesh_ok)


# ---------------------------------------------------------------------------
# pseudo-label round trip
# ---------------------------------------------------------------------------

def test_pseudo_label_round_trip(tmp_path):
    recipe = synthetic.SceneRecipe(
        primitives=[
            synthetic.Primitive("plane", 0, 25.0, (0, 0, 0), (6.0, 6.0)),
            synthetic.Primitive("box", 2, 80.0, (1, 1, 0.5), (1.0, 1.0, 1.0)),
        ],
        trajectory=synthetic.TrajectorySpec(count=3),
        seed=23,
    )
    scene = synthetic.generate(recipe)
    fused = (np.arange(scene.n_points, dtype=np.int32) * 3) % 4
    fused[::7] = 255
    fuse.export_pseudolabels(scene, fused, tmp_path / "labels", ignore_id=255)
    scans, poses = synthetic.scene_to_scans(scene)
    ingest.write_sequence(scans, poses, tmp_path / "scans", tmp_path / "poses.txt")
    back_scans, back_poses = ingest.read_sequence(
        tmp_path / "scans", tmp_path / "poses.txt", tmp_path / "labels"
    )
    rebuilt = ingest.assemble_scene(back_scans, back_poses, group_size=3)[0]
    criterion(
        "pseudo-label export -> re-ingest -> identical labels across a 3-scan scene",
        np.array_equal(rebuilt.labels, fused),
    )
