import numpy as np
import pytest

from pc2dseg import synthetic
from pc2dseg.camera import CameraView, Intrinsics, Pose, look_at
from pc2dseg.ingest import Mesh, Scene


def make_view(eye, target, view_id=0, width=256, height=128, hfov=90.0, family=""):
    pose = look_at(eye, target)
    return CameraView(pose, Intrinsics.from_hfov(width, height, hfov), view_id, family)


@pytest.fixture(scope="session")
def demo_scene():
    """Street-like synthetic scene (~50k points): plane, two walls, four boxes."""
    return synthetic.generate(synthetic.demo_recipe(seed=7))


@pytest.fixture(scope="session")
def wall_fixture():
    """A single wall with probe points behind (hidden) and in front (visible).

    Probes sit well inside the wall's silhouette shadow from every frontal
    view, so the analytic ray test and the rendered occlusion agree without
    edge effects.
    """
    rng = np.random.default_rng(42)
    # wall rectangle: plane y = 0, x in [-6, 6], z in [0, 5]
    rect = {"axis": "y", "value": 0.0, "lo": (-6.0, 0.0), "hi": (6.0, 5.0)}
    wall_prim = synthetic.Primitive(
        "wall", class_id=1, density=50.0, center=(0.0, 0.0, 2.5), size=(12.0, 5.0), axis="y"
    )
    wverts, wtris = synthetic.primitive_mesh(wall_prim)
    wall_pts = synthetic._sample_on_triangles(wverts, wtris, 3000, rng)

    # hidden probes strictly behind the wall, >= 2 m inside its silhouette
    gx, gy, gz = np.meshgrid(
        np.linspace(-4.0, 4.0, 9), np.array([2.0, 4.0]), np.linspace(0.5, 4.5, 9)
    )
    hidden_pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    # visible probes between the cameras and the wall
    fx_, fz_ = np.meshgrid(np.linspace(-4.0, 4.0, 7), np.linspace(0.5, 4.5, 5))
    front_pts = np.stack([fx_.ravel(), np.full(fx_.size, -4.0), fz_.ravel()], axis=1)

    points = np.concatenate([wall_pts, hidden_pts, front_pts])
    labels = np.concatenate(
        [
            np.full(len(wall_pts), 1, dtype=np.int32),
            np.full(len(hidden_pts), 2, dtype=np.int32),
            np.full(len(front_pts), 0, dtype=np.int32),
        ]
    )
    n = len(points)
    provenance = np.stack([np.zeros(n, dtype=np.int64), np.arange(n, dtype=np.int64)], axis=1)
    mesh = Mesh(
        vertices=wverts,
        triangles=wtris,
        vertex_intensity=np.full(len(wverts), 0.6, dtype=np.float32),
        vertex_label=np.full(len(wverts), 1, dtype=np.int32),
    )
    scene = Scene(
        points=points,
        intensity=np.full(n, 0.5, dtype=np.float32),
        labels=labels,
        provenance=provenance,
        sensor_trajectory=[Pose(np.eye(3), np.array([0.0, -10.0, 2.5]))],
        mesh=mesh,
    )
    views = []
    for i, (ex, ey) in enumerate([(-2.0, -10.0), (0.0, -10.0), (2.0, -10.0),
                                  (-2.0, -14.0), (0.0, -14.0), (2.0, -14.0)]):
        views.append(make_view((ex, ey, 2.5), (ex, 0.0, 2.5), view_id=i))
    hidden_idx = np.arange(len(wall_pts), len(wall_pts) + len(hidden_pts))
    front_idx = np.arange(len(wall_pts) + len(hidden_pts), n)
    return {
        "scene": scene,
        "views": views,
        "rect": rect,
        "hidden_idx": hidden_idx,
        "front_idx": front_idx,
    }
