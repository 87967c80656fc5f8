"""Procedural labeled test scenes: ground planes, walls, boxes and poles.

Points are sampled uniformly on the primitives' triangle surfaces, so the
scene mesh is exact by construction and every expected value (labels,
visibility, areas) is analytically computable. This is the substrate for
the closed-loop tests.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .camera import Pose
from .ingest import Mesh, Scan, Scene

RECIPE_SCHEMA = "pc2d-recipe/1"


@dataclass
class Primitive:
    """One surface primitive.

    Geometry by kind:
      plane: center = rectangle center, size = (sx, sy), horizontal at center z
      wall:  center = rectangle center, size = (length, height), vertical,
             normal along `axis` ("x" or "y")
      box:   center = box center, size = (sx, sy, sz)
      pole:  center = base center, size = (radius, height), a regular prism
             with `sides` facets plus caps
    """

    kind: str
    class_id: int
    density: float
    center: tuple
    size: tuple
    axis: str = "y"
    sides: int = 12

    def __post_init__(self):
        if self.kind not in ("plane", "wall", "box", "pole"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.density <= 0:
            raise ValueError("density must be > 0")
        if not 0 <= self.class_id < 255:  # 255 is the ignore label downstream
            raise ValueError(f"class_id {self.class_id} outside [0, 254]")


@dataclass
class TrajectorySpec:
    """Sensor path: a straight line or a horizontal arc, identity headings."""

    kind: str = "line"
    start: tuple = (0.0, 0.0, 1.8)
    end: tuple = (0.0, 0.0, 1.8)
    center: tuple = (0.0, 0.0, 1.8)
    radius: float = 10.0
    angles: tuple = (0.0, 180.0)
    count: int = 10

    def poses(self):
        if self.count < 1:
            raise ValueError("trajectory needs at least one pose")
        if self.kind == "line":
            a = np.asarray(self.start, dtype=np.float64)
            b = np.asarray(self.end, dtype=np.float64)
            ts = np.linspace(0.0, 1.0, self.count)
            positions = a[None, :] + ts[:, None] * (b - a)[None, :]
        elif self.kind == "arc":
            c = np.asarray(self.center, dtype=np.float64)
            ang = np.radians(np.linspace(self.angles[0], self.angles[1], self.count))
            positions = c[None, :] + self.radius * np.stack(
                [np.cos(ang), np.sin(ang), np.zeros_like(ang)], axis=1
            )
        else:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        return [Pose(np.eye(3), p) for p in positions]


@dataclass
class SceneRecipe:
    primitives: list
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    intensity_by_class: dict = field(default_factory=dict)
    seed: int = 0


def _rect_mesh(c0, c1, c2, c3):
    verts = np.array([c0, c1, c2, c3], dtype=np.float64)
    tris = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return verts, tris


def primitive_mesh(prim):
    """Exact triangles of one primitive: (vertices, triangle indices)."""
    cx, cy, cz = (float(v) for v in prim.center)
    if prim.kind == "plane":
        sx, sy = prim.size
        return _rect_mesh(
            (cx - sx / 2, cy - sy / 2, cz), (cx + sx / 2, cy - sy / 2, cz),
            (cx + sx / 2, cy + sy / 2, cz), (cx - sx / 2, cy + sy / 2, cz),
        )
    if prim.kind == "wall":
        length, height = prim.size
        if prim.axis == "y":  # extends along x, faces +-y
            return _rect_mesh(
                (cx - length / 2, cy, cz - height / 2), (cx + length / 2, cy, cz - height / 2),
                (cx + length / 2, cy, cz + height / 2), (cx - length / 2, cy, cz + height / 2),
            )
        if prim.axis == "x":
            return _rect_mesh(
                (cx, cy - length / 2, cz - height / 2), (cx, cy + length / 2, cz - height / 2),
                (cx, cy + length / 2, cz + height / 2), (cx, cy - length / 2, cz + height / 2),
            )
        raise ValueError(f"wall axis must be 'x' or 'y', got {prim.axis!r}")
    if prim.kind == "box":
        sx, sy, sz = prim.size
        hx, hy, hz = sx / 2, sy / 2, sz / 2
        corners = np.array(
            [
                [cx - hx, cy - hy, cz - hz], [cx + hx, cy - hy, cz - hz],
                [cx + hx, cy + hy, cz - hz], [cx - hx, cy + hy, cz - hz],
                [cx - hx, cy - hy, cz + hz], [cx + hx, cy - hy, cz + hz],
                [cx + hx, cy + hy, cz + hz], [cx - hx, cy + hy, cz + hz],
            ],
            dtype=np.float64,
        )
        quads = [
            (0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4),
            (2, 3, 7, 6), (1, 2, 6, 5), (3, 0, 4, 7),
        ]
        tris = []
        for a, b, c, d in quads:
            tris += [[a, b, c], [a, c, d]]
        return corners, np.asarray(tris, dtype=np.int64)
    # pole: regular prism with caps
    radius, height = prim.size
    n = prim.sides
    ang = 2 * np.pi * np.arange(n) / n
    ring = np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(n, cz)])
    top = np.column_stack([ring, np.full(n, cz + height)])
    verts = np.vstack([bottom, top])
    tris = []
    for i in range(n):
        j = (i + 1) % n
        tris += [[i, j, n + j], [i, n + j, n + i]]
    for i in range(1, n - 1):  # caps as fans
        tris.append([0, i + 1, i])
        tris.append([n, n + i, n + i + 1])
    return verts, np.asarray(tris, dtype=np.int64)


def _triangle_areas(verts, tris):
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def _sample_on_triangles(verts, tris, n, rng):
    areas = _triangle_areas(verts, tris)
    total = areas.sum()
    if total <= 0 or n == 0:
        return np.zeros((0, 3))
    which = rng.choice(len(tris), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a, b, c = verts[tris[which, 0]], verts[tris[which, 1]], verts[tris[which, 2]]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def generate(recipe):
    """Generate a Scene with exact labels and an exact primitive-derived mesh."""
    rng = np.random.default_rng(recipe.seed)
    poses = recipe.trajectory.poses()

    all_pts, all_lbl = [], []
    mesh_verts, mesh_tris, mesh_lbl = [], [], []
    offset = 0
    for prim in recipe.primitives:
        verts, tris = primitive_mesh(prim)
        area = _triangle_areas(verts, tris).sum()
        n = int(rng.poisson(area * prim.density))
        pts = _sample_on_triangles(verts, tris, n, rng)
        all_pts.append(pts)
        all_lbl.append(np.full(len(pts), prim.class_id, dtype=np.int32))
        mesh_verts.append(verts)
        mesh_tris.append(tris + offset)
        mesh_lbl.append(np.full(len(verts), prim.class_id, dtype=np.int32))
        offset += len(verts)

    if all_pts:
        points = np.concatenate(all_pts)
        labels = np.concatenate(all_lbl)
    else:
        points = np.zeros((0, 3))
        labels = np.zeros(0, dtype=np.int32)

    def class_intensity(cid):
        return float(recipe.intensity_by_class.get(cid, recipe.intensity_by_class.get(str(cid), 0.5)))

    intensity = np.array([class_intensity(c) for c in labels], dtype=np.float32)

    # split points into one chunk per trajectory pose so the scene can be
    # exported to the standard per-scan layout
    n, n_scans = len(points), len(poses)
    base, rem = divmod(n, n_scans)
    sizes = np.full(n_scans, base, dtype=np.int64)
    sizes[:rem] += 1
    scan_ids = np.repeat(np.arange(n_scans, dtype=np.int64), sizes)
    point_idx = np.arange(n, dtype=np.int64) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    provenance = np.stack([scan_ids, point_idx], axis=1)

    mesh = None
    if mesh_verts:
        mv = np.concatenate(mesh_verts)
        mesh = Mesh(
            vertices=mv,
            triangles=np.concatenate(mesh_tris),
            vertex_label=np.concatenate(mesh_lbl),
            vertex_intensity=np.array(
                [class_intensity(c) for c in np.concatenate(mesh_lbl)], dtype=np.float32
            ),
        )
    return Scene(
        points=points,
        intensity=intensity,
        labels=labels,
        provenance=provenance,
        sensor_trajectory=poses,
        mesh=mesh,
    )


def scene_to_scans(scene):
    """Split a scene back into sensor-frame scans via provenance."""
    scans = []
    for sid in np.unique(scene.provenance[:, 0]):
        sel = scene.provenance[:, 0] == sid
        pose = scene.sensor_trajectory[int(sid)]
        order = np.argsort(scene.provenance[sel, 1])
        scans.append(
            Scan(
                points=pose.inverse_transform(scene.points[sel][order]),
                intensity=scene.intensity[sel][order],
                labels=scene.labels[sel][order],
                scan_id=int(sid),
            )
        )
    poses = list(scene.sensor_trajectory)
    return scans, poses


def recipe_to_json(recipe, path):
    doc = {
        "schema": RECIPE_SCHEMA,
        "seed": recipe.seed,
        "intensity_by_class": {str(k): v for k, v in recipe.intensity_by_class.items()},
        "trajectory": {
            "kind": recipe.trajectory.kind,
            "start": list(recipe.trajectory.start),
            "end": list(recipe.trajectory.end),
            "center": list(recipe.trajectory.center),
            "radius": recipe.trajectory.radius,
            "angles": list(recipe.trajectory.angles),
            "count": recipe.trajectory.count,
        },
        "primitives": [
            {
                "kind": p.kind,
                "class_id": p.class_id,
                "density": p.density,
                "center": list(p.center),
                "size": list(p.size),
                "axis": p.axis,
                "sides": p.sides,
            }
            for p in recipe.primitives
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def recipe_from_json(path):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema") != RECIPE_SCHEMA:
        raise ValueError(f"{path}: unknown recipe schema {doc.get('schema')!r}")
    t = doc.get("trajectory", {})
    traj = TrajectorySpec(
        kind=t.get("kind", "line"),
        start=tuple(t.get("start", (0, 0, 1.8))),
        end=tuple(t.get("end", (0, 0, 1.8))),
        center=tuple(t.get("center", (0, 0, 1.8))),
        radius=float(t.get("radius", 10.0)),
        angles=tuple(t.get("angles", (0.0, 180.0))),
        count=int(t.get("count", 10)),
    )
    prims = [
        Primitive(
            kind=p["kind"],
            class_id=int(p["class_id"]),
            density=float(p["density"]),
            center=tuple(p["center"]),
            size=tuple(p["size"]),
            axis=p.get("axis", "y"),
            sides=int(p.get("sides", 12)),
        )
        for p in doc["primitives"]
    ]
    return SceneRecipe(
        primitives=prims,
        trajectory=traj,
        intensity_by_class={int(k): float(v) for k, v in doc.get("intensity_by_class", {}).items()},
        seed=int(doc.get("seed", 0)),
    )


def demo_recipe(seed=0):
    """Street-like scene: ground plane, two walls, four boxes (~50k points)."""
    prims = [
        Primitive("plane", class_id=0, density=20.0, center=(0.0, 0.0, 0.0), size=(40.0, 40.0)),
        Primitive("wall", class_id=1, density=60.0, center=(0.0, 8.0, 2.0), size=(24.0, 4.0), axis="y"),
        Primitive("wall", class_id=1, density=60.0, center=(0.0, -8.0, 2.0), size=(24.0, 4.0), axis="y"),
        Primitive("box", class_id=2, density=50.0, center=(-8.0, 4.0, 1.0), size=(2.0, 2.0, 2.0)),
        Primitive("box", class_id=2, density=50.0, center=(8.0, 4.0, 1.0), size=(2.0, 2.0, 2.0)),
        Primitive("box", class_id=2, density=50.0, center=(-8.0, -4.0, 1.0), size=(2.0, 2.0, 2.0)),
        Primitive("box", class_id=2, density=50.0, center=(8.0, -4.0, 1.0), size=(2.0, 2.0, 2.0)),
    ]
    traj = TrajectorySpec(kind="line", start=(-14.0, 0.0, 1.8), end=(14.0, 0.0, 1.8), count=20)
    intensities = {0: 0.25, 1: 0.65, 2: 0.9}
    return SceneRecipe(primitives=prims, trajectory=traj, intensity_by_class=intensities, seed=seed)
