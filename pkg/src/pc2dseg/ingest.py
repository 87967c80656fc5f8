"""Read scans, poses, labels and meshes; assemble and normalize aligned scenes.

On-disk layout (KITTI style): scans are ``<dir>/NNNNNN.bin`` with one
little-endian float32 quadruple (x, y, z, intensity) per point; labels are
``<dir>/NNNNNN.label`` with one little-endian uint32 per point whose low
16 bits carry the semantic id; poses are a text file with one row-major
3x4 sensor-to-world matrix (12 floats) per scan. Other formats (e.g. the
nuScenes devkit) are supported by converting to this layout first.
"""

import io
import json
import struct
import zipfile
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .camera import Pose

IGNORE_LABEL = 255

SCENE_SCHEMA = "pc2d-scene/1"
MAPPING_SCHEMA = "pc2d-mapping/1"


@dataclass
class Scan:
    """One Lidar sweep in sensor frame, intensity as delivered by the sensor."""

    points: np.ndarray
    intensity: np.ndarray
    labels: np.ndarray | None
    scan_id: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float32).reshape(-1)
        n = len(self.points)
        if len(self.intensity) != n:
            raise ValueError(f"scan {self.scan_id}: {len(self.intensity)} intensities for {n} points")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
            if len(self.labels) != n:
                raise ValueError(f"scan {self.scan_id}: {len(self.labels)} labels for {n} points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"scan {self.scan_id}: non-finite coordinates")


@dataclass
class Mesh:
    """Triangle mesh with optional per-vertex intensity / label / normal."""

    vertices: np.ndarray
    triangles: np.ndarray
    vertex_intensity: np.ndarray | None = None
    vertex_label: np.ndarray | None = None
    vertex_normal: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        nv = len(self.vertices)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= nv):
            raise ValueError("triangle indices out of range")
        if self.vertex_intensity is not None:
            self.vertex_intensity = np.asarray(self.vertex_intensity, dtype=np.float32).reshape(-1)
            if len(self.vertex_intensity) != nv:
                raise ValueError("vertex_intensity length mismatch")
        if self.vertex_label is not None:
            self.vertex_label = np.asarray(self.vertex_label, dtype=np.int32).reshape(-1)
            if len(self.vertex_label) != nv:
                raise ValueError("vertex_label length mismatch")
        if self.vertex_normal is not None:
            self.vertex_normal = np.asarray(self.vertex_normal, dtype=np.float64).reshape(-1, 3)
            if len(self.vertex_normal) != nv:
                raise ValueError("vertex_normal length mismatch")
            norms = np.linalg.norm(self.vertex_normal, axis=1)
            if norms.size and np.abs(norms - 1.0).max() > 1e-4:
                raise ValueError("vertex normals must be unit length")


@dataclass
class Scene:
    """Aligned labeled point cloud in world frame with per-point provenance."""

    points: np.ndarray
    intensity: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray  # (N, 2): (scan_id, point index within scan)
    sensor_trajectory: list
    mesh: Mesh | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float32).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
        self.provenance = np.asarray(self.provenance, dtype=np.int64).reshape(-1, 2)
        n = len(self.points)
        for name, arr in (("intensity", self.intensity), ("labels", self.labels)):
            if len(arr) != n:
                raise ValueError(f"{name} length {len(arr)} != point count {n}")
        if len(self.provenance) != n:
            raise ValueError(f"provenance length {len(self.provenance)} != point count {n}")
        if not self.sensor_trajectory:
            raise ValueError("sensor_trajectory must be non-empty")

    @property
    def n_points(self):
        return len(self.points)

    def select(self, mask):
        """New scene keeping only the masked points (all arrays filtered together)."""
        return replace(
            self,
            points=self.points[mask],
            intensity=self.intensity[mask],
            labels=self.labels[mask],
            provenance=self.provenance[mask],
        )


@dataclass
class ClassMapping:
    """Raw dataset label ids -> common protocol class ids."""

    name: str
    source_to_common: dict
    class_names: list
    excluded_from_miou: set = field(default_factory=set)

    def __post_init__(self):
        n = len(self.class_names)
        for raw, cid in self.source_to_common.items():
            if not 0 <= cid < n:
                raise ValueError(f"mapping {self.name}: raw id {raw} maps to {cid} >= {n} classes")
        for cid in self.excluded_from_miou:
            if not 0 <= cid < n:
                raise ValueError(f"mapping {self.name}: excluded class {cid} out of range")

    @property
    def class_count(self):
        return len(self.class_names)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            doc = json.load(f)
        if doc.get("schema") != MAPPING_SCHEMA:
            raise ValueError(f"{path}: unknown mapping schema {doc.get('schema')!r}")
        return cls(
            name=doc["name"],
            source_to_common={int(k): int(v) for k, v in doc["source_to_common"].items()},
            class_names=list(doc["class_names"]),
            excluded_from_miou={int(c) for c in doc.get("excluded_from_miou", [])},
        )


def load_mapping(name_or_path):
    """Load a class mapping shipped with the package or from a JSON file."""
    p = Path(str(name_or_path))
    if p.suffix == ".json" and p.exists():
        return ClassMapping.from_json(p)
    pkg = resources.files("pc2dseg") / "mappings" / f"{name_or_path}.json"
    if not pkg.is_file():
        raise FileNotFoundError(f"no class mapping named {name_or_path!r}")
    with resources.as_file(pkg) as real:
        return ClassMapping.from_json(real)


def builtin_mappings():
    names = []
    for entry in (resources.files("pc2dseg") / "mappings").iterdir():
        if entry.name.endswith(".json"):
            names.append(entry.name[:-5])
    return sorted(names)


# ---------------------------------------------------------------------------
# sequence I/O
# ---------------------------------------------------------------------------

def read_poses(pose_file):
    """Parse a pose file: one 12-float row-major 3x4 line per scan."""
    poses = []
    with open(pose_file) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 12:
                raise ValueError(f"{pose_file}: pose line {lineno} has {len(parts)} values, expected 12")
            try:
                vals = np.array([float(x) for x in parts], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{pose_file}: pose line {lineno}: {exc}") from None
            poses.append(Pose.from_matrix(vals.reshape(3, 4)))
    return poses


def read_sequence(scan_dir, pose_file, label_dir=None):
    """Read a scan sequence; returns (list of Scan, list of Pose).

    Scans are ordered by filename. If `label_dir` is given, every scan must
    have a matching ``<stem>.label`` file of equal point count.
    """
    scan_dir = Path(scan_dir)
    scan_files = sorted(scan_dir.glob("*.bin"))
    if not scan_files:
        raise FileNotFoundError(f"no .bin scan files in {scan_dir}")
    poses = read_poses(pose_file)
    if len(poses) != len(scan_files):
        raise ValueError(
            f"pose/scan count mismatch ({len(poses)} poses, {len(scan_files)} scans)"
        )

    scans = []
    for i, sf in enumerate(scan_files):
        raw = np.fromfile(sf, dtype="<f4")
        if raw.size % 4 != 0:
            raise ValueError(f"{sf}: size not a multiple of 4 floats")
        raw = raw.reshape(-1, 4)
        labels = None
        if label_dir is not None:
            lf = Path(label_dir) / (sf.stem + ".label")
            if not lf.exists():
                raise FileNotFoundError(f"missing label file {lf}")
            packed = np.fromfile(lf, dtype="<u4")
            if len(packed) != len(raw):
                raise ValueError(
                    f"{lf}: {len(packed)} labels for {len(raw)} points in {sf.name}"
                )
            labels = (packed & 0xFFFF).astype(np.int32)
        scans.append(Scan(raw[:, :3].astype(np.float64), raw[:, 3], labels, scan_id=i))
    return scans, poses


def write_sequence(scans, poses, scan_dir, pose_file, label_dir=None):
    """Write scans/poses (and labels if present) in the standard layout."""
    scan_dir = Path(scan_dir)
    scan_dir.mkdir(parents=True, exist_ok=True)
    if label_dir is not None:
        Path(label_dir).mkdir(parents=True, exist_ok=True)
    for scan in scans:
        quad = np.empty((len(scan.points), 4), dtype="<f4")
        quad[:, :3] = scan.points
        quad[:, 3] = scan.intensity
        quad.tofile(scan_dir / f"{scan.scan_id:06d}.bin")
        if label_dir is not None:
            if scan.labels is None:
                raise ValueError(f"scan {scan.scan_id} has no labels to write")
            packed = (scan.labels.astype(np.int64) & 0xFFFF).astype("<u4")
            packed.tofile(Path(label_dir) / f"{scan.scan_id:06d}.label")
    with open(pose_file, "w") as f:
        for pose in poses:
            f.write(" ".join(repr(float(x)) for x in pose.matrix().ravel()) + "\n")


# ---------------------------------------------------------------------------
# scene assembly and normalization
# ---------------------------------------------------------------------------

def assemble_scene(scans, poses, group_size):
    """Accumulate consecutive groups of scans into world-frame scenes.

    The last group may be smaller. Scans without labels contribute points
    labeled IGNORE_LABEL.
    """
    if not scans:
        raise ValueError("no scans to assemble")
    if len(scans) != len(poses):
        raise ValueError(f"{len(scans)} scans but {len(poses)} poses")
    if group_size < 1:
        raise ValueError("group_size must be >= 1")

    scenes = []
    for start in range(0, len(scans), group_size):
        group = scans[start : start + group_size]
        gposes = poses[start : start + group_size]
        pts, inten, labels, prov = [], [], [], []
        for scan, pose in zip(group, gposes):
            pts.append(pose.transform(scan.points))
            inten.append(scan.intensity)
            if scan.labels is not None:
                labels.append(scan.labels)
            else:
                labels.append(np.full(len(scan.points), IGNORE_LABEL, dtype=np.int32))
            prov.append(
                np.stack(
                    [
                        np.full(len(scan.points), scan.scan_id, dtype=np.int64),
                        np.arange(len(scan.points), dtype=np.int64),
                    ],
                    axis=1,
                )
            )
        scenes.append(
            Scene(
                points=np.concatenate(pts),
                intensity=np.concatenate(inten),
                labels=np.concatenate(labels),
                provenance=np.concatenate(prov),
                sensor_trajectory=list(gposes),
            )
        )
    return scenes


PCT_LOW, PCT_HIGH = 1.0, 99.0


def normalize_intensity(scene):
    """Robust per-scan min-max: map the 1st..99th percentile span to [0, 1].

    Values outside the span clamp; a constant scan maps to 0.5 everywhere.
    Scans are normalized independently of each other.
    """
    out = scene.intensity.astype(np.float64).copy()
    for sid in np.unique(scene.provenance[:, 0]):
        sel = scene.provenance[:, 0] == sid
        vals = out[sel]
        lo, hi = np.percentile(vals, [PCT_LOW, PCT_HIGH])
        if hi <= lo:
            out[sel] = 0.5
        else:
            out[sel] = np.clip((vals - lo) / (hi - lo), 0.0, 1.0)
    return replace(scene, intensity=out.astype(np.float32))


def crop_ground(scene, z_min):
    """Drop points below first_pose_z + z_min (noise under the ground)."""
    ref_z = scene.sensor_trajectory[0].translation[2]
    return scene.select(scene.points[:, 2] >= ref_z + z_min)


def densify_labels(scene, labeled_mask, k=5):
    """Give every unlabeled point the majority label of its k nearest labeled points.

    Distance is plain 3D Euclidean; majority ties break to the lowest class
    id. Labeled points are never changed.
    """
    labeled_mask = np.asarray(labeled_mask, dtype=bool).reshape(-1)
    if len(labeled_mask) != scene.n_points:
        raise ValueError("labeled_mask length mismatch")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_labeled = int(labeled_mask.sum())
    if n_labeled == 0:
        raise ValueError("cannot densify a scene with zero labeled points")
    if labeled_mask.all():
        return replace(scene, labels=scene.labels.copy())

    tree = cKDTree(scene.points[labeled_mask])
    kk = min(k, n_labeled)
    _, nn = tree.query(scene.points[~labeled_mask], k=kk)
    nn = np.atleast_2d(nn.reshape(-1, kk))
    neigh_labels = scene.labels[labeled_mask][nn]  # (M, kk)

    max_id = int(neigh_labels.max())
    counts = np.zeros((len(neigh_labels), max_id + 1), dtype=np.int32)
    rows = np.repeat(np.arange(len(neigh_labels)), kk)
    np.add.at(counts, (rows, neigh_labels.ravel()), 1)
    majority = counts.argmax(axis=1).astype(np.int32)  # argmax ties -> lowest id

    labels = scene.labels.copy()
    labels[~labeled_mask] = majority
    return replace(scene, labels=labels)


MAX_RAW_LABEL = 0xFFFF


def map_classes(scene, mapping):
    """Remap raw labels through a ClassMapping; unmapped ids become 255."""
    if scene.labels.size and scene.labels.max() > MAX_RAW_LABEL:
        raise ValueError("raw label ids exceed 16 bits")
    lut = np.full(MAX_RAW_LABEL + 1, IGNORE_LABEL, dtype=np.int32)
    for raw, cid in mapping.source_to_common.items():
        lut[raw] = cid
    return replace(scene, labels=lut[scene.labels])


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

_PLY_DTYPES = {
    "char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1",
    "short": "i2", "ushort": "u2", "int16": "i2", "uint16": "u2",
    "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path):
    """Read a binary little-endian PLY mesh.

    Vertex properties x/y/z are required; intensity, label and nx/ny/nz are
    picked up when present, anything else is skipped.
    """
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        elements = []  # (name, count, [(prop_name, dtype) or ("__list__", ...)])
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unterminated header")
            tokens = line.strip().decode("ascii").split()
            if not tokens:
                continue
            if tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    elements[-1][2].append(("__list__", tokens[2], tokens[3], tokens[4]))
                else:
                    elements[-1][2].append((tokens[2], tokens[1]))
            elif tokens[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise ValueError(f"{path}: unsupported PLY format {fmt!r}")

        data = {}
        for name, count, props in elements:
            if any(p[0] == "__list__" for p in props):
                if len(props) != 1:
                    raise ValueError(f"{path}: mixed list/scalar properties unsupported")
                _, count_t, idx_t, pname = props[0]
                cdt = np.dtype("<" + _PLY_DTYPES[count_t])
                idt = np.dtype("<" + _PLY_DTYPES[idx_t])
                rows = []
                for _ in range(count):
                    (n,) = np.frombuffer(f.read(cdt.itemsize), dtype=cdt)
                    rows.append(np.frombuffer(f.read(idt.itemsize * int(n)), dtype=idt))
                data[(name, pname)] = rows
            else:
                dt = np.dtype([(p, "<" + _PLY_DTYPES[t]) for p, t in props])
                arr = np.frombuffer(f.read(dt.itemsize * count), dtype=dt)
                if len(arr) != count:
                    raise ValueError(f"{path}: truncated element {name}")
                for p, _ in props:
                    data[(name, p)] = arr[p]

    try:
        verts = np.stack(
            [data[("vertex", "x")], data[("vertex", "y")], data[("vertex", "z")]], axis=1
        ).astype(np.float64)
    except KeyError:
        raise ValueError(f"{path}: vertex x/y/z properties missing") from None
    faces = data.get(("face", "vertex_indices")) or data.get(("face", "vertex_index"))
    if faces is None:
        raise ValueError(f"{path}: no face element")
    tris = []
    for face in faces:
        if len(face) == 3:
            tris.append(face)
        elif len(face) > 3:  # fan-triangulate polygons
            for j in range(1, len(face) - 1):
                tris.append([face[0], face[j], face[j + 1]])
        else:
            raise ValueError(f"{path}: face with {len(face)} vertices")
    tris = np.asarray(tris, dtype=np.int64)

    inten = data.get(("vertex", "intensity"))
    label = data.get(("vertex", "label"))
    normal = None
    if ("vertex", "nx") in data:
        normal = np.stack(
            [data[("vertex", "nx")], data[("vertex", "ny")], data[("vertex", "nz")]], axis=1
        ).astype(np.float64)
        norms = np.linalg.norm(normal, axis=1)
        normal = normal / np.maximum(norms, 1e-12)[:, None]
    return Mesh(
        vertices=verts,
        triangles=tris,
        vertex_intensity=None if inten is None else np.asarray(inten, dtype=np.float32),
        vertex_label=None if label is None else np.asarray(label, dtype=np.int32),
        vertex_normal=normal,
    )


def write_ply(mesh, path):
    """Write a mesh as binary little-endian PLY."""
    nv, nf = len(mesh.vertices), len(mesh.triangles)
    props = ["property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if mesh.vertex_intensity is not None:
        props.append("property float intensity")
        fields.append(("intensity", "<f4"))
    if mesh.vertex_label is not None:
        props.append("property ushort label")
        fields.append(("label", "<u2"))
    if mesh.vertex_normal is not None:
        props += ["property float nx", "property float ny", "property float nz"]
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {nv}\n" + "\n".join(props) + "\n"
        f"element face {nf}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    varr = np.zeros(nv, dtype=fields)
    varr["x"], varr["y"], varr["z"] = mesh.vertices.T
    if mesh.vertex_intensity is not None:
        varr["intensity"] = mesh.vertex_intensity
    if mesh.vertex_label is not None:
        varr["label"] = mesh.vertex_label.astype("<u2")
    if mesh.vertex_normal is not None:
        varr["nx"], varr["ny"], varr["nz"] = mesh.vertex_normal.T
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(varr.tobytes())
        for tri in mesh.triangles:
            f.write(struct.pack("<B", 3))
            f.write(np.asarray(tri, dtype="<i4").tobytes())


def ensure_mesh_attributes(scene):
    """Fill missing per-vertex intensity/labels from the nearest scene point."""
    mesh = scene.mesh
    if mesh is None:
        raise ValueError("scene has no mesh")
    if mesh.vertex_intensity is not None and mesh.vertex_label is not None:
        return mesh
    if scene.n_points == 0:
        raise ValueError("cannot transfer mesh attributes from an empty scene")
    _, nearest = cKDTree(scene.points).query(mesh.vertices)
    if mesh.vertex_intensity is None:
        mesh.vertex_intensity = scene.intensity[nearest].astype(np.float32)
    if mesh.vertex_label is None:
        mesh.vertex_label = scene.labels[nearest].astype(np.int32)
    return mesh


# ---------------------------------------------------------------------------
# scene container (deterministic .npz)
# ---------------------------------------------------------------------------

def _write_npz(path, arrays):
    """npz with fixed zip timestamps so identical content gives identical bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def save_scene(scene, path):
    """Persist a scene (points, labels, provenance, trajectory, mesh) to .npz."""
    arrays = {
        "schema": np.frombuffer(SCENE_SCHEMA.encode("ascii"), dtype=np.uint8),
        "points": scene.points,
        "intensity": scene.intensity,
        "labels": scene.labels,
        "provenance": scene.provenance,
        "trajectory": np.stack([p.matrix() for p in scene.sensor_trajectory]),
    }
    if scene.mesh is not None:
        m = scene.mesh
        arrays["mesh_vertices"] = m.vertices
        arrays["mesh_triangles"] = m.triangles
        if m.vertex_intensity is not None:
            arrays["mesh_vertex_intensity"] = m.vertex_intensity
        if m.vertex_label is not None:
            arrays["mesh_vertex_label"] = m.vertex_label
        if m.vertex_normal is not None:
            arrays["mesh_vertex_normal"] = m.vertex_normal
    _write_npz(path, arrays)


def load_scene(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"scene file not found: {path}")
    with np.load(path) as z:
        schema = bytes(z["schema"]).decode("ascii")
        if schema != SCENE_SCHEMA:
            raise ValueError(f"{path}: unknown scene schema {schema!r}")
        mesh = None
        if "mesh_vertices" in z:
            mesh = Mesh(
                vertices=z["mesh_vertices"],
                triangles=z["mesh_triangles"],
                vertex_intensity=z["mesh_vertex_intensity"] if "mesh_vertex_intensity" in z else None,
                vertex_label=z["mesh_vertex_label"] if "mesh_vertex_label" in z else None,
                vertex_normal=z["mesh_vertex_normal"] if "mesh_vertex_normal" in z else None,
            )
        return Scene(
            points=z["points"],
            intensity=z["intensity"],
            labels=z["labels"],
            provenance=z["provenance"],
            sensor_trajectory=[Pose.from_matrix(m) for m in z["trajectory"]],
            mesh=mesh,
        )
