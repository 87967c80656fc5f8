"""Rasterize scenes into multi-channel views: point splats, mesh z-buffer,
depth maps, normals and label images.

Depth channels encode clamp(d, 0, 50m) / 50m; normal channels encode
(n + 1) / 2. Labels render either from splatted points (pfl) or from the
mesh's nearest vertex (mfl). Everything here is deterministic: identical
inputs give bitwise-identical grids.
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from . import camera, tensorio
from .ingest import IGNORE_LABEL, ensure_mesh_attributes

D_ENC = 50.0  # depth encoding full scale, meters; shared by train and inference renders
MESH_NEAR = 0.01  # meters; mesh rasterization near clip
DEFAULT_RENDER_RANGE = (1.0, 30.0)

CHANNEL_SOURCES = (
    "point_intensity",
    "mesh_intensity",
    "mesh_depth",
    "point_depth",
    "mesh_normal_x",
    "mesh_normal_y",
    "mesh_normal_z",
)


@dataclass(frozen=True)
class ChannelConfig:
    name: str
    channels: tuple
    label_source: str = "pfl"

    def __post_init__(self):
        if not 1 <= len(self.channels) <= 4:
            raise ValueError("channel configs carry 1 to 4 channels")
        for ch in self.channels:
            if ch not in CHANNEL_SOURCES:
                raise ValueError(f"unknown channel source {ch!r}")
        if self.label_source not in ("pfl", "mfl"):
            raise ValueError(f"label_source must be 'pfl' or 'mfl', got {self.label_source!r}")

    @property
    def needs_mesh(self):
        return self.label_source == "mfl" or any(c.startswith("mesh_") for c in self.channels)


CHANNEL_CONFIGS = {
    "trimerge": ChannelConfig(
        "trimerge", ("point_intensity", "mesh_intensity", "mesh_depth"), "pfl"
    ),
    "trimerge_normals_XY": ChannelConfig(
        "trimerge_normals_XY",
        ("point_intensity", "mesh_depth", "mesh_normal_x", "mesh_normal_y"),
        "mfl",
    ),
}


def get_channel_config(config):
    if isinstance(config, ChannelConfig):
        return config
    if config not in CHANNEL_CONFIGS:
        raise ValueError(f"unknown channel config {config!r} (have {sorted(CHANNEL_CONFIGS)})")
    return CHANNEL_CONFIGS[config]


@dataclass
class RenderedView:
    """One rendered view: channel stack, depth maps, optional label image."""

    view_id: int
    channels: np.ndarray  # (C, H, W) float32 in [0, 1]
    channel_names: tuple
    point_depth: np.ndarray  # (H, W) meters, +inf where empty
    mesh_depth: np.ndarray  # (H, W) meters, +inf where empty / no mesh
    label_image: np.ndarray | None  # (H, W) uint8, 255 = ignore
    channel_config_name: str = ""

    def __post_init__(self):
        shape = self.point_depth.shape
        if self.channels.shape[1:] != shape or self.mesh_depth.shape != shape:
            raise ValueError("grid dimensions disagree")
        if self.label_image is not None and self.label_image.shape != shape:
            raise ValueError("label image dimensions disagree")
        if len(self.channel_names) != self.channels.shape[0]:
            raise ValueError("channel name count mismatch")

    @property
    def height(self):
        return self.point_depth.shape[0]

    @property
    def width(self):
        return self.point_depth.shape[1]

    def channel(self, name):
        return self.channels[self.channel_names.index(name)]


def default_point_px(width):
    """Splat size in pixels: 4 px at width 2048, scaled linearly, at least 1."""
    return max(1, round(4 * width / 2048))


def encode_depth(depth):
    return np.clip(depth / D_ENC, 0.0, 1.0).astype(np.float32)


def decode_depth(encoded):
    return np.asarray(encoded, dtype=np.float64) * D_ENC


def encode_normal(component):
    return ((np.asarray(component) + 1.0) / 2.0).astype(np.float32)


def decode_normal(encoded):
    return np.asarray(encoded, dtype=np.float64) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# point splatting
# ---------------------------------------------------------------------------

def splat_index(points, view, point_px, depth_range=DEFAULT_RENDER_RANGE):
    """Z-buffered splat of points into a view.

    Each visible point stamps a point_px x point_px square whose top-left
    corner sits at rounded_pixel - (point_px - 1) // 2. Per pixel the
    nearest point wins; equal depths go to the lowest point index.
    Returns (winner index grid, -1 where empty; depth grid, +inf where empty).
    """
    if point_px < 1:
        raise ValueError("point_px must be >= 1")
    k = view.intrinsics
    h, w = k.height, k.width
    winner = np.full((h, w), -1, dtype=np.int64)
    depth = np.full((h, w), np.inf, dtype=np.float64)

    uv, z, valid = camera.project(view, points)
    near, far = depth_range
    valid = valid & (z >= near) & (z <= far)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return winner, depth

    u0 = camera.pixel_round(uv[idx, 0])
    v0 = camera.pixel_round(uv[idx, 1])
    zs = z[idx]

    offs = np.arange(point_px) - (point_px - 1) // 2
    du, dv = np.meshgrid(offs, offs)
    fp = point_px * point_px
    uu = (u0[:, None] + du.ravel()[None, :]).ravel()
    vv = (v0[:, None] + dv.ravel()[None, :]).ravel()
    pt = np.repeat(idx, fp)
    zz = np.repeat(zs, fp)

    inb = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
    uu, vv, pt, zz = uu[inb], vv[inb], pt[inb], zz[inb]
    if pt.size == 0:
        return winner, depth

    order = np.lexsort((pt, zz))  # depth ascending, ties by point index
    pix_sorted = (vv * w + uu)[order]
    uniq, first = np.unique(pix_sorted, return_index=True)
    depth.ravel()[uniq] = zz[order][first]
    winner.ravel()[uniq] = pt[order][first]
    return winner, depth


def splat_points(scene, view, attribute, point_px=None, depth_range=DEFAULT_RENDER_RANGE):
    """Splat a per-point attribute; returns (attribute grid, point depth grid).

    Float attributes fill empty pixels with 0; integer (label) attributes
    with 255.
    """
    if point_px is None:
        point_px = default_point_px(view.intrinsics.width)
    winner, depth = splat_index(scene.points, view, point_px, depth_range)
    attr = np.asarray(attribute)
    mask = winner >= 0
    if np.issubdtype(attr.dtype, np.integer):
        grid = np.full(winner.shape, IGNORE_LABEL, dtype=np.uint8)
        vals = attr[winner[mask]]
        if vals.size and (vals.min() < 0 or vals.max() > 255):
            raise ValueError("label attribute out of uint8 range; map classes first")
        grid[mask] = vals.astype(np.uint8)
    else:
        grid = np.zeros(winner.shape, dtype=np.float32)
        grid[mask] = attr[winner[mask]].astype(np.float32)
    return grid, depth


# ---------------------------------------------------------------------------
# mesh rasterization
# ---------------------------------------------------------------------------

def _clip_near(tri_cam, near):
    """Clip one camera-space triangle to z >= near.

    Returns (positions (M, 3), barycentric coords of each clipped vertex in
    the original triangle (M, 3)); M in {0, 3, 4}.
    """
    bary = np.eye(3)
    pos_out, bar_out = [], []
    for i in range(3):
        a, ab = tri_cam[i], bary[i]
        b, bb = tri_cam[(i + 1) % 3], bary[(i + 1) % 3]
        ina, inb = a[2] >= near, b[2] >= near
        if ina:
            pos_out.append(a)
            bar_out.append(ab)
        if ina != inb:
            t = (near - a[2]) / (b[2] - a[2])
            pos_out.append(a + t * (b - a))
            bar_out.append(ab + t * (bb - ab))
    if len(pos_out) < 3:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.asarray(pos_out), np.asarray(bar_out)


def rasterize_index(mesh, view, near=MESH_NEAR):
    """Z-buffered triangle rasterization with perspective-correct weights.

    Returns (triangle index grid, -1 empty; weights (H, W, 3) giving each
    pixel's perspective-correct barycentric weights in its winning triangle;
    depth grid, +inf empty). Front and back faces both render; degenerate
    screen triangles are skipped.
    """
    k = view.intrinsics
    h, w = k.height, k.width
    tri_idx = np.full((h, w), -1, dtype=np.int64)
    weights = np.zeros((h, w, 3), dtype=np.float64)
    depth = np.full((h, w), np.inf, dtype=np.float64)
    if mesh is None or len(mesh.triangles) == 0:
        return tri_idx, weights, depth

    verts_cam = view.pose.inverse_transform(mesh.vertices)

    for ti, tri in enumerate(mesh.triangles):
        cam = verts_cam[tri]
        if cam[:, 2].max() < near:
            continue
        poly, poly_bary = _clip_near(cam, near)
        for s in range(1, len(poly) - 1):
            sub = poly[[0, s, s + 1]]
            sub_bary = poly_bary[[0, s, s + 1]]
            zs = sub[:, 2]
            px = k.cx + k.fx * sub[:, 0] / zs
            py = k.cy + k.fy * sub[:, 1] / zs
            denom = (px[1] - px[0]) * (py[2] - py[0]) - (px[2] - px[0]) * (py[1] - py[0])
            if abs(denom) < 1e-12:
                continue
            umin = max(0, int(np.floor(px.min())))
            umax = min(w - 1, int(np.ceil(px.max())))
            vmin = max(0, int(np.floor(py.min())))
            vmax = min(h - 1, int(np.ceil(py.max())))
            if umin > umax or vmin > vmax:
                continue
            gu, gv = np.meshgrid(
                np.arange(umin, umax + 1, dtype=np.float64),
                np.arange(vmin, vmax + 1, dtype=np.float64),
            )
            l0 = ((px[2] - px[1]) * (gv - py[1]) - (py[2] - py[1]) * (gu - px[1])) / denom
            l1 = ((px[0] - px[2]) * (gv - py[2]) - (py[0] - py[2]) * (gu - px[2])) / denom
            l2 = 1.0 - l0 - l1
            inside = (l0 >= 0.0) & (l1 >= 0.0) & (l2 >= 0.0)
            if not inside.any():
                continue
            inv_z = l0 / zs[0] + l1 / zs[1] + l2 / zs[2]
            with np.errstate(divide="ignore"):
                d = 1.0 / inv_z
            sl = (slice(vmin, vmax + 1), slice(umin, umax + 1))
            upd = inside & (d < depth[sl])
            if not upd.any():
                continue
            # perspective-correct weights in the sub triangle, then mapped
            # back to the original triangle's vertices
            w0 = (l0 / zs[0]) * d
            w1 = (l1 / zs[1]) * d
            w2 = (l2 / zs[2]) * d
            orig = (
                w0[..., None] * sub_bary[0][None, None, :]
                + w1[..., None] * sub_bary[1][None, None, :]
                + w2[..., None] * sub_bary[2][None, None, :]
            )
            depth[sl] = np.where(upd, d, depth[sl])
            tri_idx[sl] = np.where(upd, ti, tri_idx[sl])
            weights[sl] = np.where(upd[..., None], orig, weights[sl])
    return tri_idx, weights, depth


def _face_normals(mesh):
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    n = np.cross(b - a, c - a)
    return n / np.maximum(np.linalg.norm(n, axis=1), 1e-12)[:, None]


def _normal_grid(mesh, view, tri_idx, weights):
    """World-frame unit normals per pixel, flipped toward the camera."""
    h, w = tri_idx.shape
    normals = np.zeros((h, w, 3), dtype=np.float64)
    mask = tri_idx >= 0
    if not mask.any():
        return normals
    tris = mesh.triangles[tri_idx[mask]]  # (M, 3)
    if mesh.vertex_normal is not None:
        n = (mesh.vertex_normal[tris] * weights[mask][..., None]).sum(axis=1)
        n = n / np.maximum(np.linalg.norm(n, axis=1), 1e-12)[:, None]
    else:
        n = _face_normals(mesh)[tri_idx[mask]]
    # flip so normals face the camera: pixel ray direction in world frame
    k = view.intrinsics
    vv, uu = np.nonzero(mask)
    ray_cam = np.stack(
        [(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones(len(uu))], axis=1
    )
    ray_world = ray_cam @ view.pose.rotation.T
    facing_away = (n * ray_world).sum(axis=1) > 0
    n[facing_away] = -n[facing_away]
    normals[mask] = n
    return normals


def rasterize_mesh(mesh, view, attribute, near=MESH_NEAR):
    """Rasterize one mesh attribute: 'intensity', 'label', 'normal' or 'depth'.

    Labels take the vertex with the largest weight (never interpolated);
    normals are interpolated, renormalized and flipped toward the camera.
    Returns (attribute grid, mesh depth grid).
    """
    tri_idx, weights, depth = rasterize_index(mesh, view, near)
    mask = tri_idx >= 0
    if attribute == "depth":
        return depth.copy(), depth
    if attribute == "label":
        if mesh.vertex_label is None:
            raise ValueError("mesh has no vertex labels")
        grid = np.full(tri_idx.shape, IGNORE_LABEL, dtype=np.uint8)
        if mask.any():
            tris = mesh.triangles[tri_idx[mask]]
            pick = np.argmax(weights[mask], axis=1)
            grid[mask] = mesh.vertex_label[tris[np.arange(len(tris)), pick]].astype(np.uint8)
        return grid, depth
    if attribute == "intensity":
        if mesh.vertex_intensity is None:
            raise ValueError("mesh has no vertex intensity")
        grid = np.zeros(tri_idx.shape, dtype=np.float32)
        if mask.any():
            tris = mesh.triangles[tri_idx[mask]]
            grid[mask] = (mesh.vertex_intensity[tris] * weights[mask]).sum(axis=1)
        return grid, depth
    if attribute == "normal":
        return _normal_grid(mesh, view, tri_idx, weights), depth
    raise ValueError(f"unknown mesh attribute {attribute!r}")


# ---------------------------------------------------------------------------
# view composition
# ---------------------------------------------------------------------------

def compose_view(scene, view, config, render_range=DEFAULT_RENDER_RANGE, point_px=None):
    """Render all channels of a config plus depth maps and the label image."""
    cfg = get_channel_config(config)
    if cfg.needs_mesh and scene.mesh is None:
        offender = next(
            (c for c in cfg.channels if c.startswith("mesh_")), "mfl labels"
        )
        raise ValueError(f"channel config {cfg.name!r} requires a mesh for {offender}")
    if point_px is None:
        point_px = default_point_px(view.intrinsics.width)

    winner, point_depth = splat_index(scene.points, view, point_px, render_range)
    pmask = winner >= 0

    if scene.mesh is not None and len(scene.mesh.triangles):
        ensure_mesh_attributes(scene)
        tri_idx, weights, mesh_depth = rasterize_index(scene.mesh, view)
        mmask = tri_idx >= 0
    else:
        h, w = point_depth.shape
        tri_idx = np.full((h, w), -1, dtype=np.int64)
        weights = np.zeros((h, w, 3))
        mesh_depth = np.full((h, w), np.inf)
        mmask = tri_idx >= 0

    normal_grid = None
    channels = []
    for name in cfg.channels:
        if name == "point_intensity":
            grid = np.zeros(point_depth.shape, dtype=np.float32)
            grid[pmask] = scene.intensity[winner[pmask]]
        elif name == "point_depth":
            grid = encode_depth(point_depth)
        elif name == "mesh_depth":
            grid = encode_depth(mesh_depth)
        elif name == "mesh_intensity":
            grid = np.zeros(point_depth.shape, dtype=np.float32)
            if mmask.any():
                tris = scene.mesh.triangles[tri_idx[mmask]]
                grid[mmask] = (scene.mesh.vertex_intensity[tris] * weights[mmask]).sum(axis=1)
            grid = np.clip(grid, 0.0, 1.0)
        elif name.startswith("mesh_normal_"):
            if normal_grid is None:
                normal_grid = _normal_grid(scene.mesh, view, tri_idx, weights)
            axis = "xyz".index(name[-1])
            grid = encode_normal(normal_grid[:, :, axis])
        else:  # pragma: no cover - names validated by ChannelConfig
            raise ValueError(name)
        channels.append(grid.astype(np.float32))

    if cfg.label_source == "pfl":
        if scene.labels.size and (scene.labels.max() > 255 or scene.labels.min() < 0):
            raise ValueError("point labels exceed uint8 range; map classes before rendering")
        label = np.full(point_depth.shape, IGNORE_LABEL, dtype=np.uint8)
        label[pmask] = scene.labels[winner[pmask]].astype(np.uint8)
    else:
        label = np.full(point_depth.shape, IGNORE_LABEL, dtype=np.uint8)
        if mmask.any():
            tris = scene.mesh.triangles[tri_idx[mmask]]
            pick = np.argmax(weights[mmask], axis=1)
            vlabels = scene.mesh.vertex_label[tris[np.arange(len(tris)), pick]]
            if vlabels.size and (vlabels.max() > 255 or vlabels.min() < 0):
                raise ValueError("mesh labels exceed uint8 range; map classes before rendering")
            label[mmask] = vlabels.astype(np.uint8)

    return RenderedView(
        view_id=view.view_id,
        channels=np.stack(channels),
        channel_names=tuple(cfg.channels),
        point_depth=point_depth,
        mesh_depth=mesh_depth,
        label_image=label,
        channel_config_name=cfg.name,
    )


# ---------------------------------------------------------------------------
# point normals
# ---------------------------------------------------------------------------

def estimate_point_normals(scene, k=16):
    """Per-point unit normals by local plane fit over k nearest neighbors.

    The normal is the smallest-covariance eigenvector, with its sign flipped
    toward the nearest trajectory pose. Collinear neighborhoods fall back to
    (0, 0, 1). Uses all points when the scene has fewer than k.
    """
    if k < 3:
        raise ValueError("k must be >= 3")
    pts = scene.points
    n = len(pts)
    if n == 0:
        return np.zeros((0, 3))
    kk = min(k, n)
    _, nn = cKDTree(pts).query(pts, k=kk)
    neigh = pts[nn.reshape(n, kk)]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / kk
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()

    scale = np.maximum(evals[:, 2], 1e-30)
    degenerate = evals[:, 1] < 1e-10 * scale
    normals[degenerate] = (0.0, 0.0, 1.0)

    traj = np.stack([p.translation for p in scene.sensor_trajectory])
    d2 = ((pts[:, None, :] - traj[None, :, :]) ** 2).sum(axis=2)
    to_sensor = traj[d2.argmin(axis=1)] - pts
    flip = (normals * to_sensor).sum(axis=1) < 0
    normals[flip] = -normals[flip]
    return normals


# ---------------------------------------------------------------------------
# image and tensor export
# ---------------------------------------------------------------------------

def quantize(channels):
    """Float [0, 1] -> uint8 via round(255 * v)."""
    return np.floor(np.asarray(channels) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def write_view_png(rendered, path):
    """Export channels as 8-bit PNG: L for 1 channel, RGB for 3, RGBA for 4."""
    q = quantize(rendered.channels)
    c = q.shape[0]
    if c == 1:
        img = Image.fromarray(q[0], mode="L")
    elif c == 3:
        img = Image.fromarray(np.moveaxis(q, 0, -1), mode="RGB")
    elif c == 4:
        img = Image.fromarray(np.moveaxis(q, 0, -1), mode="RGBA")
    else:
        raise ValueError(f"cannot export a {c}-channel view as PNG")
    img.save(path)


def read_view_png(path):
    """PNG back to a float32 (C, H, W) stack in [0, 1]."""
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        arr = arr[None, ...]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return arr.astype(np.float32) / 255.0


def write_label_png(label, path):
    Image.fromarray(np.asarray(label, dtype=np.uint8), mode="L").save(path)


def read_label_png(path):
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise ValueError(f"{path}: label images must be single channel")
    return arr.astype(np.uint8)


def write_view_tensors(rendered, channels_path, depth_path=None):
    """Lossless export: channel stack, plus (point_depth, mesh_depth) if asked."""
    tensorio.write_tensor(channels_path, rendered.channels)
    if depth_path is not None:
        tensorio.write_tensor(
            depth_path,
            np.stack([rendered.point_depth, rendered.mesh_depth]).astype(np.float32),
        )


def read_view_tensors(channels_path, depth_path, label_path=None, view_id=0, config_name=""):
    """Rebuild a RenderedView from exported tensors (and label PNG if present)."""
    channels = tensorio.read_tensor(channels_path)
    depths = tensorio.read_tensor(depth_path)
    if depths.shape[0] != 2:
        raise ValueError(f"{depth_path}: expected a (2, H, W) depth stack")
    cfg_names = ()
    if config_name:
        cfg_names = tuple(get_channel_config(config_name).channels)
    if not cfg_names or len(cfg_names) != channels.shape[0]:
        cfg_names = tuple(f"channel{i}" for i in range(channels.shape[0]))
    label = read_label_png(label_path) if label_path is not None else None
    return RenderedView(
        view_id=view_id,
        channels=channels,
        channel_names=cfg_names,
        point_depth=depths[0].astype(np.float64),
        mesh_depth=depths[1].astype(np.float64),
        label_image=label,
        channel_config_name=config_name,
    )


def transfer_point_normals_to_mesh(scene, k=16):
    """Give mesh vertices the estimated normal of their nearest scene point."""
    if scene.mesh is None:
        raise ValueError("scene has no mesh")
    normals = estimate_point_normals(scene, k=k)
    _, nearest = cKDTree(scene.points).query(scene.mesh.vertices)
    scene.mesh.vertex_normal = normals[nearest]
    return scene.mesh
