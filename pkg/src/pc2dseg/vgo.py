"""View generation: the four virtual-camera pose families per scene.

Families, anchored on Lidar positions sampled along the sensor trajectory:
  car    - road-user height, horizontal forward, random yaw
  conic  - on a circle above and around the anchor, aimed at the anchor
  top    - straight down from a random height, random roll
  bottom - straight up from below, random roll

Generation is deterministic given (scene, config). Draws happen family-major
then pose-major, with a fixed number of draws per pose:
  car:    anchor, yaw, pitch, roll, offset x/y/z
  conic:  anchor, azimuth, offset x/y/z, rot jitter x/y/z
  top:    anchor, height, roll, offset x/y/z, rot jitter x/y/z
  bottom: anchor, roll, offset x/y/z, rot jitter x/y/z
Jitter magnitudes scale the draws, so zeroing them does not shift the stream.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .camera import CameraView, Intrinsics, Pose, look_at

FAMILIES = ("car", "conic", "top", "bottom")

RESOLUTIONS = {"LD": (1024, 512), "HD": (2048, 1024)}

PRESETS = {
    "car_conic_top_bottom": {"families": FAMILIES, "poses_per_family": 200},
    "car": {"families": ("car",), "poses_per_family": 200},
}


@dataclass
class VgoConfig:
    families: tuple = FAMILIES
    poses_per_family: int = 200
    seed: int = 0
    resolution: str = "LD"  # "LD", "HD", or (width, height)
    hfov_deg: float = 90.0  # float, or {family: degrees}
    car_height: float = 1.7
    conic_radius: float = 20.0
    conic_height: float = 20.0
    top_height_range: tuple = (15.0, 40.0)
    bottom_height: float = 15.0
    pos_jitter: float = 2.0
    rot_jitter_deg: float = 5.0

    def __post_init__(self):
        self.families = tuple(self.families)
        if not self.families:
            raise ValueError("families must be non-empty")
        for fam in self.families:
            if fam not in FAMILIES:
                raise ValueError(f"unknown pose family {fam!r}")
        if self.poses_per_family < 1:
            raise ValueError("poses_per_family must be >= 1")

    @classmethod
    def from_preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ValueError(f"unknown VGO preset {name!r} (have {sorted(PRESETS)})")
        params = dict(PRESETS[name])
        params.update(overrides)
        return cls(**params)

    def image_size(self):
        if isinstance(self.resolution, str):
            if self.resolution not in RESOLUTIONS:
                raise ValueError(f"unknown resolution {self.resolution!r}")
            return RESOLUTIONS[self.resolution]
        w, h = self.resolution
        return int(w), int(h)

    def family_hfov(self, family):
        if isinstance(self.hfov_deg, dict):
            return float(self.hfov_deg.get(family, 90.0))
        return float(self.hfov_deg)


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def _vertical_pose(eye, roll, down):
    """Straight-down (down=True) or straight-up camera with roll about the axis."""
    z = np.array([0.0, 0.0, -1.0 if down else 1.0])
    x = np.array([math.cos(roll), math.sin(roll), 0.0])
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def sample_view(scene, family, config, rng, view_id):
    """Draw one camera view of `family` from the rng stream."""
    traj = scene.sensor_trajectory
    if not traj:
        raise ValueError("scene has an empty sensor trajectory")
    anchors = np.stack([p.translation for p in traj])
    anchor = anchors[int(rng.integers(len(anchors)))]
    rot_mag = math.radians(config.rot_jitter_deg)

    if family == "car":
        yaw = rng.uniform(0.0, 2 * math.pi)
        pitch = rng.uniform(-1.0, 1.0) * rot_mag
        roll = rng.uniform(-1.0, 1.0) * rot_mag
        offset = rng.uniform(-1.0, 1.0, 3) * config.pos_jitter
        eye = anchor + np.array([0.0, 0.0, config.car_height]) + offset
        fwd = np.array(
            [math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw), math.sin(pitch)]
        )
        pose = look_at(eye, eye + fwd)
        pose = Pose(pose.rotation @ _rot_z(roll), eye)  # roll about the view axis
    elif family == "conic":
        azimuth = rng.uniform(0.0, 2 * math.pi)
        offset = rng.uniform(-1.0, 1.0, 3) * config.pos_jitter
        jit = rng.uniform(-1.0, 1.0, 3) * rot_mag
        eye = anchor + np.array(
            [
                config.conic_radius * math.cos(azimuth),
                config.conic_radius * math.sin(azimuth),
                config.conic_height,
            ]
        ) + offset
        pose = look_at(eye, anchor)
        pose = Pose(pose.rotation @ _rot_z(jit[0]) @ _rot_y(jit[1]) @ _rot_x(jit[2]), eye)
    elif family == "top":
        height = rng.uniform(*config.top_height_range)
        roll = rng.uniform(0.0, 2 * math.pi)
        offset = rng.uniform(-1.0, 1.0, 3) * config.pos_jitter
        jit = rng.uniform(-1.0, 1.0, 3) * rot_mag
        eye = anchor + np.array([0.0, 0.0, height]) + offset
        pose = _vertical_pose(eye, roll, down=True)
        pose = Pose(pose.rotation @ _rot_z(jit[0]) @ _rot_y(jit[1]) @ _rot_x(jit[2]), eye)
    elif family == "bottom":
        roll = rng.uniform(0.0, 2 * math.pi)
        offset = rng.uniform(-1.0, 1.0, 3) * config.pos_jitter
        jit = rng.uniform(-1.0, 1.0, 3) * rot_mag
        eye = anchor - np.array([0.0, 0.0, config.bottom_height]) + offset
        pose = _vertical_pose(eye, roll, down=False)
        pose = Pose(pose.rotation @ _rot_z(jit[0]) @ _rot_y(jit[1]) @ _rot_x(jit[2]), eye)
    else:
        raise ValueError(f"unknown pose family {family!r}")

    width, height_px = config.image_size()
    intr = Intrinsics.from_hfov(width, height_px, config.family_hfov(family))
    return CameraView(pose=pose, intrinsics=intr, view_id=view_id, pose_family=family)


def generate_views(scene, config):
    """All views for a scene: len(families) * poses_per_family, family-major."""
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed)]))
    views = []
    view_id = 0
    for family in config.families:
        for _ in range(config.poses_per_family):
            views.append(sample_view(scene, family, config, rng, view_id))
            view_id += 1
    return views


def no_jitter(config):
    """Copy of a config with positional and rotational jitter disabled."""
    return replace(config, pos_jitter=0.0, rot_jitter_deg=0.0)
