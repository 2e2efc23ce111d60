"""Camera poses, ray generation, and pose-space augmentation.

Conventions (used everywhere, including the wire formats):

* right-handed world, cameras look down their local -Z with +Y up;
* ``rotation`` is world-from-camera; quaternions are (w, x, y, z);
* pixel (0, 0) is the top-left; fractional pixel indices are allowed and map
  to normalized device coords with align-corners (index 0 -> -1, W-1 -> +1),
  so the center pixel of an odd-sized image is exactly the optical axis;
* fovY is in degrees and measures the full vertical angle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation
from .geometry import look_at_rotation, quat_slerp, quat_to_rot, rot_to_quat

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray  # [3,3] world-from-camera
    translation: np.ndarray  # [3] camera origin in world
    fov_y_deg: float
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ContractViolation(f"CameraPose: rotation {r.shape}, translation {t.shape}")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0:
            raise ContractViolation("CameraPose: rotation is not a proper orthonormal matrix")
        if not (0 < self.fov_y_deg < 180):
            raise ContractViolation(f"CameraPose: fovY {self.fov_y_deg} out of (0, 180)")
        if self.width < 1 or self.height < 1:
            raise ContractViolation("CameraPose: image size must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def forward(self) -> np.ndarray:
        return -self.rotation[:, 2]

    def with_size(self, width: int, height: int) -> "CameraPose":
        return replace(self, width=width, height=height)

    def to_wire(self) -> dict:
        return {
            "quaternion": [float(v) for v in rot_to_quat(self.rotation)],
            "translation": [float(v) for v in self.translation],
            "fovY": float(self.fov_y_deg),
            "width": int(self.width),
            "height": int(self.height),
        }

    @staticmethod
    def from_wire(d: dict) -> "CameraPose":
        try:
            return CameraPose(
                rotation=quat_to_rot(np.asarray(d["quaternion"], dtype=np.float64)),
                translation=np.asarray(d["translation"], dtype=np.float64),
                fov_y_deg=float(d["fovY"]),
                width=int(d["width"]),
                height=int(d["height"]),
            )
        except (KeyError, TypeError) as e:
            raise ContractViolation(f"pose wire object missing/invalid field: {e}") from e


@dataclass
class RayBundle:
    """A batch of rays; directions are unit-norm, t ranges set by clipping."""

    origins: np.ndarray  # [N,3]
    dirs: np.ndarray  # [N,3]
    t_near: np.ndarray  # [N]
    t_far: np.ndarray  # [N]

    def __len__(self) -> int:
        return self.origins.shape[0]

    @property
    def hits_volume(self) -> np.ndarray:
        return self.t_near < self.t_far


def _ndc(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(np.asarray(idx, dtype=np.float64))
    return 2.0 * np.asarray(idx, dtype=np.float64) / (n - 1) - 1.0


def generate_rays(pose: CameraPose, u: np.ndarray | None = None, v: np.ndarray | None = None) -> RayBundle:
    """Rays through the given fractional pixel indices (default: the full
    image grid, row-major)."""
    if (u is None) != (v is None):
        raise ContractViolation("generate_rays: pass both u and v or neither")
    if u is None:
        vv, uu = np.meshgrid(np.arange(pose.height), np.arange(pose.width), indexing="ij")
        u, v = uu.reshape(-1), vv.reshape(-1)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ContractViolation("generate_rays: u/v shape mismatch")
    if np.any(u < 0) or np.any(u > pose.width - 1) or np.any(v < 0) or np.any(v > pose.height - 1):
        raise ContractViolation("generate_rays: pixel index outside the image")

    tan_y = np.tan(np.radians(pose.fov_y_deg) / 2)
    tan_x = tan_y * pose.width / pose.height
    x = _ndc(u, pose.width) * tan_x
    y = -_ndc(v, pose.height) * tan_y  # v grows downward, camera +Y is up
    d_cam = np.stack([x, y, -np.ones_like(x)], axis=1)
    d_world = d_cam @ pose.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    n = u.shape[0]
    return RayBundle(
        origins=np.broadcast_to(pose.translation, (n, 3)).copy(),
        dirs=d_world,
        t_near=np.zeros(n),
        t_far=np.full(n, np.inf),
    )


def angular_distance(a: CameraPose, b: CameraPose) -> float:
    """Angle between viewing directions, in degrees."""
    return float(np.degrees(np.arccos(np.clip(a.forward @ b.forward, -1.0, 1.0))))


def interpolate_pose(a: CameraPose, b: CameraPose, t: float) -> CameraPose:
    """Slerp rotation / lerp translation between two same-intrinsics poses."""
    if not (0.0 <= t <= 1.0):
        raise ContractViolation(f"interpolate_pose: t={t} outside [0, 1]")
    if (a.fov_y_deg, a.width, a.height) != (b.fov_y_deg, b.width, b.height):
        raise ContractViolation("interpolate_pose: intrinsics differ")
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    q = quat_slerp(rot_to_quat(a.rotation), rot_to_quat(b.rotation), t)
    return CameraPose(
        rotation=quat_to_rot(q),
        translation=(1 - t) * a.translation + t * b.translation,
        fov_y_deg=a.fov_y_deg,
        width=a.width,
        height=a.height,
    )


def neighbor_pairs(poses: list[CameraPose], max_angle_deg: float = 30.0) -> list[tuple[int, int]]:
    """Index pairs whose viewing directions differ by less than the threshold."""
    pairs = []
    for i in range(len(poses)):
        for j in range(i + 1, len(poses)):
            if angular_distance(poses[i], poses[j]) < max_angle_deg:
                pairs.append((i, j))
    return pairs


_warned_no_pairs = False


def sample_augmented_pose(
    poses: list[CameraPose],
    rng: np.random.Generator,
    pairs: list[tuple[int, int]] | None = None,
    max_angle_deg: float = 30.0,
) -> CameraPose:
    """A virtual pose between two nearby training poses (uniform pair, uniform t)."""
    if len(poses) < 2:
        raise ContractViolation("sample_augmented_pose: need at least two poses")
    if pairs is None:
        pairs = neighbor_pairs(poses, max_angle_deg)
    if not pairs:
        global _warned_no_pairs
        if not _warned_no_pairs:
            log.warning("no pose pairs under %.1f deg; falling back to the closest pair", max_angle_deg)
            _warned_no_pairs = True
        best = min(
            ((i, j) for i in range(len(poses)) for j in range(i + 1, len(poses))),
            key=lambda ij: angular_distance(poses[ij[0]], poses[ij[1]]),
        )
        pairs = [best]
    i, j = pairs[int(rng.integers(len(pairs)))]
    return interpolate_pose(poses[i], poses[j], float(rng.random()))


def orbit_pose(
    azimuth_deg: float,
    elevation_deg: float,
    radius: float,
    target=(0.0, 0.0, 0.0),
    fov_y_deg: float = 45.0,
    width: int = 128,
    height: int = 128,
) -> CameraPose:
    az = np.radians(azimuth_deg)
    el = np.radians(elevation_deg)
    target = np.asarray(target, dtype=np.float64)
    eye = target + radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    return CameraPose(
        rotation=look_at_rotation(eye, target),
        translation=eye,
        fov_y_deg=fov_y_deg,
        width=width,
        height=height,
    )


def build_orbit_rig(
    n_train: int = 24,
    n_test: int = 6,
    radius: float = 2.6,
    fov_y_deg: float = 45.0,
    width: int = 128,
    height: int = 128,
) -> tuple[list[CameraPose], list[CameraPose]]:
    """The standard capture rig: an orbit of training views cycling through
    three elevation rings, plus test views at in-between azimuths."""
    train = [
        orbit_pose(360.0 * i / n_train, (10.0, 25.0, 40.0)[i % 3], radius,
                   fov_y_deg=fov_y_deg, width=width, height=height)
        for i in range(n_train)
    ]
    test = [
        orbit_pose(360.0 * (j + 0.5) / n_test, 12.0 + 5.0 * j, radius,
                   fov_y_deg=fov_y_deg, width=width, height=height)
        for j in range(n_test)
    ]
    return train, test
