"""Quaternions, axis-aligned boxes, and the small sampling helpers shared by
cameras, scenes, the teacher, and the mesh tools."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z), unit norm, right-handed


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ContractViolation("zero-norm quaternion")
    return q / n


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w >= 0 branch chosen for stability)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_slerp(qa: np.ndarray, qb: np.ndarray, t: float) -> np.ndarray:
    """Shortest-arc spherical interpolation; exact at the endpoints."""
    qa = quat_normalize(qa)
    qb = quat_normalize(qb)
    if t == 0.0:
        return qa
    if t == 1.0:
        return qb
    dot = float(qa @ qb)
    if dot < 0:  # take the short way around
        qb = -qb
        dot = -dot
    if dot > 1 - 1e-10:  # nearly parallel: lerp is exact enough and stable
        return quat_normalize(qa + t * (qb - qa))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    return quat_normalize((np.sin((1 - t) * theta) / s) * qa + (np.sin(t * theta) / s) * qb)


def look_at_rotation(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera rotation for a camera at eye facing target (-Z forward, +Y up)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise ContractViolation("look_at: eye coincides with target")
    forward /= n
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        rn = np.linalg.norm(right)
    right /= rn
    true_up = np.cross(right, forward)
    return np.stack([right, true_up, -forward], axis=1)


# ---------------------------------------------------------------------------
# axis-aligned bounds


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned box; the world every field and scene lives in."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float32))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float32))
        if self.lo.shape != (3,) or self.hi.shape != (3,):
            raise ContractViolation("Bounds: lo/hi must be 3-vectors")
        if not np.all(self.hi > self.lo):
            raise ContractViolation("Bounds: hi must exceed lo on every axis")

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)


def ray_box_range(origins: np.ndarray, dirs: np.ndarray, bounds: Bounds):
    """Entry/exit distances of rays against a box (slab method, vectorized).

    Returns (t_near, t_far); a miss has t_near > t_far. Entry is clamped to 0
    so origins inside the box start sampling immediately.
    """
    origins = np.atleast_2d(origins).astype(np.float64)
    dirs = np.atleast_2d(dirs).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(dirs != 0, 1.0 / dirs, np.inf)
    t1 = (bounds.lo[None, :] - origins) * inv
    t2 = (bounds.hi[None, :] - origins) * inv
    # rays parallel to a slab and outside it never hit: force the miss
    parallel = dirs == 0
    outside = (origins < bounds.lo[None, :]) | (origins > bounds.hi[None, :])
    t_lo = np.minimum(t1, t2)
    t_hi = np.maximum(t1, t2)
    t_lo = np.where(parallel, np.where(outside, np.inf, -np.inf), t_lo)
    t_hi = np.where(parallel, np.where(outside, -np.inf, np.inf), t_hi)
    t_near = np.maximum(t_lo.max(axis=1), 0.0)
    t_far = t_hi.min(axis=1)
    return t_near, t_far


# ---------------------------------------------------------------------------
# misc sampling


def smoothstep(edge0: float, edge1: float, x: np.ndarray) -> np.ndarray:
    t = np.clip((x - edge0) / (edge1 - edge0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def bilinear_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample img[H,W,C] at fractional pixel coords (u along width, v along height),
    clamping to the border."""
    h, w = img.shape[:2]
    u = np.clip(np.asarray(u, dtype=np.float64), 0, w - 1)
    v = np.clip(np.asarray(v, dtype=np.float64), 0, h - 1)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    top = img[v0, u0] * (1 - fu) + img[v0, u1] * fu
    bot = img[v1, u0] * (1 - fu) + img[v1, u1] * fu
    return (top * (1 - fv) + bot * fv).astype(img.dtype)


def upsample_map(values: np.ndarray, out_h: int, out_w: int, factor: int) -> np.ndarray:
    """Bilinear upsample of a downsampled map back to pixel resolution.

    Cell (i, j) of ``values`` summarizes the factor x factor patch centred at
    full-res pixel (factor*i + (factor-1)/2, ...); sampling honors that
    correspondence rather than assuming corner alignment.
    """
    if values.ndim == 2:
        return upsample_map(values[:, :, None], out_h, out_w, factor)[:, :, 0]
    vv, uu = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    fu = (uu - (factor - 1) / 2) / factor
    fv = (vv - (factor - 1) / 2) / factor
    return bilinear_sample(values, fu, fv)


def patch_center_coords(n: int, factor: int) -> np.ndarray:
    """Full-resolution pixel coordinates of the centers of n patches of size factor."""
    return np.arange(n) * factor + (factor - 1) / 2.0
