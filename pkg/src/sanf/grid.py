"""Dense trilinear feature grids: the learnable backbone of every field.

Values are stored flat as [n_vertices, channels] so the autodiff gather op,
the optimizer, and the checkpoint writer all see one contiguous parameter.
Grid vertex (0,0,0) sits at bounds.lo and (nx-1, ny-1, nz-1) at bounds.hi;
queries outside the bounds clamp to the boundary.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .geometry import Bounds

# corner order: bit 2 -> x, bit 1 -> y, bit 0 -> z
_CORNERS = np.array([[(k >> 2) & 1, (k >> 1) & 1, k & 1] for k in range(8)], dtype=np.int64)


@dataclass
class FeatureGrid:
    values: ad.Tensor  # [nx*ny*nz, channels]
    res: tuple[int, int, int]
    bounds: Bounds

    def __post_init__(self):
        nx, ny, nz = self.res
        if min(self.res) < 2:
            raise ContractViolation("FeatureGrid: need at least 2 vertices per axis")
        if self.values.data.shape[0] != nx * ny * nz:
            raise ContractViolation(
                f"FeatureGrid: {self.values.data.shape[0]} vertices != {nx}*{ny}*{nz}"
            )

    @property
    def channels(self) -> int:
        return self.values.data.shape[1]

    @staticmethod
    def create(res: int | tuple[int, int, int], channels: int, bounds: Bounds,
               rng: np.random.Generator | None = None, init_scale: float = 0.0) -> "FeatureGrid":
        """Zero-initialized by default; pass init_scale > 0 for uniform noise."""
        if isinstance(res, int):
            res = (res, res, res)
        n = res[0] * res[1] * res[2]
        if init_scale > 0:
            if rng is None:
                raise ContractViolation("FeatureGrid.create: init_scale > 0 needs an rng")
            data = rng.uniform(-init_scale, init_scale, size=(n, channels)).astype(np.float32)
        else:
            data = np.zeros((n, channels), dtype=np.float32)
        return FeatureGrid(values=ad.tensor(data, requires_grad=True), res=res, bounds=bounds)

    def prepare(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Corner indices and trilinear weights for points [N,3] (clamped to bounds)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        nx, ny, nz = self.res
        scale = (np.array([nx, ny, nz]) - 1) / self.bounds.size.astype(np.float64)
        g = (points - self.bounds.lo) * scale
        g = np.clip(g, 0.0, np.array([nx, ny, nz]) - 1)
        i0 = np.minimum(np.floor(g), np.array([nx, ny, nz]) - 2).astype(np.int64)
        f = g - i0  # in [0, 1]
        corners = i0[:, None, :] + _CORNERS[None, :, :]  # [N,8,3]
        idx = (corners[:, :, 0] * ny + corners[:, :, 1]) * nz + corners[:, :, 2]
        one_minus = 1.0 - f
        w = np.ones((points.shape[0], 8))
        for axis in range(3):
            bit = _CORNERS[:, axis]
            w = w * np.where(bit[None, :] == 1, f[:, axis, None], one_minus[:, axis, None])
        return np.ascontiguousarray(idx), np.ascontiguousarray(w.astype(np.float32))

    def sample(self, prep: tuple[np.ndarray, np.ndarray]) -> ad.Tensor:
        idx, w = prep
        return ad.grid_gather(self.values, idx, w)

    def sample_points(self, points: np.ndarray) -> ad.Tensor:
        return self.sample(self.prepare(points))

    def values_4d(self) -> np.ndarray:
        """View as [nx, ny, nz, channels] (shares memory with the parameter)."""
        nx, ny, nz = self.res
        return self.values.data.reshape(nx, ny, nz, self.channels)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values.data).tobytes()).hexdigest()
