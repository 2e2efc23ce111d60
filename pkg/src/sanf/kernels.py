"""Numba kernels for the hot loops.

Everything here is single-threaded and compiled with ``fastmath=False`` so a
fixed seed gives bitwise-identical results run to run on the same machine.
The pure-numpy fallbacks double as readable documentation and as an
independent oracle in the kernel tests.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True, fastmath=False)
def gather_corners(values: np.ndarray, idx: np.ndarray, w: np.ndarray, out: np.ndarray) -> None:
    """out[i] = sum_k w[i,k] * values[idx[i,k]].

    values: [V, C] flattened grid, idx: [N, 8] int64, w: [N, 8] f32, out: [N, C] zeroed.
    """
    n, c = out.shape
    for i in range(n):
        for k in range(8):
            j = idx[i, k]
            wk = w[i, k]
            for ch in range(c):
                out[i, ch] += wk * values[j, ch]


@numba.njit(cache=True, fastmath=False)
def scatter_corners(grad_values: np.ndarray, idx: np.ndarray, w: np.ndarray, grad_out: np.ndarray) -> None:
    """Adjoint of gather_corners: grad_values[idx[i,k]] += w[i,k] * grad_out[i]."""
    n, c = grad_out.shape
    for i in range(n):
        for k in range(8):
            j = idx[i, k]
            wk = w[i, k]
            for ch in range(c):
                grad_values[j, ch] += wk * grad_out[i, ch]


@numba.njit(cache=True, fastmath=False)
def adam_update(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    t: int,
) -> None:
    """In-place Adam with bias correction on flat f32 arrays; t is 1-based."""
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for i in range(p.shape[0]):
        gi = g[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
        mh = m[i] / bc1
        vh = v[i] / bc2
        p[i] -= lr * mh / (np.sqrt(vh) + eps)


@numba.njit(cache=True, fastmath=False)
def raycast_bvh(
    origins: np.ndarray,
    dirs: np.ndarray,
    t_max: np.ndarray,
    node_lo: np.ndarray,
    node_hi: np.ndarray,
    node_left: np.ndarray,
    node_right: np.ndarray,
    node_start: np.ndarray,
    node_count: np.ndarray,
    tri_index: np.ndarray,
    v0: np.ndarray,
    e1: np.ndarray,
    e2: np.ndarray,
    out_t: np.ndarray,
    out_tri: np.ndarray,
) -> None:
    """Nearest-hit raycast against a flattened BVH (Moller-Trumbore per leaf).

    Leaf nodes have node_left == -1 and reference tri_index[start:start+count].
    out_t is infinity and out_tri is -1 where a ray misses.
    """
    n = origins.shape[0]
    stack = np.empty(64, dtype=np.int32)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        inv_x = 1.0 / dx if dx != 0.0 else np.inf
        inv_y = 1.0 / dy if dy != 0.0 else np.inf
        inv_z = 1.0 / dz if dz != 0.0 else np.inf
        best_t = t_max[r]
        best_tri = -1
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            # slab test against node box
            tx1 = (node_lo[node, 0] - ox) * inv_x
            tx2 = (node_hi[node, 0] - ox) * inv_x
            tmin = min(tx1, tx2)
            tmax = max(tx1, tx2)
            ty1 = (node_lo[node, 1] - oy) * inv_y
            ty2 = (node_hi[node, 1] - oy) * inv_y
            tmin = max(tmin, min(ty1, ty2))
            tmax = min(tmax, max(ty1, ty2))
            tz1 = (node_lo[node, 2] - oz) * inv_z
            tz2 = (node_hi[node, 2] - oz) * inv_z
            tmin = max(tmin, min(tz1, tz2))
            tmax = min(tmax, max(tz1, tz2))
            if tmax < max(tmin, 0.0) or tmin > best_t:
                continue
            if node_left[node] < 0:
                s = node_start[node]
                for k in range(node_count[node]):
                    tri = tri_index[s + k]
                    # Moller-Trumbore
                    px = dy * e2[tri, 2] - dz * e2[tri, 1]
                    py = dz * e2[tri, 0] - dx * e2[tri, 2]
                    pz = dx * e2[tri, 1] - dy * e2[tri, 0]
                    det = e1[tri, 0] * px + e1[tri, 1] * py + e1[tri, 2] * pz
                    if abs(det) < 1e-12:
                        continue
                    inv_det = 1.0 / det
                    sx = ox - v0[tri, 0]
                    sy = oy - v0[tri, 1]
                    sz = oz - v0[tri, 2]
                    u = (sx * px + sy * py + sz * pz) * inv_det
                    if u < -1e-7 or u > 1.0 + 1e-7:
                        continue
                    qx = sy * e1[tri, 2] - sz * e1[tri, 1]
                    qy = sz * e1[tri, 0] - sx * e1[tri, 2]
                    qz = sx * e1[tri, 1] - sy * e1[tri, 0]
                    vv = (dx * qx + dy * qy + dz * qz) * inv_det
                    if vv < -1e-7 or u + vv > 1.0 + 1e-7:
                        continue
                    t = (e2[tri, 0] * qx + e2[tri, 1] * qy + e2[tri, 2] * qz) * inv_det
                    if 1e-6 < t < best_t:
                        best_t = t
                        best_tri = tri
            else:
                stack[top] = node_left[node]
                top += 1
                stack[top] = node_right[node]
                top += 1
        out_t[r] = best_t if best_tri >= 0 else np.inf
        out_tri[r] = best_tri


def gather_corners_np(values: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Reference implementation of gather_corners (oracle for tests)."""
    return np.einsum("nk,nkc->nc", w, values[idx]).astype(np.float32)


def scatter_corners_np(n_values: int, idx: np.ndarray, w: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Reference implementation of scatter_corners (oracle for tests)."""
    grad = np.zeros((n_values, grad_out.shape[1]), dtype=np.float64)
    contrib = w[:, :, None].astype(np.float64) * grad_out[:, None, :].astype(np.float64)
    np.add.at(grad, idx.reshape(-1), contrib.reshape(-1, grad_out.shape[1]))
    return grad.astype(np.float32)
