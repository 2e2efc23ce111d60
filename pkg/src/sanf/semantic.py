"""Semantic feature grid distilled from a frozen teacher.

One trilinear grid holds G-channel semantic features; small per-scale MLP
heads map its quadrature-accumulated output to the teacher's C channels. The
head runs *after* the weighted sum along each ray — one MLP call per feature
pixel instead of one per sample — and the compositing weights are taken from
the frozen color/density field as constants, so semantic training can never
disturb what the base field renders. With a mesh attached, rendering skips
quadrature entirely and evaluates the head at the surface hit point.

Feature maps render at feature resolution directly (one ray per feature
pixel, aimed at the pixel's patch center in the full-resolution image).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cameras import CameraPose, RayBundle, generate_rays
from .errors import ContractViolation
from .geometry import patch_center_coords
from .grid import FeatureGrid
from .nn import Mlp, make_mlp
from .radiance import RadianceField, clip_to_bounds, quadrature, query_density, sample_ts
from .teacher import FeatureMap

SCALE_FACTORS = (4, 8, 16, 32)
SEM_GRID_CHANNELS = 16
SEM_GRID_RES = 64
HEAD_HIDDEN = (64,)


@dataclass
class SemanticField:
    """Learnable semantic grid + heads, bolted onto a frozen base field."""

    base: RadianceField
    grid: FeatureGrid
    heads: list[Mlp]  # per scale, grid channels -> feature channels
    feature_channels: int
    mesh: object | None = None  # anything with raycast(origins, dirs) -> (t, hit)
    _base_checksums: dict = field(default_factory=dict, repr=False)

    @staticmethod
    def create(base: RadianceField, n_scales: int, feature_channels: int,
               grid_res: int = SEM_GRID_RES, grid_channels: int = SEM_GRID_CHANNELS,
               head_hidden: tuple = HEAD_HIDDEN,
               rng: np.random.Generator | None = None) -> "SemanticField":
        if n_scales < 1 or n_scales > len(SCALE_FACTORS):
            raise ContractViolation(f"n_scales must be in 1..{len(SCALE_FACTORS)}")
        rng = rng if rng is not None else np.random.default_rng(0)
        grid = FeatureGrid.create(grid_res, grid_channels, base.bounds, rng=rng, init_scale=1e-2)
        heads = [make_mlp(grid_channels, list(head_hidden), feature_channels, rng)
                 for _ in range(n_scales)]
        return SemanticField(base=base, grid=grid, heads=heads,
                             feature_channels=feature_channels,
                             _base_checksums=base.checksums())

    @property
    def n_scales(self) -> int:
        return len(self.heads)

    def params(self) -> list[ad.Tensor]:
        """Trainable tensors: the grid and the head weights.

        Head biases stay at their zero init and are excluded on purpose: an
        empty ray accumulates the zero grid feature, and with zero biases
        head(0) is exactly the zero vector — the same canonical "no object"
        value the teacher assigns to plain background. If the biases trained,
        regression toward boundary cells would drag head(0) off zero and every
        empty region would decode as one giant spurious segment.
        """
        out = [self.grid.values]
        for h in self.heads:
            out.extend(h.weights)
        return out

    def feature_dims(self, height: int, width: int) -> list[tuple[int, int, int]]:
        dims = []
        for f in SCALE_FACTORS[: self.n_scales]:
            if height % f or width % f:
                raise ContractViolation(f"image {height}x{width} not divisible by scale {f}")
            dims.append((height // f, width // f, self.feature_channels))
        return dims

    def checksums(self) -> dict[str, str]:
        import hashlib

        def h(a):
            return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()

        out = {"sem.grid": self.grid.checksum()}
        for i, head in enumerate(self.heads):
            for k, (w, b) in enumerate(zip(head.weights, head.biases)):
                out[f"sem.head{i}.layer{k}.w"] = h(w.data)
                out[f"sem.head{i}.layer{k}.b"] = h(b.data)
        return out

    def assert_pluggable(self) -> None:
        """The base field must be bitwise what it was when we attached to it."""
        now = self.base.checksums()
        if now != self._base_checksums:
            changed = [k for k in now if now[k] != self._base_checksums.get(k)]
            raise ContractViolation(f"base field mutated by semantic training: {changed}")

    def attach_mesh(self, mesh) -> None:
        self.mesh = mesh

    def detach_mesh(self) -> None:
        self.mesh = None


# --------------------------------------------------------------- rendering


def base_ray_weights(base: RadianceField, positions: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Quadrature weights of the frozen base field, detached ([R,S] f32).

    Computed with the same transmittance formula as color rendering, then
    stripped off the tape: semantic gradients must never reach the base.
    """
    r, s = positions.shape[:2]
    sigma = ad.constant(query_density(base, positions.reshape(-1, 3)).reshape(r, s))
    _, weights, _, _, _ = quadrature(sigma, deltas, ad.constant(np.zeros((r, s, 1), np.float32)))
    return weights.data.copy()


EMPTY_RAY_COVERAGE = 0.05
"""Minimum accumulated quadrature weight for a ray (or cell) to count as
having hit anything. Below it the rendered feature is the exact zero vector —
the same canonical "no object" value the feature model assigns to plain
background. Without the floor, near-empty rays emit tiny vectors whose
directions are untrained leftovers; cosine decoding normalizes those into
confident junk. The value mirrors the feature model's own noise deadband:
with typical feature norms around 0.3, its 0.02 cutoff admits cells whose
patch is roughly five percent covered, and the same fraction of quadrature
weight should count as occupied here."""

MAX_FEATURE_SUBRAYS = 2
"""Cap on the side of the per-cell anti-aliasing sub-ray grid. The feature
model pools whole image patches before convolving, so a patch a sixth
covered by an object yields a scaled-down feature; averaging the accumulated
grid feature over a sub-ray grid reproduces that partial response, where a
single patch-center ray would give an all-or-nothing answer. A 2x2 grid
already resolves quarter-patch coverage, and denser grids measured no better
while doubling render cost, so the cap stays at 2."""


def _subgrid(factor: int) -> int:
    return min(factor, MAX_FEATURE_SUBRAYS)


def _zero_empty(out: ad.Tensor, coverage: np.ndarray) -> ad.Tensor:
    """Exact zero vector (and no gradient) wherever coverage is under floor."""
    keep = (coverage >= EMPTY_RAY_COVERAGE).astype(np.float32)[:, None]
    mask = np.ascontiguousarray(np.broadcast_to(keep, out.shape))
    return ad.mul(out, ad.constant(mask))


def _accumulate_grid(sem: SemanticField, rays: RayBundle, n_samples: int,
                     rng: np.random.Generator | None):
    """Per-ray accumulated grid features: (Tensor [R,G], weights [R,S])."""
    ts, delta = sample_ts(clip_to_bounds(rays, sem.base.bounds), n_samples, rng)
    r, s = ts.shape
    positions = (rays.origins[:, None, :] + rays.dirs[:, None, :] * ts[:, :, None]).astype(np.float32)
    deltas = np.broadcast_to(delta[:, None], (r, s)).astype(np.float32)
    w = base_ray_weights(sem.base, positions, deltas)
    feats = ad.reshape(sem.grid.sample_points(positions.reshape(-1, 3)), (r, s, sem.grid.channels))
    return ad.weighted_sum(ad.constant(w), feats), w


def render_feature_volumetric(sem: SemanticField, rays: RayBundle, scale: int,
                              n_samples: int = 64,
                              rng: np.random.Generator | None = None):
    """Per-ray features on the tape: head(sum_k w_k * E_sem(x_k)).

    Returns (features Tensor [R,C], weights ndarray [R,S]). The weights come
    from the frozen base; rays whose total weight stays under
    ``EMPTY_RAY_COVERAGE`` (misses included) render the exact zero vector and
    receive no gradient.
    """
    if n_samples < 1:
        raise ContractViolation("n_samples must be >= 1")
    if not (0 <= scale < sem.n_scales):
        raise ContractViolation(f"scale {scale} out of range 0..{sem.n_scales - 1}")
    accum, w = _accumulate_grid(sem, rays, n_samples, rng)
    return _zero_empty(sem.heads[scale](accum), w.sum(axis=1)), w


def cell_subray_uv(pose: CameraPose, factor: int, cells: np.ndarray | None = None):
    """Pixel coordinates of each selected cell's sub-ray grid, cell-major.

    Returns (u, v) arrays of length len(cells) * _subgrid(factor)**2;
    ``cells`` indexes the row-major feature map (default: every cell).
    """
    h, w = pose.height // factor, pose.width // factor
    if cells is None:
        cells = np.arange(h * w)
    else:
        cells = np.asarray(cells)
    ci, cj = np.divmod(cells, w)
    g = _subgrid(factor)
    offs = (np.arange(g) + 0.5) * factor / g - 0.5
    du, dv = np.meshgrid(offs, offs)
    u = cj[:, None] * factor + du.ravel()[None, :]
    v = ci[:, None] * factor + dv.ravel()[None, :]
    return u.ravel(), v.ravel()


def render_feature_cells(sem: SemanticField, pose: CameraPose, scale: int,
                         cells: np.ndarray | None = None, n_samples: int = 64,
                         rng: np.random.Generator | None = None) -> ad.Tensor:
    """Anti-aliased features of the selected cells (default: the whole map).

    Accumulated grid features are averaged over each cell's sub-ray grid
    *before* the head — the analog of the feature model pooling the image
    patch — then cells whose mean coverage stays under the floor render the
    exact zero vector. With a mesh attached, sub-rays become surface lookups
    and coverage is the fraction that hit. Returns a Tensor [len(cells), C].
    """
    if n_samples < 1:
        raise ContractViolation("n_samples must be >= 1")
    if not (0 <= scale < sem.n_scales):
        raise ContractViolation(f"scale {scale} out of range 0..{sem.n_scales - 1}")
    factor = SCALE_FACTORS[scale]
    u, v = cell_subray_uv(pose, factor, cells)
    rays = generate_rays(pose, u=u, v=v)
    k = _subgrid(factor) ** 2
    n = u.shape[0] // k

    if sem.mesh is None:
        accum, w = _accumulate_grid(sem, rays, n_samples, rng)
        coverage = w.sum(axis=1).reshape(n, k).mean(axis=1)
    else:
        t, hit = sem.mesh.raycast(rays.origins, rays.dirs)
        pts = (rays.origins + rays.dirs * np.where(hit, t, 0.0)[:, None]).astype(np.float32)
        feats = sem.grid.sample_points(pts)
        mask = np.ascontiguousarray(np.broadcast_to(
            hit.astype(np.float32)[:, None], (n * k, sem.grid.channels)))
        accum = ad.mul(feats, ad.constant(mask))
        coverage = hit.astype(np.float32).reshape(n, k).mean(axis=1)

    pool = np.full((n, k), 1.0 / k, np.float32)
    cell_accum = ad.weighted_sum(ad.constant(pool),
                                 ad.reshape(accum, (n, k, sem.grid.channels)))
    return _zero_empty(sem.heads[scale](cell_accum), coverage)


def render_feature_surface(sem: SemanticField, points: np.ndarray, scale: int,
                           hit: np.ndarray | None = None) -> ad.Tensor:
    """head(E_sem(x_s)) for surface points [N,3]; rows where ``hit`` is False
    contribute a zero grid feature, matching what an empty ray accumulates."""
    if not (0 <= scale < sem.n_scales):
        raise ContractViolation(f"scale {scale} out of range 0..{sem.n_scales - 1}")
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    feats = sem.grid.sample_points(points)  # [N, G]
    if hit is not None:
        mask = np.ascontiguousarray(
            np.broadcast_to(np.asarray(hit, np.float32).reshape(-1, 1), feats.shape))
        feats = ad.mul(feats, ad.constant(mask))
    return sem.heads[scale](feats)


def feature_rays(pose: CameraPose, factor: int) -> RayBundle:
    """One ray per feature pixel, through the patch center of each cell."""
    h, w = pose.height // factor, pose.width // factor
    us = patch_center_coords(w, factor)
    vs = patch_center_coords(h, factor)
    uu, vv = np.meshgrid(us, vs)
    return generate_rays(pose, u=uu.ravel(), v=vv.ravel())


def render_feature_map(sem: SemanticField, pose: CameraPose, scale: int,
                       n_samples: int = 64) -> FeatureMap:
    """Deterministic feature map at feature resolution (inference path).

    Volumetric quadrature normally; surface lookups when a mesh is attached.
    Either way each cell averages its anti-aliasing sub-rays, and empty cells
    hold the exact zero vector.
    """
    factor = SCALE_FACTORS[scale]
    h, w = sem.feature_dims(pose.height, pose.width)[scale][:2]
    feats = render_feature_cells(sem, pose, scale, n_samples=n_samples)
    return FeatureMap(feats.data.reshape(h, w, sem.feature_channels).copy(), factor)


# ------------------------------------------------------------------ losses


def loss_single(pred: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    """Channel-sum, pixel-mean squared error (same convention as color loss)."""
    target = np.asarray(target, dtype=np.float32)
    target = target.reshape(-1, target.shape[-1])
    flat = ad.reshape(pred, (-1, pred.shape[-1])) if len(pred.shape) != 2 else pred
    if flat.shape != target.shape:
        raise ContractViolation(f"feature loss dims {flat.shape} vs {target.shape}")
    diff = ad.add(flat, ad.constant(-target))
    return ad.mean_all(ad.sum_axis(ad.mul(diff, diff), 1))


def similarity_map(a: np.ndarray, b: np.ndarray,
                   pos_a: np.ndarray, pos_b: np.ndarray) -> np.ndarray:
    """cos(a[p], b[q]) for the sampled cell indices; zero vectors give 0."""
    if len(pos_a) == 0 or len(pos_b) == 0:
        raise ContractViolation("similarity_map needs nonempty position lists")
    ra = _normalize_rows(np.asarray(a, np.float32).reshape(-1, a.shape[-1])[pos_a])
    rb = _normalize_rows(np.asarray(b, np.float32).reshape(-1, b.shape[-1])[pos_b])
    return ra @ rb.T


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def _similarity_rows(flat: ad.Tensor, pos: np.ndarray) -> ad.Tensor:
    return ad.row_normalize(ad.take_rows(flat, np.asarray(pos, np.int64)))


def loss_multi(preds: list[ad.Tensor], targets: list[np.ndarray],
               positions: list[np.ndarray]) -> ad.Tensor:
    """Per-scale feature MSE plus cross-scale correlation terms.

    ``preds[i]`` is a tape Tensor [N_i, C]; ``targets[i]`` the teacher map
    (any shape flattening to [N_i, C]); ``positions[i]`` the sampled cell
    indices used for every correlation term involving scale i — identical for
    prediction and target by construction.
    """
    if not (len(preds) == len(targets) == len(positions)):
        raise ContractViolation(f"scale counts differ: {len(preds)}/{len(targets)}/{len(positions)}")
    total = loss_single(preds[0], targets[0])
    for p, t in zip(preds[1:], targets[1:]):
        total = ad.add(total, loss_single(p, t))
    tgt_flat = [np.asarray(t, np.float32).reshape(-1, t.shape[-1]) for t in targets]
    pred_rows = [_similarity_rows(ad.reshape(p, (-1, p.shape[-1])), pos)
                 for p, pos in zip(preds, positions)]
    tgt_rows = [_normalize_rows(t[pos]) for t, pos in zip(tgt_flat, positions)]
    for i in range(len(preds)):
        for j in range(i + 1, len(preds)):
            s_pred = ad.matmul(pred_rows[i], pred_rows[j], transpose_b=True)
            s_tgt = ad.constant(tgt_rows[i] @ tgt_rows[j].T)
            total = ad.add(total, ad.mse(s_pred, s_tgt))
    return total
