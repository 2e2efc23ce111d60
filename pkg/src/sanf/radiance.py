"""The base radiance field: two trilinear grids with shallow MLP decoders,
quadrature rendering, and the photometric training loop.

Density decodes through exp (positive, unbounded), color through sigmoid.
Scenes are Lambertian so color takes no view direction. Rendering integrates
front to back:

    weight_i = T_i * (1 - exp(-sigma_i * delta_i)),  T_i = exp(-sum_{j<i} sigma_j * delta_j)

with uniform bins over the ray's slab range, so sum(weights) = 1 - T_end
exactly and background compositing is a single outer product with T_end.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dfield

import numpy as np

from . import autodiff as ad
from .cameras import CameraPose, RayBundle, generate_rays
from .errors import ContractViolation, DivergenceError
from .geometry import Bounds, ray_box_range
from .grid import FeatureGrid
from .nn import Adam, LrSchedule, Mlp, make_mlp
from .scenes import SceneSpec, oracle_render_cached

log = logging.getLogger(__name__)


@dataclass
class RadianceField:
    geo_grid: FeatureGrid
    rgb_grid: FeatureGrid
    geo_head: Mlp
    rgb_head: Mlp
    bounds: Bounds

    @staticmethod
    def create(bounds: Bounds, res: int = 64, channels: int = 8,
               rng: np.random.Generator | None = None) -> "RadianceField":
        # Grids get small uniform noise rather than zeros: with zero features
        # and zero biases every hidden relu sits exactly at 0 and the grids
        # would never receive gradient.
        rng = rng if rng is not None else np.random.default_rng(0)
        return RadianceField(
            geo_grid=FeatureGrid.create(res, channels, bounds, rng, init_scale=1e-2),
            rgb_grid=FeatureGrid.create(res, channels, bounds, rng, init_scale=1e-2),
            geo_head=make_mlp(channels, [16], 1, rng),
            rgb_head=make_mlp(channels, [16], 3, rng),
            bounds=bounds,
        )

    def params(self) -> list[ad.Tensor]:
        return [self.geo_grid.values, self.rgb_grid.values] + self.geo_head.params() + self.rgb_head.params()

    def checksums(self) -> dict[str, str]:
        import hashlib

        out = {"geo.grid": self.geo_grid.checksum(), "rgb.grid": self.rgb_grid.checksum()}
        for name, head in (("geo.head", self.geo_head), ("rgb.head", self.rgb_head)):
            h = hashlib.sha256()
            for p in head.params():
                h.update(np.ascontiguousarray(p.data).tobytes())
            out[name] = h.hexdigest()
        return out

    def density_at(self, points: np.ndarray) -> ad.Tensor:
        """sigma = exp(head(geo_features(x))), shape [N]."""
        sig = ad.exp(self.geo_head(self.geo_grid.sample_points(points)))
        return ad.reshape(sig, (sig.shape[0],))

    def color_at(self, points: np.ndarray) -> ad.Tensor:
        """albedo = sigmoid(head(rgb_features(x))), shape [N,3]."""
        return ad.sigmoid(self.rgb_head(self.rgb_grid.sample_points(points)))


def query_density(field: RadianceField, points: np.ndarray) -> np.ndarray:
    return field.density_at(points).data.copy()


def query_color(field: RadianceField, points: np.ndarray) -> np.ndarray:
    return field.color_at(points).data.copy()


@dataclass
class RaySamples:
    """Per-sample quantities of one rendered batch (detached, f32)."""

    positions: np.ndarray  # [R,S,3]
    deltas: np.ndarray  # [R,S]
    sigmas: np.ndarray  # [R,S]
    alphas: np.ndarray  # [R,S]
    transmittances: np.ndarray  # [R,S]
    weights: np.ndarray  # [R,S]

    def validate(self) -> None:
        a, t, w = self.alphas, self.transmittances, self.weights
        if a.min() < 0 or a.max() > 1:
            raise ContractViolation("alpha outside [0,1]")
        if np.abs(t[:, 0] - 1.0).max() > 1e-6:
            raise ContractViolation("transmittance does not start at 1")
        if (np.diff(t, axis=1) > 1e-6).any():
            raise ContractViolation("transmittance increased along a ray")
        if (w.sum(axis=1) > 1 + 1e-6).any():
            raise ContractViolation("weights sum past 1")


def sample_ts(rays: RayBundle, n_samples: int, rng: np.random.Generator | None = None):
    """Uniform bins over [t_near, t_far]; jittered within each bin when an rng
    is given (training), bin midpoints otherwise (deterministic rendering)."""
    r = len(rays)
    span = np.maximum(rays.t_far - rays.t_near, 0.0)
    finite = np.isfinite(span)
    span = np.where(finite, span, 0.0)
    delta = (span / n_samples).astype(np.float32)  # [R]
    if rng is None:
        offs = np.full((r, n_samples), 0.5, dtype=np.float32)
    else:
        offs = rng.random((r, n_samples), dtype=np.float32)
    ts = rays.t_near[:, None].astype(np.float32) + (np.arange(n_samples, dtype=np.float32)[None, :] + offs) * delta[:, None]
    return ts, delta


def quadrature(sigma: ad.Tensor, deltas: np.ndarray, values: ad.Tensor):
    """Front-to-back compositing of per-sample values.

    sigma [R,S], deltas [R,S] (constant), values [R,S,C]. Returns
    (out [R,C], weights [R,S], trans [R,S], alpha [R,S], t_end [R]), all on
    the tape. Transmittance is exp(-exclusive_cumsum(sigma*delta)), which
    equals the product of (1 - alpha_j) over j < i exactly.
    """
    sig_dt = ad.mul(sigma, ad.constant(deltas, dtype=sigma.data.dtype))
    trans = ad.exp(ad.scale(ad.cumsum_exclusive(sig_dt), -1.0))
    alpha = ad.add_const(ad.scale(ad.exp(ad.scale(sig_dt, -1.0)), -1.0), 1.0)
    weights = ad.mul(trans, alpha)
    t_end = ad.exp(ad.scale(ad.sum_axis(sig_dt, 1), -1.0))
    return ad.weighted_sum(weights, values), weights, trans, alpha, t_end


def _composite(field: RadianceField, rays: RayBundle, ts: np.ndarray, delta: np.ndarray):
    """Shared forward pass; returns (color, t_end, samples) with color/t_end on the tape."""
    r, s = ts.shape
    positions = rays.origins[:, None, :] + rays.dirs[:, None, :] * ts[:, :, None]
    flat = positions.reshape(-1, 3)

    sigma2 = ad.reshape(field.density_at(flat), (r, s))
    deltas = np.broadcast_to(delta[:, None], (r, s)).astype(np.float32)
    color_samples = ad.reshape(field.color_at(flat), (r, s, 3))
    color, weights, trans, alpha, t_end = quadrature(sigma2, deltas, color_samples)

    samples = RaySamples(
        positions=positions.astype(np.float32),
        deltas=deltas.copy(),
        sigmas=sigma2.data.copy(),
        alphas=alpha.data.copy(),
        transmittances=trans.data.copy(),
        weights=weights.data.copy(),
    )
    return color, t_end, samples


def render_rgb(field: RadianceField, rays: RayBundle, n_samples: int = 64) -> tuple[np.ndarray, RaySamples]:
    """Deterministic quadrature color (no background) plus per-sample internals."""
    ts, delta = sample_ts(clip_to_bounds(rays, field.bounds), n_samples)
    color, _, samples = _composite(field, rays, ts, delta)
    return color.data.copy(), samples


def clip_to_bounds(rays: RayBundle, bounds: Bounds) -> RayBundle:
    """Restrict every ray's t range to the field bounds; misses get an empty range."""
    tn, tf = ray_box_range(rays.origins, rays.dirs, bounds)
    miss = tn > tf
    rays.t_near = np.where(miss, 0.0, tn)
    rays.t_far = np.where(miss, 0.0, tf)
    return rays


def render_image(field: RadianceField, pose: CameraPose, background: np.ndarray,
                 n_samples: int = 64, chunk: int = 8192) -> np.ndarray:
    """[H,W,3] image with background compositing (the service render path)."""
    rays = clip_to_bounds(generate_rays(pose), field.bounds)
    bg = np.asarray(background, dtype=np.float32)
    out = np.empty((len(rays), 3), dtype=np.float32)
    for s in range(0, len(rays), chunk):
        e = min(s + chunk, len(rays))
        sub = RayBundle(rays.origins[s:e], rays.dirs[s:e], rays.t_near[s:e], rays.t_far[s:e])
        ts, delta = sample_ts(sub, n_samples)
        color, t_end, _ = _composite(field, sub, ts, delta)
        out[s:e] = color.data + t_end.data[:, None] * bg[None, :]
    return np.clip(out, 0.0, 1.0).reshape(pose.height, pose.width, 3)


def nerf_loss(pred: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    """Photometric loss: squared error summed over channels, averaged over rays."""
    diff = ad.add(pred, ad.constant(-np.asarray(target, dtype=np.float32)))
    return ad.mean_all(ad.sum_axis(ad.mul(diff, diff), 1))


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    m = float(np.mean((pred.astype(np.float64) - target.astype(np.float64)) ** 2))
    if m == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / m))


@dataclass
class NerfTrainResult:
    field: RadianceField
    history: list[dict] = dfield(default_factory=list)
    final_psnr: float = float("nan")


def train_nerf(
    scene: SceneSpec,
    config,  # TrainConfig; typed loosely to keep the import graph acyclic
    frames: list | None = None,
    rng_init: np.random.Generator | None = None,
    rng_rays: np.random.Generator | None = None,
    on_eval=None,
) -> NerfTrainResult:
    """Stage one: fit the radiance field to the scene's training views.

    ``frames`` lets callers reuse pre-rendered oracle frames; by default the
    training cameras are rendered here once.
    """
    if not scene.train_cameras:
        raise ContractViolation("train_nerf: scene has no training cameras")
    rng_init = rng_init if rng_init is not None else np.random.default_rng(config.seed)
    rng_rays = rng_rays if rng_rays is not None else np.random.default_rng(config.seed + 1)

    poses = scene.train_cameras
    if frames is None:
        log.info("rendering %d oracle training views", len(poses))
        frames = [oracle_render_cached(scene, p) for p in poses]
    targets = np.stack([f.rgb for f in frames])  # [F,H,W,3]
    f_count, h, w = targets.shape[:3]

    # Precompute every training ray once; per step we index into the pool.
    all_origins = np.empty((f_count, h * w, 3), dtype=np.float64)
    all_dirs = np.empty((f_count, h * w, 3), dtype=np.float64)
    all_tn = np.empty((f_count, h * w))
    all_tf = np.empty((f_count, h * w))
    for i, p in enumerate(poses):
        rb = clip_to_bounds(generate_rays(p), scene.bounds)
        all_origins[i], all_dirs[i] = rb.origins, rb.dirs
        all_tn[i], all_tf[i] = rb.t_near, rb.t_far
    flat_targets = targets.reshape(f_count, h * w, 3)

    field = RadianceField.create(scene.bounds, res=config.grid_res, channels=config.grid_channels, rng=rng_init)
    opt = Adam(field.params(), LrSchedule(config.lr_start, config.lr_end, config.nerf_steps))
    bg = scene.background.astype(np.float32)

    result = NerfTrainResult(field=field)
    t0 = time.perf_counter()
    for step in range(config.nerf_steps):
        fi = rng_rays.integers(0, f_count, size=config.rays_per_step)
        pi = rng_rays.integers(0, h * w, size=config.rays_per_step)
        rays = RayBundle(all_origins[fi, pi], all_dirs[fi, pi], all_tn[fi, pi], all_tf[fi, pi])
        ts, delta = sample_ts(rays, config.samples_per_ray, rng_rays)

        opt.zero_grad()
        color, t_end, _ = _composite(field, rays, ts, delta)
        full = ad.add(color, ad.outer(t_end, ad.constant(bg)))
        loss = nerf_loss(full, flat_targets[fi, pi])
        lv = loss.item()
        if not np.isfinite(lv):
            raise DivergenceError(f"nerf loss became {lv} at step {step}")
        ad.backward(loss, params=opt.params)
        opt.step()

        if (step + 1) % config.eval_every == 0 or step + 1 == config.nerf_steps:
            val = evaluate_psnr(field, scene)
            row = {"step": step + 1, "loss": lv, "psnr": val, "wall": time.perf_counter() - t0}
            result.history.append(row)
            log.info("nerf step %d loss %.5f psnr %.2f", step + 1, lv, val)
            if on_eval:
                on_eval(row)

    result.final_psnr = result.history[-1]["psnr"] if result.history else evaluate_psnr(field, scene)
    return result


def evaluate_psnr(field: RadianceField, scene: SceneSpec, frames: list | None = None) -> float:
    """PSNR over the scene's held-out test views."""
    if not scene.test_cameras:
        raise ContractViolation("evaluate_psnr: scene has no test cameras")
    if frames is None:
        frames = [oracle_render_cached(scene, p) for p in scene.test_cameras]
    preds = [render_image(field, p, scene.background) for p in scene.test_cameras]
    return psnr(np.stack(preds), np.stack([f.rgb for f in frames]))
