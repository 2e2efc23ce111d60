import numpy as np
import pytest

import sanf.autodiff as ad
from sanf.cameras import orbit_pose
from sanf.errors import ContractViolation
from sanf.geometry import Bounds
from sanf.grid import FeatureGrid
from sanf.nn import Mlp, make_mlp
from sanf.radiance import RadianceField, render_image
from sanf.semantic import (
    SemanticField,
    feature_rays,
    loss_multi,
    loss_single,
    render_feature_map,
    render_feature_surface,
    render_feature_volumetric,
    similarity_map,
)
from sanf.cameras import generate_rays


BOUNDS = Bounds(np.array([-1, -1, -1], np.float32), np.array([1, 1, 1], np.float32))


def constant_density_base(log_sigma: float, res: int = 8) -> RadianceField:
    """Base field with spatially constant density exp(log_sigma)."""
    field = RadianceField.create(BOUNDS, res=res, channels=4, rng=np.random.default_rng(0))
    field.geo_head.weights[-1].data[:] = 0.0
    field.geo_head.biases[-1].data[:] = log_sigma
    for w in field.rgb_head.weights:
        w.data[:] = 0.0
    return field


def make_sem(base, n_scales=1, channels=4, identity=False, grid_res=6, seed=1):
    sem = SemanticField.create(base, n_scales, channels, grid_res=grid_res,
                               grid_channels=channels if identity else 16,
                               rng=np.random.default_rng(seed))
    if identity:
        sem.heads = [Mlp(channels, channels) for _ in range(n_scales)]
    return sem


@pytest.fixture()
def opaque_sem():
    # sigma = e^9 ~ 8000: the first sample absorbs essentially everything
    return make_sem(constant_density_base(9.0), identity=True)


@pytest.fixture()
def pose():
    return orbit_pose(azimuth_deg=30.0, elevation_deg=15.0, radius=2.5, fov_y_deg=45.0,
                      width=32, height=32)


def center_rays(pose, n=5):
    rng = np.random.default_rng(4)
    u = rng.uniform(8, 24, size=n)
    v = rng.uniform(8, 24, size=n)
    return generate_rays(pose, u=u, v=v)


# ------------------------------------------------------------- structure


def test_identity_head_is_exact_weighted_sum(opaque_sem, pose):
    """With a zero-layer head the rendered feature must equal the quadrature
    weighted sum of grid features exactly."""
    rays = center_rays(pose)
    feats, w = render_feature_volumetric(opaque_sem, rays, scale=0, n_samples=8)
    # recompute by hand from the same weights
    ts, delta = None, None
    from sanf.radiance import clip_to_bounds, sample_ts

    ts, delta = sample_ts(clip_to_bounds(rays, BOUNDS), 8)
    positions = rays.origins[:, None, :] + rays.dirs[:, None, :] * ts[:, :, None]
    gf = opaque_sem.grid.sample_points(positions.reshape(-1, 3)).data.reshape(5, 8, -1)
    expect = (w[:, :, None] * gf).sum(axis=1)
    np.testing.assert_allclose(feats.data, expect, rtol=1e-6, atol=1e-7)


def test_identity_head_superposition(opaque_sem, pose):
    """Rendered features are linear in the quadrature weights."""
    rays = center_rays(pose, n=3)
    from sanf.radiance import clip_to_bounds, sample_ts

    ts, _ = sample_ts(clip_to_bounds(rays, BOUNDS), 6)
    positions = (rays.origins[:, None, :] + rays.dirs[:, None, :] * ts[:, :, None]).astype(np.float32)
    gf = ad.reshape(opaque_sem.grid.sample_points(positions.reshape(-1, 3)), (3, 6, 4))
    rng = np.random.default_rng(0)
    w1 = rng.random((3, 6)).astype(np.float32)
    w2 = rng.random((3, 6)).astype(np.float32)
    f1 = ad.weighted_sum(ad.constant(w1), gf).data
    f2 = ad.weighted_sum(ad.constant(w2), gf).data
    f12 = ad.weighted_sum(ad.constant(w1 + w2), gf).data
    np.testing.assert_allclose(f12, f1 + f2, rtol=1e-5, atol=1e-6)


def test_vacuum_renders_head_of_zero(pose):
    sem = make_sem(constant_density_base(-60.0), channels=3)  # sigma ~ 0
    rays = center_rays(pose, n=4)
    feats, w = render_feature_volumetric(sem, rays, scale=0, n_samples=8)
    assert np.abs(w).max() < 1e-20
    mlp0 = sem.heads[0](ad.constant(np.zeros((1, 16), np.float32))).data
    np.testing.assert_allclose(feats.data, np.repeat(mlp0, 4, axis=0), atol=1e-6)


def test_opaque_ray_matches_surface_lookup(opaque_sem, pose):
    """Weight mass collapses onto the first sample, so the volumetric feature
    equals the surface shortcut at that sample's position."""
    rays = center_rays(pose, n=4)
    from sanf.radiance import clip_to_bounds, sample_ts

    feats, w = render_feature_volumetric(opaque_sem, rays, scale=0, n_samples=16)
    assert w[:, 0].min() > 0.999
    ts, _ = sample_ts(clip_to_bounds(rays, BOUNDS), 16)
    x0 = rays.origins + rays.dirs * ts[:, :1]
    surf = render_feature_surface(opaque_sem, x0, scale=0)
    np.testing.assert_allclose(feats.data, surf.data, rtol=2e-3, atol=1e-4)


def test_surface_miss_rows_render_head_of_zero():
    sem = make_sem(constant_density_base(0.0), channels=5)
    pts = np.array([[0.2, 0.1, -0.3], [0.5, 0.5, 0.5]], np.float32)
    out = render_feature_surface(sem, pts, scale=0, hit=np.array([True, False]))
    mlp0 = sem.heads[0](ad.constant(np.zeros((1, 16), np.float32))).data[0]
    np.testing.assert_allclose(out.data[1], mlp0, atol=1e-6)
    assert not np.allclose(out.data[0], mlp0, atol=1e-6)


def test_surface_at_grid_vertex_uses_stored_vector():
    base = constant_density_base(0.0)
    sem = make_sem(base, channels=4, identity=True, grid_res=5)
    vert = sem.grid.values_4d()[1, 2, 3]
    # vertex world position for a 5^3 grid on [-1,1]^3
    x = BOUNDS.lo + np.array([1, 2, 3]) * (BOUNDS.size / 4)
    out = render_feature_surface(sem, x[None, :], scale=0)
    np.testing.assert_allclose(out.data[0], vert, atol=1e-6)


def test_feature_map_shape_and_scale(pose):
    sem = make_sem(constant_density_base(0.0), n_scales=2, channels=3)
    fm0 = render_feature_map(sem, pose, scale=0, n_samples=8)
    fm1 = render_feature_map(sem, pose, scale=1, n_samples=8)
    assert fm0.values.shape == (8, 8, 3) and fm0.scale == 4
    assert fm1.values.shape == (4, 4, 3) and fm1.scale == 8


def test_feature_rays_hit_patch_centers(pose):
    rays = feature_rays(pose, 4)
    full = generate_rays(pose, u=np.array([1.5]), v=np.array([1.5]))
    np.testing.assert_allclose(rays.dirs[0], full.dirs[0], atol=1e-7)


def test_scale_out_of_range(pose):
    sem = make_sem(constant_density_base(0.0), channels=3)
    with pytest.raises(ContractViolation):
        render_feature_volumetric(sem, center_rays(pose), scale=1)
    with pytest.raises(ContractViolation):
        render_feature_surface(sem, np.zeros((1, 3)), scale=-1)


def test_zero_samples_rejected(pose):
    sem = make_sem(constant_density_base(0.0), channels=3)
    with pytest.raises(ContractViolation):
        render_feature_volumetric(sem, center_rays(pose), scale=0, n_samples=0)


# ------------------------------------------------------------- pluggability


def test_base_untouched_by_semantic_updates(pose):
    base = constant_density_base(1.0)
    before = base.checksums()
    img_before = render_image(base, pose, background=np.ones(3, np.float32), n_samples=8)
    sem = make_sem(base, channels=4)
    target = np.random.default_rng(0).random((25, 4), dtype=np.float32)
    for _ in range(3):
        feats, _ = render_feature_volumetric(sem, center_rays(pose, 25), scale=0, n_samples=8)
        loss = loss_single(feats, target)
        ad.backward(loss, params=sem.params())
        for p in sem.params():
            p.data -= 0.01 * p.grad
        ad.zero_grads(sem.params())
    sem.assert_pluggable()
    assert base.checksums() == before
    img_after = render_image(base, pose, background=np.ones(3, np.float32), n_samples=8)
    assert np.array_equal(img_before, img_after)


def test_assert_pluggable_detects_mutation():
    base = constant_density_base(1.0)
    sem = make_sem(base, channels=4)
    base.geo_head.biases[-1].data += 0.5
    with pytest.raises(ContractViolation):
        sem.assert_pluggable()


def test_gradient_reaches_sem_grid_only(pose):
    base = constant_density_base(2.0)
    sem = make_sem(base, channels=4)
    feats, _ = render_feature_volumetric(sem, center_rays(pose, 9), scale=0, n_samples=8)
    loss = loss_single(feats, np.ones((9, 4), np.float32))
    ad.backward(loss, params=sem.params())
    assert float(np.abs(sem.grid.values.grad).max()) > 0
    for p in base.params():
        assert p.grad is None or not p.grad.any()


def test_empty_rays_render_the_exact_zero_vector(pose):
    """Vacuum must never decode as a segment of its own: misses on the
    surface path and low-coverage rays on the volumetric path both produce
    the exact zero vector, and the head biases that would shift it off zero
    are not trainable."""
    base = constant_density_base(-8.0)  # near-vacuum everywhere
    sem = make_sem(base, channels=4)
    for head in sem.heads:
        for b in head.biases:
            assert not b.data.any()
            assert all(b is not p for p in sem.params())
    out = render_feature_surface(sem, np.zeros((3, 3), np.float32),
                                 scale=0, hit=np.zeros(3, bool))
    assert np.array_equal(out.data, np.zeros((3, 4), np.float32))
    feats, w = render_feature_volumetric(sem, center_rays(pose, 9), scale=0, n_samples=16)
    assert w.sum(axis=1).max() < 0.01
    assert np.array_equal(feats.data, np.zeros((9, 4), np.float32))


def test_coverage_floor_separates_solid_from_trace_density(pose):
    """Rays through solid density render nonzero features; the same scene at
    trace density falls under the coverage floor and renders exact zeros."""
    solid = make_sem(constant_density_base(2.0), channels=4)
    feats, w = render_feature_volumetric(solid, center_rays(pose, 4), scale=0, n_samples=16)
    assert w.sum(axis=1).min() > 0.9
    assert np.abs(feats.data).max() > 0

    trace = make_sem(constant_density_base(-8.0), channels=4)
    feats, w = render_feature_volumetric(trace, center_rays(pose, 4), scale=0, n_samples=16)
    assert np.array_equal(feats.data, np.zeros((4, 4), np.float32))


def test_head_biases_stay_zero_through_updates(pose):
    base = constant_density_base(2.0)
    sem = make_sem(base, channels=4)
    target = np.random.default_rng(3).random((9, 4), dtype=np.float32)
    for _ in range(3):
        feats, _ = render_feature_volumetric(sem, center_rays(pose, 9), scale=0, n_samples=8)
        ad.backward(loss_single(feats, target), params=sem.params())
        for p in sem.params():
            p.data -= 0.05 * p.grad
        ad.zero_grads(sem.params())
    for head in sem.heads:
        assert not any(b.data.any() for b in head.biases)


# --------------------------------------------------------------- losses


def test_loss_single_hand_value():
    pred = ad.constant(np.zeros((7, 5), np.float32))
    target = np.ones((7, 5), np.float32)
    # off by 1 in every channel -> channel-sum 5, mean over pixels 5
    assert abs(float(loss_single(pred, target).data) - 5.0) < 1e-6


def test_loss_single_zero_when_equal():
    x = np.random.default_rng(0).random((4, 3)).astype(np.float32)
    assert float(loss_single(ad.constant(x), x).data) == 0.0


def test_loss_single_dim_mismatch():
    with pytest.raises(ContractViolation):
        loss_single(ad.constant(np.zeros((4, 3), np.float32)), np.zeros((5, 3), np.float32))


def test_loss_single_gradient_matches_finite_difference():
    rng = np.random.default_rng(3)
    x = rng.random((6, 4)).astype(np.float64)
    target = rng.random((6, 4)).astype(np.float64)
    t = ad.tensor(x.astype(np.float32), requires_grad=True)
    loss = loss_single(t, target.astype(np.float32))
    ad.backward(loss, params=[t])
    eps = 1e-3
    for idx in [(0, 0), (3, 2), (5, 3)]:
        xp = x.copy(); xp[idx] += eps
        xm = x.copy(); xm[idx] -= eps
        fp = float(loss_single(ad.constant(xp), target).data)
        fm = float(loss_single(ad.constant(xm), target).data)
        num = (fp - fm) / (2 * eps)
        assert abs(num - t.grad[idx]) < 1e-4 * max(1.0, abs(num))


def test_similarity_hand_value():
    a = np.array([[[1.0, 0.0]]], np.float32)  # one cell (1,0)
    b = np.array([[[1.0, 1.0]]], np.float32)  # one cell (1,1)
    s = similarity_map(a, b, np.array([0]), np.array([0]))
    assert abs(s[0, 0] - 1 / np.sqrt(2)) < 1e-6


def test_similarity_self_diagonal_and_range():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 5, 6)).astype(np.float32)
    pos = np.arange(25)
    s = similarity_map(a, a, pos, pos)
    np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-6)
    assert s.min() >= -1.0 - 1e-6 and s.max() <= 1.0 + 1e-6


def test_similarity_zero_vectors_give_zero():
    a = np.zeros((2, 2, 3), np.float32)
    s = similarity_map(a, a, np.array([0, 1]), np.array([2]))
    assert np.all(s == 0.0)


def test_similarity_empty_positions_rejected():
    a = np.zeros((2, 2, 3), np.float32)
    with pytest.raises(ContractViolation):
        similarity_map(a, a, np.array([], dtype=int), np.array([0]))


def test_loss_multi_zero_when_equal():
    rng = np.random.default_rng(2)
    targets = [rng.random((16, 3)).astype(np.float32), rng.random((4, 3)).astype(np.float32)]
    preds = [ad.constant(t.copy()) for t in targets]
    positions = [np.array([0, 3, 5]), np.array([1, 2])]
    assert float(loss_multi(preds, targets, positions).data) < 1e-12


def test_loss_multi_scale_invariance_of_correlation_term():
    """Scaling every feature vector leaves the correlation term at zero."""
    rng = np.random.default_rng(5)
    t0 = rng.normal(size=(9, 4)).astype(np.float32)
    t1 = rng.normal(size=(4, 4)).astype(np.float32)
    preds = [ad.constant(3.0 * t0), ad.constant(3.0 * t1)]
    positions = [np.arange(9), np.arange(4)]
    full = float(loss_multi(preds, [t0, t1], positions).data)
    mse_only = float(ad.add(loss_single(preds[0], t0), loss_single(preds[1], t1)).data)
    assert abs(full - mse_only) < 1e-9  # correlation part contributed ~0


def test_loss_multi_nonnegative_and_penalizes_structure():
    rng = np.random.default_rng(6)
    t0 = rng.normal(size=(9, 4)).astype(np.float32)
    t1 = rng.normal(size=(4, 4)).astype(np.float32)
    # same magnitudes, permuted rows: feature MSE same as a control, but the
    # similarity structure differs so the correlation term must add loss
    perm = np.roll(np.arange(9), 1)
    preds = [ad.constant(t0[perm]), ad.constant(t1)]
    positions = [np.arange(9), np.arange(4)]
    full = float(loss_multi(preds, [t0, t1], positions).data)
    mse_only = float(ad.add(loss_single(preds[0], t0), loss_single(preds[1], t1)).data)
    assert full > mse_only + 1e-4
    assert full >= 0.0


def test_loss_multi_scale_count_mismatch():
    with pytest.raises(ContractViolation):
        loss_multi([ad.constant(np.zeros((2, 2), np.float32))],
                   [np.zeros((2, 2), np.float32), np.zeros((2, 2), np.float32)],
                   [np.array([0])])


def test_loss_multi_gradient_flows_through_correlation():
    rng = np.random.default_rng(7)
    t0 = rng.normal(size=(6, 3)).astype(np.float32)
    t1 = rng.normal(size=(3, 3)).astype(np.float32)
    p0 = ad.tensor(rng.normal(size=(6, 3)).astype(np.float32), requires_grad=True)
    p1 = ad.tensor(rng.normal(size=(3, 3)).astype(np.float32), requires_grad=True)
    loss = loss_multi([p0, p1], [t0, t1], [np.arange(6), np.arange(3)])
    ad.backward(loss, params=[p0, p1])
    assert np.abs(p0.grad).max() > 0 and np.abs(p1.grad).max() > 0
