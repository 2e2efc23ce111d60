"""Trainer behaviour: config wire format, feature-cache policy, stage-two
training loop invariants (determinism, frozen base, divergence recovery),
mask-agreement protocol, and the inference benchmark."""

import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sanf.cameras import orbit_pose
from sanf.errors import ContractViolation, DivergenceError
from sanf.radiance import RadianceField, render_image
from sanf.scenes import make_one_sphere_scene
from sanf.teacher import build_teacher
from sanf.trainer import (
    EVAL_CSV_COLUMNS,
    CacheEntry,
    FeatureCache,
    TrainConfig,
    benchmark_inference,
    create_semantic,
    evaluate_iou,
    mask_iou,
    train_semantic,
)


# ---------------------------------------------------------------------------
# shared tiny fixtures: a 32x32 scene and a frozen random radiance field.
# Stage-two mechanics do not depend on stage-one quality, so the base field
# is untrained — what matters is that it stays bitwise frozen.


@pytest.fixture(scope="module")
def scene():
    return make_one_sphere_scene(32, 32)


@pytest.fixture(scope="module")
def base(scene):
    return RadianceField.create(scene.bounds, res=8, channels=4,
                                rng=np.random.default_rng(7))


@pytest.fixture(scope="module")
def teacher(scene):
    return build_teacher("single")


def tiny_config(**over) -> TrainConfig:
    kw = dict(sem_steps=6, eval_every=3, samples_per_ray=8, rays_per_step=64,
              warmup_fresh_steps=2, cache_capacity=4, image_size=32,
              sem_grid_res=6, sem_grid_channels=8, seed=11)
    kw.update(over)
    return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# TrainConfig wire format


def test_config_json_round_trip():
    cfg = tiny_config(cache_hit_probability=0.5, augment_poses=False)
    data = cfg.to_json()
    assert data["semSteps"] == 6
    assert data["cacheHitProbability"] == 0.5
    assert data["augmentPoses"] is False
    assert all("_" not in k for k in data)
    assert TrainConfig.from_json(data) == cfg


def test_config_defaults_are_the_standard_run():
    cfg = TrainConfig()
    assert (cfg.nerf_steps, cfg.sem_steps) == (3000, 2000)
    assert (cfg.rays_per_step, cfg.samples_per_ray) == (4096, 64)
    assert (cfg.lr_start, cfg.lr_end) == (0.01, 0.001)
    assert (cfg.cache_capacity, cfg.cache_hit_probability) == (256, 0.75)
    assert (cfg.warmup_fresh_steps, cfg.eval_every) == (64, 500)


def test_config_rejects_unknown_key():
    data = TrainConfig().to_json()
    data["semStep"] = 5
    with pytest.raises(ContractViolation, match="semStep"):
        TrainConfig.from_json(data)


@pytest.mark.parametrize("over", [
    dict(sem_steps=-1),
    dict(rays_per_step=0),
    dict(cache_hit_probability=1.5),
    dict(cache_hit_probability=-0.1),
    dict(lr_start=0.001, lr_end=0.01),
    dict(lr_end=0.0),
    dict(cache_capacity=0),
    dict(eval_every=0),
])
def test_config_rejects_bad_values(over):
    with pytest.raises(ContractViolation):
        TrainConfig(**over)


def test_config_rejects_bad_types():
    data = TrainConfig().to_json()
    data["semSteps"] = 3.5
    with pytest.raises(ContractViolation):
        TrainConfig.from_json(data)
    data = TrainConfig().to_json()
    data["semSteps"] = True
    with pytest.raises(ContractViolation):
        TrainConfig.from_json(data)
    data = TrainConfig().to_json()
    data["augmentPoses"] = 1
    with pytest.raises(ContractViolation):
        TrainConfig.from_json(data)


# ---------------------------------------------------------------------------
# FeatureCache policy. Entries carry opaque payloads; the pose slot only
# needs identity, so plain markers stand in for real poses/features.


def _entry(tag):
    return CacheEntry(pose=tag, features=[tag])


@settings(max_examples=60, deadline=None)
@given(capacity=st.integers(1, 8), tags=st.lists(st.integers(), max_size=30))
def test_cache_fifo_matches_queue_oracle(capacity, tags):
    cache = FeatureCache(capacity, 0.5, 0, np.random.default_rng(0))
    model = collections.deque(maxlen=capacity)
    for tag in tags:
        cache.insert(_entry(tag))
        model.append(tag)
        assert [e.pose for e in cache.entries] == list(model)
        assert len(cache) <= capacity


def _drive(cache, n_steps):
    """Run the cache against counting stand-ins; returns per-step freshness."""
    counters = {"pose": 0, "render": 0, "encode": 0}

    def sample_pose():
        counters["pose"] += 1
        return counters["pose"]

    def render(pose):
        counters["render"] += 1
        return pose

    def encode(img):
        counters["encode"] += 1
        return [img]

    flags = [cache.get_or_sample(sample_pose, render, encode)[1] for _ in range(n_steps)]
    return flags, counters


def test_cache_warmup_is_always_fresh():
    cache = FeatureCache(8, 1.0, 5, np.random.default_rng(1))
    flags, _ = _drive(cache, 5)
    assert flags == [True] * 5


def test_cache_fresh_fraction_is_binomial():
    p_hit = 0.75
    warmup, after = 64, 2000
    cache = FeatureCache(256, p_hit, warmup, np.random.default_rng(2))
    flags, counters = _drive(cache, warmup + after)
    fresh_after = sum(flags[warmup:])
    frac = fresh_after / after
    sigma = np.sqrt(p_hit * (1 - p_hit) / after)
    assert abs(frac - (1 - p_hit)) < 3 * sigma
    assert counters["encode"] == sum(flags)
    assert counters["render"] == counters["encode"] == counters["pose"]


def test_cache_hit_probability_zero_is_always_fresh():
    cache = FeatureCache(16, 0.0, 0, np.random.default_rng(3))
    flags, counters = _drive(cache, 200)
    assert all(flags)
    assert counters["encode"] == 200


def test_cache_hit_probability_one_reuses_after_first():
    cache = FeatureCache(16, 1.0, 0, np.random.default_rng(4))
    flags, counters = _drive(cache, 50)
    # the very first draw wants a reuse but finds nothing → logged fallback
    assert flags == [True] + [False] * 49
    assert cache.n_empty_hits == 1
    assert counters["encode"] == 1


def test_cache_hit_returns_stored_entry_without_recomputing():
    cache = FeatureCache(4, 1.0, 3, np.random.default_rng(5))
    flags, counters = _drive(cache, 20)
    assert flags[:3] == [True] * 3 and not any(flags[3:])
    assert counters["encode"] == 3
    stored = {e.pose for e in cache.entries}
    hit_entry, was_fresh = cache.get_or_sample(lambda: 99, lambda p: p, lambda i: [i])
    assert not was_fresh and hit_entry.pose in stored


def test_cache_rejects_bad_parameters():
    with pytest.raises(ContractViolation):
        FeatureCache(0, 0.5, 0, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        FeatureCache(4, 1.5, 0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# mask_iou


def test_mask_iou_hand_cases():
    a = np.array([[True, True], [False, False]])
    b = np.array([[True, False], [False, False]])
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, ~a) == 0.0
    assert mask_iou(a, b) == 0.5
    empty = np.zeros((2, 2), dtype=bool)
    assert mask_iou(empty, empty) == 1.0
    with pytest.raises(ContractViolation):
        mask_iou(np.zeros((2, 2), bool), np.zeros((3, 2), bool))


# ---------------------------------------------------------------------------
# train_semantic loop invariants


def test_train_semantic_deterministic_across_runs(base, teacher, scene):
    results = []
    for _ in range(2):
        r = train_semantic(base, None, teacher, scene, tiny_config())
        results.append(r)
    c0, c1 = results[0].sem.checksums(), results[1].sem.checksums()
    assert c0 == c1
    h0 = [{k: v for k, v in row.items() if k != "wallTime"} for row in results[0].history]
    h1 = [{k: v for k, v in row.items() if k != "wallTime"} for row in results[1].history]
    assert h0 == h1


def test_train_semantic_leaves_base_frozen(base, teacher, scene):
    before = base.checksums()
    probe_pose = scene.test_cameras[0]
    img_before = render_image(base, probe_pose, scene.background, n_samples=8)
    r = train_semantic(base, None, teacher, scene, tiny_config(seed=21))
    assert base.checksums() == before
    img_after = render_image(base, probe_pose, scene.background, n_samples=8)
    np.testing.assert_array_equal(img_before, img_after)
    r.sem.assert_pluggable()


def test_train_semantic_zero_steps_leaves_field_unchanged(base, teacher, scene):
    cfg = tiny_config(sem_steps=0)
    from sanf.seeding import seed_streams
    sem = create_semantic(base, teacher, cfg, seed_streams(cfg.seed)["init"])
    before = sem.checksums()
    r = train_semantic(base, sem, teacher, scene, cfg)
    assert r.sem.checksums() == before
    assert r.supervision_encodes == 0
    assert r.history == []


def test_train_semantic_counts_one_encode_per_step_without_reuse(base, teacher, scene):
    cfg = tiny_config(cache_hit_probability=0.0, warmup_fresh_steps=0)
    r = train_semantic(base, None, teacher, scene, cfg)
    assert r.supervision_encodes == cfg.sem_steps
    assert r.cache_stats["fresh"] == cfg.sem_steps
    assert r.cache_stats["hits"] == 0


def test_train_semantic_reuses_supervision(base, teacher, scene):
    cfg = tiny_config(sem_steps=30, warmup_fresh_steps=2, cache_hit_probability=1.0)
    r = train_semantic(base, None, teacher, scene, cfg)
    assert r.supervision_encodes == r.cache_stats["fresh"]
    assert r.cache_stats["fresh"] < cfg.sem_steps
    assert r.cache_stats["hits"] == cfg.sem_steps - r.cache_stats["fresh"]


def test_train_semantic_writes_eval_csv(base, teacher, scene, tmp_path):
    path = tmp_path / "metrics.csv"
    r = train_semantic(base, None, teacher, scene, tiny_config(), log_csv=path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == ",".join(EVAL_CSV_COLUMNS)
    assert len(lines) - 1 == len(r.history) == 2  # steps 3 and 6
    first = lines[1].split(",")
    assert int(first[0]) == 3
    assert np.isfinite(float(first[2]))


def test_train_semantic_recovers_last_good_on_divergence(base, teacher, scene):
    cfg = tiny_config(sem_steps=10, eval_every=2)
    from sanf.seeding import seed_streams
    sem = create_semantic(base, teacher, cfg, seed_streams(cfg.seed)["init"])
    clean = {}

    def poison(row):
        if row["step"] == 4 and not clean:
            clean.update(sem.checksums())
            sem.params()[0].data[0, 0] = np.nan

    with pytest.raises(DivergenceError, match="restored to step 4"):
        train_semantic(base, sem, teacher, scene, cfg, on_eval=poison)
    assert sem.checksums() == clean
    assert np.isfinite(sem.params()[0].data).all()


def test_train_semantic_rejects_mismatched_field(base, teacher, scene):
    cfg = tiny_config()
    from sanf.seeding import seed_streams
    rng = seed_streams(0)["init"]
    from sanf.semantic import SemanticField
    wrong = SemanticField.create(base, n_scales=2, feature_channels=teacher.spec.channels,
                                 grid_res=4, grid_channels=4, rng=rng)
    with pytest.raises(ContractViolation, match="scales"):
        train_semantic(base, wrong, teacher, scene, cfg)


# ---------------------------------------------------------------------------
# evaluation protocol


@pytest.fixture(scope="module")
def trained(base, teacher, scene):
    return train_semantic(base, None, teacher, scene, tiny_config(sem_steps=12)).sem


def test_evaluate_iou_click_protocol_shape(base, trained, teacher, scene):
    out = evaluate_iou(base, trained, teacher, scene, n_samples=8, grid=3)
    assert out["kind"] == "single"
    assert len(out["rows"]) == len(scene.test_cameras) * 9
    assert all(0.0 <= r["iou"] <= 1.0 for r in out["rows"])
    assert out["min"] <= out["mean"] <= 1.0
    assert all(r["probe"].startswith("click(") for r in out["rows"])


def test_evaluate_iou_prompt_protocol_shape(base, scene):
    multi = build_teacher("multi", scene=scene)
    cfg = tiny_config(sem_steps=2)
    r = train_semantic(base, None, multi, scene, cfg)
    out = evaluate_iou(base, r.sem, multi, scene, n_samples=8)
    assert out["kind"] == "multi"
    per_view = len(multi.spec.vocabulary)
    assert per_view >= 1
    assert len(out["rows"]) == len(scene.test_cameras) * per_view
    assert all(r["probe"].startswith("prompt(") for r in out["rows"])


def test_evaluate_iou_is_perfect_against_itself(base, teacher, scene):
    """Decoding the same maps on both sides must agree exactly."""
    pose = scene.test_cameras[0]
    img = render_image(base, pose, scene.background, n_samples=8)
    maps = teacher.encode(img)
    got = teacher.decode_click(maps, 15.5, 15.5, 32, 32).mask
    assert mask_iou(got, got) == 1.0


# ---------------------------------------------------------------------------
# benchmark


def test_benchmark_reports_stages_and_fps(base, trained, teacher, scene):
    out = benchmark_inference(base, trained, teacher, scene, reps=5, n_samples=8)
    for key in ("rgbRenderMs", "featureEncodeMs", "featureRenderMs", "decodeMs",
                "fpsOriginal", "fpsImitated", "speedup"):
        assert key in out, key
        assert np.isfinite(out[key]) and out[key] > 0
    assert out["fpsOriginal"] == pytest.approx(
        1000.0 / (out["rgbRenderMs"] + out["featureEncodeMs"]))
    assert out["fpsImitated"] == pytest.approx(
        1000.0 / (out["rgbRenderMs"] + out["featureRenderMs"]))
    assert out["speedup"] == pytest.approx(out["fpsImitated"] / out["fpsOriginal"])


def test_benchmark_rejects_too_few_reps(base, trained, teacher, scene):
    with pytest.raises(ContractViolation):
        benchmark_inference(base, trained, teacher, scene, reps=3)


def test_benchmark_imitated_path_never_encodes(base, trained, scene):
    fresh_teacher = build_teacher("single")
    before = fresh_teacher.encode_calls
    out = benchmark_inference(base, trained, fresh_teacher, scene, reps=5, n_samples=8)
    # every feature-model call is accounted for by the reference path:
    # one warm pass plus one per repetition
    assert fresh_teacher.encode_calls == before + 1 + out["reps"]
