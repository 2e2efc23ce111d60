"""Checkpoint container: byte layout, round trips, and model rebuilds."""

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sanf import autodiff as ad
from sanf.checkpoint import (CHECKPOINT_MAGIC, CHECKPOINT_VERSION, load_checkpoint,
                             read_tensors, save_checkpoint, write_tensors)
from sanf.errors import ContractViolation
from sanf.radiance import RadianceField, render_image
from sanf.scenes import make_one_sphere_scene, scene_to_json
from sanf.semantic import SemanticField, render_feature_map
from sanf.teacher import build_teacher
from sanf.trainer import TrainConfig


@pytest.fixture(scope="module")
def scene():
    return make_one_sphere_scene(16, 16)


@pytest.fixture(scope="module")
def base(scene):
    return RadianceField.create(scene.bounds, res=6, channels=4, rng=np.random.default_rng(3))


@pytest.fixture(scope="module")
def sem(base):
    return SemanticField.create(base, n_scales=2, feature_channels=5,
                                grid_res=5, grid_channels=6,
                                rng=np.random.default_rng(4))


@pytest.fixture(scope="module")
def teacher_spec(scene):
    return build_teacher("multi", scene=scene).spec


# ------------------------------------------------------------ raw container


def test_raw_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.normal(size=(3,)).astype(np.float32),
        "b.c": rng.normal(size=(2, 4)).astype(np.float32),
        "deep/tensor": rng.normal(size=(2, 3, 4, 5)).astype(np.float32),
        "blob": np.frombuffer(b"hello world", dtype=np.uint8).copy(),
    }
    path = tmp_path / "t.ckpt"
    write_tensors(path, tensors)
    back = read_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert np.array_equal(back[k], tensors[k])


def test_header_layout(tmp_path):
    path = tmp_path / "t.ckpt"
    write_tensors(path, {"x": np.zeros(2, np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == CHECKPOINT_MAGIC
    version, count = struct.unpack_from("<II", raw, 4)
    assert version == CHECKPOINT_VERSION
    assert count == 1
    (name_len,) = struct.unpack_from("<I", raw, 12)
    assert raw[16 : 16 + name_len] == b"x"


@settings(max_examples=25, deadline=None)
@given(st.dictionaries(
    st.text(alphabet="abcdefgh.0123456789", min_size=1, max_size=12),
    st.tuples(st.lists(st.integers(1, 4), min_size=1, max_size=3),
              st.integers(0, 2 ** 32 - 1)),
    min_size=0, max_size=5,
))
def test_round_trip_and_determinism(tmp_path_factory, spec):
    tensors = {}
    for name, (shape, seed) in spec.items():
        tensors[name] = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    tmp = tmp_path_factory.mktemp("rt")
    write_tensors(tmp / "a.ckpt", tensors)
    write_tensors(tmp / "b.ckpt", tensors)
    assert (tmp / "a.ckpt").read_bytes() == (tmp / "b.ckpt").read_bytes()
    back = read_tensors(tmp / "a.ckpt")
    assert set(back) == set(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + struct.pack("<II", 1, 0))
    with pytest.raises(ContractViolation, match="magic"):
        read_tensors(path)


def test_rejects_bad_version(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<II", 99, 0))
    with pytest.raises(ContractViolation, match="version"):
        read_tensors(path)


def test_rejects_truncation(tmp_path):
    path = tmp_path / "t.ckpt"
    write_tensors(path, {"x": np.arange(8, dtype=np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(ContractViolation, match="truncated"):
        read_tensors(path)


def test_rejects_trailing_garbage(tmp_path):
    path = tmp_path / "t.ckpt"
    write_tensors(path, {"x": np.arange(8, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"\x00\x01")
    with pytest.raises(ContractViolation, match="trailing"):
        read_tensors(path)


def test_rejects_unknown_dtype_code(tmp_path):
    path = tmp_path / "t.ckpt"
    write_tensors(path, {"x": np.arange(4, dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    # dtype code byte sits right after the 4-byte header, 8-byte counts,
    # 4-byte name length, and the 1-byte name "x"
    raw[17] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(ContractViolation, match="dtype"):
        read_tensors(path)


def test_rejects_unsupported_dtype_on_write(tmp_path):
    with pytest.raises(ContractViolation, match="dtype"):
        write_tensors(tmp_path / "t.ckpt", {"x": np.zeros(3, np.float64)})


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        read_tensors("/tmp/definitely-not-here.ckpt")


# ------------------------------------------------------------- full rebuild


def assert_json_close(a, b, path=""):
    """Exact equality except floats, which may drift by ulps (quaternion
    encoding is not bit-idempotent across a parse/serialize cycle)."""
    assert type(a) is type(b), f"{path}: {type(a)} vs {type(b)}"
    if isinstance(a, dict):
        assert a.keys() == b.keys(), path
        for k in a:
            assert_json_close(a[k], b[k], f"{path}.{k}")
    elif isinstance(a, list):
        assert len(a) == len(b), path
        for i, (x, y) in enumerate(zip(a, b)):
            assert_json_close(x, y, f"{path}[{i}]")
    elif isinstance(a, float):
        assert a == pytest.approx(b, rel=1e-12, abs=1e-15), path
    else:
        assert a == b, path


def test_full_round_trip(tmp_path, base, sem, teacher_spec, scene):
    config = TrainConfig(seed=7, sem_steps=12)
    path = tmp_path / "full.ckpt"
    save_checkpoint(path, base, scene, sem=sem, teacher_spec=teacher_spec, config=config)
    ck = load_checkpoint(path)
    assert ck.base.checksums() == base.checksums()
    assert ck.sem is not None
    assert ck.sem.checksums() == sem.checksums()
    assert ck.sem.n_scales == sem.n_scales
    assert ck.sem.feature_channels == sem.feature_channels
    assert_json_close(scene_to_json(ck.scene), scene_to_json(scene))
    assert ck.teacher_spec is not None
    assert ck.teacher_spec.to_json() == teacher_spec.to_json()
    assert ck.meta["adam"] == {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
    assert TrainConfig.from_json(ck.meta["config"]) == config


def test_loaded_base_renders_identically(tmp_path, base, scene):
    path = tmp_path / "b.ckpt"
    save_checkpoint(path, base, scene)
    ck = load_checkpoint(path)
    pose = scene.test_cameras[0]
    img_a = render_image(base, pose, scene.background, n_samples=8)
    img_b = render_image(ck.base, pose, scene.background, n_samples=8)
    assert np.array_equal(img_a, img_b)


def test_loaded_sem_renders_identically_and_stays_pluggable(tmp_path, base, sem, scene):
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, base, scene, sem=sem)
    ck = load_checkpoint(path)
    ck.sem.assert_pluggable()
    pose = scene.test_cameras[0]
    for scale in range(sem.n_scales):
        fm_a = render_feature_map(sem, pose, scale, n_samples=8)
        fm_b = render_feature_map(ck.sem, pose, scale, n_samples=8)
        assert np.array_equal(fm_a.values, fm_b.values)


def test_save_load_save_preserves_every_block(tmp_path, base, sem, teacher_spec, scene):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, base, scene, sem=sem, teacher_spec=teacher_spec)
    ck = load_checkpoint(p1)
    save_checkpoint(p2, ck.base, ck.scene, sem=ck.sem, teacher_spec=ck.teacher_spec)
    t1, t2 = read_tensors(p1), read_tensors(p2)
    assert list(t1) == list(t2)
    for name in t1:
        if name == "scene":
            # pose quaternions may drift by ulps across a parse cycle
            assert_json_close(json.loads(t1[name].tobytes().decode()),
                              json.loads(t2[name].tobytes().decode()))
        else:
            assert np.array_equal(t1[name], t2[name]), name


def test_base_only_checkpoint(tmp_path, base, scene):
    path = tmp_path / "b.ckpt"
    save_checkpoint(path, base, scene)
    ck = load_checkpoint(path)
    assert ck.sem is None
    assert ck.teacher_spec is None
    assert ck.meta["hasSemantic"] is False


def test_missing_required_block(tmp_path):
    path = tmp_path / "t.ckpt"
    write_tensors(path, {"geo.grid": np.zeros((2, 2, 2, 1), np.float32)})
    with pytest.raises(ContractViolation, match="required"):
        load_checkpoint(path)


def test_sem_on_foreign_base_rejected(tmp_path, sem, scene):
    other = RadianceField.create(scene.bounds, res=6, channels=4,
                                 rng=np.random.default_rng(9))
    with pytest.raises(ContractViolation, match="different base"):
        save_checkpoint(tmp_path / "x.ckpt", other, scene, sem=sem)
