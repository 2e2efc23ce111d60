"""Binary checkpoint container shared by every pipeline stage.

One file carries the radiance field, the optional semantic field, the teacher
spec, the scene, and a metadata block. Layout (all integers little-endian):

    bytes  b"SANF"
    u32    format version (currently 1)
    u32    tensor count
    per tensor:
        u32       name byte length, then that many bytes of UTF-8 name
        u8        dtype code (0 = float32, 1 = uint8)
        u8        rank
        u64[rank] dims
        payload   C-order values, little-endian

JSON documents (scene, teacher spec, metadata) ride along as uint8 tensors
holding canonical UTF-8 JSON (sorted keys, no whitespace), so a single reader
handles the whole file and identical states serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .grid import FeatureGrid
from .nn import Adam, Mlp
from .radiance import RadianceField
from .scenes import SceneSpec, scene_from_json, scene_to_json
from .semantic import SemanticField
from .teacher import TeacherSpec
from .trainer import TrainConfig

CHECKPOINT_MAGIC = b"SANF"
CHECKPOINT_VERSION = 1

_DTYPE_F32 = 0
_DTYPE_U8 = 1
_DTYPE_CODES = {np.dtype(np.float32): _DTYPE_F32, np.dtype(np.uint8): _DTYPE_U8}
_DTYPE_NP = {_DTYPE_F32: np.dtype("<f4"), _DTYPE_U8: np.dtype("u1")}


# ------------------------------------------------------------ raw container


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write name->array pairs in dict order. float32 and uint8 only."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ContractViolation(f"checkpoint tensor {name!r}: dtype {arr.dtype} unsupported")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPE_NP[code]).tobytes())
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(b"".join(chunks))


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ContractViolation("truncated checkpoint file")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint file not found: {p}")
    cur = _Cursor(p.read_bytes())
    if cur.take(4) != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{p}: not a checkpoint file (bad magic)")
    version, count = cur.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"{p}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = cur.unpack("<I")
        try:
            name = cur.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ContractViolation(f"{p}: undecodable tensor name") from e
        code, rank = cur.unpack("<BB")
        if code not in _DTYPE_NP:
            raise ContractViolation(f"{p}: tensor {name!r} has unknown dtype code {code}")
        dims = cur.unpack(f"<{rank}Q")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        dtype = _DTYPE_NP[code]
        payload = cur.take(n * dtype.itemsize)
        if name in out:
            raise ContractViolation(f"{p}: duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if cur.off != len(cur.buf):
        raise ContractViolation(f"{p}: {len(cur.buf) - cur.off} trailing bytes after last tensor")
    return out


def _json_blob(obj) -> np.ndarray:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def _json_from_blob(arr: np.ndarray, what: str):
    try:
        return json.loads(arr.tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContractViolation(f"checkpoint {what!r} block is not valid JSON: {e}") from e


# ------------------------------------------------------- model (de)molding


def _mlp_tensors(prefix: str, mlp: Mlp, out: dict[str, np.ndarray]) -> None:
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out[f"{prefix}.layer{k}.w"] = w.data
        out[f"{prefix}.layer{k}.b"] = b.data


def _mlp_from_tensors(prefix: str, tensors: dict[str, np.ndarray]) -> Mlp:
    weights, biases = [], []
    k = 0
    while f"{prefix}.layer{k}.w" in tensors:
        w = tensors[f"{prefix}.layer{k}.w"]
        bname = f"{prefix}.layer{k}.b"
        if bname not in tensors:
            raise ContractViolation(f"checkpoint: {prefix} layer {k} has weights but no bias")
        weights.append(ad.tensor(w, requires_grad=True))
        biases.append(ad.tensor(tensors[bname], requires_grad=True))
        k += 1
    if not weights:
        raise ContractViolation(f"checkpoint: no layers found under {prefix!r}")
    return Mlp(input_dim=weights[0].shape[0], output_dim=weights[-1].shape[1],
               weights=weights, biases=biases)


def _grid_from_tensor(name: str, tensors: dict[str, np.ndarray], bounds) -> FeatureGrid:
    arr = tensors[name]
    if arr.ndim != 4:
        raise ContractViolation(f"checkpoint: {name!r} must be rank 4, got rank {arr.ndim}")
    nx, ny, nz, c = arr.shape
    return FeatureGrid(values=ad.tensor(arr.reshape(nx * ny * nz, c), requires_grad=True),
                       res=(nx, ny, nz), bounds=bounds)


@dataclass
class Checkpoint:
    """A fully rebuilt pipeline state: base field + optional extras."""

    base: RadianceField
    scene: SceneSpec
    sem: SemanticField | None
    teacher_spec: TeacherSpec | None
    meta: dict


def save_checkpoint(path: str | Path, base: RadianceField, scene: SceneSpec,
                    sem: SemanticField | None = None,
                    teacher_spec: TeacherSpec | None = None,
                    config: TrainConfig | None = None,
                    extra_meta: dict | None = None) -> None:
    """Serialize the pipeline state. Field order (and therefore the byte
    stream) is fixed, so equal states produce equal files."""
    if sem is not None and sem.base is not base:
        raise ContractViolation("save_checkpoint: sem is attached to a different base field")
    tensors: dict[str, np.ndarray] = {}
    tensors["geo.grid"] = base.geo_grid.values_4d()
    tensors["rgb.grid"] = base.rgb_grid.values_4d()
    _mlp_tensors("geo.head", base.geo_head, tensors)
    _mlp_tensors("rgb.head", base.rgb_head, tensors)
    if sem is not None:
        tensors["sem.grid"] = sem.grid.values_4d()
        for i, head in enumerate(sem.heads):
            _mlp_tensors(f"sem.head{i}", head, tensors)
    if teacher_spec is not None:
        tensors["teacher.spec"] = _json_blob(teacher_spec.to_json())
    tensors["scene"] = _json_blob(scene_to_json(scene))
    meta = {
        "adam": {"beta1": Adam.BETA1, "beta2": Adam.BETA2, "eps": Adam.EPS},
        "hasSemantic": sem is not None,
    }
    if config is not None:
        meta["config"] = config.to_json()
    if extra_meta:
        meta.update(extra_meta)
    tensors["meta"] = _json_blob(meta)
    write_tensors(path, tensors)


def load_checkpoint(path: str | Path) -> Checkpoint:
    tensors = read_tensors(path)
    for required in ("geo.grid", "rgb.grid", "scene", "meta"):
        if required not in tensors:
            raise ContractViolation(f"checkpoint missing required block {required!r}")
    scene = scene_from_json(_json_from_blob(tensors["scene"], "scene"))
    meta = _json_from_blob(tensors["meta"], "meta")
    base = RadianceField(
        geo_grid=_grid_from_tensor("geo.grid", tensors, scene.bounds),
        rgb_grid=_grid_from_tensor("rgb.grid", tensors, scene.bounds),
        geo_head=_mlp_from_tensors("geo.head", tensors),
        rgb_head=_mlp_from_tensors("rgb.head", tensors),
        bounds=scene.bounds,
    )
    sem = None
    if "sem.grid" in tensors:
        heads = []
        i = 0
        while f"sem.head{i}.layer0.w" in tensors:
            heads.append(_mlp_from_tensors(f"sem.head{i}", tensors))
            i += 1
        if not heads:
            raise ContractViolation("checkpoint has sem.grid but no sem heads")
        sem = SemanticField(base=base, grid=_grid_from_tensor("sem.grid", tensors, scene.bounds),
                            heads=heads, feature_channels=heads[0].output_dim,
                            _base_checksums=base.checksums())
    teacher_spec = None
    if "teacher.spec" in tensors:
        teacher_spec = TeacherSpec.from_json(_json_from_blob(tensors["teacher.spec"], "teacher.spec"))
    return Checkpoint(base=base, scene=scene, sem=sem, teacher_spec=teacher_spec, meta=meta)
