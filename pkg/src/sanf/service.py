"""HTTP service for interactive rendering, segmentation, and mesh selection.

One process serves one immutable model snapshot (base field + semantic field
+ teacher decoder). The only mutable session state is the mesh selection and
the tracked-click list, and every endpoint that touches them is serialized
behind a lock; inference endpoints are pure and may run concurrently.

The serving path renders imitated features only — the teacher's encoder is
never invoked, which /session makes auditable via its call counter.

All error responses share one envelope: {"error": code, "detail": text},
plus "diagnosticId" on 5xx (the id is also logged server-side) and extra
machine-readable fields where noted (e.g. "known" on vocabulary errors).
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import threading
import time
import uuid
from collections import OrderedDict

import numpy as np

from .cameras import CameraPose
from .checkpoint import Checkpoint, load_checkpoint
from .errors import ContractViolation, EmptySelectionError, VocabularyError
from .mesh import (MeshRaycaster, SelectionState, TrackedClick, TriMesh, click_to_surface,
                   extract_selected, obj_bytes, project_mask, track_click)
from .radiance import render_image
from .rle import decode_mask, encode_mask
from .semantic import render_feature_map
from .teacher import TeacherModel

log = logging.getLogger(__name__)


class ApiError(Exception):
    """An error with a fixed HTTP status and machine-readable code."""

    def __init__(self, status: int, code: str, detail: str, extra: dict | None = None):
        super().__init__(detail)
        self.status = status
        self.code = code
        self.detail = detail
        self.extra = extra or {}


class ServeSession:
    """Everything one served snapshot owns."""

    def __init__(self, ck: Checkpoint, mesh: TriMesh | None = None, n_samples: int = 64):
        if ck.sem is None:
            raise ContractViolation("serving needs a checkpoint with a trained semantic field")
        if ck.teacher_spec is None:
            raise ContractViolation("serving needs a checkpoint with a teacher spec")
        self.base = ck.base
        self.sem = ck.sem
        self.scene = ck.scene
        self.teacher = TeacherModel(ck.teacher_spec)
        self.n_samples = n_samples
        self.lock = threading.Lock()
        self.clicks: list[tuple[int, TrackedClick]] = []
        self._next_click_id = 1
        # feature maps per exact pose, warmed by /render: presenting a frame
        # prepares its features, so segmenting a displayed view decodes from
        # maps that already exist instead of re-rendering them per click
        self._map_cache: "OrderedDict[str, list]" = OrderedDict()
        self._map_cache_slots = 8
        self.mesh = mesh
        self.caster = None
        self.selection = None
        if mesh is not None:
            self.caster = MeshRaycaster(mesh)
            self.selection = SelectionState.for_mesh(mesh)
            self.sem.attach_mesh(self.caster)
        h = hashlib.sha256()
        for name, digest in sorted({**self.base.checksums(), **self.sem.checksums()}.items()):
            h.update(f"{name}={digest};".encode())
        h.update(json.dumps(ck.teacher_spec.to_json(), sort_keys=True).encode())
        self.snapshot_id = h.hexdigest()[:16]

    # --------------------------------------------------------------- helpers

    def require_mesh(self):
        if self.caster is None:
            raise ApiError(409, "meshNotAttached",
                           "this session has no mesh; serve with one to project or track")

    def parse_pose(self, obj) -> CameraPose:
        if not isinstance(obj, dict):
            raise ApiError(422, "malformedBody", "pose must be an object")
        try:
            return CameraPose.from_wire(obj)
        except ValueError as e:  # ContractViolation included
            raise ApiError(422, "invalidPose", str(e)) from e

    def student_maps(self, pose: CameraPose):
        key = json.dumps(pose.to_wire(), sort_keys=True)
        maps = self._map_cache.get(key)
        if maps is None:
            maps = [render_feature_map(self.sem, pose, s, n_samples=self.n_samples)
                    for s in range(self.sem.n_scales)]
            self._map_cache[key] = maps
            if len(self._map_cache) > self._map_cache_slots:
                self._map_cache.popitem(last=False)
        else:
            self._map_cache.move_to_end(key)
        return maps


def _field(body: dict, name: str, kind=None):
    if not isinstance(body, dict) or name not in body:
        raise ApiError(422, "malformedBody", f"missing field {name!r}")
    value = body[name]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ApiError(422, "malformedBody", f"field {name!r} must be a number")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ApiError(422, "malformedBody", f"field {name!r} must be an integer")
        return value
    if kind is str and not isinstance(value, str):
        raise ApiError(422, "malformedBody", f"field {name!r} must be a string")
    return value


def _png_bytes(img: np.ndarray) -> bytes:
    from PIL import Image

    u8 = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _logits_stats(logits: np.ndarray) -> dict:
    return {
        "min": float(logits.min()),
        "max": float(logits.max()),
        "mean": float(logits.mean()),
        "positiveFraction": float((logits > 0).mean()),
    }


def create_app(source: Checkpoint | str, mesh: TriMesh | None = None, n_samples: int = 64):
    """Build the FastAPI app serving one checkpoint (path or loaded object)."""
    from fastapi import Body, FastAPI, Query, Request, Response
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse

    ck = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    session = ServeSession(ck, mesh=mesh, n_samples=n_samples)
    app = FastAPI(title="segmentable radiance field service", docs_url=None, redoc_url=None)
    app.state.session = session

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"error": exc.code, "detail": exc.detail, **exc.extra})

    @app.exception_handler(VocabularyError)
    async def _vocab_error(request: Request, exc: VocabularyError):
        known = [e.name for e in session.teacher.spec.vocabulary]
        return JSONResponse(status_code=404,
                            content={"error": "unknownPrompt", "detail": str(exc), "known": known})

    @app.exception_handler(ContractViolation)
    async def _contract_error(request: Request, exc: ContractViolation):
        return JSONResponse(status_code=400,
                            content={"error": "contractViolation", "detail": str(exc)})

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=422,
                            content={"error": "malformedBody", "detail": str(exc)})

    @app.exception_handler(Exception)
    async def _internal_error(request: Request, exc: Exception):
        diag = uuid.uuid4().hex[:12]
        log.exception("internal error %s on %s", diag, request.url.path)
        return JSONResponse(status_code=500,
                            content={"error": "internal", "diagnosticId": diag,
                                     "detail": "unexpected server error; see server log"})

    # ------------------------------------------------------------ read-only

    @app.get("/session")
    async def get_session():
        ref = session.scene.test_cameras[0] if session.scene.test_cameras else session.scene.train_cameras[0]
        return {
            "snapshotId": session.snapshot_id,
            "teacherKind": session.teacher.spec.kind,
            "promptVocabulary": [e.name for e in session.teacher.spec.vocabulary],
            "meshAttached": session.caster is not None,
            "teacherEncodeCalls": session.teacher.encode_calls,
            "imageWidth": ref.width,
            "imageHeight": ref.height,
            "sceneBounds": {"lo": [float(v) for v in session.scene.bounds.lo],
                            "hi": [float(v) for v in session.scene.bounds.hi]},
        }

    @app.post("/render")
    async def post_render(body: dict = Body(...)):
        pose = session.parse_pose(_field(body, "pose"))
        width = _field(body, "width", int)
        height = _field(body, "height", int)
        if not (1 <= width <= 1024 and 1 <= height <= 1024):
            raise ApiError(422, "invalidSize", f"width/height must be in 1..1024, got {width}x{height}")
        sized = pose.with_size(width, height)
        img = render_image(session.base, sized, session.scene.background,
                           n_samples=session.n_samples)
        session.student_maps(sized)  # prepare features for follow-up segmentation
        return Response(content=_png_bytes(img), media_type="image/png")

    def _segment(pose: CameraPose, decode) -> dict:
        t0 = time.perf_counter()
        maps = session.student_maps(pose)
        t1 = time.perf_counter()
        result = decode(maps)
        t2 = time.perf_counter()
        return {
            "maskRle": encode_mask(result.mask),
            "logitsStats": _logits_stats(result.logits),
            "featureRenderMs": (t1 - t0) * 1000.0,
            "decodeMs": (t2 - t1) * 1000.0,
        }

    @app.post("/segment/click")
    async def post_segment_click(body: dict = Body(...)):
        pose = session.parse_pose(_field(body, "pose"))
        u = _field(body, "u", float)
        v = _field(body, "v", float)
        if session.teacher.spec.kind != "single":
            raise ApiError(409, "promptKindMismatch",
                           "this session's teacher decodes vocabulary prompts; use /segment/prompt")
        if not (0 <= u <= pose.width - 1 and 0 <= v <= pose.height - 1):
            raise ApiError(422, "clickOutOfBounds",
                           f"click ({u}, {v}) outside {pose.width}x{pose.height}")
        return _segment(pose, lambda maps: session.teacher.decode_click(
            maps, u, v, pose.height, pose.width))

    @app.post("/segment/prompt")
    async def post_segment_prompt(body: dict = Body(...)):
        pose = session.parse_pose(_field(body, "pose"))
        prompt = _field(body, "prompt", str)
        if session.teacher.spec.kind != "multi":
            raise ApiError(409, "promptKindMismatch",
                           "this session's teacher decodes clicks; use /segment/click")
        return _segment(pose, lambda maps: session.teacher.decode_prompt(
            maps, prompt, pose.height, pose.width))

    # ------------------------------------------------------------- mutating

    @app.post("/project")
    async def post_project(body: dict = Body(...)):
        session.require_mesh()
        pose = session.parse_pose(_field(body, "pose"))
        try:
            mask = decode_mask(_field(body, "maskRle"))
        except ContractViolation as e:
            raise ApiError(422, "invalidMask", str(e)) from e
        if mask.shape != (pose.height, pose.width):
            raise ApiError(422, "invalidMask",
                           f"mask is {mask.shape[1]}x{mask.shape[0]}, pose renders "
                           f"{pose.width}x{pose.height}")
        with session.lock:
            project_mask(session.caster, session.selection, pose, mask)
            return {"selectedTriangleCount": int(session.selection.n_selected)}

    @app.post("/clicks")
    async def post_clicks(body: dict = Body(...)):
        session.require_mesh()
        pose = session.parse_pose(_field(body, "pose"))
        u = _field(body, "u", float)
        v = _field(body, "v", float)
        if not (0 <= u <= pose.width - 1 and 0 <= v <= pose.height - 1):
            raise ApiError(422, "clickOutOfBounds",
                           f"click ({u}, {v}) outside {pose.width}x{pose.height}")
        click = click_to_surface(session.caster, pose, u, v)
        if click is None:
            raise ApiError(422, "noSurfaceHit", "the clicked ray does not hit the mesh")
        with session.lock:
            click_id = session._next_click_id
            session._next_click_id += 1
            session.clicks.append((click_id, click))
        return {"clickId": click_id, "worldPoint": [float(x) for x in click.world_point]}

    @app.get("/clicks")
    async def get_clicks(pose: str = Query(...)):
        session.require_mesh()
        try:
            wire = json.loads(pose)
        except json.JSONDecodeError as e:
            raise ApiError(422, "malformedBody", f"pose query param is not JSON: {e}") from e
        cam = session.parse_pose(wire)
        with session.lock:
            snapshot = list(session.clicks)
        out = []
        for click_id, click in snapshot:
            tr = track_click(session.caster, click, cam)
            out.append({"clickId": click_id, "u": tr.u, "v": tr.v, "status": tr.status,
                        "worldPoint": [float(x) for x in click.world_point]})
        return {"clicks": out}

    @app.post("/selection/reset")
    async def post_selection_reset():
        session.require_mesh()
        with session.lock:
            session.selection.reset()
            session.clicks.clear()
        return {"selectedTriangleCount": 0, "clickCount": 0}

    @app.get("/mesh/selected")
    async def get_mesh_selected():
        session.require_mesh()
        with session.lock:
            try:
                sub = extract_selected(session.mesh, session.selection)
            except EmptySelectionError as e:
                raise ApiError(409, "emptySelection", str(e)) from e
        return Response(content=obj_bytes(sub), media_type="model/obj")

    return app
