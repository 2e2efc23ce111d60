"""The frozen perception teacher and its mask decoders.

A deterministic, seeded conv stack stands in for a large pretrained image
encoder: patch-average pooling to 1/4 resolution, a few 3x3 conv+relu blocks
with edge padding, then a fixed offset that subtracts the stack's response to
a flat white swatch. The offset keeps everything local while pushing white
regions to the zero vector, so cosine similarities behave: distinct albedos
land on well-separated directions and uniform regions stay uniform, which is
all the distillation pipeline needs from a teacher. Two variants exist:

* kind="single": one feature map at 1/4 resolution (point-click decoding);
* kind="multi": four maps at 1/4..1/32, coarser scales made by 2x average
  pooling plus a seeded pointwise linear map (vocabulary-prompt decoding).

``cost_multiplier`` repeats the backbone to emulate a heavier encoder: it
changes wall time, never output values. Decoding happens at feature
resolution; masks are bilinearly upsampled logits compared against zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, VocabularyError
from .geometry import bilinear_sample, upsample_map

DOWNSAMPLE = 4  # finest feature stride relative to the image
MULTI_SCALES = 4
TAU = 10.0
BETA = 0.8
NOISE_DEADBAND = 0.02
"""Feature cells with norm under this snap to the exact zero vector.

The white-reference offset maps *exact* white to zero, but encoder inputs
are usually imperfect renders whose background is white plus ~1e-3 noise.
Without the deadband that noise survives as tiny vectors, and cosine
decoding — which normalizes away magnitude — turns them into confident
junk directions. Content cells sit two orders of magnitude above the band."""
# Frozen once against the analytic renderer's object masks on the standard
# scenes (see scripts/calibrate_teacher.py): the joint best of clicks
# (IoU 0.79, cross-object overlap 0.02) and prompts (IoU 0.80).
CALIBRATED_SEED = 16
CALIBRATED_DEPTH = 1


@dataclass
class FeatureMap:
    values: np.ndarray  # [h, w, C] f32
    scale: int  # image pixels per feature cell

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class PromptEntry:
    name: str
    embedding: np.ndarray  # [C] f32


@dataclass
class TeacherSpec:
    """Everything needed to rebuild the teacher bit-for-bit."""

    kind: str  # "single" | "multi"
    seed: int = CALIBRATED_SEED
    channels: int = 16
    depth: int = CALIBRATED_DEPTH
    cost_multiplier: int = 1
    vocabulary: list[PromptEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("single", "multi"):
            raise ContractViolation(f"teacher kind {self.kind!r}")
        if self.depth < 1 or self.channels < 1:
            raise ContractViolation("teacher depth/channels must be positive")
        if self.cost_multiplier < 1:
            raise ContractViolation("cost_multiplier must be >= 1")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "channels": self.channels,
            "depth": self.depth,
            "costMultiplier": self.cost_multiplier,
            "vocabulary": [
                {"name": e.name, "embedding": [float(v) for v in e.embedding]} for e in self.vocabulary
            ],
        }

    @staticmethod
    def from_json(d: dict) -> "TeacherSpec":
        try:
            return TeacherSpec(
                kind=d["kind"],
                seed=int(d["seed"]),
                channels=int(d["channels"]),
                depth=int(d["depth"]),
                cost_multiplier=int(d["costMultiplier"]),
                vocabulary=[
                    PromptEntry(e["name"], np.asarray(e["embedding"], dtype=np.float32))
                    for e in d.get("vocabulary", [])
                ],
            )
        except (KeyError, TypeError) as e:
            raise ContractViolation(f"teacher spec json: {e}") from e


@dataclass
class MaskResult:
    logits: np.ndarray  # [h, w] f32, at feature resolution
    mask: np.ndarray  # [H, W] bool: upsample(logits) > 0, exactly
    prompt_echo: object  # the click (u, v) or the prompt string


def _conv3x3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Edge-padded 3x3 convolution; kernel [3,3,cin,cout]."""
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(p, (3, 3), axis=(0, 1))  # [h,w,cin,3,3]
    return np.einsum("hwcij,ijco->hwo", win, kernel, optimize=True).astype(np.float32)


class TeacherModel:
    """Runs the frozen encoder and both mask decoders. Weights derive only
    from the spec's seed, so equal specs give bitwise-equal teachers."""

    def __init__(self, spec: TeacherSpec):
        self.spec = spec
        self.encode_calls = 0
        rng = np.random.default_rng(spec.seed)
        c = spec.channels
        self.kernels = []
        cin = 3
        for _ in range(spec.depth):
            std = np.sqrt(2.0 / (9 * cin))
            self.kernels.append(rng.normal(0.0, std, size=(3, 3, cin, c)).astype(np.float32))
            cin = c
        # pointwise maps for the coarser scales (multi only; harmless otherwise)
        self.pointwise = [
            rng.normal(0.0, np.sqrt(1.0 / c), size=(c, c)).astype(np.float32)
            for _ in range(MULTI_SCALES - 1)
        ]
        # prompt decoding mixes a little global context into the query
        self.query_mix = 0.1 * rng.normal(0.0, 1.0, size=(c, c)).astype(np.float32)
        # fixed offset: the stack's response to a flat white swatch; white
        # regions map to the zero vector, so cosine decoding never binds them
        # to an object query. Purely per-cell, so locality is untouched.
        self.reference = self._stack(np.ones((8, 8, 3), np.float32))[4, 4].copy()

    # ------------------------------------------------------------------ encode

    @property
    def n_scales(self) -> int:
        return MULTI_SCALES if self.spec.kind == "multi" else 1

    def _stack(self, x: np.ndarray) -> np.ndarray:
        for k in self.kernels:
            x = np.maximum(_conv3x3(x, k), 0.0)
        return x

    @staticmethod
    def _denoise(m: np.ndarray) -> np.ndarray:
        m[np.linalg.norm(m, axis=2) < NOISE_DEADBAND] = 0.0
        return m

    def _backbone(self, image: np.ndarray) -> list[np.ndarray]:
        h, w = image.shape[:2]
        x = image.reshape(h // DOWNSAMPLE, DOWNSAMPLE, w // DOWNSAMPLE, DOWNSAMPLE, 3).mean(axis=(1, 3))
        x = self._stack(x.astype(np.float32)) - self.reference
        maps = [self._denoise(x)]
        for pw in self.pointwise[: self.n_scales - 1]:
            prev = maps[-1]
            hp, wp = prev.shape[:2]
            pooled = prev.reshape(hp // 2, 2, wp // 2, 2, prev.shape[2]).mean(axis=(1, 3))
            maps.append(self._denoise((pooled @ pw).astype(np.float32)))
        return maps

    def encode(self, image: np.ndarray) -> list[FeatureMap]:
        """Feature maps for an [H,W,3] image in [0,1]. One logical call,
        regardless of cost_multiplier (see encode_costed)."""
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ContractViolation(f"encode: expected [H,W,3], got {image.shape}")
        if image.dtype.kind != "f" or image.min() < -1e-6 or image.max() > 1 + 1e-6:
            raise ContractViolation("encode: image must be float in [0,1]")
        h, w = image.shape[:2]
        need = DOWNSAMPLE * 2 ** (self.n_scales - 1)
        if h % need or w % need:
            raise ContractViolation(f"encode: image size {h}x{w} not divisible by {need}")
        self.encode_calls += 1
        maps = self._backbone(image.astype(np.float32))
        return [FeatureMap(m, DOWNSAMPLE * 2**i) for i, m in enumerate(maps)]

    def encode_costed(self, image: np.ndarray) -> list[FeatureMap]:
        """Same result as encode(); runs the backbone cost_multiplier times so
        wall-clock cost scales, outputs bitwise identical to multiplier 1."""
        out = self.encode(image)
        for _ in range(self.spec.cost_multiplier - 1):
            self._backbone(np.asarray(image, dtype=np.float32))
        return out

    def measure_encode_cost(self, image: np.ndarray, reps: int = 5) -> float:
        """Median wall-clock milliseconds of a costed encode (reps >= 5)."""
        reps = max(reps, 5)
        self.encode_costed(image)  # warm caches outside the timed region
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            self.encode_costed(image)
            times.append((time.perf_counter() - t0) * 1e3)
        return float(np.median(times))

    # ------------------------------------------------------------------ decode

    def decode_click(self, feats: list[FeatureMap], u: float, v: float,
                     out_h: int, out_w: int) -> MaskResult:
        """Point-click mask: logits = TAU * (cos(F, q) - BETA) with q the
        bilinear feature at the click. If the upsampled logit at the click is
        not positive (clicking featureless ground), the four feature cells
        around the click are raised to a small epsilon so the clicked pixel is
        always inside its own mask."""
        if self.spec.kind != "single":
            raise ContractViolation("decode_click needs the single-scale teacher")
        fm = feats[0]
        if not (0 <= u <= out_w - 1 and 0 <= v <= out_h - 1):
            raise ContractViolation(f"click ({u}, {v}) outside {out_w}x{out_h}")
        fu = (u - (fm.scale - 1) / 2) / fm.scale
        fv = (v - (fm.scale - 1) / 2) / fm.scale
        q = bilinear_sample(fm.values, np.array([fu]), np.array([fv]))[0]
        logits = self._cos_logits(fm.values, q)
        logits = self._ensure_containment(logits, fu, fv)
        return MaskResult(logits=logits, mask=upsample_map(logits, out_h, out_w, fm.scale) > 0,
                          prompt_echo=(u, v))

    def decode_prompt(self, feats: list[FeatureMap], prompt: str,
                      out_h: int, out_w: int) -> MaskResult:
        """Vocabulary-prompt mask (multi-scale teacher): the stored embedding
        plus a seeded mix of the coarsest map's global mean forms the query;
        logits over the finest map use the same cosine rule as clicks."""
        if self.spec.kind != "multi":
            raise ContractViolation("decode_prompt needs the multi-scale teacher")
        entry = next((e for e in self.spec.vocabulary if e.name == prompt), None)
        if entry is None:
            known = [e.name for e in self.spec.vocabulary]
            raise VocabularyError(f"unknown prompt {prompt!r}; vocabulary: {known}")
        fine = feats[0]
        g = feats[-1].values.reshape(-1, feats[-1].channels).mean(axis=0)
        query = entry.embedding + self.query_mix @ g
        logits = self._cos_logits(fine.values, query)
        return MaskResult(logits=logits, mask=upsample_map(logits, out_h, out_w, fine.scale) > 0,
                          prompt_echo=prompt)

    @staticmethod
    def _cos_logits(values: np.ndarray, q: np.ndarray) -> np.ndarray:
        qn = q / max(np.linalg.norm(q), 1e-12)
        norms = np.maximum(np.linalg.norm(values, axis=2), 1e-12)
        cos = (values @ qn) / norms
        return (TAU * (cos - BETA)).astype(np.float32)

    @staticmethod
    def _ensure_containment(logits: np.ndarray, fu: float, fv: float) -> np.ndarray:
        at = float(bilinear_sample(logits[:, :, None], np.array([fu]), np.array([fv]))[0, 0])
        if at > 0:
            return logits
        h, w = logits.shape
        i0 = min(max(int(np.floor(fv)), 0), h - 2) if h > 1 else 0
        j0 = min(max(int(np.floor(fu)), 0), w - 2) if w > 1 else 0
        out = logits.copy()
        sl = out[i0:i0 + 2, j0:j0 + 2]
        np.maximum(sl, np.float32(1e-4), out=sl)
        return out


def build_teacher(kind: str, scene=None, seed: int = CALIBRATED_SEED,
                  cost_multiplier: int = 1, channels: int | None = None,
                  depth: int = CALIBRATED_DEPTH) -> TeacherModel:
    """Construct a teacher; the multi-scale variant derives its prompt
    vocabulary from the scene's objects by encoding flat albedo swatches
    (white-offset applied, like any encoded image)."""
    if channels is None:
        channels = 16 if kind == "single" else 8
    spec = TeacherSpec(kind=kind, seed=seed, channels=channels, depth=depth,
                       cost_multiplier=cost_multiplier)
    model = TeacherModel(spec)
    if kind == "multi":
        if scene is None:
            raise ContractViolation("multi-scale teacher needs a scene for its vocabulary")
        for obj in scene.objects:
            swatch = np.broadcast_to(obj.albedo, (8, 8, 3)).astype(np.float32)
            emb = (model._stack(swatch) - model.reference)[4, 4].copy()
            spec.vocabulary.append(PromptEntry(obj.name, emb))
    return model
