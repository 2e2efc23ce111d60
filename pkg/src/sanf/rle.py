"""Row-major run-length encoding for boolean masks on the wire.

A mask travels as {"width", "height", "startsWith": 0|1, "runs": [...]}:
flatten row-major, then runs[0] pixels of value startsWith, runs[1] of the
opposite value, alternating. Runs are positive and sum to width*height; a
zero-area mask encodes as runs=[]. The encoding of a given mask is unique,
so equal masks produce equal wire payloads.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation


def encode_mask(mask: np.ndarray) -> dict:
    mask = np.asarray(mask)
    if mask.dtype != np.bool_ or mask.ndim != 2:
        raise ContractViolation(f"encode_mask wants a 2-D bool array, got {mask.dtype} rank {mask.ndim}")
    h, w = mask.shape
    flat = mask.ravel()
    if flat.size == 0:
        return {"width": w, "height": h, "startsWith": 0, "runs": []}
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(edges)
    return {"width": w, "height": h, "startsWith": int(flat[0]),
            "runs": [int(r) for r in runs]}


def decode_mask(payload: dict) -> np.ndarray:
    try:
        w = int(payload["width"])
        h = int(payload["height"])
        starts = payload["startsWith"]
        runs = list(payload["runs"])
    except (KeyError, TypeError) as e:
        raise ContractViolation(f"mask payload missing/invalid field: {e}") from e
    if w < 0 or h < 0:
        raise ContractViolation(f"mask dimensions {w}x{h} negative")
    if starts not in (0, 1):
        raise ContractViolation(f"startsWith must be 0 or 1, got {starts!r}")
    total = 0
    for r in runs:
        if not isinstance(r, int) or isinstance(r, bool) or r <= 0:
            raise ContractViolation(f"runs must be positive integers, got {r!r}")
        total += r
    if total != w * h:
        raise ContractViolation(f"runs sum to {total}, expected {w}x{h}={w * h}")
    if not runs:
        return np.zeros((h, w), dtype=bool)
    values = (np.arange(len(runs)) + starts) % 2 == 1
    return np.repeat(values, runs).reshape(h, w)
