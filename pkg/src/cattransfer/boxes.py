"""Box geometry on the unit canvas: IoU and delta encoding.

Boxes are ``(x1, y1, x2, y2)`` with ``x1 < x2`` and ``y1 < y2``.  Deltas use
the usual R-CNN parameterisation ``(dx, dy, log dw, log dh)`` relative to
the proposal centre and size.
"""

from __future__ import annotations

import numpy as np


class BoxError(ValueError):
    pass


def _as_boxes(b) -> np.ndarray:
    arr = np.asarray(b, dtype=np.float64)
    return arr.reshape(1, 4) if arr.ndim == 1 else arr


def validate_boxes(b, what: str = "box") -> np.ndarray:
    arr = _as_boxes(b)
    if arr.shape[-1] != 4:
        raise BoxError(f"{what} must have 4 coordinates, got shape {arr.shape}")
    bad = ~((arr[:, 0] < arr[:, 2]) & (arr[:, 1] < arr[:, 3]))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise BoxError(f"degenerate {what} at index {i}: {arr[i].tolist()}")
    return arr


def iou(a, b) -> float:
    """Intersection over union of two boxes."""
    a = validate_boxes(a)[0]
    b = validate_boxes(b)[0]
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``.  Inputs are not validated."""
    a = _as_boxes(a)
    b = _as_boxes(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def encode(proposals, targets) -> np.ndarray:
    p = validate_boxes(proposals, "proposal")
    g = validate_boxes(targets, "target")
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    px, py = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    gx, gy = g[:, 0] + 0.5 * gw, g[:, 1] + 0.5 * gh
    return np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=1)


def decode(proposals, deltas, clip: bool = True) -> np.ndarray:
    """Apply ``deltas`` to ``proposals``; the inverse of :func:`encode`.

    With ``clip`` the result is clamped to the unit canvas.
    """
    p = validate_boxes(proposals, "proposal")
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if d.shape[0] != p.shape[0]:
        raise BoxError(f"{p.shape[0]} proposals but {d.shape[0]} delta rows")
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    px, py = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
    cx, cy = px + d[:, 0] * pw, py + d[:, 1] * ph
    # exp overflow guard, as in the usual R-CNN decoders
    w = pw * np.exp(np.minimum(d[:, 2], 4.0))
    h = ph * np.exp(np.minimum(d[:, 3], 4.0))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out
