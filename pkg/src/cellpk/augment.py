"""Lossless rotation augmentation.

Two rotations of the same patch are combined:

* the *cropped fit* keeps the original canvas, so content rotated past the
  border is lost but the retained content stays at full resolution;
* the *resized fit* rotates into the enclosing bounding box and shrinks that
  back to the original size, so nothing is lost but resolution drops.

Pixels the cropped fit could not fill (its validity mask is False) are taken
from the resized fit. The result has the source dimensions, no padding, and
full-resolution content wherever the cropped fit was valid.

Angles are integer degrees, counterclockwise as displayed, stored modulo 360.
Multiples of 90 on square patches are exact index permutations.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .imgio import bilinear_sample_many, check_patch, quantize, resize, to_float

__all__ = [
    "AugmentedPatch",
    "DEFAULT_ANGLES",
    "BASELINE_ANGLES",
    "SESSION_SIZE",
    "PoolExhaustedError",
    "normalize_angle",
    "rotate_cropped_fit",
    "rotate_resized_fit",
    "rotate_lossless",
    "rotation_set",
    "sample_session_angles",
    "read_ledger",
    "write_ledger",
    "augmented_name",
]

DEFAULT_ANGLES: tuple[int, ...] = tuple(range(1, 361))
BASELINE_ANGLES: tuple[int, ...] = (0, 90, 180, 270)
SESSION_SIZE = 30

# tolerance for "inside the source rectangle" against float noise in the rotation
_EDGE_TOL = 1e-9


class PoolExhaustedError(RuntimeError):
    pass


def normalize_angle(theta: int) -> int:
    if isinstance(theta, (bool, np.bool_)) or int(theta) != theta:
        raise ValueError(f"rotation angles are integer degrees, got {theta!r}")
    return int(theta) % 360


@dataclass
class AugmentedPatch:
    image: np.ndarray
    angle: int
    valid_crop_mask: np.ndarray
    source_id: str = ""

    @property
    def provenance(self) -> str:
        return f"{self.source_id}@{self.angle}"


def _is_permutation(theta: int, h: int, w: int) -> bool:
    return theta % 90 == 0 and (theta % 180 == 0 or h == w)


def _cos_sin(theta: int) -> tuple[float, float]:
    # exact values on the axes keep the canvas arithmetic clean
    exact = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}
    if theta in exact:
        return exact[theta]
    rad = math.radians(theta)
    return math.cos(rad), math.sin(rad)


def _source_coords(out_w, out_h, src_w, src_h, theta):
    """Inverse-map every output pixel centre to source coordinates."""
    c, s = _cos_sin(theta)
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    dx = xs - (out_w - 1) / 2.0
    dy = ys - (out_h - 1) / 2.0
    qx = c * dx - s * dy + (src_w - 1) / 2.0
    qy = s * dx + c * dy + (src_h - 1) / 2.0
    return qx, qy


def _inside(q: np.ndarray, extent: int) -> np.ndarray:
    return (q >= -_EDGE_TOL) & (q <= extent - 1 + _EDGE_TOL)


def _reflect(q: np.ndarray, extent: int) -> np.ndarray:
    """Mirror coordinates into [0, extent - 1] (reflection without edge repeat)."""
    span = extent - 1
    if span == 0:
        return np.zeros_like(q)
    t = np.mod(q, 2 * span)
    return np.where(t > span, 2 * span - t, t)


def rotate_cropped_fit(img: np.ndarray, theta: int) -> tuple[np.ndarray, np.ndarray]:
    """Rotate on the original canvas. Returns ``(image, valid_mask)``; invalid pixels are 0."""
    img = np.asarray(img, dtype=np.float64)
    theta = normalize_angle(theta)
    h, w = img.shape[:2]
    if _is_permutation(theta, h, w):
        return np.rot90(img, k=theta // 90).copy(), np.ones((h, w), dtype=bool)
    qx, qy = _source_coords(w, h, w, h, theta)
    mask = _inside(qx, w) & _inside(qy, h)
    out = np.zeros_like(img)
    out[mask] = bilinear_sample_many(
        img, np.clip(qx[mask], 0, w - 1), np.clip(qy[mask], 0, h - 1)
    )
    return out, mask


def expanded_canvas(w: int, h: int, theta: int) -> tuple[int, int]:
    """Bounding-box size that holds the whole rotated ``w`` x ``h`` rectangle."""
    c, s = _cos_sin(normalize_angle(theta))
    c, s = abs(c), abs(s)
    # round before ceil so 63.99999999 style noise does not grow the canvas
    new_w = math.ceil(round(w * c + h * s, 9))
    new_h = math.ceil(round(w * s + h * c, 9))
    return max(new_w, 1), max(new_h, 1)


def rotate_resized_fit(img: np.ndarray, theta: int) -> np.ndarray:
    """Rotate into the enclosing canvas, reflection-fill its empty corners, shrink back."""
    img = np.asarray(img, dtype=np.float64)
    theta = normalize_angle(theta)
    h, w = img.shape[:2]
    if _is_permutation(theta, h, w):
        return np.rot90(img, k=theta // 90).copy()
    cw, ch = expanded_canvas(w, h, theta)
    qx, qy = _source_coords(cw, ch, w, h, theta)
    canvas = bilinear_sample_many(img, _reflect(qx, w), _reflect(qy, h))
    return resize(canvas, w, h, method="auto")


def rotate_lossless(patch: np.ndarray, theta: int, source_id: str = "") -> AugmentedPatch:
    """Composite of the cropped fit (where valid) and the resized fit (elsewhere)."""
    patch = check_patch(patch)
    theta = normalize_angle(theta)
    h, w = patch.shape[:2]
    if _is_permutation(theta, h, w):
        image = np.ascontiguousarray(np.rot90(patch, k=theta // 90))
        return AugmentedPatch(image, theta, np.ones((h, w), dtype=bool), source_id)
    src = to_float(patch)
    cropped, mask = rotate_cropped_fit(src, theta)
    resized = rotate_resized_fit(src, theta)
    composite = np.where(mask[:, :, None], cropped, resized)
    return AugmentedPatch(quantize(composite), theta, mask, source_id)


def rotation_set(
    patch: np.ndarray, angles: Sequence[int] = DEFAULT_ANGLES, source_id: str = ""
) -> list[AugmentedPatch]:
    angles = [normalize_angle(a) for a in angles]
    if not angles:
        raise ValueError("angle list is empty")
    if len(set(angles)) != len(angles):
        dupes = sorted({a for a in angles if angles.count(a) > 1})
        raise ValueError(f"duplicate rotation angles (mod 360): {dupes}")
    return [rotate_lossless(patch, a, source_id) for a in angles]


def session_pool(ledger: Iterable[int]) -> list[int]:
    used = {normalize_angle(a) for a in ledger}
    return [a for a in range(1, 360) if a not in BASELINE_ANGLES and a not in used]


def sample_session_angles(
    seed: int, session_index: int, ledger: Iterable[int], size: int = SESSION_SIZE
) -> list[int]:
    """Draw ``size`` unused angles for one training session, sorted ascending.

    The draw depends only on ``(seed, session_index, ledger)``. Baseline angles
    (0, 90, 180, 270) are never returned. The caller records the result in the
    ledger.
    """
    if session_index < 1:
        raise ValueError("session_index starts at 1")
    pool = session_pool(ledger)
    if len(pool) < size:
        raise PoolExhaustedError(
            f"session {session_index} needs {size} unused angles, only {len(pool)} remain"
        )
    rng = np.random.default_rng([seed, session_index])
    picked = rng.choice(np.asarray(pool), size=size, replace=False)
    return sorted(int(a) for a in picked)


def read_ledger(path: str | os.PathLike) -> list[int]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(normalize_angle(int(line)))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: ledger lines must be integers, got {line!r}")
    return out


def write_ledger(angles: Iterable[int], path: str | os.PathLike) -> None:
    Path(path).write_text("".join(f"{int(a)}\n" for a in angles))


def augmented_name(stem: str, theta: int) -> str:
    return f"{stem}_rot{normalize_angle(theta):03d}.ppm"
