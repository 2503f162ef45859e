"""Overlapped tiling of large frames into fixed-size patches and the inverse merge.

The same index math backs training-time patch extraction, feature-map
sharing geometry, and inference stitching, so everything here is pure and
deterministic: a grid built twice from the same inputs is identical, and
merging the crops of an array reconstructs that array bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

Rect = tuple[int, int, int, int]  # (top, left, height, width) in pixels


@dataclass(frozen=True)
class RelativeRect:
    """A rectangle as fractions of its source frame, for cross-resolution mapping."""

    top: float
    left: float
    height: float
    width: float

    def __post_init__(self):
        if self.top < 0 or self.left < 0:
            raise ValueError("relative rect origin must be non-negative")
        if self.top + self.height > 1.0 + 1e-9 or self.left + self.width > 1.0 + 1e-9:
            raise ValueError("relative rect exceeds unit frame")


@dataclass(frozen=True)
class TileGrid:
    """Row-major overlapped decomposition of an image_h x image_w frame."""

    image_h: int
    image_w: int
    patch_h: int
    patch_w: int
    overlap: int
    rects: tuple[Rect, ...]

    def __len__(self):
        return len(self.rects)

    def to_dict(self) -> dict:
        return {
            "image_h": self.image_h,
            "image_w": self.image_w,
            "patch_h": self.patch_h,
            "patch_w": self.patch_w,
            "overlap": self.overlap,
            "rects": [list(r) for r in self.rects],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "TileGrid":
        return TileGrid(
            image_h=int(d["image_h"]),
            image_w=int(d["image_w"]),
            patch_h=int(d["patch_h"]),
            patch_w=int(d["patch_w"]),
            overlap=int(d["overlap"]),
            rects=tuple(tuple(int(v) for v in r) for r in d["rects"]),
        )

    @staticmethod
    def from_json(s: str) -> "TileGrid":
        return TileGrid.from_dict(json.loads(s))


def _axis_starts(extent: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, extent - patch + 1, stride))
    # Clamp a final window to the frame edge instead of padding past it.
    if starts[-1] + patch < extent:
        starts.append(extent - patch)
    return starts


def build_grid(image_h: int, image_w: int, patch_h: int, patch_w: int, overlap: int) -> TileGrid:
    """Build the row-major overlapped grid covering every pixel of the frame.

    Window starts advance by ``patch - overlap``; the last start on each axis
    is clamped to ``image - patch`` so the final window stays inside the
    frame (with a larger effective overlap).
    """
    if patch_h > image_h or patch_w > image_w:
        raise ValueError("patch exceeds image")
    if overlap < 0 or overlap >= min(patch_h, patch_w):
        raise ValueError("degenerate stride")
    rows = _axis_starts(image_h, patch_h, patch_h - overlap)
    cols = _axis_starts(image_w, patch_w, patch_w - overlap)
    rects = tuple((t, l, patch_h, patch_w) for t in rows for l in cols)
    return TileGrid(image_h, image_w, patch_h, patch_w, overlap, rects)


def _check_rect_in_frame(rect: Rect, frame_h: int, frame_w: int) -> None:
    top, left, h, w = rect
    if h <= 0 or w <= 0:
        raise ValueError("rect has empty extent")
    if top < 0 or left < 0 or top + h > frame_h or left + w > frame_w:
        raise ValueError(
            f"rect {rect} out of bounds for {frame_h}x{frame_w} frame"
        )


def crop(array: np.ndarray, rect: Rect) -> np.ndarray:
    """Copy the exact sub-grid at ``rect`` from an (H, W) or (H, W, C) array."""
    top, left, h, w = rect
    _check_rect_in_frame(rect, array.shape[0], array.shape[1])
    return array[top : top + h, left : left + w].copy()


class MergeAccumulator:
    """Streaming average-blend accumulator for stitching patch outputs.

    Sums run in float64 so overlapping contributions of identical values
    recover the source bit-exactly after division, independent of the order
    patches are added. The buffers belong to whoever constructs this object,
    which keeps them out of any working-set measurement of the patch loop.
    """

    def __init__(self, grid: TileGrid, channels: int = 0, dtype=np.float32):
        shape = (grid.image_h, grid.image_w) + ((channels,) if channels else ())
        self.grid = grid
        self.dtype = np.dtype(dtype)
        self.total = np.zeros(shape, dtype=np.float64)
        self.hits = np.zeros((grid.image_h, grid.image_w), dtype=np.uint16)

    def add(self, index: int, patch: np.ndarray) -> None:
        top, left, h, w = self.grid.rects[index]
        if patch.shape[:2] != (h, w) or patch.shape[2:] != self.total.shape[2:]:
            raise ValueError("patch shape does not match grid rect")
        self.total[top : top + h, left : left + w] += patch
        self.hits[top : top + h, left : left + w] += 1

    def finalize(self, out: np.ndarray | None = None, block_rows: int = 256) -> np.ndarray:
        if not (self.hits > 0).all():
            raise ValueError("incomplete patch cover")
        if out is None:
            out = np.empty(self.total.shape, dtype=self.dtype)
        hits = self.hits if self.total.ndim == 2 else self.hits[..., None]
        for r0 in range(0, self.total.shape[0], block_rows):
            r1 = min(r0 + block_rows, self.total.shape[0])
            blended = self.total[r0:r1] / hits[r0:r1]
            if np.issubdtype(self.dtype, np.integer):
                blended = np.rint(blended)
            out[r0:r1] = blended.astype(self.dtype, copy=False)
        return out


def merge(patches: list[np.ndarray], grid: TileGrid, blend: str = "average") -> np.ndarray:
    """Reassemble patches into a full frame, combining overlaps per ``blend``.

    "average" takes the arithmetic mean of overlapping values;
    "center-priority" keeps, per pixel, the value from the patch whose
    center is nearest (ties resolved by grid order).
    """
    if len(patches) != len(grid.rects):
        raise ValueError(
            f"expected {len(grid.rects)} patches, got {len(patches)}"
        )
    for p, (_, _, h, w) in zip(patches, grid.rects):
        if p.shape[:2] != (h, w):
            raise ValueError("patch shape does not match grid rect")
        if p.shape[2:] != patches[0].shape[2:]:
            raise ValueError("patches disagree on channel shape")
    channels = patches[0].shape[2] if patches[0].ndim == 3 else 0

    if blend == "average":
        acc = MergeAccumulator(grid, channels, dtype=patches[0].dtype)
        for i, p in enumerate(patches):
            acc.add(i, p)
        return acc.finalize()

    if blend == "center-priority":
        shape = (grid.image_h, grid.image_w) + ((channels,) if channels else ())
        out = np.zeros(shape, dtype=patches[0].dtype)
        best = np.full((grid.image_h, grid.image_w), np.inf, dtype=np.float64)
        for p, (top, left, h, w) in zip(patches, grid.rects):
            cy, cx = top + (h - 1) / 2.0, left + (w - 1) / 2.0
            ys = (np.arange(top, top + h, dtype=np.float64) - cy) ** 2
            xs = (np.arange(left, left + w, dtype=np.float64) - cx) ** 2
            dist = ys[:, None] + xs[None, :]
            take = dist < best[top : top + h, left : left + w]
            best[top : top + h, left : left + w][take] = dist[take]
            out[top : top + h, left : left + w][take] = p[take]
        return out

    raise ValueError(f"unknown blend mode {blend!r}")


def rect_to_relative(rect: Rect, frame_h: int, frame_w: int) -> RelativeRect:
    """Express a pixel rect as fractions of its frame."""
    if frame_h <= 0 or frame_w <= 0:
        raise ValueError("frame dimensions must be positive")
    _check_rect_in_frame(rect, frame_h, frame_w)
    top, left, h, w = rect
    return RelativeRect(top / frame_h, left / frame_w, h / frame_h, w / frame_w)


def relative_to_rect(rel: RelativeRect, frame_h: int, frame_w: int) -> Rect:
    """Map a relative rect onto a frame: floor the origin, ceil the extent.

    The rounding guarantees the pixel rect covers the true relative region;
    extents are clamped to the frame.
    """
    if frame_h <= 0 or frame_w <= 0:
        raise ValueError("frame dimensions must be positive")
    top = min(int(np.floor(rel.top * frame_h)), frame_h - 1)
    left = min(int(np.floor(rel.left * frame_w)), frame_w - 1)
    h = min(int(np.ceil(rel.height * frame_h)), frame_h - top)
    w = min(int(np.ceil(rel.width * frame_w)), frame_w - left)
    if h <= 0 or w <= 0:
        raise ValueError("tap frame under-resolved")
    return (top, left, h, w)
