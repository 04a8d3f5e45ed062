"""Frame grouping, scale pyramids, and center-aligned multi-resolution tubes.

Consecutive frames are grouped N at a time; frame i of a group (1-based) is
resized to shorter side (N-i+1)*L/N, giving one frame per scale from full
resolution down to L/N. A G x G grid of P x P patches is cut from every
scale around a shared alignment center with per-scale pitch (N-i+1)*P, so
the grid spans exactly the shorter side at every scale and cell (r, c) looks
at the same normalized location everywhere. Stacking a cell's patches across
scales yields a "tube", the unit that gets projected to one token.

Besides the aligned sampler ("mret") three ablation modes exist: "fixed"
(all frames at L/N, contiguous grid), "highres_last" (low-res grids for the
first N-1 frames, one full-resolution grid on the last), and "random"
(unaligned uniform patches, randomly grouped into tubes).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .videoio import FrameSequence, resize_shorter_side

SAMPLER_MODES = ("mret", "random", "highres_last", "fixed")


class GeometryError(Exception):
    pass


@dataclass(frozen=True)
class MultiResConfig:
    """Pyramid geometry: N scales, largest shorter side L, patch P, grid G."""

    n_scales: int = 4
    largest_side: int = 896
    patch_size: int = 16
    grid_size: int = 14

    def __post_init__(self):
        n, l, p, g = self.n_scales, self.largest_side, self.patch_size, self.grid_size
        if n < 1 or p < 1 or g < 1:
            raise GeometryError("n_scales, patch_size, grid_size must all be >= 1")
        if l % n != 0:
            raise GeometryError(f"largest_side {l} must be divisible by n_scales {n}")
        if g * p != l // n:
            raise GeometryError(
                f"grid_size * patch_size must equal largest_side / n_scales "
                f"({g}*{p} != {l}//{n})"
            )

    @property
    def tokens_per_group(self) -> int:
        return self.grid_size * self.grid_size

    def scale_side(self, scale_index: int) -> int:
        """Shorter side at 1-based scale index: (N - i + 1) * L / N."""
        self._check_scale(scale_index)
        return (self.n_scales - scale_index + 1) * self.largest_side // self.n_scales

    def pitch(self, scale_index: int) -> int:
        """Distance between adjacent patch centers at a scale: (N - i + 1) * P."""
        self._check_scale(scale_index)
        return (self.n_scales - scale_index + 1) * self.patch_size

    def gap(self, scale_index: int) -> int:
        """Distance between adjacent patch edges: (N - i) * P."""
        return self.pitch(scale_index) - self.patch_size

    def _check_scale(self, scale_index: int) -> None:
        if not 1 <= scale_index <= self.n_scales:
            raise GeometryError(f"scale index {scale_index} outside 1..{self.n_scales}")


def group_frames(seq: FrameSequence, n_scales: int) -> list[np.ndarray]:
    """Split into ceil(T/N) groups of exactly N consecutive frames.

    A final partial group is padded by repeating its own last frame.
    """
    if n_scales < 1:
        raise GeometryError("n_scales must be >= 1")
    m = len(seq)
    groups = []
    for g in range(math.ceil(m / n_scales)):
        idx = [min(g * n_scales + k, m - 1) for k in range(n_scales)]
        groups.append(seq.frames[np.asarray(idx, dtype=np.intp)])
    return groups


def scale_sides(cfg: MultiResConfig, mode: str = "mret") -> list[int]:
    """Target shorter sides per frame position for a sampler mode."""
    if mode not in SAMPLER_MODES:
        raise GeometryError(f"unknown sampler mode {mode!r}, expected one of {SAMPLER_MODES}")
    n = cfg.n_scales
    smallest = cfg.largest_side // n
    if mode in ("mret", "random"):
        return [cfg.scale_side(i) for i in range(1, n + 1)]
    if mode == "fixed":
        return [smallest] * n
    return [smallest] * (n - 1) + [cfg.largest_side]  # highres_last


@dataclass
class PyramidGroup:
    """One frame group resized to its per-scale shorter sides."""

    frames: list[np.ndarray]
    sides: list[int]
    mode: str = "mret"

    def __post_init__(self):
        if len(self.frames) != len(self.sides):
            raise GeometryError("frames and sides length mismatch")
        for f, s in zip(self.frames, self.sides):
            if min(f.shape[0], f.shape[1]) != s:
                raise GeometryError(f"frame shorter side {min(f.shape[:2])} != expected {s}")

    @property
    def n_scales(self) -> int:
        return len(self.frames)


def build_pyramid(group: np.ndarray, cfg: MultiResConfig, mode: str = "mret") -> PyramidGroup:
    """Resize the N frames of a group to the mode's scale ladder."""
    sides = scale_sides(cfg, mode)
    if group.shape[0] != cfg.n_scales:
        raise GeometryError(f"group has {group.shape[0]} frames, config expects {cfg.n_scales}")
    frames = [resize_shorter_side(group[i], sides[i]) for i in range(cfg.n_scales)]
    return PyramidGroup(frames, sides, mode)


@dataclass(frozen=True)
class AlignCenter:
    """Shared alignment center: normalized coordinate along the longer axis.

    The shorter axis is implicitly centered at 0.5. ``long_axis`` is 0 when
    rows are the longer dimension, 1 when columns are (ties pick columns).
    ``scale_dims`` records each pyramid frame's (height, width) so per-scale
    pixel centers can be derived.
    """

    c: float
    long_axis: int
    scale_dims: tuple[tuple[int, int], ...]


def valid_center_range(pyr: PyramidGroup) -> tuple[float, float]:
    """Normalized range on the longer axis where the grid window fits at all scales.

    The window side equals the shorter side, so at each scale the center must
    stay within [S/(2*Lg), 1 - S/(2*Lg)]; the intersection over scales applies.
    """
    lo = 0.0
    for f in pyr.frames:
        h, w = f.shape[:2]
        s, lg = min(h, w), max(h, w)
        lo = max(lo, s / (2.0 * lg))
    return lo, 1.0 - lo


def choose_center(
    pyr: PyramidGroup,
    mode: str,
    rng: np.random.Generator | None = None,
) -> AlignCenter:
    """Pick the alignment center: 0.5 at inference, uniform in range for training."""
    if mode not in ("train", "infer"):
        raise ValueError(f"center mode must be 'train' or 'infer', got {mode!r}")
    h0, w0 = pyr.frames[0].shape[:2]
    long_axis = 0 if h0 > w0 else 1
    dims = tuple((f.shape[0], f.shape[1]) for f in pyr.frames)
    if mode == "infer":
        return AlignCenter(0.5, long_axis, dims)
    if rng is None:
        raise ValueError("training center draw needs an rng")
    lo, hi = valid_center_range(pyr)
    c = 0.5 if hi <= lo else float(rng.uniform(lo, hi))
    return AlignCenter(c, long_axis, dims)


def _grid_axis_centers(length: int, center_px: float, pitch: int, grid: int) -> np.ndarray:
    offsets = (np.arange(grid, dtype=np.float64) - (grid - 1) / 2.0) * pitch
    return center_px + offsets


def normalized_grid_offsets(pitch: int, shorter_side: int, grid: int) -> np.ndarray:
    """Patch-center offsets from the alignment center, as fractions of the shorter side.

    Computed as (k - (G-1)/2) * pitch / S with exact intermediate values, so
    scales whose pitch/S ratios agree produce bit-identical offsets.
    """
    t = np.arange(grid, dtype=np.float64) - (grid - 1) / 2.0
    return (t * pitch) / shorter_side


def patch_centers(cfg: MultiResConfig, center: AlignCenter, scale_index: int) -> np.ndarray:
    """Exact (G, G, 2) float pixel centers (row, col) used by the aligned sampler."""
    cfg._check_scale(scale_index)
    if scale_index > len(center.scale_dims):
        raise GeometryError(f"alignment center has no dims for scale {scale_index}")
    h, w = center.scale_dims[scale_index - 1]
    pitch = cfg.pitch(scale_index)
    g = cfg.grid_size
    if center.long_axis == 1:
        rows = _grid_axis_centers(h, h / 2.0, pitch, g)
        cols = _grid_axis_centers(w, center.c * w, pitch, g)
    else:
        rows = _grid_axis_centers(h, center.c * h, pitch, g)
        cols = _grid_axis_centers(w, w / 2.0, pitch, g)
    out = np.empty((g, g, 2), dtype=np.float64)
    out[..., 0] = rows[:, None]
    out[..., 1] = cols[None, :]
    return out


@dataclass
class TubeBatch:
    """G x G tubes of N stacked patches plus the geometry that produced them."""

    tubes: np.ndarray  # (G, G, N, P, P, 3) float32
    center: AlignCenter
    mode: str

    @property
    def grid_size(self) -> int:
        return int(self.tubes.shape[0])

    def tokens(self) -> np.ndarray:
        """Flatten to (G*G, N*P*P*3), grid row-major (row outer, column inner)."""
        g = self.grid_size
        return np.ascontiguousarray(self.tubes.reshape(g * g, -1))


def _cut_patch(frame: np.ndarray, cy: float, cx: float, p: int) -> np.ndarray:
    h, w = frame.shape[:2]
    top = int(math.floor(cy - p / 2.0 + 0.5))
    left = int(math.floor(cx - p / 2.0 + 0.5))
    top = min(max(top, 0), h - p)
    left = min(max(left, 0), w - p)
    return frame[top:top + p, left:left + p]


def _centers_for_frame(
    frame: np.ndarray, center: AlignCenter, pitch: int, grid: int
) -> tuple[np.ndarray, np.ndarray]:
    h, w = frame.shape[:2]
    if center.long_axis == 1:
        rows = _grid_axis_centers(h, h / 2.0, pitch, grid)
        cols = _grid_axis_centers(w, center.c * w, pitch, grid)
    else:
        rows = _grid_axis_centers(h, center.c * h, pitch, grid)
        cols = _grid_axis_centers(w, w / 2.0, pitch, grid)
    return rows, cols


def sample_tubes(
    pyr: PyramidGroup,
    center: AlignCenter,
    cfg: MultiResConfig,
    mode: str = "mret",
    rng: np.random.Generator | None = None,
) -> TubeBatch:
    """Cut the mode's patch grids from a pyramid and stack them into tubes."""
    if mode not in SAMPLER_MODES:
        raise GeometryError(f"unknown sampler mode {mode!r}")
    expected = scale_sides(cfg, mode)
    if pyr.sides != expected:
        raise GeometryError(f"pyramid sides {pyr.sides} do not match mode {mode!r} ({expected})")
    n, p, g = cfg.n_scales, cfg.patch_size, cfg.grid_size
    tubes = np.empty((g, g, n, p, p, 3), dtype=np.float32)

    if mode == "random":
        if rng is None:
            raise ValueError("random sampler mode needs an rng")
        # G*G uniform patches per scale, shuffled per scale, grouped by index.
        for j, frame in enumerate(pyr.frames):
            h, w = frame.shape[:2]
            tops = rng.integers(0, h - p + 1, size=g * g)
            lefts = rng.integers(0, w - p + 1, size=g * g)
            order = rng.permutation(g * g)
            for k in range(g * g):
                t, l = int(tops[order[k]]), int(lefts[order[k]])
                tubes[k // g, k % g, j] = frame[t:t + p, l:l + p]
        return TubeBatch(tubes, center, mode)

    for j, frame in enumerate(pyr.frames):
        if mode == "mret":
            pitch = cfg.pitch(j + 1)
        else:  # fixed and highres_last sample contiguous grids everywhere
            pitch = p
        rows, cols = _centers_for_frame(frame, center, pitch, g)
        for r in range(g):
            for c in range(g):
                tubes[r, c, j] = _cut_patch(frame, rows[r], cols[c], p)
    return TubeBatch(tubes, center, mode)


def geometry_report(
    pyr: PyramidGroup, center: AlignCenter, cfg: MultiResConfig, mode: str = "mret"
) -> dict:
    """JSON-friendly dump of the sampling geometry (for inspection and tests)."""
    n, p, g = cfg.n_scales, cfg.patch_size, cfg.grid_size
    scales = []
    for j, frame in enumerate(pyr.frames):
        pitch = cfg.pitch(j + 1) if mode == "mret" else p
        rows, cols = _centers_for_frame(frame, center, pitch, g)
        tops = [int(math.floor(r - p / 2.0 + 0.5)) for r in rows]
        lefts = [int(math.floor(c - p / 2.0 + 0.5)) for c in cols]
        scales.append(
            {
                "scale_index": j + 1,
                "height": int(frame.shape[0]),
                "width": int(frame.shape[1]),
                "shorter_side": int(min(frame.shape[:2])),
                "pitch": int(pitch),
                "gap": int(pitch - p),
                "row_centers": [float(r) for r in rows],
                "col_centers": [float(c) for c in cols],
                "window": {
                    "top": min(tops),
                    "left": min(lefts),
                    "bottom": max(tops) + p,
                    "right": max(lefts) + p,
                },
            }
        )
    return {
        "mode": mode,
        "grid_size": g,
        "patch_size": p,
        "n_scales": n,
        "center": {"c": center.c, "long_axis": center.long_axis},
        "scales": scales,
    }
