"""Attention rollout: aggregate per-layer attention into input attributions.

Head-averaged attention matrices are composed across layers by matrix
multiplication. By default each layer is first blended with the identity
(0.5*A + 0.5*I, rows renormalized) to account for residual connections;
``residual=False`` composes the raw matrices instead. The cls row of the
composed matrix, restricted to the non-cls positions and normalized to sum
one, gives the spatial heatmap per frame group and the temporal profile
over time steps.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .model import ForwardTrace

ROW_STOCHASTIC_TOL = 1e-5
MASS_FLOOR = 1e-9


class RolloutError(Exception):
    pass


def rollout_matrix(attn_layers: list[np.ndarray], residual: bool = True) -> np.ndarray:
    """Compose head-averaged row-stochastic matrices: A_L @ ... @ A_1."""
    if not attn_layers:
        raise RolloutError("no attention layers to roll out")
    size = attn_layers[0].shape[0]
    result = np.eye(size, dtype=np.float64)
    for li, layer in enumerate(attn_layers):
        a = np.asarray(layer, dtype=np.float64)
        if a.shape != (size, size):
            raise RolloutError(f"layer {li} has shape {a.shape}, expected ({size}, {size})")
        row_sums = a.sum(axis=-1)
        if np.max(np.abs(row_sums - 1.0)) > ROW_STOCHASTIC_TOL:
            raise RolloutError(f"layer {li} is not row-stochastic within {ROW_STOCHASTIC_TOL}")
        if residual:
            a = 0.5 * a + 0.5 * np.eye(size)
            a = a / a.sum(axis=-1, keepdims=True)
        result = a @ result
    return result


def _head_average(per_layer: list[np.ndarray]) -> list[np.ndarray]:
    return [np.asarray(a, dtype=np.float64).mean(axis=0) for a in per_layer]


def _cls_mass(matrix: np.ndarray) -> np.ndarray:
    mass = matrix[0, 1:].copy()
    total = mass.sum()
    if total < MASS_FLOOR:
        # Degenerate trace (all attention stayed on cls): report uniform.
        return np.full(mass.shape, 1.0 / mass.size)
    return mass / total


def spatial_heatmap(trace: ForwardTrace, group_index: int, residual: bool = True) -> np.ndarray:
    """G x G attention mass from the cls output to grid tokens; sums to 1."""
    if not trace.spatial_attention:
        raise RolloutError("spatial attention was not retained in this trace")
    if not 0 <= group_index < len(trace.spatial_attention):
        raise RolloutError(
            f"group index {group_index} outside 0..{len(trace.spatial_attention) - 1}"
        )
    layers = _head_average(trace.spatial_attention[group_index])
    mass = _cls_mass(rollout_matrix(layers, residual))
    g = trace.grid_size
    if mass.size != g * g:
        raise RolloutError(f"{mass.size} grid tokens do not fill a {g}x{g} map")
    return mass.reshape(g, g)


def temporal_profile(trace: ForwardTrace, residual: bool = True) -> np.ndarray:
    """Length-T attention mass from the temporal cls output; sums to 1."""
    if not trace.temporal_attention:
        raise RolloutError("temporal attention was not retained in this trace")
    layers = _head_average(trace.temporal_attention)
    return _cls_mass(rollout_matrix(layers, residual))


# --- exports -----------------------------------------------------------------


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Binary P5 grayscale image, values scaled so the max maps to 255."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise RolloutError(f"PGM export needs a 2D map, got shape {v.shape}")
    peak = v.max()
    scaled = np.zeros_like(v) if peak <= 0 else v / peak
    data = np.round(scaled * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes(order="C"))


def write_temporal_csv(path: str | Path, profile: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "attention"])
        for t, a in enumerate(profile, start=1):
            writer.writerow([t, repr(float(a))])


def write_overlay_png(
    path: str | Path,
    frame: np.ndarray,
    heat: np.ndarray,
    centers: np.ndarray,
    patch_span: int,
) -> None:
    """Blend per-cell heat onto a frame; cells sit at their patch centers.

    ``centers`` is the (G, G, 2) pixel-center array for the scale being
    visualized and ``patch_span`` the cell side to paint (normally the pitch).
    """
    from PIL import Image

    img = (np.clip(frame, 0.0, 1.0) * 255.0).astype(np.float64)
    h, w = img.shape[:2]
    peak = heat.max()
    norm = heat / peak if peak > 0 else heat
    g = heat.shape[0]
    half = patch_span / 2.0
    for r in range(g):
        for c in range(g):
            cy, cx = centers[r, c]
            top = max(int(math.floor(cy - half + 0.5)), 0)
            left = max(int(math.floor(cx - half + 0.5)), 0)
            bottom = min(top + patch_span, h)
            right = min(left + patch_span, w)
            alpha = 0.6 * float(norm[r, c])
            cell = img[top:bottom, left:right]
            cell[..., 0] = (1 - alpha) * cell[..., 0] + alpha * 255.0
            cell[..., 1] *= 1 - alpha
            cell[..., 2] *= 1 - alpha
    Image.fromarray(np.round(img).astype(np.uint8)).save(Path(path), format="PNG")
