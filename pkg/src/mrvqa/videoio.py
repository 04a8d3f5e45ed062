"""Frame loading, aspect-preserving resize, clip sampling, synthetic videos.

Frames are float arrays in [0, 1], shape (H, W, 3). A sequence keeps all its
frames at one resolution. Real inputs come from a directory of PPM/PNG files
or a raw RGB8 blob with a JSON header; desk-scale training data comes from
seeded synthetic generators whose quality label is tied to the distortion
severity.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .seeding import derive_rng

DEFAULT_MOS_RANGE = (0.0, 100.0)

PATTERNS = ("gradient", "checker", "moving_disc")
DISTORTIONS = ("gaussian_blur", "additive_noise", "block_quantization")

NOISE_AMPLITUDE = 0.5  # std of additive noise at severity 1
BLUR_SIGMA_MAX = 3.0
BLOCK_SIZE_MAX = 15


class VideoIOError(Exception):
    pass


@dataclass
class FrameSequence:
    """Ordered RGB frames with uniform dimensions and an optional MOS label."""

    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    frame_rate: float | None = None
    mos: float | None = None
    mos_range: tuple[float, float] = DEFAULT_MOS_RANGE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise VideoIOError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1 or self.frames.shape[1] < 1 or self.frames.shape[2] < 1:
            raise VideoIOError("empty frame sequence")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise VideoIOError("frame values must lie in [0, 1]")
        if self.mos is not None:
            lo, hi = self.mos_range
            if not lo <= self.mos <= hi:
                raise VideoIOError(f"mos {self.mos} outside declared range [{lo}, {hi}]")

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def _lerp_resize_axis(arr: np.ndarray, new_size: int, axis: int) -> np.ndarray:
    """1D bilinear resample along one axis, half-pixel-centered, edges clamped."""
    old_size = arr.shape[axis]
    if old_size == new_size:
        return arr
    src = (np.arange(new_size, dtype=np.float64) + 0.5) * (old_size / new_size) - 0.5
    src = np.clip(src, 0.0, old_size - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, old_size - 1)
    w = (src - i0).astype(arr.dtype)
    lo = np.take(arr, i0, axis=axis)
    hi = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = new_size
    w = w.reshape(shape)
    # lo + w*(hi-lo) keeps constant inputs bit-exact (w*0 == 0)
    return lo + w * (hi - lo)


def resize_shorter_side(frame: np.ndarray, target: int) -> np.ndarray:
    """Resize so the shorter side equals ``target``, preserving aspect ratio.

    The longer side becomes round(longer * target / shorter), never below 1;
    interpolation is bilinear with half-pixel-centered sample coordinates.
    When the shorter side already equals ``target`` the input is returned
    unchanged (bit-exact identity).
    """
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    h, w = frame.shape[:2]
    shorter = min(h, w)
    if shorter == target:
        return frame
    if h <= w:
        nh = target
        nw = max(1, _round_half_away(w * target / h))
    else:
        nw = target
        nh = max(1, _round_half_away(h * target / w))
    out = _lerp_resize_axis(frame, nh, axis=0)
    out = _lerp_resize_axis(out, nw, axis=1)
    return np.ascontiguousarray(out)


def sample_frames(seq: FrameSequence, count: int, strategy: str = "uniform") -> FrameSequence:
    """Pick ``count`` frames by strategy: uniform, front, or center clip.

    Sequences shorter than ``count`` are padded by repeating the last frame.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if strategy not in ("uniform", "front", "center"):
        raise ValueError(f"unknown strategy {strategy!r}")
    m = len(seq)
    if m == 0:
        raise VideoIOError("cannot sample from an empty sequence")
    if m < count:
        indices = list(range(m)) + [m - 1] * (count - m)
    elif strategy == "uniform":
        if count == 1:
            indices = [0]
        else:
            indices = [_round_half_away(j * (m - 1) / (count - 1)) for j in range(count)]
    elif strategy == "front":
        indices = list(range(count))
    else:  # center
        start = min(max(m // 2 - count // 2, 0), m - count)
        indices = list(range(start, start + count))
    return FrameSequence(
        seq.frames[np.asarray(indices, dtype=np.intp)],
        frame_rate=seq.frame_rate,
        mos=seq.mos,
        mos_range=seq.mos_range,
    )


# --- loading ---------------------------------------------------------------


def _load_blob(blob_path: Path) -> FrameSequence:
    header_path = blob_path.with_suffix(".json")
    if not header_path.exists():
        raise VideoIOError(f"missing blob header {header_path}")
    header = json.loads(header_path.read_text())
    try:
        h, w, t = int(header["height"]), int(header["width"]), int(header["frames"])
    except KeyError as exc:
        raise VideoIOError(f"blob header {header_path} missing key {exc}") from exc
    raw = np.frombuffer(blob_path.read_bytes(), dtype=np.uint8)
    expected = t * h * w * 3
    if raw.size != expected:
        raise VideoIOError(f"blob {blob_path} has {raw.size} bytes, expected {expected}")
    frames = raw.reshape(t, h, w, 3).astype(np.float32) / 255.0
    return FrameSequence(frames, mos=header.get("mos"))


def load_frames(path: str | Path) -> FrameSequence:
    """Load a sequence from a frame directory or a raw-RGB8 blob.

    A directory holds lexically ordered ``.ppm``/``.png`` files (optionally a
    sibling ``labels.json`` with {"mos": value}), or the pair ``video.rgb8``
    + ``video.json``. A file path must point at the ``.rgb8`` blob itself.
    """
    p = Path(path)
    if p.is_file():
        if p.suffix == ".rgb8":
            return _load_blob(p)
        raise VideoIOError(f"unsupported video file {p} (expected .rgb8 or a directory)")
    if not p.is_dir():
        raise VideoIOError(f"unreadable video path {p}")
    blob = p / "video.rgb8"
    if blob.exists():
        return _load_blob(blob)
    files = sorted(f for f in p.iterdir() if f.suffix.lower() in (".ppm", ".png"))
    if not files:
        raise VideoIOError(f"no frame files in {p}")
    frames = []
    dims = None
    for f in files:
        try:
            img = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:
            raise VideoIOError(f"cannot decode frame {f}: {exc}") from exc
        if dims is None:
            dims = img.shape
        elif img.shape != dims:
            raise VideoIOError(f"inconsistent dimensions: {f} is {img.shape[:2]}, expected {dims[:2]}")
        frames.append(img)
    mos = None
    labels = p / "labels.json"
    if labels.exists():
        mos = json.loads(labels.read_text()).get("mos")
    return FrameSequence(np.stack(frames), mos=mos)


def save_blob(seq: FrameSequence, directory: str | Path) -> Path:
    """Write a sequence as video.rgb8 + video.json; returns the blob path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.round(seq.frames * 255.0), 0, 255).astype(np.uint8)
    header = {"height": seq.height, "width": seq.width, "frames": len(seq)}
    if seq.mos is not None:
        header["mos"] = seq.mos
    (d / "video.json").write_text(json.dumps(header, sort_keys=True) + "\n")
    blob = d / "video.rgb8"
    blob.write_bytes(data.tobytes(order="C"))
    return blob


# --- synthetic videos ------------------------------------------------------


@dataclass
class SynthSpec:
    """Recipe for one labeled synthetic video.

    Severity in [0, 1] maps to mos = 100 * (1 - severity).
    """

    pattern: str = "moving_disc"
    distortion: str = "additive_noise"
    severity: float = 0.0
    frames: int = 16
    height: int = 48
    width: int = 64

    def __post_init__(self):
        self.pattern = self.pattern.replace("-", "_")
        self.distortion = self.distortion.replace("-", "_")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}, expected one of {PATTERNS}")
        if self.distortion not in DISTORTIONS:
            raise ValueError(f"unknown distortion {self.distortion!r}, expected one of {DISTORTIONS}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity must lie in [0, 1], got {self.severity}")
        if self.frames < 1 or self.height < 1 or self.width < 1:
            raise ValueError("frames/height/width must be >= 1")

    @property
    def mos(self) -> float:
        return 100.0 * (1.0 - self.severity)


def _base_frames(spec: SynthSpec) -> np.ndarray:
    h, w, t = spec.height, spec.width, spec.frames
    ys = np.linspace(0.0, 1.0, h, dtype=np.float32)[:, None]
    xs = np.linspace(0.0, 1.0, w, dtype=np.float32)[None, :]
    if spec.pattern == "gradient":
        frame = np.stack([np.broadcast_to(xs, (h, w)),
                          np.broadcast_to(ys, (h, w)),
                          0.5 * (xs + ys)], axis=-1)
        return np.repeat(frame[None], t, axis=0)
    if spec.pattern == "checker":
        cell = max(2, min(h, w) // 8)
        grid = ((np.arange(h)[:, None] // cell + np.arange(w)[None, :] // cell) % 2).astype(np.float32)
        frame = np.stack([0.25 + 0.6 * grid, 0.30 + 0.5 * grid, 0.35 + 0.4 * grid], axis=-1)
        return np.repeat(frame[None], t, axis=0)
    # moving_disc: bright soft-edged disc translating 2 px/frame over a gradient
    background = np.stack([0.2 + 0.4 * np.broadcast_to(xs, (h, w)),
                           0.2 + 0.4 * np.broadcast_to(ys, (h, w)),
                           np.full((h, w), 0.35, dtype=np.float32)], axis=-1)
    radius = max(3.0, min(h, w) / 5.0)
    yy = np.arange(h, dtype=np.float32)[:, None]
    xx = np.arange(w, dtype=np.float32)[None, :]
    frames = np.empty((t, h, w, 3), dtype=np.float32)
    for k in range(t):
        cy = h / 2.0
        cx = (w / 4.0 + 2.0 * k) % w
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        mask = np.clip(radius + 1.0 - dist, 0.0, 1.0)[..., None]
        disc = np.array([0.95, 0.9, 0.3], dtype=np.float32)
        frames[k] = background * (1.0 - mask) + disc * mask
    return frames


def _distort(frames: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.severity == 0.0:
        return frames
    if spec.distortion == "additive_noise":
        noise = rng.standard_normal(frames.shape).astype(np.float32)
        return np.clip(frames + NOISE_AMPLITUDE * spec.severity * noise, 0.0, 1.0)
    if spec.distortion == "gaussian_blur":
        sigma = BLUR_SIGMA_MAX * spec.severity
        out = np.empty_like(frames)
        for k in range(frames.shape[0]):
            out[k] = gaussian_filter(frames[k], sigma=(sigma, sigma, 0.0), mode="nearest")
        return np.clip(out, 0.0, 1.0)
    # block_quantization: average-pool b x b blocks and upsample back
    b = 1 + _round_half_away((BLOCK_SIZE_MAX - 1) * spec.severity)
    if b <= 1:
        return frames
    t, h, w, _ = frames.shape
    ph, pw = (-h) % b, (-w) % b
    padded = np.pad(frames, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    hb, wb = padded.shape[1] // b, padded.shape[2] // b
    blocks = padded.reshape(t, hb, b, wb, b, 3).mean(axis=(2, 4))
    up = np.repeat(np.repeat(blocks, b, axis=1), b, axis=2)
    return np.ascontiguousarray(up[:, :h, :w]).astype(np.float32)


def synth_video(spec: SynthSpec, seed: int) -> FrameSequence:
    """Deterministic labeled video for (spec, seed); mos = 100 * (1 - severity)."""
    rng = derive_rng(seed, "synth")
    frames = _distort(_base_frames(spec), spec, rng)
    return FrameSequence(frames, mos=spec.mos)


# --- dataset manifests ------------------------------------------------------


def load_manifest(path: str | Path) -> list[FrameSequence]:
    """Resolve a JSON dataset manifest into labeled sequences.

    Schema: {"seed": int, "videos": [entry, ...]} where each entry is either
    {"synth": {...SynthSpec fields...}, "seed": optional int} or
    {"path": "...", "mos": optional override}. Synthetic entries without an
    explicit seed use ``seed + index``.
    """
    p = Path(path)
    if not p.exists():
        raise VideoIOError(f"manifest not found: {p}")
    doc = json.loads(p.read_text())
    base_seed = int(doc.get("seed", 0))
    entries = doc.get("videos")
    if not isinstance(entries, list) or not entries:
        raise VideoIOError(f"manifest {p} has no 'videos' list")
    sequences: list[FrameSequence] = []
    for i, entry in enumerate(entries):
        if "synth" in entry:
            spec = SynthSpec(**entry["synth"])
            seq = synth_video(spec, int(entry.get("seed", base_seed + i)))
        elif "path" in entry:
            video_path = Path(entry["path"])
            if not video_path.is_absolute():
                video_path = p.parent / video_path
            seq = load_frames(video_path)
            if "mos" in entry:
                seq = FrameSequence(seq.frames, frame_rate=seq.frame_rate, mos=float(entry["mos"]))
        else:
            raise VideoIOError(f"manifest entry {i} needs 'synth' or 'path'")
        sequences.append(seq)
    return sequences
