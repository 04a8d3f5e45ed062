"""Tube embedding, factorized spatial/temporal encoders, and the quality head.

One frame group's G*G tubes are flattened and linearly projected to tokens;
a learnable classification token is prepended and a positional embedding
added (including the cls position). A pre-LN transformer encoder produces
the group representation from the cls output, a second encoder of the same
block structure aggregates the per-group representations over time, and a
two-layer MLP regresses the video feature to a quality score.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .multires import MultiResConfig, TubeBatch, build_pyramid, choose_center, group_frames, sample_tubes
from .seeding import derive_rng
from .videoio import FrameSequence, sample_frames

CHANNEL_MEAN = 0.5
CHANNEL_STD = 0.5

INIT_STD = 0.02
INIT_CLIP_SIGMA = 2.0


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Encoder dimensions plus the pyramid geometry and clip length."""

    dim: int = 768
    spatial_layers: int = 12
    temporal_layers: int = 8
    heads: int = 12
    mlp_dim: int = 3072
    head_hidden: int = 768
    frames_per_clip: int = 128
    dropout: float = 0.0
    normalize_channels: bool = False
    multires: MultiResConfig = field(default_factory=MultiResConfig)

    def __post_init__(self):
        if self.dim < 1 or self.dim % self.heads != 0:
            raise ModelError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.spatial_layers < 0 or self.temporal_layers < 0:
            raise ModelError("layer counts must be >= 0")
        if self.frames_per_clip < 1:
            raise ModelError("frames_per_clip must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def tokens_per_group(self) -> int:
        return self.multires.tokens_per_group

    @property
    def groups_per_clip(self) -> int:
        return math.ceil(self.frames_per_clip / self.multires.n_scales)

    @property
    def tube_dim(self) -> int:
        p, n = self.multires.patch_size, self.multires.n_scales
        return n * p * p * 3


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor's shape, in a stable order."""
    d, m, t = cfg.dim, cfg.tokens_per_group, cfg.groups_per_clip
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (d, cfg.tube_dim),
        "embed.bias": (d,),
        "spatial.cls": (d,),
        "spatial.pos": (m + 1, d),
    }

    def block(prefix: str) -> None:
        shapes[f"{prefix}.ln1.gamma"] = (d,)
        shapes[f"{prefix}.ln1.beta"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.attn.{name}"] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[f"{prefix}.attn.{name}"] = (d,)
        shapes[f"{prefix}.ln2.gamma"] = (d,)
        shapes[f"{prefix}.ln2.beta"] = (d,)
        shapes[f"{prefix}.mlp.w1"] = (d, cfg.mlp_dim)
        shapes[f"{prefix}.mlp.b1"] = (cfg.mlp_dim,)
        shapes[f"{prefix}.mlp.w2"] = (cfg.mlp_dim, d)
        shapes[f"{prefix}.mlp.b2"] = (d,)

    for k in range(cfg.spatial_layers):
        block(f"spatial.layers.{k}")
    shapes["spatial.ln_out.gamma"] = (d,)
    shapes["spatial.ln_out.beta"] = (d,)

    shapes["temporal.cls"] = (d,)
    shapes["temporal.pos"] = (t + 1, d)
    for q in range(cfg.temporal_layers):
        block(f"temporal.layers.{q}")
    shapes["temporal.ln_out.gamma"] = (d,)
    shapes["temporal.ln_out.beta"] = (d,)

    shapes["head.w1"] = (d, cfg.head_hidden)
    shapes["head.b1"] = (cfg.head_hidden,)
    shapes["head.w2"] = (cfg.head_hidden, 1)
    shapes["head.b2"] = (1,)
    return shapes


class ModelParams:
    """Named learnable tensors; shapes are pinned by the config."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, nm.Tensor]):
        expected = param_shapes(cfg)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ModelError(f"parameter names mismatch: missing {missing}, extra {extra}")
        for name, t in tensors.items():
            if t.shape != expected[name]:
                raise ModelError(f"{name}: shape {t.shape} != expected {expected[name]}")
        self.cfg = cfg
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> nm.Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        tensors = {name: nm.Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
        return cls(cfg, tensors)


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    out = rng.standard_normal(shape)
    mask = np.abs(out) > INIT_CLIP_SIGMA
    while mask.any():
        out[mask] = rng.standard_normal(int(mask.sum()))
        mask = np.abs(out) > INIT_CLIP_SIGMA
    return out * INIT_STD


def init_random(cfg: ModelConfig, seed: int) -> ModelParams:
    """Truncated-normal weights/positional embeddings, zero biases and cls tokens."""
    rng = derive_rng(seed, "init")
    tensors: dict[str, nm.Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in ("beta", "bias", "cls") or leaf.startswith("b"):
            arr = np.zeros(shape)
        else:  # weights and positional embeddings
            arr = _truncated_normal(rng, shape)
        tensors[name] = nm.Tensor(arr, requires_grad=True)
    return ModelParams(cfg, tensors)


def init_central_frame(e_image: np.ndarray, n_scales: int) -> np.ndarray:
    """Expand a 2D patch projection to the tube projection: zeros at every
    scale slot except index floor(N/2), which receives the 2D matrix."""
    e_image = np.asarray(e_image)
    if e_image.ndim != 2:
        raise ModelError(f"image embedding must be 2D, got shape {e_image.shape}")
    d, patch_dim = e_image.shape
    out = np.zeros((d, n_scales * patch_dim), dtype=e_image.dtype)
    c = n_scales // 2
    out[:, c * patch_dim:(c + 1) * patch_dim] = e_image
    return out


def load_image_embedding(path: str | Path, cfg: ModelConfig | None = None) -> np.ndarray:
    """Read a pretrained 2D patch projection ("patch_embedding") from disk."""
    tensors, _ = nm.load_tensors(path)
    if "patch_embedding" not in tensors:
        raise ModelError(f"no tensor named 'patch_embedding' in {path}")
    e_image = tensors["patch_embedding"]
    if cfg is not None:
        p = cfg.multires.patch_size
        expected = (cfg.dim, p * p * 3)
        if e_image.shape != expected:
            raise ModelError(f"patch_embedding shape {e_image.shape} != expected {expected}")
    return e_image


# --- forward pass -----------------------------------------------------------


@dataclass
class ForwardTrace:
    """Per-layer attention probabilities plus the final representations."""

    spatial_attention: list[list[np.ndarray]]  # [group][layer] -> (heads, M+1, M+1)
    temporal_attention: list[np.ndarray]  # [layer] -> (heads, T+1, T+1)
    group_features: np.ndarray  # (T, d)
    video_feature: np.ndarray  # (d,)
    grid_size: int
    metadata: dict


def _dropout(x: nm.Tensor, rate: float, rng: np.random.Generator | None) -> nm.Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return nm.mul(x, nm.Tensor(keep, dtype=x.data.dtype))


def _affine_ln(x: nm.Tensor, params: ModelParams, prefix: str) -> nm.Tensor:
    return nm.layernorm(x) * params[f"{prefix}.gamma"] + params[f"{prefix}.beta"]


def _attention(
    x: nm.Tensor,
    params: ModelParams,
    prefix: str,
    heads: int,
    attn_sink: list | None,
) -> nm.Tensor:
    s, d = x.shape
    dh = d // heads
    q = nm.matmul(x, params[f"{prefix}.wq"]) + params[f"{prefix}.bq"]
    k = nm.matmul(x, params[f"{prefix}.wk"]) + params[f"{prefix}.bk"]
    v = nm.matmul(x, params[f"{prefix}.wv"]) + params[f"{prefix}.bv"]
    qh = nm.transpose(nm.reshape(q, (s, heads, dh)), (1, 0, 2))
    kt = nm.transpose(nm.reshape(k, (s, heads, dh)), (1, 2, 0))
    vh = nm.transpose(nm.reshape(v, (s, heads, dh)), (1, 0, 2))
    logits = nm.mul(nm.matmul(qh, kt), 1.0 / math.sqrt(dh))
    probs = nm.softmax(logits)
    if attn_sink is not None:
        attn_sink.append(probs.data.astype(np.float64, copy=True))
    ctx = nm.matmul(probs, vh)
    merged = nm.reshape(nm.transpose(ctx, (1, 0, 2)), (s, d))
    return nm.matmul(merged, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def _mlp(x: nm.Tensor, params: ModelParams, prefix: str) -> nm.Tensor:
    hidden = nm.gelu(nm.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return nm.matmul(hidden, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def _encoder_block(
    x: nm.Tensor,
    params: ModelParams,
    prefix: str,
    heads: int,
    attn_sink: list | None,
    dropout: float = 0.0,
    drop_rng: np.random.Generator | None = None,
) -> nm.Tensor:
    attn = _attention(_affine_ln(x, params, f"{prefix}.ln1"), params, f"{prefix}.attn", heads, attn_sink)
    x = x + _dropout(attn, dropout, drop_rng)
    mlp = _mlp(_affine_ln(x, params, f"{prefix}.ln2"), params, f"{prefix}.mlp")
    return x + _dropout(mlp, dropout, drop_rng)


def embed_group(tubes: TubeBatch | np.ndarray, params: ModelParams, cfg: ModelConfig) -> nm.Tensor:
    """Project tubes to tokens, prepend the cls token, add positions: (M+1, d)."""
    if isinstance(tubes, TubeBatch):
        raw = tubes.tubes
    else:
        raw = np.asarray(tubes)
    if cfg.normalize_channels:
        raw = (raw - CHANNEL_MEAN) / CHANNEL_STD
    tokens_np = np.ascontiguousarray(raw.reshape(cfg.tokens_per_group, -1))
    if tokens_np.shape[1] != cfg.tube_dim:
        raise ModelError(f"tube dim {tokens_np.shape[1]} != expected {cfg.tube_dim}")
    x = nm.Tensor(tokens_np)
    tokens = nm.matmul(x, nm.transpose(params["embed.weight"])) + params["embed.bias"]
    cls_row = nm.reshape(params["spatial.cls"], (1, cfg.dim))
    return nm.concat([cls_row, tokens], axis=0) + params["spatial.pos"]


def spatial_encode(
    z0: nm.Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    attn_sink: list | None = None,
    drop_rng: np.random.Generator | None = None,
) -> nm.Tensor:
    """Run the K spatial blocks; return the normalized cls representation (1, d)."""
    if z0.shape[0] != cfg.tokens_per_group + 1:
        raise ModelError(f"spatial input length {z0.shape[0]} != M+1 = {cfg.tokens_per_group + 1}")
    x = z0
    for k in range(cfg.spatial_layers):
        x = _encoder_block(x, params, f"spatial.layers.{k}", cfg.heads, attn_sink, cfg.dropout, drop_rng)
    x = _affine_ln(x, params, "spatial.ln_out")
    return x[0:1, :]


def temporal_encode(
    group_feats: list[nm.Tensor],
    params: ModelParams,
    cfg: ModelConfig,
    attn_sink: list | None = None,
    drop_rng: np.random.Generator | None = None,
) -> nm.Tensor:
    """Aggregate per-group features over time; return the video feature (1, d)."""
    t = len(group_feats)
    if t < 1:
        raise ModelError("temporal encoder needs at least one group feature")
    if t > cfg.groups_per_clip:
        raise ModelError(
            f"clip has {t} groups but the temporal positional embedding holds "
            f"{cfg.groups_per_clip}; shorten the clip or retrain"
        )
    cls_row = nm.reshape(params["temporal.cls"], (1, cfg.dim))
    h = nm.concat([cls_row] + list(group_feats), axis=0)
    pos = params["temporal.pos"][0:t + 1, :]
    x = h + pos
    for q in range(cfg.temporal_layers):
        x = _encoder_block(x, params, f"temporal.layers.{q}", cfg.heads, attn_sink, cfg.dropout, drop_rng)
    x = _affine_ln(x, params, "temporal.ln_out")
    return x[0:1, :]


def quality_head(v: nm.Tensor, params: ModelParams) -> nm.Tensor:
    """MLP d -> head_hidden -> 1 on the video feature; returns a scalar tensor."""
    hidden = nm.gelu(nm.matmul(v, params["head.w1"]) + params["head.b1"])
    out = nm.matmul(hidden, params["head.w2"]) + params["head.b2"]
    return nm.reshape(out, ())


def forward_clip(
    tube_batches: list[TubeBatch],
    params: ModelParams,
    cfg: ModelConfig,
    retain_attention: bool = False,
    drop_rng: np.random.Generator | None = None,
) -> tuple[nm.Tensor, ForwardTrace | None]:
    """Score one clip given its per-group tube batches."""
    spatial_sinks: list[list[np.ndarray]] = []
    feats: list[nm.Tensor] = []
    for tb in tube_batches:
        sink: list | None = [] if retain_attention else None
        z0 = embed_group(tb, params, cfg)
        feats.append(spatial_encode(z0, params, cfg, sink, drop_rng))
        if retain_attention:
            spatial_sinks.append(sink)
    temporal_sink: list | None = [] if retain_attention else None
    v = temporal_encode(feats, params, cfg, temporal_sink, drop_rng)
    score = quality_head(v, params)
    trace = None
    if retain_attention:
        trace = ForwardTrace(
            spatial_attention=spatial_sinks,
            temporal_attention=temporal_sink,
            group_features=np.concatenate([f.data for f in feats], axis=0),
            video_feature=v.data.reshape(-1).copy(),
            grid_size=cfg.multires.grid_size,
            metadata={},
        )
    return score, trace


def score_clip(
    seq: FrameSequence,
    params: ModelParams,
    cfg: ModelConfig,
    mode: str = "mret",
    strategy: str = "uniform",
    frames: int | None = None,
    center_mode: str = "infer",
    center_rng: np.random.Generator | None = None,
    tube_seed: int | None = None,
    retain_attention: bool = False,
    drop_rng: np.random.Generator | None = None,
) -> tuple[nm.Tensor, ForwardTrace | None]:
    """Full pipeline returning the raw score tensor (tape-recorded when one
    is active): sample frames, build pyramids, cut tubes, run the encoders.
    """
    n_frames = frames if frames is not None else cfg.frames_per_clip
    clip = sample_frames(seq, n_frames, strategy)
    groups = group_frames(clip, cfg.multires.n_scales)
    pyramids = [build_pyramid(g, cfg.multires, mode) for g in groups]
    center = choose_center(pyramids[0], center_mode, center_rng)
    batches = []
    for gi, pyr in enumerate(pyramids):
        rng = derive_rng(tube_seed, "tube-sampler", gi) if tube_seed is not None else None
        batches.append(sample_tubes(pyr, center, cfg.multires, mode, rng))
    score, trace = forward_clip(batches, params, cfg, retain_attention, drop_rng)
    if trace is not None:
        trace.metadata = {
            "mode": mode,
            "strategy": strategy,
            "frames": n_frames,
            "groups": len(batches),
            "center": {"c": center.c, "long_axis": center.long_axis},
        }
    return score, trace


def predict(
    seq: FrameSequence,
    params: ModelParams,
    cfg: ModelConfig,
    mode: str = "mret",
    strategy: str = "uniform",
    frames: int | None = None,
    center_mode: str = "infer",
    center_rng: np.random.Generator | None = None,
    tube_seed: int | None = None,
    retain_attention: bool = False,
) -> tuple[float, ForwardTrace | None]:
    """Score a video; inference (center_mode="infer") is deterministic.

    The "random" sampler additionally needs ``tube_seed`` for its draws.
    """
    score, trace = score_clip(
        seq, params, cfg, mode=mode, strategy=strategy, frames=frames,
        center_mode=center_mode, center_rng=center_rng, tube_seed=tube_seed,
        retain_attention=retain_attention,
    )
    return score.item(), trace


# --- analytic counters -------------------------------------------------------


def count_params(cfg: ModelConfig) -> int:
    """Closed-form learnable scalar count; equals init_random's tensor sizes."""
    return sum(int(np.prod(shape)) for shape in param_shapes(cfg).values())


def _encoder_macs(seq_len: int, layers: int, d: int, mlp: int) -> int:
    qkvo = 4 * seq_len * d * d
    attn = 2 * seq_len * seq_len * d
    mlp_macs = 2 * seq_len * d * mlp
    return layers * (qkvo + attn + mlp_macs)


def _encoder_elementwise(seq_len: int, layers: int, d: int, mlp: int, heads: int) -> int:
    ln = 7 * seq_len * d * (2 * layers + 1)  # two per block plus the final LN, with affine
    softmax = 5 * heads * seq_len * seq_len * layers
    gelu = 10 * seq_len * mlp * layers
    bias_resid = layers * (4 * seq_len * d + seq_len * mlp + seq_len * d + 2 * seq_len * d)
    scale = heads * seq_len * seq_len * layers
    return ln + softmax + gelu + bias_resid + scale


def count_flops(cfg: ModelConfig, frames: int, ops_per_mac: int = 1) -> float:
    """Analytic forward cost for one clip of ``frames`` frames.

    Multiply-accumulates are counted as fused operations by default
    (``ops_per_mac=1``), the convention commonly used when reporting model
    cost; pass 2 to count the multiply and the add separately. Elementwise
    work (norms, softmax, GELU, biases, residuals) is added on top.
    """
    d, mlp, heads = cfg.dim, cfg.mlp_dim, cfg.heads
    m = cfg.tokens_per_group
    t = math.ceil(frames / cfg.multires.n_scales)
    s_spatial = m + 1
    s_temporal = t + 1

    macs = t * m * d * cfg.tube_dim  # tube embedding
    macs += t * _encoder_macs(s_spatial, cfg.spatial_layers, d, mlp)
    macs += _encoder_macs(s_temporal, cfg.temporal_layers, d, mlp)
    macs += d * cfg.head_hidden + cfg.head_hidden  # head MLP

    elementwise = t * _encoder_elementwise(s_spatial, cfg.spatial_layers, d, mlp, heads)
    elementwise += _encoder_elementwise(s_temporal, cfg.temporal_layers, d, mlp, heads)
    elementwise += t * (m * d + s_spatial * d)  # embed bias + positional add
    elementwise += s_temporal * d  # temporal positional add
    elementwise += 10 * cfg.head_hidden + cfg.head_hidden + 1  # head GELU + biases

    return float(ops_per_mac * macs + elementwise)
