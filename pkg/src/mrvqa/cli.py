"""Command-line entry point: train, score, eval, inspect, counts.

Every command exits 0 on success and prints one JSON document to stdout;
failures print a single-line {"error": ...} to stderr and exit 1 (2 for
training divergence). All randomness flows from one seed through named
streams recorded in the lock file.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import (
    ConfigError,
    RunConfig,
    load_run_config,
    run_config_from_dict,
    run_config_to_dict,
)
from .metrics import UndefinedCorrelationError, plcc, srcc
from .model import (
    ModelError,
    count_flops,
    count_params,
    init_central_frame,
    init_random,
    load_image_embedding,
    predict,
)
from .multires import GeometryError, SAMPLER_MODES, build_pyramid, choose_center, geometry_report, group_frames, patch_centers
from .numerics import NumericsError, SerializationError
from .rollout import RolloutError, spatial_heatmap, temporal_profile, write_overlay_png, write_pgm, write_temporal_csv
from .seeding import stream_key
from .train import (
    DivergenceError,
    TrainError,
    denormalize_score,
    load_checkpoint,
    save_checkpoint,
    train_loop,
    write_history_csv,
)
from .videoio import VideoIOError, load_frames, load_manifest, sample_frames

_USER_ERRORS = (
    ConfigError,
    VideoIOError,
    ModelError,
    TrainError,
    GeometryError,
    RolloutError,
    SerializationError,
    NumericsError,
    UndefinedCorrelationError,
    ValueError,
)

STREAM_NAMES = ("init", "data-shuffle", "center-draw", "dropout", "synth", "tube-sampler")


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


def _fail(message: str) -> None:
    sys.stderr.write(json.dumps({"error": message}) + "\n")


def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_run_config(args.config)
    else:
        cfg = run_config_from_dict({})
    train = cfg.train
    if getattr(args, "seed", None) is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if getattr(args, "deterministic", False):
        train = dataclasses.replace(train, deterministic=True)
    if getattr(args, "mode", None):
        train = dataclasses.replace(train, mode=args.mode)
    if getattr(args, "strategy", None):
        train = dataclasses.replace(train, strategy=args.strategy)
    return RunConfig(model=cfg.model, train=train, data=cfg.data)


def _resolve_path(base_file: str | None, target: str) -> Path:
    p = Path(target)
    if not p.is_absolute() and base_file:
        p = Path(base_file).parent / p
    return p


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    manifest_path = cfg.data.get("train_manifest")
    if not manifest_path:
        raise ConfigError("config data section needs 'train_manifest'")
    dataset = load_manifest(_resolve_path(args.config, manifest_path))
    val = None
    if cfg.data.get("val_manifest"):
        val = load_manifest(_resolve_path(args.config, cfg.data["val_manifest"]))

    params = init_random(cfg.model, cfg.train.seed)
    if cfg.data.get("image_embedding"):
        e_image = load_image_embedding(_resolve_path(args.config, cfg.data["image_embedding"]), cfg.model)
        e_full = init_central_frame(e_image, cfg.model.multires.n_scales)
        params.tensors["embed.weight"].data[...] = e_full.astype(params["embed.weight"].data.dtype)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = run_config_to_dict(cfg)
    lock["streams"] = {name: stream_key(name) for name in STREAM_NAMES}
    (out_dir / "config.lock.json").write_text(json.dumps(lock, sort_keys=True, indent=2) + "\n")

    run_doc = run_config_to_dict(cfg)
    try:
        result = train_loop(dataset, cfg.model, cfg.train, val=val, params=params)
    except DivergenceError as exc:
        result = exc.result
        save_checkpoint(out_dir / "ckpt_final", result.final_params, cfg.train,
                        result.history, result.opt_state, run_doc)
        write_history_csv(out_dir / "history.csv", result.history)
        _fail(f"training diverged: {exc}")
        return 2

    save_checkpoint(out_dir / "ckpt_final", result.final_params, cfg.train,
                    result.history, result.opt_state, run_doc)
    from .model import ModelParams

    best = ModelParams.from_arrays(cfg.model, result.best_params_arrays)
    save_checkpoint(out_dir / "ckpt_best", best, cfg.train, result.history, None, run_doc)
    write_history_csv(out_dir / "history.csv", result.history)
    last = result.history[-1] if result.history else {}
    _emit({
        "steps": len(result.history),
        "final_loss": last.get("train_loss"),
        "best_epoch": result.best_epoch,
        "val_srcc": last.get("val_srcc"),
        "out": str(out_dir),
    })
    return 0


def _score_one(ckpt, seq, args) -> tuple[float, object]:
    mode = args.mode or ckpt.train_cfg.mode
    strategy = args.strategy or ckpt.train_cfg.strategy
    tube_seed = None
    if mode == "random":
        tube_seed = args.seed if args.seed is not None else ckpt.train_cfg.seed
    raw, trace = predict(
        seq, ckpt.params, ckpt.model_cfg, mode=mode, strategy=strategy,
        frames=args.frames, tube_seed=tube_seed,
        retain_attention=bool(getattr(args, "trace", None)),
    )
    return denormalize_score(ckpt.train_cfg, raw, seq.mos_range), trace


def _write_trace_artifacts(trace, seq, ckpt, args, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    profile = temporal_profile(trace)
    write_temporal_csv(out_dir / "temporal.csv", profile)
    mcfg = ckpt.model_cfg
    n_frames = args.frames if args.frames is not None else mcfg.frames_per_clip
    mode = trace.metadata.get("mode", "mret")
    clip = sample_frames(seq, n_frames, trace.metadata.get("strategy", "uniform"))
    groups = group_frames(clip, mcfg.multires.n_scales)
    for gi in range(len(trace.spatial_attention)):
        heat = spatial_heatmap(trace, gi)
        write_pgm(out_dir / f"spatial_{gi:03d}.pgm", heat)
        if mode == "mret":
            pyr = build_pyramid(groups[gi], mcfg.multires, mode)
            center = choose_center(pyr, "infer")
            n = mcfg.multires.n_scales
            centers = patch_centers(mcfg.multires, center, n)
            write_overlay_png(out_dir / f"overlay_{gi:03d}.png", pyr.frames[n - 1], heat,
                              centers, mcfg.multires.patch_size)
    (out_dir / "metadata.json").write_text(json.dumps(trace.metadata, sort_keys=True, indent=2) + "\n")


def cmd_score(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    seq = load_frames(args.video)
    score, trace = _score_one(ckpt, seq, args)
    if getattr(args, "trace", None):
        _write_trace_artifacts(trace, seq, ckpt, args, Path(args.trace))
    _emit({"score": score})
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    videos = load_manifest(args.manifest)
    labeled = [v for v in videos if v.mos is not None]
    if len(labeled) < 2:
        raise ConfigError(f"need >= 2 labeled videos to evaluate, manifest has {len(labeled)}")
    args.trace = None
    preds, labels = [], []
    for seq in labeled:
        score, _ = _score_one(ckpt, seq, args)
        preds.append(score)
        labels.append(seq.mos)
    _emit({"srcc": srcc(preds, labels), "plcc": plcc(preds, labels), "n": len(labeled)})
    return 0


def cmd_inspect(args) -> int:
    cfg = _resolve_config(args)
    seq = load_frames(args.video)
    mode = args.mode or "mret"
    n_frames = args.frames if args.frames is not None else cfg.model.frames_per_clip
    clip = sample_frames(seq, n_frames, args.strategy or "uniform")
    groups = group_frames(clip, cfg.multires.n_scales)
    if not 0 <= args.group < len(groups):
        raise GeometryError(f"group index {args.group} outside 0..{len(groups) - 1}")
    pyr = build_pyramid(groups[args.group], cfg.multires, mode)
    center = choose_center(pyr, "infer")
    report = geometry_report(pyr, center, cfg.multires, mode)
    report["group_index"] = args.group
    report["n_groups"] = len(groups)
    _emit(report)
    return 0


def cmd_counts(args) -> int:
    cfg = _resolve_config(args)
    frames = args.frames if args.frames is not None else cfg.model.frames_per_clip
    _emit({
        "params": count_params(cfg.model),
        "gflops": count_flops(cfg.model, frames) / 1e9,
    })
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--deterministic", action="store_true", help="forbid nondeterministic execution")
    p.add_argument("--frames", type=int, default=None, help="frames per clip override")
    p.add_argument("--mode", choices=SAMPLER_MODES, default=None, help="patch sampler mode")
    p.add_argument("--strategy", choices=("uniform", "front", "center"), default=None,
                   help="frame sampling strategy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrvqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config + manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score one video with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--trace", default=None, help="directory for rollout artifacts")
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="dump patch-sampling geometry for one group")
    p.add_argument("--config", default=None)
    p.add_argument("--video", required=True)
    p.add_argument("--group", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("counts", help="analytic parameter and FLOP counts")
    p.add_argument("--config", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_counts)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        _fail(str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
