"""Command-line entry point: ``bdrrn <command> [flags]``.

Exit codes: 0 success, 1 usage, 2 input/validation, 3 internal.
"""

import argparse
import json
import logging
import os
import sys
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_training_state
from .config import LOG_LEVEL_ENV, RunConfig, load_run_config, save_run_config
from .dataset import build_dataset, derive_seed, entries_for_qp, load_eval_frames, load_manifest, make_toy_frames
from .errors import BdrrnError, ConfigError, DatasetError, FormatError, PartitionError
from .gradcheck import TOLERANCE, model_gradcheck
from .media_utils import (
    Plane8,
    YuvFrame,
    atomic_write_bytes,
    is_pgm_file,
    is_yuv_file,
    parse_dims,
    read_pgm,
    read_yuv420_frames,
    write_pgm,
    write_yuv420_frames,
)
from .metrics import BDTable, params_vs_bd, rd_report, read_bd_values, read_class_map, read_rd_file
from .model import Fusion, ModelConfig, Variant, build_model, param_count, param_table
from .partition import FramePartition, format_partition, mean_mask, parse_partition, random_quadtree, synth_degrade
from .training import enhance_plane, evaluate, format_scores, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_INTERNAL = 3

_installed_handlers: list[logging.Handler] = []


class _JSONFormatter(logging.Formatter):
    """One JSON object per line log formatter."""

    def format(self, record: logging.LogRecord) -> str:
        obj: dict[str, object] = {
            "time": self.formatTime(record, "%Y-%m-%dT%H:%M:%S"),
            "level": record.levelname,
            "module": record.module,
            "msg": record.getMessage(),
        }
        if record.exc_info:
            obj["exc"] = self.formatException(record.exc_info)
        return json.dumps(obj)


def _configure_logging(verbose: bool, log_file: Path | None) -> None:
    for handler in _installed_handlers:
        logging.root.removeHandler(handler)
        handler.close()
    _installed_handlers.clear()

    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(_JSONFormatter())
        logging.root.addHandler(handler)
        _installed_handlers.append(handler)
    level = "DEBUG" if verbose else os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    logging.root.setLevel(level if level in logging.getLevelNamesMapping() else "INFO")


class _UsageError(Exception):
    """Flag combination that argparse cannot express."""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------- #
# Shared helpers                                                           #
# ---------------------------------------------------------------------- #

def _read_partitions(path: Path) -> dict[int, FramePartition]:
    with open(path, "r", encoding="utf-8") as f:
        parsed = parse_partition(f)
    partitions: dict[int, FramePartition] = {}
    for p in parsed:
        if p.index in partitions:
            raise PartitionError("frame", f"{path} partitions frame {p.index} twice")
        partitions[p.index] = p
    return partitions


def _partition_at(partitions: dict[int, FramePartition], index: int, path: Path) -> FramePartition:
    if index not in partitions:
        raise PartitionError("frame", f"{path} has no partition for frame {index}")
    return partitions[index]


def _model_config(
    variant: str | None,
    fusion: str | None,
    channels: int | None,
    iters: str | None,
    base: ModelConfig | None = None,
) -> ModelConfig:
    cfg = ModelConfig.from_dict(base.to_dict()) if base is not None else ModelConfig()
    if variant is not None:
        cfg.variant = Variant(variant)
    if fusion is not None:
        if cfg.variant is Variant.DRRN:
            raise _UsageError("--fusion applies only to --variant bdrrn")
        cfg.fusion = Fusion(fusion)
    if channels is not None:
        cfg.channels = channels
    if iters is not None:
        try:
            cfg.main_iters, cfg.extra_iters, cfg.merge_iters = (int(v) for v in iters.split(","))
        except ValueError:
            raise _UsageError(f"--iters expects M,E,G, got {iters!r}") from None
    cfg.validate()
    return cfg


def _dims(text: str | None, flag: str) -> tuple[int, int]:
    if text is None:
        raise _UsageError(f"{flag} is required for raw YUV input")
    return parse_dims(text)


# ---------------------------------------------------------------------- #
# Commands                                                                 #
# ---------------------------------------------------------------------- #

def _check_decoded_path(path: Path) -> None:
    if not (is_yuv_file(path) or is_pgm_file(path)):
        raise FormatError(f"{path}: expected a .yuv, .raw or .pgm file")


def cmd_mask(args: argparse.Namespace) -> int:
    if args.frame < 0:
        raise ConfigError(f"--frame must be >= 0, got {args.frame}")
    decoded_path = Path(args.decoded)
    _check_decoded_path(decoded_path)
    if is_yuv_file(decoded_path):
        width, height = _dims(args.yuv_dims, "--yuv-dims")
        frames = read_yuv420_frames(decoded_path, width, height, args.frame + 1)
        if len(frames) <= args.frame:
            raise DatasetError(f"{decoded_path} has only {len(frames)} frame(s)")
        plane = frames[args.frame].luma
    else:
        plane = read_pgm(decoded_path)
    partition = _partition_at(_read_partitions(Path(args.partition)), args.frame, Path(args.partition))
    mask = mean_mask(plane, partition)
    pixels = np.clip(np.rint(mask.values * 255.0), 0, 255).astype(np.uint8)
    write_pgm(Plane8(width=mask.width, height=mask.height, pixels=pixels), args.out)
    print(f"mask {mask.width}x{mask.height}, {len(partition.cus)} CUs -> {args.out}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    width, height = parse_dims(args.dims)
    if args.qstep < 1:
        raise PartitionError("qstep", f"qstep must be >= 1, got {args.qstep}")
    if args.original:
        frames = read_yuv420_frames(args.original, width, height, args.frames)
    else:
        if not args.out_original:
            raise _UsageError("without --original, --out-original is required to store the toy originals")
        neutral = bytes([128]) * (width * height // 2)
        frames = [YuvFrame(luma=p, chroma=neutral) for p in make_toy_frames(args.seed, args.frames, width, height)]
        write_yuv420_frames(frames, args.out_original)

    decoded: list[YuvFrame] = []
    partitions: list[FramePartition] = []
    for k, frame in enumerate(frames):
        partition = random_quadtree(derive_seed(args.seed, "partition", k), width, height, args.split_prob)
        partition.index = k
        partitions.append(partition)
        decoded.append(YuvFrame(luma=synth_degrade(frame.luma, partition, args.qstep), chroma=frame.chroma))
    write_yuv420_frames(decoded, args.out_decoded)
    atomic_write_bytes(Path(args.out_partition), format_partition(partitions).encode("utf-8"))
    print(f"synth {len(decoded)} frame(s) {width}x{height} qstep {args.qstep}")
    return EXIT_OK


def cmd_dataset(args: argparse.Namespace) -> int:
    entries = load_manifest(args.manifest)
    data = build_dataset(entries, args.qp, args.seed, frames_per_clip=args.frames_per_clip)
    counts: dict[str, int] = {}
    for frame_id, _, _ in data.sources:
        counts[frame_id] = counts.get(frame_id, 0) + 1
    for frame_id, count in counts.items():
        print(f"{frame_id}\t{count}")
    print(f"total\t{len(data)}")
    if args.out:
        data.save_npz(args.out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run = load_run_config(args.config) if args.config else RunConfig()
    model_flags = (args.variant, args.fusion, args.channels, args.iters, args.recon_init_scale)
    if args.resume and any(flag is not None for flag in model_flags):
        raise _UsageError("--resume takes the model from the checkpoint; drop the model flags")
    model_cfg = _model_config(args.variant, args.fusion, args.channels, args.iters, base=run.model)
    if args.recon_init_scale is not None:
        model_cfg.recon_init_scale = args.recon_init_scale
    train_cfg = run.train
    for attr, value in (
        ("epochs", args.epochs),
        ("batch_size", args.batch),
        ("seed", args.seed),
        ("base_lr", args.lr),
        ("max_steps", args.max_steps),
        ("eval_every", args.eval_every),
    ):
        if value is not None:
            setattr(train_cfg, attr, value)
    train_cfg.checkpoint_path = Path(args.out)
    train_cfg.validate()
    qp = args.qp if args.qp is not None else run.qp
    if qp is None:
        raise _UsageError("--qp is required")

    data = build_dataset(load_manifest(args.manifest), qp, train_cfg.seed)
    eval_frames = None
    if args.eval_manifest:
        eval_frames = load_eval_frames(entries_for_qp(load_manifest(args.eval_manifest), qp))
    adam = None
    if args.resume:
        model, adam = load_training_state(args.resume)
        model_cfg = model.config
        logger.info("resuming %s at adam step %d", args.resume, adam.t if adam is not None else 0)
    else:
        model = build_model(model_cfg, train_cfg.seed)
    if args.save_config:
        save_run_config(RunConfig(model=model_cfg, train=train_cfg, qp=qp), args.save_config)
    _, log = train(model, data, train_cfg, eval_frames, adam=adam)
    steps_csv, evals_csv = log.write_csv(Path(args.out))
    first, last = log.steps[0].loss, log.steps[-1].loss
    print(f"trained {len(log.steps)} step(s): loss {first:.6g} -> {last:.6g}; logs {steps_csv}, {evals_csv}")
    return EXIT_OK


def cmd_enhance(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.ckpt)
    partition_path = Path(args.partition) if args.partition else None
    if not model.config.uses_mask and partition_path is not None:
        logger.warning("drrn checkpoint ignores --partition %s", partition_path)
        partition_path = None
    if model.config.uses_mask and partition_path is None:
        raise ConfigError("bdrrn checkpoint needs --partition")
    partitions = _read_partitions(partition_path) if partition_path else {}

    decoded_path = Path(args.decoded)
    _check_decoded_path(decoded_path)
    if not is_yuv_file(decoded_path):
        plane = read_pgm(decoded_path)
        part = _partition_at(partitions, 0, partition_path) if partition_path else None
        write_pgm(enhance_plane(model, plane, part), args.out)
        print(f"enhanced 1 frame {plane.width}x{plane.height} -> {args.out}")
        return EXIT_OK

    width, height = _dims(args.dims, "--dims")
    frames = read_yuv420_frames(decoded_path, width, height, args.frames)
    enhanced: list[YuvFrame] = []
    for k, frame in enumerate(frames):
        part = _partition_at(partitions, k, partition_path) if partition_path else None
        enhanced.append(YuvFrame(luma=enhance_plane(model, frame.luma, part), chroma=frame.chroma))
    write_yuv420_frames(enhanced, args.out)
    print(f"enhanced {len(enhanced)} frame(s) {width}x{height} -> {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.ckpt)
    entries = entries_for_qp(load_manifest(args.manifest), args.qp)
    if not entries:
        raise DatasetError(f"no manifest entries at qp {args.qp}")
    scores = evaluate(model, load_eval_frames(entries, args.frames))
    sys.stdout.write(format_scores(scores))
    return EXIT_OK


def cmd_params(args: argparse.Namespace) -> int:
    cfg = _model_config(args.variant, args.fusion, args.channels, args.iters)
    model = build_model(cfg, seed=0)
    for name, shape, count, lr_scale in param_table(model):
        dims = "x".join(str(d) for d in shape)
        print(f"{name:<12} {dims:<14} {count:>8}  lr x{lr_scale:g}")
    total = param_count(model)
    print(f"total {total}")
    if cfg.variant is Variant.BDRRN:
        baseline = ModelConfig.from_dict({**cfg.to_dict(), "variant": Variant.DRRN.value, "fusion": Fusion.ADD.value})
        print(f"Δ vs drrn: {total - param_count(build_model(baseline, seed=0))}")
    return EXIT_OK


def _method_params(specs: Sequence[str]) -> dict[str, int]:
    """``METHOD=VARIANT[:FUSION]`` -> parameter count of that model at default size."""
    params: dict[str, int] = {}
    for spec in specs:
        method, sep, model = spec.partition("=")
        variant, _, fusion = model.partition(":")
        if not (sep and method and variant):
            raise _UsageError(f"--params expects METHOD=VARIANT[:FUSION], got {spec!r}")
        try:
            cfg = _model_config(variant, fusion or None, None, None)
        except ValueError:
            raise _UsageError(f"--params: unknown variant or fusion in {spec!r}") from None
        params[method] = param_count(build_model(cfg, seed=0))
    return params


def cmd_bdrate(args: argparse.Namespace) -> int:
    if args.params and args.csv:
        raise _UsageError("--params prints its own view; drop --csv")
    classes = read_class_map(args.classes) if args.classes else None
    if args.table:
        table = BDTable.from_values(read_bd_values(args.table), classes)
    else:
        if not args.anchor or not args.test:
            raise _UsageError("either --table or both --anchor and --test are required")
        paths = [Path(args.anchor), *(Path(p) for p in args.test)]
        names = [p.stem for p in paths]
        if len(set(names)) != len(names):
            raise _UsageError(f"method names (file stems) must be distinct: {names}")
        curves = {name: read_rd_file(path) for name, path in zip(names, paths)}
        table = rd_report(curves, names[0], classes)
    if args.params:
        sys.stdout.write(params_vs_bd(table, _method_params(args.params)))
        return EXIT_OK
    sys.stdout.write(table.to_csv() if args.csv else table.to_text())
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    width, height = parse_dims(args.size)
    cfg = _model_config(args.variant, args.fusion, args.channels, args.iters)
    errors = model_gradcheck(cfg, height=height, width=width, seed=args.seed)
    for name, err in errors.items():
        print(f"{name:<12} {err:.3e}")
    worst = max(errors.values())
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst < TOLERANCE else EXIT_INTERNAL


# ---------------------------------------------------------------------- #
# Parser                                                                   #
# ---------------------------------------------------------------------- #

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--fusion", choices=[f.value for f in Fusion], help="bdrrn only")
    p.add_argument("--channels", type=int)
    p.add_argument("--iters", help="main,extra,merge iteration counts, e.g. 9,3,2")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="bdrrn", description="Block-information DRRN toolkit")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--log-file", type=Path, help="also write JSON log lines here")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="render a mean-mask frame as PGM")
    p.add_argument("--decoded", required=True, help="decoded frame (.pgm or .yuv)")
    p.add_argument("--partition", required=True, help="BPART file")
    p.add_argument("--out", required=True, help="output PGM")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--yuv-dims", help="WxH for .yuv input")
    p.set_defaults(handler=cmd_mask)

    p = sub.add_parser("synth", help="partition-aligned synthetic degradation")
    p.add_argument("--original", help="raw 4:2:0 input; omitted -> toy content")
    p.add_argument("--out-original", help="where to write toy originals")
    p.add_argument("--dims", required=True, help="WxH")
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--qstep", type=int, required=True)
    p.add_argument("--split-prob", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-decoded", required=True)
    p.add_argument("--out-partition", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("dataset", help="build the 64x64 patch set for one QP")
    p.add_argument("--manifest", required=True)
    p.add_argument("--qp", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames-per-clip", type=int, default=4)
    p.add_argument("--out", help="optional .npz archive of the patches")
    p.set_defaults(handler=cmd_dataset)

    p = sub.add_parser("train", help="train one model for one QP")
    p.add_argument("--manifest", required=True)
    _add_model_flags(p)
    p.add_argument("--qp", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--eval-manifest", help="held-out clips for periodic PSNR evaluation")
    p.add_argument("--recon-init-scale", type=float)
    p.add_argument("--config", help="JSON run config supplying defaults")
    p.add_argument("--save-config", help="write the effective run config as JSON")
    p.add_argument("--resume", help="continue from this checkpoint and its optimizer state")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("enhance", help="whole-frame enhancement")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--decoded", required=True, help=".yuv or .pgm")
    p.add_argument("--partition")
    p.add_argument("--out", required=True)
    p.add_argument("--dims", help="WxH for .yuv input")
    p.add_argument("--frames", type=int)
    p.set_defaults(handler=cmd_enhance)

    p = sub.add_parser("eval", help="per-frame PSNR of decoded vs enhanced")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--qp", type=int, required=True)
    p.add_argument("--frames", type=int, help="frames per clip")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("params", help="parameter count and per-layer table")
    _add_model_flags(p)
    p.set_defaults(handler=cmd_params)

    p = sub.add_parser("bdrate", help="Bjontegaard BD-rate table")
    p.add_argument("--anchor", help="RD file of the anchor method")
    p.add_argument("--test", nargs="+", help="RD files of the tested methods")
    p.add_argument("--table", help="precomputed '<sequence> <method> <bd>' values to tabulate")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--classes", help="'<sequence> <class>' lines adding per-class average rows")
    p.add_argument(
        "--params", nargs="+", metavar="METHOD=VARIANT[:FUSION]",
        help="print parameter count against average BD-rate for these methods",
    )
    p.set_defaults(handler=cmd_bdrate)

    p = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    _add_model_flags(p)
    p.set_defaults(channels=4)
    p.add_argument("--size", default="16x16", help="WxH")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, run one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    _configure_logging(args.verbose, args.log_file)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except _UsageError as exc:
        print(f"bdrrn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BdrrnError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"bdrrn {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:
        logger.exception("internal error in %s", args.command)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
