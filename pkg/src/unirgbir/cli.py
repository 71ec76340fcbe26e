"""``unirgbir`` command line: data generation, pretraining, adapter training,
evaluation, ablation sweeps, feature export and self-checks.

Every command that produces output writes ``resolved_config.txt`` beside it.
The snapshot holds the full model/training configuration plus ``run.*`` keys
recording the command and its arguments, and ``unirgbir rerun`` replays it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .core import (
    RUN_PREFIX,
    CheckpointError,
    ModelConfig,
    TrainConfig,
    dump_config_text,
    load_checkpoint,
    load_config_file,
    load_run_keys,
    save_checkpoint,
    write_config_file,
)
from .data import CLASS_NAMES, DatasetError, generate, read_dataset, read_sample, split, write_dataset

log = logging.getLogger("unirgbir")

SNAPSHOT = "resolved_config.txt"
TRAIN_MODES = ("full", "mfp_add", "baseline", "finetune_all")
ABLATION_AXES = ("components", "stages", "attention", "paradigm")
PRETRAIN_LR = 1e-3
# fields a pretrained backbone and the adapter config must agree on
VIT_FIELDS = ("dim", "vit_blocks", "vit_heads", "mlp_ratio", "n_stages", "patch_size", "image_size", "head_classes")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _parse_hw(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H or HxW, got {text!r}") from None
    if len(dims) == 1:
        dims *= 2
    if len(dims) != 2 or any(d <= 0 or d % 32 for d in dims):
        raise argparse.ArgumentTypeError(f"image size {text!r} must be positive multiples of 32")
    return dims[0], dims[1]


def _parse_stages(text: str) -> tuple[int, ...]:
    try:
        stages = tuple(sorted({int(s) for s in text.split(",") if s.strip()}))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated stage indices, got {text!r}") from None
    if not stages:
        raise argparse.ArgumentTypeError("at least one SFI stage is required")
    return stages


def _require_dir(path: Path, what: str, marker: str | None = None) -> Path:
    if not path.is_dir() or (marker and not (path / marker).exists()):
        raise UsageError(f"{what} {path} does not exist" + (f" or has no {marker}" if marker else ""))
    return path


def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    if getattr(args, "config", None):
        if not Path(args.config).is_file():
            raise UsageError(f"config file {args.config} does not exist")
        model, train = load_config_file(args.config)
    else:
        model, train = ModelConfig(), TrainConfig()
    overrides = {k: getattr(args, k) for k in ("steps", "lr", "seed", "batch_size", "eval_interval")
                 if getattr(args, k, None) is not None}
    if overrides:
        train = train.replace(**overrides)
    return model, train


def _load_split(data_dir: Path, model: ModelConfig):
    dataset = read_dataset(data_dir)
    if not dataset:
        raise DatasetError(f"dataset {data_dir} is empty")
    h, w = dataset[0].pair.height, dataset[0].pair.width
    if (h, w) != (model.image_size, model.image_size):
        raise UsageError(f"dataset images are {h}x{w} but image_size = {model.image_size}")
    return split(dataset)


def _snapshot(out: Path, model: ModelConfig | None, train: TrainConfig | None, run: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    run = {k: v for k, v in run.items() if v is not None}
    if model is None:
        (out / SNAPSHOT).write_text(dump_config_text({f"{RUN_PREFIX}{k}": v for k, v in run.items()}),
                                    encoding="utf-8")
    else:
        write_config_file(out / SNAPSHOT, model, train, run)


def _abs(p) -> str | None:
    return None if p is None else str(Path(p).resolve())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    h, w = args.hw
    out = Path(args.out)
    dataset = generate(args.seed, args.n, h, w, args.noise_sigma)
    write_dataset(dataset, out)
    _snapshot(out, None, None,
              {"command": "gen", "seed": args.seed, "n": args.n, "hw": f"{h}x{w}",
               "noise_sigma": args.noise_sigma})
    print(f"wrote {len(dataset)} samples ({h}x{w}) to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .backbone import make_frozen_backbone

    model_cfg, train_cfg = _configs(args)
    data = _require_dir(Path(args.data), "dataset", "index.txt")
    out = Path(args.out)
    train_set, _ = _load_split(data, model_cfg)
    _snapshot(out, model_cfg, train_cfg, {"command": "pretrain", "data": _abs(data)})
    model, result = make_frozen_backbone(model_cfg, train_set, train_cfg, log_path=out / "metrics.jsonl")
    save_checkpoint(model, out / "backbone", seed=train_cfg.seed, extra={"role": "frozen backbone"})
    print(f"pretrained {train_cfg.steps} steps, final loss {result.losses[-1]:.4f}; "
          f"frozen backbone in {out / 'backbone'}")
    return 0


def _check_train_flags(args) -> None:
    adapter_only = args.mode in ("mfp_add", "baseline")
    if adapter_only and args.sfi_stages is not None:
        raise UsageError(f"--sfi-stages has no effect with --mode {args.mode}")
    if adapter_only and args.attention is not None:
        raise UsageError(f"--attention has no effect with --mode {args.mode}")


def _mode_paradigm(mode: str) -> tuple[str, str]:
    return ("full", "full") if mode == "finetune_all" else (mode, "adapter")


def train_run(model_cfg: ModelConfig, train_cfg: TrainConfig, data: str, backbone: str,
              mode: str, out: str) -> dict:
    """One training run writing checkpoint, metric log and snapshot under ``out``."""
    from .evaluate import evaluate_dataset
    from .tuning import run_training

    out = Path(out)
    _snapshot(out, model_cfg, train_cfg, {"command": "train", "data": data, "backbone": backbone, "mode": mode})
    pretrained = load_checkpoint(backbone)
    mismatched = [f for f in VIT_FIELDS if getattr(pretrained.config, f) != getattr(model_cfg, f)]
    if mismatched:
        raise UsageError(f"backbone {backbone} differs from the config in {', '.join(mismatched)}")
    train_set, val_set = _load_split(Path(data), model_cfg)
    model_mode, paradigm = _mode_paradigm(mode)
    t0 = time.time()
    result = run_training(model_cfg, train_set, val_set, mode=model_mode, paradigm=paradigm,
                          train_config=train_cfg, pretrained=pretrained, log_path=out / "metrics.jsonl")
    save_checkpoint(result.model, out / "checkpoint", seed=train_cfg.seed, extra={"train_mode": mode})
    scores = evaluate_dataset(result.model, val_set)
    summary = {
        "mode": mode,
        "trainable": result.partition.n_trainable,
        "total": result.partition.n_total,
        "final_loss": result.losses[-1] if result.losses else None,
        "miou": scores["miou"],
        "macc": scores["macc"],
        "iou": [None if v != v else float(v) for v in scores["iou"]],
        "seconds": time.time() - t0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    return summary


def cmd_train(args) -> int:
    _check_train_flags(args)
    model_cfg, train_cfg = _configs(args)
    if args.sfi_stages is not None:
        model_cfg = model_cfg.replace(sfi_stages=args.sfi_stages)
    if args.attention is not None:
        model_cfg = model_cfg.replace(attention_kind=args.attention)
    data = _require_dir(Path(args.data), "dataset", "index.txt")
    backbone = _require_dir(Path(args.backbone), "backbone checkpoint", "manifest.json")
    summary = train_run(model_cfg, train_cfg, _abs(data), _abs(backbone), args.mode, args.out)
    print(f"{args.mode}: final loss {summary['final_loss']:.4f}  mIoU {summary['miou']:.4f}  "
          f"mAcc {summary['macc']:.4f}  trainable {summary['trainable']:,}/{summary['total']:,}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate_dataset, format_scores

    ckpt = _require_dir(Path(args.checkpoint), "checkpoint", "manifest.json")
    data = _require_dir(Path(args.data), "dataset", "index.txt")
    model = load_checkpoint(ckpt)
    train_set, val_set = _load_split(data, model.config)
    subset = {"val": val_set, "train": train_set, "all": train_set + val_set}[args.split]
    scores = evaluate_dataset(model, subset, rgb_only=args.rgb_only)
    print(format_scores(scores, CLASS_NAMES))
    if args.out:
        out = Path(args.out)
        _snapshot(out, model.config, None, {"command": "eval", "checkpoint": _abs(ckpt), "data": _abs(data),
                                            "split": args.split, "rgb_only": args.rgb_only})
        (out / "scores.txt").write_text(format_scores(scores, CLASS_NAMES) + "\n", encoding="utf-8")
    return 0


def ablation_rows(axis: str, model_cfg: ModelConfig) -> list[tuple[str, ModelConfig, str]]:
    """(row name, model config, train mode) for each row of an ablation table."""
    if axis == "components":
        return [("baseline", model_cfg, "baseline"), ("+MFP", model_cfg, "mfp_add"),
                ("+MFP+SFI", model_cfg, "full")]
    if axis == "stages":
        return [("stages " + ",".join(map(str, s)), model_cfg.replace(sfi_stages=s), "full")
                for s in ((1,), (1, 2), (1, 2, 3), (1, 2, 3, 4))]
    if axis == "attention":
        return [(kind, model_cfg.replace(attention_kind=kind), "full") for kind in ("global", "deformable")]
    if axis == "paradigm":
        return [("adapter", model_cfg, "full"), ("finetune_all", model_cfg, "finetune_all")]
    raise UsageError(f"unknown ablation axis {axis!r}")


def _row_dir(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_") or "row"


def format_ablation(axis: str, rows: list[tuple[str, dict]]) -> str:
    head = f"{'row':<16} {'trainable':>12} {'fraction':>9} {'loss':>8} {'mIoU':>8} {'mAcc':>8} {'IoU ir':>8}"
    lines = [f"# ablation over {axis}", head]
    for name, s in rows:
        ir = s["iou"][2]
        lines.append(f"{name:<16} {s['trainable']:>12,} {s['trainable'] / s['total']:>9.4f} "
                     f"{s['final_loss']:>8.4f} {s['miou']:>8.4f} {s['macc']:>8.4f} "
                     f"{'n/a' if ir is None else f'{ir:.4f}':>8}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = _configs(args)
    data = _require_dir(Path(args.data), "dataset", "index.txt")
    out = Path(args.out)
    if args.parallel < 1:
        raise UsageError("--parallel must be at least 1")
    if args.backbone:
        backbone = _require_dir(Path(args.backbone), "backbone checkpoint", "manifest.json")
    else:
        from .backbone import make_frozen_backbone

        pre_cfg = train_cfg.replace(lr=PRETRAIN_LR)
        train_set, _ = _load_split(data, model_cfg)
        _snapshot(out / "pretrain", model_cfg, pre_cfg, {"command": "pretrain", "data": _abs(data)})
        model, _ = make_frozen_backbone(model_cfg, train_set, pre_cfg, log_path=out / "pretrain" / "metrics.jsonl")
        backbone = out / "pretrain" / "backbone"
        save_checkpoint(model, backbone, seed=pre_cfg.seed)
    rows = ablation_rows(args.axis, model_cfg)
    jobs = [(cfg, train_cfg, _abs(data), _abs(backbone), mode, str(out / _row_dir(name)))
            for name, cfg, mode in rows]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            summaries = list(pool.map(train_run, *zip(*jobs)))
    else:
        summaries = [train_run(*job) for job in jobs]
    table = format_ablation(args.axis, [(name, s) for (name, _, _), s in zip(rows, summaries)])
    _snapshot(out, model_cfg, train_cfg, {"command": "ablate", "data": _abs(data), "axis": args.axis,
                                          "backbone": _abs(backbone) if args.backbone else None})
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_export(args) -> int:
    from .evaluate import export_features

    ckpt = _require_dir(Path(args.checkpoint), "checkpoint", "manifest.json")
    sample_path = Path(args.sample)
    name = sample_path.name
    if not (name.startswith("rgb_") and name.endswith(".png")):
        raise UsageError(f"--sample must point at an rgb_XXXX.png file, got {sample_path}")
    sample = read_sample(sample_path.parent, name[4:-4])
    model = load_checkpoint(ckpt)
    out = Path(args.out)
    entries = export_features(model, sample.pair, out)
    _snapshot(out, model.config, None, {"command": "export", "checkpoint": _abs(ckpt), "sample": _abs(sample_path)})
    print(f"exported {len(entries)} arrays to {out}")
    return 0


def cmd_check(args) -> int:
    from .checks import SUITES, run_suite

    suites = list(SUITES) if args.suite == "all" else [args.suite]
    failed = 0
    lines = []
    for suite in suites:
        for res in run_suite(suite):
            lines.append(res.line())
            print(res.line(), flush=True)
            failed += not res.passed
    print(f"{len(lines) - failed}/{len(lines)} checks passed")
    if args.out:
        out = Path(args.out)
        _snapshot(out, ModelConfig(), None, {"command": "check", "suite": args.suite})
        (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 1 if failed else 0


def cmd_rerun(args) -> int:
    """Replay a command from its snapshot; the snapshot doubles as the config file."""
    snap = Path(args.snapshot)
    if not snap.is_file():
        raise UsageError(f"snapshot {snap} does not exist")
    run = load_run_keys(snap)
    command = run.pop("command", None)
    needed = {"gen": ("seed", "n", "hw", "noise_sigma"), "pretrain": ("data",),
              "train": ("data", "backbone", "mode"), "ablate": ("data", "axis")}
    if command not in needed:
        raise UsageError(f"snapshot {snap} records command {command!r}, which cannot be replayed")
    missing = [k for k in needed[command] if k not in run]
    if missing:
        raise UsageError(f"snapshot {snap} lacks run.{', run.'.join(missing)}")
    argv = [command]
    if command == "gen":
        argv += ["--seed", run["seed"], "--n", run["n"], "--hw", run["hw"], "--noise-sigma", run["noise_sigma"]]
    elif command in ("pretrain", "train"):
        argv += ["--config", str(snap), "--data", run["data"]]
        if command == "train":
            argv += ["--backbone", run["backbone"], "--mode", run["mode"]]
    elif command == "ablate":
        argv += ["--config", str(snap), "--data", run["data"], "--axis", run["axis"]]
        if "backbone" in run:
            argv += ["--backbone", run["backbone"]]
    argv += ["--out", args.out]
    if command == "pretrain":
        # pretraining lr is a flag, so the snapshot's lr must be passed back explicitly
        argv += ["--lr", repr(load_config_file(snap)[1].lr)]
    return main(argv)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _train_overrides(p: argparse.ArgumentParser, lr_default: float | None = None) -> None:
    p.add_argument("--steps", type=int, help="override the configured number of steps")
    p.add_argument("--lr", type=float, default=lr_default,
                   help="learning rate" + (f" (default {lr_default:g})" if lr_default else " override"))
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--eval-interval", dest="eval_interval", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unirgbir", description=__doc__.split("\n\n")[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic RGB-IR segmentation dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--hw", type=_parse_hw, default=(128, 128), help="H or HxW, multiples of 32")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.02)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="train ViT + head on RGB alone, then freeze the backbone")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _train_overrides(p, lr_default=PRETRAIN_LR)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train adapters (or everything) on top of a frozen backbone")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--backbone", required=True, help="checkpoint written by 'pretrain'")
    p.add_argument("--mode", choices=TRAIN_MODES, default="full")
    p.add_argument("--sfi-stages", dest="sfi_stages", type=_parse_stages, help="e.g. 1,2,3")
    p.add_argument("--attention", choices=("deformable", "global"))
    p.add_argument("--out", required=True)
    _train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mIoU / mAcc of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--rgb-only", dest="rgb_only", action="store_true", help="frozen backbone + head only")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train one row per setting of an axis and tabulate")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", choices=ABLATION_AXES, required=True)
    p.add_argument("--backbone", help="reuse a pretrained backbone instead of pretraining first")
    p.add_argument("--parallel", type=int, default=1, help="rows trained concurrently (separate processes)")
    p.add_argument("--out", required=True)
    _train_overrides(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="dump intermediate features for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="path to a dataset's rgb_XXXX.png")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("check", help="run gradient, oracle or invariant self-checks")
    p.add_argument("--suite", choices=("grad", "oracle", "invariants", "all"), default="all")
    p.add_argument("--out")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("rerun", help="replay a command from its resolved_config.txt")
    p.add_argument("snapshot")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, NotImplementedError, DatasetError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
