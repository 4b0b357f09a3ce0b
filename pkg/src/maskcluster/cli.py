"""Command-line entry point: ``maskcluster <subcommand>``.

stdout carries only JSON; progress and diagnostics go to stderr.
Exit codes: 2 config error, 3 I/O error, 4 non-finite loss, 1 anything else.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .clustering import feature_map_to_masks
from .config import RunConfig
from .dataio import (
    MAGIC,
    default_palette,
    generate_dataset,
    read_checkpoint,
    read_dataset,
    write_checkpoint,
    write_dataset,
)
from .errors import ConfigError, MaskClusterError, NonFiniteLoss, ShapeMismatch
from .evaluation import evaluate, infer_segmentation
from .model import encode_image
from .training import fit, init_state

log = logging.getLogger("maskcluster")

ABLATIONS = {
    "no-clustering": "use_clustering",
    "no-momentum": "use_momentum_encoder",
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ConfigError("--seed: must be an unsigned 64-bit integer")
        cfg.train = dataclasses.replace(cfg.train, seed=seed)
        cfg.generator = dataclasses.replace(cfg.generator, seed=seed)
    return cfg


def _checkpoint_dir(cfg: RunConfig, override: str | None) -> Path:
    if override:
        return Path(override)
    if cfg.paths.checkpoint:
        return Path(cfg.paths.checkpoint)
    return Path(cfg.paths.out_dir) / "checkpoint"


def cmd_gen_data(cfg: RunConfig, args) -> int:
    spec = cfg.generator
    if args.num_samples is not None:
        spec = dataclasses.replace(spec, num_samples=args.num_samples)
    spec.validate()
    out = Path(args.out or cfg.paths.data_dir)
    samples = generate_dataset(spec)
    names = [c.name for c in default_palette(spec.num_classes)]
    write_dataset(samples, out, names)
    print(f"wrote {len(samples)} samples to {out}", file=sys.stderr)
    _emit({"num_samples": len(samples), "classes": names, "out_dir": str(out)})
    return 0


def _truncate_metrics(path: Path, step: int) -> None:
    if not path.exists():
        return
    kept = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] <= step]
    path.write_text("".join(line + "\n" for line in kept))


def cmd_train(cfg: RunConfig, args) -> int:
    tcfg = cfg.train
    for name in args.ablate or []:
        tcfg = dataclasses.replace(tcfg, **{ABLATIONS[name]: False})
    if args.steps is not None:
        tcfg = dataclasses.replace(tcfg, steps=args.steps)
    tcfg.validate()
    data_dir = Path(args.data or cfg.paths.data_dir)
    out = Path(args.out or cfg.paths.out_dir)
    samples, manifest = read_dataset(data_dir)
    if manifest["height"] != tcfg.image_size or manifest["channels"] != tcfg.channels:
        raise ConfigError(f"train.image_size/channels do not match dataset {manifest['height']}x{manifest['channels']}")
    out.mkdir(parents=True, exist_ok=True)
    resolved = dataclasses.replace(cfg, train=tcfg)
    (out / "config.json").write_text(resolved.to_json() + "\n")

    metrics_path = out / "metrics.jsonl"
    if args.resume:
        state = read_checkpoint(args.resume, tcfg)
        _truncate_metrics(metrics_path, state.step)
    else:
        state = init_state(tcfg)
        metrics_path.write_text("")
    final_dir = out / "checkpoint"
    last_good = {"state": state}

    with metrics_path.open("a") as mfh:
        def on_step(st, metrics):
            last_good["state"] = st
            mfh.write(json.dumps(metrics.to_dict(), sort_keys=True) + "\n")
            if tcfg.log_every and st.step % tcfg.log_every == 0:
                mfh.flush()
                print(f"step {st.step:6d}  loss {metrics.loss:.5f}  masks {metrics.num_masks}", file=sys.stderr)

        def on_checkpoint(st):
            write_checkpoint(st, out / f"checkpoint-{st.step:06d}")

        try:
            state, _ = fit(state, samples, tcfg, on_step=on_step, on_checkpoint=on_checkpoint)
        except NonFiniteLoss:
            write_checkpoint(last_good["state"], final_dir)
            raise
    write_checkpoint(state, final_dir)
    _emit({"step": state.step, "checkpoint": str(final_dir), "metrics": str(metrics_path)})
    return 0


def _require_checkpoint(path: Path):
    if not (path / "checkpoint.json").is_file():
        raise CliError(f"checkpoint not found: {path}", 3)
    return read_checkpoint(path)


def cmd_eval(cfg: RunConfig, args) -> int:
    state = _require_checkpoint(_checkpoint_dir(cfg, args.checkpoint))
    samples, manifest = read_dataset(Path(args.data or cfg.paths.data_dir))
    report = evaluate(state, samples, len(manifest["class_names"]), masks_from_gt=args.masks_from_gt)
    _emit(report.to_json_dict())
    return 0


def cmd_infer(cfg: RunConfig, args) -> int:
    state = _require_checkpoint(_checkpoint_dir(cfg, args.checkpoint))
    samples, manifest = read_dataset(Path(args.data or cfg.paths.data_dir))
    out = Path(args.out or Path(cfg.paths.out_dir) / "predictions")
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        pred = infer_segmentation(state, s.image).astype("<u2")
        H, W = pred.shape
        (out / f"{s.meta['name']}.pred").write_bytes(MAGIC + np.array([H, W], dtype="<u4").tobytes() + pred.tobytes())
    _emit({"num_samples": len(samples), "out_dir": str(out)})
    return 0


def cmd_cluster_masks(cfg: RunConfig, args) -> int:
    if args.random_features:
        state = init_state(cfg.train)
    else:
        state = _require_checkpoint(_checkpoint_dir(cfg, args.checkpoint))
    k = args.k if args.k is not None else cfg.cluster_masks_k
    if k < 1:
        raise ConfigError("--k: must be >= 1")
    samples, _ = read_dataset(Path(args.data or cfg.paths.data_dir))
    out = Path(args.out or Path(cfg.paths.out_dir) / "cluster_masks")
    out.mkdir(parents=True, exist_ok=True)
    counts = []
    for i, s in enumerate(samples):
        f = encode_image(state.student, s.image)
        H, W = s.gt_labels.shape
        masks = feature_map_to_masks(f, min(k, f.shape[0] * f.shape[1]), seed=cfg.train.seed + i,
                                     split_components=args.split_components, out_shape=(H, W))
        body = np.ascontiguousarray(masks, dtype=np.uint8).tobytes()
        header = MAGIC + np.array([len(masks), H, W], dtype="<u4").tobytes()
        (out / f"{s.meta['name']}.msk").write_bytes(header + body)
        counts.append(int(len(masks)))
    _emit({"num_samples": len(samples), "k": k, "masks_per_sample": counts, "out_dir": str(out)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="RunConfig JSON file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (u64)")

    p = argparse.ArgumentParser(prog="maskcluster", parents=[common], description=__doc__.splitlines()[0])
    p.add_argument("--dump-defaults", action="store_true", help="print the default config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--out")
    g.add_argument("--num-samples", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train and checkpoint")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint (JSON report on stdout)")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--masks-from-gt", action="store_true", help="classify ground-truth masks instead of fragments")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="write per-pixel cluster labels")
    i.add_argument("--checkpoint")
    i.add_argument("--data")
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("cluster-masks", parents=[common], help="k-means masks from encoder features")
    src = c.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--random-features", action="store_true")
    c.add_argument("--data")
    c.add_argument("--k", type=int)
    c.add_argument("--out")
    c.add_argument("--split-components", action="store_true")
    c.set_defaults(func=cmd_cluster_masks)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args)
        if args.dump_defaults:
            sys.stdout.write(RunConfig().to_json() + "\n")
            return 0
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 2
        return args.func(cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLoss as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return 4
    except (OSError, ShapeMismatch) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except MaskClusterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
