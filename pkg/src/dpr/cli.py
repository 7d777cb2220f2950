"""Command-line entry point: data generation, pretraining, BC, evaluation.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, data_root, load_config
from .data import SceneSpec, generate_dataset, load_manifest, load_sample


class UsageError(ValueError):
    pass


def _check_out(path: Path, overwrite: bool) -> Path:
    """Refuse to clobber an existing output unless --overwrite was given."""
    path = Path(path)
    if path.exists():
        if not overwrite:
            raise UsageError(f"output {path} exists; pass --overwrite to replace it")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    return path


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="YAML config file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpr",
        description="Depth-gated contrastive pretraining and proprioception-injected BC",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-pretrain-data", help="generate synthetic RGB-D samples")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--out", type=Path, required=True, help="output dataset directory")
    _add_common(p)

    p = sub.add_parser("pretrain", help="run contrastive pretraining")
    p.add_argument("--out", type=Path, required=True, help="output run directory")
    p.add_argument("--data", type=Path, default=None, help="dataset root (overrides config)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    _add_common(p)

    p = sub.add_parser("export-encoder", help="extract encoder weights from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("gen-demos", help="collect scripted-expert demonstrations")
    p.add_argument("--n", type=int, required=True, help="number of successful demos")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output demo archive")
    _add_common(p)

    p = sub.add_parser("bc-train", help="behavior-clone a policy from demos")
    p.add_argument("--demos", type=Path, required=True, help="demo archive")
    p.add_argument("--encoder", type=Path, default=None,
                   help="pretrained encoder checkpoint (omit for scratch baseline)")
    p.add_argument("--out", type=Path, required=True, help="output policy checkpoint")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a policy checkpoint in the toy environment")
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)

    p = sub.add_parser("inspect", help="dump pair masks and depth heatmaps for one sample")
    p.add_argument("--sample", required=True, help="sample id within the dataset")
    p.add_argument("--data", type=Path, default=None, help="dataset root")
    p.add_argument("--out", type=Path, required=True, help="output image directory")
    p.add_argument("--seed", type=int, default=0, help="view-geometry seed")
    _add_common(p)

    return parser


def _cmd_gen_pretrain_data(args, cfg: RunConfig) -> int:
    out = _check_out(args.out, args.overwrite)
    spec = SceneSpec(
        image_size=tuple(cfg.data.image_size),
        n_objects=cfg.data.n_objects,
        depth_range=tuple(cfg.data.depth_range),
        rng_seed=args.seed,
    )
    manifest = generate_dataset(out, args.count, args.seed, spec)
    print(json.dumps({"written": len(manifest), "root": str(out)}))
    return 0


def _cmd_pretrain(args, cfg: RunConfig) -> int:
    from .training import pretrain

    root = args.data if args.data is not None else data_root() / cfg.data.root
    manifest = load_manifest(root)
    if args.resume is None:
        _check_out(args.out, args.overwrite)
    ckpt_path, logs = pretrain(cfg, manifest, args.out, resume_from=args.resume)
    print(json.dumps({"checkpoint": str(ckpt_path), "epochs": len(logs),
                      "final_loss": logs[-1]["loss"]}))
    return 0


def _cmd_export_encoder(args, cfg: RunConfig) -> int:
    from .training import export_encoder

    out = _check_out(args.out, args.overwrite)
    export_encoder(args.checkpoint, out)
    print(json.dumps({"encoder": str(out)}))
    return 0


def _cmd_gen_demos(args, cfg: RunConfig) -> int:
    from .toyenv import collect_demos, save_demos

    out = _check_out(args.out, args.overwrite)
    demos = collect_demos(args.n, args.seed, cfg.env)
    save_demos(out, demos)
    print(json.dumps({"demos": len(demos), "path": str(out)}))
    return 0


def _cmd_bc_train(args, cfg: RunConfig) -> int:
    from .toyenv import load_demos
    from .training import bc_train

    out = _check_out(args.out, args.overwrite)
    demos = load_demos(args.demos)
    result = bc_train(cfg, demos, encoder_checkpoint=args.encoder, out_path=out)
    print(json.dumps({"policy": str(out), "best_success": result.best_success,
                      "final_success": result.final_success}))
    return 0


def _cmd_eval(args, cfg: RunConfig) -> int:
    from .toyenv import evaluate_policy
    from .training import load_policy, make_policy_fn

    policy = load_policy(args.policy, cfg)
    rate = evaluate_policy(make_policy_fn(policy), args.episodes, args.seed, cfg.env)
    print(json.dumps({"schema_version": 1, "success_rate": rate,
                      "episodes": args.episodes, "seed": args.seed}))
    return 0


def _cmd_inspect(args, cfg: RunConfig) -> int:
    from PIL import Image

    from .nets import Encoder
    from .pairs import build_pair_masks, depth_grid
    from .view_aug import make_view_pair

    root = args.data if args.data is not None else data_root() / cfg.data.root
    manifest = load_manifest(root)
    by_id = {sid: (r, d) for r, d, sid in manifest.entries}
    if args.sample not in by_id:
        raise UsageError(f"sample {args.sample!r} not in dataset {root}")
    rgb_path, depth_path = by_id[args.sample]
    sample = load_sample(rgb_path, depth_path, args.sample,
                         cfg.data.depth_lo, cfg.data.depth_hi)

    out = _check_out(args.out, args.overwrite)
    out.mkdir(parents=True)
    rng = np.random.default_rng(args.seed)
    res = cfg.pretrain.low_res
    pair = make_view_pair(sample, cfg.augment, rng, (res, res))
    grid_hw = Encoder(cfg.encoder).grid_hw((res, res))
    masks = build_pair_masks(
        pair.geom1, pair.geom2, pair.view1_depth, pair.view2_depth,
        grid_hw, sample.rgb.shape[:2],
        thresholds=cfg.pairs.thresholds,
        cross_product=cfg.pairs.cross_product,
        distance_norm=cfg.pairs.distance_norm,
    )

    def dump(name, arr):
        arr = np.asarray(arr, np.float64)
        span = arr.max() - arr.min()
        img = (255 * (arr - arr.min()) / (span if span > 0 else 1)).astype(np.uint8)
        Image.fromarray(img).save(out / f"{name}.png")

    dump("view1_rgb", pair.view1_rgb.mean(axis=2))
    dump("view2_rgb", pair.view2_rgb.mean(axis=2))
    dump("view1_depth", pair.view1_depth)
    dump("view2_depth", pair.view2_depth)
    dump("view1_depth_grid", depth_grid(pair.view1_depth, grid_hw))
    dump("view2_depth_grid", depth_grid(pair.view2_depth, grid_hw))
    for m in masks:
        tag = f"t{m.threshold_pair[0]}_tp{m.threshold_pair[1]}"
        dump(f"a_image_{tag}", m.a_image)
        dump(f"a_depth_{tag}", m.a_depth)
        dump(f"a_{tag}", m.a)
        dump(f"valid_{tag}", m.valid)
    print(json.dumps({"out": str(out), "masks": len(masks)}))
    return 0


_COMMANDS = {
    "gen-pretrain-data": _cmd_gen_pretrain_data,
    "pretrain": _cmd_pretrain,
    "export-encoder": _cmd_export_encoder,
    "gen-demos": _cmd_gen_demos,
    "bc-train": _cmd_bc_train,
    "eval": _cmd_eval,
    "inspect": _cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        return _COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
