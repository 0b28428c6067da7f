"""Command line entry point: synth, init, train, enhance, eval, export."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from ..enhancer import EnhancerConfig
from ..initgeom import EmptyPruneError, PruneConfig
from .dataset import load_dataset, save_dataset
from .handshake import enhance_bundle
from .io import write_ply, write_png
from .synth import SceneSpec, default_street_scene, spec_to_dict, synth_scene
from .trainer import (NumericalError, TrainConfig, evaluate_split, initialize_graph, load_checkpoint,
                      render_model, save_checkpoint, train, write_logs, write_report)
from ..splat.gaussians import GaussianSet

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("urbangs")


class ConfigError(ValueError):
    pass


def load_structured(path) -> dict:
    """Read a YAML or JSON mapping."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return data


def load_configs(path=None, env=None) -> tuple[TrainConfig, EnhancerConfig, PruneConfig]:
    """Parse {train, enhancer, prune} sections and apply URBANGS_SEED."""
    env = os.environ if env is None else env
    data = load_structured(path) if path else {}
    unknown = set(data) - {"train", "enhancer", "prune"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    train_d = dict(data.get("train") or {})
    if "URBANGS_SEED" in env:
        try:
            train_d["seed"] = int(env["URBANGS_SEED"])
        except ValueError as e:
            raise ConfigError(f"URBANGS_SEED must be an integer, got {env['URBANGS_SEED']!r}") from e
    try:
        return (TrainConfig.from_dict(train_d), EnhancerConfig.from_dict(dict(data.get("enhancer") or {})),
                PruneConfig.from_dict(dict(data.get("prune") or {})))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _apply_threads(env=None) -> None:
    env = os.environ if env is None else env
    n = env.get("URBANGS_THREADS")
    if not n:
        return
    try:
        k = int(n)
    except ValueError as e:
        raise ConfigError(f"URBANGS_THREADS must be an integer, got {n!r}") from e
    import numba
    numba.set_num_threads(max(1, min(k, numba.config.NUMBA_NUM_THREADS)))


def cmd_synth(args) -> int:
    if args.spec:
        try:
            spec = SceneSpec.from_dict(load_structured(args.spec))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
    else:
        spec = default_street_scene()
    seed = int(os.environ.get("URBANGS_SEED", args.seed))
    ds = synth_scene(spec, seed)
    root = save_dataset(ds, args.out)
    (root / "scene_spec.json").write_text(json.dumps(spec_to_dict(spec), indent=1))
    print(f"wrote {len(ds.views)} views to {root}")
    return EXIT_OK


def _init(args, cfg, prune):
    ds = load_dataset(args.dataset)
    model, report = initialize_graph(ds, cfg, prune)
    return ds, model, report


def cmd_init(args) -> int:
    cfg, _, prune = load_configs(args.config)
    _, model, report = _init(args, cfg, prune)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = GaussianSet.concat(model.graph.nodes())
    write_ply(out / "gaussians.ply", g)
    save_checkpoint(model, out / "init.npz", {"train_config": cfg.as_dict()})
    write_report(report.as_dict(), out / "init_report.json")
    print(f"initialized {report.final_count} static/road Gaussians from {report.initial_count} points")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, enh, prune = load_configs(args.config)
    ds = load_dataset(args.dataset)
    if args.init:
        model, _ = load_checkpoint(args.init)
    else:
        model, _ = initialize_graph(ds, cfg, prune)
    model, records = train(ds, model, cfg, enh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.npz", {"train_config": cfg.as_dict()})
    write_logs(records, out / "logs.jsonl")
    print(f"trained {cfg.total_iters} iterations; checkpoint in {out}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    res = enhance_bundle(args.bundle)
    print(f"enhance: {res.steps} steps, {res.accepted} accepted, early stop={res.stopped_early}")
    return EXIT_NUMERICAL if res.aborted else EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(meta.get("train_config", {}))
    ds = load_dataset(args.dataset)
    report = evaluate_split(model, ds, args.split, cfg)
    write_report(report, args.out)
    if args.renders:
        rdir = Path(args.renders)
        rdir.mkdir(parents=True, exist_ok=True)
        from .trainer import _train_views
        train_v, held_v = _train_views(ds, cfg)
        for v in (train_v if args.split == "train" else held_v):
            img, _ = render_model(model, v.camera, v.frame)
            write_png(rdir / f"{v.camera_id}_{v.frame:04d}.png", img)
    agg = report["aggregate"]
    print(f"{args.split}: PSNR {agg['psnr']:.2f} dB, SSIM {agg['ssim']:.4f}, "
          f"AbsRel {agg['depth'].get('abs_rel', float('nan')):.4f}")
    return EXIT_OK


def cmd_export(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    write_ply(args.out, GaussianSet.concat(model.graph.nodes()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="urbangs", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic street dataset")
    s.add_argument("out")
    s.add_argument("--spec", help="scene spec (YAML/JSON); the default street scene if omitted")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("init", help="dense init + progressive pruning")
    s.add_argument("dataset")
    s.add_argument("out")
    s.add_argument("--config")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("train", help="joint training")
    s.add_argument("dataset")
    s.add_argument("out")
    s.add_argument("--config")
    s.add_argument("--init", help="checkpoint from `init`; initialize from scratch if omitted")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", help="refine the depth in a handshake bundle")
    s.add_argument("bundle")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("eval", help="metrics report for a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--split", choices=["train", "heldout"], default="heldout")
    s.add_argument("--out", default="report.json")
    s.add_argument("--renders", help="directory for PNG renders")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export", help="write checkpoint Gaussians as PLY")
    s.add_argument("checkpoint")
    s.add_argument("out")
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads()
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, EmptyPruneError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
