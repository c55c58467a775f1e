"""``dynafuse`` command line.

Every command takes ``--config PATH`` (JSON or YAML), ``--seed N`` and
``--out DIR``; ``DYNAFUSE_*`` environment variables override config keys
(see :mod:`dynafuse.config`). Failures print one line to stderr,
``error: {"kind": ..., "message": ...}``, and exit nonzero
(2 config/usage, 3 file I/O, 4 training divergence, 1 anything else).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, dump_config, load_config, parse_config, reference, to_dict

log = logging.getLogger("dynafuse")

EXIT_CONFIG, EXIT_IO, EXIT_TRAIN, EXIT_OTHER = 2, 3, 4, 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind, self.code = kind, code


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io", f"cannot create output directory {out}: {exc.strerror}", EXIT_IO) from exc
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg.validate()


def _checkpoint_config(args, ck) -> RunConfig:
    """The run config stored with a checkpoint; a --config file may change
    anything except the network itself."""
    stored = parse_config(ck.config)
    if args.config is None:
        return stored
    cfg = _config(args)
    if to_dict(cfg.pipeline) != to_dict(stored.pipeline):
        raise ConfigError("pipeline: settings differ from the ones the checkpoint was trained with")
    return cfg


def _load_checkpoint(path):
    from .train import Checkpoint

    if path is None:
        raise CliError("missing_checkpoint", "--checkpoint is required", EXIT_CONFIG)
    if not Path(path).is_file():
        raise CliError("missing_checkpoint", f"checkpoint not found: {path}", EXIT_IO)
    return Checkpoint.load(path)


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    log.info("wrote %s", path)
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import generate_scene

    cfg = _config(args)
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    out = _out_dir(args)
    seed = cfg.train.seed
    entries = []
    for i in range(args.count):
        s = 10_000 * seed + i
        name = f"scene_{i:04d}.json"
        digest = generate_scene(s, cfg.scene.gen, cfg.scene.grid).save(out / name)
        entries.append({"file": name, "seed": s, "sha256": digest})
    manifest = {"seed": seed, "count": args.count, "config": cfg.fingerprint(), "scenes": entries}
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"{args.count} scene(s) written to {out}")
    return 0


def cmd_train(args) -> int:
    from .train import train_loop

    cfg = _config(args)
    out = _out_dir(args)
    res = train_loop(cfg)
    res.checkpoint.save(out / "checkpoint.npz")
    _write(out / "loss.csv", res.loss_csv())
    _write(out / "config.json", dump_config(cfg) + "\n")
    if res.eval is not None:
        _write(out / "metrics.csv", res.eval.to_csv())
        print(f"val mAP {res.eval.mAP:.6f}")
    print(f"checkpoint {out / 'checkpoint.npz'} ({cfg.train.steps} steps)")
    return 0


def _load_scene_dir(path: Path, cfg: RunConfig):
    from .synth import Scene

    mf = path / "manifest.json"
    if not mf.is_file():
        raise CliError("io", f"no manifest.json in {path}", EXIT_IO)
    entries = json.loads(mf.read_text())["scenes"]
    return [Scene.load(path / e["file"]) for e in entries]


def cmd_eval(args) -> int:
    from .synth import corrupt_modality
    from .train import evaluate, make_split

    ck = _load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, ck)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    out = _out_dir(args)
    scenes = _load_scene_dir(Path(args.scenes), cfg) if args.scenes else make_split(cfg)[1]
    for which, p in (("camera", args.camera_dropout), ("lidar", args.lidar_dropout)):
        if p:
            scenes = [corrupt_modality(s, which, p) for s in scenes]
    res = evaluate(ck.params, cfg, scenes)
    _write(out / "metrics.csv", res.to_csv())
    print(f"mAP {res.mAP:.6f} on {len(scenes)} scene(s)")
    return 0


def cmd_ablate(args) -> int:
    from .train import ablation_run

    cfg = _config(args)
    if args.seeds:
        seeds = tuple(int(s) for s in args.seeds.split(","))
    elif args.seed is not None:
        seeds = (args.seed,)
    else:
        seeds = cfg.ablation.seeds
    jobs = args.jobs if args.jobs is not None else cfg.ablation.jobs
    out = _out_dir(args)
    table = ablation_run(cfg, args.table, seeds, jobs)
    text = table.to_csv()
    _write(out / f"ablation_{args.table}.csv", text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(args.trials, args.seed or 0, pipeline=not args.no_pipeline)
    lines = [r.line() for r in results]
    bad = [r.name for r in results if not r.ok]
    lines.append(f"{len(results) - len(bad)}/{len(results)} checks passed")
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    if args.out:
        _write(_out_dir(args) / "gradcheck.txt", report)
    if bad:
        raise CliError("gradcheck", f"gradient mismatch in: {', '.join(bad)}", EXIT_OTHER)
    return 0


def cmd_plot(args) -> int:
    import numpy as np

    from .heatmap import render_gt_heatmap
    from .plot import dump_maps, read_loss_csv, svg_lines
    from .synth import Scene, generate_scene
    from .train import forward_features

    ck = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    cfg = _checkpoint_config(args, ck) if ck else _config(args)
    out = _out_dir(args)
    if args.scene:
        scene = Scene.load(args.scene)
    else:
        scene = generate_scene(10_000 * cfg.train.seed, cfg.scene.gen, cfg.scene.grid)
    maps = {"F_g": render_gt_heatmap(scene.gt_boxes, scene.spec, cfg.pipeline.classes).data}
    if ck is None:
        print("notice: no checkpoint given, plotting the ground-truth heatmap only", file=sys.stderr)
    else:
        res = forward_features(scene, ck.params, cfg.pipeline, trainable=False)
        names = {"heat_camera": "F_x_star", "heat_lidar": "F_y_star", "E_x": "E_x", "E_y": "E_y", "fused": "fused"}
        for src, dst in names.items():
            if src in res.maps:
                maps[dst] = np.asarray(res.maps[src].value)
        maps["pred"] = np.asarray(res.heat.value)
        missing = [d for s, d in names.items() if s not in res.maps]
        if missing:
            print(f"notice: this pipeline has no {', '.join(missing)} maps", file=sys.stderr)
    paths = dump_maps(maps, out)
    if args.loss:
        series = read_loss_csv(args.loss)
        paths.append(svg_lines(series, out / "loss.svg", title="training loss"))
    print(f"{len(paths)} file(s) written to {out}")
    return 0


def cmd_config(args) -> int:
    if args.reference:
        print(reference())
    else:
        print(dump_config(_config(args)))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML run config")
    common.add_argument("--seed", type=int, help="master seed (overrides train.seed)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--jobs", type=int, help="worker processes (ablate only)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="dynafuse", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic scenes and a manifest")
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one model, write checkpoint and loss CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="toy mAP of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--scenes", help="directory written by `synth` (default: validation split)")
    p.add_argument("--camera-dropout", type=float, default=0.0)
    p.add_argument("--lidar-dropout", type=float, default=0.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run one ablation table")
    p.add_argument("--table", default="IVa", help="IVa .. IVh")
    p.add_argument("--seeds", help="comma separated list (overrides --seed and ablation.seeds)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--no-pipeline", action="store_true", help="skip the composed pipeline check")
    p.set_defaults(func=cmd_gradcheck, out=None)

    p = sub.add_parser("plot", parents=[common], help="PGM maps of a scene and an SVG loss curve")
    p.add_argument("--scene", help="scene JSON (default: generated from --seed)")
    p.add_argument("--checkpoint")
    p.add_argument("--loss", help="loss CSV written by `train`")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("config", parents=[common], help="print the resolved config")
    p.add_argument("--reference", action="store_true", help="list every key with its default")
    p.set_defaults(func=cmd_config)
    return ap


def _fail(kind: str, message: str, code: int) -> int:
    print("error: " + json.dumps({"kind": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .train import TrainingError

    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except TrainingError as exc:
        return _fail("training", str(exc), EXIT_TRAIN)
    except FileNotFoundError as exc:
        return _fail("io", f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc), EXIT_IO)
    except OSError as exc:
        return _fail("io", f"{exc.strerror or exc}: {exc.filename}", EXIT_IO)
    except (ValueError, KeyError) as exc:
        return _fail("invalid_input", str(exc), EXIT_OTHER)


if __name__ == "__main__":
    sys.exit(main())
