"""occforge command line.

Every command resolves its settings from defaults, then an optional JSON
``--config`` file, then explicit flags, and writes the resolved settings to
``config.json`` next to its outputs. Feeding that file back through
``--config`` reproduces the run exactly.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import DEFAULT_ROWS, run_ablation
from .autodiff import load_checkpoint, no_grad, save_checkpoint
from .evaluation import export_ply
from .formats import FormatError
from .losses import LossWeights
from .pipeline import BranchConfig, parse_toggles, run_branch
from .scenes import PRESETS, generate_scene, read_scene, write_scene
from .training import evaluate, train, train_distilled
from .verify import format_report, run_suite

log = logging.getLogger("occforge")

TRAIN_SEED_BASE = 10_000
VAL_SEED_BASE = 50_000
MODEL_KEYS = tuple(f.name for f in fields(BranchConfig)
                   if f.name not in ("preset", "aux_loss", "icca", "distill", "cvt"))

COMMON = {"seed": 0, "preset": "toy", "out": "runs"}
DEFAULTS = {
    "gen-data": {"count": 8, "split": "train"},
    "train": {"mode": "student", "toggles": "none", "epochs": 5, "lr": 5e-3, "scenes": None,
              "count": 48, "teacher_epochs": None, "model": {}},
    "eval": {"checkpoint": None, "scenes": None, "count": 10},
    "gradcheck": {"preset": "micro", "no_end_to_end": False},
    "ablate": {"epochs": 5, "lr": 5e-3, "scenes": None, "val_scenes": None, "count": 48,
               "val_count": 10, "seeds": 3, "teacher_epochs": None, "model": {}},
    "export-ply": {"scene": None, "checkpoint": None, "path": None},
}
LAMBDAS = ("sem", "distill", "ssc", "scal_sem", "scal_geo")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, preset_default: str = "toy") -> None:
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--preset", choices=sorted(PRESETS), help=f"grid preset (default {preset_default})")
    p.add_argument("--out", help="output directory (default runs)")
    p.add_argument("--config", help="JSON file of settings; explicit flags override it")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenes", help="directory of .ocsn training scenes (default: generate --count)")
    p.add_argument("--count", type=int, help="scenes to generate when --scenes is absent (default 48)")
    p.add_argument("--epochs", type=int, help="passes over the training scenes (default 5)")
    p.add_argument("--lr", type=float, help="peak Adam learning rate (default 5e-3)")
    p.add_argument("--teacher-epochs", type=int, help="privileged-branch epochs (default --epochs)")
    defaults = LossWeights().as_tuple()
    for i, (name, value) in enumerate(zip(LAMBDAS, defaults), start=1):
        p.add_argument(f"--lambda{i}", type=float, help=f"weight of the {name} loss (default {value})")


def build_parser() -> Parser:
    parser = Parser(prog="occforge", description=__doc__.splitlines()[0],
                    argument_default=argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=f"occforge {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True
    kw = dict(argument_default=argparse.SUPPRESS)

    p = sub.add_parser("gen-data", help="write synthetic scene files", **kw)
    _common(p)
    p.add_argument("--count", type=int, help="number of scenes (default 8)")
    p.add_argument("--split", choices=("train", "val"), help="seed range to draw from (default train)")

    p = sub.add_parser("train", help="train the student, the teacher, or both with distillation", **kw)
    _common(p)
    _training(p)
    p.add_argument("--mode", choices=("student", "teacher", "distill"), help="default student")
    p.add_argument("--toggles", help="comma list from aux,icca,distill,cvt, or none/all (default none)")

    p = sub.add_parser("eval", help="score a checkpoint and print per-class IoU", **kw)
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint written by train (its config.json is read too)")
    p.add_argument("--scenes", help="directory of .ocsn scenes (default: generate --count val scenes)")
    p.add_argument("--count", type=int, help="validation scenes to generate (default 10)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op", **kw)
    _common(p, "micro")
    p.add_argument("--no-end-to-end", action="store_true", help="skip the full student loss check")

    p = sub.add_parser("ablate", help="component ablation table over several seeds", **kw)
    _common(p)
    _training(p)
    p.add_argument("--val-scenes", help="directory of .ocsn validation scenes")
    p.add_argument("--val-count", type=int, help="validation scenes to generate (default 10)")
    p.add_argument("--seeds", type=int, help="number of seeds, starting at --seed (default 3)")

    p = sub.add_parser("export-ply", help="write occupied voxels of a scene or prediction as PLY", **kw)
    _common(p)
    p.add_argument("--scene", help="scene file (default: generate one from --seed)")
    p.add_argument("--checkpoint", help="export this checkpoint's prediction instead of ground truth")
    p.add_argument("--path", help="output file (default OUT/scene.ply)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the --config file, then explicit flags."""
    explicit = vars(args).copy()
    command = explicit.pop("command")
    cfg = dict(COMMON)
    cfg.update(DEFAULTS[command])
    path = explicit.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
        for derived in ("command", "branch", "teacher_branch"):
            loaded.pop(derived, None)
        unknown = set(loaded) - set(cfg) - {f"lambda{i}" for i in range(1, 6)}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(explicit)
    cfg["command"] = command
    if "toggles" in cfg:
        try:
            cfg["toggles"] = ",".join(parse_toggles(cfg["toggles"])) or "none"
        except ValueError as e:
            raise UsageError(str(e)) from e
    if "lr" in cfg or "epochs" in cfg:
        weights = LossWeights()
        lams = [cfg.get(f"lambda{i}", getattr(weights, n)) for i, n in enumerate(LAMBDAS, 1)]
        try:
            LossWeights(*lams)
        except ValueError as e:
            raise UsageError(str(e)) from e
        cfg.update({f"lambda{i}": float(v) for i, v in enumerate(lams, 1)})
    return cfg


def _weights(cfg: dict) -> LossWeights:
    return LossWeights(*(cfg[f"lambda{i}"] for i in range(1, 6)))


def _model(cfg: dict) -> dict:
    model = dict(cfg.get("model") or {})
    bad = set(model) - set(MODEL_KEYS)
    if bad:
        raise UsageError(f"unknown model settings: {sorted(bad)}")
    return model


def _write_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _load_scenes(directory, count: int, base: int, seed: int, preset: str) -> list:
    if directory is not None:
        files = sorted(Path(directory).glob("*.ocsn"))
        if not files:
            raise UsageError(f"no .ocsn scenes in {directory}")
        scenes = [read_scene(f) for f in files]
        if any(s.spec != PRESETS[preset].spec for s in scenes):
            raise UsageError(f"scenes in {directory} do not use the {preset} grid")
        return scenes
    if count < 1:
        raise UsageError("--count must be positive")
    return [generate_scene(base + seed * 1000 + i, preset) for i in range(count)]


def cmd_gen_data(cfg: dict) -> int:
    out = Path(cfg["out"])
    base = TRAIN_SEED_BASE if cfg["split"] == "train" else VAL_SEED_BASE
    if cfg["count"] < 1:
        raise UsageError("--count must be positive")
    _write_config(cfg, out)
    for i in range(cfg["count"]):
        seed = base + cfg["seed"] * 1000 + i
        write_scene(out / f"scene_{seed:06d}.ocsn", generate_scene(seed, cfg["preset"]))
    print(f"wrote {cfg['count']} scenes to {out}")
    return 0


def _branch_config(cfg: dict, mode: str) -> BranchConfig:
    model = _model(cfg)
    toggles = parse_toggles(cfg["toggles"])
    if mode == "teacher":
        return BranchConfig.teacher(cfg["preset"], toggles, **model)
    if mode == "distill" and "distill" not in toggles:
        toggles = toggles + ("distill",)
    return BranchConfig.student(cfg["preset"], toggles, **model)


def cmd_train(cfg: dict) -> int:
    out = Path(cfg["out"])
    scenes = _load_scenes(cfg["scenes"], cfg["count"], TRAIN_SEED_BASE, 0, cfg["preset"])
    mode = cfg["mode"]
    branch = _branch_config(cfg, mode)
    cfg["branch"] = asdict(branch)
    weights = _weights(cfg)
    _write_config(cfg, out)
    if mode == "distill":
        t_cfg = BranchConfig.teacher(cfg["preset"], **_model(cfg))
        cfg["teacher_branch"] = asdict(t_cfg)
        _write_config(cfg, out)
        student, teacher = train_distilled(scenes, branch, t_cfg, cfg["seed"], cfg["epochs"],
                                           cfg["lr"], weights, cfg["teacher_epochs"])
        save_checkpoint(teacher.store, out / "teacher.ckpt")
        teacher.curve.write(out / "teacher_loss.csv")
    else:
        student = train(scenes, branch, cfg["seed"], cfg["epochs"], cfg["lr"], weights)
    save_checkpoint(student.store, out / "model.ckpt")
    student.curve.write(out / "loss.csv")
    print(f"final loss {student.curve.rows[-1][-1]:.6f}; checkpoint {out / 'model.ckpt'}")
    return 0


def _checkpoint_branch(path: Path) -> tuple:
    path = Path(path)
    conf = path.parent / "config.json"
    if not conf.exists():
        raise UsageError(f"{conf} not found; eval needs the config written by train")
    saved = json.loads(conf.read_text())
    key = "teacher_branch" if path.name == "teacher.ckpt" else "branch"
    return BranchConfig(**saved[key]), load_checkpoint(path)


def cmd_eval(cfg: dict) -> int:
    if cfg["checkpoint"] is None:
        raise UsageError("eval needs --checkpoint")
    branch, store = _checkpoint_branch(cfg["checkpoint"])
    cfg["preset"] = branch.preset
    scenes = _load_scenes(cfg["scenes"], cfg["count"], VAL_SEED_BASE, 0, branch.preset)
    result = evaluate(store, branch, scenes)
    out = Path(cfg["out"])
    _write_config(cfg, out)
    (out / "metrics.json").write_text(json.dumps({
        "miou": result.miou, "occupancy_iou": result.occupancy_iou,
        "per_class": [None if np.isnan(v) else v for v in result.per_class]}, indent=2) + "\n")
    print(result.table())
    print(f"mIoU {result.miou:.6f}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    if cfg["preset"] != "micro":
        raise UsageError("the gradient suite runs on the micro preset")
    results = run_suite(cfg["seed"], not cfg["no_end_to_end"])
    print(format_report(results))
    bad = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed")
    return 2 if bad else 0


def cmd_ablate(cfg: dict) -> int:
    out = Path(cfg["out"])
    if cfg["seeds"] < 1:
        raise UsageError("--seeds must be positive")
    train_sc = _load_scenes(cfg["scenes"], cfg["count"], TRAIN_SEED_BASE, 0, cfg["preset"])
    val_sc = _load_scenes(cfg["val_scenes"], cfg["val_count"], VAL_SEED_BASE, 0, cfg["preset"])
    _write_config(cfg, out)
    seeds = list(range(cfg["seed"], cfg["seed"] + cfg["seeds"]))
    table = run_ablation(train_sc, val_sc, seeds, DEFAULT_ROWS, cfg["preset"], cfg["epochs"],
                         cfg["lr"], _weights(cfg), cfg["teacher_epochs"], _model(cfg))
    (out / "ablation.csv").write_text(table.to_csv())
    (out / "ablation.md").write_text(table.to_markdown())
    print(table.to_markdown())
    return 0


def cmd_export_ply(cfg: dict) -> int:
    scene = (read_scene(cfg["scene"]) if cfg["scene"] is not None
             else generate_scene(VAL_SEED_BASE + cfg["seed"], cfg["preset"]))
    labels = scene.labels
    if cfg["checkpoint"] is not None:
        branch, store = _checkpoint_branch(cfg["checkpoint"])
        with no_grad():
            labels = run_branch(scene, store, branch).semantic.labels
    path = Path(cfg["path"]) if cfg["path"] else Path(cfg["out"]) / "scene.ply"
    path.parent.mkdir(parents=True, exist_ok=True)
    n = export_ply(labels, path, scene.spec.resolution, scene.spec.origin)
    print(f"wrote {n} voxels to {path}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate, "export-ply": cmd_export_ply}


def main(argv=None) -> int:
    level = os.environ.get("OCCFORGE_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](resolve(args))
    except UsageError as e:
        print(f"occforge {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (FormatError, FileNotFoundError) as e:
        print(f"occforge {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
