"""Command-line entry point: ``tgforecast <command> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import statistics
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig, load_train_config, train_config_from_dict
from .datagen import INTERACTION_SUITE, TEMPLATES, TemplateError, gen_dataset, load_dataset
from .diagnostics import run_grad_checks
from .metrics import MetricsError
from .model import NumericalError
from .predictions import RecordError, read_predictions
from .scene import SceneError, read_scene
from .substrate import CheckpointError, NonFiniteGradient
from .train import evaluate, evaluate_predictions, plot, predict, pretrain_then_train, train

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

# Rows of the component ablation grid: (name, tg, seq_mem, scene_mem, goal_pred, goal_loss).
ABLATION_GRID = (
    ("baseline", False, False, False, False, False),
    ("tg", True, False, False, False, False),
    ("tg_seq", True, True, False, False, False),
    ("tg_scene", True, False, True, False, False),
    ("tg_seq_scene", True, True, True, False, False),
    ("goal_pred", True, True, True, True, False),
    ("full", True, True, True, True, True),
)


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _train_overrides(args) -> dict:
    ov = {
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "model.d": args.d,
        "model.k": args.k,
    }
    if args.no_augment:
        ov["augment"] = False
    for flag in ("tg", "seq_mem", "scene_mem", "goal_pred", "goal_loss"):
        value = getattr(args, flag)
        if value is not None:
            ov[f"model.{flag}"] = value
    if args.lane_filter:
        ov["model.lane_filter"] = args.lane_filter
    ov.update(_parse_set(args.set))
    return ov


def _log(msg: str) -> None:
    print(msg, flush=True)


def cmd_gen_data(args) -> int:
    if args.counts:
        counts = {}
        for part in args.counts.split(","):
            name, _, n = part.partition("=")
            counts[name.strip()] = int(n)
    else:
        names = INTERACTION_SUITE if args.suite == "interaction" else tuple(TEMPLATES)
        per, extra = divmod(args.n, len(names))
        counts = {name: per + (i < extra) for i, name in enumerate(sorted(names))}
    manifest = gen_dataset(counts, args.seed, args.out, args.val_fraction)
    _log(f"wrote {len(manifest.entries)} scenes to {args.out} ({len(manifest.ids('val'))} val)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_train_config(args.config, _train_overrides(args))
    train_scenes = load_dataset(args.data, "train")
    val_scenes = load_dataset(args.data, "val") or None
    if args.pretrain_epochs:
        _, record = pretrain_then_train(cfg, args.pretrain_epochs, train_scenes, val_scenes, args.out, log=_log)
    else:
        _, record = train(cfg, train_scenes, val_scenes, args.out, log=_log)
    _log(f"{record.n_steps} steps; best checkpoint {record.best_checkpoint}")
    return EXIT_OK


def _scenes_for(args) -> list:
    if getattr(args, "scene", None):
        return [read_scene(p) for p in args.scene]
    return load_dataset(args.data, None if args.split == "all" else args.split)


def cmd_eval(args) -> int:
    scenes = _scenes_for(args)
    if args.predictions:
        report = evaluate_predictions(args.predictions, scenes, args.out)
    else:
        expect = None
        if args.config:
            expect = load_train_config(args.config).model
        report = evaluate(args.checkpoint, scenes, args.k, expect=expect, report_path=args.out)
    _log(json.dumps(report.summary(), indent=1))
    return EXIT_OK


def cmd_predict(args) -> int:
    records = predict(args.checkpoint, _scenes_for(args), args.out, frame=args.frame, k=args.k)
    _log(f"wrote {len(records)} prediction records to {args.out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    scene = read_scene(args.scene)
    records = {r.scene_id: r for r in read_predictions(args.predictions)}
    if scene.scene_id not in records:
        raise RecordError(f"no prediction for scene {scene.scene_id!r} in {args.predictions}")
    plot(scene, records[scene.scene_id], args.out)
    _log(f"wrote {args.out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = run_grad_checks(args.n_scenes, args.seed, args.d, args.n_dirs)
    worst = max(r.worst for r in results)
    for r in results:
        _log(f"{r.scene_id}: worst relative error {r.worst:.3e} in {r.worst_block}")
    ok = worst <= args.tol
    _log(f"{'PASS' if ok else 'FAIL'} worst {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_NUMERICAL


def ablation_config(base: TrainConfig, row: tuple) -> TrainConfig:
    _, tg, seq, scene, goal_pred, goal_loss = row
    model = {**vars(base.model), "tg": tg, "seq_mem": seq, "scene_mem": scene, "goal_pred": goal_pred, "goal_loss": goal_loss}
    return train_config_from_dict({**base.to_dict(), "model": model})


def cmd_ablate(args) -> int:
    base = load_train_config(args.config, _train_overrides(args))
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = [r for r in ABLATION_GRID if not args.variants or r[0] in args.variants.split(",")]
    train_scenes = load_dataset(args.data, "train")
    val_scenes = load_dataset(args.data, "val")
    table = []
    for row in rows:
        per_seed = []
        for seed in seeds:
            cfg = ablation_config(train_config_from_dict({**base.to_dict(), "seed": seed}), row)
            out = Path(args.out) / row[0] / f"seed{seed}"
            _, record = train(cfg, train_scenes, val_scenes, out, log=_log if args.verbose else None)
            final = record.epochs[-1].val
            per_seed.append(final)
            _log(f"{row[0]} seed {seed}: val minFDE {final['min_fde']:.4f} minADE {final['min_ade']:.4f}")
        table.append({
            "variant": row[0],
            "toggles": dict(zip(("tg", "seq_mem", "scene_mem", "goal_pred", "goal_loss"), row[1:])),
            "per_seed": per_seed,
            "median": {m: statistics.median(s[m] for s in per_seed) for m in ("min_ade", "min_fde", "miss_rate", "b_min_fde")},
        })
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "ablation.json").write_text(json.dumps(table, indent=1))
    for t in table:
        m = t["median"]
        _log(f"{t['variant']:>14}  minADE {m['min_ade']:.3f}  minFDE {m['min_fde']:.3f}  MR {m['miss_rate']:.3f}  b-minFDE {m['b_min_fde']:.3f}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors are invalid input: exit 1 rather than argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _add_train_flags(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("--config", help="JSON config file; flags below override its keys")
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--d", type=int, help="feature width")
    p.add_argument("--k", type=int, help="number of modes")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--lane-filter", choices=("any_agent", "aoi"))
    for flag in ("tg", "seq_mem", "scene_mem", "goal_pred", "goal_loss"):
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (model.<key> for model fields)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tgforecast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=500, help="scenes spread evenly over the suite's templates")
    p.add_argument("--suite", choices=("interaction", "all"), default="all")
    p.add_argument("--counts", help="explicit template=count list, e.g. t_yield=10,four_way_straight=5")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pretrain-epochs", type=int, default=0, help="run the context-only pretraining phase first")
    _add_train_flags(p, seed_required=True)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "compute metrics"), ("predict", cmd_predict, "export prediction records")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=name == "predict")
        p.add_argument("--data")
        p.add_argument("--scene", nargs="*", help="scene record files instead of a dataset")
        p.add_argument("--split", choices=("train", "val", "all"), default="val")
        p.add_argument("--k", type=int)
        p.add_argument("--out", required=name == "predict")
        if name == "eval":
            p.add_argument("--predictions", help="score a predictions file instead of running a checkpoint")
            p.add_argument("--config", help="require the checkpoint to match this config")
        else:
            p.add_argument("--frame", choices=("normalized", "raw"), default="normalized")
        p.set_defaults(func=func)

    p = sub.add_parser("plot", help="render one scene with its predictions as SVG")
    p.add_argument("--scene", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("grad-check", help="finite-difference check of every parameter block on micro-scenes")
    p.add_argument("--n-scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--n-dirs", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="train the component ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", help="comma-separated subset of " + ",".join(r[0] for r in ABLATION_GRID))
    p.add_argument("--verbose", action="store_true")
    _add_train_flags(p, seed_required=False)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("eval", "predict") and not (args.data or args.scene):
        print("error: give --data or --scene", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "eval" and not (args.checkpoint or args.predictions):
        print("error: give --checkpoint or --predictions", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (NumericalError, NonFiniteGradient, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, SceneError, TemplateError, CheckpointError, MetricsError, RecordError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
