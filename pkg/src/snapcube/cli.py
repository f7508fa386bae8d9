"""Command-line interface.

Machine-readable results go to stdout as JSON; progress and diagnostics go to
stderr at the level named by ``SNAPCUBE_LOG`` (error, info or debug).

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import re
import sys
from pathlib import Path

import numpy as np

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
log = logging.getLogger("snapcube")


class ConfigError(ValueError):
    pass


def parse_angle(text: str) -> float:
    """``"45deg"``, ``"0.785rad"`` or a bare number of radians."""
    m = re.fullmatch(r"\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(deg|rad)?\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"cannot parse angle {text!r}")
    value = float(m.group(1))
    return math.radians(value) if m.group(2) == "deg" else value


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _resolve_seed(args):
    if args.seed is None:
        args.seed = int(np.random.SeedSequence().generate_state(1)[0] % (2 ** 31))
        print(f"seed: {args.seed}", file=sys.stderr)
    return args.seed


def _objective(args):
    from .objective import ObjectiveConfig
    return ObjectiveConfig(args.margin, args.denominator)


def _check_common(args, problems):
    if getattr(args, "n_grid", 20) < 1:
        problems.append("--n-grid must be positive")
    if getattr(args, "face_size", 64) < 8:
        problems.append("--face-size must be at least 8")
    margin = getattr(args, "margin", 0.0625)
    if not 0 < margin <= 0.5:
        problems.append("--margin must lie in (0, 0.5]")
    elif math.floor(margin * getattr(args, "face_size", 64) + 1e-9) < 1:
        problems.append("--margin rounds to zero pixels at this --face-size")


def _fail_config(problems):
    if problems:
        raise ConfigError("\n".join(problems))


def _require_file(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


# -- subcommands ----------------------------------------------------------

def cmd_project(args):
    from .geometry import project_cubemap
    from .io import read_image, write_cubemap
    problems = []
    _check_common(args, problems)
    _fail_config(problems)
    _require_file(args.panorama, "panorama")
    img = read_image(args.panorama)
    cube = project_cubemap(img, args.theta, args.face_size)
    stem = args.stem or Path(args.panorama).stem
    paths = write_cubemap(cube, args.out_dir, stem)
    log.info("wrote %d files to %s", len(paths), args.out_dir)
    _emit({"theta": args.theta, "degrees": math.degrees(args.theta),
           "files": [str(p) for p in paths]})


def cmd_score(args):
    from .objective import face_scores, fg_for_angle, lateral_mean
    from .io import read_mask
    problems = []
    _check_common(args, problems)
    _fail_config(problems)
    _require_file(args.mask, "mask")
    mask = read_mask(args.mask)
    cfg = _objective(args)
    fg = fg_for_angle(mask, args.theta, args.face_size)
    per_face = face_scores(fg.lateral_faces, cfg)
    _emit({"theta": args.theta, "score": lateral_mean(per_face),
           "per_face": dict(zip(("front", "right", "back", "left"), map(float, per_face)))})


def cmd_snap(args):
    from .geometry import AngleGrid, project_cubemap
    from .harness import ImageContext, POLICIES, run_named_policy
    from .io import read_image, read_mask, read_saliency, write_cubemap
    from .search import Scorer, saliency_search
    problems = []
    _check_common(args, problems)
    if args.policy not in POLICIES:
        problems.append(f"unknown policy {args.policy!r}; expected one of {', '.join(POLICIES)}")
    if args.policy == "learned" and not args.weights:
        problems.append("policy 'learned' requires --weights")
    if not 1 <= args.budget <= args.n_grid:
        problems.append(f"-T/--budget must lie in [1, {args.n_grid}]")
    if args.policy == "coarse2fine" and args.budget < 2:
        problems.append("coarse2fine needs -T >= 2")
    _fail_config(problems)
    seed = _resolve_seed(args)

    _require_file(args.mask, "mask")
    mask = read_mask(args.mask)
    grid = AngleGrid(args.n_grid)
    cfg = _objective(args)
    weights = None
    if args.weights:
        from .network import PolicyWeights
        _require_file(args.weights, "weights")
        weights = PolicyWeights.load(args.weights)
    if args.policy == "saliency" and args.saliency:
        _require_file(args.saliency, "saliency map")
        sal = read_saliency(args.saliency)
        result = saliency_search(Scorer(mask, args.face_size, cfg), sal, grid, args.window,
                                 args.sigma)
    else:
        ctx = ImageContext.build(mask, grid, args.face_size, cfg)
        result = run_named_policy(args.policy, ctx, args.budget, seed, weights, args.greedy,
                                  args.window, args.sigma)
    out = result.to_dict()
    out.update(policy=args.policy, budget=args.budget, seed=seed)
    if args.write_cubemap:
        _require_file(args.panorama, "panorama")
        cube = project_cubemap(read_image(args.panorama), result.best_angle, args.face_size)
        out["files"] = [str(p) for p in write_cubemap(cube, args.write_cubemap,
                                                     Path(args.panorama).stem)]
    _emit(out)


def cmd_synth(args):
    from .harness import generate_dataset
    from .scenes import SceneDistribution
    problems = []
    if args.count < 1:
        problems.append("--count must be at least 1")
    if args.height < 8:
        problems.append("--height must be at least 8")
    if len(args.objects) != 2 or args.objects[0] < 1 or args.objects[0] > args.objects[1]:
        problems.append("--objects must be MIN,MAX with 1 <= MIN <= MAX")
    if not 0 <= args.train_frac <= 1:
        problems.append("--train-frac must lie in [0, 1]")
    _fail_config(problems)
    seed = _resolve_seed(args)
    dist = SceneDistribution(n_objects=tuple(args.objects), height=args.height)
    entries = generate_dataset(args.out_dir, args.count, dist, seed, args.train_frac)
    _emit({"count": len(entries), "seed": seed,
           "manifest": str(Path(args.out_dir) / "manifest.json"),
           "train": sum(e.split == "train" for e in entries),
           "test": sum(e.split != "train" for e in entries)})


def cmd_train(args):
    from .harness import load_manifest
    from .network import Architecture, PolicyWeights
    from .policy import TrainConfig, train
    problems = []
    _check_common(args, problems)
    try:
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, T=args.budget,
                          lr=args.lr, momentum=args.momentum, seed=args.seed or 0,
                          reward_mode=args.reward_mode, face_size=args.face_size,
                          n_grid=args.n_grid, margin_frac=args.margin,
                          denominator_mode=args.denominator,
                          baseline_rollouts=args.baseline_rollouts,
                          normalize_rewards=args.normalize_rewards,
                          entropy_coef=args.entropy_coef)
    except ValueError as exc:
        problems.extend(str(exc).split("; "))
    _fail_config(problems)
    seed = _resolve_seed(args)
    cfg.seed = seed
    _require_file(args.manifest, "manifest")
    entries = load_manifest(args.manifest)
    tr = [e for e in entries if e.split == "train"]
    va = [e for e in entries if e.split != "train"]
    if not tr:
        raise ConfigError("manifest has no training entries")
    log.info("loading %d training and %d validation masks", len(tr), len(va))
    tr_masks = [e.load_mask() for e in tr]
    va_masks = [e.load_mask() for e in va]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    weights_path = out / "weights.snap"
    init = PolicyWeights.load(args.init_weights) if args.init_weights else None
    with open(log_path, "w") as fh:
        def write(rec, _weights):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
        from .policy import TrainingDiverged
        try:
            w, records = train(cfg, tr_masks, va_masks, weights=init,
                               train_seeds=[e.seed for e in tr if e.seed is not None] or None,
                               val_seeds=[e.seed for e in va if e.seed is not None] or None,
                               callback=write)
        except TrainingDiverged as exc:
            exc.weights.save(out / "last_good.snap")
            raise
    w.save(weights_path)
    _emit({"weights": str(weights_path), "log": str(log_path), "seed": seed,
           "final_val_F": records[-1]["val_F"]})


def cmd_eval(args):
    from .harness import budget_curve, load_manifest
    problems = []
    _check_common(args, problems)
    from .harness import POLICIES
    for p in args.policies:
        if p not in POLICIES:
            problems.append(f"unknown policy {p!r}")
    if "learned" in args.policies and not args.weights:
        problems.append("policy 'learned' requires --weights")
    if not args.budgets or args.budgets != sorted(args.budgets):
        problems.append("--budgets must be a non-empty ascending list")
    elif args.budgets[0] < 1 or args.budgets[-1] > args.n_grid:
        problems.append(f"--budgets must lie in [1, {args.n_grid}]")
    if args.jobs < 1:
        problems.append("--jobs must be positive")
    _fail_config(problems)
    seed = _resolve_seed(args)
    _require_file(args.manifest, "manifest")
    entries = load_manifest(args.manifest)
    if args.split != "all":
        entries = [e for e in entries if e.split == args.split]
    if not entries:
        raise ConfigError(f"no manifest entries in split {args.split!r}")
    weights = None
    if args.weights:
        from .network import PolicyWeights
        _require_file(args.weights, "weights")
        weights = PolicyWeights.load(args.weights)
    report = budget_curve(args.policies, entries, args.budgets, seed=seed, n_grid=args.n_grid,
                          face_size=args.face_size, cfg=_objective(args), weights=weights,
                          greedy=args.greedy, jobs=args.jobs)
    text = report.to_json()
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if args.timing:
        Path(args.timing).write_text(json.dumps(report.timing, indent=2, sort_keys=True) + "\n")
    if args.out:
        Path(args.out).write_text(text)
        _emit({"report": args.out, "rows": len(list(report.rows())), "seed": seed})
    else:
        sys.stdout.write(text)


# -- parser ---------------------------------------------------------------

def _add_objective(p):
    p.add_argument("--n-grid", type=int, default=20, help="number of candidate angles")
    p.add_argument("--face-size", type=int, default=64, help="cube face side in pixels")
    p.add_argument("--margin", type=float, default=0.0625,
                   help="boundary band width as a fraction of the face side")
    p.add_argument("--denominator", default="band-occupancy",
                   choices=("band-occupancy", "whole-face", "foreground-normalized"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snapcube", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="render a panorama to cubemap PNGs")
    p.add_argument("panorama")
    p.add_argument("--theta", type=parse_angle, default=0.0,
                   help="snap angle, e.g. 45deg or 0.785rad (default unit: radians)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stem")
    _add_objective(p)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("score", help="disruption score of a mask at one angle")
    p.add_argument("mask")
    p.add_argument("--theta", type=parse_angle, default=0.0)
    _add_objective(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("snap", help="search for the snap angle of one panorama")
    p.add_argument("panorama", nargs="?", help="panorama PNG (only needed with --write-cubemap)")
    p.add_argument("--mask", required=True, help="binary foreground mask PNG")
    p.add_argument("--policy", default="uniform")
    p.add_argument("-T", "--budget", type=int, default=4)
    p.add_argument("--seed", type=int)
    p.add_argument("--weights")
    p.add_argument("--greedy", action="store_true", help="learned policy takes argmax actions")
    p.add_argument("--saliency", help="saliency map (PNG or raw float32 + JSON sidecar)")
    p.add_argument("--window", type=int, default=30)
    p.add_argument("--sigma", type=float, default=5.0)
    p.add_argument("--write-cubemap", metavar="DIR")
    _add_objective(p)
    p.set_defaults(func=cmd_snap)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--objects", type=_int_list, default=[1, 3], help="MIN,MAX objects per scene")
    p.add_argument("--train-frac", type=float, default=0.75)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the learned policy with REINFORCE")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("-T", "--budget", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--reward-mode", default="literal-min",
                   choices=("literal-min", "clipped-gain"))
    p.add_argument("--baseline-rollouts", type=int, default=20)
    p.add_argument("--normalize-rewards", action="store_true",
                   help="divide each batch's rewards by their standard deviation")
    p.add_argument("--entropy-coef", type=float, default=0.0,
                   help="weight of an entropy bonus on the action distribution")
    p.add_argument("--init-weights")
    p.add_argument("--seed", type=int)
    _add_objective(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="budget curves over a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--policies", type=lambda s: [x for x in s.split(",") if x],
                   default=["exhaustive", "random", "uniform", "coarse2fine", "saliency"])
    p.add_argument("--budgets", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--split", default="test", choices=("train", "test", "all"))
    p.add_argument("--weights")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="write the report JSON here instead of stdout")
    p.add_argument("--csv", help="also write a (policy, budget, image_id, score) CSV")
    p.add_argument("--timing", help="write per-evaluation wall-clock seconds here")
    _add_objective(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("SNAPCUBE_LOG", "error").lower()
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level={"debug": logging.DEBUG, "info": logging.INFO}.get(level, logging.ERROR))
    parser = build_parser()
    args = parser.parse_args(argv)
    from .policy import NonFiniteGradient, TrainingDiverged
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"snapcube {args.command}: configuration error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FileNotFoundError) as exc:
        print(f"snapcube {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, NonFiniteGradient, FloatingPointError) as exc:
        print(f"snapcube {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"snapcube {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
