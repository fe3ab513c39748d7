"""Command-line entry point: ``lbw collect|train|refurbish|eval|matrix|render``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import Config


def _config(args) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    if getattr(args, "noise", None) is not None:
        cfg = cfg.replace(noise__scale=float(args.noise))
    return cfg


def cmd_collect(args) -> int:
    from .dataset import collect, save_dataset
    from .world.roadmap import load_map

    cfg = _config(args)
    ego, lbw = collect(load_map(args.map), cfg, minutes=args.minutes, seed=args.seed, density=args.density,
                       ego_avoid=tuple(args.avoid))
    out = Path(args.out)
    save_dataset(ego, out.with_name(out.stem + ".ego.lbwd"))
    save_dataset(lbw, out.with_name(out.stem + ".lbw.lbwd"))
    print(f"ego samples: {ego.count}  watched samples: {lbw.count}")
    return 0


def cmd_train(args) -> int:
    from .dataset import load_dataset, merge
    from .policy import save_params, train, train_lbw_pipeline

    cfg = _config(args).replace(policy__fusion=args.fusion)
    if args.epochs is not None:
        cfg = cfg.replace(policy__epochs=args.epochs)
    ego = load_dataset(args.ego)
    if args.lbw:
        lbw = load_dataset(args.lbw)
        if args.beta is None:
            params, report = train(cfg, merge(ego, lbw), args.seed)
        else:
            params, report, _ = train_lbw_pipeline(cfg, ego, lbw, args.beta, args.seed)
    else:
        params, report = train(cfg, ego, args.seed)
    save_params(params, args.out)
    print(json.dumps({"epoch_losses": report.epoch_losses, "val_l1": report.val_l1,
                      "wall_time": report.wall_time, "config_hash": report.config_hash, "seed": report.seed}))
    return 0


def cmd_refurbish(args) -> int:
    from .dataset import load_dataset, refurbish, save_dataset
    from .policy import baseline_predictor, load_params

    cfg = _config(args).replace(policy__fusion=args.fusion)
    params = load_params(args.baseline)
    out = refurbish(load_dataset(args.lbw), baseline_predictor(params, cfg), args.beta)
    save_dataset(out, args.out)
    print(f"refurbished {out.n_watched} watched samples with beta={args.beta}")
    return 0


def cmd_eval(args) -> int:
    from .bench import ExpertDriver, ZeroDriver, evaluate, load_suite
    from .policy import load_params

    cfg = _config(args)
    suite = load_suite(args.suite)
    if args.ob:
        suite = suite.ob_variant()
    if args.model == "expert":
        driver = ExpertDriver()
    elif args.model == "zero":
        driver = ZeroDriver(cfg)
    else:
        cfg = cfg.replace(policy__fusion=args.fusion)
        driver = load_params(args.model)
    rep = evaluate(driver, suite, args.seeds, cfg, args.max_routes, args.log_dir)
    text = json.dumps(rep.to_dict(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(f"{suite.name}: success {rep.mean:.1f} ± {rep.std:.1f} %  collisions {rep.collisions}  "
          f"timeouts {rep.timeouts}  red lights {rep.red_lights}")
    return 0


def cmd_matrix(args) -> int:
    from .bench import run_experiment_matrix, write_bundle

    spec = json.loads(Path(args.spec).read_text()) if args.spec else {}
    bundle = run_experiment_matrix(spec, _config(args))
    write_bundle(bundle, args.out)
    for c in sorted(bundle["tables"]):
        print(bundle["tables"][c])
    return 0


def cmd_render(args) -> int:
    from .bench import EpisodeLog, render_episode

    paths = render_episode(EpisodeLog.load(args.log), args.out)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lbw", description="Learning-by-watching driving pipeline")
    p.add_argument("--config", help="INI config file")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="drive the expert ego and record ego + watched datasets")
    c.add_argument("--map", default="town-a")
    c.add_argument("--minutes", type=float, default=10.0)
    c.add_argument("--density", choices=["regular", "dense"], default="regular")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--noise", type=float, help="perception noise scale (1 = default profile)")
    c.add_argument("--avoid", action="append", default=[], metavar="NODE",
                   help="junction the ego never drives through (repeatable)")
    c.add_argument("--out", required=True, help="output stem; writes <stem>.ego.lbwd and <stem>.lbw.lbwd")
    c.set_defaults(fn=cmd_collect)

    t = sub.add_parser("train", help="train a waypoint policy")
    t.add_argument("--ego", required=True)
    t.add_argument("--lbw")
    t.add_argument("--beta", type=float, help="refurbish the watched data with this confidence")
    t.add_argument("--fusion", choices=["none", "early", "late"], default="none")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("refurbish", help="blend watched waypoints with a baseline model")
    r.add_argument("--lbw", required=True)
    r.add_argument("--baseline", required=True)
    r.add_argument("--beta", type=float, default=0.5)
    r.add_argument("--fusion", choices=["none", "early", "late"], default="none")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_refurbish)

    e = sub.add_parser("eval", help="closed-loop evaluation on a benchmark suite")
    e.add_argument("--model", required=True, help="checkpoint path, or 'expert' / 'zero'")
    e.add_argument("--fusion", choices=["none", "early", "late"], default="none")
    e.add_argument("--suite", default="town-b-regular")
    e.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    e.add_argument("--max-routes", type=int)
    e.add_argument("--ob", action="store_true", help="do not terminate episodes on collision")
    e.add_argument("--log-dir", help="save each episode as <dir>/route<i>_seed<k>.{lbwd,actions} for render")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    m = sub.add_parser("matrix", help="regenerate the experiment matrix")
    m.add_argument("--spec", help="JSON spec overriding the default matrix")
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_matrix)

    d = sub.add_parser("render", help="write PPM frames of a logged episode")
    d.add_argument("--log", required=True, help="episode log stem")
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError) as exc:
        print(f"lbw {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
