"""Command-line front end: ``seamcap <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataError, NumericError, SeamcapError

log = logging.getLogger("seamcap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _out_dir(args) -> Path:
    d = Path(args.out or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _model_params(args) -> dict:
    return {"hidden": args.hidden, "batch_size": args.batch_size, "random_state": args.seed,
            "augment": not args.no_augment}


def _epoch_logger(rows):
    for r in rows if isinstance(rows, list) else [rows]:
        log.info("epoch %d %s loss %.5f mpjpe %.2f cm", r["epoch"], r["split"], r["loss"],
                 r["mpjpe_cm"])


# ---- commands


def cmd_simulate(args):
    from .simulator import SplitSpec, build_dataset

    split = SplitSpec(args.sessions, args.finetune_sessions, args.val_sessions)
    ds = build_dataset(args.subjects, args.minutes, split, seed=args.seed, noise=not args.no_noise)
    out = _out_dir(args)
    ds.save(out)
    print(json.dumps({"dataset": str(out), "sessions": len(ds.sessions)}))


def cmd_train(args):
    from .estimator import SeamPoseRegressor
    from .simulator import Dataset, stack_windows

    ds = Dataset.load(args.data)
    sp = ds.splits(args.target)
    out = _out_dir(args)
    if args.stage == "independent":
        est = SeamPoseRegressor(**_model_params(args), stage="independent",
                                epochs=args.epochs, learning_rate=args.lr)
        tr = stack_windows(sp["independent_train"], hop=args.hop)
        va = stack_windows(sp["independent_val"], hop=args.hop) if sp["independent_val"] else None
        est.fit(tr["X"], tr["pose"], tr["arm_length"],
                eval_set=None if va is None else (va["X"], va["pose"], va["arm_length"]),
                log=_epoch_logger)
    else:
        if not args.init:
            raise ConfigError("the adaptive stage needs --init <independent checkpoint>")
        est = SeamPoseRegressor.load(args.init)
        est.set_params(stage="adaptive", warm_start=True, epochs=args.epochs,
                       learning_rate=args.lr, batch_size=args.batch_size, random_state=args.seed,
                       augment=not args.no_augment)
        ft = stack_windows(sp["adaptive_train"], hop=args.hop)
        est.fit(ft["X"], ft["pose"], ft["arm_length"], log=_epoch_logger)
    est.save(out)
    print(json.dumps({"checkpoint": str(out), "best_epoch": est.model_.best_epoch}))


def cmd_eval(args):
    from .estimator import SeamPoseRegressor
    from .evaluation import MeanPosePredictor, evaluate
    from .simulator import Dataset, stack_windows

    ds = Dataset.load(args.data)
    sp = ds.splits(args.target)
    if args.model:
        model = SeamPoseRegressor.load(args.model)
    else:
        train = stack_windows(sp["independent_train"] + sp["adaptive_train"], hop=args.hop)
        model = MeanPosePredictor().fit(None, train["pose"])
    rep = evaluate(model, sp["test"], smooth=not args.no_smooth)
    rep.save(_out_dir(args))
    print(rep.table())


def cmd_finetune_curve(args):
    from .estimator import SeamPoseRegressor
    from .evaluation import finetune_curve, plot_curve
    from .simulator import Dataset

    ds = Dataset.load(args.data)
    base = SeamPoseRegressor.load(args.model)
    grid = [float(x) for x in args.grid.split(",")]
    curve = finetune_curve({args.target: base}, ds, grid, hop=args.hop, epochs=args.epochs)
    out = _out_dir(args)
    (out / "finetune_curve.json").write_text(json.dumps(curve.to_dict(), indent=2))
    plot_curve(curve, out / "finetune_curve.svg")
    for m, e in zip(curve.minutes, curve.mpjpe_cm):
        print(f"{m:6.2f} min  {e:6.2f} cm")


def cmd_ablate(args):
    from .evaluation import ablation
    from .simulator import Dataset

    ds = Dataset.load(args.data)
    params = _model_params(args)
    res = ablation(args.remove, ds, args.target, params, hop=args.hop)
    out = _out_dir(args)
    summary = {k: {"mpjpe_cm": v["report"].overall_cm, "delta_cm": v["delta_cm"]}
               for k, v in res.items()}
    for k, v in res.items():
        v["report"].save(out, stem=f"ablation_{k}", plot=False)
    (out / "ablation.json").write_text(json.dumps(summary, indent=2))
    for k, v in summary.items():
        print(f"{k:<14}{v['mpjpe_cm']:8.2f} cm  {v['delta_cm']:+7.2f}")


def cmd_replay(args):
    from .stream import open_sink, replay

    sink = open_sink(args.to)
    try:
        stats = replay(args.session, sink, rate=args.rate, realtime=not args.fast,
                       limit=args.limit)
    finally:
        if sink is not sys.stdout.buffer:
            sink.close()
    print(json.dumps({"frames": stats.frames, "elapsed_s": stats.elapsed_s,
                      "rate_hz": stats.rate_hz}), file=sys.stderr)


def cmd_infer_live(args):
    from .estimator import SeamPoseRegressor
    from .kinematics import Skeleton
    from .stream import infer_live, open_source

    model = SeamPoseRegressor.load(args.model)
    skel = Skeleton.load(args.skeleton) if args.skeleton else Skeleton()
    source = open_source(args.source)
    dest = args.predictions
    fh = sys.stdout if dest == "-" else open(Path(dest), "w")
    n = 0
    try:
        for pred in infer_live(source, model, skel, drop=not args.no_drop, out=fh):
            n += 1
    finally:
        if fh is not sys.stdout:
            fh.close()
        if source is not sys.stdin.buffer:
            source.close()
    log.info("%d predictions", n)


def cmd_inspect(args):
    from .signals import FRAME_PERIOD_US, lower_median, read_frames_csv

    block = read_frames_csv(args.session)
    n = len(block)
    stats = {"frames": n}
    if n:
        dt = np.diff(block.t_us)
        stats.update(
            duration_s=float((block.t_us[-1] - block.t_us[0]) / 1e6),
            rate_hz=float(1e6 / dt.mean()) if n > 1 else None,
            max_gap_us=int(dt.max()) if n > 1 else 0,
            gaps=int((dt > 2 * FRAME_PERIOD_US).sum()) if n > 1 else 0,
            channel_min=block.codes.min(axis=0).tolist(),
            channel_median=lower_median(block.codes, axis=0).tolist(),
            channel_max=block.codes.max(axis=0).tolist(),
        )
    print(json.dumps(stats, indent=2))


# ---- parser


def _common_train(p):
    p.add_argument("--data", required=True, help="dataset directory from `simulate`")
    p.add_argument("--target", type=int, default=0, help="held-out subject id")
    p.add_argument("--hop", type=int, default=4, help="training window stride in frames")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-augment", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seamcap", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="JSON file of option defaults")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--subjects", type=int, default=3)
    p.add_argument("--minutes", type=float, default=20.0, help="recording minutes per subject")
    p.add_argument("--sessions", type=int, default=8, help="sessions per subject")
    p.add_argument("--finetune-sessions", type=int, default=6)
    p.add_argument("--val-sessions", type=int, default=1)
    p.add_argument("--no-noise", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one stage")
    _common_train(p)
    p.add_argument("--stage", choices=["independent", "adaptive"], default="independent")
    p.add_argument("--init", help="independent checkpoint to fine-tune")
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate on the target's held-out sessions")
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="checkpoint; omitted = mean-pose baseline")
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--hop", type=int, default=4, help="stride for the baseline's training poses")
    p.add_argument("--no-smooth", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("finetune-curve", help="error against fine-tune minutes")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="independent checkpoint")
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--grid", default="2.5,5,10,15")
    p.add_argument("--hop", type=int, default=4)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_finetune_curve)

    p = sub.add_parser("ablate", help="retrain with seam pairs removed")
    _common_train(p)
    p.add_argument("--remove", nargs="+", default=["shoulderTop", "sleeve"],
                   help="seam groups to remove, one retrain each")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("replay", help="stream a session's frames over a transport")
    p.add_argument("--session", required=True, help="frames CSV")
    p.add_argument("--to", default="-", help="path, '-' or tcp://host:port (listens)")
    p.add_argument("--rate", type=float, default=32.0)
    p.add_argument("--fast", action="store_true", help="no pacing")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("infer-live", help="run the model on a live frame stream")
    p.add_argument("--source", default="-", help="path, '-' or tcp://host:port (connects)")
    p.add_argument("--model", required=True)
    p.add_argument("--skeleton", help="skeleton JSON; default template")
    p.add_argument("--predictions", default="-", help="JSON-lines output path or '-'")
    p.add_argument("--no-drop", action="store_true", help="infer on every frame")
    p.set_defaults(func=cmd_infer_live)

    p = sub.add_parser("inspect", help="summary statistics of a frames CSV")
    p.add_argument("--session", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config``; CLI flags still win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    known = set(vars(args))
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ConfigError(f"unknown config keys for {args.command}: {unknown}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**{k: v for k, v in cfg.items() if k not in ("seed", "out", "config")})
    parser.set_defaults(**{k: v for k, v in cfg.items() if k in ("seed", "out")})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        args.func(args)
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA if isinstance(exc, DataError) else EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, SeamcapError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
