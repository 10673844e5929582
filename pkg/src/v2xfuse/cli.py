"""Command-line entry point: ``v2xfuse {train,eval,sweep,ablate,gen,report}``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numeric failure here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _levels(text: str) -> tuple:
    try:
        vals = tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("levels must be non-negative and non-empty")
    return vals


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment config (defaults built in)")
    common.add_argument("--seed", type=_u64, help="override [experiment] seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bit-exact runs")
    common.add_argument("--noise-dist", choices=("gaussian", "laplace"), help="eval pose-noise distribution")
    common.add_argument("--levels", type=_levels, help="eval noise levels, e.g. 0,0.2,0.4,0.6")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="v2xfuse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train a student (and its teacher)")
    for name, text in (("eval", "clean and noisy AP of a trained bundle"),
                       ("sweep", "AP table over noise levels for a trained bundle")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--bundle", type=Path, required=True, help="bundle.npz written by train")
    sub.add_parser("ablate", parents=[common], help="cumulative module ablation")
    g = sub.add_parser("gen", parents=[common], help="scenario preview")
    g.add_argument("--index", type=int, default=0)
    g.add_argument("--split", choices=("train", "eval"), default="eval")
    r = sub.add_parser("report", parents=[common], help="Gaussian and Laplace sweeps plus traces for a bundle")
    r.add_argument("--bundle", type=Path, required=True)
    return p


def _config(args):
    from .harness.config import ExperimentConfig, load_config

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    noise = {}
    if args.noise_dist:
        noise["eval_distribution"] = args.noise_dist
    if args.levels:
        noise["eval_levels"] = args.levels
    return cfg.replace(noise=noise) if noise else cfg


def _load_bundle(args):
    from .harness.training import TrainedBundle

    if not args.bundle.is_file():
        raise UsageError(f"bundle not found: {args.bundle}")
    b = TrainedBundle.load(args.bundle)
    if args.seed is not None or args.noise_dist or args.levels:
        import dataclasses

        noise = {}
        if args.noise_dist:
            noise["eval_distribution"] = args.noise_dist
        if args.levels:
            noise["eval_levels"] = args.levels
        cfg = b.config.replace(noise=noise) if noise else b.config
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        b = dataclasses.replace(b, config=cfg)
    return b


def _print_table(rows, keys):
    print(",".join(keys))
    for r in rows:
        print(",".join("no-GT" if r[k] is None else (f"{r[k]:.4f}" if isinstance(r[k], float) else str(r[k]))
                       for k in keys))


def cmd_train(args):
    from .harness.training import run_training

    cfg = _config(args)
    out = args.out or Path("runs/train")
    bundle = run_training(cfg, out_dir=out,
                          progress=lambda e: print(json.dumps({k: e[k] for k in ("epoch", "loss", "detection",
                                                                                 "train_ap50") if k in e})))
    path = bundle.save(out / "bundle.npz")
    (out / "config.ini").write_text(_dump(cfg))
    print(f"saved {path}")


def _dump(cfg):
    from .harness.config import dump_config

    return dump_config(cfg)


def cmd_eval(args):
    from .geometry import NoiseSpec
    from .harness.experiments import eval_noise_seeds
    from .harness.training import cached_scenes, evaluate_scenes

    b = _load_bundle(args)
    cfg = b.config
    scenes = cached_scenes(cfg, "eval")
    seeds = eval_noise_seeds(cfg, len(scenes))
    rows = []
    for level in args.levels or (0.0,):
        ev = evaluate_scenes(b.student, cfg, scenes, NoiseSpec.from_level(level, cfg.noise.eval_distribution), seeds)
        rows.append({"noise_level": float(level), "ap50": ev["ap50"], "ap70": ev["ap70"]})
    _print_table(rows, ("noise_level", "ap50", "ap70"))


def cmd_sweep(args):
    from .harness.experiments import noise_sweep
    from .harness.report import emit_report

    b = _load_bundle(args)
    rows = noise_sweep(b)
    _print_table(rows, ("noise_level", "ap50", "ap70"))
    if args.out:
        emit_report({f"sweep_{b.config.noise.eval_distribution}": rows}, {}, args.out, b.config)


def cmd_ablate(args):
    from .harness.experiments import run_ablation
    from .harness.report import emit_report

    cfg = _config(args)
    res = run_ablation(cfg, progress=lambda r: print(f"{r['configuration']}: ap50={r['ap50']:.4f} "
                                                     f"ap70={r['ap70']:.4f} ({r['seconds']} s)"))
    keys = ("configuration", "ap50", "ap70", "config_digest")
    _print_table(res.rows, keys)
    if args.out:
        emit_report({"ablation": [{k: r[k] for k in keys} for r in res.rows]},
                    {name.replace("+", "p"): b.trace for name, b in res.bundles.items()}, args.out, cfg)
        for name, b in res.bundles.items():
            b.save(Path(args.out) / f"bundle_{name.replace('+', 'p')}.npz")


def cmd_gen(args):
    from .harness.scenario import NS_EVAL, NS_TRAIN, generate_scenario

    cfg = _config(args)
    ns = NS_TRAIN if args.split == "train" else NS_EVAL
    sc = generate_scenario(cfg.seed, cfg, args.index, ns)
    summary = {
        "scene_id": sc.scene_id,
        "delay_s": float(sc.delay),
        "ego_pose": sc.ego_pose.as_array().tolist(),
        "infra_pose": sc.infra_pose.as_array().tolist(),
        "objects": [{"box": [float(x) for x in o.box.as_row()[:5]], "velocity": [float(x) for x in o.velocity],
                     "occluded": bool(oc)}
                    for o, oc in zip(sc.objects, sc.occluded)],
        "points": {str(agent): [len(c) for c in clouds] for agent, clouds in sc.clouds.items()},
    }
    print(json.dumps(summary, indent=1))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"{sc.scene_id}.json").write_text(json.dumps(summary, indent=1))
        _preview_svg(sc, cfg, args.out / f"{sc.scene_id}.svg")


def _preview_svg(sc, cfg, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    from .distillation import to_ego_frame
    from .fusion import INFRA, VEHICLE

    fig, ax = plt.subplots(figsize=(8, 3.6))
    for agent, pose, colour in ((VEHICLE, sc.ego_pose, "tab:blue"), (INFRA, sc.infra_pose, "tab:orange")):
        pts = to_ego_frame(sc.clouds[agent][1], pose, sc.ego_pose).points
        if len(pts):
            ax.scatter(pts[:, 0], pts[:, 1], s=0.3, c=colour, label=str(agent))
    for box in sc.gt_boxes:
        c = np.vstack([box.corners(), box.corners()[:1]])
        ax.plot(c[:, 0], c[:, 1], "k-", lw=0.8)
    meta = cfg.grid.meta()
    ax.set_xlim(meta.x_min, meta.x_max)
    ax.set_ylim(meta.y_min, meta.y_max)
    ax.set_aspect("equal")
    ax.legend(markerscale=10, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_report(args):
    from .harness.experiments import noise_sweep
    from .harness.report import emit_report

    b = _load_bundle(args)
    out = args.out or Path("runs/report")
    tables = {f"sweep_{d}": noise_sweep(b, distribution=d) for d in ("gaussian", "laplace")}
    for name, rows in tables.items():
        print(name)
        _print_table(rows, ("noise_level", "ap50", "ap70"))
    emit_report(tables, {"student": b.trace}, out, b.config)
    print(f"report written to {out}")


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "ablate": cmd_ablate, "gen": cmd_gen,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from .harness.config import ConfigError
    from .harness.scenario import ScenarioError
    from .harness.training import NumericFailure

    ctx = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits

        ctx = threadpool_limits(limits=1)
    try:
        with ctx:
            COMMANDS[args.command](args)
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if exc.checkpoint is not None:
            print(f"last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
