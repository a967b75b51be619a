"""Command-line driver.

Exit codes: 0 success, 2 invalid configuration, 3 training failure,
4 evaluation failure.  Log verbosity comes from ``SPARSECON_LOG``
(``DEBUG``, ``INFO``, ``WARNING``; default ``WARNING``).
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import PipelineConfig
from .datasets import min_test_distance
from .evaluation import STANDARD_MODELS, _clean
from .exceptions import CheckpointError, ConfigError, ContractError, GenerationError

log = logging.getLogger("sparsecon")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


def _config(args):
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig(system=args.system or "unicycle")
        if args.config and args.system and args.system != cfg.system:
            raise ConfigError(f"--system {args.system} disagrees with config system {cfg.system}")
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        if getattr(args, "models", None):
            cfg.eval.models = [m.strip() for m in args.models.split(",") if m.strip()]
        if args.seeds is not None:
            if args.seeds < 1:
                raise ConfigError("--seeds must be >= 1")
            cfg.eval.seeds = args.seeds
        return cfg.validate()
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from exc


def _seeds(cfg):
    return [cfg.seed + k for k in range(cfg.eval.seeds)]


def _save_resolved(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")


def cmd_generate(args):
    cfg = _config(args)
    _save_resolved(cfg)
    for s in _seeds(cfg):
        try:
            bundle, d = pipeline.generate(cfg.with_seed(s))
        except GenerationError as exc:
            raise CliError(EXIT_CONFIG, f"config error: {exc}") from exc
        print(
            f"seed {s}: {len(bundle.offline)} offline trajectories, 1 online, "
            f"{len(bundle.test)} test triples; OOD margin attained "
            f"{min_test_distance(bundle):.4g} (required {cfg.data.ood_margin:g}) -> {d}"
        )
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    for s in _seeds(cfg):
        scfg = cfg.with_seed(s)
        try:
            art, ran = pipeline.train(scfg, resume=not args.fresh)
        except pipeline.StageError as exc:
            raise CliError(EXIT_TRAIN, f"seed {s}: {exc}") from exc
        except CheckpointError as exc:
            raise CliError(EXIT_TRAIN, f"seed {s}: bad checkpoint {exc.path}: {exc}") from exc
        skipped = [st for st in pipeline.STAGES if st not in ran]
        print(
            f"seed {s}: ran {ran or 'nothing'}; skipped {skipped or 'nothing'}; "
            f"dynamics mask {art.dyn_mask.retained.astype(int).tolist()}; "
            f"constraints c={art.constraints.constraint_count}"
        )
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    reports = []
    for s in _seeds(cfg):
        try:
            report, edir = pipeline.run_eval(cfg.with_seed(s), models=cfg.eval.models)
        except CheckpointError as exc:
            raise CliError(EXIT_EVAL, f"seed {s}: {exc}") from exc
        except ContractError as exc:
            raise CliError(EXIT_EVAL, f"seed {s}: {exc}") from exc
        reports.append(report)
        summary = ", ".join(f"{k}={v.rmse_total:.4g}" for k, v in sorted(report.models.items()))
        print(f"seed {s}: {summary} -> {edir}")
    if len(reports) > 1:
        path = pipeline.write_aggregate(reports, Path(cfg.out) / "aggregate.json")
        print(f"aggregate over {len(reports)} seeds -> {path}")
    return EXIT_OK


def _parse_grid(items):
    grid = {}
    for item in items or ():
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise CliError(EXIT_CONFIG, f"config error: bad --grid entry {item!r}; expected key=v1,v2")
        if key not in pipeline.SWEEP_KEYS:
            raise CliError(EXIT_CONFIG, f"config error: unknown sweep key {key!r}; choose from {sorted(pipeline.SWEEP_KEYS)}")
        try:
            grid[key] = [json.loads(v) for v in values.split(",")]
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"config error: bad value in {item!r}: {exc}") from exc
    if not grid:
        raise CliError(EXIT_CONFIG, "config error: sweep needs at least one --grid key=v1,v2")
    return grid


def cmd_sweep(args):
    cfg = _config(args)
    grid = _parse_grid(args.grid)
    cells = pipeline.ablation_sweep(cfg, grid, _seeds(cfg), cfg.eval.models)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.json"
    path.write_text(json.dumps(_clean([c.to_dict() for c in cells]), indent=1, sort_keys=True) + "\n")
    for c in cells:
        if c.error:
            print(f"{c.params} seed {c.seed}: FAILED {c.error}")
        else:
            summary = ", ".join(f"{k}={v.rmse_total:.4g}" for k, v in sorted(c.report.models.items()))
            print(f"{c.params} seed {c.seed}: {summary}")
    print(f"{len(cells)} cells -> {path}")
    return EXIT_OK


def cmd_report(args):
    cfg = _config(args)
    files = sorted(Path(cfg.out).glob("seed_*/eval/report.json"), key=lambda p: int(p.parent.parent.name[5:]))
    if not files:
        raise CliError(EXIT_EVAL, f"no evaluation reports under {cfg.out}; run `eval` first")
    try:
        docs = [json.loads(p.read_text()) for p in files]
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_EVAL, f"unreadable report: {exc}") from exc
    agg = pipeline.aggregate(docs)
    path = Path(cfg.out) / "aggregate.json"
    path.write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    n = len(docs)
    print(f"{'model':<24} {'median rmse':>12} {'IQR':>25} {'wins vs full_gp':>16}")
    for name, m in agg["models"].items():
        iqr = f"[{m['rmse_iqr'][0]:.3g}, {m['rmse_iqr'][1]:.3g}]"
        wins = f"{m['wins_vs_full_gp']}/{n}" if "wins_vs_full_gp" in m else "-"
        print(f"{name:<24} {m['rmse_median']:>12.4g} {iqr:>25} {wins:>16}")
    if "constraint_recovery_max_per_seed" in agg:
        rec = agg["constraint_recovery_max_per_seed"]
        print(f"constraint recovery max-norm error per seed: {', '.join(f'{r:.3g}' for r in rec)}")
    print(f"-> {path}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults per system when omitted)")
    common.add_argument("--system", choices=("unicycle", "quadrotor"), help="system when no config is given")
    common.add_argument("--seed", type=int, help="base seed (overrides [data] seed)")
    common.add_argument("--seeds", type=int, help="number of consecutive seeds starting at --seed")
    common.add_argument("--out", help="output directory (overrides [output] dir)")

    p = argparse.ArgumentParser(prog="sparsecon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate offline/online/test data").set_defaults(func=cmd_generate)
    t = sub.add_parser("train", parents=[common], help="train pseudometrics, dynamics and manifold")
    t.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("eval", parents=[common], help="evaluate checkpoints on the OOD test set")
    e.add_argument("--models", help=f"comma-separated subset of {','.join(STANDARD_MODELS)}")
    e.set_defaults(func=cmd_eval)
    s = sub.add_parser("sweep", parents=[common], help="ablation grid (in memory)")
    s.add_argument("--grid", action="append", metavar="KEY=V1,V2", help=f"one of {sorted(pipeline.SWEEP_KEYS)}")
    s.add_argument("--models", help="comma-separated model subset")
    s.set_defaults(func=cmd_sweep)
    sub.add_parser("report", parents=[common], help="aggregate existing evaluation reports").set_defaults(func=cmd_report)
    return p


def main(argv=None):
    level = os.environ.get("SPARSECON_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
