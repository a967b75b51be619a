"""Stage runner: data -> dynamics metric -> dynamics GPs -> constraint data -> manifold -> evaluation.

Per-seed artifacts live under ``<out>/seed_<k>/``::

    data/                      dataset bundle
    train/dyn_metric.json      dynamics pseudometric and mask
    train/dyn_sparse.json      IGP on the retained inputs (+ .npz)
    train/dyn_full.json        IGP on all inputs (+ .npz)
    train/constraints.npz      approximate normal-space bases
    train/manifold/            per-row constraint IGPs
    train/metrics.jsonl        one line per stage run
    eval/report.json, eval/residuals.csv

Training stages with a readable checkpoint are skipped when resuming.
"""

import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .datasets import flatten, generate_bundle, load_bundle, min_test_distance, save_bundle
from .evaluation import _clean, config_hash, evaluate, recovery_error, standard_models
from .exceptions import CheckpointError, ContractError
from .gp import GpConfig, fit_igp, load_igp, save_igp
from .manifold import ConstraintDataset, build_constraint_dataset, load_manifold, save_manifold, train_manifold
from .metric import extract_mask, load_pseudometric, save_pseudometric, train_pseudometric

log = logging.getLogger(__name__)

STAGES = ("dynamics_metric", "dynamics", "constraint_dataset", "manifold")


class StageError(RuntimeError):
    """A training stage failed; carries the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


@dataclass
class Artifacts:
    bundle: object = None
    dyn_metric: object = None
    dyn_mask: object = None
    sparse: object = None
    full: object = None
    constraints: object = None
    manifold: object = None


def seed_dir(out, seed):
    return Path(out) / f"seed_{int(seed)}"


def _input_layout(system):
    return tuple(system.state_names) + tuple(system.control_names)


# ------------------------------------------------------------------ stages


def stage_generate(cfg):
    return generate_bundle(cfg.make_system(), cfg.data, cfg.seed)


def stage_dynamics_metric(cfg, bundle):
    system = bundle.make_system()
    S = flatten(bundle, ("offline",))
    mcfg = dataclasses.replace(cfg.metric, seed=cfg.seed)
    pm = train_pseudometric(S.inputs, S.derivs, mcfg, layout=_input_layout(system))
    return pm, extract_mask(pm, cfg.dynamics_threshold)


def stage_dynamics(cfg, bundle, mask):
    S = flatten(bundle, ("offline",))
    gcfg = dataclasses.replace(cfg.gp, seed=cfg.seed)
    sparse = fit_igp(S.inputs, S.derivs, mask.retained, gcfg)
    full = fit_igp(S.inputs, S.derivs, None, gcfg)
    return sparse, full


def stage_constraint_dataset(cfg, bundle, sparse):
    system = bundle.make_system()
    C = flatten(bundle, ("offline", "online"))
    mcfg = dataclasses.replace(cfg.manifold, seed=cfg.seed)
    ref_dims = sparse.input_mask[: system.state_dim]
    return build_constraint_dataset(sparse, C.states, system.control_bounds, mcfg, ref_dims=ref_dims)


def stage_manifold(cfg, system, constraints):
    mcfg = dataclasses.replace(cfg.constraint_metric, seed=cfg.seed)
    gcfg = dataclasses.replace(cfg.gp, seed=cfg.seed + 1)
    return train_manifold(
        constraints,
        mcfg,
        gcfg,
        cfg.constraint_threshold,
        layout=tuple(system.state_names),
        angle_dims=tuple(system.angle_dims) if cfg.angle_features else (),
    )


def report_hash(cfg):
    doc = cfg.to_dict()
    doc.pop("out", None)
    doc.pop("eval", None)
    return config_hash(doc)


def evaluate_artifacts(cfg, art, models=None):
    """EvalReport for the requested standard models plus recovery diagnostics."""
    system = art.bundle.make_system()
    names = list(models or cfg.eval.models)
    entrants = standard_models(system, art.full, art.sparse, art.manifold)
    missing = [m for m in names if m not in entrants]
    if missing:
        raise ContractError(f"models {missing} need artifacts that were not provided")
    extras = {
        "state_names": list(system.state_names),
        "true_constraint_count": system.constraint_count,
        "ood_margin_attained": min_test_distance(art.bundle),
    }
    if art.dyn_mask is not None:
        extras["dynamics_mask"] = art.dyn_mask.retained.tolist()
        extras["dynamics_diag"] = art.dyn_mask.diag_snapshot.tolist()
    if art.constraints is not None:
        extras["detected_constraint_count"] = art.constraints.constraint_count
        extras["constraint_residual_max"] = float(art.constraints.residuals.max()) if len(art.constraints) else 0.0
    if art.manifold is not None:
        X = art.bundle.test.states[: cfg.eval.n_recovery]
        err = recovery_error(system, art.manifold, X, cfg.manifold.pivoting, cfg.manifold.row_scale)
        extras["constraint_recovery"] = {
            "n_states": len(X),
            "max": float(err.max()),
            "median": float(np.median(err)),
            "mean": float(err.mean()),
        }
        extras["constraint_row_masks"] = [r.input_mask.tolist() for r in art.manifold.rows]
    return evaluate({m: entrants[m] for m in names}, art.bundle, system, report_hash(cfg), cfg.seed, extras)


def run_in_memory(cfg, models=None):
    """Whole pipeline without touching the disk; returns ``(artifacts, report)``."""
    art = Artifacts()
    art.bundle = stage_generate(cfg)
    art.dyn_metric, art.dyn_mask = _guard("dynamics_metric", stage_dynamics_metric, cfg, art.bundle)
    art.sparse, art.full = _guard("dynamics", stage_dynamics, cfg, art.bundle, art.dyn_mask)
    art.constraints = _guard("constraint_dataset", stage_constraint_dataset, cfg, art.bundle, art.sparse)
    art.manifold = _guard("manifold", stage_manifold, cfg, art.bundle.make_system(), art.constraints)
    return art, evaluate_artifacts(cfg, art, models)


def _guard(stage, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - any failure is reported with its stage
        raise StageError(stage, exc) from exc


# ------------------------------------------------------------- disk driver


def generate(cfg, out=None):
    """Write the dataset bundle of ``cfg.seed``; returns ``(bundle, directory)``."""
    d = seed_dir(out or cfg.out, cfg.seed) / "data"
    bundle = stage_generate(cfg)
    save_bundle(bundle, d)
    return bundle, d


def save_constraints(ds, path):
    path = Path(path)
    buf = io.BytesIO()
    np.savez(
        buf,
        states=ds.states,
        gammas=ds.gammas,
        singular_values=ds.singular_values,
        residuals=ds.residuals,
        thresholds=ds.thresholds,
        kept=ds.kept,
        counts=ds.counts,
        order=ds.order,
        refs=ds.refs,
        constraint_count=np.array(ds.constraint_count),
    )
    path.write_bytes(buf.getvalue())
    return path


def load_constraints(path):
    path = Path(path)
    try:
        with np.load(path) as z:
            arr = {k: z[k] for k in z.files}
        return ConstraintDataset(
            states=arr["states"],
            gammas=arr["gammas"],
            singular_values=arr["singular_values"],
            residuals=arr["residuals"],
            thresholds=arr["thresholds"],
            kept=arr["kept"],
            counts=arr["counts"],
            order=arr["order"],
            refs=arr["refs"],
            constraint_count=int(arr["constraint_count"]),
        )
    except (OSError, ValueError, KeyError, EOFError, TypeError) as exc:
        raise CheckpointError(path, f"corrupted constraint dataset ({exc})") from exc


def _metrics_line(path, stage, **values):
    rec = {"stage": stage, **values}
    with open(path, "a") as fh:
        fh.write(json.dumps(_clean(rec), sort_keys=True) + "\n")
    log.info("%s: %s", stage, json.dumps(_clean(values), sort_keys=True))


def train(cfg, out=None, resume=True, until=None):
    """Run the training stages for ``cfg.seed`` with per-stage checkpoints.

    Returns the :class:`Artifacts` and the list of stages actually run.
    """
    root = seed_dir(out or cfg.out, cfg.seed)
    bundle = load_bundle(root / "data")
    system = bundle.make_system()
    tdir = root / "train"
    tdir.mkdir(parents=True, exist_ok=True)
    metrics = tdir / "metrics.jsonl"
    art = Artifacts(bundle=bundle)
    ran = []

    def have(*names):
        return resume and all((tdir / n).exists() for n in names)

    # dynamics pseudometric
    path = tdir / "dyn_metric.json"
    if have(path.name):
        art.dyn_metric = load_pseudometric(path)
        art.dyn_mask = extract_mask(art.dyn_metric, cfg.dynamics_threshold)
    else:
        t0 = time.perf_counter()
        art.dyn_metric, art.dyn_mask = _guard("dynamics_metric", stage_dynamics_metric, cfg, bundle)
        save_pseudometric(art.dyn_metric, path, threshold=art.dyn_mask.threshold_used)
        ran.append("dynamics_metric")
        _metrics_line(
            metrics,
            "dynamics_metric",
            initial_loss=art.dyn_metric.initial_loss,
            final_loss=art.dyn_metric.final_loss,
            retained=art.dyn_mask.retained.tolist(),
            seconds=round(time.perf_counter() - t0, 3),
        )
    if until == "dynamics_metric":
        return art, ran

    # dynamics GPs
    if have("dyn_sparse.json", "dyn_full.json"):
        art.sparse = load_igp(tdir / "dyn_sparse.json")
        art.full = load_igp(tdir / "dyn_full.json")
        if not np.array_equal(art.sparse.input_mask, art.dyn_mask.retained):
            raise CheckpointError(tdir / "dyn_sparse.json", "input mask disagrees with the dynamics pseudometric")
    else:
        t0 = time.perf_counter()
        art.sparse, art.full = _guard("dynamics", stage_dynamics, cfg, bundle, art.dyn_mask)
        save_igp(art.sparse, tdir / "dyn_sparse.json")
        save_igp(art.full, tdir / "dyn_full.json")
        ran.append("dynamics")
        _metrics_line(
            metrics,
            "dynamics",
            lml_sparse=[g.lml for g in art.sparse.gps],
            lml_full=[g.lml for g in art.full.gps],
            seconds=round(time.perf_counter() - t0, 3),
        )
    if until == "dynamics":
        return art, ran

    # constraint dataset
    if have("constraints.npz"):
        art.constraints = load_constraints(tdir / "constraints.npz")
    else:
        t0 = time.perf_counter()
        art.constraints = _guard("constraint_dataset", stage_constraint_dataset, cfg, bundle, art.sparse)
        save_constraints(art.constraints, tdir / "constraints.npz")
        ran.append("constraint_dataset")
        _metrics_line(
            metrics,
            "constraint_dataset",
            constraint_count=art.constraints.constraint_count,
            states=len(art.constraints),
            dropped=int(len(art.constraints.counts) - len(art.constraints)),
            residual_max=float(art.constraints.residuals.max()) if len(art.constraints) else 0.0,
            seconds=round(time.perf_counter() - t0, 3),
        )
    if until == "constraint_dataset":
        return art, ran

    # manifold
    mdir = tdir / "manifold"
    if have("manifold/manifold.json"):
        art.manifold = load_manifold(mdir / "manifold.json")
    else:
        t0 = time.perf_counter()
        art.manifold = _guard("manifold", stage_manifold, cfg, system, art.constraints)
        save_manifold(art.manifold, mdir)
        ran.append("manifold")
        _metrics_line(
            metrics,
            "manifold",
            constraint_count=art.manifold.constraint_count,
            row_masks=[r.input_mask.tolist() for r in art.manifold.rows],
            lml=[[g.lml for g in r.gps] for r in art.manifold.rows],
            seconds=round(time.perf_counter() - t0, 3),
        )
    return art, ran


def load_artifacts(cfg, out=None, models=None):
    """Load what ``models`` need from the checkpoints of ``cfg.seed``."""
    root = seed_dir(out or cfg.out, cfg.seed)
    tdir = root / "train"
    names = set(models or cfg.eval.models)
    art = Artifacts(bundle=load_bundle(root / "data"))
    if (tdir / "dyn_metric.json").exists():
        art.dyn_metric = load_pseudometric(tdir / "dyn_metric.json")
        art.dyn_mask = extract_mask(art.dyn_metric, cfg.dynamics_threshold)
    if "full_gp" in names:
        art.full = load_igp(_need(tdir / "dyn_full.json"))
    if names & {"sparse_gp", "sparse_gp_learned_proj", "sparse_gp_true_proj"}:
        art.sparse = load_igp(_need(tdir / "dyn_sparse.json"))
    if (tdir / "constraints.npz").exists():
        art.constraints = load_constraints(tdir / "constraints.npz")
    if "sparse_gp_learned_proj" in names:
        art.manifold = load_manifold(_need(tdir / "manifold" / "manifold.json"))
    return art


def _need(path):
    if not path.exists():
        raise CheckpointError(path, "missing checkpoint; run `train` first")
    return path


def run_eval(cfg, out=None, models=None):
    """Evaluate from checkpoints and write ``report.json`` and ``residuals.csv``."""
    art = load_artifacts(cfg, out, models)
    report = evaluate_artifacts(cfg, art, models)
    edir = seed_dir(out or cfg.out, cfg.seed) / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    (edir / "report.json").write_text(report.to_json())
    (edir / "residuals.csv").write_text(report.residuals_csv())
    return report, edir


# --------------------------------------------------------------- aggregate


def aggregate(reports):
    """Median and interquartile range of each model's RMSE across seeds."""
    if not reports:
        raise ContractError("nothing to aggregate")
    docs = [r.to_dict() if hasattr(r, "to_dict") else r for r in reports]
    names = sorted(set.intersection(*(set(d["models"]) for d in docs)))
    out = {"seeds": [d["seed"] for d in docs], "models": {}}
    for name in names:
        vals = np.array([d["models"][name]["rmse_total"] for d in docs])
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        out["models"][name] = {"rmse_median": med, "rmse_iqr": [q1, q3], "rmse_per_seed": vals.tolist()}
    if "full_gp" in names:
        for name in names:
            if name != "full_gp":
                wins = sum(d["models"][name]["rmse_total"] < d["models"]["full_gp"]["rmse_total"] for d in docs)
                out["models"][name]["wins_vs_full_gp"] = int(wins)
    rec = [d["extras"]["constraint_recovery"]["max"] for d in docs if "constraint_recovery" in d.get("extras", {})]
    if rec:
        out["constraint_recovery_max_per_seed"] = rec
    return _clean(out)


def write_aggregate(reports, path):
    path = Path(path)
    path.write_text(json.dumps(aggregate(reports), indent=2, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------------ sweeps

SWEEP_KEYS = {
    "dynamics_threshold": lambda c, v: dataclasses.replace(c, dynamics_threshold=float(v)),
    "constraint_threshold": lambda c, v: dataclasses.replace(c, constraint_threshold=float(v)),
    "sv_eps": lambda c, v: dataclasses.replace(c, manifold=dataclasses.replace(c.manifold, sv_eps=float(v))),
    "lma_count": lambda c, v: dataclasses.replace(c, manifold=dataclasses.replace(c.manifold, lma_count=int(v))),
    "noise_std": lambda c, v: dataclasses.replace(c, data=dataclasses.replace(c.data, noise_std=float(v))),
}


@dataclass
class SweepCell:
    params: dict
    seed: int
    report: object = None
    error: str = None

    def to_dict(self):
        return {
            "params": self.params,
            "seed": self.seed,
            "report": self.report.to_dict() if self.report is not None else None,
            "error": self.error,
        }


def ablation_sweep(cfg, grid, seeds=None, models=None):
    """Evaluate every combination of ``grid`` values for every seed.

    ``grid`` maps a key of :data:`SWEEP_KEYS` to a list of values.  A failing
    cell is recorded with its error and the sweep moves on.
    """
    unknown = set(grid) - set(SWEEP_KEYS)
    if unknown:
        raise ContractError(f"unknown sweep keys {sorted(unknown)}; choose from {sorted(SWEEP_KEYS)}")
    keys = sorted(grid)
    combos = [{}]
    for k in keys:
        combos = [{**c, k: v} for c in combos for v in grid[k]]
    seeds = [cfg.seed] if seeds is None else list(seeds)
    cells = []
    for params in combos:
        ccfg = cfg
        for k, v in params.items():
            ccfg = SWEEP_KEYS[k](ccfg, v)
        for s in seeds:
            cell = SweepCell(dict(params), int(s))
            try:
                cell.report = run_in_memory(ccfg.with_seed(s), models)[1]
            except Exception as exc:  # noqa: BLE001 - failed cells are recorded, not fatal
                log.warning("sweep cell %s seed %d failed: %s", params, s, exc)
                cell.error = f"{type(exc).__name__}: {exc}"
            cells.append(cell)
    return cells


def load_config(path=None, system=None):
    if path is None:
        return PipelineConfig(system=system or "unicycle")
    return PipelineConfig.load(path)
