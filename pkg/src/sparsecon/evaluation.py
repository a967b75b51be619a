"""Prediction-error evaluation on the OOD test partition."""

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .datasets import flatten
from .exceptions import ContractError
from .manifold import constraint_error
from .project import project_batch

STANDARD_MODELS = ("full_gp", "sparse_gp", "sparse_gp_learned_proj", "sparse_gp_true_proj")


@dataclass
class ModelMetrics:
    name: str
    rmse_per_dim: np.ndarray
    rmse_total: float
    constraint_violation_mean: float
    residuals: np.ndarray = field(repr=False)

    def to_dict(self):
        return {
            "name": self.name,
            "rmse_per_state_dim": self.rmse_per_dim.tolist(),
            "rmse_total": self.rmse_total,
            "constraint_violation_mean": self.constraint_violation_mean,
        }


@dataclass
class EvalReport:
    models: dict
    ood_distance_stats: dict
    config_hash: str
    seed: int
    system: str
    extras: dict = field(default_factory=dict)

    def rmse(self, name):
        return self.models[name].rmse_total

    def to_dict(self):
        return {
            "system": self.system,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "ood_distance_stats": self.ood_distance_stats,
            "models": {k: v.to_dict() for k, v in sorted(self.models.items())},
            "extras": self.extras,
        }

    def to_json(self):
        return json.dumps(_clean(self.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def residuals_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = sorted(self.models)
        if not names:
            return ""
        n = self.models[names[0]].residuals.shape[1]
        w.writerow(["model", "index", *[f"r{i}" for i in range(n)]])
        for name in names:
            for k, r in enumerate(self.models[name].residuals):
                w.writerow([name, k, *map(repr, r.tolist())])
        return buf.getvalue()


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def config_hash(doc):
    return hashlib.sha256(json.dumps(_clean(doc), sort_keys=True).encode()).hexdigest()[:16]


def true_gammas(system, states, pivoting="volume", row_scale="unit"):
    return np.stack([system.true_constraint(x, pivoting, row_scale) for x in states])


def standard_models(system, dyn_full=None, dyn_sparse=None, manifold=None):
    """The four standard entrants as ``name -> predict(states, controls)`` maps."""
    models = {}
    if dyn_full is not None:
        models["full_gp"] = lambda X, U: dyn_full.predict(np.hstack([X, U]))
    if dyn_sparse is not None:
        models["sparse_gp"] = lambda X, U: dyn_sparse.predict(np.hstack([X, U]))

        if manifold is not None:

            def learned(X, U):
                Gam = manifold.gamma(X)
                return project_batch(Gam[..., :-1], Gam[..., -1], dyn_sparse.predict(np.hstack([X, U])))[0]

            models["sparse_gp_learned_proj"] = learned

        def oracle(X, U):
            Gam = true_gammas(system, X)
            return project_batch(Gam[..., :-1], Gam[..., -1], dyn_sparse.predict(np.hstack([X, U])))[0]

        models["sparse_gp_true_proj"] = oracle
    return models


def evaluate(models, bundle, system=None, cfg_hash="", seed=None, extras=None):
    """RMSE and true-constraint violation of every model on ``bundle.test``."""
    system = system or bundle.make_system()
    T = bundle.test
    n = system.state_dim
    if T.states.shape[1] != n or T.controls.shape[1] != system.control_dim:
        raise ContractError("bundle layout does not match the system")
    Gam = true_gammas(system, T.states)
    out = {}
    for name in sorted(models):
        pred = np.asarray(models[name](T.states, T.controls), dtype=float)
        if pred.shape != T.derivs.shape:
            raise ContractError(f"model {name!r} returned shape {pred.shape}, expected {T.derivs.shape}")
        res = pred - T.derivs
        viol = np.abs(np.einsum("scn,sn->sc", Gam[..., :-1], pred) + Gam[..., -1])
        out[name] = ModelMetrics(
            name=name,
            rmse_per_dim=np.sqrt(np.mean(res**2, axis=0)),
            rmse_total=float(np.sqrt(np.mean(np.sum(res**2, axis=1)))),
            constraint_violation_mean=float(viol.mean()) if viol.size else 0.0,
            residuals=res,
        )
    train = flatten(bundle, ("offline", "online")).states
    d = np.sqrt(((T.states[:, None, :] - train[None, :, :]) ** 2).sum(-1)).min(1)
    stats = {
        "min": float(d.min()),
        "median": float(np.median(d)),
        "max": float(d.max()),
        "margin": float(bundle.generation.get("ood_margin", float("nan"))) if bundle.generation else None,
    }
    return EvalReport(out, stats, cfg_hash, bundle.seed if seed is None else seed, bundle.system, extras or {})


def recovery_error(system, manifold, states, pivoting="volume", row_scale="unit"):
    """Per-state max-norm error of ``Gamma_hat`` against the analytic constraint (up to row sign)."""
    G_true = true_gammas(system, states, pivoting, row_scale)
    G_hat = manifold.gamma(states)
    if G_hat.shape != G_true.shape:
        return np.full(len(states), np.inf)
    return constraint_error(G_hat, G_true)
