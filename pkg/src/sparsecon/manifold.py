"""Learning the constraint manifold from a learned dynamics model.

At each state the learned dynamics are queried under many controls (the
learned multi-action, LMA, matrix with rows ``[f_hat(x, u_k), 1]``).  Its
numerical null space, reduced to a canonical echelon form and sign-aligned
with a neighbouring state, gives an approximate normal-space basis
``Gamma_approx(x)``.  One pseudometric per constraint row selects the state
coordinates that row depends on, and one scalar GP per entry interpolates
``Gamma_hat(x) = [G_hat(x) g_hat(x)]``.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, ContractError, ManifoldError
from .gp import GpConfig, IgpModel, fit_igp, load_igp, save_igp
from .linalg import PIVOT_TOL, standardize_rows
from .metric import (
    MetricConfig,
    SparsityMask,
    extract_mask,
    pseudometric_from_dict,
    pseudometric_to_dict,
    retained_inputs,
    train_pseudometric,
)

log = logging.getLogger(__name__)


@dataclass
class LmaMatrix:
    at_state: np.ndarray
    rows: np.ndarray
    controls_used: np.ndarray


@dataclass
class ConstraintBasis:
    at_state: np.ndarray
    gamma: np.ndarray
    singular_values: np.ndarray


@dataclass
class ManifoldConfig:
    lma_count: int = None  # K; default 4 * (n - c_expected)
    sv_eps: float = 1e-2
    relative_eps: bool = True
    c_expected: int = None
    min_agreement: float = 0.95
    ref_order: str = "mst"  # or "trajectory"
    pivoting: str = "volume"  # or "leftmost"
    row_scale: str = "unit"  # or "pivot"
    seed: int = 0

    def lma_rows(self, n):
        if self.lma_count is not None:
            return int(self.lma_count)
        return 4 * max(1, n - (self.c_expected if self.c_expected is not None else 1))


def _lma_stack(dyn, states, controls):
    """Rows ``[f_hat(x_s, u_sk), 1]`` for every state s and control k."""
    S, K, m = controls.shape
    Z = np.hstack([np.repeat(states, K, axis=0), controls.reshape(S * K, m)])
    F = dyn.predict(Z).reshape(S, K, -1)
    return np.concatenate([F, np.ones((S, K, 1))], axis=2)


def _threshold(s, eps, relative):
    return eps * s[..., :1] if relative else np.full(s[..., :1].shape, eps)


def build_lma(dyn, x, K, control_bounds, rng, c_expected=None, sv_eps=1e-2, relative_eps=True, controls=None):
    """Sample ``K`` controls uniformly in the box and stack the learned derivatives.

    ``controls`` (K x m) replaces the sampling; no resampling is then done.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    bounds = np.asarray(control_bounds, dtype=float)
    need = n - (c_expected or 0)
    if K < need:
        raise ContractError(f"LMA needs K >= n - c = {need} controls, got {K}")
    if controls is not None:
        U = np.atleast_2d(np.asarray(controls, dtype=float))
        if U.shape != (K, len(bounds)):
            raise ContractError(f"controls must be {K}x{len(bounds)}")
        return LmaMatrix(x, _lma_stack(dyn, x[None, :], U[None])[0], U)
    for attempt in range(2):
        U = rng.uniform(bounds[:, 0], bounds[:, 1], size=(K, len(bounds)))
        rows = _lma_stack(dyn, x[None, :], U[None])[0]
        s = np.linalg.svd(rows, compute_uv=False)
        rank = int((s >= _threshold(s, sv_eps, relative_eps)[0]).sum())
        if rank >= need:
            return LmaMatrix(x, rows, U)
        log.debug("LMA rank %d < %d at %s (attempt %d), resampling", rank, need, x, attempt)
    raise ManifoldError(f"LMA row space rank {rank} < n - c = {need} after resampling; singular values {s}")


def null_space_basis(lma_rows, eps=1e-2, relative=True):
    """Right-singular vectors with singular value below the threshold.

    Returns ``(V2, singular_values)``; the spectrum is padded with zeros up to
    ``n + 1`` so rank deficiency from having few rows counts as null space.
    """
    A = np.asarray(getattr(lma_rows, "rows", lma_rows), dtype=float)
    if not eps > 0:
        raise ContractError("singular-value threshold must be positive")
    d = A.shape[1]
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    s = np.concatenate([s, np.zeros(d - len(s))])
    thr = eps * s[0] if relative else eps
    V2 = Vt[s < thr].T
    if V2.shape[1] >= d - 1:
        raise ManifoldError(f"degenerate LMA matrix: null space of dim {V2.shape[1]} >= n = {d - 1}; spectrum {s}")
    return V2, s


def standardize_basis(V2t, ref_gamma=None, pivoting="volume", n_state=None, row_scale="unit"):
    """Echelon-standardize a null-space basis and align its row signs with ``ref_gamma``."""
    A = np.atleast_2d(V2t)
    n_state = A.shape[1] - 1 if n_state is None else n_state
    return standardize_rows(A, ref_gamma, pivoting=pivoting, n_primary=n_state, row_scale=row_scale)


# ------------------------------------------------------------ sign chains


def reference_order(points, how="mst", groups=None):
    """Processing order and sign reference for every point.

    ``"mst"`` grows a tree from point 0, always attaching the unprocessed
    point closest to the processed set (Prim's algorithm).  ``"trajectory"``
    keeps the given order and links each point to its nearest predecessor.
    The first point's reference is ``-1``.
    """
    P = np.asarray(points, dtype=float)
    n = len(P)
    ref = np.full(n, -1, dtype=int)
    if n == 0:
        return np.empty(0, dtype=int), ref
    if how == "trajectory":
        for i in range(1, n):
            ref[i] = int(np.argmin(((P[:i] - P[i]) ** 2).sum(1)))
        return np.arange(n), ref
    if how != "mst":
        raise ValueError(f"unknown reference order {how!r}")
    order = [0]
    done = np.zeros(n, bool)
    done[0] = True
    best = ((P - P[0]) ** 2).sum(1)
    parent = np.zeros(n, dtype=int)
    best[0] = np.inf
    for _ in range(n - 1):
        i = int(np.argmin(best))
        order.append(i)
        ref[i] = parent[i]
        done[i] = True
        best[i] = np.inf
        d = ((P - P[i]) ** 2).sum(1)
        closer = (~done) & (d < best)
        best[closer] = d[closer]
        parent[closer] = i
    return np.asarray(order), ref


@dataclass
class ConstraintDataset:
    """Approximate normal-space bases at training states."""

    states: np.ndarray
    gammas: np.ndarray  # (S, c, n + 1)
    singular_values: np.ndarray  # (S, n + 1) for the kept states
    residuals: np.ndarray  # max |LMA @ V2| per kept state
    thresholds: np.ndarray  # absolute singular-value threshold per kept state
    kept: np.ndarray  # indices into the input states
    counts: np.ndarray  # detected c for every input state
    order: np.ndarray
    refs: np.ndarray
    constraint_count: int
    lma_rows: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.states)

    def bases(self):
        return [ConstraintBasis(x, g, s) for x, g, s in zip(self.states, self.gammas, self.singular_values)]


def build_constraint_dataset(dyn, states, control_bounds, cfg=None, ref_dims=None):
    """Compute ``Gamma_approx`` at every state.

    ``ref_dims`` selects the (standardized) state coordinates used to find
    the sign reference of each state; by default the state coordinates kept
    by the dynamics input mask, since ``f_hat`` cannot vary along the rest.
    """
    cfg = cfg or ManifoldConfig()
    X = np.atleast_2d(np.asarray(states, dtype=float))
    S, n = X.shape
    if S == 0:
        raise ContractError("no states to build a constraint dataset from")
    K = cfg.lma_rows(n)
    if cfg.c_expected is not None and K < n - cfg.c_expected:
        raise ContractError(f"K={K} < n - c_expected = {n - cfg.c_expected}")
    bounds = np.asarray(control_bounds, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    U = rng.uniform(bounds[:, 0], bounds[:, 1], size=(S, K, len(bounds)))
    rows = _lma_stack(dyn, X, U)
    _, s, Vt = np.linalg.svd(rows, full_matrices=True)
    s = np.concatenate([s, np.zeros((S, n + 1 - s.shape[1]))], axis=1)
    thr = _threshold(s, cfg.sv_eps, cfg.relative_eps)
    null = s < thr
    counts = null.sum(1)

    tally = Counter(counts.tolist())
    c, votes = tally.most_common(1)[0]
    share = votes / S
    if share < cfg.min_agreement:
        spectra = {k: np.median(s[counts == k], axis=0).round(6).tolist() for k in sorted(tally)}
        raise ManifoldError(
            f"no consistent constraint count: {dict(tally)} (modal share {share:.3f} < "
            f"{cfg.min_agreement}); median spectra per count: {spectra}"
        )
    if c >= n:
        raise ManifoldError(f"detected {c} constraints for a {n}-dimensional state")
    kept = np.flatnonzero(counts == c)
    if len(kept) < S:
        log.info("constraint dataset: dropped %d/%d states with c != %d", S - len(kept), S, c)
    log.info("constraint dataset: c=%d on %d states (share %.3f)", c, len(kept), share)

    resid = np.array([np.abs(rows[i] @ Vt[i][null[i]].T).max() if c else 0.0 for i in kept])
    if c == 0:
        gammas = np.zeros((len(kept), 0, n + 1))
        order, refs = np.arange(len(kept)), np.full(len(kept), -1)
    else:
        raw = np.stack([standardize_basis(Vt[i][null[i]], None, cfg.pivoting, n, cfg.row_scale) for i in kept])
        mask = np.ones(n, bool) if ref_dims is None else np.asarray(ref_dims, bool)
        P = X[kept][:, mask]
        sd = P.std(0)
        P = (P - P.mean(0)) / np.where(sd > 1e-12, sd, 1.0)
        order, refs = reference_order(P, cfg.ref_order)
        gammas = raw.copy()
        for i in order:
            r = refs[i]
            if r >= 0:
                flip = np.einsum("ij,ij->i", gammas[i], gammas[r]) < 0
                gammas[i][flip] *= -1.0
    return ConstraintDataset(
        states=X[kept],
        gammas=gammas,
        singular_values=s[kept],
        residuals=resid,
        thresholds=thr[kept, 0],
        kept=kept,
        counts=counts,
        order=order,
        refs=refs,
        constraint_count=int(c),
        lma_rows=rows[kept],
    )


# ----------------------------------------------------------------- model


@dataclass
class ManifoldModel:
    """Per-row IGPs evaluating ``Gamma_hat(x)``."""

    rows: list  # one IgpModel per constraint row, n + 1 outputs each
    row_masks: list  # SparsityMask per row
    state_dim: int
    row_metrics: list = field(default_factory=list, repr=False)

    @property
    def constraint_count(self):
        return len(self.rows)

    def gamma(self, states):
        X = np.atleast_2d(np.asarray(states, dtype=float))
        if X.shape[1] != self.state_dim:
            raise ContractError(f"state dim {X.shape[1]} != {self.state_dim}")
        if not self.rows:
            return np.zeros((len(X), 0, self.state_dim + 1))
        return np.stack([r.predict(X) for r in self.rows], axis=1)


def train_manifold(dataset, metric_cfg=None, gp_cfg=None, rel_threshold=1e-2, layout=(), angle_dims=()):
    """One pseudometric, mask and IGP per constraint row.

    ``row_masks`` hold the metric-level masks (angles lifted to cos/sin);
    each row's IGP carries the collapsed mask over raw state coordinates.
    """
    metric_cfg = metric_cfg or MetricConfig()
    gp_cfg = gp_cfg or GpConfig()
    if len(dataset) == 0:
        raise ContractError("empty constraint dataset")
    X = dataset.states
    n = X.shape[1]
    rows, masks, metrics = [], [], []
    for i in range(dataset.constraint_count):
        labels = dataset.gammas[:, i, :]
        pm = train_pseudometric(X, labels, metric_cfg, layout=layout, angle_dims=angle_dims)
        mask = extract_mask(pm, rel_threshold)
        keep = retained_inputs(pm, mask, n)
        log.info("constraint row %d: retained states %s", i, np.flatnonzero(keep).tolist())
        sub = GpConfig(**{**gp_cfg.__dict__, "seed": gp_cfg.seed + 7919 * (i + 1)})
        rows.append(fit_igp(X, labels, keep, sub))
        masks.append(mask)
        metrics.append(pm)
    return ManifoldModel(rows, masks, n, metrics)


def eval_constraint(mm, x):
    """``(G_hat, g_hat)`` at one state, or stacked ``(S, c, n)``, ``(S, c)`` for a batch."""
    x = np.asarray(x, dtype=float)
    Gam = mm.gamma(x)
    if x.ndim == 1:
        Gam = Gam[0]
    return Gam[..., :-1], Gam[..., -1]


def constraint_error(gamma_hat, gamma_true):
    """Max-norm distance per state, each row compared up to its sign."""
    A = np.asarray(gamma_hat, dtype=float)
    B = np.asarray(gamma_true, dtype=float)
    plus = np.abs(A - B).max(-1)
    minus = np.abs(A + B).max(-1)
    return np.minimum(plus, minus).max(-1) if A.shape[-2] else np.zeros(A.shape[:-2])


# ------------------------------------------------------------- checkpoints


def save_manifold(mm, directory, stem="manifold"):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (r, mask) in enumerate(zip(mm.rows, mm.row_masks)):
        name = f"{stem}_row{i}.json"
        save_igp(r, d / name)
        rec = {
            "gp": name,
            "retained": mask.retained.tolist(),
            "threshold_used": mask.threshold_used,
            "diag_snapshot": mask.diag_snapshot.tolist(),
        }
        if i < len(mm.row_metrics):
            rec["metric"] = pseudometric_to_dict(mm.row_metrics[i], mask.threshold_used)
        rows.append(rec)
    doc = {"kind": "manifold", "version": "1", "constraint_count": mm.constraint_count, "state_dim": mm.state_dim, "rows": rows}
    path = d / f"{stem}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_manifold(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        if doc.get("kind") != "manifold":
            raise ValueError("not a manifold checkpoint")
        rows, masks, metrics = [], [], []
        for rec in doc["rows"]:
            rows.append(load_igp(path.parent / rec["gp"]))
            masks.append(
                SparsityMask(np.asarray(rec["retained"], bool), rec["threshold_used"], np.asarray(rec["diag_snapshot"]))
            )
            if "metric" in rec:
                metrics.append(pseudometric_from_dict(rec["metric"]))
        if len(rows) != doc["constraint_count"]:
            raise ValueError("row count disagrees with constraint_count")
        return ManifoldModel(rows, masks, int(doc["state_dim"]), metrics)
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, TypeError, AttributeError) as exc:
        raise CheckpointError(path, f"corrupted manifold checkpoint ({exc})") from exc
