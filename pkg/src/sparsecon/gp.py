"""Exact Gaussian-process regression with an ARD squared-exponential kernel.

Hyperparameters live in log space.  Inputs and labels are standardized per
dimension (training statistics) unless ``normalize=False``; predictions are
returned in the original label units.
"""

import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.linalg.lapack import dpotri
from scipy.optimize import minimize

from .exceptions import CheckpointError, ContractError, FitError

log = logging.getLogger(__name__)

JITTERS = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
LOG2PI = np.log(2 * np.pi)


@dataclass
class KernelHyperparams:
    log_signal_var: float
    log_lengthscales: np.ndarray
    log_noise_var: float

    def __post_init__(self):
        self.log_lengthscales = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float))

    @classmethod
    def from_values(cls, signal_var, lengthscales, noise_var):
        return cls(np.log(signal_var), np.log(lengthscales), np.log(noise_var))

    @property
    def dim(self):
        return len(self.log_lengthscales)

    @property
    def signal_var(self):
        return float(np.exp(self.log_signal_var))

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscales)

    @property
    def noise_var(self):
        return float(np.exp(self.log_noise_var))

    def to_vector(self):
        return np.concatenate([[self.log_signal_var], self.log_lengthscales, [self.log_noise_var]])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), v[1:-1].copy(), float(v[-1]))

    def to_dict(self):
        return {
            "log_signal_var": float(self.log_signal_var),
            "log_lengthscales": self.log_lengthscales.tolist(),
            "log_noise_var": float(self.log_noise_var),
        }


def ard_gram(A, B, hyper):
    """Noise-free kernel matrix ``k(A_i, B_j)``."""
    A = np.atleast_2d(A) / hyper.lengthscales
    B = np.atleast_2d(B) / hyper.lengthscales
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return hyper.signal_var * np.exp(-0.5 * np.maximum(sq, 0.0))


def kernel_eval(hyper, a, b):
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    if a.shape != (hyper.dim,) or b.shape != (hyper.dim,):
        raise ContractError(f"kernel inputs must have dim {hyper.dim}")
    r2 = np.sum(((a - b) / hyper.lengthscales) ** 2)
    return hyper.signal_var * float(np.exp(-0.5 * r2))


def _cholesky(K, noise_var):
    n = len(K)
    if not np.all(np.isfinite(K)):
        raise FitError(f"non-finite entries in {n}x{n} kernel matrix")
    for jitter in JITTERS:
        try:
            return cholesky(K + (noise_var + jitter) * np.eye(n), lower=True), jitter
        except LinAlgError:
            continue
    raise FitError(
        f"Cholesky failed for {n}x{n} kernel matrix with noise {noise_var:.3g} "
        f"and jitter up to {JITTERS[-1]:.0e}"
    )


def log_marginal_likelihood(hyper, X, y, grad=False):
    """Log marginal likelihood of zero-mean GP data, optionally with its gradient.

    The gradient is with respect to ``hyper.to_vector()`` (log parameters).
    """
    X = np.atleast_2d(X)
    y = np.asarray(y, dtype=float)
    n = len(y)
    Kf = ard_gram(X, X, hyper)
    L, jitter = _cholesky(Kf, hyper.noise_var)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG2PI
    if not grad:
        return lml
    Kinv, info = dpotri(L, lower=1)
    if info != 0:
        raise FitError(f"dpotri failed (info={info})")
    Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
    W = np.outer(alpha, alpha) - Kinv
    WK = W * Kf
    g = np.empty(hyper.dim + 2)
    g[0] = 0.5 * WK.sum()
    Xs = X / hyper.lengthscales
    for i in range(hyper.dim):
        D = (Xs[:, i][:, None] - Xs[:, i][None, :]) ** 2
        g[1 + i] = 0.5 * (WK * D).sum()
    g[-1] = 0.5 * hyper.noise_var * np.trace(W)
    return lml, g


@dataclass
class GpConfig:
    restarts: int = 3
    max_iter: int = 200
    rel_tol: float = 1e-7
    max_opt_points: int = 400
    normalize: bool = True
    seed: int = 0
    lengthscale_bounds: tuple = (1e-2, 1e3)
    signal_var_bounds: tuple = (1e-4, 1e4)
    noise_var_bounds: tuple = (1e-6, 1.0)


@dataclass
class ScalarGp:
    """Conditioned scalar GP (cached Cholesky factor and weights)."""

    hyper: KernelHyperparams
    X: np.ndarray
    y: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    L: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0
    lml: float = float("nan")
    lml_trace: list = field(default_factory=list, repr=False)

    @property
    def train_inputs(self):
        return self.X * self.x_scale + self.x_mean

    @property
    def train_labels(self):
        return self.y * self.y_scale + self.y_mean

    @property
    def normalized(self):
        return not (np.all(self.x_scale == 1) and np.all(self.x_mean == 0) and self.y_scale == 1 and self.y_mean == 0)


def _stats(A, normalize):
    if not normalize:
        return np.zeros(A.shape[1:]), np.ones(A.shape[1:])
    mu = A.mean(axis=0)
    sd = A.std(axis=0)
    sd = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mu)), sd, 1.0)
    return mu, sd


def condition(inputs, labels, hyper, normalize=True, stats=None):
    """Build a ScalarGp for fixed hyperparameters.

    ``stats`` optionally fixes ``(x_mean, x_scale, y_mean, y_scale)``.
    """
    Xr = np.atleast_2d(np.asarray(inputs, dtype=float))
    yr = np.asarray(labels, dtype=float).ravel()
    if len(Xr) != len(yr) or len(yr) == 0:
        raise ContractError("inputs and labels must be nonempty and of equal length")
    if Xr.shape[1] != hyper.dim:
        raise ContractError(f"input dim {Xr.shape[1]} != kernel dim {hyper.dim}")
    if stats is None:
        xm, xs = _stats(Xr, normalize)
        ym, ys = _stats(yr[:, None], normalize)
        stats = (xm, xs, float(ym[0]), float(ys[0]))
    xm, xs, ym, ys = stats
    return _assemble((Xr - xm) / xs, (yr - ym) / ys, hyper, stats)


def _assemble(X, y, hyper, stats):
    xm, xs, ym, ys = stats
    L, jitter = _cholesky(ard_gram(X, X, hyper), hyper.noise_var)
    alpha = cho_solve((L, True), y)
    return ScalarGp(hyper, X, y, np.asarray(xm, float), np.asarray(xs, float), float(ym), float(ys), L, alpha, jitter)


def predict_mean(gp, query):
    """Posterior mean at one query (returns float) or a batch (returns array)."""
    q = np.asarray(query, dtype=float)
    single = q.ndim == 1
    Q = (np.atleast_2d(q) - gp.x_mean) / gp.x_scale
    mu = ard_gram(Q, gp.X, gp.hyper) @ gp.alpha * gp.y_scale + gp.y_mean
    return float(mu[0]) if single else mu


def predict_var(gp, query):
    """Posterior latent variance (diagnostics only)."""
    Q = (np.atleast_2d(np.asarray(query, float)) - gp.x_mean) / gp.x_scale
    Ks = ard_gram(Q, gp.X, gp.hyper)
    v = solve_triangular(gp.L, Ks.T, lower=True)
    return (gp.hyper.signal_var - (v * v).sum(0)) * gp.y_scale**2


def _initial_points(d, restarts, rng):
    first = KernelHyperparams(0.0, np.zeros(d), np.log(1e-2)).to_vector()
    pts = [first]
    for _ in range(max(0, restarts - 1)):
        pts.append(
            np.concatenate(
                [
                    [rng.uniform(-1.0, 1.0)],
                    rng.uniform(np.log(0.3), np.log(3.0), d),
                    [rng.uniform(np.log(1e-4), np.log(1e-1))],
                ]
            )
        )
    return pts


def fit(inputs, labels, cfg=None):
    """Fit hyperparameters by maximizing the log marginal likelihood.

    Optimization runs L-BFGS-B on the analytic gradient from ``cfg.restarts``
    starting points over at most ``cfg.max_opt_points`` (seeded subsample);
    the winning hyperparameters are then conditioned on all data.
    """
    cfg = cfg or GpConfig()
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(labels, dtype=float).ravel()
    if len(y) < 2 or len(X) != len(y):
        raise ContractError(f"GP fit needs >= 2 paired samples, got {len(X)} inputs / {len(y)} labels")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ContractError("GP fit data must be finite")
    d = X.shape[1]
    xm, xs = _stats(X, cfg.normalize)
    ym, ys = _stats(y[:, None], cfg.normalize)
    stats = (xm, xs, float(ym[0]), float(ys[0]))
    Xn, yn = (X - xm) / xs, (y - stats[2]) / stats[3]
    if cfg.normalize and np.ptp(y) == 0:
        # constant labels: nothing to learn, the posterior mean is the constant
        hyper = KernelHyperparams(0.0, np.zeros(d), np.log(cfg.noise_var_bounds[1]))
        gp = condition(X, y, hyper, stats=stats)
        gp.lml = float(log_marginal_likelihood(hyper, gp.X, gp.y))
        gp.lml_trace = [gp.lml]
        return gp
    rng = np.random.default_rng(cfg.seed)
    if len(yn) > cfg.max_opt_points:
        sub = np.sort(rng.choice(len(yn), cfg.max_opt_points, replace=False))
        Xo, yo = Xn[sub], yn[sub]
    else:
        Xo, yo = Xn, yn

    bounds = (
        [tuple(np.log(cfg.signal_var_bounds))]
        + [tuple(np.log(cfg.lengthscale_bounds))] * d
        + [tuple(np.log(cfg.noise_var_bounds))]
    )

    last = {}

    def objective(v):
        lml, g = log_marginal_likelihood(KernelHyperparams.from_vector(v), Xo, yo, grad=True)
        last["x"], last["lml"] = v.copy(), float(lml)
        return -lml, -g

    def record(trace, xk):
        if "x" in last and np.array_equal(xk, last["x"]):
            trace.append(last["lml"])
        else:
            trace.append(float(log_marginal_likelihood(KernelHyperparams.from_vector(xk), Xo, yo)))

    best = None
    for start in _initial_points(d, cfg.restarts, rng):
        start = np.clip(start, [b[0] for b in bounds], [b[1] for b in bounds])
        trace = [-objective(start)[0]]
        try:
            res = minimize(
                objective,
                start,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                callback=lambda xk, trace=trace: record(trace, xk),
                options={"maxiter": cfg.max_iter, "ftol": cfg.rel_tol},
            )
        except FitError as exc:
            log.debug("restart failed: %s", exc)
            continue
        lml = -float(res.fun)
        if lml < trace[0]:
            res.x, lml = start, trace[0]
        if best is None or lml > best[1]:
            best = (res.x, lml, trace)
    if best is None:
        raise FitError("all hyperparameter restarts failed")
    hyper = KernelHyperparams.from_vector(best[0])
    gp = condition(X, y, hyper, stats=stats)
    gp.lml, gp.lml_trace = best[1], best[2]
    return gp


@dataclass
class IgpModel:
    """Independent scalar GPs, one per output, sharing a masked input layout."""

    gps: list
    input_mask: np.ndarray

    @property
    def output_dim(self):
        return len(self.gps)

    def predict(self, inputs):
        Z = np.asarray(inputs, dtype=float)
        single = Z.ndim == 1
        Z = np.atleast_2d(Z)
        if Z.shape[1] != len(self.input_mask):
            raise ContractError(f"input dim {Z.shape[1]} != mask length {len(self.input_mask)}")
        Zr = Z[:, self.input_mask]
        out = np.column_stack([predict_mean(g, Zr) for g in self.gps])
        return out[0] if single else out


def fit_igp(inputs, labels, mask=None, cfg=None):
    """One ScalarGp per label column on the inputs retained by ``mask``."""
    cfg = cfg or GpConfig()
    Z = np.atleast_2d(np.asarray(inputs, dtype=float))
    Y = np.asarray(labels, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(Z) == 0:
        raise ContractError("cannot fit an IGP on an empty dataset")
    mask = np.ones(Z.shape[1], bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != (Z.shape[1],) or not mask.any():
        raise ContractError("mask must match the input dim and retain at least one dimension")
    seeds = np.random.SeedSequence(cfg.seed).generate_state(Y.shape[1])
    gps = []
    for k in range(Y.shape[1]):
        sub = GpConfig(**{**cfg.__dict__, "seed": int(seeds[k])})
        try:
            gps.append(fit(Z[:, mask], Y[:, k], sub))
        except (FitError, ContractError) as exc:
            raise FitError(f"output dimension {k}: {exc}") from exc
    return IgpModel(gps, mask)


# ------------------------------------------------------------- checkpoints


def _sha256(buf):
    return hashlib.sha256(buf).hexdigest()


def save_igp(model, path, meta=None):
    """Write ``<path>`` (JSON) plus ``<path>.npz`` holding the training data.

    The standardized data are stored so that loading rebuilds bit-identical
    factorizations.
    """
    path = Path(path)
    if not model.gps:
        raise ContractError("cannot save an IGP without outputs")
    X = model.gps[0].X
    if any(g.X.shape != X.shape or not np.array_equal(g.X, X) for g in model.gps):
        raise ContractError("IGP outputs must share standardized inputs")
    Y = np.column_stack([g.y for g in model.gps])
    buf = io.BytesIO()
    np.savez(buf, inputs=X, labels=Y)
    data = buf.getvalue()
    data_path = path.with_suffix(".npz")
    data_path.write_bytes(data)
    doc = {
        "kind": "igp",
        "version": "1",
        "input_mask": model.input_mask.astype(bool).tolist(),
        "data_file": data_path.name,
        "data_sha256": _sha256(data),
        "gps": [
            {
                "hyper": g.hyper.to_dict(),
                "x_mean": g.x_mean.tolist(),
                "x_scale": g.x_scale.tolist(),
                "y_mean": g.y_mean,
                "y_scale": g.y_scale,
                "lml": g.lml,
            }
            for g in model.gps
        ],
        "meta": meta or {},
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_igp(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        if doc.get("kind") != "igp":
            raise ValueError("not an IGP checkpoint")
        data_path = path.parent / doc["data_file"]
        data = data_path.read_bytes()
        if _sha256(data) != doc["data_sha256"]:
            raise ValueError(f"training-data hash mismatch for {data_path.name}")
        arrs = np.load(io.BytesIO(data))
        X, Y = arrs["inputs"], arrs["labels"]
        gps = []
        for k, rec in enumerate(doc["gps"]):
            h = rec["hyper"]
            hyper = KernelHyperparams(h["log_signal_var"], np.asarray(h["log_lengthscales"]), h["log_noise_var"])
            stats = (np.asarray(rec["x_mean"]), np.asarray(rec["x_scale"]), rec["y_mean"], rec["y_scale"])
            if X.shape[1] != hyper.dim or len(X) != len(Y):
                raise ValueError("stored data do not match the kernel")
            gp = _assemble(X, Y[:, k], hyper, stats)
            gp.lml = rec.get("lml", float("nan"))
            gps.append(gp)
        return IgpModel(gps, np.asarray(doc["input_mask"], bool))
    except (OSError, ValueError, KeyError, TypeError, AttributeError, json.JSONDecodeError, FitError) as exc:
        raise CheckpointError(path, f"corrupted GP checkpoint ({exc})") from exc
