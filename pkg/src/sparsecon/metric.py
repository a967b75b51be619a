"""Contrastively learned diagonal pseudometrics and sparsity masks.

A pseudometric ``d(z1, z2) = (z1 - z2)^T P (z1 - z2)`` with
``P = diag(w**2)`` is trained with an InfoNCE objective whose similarity is
the cosine under the ``P`` inner product.  Dimensions with negligible
diagonal weight are the directions the supervising labels do not depend on.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .datasets import default_eps, nearest_positives
from .exceptions import CheckpointError, ContractError, FitError

log = logging.getLogger(__name__)

_TINY = 1e-12


@dataclass
class DiagonalPseudometric:
    """Diagonal PSD quadratic form on (optionally standardized) inputs.

    Inputs are mapped through ``(features(z) - center) / scale`` before
    ``diag`` is applied; the defaults make this the identity.  Inputs listed
    in ``angle_dims`` are lifted to ``(cos, sin)`` pairs, so ``diag`` then has
    one entry more per angle than the raw input.
    """

    diag: np.ndarray
    layout: tuple = ()
    angle_dims: tuple = ()
    center: np.ndarray = None
    scale: np.ndarray = None
    final_loss: float = float("nan")
    initial_loss: float = float("nan")
    eps: float = float("nan")
    history: list = field(default_factory=list, repr=False)
    skipped: int = 0

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=float)
        if np.any(self.diag < 0):
            raise ContractError("pseudometric diagonal must be nonnegative")
        self.angle_dims = tuple(int(i) for i in self.angle_dims)
        d = len(self.diag)
        self.center = np.zeros(d) if self.center is None else np.asarray(self.center, float)
        self.scale = np.ones(d) if self.scale is None else np.asarray(self.scale, float)

    @property
    def dim(self):
        return len(self.diag)

    def features(self, z):
        return lift_angles(z, self.angle_dims)[0]

    def transform(self, z):
        return (self.features(z) - self.center) / self.scale

    def input_groups(self, input_dim):
        return lift_angles(np.zeros(input_dim), self.angle_dims)[1]


def lift_angles(z, angle_dims=()):
    """Replace each angle coordinate by its ``(cos, sin)`` pair.

    Returns the features and, per feature, the index of the input it came
    from.
    """
    z = np.asarray(z, dtype=float)
    d = z.shape[-1]
    if not angle_dims:
        return z, np.arange(d)
    cols, groups = [], []
    for i in range(d):
        if i in angle_dims:
            cols += [np.cos(z[..., i]), np.sin(z[..., i])]
            groups += [i, i]
        else:
            cols.append(z[..., i])
            groups.append(i)
    return np.stack(cols, axis=-1), np.asarray(groups)


def distance(pm, z1, z2):
    """Quadratic form ``sum_i diag_i (z1_i - z2_i)**2`` (scaled coordinates)."""
    dz = (pm.features(z1) - pm.features(z2)) / pm.scale
    return np.sum(pm.diag * dz * dz, axis=-1)


def distance_sqrt(pm, z1, z2):
    """Square root of :func:`distance`; satisfies the triangle inequality."""
    return np.sqrt(distance(pm, z1, z2))


def similarity_flagged(pm, z, z2):
    """Generalized cosine and a flag set when either operand has zero P-norm."""
    a, b = pm.transform(z), pm.transform(z2)
    na = np.sqrt(np.sum(pm.diag * a * a))
    nb = np.sqrt(np.sum(pm.diag * b * b))
    if na <= _TINY or nb <= _TINY:
        return 0.0, True
    s = float(np.sum(pm.diag * a * b) / (na * nb))
    return min(1.0, max(-1.0, s)), False


def similarity(pm, z, z2):
    return similarity_flagged(pm, z, z2)[0]


# ------------------------------------------------------------------ InfoNCE


def _unit(Z, p):
    """Rows of Z scaled by sqrt(p) and divided by their P-norm (zero rows stay zero)."""
    n = np.sqrt((Z * Z) @ p)
    ok = n > _TINY
    out = np.zeros_like(Z)
    out[ok] = Z[ok] / n[ok, None]
    return out


def infonce_loss(diag, Z, pairs, include_positive=False):
    """Mean InfoNCE loss over ``pairs`` (reference per-pair implementation).

    ``Z`` holds the inputs in metric coordinates.  With
    ``include_positive=False`` the denominator sums over negatives only.
    """
    return infonce_loss_grad(diag, Z, pairs, include_positive)[0]


def infonce_loss_grad(diag, Z, pairs, include_positive=False):
    """Loss and its gradient with respect to the diagonal entries."""
    p = np.asarray(diag, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if not pairs:
        raise ContractError("InfoNCE needs at least one pair")
    U = _unit(Z, p)
    total, grad = 0.0, np.zeros_like(p)
    for pr in pairs:
        if not pr.negatives:
            raise ContractError(f"anchor {pr.anchor} has no negatives")
        a = U[pr.anchor]
        others = U[[pr.positive, *pr.negatives]]
        s = (others * a) @ p
        # d s_j / d p = a*o_j - s_j/2 (a^2 + o_j^2)
        ds = a * others - 0.5 * s[:, None] * (a * a + others * others)
        logits = s if include_positive else s[1:]
        lse = logsumexp(logits)
        pi = np.exp(logits - lse)
        total += lse - s[0]
        g = -ds[0] + (pi @ ds if include_positive else pi @ ds[1:])
        grad += g
    return total / len(pairs), grad / len(pairs)


def _batch_loss_grad(p, Z, members, positives, include_positive):
    """Vectorized loss/gradient for one batch of member indices."""
    anchors = members[positives[members] >= 0]
    if len(anchors) == 0:
        return None
    pos = positives[anchors]
    U = _unit(Z, p)
    A, B, P = U[anchors], U[members], U[pos]
    S = (A * p) @ B.T
    sp = ((A * P) @ p)
    neg = (members[None, :] != anchors[:, None]) & (members[None, :] != pos[:, None])
    keep = neg.any(axis=1)
    if not keep.any():
        return None
    A, P, S, sp, neg = A[keep], P[keep], S[keep], sp[keep], neg[keep]
    logits = np.where(neg, S, -np.inf)
    if include_positive:
        logits = np.column_stack([sp, logits])
    lse = logsumexp(logits, axis=1)
    W = np.exp(logits - lse[:, None])
    if include_positive:
        wp, W = W[:, 0], W[:, 1:]
    else:
        wp = np.zeros(len(sp))
    k = len(sp)
    loss = float(np.mean(lse - sp))
    # negatives: sum_ij W_ij [a_i*b_j - S_ij/2 (a_i^2 + b_j^2)]
    WS = W * S
    g_neg = (A * (W @ B)).sum(0) - 0.5 * (WS.sum(1) @ (A * A) + WS.sum(0) @ (B * B))
    dpos = A * P - 0.5 * sp[:, None] * (A * A + P * P)
    g_pos = ((wp - 1.0)[:, None] * dpos).sum(0)
    return loss, (g_neg + g_pos) / k, k


@dataclass
class MetricConfig:
    eps: float = None
    eps_frac: float = 0.1
    batch_size: int = 64
    steps: int = 2000
    lr: float = 0.5
    seed: int = 0
    include_positive: bool = False
    rel_threshold: float = 1e-2


def _standardize(A):
    mu = A.mean(0)
    sd = A.std(0)
    return mu, np.where(sd > 1e-12, sd, 1.0)


def _epoch_batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[s:s + batch] for s in range(0, n, batch)]


def full_loss(p, Z, positives, batch, include_positive=False, seed=12345):
    """Loss over one fixed batching of the whole dataset (for monitoring)."""
    rng = np.random.default_rng(seed)
    tot, cnt = 0.0, 0
    for members in _epoch_batches(len(Z), batch, rng):
        out = _batch_loss_grad(p, Z, members, positives, include_positive)
        if out is not None:
            tot += out[0] * out[2]
            cnt += out[2]
    return tot / cnt if cnt else float("nan")


def train_pseudometric(inputs, labels, cfg=None, layout=(), angle_dims=()):
    """Learn a diagonal pseudometric whose small entries mark label-invariant inputs.

    Positives: label-space nearest neighbour at input distance ``>= eps``
    (standardized inputs and labels).  Negatives: the other members of the
    anchor's batch.  Minimizes InfoNCE by gradient descent on ``w`` with
    ``P = diag(w**2)``, a cosine-decayed step, and ``||w||`` renormalized to
    ``sqrt(d)`` after every step (the loss is invariant to the scale of P).

    With a single relevant coordinate the cosine similarity degenerates to
    the product of signs; lifting periodic inputs via ``angle_dims`` keeps it
    informative.
    """
    cfg = cfg or MetricConfig()
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    if angle_dims:
        X, groups = lift_angles(X, tuple(angle_dims))
        base = [layout[g] if g < len(layout) else f"z{g}" for g in groups]
        layout = [
            (("cos_" if k == 0 or groups[k - 1] != g else "sin_") if g in angle_dims else "") + b
            for k, (g, b) in enumerate(zip(groups, base))
        ]
    Y = np.asarray(labels, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    n, d = X.shape
    if len(Y) != n:
        raise ContractError("inputs and labels differ in length")
    if n < cfg.batch_size + 1:
        raise ContractError(f"need at least batch_size + 1 = {cfg.batch_size + 1} items, got {n}")
    center, scale = _standardize(X)
    Z = (X - center) / scale
    ym, ys = _standardize(Y)
    Ys = (Y - ym) / ys
    eps = default_eps(Z, cfg.eps_frac, seed=cfg.seed) if cfg.eps is None else float(cfg.eps)
    positives = nearest_positives(Z, Ys, eps)
    skipped = int((positives < 0).sum())
    if skipped == n:
        raise FitError(f"no anchor has a candidate at input distance >= eps={eps:.4g}")
    if skipped:
        log.info("metric training: %d/%d anchors skipped (eps=%.4g)", skipped, n, eps)

    rng = np.random.default_rng(cfg.seed)
    w = np.ones(d)
    norm = np.sqrt(d)
    initial = full_loss(w * w, Z, positives, cfg.batch_size, cfg.include_positive)
    history = []
    batches = []
    for t in range(cfg.steps):
        if not batches:
            batches = _epoch_batches(n, cfg.batch_size, rng)
        members = batches.pop()
        out = _batch_loss_grad(w * w, Z, members, positives, cfg.include_positive)
        if out is None:
            continue
        loss, gp, _ = out
        history.append(loss)
        lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * t / cfg.steps))
        w = w - lr * 2.0 * w * gp
        w *= norm / max(np.linalg.norm(w), _TINY)
    p = w * w
    final = full_loss(p, Z, positives, cfg.batch_size, cfg.include_positive)
    log.info("metric training: loss %.4f -> %.4f, diag %s", initial, final, np.array2string(p, precision=3))
    return DiagonalPseudometric(
        diag=p,
        layout=tuple(layout),
        angle_dims=tuple(angle_dims),
        center=center,
        scale=scale,
        final_loss=final,
        initial_loss=initial,
        eps=eps,
        history=history,
        skipped=skipped,
    )


# ------------------------------------------------------------------ masks


@dataclass
class SparsityMask:
    retained: np.ndarray
    threshold_used: float
    diag_snapshot: np.ndarray


def extract_mask(pm, rel_threshold=1e-2):
    """Keep dims with ``diag_i > rel_threshold * max(diag)``; the argmax always survives."""
    if not 0 < rel_threshold < 1:
        raise ContractError("rel_threshold must lie in (0, 1)")
    diag = np.array(pm.diag, dtype=float)
    thr = rel_threshold * diag.max()
    keep = diag > thr
    keep[int(np.argmax(diag))] = True
    return SparsityMask(keep, float(thr), diag)


def retained_inputs(pm, mask, input_dim):
    """Collapse a feature-level mask onto raw inputs (an angle survives if cos or sin does)."""
    groups = pm.input_groups(input_dim)
    out = np.zeros(input_dim, bool)
    out[groups[mask.retained]] = True
    return out


# ------------------------------------------------------------- checkpoints


def pseudometric_to_dict(pm, threshold=None):
    return {
        "kind": "pseudometric",
        "diag": pm.diag.tolist(),
        "layout": list(pm.layout),
        "angle_dims": list(pm.angle_dims),
        "center": pm.center.tolist(),
        "scale": pm.scale.tolist(),
        "threshold": threshold,
        "final_loss": pm.final_loss,
        "initial_loss": pm.initial_loss,
        "eps": pm.eps,
        "skipped": pm.skipped,
    }


def pseudometric_from_dict(doc):
    if doc.get("kind") != "pseudometric":
        raise ValueError("not a pseudometric record")
    return DiagonalPseudometric(
        diag=np.asarray(doc["diag"], float),
        layout=tuple(doc.get("layout", ())),
        angle_dims=tuple(doc.get("angle_dims", ())),
        center=np.asarray(doc["center"], float),
        scale=np.asarray(doc["scale"], float),
        final_loss=doc.get("final_loss", float("nan")),
        initial_loss=doc.get("initial_loss", float("nan")),
        eps=doc.get("eps", float("nan")),
        skipped=doc.get("skipped", 0),
    )


def save_pseudometric(pm, path, threshold=None):
    path = Path(path)
    path.write_text(json.dumps(pseudometric_to_dict(pm, threshold), indent=1, sort_keys=True) + "\n")
    return path


def load_pseudometric(path):
    path = Path(path)
    try:
        return pseudometric_from_dict(json.loads(path.read_text()))
    except (OSError, ValueError, KeyError, TypeError, AttributeError) as exc:
        raise CheckpointError(path, f"corrupted pseudometric checkpoint ({exc})") from exc
