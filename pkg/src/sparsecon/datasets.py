"""Offline / online / OOD-test datasets: generation, pairing and file I/O.

On disk a bundle is a directory holding ``bundle.manifest.json`` plus three
JSON-lines files:

``offline.traj.jsonl``
    one trajectory per line: ``{"dt", "states", "controls", "derivs"}``
``online.traj.jsonl``
    the single online trajectory, same schema
``test.traj.jsonl``
    one OOD test sample per line: ``{"state", "control", "deriv"}``

Floats are written with ``repr`` (shortest round-trip form), so a save/load
cycle is bit exact.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .exceptions import CheckpointError, ContractError, GenerationError
from .systems import Trajectory, make_system, rollout

log = logging.getLogger(__name__)

FORMAT_VERSION = "1"
MANIFEST = "bundle.manifest.json"
PARTITIONS = ("offline", "online", "test")


@dataclass
class GenerationConfig:
    n_traj: int = 20
    horizon: int = 50
    dt: float = 0.05
    hold_steps: int = 5
    noise_std: float = 0.0
    train_region: list = field(default_factory=list)
    test_region: list = field(default_factory=list)
    n_test: int = 500
    ood_margin: float = 3.0
    max_test_draws: int = 200

    def validate(self, state_dim):
        if self.n_traj < 1 or self.horizon < 2 or self.n_test < 1:
            raise ContractError("need n_traj >= 1, horizon >= 2, n_test >= 1")
        if not self.dt > 0 or self.hold_steps < 1 or self.noise_std < 0:
            raise ContractError("need dt > 0, hold_steps >= 1, noise_std >= 0")
        for name in ("train_region", "test_region"):
            reg = np.asarray(getattr(self, name), dtype=float)
            if reg.shape != (state_dim, 2) or np.any(reg[:, 0] > reg[:, 1]):
                raise ContractError(f"{name} must be {state_dim} intervals [lo, hi]")


def default_generation_config(system_name):
    """Benchmark defaults: positional OOD shift, everything else in range."""
    if system_name == "unicycle":
        return GenerationConfig(
            dt=0.05,
            train_region=[[-1, 1], [-1, 1], [-np.pi, np.pi]],
            test_region=[[4, 6], [4, 6], [-np.pi, np.pi]],
            ood_margin=3.0,
        )
    if system_name == "quadrotor":
        return GenerationConfig(
            dt=0.02,
            train_region=[[-1, 1], [-1, 1], [-0.3, 0.3], [-1, 1], [-1, 1], [-0.5, 0.5]],
            test_region=[[5, 7], [5, 7], [-0.3, 0.3], [-1, 1], [-1, 1], [-0.5, 0.5]],
            ood_margin=3.0,
        )
    raise ContractError(f"no default generation config for {system_name!r}")


@dataclass
class Samples:
    """Stacked supervised triples ``(state, control, derivative)``."""

    states: np.ndarray
    controls: np.ndarray
    derivs: np.ndarray

    def __len__(self):
        return len(self.states)

    @property
    def inputs(self):
        return np.hstack([self.states, self.controls])


@dataclass
class DatasetBundle:
    offline: list
    online: Trajectory
    test: Samples
    system: str
    system_params: dict
    seed: int
    noise_std: float
    generation: dict = field(default_factory=dict)

    def make_system(self):
        return make_system(self.system, **self.system_params)


@dataclass(frozen=True)
class SamplePair:
    anchor: int
    positive: int
    negatives: tuple


@dataclass
class PairReport:
    n_anchors: int
    skipped: list

    @property
    def n_pairs(self):
        return self.n_anchors - len(self.skipped)


def _box_distance(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    gap = np.maximum(0.0, np.maximum(a[:, 0] - b[:, 1], b[:, 0] - a[:, 1]))
    return float(np.linalg.norm(gap))


def _piecewise_controls(sys, rng, steps, hold):
    values = sys.sample_controls(rng, -(-steps // hold))
    return np.repeat(values, hold, axis=0)[:steps]


def _noisy(traj, rng, std):
    if std == 0:
        return traj
    return Trajectory(traj.states, traj.controls, traj.derivs + rng.normal(0, std, traj.derivs.shape), traj.dt)


def generate_bundle(sys, gen_cfg, seed):
    """Simulate ``D_off``, ``D_on`` and an OOD ``D_test`` for ``sys``.

    Offline and online rollouts start uniformly inside ``train_region``.
    Test states are drawn from ``test_region`` and rejected while closer
    than ``ood_margin`` (Euclidean, full state) to any training state.
    """
    gen_cfg.validate(sys.state_dim)
    train = np.asarray(gen_cfg.train_region, float)
    test = np.asarray(gen_cfg.test_region, float)
    gap = _box_distance(train, test)
    if gap < gen_cfg.ood_margin:
        raise GenerationError(
            f"regions overlap after margin: box distance {gap:.4g} < ood_margin {gen_cfg.ood_margin:.4g}"
        )
    ss_off, ss_on, ss_test = np.random.SeedSequence(seed).spawn(3)
    steps = gen_cfg.horizon - 1

    def one(rng):
        x0 = rng.uniform(train[:, 0], train[:, 1])
        traj = rollout(sys, x0, _piecewise_controls(sys, rng, steps, gen_cfg.hold_steps), gen_cfg.dt)
        return _noisy(traj, rng, gen_cfg.noise_std)

    rng = np.random.default_rng(ss_off)
    offline = [one(rng) for _ in range(gen_cfg.n_traj)]
    online = one(np.random.default_rng(ss_on))

    rng = np.random.default_rng(ss_test)
    seen = np.vstack([t.states for t in offline] + [online.states])
    tree = cKDTree(seen)
    accepted, draws = [], 0
    need = gen_cfg.n_test
    while sum(len(a) for a in accepted) < need:
        if draws >= gen_cfg.max_test_draws * need:
            got = sum(len(a) for a in accepted)
            raise GenerationError(
                f"regions overlap after margin: only {got}/{need} test states are "
                f">= {gen_cfg.ood_margin} from the training states after {draws} draws"
            )
        cand = rng.uniform(test[:, 0], test[:, 1], size=(need, sys.state_dim))
        draws += need
        dist, _ = tree.query(cand)
        accepted.append(cand[dist >= gen_cfg.ood_margin])
    states = np.vstack(accepted)[:need]
    controls = sys.sample_controls(rng, need)
    test_set = Samples(states, controls, sys.dynamics(states, controls))
    log.info(
        "generated %d offline + 1 online trajectories, %d test samples (%d draws)",
        len(offline), need, draws,
    )
    return DatasetBundle(
        offline=offline,
        online=online,
        test=test_set,
        system=sys.name,
        system_params=_system_params(sys),
        seed=int(seed),
        noise_std=float(gen_cfg.noise_std),
        generation=_jsonable(asdict(gen_cfg)),
    )


def _system_params(sys):
    return _jsonable(asdict(sys))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def min_test_distance(bundle):
    """Smallest Euclidean distance between a test state and a training state."""
    seen = np.vstack([t.states for t in bundle.offline] + [bundle.online.states])
    dist, _ = cKDTree(seen).query(bundle.test.states)
    return float(dist.min())


def _traj_samples(trajs):
    if not trajs:
        return None
    return Samples(
        np.vstack([t.states for t in trajs]),
        np.vstack([t.sample_controls for t in trajs]),
        np.vstack([t.derivs for t in trajs]),
    )


def flatten(bundle, which=("offline",)):
    """Concatenate partitions into triples, trajectory-major, time-minor."""
    if isinstance(which, str):
        which = (which,)
    parts = []
    for name in which:
        if name == "offline":
            s = _traj_samples(bundle.offline)
        elif name == "online":
            s = _traj_samples([bundle.online] if bundle.online is not None else [])
        elif name == "test":
            s = bundle.test
        else:
            raise ContractError(f"unknown partition {name!r}; choose from {PARTITIONS}")
        if s is not None and len(s):
            parts.append(s)
    if not parts:
        n, m = _dims(bundle)
        return Samples(np.empty((0, n)), np.empty((0, m)), np.empty((0, n)))
    return Samples(*(np.vstack([getattr(p, k) for p in parts]) for k in ("states", "controls", "derivs")))


def _dims(bundle):
    ref = bundle.offline[0] if bundle.offline else bundle.online
    return ref.states.shape[1], ref.controls.shape[1]


def trajectory_index(bundle, which=("offline", "online")):
    """Trajectory id of every row produced by ``flatten(bundle, which)``."""
    ids, k = [], 0
    for name in which:
        trajs = bundle.offline if name == "offline" else [bundle.online] if name == "online" else []
        for t in trajs:
            ids.append(np.full(len(t), k))
            k += 1
    return np.concatenate(ids) if ids else np.empty(0, dtype=int)


# ---------------------------------------------------------------- pairing


def default_eps(inputs, frac=0.1, max_points=2000, seed=0):
    """``frac`` times the median pairwise distance (subsampled for large sets)."""
    X = np.asarray(inputs, float)
    if len(X) > max_points:
        X = X[np.random.default_rng(seed).choice(len(X), max_points, replace=False)]
    if len(X) < 2:
        return 0.0
    return float(frac * np.median(pdist(X)))


def nearest_positives(inputs, labels, eps, block=512):
    """Label-space nearest neighbour of every item among eps-far items.

    Returns an int array with ``-1`` where no item is at input distance
    ``>= eps``.  Ties go to the lowest index.
    """
    X = np.asarray(inputs, float)
    Y = np.asarray(labels, float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    n = len(X)
    if n < 2:
        raise ContractError("pair selection needs at least 2 items")
    if eps < 0:
        raise ContractError("eps must be nonnegative")
    pos = np.full(n, -1, dtype=int)
    for s in range(0, n, block):
        rows = np.arange(s, min(n, s + block))
        dx = np.sqrt(((X[rows, None, :] - X[None, :, :]) ** 2).sum(-1))
        dy = ((Y[rows, None, :] - Y[None, :, :]) ** 2).sum(-1)
        ok = dx >= eps
        ok[np.arange(len(rows)), rows] = False
        dy = np.where(ok, dy, np.inf)
        best = np.argmin(dy, axis=1)
        has = ok.any(axis=1)
        pos[rows[has]] = best[has]
    return pos


def batch_pairs(positives, batch, rng=None):
    """Group anchors into batches; negatives are the other batch members."""
    n = len(positives)
    order = np.arange(n) if rng is None else rng.permutation(n)
    pairs = []
    for s in range(0, n, batch):
        members = order[s:s + batch]
        for a in members:
            p = positives[a]
            if p < 0:
                continue
            neg = tuple(int(j) for j in members if j != a and j != p)
            if neg:
                pairs.append(SamplePair(int(a), int(p), neg))
    return pairs


def select_pairs(inputs, labels, eps, batch, rng=None):
    """Contrastive pairs: positives by label nearness, negatives by batch.

    Returns ``(pairs, report)``; anchors without an eps-far candidate are
    skipped and listed in ``report.skipped``.
    """
    if batch < 2:
        raise ContractError("batch size must be >= 2")
    positives = nearest_positives(inputs, labels, eps)
    skipped = np.flatnonzero(positives < 0).tolist()
    if skipped:
        log.debug("select_pairs: %d anchors without eps-far candidate", len(skipped))
    return batch_pairs(positives, batch, rng), PairReport(len(positives), skipped)


# ----------------------------------------------------------------- file I/O


def _traj_record(t):
    return {"dt": t.dt, "states": t.states.tolist(), "controls": t.controls.tolist(), "derivs": t.derivs.tolist()}


def _dumps(obj):
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def save_bundle(bundle, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {"offline": "offline.traj.jsonl", "online": "online.traj.jsonl", "test": "test.traj.jsonl"}
    with open(d / files["offline"], "w") as fh:
        for t in bundle.offline:
            fh.write(_dumps(_traj_record(t)) + "\n")
    with open(d / files["online"], "w") as fh:
        fh.write(_dumps(_traj_record(bundle.online)) + "\n")
    with open(d / files["test"], "w") as fh:
        T = bundle.test
        for x, u, xd in zip(T.states.tolist(), T.controls.tolist(), T.derivs.tolist()):
            fh.write(_dumps({"state": x, "control": u, "deriv": xd}) + "\n")
    manifest = {
        "version": FORMAT_VERSION,
        "system": bundle.system,
        "system_params": bundle.system_params,
        "seed": bundle.seed,
        "noise_std": bundle.noise_std,
        "generation": bundle.generation,
        "files": files,
        "counts": {"offline": len(bundle.offline), "online": 1, "test": len(bundle.test)},
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d / MANIFEST


def _read_jsonl(path):
    try:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(path, f"unreadable dataset file ({exc})") from exc


def _traj_from(rec):
    return Trajectory(
        np.asarray(rec["states"], float).reshape(len(rec["states"]), -1),
        np.asarray(rec["controls"], float).reshape(len(rec["controls"]), -1),
        np.asarray(rec["derivs"], float).reshape(len(rec["derivs"]), -1),
        float(rec["dt"]),
    )


def load_bundle(directory):
    d = Path(directory)
    path = d / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(path, f"cannot read manifest ({exc})") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("files"), dict):
        raise CheckpointError(path, "manifest is not a bundle manifest object")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(path, f"unsupported bundle version {manifest.get('version')!r}")
    files = manifest["files"]
    try:
        offline = [_traj_from(r) for r in _read_jsonl(d / files["offline"])]
        online = [_traj_from(r) for r in _read_jsonl(d / files["online"])]
        test = _read_jsonl(d / files["test"])
        tests = Samples(
            np.array([r["state"] for r in test], float),
            np.array([r["control"] for r in test], float),
            np.array([r["deriv"] for r in test], float),
        )
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CheckpointError(d, f"malformed dataset records ({exc})") from exc
    if len(online) != 1 or not offline or not len(tests):
        raise CheckpointError(d, "bundle needs offline trajectories, one online trajectory and test samples")
    dts = {t.dt for t in offline} | {online[0].dt}
    if len(dts) != 1:
        raise CheckpointError(d, f"trajectories disagree on dt: {sorted(dts)}")
    return DatasetBundle(
        offline=offline,
        online=online[0],
        test=tests,
        system=manifest["system"],
        system_params=manifest["system_params"],
        seed=manifest["seed"],
        noise_std=manifest["noise_std"],
        generation=manifest.get("generation", {}),
    )
