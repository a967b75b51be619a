"""Pipeline configuration stored as an INI file.

Every knob of the pipeline lives in one section per stage.  Values are
written as JSON literals (``null``, ``true``, lists for regions) except plain
strings, so a file written by :meth:`PipelineConfig.to_ini` parses back to an
equal config.  Keys left out of a file keep the per-system defaults of
:func:`default_config`.

Sections and keys::

    [system]            name, and any constructor parameter of the system
    [data]              seed, n_traj, horizon, dt, hold_steps, noise_std,
                        train_region, test_region, n_test, ood_margin,
                        max_test_draws
    [metric]            dynamics pseudometric: eps (eps_1), eps_frac,
                        batch_size, steps, lr, include_positive, threshold
    [constraint_metric] per-row constraint pseudometrics: eps (eps_2), ...
                        plus angle_features
    [gp]                restarts, max_iter, rel_tol, max_opt_points,
                        normalize, lengthscale_bounds, signal_var_bounds,
                        noise_var_bounds
    [manifold]          lma_count (K), sv_eps, relative_eps, c_expected,
                        min_agreement, ref_order, pivoting, row_scale
    [eval]              seeds, models, n_recovery
    [output]            dir
"""

import configparser
import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import GenerationConfig, _box_distance, default_generation_config
from .evaluation import STANDARD_MODELS
from .exceptions import ConfigError, ContractError
from .gp import GpConfig
from .manifold import ManifoldConfig
from .metric import MetricConfig
from .systems import SYSTEMS, make_system

C_EXPECTED = {"unicycle": 1, "quadrotor": 4}


@dataclass
class EvalConfig:
    seeds: int = 1
    models: list = field(default_factory=lambda: list(STANDARD_MODELS))
    n_recovery: int = 200


@dataclass
class PipelineConfig:
    system: str = "unicycle"
    system_params: dict = field(default_factory=dict)
    seed: int = 0
    data: GenerationConfig = None
    metric: MetricConfig = field(default_factory=MetricConfig)
    dynamics_threshold: float = 1e-2
    constraint_metric: MetricConfig = field(default_factory=MetricConfig)
    constraint_threshold: float = 1e-2
    angle_features: bool = True
    gp: GpConfig = field(default_factory=GpConfig)
    manifold: ManifoldConfig = None
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str = "runs"

    def __post_init__(self):
        if self.data is None:
            self.data = default_generation_config(self.system)
        if self.manifold is None:
            self.manifold = ManifoldConfig(c_expected=C_EXPECTED.get(self.system))

    def make_system(self):
        return make_system(self.system, **self.system_params)

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=int(seed))

    # ------------------------------------------------------------ checks

    def validate(self):
        """Raise :class:`ConfigError` on any inconsistent setting."""
        if self.system not in SYSTEMS:
            raise ConfigError(f"[system] name: unknown system {self.system!r}; choose from {sorted(SYSTEMS)}")
        try:
            sys = self.make_system()
        except (TypeError, ContractError) as exc:
            raise ConfigError(f"[system] bad parameters: {exc}") from exc
        try:
            self.data.validate(sys.state_dim)
        except ContractError as exc:
            raise ConfigError(f"[data] {exc}") from exc
        gap = _box_distance(self.data.train_region, self.data.test_region)
        if gap < self.data.ood_margin:
            raise ConfigError(
                f"[data] ood_margin violated: train/test regions are {gap:.4g} apart, "
                f"less than ood_margin = {self.data.ood_margin:.4g}"
            )
        for name, m in (("metric", self.metric), ("constraint_metric", self.constraint_metric)):
            if m.batch_size < 2 or m.steps < 1 or not m.lr > 0:
                raise ConfigError(f"[{name}] need batch_size >= 2, steps >= 1, lr > 0")
            if m.eps is not None and not m.eps > 0:
                raise ConfigError(f"[{name}] eps must be positive or null")
        for name in ("dynamics_threshold", "constraint_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.gp.restarts < 1 or self.gp.max_iter < 1 or self.gp.max_opt_points < 2:
            raise ConfigError("[gp] need restarts >= 1, max_iter >= 1, max_opt_points >= 2")
        mf = self.manifold
        if not mf.sv_eps > 0:
            raise ConfigError("[manifold] sv_eps must be positive")
        if mf.c_expected is not None and not 0 <= mf.c_expected < sys.state_dim:
            raise ConfigError(f"[manifold] c_expected must lie in [0, {sys.state_dim})")
        k_min = sys.state_dim - (mf.c_expected or 0)
        if mf.lma_count is not None and mf.lma_count < k_min:
            raise ConfigError(f"[manifold] lma_count {mf.lma_count} < n - c_expected = {k_min}")
        if mf.ref_order not in ("mst", "trajectory") or mf.pivoting not in ("volume", "leftmost"):
            raise ConfigError("[manifold] ref_order must be mst|trajectory and pivoting volume|leftmost")
        if mf.row_scale not in ("unit", "pivot"):
            raise ConfigError("[manifold] row_scale must be unit|pivot")
        bad = [m for m in self.eval.models if m not in STANDARD_MODELS]
        if bad:
            raise ConfigError(f"[eval] unknown models {bad}; choose from {list(STANDARD_MODELS)}")
        if self.eval.seeds < 1 or self.eval.n_recovery < 1:
            raise ConfigError("[eval] seeds and n_recovery must be >= 1")
        return self

    # ---------------------------------------------------------- serialize

    def to_dict(self):
        return json.loads(json.dumps(dataclasses.asdict(self), default=_json_default))

    def to_ini(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["system"] = {"name": self.system, **{k: _fmt(v) for k, v in sorted(self.system_params.items())}}
        cp["data"] = {"seed": _fmt(self.seed), **_section(self.data)}
        cp["metric"] = {**_section(self.metric, skip=("rel_threshold", "seed")), "threshold": _fmt(self.dynamics_threshold)}
        cp["constraint_metric"] = {
            **_section(self.constraint_metric, skip=("rel_threshold", "seed")),
            "threshold": _fmt(self.constraint_threshold),
            "angle_features": _fmt(self.angle_features),
        }
        cp["gp"] = _section(self.gp, skip=("seed",))
        cp["manifold"] = _section(self.manifold, skip=("seed",))
        cp["eval"] = _section(self.eval)
        cp["output"] = {"dir": self.out}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path

    @classmethod
    def from_ini(cls, text):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unparseable config: {exc}") from exc
        known = {"system", "data", "metric", "constraint_metric", "gp", "manifold", "eval", "output"}
        extra = set(cp.sections()) - known
        if extra:
            raise ConfigError(f"unknown config sections {sorted(extra)}")
        sysec = dict(cp["system"]) if cp.has_section("system") else {}
        name = sysec.pop("name", "unicycle")
        cfg = cls(system=name) if name in SYSTEMS else cls()
        cfg.system = name
        cfg.system_params = {k: _parse(v) for k, v in sysec.items()}
        if cp.has_section("data"):
            data = dict(cp["data"])
            if "seed" in data:
                cfg.seed = _coerce("data", "seed", data.pop("seed"), int)
            cfg.data = _update("data", cfg.data, data)
        for sec, attr, thr in (("metric", "metric", "dynamics_threshold"), ("constraint_metric", "constraint_metric", "constraint_threshold")):
            if cp.has_section(sec):
                vals = dict(cp[sec])
                if "threshold" in vals:
                    setattr(cfg, thr, _coerce(sec, "threshold", vals.pop("threshold"), float))
                if sec == "constraint_metric" and "angle_features" in vals:
                    cfg.angle_features = _coerce(sec, "angle_features", vals.pop("angle_features"), bool)
                setattr(cfg, attr, _update(sec, getattr(cfg, attr), vals))
        if cp.has_section("gp"):
            cfg.gp = _update("gp", cfg.gp, dict(cp["gp"]))
        if cp.has_section("manifold"):
            cfg.manifold = _update("manifold", cfg.manifold, dict(cp["manifold"]))
        if cp.has_section("eval"):
            cfg.eval = _update("eval", cfg.eval, dict(cp["eval"]))
        if cp.has_section("output"):
            out = dict(cp["output"])
            cfg.out = out.pop("dir", cfg.out)
            if out:
                raise ConfigError(f"[output] unknown keys {sorted(out)}")
        return cfg

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text)


def default_config(system="unicycle", **overrides):
    return dataclasses.replace(PipelineConfig(system=system), **overrides)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj))


def _fmt(v):
    if isinstance(v, str):
        return v
    return json.dumps(v, default=_json_default)


def _parse(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _section(obj, skip=()):
    return {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.name not in skip}


def _coerce(section, key, text, kind):
    value = _parse(text)
    if kind is str:
        return str(text)
    if value is None:
        return None
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key}: expected true/false, got {text!r}")
        return value
    if kind in (int, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key}: expected a number, got {text!r}")
        if kind is int and float(value) != int(value):
            raise ConfigError(f"[{section}] {key}: expected an integer, got {text!r}")
        return kind(value)
    if kind in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"[{section}] {key}: expected a list, got {text!r}")
        return kind(value)
    return value


def _update(section, obj, values):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, text in values.items():
        if key not in fields or key in ("seed", "rel_threshold"):
            raise ConfigError(f"[{section}] unknown key {key!r}")
        default = getattr(obj, key)
        kind = type(default) if default is not None else None
        if kind is None:
            changes[key] = _parse(text)
        else:
            changes[key] = _coerce(section, key, text, kind)
    return dataclasses.replace(obj, **changes)
