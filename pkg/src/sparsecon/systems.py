"""Ground-truth simulated systems.

Each system exposes its dynamics ``xdot = f(x, u)``, an admissible control
box, and the analytic normal space ``Gamma(x) = [G(x) g(x)]`` of the motions
it can produce, i.e. ``Gamma(x) @ [f(x, u); 1] == 0`` for every admissible
``u``.  The analytic constraint is an oracle for tests and evaluation only;
nothing in the learning pipeline reads it.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, ControlBoundsError, RolloutError
from .linalg import standardize_rows


def wrap_to_pi(a):
    """Wrap angles to ``[-pi, pi)``."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class Trajectory:
    """Sampled state/control/derivative sequence.

    ``states`` and ``derivs`` have ``T`` rows, ``controls`` has ``T - 1``;
    ``derivs[t]`` is ``f(states[t], controls[min(t, T - 2)])``, i.e. the last
    control is held for the final sample.
    """

    states: np.ndarray
    controls: np.ndarray
    derivs: np.ndarray
    dt: float

    def __post_init__(self):
        T = len(self.states)
        if self.derivs.shape != self.states.shape or len(self.controls) != T - 1:
            raise ContractError(
                f"inconsistent trajectory shapes: states {self.states.shape}, "
                f"controls {self.controls.shape}, derivs {self.derivs.shape}"
            )
        for name in ("states", "controls", "derivs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractError(f"non-finite entries in trajectory {name}")

    def __len__(self):
        return len(self.states)

    @property
    def sample_controls(self):
        """Control applied at each of the ``T`` sample instants."""
        return np.vstack([self.controls, self.controls[-1:]])


class SystemModel(ABC):
    """Deterministic control system ``xdot = f(x, u)`` with known constraints."""

    name: str
    state_names: tuple
    control_names: tuple
    #: state coordinates the dynamics do not depend on (ground-truth sparsity)
    invariant_dims: tuple = ()
    #: state coordinates wrapped to [-pi, pi) during rollout
    angle_dims: tuple = ()

    @property
    def state_dim(self) -> int:
        return len(self.state_names)

    @property
    def control_dim(self) -> int:
        return len(self.control_names)

    @property
    @abstractmethod
    def constraint_count(self) -> int: ...

    @property
    @abstractmethod
    def control_bounds(self) -> np.ndarray:
        """``(m, 2)`` array of closed intervals."""

    @abstractmethod
    def _f(self, x, u):
        """Vectorized dynamics over leading axes, no validation."""

    @abstractmethod
    def _normal_rows(self, x):
        """Unstandardized analytic ``c x (n+1)`` constraint rows at one state."""

    def check_state(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.state_dim:
            raise ContractError(f"{self.name}: state has dim {x.shape[-1]}, expected {self.state_dim}")
        return x

    def check_control(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.control_dim:
            raise ContractError(
                f"{self.name}: control has dim {u.shape[-1]}, expected {self.control_dim}"
            )
        lo, hi = self.control_bounds.T
        bad = np.any((u < lo - 1e-12) | (u > hi + 1e-12), axis=tuple(range(u.ndim - 1)))
        if np.any(bad):
            first = u.reshape(-1, self.control_dim)
            row = first[np.any((first < lo - 1e-12) | (first > hi + 1e-12), axis=1)][0]
            raise ControlBoundsError(row, self.control_bounds, np.flatnonzero(bad).tolist())
        return u

    def dynamics(self, x, u):
        """Evaluate ``f(x, u)``; accepts single points or stacked batches."""
        return self._f(self.check_state(x), self.check_control(u))

    def true_constraint(self, x, pivoting="volume", row_scale="unit"):
        """Analytic ``Gamma(x)``, standardized with the same rule as learned bases."""
        x = self.check_state(x)
        if x.ndim != 1:
            raise ContractError("true_constraint expects a single state")
        return standardize_rows(self._normal_rows(x), n_primary=self.state_dim, pivoting=pivoting, row_scale=row_scale)

    def sample_controls(self, rng, size):
        lo, hi = self.control_bounds.T
        return rng.uniform(lo, hi, size=(size, self.control_dim))

    def wrap(self, x):
        x = np.array(x, dtype=float, copy=True)
        if self.angle_dims:
            idx = list(self.angle_dims)
            x[..., idx] = wrap_to_pi(x[..., idx])
        return x


@dataclass(frozen=True)
class Unicycle(SystemModel):
    """Kinematic unicycle, state ``[p_x, p_y, theta]``, control ``[v, omega]``.

    Its single nonholonomic constraint forbids sideways motion:
    ``-sin(theta) p_x' + cos(theta) p_y' = 0``.
    """

    speed_bounds: tuple = (0.0, 1.0)
    turn_bounds: tuple = (-1.0, 1.0)

    name = "unicycle"
    state_names = ("p_x", "p_y", "theta")
    control_names = ("v", "omega")
    invariant_dims = (0, 1)
    angle_dims = (2,)

    @property
    def constraint_count(self):
        return 1

    @property
    def control_bounds(self):
        return np.array([self.speed_bounds, self.turn_bounds], dtype=float)

    def _f(self, x, u):
        th = x[..., 2]
        v, w = u[..., 0], u[..., 1]
        return np.stack(np.broadcast_arrays(v * np.cos(th), v * np.sin(th), w), axis=-1)

    def _normal_rows(self, x):
        th = x[2]
        return np.array([[-np.sin(th), np.cos(th), 0.0, 0.0]])


@dataclass(frozen=True)
class PlanarQuadrotor(SystemModel):
    """Planar quadrotor, state ``[p_x, p_z, theta, v_x, v_z, omega]``.

    Controls are the two rotor thrusts.  At a fixed state the reachable
    derivatives span a 2-D affine set, so the normal space has four rows: the
    three kinematic identities ``p' = v``, ``theta' = omega`` (bias terms
    ``-v_x, -v_z, -omega``) and the thrust-direction row
    ``cos(theta) v_x' + sin(theta) v_z' + gravity sin(theta) = 0``.
    """

    mass: float = 1.0
    inertia: float = 0.2
    arm_length: float = 0.2
    gravity: float = 9.81
    thrust_fraction: tuple = (0.25, 0.75)

    name = "quadrotor"
    state_names = ("p_x", "p_z", "theta", "v_x", "v_z", "omega")
    control_names = ("u_1", "u_2")
    invariant_dims = (0, 1)
    angle_dims = ()

    def __post_init__(self):
        for attr in ("mass", "inertia", "arm_length", "gravity"):
            if not getattr(self, attr) > 0:
                raise ContractError(f"{attr} must be positive")

    @property
    def constraint_count(self):
        return 4

    @property
    def hover_thrust(self):
        return 0.5 * self.mass * self.gravity

    @property
    def control_bounds(self):
        lo, hi = self.thrust_fraction
        w = self.mass * self.gravity
        return np.array([[lo * w, hi * w], [lo * w, hi * w]], dtype=float)

    def _f(self, x, u):
        th, vx, vz, om = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
        u1, u2 = u[..., 0], u[..., 1]
        s = u1 + u2
        ax = -s * np.sin(th) / self.mass
        az = s * np.cos(th) / self.mass - self.gravity
        al = (u2 - u1) * self.arm_length / self.inertia
        return np.stack(np.broadcast_arrays(vx, vz, om, ax, az, al), axis=-1)

    def _normal_rows(self, x):
        th, vx, vz, om = x[2], x[3], x[4], x[5]
        c, s = np.cos(th), np.sin(th)
        return np.array(
            [
                [1.0, 0, 0, 0, 0, 0, -vx],
                [0, 1.0, 0, 0, 0, 0, -vz],
                [0, 0, 1.0, 0, 0, 0, -om],
                [0, 0, 0, c, s, 0, self.gravity * s],
            ]
        )


SYSTEMS = {"unicycle": Unicycle, "quadrotor": PlanarQuadrotor}


def make_system(name, **params):
    try:
        cls = SYSTEMS[name]
    except KeyError:
        raise ContractError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    return cls(**params)


def eval_dynamics(sys, x, u):
    return sys.dynamics(x, u)


def eval_true_constraint(sys, x):
    return sys.true_constraint(x)


def rollout(sys, x0, controls, dt):
    """Fixed-step RK4 rollout with zero-order-hold controls.

    Angles listed in ``sys.angle_dims`` are wrapped after every step.  The
    recorded derivatives are exact evaluations of ``f`` at the samples.
    """
    if not dt > 0:
        raise ContractError("dt must be positive")
    x = sys.check_state(np.asarray(x0, dtype=float))
    U = sys.check_control(np.atleast_2d(np.asarray(controls, dtype=float)))
    f = sys._f
    states = np.empty((len(U) + 1, sys.state_dim))
    states[0] = x
    for t, u in enumerate(U):
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = f(x, u)
            k2 = f(x + 0.5 * dt * k1, u)
            k3 = f(x + 0.5 * dt * k2, u)
            k4 = f(x + dt * k3, u)
            x = sys.wrap(x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        if not np.all(np.isfinite(x)):
            raise RolloutError(f"{sys.name}: non-finite state at step {t + 1}: {x}")
        states[t + 1] = x
    held = np.vstack([U, U[-1:]])
    return Trajectory(states=states, controls=U, derivs=f(states, held), dt=float(dt))
