"""Uniform grids, plant solvers and boundary measurements.

Two plant families live here: the 1-D reaction-diffusion equation

    u_t = eps * u_xx + lambda(x) * u,   u(0, t) = 0,

closed at x = 1 either by ``u_x(1, t) = 0`` (ghost-point, second order) or by
``u(1, t) = 0``, and the Aw-Rascle-Zhang traffic model

    rho_t + (rho v)_x = 0,
    v_t + (v + rho V'(rho)) v_x = (V(rho) - v) / tau,

with a Greenshields equilibrium speed ``V``.  The traffic model is advanced
with a two-step (Richtmyer) Lax-Wendroff scheme on the conservative pair
``(rho, rho (v - V(rho)))``, which is the same system for smooth solutions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

from .errors import (
    CflViolation,
    GridMismatch,
    IncompatibleIc,
    KindMismatch,
    NonPhysicalState,
)

IC_TOLERANCE = 1e-12


@dataclass(frozen=True)
class Grid:
    """Uniform space-time grid: ``x_i = i*dx`` (i < nx), ``t_k = k*dt`` (k <= nt)."""

    nx: int
    dx: float
    nt: int
    dt: float

    def __post_init__(self):
        if int(self.nx) != self.nx or self.nx < 3:
            raise ValueError(f"nx must be an integer >= 3, got {self.nx}")
        if int(self.nt) != self.nt or self.nt < 1:
            raise ValueError(f"nt must be an integer >= 1, got {self.nt}")
        if not (self.dx > 0 and np.isfinite(self.dx)):
            raise ValueError(f"dx must be positive, got {self.dx}")
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "nt", int(self.nt))
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dt", float(self.dt))

    @classmethod
    def uniform(cls, nx, length, nt, horizon):
        return cls(nx=nx, dx=length / (nx - 1), nt=nt, dt=horizon / nt)

    @property
    def x_max(self):
        return (self.nx - 1) * self.dx

    @property
    def horizon(self):
        return self.nt * self.dt

    @property
    def x(self):
        return np.arange(self.nx) * self.dx

    @property
    def t(self):
        return np.arange(self.nt + 1) * self.dt

    def to_dict(self):
        return {"nx": self.nx, "dx": self.dx, "nt": self.nt, "dt": self.dt}

    @classmethod
    def from_dict(cls, d):
        return cls(nx=d["nx"], dx=d["dx"], nt=d["nt"], dt=d["dt"])


@dataclass
class Trajectory:
    grid: Grid
    values: np.ndarray  # (components, nt + 1, nx)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = (self.grid.nt + 1, self.grid.nx)
        if self.values.ndim != 3 or self.values.shape[1:] != expected:
            raise GridMismatch(
                f"trajectory shape {self.values.shape} does not match grid {expected}"
            )
        if self.values.shape[0] not in (1, 2):
            raise ValueError("a trajectory has 1 or 2 components")

    @property
    def components(self):
        return self.values.shape[0]

    def at(self, k):
        return self.values[:, k, :]


class MeasurementKind(str, enum.Enum):
    DIRICHLET_AT_1 = "dirichlet_at_1"
    NEUMANN_AT_1 = "neumann_at_1"
    TRAFFIC_TRIPLE = "traffic_triple"

    @property
    def channels(self):
        return 3 if self is MeasurementKind.TRAFFIC_TRIPLE else 1


# Row order of a TrafficTriple series.
TRAFFIC_CHANNELS = ("y_q", "y_v", "y_out")


@dataclass
class MeasurementSeries:
    kind: MeasurementKind
    values: np.ndarray  # (channels, nt + 1)
    grid: Grid

    def __post_init__(self):
        self.kind = MeasurementKind(self.kind)
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = (self.kind.channels, self.grid.nt + 1)
        if self.values.shape != expected:
            raise GridMismatch(
                f"measurement shape {self.values.shape} does not match {expected}"
            )


class LambdaMode(str, enum.Enum):
    ONE_PEAK = "one_peak"
    CONSTANT = "constant"


class BoundaryAt1(str, enum.Enum):
    NEUMANN = "neumann"
    DIRICHLET = "dirichlet"


class Scheme(str, enum.Enum):
    EXPLICIT = "explicit"
    IMPLICIT_EULER = "implicit_euler"


@dataclass(frozen=True)
class ReactionDiffusionParams:
    epsilon: float = 1.0
    lambda_mode: LambdaMode = LambdaMode.ONE_PEAK
    alpha: float = 4.0
    beta: float = 2.0
    lam: float = 0.0
    # Closure at x = 1; the prescribed-time example needs u(1, t) = 0.
    right_bc: BoundaryAt1 = BoundaryAt1.NEUMANN

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "lambda_mode", LambdaMode(self.lambda_mode))
        object.__setattr__(self, "right_bc", BoundaryAt1(self.right_bc))

    @classmethod
    def one_peak(cls, alpha=4.0, beta=2.0, epsilon=1.0):
        return cls(epsilon=epsilon, lambda_mode=LambdaMode.ONE_PEAK, alpha=alpha, beta=beta)

    @classmethod
    def constant(cls, lam, epsilon=1.0, right_bc=BoundaryAt1.NEUMANN):
        return cls(epsilon=epsilon, lambda_mode=LambdaMode.CONSTANT, lam=lam, right_bc=right_bc)

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "lambda_mode": self.lambda_mode.value,
            "alpha": self.alpha,
            "beta": self.beta,
            "lam": self.lam,
            "right_bc": self.right_bc.value,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lambda_profile(x, params):
    """Reaction coefficient: ``2 eps a^2 / cosh^2(a x - b)`` or a constant."""
    x = np.asarray(x, dtype=np.float64)
    if params.lambda_mode is LambdaMode.CONSTANT:
        return np.full_like(x, params.lam)[()]
    a, b, eps = params.alpha, params.beta, params.epsilon
    return (2.0 * eps * a * a / np.cosh(a * x - b) ** 2)[()]


def l2_norm(u, dx):
    """Trapezoid-weighted discrete L2 norm over the last axis."""
    u = np.asarray(u, dtype=np.float64)
    sq = u * u
    total = sq.sum(axis=-1) - 0.5 * (sq[..., 0] + sq[..., -1])
    return np.sqrt(dx * total)


class ReactionDiffusionStepper:
    """One time step of the reaction-diffusion plant, shared by observers.

    ``step(u, forcing)`` advances the full nodal vector; ``forcing`` is an
    additive source (same length) applied over the step.  Boundary nodes that
    carry Dirichlet data are held at zero.
    """

    def __init__(self, params, grid, scheme=Scheme.IMPLICIT_EULER):
        self.params = params
        self.grid = grid
        self.scheme = Scheme(scheme)
        eps, dx, dt = params.epsilon, grid.dx, grid.dt
        self.cfl = eps * dt / dx**2
        if self.scheme is Scheme.EXPLICIT and self.cfl > 0.5:
            raise CflViolation(f"explicit scheme needs eps*dt/dx^2 <= 0.5, got {self.cfl:.4g}")

        self.neumann = params.right_bc is BoundaryAt1.NEUMANN
        # unknown nodes: 1..nx-1 (Neumann) or 1..nx-2 (Dirichlet at x=1)
        self.stop = grid.nx if self.neumann else grid.nx - 1
        n = self.stop - 1
        lam = lambda_profile(grid.x[1 : self.stop], params)
        r = eps / dx**2
        self.sub = np.full(n - 1, r)
        self.diag = -2.0 * r + lam
        self.sup = np.full(n - 1, r)
        if self.neumann:
            # ghost node u[nx] = u[nx-2]
            self.sub[-1] = 2.0 * r

        if self.scheme is Scheme.IMPLICIT_EULER:
            dl, d, du, du2, ipiv, info = lapack.dgttrf(
                -dt * self.sub, 1.0 - dt * self.diag, -dt * self.sup
            )
            if info != 0:
                raise np.linalg.LinAlgError(f"dgttrf failed with info={info}")
            self._lu = (dl, d, du, du2, ipiv)

    @property
    def interior(self):
        return slice(1, self.stop)

    def apply(self, v):
        """Discrete operator applied to the unknown-node vector ``v``."""
        out = self.diag * v
        out[1:] += self.sub * v[:-1]
        out[:-1] += self.sup * v[1:]
        return out

    def solve(self, rhs):
        """``(I - dt A)^{-1} rhs`` on the unknown nodes (implicit scheme only)."""
        x, info = lapack.dgttrs(*self._lu, rhs)
        if info != 0:
            raise np.linalg.LinAlgError(f"dgttrs failed with info={info}")
        return x

    def step(self, u, forcing=None):
        s = self.interior
        new = np.zeros_like(u)
        v = u[s]
        if self.scheme is Scheme.EXPLICIT:
            upd = v + self.grid.dt * self.apply(v)
            if forcing is not None:
                upd = upd + self.grid.dt * forcing[s]
            new[s] = upd
        else:
            rhs = v if forcing is None else v + self.grid.dt * forcing[s]
            new[s] = self.solve(rhs)
        return new


def _check_rd_ic(ic, params, grid):
    ic = np.asarray(ic, dtype=np.float64)
    if ic.shape != (grid.nx,):
        raise GridMismatch(f"initial condition has shape {ic.shape}, grid needs ({grid.nx},)")
    if abs(ic[0]) > IC_TOLERANCE:
        raise IncompatibleIc(f"u(0) must be 0, got {ic[0]:.3e}")
    if params.right_bc is BoundaryAt1.DIRICHLET and abs(ic[-1]) > IC_TOLERANCE:
        raise IncompatibleIc(f"u(1) must be 0, got {ic[-1]:.3e}")
    return ic


def simulate_reaction_diffusion(ic, params, grid, scheme=Scheme.IMPLICIT_EULER):
    ic = _check_rd_ic(ic, params, grid)
    stepper = ReactionDiffusionStepper(params, grid, scheme)
    values = np.empty((1, grid.nt + 1, grid.nx))
    values[0, 0] = ic
    u = ic.copy()
    for k in range(grid.nt):
        u = stepper.step(u)
        values[0, k + 1] = u
    return Trajectory(grid, values)


@dataclass(frozen=True)
class ArzParams:
    """ARZ parameters in SI units (m, s, vehicles/m)."""

    L_r: float = 500.0
    tau: float = 60.0
    rho_max: float = 0.16
    v_free: float = 40.0
    rho_star: float = 0.12
    v_star: float = 10.0

    def __post_init__(self):
        for name in ("L_r", "tau", "rho_max", "v_free", "rho_star", "v_star"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.rho_star < self.rho_max:
            raise ValueError("rho_star must be below rho_max")
        if self.v_star > self.v_free:
            raise ValueError("v_star exceeds the free-flow speed")

    @property
    def q_star(self):
        return self.rho_star * self.v_star

    def V(self, rho):
        return self.v_free * (1.0 - rho / self.rho_max)

    def dV(self, rho):
        return np.full_like(np.asarray(rho, dtype=np.float64), -self.v_free / self.rho_max)[()]

    def V_inverse(self, speed):
        return self.rho_max * (1.0 - speed / self.v_free)

    def characteristic_speeds(self, rho, v):
        return v, v + rho * self.dV(rho)

    @property
    def lambda1(self):
        return self.v_star

    @property
    def lambda2(self):
        return self.v_star + self.rho_star * self.dV(self.rho_star)

    def to_dict(self):
        return {
            "L_r": self.L_r,
            "tau": self.tau,
            "rho_max": self.rho_max,
            "v_free": self.v_free,
            "rho_star": self.rho_star,
            "v_star": self.v_star,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ArzStepper:
    """Richtmyer Lax-Wendroff update of the interior nodes.

    The conservative pair is ``(rho, y)`` with ``y = rho (v - V(rho))``; the
    relaxation source is ``-y / tau``.  Extra sources ``(s_rho, s_v)`` given in
    primitive form are mapped to ``s_y = s_rho (v - V - rho V') + rho s_v``.
    """

    def __init__(self, params, grid):
        self.params = params
        self.grid = grid
        if abs(grid.x_max - params.L_r) > 1e-9 * params.L_r:
            raise GridMismatch(f"grid length {grid.x_max} differs from L_r={params.L_r}")
        self.ratio = grid.dt / grid.dx

    def cfl(self, rho, v):
        l1, l2 = self.params.characteristic_speeds(rho, v)
        return float(max(np.max(np.abs(l1)), np.max(np.abs(l2))) * self.ratio)

    def check_state(self, rho, v, step):
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(v))):
            raise NonPhysicalState(f"non-finite state at step {step}", step=step)
        if np.any(rho <= 0) or np.any(v <= 0):
            raise NonPhysicalState(f"rho <= 0 or v <= 0 at step {step}", step=step)
        c = self.cfl(rho, v)
        if c > 1.0:
            raise CflViolation(f"Lax-Wendroff CFL {c:.4g} > 1 at step {step}")

    def _source(self, rho, y, extra):
        p = self.params
        s_y = -y / p.tau
        if extra is None:
            return 0.0, s_y
        s_rho, s_v = extra
        v = y / rho + p.V(rho)
        s_y = s_y + s_rho * (v - p.V(rho) - rho * p.dV(rho)) + rho * s_v
        return s_rho, s_y

    def step(self, rho, v, extra=None):
        """Advance interior nodes; boundary nodes are returned unchanged."""
        p = self.params
        r = self.ratio
        dt = self.grid.dt
        y = rho * (v - p.V(rho))
        q = rho * v
        fy = y * v
        s_rho, s_y = self._source(rho, y, extra)
        s_rho = np.broadcast_to(s_rho, rho.shape)
        s_y = np.broadcast_to(s_y, rho.shape)

        rho_h = 0.5 * (rho[1:] + rho[:-1]) - 0.5 * r * (q[1:] - q[:-1]) + 0.25 * dt * (s_rho[1:] + s_rho[:-1])
        y_h = 0.5 * (y[1:] + y[:-1]) - 0.5 * r * (fy[1:] - fy[:-1]) + 0.25 * dt * (s_y[1:] + s_y[:-1])
        v_h = y_h / rho_h + p.V(rho_h)
        q_h = rho_h * v_h
        fy_h = y_h * v_h
        sh_rho, sh_y = self._source(rho_h, y_h, extra)
        sh_rho = np.broadcast_to(sh_rho, rho_h.shape)
        sh_y = np.broadcast_to(sh_y, rho_h.shape)

        rho_n = rho.copy()
        y_n = y.copy()
        rho_n[1:-1] = rho[1:-1] - r * (q_h[1:] - q_h[:-1]) + 0.5 * dt * (sh_rho[1:] + sh_rho[:-1])
        y_n[1:-1] = y[1:-1] - r * (fy_h[1:] - fy_h[:-1]) + 0.5 * dt * (sh_y[1:] + sh_y[:-1])
        v_n = y_n / rho_n + p.V(rho_n)
        v_n[0], v_n[-1] = v[0], v[-1]
        return rho_n, v_n

    def close_boundaries(self, rho, v, inflow_flux, outlet_speed):
        """Outgoing invariants are linearly extrapolated, incoming ones measured.

        At x=0 the velocity (carried by the backward characteristic) is
        extrapolated and the density set from the inflow flux; at x=L the
        speed is prescribed and ``w = v - V(rho)`` is extrapolated.
        """
        p = self.params
        v[0] = 2.0 * v[1] - v[2]
        rho[0] = inflow_flux / v[0]
        w_end = 2.0 * (v[-2] - p.V(rho[-2])) - (v[-3] - p.V(rho[-3]))
        v[-1] = outlet_speed
        rho[-1] = p.V_inverse(outlet_speed - w_end)
        return rho, v


def _as_series(values, grid, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(grid.nt + 1, float(arr))
    if arr.shape != (grid.nt + 1,):
        raise GridMismatch(f"{name} must have length nt+1={grid.nt + 1}, got {arr.shape}")
    return arr


def simulate_arz(ic_rho, ic_v, params, grid, inflow, outflow_bc):
    """Solve the ARZ plant.

    ``inflow`` is the flux q(0, t) and ``outflow_bc`` the speed v(L_r, t),
    each a scalar or a length ``nt+1`` series.
    """
    stepper = ArzStepper(params, grid)
    rho = np.array(ic_rho, dtype=np.float64)
    v = np.array(ic_v, dtype=np.float64)
    if rho.shape != (grid.nx,) or v.shape != (grid.nx,):
        raise GridMismatch("ARZ initial data must have length nx")
    inflow = _as_series(inflow, grid, "inflow")
    outflow_bc = _as_series(outflow_bc, grid, "outflow_bc")
    stepper.check_state(rho, v, 0)

    values = np.empty((2, grid.nt + 1, grid.nx))
    values[0, 0] = ic_rho
    values[1, 0] = ic_v
    for k in range(grid.nt):
        rho, v = stepper.step(rho, v)
        rho, v = stepper.close_boundaries(rho, v, inflow[k + 1], outflow_bc[k + 1])
        stepper.check_state(rho, v, k + 1)
        values[0, k + 1] = rho
        values[1, k + 1] = v
    return Trajectory(grid, values)


def one_sided_slope(u, dx):
    """Second-order backward difference for u_x at the last node."""
    return (3.0 * u[..., -1] - 4.0 * u[..., -2] + u[..., -3]) / (2.0 * dx)


def extract_measurements(traj, kind):
    kind = MeasurementKind(kind)
    grid = traj.grid
    if kind is MeasurementKind.TRAFFIC_TRIPLE:
        if traj.components != 2:
            raise KindMismatch("traffic measurements need a two-component trajectory")
        rho, v = traj.values
        values = np.stack([rho[:, 0] * v[:, 0], v[:, -1], rho[:, -1] * v[:, -1]])
    else:
        if traj.components != 1:
            raise KindMismatch(f"{kind.value} needs a scalar trajectory")
        u = traj.values[0]
        if kind is MeasurementKind.DIRICHLET_AT_1:
            values = u[:, -1][None, :].copy()
        else:
            values = one_sided_slope(u, grid.dx)[None, :]
    return MeasurementSeries(kind, values, grid)
