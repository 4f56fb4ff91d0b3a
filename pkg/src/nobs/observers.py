"""Backstepping gains and the Luenberger observers that consume them.

Each observer reuses the stepper of the plant it estimates, so an observer
started at the true state and fed that plant's measurements reproduces the
plant trajectory exactly (all output injections vanish identically).
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb, factorial

import numpy as np

from .errors import DivisionGuard, GridMismatch, KindMismatch, TimeOutOfRange
from .pde import (
    ArzParams,
    ArzStepper,
    MeasurementKind,
    ReactionDiffusionStepper,
    Scheme,
    Trajectory,
    _check_rd_ic,
    one_sided_slope,
)

SPEED_FLOOR = 1e-6  # m/s; smallest inlet speed the observer divides by


def gain_exponential(x, alpha, beta, epsilon):
    """Output-injection gain for the one-peak reaction-diffusion observer.

    ``eps a^2 tanh(b) (tanh(b) - tanh(b - a x)) exp((1 - x) a tanh(b))``
    """
    x = np.asarray(x, dtype=np.float64)
    tb = np.tanh(beta)
    out = epsilon * alpha**2 * tb * (tb - np.tanh(beta - alpha * x)) * np.exp((1.0 - x) * alpha * tb)
    return out[()]


@dataclass(frozen=True)
class ExponentialGain:
    alpha: float
    beta: float
    epsilon: float
    sampled: np.ndarray

    @classmethod
    def on_grid(cls, grid, alpha=4.0, beta=2.0, epsilon=1.0):
        sampled = np.asarray(gain_exponential(grid.x, alpha, beta, epsilon))
        return cls(alpha, beta, epsilon, sampled)

    @classmethod
    def for_params(cls, params, grid):
        return cls.on_grid(grid, params.alpha, params.beta, params.epsilon)

    @classmethod
    def zero(cls, grid):
        return cls(0.0, 0.0, 0.0, np.zeros(grid.nx))


def _series_table(n_terms):
    """Exact rational coefficients of the prescribed-time series.

    Entry ``[n][j]`` is ``(-1)^n / (n+1)! / j! * sum_k C(j,k) C(n+2+k, n-j)``,
    rounded to double once.
    """
    table = np.zeros((n_terms, n_terms))
    for n in range(n_terms):
        for j in range(n + 1):
            s = sum(comb(j, k) * comb(n + 2 + k, n - j) for k in range(j + 1))
            num = (-1) ** n * s
            table[n, j] = num / (factorial(n + 1) * factorial(j))
    return table


@dataclass(frozen=True)
class PrescribedTimeGain:
    """Time-varying gain that forces the estimation error to zero at ``T_horizon``.

    The gain diverges as t -> T, so evaluation stops at ``clamp`` (default
    ``T_horizon - dt`` once bound to a grid).
    """

    T_horizon: float = 0.6
    mu: float = 1.0
    n_terms: int = 8
    clamp: float | None = None

    def __post_init__(self):
        if not self.T_horizon > 0:
            raise ValueError("T_horizon must be positive")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if int(self.n_terms) != self.n_terms or self.n_terms < 1:
            raise ValueError("n_terms must be a positive integer")
        clamp = self.T_horizon if self.clamp is None else self.clamp
        if not 0 < clamp <= self.T_horizon:
            raise ValueError("clamp must lie in (0, T_horizon]")
        object.__setattr__(self, "clamp", float(clamp))
        object.__setattr__(self, "_table", _series_table(int(self.n_terms)))

    def on_grid(self, grid):
        return PrescribedTimeGain(self.T_horizon, self.mu, self.n_terms, self.T_horizon - grid.dt)

    def __call__(self, x, t):
        return gain_prescribed_time(x, t, self)


def gain_prescribed_time(x, t, cfg):
    if not t < cfg.clamp:
        raise TimeOutOfRange(f"t={t} is not below the clamp {cfg.clamp}")
    x = np.asarray(x, dtype=np.float64)
    T, mu = cfg.T_horizon, cfg.mu
    tau = T - t
    z = (1.0 - x * x) / (4.0 * tau)
    w = -mu * T**3 / (2.0 * tau**2)
    table = cfg._table
    wpow = w ** np.arange(cfg.n_terms)
    shell = table @ wpow  # inner sums over j, one per n
    total = np.zeros_like(x)
    zn = np.ones_like(x)
    for n in range(cfg.n_terms):
        total = total + zn * shell[n]
        zn = zn * z
    lead = mu * T**3 / (2.0 * tau**3)
    return (lead * x * total)[()]


def _check_series(ms, kind, grid):
    if ms.kind is not kind:
        raise KindMismatch(f"expected {kind.value} measurements, got {ms.kind.value}")
    if ms.grid != grid:
        raise GridMismatch("measurement grid differs from the observer grid")


def run_observer_reaction_diffusion(ms, gain, params, grid, ic_hat, scheme=Scheme.IMPLICIT_EULER):
    """Plant copy plus ``p1(x) (y - u_hat(1))`` injected over each step.

    The output error is taken at the start of the step, so the update is
    ``u_hat^{k+1} = S(u_hat^k, forcing = p1 (y^k - u_hat^k(1)))``.
    """
    _check_series(ms, MeasurementKind.DIRICHLET_AT_1, grid)
    p1 = np.asarray(gain.sampled, dtype=np.float64)
    if p1.shape != (grid.nx,):
        raise GridMismatch("gain is sampled on a different grid")
    ic_hat = _check_rd_ic(ic_hat, params, grid)
    stepper = ReactionDiffusionStepper(params, grid, scheme)
    y = ms.values[0]
    values = np.empty((1, grid.nt + 1, grid.nx))
    values[0, 0] = ic_hat
    u = ic_hat.copy()
    for k in range(grid.nt):
        u = stepper.step(u, p1 * (y[k] - u[-1]))
        values[0, k + 1] = u
    return Trajectory(grid, values)


def run_observer_prescribed_time(ms, cfg, params, grid, ic_hat):
    """Implicit Euler with a time-varying slope injection.

    Step k solves ``(I - dt A) u = u_hat^k + dt g (y^{k+1} - c.u)`` where
    ``g = p(., k dt)`` and ``c.u`` is the one-sided slope at x=1.  The
    rank-one term is handled by Sherman-Morrison in innovation form, which
    keeps the update exact when the innovation is zero.
    """
    _check_series(ms, MeasurementKind.NEUMANN_AT_1, grid)
    if cfg.clamp >= cfg.T_horizon:
        cfg = cfg.on_grid(grid)
    if grid.horizon > cfg.clamp * (1 + 1e-12):
        raise TimeOutOfRange(
            f"grid horizon {grid.horizon} extends past the gain clamp {cfg.clamp}"
        )
    ic_hat = _check_rd_ic(ic_hat, params, grid)
    stepper = ReactionDiffusionStepper(params, grid, Scheme.IMPLICIT_EULER)
    s = stepper.interior
    x = grid.x
    y = ms.values[0]
    values = np.empty((1, grid.nt + 1, grid.nx))
    values[0, 0] = ic_hat
    u = ic_hat.copy()
    a = np.zeros(grid.nx)
    b = np.zeros(grid.nx)
    for k in range(grid.nt):
        g = gain_prescribed_time(x[s], k * grid.dt, cfg)
        a[s] = stepper.solve(u[s])
        b[s] = stepper.solve(grid.dt * g)
        innovation = y[k + 1] - one_sided_slope(a, grid.dx)
        u = a + b * (innovation / (1.0 + one_sided_slope(b, grid.dx)))
        values[0, k + 1] = u
    return Trajectory(grid, values)


@dataclass(frozen=True)
class NoInjection:
    """Boundary data only; the interior relies on the open-loop copy."""

    def sources(self, gains, rho_hat, v_hat, y_out):
        return None

    def to_dict(self):
        return {"type": "none"}


@dataclass(frozen=True)
class OutletFluxInjection:
    """Outlet-flux error ``e_q = y_out - rho_hat(L) v_hat(L)`` fed back uniformly.

    Density and speed sources are
    ``scale (exp(-L/(tau l1)) e_q - e_q) / v*`` and ``scale (l1 - l2) e_q / q*``.
    """

    scale: float = 1.0

    def sources(self, gains, rho_hat, v_hat, y_out):
        p = gains.params
        e_q = self.scale * (y_out - rho_hat[-1] * v_hat[-1])
        l1, l2 = gains.lambda1, gains.lambda2
        s_rho = (np.exp(-p.L_r / (p.tau * l1)) * e_q - e_q) / p.v_star
        s_v = (l1 - l2) / p.q_star * e_q
        return s_rho, s_v

    def to_dict(self):
        return {"type": "outlet_flux", "scale": self.scale}


def injection_from_dict(d):
    kind = d.get("type", "none")
    if kind == "none":
        return NoInjection()
    if kind == "outlet_flux":
        return OutletFluxInjection(float(d.get("scale", 1.0)))
    raise ValueError(f"unknown injection type {kind!r}")


@dataclass(frozen=True)
class TrafficObserverGains:
    params: ArzParams
    injection: object = NoInjection()

    @property
    def lambda1(self):
        return self.params.lambda1

    @property
    def lambda2(self):
        return self.params.lambda2


def run_observer_arz(ms, gains, grid, ic_hat):
    """ARZ copy driven by the inflow flux and outlet speed, plus optional injection.

    ``ic_hat`` is a pair ``(rho_hat0, v_hat0)``.
    """
    _check_series(ms, MeasurementKind.TRAFFIC_TRIPLE, grid)
    stepper = ArzStepper(gains.params, grid)
    rho = np.array(ic_hat[0], dtype=np.float64)
    v = np.array(ic_hat[1], dtype=np.float64)
    if rho.shape != (grid.nx,) or v.shape != (grid.nx,):
        raise GridMismatch("ARZ estimate must have length nx")
    stepper.check_state(rho, v, 0)
    y_q, y_v, y_out = ms.values

    values = np.empty((2, grid.nt + 1, grid.nx))
    values[0, 0] = ic_hat[0]
    values[1, 0] = ic_hat[1]
    for k in range(grid.nt):
        extra = gains.injection.sources(gains, rho, v, y_out[k])
        rho, v = stepper.step(rho, v, extra)
        inlet = 2.0 * v[1] - v[2]
        if not inlet >= SPEED_FLOOR:
            raise DivisionGuard(f"inlet speed estimate {inlet:.3e} below floor at step {k + 1}", step=k + 1)
        rho, v = stepper.close_boundaries(rho, v, y_q[k + 1], y_v[k + 1])
        stepper.check_state(rho, v, k + 1)
        values[0, k + 1] = rho
        values[1, k + 1] = v
    return Trajectory(grid, values)
