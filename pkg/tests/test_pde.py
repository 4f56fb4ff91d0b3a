import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nobs.errors import CflViolation, GridMismatch, IncompatibleIc, KindMismatch, NonPhysicalState
from nobs.pde import (
    ArzParams,
    Grid,
    MeasurementKind,
    ReactionDiffusionParams,
    Scheme,
    Trajectory,
    extract_measurements,
    l2_norm,
    lambda_profile,
    simulate_arz,
    simulate_reaction_diffusion,
)

# 32 / cosh(2)^2 evaluated to 25 digits with mpmath
LAMBDA_AT_0 = 2.260826395301262901959925


def rd_grid(nt=50, horizon=0.125, nx=51):
    return Grid.uniform(nx, 1.0, nt, horizon)


def test_grid_coordinates_exact():
    g = Grid(nx=51, dx=0.02, nt=99, dt=0.006)
    assert np.array_equal(g.x, np.arange(51) * 0.02)
    assert np.array_equal(g.t, np.arange(100) * 0.006)
    assert g.x_max == 50 * 0.02
    assert Grid.from_dict(g.to_dict()) == g


@pytest.mark.parametrize("kw", [dict(nx=2, dx=0.1, nt=1, dt=0.1), dict(nx=5, dx=0.0, nt=1, dt=0.1),
                                dict(nx=5, dx=0.1, nt=0, dt=0.1), dict(nx=5, dx=0.1, nt=1, dt=-1.0)])
def test_grid_rejects_bad_sizes(kw):
    with pytest.raises(ValueError):
        Grid(**kw)


def test_lambda_profile_values():
    p = ReactionDiffusionParams.one_peak(4.0, 2.0, 1.0)
    assert lambda_profile(0.5, p) == 32.0
    assert lambda_profile(0.0, p) == pytest.approx(LAMBDA_AT_0, rel=1e-14)
    q = ReactionDiffusionParams.one_peak(3.0, 1.2, 0.7)
    assert lambda_profile(1.2 / 3.0, q) == pytest.approx(2 * 0.7 * 9.0, rel=1e-15)
    c = ReactionDiffusionParams.constant(12.0)
    assert np.all(lambda_profile(np.linspace(0, 1, 7), c) == 12.0)


def test_params_reject_nonpositive_diffusivity():
    with pytest.raises(ValueError):
        ReactionDiffusionParams(epsilon=0.0)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_zero_ic_stays_zero(scheme):
    g = Grid.uniform(51, 1.0, 1000, 0.125) if scheme is Scheme.EXPLICIT else rd_grid()
    tr = simulate_reaction_diffusion(np.zeros(51), ReactionDiffusionParams.one_peak(), g, scheme)
    assert np.all(tr.values == 0.0)


def test_initial_condition_stored_bit_exactly():
    g = rd_grid()
    ic = np.sin(np.pi * g.x / 2) * np.pi / 3
    tr = simulate_reaction_diffusion(ic, ReactionDiffusionParams.one_peak(), g)
    assert np.array_equal(tr.values[0, 0], ic)
    assert np.all(tr.values[0, :, 0] == 0.0)
    assert np.all(np.isfinite(tr.values))


def test_heat_eigenmode_decay():
    # lambda = 0 with u(0)=0, u_x(1)=0: sin(pi x / 2) decays at (pi/2)^2
    g = Grid.uniform(201, 1.0, 2000, 0.5)
    ic = np.sin(np.pi * g.x / 2)
    tr = simulate_reaction_diffusion(ic, ReactionDiffusionParams.constant(0.0), g)
    ratio = l2_norm(tr.values[0, -1], g.dx) / l2_norm(ic, g.dx)
    assert ratio == pytest.approx(np.exp(-(np.pi / 2) ** 2 * 0.5), rel=2e-3)


def test_open_loop_one_peak_grows():
    g = rd_grid()
    ic = np.sin(np.pi * g.x / 2)
    tr = simulate_reaction_diffusion(ic, ReactionDiffusionParams.one_peak(), g)
    assert l2_norm(tr.values[0, -1], g.dx) > l2_norm(ic, g.dx)


def test_explicit_cfl_violation():
    g = Grid.uniform(51, 1.0, 10, 0.125)  # eps dt / dx^2 = 31
    with pytest.raises(CflViolation):
        simulate_reaction_diffusion(np.zeros(51), ReactionDiffusionParams.one_peak(), g, Scheme.EXPLICIT)


def test_incompatible_ic():
    g = rd_grid()
    ic = np.ones(51)
    with pytest.raises(IncompatibleIc):
        simulate_reaction_diffusion(ic, ReactionDiffusionParams.one_peak(), g)
    ic = np.sin(np.pi * g.x / 2)
    p = ReactionDiffusionParams.constant(12.0, right_bc="dirichlet")
    with pytest.raises(IncompatibleIc):
        simulate_reaction_diffusion(ic, p, g)


def test_ic_length_checked():
    with pytest.raises(GridMismatch):
        simulate_reaction_diffusion(np.zeros(50), ReactionDiffusionParams.one_peak(), rd_grid())


@settings(max_examples=25, deadline=None)
@given(dt=st.floats(1e-4, 10.0), seed=st.integers(0, 2**32 - 1))
def test_implicit_euler_is_l2_contractive(dt, seed):
    rng = np.random.default_rng(seed)
    g = Grid(nx=41, dx=1.0 / 40, nt=8, dt=dt)
    ic = rng.standard_normal(41)
    ic[0] = 0.0
    tr = simulate_reaction_diffusion(ic, ReactionDiffusionParams.constant(0.0), g)
    norms = l2_norm(tr.values[0], g.dx)
    assert np.all(np.diff(norms) <= 1e-12 * norms[0])


def temporal_order(nt0=25):
    p = ReactionDiffusionParams.constant(0.0)
    finals = []
    for m in (1, 2, 4):
        g = Grid.uniform(51, 1.0, nt0 * m, 0.125)
        finals.append(simulate_reaction_diffusion(np.sin(np.pi * g.x / 2), p, g).values[0, -1])
    e1 = l2_norm(finals[0] - finals[1], 0.02)
    e2 = l2_norm(finals[1] - finals[2], 0.02)
    return np.log2(e1 / e2)


def test_implicit_euler_temporal_order():
    assert 0.8 <= temporal_order() <= 1.2


def test_explicit_and_implicit_agree():
    p = ReactionDiffusionParams.one_peak()
    gi = rd_grid(nt=2000)
    ge = rd_grid(nt=1000)
    ic = np.sin(np.pi * gi.x / 2)
    ui = simulate_reaction_diffusion(ic, p, gi, Scheme.IMPLICIT_EULER).values[0, -1]
    ue = simulate_reaction_diffusion(ic, p, ge, Scheme.EXPLICIT).values[0, -1]
    assert l2_norm(ui - ue, 0.02) / l2_norm(ue, 0.02) < 5e-3


def test_dirichlet_right_end_held():
    g = Grid(nx=51, dx=0.02, nt=20, dt=0.006)
    p = ReactionDiffusionParams.constant(12.0, right_bc="dirichlet")
    tr = simulate_reaction_diffusion(np.sin(np.pi * g.x), p, g)
    assert np.all(tr.values[0, 1:, -1] == 0.0)


# --- measurements -----------------------------------------------------------------


def test_measurement_neumann_exact_for_linear_field():
    g = rd_grid(nt=4)
    vals = np.broadcast_to(g.x, (g.nt + 1, g.nx))[None].copy()
    ms = extract_measurements(Trajectory(g, vals), "neumann_at_1")
    assert np.max(np.abs(ms.values - 1.0)) < 1e-10


def test_measurement_dirichlet_reads_grid_values():
    g = rd_grid()
    tr = simulate_reaction_diffusion(np.sin(np.pi * g.x / 2), ReactionDiffusionParams.one_peak(), g)
    ms = extract_measurements(tr, MeasurementKind.DIRICHLET_AT_1)
    assert np.array_equal(ms.values[0], tr.values[0, :, -1])
    assert ms.values.shape == (1, g.nt + 1)


def test_measurement_zero_field():
    g = rd_grid()
    ms = extract_measurements(Trajectory(g, np.zeros((1, g.nt + 1, g.nx))), "neumann_at_1")
    assert np.all(ms.values == 0)


def test_kind_mismatch():
    g = rd_grid()
    with pytest.raises(KindMismatch):
        extract_measurements(Trajectory(g, np.zeros((1, g.nt + 1, g.nx))), "traffic_triple")
    with pytest.raises(KindMismatch):
        extract_measurements(Trajectory(g, np.ones((2, g.nt + 1, g.nx))), "dirichlet_at_1")


# --- ARZ ------------------------------------------------------------------------------


def traffic_grid(nx=51, nt=240, horizon=60.0):
    return Grid.uniform(nx, 500.0, nt, horizon)


def test_arz_params():
    p = ArzParams()
    assert p.q_star == p.rho_star * p.v_star
    assert p.V(p.rho_star) == pytest.approx(10.0)
    assert p.lambda1 > p.lambda2
    assert p.V_inverse(p.V(0.1)) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        ArzParams(rho_star=0.2)


def test_arz_equilibrium_is_steady():
    p = ArzParams()
    g = traffic_grid()
    rho = np.full(g.nx, p.rho_star)
    v = np.full(g.nx, p.V(p.rho_star))
    tr = simulate_arz(rho, v, p, g, p.rho_star * p.V(p.rho_star), p.V(p.rho_star))
    assert np.max(np.abs(tr.values[0] - p.rho_star)) < 1e-14
    assert np.max(np.abs(tr.values[1] - p.V(p.rho_star))) < 1e-12
    ms = extract_measurements(tr, "traffic_triple")
    expect = [p.rho_star * p.V(p.rho_star), p.V(p.rho_star), p.rho_star * p.V(p.rho_star)]
    assert np.allclose(ms.values, np.array(expect)[:, None], rtol=1e-13, atol=0)


def test_arz_zero_perturbation_dynamics_zero():
    # with equilibrium data the deviation from equilibrium stays identically zero
    p = ArzParams()
    g = traffic_grid(nt=40, horizon=10.0)
    eq = np.full(g.nx, p.rho_star), np.full(g.nx, p.V(p.rho_star))
    tr = simulate_arz(*eq, p, g, p.rho_star * p.V(p.rho_star), p.V(p.rho_star))
    assert np.max(np.abs(tr.values[1] - tr.values[1, 0])) < 1e-12


def test_arz_cfl_violation():
    p = ArzParams()
    g = Grid.uniform(51, 500.0, 10, 10.0)  # dt/dx = 0.1, |lambda2| ~ 20 -> CFL ~ 2
    with pytest.raises(CflViolation):
        simulate_arz(np.full(51, p.rho_star), np.full(51, 10.0), p, g, p.q_star, 10.0)


def test_arz_nonphysical_state_reports_step():
    p = ArzParams()
    g = traffic_grid(nt=40, horizon=10.0)
    rho = np.full(g.nx, p.rho_star)
    v = np.full(g.nx, 10.0)
    with pytest.raises(NonPhysicalState) as info:
        simulate_arz(rho, v, p, g, p.q_star, -1.0)
    assert info.value.step == 1
    rho[3] = -0.01
    with pytest.raises(NonPhysicalState):
        simulate_arz(rho, v, p, g, p.q_star, 10.0)


def arz_bump_solution(m, horizon=60.0):
    """Smooth interior bump on a grid with 25 m + 1 nodes."""
    p = ArzParams()
    nx = 25 * m + 1
    g = Grid.uniform(nx, p.L_r, int(round(horizon * m / 0.4)), horizon)
    bump = np.exp(-(((g.x - 250.0) / 80.0) ** 2))
    veq = p.V(p.rho_star)
    tr = simulate_arz(p.rho_star * (1 + 0.05 * bump), veq * (1 - 0.05 * bump), p, g,
                      p.rho_star * veq, veq)
    return tr.values[:, -1]


def lax_wendroff_order():
    """Self-convergence order from three grids, each refined 2x in space and time."""
    a, b, c = arz_bump_solution(8), arz_bump_solution(16), arz_bump_solution(32)
    e1 = np.sqrt(np.mean((a - b[:, ::2]) ** 2, axis=1))
    e2 = np.sqrt(np.mean((b - c[:, ::2]) ** 2, axis=1))
    return np.log2(e1 / e2)


def test_lax_wendroff_self_convergence():
    orders = lax_wendroff_order()
    assert np.all((orders >= 1.7) & (orders <= 2.3)), orders
