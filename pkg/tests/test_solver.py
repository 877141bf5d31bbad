import numpy as np
import pytest

from pget_recon import forward as fwd
from pget_recon import geometry as geo
from pget_recon import phantom as ph
from pget_recon import solver as sv
from pget_recon.errors import InvalidInputError, ZeroModelDecreaseError

SPEC = ph.AssemblySpec()


def make_problem(n_px=33, pixel_size=5.0, n_angles=16, seed=5, branch="missing",
                 noise=0.02, rel=(1.0, 1.0)):
    grid = geo.build_grid(n_px, pixel_size)
    det = geo.default_detector(grid, n_angles=n_angles)
    tables = geo.build_ray_tables(grid, det)
    truth = ph.rasterize(ph.sample_assembly(SPEC, "standard", seed, branch=branch), grid, 2)
    y = fwd.project(truth, tables)
    if noise:
        y = fwd.add_noise(y, noise, seed)
    cons = sv.default_constraints(grid, SPEC)
    weights = sv.geometry_prior_weights(grid, SPEC)
    alphas = sv.default_alphas(y, weights, cons, rel=rel)
    reg = sv.RegularizationConfig(alphas[0], alphas[1], weights)
    return grid, tables, truth, sv.Problem(y, tables, reg, cons)


# ---------------------------------------------------------------------------
# constraints
# ---------------------------------------------------------------------------

def test_projection_idempotent_and_contains_zero():
    grid = geo.build_grid(33, 5.0)
    cons = sv.default_constraints(grid, SPEC)
    rng = np.random.default_rng(0)
    v = rng.normal(0, 1e6, (2, 33, 33))
    v[1] = rng.normal(0, 0.2, (33, 33))
    p1 = cons.project_stack(v)
    p2 = cons.project_stack(p1)
    assert np.array_equal(p1, p2)
    assert cons.is_feasible(p1)
    assert cons.is_feasible(np.zeros((2, 33, 33)))


def test_projection_hits_wedge_boundary():
    grid = geo.build_grid(33, 5.0)
    cons = sv.default_constraints(grid, SPEC)
    v = np.zeros((2, 33, 33))
    v[0, 16, 16] = cons.lambda_max  # bright
    v[1, 16, 16] = 0.0  # transparent: forbidden combination
    p = cons.project_stack(v)
    a, b = cons._wedge_params()
    assert p[0, 16, 16] < cons.lambda_max
    assert p[0, 16, 16] == pytest.approx(a + b * p[1, 16, 16])


def test_projection_exactness_against_brute_force():
    grid = geo.build_grid(3, 40.0)
    cons = sv.Constraints(lambda_max=1.0, mu_max=1.0, mask=np.ones((3, 3), bool),
                          wedge_floor_frac=0.1, mu_threshold=0.5)
    rng = np.random.default_rng(1)
    # dense feasible cloud as a brute-force oracle
    lam_g, mu_g = np.meshgrid(np.linspace(0, 1, 301), np.linspace(0, 1, 301), indexing="ij")
    a, b = cons._wedge_params()
    feas = lam_g <= a + b * mu_g
    pts = np.stack([lam_g[feas], mu_g[feas]], axis=1)
    for _ in range(25):
        raw = rng.normal(0.5, 1.0, 2)
        v = np.zeros((2, 3, 3))
        v[0, 1, 1], v[1, 1, 1] = raw
        p = cons.project_stack(v)
        got = np.array([p[0, 1, 1], p[1, 1, 1]])
        dists = np.sum((pts - raw) ** 2, axis=1)
        best = pts[np.argmin(dists)]
        assert np.sum((got - raw) ** 2) <= np.min(dists) + 1e-4


# ---------------------------------------------------------------------------
# objective and model
# ---------------------------------------------------------------------------

def test_objective_zero_residual_and_zero_iterate():
    grid, tables, truth, problem = make_problem(noise=0.0, rel=(0.0, 0.0))
    f_truth, _, _ = problem.objective(truth.stack(), (0.0, 0.0))
    assert f_truth == pytest.approx(0.0, abs=1e-6)
    f0, _, _ = problem.objective(np.zeros_like(truth.stack()), (0.0, 0.0))
    assert f0 == pytest.approx(0.5 * np.sum(problem.y.y**2), rel=1e-14)


def test_objective_matches_independent_sum():
    grid, tables, truth, problem = make_problem()
    alphas = (problem.reg.alpha1, problem.reg.alpha2)
    u = truth.stack() * 0.7
    f, res, _ = problem.objective(u, alphas)
    data = 0.5 * np.sum((fwd.project(problem.pair(u), tables).y - problem.y.y) ** 2)
    w = problem.reg.geometry_weights
    p1 = alphas[0] * np.sum((w * u[0]) ** 2)
    p2 = alphas[1] * np.sum((w * u[1]) ** 2)
    assert f == pytest.approx(data + p1 + p2, rel=1e-14)


def test_objective_rejects_infeasible():
    grid, tables, truth, problem = make_problem()
    bad = truth.stack().copy()
    bad[0, 16, 16] = 2 * problem.constraints.lambda_max
    with pytest.raises(InvalidInputError):
        problem.objective(bad, (0.0, 0.0), check_feasible=True)


def test_model_value_at_zero_and_expansion():
    grid, tables, truth, problem = make_problem()
    alphas = sv.decay_alpha(0, problem.reg)
    u = problem.constraints.project_stack(truth.stack() * 0.6)
    f, res, lfwd = problem.objective(u, alphas)
    lin = problem.linearize(lfwd, alphas)
    assert sv.model_value(np.zeros_like(u), res, lin) == pytest.approx(f, rel=1e-14)
    rng = np.random.default_rng(2)
    s = rng.normal(0, 1e3, u.shape) * problem.constraints.mask
    s[1] *= 1e-9
    m = sv.model_value(s, res, lin)
    js = lin.jvp(s)
    expansion = f + js.inner(res) + 0.5 * js.norm2()
    assert m == pytest.approx(expansion, rel=1e-12)


def test_model_taylor_agreement():
    grid, tables, truth, problem = make_problem(noise=0.0)
    alphas = sv.decay_alpha(0, problem.reg)
    u = problem.constraints.project_stack(truth.stack() * 0.8)
    f, res, lfwd = problem.objective(u, alphas)
    lin = problem.linearize(lfwd, alphas)
    rng = np.random.default_rng(3)
    s = rng.normal(0, 1.0, u.shape) * problem.constraints.mask
    s[0] *= 1e3
    s[1] *= 1e-3
    gaps = []
    for t in (1.0, 0.5, 0.25, 0.125):
        ft, _, _ = problem.objective(np.clip(u + t * s, 0, None) * 0 + (u + t * s), alphas)
        mt = sv.model_value(t * s, res, lin)
        gaps.append(abs(ft - mt) / t**2)
    # |f(u+ts) - m(ts)| = O(t^2): the ratio stays bounded as t shrinks
    assert max(gaps) <= 10 * min(gaps) + 1e-6 * abs(f)


def test_gradient_matches_finite_differences():
    grid, tables, truth, problem = make_problem(n_px=9, pixel_size=165.0 / 9, n_angles=8)
    alphas = sv.decay_alpha(0, problem.reg)
    u = problem.constraints.project_stack(truth.stack() * 0.5)
    f, res, lfwd = problem.objective(u, alphas)
    lin = problem.linearize(lfwd, alphas)
    grad = lin.vjp(res)
    rng = np.random.default_rng(4)
    mask = problem.constraints.mask
    for _ in range(4):
        d = rng.standard_normal(u.shape) * mask
        d[0] *= 1e4
        d[1] *= 1e-3
        h = 1e-6
        fp, _, _ = problem.objective(u + h * d, alphas)
        fm, _, _ = problem.objective(u - h * d, alphas)
        fd = (fp - fm) / (2 * h)
        an = float(np.sum(grad * d))
        assert abs(fd - an) <= 1e-6 * abs(an)


# ---------------------------------------------------------------------------
# inner solver
# ---------------------------------------------------------------------------

def test_sgp_zero_residual_returns_zero():
    grid, tables, truth, problem = make_problem(noise=0.0, rel=(0.0, 0.0))
    alphas = (0.0, 0.0)
    f, res, lfwd = problem.objective(truth.stack(), alphas)
    lin = problem.linearize(lfwd, alphas)
    s, info = sv.sgp_solve(truth.stack(), res, lin, 1.0, problem.constraints)
    assert np.all(s == 0.0)


def test_sgp_matches_damped_normal_equations():
    # interior small problem: on the free (in-disk) variables the solution
    # solves (J^T J + beta T^-2) s = -J^T r
    grid = geo.build_grid(5, 33.0)
    det = geo.DetectorSpec(n_offsets=119, offset_pitch=2.0, n_angles=24)
    tables = geo.build_ray_tables(grid, det)
    mask = geo.disk_mask(grid)
    rng = np.random.default_rng(5)
    lam = rng.uniform(2e5, 6e5, (5, 5)) * mask
    mu = rng.uniform(0.02, 0.08, (5, 5)) * mask
    pair = fwd.ImagePair(lam, mu, (7e5, 0.14))
    cons = sv.Constraints(lambda_max=7e7, mu_max=14.0, mask=mask, wedge_floor_frac=1.0)
    y = fwd.Sinogram(fwd.project(pair, tables).y * 1.01, tables.table_hash)
    w = np.ones((5, 5))
    reg = sv.RegularizationConfig(0.0, 0.0, w)
    problem = sv.Problem(y, tables, reg, cons)
    alphas = (0.0, 0.0)
    f, res, lfwd = problem.objective(pair.stack(), alphas)
    lin = problem.linearize(lfwd, alphas)
    beta = 1e-3 * f / mask.sum()
    s, info = sv.sgp_solve(pair.stack(), res, lin, beta, cons,
                           sv.SGPConfig(tol=1e-12, max_inner=4000))
    # dense reference on the free variables (pixels outside the disk are
    # pinned at zero by the feasible set)
    free = np.concatenate([mask.ravel(), mask.ravel()])
    idx = np.nonzero(free)[0]
    n2 = 25
    cols = []
    for i in idx:
        e = np.zeros(2 * n2)
        e[i] = 1.0
        js = lin.jvp(e.reshape(2, 5, 5))
        cols.append(np.concatenate([js.data.ravel(), js.r1.ravel(), js.r2.ravel()]))
    J = np.stack(cols, axis=1)
    r = np.concatenate([res.data.ravel(), res.r1.ravel(), res.r2.ravel()])
    T = np.concatenate([np.full(n2, 7e7), np.full(n2, 14.0)])[idx]
    ref = np.linalg.solve(J.T @ J + beta * np.diag(1.0 / T**2), -J.T @ r)
    got = np.concatenate([s[0].ravel(), s[1].ravel()])
    # the reference must itself be interior for the comparison to be exact
    u_free = np.concatenate([pair.emission.ravel(), pair.attenuation.ravel()])[idx]
    assert np.all(u_free + ref > 0)
    assert np.linalg.norm(got[idx] - ref) <= 1e-6 * np.linalg.norm(ref)
    assert np.all(got[~free] == 0.0)


def test_sgp_activates_constraints():
    grid, tables, truth, problem = make_problem(noise=0.0)
    cons = problem.constraints
    # start at the upper bound; the unconstrained step would overshoot it
    u = np.zeros_like(truth.stack())
    u[0] = np.where(cons.mask, cons.lambda_max, 0.0)
    u[1] = np.where(cons.mask, 0.5 * cons.mu_max, 0.0)
    u = cons.project_stack(u)
    alphas = sv.decay_alpha(0, problem.reg)
    f, res, lfwd = problem.objective(u, alphas)
    lin = problem.linearize(lfwd, alphas)
    s, _ = sv.sgp_solve(u, res, lin, 1e-6 * f / cons.mask.sum(), cons,
                        sv.SGPConfig(max_inner=80))
    out = u + s
    assert cons.is_feasible(out, tol=1e-12)
    # at least part of the iterate presses against a box face or the wedge
    a, b = cons._wedge_params()
    active = (out[0] <= 0) | (out[0] >= cons.lambda_max - 1e-6) \
        | (out[0] >= a + b * out[1] - 1e-6 * cons.lambda_max)
    assert np.any(active[cons.mask])


# ---------------------------------------------------------------------------
# trust-region step and loop
# ---------------------------------------------------------------------------

def linear_problem():
    """Emission-only problem: attenuation pinned at zero, residual linear."""
    grid = geo.build_grid(9, 165.0 / 9)
    det = geo.DetectorSpec(n_offsets=85, offset_pitch=2.0, n_angles=6)
    tables = geo.build_ray_tables(grid, det)
    mask = geo.disk_mask(grid)
    rng = np.random.default_rng(6)
    lam_true = rng.uniform(0, 6e5, (9, 9)) * mask
    truth = fwd.ImagePair(lam_true, np.zeros((9, 9)), (7e5, 0.0))
    y = fwd.project(truth, tables)
    cons = sv.Constraints(lambda_max=7e5, mu_max=0.0, mask=mask, wedge_floor_frac=1.0)
    reg = sv.RegularizationConfig(0.0, 0.0, np.ones((9, 9)))
    return grid, tables, truth, sv.Problem(y, tables, reg, cons), cons


def test_lm_step_linear_residual_rho_is_one():
    grid, tables, truth, problem, cons = linear_problem()
    u0 = np.zeros_like(truth.stack())
    u0[0] = np.where(cons.mask, 3.5e5, 0.0)
    cfg = sv.SolverConfig()
    state = sv.initial_state(problem, u0, cfg, (0.0, 0.0))
    prop, state = sv.lm_step(state, problem, cfg)
    assert prop.accepted
    assert prop.rho == pytest.approx(1.0, abs=1e-10)


def test_lm_step_accepted_decreases_objective():
    grid, tables, truth, problem = make_problem(seed=8)
    cfg = sv.SolverConfig(sgp=sv.SGPConfig(max_inner=60))
    u0 = sv.initial_guess(grid, SPEC, problem.constraints, "half").stack()
    state = sv.initial_state(problem, u0, cfg, sv.decay_alpha(0, problem.reg))
    for k in range(3):
        state = sv.replace_state(state, alphas=sv.decay_alpha(k, problem.reg), k=k)
        prop, state = sv.lm_step(state, problem, cfg)
        assert prop.accepted
        assert prop.rho > cfg.eta
        assert prop.f_next < prop.f


def test_lm_solve_trajectory_and_descent():
    grid, tables, truth, problem = make_problem(seed=9)
    cfg = sv.SolverConfig(sgp=sv.SGPConfig(max_inner=60))
    u0 = sv.initial_guess(grid, SPEC, problem.constraints, "site")
    traj = sv.lm_solve(u0, problem, 5, cfg, truth=truth)
    assert len(traj.iterates) == 6
    assert len(traj.records) == 5
    for r in traj.records:
        assert r.f_next < r.f
        assert problem.constraints.is_feasible(traj.iterates[r.k + 1])
    with np.errstate(all="ignore"):
        alphas = [(r.alpha1, r.alpha2) for r in traj.records]
    assert alphas[1][0] == pytest.approx(alphas[0][0] / 5.0)


def test_lm_zero_iterations():
    grid, tables, truth, problem = make_problem(seed=10)
    u0 = sv.initial_guess(grid, SPEC, problem.constraints, "half")
    traj = sv.lm_solve(u0, problem, 0, sv.SolverConfig())
    assert len(traj.iterates) == 1
    assert np.array_equal(traj.iterates[0], u0.stack())


def test_lm_stalls_at_stationary_point():
    grid, tables, truth, problem, cons = linear_problem()
    y_exact = fwd.project(truth, tables)
    problem = sv.Problem(y_exact, tables, problem.reg, cons)
    traj = sv.lm_solve(truth, problem, 3, sv.SolverConfig())
    assert traj.stalled
    assert traj.records[-1].branch == "stalled"


def test_beta_non_increasing_after_first_acceptance():
    good = 0
    for seed in range(5):
        grid, tables, truth, problem = make_problem(seed=40 + seed, n_angles=12)
        cfg = sv.SolverConfig(sgp=sv.SGPConfig(max_inner=60))
        u0 = sv.initial_guess(grid, SPEC, problem.constraints, "site")
        traj = sv.lm_solve(u0, problem, 6, cfg)
        betas = [r.beta for r in traj.records]
        if all(b2 <= b1 + 1e-12 for b1, b2 in zip(betas, betas[1:])):
            good += 1
    assert good >= 4  # at least 80 percent of the runs


def test_cauchy_decrease_inequality():
    grid, tables, truth, problem = make_problem(seed=12)
    cfg = sv.SolverConfig(sgp=sv.SGPConfig(max_inner=60))
    u0 = sv.initial_guess(grid, SPEC, problem.constraints, "site").stack()
    state = sv.initial_state(problem, u0, cfg, sv.decay_alpha(0, problem.reg))
    cons = problem.constraints
    for k in range(3):
        alphas = sv.decay_alpha(k, problem.reg)
        state = sv.replace_state(state, alphas=alphas, k=k)
        f, res, lfwd = problem.objective(state.u, alphas)
        lin = problem.linearize(lfwd, alphas)
        grad = lin.vjp(res)
        # stationarity measure: projected-gradient displacement in step scale
        T = sv.step_scale(cons)
        proj_point = cons.project_stack(state.u - grad)
        pg = float(np.linalg.norm((proj_point - state.u) / T))
        jg = lin.jvp(grad)
        curvature = 2.0 * jg.norm2() / max(float(np.sum((grad / T) ** 2)), 1e-300)
        prop, state = sv.lm_step(state, problem, cfg)
        decrease = prop.m0 - prop.m_s
        bound = 0.5 * pg * min(state.delta, pg / max(curvature, 1e-300))
        assert decrease >= 0.1 * bound  # c1 = 1/2 with generous numerical headroom


def test_rho_examples():
    grid, tables, truth, problem, cons = linear_problem()
    u = np.zeros_like(truth.stack())
    u[0] = np.where(cons.mask, 2e5, 0.0)
    rng = np.random.default_rng(7)
    s = np.zeros_like(u)
    s[0] = rng.uniform(0, 1e4, (9, 9)) * cons.mask
    ratio = sv.rho(u, s, problem, (0.0, 0.0))
    assert ratio == pytest.approx(1.0, abs=1e-12)
    zero = np.zeros_like(u)
    with pytest.raises(ZeroModelDecreaseError):
        sv.rho(u, zero, problem, (0.0, 0.0))


def test_rho_zero_actual_decrease():
    # nonlinear problem: march along a descent direction past the valley
    # until the objective returns to its starting value; there rho = 0 while
    # the linear model still predicts a decrease
    grid, tables, truth, problem = make_problem(n_px=9, pixel_size=165.0 / 9,
                                                n_angles=8, rel=(0.0, 0.0))
    cons = problem.constraints
    u = sv.initial_guess(grid, SPEC, cons, "half").stack()
    alphas = (0.0, 0.0)
    f0, res, lfwd = problem.objective(u, alphas)
    lin = problem.linearize(lfwd, alphas)
    grad = lin.vjp(res)
    s = -grad / np.linalg.norm(grad / sv.step_scale(cons))
    t_hi = 1.0
    for _ in range(60):
        trial = np.clip(u + t_hi * s, 0.0, None)
        trial[1] = np.minimum(trial[1], cons.mu_max)
        trial[0] = np.minimum(trial[0], cons.lambda_max)
        f_hi, _, _ = problem.objective(trial, alphas)
        if f_hi > f0:
            break
        t_hi *= 2.0
    assert f_hi > f0
    t_lo = 1e-6 * t_hi
    for _ in range(200):
        t_mid = 0.5 * (t_lo + t_hi)
        trial = np.clip(u + t_mid * s, 0.0, None)
        trial[1] = np.minimum(trial[1], cons.mu_max)
        trial[0] = np.minimum(trial[0], cons.lambda_max)
        f_mid, _, _ = problem.objective(trial, alphas)
        if f_mid < f0:
            t_lo = t_mid
        else:
            t_hi = t_mid
    t_star = 0.5 * (t_lo + t_hi)
    step = np.clip(u + t_star * s, 0.0, None)
    step[1] = np.minimum(step[1], cons.mu_max)
    step[0] = np.minimum(step[0], cons.lambda_max)
    step = step - u
    ratio = sv.rho(u, step, problem, alphas)
    assert abs(ratio) <= 1e-6


def test_decay_alpha_examples():
    reg = sv.RegularizationConfig(2.0, 4.0, np.ones((3, 3)), decay_factor=5.0, freeze_after=3)
    assert sv.decay_alpha(0, reg) == (2.0, 4.0)
    assert sv.decay_alpha(2, reg) == (pytest.approx(2.0 / 25), pytest.approx(4.0 / 25))
    assert sv.decay_alpha(10, reg) == (pytest.approx(2.0 / 125), pytest.approx(4.0 / 125))


def test_state_validation():
    with pytest.raises(InvalidInputError):
        sv.TrustRegionState(u=np.zeros((2, 3, 3)), beta=1.0, delta=1.0, eta=0.3)
    with pytest.raises(InvalidInputError):
        sv.TrustRegionState(u=np.zeros((2, 3, 3)), beta=-1.0, delta=1.0)
    with pytest.raises(InvalidInputError):
        sv.TrustRegionState(u=np.zeros((2, 3, 3)), beta=1.0, delta=0.0)
