"""Regularized nonlinear least squares with a trust-region Levenberg-Marquardt loop.

The objective is

    f(u) = 1/2 ||F(u) - y||^2 + a1 ||P1 lam||^2 + a2 ||P2 mu||^2

handled throughout as half the squared norm of a stacked residual
``(F(u) - y, sqrt(2 a1) P1 lam, sqrt(2 a2) P2 mu)``. Each outer iteration
linearizes the stack, solves the damped subproblem

    min_{u + s feasible} ||J s + r||^2 + beta ||s||^2

with scaled projected gradients, and accepts or rejects the step based on
the agreement ratio between actual and model decrease.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError, ZeroModelDecreaseError
from .forward import ImagePair, LinearizedForward, Sinogram
from .geometry import GridSpec, RayTables, disk_mask
from .phantom import AssemblySpec

__all__ = [
    "Constraints",
    "RegularizationConfig",
    "SGPConfig",
    "SolverConfig",
    "TrustRegionState",
    "StepProposal",
    "Problem",
    "ResidualStack",
    "geometry_prior_weights",
    "default_constraints",
    "default_alphas",
    "decay_alpha",
    "eval_objective",
    "model_value",
    "sgp_solve",
    "lm_step",
    "lm_solve",
    "rho",
    "Trajectory",
    "IterationRecord",
]


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constraints:
    """Box bounds plus the convex wedge that forbids bright low-attenuation pixels.

    Feasible pixels satisfy ``0 <= lam <= lambda_max``, ``0 <= mu <= mu_max``
    and ``lam <= wedge_floor_frac * lambda_max + slope * mu`` where the slope
    is chosen so the wedge reaches ``lambda_max`` at ``mu = mu_threshold``.
    Everything outside the disk mask is fixed at zero.
    """

    lambda_max: float
    mu_max: float
    mask: np.ndarray
    wedge_floor_frac: float = 0.05
    mu_threshold: float = 0.0321375

    def __post_init__(self):
        if self.lambda_max < 0 or self.mu_max < 0:
            raise InvalidInputError("bounds must be nonnegative")
        if not (0 < self.wedge_floor_frac <= 1.0):
            raise InvalidInputError("wedge floor fraction must be in (0, 1]")

    @property
    def wedge_enabled(self) -> bool:
        return self.wedge_floor_frac < 1.0 and self.mu_threshold > 0

    def _wedge_params(self):
        a = self.wedge_floor_frac * self.lambda_max
        b = (self.lambda_max - a) / self.mu_threshold
        return a, b

    def project_stack(self, v: np.ndarray, weights=(1.0, 1.0)) -> np.ndarray:
        """Exact projection of a [2, n, n] stack, in the diagonal metric ``weights``.

        The metric weighs the squared emission and attenuation deviations;
        the result is the exact minimizer because the feasible set is a
        per-pixel convex polygon: either the box projection already satisfies
        the wedge or the solution lies on the wedge segment.
        """
        lam = np.clip(v[0], 0.0, self.lambda_max)
        mu = np.clip(v[1], 0.0, self.mu_max)
        if self.wedge_enabled:
            a, b = self._wedge_params()
            viol = lam > a + b * mu
            if np.any(viol):
                w_l, w_m = weights
                if np.ndim(w_l):
                    w_l = np.asarray(w_l)[viol]
                if np.ndim(w_m):
                    w_m = np.asarray(w_m)[viol]
                lam_hat = v[0][viol]
                mu_hat = v[1][viol]
                x = (w_m * mu_hat + w_l * b * (lam_hat - a)) / (w_m + w_l * b * b)
                x_hi = min(self.mu_max, (self.lambda_max - a) / b)
                x = np.clip(x, 0.0, x_hi)
                mu[viol] = x
                lam[viol] = a + b * x
        out = np.stack([lam, mu])
        out[:, ~self.mask] = 0.0
        return out

    def project_pair(self, pair: ImagePair) -> ImagePair:
        proj = self.project_stack(pair.stack())
        return ImagePair(proj[0], proj[1], pair.bounds)

    def is_feasible(self, v: np.ndarray, tol: float = 0.0) -> bool:
        scale_l = tol * max(self.lambda_max, 1.0)
        scale_m = tol * max(self.mu_max, 1.0)
        lam, mu = v[0], v[1]
        if lam.min() < -scale_l or lam.max() > self.lambda_max + scale_l:
            return False
        if mu.min() < -scale_m or mu.max() > self.mu_max + scale_m:
            return False
        if self.wedge_enabled:
            a, b = self._wedge_params()
            if np.any(lam > a + b * mu + scale_l):
                return False
        if np.any(v[:, ~self.mask] != 0.0):
            return False
        return True


def default_constraints(grid: GridSpec, spec: AssemblySpec) -> Constraints:
    """Constraints derived from the assembly material ranges."""
    midpoint = 0.5 * (spec.water_attenuation + spec.attenuation_range[0])
    return Constraints(
        lambda_max=spec.bounds[0],
        mu_max=spec.bounds[1],
        mask=disk_mask(grid),
        wedge_floor_frac=0.05,
        mu_threshold=0.5 * midpoint,
    )


# ---------------------------------------------------------------------------
# Regularization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegularizationConfig:
    """Geometry-prior weights and their decay schedule."""

    alpha1: float
    alpha2: float
    geometry_weights: np.ndarray  # [n, n], zero on dilated rod sites
    decay_factor: float = 5.0
    freeze_after: int = 3

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise InvalidInputError("regularization weights must be nonnegative")
        if self.decay_factor <= 0:
            raise InvalidInputError("decay factor must be positive")
        if self.freeze_after < 0:
            raise InvalidInputError("freeze_after must be nonnegative")


def decay_alpha(k: int, reg: RegularizationConfig) -> tuple[float, float]:
    """Per-iteration regularization weights: divide by decay^k, frozen after K_freeze."""
    if k < 0:
        raise InvalidInputError("iteration index must be nonnegative")
    power = min(k, reg.freeze_after)
    factor = reg.decay_factor**power
    return (reg.alpha1 / factor, reg.alpha2 / factor)


def geometry_prior_weights(grid: GridSpec, spec: AssemblySpec) -> np.ndarray:
    """Diagonal prior weights: zero near nominal rod sites, one elsewhere.

    Sites are dilated by one pixel beyond the rod radius so the prior never
    penalizes values at plausible (slightly shifted) rod locations.
    """
    coords = grid.centers()
    X, Y = np.meshgrid(coords, coords, indexing="xy")
    weights = np.ones((grid.n_px, grid.n_px))
    radius = spec.rod_radius + grid.pixel_size
    for cx, cy in spec.lattice_centers():
        weights[(X - cx) ** 2 + (Y - cy) ** 2 <= radius * radius] = 0.0
    return weights


def default_alphas(
    y_delta: Sinogram,
    reg_weights: np.ndarray,
    constraints: Constraints,
    rel: tuple[float, float] = (1.0, 1.0),
) -> tuple[float, float]:
    """Starting weights scaled so each penalty is commensurate with the data term.

    ``rel=(1, 1)`` makes the penalty of the half-bound initial guess equal to
    half the squared data norm; decay then reduces it iteration by iteration.
    """
    data_scale = 0.5 * float(np.sum(y_delta.y**2))
    wsq = float(np.sum((reg_weights[constraints.mask]) ** 2))
    denom1 = wsq * (0.5 * constraints.lambda_max) ** 2
    denom2 = wsq * (0.5 * constraints.mu_max) ** 2
    a1 = rel[0] * data_scale / denom1 if denom1 > 0 else 0.0
    a2 = rel[1] * data_scale / denom2 if denom2 > 0 else 0.0
    return (a1, a2)


# ---------------------------------------------------------------------------
# Objective and its linearization
# ---------------------------------------------------------------------------

class ResidualStack:
    """Stacked residual: sinogram block plus the two weighted prior blocks."""

    __slots__ = ("data", "r1", "r2")

    def __init__(self, data, r1, r2):
        self.data = data
        self.r1 = r1
        self.r2 = r2

    def copy(self):
        return ResidualStack(self.data.copy(), self.r1.copy(), self.r2.copy())

    def norm2(self) -> float:
        return float(np.sum(self.data**2) + np.sum(self.r1**2) + np.sum(self.r2**2))

    def inner(self, other) -> float:
        return float(
            np.sum(self.data * other.data)
            + np.sum(self.r1 * other.r1)
            + np.sum(self.r2 * other.r2)
        )

    def axpy(self, t: float, other) -> None:
        self.data += t * other.data
        self.r1 += t * other.r1
        self.r2 += t * other.r2


class LinearizedResidual:
    """Jacobian of the stacked residual at a fixed iterate."""

    def __init__(self, lin_fwd: LinearizedForward, reg: RegularizationConfig, alphas):
        self.lin_fwd = lin_fwd
        self.w1 = math.sqrt(2.0 * alphas[0]) * reg.geometry_weights
        self.w2 = math.sqrt(2.0 * alphas[1]) * reg.geometry_weights
        self._diag = None

    def jvp(self, s: np.ndarray) -> ResidualStack:
        sino = self.lin_fwd.jvp(s[0], s[1])
        return ResidualStack(sino.y, self.w1 * s[0], self.w2 * s[1])

    def vjp(self, res: ResidualStack) -> np.ndarray:
        g_lam, g_mu = self.lin_fwd.vjp(res.data)
        g_lam = g_lam + self.w1 * res.r1
        g_mu = g_mu + self.w2 * res.r2
        return np.stack([g_lam, g_mu])

    def diag_squared(self) -> np.ndarray:
        """Approximate per-pixel squared column norms of the stacked Jacobian.

        Used as the diagonal scaling of the inner projected-gradient solver;
        the rotation is treated as a permutation, which is exact up to the
        bilinear interpolation spread.
        """
        if self._diag is not None:
            return self._diag
        lf = self.lin_fwd
        n = lf.n_px
        n_pix = n * n
        cols = lf._fp_cols
        paths_sq = lf.tables.paths.copy()
        paths_sq.data = paths_sq.data**2
        d_lam = np.zeros(n_pix)
        d_mu = np.zeros(n_pix)
        w_sq = lf._w**2
        mu_src = (lf._wc * lf._lam_fp) ** 2
        for a in range(lf.n_angles):
            rot_t = lf._rots[a].T
            col_lam = np.bincount(cols, weights=w_sq[:, a], minlength=n_pix)
            col_mu = np.bincount(cols, weights=mu_src[:, a], minlength=n_pix)
            d_lam += rot_t @ col_lam
            d_mu += rot_t @ (paths_sq.T @ col_mu)
        diag = np.stack([d_lam.reshape(n, n), d_mu.reshape(n, n)])
        diag[0] += self.w1**2
        diag[1] += self.w2**2
        self._diag = diag
        return diag


class Problem:
    """Measurement, tables, priors and constraints for one reconstruction."""

    def __init__(self, y_delta: Sinogram, tables: RayTables, reg: RegularizationConfig,
                 constraints: Constraints):
        if y_delta.table_hash and y_delta.table_hash != tables.table_hash:
            raise InvalidInputError("sinogram was produced with different tables")
        if y_delta.y.shape != (tables.det.n_offsets, tables.det.n_angles):
            raise InvalidInputError("sinogram shape does not match the detector spec")
        self.y = y_delta
        self.tables = tables
        self.reg = reg
        self.constraints = constraints
        self.bounds = (constraints.lambda_max, constraints.mu_max)

    def pair(self, stack: np.ndarray) -> ImagePair:
        return ImagePair(stack[0], stack[1], self.bounds)

    def objective(self, stack: np.ndarray, alphas, check_feasible: bool = False):
        """f(u) and the stacked residual at u."""
        if check_feasible and not self.constraints.is_feasible(stack, tol=1e-9):
            raise InvalidInputError("iterate is infeasible")
        lin = LinearizedForward(self.pair(stack), self.tables)
        w1 = math.sqrt(2.0 * alphas[0]) * self.reg.geometry_weights
        w2 = math.sqrt(2.0 * alphas[1]) * self.reg.geometry_weights
        res = ResidualStack(lin.project().y - self.y.y, w1 * stack[0], w2 * stack[1])
        return 0.5 * res.norm2(), res, lin

    def linearize(self, lin_fwd: LinearizedForward, alphas) -> LinearizedResidual:
        return LinearizedResidual(lin_fwd, self.reg, alphas)


def eval_objective(u: ImagePair, y_delta: Sinogram, tables: RayTables,
                   reg: RegularizationConfig, constraints: Constraints, alphas=None):
    """Objective value and stacked residual for an iterate (functional form)."""
    problem = Problem(y_delta, tables, reg, constraints)
    alphas = alphas if alphas is not None else (reg.alpha1, reg.alpha2)
    f, res, _ = problem.objective(u.stack(), alphas, check_feasible=True)
    return f, res


def model_value(s: np.ndarray, resid: ResidualStack, lin: LinearizedResidual) -> float:
    """Quadratic model m(s) = 1/2 || J s + r ||^2 of the stacked problem."""
    js = lin.jvp(s)
    js.axpy(1.0, resid)
    return 0.5 * js.norm2()


def rho(u: np.ndarray, s: np.ndarray, problem: Problem, alphas) -> float:
    """Agreement ratio (f(u) - f(u+s)) / (m(0) - m(s)); undefined at zero model decrease."""
    f0, res, lin_fwd = problem.objective(u, alphas)
    lin = problem.linearize(lin_fwd, alphas)
    m_s = model_value(s, res, lin)
    denom = f0 - m_s
    if denom == 0.0:
        raise ZeroModelDecreaseError("model predicts no decrease; rho is undefined")
    f1, _, _ = problem.objective(u + s, alphas)
    return (f0 - f1) / denom


# ---------------------------------------------------------------------------
# Scaled gradient projection for the damped linear subproblem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SGPConfig:
    tol: float = 1e-6
    max_inner: int = 200
    armijo_memory: int = 10
    armijo_c: float = 1e-4
    max_backtracks: int = 40
    pg_per_cycle: int = 6  # projected-gradient steps before each subspace phase
    cg_per_cycle: int = 30  # conjugate-gradient steps on the settled face


def step_scale(constraints: Constraints) -> np.ndarray:
    """Bound scales used for the damping norm; unit where a bound is zero."""
    return np.array(
        [
            constraints.lambda_max if constraints.lambda_max > 0 else 1.0,
            constraints.mu_max if constraints.mu_max > 0 else 1.0,
        ]
    )[:, None, None]


def scaled_step_norm(s: np.ndarray, constraints: Constraints) -> float:
    """Norm of the step in bound-normalized units, used for damping and radius."""
    return float(np.linalg.norm(s / step_scale(constraints)))


def sgp_solve(
    u: np.ndarray,
    resid: ResidualStack,
    lin: LinearizedResidual,
    beta: float,
    constraints: Constraints,
    cfg: SGPConfig = SGPConfig(),
    radius: float | None = None,
):
    """Approximately minimize ||J s + r||^2 + beta ||s / T||^2 over feasible steps.

    ``T`` holds the physical bounds per channel: emission and attenuation
    differ by six orders of magnitude, so damping the raw Euclidean step
    norm could never restrain both blocks at once. Iterations are projected
    gradients preconditioned by the per-pixel Jacobian diagonal, with
    alternating Barzilai-Borwein step lengths and a non-monotone Armijo
    line search, stopping on the relative projected-gradient norm. The
    returned step never increases the model: the best visited iterate is
    kept and the zero step is a candidate.
    """
    if beta < 0:
        raise InvalidInputError("beta must be nonnegative")
    T = step_scale(constraints)
    # per-pixel diagonal preconditioner from the Jacobian columns and damping
    diag = lin.diag_squared() + beta / T**2
    floor = 1e-12 * max(float(diag.max()), 1e-300)
    pre = 1.0 / np.sqrt(np.maximum(diag, floor))
    w_metric = (1.0 / pre[0] ** 2, 1.0 / pre[1] ** 2)
    inv_t2 = 1.0 / T**2

    def proj(sig):
        v = constraints.project_stack(u + pre * sig, weights=w_metric)
        sig_f = (v - u) / pre
        if radius is not None:
            # keep the step inside the trust ball; shrinking toward the
            # feasible current iterate preserves feasibility
            norm = float(np.linalg.norm((pre * sig_f) / T))
            if norm > radius:
                sig_f = sig_f * (radius / norm)
        return sig_f

    def q_of(A_cur, sig):
        ts = (pre * sig) / T
        return A_cur.norm2() + beta * float(np.sum(ts * ts))

    def gradient(A_cur, sig):
        g = lin.vjp(A_cur)
        g += beta * (inv_t2 * (pre * sig))
        return 2.0 * pre * g

    def fresh_A(sig):
        A_new = lin.jvp(pre * sig)
        A_new.axpy(1.0, resid)
        return A_new

    sigma = np.zeros_like(u)
    A = resid.copy()  # J s + r, kept in sync with sigma
    q_val = A.norm2()  # damping term is zero at sigma = 0
    history = [q_val]
    best = (q_val, sigma.copy())

    g = gradient(A, sigma)
    pg0 = float(np.linalg.norm(proj(sigma - g) - sigma))
    if pg0 == 0.0:
        return np.zeros_like(u), {"iterations": 0, "pg_norm": 0.0, "converged": True}

    # curvature along the first direction fixes the initial step length
    jg = lin.jvp(pre * g)
    curv = 2.0 * (jg.norm2() + beta * float(np.sum(inv_t2 * (pre * g) ** 2)))
    alpha = float(np.sum(g * g)) / curv if curv > 0 else 1.0
    alpha_lo, alpha_hi = 1e-12 * alpha, 1e12 * alpha

    iterations = 0
    converged = False
    bb_parity = 0
    alpha_init = alpha
    stuck = 0

    def pg_step():
        """One projected-gradient iteration with BB length and non-monotone search."""
        nonlocal sigma, A, q_val, g, alpha, bb_parity, best, converged, stuck
        z = proj(sigma - alpha * g)
        d = z - sigma
        if not np.any(d):
            # a collapsed BB length can freeze the iteration; retry once at
            # the curvature-based step before declaring stationarity
            if stuck == 0 and alpha != alpha_init:
                alpha = alpha_init
                stuck = 1
                return
            converged = True
            return
        stuck = 0
        jd = lin.jvp(pre * d)
        ab = A.inner(jd)
        bb = jd.norm2()
        ts = (pre * sigma) / T
        td = (pre * d) / T
        cd = float(np.sum(ts * td))
        dd = float(np.sum(td * td))
        gdot = float(np.sum(g * d))

        def q_at(t):
            return q_val + 2 * t * ab + t * t * bb + beta * (2 * t * cd + t * t * dd)

        f_ref = max(history[-cfg.armijo_memory:])
        t = 1.0
        for _ in range(cfg.max_backtracks):
            if q_at(t) <= f_ref + cfg.armijo_c * t * gdot:
                break
            t *= 0.5
        sigma = sigma + t * d
        A.axpy(t, jd)
        q_val = q_at(t)
        history.append(q_val)
        if q_val < best[0]:
            best = (q_val, sigma.copy())
        g_new = gradient(A, sigma)
        pg = float(np.linalg.norm(proj(sigma - g_new) - sigma))
        if pg <= cfg.tol * pg0:
            converged = True
        # alternating Barzilai-Borwein step lengths
        ds = t * d
        dg = g_new - g
        sy = float(np.sum(ds * dg))
        if sy <= 0:
            alpha = alpha_hi
        elif bb_parity == 0:
            alpha = float(np.sum(ds * ds)) / sy
        else:
            alpha = sy / float(np.sum(dg * dg))
        bb_parity ^= 1
        alpha = min(max(alpha, alpha_lo), alpha_hi)
        g = g_new

    def free_mask():
        """Coordinates not pinned by an active constraint at the current point."""
        v = u + pre * sigma
        lam, mu = v[0], v[1]
        tol_l = 1e-10 * max(constraints.lambda_max, 1.0)
        tol_m = 1e-10 * max(constraints.mu_max, 1.0)
        free = np.empty_like(u, dtype=bool)
        free[0] = (lam > tol_l) & (lam < constraints.lambda_max - tol_l)
        free[1] = (mu > tol_m) & (mu < constraints.mu_max - tol_m)
        if constraints.wedge_enabled:
            a, b = constraints._wedge_params()
            on_wedge = lam >= a + b * mu - tol_l
            free[0] &= ~on_wedge
            free[1] &= ~on_wedge
        free[:, ~constraints.mask] = False
        return free

    def cg_phase(budget):
        """Conjugate gradients on the face settled by the projected iterations.

        Free coordinates are minimized without constraints and the result is
        projected back; the projected point is kept only if it improves q.
        """
        nonlocal sigma, A, q_val, g, best
        used = 0
        free = free_mask()
        if not free.any():
            return used
        r_cg = np.where(free, -g, 0.0)
        rr = float(np.sum(r_cg * r_cg))
        if rr == 0.0:
            return used
        rr0 = rr
        p = r_cg.copy()
        w = np.zeros_like(u)
        A_cg = A.copy()
        for _ in range(budget):
            jp = lin.jvp(pre * p)
            hp = 2.0 * pre * (lin.vjp(jp) + beta * (inv_t2 * (pre * p)))
            hp = np.where(free, hp, 0.0)
            php = float(np.sum(p * hp))
            used += 1
            if php <= 0:
                break
            t_cg = rr / php
            w += t_cg * p
            A_cg.axpy(t_cg, jp)
            r_new = r_cg - t_cg * hp
            rr_new = float(np.sum(r_new * r_new))
            if rr_new <= 1e-8 * rr0:
                rr = rr_new
                break
            p = r_new + (rr_new / rr) * p
            r_cg = r_new
            rr = rr_new
        if not np.any(w):
            return used
        # project the subspace minimizer back; keep it only if q improves
        for t in (1.0, 0.5, 0.25):
            cand = proj(sigma + t * w)
            A_new = fresh_A(cand)
            q_new = q_of(A_new, cand)
            used += 1
            if q_new < q_val:
                sigma, A, q_val = cand, A_new, q_new
                history.append(q_val)
                if q_val < best[0]:
                    best = (q_val, sigma.copy())
                g = gradient(A, sigma)
                break
        return used

    while iterations < cfg.max_inner and not converged:
        for _ in range(min(cfg.pg_per_cycle, cfg.max_inner - iterations)):
            pg_step()
            iterations += 1
            if converged:
                break
        if converged or iterations >= cfg.max_inner:
            break
        iterations += cg_phase(min(cfg.cg_per_cycle, cfg.max_inner - iterations))

    s = pre * best[1]
    info = {"iterations": iterations, "pg_norm": pg0, "converged": converged}
    return s, info


# ---------------------------------------------------------------------------
# Trust-region outer loop
# ---------------------------------------------------------------------------

@dataclass
class TrustRegionState:
    u: np.ndarray  # stacked iterate [2, n, n]
    beta: float
    delta: float
    eta: float = 0.1
    kappa: float = 0.1
    alphas: tuple[float, float] = (0.0, 0.0)
    k: int = 0

    def __post_init__(self):
        if not (0 < self.eta < 0.25):
            raise InvalidInputError("eta must lie in (0, 1/4)")
        if self.kappa <= 0:
            raise InvalidInputError("kappa must be positive")
        if self.delta <= 0:
            raise InvalidInputError("trust radius must be positive")
        if self.beta < 0:
            raise InvalidInputError("beta must be nonnegative")


@dataclass
class StepProposal:
    step: np.ndarray
    model_decrease: float
    rho: float
    accepted: bool
    stalled: bool = False
    retries: int = 0
    f: float = math.nan
    f_next: float = math.nan
    m0: float = math.nan
    m_s: float = math.nan
    inner_iterations: int = 0


@dataclass(frozen=True)
class SolverConfig:
    eta: float = 0.1
    accept_threshold: float = 0.1  # kappa; one value serves both names
    beta_up: float = 10.0
    beta_down: float = 0.2
    delta_up: float = 2.0
    delta_down: float = 0.25
    rho_good: float = 0.75
    step_fraction: float = 0.8
    retry_max: int = 8
    max_consecutive_stalls: int = 1
    sgp: SGPConfig = field(default_factory=SGPConfig)


def initial_state(problem: Problem, u0: np.ndarray, cfg: SolverConfig,
                  alphas) -> TrustRegionState:
    """State with the damping and radius heuristics evaluated at u0."""
    f0, _, _ = problem.objective(u0, alphas)
    mask = problem.constraints.mask
    n_mask = float(mask.sum())
    # a bounds-sized step has squared scaled norm ~ 2 n_mask; this beta makes
    # the damping comparable to f0 for such a step and relaxes from there
    beta0 = f0 / n_mask if n_mask > 0 else 1.0
    delta0 = 0.1 * math.sqrt(2.0 * n_mask)
    return TrustRegionState(
        u=u0.copy(), beta=beta0, delta=delta0, eta=cfg.eta,
        kappa=cfg.accept_threshold, alphas=alphas, k=0,
    )


def lm_step(state: TrustRegionState, problem: Problem, cfg: SolverConfig, _pre=None):
    """One damped trust-region step with rejection retries.

    Returns the proposal and the updated state. A rejected attempt raises
    the damping tenfold and shrinks the radius; an exhausted retry budget
    returns a zero step flagged as stalled.
    """
    u = state.u
    alphas = state.alphas
    if _pre is None:
        f0, resid, lin_fwd = problem.objective(u, alphas)
        lin = problem.linearize(lin_fwd, alphas)
    else:
        f0, resid, lin = _pre
    beta, delta = state.beta, state.delta
    inner_total = 0

    for attempt in range(cfg.retry_max + 1):
        s, info = sgp_solve(u, resid, lin, beta, problem.constraints, cfg.sgp,
                            radius=delta)
        inner_total += info["iterations"]
        if not np.any(s):
            # stationary subproblem: nothing to gain at any damping
            prop = StepProposal(
                step=np.zeros_like(u), model_decrease=0.0, rho=0.0, accepted=False,
                stalled=True, retries=attempt, f=f0, f_next=f0, m0=f0, m_s=f0,
                inner_iterations=inner_total,
            )
            return prop, replace_state(state, beta=beta, delta=delta)
        m_s = model_value(s, resid, lin)
        m_dec = f0 - m_s
        if m_dec <= 0.0:
            beta *= cfg.beta_up
            delta *= cfg.delta_down
            continue
        # snap the iterate back through the projection: u + s can sit one
        # rounding ulp outside an active face
        u_next = problem.constraints.project_stack(u + s)
        f_next, _, _ = problem.objective(u_next, alphas)
        ratio = (f0 - f_next) / m_dec
        if ratio <= state.eta:
            beta *= cfg.beta_up
            delta *= cfg.delta_down
            continue
        step_norm = scaled_step_norm(s, problem.constraints)
        if ratio > cfg.rho_good:
            # relax the damping on every well-agreeing step: an over-damped
            # subproblem produces short steps, so gating the relaxation on the
            # step reaching the radius would lock the damping in place
            beta *= cfg.beta_down
            if step_norm >= cfg.step_fraction * delta:
                delta *= cfg.delta_up
        prop = StepProposal(
            step=s, model_decrease=m_dec, rho=ratio, accepted=True,
            retries=attempt, f=f0, f_next=f_next, m0=f0, m_s=m_s,
            inner_iterations=inner_total,
        )
        new_state = replace_state(state, u=u_next, beta=beta, delta=delta)
        return prop, new_state

    prop = StepProposal(
        step=np.zeros_like(u), model_decrease=0.0, rho=0.0, accepted=False,
        stalled=True, retries=cfg.retry_max + 1, f=f0, f_next=f0, m0=f0, m_s=f0,
        inner_iterations=inner_total,
    )
    return prop, replace_state(state, beta=beta, delta=delta)


def replace_state(state: TrustRegionState, **kw) -> TrustRegionState:
    fields = dict(
        u=state.u, beta=state.beta, delta=state.delta, eta=state.eta,
        kappa=state.kappa, alphas=state.alphas, k=state.k,
    )
    fields.update(kw)
    return TrustRegionState(**fields)


@dataclass
class IterationRecord:
    k: int
    f: float
    rho: float
    beta: float
    delta: float
    alpha1: float
    alpha2: float
    rel_err_lambda: float
    rel_err_mu: float
    branch: str
    f_next: float = math.nan
    m0: float = math.nan
    m_s: float = math.nan
    model_decrease: float = 0.0
    accepted: bool = True
    stalled: bool = False


@dataclass
class Trajectory:
    iterates: list
    records: list
    stalled: bool = False

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]


def _rel_errors(u: np.ndarray, truth, mask):
    if truth is None:
        return (math.nan, math.nan)
    from .io_cli.metrics import compute_metrics

    m = compute_metrics(u, truth, mask)
    return (m.rel_err_lambda, m.rel_err_mu)


def lm_solve(
    u0: ImagePair,
    problem: Problem,
    iterations: int,
    cfg: SolverConfig = SolverConfig(),
    truth: ImagePair | None = None,
) -> Trajectory:
    """Plain trust-region reconstruction for a fixed iteration budget.

    Regularization decays by the configured factor each iteration until it
    freezes. A stalled step ends the run early with the stall flagged.
    """
    from .safeguard import run_iterations  # shared loop, no accelerators

    return run_iterations(u0, problem, iterations, cfg, networks=None, truth=truth)


def lattice_site_mask(grid: GridSpec, spec: AssemblySpec) -> np.ndarray:
    """Pixels whose centers fall on a nominal (unjittered) rod site."""
    coords = grid.centers()
    gx, gy = np.meshgrid(coords, coords, indexing="xy")
    sites = np.zeros((grid.n_px, grid.n_px), dtype=bool)
    r2 = spec.rod_radius**2
    for cx, cy in spec.lattice_centers():
        sites |= (gx - cx) ** 2 + (gy - cy) ** 2 <= r2
    return sites


def initial_guess(grid: GridSpec, spec: AssemblySpec, constraints: Constraints,
                  kind: str = "half") -> ImagePair:
    """Feasible starting pair, recorded in every job header.

    kind "half" is the constant mid-range pair; "site" keeps the half
    emission but places nominal rod attenuation on the lattice sites with
    water elsewhere, which avoids descending into the dim and transparent
    compensation valley; "bright-site" additionally starts the emission at
    its bound so optically unobservable deep pixels begin at plausible
    fuel brightness.
    """
    mask = constraints.mask
    lam_half = np.where(mask, 0.5 * constraints.lambda_max, 0.0)
    if kind == "half":
        stack = np.stack([lam_half, np.where(mask, 0.5 * constraints.mu_max, 0.0)])
    elif kind in ("site", "bright-site"):
        sites = lattice_site_mask(grid, spec) & mask
        mu_mid = 0.5 * (spec.attenuation_range[0] + spec.attenuation_range[1])
        mu = np.where(mask, spec.water_attenuation, 0.0)
        mu[sites] = mu_mid
        lam = lam_half if kind == "site" else np.where(mask, constraints.lambda_max, 0.0)
        stack = np.stack([lam, mu])
    else:
        raise InvalidInputError(f"unknown initial guess kind {kind!r}")
    proj = constraints.project_stack(stack)
    return ImagePair(proj[0], proj[1], (constraints.lambda_max, constraints.mu_max))
