"""Finite-horizon optimal-control transcription and NLP solver.

The solver is a self-contained augmented Lagrangian (equalities and
``g <= 0`` inequalities via the standard shifted-penalty form) with a
projected L-BFGS inner loop over box bounds. Gradients come from forward
finite differences of the merit function with step ``1e-6 * (1 + |x_j|)``;
problems may override the per-coordinate evaluation hook to exploit
structure (the rollout transcription restarts integration at the first
affected control block instead of re-simulating the whole horizon).

Transcription is single shooting: decision variables are the per-block
control vectors plus one comfort slack per block; states come from rolling
the plant forward, so the dynamics are feasible by construction and state
path limits become penalized inequality residuals.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import plant
from .errors import ProfileTooShort, ShapeError

_EMPTY = np.zeros(0)

# ---------------------------------------------------------------------------
# problem protocol
# ---------------------------------------------------------------------------


class NlpProblem:
    """Box-bounded NLP with equality and inequality residual callbacks.

    ``evaluate`` returns ``(objective, eq_residuals, ineq_residuals)`` with
    the convention eq == 0 and ineq <= 0 at feasible points. Subclasses may
    override ``begin_fd`` / ``eval_perturbed`` to make coordinate-wise
    finite differences cheaper; the default re-evaluates from scratch.
    """

    n: int
    lower: np.ndarray
    upper: np.ndarray

    def __init__(self, n: int, lower, upper):
        self.n = n
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ShapeError("bounds must match the decision dimension")
        if np.any(self.lower > self.upper):
            raise ShapeError("lower bound exceeds upper bound")
        self._fd_base: np.ndarray | None = None

    def evaluate(self, x: np.ndarray):
        raise NotImplementedError

    def begin_fd(self, x: np.ndarray) -> None:
        self._fd_base = x.copy()

    def eval_perturbed(self, j: int, xj: float):
        xp = self._fd_base.copy()
        xp[j] = xj
        return self.evaluate(xp)

    def end_fd(self) -> None:
        self._fd_base = None


class FunctionProblem(NlpProblem):
    """Wrap plain callables (used for toy problems and tests)."""

    def __init__(self, n, lower, upper, objective, eq=None, ineq=None):
        super().__init__(n, lower, upper)
        self._objective = objective
        self._eq = eq
        self._ineq = ineq

    def evaluate(self, x):
        f = float(self._objective(x))
        eq = np.atleast_1d(np.asarray(self._eq(x), dtype=float)) if self._eq \
            else np.zeros(0)
        ineq = np.atleast_1d(np.asarray(self._ineq(x), dtype=float)) if self._ineq \
            else np.zeros(0)
        return f, eq, ineq


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-6
    max_outer: int = 10
    max_inner: int = 60
    penalty_init: float = 100.0
    penalty_growth: float = 10.0
    viol_shrink: float = 0.25    # required violation decrease per outer round
    memory: int = 10
    fd_step: float = 1e-6
    armijo_c: float = 1e-4
    step_shrink: float = 0.5
    max_ls: int = 25
    record_trace: bool = False


@dataclass
class NlpSolution:
    x: np.ndarray
    objective: float
    max_violation: float
    iterations: int
    status: str                      # Converged | MaxIter | Infeasible
    wall_time_s: float
    outer_violations: list[float] = field(default_factory=list)
    trace: list[tuple] = field(default_factory=list)  # iter, f, viol, step


class _BoxScaled(NlpProblem):
    """Work in unit-box coordinates so L-BFGS sees comparably scaled
    variables (raw decision coordinates span several orders of magnitude)."""

    # boxes wider than this are treated as unbounded for scaling purposes
    MAX_SCALED_SPAN = 1e6

    def __init__(self, inner: NlpProblem):
        span = inner.upper - inner.lower
        scalable = np.isfinite(span) & (span > 0) & (span <= self.MAX_SCALED_SPAN)
        self.width = np.where(scalable, span, 1.0)
        self.offset = np.where(scalable, inner.lower, 0.0)
        lower = (inner.lower - self.offset) / self.width
        upper = (inner.upper - self.offset) / self.width
        super().__init__(inner.n, lower, upper)
        self.inner = inner

    def to_raw(self, z):
        return self.offset + z * self.width

    def to_scaled(self, x):
        return (x - self.offset) / self.width

    def evaluate(self, z):
        return self.inner.evaluate(self.to_raw(np.asarray(z, dtype=float)))

    def begin_fd(self, z):
        self._fd_base = np.asarray(z, dtype=float).copy()
        self.inner.begin_fd(self.to_raw(self._fd_base))

    def eval_perturbed(self, j, zj):
        return self.inner.eval_perturbed(j, self.offset[j] + zj * self.width[j])

    def end_fd(self):
        self._fd_base = None
        self.inner.end_fd()


def _merit_terms(f, eq, ineq, lam, nu, mu):
    phi = f
    if eq.size:
        phi += float(lam @ eq) + 0.5 * mu * float(eq @ eq)
    if ineq.size:
        shifted = np.maximum(0.0, nu + mu * ineq)
        phi += float(shifted @ shifted - nu @ nu) / (2.0 * mu)
    return phi


def _max_violation(eq, ineq):
    v = 0.0
    if eq.size:
        v = float(np.max(np.abs(eq)))
    if ineq.size:
        v = max(v, float(np.max(ineq)), 0.0)
    return v


def solve(problem: NlpProblem, initial_guess, opts: SolverOptions = SolverOptions(),
          ) -> NlpSolution:
    """Augmented-Lagrangian outer loop, projected L-BFGS inner loop.

    Never raises on non-convergence; reports status. Guesses outside the box
    are projected. Deterministic: same problem and guess give bit-identical
    solutions. The returned iterate is never worse than the initial guess in
    the reporting merit (objective plus 1e6 times the max violation).
    """
    t_start = time.perf_counter()
    raw = problem
    problem = _BoxScaled(problem)
    lo, hi = problem.lower, problem.upper
    guess = np.asarray(initial_guess, dtype=float)
    if guess.shape != (problem.n,):
        raise ShapeError(f"guess has shape {guess.shape}, expected ({problem.n},)")
    x = np.clip(problem.to_scaled(np.clip(guess, raw.lower, raw.upper)), lo, hi)

    f0, eq0, ineq0 = problem.evaluate(x)
    lam = np.zeros(eq0.size)
    nu = np.zeros(ineq0.size)
    mu = opts.penalty_init

    def report_merit(f, viol):
        # violations below tolerance are converged noise, not infeasibility
        return f + 1e6 * max(0.0, viol - opts.tol)

    best_x = x.copy()
    best_f = f0
    best_viol = _max_violation(eq0, ineq0)
    best_merit = report_merit(best_f, best_viol)

    total_inner = 0
    trace: list[tuple] = []
    outer_viols: list[float] = []
    status = "MaxIter"
    prev_viol = math.inf
    constrained = bool(eq0.size or ineq0.size)

    central = False
    for _outer in range(opts.max_outer):
        x, inner_iters, proj_grad = _inner_minimize(
            problem, x, lam, nu, mu, opts, trace, central)
        total_inner += inner_iters

        f, eq, ineq = problem.evaluate(x)
        viol = _max_violation(eq, ineq)
        outer_viols.append(viol)
        if report_merit(f, viol) < best_merit:
            best_x, best_f, best_viol = x.copy(), f, viol
            best_merit = report_merit(f, viol)

        if viol < opts.tol and proj_grad < opts.tol * max(1.0, abs(f)):
            if central:
                status = "Converged"
                break
            # forward differences carry an O(h) bias that can stall exactly
            # h/2 away from the optimum; confirm with central gradients
            central = True
            continue

        # endgame: forward differences carry an O(h * penalty) bias, so once
        # the violation is near tolerance sharpen the gradients
        if not central and viol < 100.0 * opts.tol:
            central = True

        if eq.size:
            lam = lam + mu * eq
        if ineq.size:
            nu = np.maximum(0.0, nu + mu * ineq)
        if viol > opts.viol_shrink * prev_viol:
            mu *= opts.penalty_growth
        prev_viol = viol
    else:
        f, eq, ineq = problem.evaluate(x)
        viol = _max_violation(eq, ineq)
        if viol > 1e-2 and viol >= best_viol:
            status = "Infeasible"

    return NlpSolution(problem.to_raw(best_x), best_f, best_viol, total_inner,
                       status, time.perf_counter() - t_start, outer_viols, trace)


def _reduced_gradient_norm(x, grad, lo, hi):
    """Sup-norm of the bound-reduced gradient (does not saturate with the box
    width the way a projected-step norm does)."""
    worst = 0.0
    for j in range(x.size):
        g = grad[j]
        if x[j] <= lo[j] + 1e-12:
            g = min(g, 0.0)
        elif x[j] >= hi[j] - 1e-12:
            g = max(g, 0.0)
        if abs(g) > worst:
            worst = abs(g)
    return worst


def _inner_minimize(problem, x0, lam, nu, mu, opts, trace, central=False):
    """Projected L-BFGS on the augmented Lagrangian at fixed multipliers."""
    lo, hi = problem.lower, problem.upper
    x = x0.copy()
    f, eq, ineq = problem.evaluate(x)
    phi = _merit_terms(f, eq, ineq, lam, nu, mu)

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    grad = _fd_merit_gradient(problem, x, phi, lam, nu, mu, opts, central)
    proj_grad = _reduced_gradient_norm(x, grad, lo, hi)

    iters = 0
    for _ in range(opts.max_inner):
        proj_grad = _reduced_gradient_norm(x, grad, lo, hi)
        if proj_grad < opts.tol * max(1.0, abs(phi)):
            break
        direction = _lbfgs_direction(grad, s_hist, y_hist)
        if float(direction @ grad) > -1e-14 * float(np.linalg.norm(direction)
                                                    * np.linalg.norm(grad) + 1e-300):
            s_hist.clear()
            y_hist.clear()
            direction = -grad
        if not s_hist:
            # no curvature information: cap the first trial at one box width
            scale = float(np.max(np.abs(direction)))
            if scale > 1.0:
                direction = direction / scale

        step = 1.0
        accepted = False
        phi_new = phi
        x_new = x
        for _ls in range(opts.max_ls):
            cand = np.clip(x + step * direction, lo, hi)
            delta = cand - x
            if not np.any(delta):
                break
            f_c, eq_c, ineq_c = problem.evaluate(cand)
            phi_c = _merit_terms(f_c, eq_c, ineq_c, lam, nu, mu)
            if phi_c <= phi + opts.armijo_c * float(grad @ delta):
                x_new, phi_new = cand, phi_c
                accepted = True
                break
            step *= opts.step_shrink
        if not accepted:
            break

        grad_new = _fd_merit_gradient(problem, x_new, phi_new, lam, nu, mu,
                                      opts, central)
        s = x_new - x
        y = grad_new - grad
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y) + 1e-300):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > opts.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        x, phi, grad = x_new, phi_new, grad_new
        iters += 1
        if opts.record_trace:
            trace.append((len(trace), phi, float(np.linalg.norm(s)),
                          float(np.linalg.norm(grad))))
    return x, iters, proj_grad


def _fd_merit_gradient(problem, x, phi_base, lam, nu, mu, opts, central=False):
    """Finite differences of the merit; the per-coordinate hook lets
    structured problems restart from cached partial evaluations.

    Forward scheme by default (one evaluation per coordinate; backward at an
    upper bound so the probe stays in the box); the central scheme costs two
    evaluations but removes the O(h * penalty) bias.
    """
    grad = np.empty(problem.n)
    problem.begin_fd(x)
    lo, hi = problem.lower, problem.upper
    for j in range(problem.n):
        if hi[j] - lo[j] <= 0.0:
            grad[j] = 0.0  # pinned coordinate
            continue
        h = opts.fd_step * (1.0 + abs(x[j]))
        if central:
            f, eq, ineq = problem.eval_perturbed(j, x[j] + h)
            up = _merit_terms(f, eq, ineq, lam, nu, mu)
            f, eq, ineq = problem.eval_perturbed(j, x[j] - h)
            down = _merit_terms(f, eq, ineq, lam, nu, mu)
            grad[j] = (up - down) / (2.0 * h)
        else:
            if x[j] + h > problem.upper[j]:
                h = -h
            f, eq, ineq = problem.eval_perturbed(j, x[j] + h)
            grad[j] = (_merit_terms(f, eq, ineq, lam, nu, mu) - phi_base) / h
    problem.end_fd()
    return grad


def _lbfgs_direction(grad, s_hist, y_hist):
    q = -grad.copy()
    if not s_hist:
        return q
    alphas = []
    rhos = [1.0 / float(y @ s) for s, y in zip(s_hist, y_hist)]
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rhos)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    s_last, y_last = s_hist[-1], y_hist[-1]
    q *= float(s_last @ y_last) / float(y_last @ y_last)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rhos), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


# ---------------------------------------------------------------------------
# KKT residuals
# ---------------------------------------------------------------------------


def kkt_residuals(problem: NlpProblem, x, multipliers=None,
                  fd_step: float = 1e-6):
    """(stationarity, primal_violation, complementarity) at a point.

    Gradients/Jacobians via forward differences. Without supplied
    multipliers, a clipped least-squares estimate over near-active
    inequality constraints is used.
    """
    x = np.clip(np.asarray(x, dtype=float), problem.lower, problem.upper)
    f0, eq0, ineq0 = problem.evaluate(x)
    n = problem.n
    grad_f = np.empty(n)
    j_eq = np.empty((eq0.size, n))
    j_in = np.empty((ineq0.size, n))
    for j in range(n):
        h = fd_step * (1.0 + abs(x[j]))
        xp = x.copy()
        xp[j] += h
        f, eq, ineq = problem.evaluate(xp)
        grad_f[j] = (f - f0) / h
        if eq0.size:
            j_eq[:, j] = (eq - eq0) / h
        if ineq0.size:
            j_in[:, j] = (ineq - ineq0) / h

    bound_viol = max(float(np.max(problem.lower - x, initial=0.0)),
                     float(np.max(x - problem.upper, initial=0.0)))
    primal = max(_max_violation(eq0, ineq0), bound_viol)

    active = ineq0 > -1e-6 * (1.0 + np.abs(ineq0)) if ineq0.size else \
        np.zeros(0, dtype=bool)
    if multipliers is not None:
        lam, nu = multipliers
        lam = np.asarray(lam, dtype=float)
        nu = np.asarray(nu, dtype=float)
    else:
        cols = []
        if eq0.size:
            cols.append(j_eq.T)
        if np.any(active):
            cols.append(j_in[active].T)
        lam = np.zeros(eq0.size)
        nu = np.zeros(ineq0.size)
        if cols:
            jac = np.hstack(cols)
            sol, *_ = np.linalg.lstsq(jac, -grad_f, rcond=None)
            if eq0.size:
                lam = sol[:eq0.size]
            if np.any(active):
                nu[active] = np.maximum(0.0, sol[eq0.size:])

    grad_l = grad_f.copy()
    if eq0.size:
        grad_l += j_eq.T @ lam
    if ineq0.size:
        grad_l += j_in.T @ nu

    stat = 0.0
    for j in range(n):
        at_lower = x[j] <= problem.lower[j] + 1e-12
        at_upper = x[j] >= problem.upper[j] - 1e-12
        if at_lower and not at_upper:
            stat = max(stat, max(0.0, -grad_l[j]))
        elif at_upper and not at_lower:
            stat = max(stat, max(0.0, grad_l[j]))
        elif not (at_lower and at_upper):
            stat = max(stat, abs(grad_l[j]))

    comp = float(np.max(np.abs(nu * ineq0))) if ineq0.size else 0.0
    return stat, primal, comp


# ---------------------------------------------------------------------------
# optimal-control transcription
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OcpSpec:
    """What to optimize over a speed profile.

    ``mode`` is ``"plan"`` (fuel plus comfort-slack objective, optional
    charge-sustaining terminal equality) or ``"track"`` (fuel plus weighted
    SOC/cabin reference tracking). Controls are held constant over
    ``macro_step`` consecutive steps; one comfort slack per block.
    """
    horizon: int
    x0: plant.PlantState
    mode: str = "plan"
    macro_step: int = 1
    dt_s: float = 1.0
    soc_min: float = 0.4
    soc_max: float = 0.8
    tb_min: float = -20.0
    tb_max: float = 38.0
    comfort_target_c: float = 23.0
    alpha_comfort: float = 0.01
    slack_max_c: float = 15.0
    charge_sustaining: bool = False
    w_soc: float = 5e3
    w_c: float = 1e-2
    refs_soc: np.ndarray | None = None
    refs_tc: np.ndarray | None = None
    # optional per-block control boxes (M, 4) overriding the model-wide ones,
    # e.g. to pin an engine on/off pattern
    block_lower: np.ndarray | None = None
    block_upper: np.ndarray | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ShapeError("horizon must be >= 1")
        if self.mode not in ("plan", "track"):
            raise ShapeError(f"unknown mode {self.mode!r}")
        if self.macro_step < 1:
            raise ShapeError("macro_step must be >= 1")
        if self.mode == "track":
            for name, arr in (("refs_soc", self.refs_soc),
                              ("refs_tc", self.refs_tc)):
                if arr is None or len(arr) < self.horizon:
                    raise ShapeError(f"track mode needs {name} of length "
                                     f">= {self.horizon}")


class RolloutProblem(NlpProblem):
    """Single-shooting rollout of the plant as an NLP.

    Decision layout: ``[u_0 (4), ..., u_{M-1} (4), slack_0, ..., slack_{M-1}]``
    with M = ceil(horizon / macro_step). Inequalities per step: SOC range,
    battery temperature range, the comfort band around the target (softened
    by the block slack), and the summed hardware violation from the rollout.
    """

    def __init__(self, spec: OcpSpec, samples: list[plant.DriveSample],
                 env: plant.EnvConditions, models: plant.PlantModels):
        if len(samples) < spec.horizon:
            raise ProfileTooShort(f"profile has {len(samples)} samples, "
                                  f"horizon needs {spec.horizon}")
        self.spec = spec
        self.samples = samples[:spec.horizon]
        self.env = env
        self.models = models
        self.n_blocks = (spec.horizon + spec.macro_step - 1) // spec.macro_step
        self.block_start = [b * spec.macro_step for b in range(self.n_blocks)]
        self.block_of = [t // spec.macro_step for t in range(spec.horizon)]
        self.consts = plant.step_consts(models, env)
        self._v = [s.speed_m_s for s in self.samples]
        self._a = [s.accel_m_s2 for s in self.samples]
        if spec.mode == "track":
            self._refs_soc = [float(r) for r in spec.refs_soc[:spec.horizon]]
            self._refs_tc = [float(r) for r in spec.refs_tc[:spec.horizon]]

        eng = models.engine
        cab = models.cabin
        u_lo = [0.0, 0.0, 0.0, cab.hvac_min_w]
        u_hi = [eng.max_speed_rad_s, eng.max_torque_nm, 1.0, cab.hvac_max_w]
        block_lo = np.tile(u_lo, (self.n_blocks, 1))
        block_hi = np.tile(u_hi, (self.n_blocks, 1))
        if spec.block_lower is not None:
            block_lo = np.maximum(block_lo, np.asarray(spec.block_lower, float))
        if spec.block_upper is not None:
            block_hi = np.minimum(block_hi, np.asarray(spec.block_upper, float))
        lower = np.concatenate([block_lo.ravel(), np.zeros(self.n_blocks)])
        upper = np.concatenate([block_hi.ravel(),
                                np.full(self.n_blocks, spec.slack_max_c)])
        super().__init__(5 * self.n_blocks, lower, upper)
        self._cache_x: np.ndarray | None = None
        self._cache: dict | None = None

    # -- rollout machinery -------------------------------------------------

    def block_of_step(self, t: int) -> int:
        return t // self.spec.macro_step

    def _controls(self, x: np.ndarray) -> np.ndarray:
        return x[:4 * self.n_blocks].reshape(self.n_blocks, 4)

    def _slacks(self, x: np.ndarray) -> np.ndarray:
        return x[4 * self.n_blocks:]

    def _roll(self, x: np.ndarray, start_block: int, state7, demand_prefix):
        """Integrate from ``start_block`` onward; returns per-step lists and
        block-boundary states for the covered suffix."""
        spec = self.spec
        n = spec.horizon
        t0 = self.block_start[start_block]
        m = n - t0
        fuel = [0.0] * m
        soc = [0.0] * m
        tb = [0.0] * m
        tc = [0.0] * m
        viol = [0.0] * m
        block_states = [None] * (self.n_blocks + 1)
        demands = demand_prefix
        theta = self.env.road_grade_rad
        models = self.models
        consts = self.consts
        dt = spec.dt_s
        controls = None
        block_of = self.block_of
        block_start = self.block_start
        vs, accs = self._v, self._a
        demand_core = plant.demand_core
        advance = plant.advance
        for t in range(t0, n):
            b = block_of[t]
            if t == block_start[b]:
                block_states[b] = state7
            d = demands[t]
            if d is None:
                if controls is None:
                    controls = self._controls(x)
                u = controls[b]
                d, _ = demand_core(u[0], u[1], u[2], u[3], vs[t], accs[t],
                                   theta, models)
                demands[t] = d
            state7, fuel_t, bat_viol, _, _ = advance(state7, d, consts, dt, 1)
            k = t - t0
            fuel[k] = fuel_t
            s = state7[0]
            soc[k] = s
            tb[k] = state7[1]
            tc[k] = state7[2]
            soc_out = (-s if s < 0.0 else (s - 1.0 if s > 1.0 else 0.0))
            viol[k] = d[18] + bat_viol + soc_out
        block_states[self.n_blocks] = state7
        return fuel, soc, tb, tc, viol, block_states

    def _assemble(self, x, fuel, soc, tb, tc, viol):
        spec = self.spec
        n = spec.horizon
        nb4 = 4 * self.n_blocks
        dt = spec.dt_s
        tgt = spec.comfort_target_c

        if n >= 64:
            # vectorized path for trip-scale planning problems
            soc_a = np.asarray(soc)
            tb_a = np.asarray(tb)
            tc_a = np.asarray(tc)
            slack_steps = np.repeat(x[nb4:], spec.macro_step)[:n]
            slack_sum = float(slack_steps.sum())
            if spec.mode == "plan":
                objective = float(np.sum(fuel)) + spec.alpha_comfort * slack_sum * dt
            else:
                e_soc = soc_a - np.asarray(self._refs_soc)
                e_tc = tc_a - np.asarray(self._refs_tc)
                objective = (float(np.sum(fuel))
                             + spec.w_soc * float(e_soc @ e_soc)
                             + spec.w_c * float(e_tc @ e_tc)
                             + spec.alpha_comfort * slack_sum * dt)
            ineq = np.concatenate([
                spec.soc_min - soc_a, soc_a - spec.soc_max,
                spec.tb_min - tb_a, tb_a - spec.tb_max,
                (tgt - slack_steps) - tc_a, tc_a - (tgt + slack_steps),
                np.asarray(viol)])
        else:
            block_of = self.block_of
            slack_sum = 0.0
            ineq = np.empty(7 * n)
            smin, smax = spec.soc_min, spec.soc_max
            bmin, bmax = spec.tb_min, spec.tb_max
            for t in range(n):
                sl = x[nb4 + block_of[t]]
                slack_sum += sl
                s = soc[t]
                ineq[t] = smin - s
                ineq[n + t] = s - smax
                ineq[2 * n + t] = bmin - tb[t]
                ineq[3 * n + t] = tb[t] - bmax
                ineq[4 * n + t] = (tgt - sl) - tc[t]
                ineq[5 * n + t] = tc[t] - (tgt + sl)
                ineq[6 * n + t] = viol[t]
            if spec.mode == "plan":
                objective = sum(fuel) + spec.alpha_comfort * slack_sum * dt
            else:
                e2_soc = 0.0
                e2_tc = 0.0
                refs_soc, refs_tc = self._refs_soc, self._refs_tc
                for t in range(n):
                    es = soc[t] - refs_soc[t]
                    et = tc[t] - refs_tc[t]
                    e2_soc += es * es
                    e2_tc += et * et
                objective = (sum(fuel) + spec.w_soc * e2_soc
                             + spec.w_c * e2_tc
                             + spec.alpha_comfort * slack_sum * dt)

        if spec.mode == "plan" and spec.charge_sustaining:
            eq = np.array([soc[-1] - self.spec.x0.soc])
        else:
            eq = _EMPTY
        return objective, eq, ineq

    # -- NlpProblem interface ----------------------------------------------

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        demands = [None] * self.spec.horizon
        fuel, soc, tb, tc, viol, block_states = self._roll(
            x, 0, self.spec.x0.as_tuple(), demands)
        self._cache_x = x.copy()
        self._cache = dict(fuel=fuel, soc=soc, tb=tb, tc=tc, viol=viol,
                           block_states=block_states, demands=demands)
        return self._assemble(x, fuel, soc, tb, tc, viol)

    def begin_fd(self, x):
        if self._cache_x is None or not np.array_equal(self._cache_x, x):
            self.evaluate(x)
        self._fd_base = self._cache_x

    def eval_perturbed(self, j, xj):
        base = self._fd_base
        cache = self._cache
        xp = base.copy()
        xp[j] = xj
        if j >= 4 * self.n_blocks:
            # slack coordinate: states unchanged, only the assembly differs
            return self._assemble(xp, cache["fuel"], cache["soc"],
                                  cache["tb"], cache["tc"], cache["viol"])
        b = j // 4
        t0 = self.block_start[b]
        demands = list(cache["demands"])
        for t in range(t0, min(t0 + self.spec.macro_step, self.spec.horizon)):
            demands[t] = None
        fuel_s, soc_s, tb_s, tc_s, viol_s, _ = self._roll(
            xp, b, cache["block_states"][b], demands)
        if t0:
            fuel_s = cache["fuel"][:t0] + fuel_s
            soc_s = cache["soc"][:t0] + soc_s
            tb_s = cache["tb"][:t0] + tb_s
            tc_s = cache["tc"][:t0] + tc_s
            viol_s = cache["viol"][:t0] + viol_s
        return self._assemble(xp, fuel_s, soc_s, tb_s, tc_s, viol_s)

    def end_fd(self):
        self._fd_base = None

    # -- helpers ------------------------------------------------------------

    def trajectories(self, x):
        """State trajectories under a decision vector (soc, tb, tc arrays of
        length horizon+1 including the initial state)."""
        x = np.asarray(x, dtype=float)
        demands = [None] * self.spec.horizon
        fuel, soc, tb, tc, viol, _ = self._roll(
            x, 0, self.spec.x0.as_tuple(), demands)
        s0 = self.spec.x0
        return (np.array([s0.soc] + soc),
                np.array([s0.temp_battery_c] + tb),
                np.array([s0.temp_cabin_c] + tc),
                float(sum(fuel)), float(max(viol, default=0.0)))

    def pack_controls(self, controls, slacks=None) -> np.ndarray:
        controls = np.asarray(controls, dtype=float)
        if controls.shape != (self.n_blocks, 4):
            raise ShapeError(f"expected ({self.n_blocks}, 4) controls")
        if slacks is None:
            slacks = np.zeros(self.n_blocks)
        return np.concatenate([controls.ravel(), np.asarray(slacks, float)])

    def step_controls(self, x) -> list[plant.ControlInput]:
        controls = self._controls(np.asarray(x, dtype=float))
        return [plant.ControlInput(*controls[self.block_of_step(t)])
                for t in range(self.spec.horizon)]


def transcribe(spec: OcpSpec, samples: list[plant.DriveSample],
               env: plant.EnvConditions, models: plant.PlantModels,
               ) -> RolloutProblem:
    """Build the single-shooting NLP for a speed profile."""
    return RolloutProblem(spec, samples, env, models)
