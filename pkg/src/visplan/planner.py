"""Optimization-based longitudinal trajectory planner.

A motion is N timely-equidistant arc-length support points plus three
already-driven history points; velocity, acceleration and jerk come from
finite differences, so the whole objective is smooth in the support points.
Safety bounds enter as softplus-squared penalty terms and the first n_pin
points stay pinned across replans. The initial guess is always the pinned
prefix continued by full braking, so a failed optimization still leaves a
safe stop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .safety import ConstraintSet, SigmaMode, StopParams

N_HISTORY = 3
DEFAULT_N_POINTS = 40
GRAD_TOL = 1e-6
MAX_ITER = 200
FALLBACK_TOL = 1e-3


@dataclass(frozen=True)
class PlannerWeights:
    """Objective weights: comfort terms, follow term and penalty shape."""

    w_vel: float = 1.0
    w_acc: float = 2.0
    w_jerk: float = 4.0
    w_s: float = 0.5
    penalty_weight: float = 4000.0
    penalty_sharpness: float = 40.0

    def __post_init__(self):
        if self.w_vel < 0 or self.w_acc < 0 or self.w_jerk < 0 or self.w_s < 0:
            raise ValueError("weights must be non-negative")
        if self.w_vel == 0 and self.w_acc == 0 and self.w_jerk == 0:
            raise ValueError("at least one comfort weight must be positive")
        if self.penalty_weight <= 0 or self.penalty_sharpness <= 0:
            raise ValueError("penalty weight and sharpness must be positive")


@dataclass
class SupportTrajectory:
    """Planner decision vector plus its immutable context.

    history holds the three points at t0-3h, t0-2h, t0-h; points[0] sits at
    t0. The history and the first n_pin points never change during
    optimization.
    """

    t0: float
    h: float
    history: np.ndarray
    points: np.ndarray
    n_pin: int

    def __post_init__(self):
        self.history = np.asarray(self.history, dtype=float)
        self.points = np.asarray(self.points, dtype=float)
        if self.history.shape != (N_HISTORY,):
            raise ValueError("history must hold exactly 3 points")
        if len(self.points) < 4:
            raise ValueError("need at least 4 support points")
        if not 1 <= self.n_pin <= len(self.points):
            raise ValueError("n_pin outside [1, N]")

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.history, self.points])

    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.n)


def _difference_operators(n: int, h: float):
    """Finite-difference matrices mapping the full vector (history + points)
    to per-point velocity, acceleration and jerk.

    Forward stencils everywhere except the last point, which falls back to
    backward ones; the first two points reach into the history, keeping the
    motion C2-continuous across replans.
    """
    m = n + N_HISTORY
    dv = np.zeros((n, m))
    da = np.zeros((n, m))
    dj = np.zeros((n, m))
    for i in range(n):
        c = i + N_HISTORY
        if i < n - 1:
            dv[i, [c + 1, c]] = 1.0, -1.0
            da[i, [c + 1, c, c - 1]] = 1.0, -2.0, 1.0
            dj[i, [c + 1, c, c - 1, c - 2]] = 1.0, -3.0, 3.0, -1.0
        else:
            dv[i, [c, c - 1]] = 1.0, -1.0
            da[i, [c, c - 1, c - 2]] = 1.0, -2.0, 1.0
            dj[i, [c, c - 1, c - 2, c - 3]] = 1.0, -3.0, 3.0, -1.0
    return dv / h, da / h ** 2, dj / h ** 3


def kinematics(traj: SupportTrajectory):
    """Per-point (velocity, acceleration, jerk) of a support trajectory."""
    dv, da, dj = _difference_operators(traj.n, traj.h)
    x = traj.full
    return dv @ x, da @ x, dj @ x


@dataclass
class PlanContext:
    """Mode-dependent inputs of the objective.

    lead_path, when present, holds per-index lead reference positions already
    aligned so that gap_i = lead_path[i] - x_i is the bumper gap; it switches
    the follow cost term on.
    """

    v_des: float
    constraints: ConstraintSet
    stop: StopParams
    s_min: float = 2.0
    headway: float = 1.5
    lead_path: np.ndarray | None = None


def _sigma_scalar(v: float, stop: StopParams, extra_var: float) -> float:
    base = stop.sigma_x ** 2 + extra_var
    if stop.sigma_mode is SigmaMode.FIXED_FACTOR:
        return math.sqrt(base + 4.0 * stop.sigma_v ** 2)
    return math.sqrt(base + (stop.sigma_v / stop.a_dec) ** 2 * v ** 2)


def sustainable_speed(constraints: ConstraintSet | None, stop: StopParams,
                      x0: float, h: float, n_pin: int, v_des: float) -> float:
    """Largest cruise speed whose dead-time window still fits the bounds.

    At constant speed v the chance-constrained stop point of support point
    2*n_pin - 1 sits at x0 + v*(2*n_pin - 1)*h + v^2/(2*a_dec) + k*sigma;
    the tightest active bound caps it. Replanning refreshes the bounds from
    the new vantage every cycle, so exceeding this speed plans motion the
    current knowledge cannot certify. Returns v_des when no bound binds.
    """
    if constraints is None or not constraints.bounds:
        return v_des
    s_eff = min(b for _, b in constraints.bounds) - x0
    span = (2 * n_pin - 1) * h
    k = constraints.k

    def margin(v: float) -> float:
        return (v * span + v * v / (2.0 * stop.a_dec)
                + k * _sigma_scalar(v, stop, constraints.extra_var) - s_eff)

    if margin(0.0) >= 0.0:
        return 0.0
    if margin(v_des) <= 0.0:
        return v_des
    lo, hi = 0.0, v_des
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if margin(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return lo


class _Objective:
    """Value, analytic gradient and Hessian of comfort + follow + penalty terms.

    Every term is convex in the support points: the comfort and follow parts
    are quadratics, the penalties are squared softplus hinges of convex
    arguments, so Newton steps with a line search converge globally.
    """

    def __init__(self, traj: SupportTrajectory, weights: PlannerWeights, ctx: PlanContext):
        self.n = traj.n
        self.h = traj.h
        self.n_pin = traj.n_pin
        self.weights = weights
        self.ctx = ctx
        self.prefix = np.concatenate([traj.history, traj.points[:traj.n_pin]])
        self.dv, self.da, self.dj = _difference_operators(self.n, self.h)
        self.sel = np.zeros((self.n, self.n + N_HISTORY))
        self.sel[np.arange(self.n), np.arange(self.n) + N_HISTORY] = 1.0
        bounds = ctx.constraints.bounds if ctx.constraints is not None else ()
        bounds = [(i, b) for i, b in bounds if i < self.n]
        self.bound_idx = np.array([i for i, _ in bounds], dtype=int)
        self.bound_val = np.array([b for _, b in bounds], dtype=float)
        self.base_var = (ctx.stop.sigma_x ** 2
                         + (ctx.constraints.extra_var if ctx.constraints is not None else 0.0))
        self.mono = self.sel[:-1] - self.sel[1:]
        # pull the tail only as fast as the current bounds can certify; the
        # first point is pinned, so this is a constant of the optimization
        self.v_target = sustainable_speed(ctx.constraints, ctx.stop,
                                          float(traj.points[0]), self.h,
                                          self.n_pin, ctx.v_des)
        w = weights
        self.h_quad = 2.0 * (w.w_vel * self.dv.T @ self.dv
                             + w.w_acc * self.da.T @ self.da
                             + w.w_jerk * self.dj.T @ self.dj)
        if ctx.lead_path is not None and w.w_s > 0:
            jac = ctx.headway * self.dv + self.sel
            self.h_quad = self.h_quad + 2.0 * w.w_s * (jac.T @ jac)

    def assemble(self, free: np.ndarray) -> np.ndarray:
        return np.concatenate([self.prefix, free])

    def _softplus(self, z):
        b = self.weights.penalty_sharpness
        return (np.maximum(b * z, 0.0) + np.log1p(np.exp(-np.abs(b * z)))) / b

    def _sigma(self, vb: np.ndarray):
        """sigma(v), sigma'(v), sigma''(v) at the bound indices."""
        stop = self.ctx.stop
        if stop.sigma_mode is SigmaMode.FIXED_FACTOR:
            sigma = np.full_like(vb, math.sqrt(self.base_var + 4.0 * stop.sigma_v ** 2))
            zero = np.zeros_like(vb)
            return sigma, zero, zero
        q = (stop.sigma_v / stop.a_dec) ** 2
        sigma = np.sqrt(self.base_var + q * vb ** 2)
        safe = np.where(sigma > 1e-12, sigma, 1.0)
        d1 = np.where(sigma > 1e-12, q * vb / safe, 0.0)
        d2 = np.where(sigma > 1e-12, q * self.base_var / safe ** 3, 0.0)
        return sigma, d1, d2

    def value_grad(self, x_full: np.ndarray):
        w = self.weights
        ctx = self.ctx
        v = self.dv @ x_full
        a = self.da @ x_full
        j = self.dj @ x_full
        grad = np.zeros_like(x_full)

        dv_err = v - self.v_target
        val = w.w_vel * dv_err @ dv_err + w.w_acc * a @ a + w.w_jerk * j @ j
        grad += 2.0 * (w.w_vel * (self.dv.T @ dv_err)
                       + w.w_acc * (self.da.T @ a)
                       + w.w_jerk * (self.dj.T @ j))

        if ctx.lead_path is not None and w.w_s > 0:
            x = self.sel @ x_full
            gap = ctx.lead_path - x
            err = (ctx.s_min + ctx.headway * v) - gap
            val += w.w_s * err @ err
            jac = ctx.headway * self.dv + self.sel
            grad += 2.0 * w.w_s * (jac.T @ err)

        beta = w.penalty_sharpness
        if len(self.bound_idx) > 0:
            stop = ctx.stop
            vb = v[self.bound_idx]
            xb = (self.sel @ x_full)[self.bound_idx]
            sigma, dsigma_dv, _ = self._sigma(vb)
            z = xb + vb ** 2 / (2.0 * stop.a_dec) + ctx.constraints.k * sigma - self.bound_val
            sp = self._softplus(z)
            val += w.penalty_weight * sp @ sp
            dpen_dz = 2.0 * w.penalty_weight * sp * expit(beta * z)
            dz_dv = vb / stop.a_dec + ctx.constraints.k * dsigma_dv
            rows = self.sel[self.bound_idx] + dz_dv[:, None] * self.dv[self.bound_idx]
            grad += rows.T @ dpen_dz

        zm = self.mono @ x_full
        spm = self._softplus(zm)
        val += w.penalty_weight * spm @ spm
        grad += self.mono.T @ (2.0 * w.penalty_weight * spm * expit(beta * zm))

        return val, grad

    def hessian(self, x_full: np.ndarray) -> np.ndarray:
        """Exact Hessian in the full coordinates."""
        w = self.weights
        beta = w.penalty_sharpness
        hess = self.h_quad.copy()
        if len(self.bound_idx) > 0:
            stop = self.ctx.stop
            v = self.dv @ x_full
            vb = v[self.bound_idx]
            xb = (self.sel @ x_full)[self.bound_idx]
            sigma, d1, d2 = self._sigma(vb)
            k = self.ctx.constraints.k
            z = xb + vb ** 2 / (2.0 * stop.a_dec) + k * sigma - self.bound_val
            sp = self._softplus(z)
            s1 = expit(beta * z)
            dpen_dz = 2.0 * w.penalty_weight * sp * s1
            d2pen_dz2 = 2.0 * w.penalty_weight * (s1 ** 2 + sp * beta * s1 * (1.0 - s1))
            dz_dv = vb / stop.a_dec + k * d1
            d2z_dv2 = 1.0 / stop.a_dec + k * d2
            rows = self.sel[self.bound_idx] + dz_dv[:, None] * self.dv[self.bound_idx]
            hess += rows.T @ (d2pen_dz2[:, None] * rows)
            dvb = self.dv[self.bound_idx]
            hess += dvb.T @ ((dpen_dz * d2z_dv2)[:, None] * dvb)
        zm = self.mono @ x_full
        spm = self._softplus(zm)
        sm1 = expit(beta * zm)
        d2m = 2.0 * w.penalty_weight * (sm1 ** 2 + spm * beta * sm1 * (1.0 - sm1))
        hess += self.mono.T @ (d2m[:, None] * self.mono)
        return hess

    def stop_violations(self, x_full: np.ndarray) -> np.ndarray:
        """mu + k*sigma - bound at every constrained index (positive = violated)."""
        if len(self.bound_idx) == 0:
            return np.zeros(0)
        v = self.dv @ x_full
        stop = self.ctx.stop
        vb = v[self.bound_idx]
        xb = (self.sel @ x_full)[self.bound_idx]
        if stop.sigma_mode is SigmaMode.FIXED_FACTOR:
            sigma = np.full_like(vb, math.sqrt(self.base_var + 4.0 * stop.sigma_v ** 2))
        else:
            sigma = np.sqrt(self.base_var + (stop.sigma_v / stop.a_dec) ** 2 * vb ** 2)
        return xb + vb ** 2 / (2.0 * stop.a_dec) + self.ctx.constraints.k * sigma - self.bound_val


def objective(traj: SupportTrajectory, weights: PlannerWeights, ctx: PlanContext) -> float:
    """Total cost of a trajectory: comfort, follow tracking and penalties."""
    model = _Objective(traj, weights, ctx)
    val, _ = model.value_grad(traj.full)
    return float(val)


def objective_gradient(traj: SupportTrajectory, weights: PlannerWeights,
                       ctx: PlanContext) -> np.ndarray:
    """Analytic gradient of the objective with respect to the free points."""
    model = _Objective(traj, weights, ctx)
    _, grad = model.value_grad(traj.full)
    return grad[N_HISTORY + traj.n_pin:]


def penalty(traj: SupportTrajectory, constraints: ConstraintSet, stop: StopParams,
            weights: PlannerWeights) -> float:
    """Penalty part of the cost alone (stop bounds plus monotonicity)."""
    ctx = PlanContext(v_des=0.0, constraints=constraints, stop=stop)
    model = _Objective(traj, weights, ctx)
    x_full = traj.full
    sp = model._softplus(model.stop_violations(x_full))
    spm = model._softplus(model.mono @ x_full)
    return float(weights.penalty_weight * (sp @ sp + spm @ spm))


def warm_start(prev: SupportTrajectory | None, t0: float, x0: float, v0: float,
               a_dec: float, timing, n_points: int = DEFAULT_N_POINTS) -> SupportTrajectory:
    """Initial guess: committed prefix continued by full braking.

    With a previous solution, its time-aligned history and first n_pin points
    carry over unchanged; all later points brake at a_dec until standstill.
    Without one, the whole profile brakes from the given state, with a
    constant-speed history synthesized behind it.
    """
    h = timing.h
    n_pin = timing.n_pin
    if prev is not None:
        shift_f = (t0 - prev.t0) / h
        shift = int(round(shift_f))
        if abs(shift_f - shift) > 1e-9:
            raise ValueError("replan time is not on the h grid of the previous plan")
        if shift < 0 or shift + n_pin > prev.n:
            raise ValueError("previous plan does not cover the pinned window")
        full_prev = prev.full
        history = full_prev[shift:shift + N_HISTORY].copy()
        points = np.empty(n_points)
        points[:n_pin] = full_prev[shift + N_HISTORY:shift + N_HISTORY + n_pin]
        start = n_pin - 1
        v_b = (points[start] - (points[start - 1] if start >= 1 else history[-1])) / h
    else:
        history = x0 - h * v0 * np.arange(N_HISTORY, 0, -1)
        points = np.empty(n_points)
        points[0] = x0
        start = 0
        v_b = v0
    for k in range(start, n_points - 1):
        v_next = max(0.0, v_b - (k + 1 - start) * a_dec * h)
        points[k + 1] = points[k] + v_next * h
    return SupportTrajectory(t0=t0, h=h, history=history, points=points, n_pin=n_pin)


@dataclass
class Diagnostics:
    iterations: int = 0
    grad_norm: float = math.nan
    max_violation: float = 0.0
    fallback: bool = False
    objective: float = math.nan
    message: str = ""


def _newton_minimize(model: _Objective, x0: np.ndarray, grad_tol: float,
                     max_iter: int):
    """Damped Newton iterations on the free coordinates of a convex objective."""
    n_fixed = N_HISTORY + model.n_pin
    x = x0.copy()
    val, grad_full = model.value_grad(model.assemble(x))
    grad = grad_full[n_fixed:]
    it = 0
    message = "converged"
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < grad_tol:
            it -= 1
            break
        hess = model.hessian(model.assemble(x))[n_fixed:, n_fixed:]
        hess[np.diag_indices_from(hess)] += 1e-9 * (1.0 + np.abs(np.diag(hess)))
        try:
            direction = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            direction = -grad
        slope = grad @ direction
        if slope >= 0:
            direction = -grad
            slope = grad @ direction
        alpha = 1.0
        for _ in range(50):
            cand = x + alpha * direction
            cand_val, cand_grad_full = model.value_grad(model.assemble(cand))
            if cand_val <= val + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        else:
            message = "line search stalled"
            break
        x, val, grad = cand, cand_val, cand_grad_full[n_fixed:]
    else:
        message = "iteration limit"
    return x, val, grad, it, message


def optimize(init: SupportTrajectory, constraints: ConstraintSet,
             weights: PlannerWeights, ctx: PlanContext,
             grad_tol: float = GRAD_TOL, max_iter: int = MAX_ITER):
    """Minimize the objective over the free support points.

    Newton iterations with analytic first and second derivatives, stopping on
    a gradient norm below grad_tol or max_iter iterations; the objective is
    convex, so this is the global optimum. If the result still violates a
    bound inside the first 2*n_pin points by more than a millimeter, the safe
    warm start is returned instead, flagged as FALLBACK.
    """
    if ctx.constraints is not constraints:
        ctx = replace(ctx, constraints=constraints)
    model = _Objective(init, weights, ctx)
    x_free0 = init.points[init.n_pin:].astype(float)
    val0, _ = model.value_grad(init.full)
    if not np.isfinite(val0):
        raise ValueError("objective is not finite at the initial trajectory")

    x_opt, val, grad, iters, message = _newton_minimize(model, x_free0, grad_tol, max_iter)
    points = np.concatenate([init.points[:init.n_pin], x_opt])
    # the soft monotonicity hinge can leave cm-scale reversals in hard stop
    # transients; forward motion is a hard invariant, so project. The
    # violation check below runs on the projected points.
    points[init.n_pin:] = np.maximum.accumulate(points[init.n_pin - 1:])[1:]
    out = SupportTrajectory(t0=init.t0, h=init.h, history=init.history.copy(),
                            points=points, n_pin=init.n_pin)
    viol = model.stop_violations(out.full)
    max_violation = float(np.max(viol)) if len(viol) else 0.0
    safe_window = viol[model.bound_idx < 2 * init.n_pin] if len(viol) else viol
    window_violation = float(np.max(safe_window)) if len(safe_window) else 0.0

    diag = Diagnostics(iterations=iters,
                       grad_norm=float(np.max(np.abs(grad))),
                       max_violation=max_violation,
                       objective=float(val),
                       message=message)
    if window_violation > FALLBACK_TOL:
        diag.fallback = True
        fallback = SupportTrajectory(t0=init.t0, h=init.h, history=init.history.copy(),
                                     points=init.points.copy(), n_pin=init.n_pin)
        fb_viol = model.stop_violations(fallback.full)
        diag.max_violation = float(np.max(fb_viol)) if len(fb_viol) else 0.0
        return fallback, diag
    return out, diag
