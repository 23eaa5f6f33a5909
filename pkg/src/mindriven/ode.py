"""Piecewise-linear infinite ODE system with minimal-size switching.

On the interval where the minimal size is ``i`` the truncated state obeys
dx/dt = b^(i)(x): component i loses mass to every merge, component j > i
gains K(i, j-i) x_{j-i} and loses K(i, j) x_j. The segment ends when x_i
crosses zero (it is strictly decreasing while positive, so the crossing is
transversal); the minimal size switches to i+1 and the construction repeats.
Gain terms that would land past the truncation cap are removed and their
first moment accumulated in ``overflow_mass`` so conservation of
sum_j j x_j + overflow stays checkable.

The inner stepper is an adaptive embedded Runge-Kutta 5(4) pair with dense
output (scipy's RK45); the zero crossing is localized by bracketing between
accepted steps and root-polishing on the interpolant. The segment systems are
linear and non-stiff for bounded kernels, so explicit stepping suffices.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import IO, Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (
    HorizonError,
    MissingDeltaError,
    MissingSizeOneError,
    NegativeClampError,
    NoCrossingError,
    PrefixViolationError,
    StiffnessError,
    TooCloseToSwitchError,
    TruncationOverflowError,
    ValidationError,
)
from .model import Kernel


@dataclass(frozen=True)
class SolverControls:
    cap: int = 256                    # truncation cap M
    rtol: float = 1e-8
    atol: float = 1e-10
    tol_event: float = 1e-10          # |x_l| at the located root
    tol_mass: float = 1e-8            # conservation budget
    tol_neg: float = 1e-12            # largest tolerated negative dip
    tol_overflow: float = 1e-6        # overflow-mass abort threshold
    samples_per_segment: int = 200
    segment_time_budget: float = 200.0  # fallback when delta_i is undeclared


@dataclass
class DenseState:
    """Truncated deterministic configuration at one instant."""

    x: np.ndarray          # sizes 1..M at indices 0..M-1
    ell: int
    overflow_mass: float = 0.0
    t: float = 0.0

    @property
    def cap(self) -> int:
        return len(self.x)

    def first_moment(self) -> float:
        return float(np.arange(1, self.cap + 1) @ self.x) + self.overflow_mass


# ---------------------------------------------------------------------------
# vector fields
# ---------------------------------------------------------------------------

def _kernel_row(kernel: Kernel, i: int, cap: int) -> np.ndarray:
    """K(i, s) for s = 1..cap."""
    if kernel.kind == "min_form":
        sizes = np.arange(1, cap + 1)
        return np.asarray(kernel.phi(np.minimum(sizes, i)), dtype=float)
    return np.array([kernel.eval(i, s) for s in range(1, cap + 1)], dtype=float)


def _field(i: int, x: np.ndarray, row: np.ndarray) -> tuple[np.ndarray, float]:
    """b-type field for minimal size i with coefficient row K(i, .)."""
    cap = len(x)
    rx = row * x
    b = np.zeros(cap)
    loss = rx[i - 1:]
    b[i - 1:] -= loss
    b[i - 1] -= loss.sum()
    b[i:] += rx[: cap - i]
    tail = rx[cap - i:]
    overflow_rate = float((np.arange(cap - i + 1, cap + 1) + i) @ tail)
    return b, overflow_rate


def _check_prefix(i: int, x: np.ndarray):
    if i > 1 and np.any(x[: i - 1] != 0.0):
        j = int(np.nonzero(x[: i - 1])[0][0]) + 1
        raise PrefixViolationError(f"x_{j} = {x[j-1]} != 0 below minimal size {i}")


def vector_field_b(i: int, x: Sequence[float], kernel: Kernel) -> tuple[np.ndarray, float]:
    """(b^(i)(x), overflow first-moment rate) on the truncated range."""
    x = np.asarray(x, dtype=float)
    _check_prefix(i, x)
    return _field(i, x, _kernel_row(kernel, i, len(x)))


def vector_field_F(i: int, a: Sequence[float], y: Sequence[float]) -> tuple[np.ndarray, float]:
    """Auxiliary field with coefficients a_j; equals b^(i) when a_j = K(i, j)."""
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    if len(a) < len(y):
        raise ValidationError("coefficient sequence shorter than the state")
    if np.any(a[:len(y)] <= 0):
        raise ValidationError("coefficients must be positive")
    _check_prefix(i, y)
    return _field(i, y, a[: len(y)])


# ---------------------------------------------------------------------------
# segment integration
# ---------------------------------------------------------------------------

@dataclass
class Segment:
    ell: int
    t0: float
    t1: float
    sol: object                     # scipy OdeSolution over [t0, t1]
    vanished: bool
    samples_t: np.ndarray
    samples_x: np.ndarray           # (nsamples, cap)
    samples_overflow: np.ndarray
    end_x: np.ndarray
    overflow_end: float
    eta: float                      # -dx_l/dt at the located root (transversality)
    clamp_worst: float              # most negative dip seen (as magnitude)
    mass_drift: float


def _segment_budget(kernel: Kernel, ell: int, controls: SolverControls) -> float:
    # delta-bounded segments end by 2/delta (Lyapunov ratio argument)
    if kernel.delta_i is not None:
        d = float(kernel.delta_i(ell))
        if d > 0:
            return min(controls.segment_time_budget, 3.0 / d)
    return controls.segment_time_budget


def integrate_segment(state: DenseState, kernel: Kernel, controls: SolverControls,
                      t_cap: float | None = None) -> tuple[DenseState, float, Segment]:
    """Integrate dx/dt = b^(ell) until x_ell crosses zero.

    Returns the state at the vanish time (x_ell set exactly to 0), the segment
    duration, and the Segment record with dense output. If ``t_cap`` cuts the
    segment short the returned Segment has ``vanished=False`` and the state is
    the one at ``t_cap``.
    """
    cap = state.cap
    i = state.ell
    _check_prefix(i, state.x)
    if state.x[i - 1] <= 0:
        raise ValidationError(f"x_{i} must be positive at the segment start")
    row = _kernel_row(kernel, i, cap)

    def rhs(t, u):
        b, ov = _field(i, u[:cap], row)
        return np.append(b, ov)

    def crossing(t, u):
        return u[i - 1]

    crossing.terminal = True
    crossing.direction = -1.0

    budget = _segment_budget(kernel, i, controls)
    t_hi = state.t + budget
    capped = t_cap is not None and t_cap < t_hi
    if capped:
        t_hi = float(t_cap)
    u0 = np.append(state.x, state.overflow_mass)
    sol = solve_ivp(rhs, (state.t, t_hi), u0, method="RK45", rtol=controls.rtol,
                    atol=controls.atol, dense_output=True, events=[crossing])
    if sol.status < 0:
        raise StiffnessError(f"stepper failed on segment ell={i}: {sol.message}")
    vanished = sol.status == 1
    if not vanished and not capped:
        raise NoCrossingError(
            f"x_{i} did not reach 0 within the time budget {budget:g}")

    t1 = float(sol.t_events[0][0]) if vanished else t_hi
    u1 = sol.sol(t1)
    x1 = u1[:cap].copy()
    overflow1 = float(u1[cap])

    ts = np.linspace(state.t, t1, controls.samples_per_segment)
    us = sol.sol(ts)
    xs = us[:cap].T
    worst = float(max(0.0, -min(xs.min(), x1.min())))
    if worst > controls.tol_neg:
        jbad = int(np.argmin(x1)) + 1
        raise NegativeClampError(
            f"component dipped to -{worst:.3e} (> tol_neg) on segment ell={i}",
            diagnostics={"ell": i, "t": t1, "worst": worst, "component": jbad,
                         "x_min_per_component": xs.min(axis=0).tolist()})

    eta = 0.0
    if vanished:
        eta = float(-_field(i, np.maximum(u1[:cap], 0.0), row)[0][i - 1])
        if abs(x1[i - 1]) > controls.tol_event:
            raise NoCrossingError(
                f"event polish left |x_{i}| = {abs(x1[i-1]):.3e} > tol_event")
        x1[i - 1] = 0.0
    x1 = np.maximum(x1, 0.0)
    xs = np.maximum(xs, 0.0)

    sizes = np.arange(1, cap + 1, dtype=float)
    m0 = float(sizes @ state.x) + state.overflow_mass
    m1 = float(sizes @ x1) + overflow1
    seg = Segment(ell=i, t0=state.t, t1=t1, sol=sol.sol, vanished=vanished,
                  samples_t=ts, samples_x=xs, samples_overflow=us[cap],
                  end_x=x1, overflow_end=overflow1, eta=eta, clamp_worst=worst,
                  mass_drift=abs(m1 - m0))
    out = DenseState(x=x1, ell=i, overflow_mass=overflow1, t=t1)
    return out, t1 - state.t, seg


# ---------------------------------------------------------------------------
# piecewise solution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PiecewiseStop:
    """Integrate until every set goal holds: minimal size exceeds
    ``max_min_size`` and time coverage reaches ``max_time``."""

    max_min_size: int | None = None
    max_time: float | None = None

    def __post_init__(self):
        if self.max_min_size is None and self.max_time is None:
            raise ValidationError("piecewise stop needs a goal")


@dataclass
class PiecewiseSolution:
    cap: int
    switch_times: list[float]
    s: list[float]                       # segment durations t_i - t_{i-1}
    segment_states: list[np.ndarray]     # state at each t_i
    segments: list[Segment]
    skipped: list[tuple[int, float]]     # zero-duration switches (component, value)
    overflow_mass: float
    initial_moment: float
    mass_drift_max: float
    clamp_worst: float
    eta_min: float
    covered_until: float

    @property
    def t_inf_partial(self) -> float:
        return self.switch_times[-1] if self.switch_times else 0.0

    def ell_at(self, t: float) -> int:
        for k, ti in enumerate(self.switch_times, start=1):
            if t < ti:
                return k
        return len(self.switch_times) + 1

    def eval(self, times) -> np.ndarray:
        """Dense states at ``times`` (shape (len(times), cap)), clamped >= 0."""
        ts = np.atleast_1d(np.asarray(times, dtype=float))
        if ts.size and (ts.min() < 0 or ts.max() > self.covered_until * (1 + 1e-12) + 1e-300):
            raise HorizonError(
                f"requested time outside [0, {self.covered_until}]")
        out = np.empty((ts.size, self.cap))
        starts = np.array([seg.t0 for seg in self.segments])
        idx = np.clip(np.searchsorted(starts, ts, side="right") - 1, 0, len(self.segments) - 1)
        for k, seg in enumerate(self.segments):
            mask = idx == k
            if np.any(mask):
                tk = np.clip(ts[mask], seg.t0, seg.t1)
                out[mask] = np.maximum(seg.sol(tk)[: self.cap].T, 0.0)
        return out

    def state_at(self, t: float) -> DenseState:
        x = self.eval([t])[0]
        ell = self.ell_at(t)
        seg = self.segments[min(self.ell_at(t) - 1, len(self.segments) - 1)]
        ov = float(seg.sol(min(max(t, seg.t0), seg.t1))[self.cap])
        x[: ell - 1] = 0.0
        return DenseState(x=x, ell=ell, overflow_mass=ov, t=t)

    def extrapolate_t_inf(self) -> dict | None:
        """Three-point geometric-ratio guess for t_inf. Heuristic only: the
        decay law of the segment durations is not known."""
        if len(self.s) < 3 or min(self.s[-3:]) <= 0:
            return None
        r1 = self.s[-2] / self.s[-3]
        r2 = self.s[-1] / self.s[-2]
        if r2 >= 1.0:
            return {"estimate": math.inf, "ratio": r2, "heuristic": True}
        return {"estimate": self.switch_times[-1] + self.s[-1] * r2 / (1.0 - r2),
                "ratio": r2, "ratio_prev": r1, "heuristic": True}


def integrate_piecewise(x0: Sequence[float], kernel: Kernel, stop: PiecewiseStop,
                        controls: SolverControls | None = None) -> PiecewiseSolution:
    """Chain segments with ell := ell + 1 at each vanish time.

    ``x0`` is the admissible initial sequence (x_1 > 0); components at or
    below the event tolerance right after a switch trigger an immediate
    zero-duration switch, which is recorded in ``skipped``.
    """
    controls = controls or SolverControls()
    x0 = np.asarray(x0, dtype=float)
    if np.any(x0 < 0) or not np.all(np.isfinite(x0)):
        raise ValidationError("x0 must be finite and nonnegative")
    if x0.size < 1 or x0[0] <= 0:
        raise MissingSizeOneError("admissible initial data needs x_1 > 0")
    if x0.size > controls.cap:
        if np.any(x0[controls.cap:] != 0):
            raise ValidationError("x0 support exceeds the truncation cap")
        x0 = x0[: controls.cap]
    if stop.max_min_size is not None and controls.cap < 2 * stop.max_min_size:
        raise ValidationError(
            f"cap {controls.cap} < 2*I = {2 * stop.max_min_size}")

    x = np.zeros(controls.cap)
    x[: x0.size] = x0
    sizes = np.arange(1, controls.cap + 1, dtype=float)
    m_init = float(sizes @ x)

    state = DenseState(x=x, ell=1, overflow_mass=0.0, t=0.0)
    switch_times: list[float] = []
    durations: list[float] = []
    seg_states: list[np.ndarray] = []
    segments: list[Segment] = []
    skipped: list[tuple[int, float]] = []
    drift_max = 0.0
    clamp_worst = 0.0
    eta_min = math.inf

    while True:
        size_done = stop.max_min_size is None or state.ell > stop.max_min_size
        time_done = stop.max_time is None or state.t >= stop.max_time
        if size_done and time_done:
            break
        if 2 * state.ell > controls.cap:
            raise ValidationError(
                f"minimal size {state.ell} exceeds cap/2; raise the cap")
        t_cap = stop.max_time if (size_done and stop.max_time is not None) else None
        state, s, seg = integrate_segment(state, kernel, controls, t_cap=t_cap)
        segments.append(seg)
        drift_max = max(drift_max, seg.mass_drift)
        clamp_worst = max(clamp_worst, seg.clamp_worst)
        if seg.overflow_end > controls.tol_overflow:
            raise TruncationOverflowError(
                f"overflow mass {seg.overflow_end:.3e} > {controls.tol_overflow:g}; "
                f"raise the cap")
        if not seg.vanished:
            break
        eta_min = min(eta_min, seg.eta)
        switch_times.append(state.t)
        durations.append(s)
        seg_states.append(state.x.copy())
        ell = state.ell + 1
        # simultaneous vanishings: components already at the event tolerance
        # switch instantly with zero duration
        while ell <= controls.cap and state.x[ell - 1] <= controls.tol_event:
            skipped.append((ell, float(state.x[ell - 1])))
            state.x[ell - 1] = 0.0
            switch_times.append(state.t)
            durations.append(0.0)
            seg_states.append(state.x.copy())
            ell += 1
        state = DenseState(x=state.x, ell=ell, overflow_mass=state.overflow_mass,
                           t=state.t)

    covered = segments[-1].t1 if segments else 0.0
    final_m = (float(sizes @ state.x) + state.overflow_mass) if segments else m_init
    drift_max = max(drift_max, abs(final_m - m_init))
    return PiecewiseSolution(
        cap=controls.cap, switch_times=switch_times, s=durations,
        segment_states=seg_states, segments=segments, skipped=skipped,
        overflow_mass=state.overflow_mass, initial_moment=m_init,
        mass_drift_max=drift_max, clamp_worst=clamp_worst,
        eta_min=(0.0 if eta_min is math.inf else eta_min), covered_until=covered)


# ---------------------------------------------------------------------------
# moments and diagnostics
# ---------------------------------------------------------------------------

def _weights(g: Callable | Sequence[float], cap: int) -> np.ndarray:
    if callable(g):
        return np.asarray(g(np.arange(1, cap + 1, dtype=float)), dtype=float)
    w = np.asarray(g, dtype=float)
    if w.size < cap:
        raise ValidationError("weight sequence shorter than the state")
    return w[:cap]


def moment(state: DenseState, g: Callable | Sequence[float]) -> float:
    """sum_j g(j) x_j over the truncated range."""
    return float(_weights(g, state.cap) @ state.x)


def moment_derivative_check(state: DenseState, kernel: Kernel,
                            g: Callable | Sequence[float], h: float,
                            rel_floor: float = 1e-6, curvature: float = 10.0) -> dict:
    """Central finite difference of the g-moment over +-h against the identity

        d/dt sum g_j x_j = sum_{j>=l} (g_{l+j} - g_l - g_j) K(l,j) x_j

    (gains past the cap keep only their loss part, matching what is
    integrated). ``state`` must sit more than h inside its segment.
    """
    i = state.ell
    cap = state.cap
    _check_prefix(i, state.x)
    if state.x[i - 1] <= 0:
        raise TooCloseToSwitchError("x_ell already vanished at this state")
    row = _kernel_row(kernel, i, cap)

    def rhs(t, u):
        b, ov = _field(i, u[:cap], row)
        return np.append(b, ov)

    u0 = np.append(state.x, state.overflow_mass)
    plus = solve_ivp(rhs, (0.0, h), u0, method="RK45", rtol=1e-11, atol=1e-13)
    minus = solve_ivp(rhs, (0.0, -h), u0, method="RK45", rtol=1e-11, atol=1e-13)
    if plus.status < 0 or minus.status < 0:
        raise StiffnessError("finite-difference probe failed")
    xp = plus.y[:cap, -1]
    xm = minus.y[:cap, -1]
    if xp[i - 1] <= 0 or np.any(xm[: i - 1] > 1e-9) or xm[i - 1] <= 0:
        raise TooCloseToSwitchError("the +-h window leaves the current segment")

    w = _weights(g, cap)
    fd = (float(w @ xp) - float(w @ xm)) / (2.0 * h)

    gl = w[i - 1]
    x = state.x
    rhs_val = 0.0
    for j in range(i, cap + 1):
        if x[j - 1] == 0.0:
            continue
        a = row[j - 1] * x[j - 1]
        if i + j <= cap:
            rhs_val += (w[i + j - 1] - gl - w[j - 1]) * a
        else:
            rhs_val += (-gl - w[j - 1]) * a
    tol = max(rel_floor, curvature * h * h)
    err = abs(fd - rhs_val)
    ok = err <= tol * max(1.0, abs(rhs_val))
    return {"finite_difference": fd, "identity_rhs": rhs_val, "abs_error": err,
            "tolerance": tol * max(1.0, abs(rhs_val)), "ok": ok}


@dataclass
class LyapunovReport:
    rows: list[dict]
    tol_slope: float

    @property
    def ok(self) -> bool:
        return all(r["ok"] for r in self.rows)

    def to_dict(self) -> dict:
        return {"tol_slope": self.tol_slope, "ok": self.ok, "rows": self.rows}


def lyapunov_report(solution: PiecewiseSolution, kernel: Kernel,
                    tol_slope: float = 1e-3) -> LyapunovReport:
    """Check d/dt (M_-1 / M_0) <= -delta_i / (2 i) on every dense sample of
    every segment (the forced decay that bounds each segment duration)."""
    if kernel.delta_i is None:
        raise MissingDeltaError("kernel declares no delta_i lower bounds")
    rows = []
    for seg in solution.segments:
        sizes = np.arange(1, solution.cap + 1, dtype=float)
        m0 = seg.samples_x @ np.ones(solution.cap)
        mm1 = seg.samples_x @ (1.0 / sizes)
        ratio = mm1 / m0
        slope = np.gradient(ratio, seg.samples_t)
        bound = -float(kernel.delta_i(seg.ell)) / (2.0 * seg.ell)
        worst = float(slope.max())
        rows.append({"ell": seg.ell, "bound": bound, "max_slope": worst,
                     "margin": bound + tol_slope - worst,
                     "ok": bool(worst <= bound + tol_slope)})
    return LyapunovReport(rows=rows, tol_slope=tol_slope)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def write_dense_csv(solution: PiecewiseSolution, fp: IO[str], sparse: bool = False) -> None:
    w = csv.writer(fp)
    if sparse:
        w.writerow(["t", "ell", "nonzero"])
        for seg in solution.segments:
            for t, x in zip(seg.samples_t, seg.samples_x):
                nz = {str(j + 1): float(v) for j, v in enumerate(x) if v != 0.0}
                w.writerow([repr(float(t)), seg.ell,
                            json.dumps(nz, separators=(",", ":"))])
    else:
        w.writerow(["t", "ell"] + [f"x_{j}" for j in range(1, solution.cap + 1)])
        for seg in solution.segments:
            for t, x in zip(seg.samples_t, seg.samples_x):
                w.writerow([repr(float(t)), seg.ell] + [repr(float(v)) for v in x])


def write_switch_csv(solution: PiecewiseSolution, fp: IO[str]) -> None:
    w = csv.writer(fp)
    w.writerow(["i", "t_i", "s_i"])
    for k, (t, s) in enumerate(zip(solution.switch_times, solution.s), start=1):
        w.writerow([k, repr(float(t)), repr(float(s))])
