"""Exact stochastic simulation of min-driven coalescence.

Every jump merges one particle of the current minimal size ``l`` with a
partner of size j >= l: rate K(l, j) X_j for j > l and K(l, l) (X_l - 1) for
j = l, so the process waits Exp(lambda) with lambda = sum of channel rates.
For min-form kernels K = min(phi(i), phi(j)) this collapses to
lambda = phi(l) (n - 1) with the partner uniform among the other n - 1
particles; that fast path is distribution-identical to the generic channel
menu and is what makes the representation of the absorption time

    T = sum_m eps_m / ((n - m) phi(L(m)))

replayable to the last ulp (waiting times are accumulated with compensated
summation, and the unit-mean exponentials are stored on the trajectory).

The module also provides the generator diagnostics (drift and componentwise
quadratic variation of the mass-rescaled process), the shared-randomness
coupling that preserves sorted-size domination, and the monodisperse scaling
coupling.
"""
from __future__ import annotations

import json
from bisect import insort
from dataclasses import dataclass, field
from typing import IO, Callable, Iterator, Mapping

import numpy as np

from .errors import (
    DominanceError,
    EmptyStateError,
    ReplayMismatchError,
    StepTooLargeError,
    TerminalStateError,
    ValidationError,
)
from .model import Kernel, ParticleState, Phi, sorted_sizes
from .rng import as_generator


class _Kahan:
    """Compensated accumulator; identical rounding on simulate and replay."""

    __slots__ = ("value", "_c")

    def __init__(self, value: float = 0.0):
        self.value = value
        self._c = 0.0

    def add(self, x: float) -> float:
        y = x - self._c
        t = self.value + y
        self._c = (t - self.value) - y
        self.value = t
        return t


# ---------------------------------------------------------------------------
# jump structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JumpMenu:
    min_size: int
    channels: tuple[tuple[int, float], ...]  # (partner size j, rate), zero rates omitted
    total_rate: float


def jump_menu(state: ParticleState, kernel: Kernel) -> JumpMenu:
    """Partner channels and total jump rate out of ``state``."""
    if state.total_count <= 1:
        raise TerminalStateError("no jumps from a state with fewer than 2 particles")
    ell = state.min_size
    channels = []
    total = 0.0
    for j in sorted(state.counts):
        mult = state.counts[j] - 1 if j == ell else state.counts[j]
        rate = kernel.eval(ell, j) * mult
        if rate < 0:
            raise ValidationError(f"negative rate at (l={ell}, j={j})")
        if rate > 0:
            channels.append((j, rate))
            total += rate
    return JumpMenu(ell, tuple(channels), total)


def step(state: ParticleState, kernel: Kernel, rng) -> tuple[float, int, ParticleState]:
    """One exact jump: waiting time, partner size, and the post-merge state."""
    rng = as_generator(rng)
    menu = jump_menu(state, kernel)
    if menu.total_rate <= 0:
        raise ValidationError("kernel yields zero total rate; process is stuck")
    dt = rng.standard_exponential() / menu.total_rate
    u = rng.random() * menu.total_rate
    acc = 0.0
    partner = menu.channels[-1][0]
    for j, rate in menu.channels:
        acc += rate
        if u <= acc:
            partner = j
            break
    return dt, partner, state.merge(menu.min_size, partner)


# ---------------------------------------------------------------------------
# stop rules and trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StopRule:
    """Stop when every set condition holds (time reached, minimal size
    reached, single particle left)."""

    singleton: bool = False
    time: float | None = None
    min_size: int | None = None

    def __post_init__(self):
        if not self.singleton and self.time is None and self.min_size is None:
            raise ValidationError("stop rule needs at least one condition")

    @staticmethod
    def until_singleton() -> "StopRule":
        return StopRule(singleton=True)

    @staticmethod
    def until_time(t: float) -> "StopRule":
        if not (t >= 0):
            raise ValidationError("stop time must be >= 0")
        return StopRule(time=float(t))

    @staticmethod
    def until_min_size_at_least(i: int) -> "StopRule":
        if i < 1:
            raise ValidationError("minimal-size threshold must be >= 1")
        return StopRule(min_size=int(i))


@dataclass
class Trajectory:
    """Event log of one run plus derived exhaustion times.

    ``events`` holds (t, l, j): event time, minimal size before the event and
    the partner size. ``exhaustion_times[i]`` is the first time every size
    <= i is gone; ``last_event_time`` is set when the run reached a single
    particle. ``exponentials`` stores the unit-mean waiting-time variates for
    min-form runs (needed to replay the representation of T exactly).
    """

    initial: ParticleState
    events: list[tuple[float, int, int]]
    final: ParticleState
    exhaustion_times: dict[int, float]
    last_event_time: float | None
    ended_at_singleton: bool
    t_end: float
    exponentials: np.ndarray | None = None
    kernel_label: str = ""

    @property
    def min_size_sequence(self) -> list[int]:
        """L(m): minimal size right before the m-th event."""
        return [l for (_, l, _) in self.events]

    def replay(self) -> Iterator[tuple[float, int, int, dict[int, int]]]:
        """Materialize post-event states on demand; yields (t, l, j, counts)."""
        counts = dict(self.initial.counts)
        for (t, l, j) in self.events:
            for s in (l, j):
                c = counts[s] - 1
                if c:
                    counts[s] = c
                else:
                    del counts[s]
            counts[l + j] = counts.get(l + j, 0) + 1
            yield t, l, j, counts


def simulate(x0: ParticleState, kernel: Kernel, stop: StopRule, rng) -> Trajectory:
    """Run the jump process from ``x0`` until ``stop`` is satisfied."""
    rng = as_generator(rng)
    if x0.total_count < 1:
        raise EmptyStateError("cannot simulate from an empty state")

    counts = dict(x0.counts)
    n = x0.total_count
    mass = x0.total_mass
    ell = min(counts)
    clock = _Kahan()
    events: list[tuple[float, int, int]] = []
    eps_log: list[float] = []
    exhausted: dict[int, float] = {i: 0.0 for i in range(1, ell)}

    min_form = kernel.kind == "min_form"
    phi = kernel.phi
    t_end: float | None = None

    while True:
        state_ok = (
            (not stop.singleton or n <= 1)
            and (stop.min_size is None or ell >= stop.min_size)
        )
        if state_ok and (stop.time is None or clock.value >= stop.time):
            break
        if n <= 1:
            # no further events ever; the state is constant from here on
            if stop.time is not None:
                t_end = max(clock.value, stop.time)
            break

        eps = rng.standard_exponential()
        if min_form:
            lam = (n - 1) * float(phi(ell))
        else:
            lam = 0.0
            menu: list[tuple[int, float]] = []
            for s, c in counts.items():
                rate = kernel.eval(ell, s) * (c - 1 if s == ell else c)
                if rate > 0.0:
                    menu.append((s, rate))
                    lam += rate
        if lam <= 0.0:
            raise ValidationError("kernel yields zero total rate; process is stuck")
        dt = eps / lam

        if state_ok and stop.time is not None and clock.value + dt > stop.time:
            t_end = stop.time  # event would land past the horizon; state holds
            break

        t = clock.add(dt)
        if min_form:
            r = int(rng.integers(1, n))  # uniform among the other n-1 particles
            acc = 0
            partner = ell
            for s, c in counts.items():
                acc += c - 1 if s == ell else c
                if r <= acc:
                    partner = s
                    break
            eps_log.append(eps)
        else:
            u = rng.random() * lam
            acc = 0.0
            partner = menu[-1][0]
            for s, rate in menu:
                acc += rate
                if u <= acc:
                    partner = s
                    break

        events.append((t, ell, partner))
        for s in (ell, partner):
            c = counts[s] - 1
            if c:
                counts[s] = c
            else:
                del counts[s]
        counts[ell + partner] = counts.get(ell + partner, 0) + 1
        n -= 1
        if ell not in counts:
            old = ell
            while ell <= mass and ell not in counts:
                ell += 1
            for i in range(old, ell):
                exhausted[i] = t

    singleton = n <= 1
    final = ParticleState(counts, mass, n)
    return Trajectory(
        initial=x0,
        events=events,
        final=final,
        exhaustion_times=exhausted,
        last_event_time=(events[-1][0] if events else 0.0) if singleton else None,
        ended_at_singleton=singleton,
        t_end=clock.value if t_end is None else t_end,
        exponentials=np.asarray(eps_log) if min_form else None,
        kernel_label=kernel.label,
    )


def replay_T_from_representation(traj: Trajectory, phi: Phi | Callable) -> float:
    """Recompute the absorption time from stored variates and minimal sizes.

    Valid only for min-form trajectories run to a single particle; equals
    ``traj.last_event_time`` to within 1e-12 relative (bit-identical here,
    since the same compensated summation is replayed).
    """
    if traj.exponentials is None:
        raise ReplayMismatchError("trajectory carries no stored exponentials "
                                  "(generic kernel?); representation needs min form")
    if not traj.ended_at_singleton or traj.last_event_time is None:
        raise ReplayMismatchError("representation replay needs a run to a single particle")
    n = traj.initial.total_count
    if len(traj.events) != n - 1:
        raise ReplayMismatchError("event log is not a full n-1 coalescence history")
    clock = _Kahan()
    for m, (eps, (_, l, _)) in enumerate(zip(traj.exponentials, traj.events), start=1):
        clock.add(eps / ((n - m) * float(phi(l))))
    return clock.value


# ---------------------------------------------------------------------------
# generator diagnostics
# ---------------------------------------------------------------------------

def _min_key(xi: Mapping[int, object]) -> int:
    support = [s for s, v in xi.items() if v > 0]
    if not support:
        raise EmptyStateError("rescaled state has no positive component")
    return min(support)


def drift(xi: Mapping[int, object], kernel: Kernel, N) -> dict[int, object]:
    """Componentwise drift of the mass-rescaled process at state ``xi``.

    Pure python arithmetic: feeding Fraction values (and a rational-valued
    kernel with N passed as Fraction) keeps the result exact, which is how the
    mass-neutrality identity sum_j j*beta_j = 0 is checked symbolically.
    """
    ell = _min_key(xi)
    K = kernel.eval
    kll = K(ell, ell)
    xl = xi[ell]
    tail = 0
    for j, v in xi.items():
        if j > ell and v != 0:
            tail = tail + K(ell, j) * v
    out: dict[int, object] = {ell: -tail - 2 * kll * xl + 2 * kll / N}
    targets = {2 * ell}
    for j, v in xi.items():
        if v != 0:
            targets.add(j)
            targets.add(j + ell)
    for j in sorted(targets):
        if j <= ell:
            continue
        if j == 2 * ell:
            val = kll * (xl - 1 / N) - K(ell, j) * xi.get(j, 0)
        else:
            val = K(ell, j - ell) * xi.get(j - ell, 0) - K(ell, j) * xi.get(j, 0)
        if val != 0:
            out[j] = val
    return out


def local_variance(xi: Mapping[int, object], kernel: Kernel, N) -> dict[int, object]:
    """Componentwise quadratic-variation rate of the rescaled process; every
    entry carries the 1/N prefactor."""
    ell = _min_key(xi)
    K = kernel.eval
    kll = K(ell, ell)
    xl = xi[ell]
    tail = 0
    for j, v in xi.items():
        if j > ell and v != 0:
            tail = tail + K(ell, j) * v
    out: dict[int, object] = {ell: tail / N + 4 * kll * xl / N - 4 * kll / (N * N)}
    targets = {2 * ell}
    for j, v in xi.items():
        if v != 0:
            targets.add(j)
            targets.add(j + ell)
    for j in sorted(targets):
        if j <= ell:
            continue
        if j == 2 * ell:
            val = kll * (xl - 1 / N) / N + K(ell, j) * xi.get(j, 0) / N
        else:
            val = K(ell, j - ell) * xi.get(j - ell, 0) / N + K(ell, j) * xi.get(j, 0) / N
        if val != 0:
            out[j] = val
    return out


@dataclass
class GeneratorReport:
    h: float
    replicas: int
    total_rate: float
    rows: dict[int, dict[str, float]]  # j -> mean/predicted/stderr/z

    @property
    def max_abs_z(self) -> float:
        zs = [abs(r["z"]) for r in self.rows.values() if np.isfinite(r["z"])]
        return max(zs) if zs else 0.0

    def to_dict(self) -> dict:
        return {"h": self.h, "replicas": self.replicas, "total_rate": self.total_rate,
                "max_abs_z": self.max_abs_z,
                "rows": {str(j): r for j, r in sorted(self.rows.items())}}


def generator_consistency(x0: ParticleState, kernel: Kernel, h: float,
                          replicas: int, rng) -> GeneratorReport:
    """Compare the empirical mean increment of X/N over [0, h] with drift*h.

    Requires lambda*h < 0.2 at the initial state so the first-order prediction
    dominates multi-event corrections.
    """
    rng = as_generator(rng)
    lam = jump_menu(x0, kernel).total_rate
    if lam * h >= 0.2:
        raise StepTooLargeError(
            f"expected event count lambda*h = {lam * h:.3g} >= 0.2; shrink h")
    N = x0.total_mass
    xi0 = {s: c / N for s, c in x0.items()}
    beta = drift(xi0, kernel, N)

    sums: dict[int, float] = {j: 0.0 for j in beta}
    sumsq: dict[int, float] = {j: 0.0 for j in beta}
    stop = StopRule.until_time(h)
    for _ in range(replicas):
        traj = simulate(x0, kernel, stop, rng)
        for s in set(x0.counts) | set(traj.final.counts):
            d = (traj.final.counts.get(s, 0) - x0.counts.get(s, 0)) / N
            if s not in sums:
                sums[s] = 0.0
                sumsq[s] = 0.0
            sums[s] += d
            sumsq[s] += d * d

    rows: dict[int, dict[str, float]] = {}
    R = replicas
    for j in sorted(sums):
        mean = sums[j] / R
        var = max(sumsq[j] - sums[j] ** 2 / R, 0.0) / (R - 1)
        se = float(np.sqrt(var / R))
        pred = float(beta.get(j, 0.0)) * h
        if se > 0:
            z = (mean - pred) / se
        else:
            z = 0.0 if mean == pred else float("inf")
        rows[j] = {"mean": mean, "predicted": pred, "stderr": se, "z": z}
    return GeneratorReport(h=h, replicas=R, total_rate=lam, rows=rows)


# ---------------------------------------------------------------------------
# couplings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CouplingStream:
    """Shared randomness driving two processes pathwise-comparably: the m-th
    event merges each process's minimal particle with its k_m-th smallest
    (k_m uniform on {2, ..., n-m+1}) after waiting eps_m / ((n-m) phi(l))."""

    partner_indices: np.ndarray
    exponentials: np.ndarray


def _draw_stream(n: int, rng) -> CouplingStream:
    eps = rng.standard_exponential(n - 1)
    ks = rng.integers(2, np.arange(n + 1, 2, -1))
    return CouplingStream(partner_indices=ks, exponentials=eps)


def _run_on_stream(sizes: list[int], phi: Phi | Callable, stream: CouplingStream,
                   peer: list[int] | None = None) -> Trajectory:
    """Drive one process along a coupling stream; if ``peer`` is given, check
    sorted-size domination peer <= sizes after every event."""
    n = len(sizes)
    s = sorted(sizes)
    p = sorted(peer) if peer is not None else None
    initial = ParticleState.from_counts(_multiset(s))
    clock = _Kahan()
    events: list[tuple[float, int, int]] = []
    exhausted: dict[int, float] = {i: 0.0 for i in range(1, s[0])}
    for m in range(1, n):
        k = int(stream.partner_indices[m - 1])
        ell = s[0]
        partner = s[k - 1]
        del s[k - 1]
        del s[0]
        insort(s, ell + partner)
        t = clock.add(float(stream.exponentials[m - 1]) / ((n - m) * float(phi(ell))))
        events.append((t, ell, partner))
        if p is not None:
            lp = p[0]
            pp = p[k - 1]
            del p[k - 1]
            del p[0]
            insort(p, lp + pp)
            assert all(a <= b for a, b in zip(p, s)), "sorted-size domination broken"
        if s[0] > ell:
            for i in range(ell, s[0]):
                exhausted[i] = t
    final = ParticleState.from_counts(_multiset(s))
    return Trajectory(
        initial=initial, events=events, final=final,
        exhaustion_times=exhausted, last_event_time=events[-1][0] if events else 0.0,
        ended_at_singleton=True, t_end=clock.value,
        exponentials=np.asarray(stream.exponentials, dtype=float),
    )


def _multiset(sizes: list[int]) -> dict[int, int]:
    out: dict[int, int] = {}
    for s in sizes:
        out[s] = out.get(s, 0) + 1
    return out


def coupled_simulate(x0: ParticleState, y0: ParticleState, phi: Phi | Callable,
                     rng) -> tuple[Trajectory, Trajectory, CouplingStream]:
    """Run both processes to a single particle on one shared stream.

    Requires equal particle counts and sorted-size domination
    S_m(y0) <= S_m(x0); the coupling preserves it after every event, whence
    pathwise T_i(x0) <= T_i(y0) and T(x0) <= T(y0).
    """
    rng = as_generator(rng)
    n = x0.total_count
    if n != y0.total_count:
        raise ValidationError(f"particle counts differ: {n} vs {y0.total_count}")
    if n < 2:
        raise TerminalStateError("coupling needs at least 2 particles")
    sx = list(sorted_sizes(x0).sizes)
    sy = list(sorted_sizes(y0).sizes)
    for m, (a, b) in enumerate(zip(sy, sx), start=1):
        if a > b:
            raise DominanceError(
                f"S_{m}(y0) = {a} > S_{m}(x0) = {b}", first_violation=m)
    stream = _draw_stream(n, rng)
    tx = _run_on_stream(sx, phi, stream)
    ty = _run_on_stream(sy, phi, stream, peer=None)
    # re-run X with the peer check on (cheap n^2 guard, spec-required assertion)
    tx = _run_on_stream(sx, phi, stream, peer=sy)
    return tx, ty, stream


def scaling_coupling(n: int, i: int, phi: Phi | Callable, rng) -> tuple[float, float]:
    """Shared-stream exhaustion times (T_i from n*e_i, T_1 from n*e_1);
    their ratio is exactly phi(1)/phi(i)."""
    if n < 2 or i < 1:
        raise ValidationError("need n >= 2 and i >= 1")
    rng = as_generator(rng)
    stream = _draw_stream(n, rng)
    tx = _run_on_stream([i] * n, phi, stream)
    ty = _run_on_stream([1] * n, phi, stream)
    return tx.exhaustion_times[i], ty.exhaustion_times[1]


# ---------------------------------------------------------------------------
# trajectory export
# ---------------------------------------------------------------------------

def write_trajectory_jsonl(traj: Trajectory, fp: IO[str], seed: int,
                           kernel: str | None = None) -> None:
    """One JSON object per line: a header with the initial state, then one
    {"t", "l", "j"} record per event."""
    header = {
        "initial": {str(s): c for s, c in sorted(traj.initial.items())},
        "seed": int(seed),
        "kernel": kernel if kernel is not None else traj.kernel_label,
    }
    fp.write(json.dumps(header, separators=(",", ":")) + "\n")
    for (t, l, j) in traj.events:
        fp.write(json.dumps({"t": t, "l": l, "j": j}, separators=(",", ":")) + "\n")


def read_trajectory_jsonl(fp: IO[str]) -> tuple[dict, list[tuple[float, int, int]]]:
    header = json.loads(fp.readline())
    events = []
    for line in fp:
        if line.strip():
            rec = json.loads(line)
            events.append((rec["t"], rec["l"], rec["j"]))
    return header, events
