"""Core domain types: particle configurations, coagulation kernels, presets.

A configuration is a sparse multiset of integer particle sizes. The kernel
K(i, j) is the symmetric nonnegative rate at which the active minimal-size
particle merges with a size-j particle; min-form kernels K = min(phi(i),
phi(j)) with non-decreasing phi get fast paths and analytic metadata
downstream.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyStateError,
    MassOverflowError,
    MissingSizeOneError,
    ParseError,
    ValidationError,
    ZeroMassError,
)

INT64_MAX = 2**63 - 1


# ---------------------------------------------------------------------------
# particle configurations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParticleState:
    """Sparse counts by size. Entries are >= 1; zero counts are absent.

    ``total_mass`` (sum of size*count) and ``total_count`` are cached and kept
    consistent by every owning operation; both are exact integers.
    """

    counts: dict[int, int]
    total_mass: int
    total_count: int

    @staticmethod
    def from_counts(counts: Mapping[int, int]) -> "ParticleState":
        clean: dict[int, int] = {}
        mass = 0
        number = 0
        for size, count in counts.items():
            size = int(size)
            count = int(count)
            if count == 0:
                continue
            if size < 1 or count < 0:
                raise ValidationError(f"bad entry size={size} count={count}")
            clean[size] = count
            mass += size * count
            number += count
        if mass > INT64_MAX:
            raise MassOverflowError(f"total mass {mass} exceeds 64-bit budget")
        return ParticleState(clean, mass, number)

    @staticmethod
    def monodisperse(size: int, count: int) -> "ParticleState":
        return ParticleState.from_counts({size: count})

    @property
    def min_size(self) -> int:
        if self.total_count < 1:
            raise EmptyStateError("empty state has no minimal size")
        return min(self.counts)

    def merge(self, ell: int, j: int) -> "ParticleState":
        """New state after coalescing one size-``ell`` and one size-``j`` particle."""
        c = dict(self.counts)
        for s in ((ell, j) if ell != j else (ell, ell)):
            n = c.get(s, 0)
            if n <= 0:
                raise ValidationError(f"no particle of size {s} to merge")
            if n == 1:
                del c[s]
            else:
                c[s] = n - 1
        c[ell + j] = c.get(ell + j, 0) + 1
        return ParticleState(c, self.total_mass, self.total_count - 1)

    def items(self):
        return self.counts.items()

    def __len__(self) -> int:
        return self.total_count


@dataclass(frozen=True)
class SortedSizes:
    """Particle sizes in non-decreasing order; S_m is ``sizes[m-1]``."""

    sizes: tuple[int, ...]

    def __getitem__(self, m: int) -> int:  # 0-based
        return self.sizes[m]

    def __len__(self) -> int:
        return len(self.sizes)


def min_size(state: ParticleState) -> int:
    """Smallest size present with positive count."""
    return state.min_size


def sorted_sizes(state: ParticleState) -> SortedSizes:
    """Expand the multiset into the non-decreasing size vector."""
    if state.total_count < 1:
        raise EmptyStateError("empty state has no size vector")
    out: list[int] = []
    for size in sorted(state.counts):
        out.extend([size] * state.counts[size])
    return SortedSizes(tuple(out))


# ---------------------------------------------------------------------------
# phi families (picklable callables accepting scalars or numpy arrays)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _ConstPhi:
    c: float

    def __call__(self, x):
        return self.c + 0.0 * np.asarray(x, dtype=float)


@dataclass(frozen=True)
class _PowPhi:
    a: float

    def __call__(self, x):
        return np.asarray(x, dtype=float) ** self.a


@dataclass(frozen=True)
class _LogPowPhi:
    scale: float
    p: float

    def __call__(self, x):
        return self.scale * np.log(np.asarray(x, dtype=float) + 1.0) ** self.p


@dataclass(frozen=True)
class _TablePhi:
    """phi from a (size, value) table; real arguments interpolate linearly in
    ln-size and the last value extends as a constant."""

    sizes: tuple[float, ...]
    values: tuple[float, ...]

    def __call__(self, x):
        return np.interp(
            np.log(np.asarray(x, dtype=float)),
            np.log(np.asarray(self.sizes)),
            np.asarray(self.values),
        )


@dataclass(frozen=True)
class Phi:
    """Non-decreasing positive rate profile with family metadata.

    ``family`` is one of constant/power/logpow/table/custom and drives the
    closed-form series classification and blow-up weight derivations.
    """

    fn: Callable
    family: str
    params: tuple[float, ...] = ()
    name: str = ""

    def __call__(self, x):
        return self.fn(x)


def phi_constant(c: float) -> Phi:
    return Phi(_ConstPhi(float(c)), "constant", (float(c),), f"const:{c:g}")


def phi_power(a: float) -> Phi:
    return Phi(_PowPhi(float(a)), "power", (float(a),), f"pow:{a:g}")


def phi_logpow(scale: float, p: float) -> Phi:
    return Phi(_LogPowPhi(float(scale), float(p)), "logpow", (float(scale), float(p)),
               f"logpow:{scale:g},{p:g}")


def phi_table(sizes: Sequence[float], values: Sequence[float]) -> Phi:
    if len(sizes) != len(values) or len(sizes) < 1:
        raise ValidationError("table phi needs matching nonempty columns")
    pairs = sorted(zip((float(s) for s in sizes), (float(v) for v in values)))
    ss = tuple(p[0] for p in pairs)
    vv = tuple(p[1] for p in pairs)
    if any(v <= 0 for v in vv):
        raise ValidationError("table phi values must be positive")
    if any(vv[k + 1] < vv[k] for k in range(len(vv) - 1)):
        raise ValidationError("table phi must be non-decreasing in size")
    return Phi(_TablePhi(ss, vv), "table", (), "table")


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _MinFormEval:
    phi: Phi

    def __call__(self, i: int, j: int) -> float:
        # non-decreasing phi makes min(phi(i), phi(j)) = phi(min(i, j))
        return float(self.phi(min(i, j)))


@dataclass(frozen=True)
class Kernel:
    """Symmetric rate function with optional bound metadata.

    ``kappa``, ``kappa_i`` and ``delta_i`` are advisory: the hypotheses they
    encode quantify over all pairs, so validation samples them up to a cutoff.
    For min-form kernels kappa_i = delta_i = phi.
    """

    eval: Callable[[int, int], float]
    kind: str = "generic"  # generic | min_form
    phi: Phi | None = None
    kappa: float | None = None
    kappa_i: Callable[[int], float] | None = None
    delta_i: Callable[[int], float] | None = None
    preset: str | None = None

    def __post_init__(self):
        if self.kind not in ("generic", "min_form"):
            raise ValidationError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "min_form" and self.phi is None:
            raise ValidationError("min_form kernel needs phi")

    @property
    def label(self) -> str:
        return self.preset or (self.phi.name if self.phi else "generic")


def min_form_kernel(phi: Phi, preset: str | None = None) -> Kernel:
    # advisory global bound: sup phi(i)/i^2 is attained at small i for all
    # shipped families, so a sampled sup is good metadata
    probe = np.arange(1, 257)
    kappa = float(np.max(np.asarray(phi(probe), dtype=float) / probe.astype(float) ** 2))
    return Kernel(eval=_MinFormEval(phi), kind="min_form", phi=phi,
                  kappa=kappa, kappa_i=phi, delta_i=phi, preset=preset)


def kernel_from_preset(spec: str) -> Kernel:
    """Parse a CLI kernel preset.

    const:c            K = c
    min-pow:a          K = min(i, j)^a
    min-log:A0         K = (ln(i+1) ^ ln(j+1)) / (4 A0)
    min-logpow:a0,α    K = a0 (ln(i+1) ^ ln(j+1))^(1+α)
    min-table:FILE     phi from a two-column CSV size,value
    """
    try:
        name, _, arg = spec.partition(":")
        if name == "const":
            c = float(arg)
            if c <= 0:
                raise ValueError("rate must be positive")
            return min_form_kernel(phi_constant(c), preset=spec)
        if name == "min-pow":
            a = float(arg)
            if a < 0:
                raise ValueError("exponent must be nonnegative")
            return min_form_kernel(phi_power(a), preset=spec)
        if name == "min-log":
            a0 = float(arg)
            if a0 <= 0:
                raise ValueError("A0 must be positive")
            return min_form_kernel(phi_logpow(1.0 / (4.0 * a0), 1.0), preset=spec)
        if name == "min-logpow":
            a0_s, alpha_s = arg.split(",")
            a0, alpha = float(a0_s), float(alpha_s)
            if a0 <= 0 or alpha <= 0:
                raise ValueError("need a0 > 0 and alpha > 0")
            return min_form_kernel(phi_logpow(a0, 1.0 + alpha), preset=spec)
        if name == "min-table":
            sizes: list[float] = []
            values: list[float] = []
            with open(arg, newline="") as fp:
                for row in csv.reader(fp):
                    if not row or row[0].lstrip().startswith("#"):
                        continue
                    sizes.append(float(row[0]))
                    values.append(float(row[1]))
            return min_form_kernel(phi_table(sizes, values), preset=spec)
    except (ValueError, OSError, IndexError) as exc:
        raise ParseError(f"bad kernel preset {spec!r}: {exc}") from exc
    raise ParseError(f"unknown kernel preset {spec!r}")


@dataclass
class ValidationReport:
    cutoff: int
    pairs_checked: int
    violations: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"cutoff": self.cutoff, "pairs_checked": self.pairs_checked,
                "ok": self.ok, "violations": self.violations}


def validate_kernel(kernel: Kernel, size_cutoff: int, rel_tol: float = 1e-12) -> ValidationReport:
    """Check symmetry, declared bounds and the min-form structure on all pairs
    (i, j) with i, j <= size_cutoff. Findings go in the report, nothing raises."""
    if size_cutoff < 2:
        raise ValidationError("size_cutoff must be >= 2")
    report = ValidationReport(cutoff=size_cutoff, pairs_checked=0)

    def flag(kind: str, i: int, j: int, detail: str):
        if len(report.violations) < 100:
            report.violations.append({"kind": kind, "i": i, "j": j, "detail": detail})

    for i in range(1, size_cutoff + 1):
        for j in range(i, size_cutoff + 1):
            report.pairs_checked += 1
            kij = kernel.eval(i, j)
            kji = kernel.eval(j, i)
            scale = max(abs(kij), abs(kji), 1.0)
            if kij < 0:
                flag("nonnegativity", i, j, f"K={kij}")
            if abs(kij - kji) > rel_tol * scale:
                flag("symmetry", i, j, f"K(i,j)={kij} K(j,i)={kji}")
            if kernel.kappa is not None and kij > kernel.kappa * i * j * (1 + rel_tol):
                flag("kappa", i, j, f"K={kij} > kappa*i*j={kernel.kappa * i * j}")
            if kernel.kappa_i is not None and kij > float(kernel.kappa_i(i)) * (1 + rel_tol):
                flag("kappa_i", i, j, f"K={kij} > kappa_i={float(kernel.kappa_i(i))}")
            if kernel.delta_i is not None and kij < float(kernel.delta_i(i)) * (1 - rel_tol):
                flag("delta_i", i, j, f"K={kij} < delta_i={float(kernel.delta_i(i))}")
            if kernel.kind == "min_form":
                want = min(float(kernel.phi(i)), float(kernel.phi(j)))
                if abs(kij - want) > rel_tol * scale:
                    flag("min_form", i, j, f"K={kij} != min(phi)={want}")
    if kernel.kind == "min_form":
        vals = np.asarray(kernel.phi(np.arange(1, size_cutoff + 1)), dtype=float)
        if np.any(vals <= 0):
            flag("phi_positive", int(np.argmin(vals)) + 1, 0, "phi <= 0")
        worse = np.nonzero(np.diff(vals) < -rel_tol * np.maximum(vals[:-1], 1.0))[0]
        if worse.size:
            i = int(worse[0]) + 1
            flag("phi_monotone", i, i + 1, f"phi({i})={vals[i-1]} > phi({i+1})={vals[i]}")
    return report


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------

def normalize_initial(x: Sequence[float] | Mapping[int, float]) -> tuple[np.ndarray, float]:
    """Rescale nonnegative initial data to unit first moment.

    ``x`` is indexed by size (index 0 <-> size 1) or given as a size->value
    map. Returns (x0, scale) with sum_i i*x0_i = 1 within 1e-12 and
    scale = original first moment.
    """
    if isinstance(x, Mapping):
        if not x:
            raise ZeroMassError("empty initial data")
        top = max(int(s) for s in x)
        dense = np.zeros(top)
        for s, v in x.items():
            if int(s) < 1:
                raise ValidationError(f"bad size {s}")
            dense[int(s) - 1] = float(v)
        x = dense
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ZeroMassError("initial data must be a nonempty sequence")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValidationError("initial data must be finite and nonnegative")
    sizes = np.arange(1, arr.size + 1, dtype=float)
    scale = math.fsum(sizes * arr)
    if not math.isfinite(scale) or scale <= 0:
        raise ZeroMassError("initial first moment must be positive and finite")
    if arr[0] <= 0:
        raise MissingSizeOneError("admissible initial data needs x_1 > 0")
    x0 = arr / scale
    assert abs(math.fsum(sizes * x0) - 1.0) <= 1e-12
    return x0, scale
