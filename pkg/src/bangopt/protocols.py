"""Control protocols ``g(t)`` on ``[0, tau]`` and their optimizable parameters.

Every protocol is an immutable value object.  Evaluated values are clamped
to ``[-g_max, g_max]``; for bang protocols the parameter box already keeps
them inside, so clamping only matters for the CRAB shapes.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

# CRAB coefficients are boxed to [-CRAB_COEFF_BOUND, CRAB_COEFF_BOUND].
CRAB_COEFF_BOUND = 5.0


def crab_envelope_constant(tau: float) -> float:
    """``c`` in ``b(t) = c t (t - tau)``, chosen so ``|b|`` peaks at 1 for ``t = tau/2``."""
    return 4.0 / tau**2


@dataclass(frozen=True)
class Protocol:
    tau: float
    g_max: float

    piecewise = False

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError(f"duration must be non-negative, got {self.tau}")
        if not self.g_max > 0:
            raise ValueError(f"g_max must be positive, got {self.g_max}")

    def raw(self, t: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, t):
        """``g(t)`` clamped to the bound; ``t`` may be a scalar or an array."""
        arr = np.asarray(t, dtype=float)
        slack = 1e-12 * max(self.tau, 1.0)
        if np.any(arr < -slack) or np.any(arr > self.tau + slack):
            raise ValueError(f"time outside [0, {self.tau}]")
        out = np.clip(self.raw(np.clip(arr, 0.0, self.tau)), -self.g_max, self.g_max)
        return float(out) if np.ndim(t) == 0 else out

    def segments(self) -> list[tuple[float, float]]:
        raise TypeError(f"{type(self).__name__} is not piecewise constant")

    def parameters(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(x, lower, upper)`` for the optimizable parameters."""
        raise NotImplementedError

    def with_parameters(self, x) -> Protocol:
        raise NotImplementedError

    def _clamp(self, g: float) -> float:
        return float(min(max(g, -self.g_max), self.g_max))

    def _drop_empty(self, segs):
        return [(self._clamp(g), float(dt)) for g, dt in segs if dt > 0]


@dataclass(frozen=True)
class Constant(Protocol):
    g: float = 0.0

    piecewise = True

    def raw(self, t):
        return np.full_like(t, self.g, dtype=float)

    def segments(self):
        return self._drop_empty([(self.g, self.tau)])

    def parameters(self):
        return np.array([self.g]), np.array([-self.g_max]), np.array([self.g_max])

    def with_parameters(self, x):
        (g,) = np.asarray(x, dtype=float)
        return replace(self, g=float(g))


@dataclass(frozen=True)
class LinearRamp(Protocol):
    g0: float = 0.0
    g1: float = 0.0

    def raw(self, t):
        if self.tau == 0:
            return np.full_like(t, self.g0, dtype=float)
        return self.g0 + (self.g1 - self.g0) * t / self.tau

    def parameters(self):
        empty = np.zeros(0)
        return empty, empty, empty

    def with_parameters(self, x):
        if len(x):
            raise ValueError("a linear ramp has no free parameters")
        return self


def _sorted_times(times, tau):
    return tuple(float(t) for t in np.sort(np.clip(np.asarray(times, dtype=float), 0.0, tau)))


@dataclass(frozen=True)
class BangBang(Protocol):
    """``values[i]`` held on ``(switch_times[i-1], switch_times[i]]``."""

    values: tuple = ()
    switch_times: tuple = ()

    piecewise = True

    def __post_init__(self):
        super().__post_init__()
        if len(self.values) < 1 or len(self.switch_times) != len(self.values) - 1:
            raise ValueError("need l values and l - 1 switch times")
        times = np.asarray(self.switch_times, dtype=float)
        if np.any(np.diff(times) < 0) or np.any(times < 0) or np.any(times > self.tau):
            raise ValueError("switch times must be ordered within [0, tau]")

    @property
    def bangs(self) -> int:
        return len(self.values)

    def raw(self, t):
        idx = np.searchsorted(np.asarray(self.switch_times, dtype=float), t, side="left")
        return np.asarray(self.values, dtype=float)[idx]

    def segments(self):
        edges = (0.0, *self.switch_times, self.tau)
        return self._drop_empty(
            [(g, edges[i + 1] - edges[i]) for i, g in enumerate(self.values)]
        )

    def parameters(self):
        n = self.bangs
        x = np.array([*self.values, *self.switch_times], dtype=float)
        lower = np.r_[np.full(n, -self.g_max), np.zeros(n - 1)]
        upper = np.r_[np.full(n, self.g_max), np.full(n - 1, self.tau)]
        return x, lower, upper

    def with_parameters(self, x):
        x = np.asarray(x, dtype=float)
        n = self.bangs
        if x.shape != (2 * n - 1,):
            raise ValueError(f"expected {2 * n - 1} parameters, got {x.shape}")
        values = tuple(float(v) for v in np.clip(x[:n], -self.g_max, self.g_max))
        return replace(self, values=values, switch_times=_sorted_times(x[n:], self.tau))


@dataclass(frozen=True)
class DoubleBang(Protocol):
    """``gA`` for ``t <= tB``, ``gB`` afterwards."""

    gA: float = 0.0
    gB: float = 0.0
    tB: float = 0.0

    piecewise = True

    def __post_init__(self):
        super().__post_init__()
        if not 0 <= self.tB <= self.tau:
            raise ValueError(f"switch time {self.tB} outside [0, {self.tau}]")

    def raw(self, t):
        return np.where(t <= self.tB, self.gA, self.gB).astype(float)

    def segments(self):
        return self._drop_empty([(self.gA, self.tB), (self.gB, self.tau - self.tB)])

    def parameters(self):
        x = np.array([self.gA, self.gB, self.tB])
        return x, np.array([-self.g_max, -self.g_max, 0.0]), np.array([self.g_max, self.g_max, self.tau])

    def with_parameters(self, x):
        gA, gB, tB = np.asarray(x, dtype=float)
        return replace(
            self, gA=self._clamp(gA), gB=self._clamp(gB), tB=float(np.clip(tB, 0.0, self.tau))
        )


@dataclass(frozen=True)
class SaturatedDoubleBang(Protocol):
    """``+g_max`` up to ``t1``, then ``-g_max``."""

    t1: float = 0.0

    piecewise = True

    def __post_init__(self):
        super().__post_init__()
        if not 0 <= self.t1 <= self.tau:
            raise ValueError(f"switch time {self.t1} outside [0, {self.tau}]")

    def raw(self, t):
        return np.where(t <= self.t1, self.g_max, -self.g_max).astype(float)

    def segments(self):
        return self._drop_empty([(self.g_max, self.t1), (-self.g_max, self.tau - self.t1)])

    def parameters(self):
        return np.array([self.t1]), np.array([0.0]), np.array([self.tau])

    def with_parameters(self, x):
        (t1,) = np.asarray(x, dtype=float)
        return replace(self, t1=float(np.clip(t1, 0.0, self.tau)))


@dataclass(frozen=True)
class CrabFrequencies:
    """Randomized harmonics ``omega_n = 2 pi n omega0 (1 + xi_n)``."""

    omega0: float
    xi: tuple
    seed: int

    @classmethod
    def draw(cls, n: int, omega0: float, seed: int) -> CrabFrequencies:
        if n < 1:
            raise ValueError(f"need at least one frequency, got {n}")
        xi = np.random.default_rng(seed).uniform(-0.5, 0.5, size=n)
        return cls(float(omega0), tuple(float(v) for v in xi), int(seed))

    @property
    def frequencies(self) -> np.ndarray:
        n = np.arange(1, len(self.xi) + 1)
        return 2 * np.pi * n * self.omega0 * (1 + np.asarray(self.xi))


@dataclass(frozen=True)
class Crab(Protocol):
    """Linear ramp ``g0 -> g1`` times ``1 + b(t) sum_n (x_n cos w_n t + y_n sin w_n t)``."""

    g0: float = 0.0
    g1: float = 0.0
    frequencies: tuple = ()
    x: tuple = ()
    y: tuple = ()
    envelope: float | None = None
    seed: int | None = field(default=None, compare=False)

    def __post_init__(self):
        super().__post_init__()
        if not self.tau > 0:
            raise ValueError("CRAB needs a positive duration")
        n = len(self.frequencies)
        if n < 1 or len(self.x) != n or len(self.y) != n:
            raise ValueError("frequencies, x and y must have the same nonzero length")
        if self.envelope is None:
            object.__setattr__(self, "envelope", crab_envelope_constant(self.tau))

    @property
    def n_freq(self) -> int:
        return len(self.frequencies)

    def _endpoints(self):
        return self.g0, self.g1

    def raw(self, t):
        t = np.asarray(t, dtype=float)
        start, end = self._endpoints()
        ramp = start + (end - start) * t / self.tau
        b = self.envelope * t * (t - self.tau)
        wt = np.multiply.outer(t, np.asarray(self.frequencies))
        series = np.cos(wt) @ np.asarray(self.x) + np.sin(wt) @ np.asarray(self.y)
        return ramp * (1 + b * series)

    def parameters(self):
        n = self.n_freq
        x = np.array([*self.x, *self.y], dtype=float)
        return x, np.full(2 * n, -CRAB_COEFF_BOUND), np.full(2 * n, CRAB_COEFF_BOUND)

    def with_parameters(self, x):
        x = np.asarray(x, dtype=float)
        n = self.n_freq
        if x.shape != (2 * n,):
            raise ValueError(f"expected {2 * n} parameters, got {x.shape}")
        return replace(self, x=tuple(map(float, x[:n])), y=tuple(map(float, x[n:])))


@dataclass(frozen=True)
class FreeEndpointCrab(Crab):
    """CRAB whose ramp runs between optimizable endpoints ``g_start -> g_end``."""

    g_start: float = 0.0
    g_end: float = 0.0

    def _endpoints(self):
        return self.g_start, self.g_end

    def parameters(self):
        x, lower, upper = super().parameters()
        return (
            np.r_[x, self.g_start, self.g_end],
            np.r_[lower, -self.g_max, -self.g_max],
            np.r_[upper, self.g_max, self.g_max],
        )

    def with_parameters(self, x):
        x = np.asarray(x, dtype=float)
        n = self.n_freq
        if x.shape != (2 * n + 2,):
            raise ValueError(f"expected {2 * n + 2} parameters, got {x.shape}")
        crab = super().with_parameters(x[: 2 * n])
        return replace(crab, g_start=self._clamp(x[-2]), g_end=self._clamp(x[-1]))


def make_crab(g0, g1, tau, n_freq, seed, g_max, free_endpoints=False) -> Crab:
    """Fresh CRAB protocol (zero coefficients) with frequencies drawn from ``seed``."""
    if int(n_freq) != n_freq or n_freq < 1:
        raise ValueError(f"need at least one CRAB frequency, got {n_freq}")
    freqs = CrabFrequencies.draw(int(n_freq), 1.0 / tau, seed)
    zeros = (0.0,) * int(n_freq)
    common = dict(
        tau=float(tau), g_max=float(g_max), g0=float(g0), g1=float(g1),
        frequencies=tuple(map(float, freqs.frequencies)), x=zeros, y=zeros, seed=int(seed),
    )
    if free_endpoints:
        return FreeEndpointCrab(**common, g_start=float(g0), g_end=float(g1))
    return Crab(**common)


# module-level operation names


def evaluate(p: Protocol, t):
    return p.evaluate(t)


def bang_segments(p: Protocol) -> list[tuple[float, float]]:
    return p.segments()


def parameter_vector(p: Protocol) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    x, lower, upper = p.parameters()
    return x, (lower, upper)


def from_parameter_vector(p: Protocol, x) -> Protocol:
    return p.with_parameters(x)


# protocol families

_FAMILY_RE = re.compile(r"^([a-z-]+)(?:[(:](\d+)\)?)?$")
FAMILY_NAMES = ("constant", "linear", "double-bang", "n-bang", "saturated-db", "crab", "free-endpoint-crab")


@dataclass(frozen=True)
class ProtocolFamily:
    """A protocol shape plus its size hyperparameter (bangs or CRAB frequencies)."""

    kind: str
    size: int = 0

    def __post_init__(self):
        if self.kind not in FAMILY_NAMES:
            raise ValueError(f"unknown protocol family {self.kind!r}; valid: {', '.join(FAMILY_NAMES)}")
        if self.kind in ("n-bang", "crab", "free-endpoint-crab") and self.size < 1:
            raise ValueError(f"family {self.kind!r} needs a positive size, e.g. {self.kind}(4)")

    @classmethod
    def parse(cls, spec) -> ProtocolFamily:
        if isinstance(spec, ProtocolFamily):
            return spec
        match = _FAMILY_RE.match(str(spec).strip().lower())
        if not match:
            raise ValueError(f"unknown protocol family {spec!r}; valid: {', '.join(FAMILY_NAMES)}")
        kind, size = match.group(1), int(match.group(2) or 0)
        if kind == "triple-bang":
            kind, size = "n-bang", 3
        return cls(kind, size)

    def __str__(self):
        return f"{self.kind}({self.size})" if self.size else self.kind

    @property
    def is_crab(self) -> bool:
        return self.kind in ("crab", "free-endpoint-crab")

    def template(self, problem, tau: float, seed: int = 0) -> Protocol:
        """Protocol of this family for ``problem`` at duration ``tau``.

        Bang values start at ``g1`` and switches are spread uniformly; CRAB
        frequencies are drawn from ``seed``.
        """
        g0, g1, g_max = problem.g0, problem.g1, problem.g_max
        tau = float(tau)
        if self.kind == "constant":
            return Constant(tau, g_max, g=g1)
        if self.kind == "linear":
            return LinearRamp(tau, g_max, g0=g0, g1=g1)
        if self.kind == "double-bang":
            return DoubleBang(tau, g_max, gA=g1, gB=g1, tB=tau / 2)
        if self.kind == "n-bang":
            n = self.size
            times = tuple(float(t) for t in np.linspace(0, tau, n + 1)[1:-1])
            return BangBang(tau, g_max, values=(g1,) * n, switch_times=times)
        if self.kind == "saturated-db":
            return SaturatedDoubleBang(tau, g_max, t1=tau / 2)
        return make_crab(g0, g1, tau, self.size, seed, g_max, free_endpoints=self.kind == "free-endpoint-crab")
