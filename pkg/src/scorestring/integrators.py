"""ODE/SDE steppers and probability-flow log-likelihoods."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import CapabilityError, ConfigurationError, DivergenceError, DomainError
from .fields import FieldOracle

ODE_METHODS = ("euler", "heun")
SDE_METHODS = ("euler_maruyama",)
QUENCH_MODES = ("hard_window", "linear_ramp")

DEFAULT_CONTRACT = 0.1


@dataclass(frozen=True)
class StepperConfig:
    method: str = "heun"
    n_steps: int = 400
    t_start: float = 0.0
    t_end: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in ODE_METHODS + SDE_METHODS:
            raise ConfigurationError(f"unknown stepping method {self.method!r}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be a positive integer, got {self.n_steps}")
        for t in (self.t_start, self.t_end):
            if not (0.0 <= t <= 1.0):
                raise ConfigurationError(f"time {t} outside [0, 1]")
        if self.t_start == self.t_end:
            raise ConfigurationError("t_start and t_end must differ")

    def grid(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_steps + 1)


@dataclass(frozen=True)
class GammaSchedule:
    """Time profile of the score weight gamma_t.

    Inside ``window`` gamma equals ``base_gamma``.  Outside it is zero
    (``hard_window``) or decays linearly to zero over ``ramp`` time units
    (``linear_ramp``).
    """

    base_gamma: float = 0.0
    window: tuple = (0.0, 1.0)
    quench: str = "hard_window"
    ramp: float = 0.05

    def __post_init__(self):
        lo, hi = self.window
        if self.base_gamma < 0 or not np.isfinite(self.base_gamma):
            raise ConfigurationError("base_gamma must be finite and >= 0")
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigurationError(f"gamma window {self.window} must satisfy 0 <= lo <= hi <= 1")
        if self.quench not in QUENCH_MODES:
            raise ConfigurationError(f"unknown quench mode {self.quench!r}")
        if self.quench == "linear_ramp" and self.ramp <= 0:
            raise ConfigurationError("linear_ramp needs a positive ramp width")
        object.__setattr__(self, "window", (float(lo), float(hi)))

    @classmethod
    def constant(cls, gamma: float) -> "GammaSchedule":
        return cls(gamma, (0.0, 1.0))

    def __call__(self, t: float) -> float:
        lo, hi = self.window
        if lo <= t <= hi:
            return self.base_gamma
        if self.quench == "hard_window":
            return 0.0
        gap = lo - t if t < lo else t - hi
        return self.base_gamma * max(0.0, 1.0 - gap / self.ramp)

    def max_on(self, t0: float, t1: float) -> float:
        """Upper bound of gamma on [t0, t1]."""
        lo, hi = self.window
        if self.base_gamma == 0.0:
            return 0.0
        if t1 >= lo and t0 <= hi:
            return self.base_gamma
        return max(self(t0), self(t1))

    @property
    def is_zero(self) -> bool:
        return self.base_gamma == 0.0


def step_gamma(gamma: GammaSchedule, t: float, dt: float, method: str) -> float:
    """Largest gamma a single step evaluates: gamma(t), plus gamma(t + dt) for Heun."""
    g = gamma(t)
    if method == "heun":
        g = max(g, gamma(t + dt))
    return g


def contract_time_grid(t0: float, t1: float, gamma: GammaSchedule, base_steps: int,
                       contract: float = DEFAULT_CONTRACT, method: str = "euler") -> np.ndarray:
    """Forward time grid honouring dt <= contract / gamma^2 at every evaluated time.

    Pieces of [t0, t1] where gamma vanishes use the base step
    (t1 - t0) / base_steps; pieces where gamma is active are refined.  A
    piece that only touches an active region at its ends gets one short
    step there (at the start always, at the end for Heun, whose second
    stage evaluates gamma(t + dt)).
    """
    if not t0 < t1:
        raise ConfigurationError("time grid needs t0 < t1")
    base_dt = (t1 - t0) / base_steps
    lo, hi = gamma.window
    edges = [t0]
    cuts = [lo, hi]
    if gamma.quench == "linear_ramp":
        cuts += [lo - gamma.ramp, hi + gamma.ramp]
    for c in sorted(set(cuts)):
        if t0 < c < t1:
            edges.append(c)
    edges.append(t1)

    def allowed(g):
        return base_dt if g == 0.0 else min(base_dt, contract / (g * g))

    pieces = []
    for a, b in zip(edges[:-1], edges[1:]):
        mid = gamma(0.5 * (a + b))
        if mid > 0.0:
            dt = allowed(gamma.max_on(a, b))
            n = max(1, int(math.ceil((b - a) / dt - 1e-9)))
            pieces.append(np.linspace(a, b, n + 1)[:-1])
            continue
        # gamma vanishes inside the piece; only its ends may be active
        head = allowed(gamma(a)) if gamma(a) > 0.0 else 0.0
        tail = allowed(gamma(b)) if (method == "heun" and gamma(b) > 0.0) else 0.0
        if head + tail >= b - a:
            dt = min(x for x in (head, tail, base_dt) if x > 0.0)
            n = max(1, int(math.ceil((b - a) / dt - 1e-9)))
            pieces.append(np.linspace(a, b, n + 1)[:-1])
            continue
        lo_in, hi_in = a + head, b - tail
        n = max(1, int(math.ceil((hi_in - lo_in) / base_dt - 1e-9)))
        pts = np.concatenate([[a], np.linspace(lo_in, hi_in, n + 1)])
        pieces.append(pts if tail else pts[:-1])
    pieces.append(np.array([t1]))
    grid = np.concatenate(pieces)
    return grid[np.concatenate([[True], np.diff(grid) > 0])]


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __iter__(self) -> Iterator:
        return iter(zip(self.times, self.states))

    def __len__(self):
        return len(self.times)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def ode_step(velocity: Callable, t: float, x: np.ndarray, dt: float, method: str) -> np.ndarray:
    """One explicit step of x' = velocity(t, x)."""
    k1 = velocity(t, x)
    if method == "euler":
        return x + dt * k1
    if method == "heun":
        k2 = velocity(t + dt, x + dt * k1)
        return x + 0.5 * dt * (k1 + k2)
    raise ConfigurationError(f"unknown ODE method {method!r}")


def _require_finite(x, t, last, index=None):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite state at t={t:.6g}", t=t, last_state=last, index=index)


def flow(oracle: FieldOracle, x0, times: Sequence[float], method: str = "heun",
         keep_path: bool = True) -> Trajectory:
    """Integrate the probability-flow ODE over an explicit time grid."""
    x = np.array(x0, dtype=float)
    times = np.asarray(times, dtype=float)
    states = [x.copy()] if keep_path else None
    for t, tn in zip(times[:-1], times[1:]):
        xn = ode_step(oracle.velocity, t, x, tn - t, method)
        _require_finite(xn, tn, x)
        x = xn
        if keep_path:
            states.append(x.copy())
    if not keep_path:
        return Trajectory(times[[0, -1]], np.stack([np.asarray(x0, dtype=float), x]))
    return Trajectory(times, np.stack(states))


def integrate_ode(oracle: FieldOracle, x0, cfg: StepperConfig, keep_path: bool = True) -> Trajectory:
    if cfg.method not in ODE_METHODS:
        raise ConfigurationError(f"{cfg.method!r} is not an ODE method")
    return flow(oracle, x0, cfg.grid(), cfg.method, keep_path)


def sde_step(oracle: FieldOracle, t: float, x: np.ndarray, dt: float, gamma: float,
             T: float, noise: Optional[np.ndarray]) -> np.ndarray:
    """Euler-Maruyama step of dx = b dt + gamma^2 s dt + sqrt(2T) gamma dW.

    ``noise`` holds standard normal draws shaped like ``x``.
    """
    if gamma == 0.0:
        return x + dt * oracle.velocity(t, x)
    b, s = oracle.both(t, x)
    out = x + dt * (b + gamma * gamma * s)
    if T > 0.0:
        out = out + math.sqrt(2.0 * T * dt) * gamma * noise
    return out


def trajectory_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Per-trajectory generator derived from (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def integrate_sde(oracle: FieldOracle, x0, gamma: GammaSchedule, T: float, cfg: StepperConfig,
                  keep_path: bool = True, rng: Optional[np.random.Generator] = None) -> Trajectory:
    """Euler-Maruyama integration forward in time.

    A batch ``x0`` of shape (n, d) draws all its noise from one stream; pass
    ``rng`` to override the stream derived from ``cfg.seed``.
    """
    if not cfg.t_start < cfg.t_end:
        raise ConfigurationError("integrate_sde runs forward in time only")
    if not (0.0 <= T <= 1.0):
        raise DomainError(f"temperature must lie in [0, 1], got {T}")
    if rng is None:
        rng = trajectory_rng(cfg.seed)
    x = np.array(x0, dtype=float)
    times = cfg.grid()
    states = [x.copy()] if keep_path else None
    for t, tn in zip(times[:-1], times[1:]):
        g = gamma(t)
        noise = rng.standard_normal(x.shape) if (g > 0.0 and T > 0.0) else None
        xn = sde_step(oracle, t, x, tn - t, g, T, noise)
        _require_finite(xn, tn, x)
        x = xn
        if keep_path:
            states.append(x.copy())
    if not keep_path:
        return Trajectory(times[[0, -1]], np.stack([np.asarray(x0, dtype=float), x]))
    return Trajectory(times, np.stack(states))


# ---------------------------------------------------------------------------
# likelihood


def standard_normal_logpdf(x):
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    return -0.5 * np.sum(x * x, axis=-1) - 0.5 * d * math.log(2.0 * math.pi)


def hutchinson_divergence(oracle: FieldOracle, t: float, x, n_probes: int,
                          rng: np.random.Generator, fd_step: float = 1e-5):
    """Rademacher estimate of div b_t(x); returns (mean, standard error).

    Uses the oracle's exact Jacobian-vector product when it has one and a
    central difference of the velocity otherwise.
    """
    x = np.asarray(x, dtype=float)
    eps = rng.choice([-1.0, 1.0], size=(n_probes,) + x.shape)
    if oracle.velocity_jvp is not None:
        jv = np.stack([oracle.velocity_jvp(t, x, e) for e in eps])
    else:
        jv = np.stack([
            (oracle.velocity(t, x + fd_step * e) - oracle.velocity(t, x - fd_step * e)) / (2 * fd_step)
            for e in eps
        ])
    est = np.sum(eps * jv, axis=-1)
    se = est.std(axis=0, ddof=1) / math.sqrt(n_probes) if n_probes > 1 else np.full(est.shape[1:], np.inf)
    return est.mean(axis=0), se


@dataclass
class LikelihoodResult:
    logp: np.ndarray
    x0: np.ndarray
    delta_logp: np.ndarray  # log rho_1(x1) - log rho_0(x0)


def log_likelihood(oracle: FieldOracle, x1, cfg: StepperConfig = StepperConfig(n_steps=1000),
                   divergence_mode: str = "exact", n_probes: int = 1) -> LikelihoodResult:
    """log rho_1(x1) from the probability flow, integrated from t=1 back to 0.

    The state is augmented with the running divergence integral and both are
    stepped together with ``cfg.method``; only ``cfg.n_steps`` and
    ``cfg.method`` are read, the direction is always 1 -> 0.
    """
    if divergence_mode == "exact":
        if oracle.divergence_of_velocity is None:
            raise CapabilityError("exact divergence requested but the oracle has none")
        div = oracle.divergence_of_velocity
    elif divergence_mode == "hutchinson":
        rng = trajectory_rng(cfg.seed)

        def div(t, x):
            return hutchinson_divergence(oracle, t, x, n_probes, rng)[0]
    else:
        raise ConfigurationError(f"unknown divergence mode {divergence_mode!r}")
    if cfg.method not in ODE_METHODS:
        raise ConfigurationError(f"{cfg.method!r} is not an ODE method")

    x = np.array(x1, dtype=float)
    acc = np.zeros(x.shape[:-1])
    times = np.linspace(1.0, 0.0, cfg.n_steps + 1)
    for t, tn in zip(times[:-1], times[1:]):
        dt = tn - t
        k1, d1 = oracle.velocity(t, x), div(t, x)
        if cfg.method == "euler":
            xn = x + dt * k1
            accn = acc + dt * d1
        else:
            xp = x + dt * k1
            k2, d2 = oracle.velocity(tn, xp), div(tn, xp)
            xn = x + 0.5 * dt * (k1 + k2)
            accn = acc + 0.5 * dt * (d1 + d2)
        _require_finite(xn, tn, x)
        x, acc = xn, accn
    # acc = int_1^0 div dt = -int_0^1 div dt
    logp = standard_normal_logpdf(x) + acc
    return LikelihoodResult(logp=logp, x0=x, delta_logp=acc)
