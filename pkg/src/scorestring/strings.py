"""Discrete strings: initialization, move + reparametrize steps, MEP diagnostics."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np
from scipy.interpolate import make_interp_spline

from .errors import ConfigurationError, DegenerateTangentError, DivergenceError
from .fields import FieldOracle
from .integrators import (
    DEFAULT_CONTRACT,
    GammaSchedule,
    StepperConfig,
    contract_time_grid,
    flow,
    log_likelihood,
    ode_step,
    step_gamma,
)

log = logging.getLogger(__name__)

REGIMES = ("transport", "mep", "principal_curve")
SPLINES = ("linear", "cubic")

DEFAULT_IMAGES = 71
DEFAULT_ETA = 0.2
# spacing tolerances used inside the dynamics; the public reparametrize()
# default is tighter so that it is idempotent to 1e-10.  Cubic passes cost
# far more than linear ones and only need to hold the 1e-4 spacing bound.
STEP_TOL = 1e-8
CUBIC_STEP_TOL = 5e-5


def step_tol(spline: str) -> float:
    return CUBIC_STEP_TOL if spline == "cubic" else STEP_TOL


@dataclass(frozen=True)
class RegimeConfig:
    regime: str = "transport"
    gamma: GammaSchedule = field(default_factory=GammaSchedule)
    temperature: float = 0.0
    ema_rate: float = DEFAULT_ETA
    spline: str = "linear"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if self.spline not in SPLINES:
            raise ConfigurationError(f"unknown spline {self.spline!r}")
        if not (0.0 <= self.temperature <= 1.0):
            raise ConfigurationError("temperature must lie in [0, 1]")
        if not (0.0 < self.ema_rate <= 1.0):
            raise ConfigurationError("ema_rate must lie in (0, 1]")
        if self.regime == "transport" and not self.gamma.is_zero:
            raise ConfigurationError("transport regime requires gamma == 0")
        if self.regime == "mep" and self.temperature != 0.0:
            raise ConfigurationError("mep regime requires temperature == 0")
        if self.regime == "principal_curve" and self.temperature <= 0.0:
            raise ConfigurationError("principal_curve regime requires temperature > 0")


@dataclass(frozen=True)
class StringState:
    images: np.ndarray
    t: float
    regime: RegimeConfig = field(default_factory=RegimeConfig)

    def __post_init__(self):
        imgs = np.array(self.images, dtype=float)
        if imgs.ndim != 2 or imgs.shape[0] < 3:
            raise ConfigurationError("a string needs at least 3 images (N >= 2)")
        imgs.setflags(write=False)
        object.__setattr__(self, "images", imgs)

    @property
    def n_intervals(self) -> int:
        return self.images.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def segment_lengths(self) -> np.ndarray:
        return segment_lengths(self.images)

    def arc_length(self) -> float:
        return float(self.segment_lengths().sum())

    def evolve(self, images, t) -> "StringState":
        return replace(self, images=images, t=t)


# ---------------------------------------------------------------------------
# reparametrization on R^d


def segment_lengths(images) -> np.ndarray:
    d = images[1:] - images[:-1]
    return np.sqrt(np.einsum("ij,ij->i", d, d))


def spacing_ratio(images) -> float:
    """max/min consecutive segment length (inf when a segment vanishes)."""
    seg = segment_lengths(images)
    if seg.min() == 0.0:
        return math.inf
    return float(seg.max() / seg.min())


def _resample_linear(pts, alpha, u):
    if pts.shape[1] <= 8:
        # np.interp is much faster than fancy indexing for few coordinates
        return np.stack([np.interp(u, alpha, col) for col in pts.T], axis=1)
    p = np.searchsorted(alpha, u, side="right") - 1
    p = np.minimum(np.maximum(p, 0), len(alpha) - 2)
    den = alpha[p + 1] - alpha[p]
    pos = den > 0
    w = np.zeros_like(u)
    w[pos] = (u[pos] - alpha[p[pos]]) / den[pos]
    return pts[p] + w[:, None] * (pts[p + 1] - pts[p])


def _resample_cubic(pts, alpha, u):
    keep = np.concatenate([[True], np.diff(alpha) > 0])
    a, p = alpha[keep], pts[keep]
    if len(a) < 3:
        return _resample_linear(pts, alpha, u)
    return make_interp_spline(a, p, k=3, bc_type="natural", axis=0)(u)


def reparametrize_pass(images, spline: str = "linear", n_out: Optional[int] = None) -> np.ndarray:
    """One pass: cumulative chord lengths, normalized abscissae, spline, evaluate at j/K.

    Endpoints are copied from the input, bit for bit.
    """
    images = np.asarray(images, dtype=float)
    n_out = images.shape[0] - 1 if n_out is None else n_out
    cum = np.empty(images.shape[0])
    cum[0] = 0.0
    np.cumsum(segment_lengths(images), out=cum[1:])
    if cum[-1] == 0.0:
        return np.repeat(images[:1], n_out + 1, axis=0)
    alpha = cum / cum[-1]
    u = np.arange(n_out + 1) / n_out
    if spline == "linear":
        out = _resample_linear(images, alpha, u)
    elif spline == "cubic":
        out = _resample_cubic(images, alpha, u)
    else:
        raise ConfigurationError(f"unknown spline {spline!r}")
    out[0] = images[0]
    out[-1] = images[-1]
    return out


def reparametrize(images, spline: str = "linear", tol: float = 1e-10,
                  max_passes: int = 2000) -> np.ndarray:
    """Redistribute images to equal arc-length (chord) spacing.

    A single pass places images at equal arc length along the interpolant,
    which leaves chords slightly unequal wherever the string bends.  Passes
    are repeated until max/min segment length is within ``1 + tol``, so a
    second call on the output returns it unchanged.
    """
    cur = np.array(images, dtype=float)
    if cur.shape[0] < 3:
        return cur
    seg = segment_lengths(cur)
    if seg.sum() == 0.0:
        return cur
    for _ in range(max_passes):
        if seg.min() > 0 and seg.max() <= (1.0 + tol) * seg.min():
            return cur
        cur = reparametrize_pass(cur, spline)
        seg = segment_lengths(cur)
    log.debug("reparametrize stopped after %d passes (ratio %.3g)", max_passes,
              seg.max() / max(seg.min(), 1e-300))
    return cur


# ---------------------------------------------------------------------------
# initialization


def geodesic_images(z0, z1, N: int) -> np.ndarray:
    """z0 cos(pi i / 2N) + z1 sin(pi i / 2N) for i = 0..N."""
    z0 = np.asarray(z0, dtype=float)
    z1 = np.asarray(z1, dtype=float)
    ang = 0.5 * math.pi * np.arange(N + 1) / N
    out = np.cos(ang)[:, None] * z0 + np.sin(ang)[:, None] * z1
    out[0], out[-1] = z0, z1
    return out


def init_string_geodesic(z0, z1, N: int = DEFAULT_IMAGES, t: float = 0.0,
                         regime: Optional[RegimeConfig] = None) -> StringState:
    z0 = np.asarray(z0, dtype=float)
    z1 = np.asarray(z1, dtype=float)
    if z0.shape != z1.shape or z0.ndim != 1:
        raise ConfigurationError("endpoints must be vectors of equal dimension")
    if N < 2:
        raise ConfigurationError("N must be at least 2")
    regime = regime or RegimeConfig()
    if np.array_equal(z0, z1):
        warnings.warn("identical endpoints: returning a constant string", RuntimeWarning, stacklevel=2)
        return StringState(np.repeat(z0[None], N + 1, axis=0), t, regime)
    images = reparametrize(geodesic_images(z0, z1, N), regime.spline)
    return StringState(images, t, regime)


def encode_endpoints(oracle: FieldOracle, xA, xB,
                     cfg: StepperConfig = StepperConfig("heun", 400, 1.0, 0.0)):
    """Backward probability-flow images of two data points."""
    if cfg.t_start <= cfg.t_end:
        raise ConfigurationError("endpoint encoding integrates backward (t_start > t_end)")
    pts = np.stack([np.asarray(xA, dtype=float), np.asarray(xB, dtype=float)])
    z = flow(oracle, pts, cfg.grid(), cfg.method, keep_path=False).final
    return z[0], z[1]


# ---------------------------------------------------------------------------
# dynamics


def check_contract(gamma: float, dt: float, contract: float = DEFAULT_CONTRACT):
    if gamma > 0.0 and dt > contract / (gamma * gamma) * (1.0 + 1e-9):
        raise ConfigurationError(
            f"timestep {dt:.3g} violates dt <= {contract}/gamma^2 = {contract / gamma**2:.3g}"
        )


def mep_velocity(oracle: FieldOracle, gamma: GammaSchedule) -> Callable:
    """v_t = b_t + gamma_t^2 s_t."""

    def v(t, x):
        g = gamma(t)
        if g == 0.0:
            return oracle.velocity(t, x)
        b, s = oracle.both(t, x)
        return b + g * g * s

    return v


def _check_images(images, t):
    bad = ~np.all(np.isfinite(images), axis=1)
    if bad.any():
        idx = int(np.argmax(bad))
        raise DivergenceError(f"non-finite image {idx} at t={t:.6g}", t=t, index=idx)


def string_step(state: StringState, oracle: FieldOracle, dt: float, method: str = "euler",
                contract: float = DEFAULT_CONTRACT) -> StringState:
    """Move endpoints by b_t and interior images by the regime velocity, then reparametrize."""
    reg = state.regime
    t = state.t
    if reg.regime == "principal_curve":
        raise ConfigurationError(
            "principal_curve strings are stepped by finite_temperature.finite_temperature_step"
        )
    if dt <= 0 or t + dt > 1.0 + 1e-12:
        raise ConfigurationError(f"bad timestep {dt} at t={t}")
    check_contract(step_gamma(reg.gamma, t, dt, method), dt, contract)
    images = state.images
    moved = np.empty_like(images)
    moved[[0, -1]] = ode_step(oracle.velocity, t, images[[0, -1]], dt, method)
    if reg.regime == "transport":
        moved[1:-1] = ode_step(oracle.velocity, t, images[1:-1], dt, method)
    else:
        moved[1:-1] = ode_step(mep_velocity(oracle, reg.gamma), t, images[1:-1], dt, method)
    _check_images(moved, t + dt)
    return state.evolve(reparametrize(moved, reg.spline, step_tol(reg.spline)), t + dt)


@dataclass
class PathDiagnostics:
    """Per-step record of a string run.

    ``logp`` rows hold log rho_t of every image at the recorded step (NaN when
    the oracle has no log-density); ``final_logp`` is log rho_1 of the final
    images.
    """

    steps: List[int] = field(default_factory=list)
    times: List[float] = field(default_factory=list)
    arc_length: List[float] = field(default_factory=list)
    max_displacement: List[float] = field(default_factory=list)
    logp: List[np.ndarray] = field(default_factory=list)
    final_logp: Optional[np.ndarray] = None
    snapshots: List[tuple] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def record(self, step, state: StringState, displacement, oracle: FieldOracle):
        self.steps.append(step)
        self.times.append(float(state.t))
        self.arc_length.append(state.arc_length())
        self.max_displacement.append(float(displacement))
        if oracle.log_density is not None:
            self.logp.append(np.asarray(oracle.log_density(state.t, state.images), dtype=float))
        else:
            self.logp.append(np.full(state.images.shape[0], np.nan))

    def peak_interior_logp(self) -> float:
        return float(np.max(self.final_logp[1:-1]))


def final_log_likelihood(oracle: FieldOracle, images, n_steps: int = 1000) -> np.ndarray:
    if oracle.log_density is not None:
        return np.asarray(oracle.log_density(1.0, images), dtype=float)
    mode = "exact" if oracle.divergence_of_velocity is not None else "hutchinson"
    return log_likelihood(oracle, images, StepperConfig("heun", n_steps), mode, n_probes=16).logp


def string_time_grid(state: StringState, cfg: StepperConfig, contract: float) -> np.ndarray:
    t_end = cfg.t_end if cfg.t_end > state.t else 1.0
    return contract_time_grid(state.t, t_end, state.regime.gamma, cfg.n_steps, contract, cfg.method)


def run_string(state: StringState, oracle: FieldOracle,
               cfg: StepperConfig = StepperConfig("euler", 200),
               contract: float = DEFAULT_CONTRACT, times=None, record_every: int = 1,
               snapshot_every: Optional[int] = None, seed: Optional[int] = None,
               on_step: Optional[Callable] = None):
    """Evolve a string to t=1; returns (final state, PathDiagnostics).

    ``cfg.n_steps`` is the number of steps where gamma vanishes; where gamma is
    active the grid is refined to honour dt <= contract / gamma^2.  Pass an
    explicit ``times`` grid to override.  ``on_step(step, state)`` is called
    after every step.
    """
    if state.regime.regime == "principal_curve":
        from .finite_temperature import run_finite_temperature_string

        final, _, diag = run_finite_temperature_string(
            state, oracle, cfg, contract=contract, times=times, record_every=record_every,
            snapshot_every=snapshot_every, seed=cfg.seed if seed is None else seed,
            on_step=on_step,
        )
        return final, diag
    if state.t >= 1.0:
        raise ConfigurationError("string is already at t=1")
    if times is None:
        times = string_time_grid(state, cfg, contract)
    diag = PathDiagnostics()
    diag.record(0, state, 0.0, oracle)
    if snapshot_every:
        diag.snapshots.append((0, state.t, state.images.copy()))
    n = len(times) - 1
    for k, (t, tn) in enumerate(zip(times[:-1], times[1:]), start=1):
        state = replace(state, t=float(t))
        new = string_step(state, oracle, tn - t, cfg.method, contract)
        new = replace(new, t=float(tn))
        disp = np.max(np.linalg.norm(new.images - state.images, axis=1))
        state = new
        if k % record_every == 0 or k == n:
            diag.record(k, state, disp, oracle)
        if snapshot_every and (k % snapshot_every == 0 or k == n):
            diag.snapshots.append((k, state.t, state.images.copy()))
        if on_step is not None:
            on_step(k, state)
    diag.final_logp = final_log_likelihood(oracle, state.images)
    return state, diag


def mep_residual(string: StringState, oracle: FieldOracle, t: Optional[float] = None) -> np.ndarray:
    """Norm of the score component perpendicular to the discrete tangent.

    Returns one value per interior image (indices 1..N-1); the tangent at
    image i is the central difference of its neighbours.
    """
    t = string.t if t is None else t
    imgs = string.images
    tan = imgs[2:] - imgs[:-2]
    norm = np.linalg.norm(tan, axis=1)
    if np.any(norm == 0.0):
        raise DegenerateTangentError(f"coincident neighbours around image {int(np.argmin(norm)) + 1}")
    tan = tan / norm[:, None]
    s = np.atleast_2d(oracle.score(t, imgs[1:-1]))
    perp = s - np.sum(s * tan, axis=1)[:, None] * tan
    return np.linalg.norm(perp, axis=1)
