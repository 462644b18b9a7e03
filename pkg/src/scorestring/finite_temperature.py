"""Finite-temperature strings: Voronoi-confined walkers dragging images by EMA.

Each image i has one walker that runs the tempered SDE

    dx = b_t(x) dt + gamma_t^2 s_t(x) dt + sqrt(2T) gamma_t dW

restricted to the Voronoi cell of image i.  Interior images follow the
walkers through an exponential moving average, then the string is
reparametrized.  Endpoints always move by pure transport.

Conventions fixed here:

* Voronoi ownership is ``argmin`` over image distances, so ties go to the
  lower index.
* During reparametrization each walker is shifted by the same displacement as
  its image, which keeps walker and image together when the string is
  relabelled.  With eta = 1 and T -> 0 this makes the scheme coincide with an
  Euler step of the mep regime.
* A walker that ends up outside its own cell because the string moved under
  it is reset onto its image before the next move (counted in
  ``reset_counts``).
* Where gamma_t = 0 the walker SDE is the transport ODE; images and walkers
  are then moved by transport directly and the EMA is skipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .fields import FieldOracle, GaussianMixture, sample_tempered
from .integrators import DEFAULT_CONTRACT, StepperConfig, ode_step, trajectory_rng
from .strings import (
    PathDiagnostics,
    StringState,
    check_contract,
    final_log_likelihood,
    reparametrize,
    step_tol,
    string_time_grid,
)

OCCUPANCY_MIN = 10


def voronoi_owner(points, images) -> np.ndarray:
    """Index of the nearest image for every point (ties -> lower index)."""
    pts = np.atleast_2d(points)
    d2 = np.sum((pts[:, None, :] - images[None, :, :]) ** 2, axis=-1)
    return np.argmin(d2, axis=1)


@dataclass
class WalkerEnsemble:
    walkers: np.ndarray
    rng_streams: List[np.random.Generator]
    reject_counts: np.ndarray
    attempt_counts: np.ndarray
    reset_counts: np.ndarray

    @classmethod
    def at_images(cls, state: StringState, seed: int = 0) -> "WalkerEnsemble":
        n = state.images.shape[0]
        return cls(
            walkers=state.images.copy(),
            rng_streams=[trajectory_rng(seed, i) for i in range(n)],
            reject_counts=np.zeros(n, dtype=np.int64),
            attempt_counts=np.zeros(n, dtype=np.int64),
            reset_counts=np.zeros(n, dtype=np.int64),
        )

    def rejection_rates(self) -> np.ndarray:
        att = np.maximum(self.attempt_counts, 1)
        return self.reject_counts / att

    def copy(self) -> "WalkerEnsemble":
        # generators are shared on purpose: a copy continues the same streams
        return WalkerEnsemble(self.walkers.copy(), self.rng_streams, self.reject_counts.copy(),
                              self.attempt_counts.copy(), self.reset_counts.copy())


def _confine(ens: WalkerEnsemble, images) -> WalkerEnsemble:
    """Clamp endpoint walkers and reset strays onto their images."""
    ens = ens.copy()
    ens.walkers[0] = images[0]
    ens.walkers[-1] = images[-1]
    owner = voronoi_owner(ens.walkers, images)
    stray = np.flatnonzero(owner != np.arange(len(images)))
    if stray.size:
        ens.walkers[stray] = images[stray]
        ens.reset_counts[stray] += 1
    return ens


def walker_step(ensemble: WalkerEnsemble, string: StringState, oracle: FieldOracle, dt: float,
                contract: float = DEFAULT_CONTRACT) -> WalkerEnsemble:
    """One Euler-Maruyama move of every interior walker with Voronoi rejection.

    The Voronoi test uses the images of ``string`` as they are at the start
    of the step.  Endpoint walkers are clamped to the endpoint images.
    """
    reg = string.regime
    T = reg.temperature
    if T <= 0.0:
        raise ConfigurationError("walker_step needs temperature > 0")
    t = string.t
    g = reg.gamma(t)
    check_contract(g, dt, contract)
    images = string.images
    ens = _confine(ensemble, images)
    x = ens.walkers[1:-1]
    if x.shape[0] == 0:
        return ens
    noise = np.stack([rng.standard_normal(x.shape[1]) for rng in ens.rng_streams[1:-1]])
    if g == 0.0:
        prop = x + dt * oracle.velocity(t, x)
    else:
        b, s = oracle.both(t, x)
        prop = x + dt * (b + g * g * s) + math.sqrt(2.0 * T * dt) * g * noise
    bad = ~np.all(np.isfinite(prop), axis=1)
    if bad.any():
        idx = int(np.argmax(bad)) + 1
        raise DivergenceError(f"non-finite walker {idx} at t={t:.6g}", t=t, last_state=x, index=idx)
    inner = np.arange(1, images.shape[0] - 1)
    accept = voronoi_owner(prop, images) == inner
    ens.attempt_counts[inner] += 1
    ens.reject_counts[inner[~accept]] += 1
    ens.walkers[inner[accept]] = prop[accept]
    return ens


def ema_update(string: StringState, ensemble: WalkerEnsemble, eta: float) -> StringState:
    """phi_i <- (1 - eta) phi_i + eta x_i for interior i; endpoints untouched."""
    if not (0.0 < eta <= 1.0):
        raise ConfigurationError("eta must lie in (0, 1]")
    imgs = string.images.copy()
    if eta == 1.0:
        imgs[1:-1] = ensemble.walkers[1:-1]
    else:
        imgs[1:-1] = (1.0 - eta) * imgs[1:-1] + eta * ensemble.walkers[1:-1]
    return string.evolve(imgs, string.t)


def finite_temperature_step(state: StringState, ensemble: WalkerEnsemble, oracle: FieldOracle,
                            dt: float, method: str = "euler",
                            contract: float = DEFAULT_CONTRACT):
    """Walker move, EMA, transport of the endpoints, reparametrization.

    Returns the new (state, ensemble) pair at time t + dt.
    """
    reg = state.regime
    if reg.regime != "principal_curve":
        raise ConfigurationError("finite_temperature_step needs the principal_curve regime")
    t = state.t
    if dt <= 0 or t + dt > 1.0 + 1e-12:
        raise ConfigurationError(f"bad timestep {dt} at t={t}")
    images = state.images
    ends = ode_step(oracle.velocity, t, images[[0, -1]], dt, method)
    if reg.gamma(t) == 0.0:
        moved = np.empty_like(images)
        moved[[0, -1]] = ends
        moved[1:-1] = ode_step(oracle.velocity, t, images[1:-1], dt, method)
        ens = ensemble.copy()
        ens.walkers = moved.copy()
    else:
        ens = walker_step(ensemble, state, oracle, dt, contract)
        moved = ema_update(state, ens, reg.ema_rate).images.copy()
        moved[[0, -1]] = ends
    bad = ~np.all(np.isfinite(moved), axis=1)
    if bad.any():
        idx = int(np.argmax(bad))
        raise DivergenceError(f"non-finite image {idx} at t={t + dt:.6g}", t=t + dt, index=idx)
    new_images = reparametrize(moved, reg.spline, step_tol(reg.spline))
    ens.walkers = ens.walkers + (new_images - moved)
    new_state = state.evolve(new_images, t + dt)
    return new_state, _confine(ens, new_images)


def run_finite_temperature_string(state: StringState, oracle: FieldOracle,
                                  cfg: StepperConfig = StepperConfig("euler", 200),
                                  contract: float = DEFAULT_CONTRACT, times=None,
                                  record_every: int = 1, snapshot_every: Optional[int] = None,
                                  seed: int = 0, on_step: Optional[Callable] = None,
                                  ensemble: Optional[WalkerEnsemble] = None):
    """Evolve a principal-curve string to t=1.

    Returns (final state, WalkerEnsemble, PathDiagnostics).  Walker
    snapshots are stored in ``diag.extra["walker_snapshots"]`` alongside the
    string snapshots, and final per-walker rejection rates in
    ``diag.extra["rejection_rate"]``.
    """
    reg = state.regime
    if reg.regime != "principal_curve" or reg.temperature <= 0.0:
        raise ConfigurationError("run_finite_temperature_string needs principal_curve with T > 0")
    if state.t >= 1.0:
        raise ConfigurationError("string is already at t=1")
    if cfg.method not in ("euler", "heun"):
        raise ConfigurationError(f"{cfg.method!r} is not a transport method for the endpoints")
    if times is None:
        times = string_time_grid(state, cfg, contract)
    ens = WalkerEnsemble.at_images(state, seed) if ensemble is None else ensemble
    diag = PathDiagnostics()
    diag.extra["walker_snapshots"] = []
    diag.record(0, state, 0.0, oracle)
    if snapshot_every:
        diag.snapshots.append((0, state.t, state.images.copy()))
        diag.extra["walker_snapshots"].append((0, state.t, ens.walkers.copy(), ens.reject_counts.copy()))
    n = len(times) - 1
    for k, (t, tn) in enumerate(zip(times[:-1], times[1:]), start=1):
        state = replace(state, t=float(t))
        new, ens = finite_temperature_step(state, ens, oracle, tn - t, cfg.method, contract)
        new = replace(new, t=float(tn))
        disp = np.max(np.linalg.norm(new.images - state.images, axis=1))
        state = new
        if k % record_every == 0 or k == n:
            diag.record(k, state, disp, oracle)
        if snapshot_every and (k % snapshot_every == 0 or k == n):
            diag.snapshots.append((k, state.t, state.images.copy()))
            diag.extra["walker_snapshots"].append((k, state.t, ens.walkers.copy(), ens.reject_counts.copy()))
        if on_step is not None:
            on_step(k, state)
    diag.final_logp = final_log_likelihood(oracle, state.images)
    diag.extra["rejection_rate"] = ens.rejection_rates()
    return state, ens, diag


# ---------------------------------------------------------------------------
# self-consistency


@dataclass
class SelfConsistency:
    """Per-image distance to the mean of the samples projecting onto it.

    ``residuals`` is NaN for empty cells; ``insufficient`` flags cells with
    fewer than ``OCCUPANCY_MIN`` samples.
    """

    residuals: np.ndarray
    counts: np.ndarray
    insufficient: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.insufficient is None:
            self.insufficient = self.counts < OCCUPANCY_MIN

    def interior_median(self) -> float:
        r = self.residuals[1:-1]
        ok = ~self.insufficient[1:-1]
        return float(np.median(r[ok])) if ok.any() else math.nan


def self_consistency_residual(string: StringState, source, T: float = 1.0, n_samples: int = 100_000,
                              rng: Optional[np.random.Generator] = None) -> SelfConsistency:
    """Compare each image with the conditional mean of its Voronoi cell.

    ``source`` is either a GaussianMixture (sampled at temperature ``T`` with
    the exact tempered sampler) or an array of samples, used as given.
    """
    if isinstance(source, GaussianMixture):
        rng = np.random.default_rng(0) if rng is None else rng
        X = sample_tempered(source, T, n_samples, rng)
    else:
        X = np.asarray(source, dtype=float)
        if X.ndim != 2 or X.shape[1] != string.dim:
            raise ConfigurationError("sample array must have shape (n, d)")
    imgs = string.images
    m = imgs.shape[0]
    owner = voronoi_owner(X, imgs) if len(X) else np.zeros(0, dtype=int)
    counts = np.bincount(owner, minlength=m)
    sums = np.zeros_like(imgs)
    np.add.at(sums, owner, X)
    res = np.full(m, np.nan)
    full = counts > 0
    res[full] = np.linalg.norm(sums[full] / counts[full, None] - imgs[full], axis=1)
    return SelfConsistency(res, counts)
