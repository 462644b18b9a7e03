"""Interpolant schedules and exact fields for Gaussian-mixture targets.

The interpolant is ``I_t = alpha_t x0 + beta_t x1`` with ``x0 ~ N(0, I)`` and
``x1`` drawn from the target.  For a Gaussian-mixture target every marginal
``rho_t`` is again a Gaussian mixture, so the velocity ``b_t``, the score
``s_t``, the divergence of ``b_t`` and ``log rho_t`` are all available in
closed form.  Those exact fields are what every other module is tested
against.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import CapabilityError, ConfigurationError, DomainError, SingularTimeError

SCHEDULE_NAMES = ("linear", "trigonometric", "ou")
ORACLE_KINDS = ("analytic_gmm", "learned_net", "user_supplied")

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class Schedule:
    """Coefficient pair (alpha_t, beta_t) of the interpolant and derivatives.

    ``alpha_alpha_dot`` is the product alpha_t * d(alpha_t)/dt, kept as its own
    function because it stays finite at t=1 for the ``ou`` schedule where
    ``alpha_dot`` itself diverges.
    """

    name: str
    alpha: Callable[[float], float]
    beta: Callable[[float], float]
    alpha_dot: Callable[[float], float]
    beta_dot: Callable[[float], float]
    alpha_alpha_dot: Callable[[float], float]
    variance_preserving: bool

    def coefficients(self, t):
        return self.alpha(t), self.beta(t)

    def conversion_denominator(self, t):
        """alpha_t * (alpha_t * beta_dot_t - alpha_dot_t * beta_t)."""
        a, b = self.alpha(t), self.beta(t)
        return a * a * self.beta_dot(t) - self.alpha_alpha_dot(t) * b


def _ou_alpha_dot(t):
    if t >= 1.0:
        return -math.inf
    return -t / math.sqrt(1.0 - t * t)


def make_schedule(name: str) -> Schedule:
    if name == "linear":
        return Schedule(
            name="linear",
            alpha=lambda t: 1.0 - t,
            beta=lambda t: t,
            alpha_dot=lambda t: -1.0,
            beta_dot=lambda t: 1.0,
            alpha_alpha_dot=lambda t: -(1.0 - t),
            variance_preserving=False,
        )
    if name == "trigonometric":
        h = 0.5 * math.pi
        return Schedule(
            name="trigonometric",
            alpha=lambda t: math.cos(h * t),
            beta=lambda t: math.sin(h * t),
            alpha_dot=lambda t: -h * math.sin(h * t),
            beta_dot=lambda t: h * math.cos(h * t),
            alpha_alpha_dot=lambda t: -h * math.sin(h * t) * math.cos(h * t),
            variance_preserving=True,
        )
    if name == "ou":
        return Schedule(
            name="ou",
            alpha=lambda t: math.sqrt(max(1.0 - t * t, 0.0)),
            beta=lambda t: t,
            alpha_dot=_ou_alpha_dot,
            beta_dot=lambda t: 1.0,
            alpha_alpha_dot=lambda t: -t,
            variance_preserving=True,
        )
    raise ConfigurationError(
        f"unknown schedule {name!r}; expected one of {', '.join(SCHEDULE_NAMES)}"
    )


def _check_time(t):
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"time {t} outside [0, 1]")


# ---------------------------------------------------------------------------
# Gaussian mixtures


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    # eigen-decomposition of each covariance, computed once
    _eigvals: np.ndarray = field(init=False, repr=False)
    _eigvecs: Optional[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covariances, dtype=float)
        if cov.ndim == 2:
            cov = cov[None]
        k, d = mu.shape
        if w.shape != (k,) or cov.shape != (k, d, d):
            raise ConfigurationError(
                f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, "
                f"covariances {cov.shape}"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError("mixture weights must be nonnegative and sum to 1")
        if np.max(np.abs(cov - np.swapaxes(cov, 1, 2))) > 1e-12:
            raise ConfigurationError("covariances must be symmetric")
        diagonal = all(np.count_nonzero(c - np.diag(np.diag(c))) == 0 for c in cov)
        if diagonal:
            lam = np.stack([np.diag(c).copy() for c in cov])
            vecs = None
        else:
            lam, vecs = np.linalg.eigh(cov)
        if np.min(lam) <= 0:
            raise ConfigurationError("covariances must be positive definite")
        for name, value in (("weights", w), ("means", mu), ("covariances", cov)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        lam.setflags(write=False)
        object.__setattr__(self, "_eigvals", lam)
        if vecs is not None:
            vecs.setflags(write=False)
        object.__setattr__(self, "_eigvecs", vecs)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        return _mixture_terms(self, 0.0, 1.0, x)[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k in range(self.n_components):
            idx = comp == k
            lam = np.sqrt(self._eigvals[k])
            zk = z[idx] * lam
            if self._eigvecs is not None:
                zk = zk @ self._eigvecs[k].T
            out[idx] = self.means[k] + zk
        return out

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_json(cls, doc) -> "GaussianMixture":
        if isinstance(doc, (str, Path)):
            doc = json.loads(Path(doc).read_text())
        missing = {"weights", "means", "covariances"} - set(doc)
        if missing:
            raise ConfigurationError(f"mixture document missing keys: {sorted(missing)}")
        extra = set(doc) - {"weights", "means", "covariances"}
        if extra:
            raise ConfigurationError(f"unknown mixture keys: {sorted(extra)}")
        return cls(doc["weights"], doc["means"], doc["covariances"])


def appendix_c_mixture(dim: int = 2) -> GaussianMixture:
    """Two-mode benchmark mixture with means (+-3, 0, ..., 0).

    Each mode has a 2x2 block equal to diag(7, 0.3) rotated by +-60 degrees
    (sign follows the sign of the mean), padded with the identity.
    """
    if dim < 2:
        raise ConfigurationError("the appendix_c preset needs dim >= 2")
    off = 6.7 * math.sqrt(3.0) / 4.0
    means = np.zeros((2, dim))
    means[0, 0], means[1, 0] = 3.0, -3.0
    covs = np.stack([np.eye(dim), np.eye(dim)])
    for k, sign in enumerate((1.0, -1.0)):
        covs[k, :2, :2] = [[7.9 / 4.0, sign * off], [sign * off, 21.3 / 4.0]]
    return GaussianMixture(np.array([0.5, 0.5]), means, covs)


def standard_normal_mixture(dim: int) -> GaussianMixture:
    return GaussianMixture(np.ones(1), np.zeros((1, dim)), np.eye(dim)[None])


def gmm_marginal_at(schedule: Schedule, target: GaussianMixture, t: float) -> GaussianMixture:
    """Law of I_t: component k becomes N(beta_t mu_k, alpha_t^2 I + beta_t^2 Sigma_k)."""
    _check_time(t)
    a, b = schedule.coefficients(t)
    eye = np.eye(target.dim)
    covs = a * a * eye + b * b * target.covariances
    return GaussianMixture(target.weights.copy(), b * target.means, covs)


# ---------------------------------------------------------------------------
# exact fields


def _rot(y, vecs, k, transpose=False):
    if vecs is None:
        return y
    return y @ vecs[k] if not transpose else y @ vecs[k].T


def _mixture_terms(mix: GaussianMixture, a: float, b: float, x: np.ndarray):
    """Per-component pieces of rho_t = sum_k w_k N(b mu_k, a^2 I + b^2 Sigma_k).

    Returns (log_density, responsibilities (n, K), g (K, n, d), c (K, d))
    with g_k = C_k^{-1} (x - b mu_k) and c_k the eigenvalues of C_k.
    """
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    n, d = x2.shape
    K = mix.n_components
    vecs = mix._eigvecs
    c = a * a + b * b * mix._eigvals  # (K, d)
    logn = np.empty((n, K))
    g = np.empty((K, n, d))
    for k in range(K):
        y = _rot(x2 - b * mix.means[k], vecs, k)
        ge = y / c[k]
        logn[:, k] = -0.5 * np.einsum("ij,ij->i", y, ge) - 0.5 * np.sum(np.log(c[k])) - 0.5 * d * _LOG_2PI
        g[k] = _rot(ge, vecs, k, transpose=True)
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    joint = logn + logw
    # inline log-sum-exp: this is the hot path of every field evaluation
    top = joint.max(axis=1, keepdims=True)
    e = np.exp(joint - top)
    tot = e.sum(axis=1, keepdims=True)
    logp = (top + np.log(tot))[:, 0]
    r = e / tot
    if single:
        logp = logp[0]
    return logp, r, g, c


class GaussianMixtureField:
    """Exact velocity, score, divergence and log-density of rho_t.

    All methods are pure functions of (t, x); ``x`` is a point of shape (d,)
    or a batch of shape (n, d).
    """

    def __init__(self, schedule: Schedule, target: GaussianMixture):
        self.schedule = schedule
        self.target = target

    def _coeffs(self, t):
        _check_time(t)
        s = self.schedule
        return s.alpha(t), s.beta(t), s.alpha_alpha_dot(t), s.beta_dot(t)

    def log_density(self, t, x):
        a, b, _, _ = self._coeffs(t)
        return _mixture_terms(self.target, a, b, np.asarray(x, dtype=float))[0]

    def score(self, t, x):
        x = np.asarray(x, dtype=float)
        a, b, _, _ = self._coeffs(t)
        _, r, g, _ = _mixture_terms(self.target, a, b, x)
        s = -np.einsum("nk,knd->nd", r, g)
        return s[0] if x.ndim == 1 else s

    def _velocity_parts(self, t, x):
        a, b, aad, bd = self._coeffs(t)
        mix = self.target
        _, r, g, c = _mixture_terms(mix, a, b, x)
        vecs = mix._eigvecs
        m = np.empty_like(g)
        for k in range(mix.n_components):
            sig_g = _rot(_rot(g[k], vecs, k) * mix._eigvals[k], vecs, k, transpose=True)
            m[k] = aad * g[k] + bd * (mix.means[k] + b * sig_g)
        return a, b, aad, bd, r, g, c, m

    def velocity(self, t, x):
        x = np.asarray(x, dtype=float)
        *_, r, g, c, m = self._velocity_parts(t, np.atleast_2d(x))
        v = np.einsum("nk,knd->nd", r, m)
        return v[0] if x.ndim == 1 else v

    def fields(self, t, x):
        """(velocity, score) from one pass over the mixture."""
        x = np.asarray(x, dtype=float)
        *_, r, g, c, m = self._velocity_parts(t, np.atleast_2d(x))
        v = np.einsum("nk,knd->nd", r, m)
        s = -np.einsum("nk,knd->nd", r, g)
        if x.ndim == 1:
            return v[0], s[0]
        return v, s

    def divergence(self, t, x):
        x = np.asarray(x, dtype=float)
        a, b, aad, bd, r, g, c, m = self._velocity_parts(t, np.atleast_2d(x))
        s = -np.einsum("nk,knd->nd", r, g)
        tr = np.sum((aad + bd * b * self.target._eigvals) / c, axis=1)  # (K,)
        # d r_k / dx = r_k (-g_k - s)
        coupling = np.einsum("knd,knd->nk", -g - s[None], m)
        div = r @ tr + np.sum(r * coupling, axis=1)
        return div[0] if x.ndim == 1 else div

    def velocity_jvp(self, t, x, v):
        """Jacobian of the velocity applied to ``v`` (same shape as ``x``)."""
        x = np.asarray(x, dtype=float)
        v2 = np.atleast_2d(np.asarray(v, dtype=float))
        a, b, aad, bd, r, g, c, m = self._velocity_parts(t, np.atleast_2d(x))
        mix = self.target
        vecs = mix._eigvecs
        s = -np.einsum("nk,knd->nd", r, g)
        out = np.zeros_like(v2)
        for k in range(mix.n_components):
            scale = (aad + bd * b * mix._eigvals[k]) / c[k]
            av = _rot(_rot(v2, vecs, k) * scale, vecs, k, transpose=True)
            dr = r[:, k] * np.einsum("nd,nd->n", -g[k] - s, v2)
            out += r[:, k, None] * av + dr[:, None] * m[k]
        return out[0] if x.ndim == 1 else out


# ---------------------------------------------------------------------------
# oracle interface


@dataclass(frozen=True)
class FieldOracle:
    """Bundle of field callables consumed by the dynamics modules.

    ``velocity`` and ``score`` map (t, x) -> array shaped like x.  The optional
    members extend capability: ``divergence_of_velocity`` and ``log_density``
    map (t, x) -> scalar per point, ``fields`` returns (velocity, score) in one
    call and ``velocity_jvp`` maps (t, x, v) -> J_b(x) v.
    """

    velocity: Callable
    score: Callable
    divergence_of_velocity: Optional[Callable] = None
    log_density: Optional[Callable] = None
    kind: str = "user_supplied"
    schedule: Optional[Schedule] = None
    fields: Optional[Callable] = None
    velocity_jvp: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in ORACLE_KINDS:
            raise ConfigurationError(f"unknown oracle kind {self.kind!r}")

    def both(self, t, x):
        if self.fields is not None:
            return self.fields(t, x)
        return self.velocity(t, x), self.score(t, x)


def analytic_fields(schedule: Schedule, target: GaussianMixture) -> FieldOracle:
    f = GaussianMixtureField(schedule, target)
    return FieldOracle(
        velocity=f.velocity,
        score=f.score,
        divergence_of_velocity=f.divergence,
        log_density=f.log_density,
        kind="analytic_gmm",
        schedule=schedule,
        fields=f.fields,
        velocity_jvp=f.velocity_jvp,
    )


def velocity_from_score(schedule: Schedule, score: Callable, t_guard: float = 0.02) -> Callable:
    """Invert the velocity/score relation: b = (beta_dot x + den s) / beta.

    The inversion divides by beta_t, which vanishes at t=0; times below
    ``t_guard`` are evaluated at ``t_guard``.
    """

    def velocity(t, x):
        te = max(t, t_guard)
        x = np.asarray(x, dtype=float)
        den = schedule.conversion_denominator(te)
        return (schedule.beta_dot(te) * x + den * score(te, x)) / schedule.beta(te)

    return velocity


def score_oracle(schedule: Schedule, score: Callable, kind: str = "learned_net",
                 t_guard: float = 0.02) -> FieldOracle:
    """Oracle for a model that only provides a score."""
    return FieldOracle(
        velocity=velocity_from_score(schedule, score, t_guard),
        score=score,
        kind=kind,
        schedule=schedule,
    )


def check_velocity_score_relation(oracle: FieldOracle, schedule: Schedule, t: float, x) -> float:
    """Norm of s_t(x) minus the score reconstructed from b_t(x)."""
    _check_time(t)
    den = schedule.conversion_denominator(t)
    if not np.isfinite(den) or abs(den) < 1e-12:
        raise SingularTimeError(f"velocity/score conversion is singular at t={t}")
    x = np.asarray(x, dtype=float)
    b = oracle.velocity(t, x)
    s = oracle.score(t, x)
    recon = (schedule.beta(t) * b - schedule.beta_dot(t) * x) / den
    return float(np.linalg.norm(s - recon))


def tempered_log_density(oracle: FieldOracle, t: float, x, T: float):
    """Unnormalized log of rho_t^(1/T)."""
    if T <= 0:
        raise DomainError(f"temperature must be positive, got {T}")
    if oracle.log_density is None:
        raise CapabilityError("oracle has no log_density")
    return oracle.log_density(t, x) / T


def sample_tempered(target: GaussianMixture, T: float, n: int, rng: np.random.Generator,
                    max_rounds: int = 1000) -> np.ndarray:
    """Exact samples from rho_1^(1/T) by rejection.

    Proposal: the mixture of N(mu_k, T Sigma_k) with weights proportional to
    the bound coefficients c_k below.  By the power-mean inequality
    (sum_k a_k)^p <= K^(p-1) sum_k a_k^p for p = 1/T >= 1, which gives an
    envelope with constant K^(p-1) * sum_k c_k.
    """
    if not (0 < T <= 1):
        raise DomainError(f"temperature must lie in (0, 1], got {T}")
    if T == 1.0:
        return target.sample(n, rng)
    p = 1.0 / T
    d, K = target.dim, target.n_components
    logdet = np.sum(np.log(target._eigvals), axis=1)
    # (w N(x; mu, S))^p = c * N(x; mu, T S) with
    logc = p * np.log(target.weights) + (1 - p) * (0.5 * d * _LOG_2PI + 0.5 * logdet) + 0.5 * d * math.log(T)
    prop_w = np.exp(logc - logsumexp(logc))
    proposal = GaussianMixture(prop_w, target.means.copy(), T * target.covariances)
    log_env = (p - 1) * math.log(K) + logsumexp(logc)
    out = []
    have = 0
    for _ in range(max_rounds):
        x = proposal.sample(max(2 * n, 1000), rng)
        log_ratio = p * target.log_density(x) - proposal.log_density(x) - log_env
        keep = np.log(rng.uniform(size=len(x))) < log_ratio
        out.append(x[keep])
        have += int(keep.sum())
        if have >= n:
            break
    else:
        raise RuntimeError("tempered rejection sampler did not collect enough samples")
    return np.concatenate(out)[:n]
