"""Numpy MLP score model trained by denoising score matching.

The network maps (x, t) -> s_hat_t(x) with t appended to the input as one
extra coordinate.  Training samples x1 from the target, x0 ~ N(0, I) and
t ~ U[0, 1], forms I_t = alpha_t x0 + beta_t x1 and regresses onto the
conditional score -(I_t - beta_t x1) / alpha_t^2 = -x0 / alpha_t with weight
alpha_t^2, i.e. it minimizes |alpha_t s_hat + x0|^2.  The weight keeps the
loss bounded as alpha_t -> 0 without changing the minimizer.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, TrainingDivergenceError
from .fields import FieldOracle, GaussianMixture, Schedule, gmm_marginal_at, score_oracle

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DESK_WIDTHS = (64, 128, 64)
LARGE_WIDTHS = (512, 1024, 512)


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return sig * (1.0 + z * (1.0 - sig))


def parameter_count(dim: int, widths: Sequence[int]) -> int:
    sizes = [dim + 1, *widths, dim]
    return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


class MlpScoreModel:
    """Fully connected SiLU network; call as ``model(t, x)``."""

    def __init__(self, dim: int, widths: Sequence[int] = DESK_WIDTHS, seed: int = 0):
        if dim < 1 or any(w < 1 for w in widths):
            raise ConfigurationError("dimension and widths must be positive")
        self.dim = int(dim)
        self.widths = tuple(int(w) for w in widths)
        rng = np.random.default_rng(seed)
        sizes = [self.dim + 1, *self.widths, self.dim]
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            self.weights.append(rng.standard_normal((a, b)) * math.sqrt(1.0 / a))
            self.biases.append(np.zeros(b))
        self.trained = False
        self.iterations = 0
        self.loss_history: List[float] = []

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def params(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def _inputs(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tt = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (x.shape[0], 1))
        return np.hstack([x, tt])

    def forward(self, h, keep=False):
        cache = []
        n = len(self.weights)
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            if keep:
                cache.append((h, z))
            h = silu(z) if k < n - 1 else z
        return (h, cache) if keep else h

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        out = self.forward(self._inputs(t, x))
        return out[0] if x.ndim == 1 else out

    def backward(self, cache, grad_out):
        """Gradients of sum(grad_out * output) w.r.t. all parameters (same order as params())."""
        grads = []
        g = grad_out
        n = len(self.weights)
        for k in range(n - 1, -1, -1):
            h, z = cache[k]
            if k < n - 1:
                g = g * silu_grad(z)
            grads.append(g.sum(axis=0))
            grads.append(h.T @ g)
            g = g @ self.weights[k].T
        return grads[::-1]

    def loss_and_grads(self, xt, t, x0, alpha):
        """Mean of |alpha s_hat(x_t, t) + x0|^2 and its parameter gradients."""
        out, cache = self.forward(self._inputs(t, xt), keep=True)
        a = alpha[:, None]
        r = a * out + x0
        n = xt.shape[0]
        loss = float(np.sum(r * r) / n)
        grads = self.backward(cache, 2.0 * a * r / n)
        return loss, grads

    # -- serialization -----------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "dim": self.dim,
            "widths": list(self.widths),
            "activation": "silu",
            "trained": self.trained,
            "iterations": self.iterations,
            "layers": [
                {"shape": list(W.shape), "weight": W.tolist(), "bias": b.tolist()}
                for W, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_json(cls, doc) -> "MlpScoreModel":
        if isinstance(doc, (str, Path)):
            doc = json.loads(Path(doc).read_text())
        if doc.get("format_version") != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint format {doc.get('format_version')!r}")
        model = cls(doc["dim"], doc["widths"])
        for k, layer in enumerate(doc["layers"]):
            W = np.array(layer["weight"], dtype=float).reshape(layer["shape"])
            if W.shape != model.weights[k].shape:
                raise ConfigurationError(f"layer {k} has shape {W.shape}, expected {model.weights[k].shape}")
            model.weights[k] = W
            model.biases[k] = np.array(layer["bias"], dtype=float)
        model.trained = bool(doc["trained"])
        model.iterations = int(doc["iterations"])
        return model

    def as_oracle(self, schedule: Schedule, t_guard: float = 0.02) -> FieldOracle:
        """Learned-score oracle; the velocity comes from the inverted relation."""
        return score_oracle(schedule, self, kind="learned_net", t_guard=t_guard)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1000
    iterations: int = 20000
    learning_rate: float = 1e-3
    widths: tuple = DESK_WIDTHS
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    final_lr_fraction: float = 0.1  # cosine decay to this fraction of the learning rate

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 0 or self.learning_rate <= 0:
            raise ConfigurationError("batch_size and learning_rate must be positive, iterations >= 0")
        if any(int(w) < 1 for w in self.widths):
            raise ConfigurationError("widths must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0):
            raise ConfigurationError("bad Adam moments")
        if not (0 < self.final_lr_fraction <= 1):
            raise ConfigurationError("final_lr_fraction must lie in (0, 1]")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @classmethod
    def large_scale(cls, dim: int, **kw) -> "TrainConfig":
        return cls(iterations=1500 * dim, widths=LARGE_WIDTHS, **kw)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.k = 0

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.k += 1
        c1 = 1.0 - self.b1 ** self.k
        c2 = 1.0 - self.b2 ** self.k
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_score_model(target: GaussianMixture, schedule: Schedule, cfg: TrainConfig = TrainConfig(),
                      log_every: int = 0) -> MlpScoreModel:
    """Denoising score matching; the loss trace is kept in ``model.loss_history``."""
    model = MlpScoreModel(target.dim, cfg.widths, seed=cfg.seed)
    if cfg.iterations == 0:
        return model
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    params = model.params()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    n, d = cfg.batch_size, target.dim
    for it in range(cfg.iterations):
        x1 = target.sample(n, rng)
        x0 = rng.standard_normal((n, d))
        t = rng.uniform(0.0, 1.0, n)
        a, b = schedule.alpha(t), schedule.beta(t)
        xt = a[:, None] * x0 + b[:, None] * x1
        loss, grads = model.loss_and_grads(xt, t, x0, a)
        if not math.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite loss at iteration {it}", iteration=it)
        frac = it / max(cfg.iterations - 1, 1)
        lr = cfg.learning_rate * (cfg.final_lr_fraction
                                  + (1 - cfg.final_lr_fraction) * 0.5 * (1 + math.cos(math.pi * frac)))
        opt.step(params, grads, lr)
        model.loss_history.append(loss)
        if log_every and it % log_every == 0:
            log.info("iteration %d loss %.5f", it, loss)
    model.trained = True
    model.iterations = cfg.iterations
    return model


@dataclass
class ErrorCurve:
    times: np.ndarray
    mean_error: np.ndarray
    n_excluded: np.ndarray

    def rows(self):
        return list(zip(self.times.tolist(), self.mean_error.tolist(), self.n_excluded.tolist()))

    def window_mean(self, lo: float, hi: float) -> float:
        sel = (self.times >= lo) & (self.times <= hi)
        return float(np.mean(self.mean_error[sel]))


def relative_score_error_curve(model, oracle: FieldOracle, schedule: Schedule, times, n_samples: int,
                               target: GaussianMixture, rng: Optional[np.random.Generator] = None) -> ErrorCurve:
    """Monte Carlo mean of |s_t - s_hat_t| / |s_t| over samples of rho_t.

    Samples come from the exact marginal of ``target`` at each time; points
    with |s_t| < 1e-12 are excluded and counted.  ``model`` is any callable
    (t, x) -> score.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    times = np.asarray(times, dtype=float)
    errs = np.empty(len(times))
    excl = np.zeros(len(times), dtype=int)
    for k, t in enumerate(times):
        x = gmm_marginal_at(schedule, target, float(t)).sample(n_samples, rng)
        s = oracle.score(float(t), x)
        s_hat = model(float(t), x)
        ns = np.linalg.norm(s, axis=1)
        ok = ns >= 1e-12
        excl[k] = int((~ok).sum())
        errs[k] = float(np.mean(np.linalg.norm(s - s_hat, axis=1)[ok] / ns[ok])) if ok.any() else math.nan
    return ErrorCurve(times, errs, excl)
