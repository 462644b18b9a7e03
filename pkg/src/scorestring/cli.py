"""Command-line entry point: ``scorestring <command> [flags]``.

Commands
    string-run       evolve a string and write snapshots, diagnostics and endpoint paths
    likelihood       log rho_1 of points read from a CSV file
    score-benchmark  train a score network and write its relative-error curve
    oracle           brute-force references: saddle, mep or principal

Every run writes ``manifest.json`` to its output directory.  The manifest
holds the fully resolved configuration and can be passed back as
``--config`` to repeat the run exactly.

Exit codes: 0 success, 2 invalid configuration or input, 3 runtime failure
(divergence, training blow-up, iteration budget exhausted).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import (
    BudgetExceededError,
    DivergenceError,
    StringMethodError,
    TrainingDivergenceError,
)
from .errors import ConfigurationError
from .fields import (
    SCHEDULE_NAMES,
    GaussianMixture,
    analytic_fields,
    appendix_c_mixture,
    make_schedule,
    sample_tempered,
    standard_normal_mixture,
)
from .integrators import QUENCH_MODES, GammaSchedule, StepperConfig, log_likelihood
from .io import (
    read_points_csv,
    write_csv,
    write_diagnostics_csv,
    write_json,
    write_string_csv,
    write_trajectory_csv,
    write_walkers_csv,
)
from .strings import REGIMES, SPLINES, RegimeConfig, encode_endpoints, init_string_geodesic, run_string

log = logging.getLogger("scorestring")

PRESETS = ("appendix_c", "standard_normal")
COMMANDS = ("string-run", "likelihood", "score-benchmark", "oracle")
ORACLE_COMMANDS = ("saddle", "mep", "principal")
DEFAULT_GAMMA = 8.0


@dataclass
class RunConfig:
    command: Optional[str] = None
    # target and interpolant
    preset: str = "appendix_c"
    mixture: Optional[object] = None  # JSON file path or inline mixture document
    dim: int = 2
    schedule: str = "linear"
    # string dynamics
    regime: str = "mep"
    gamma: Optional[float] = None  # None: 8.0 for mep/principal_curve, 0 for transport
    gamma_window: list = field(default_factory=lambda: [0.1, 0.95])
    quench: str = "hard_window"
    ramp: float = 0.05
    temperature: float = 0.0
    eta: float = 0.2
    images: int = 71
    t0: float = 0.0
    method: str = "heun"
    n_steps: int = 200
    contract: float = 0.1
    spline: str = "linear"
    endpoints: Optional[list] = None
    encode_steps: int = 400
    snapshot_every: int = 0
    record_every: int = 1
    seed: int = 0
    out: str = "out"
    # likelihood
    input: Optional[str] = None
    divergence: str = "exact"
    n_probes: int = 16
    likelihood_steps: int = 1000
    # score benchmark
    iterations: int = 20000
    batch_size: int = 1000
    learning_rate: float = 1e-3
    widths: list = field(default_factory=lambda: [64, 128, 64])
    eval_times: int = 21
    eval_samples: int = 5000
    identity_oracle: bool = False
    # oracles
    oracle: str = "saddle"
    t: float = 1.0
    grid_bounds: Optional[list] = None
    grid_resolution: list = field(default_factory=lambda: [321, 321])
    mep_iterations: int = 20000
    principal_samples: int = 100000
    principal_iterations: int = 2000
    tool_version: Optional[str] = None  # informational, echoed by manifests

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- validation and resolution --------------------------------------

    def validate(self):
        if self.command is not None and self.command not in COMMANDS:
            raise ConfigurationError(f"unknown command {self.command!r}")
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if self.schedule not in SCHEDULE_NAMES:
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if self.quench not in QUENCH_MODES:
            raise ConfigurationError(f"unknown quench mode {self.quench!r}")
        if self.spline not in SPLINES:
            raise ConfigurationError(f"unknown spline {self.spline!r}")
        if self.oracle not in ORACLE_COMMANDS:
            raise ConfigurationError(f"unknown oracle {self.oracle!r}")
        if self.divergence not in ("exact", "hutchinson"):
            raise ConfigurationError(f"unknown divergence mode {self.divergence!r}")
        for name in ("dim", "images", "n_steps", "encode_steps", "record_every", "n_probes",
                     "likelihood_steps", "batch_size", "eval_times", "eval_samples",
                     "mep_iterations", "principal_samples", "principal_iterations"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        for name in ("iterations", "snapshot_every", "seed"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigurationError(f"{name} must be a non-negative integer, got {v!r}")
        if self.images < 2:
            raise ConfigurationError("images (N) must be at least 2")
        if not (0.0 <= self.t0 < 1.0):
            raise ConfigurationError("t0 must lie in [0, 1)")
        if not (0.0 < self.eta <= 1.0):
            raise ConfigurationError("eta must lie in (0, 1]")
        if not (self.contract > 0 and math.isfinite(self.contract)):
            raise ConfigurationError("contract must be positive")
        if self.endpoints is not None:
            e = np.asarray(self.endpoints, dtype=float)
            if e.shape != (2, self.dim) or not np.all(np.isfinite(e)):
                raise ConfigurationError(f"endpoints must be two finite points of dimension {self.dim}")
        if self.grid_bounds is not None:
            b = np.asarray(self.grid_bounds, dtype=float)
            if b.shape != (2, 2):
                raise ConfigurationError("grid_bounds must be [[x_lo, x_hi], [y_lo, y_hi]]")
        if self.regime == "transport" and self.gamma is not None and self.gamma > 0:
            raise ConfigurationError("the transport regime needs gamma = 0")
        # constructing these runs their own invariant checks
        self.gamma_schedule()
        self.regime_config()
        self.stepper()
        if self.command == "string-run" and self.regime != "transport":
            if self.gamma_schedule().base_gamma > 0 and self.method not in ("euler", "heun"):
                raise ConfigurationError(f"method {self.method!r} cannot drive a string")

    def target(self) -> GaussianMixture:
        if self.mixture is not None:
            doc = self.mixture
            if isinstance(doc, str):
                try:
                    doc = json.loads(Path(doc).read_text())
                except (OSError, json.JSONDecodeError) as exc:
                    raise ConfigurationError(f"cannot read mixture {self.mixture}: {exc}") from None
            mix = GaussianMixture.from_json(doc)
            if mix.dim != self.dim:
                raise ConfigurationError(f"mixture has dimension {mix.dim}, config says {self.dim}")
            return mix
        if self.preset == "appendix_c":
            return appendix_c_mixture(self.dim)
        return standard_normal_mixture(self.dim)

    def default_endpoints(self, target: GaussianMixture) -> np.ndarray:
        if self.endpoints is not None:
            return np.asarray(self.endpoints, dtype=float)
        if target.n_components >= 2:
            return target.means[:2].copy()
        # two orthogonal typical points of a unimodal target
        e = np.zeros((2, self.dim))
        r = math.sqrt(self.dim)
        e[0, 0] = r
        e[1, 1 % self.dim] = r
        return e + target.means[0]

    def gamma_schedule(self) -> GammaSchedule:
        if self.regime == "transport":
            return GammaSchedule()
        gamma = DEFAULT_GAMMA if self.gamma is None else float(self.gamma)
        return GammaSchedule(gamma, tuple(self.gamma_window), self.quench, float(self.ramp))

    def regime_config(self) -> RegimeConfig:
        return RegimeConfig(self.regime, self.gamma_schedule(), float(self.temperature), float(self.eta),
                            self.spline)

    def stepper(self) -> StepperConfig:
        return StepperConfig(self.method, self.n_steps, self.t0, 1.0, self.seed)


# ---------------------------------------------------------------------------
# commands


def _manifest(cfg: RunConfig, out: Path, extra: Optional[dict] = None):
    doc = cfg.to_dict()
    doc["tool_version"] = __version__
    write_json(out / "manifest.json", doc)
    if extra:
        write_json(out / "summary.json", extra)


def cmd_string_run(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    target = cfg.target()
    oracle = analytic_fields(make_schedule(cfg.schedule), target)
    xA, xB = cfg.default_endpoints(target)
    z0, z1 = encode_endpoints(oracle, xA, xB, StepperConfig("heun", cfg.encode_steps, 1.0, cfg.t0))
    state = init_string_geodesic(z0, z1, cfg.images, cfg.t0, cfg.regime_config())
    ends_t, ends_x = [state.t], [state.images[[0, -1]].copy()]

    def on_step(k, st):
        if k % cfg.record_every == 0 or st.t >= 1.0:
            ends_t.append(st.t)
            ends_x.append(st.images[[0, -1]].copy())

    final, diag = run_string(state, oracle, cfg.stepper(), cfg.contract, record_every=cfg.record_every,
                             snapshot_every=cfg.snapshot_every or None, seed=cfg.seed, on_step=on_step)
    write_string_csv(out / "string_initial.csv", state.images, state.t)
    write_string_csv(out / "string_final.csv", final.images, final.t)
    for k, t, imgs in diag.snapshots:
        write_string_csv(out / f"string_{k:07d}.csv", imgs, t)
    for k, t, walkers, rejects in diag.extra.get("walker_snapshots", []):
        write_walkers_csv(out / f"walkers_{k:07d}.csv", walkers, rejects)
    write_diagnostics_csv(out / "diagnostics.csv", diag)
    write_trajectory_csv(out / "endpoints.csv", ends_t, np.stack(ends_x))
    write_csv(out / "final_logp.csv", ["index", "logp"], enumerate(diag.final_logp.tolist()))
    summary = {
        "peak_interior_logp": diag.peak_interior_logp(),
        "endpoint_logp": [float(diag.final_logp[0]), float(diag.final_logp[-1])],
        "n_steps": len(diag.steps) and diag.steps[-1],
    }
    if "rejection_rate" in diag.extra:
        summary["median_rejection_rate"] = float(np.median(diag.extra["rejection_rate"][1:-1]))
    _manifest(cfg, out, summary)
    log.info("string-run finished: peak interior logp %.4f", summary["peak_interior_logp"])
    return 0


def cmd_likelihood(cfg: RunConfig) -> int:
    if cfg.input is None:
        raise ConfigurationError("likelihood needs an input CSV (--input)")
    ids, pts = read_points_csv(cfg.input, cfg.dim)
    out = Path(cfg.out)
    if len(pts):
        oracle = analytic_fields(make_schedule(cfg.schedule), cfg.target())
        method = cfg.method if cfg.method in ("euler", "heun") else "heun"
        res = log_likelihood(oracle, pts, StepperConfig(method, cfg.likelihood_steps, seed=cfg.seed),
                             cfg.divergence, cfg.n_probes)
        rows = zip(ids, res.logp.tolist())
    else:
        rows = []
    write_csv(out / "likelihood.csv", ["id", "logp"], rows)
    _manifest(cfg, out)
    return 0


def cmd_score_benchmark(cfg: RunConfig) -> int:
    from .score_net import TrainConfig, relative_score_error_curve, train_score_model

    out = Path(cfg.out)
    schedule = make_schedule(cfg.schedule)
    target = cfg.target()
    oracle = analytic_fields(schedule, target)
    if cfg.identity_oracle:
        model = oracle.score
    else:
        tc = TrainConfig(cfg.batch_size, cfg.iterations, cfg.learning_rate, tuple(cfg.widths), cfg.seed)
        model = train_score_model(target, schedule, tc)
        write_json(out / "model.json", model.to_json())
        write_csv(out / "loss.csv", ["iteration", "loss"], enumerate(model.loss_history))
    times = np.linspace(0.0, 1.0, cfg.eval_times)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    curve = relative_score_error_curve(model, oracle, schedule, times, cfg.eval_samples, target, rng)
    write_csv(out / "score_error.csv", ["t", "mean_error", "n_excluded"], curve.rows())
    _manifest(cfg, out)
    return 0


def _grid_for(cfg: RunConfig, target: GaussianMixture):
    from .oracles import GridSpec

    if cfg.grid_bounds is not None:
        bounds = tuple(tuple(float(v) for v in b) for b in cfg.grid_bounds)
    else:
        spread = 3.0 * math.sqrt(float(np.max(target._eigvals))) + 1.0
        lo = target.means.min(axis=0) - spread
        hi = target.means.max(axis=0) + spread
        bounds = ((float(lo[0]), float(hi[0])), (float(lo[1]), float(hi[1])))
    return GridSpec(bounds, tuple(int(n) for n in cfg.grid_resolution))


def cmd_oracle(cfg: RunConfig) -> int:
    from .oracles import frozen_mep_string, hastie_principal_curve, locate_saddle_2d

    out = Path(cfg.out)
    target = cfg.target()
    if target.dim != 2:
        raise ConfigurationError("oracles work in d = 2 only")
    oracle = analytic_fields(make_schedule(cfg.schedule), target)
    xA, xB = cfg.default_endpoints(target)
    if cfg.oracle == "saddle":
        res = locate_saddle_2d(oracle, cfg.t, _grid_for(cfg, target))
        write_json(out / "saddle.json", {
            "found": res.found,
            "point": None if res.point is None else res.point.tolist(),
            "log_density": res.log_density,
            "basins": None if res.basins is None else np.asarray(res.basins).tolist(),
            "t": cfg.t,
        })
    elif cfg.oracle == "mep":
        images = frozen_mep_string(oracle, cfg.t, (xA, xB), cfg.images, cfg.mep_iterations)
        write_string_csv(out / "mep.csv", images, cfg.t)
    else:
        T = cfg.temperature if cfg.temperature > 0 else 1.0
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3,)))
        X = sample_tempered(target, T, cfg.principal_samples, rng)
        init = xA + np.linspace(0.0, 1.0, cfg.images + 1)[:, None] * (xB - xA)
        res = hastie_principal_curve(X, init, cfg.principal_iterations)
        write_string_csv(out / "principal.csv", res.images, 1.0)
        write_json(out / "principal.json", {"converged": res.converged, "iterations": res.iterations,
                                            "cycled": res.cycled, "empty_cells": res.empty_cells.tolist(),
                                            "temperature": T})
    _manifest(cfg, out)
    return 0


HANDLERS = {
    "string-run": cmd_string_run,
    "likelihood": cmd_likelihood,
    "score-benchmark": cmd_score_benchmark,
    "oracle": cmd_oracle,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (a manifest.json works too)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=PRESETS)
    common.add_argument("--dim", type=int)
    common.add_argument("--regime", choices=REGIMES)
    common.add_argument("--gamma", type=float)
    common.add_argument("--temperature", type=float)
    common.add_argument("--images", type=int, help="N: the string has N+1 images")
    common.add_argument("--eta", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="scorestring", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("string-run", parents=[common], help="evolve a string to t=1")
    p = sub.add_parser("likelihood", parents=[common], help="log-likelihood of points in a CSV")
    p.add_argument("--input", help="CSV with header [id,] x0, x1, ...")
    sub.add_parser("score-benchmark", parents=[common], help="train a score net, write its error curve")
    p = sub.add_parser("oracle", parents=[common], help="brute-force reference computations")
    p.add_argument("kind", choices=ORACLE_COMMANDS)
    return parser


FLAG_KEYS = ("out", "seed", "preset", "dim", "regime", "gamma", "temperature", "images", "eta")


def resolve_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigurationError("config file must hold a JSON object")
    for key in FLAG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            doc[key] = v
    if getattr(args, "input", None) is not None:
        doc["input"] = args.input
    if args.command == "oracle":
        doc["oracle"] = args.kind
    doc["command"] = args.command
    cfg = RunConfig.from_dict(doc)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (StringMethodError, TypeError, ValueError) as exc:
        print(f"scorestring: invalid configuration: {exc}", file=sys.stderr)
        return 2
    try:
        return HANDLERS[cfg.command](cfg)
    except (DivergenceError, TrainingDivergenceError, BudgetExceededError) as exc:
        where = []
        for attr in ("t", "index", "iteration"):
            v = getattr(exc, attr, None)
            if v is not None:
                where.append(f"{attr}={v}")
        print(f"scorestring: run failed: {exc} ({', '.join(where)})", file=sys.stderr)
        return 3
    except StringMethodError as exc:
        print(f"scorestring: invalid input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
