"""Rotations, rigid motions and arc-length reparametrization of paths on SO(3) and SE(3).

Distances between neighbouring elements are measured on the relative
increment s_i = R_i R_{i-1}^T: its rotation angle on SO(3), and
sqrt(|q_i|^2 + angle^2) on SE(3) with q_i = t_i - t_{i-1}.  New elements
are obtained by scaling the increment in axis-angle coordinates and applying
it to the preceding input element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import BranchAmbiguityError, ConfigurationError

ORTHO_TOL = 1e-9
BRANCH_MARGIN = 1e-6


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix(es) of vector(s) v, shape (..., 3) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def exp_so3(v) -> np.ndarray:
    """Rodrigues formula, vectorized over leading axes."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)[..., None, None]
    K = hat(v)
    small = theta < 1e-8
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(th)) / (th * th))
    return np.eye(3) + a * K + b * (K @ K)


def log_so3(M) -> np.ndarray:
    """Axis-angle vector(s) with angle in [0, pi].

    The angle is atan2(|vee(M - M^T)| / 2, cos) with the trace-derived cosine
    clamped to [-1, 1].
    """
    M = np.asarray(M, dtype=float)
    single = M.ndim == 2
    M = M.reshape(-1, 3, 3)
    tr = np.trace(M, axis1=1, axis2=2)
    cos = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    w = 0.5 * np.stack([M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0], M[:, 1, 0] - M[:, 0, 1]], axis=1)
    sin = np.linalg.norm(w, axis=1)
    # arccos alone loses half the digits near 0 and pi
    theta = np.arctan2(sin, cos)
    out = np.empty((len(M), 3))
    for k in range(len(M)):
        th = theta[k]
        if th < 1e-8:
            out[k] = w[k]
        elif th < math.pi - 1e-4:
            out[k] = th / sin[k] * w[k]
        else:
            # near pi the antisymmetric part vanishes; read the axis off the symmetric part
            B = (0.5 * (M[k] + M[k].T) - cos[k] * np.eye(3)) / (1.0 - cos[k])
            i = int(np.argmax(np.diag(B)))
            n = B[:, i] / math.sqrt(max(B[i, i], 1e-300))
            n /= np.linalg.norm(n)
            if np.dot(n, w[k]) < 0.0:
                n = -n
            out[k] = th * n
    return out[0] if single else out


def _orthonormalize(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def _ortho_error(M) -> float:
    return float(np.linalg.norm(M @ M.T - np.eye(3)))


@dataclass(frozen=True, eq=False)
class Rotation:
    matrix: np.ndarray

    def __post_init__(self):
        M = np.array(self.matrix, dtype=float)
        if M.shape != (3, 3) or not np.all(np.isfinite(M)):
            raise ConfigurationError("rotation matrix must be a finite 3x3 array")
        if _ortho_error(M) > ORTHO_TOL or abs(np.linalg.det(M) - 1.0) > ORTHO_TOL:
            raise ConfigurationError("matrix is not a proper rotation")
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_axis_angle(cls, v) -> "Rotation":
        return cls(exp_so3(v))

    def as_axis_angle(self) -> np.ndarray:
        return log_so3(self.matrix)

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(log_so3(self.matrix)))

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)

    def apply(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.matrix.T

    def allclose(self, other: "Rotation", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))


@dataclass(frozen=True, eq=False)
class RigidMotion:
    translation: np.ndarray
    rotation: Rotation

    def __post_init__(self):
        t = np.array(self.translation, dtype=float)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ConfigurationError("translation must be a finite 3-vector")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidMotion":
        return cls(np.zeros(3), Rotation.identity())

    @classmethod
    def from_vector(cls, v) -> "RigidMotion":
        """6-vector (translation, axis-angle)."""
        v = np.asarray(v, dtype=float)
        return cls(v[:3], Rotation.from_axis_angle(v[3:]))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation.as_axis_angle()])

    def norm(self, scale: float = 1.0) -> float:
        """sqrt(|t|^2 + |R_V|^2), translation scaled by ``scale``."""
        return math.hypot(scale * float(np.linalg.norm(self.translation)), self.rotation.angle)

    def __matmul__(self, other: "RigidMotion") -> "RigidMotion":
        return RigidMotion(self.rotation.apply(other.translation) + self.translation,
                           self.rotation @ other.rotation)

    def allclose(self, other: "RigidMotion", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
                    and self.rotation.allclose(other.rotation, atol))


# ---------------------------------------------------------------------------
# reparametrization


def _increments(Rs, ts, scale):
    S = Rs[1:] @ np.transpose(Rs[:-1], (0, 2, 1))
    sv = log_so3(S).reshape(-1, 3)
    ang = np.linalg.norm(sv, axis=1)
    if np.any(ang >= math.pi - BRANCH_MARGIN):
        i = int(np.argmax(ang)) + 1
        raise BranchAmbiguityError(f"increment {i} has angle {ang[i - 1]:.9f}, too close to pi")
    q = ts[1:] - ts[:-1]
    lengths = np.sqrt(scale * scale * np.sum(q * q, axis=1) + ang * ang)
    return sv, q, lengths


def _group_pass(Rs, ts, K, scale):
    sv, q, lengths = _increments(Rs, ts, scale)
    N = len(lengths)
    L = np.concatenate([[0.0], np.cumsum(lengths)])
    if L[-1] == 0.0:
        return np.repeat(Rs[:1], K + 1, axis=0), np.repeat(ts[:1], K + 1, axis=0)
    alpha = L / L[-1]
    u = np.arange(K + 1) / K
    p = np.searchsorted(alpha, u, side="right") - 1
    p = np.minimum(np.maximum(p, 0), N - 1)
    den = alpha[p + 1] - alpha[p]
    frac = np.where(den > 0, (u - alpha[p]) / np.where(den > 0, den, 1.0), 0.0)
    newR = exp_so3(frac[:, None] * sv[p]) @ Rs[p]
    newt = ts[p] + frac[:, None] * q[p]
    for k in range(1, K):
        if _ortho_error(newR[k]) > 1e-12:
            newR[k] = _orthonormalize(newR[k])
    newR[0], newR[-1] = Rs[0], Rs[-1]
    newt[0], newt[-1] = ts[0], ts[-1]
    return newR, newt


def spacing_ratio_group(Rs, ts, scale: float = 1.0) -> float:
    lengths = _increments(np.asarray(Rs), np.asarray(ts), scale)[2]
    if lengths.min() == 0.0:
        return math.inf
    return float(lengths.max() / lengths.min())


def _reparametrize_arrays(Rs, ts, K, scale, tol, max_passes):
    if len(Rs) < 2:
        raise ConfigurationError("a path needs at least 2 elements")
    if K is None:
        K = len(Rs) - 1
    if K < 1:
        raise ConfigurationError("K must be at least 1")
    Rs, ts = _group_pass(Rs, ts, K, scale)
    for _ in range(max_passes):
        lengths = _increments(Rs, ts, scale)[2]
        if lengths.max() == 0.0 or (lengths.min() > 0 and lengths.max() <= (1.0 + tol) * lengths.min()):
            break
        Rs, ts = _group_pass(Rs, ts, K, scale)
    return Rs, ts


def reparametrize_so3(path: Sequence[Rotation], K: Optional[int] = None, tol: float = 1e-10,
                      max_passes: int = 1000) -> List[Rotation]:
    """K+1 rotations equally spaced in increment angle; endpoints kept exactly.

    One pass scales each axis-angle increment by the fractional abscissa of
    the target point inside its segment.  Increments across segment
    boundaries compose non-commutatively, so passes are repeated (K -> K)
    until the increment angles agree within ``1 + tol``.
    """
    Rs = np.stack([r.matrix for r in path])
    Rs, _ = _reparametrize_arrays(Rs, np.zeros((len(Rs), 3)), K, 1.0, tol, max_passes)
    out = [Rotation(M) for M in Rs]
    out[0], out[-1] = path[0], path[-1]
    return out


def reparametrize_se3(path: Sequence[RigidMotion], K: Optional[int] = None, scale: float = 1.0,
                      tol: float = 1e-10, max_passes: int = 1000) -> List[RigidMotion]:
    """K+1 rigid motions equally spaced under sqrt(scale^2 |q|^2 + angle^2).

    Translation and rotation increments are scaled by the same fractional
    abscissa.  ``scale`` converts translation units to radians (1 by
    default).
    """
    if not scale > 0:
        raise ConfigurationError("scale must be positive")
    Rs = np.stack([m.rotation.matrix for m in path])
    ts = np.stack([m.translation for m in path])
    Rs, ts = _reparametrize_arrays(Rs, ts, K, scale, tol, max_passes)
    out = [RigidMotion(t, Rotation(M)) for t, M in zip(ts, Rs)]
    out[0], out[-1] = path[0], path[-1]
    return out
