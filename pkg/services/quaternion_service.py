"""
Quaternion and rotation algebra.

Storage convention: every quaternion is a float array whose last axis holds
(w, x, y, z), scalar first, Hamilton product (i j = k). Functions broadcast over
leading axes so a stack of N attitudes is simply an (N, 4) array. Rotation
matrices are (..., 3, 3) arrays and vectors (..., 3) arrays.

No canonical sign is imposed: q and -q are the same rotation and modules that
need continuity choose signs locally.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from services.quadrature_service import gauss_legendre_nodes, sphere_rule

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

UNIT_TOL = 1e-12
TANGENT_TOL = 1e-8
AXIS_DEGENERACY = 1e-9

ONE = np.array([1.0, 0.0, 0.0, 0.0])
I = np.array([0.0, 1.0, 0.0, 0.0])
J = np.array([0.0, 0.0, 1.0, 0.0])
K = np.array([0.0, 0.0, 0.0, 1.0])
H1_VOLUME = 2.0 * np.pi ** 2


class PreconditionError(ValueError):
    """An input violates an operation's geometric precondition."""


@dataclass(frozen=True)
class AxisAngle:
    theta: float
    axis: np.ndarray
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        if not 0.0 <= self.theta <= 2.0 * np.pi:
            raise ValueError(f"theta must lie in [0, 2*pi], got {self.theta}")
        if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > UNIT_TOL:
            raise ValueError(f"axis must be a unit 3-vector, got {axis}")
        object.__setattr__(self, "axis", axis)


def as_quat(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1:] != (4,):
        raise ValueError(f"Quaternion arrays need a trailing axis of length 4, got shape {p.shape}")
    return p


def unit(p) -> np.ndarray:
    """Renormalize onto the unit sphere; raises on zero quaternions."""
    p = as_quat(p)
    n = norm(p)
    if np.any(n == 0.0) or not np.all(np.isfinite(n)):
        raise ValueError("Cannot normalize a zero or non-finite quaternion")
    return p / n[..., None] if p.ndim > 1 else p / n


def mul(p, q) -> np.ndarray:
    """Hamilton product p q."""
    p = as_quat(p)
    q = as_quat(q)
    pw, px, py, pz = np.moveaxis(p, -1, 0)
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    return np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


def conj(p) -> np.ndarray:
    p = as_quat(p)
    return p * np.array([1.0, -1.0, -1.0, -1.0])


def dot(p, q) -> np.ndarray:
    return np.sum(as_quat(p) * as_quat(q), axis=-1)


def norm(p) -> np.ndarray:
    return np.sqrt(dot(p, p))


def pure(v) -> np.ndarray:
    """Embed a 3-vector as the imaginary quaternion (0, v)."""
    v = np.asarray(v, dtype=float)
    return np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)


def imag(p) -> np.ndarray:
    return as_quat(p)[..., 1:]


def from_axis_angle(aa: AxisAngle) -> np.ndarray:
    return from_axis_angle_array(aa.theta, aa.axis)


def from_axis_angle_array(theta, axis) -> np.ndarray:
    """Vectorized cos(theta/2) + sin(theta/2) n."""
    theta = np.asarray(theta, dtype=float)
    axis = np.asarray(axis, dtype=float)
    half = 0.5 * theta
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def to_axis_angle(q) -> AxisAngle:
    """
    Inverse of from_axis_angle for a single quaternion

    Args:
        q: unit quaternion (w, x, y, z)

    Returns:
        AxisAngle: theta in [0, 2*pi]; when theta is within 1e-9 of 0 or 2*pi the
        axis is undefined and the flagged default (0, 0, 1) is returned
    """
    q = unit(q)
    v = q[1:]
    s = float(np.linalg.norm(v))
    theta = 2.0 * float(np.arctan2(s, q[0]))
    if theta < AXIS_DEGENERACY or 2.0 * np.pi - theta < AXIS_DEGENERACY:
        return AxisAngle(theta=min(max(theta, 0.0), 2.0 * np.pi), axis=np.array([0.0, 0.0, 1.0]), degenerate=True)
    return AxisAngle(theta=theta, axis=v / s)


def exp_map(u) -> np.ndarray:
    """exp(u) = cos|u| + sin|u| u/|u| for imaginary u, smooth at u = 0."""
    u = np.asarray(u, dtype=float)
    a = np.linalg.norm(u, axis=-1)
    sinc = np.sinc(a / np.pi)
    return np.concatenate([np.cos(a)[..., None], sinc[..., None] * u], axis=-1)


def log_map(q) -> np.ndarray:
    """Principal logarithm of a unit quaternion, |log q| <= pi."""
    q = unit(q)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    a = np.arctan2(s, q[..., 0])
    # a / sin(a) written through sinc to stay finite at a = 0
    scale = 1.0 / np.sinc(a / np.pi)
    return scale[..., None] * v


def rotate(q, v) -> np.ndarray:
    """Im(q v q*) for unit q; the same for q and -q."""
    q = as_quat(q)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def to_matrix(q) -> np.ndarray:
    """The 2-to-1 morphism onto SO(3): column i is rotate(q, e_i)."""
    q = as_quat(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z], axis=-1),
    ], axis=-2)


def outer_from_matrix(A) -> np.ndarray:
    """
    q (x) q for either preimage q of a rotation matrix A

    Every entry of q (x) q is linear in the entries of to_matrix(q), so the
    nematic tensor of a rotation ensemble needs no quaternion lift.
    """
    A = np.asarray(A, dtype=float)
    a = lambda i, j: A[..., i, j]
    tr = a(0, 0) + a(1, 1) + a(2, 2)
    ww = 1.0 + tr
    xx = 1.0 + a(0, 0) - a(1, 1) - a(2, 2)
    yy = 1.0 - a(0, 0) + a(1, 1) - a(2, 2)
    zz = 1.0 - a(0, 0) - a(1, 1) + a(2, 2)
    wx = a(2, 1) - a(1, 2)
    wy = a(0, 2) - a(2, 0)
    wz = a(1, 0) - a(0, 1)
    xy = a(0, 1) + a(1, 0)
    xz = a(0, 2) + a(2, 0)
    yz = a(1, 2) + a(2, 1)
    return 0.25 * np.stack([
        np.stack([ww, wx, wy, wz], axis=-1),
        np.stack([wx, xx, xy, xz], axis=-1),
        np.stack([wy, xy, yy, yz], axis=-1),
        np.stack([wz, xz, yz, zz], axis=-1),
    ], axis=-2)


def e1(q) -> np.ndarray:
    """Body direction of motion, the first column of to_matrix(q)."""
    q = as_quat(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([w * w + x * x - y * y - z * z, 2 * (x * y + w * z), 2 * (x * z - w * y)], axis=-1)


def hat(u) -> np.ndarray:
    """Antisymmetric matrix [u]x with [u]x v = u x v."""
    u = np.asarray(u, dtype=float)
    u1, u2, u3 = np.moveaxis(u, -1, 0)
    zero = np.zeros_like(u1)
    return np.stack([
        np.stack([zero, -u3, u2], axis=-1),
        np.stack([u3, zero, -u1], axis=-1),
        np.stack([-u2, u1, zero], axis=-1),
    ], axis=-2)


def vee(S) -> np.ndarray:
    """Inverse of hat on the antisymmetric part of S."""
    S = np.asarray(S, dtype=float)
    return 0.5 * np.stack([
        S[..., 2, 1] - S[..., 1, 2],
        S[..., 0, 2] - S[..., 2, 0],
        S[..., 1, 0] - S[..., 0, 1],
    ], axis=-1)


def matrix_dot(A, B) -> np.ndarray:
    """Scalar product A.B = Tr(A^t B)/2 used on SO(3)."""
    return 0.5 * np.sum(np.asarray(A) * np.asarray(B), axis=(-2, -1))


def dphi(q, u) -> np.ndarray:
    """Differential of to_matrix at q along the tangent u q: 2 [u]x to_matrix(q)."""
    return 2.0 * hat(u) @ to_matrix(q)


def tangent_project(q, p) -> np.ndarray:
    """P_{q-perp} p for unit q."""
    q = as_quat(q)
    p = as_quat(p)
    return p - dot(q, p)[..., None] * q


def rel_derivative(dq, q, tol: float = TANGENT_TOL) -> np.ndarray:
    """
    Right relative derivative Im(dq q*) of a tangent vector

    Args:
        dq: quaternion tangent to the unit sphere at q
        q: unit quaternion
        tol (float): orthogonality tolerance

    Returns:
        ndarray: the 3-vector u with dq = u q

    Raises:
        PreconditionError: dq is not orthogonal to q
    """
    dq = as_quat(dq)
    q = as_quat(q)
    off = np.abs(dot(dq, q))
    if np.any(off > tol):
        raise PreconditionError(f"rel_derivative needs dq orthogonal to q, |dq.q| = {float(np.max(off)):.3e}")
    return imag(mul(dq, conj(q)))


def sample_uniform(rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Uniform unit quaternions from normalized 4-dimensional Gaussians."""
    shape = (4,) if size is None else (size, 4)
    g = rng.standard_normal(shape)
    return unit(g)


def mc_integral(f: Callable[[np.ndarray], np.ndarray], n: int, rng: np.random.Generator,
                chunk: int = 1 << 18) -> Tuple[float, float]:
    """
    Monte-Carlo estimate of the integral of f over the unit quaternions

    Args:
        f (callable): vectorized function of an (m, 4) array of unit quaternions
        n (int): number of samples
        rng (Generator): caller-owned random generator
        chunk (int): samples evaluated per batch

    Returns:
        tuple: (estimate of the integral, its standard error)
    """
    if n < 1:
        raise ValueError(f"mc_integral needs n >= 1, got {n}")
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        values = np.asarray(f(sample_uniform(rng, m)), dtype=float)
        total += float(values.sum())
        total_sq += float(np.square(values).sum())
        done += m
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0)
    stderr = H1_VOLUME * np.sqrt(var / n) if n > 1 else float("inf")
    return H1_VOLUME * mean, float(stderr)


def so3_average(g: Callable[[np.ndarray], np.ndarray], n_theta: int = 64,
                n_polar: int = 16, n_azimuth: int = 32) -> float:
    """
    Haar average of g over SO(3) by quadrature

    The rotation angle has density (1 - cos t)/pi on [0, pi] and the axis is
    uniform on the sphere. This is the matrix side of the volume correspondence
    with the unit quaternions: mc_integral(g o to_matrix) / (2 pi^2).

    Args:
        g (callable): vectorized function of (m, 3, 3) rotation matrices

    Returns:
        float: the average
    """
    t, wt = gauss_legendre_nodes(n_theta, 0.0, np.pi)
    axes, wa = sphere_rule(n_polar, n_azimuth)
    theta = np.repeat(t, len(axes))
    axis = np.tile(axes, (len(t), 1))
    weights = np.repeat(wt * (1.0 - np.cos(t)) / np.pi, len(axes)) * np.tile(wa / (4.0 * np.pi), len(t))
    mats = to_matrix(from_axis_angle_array(theta, axis))
    return float(np.asarray(g(mats), dtype=float) @ weights)
