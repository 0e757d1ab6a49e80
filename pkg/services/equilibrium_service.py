import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np

from services.quadrature_service import adaptive_gauss_legendre, gauss_legendre_nodes
from services.quaternion_service import ONE, as_quat, dot, matrix_dot, mul, sample_uniform, unit

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

QUAD_RTOL = 1e-12
CDF_PANELS = 4096


def _check_d(d: float) -> float:
    d = float(d)
    if not np.isfinite(d) or d <= 0.0:
        raise ValueError(f"Noise ratio d must be positive and finite, got {d}")
    return d


def weight_m(theta, d: float) -> np.ndarray:
    """m(theta) = exp((1/2 + cos theta)/d): the equilibrium as a function of the rotation angle."""
    d = _check_d(d)
    return np.exp((0.5 + np.cos(theta)) / d)


def _scaled_m(theta, d: float) -> np.ndarray:
    # m(theta) exp(-3/(2d)) <= 1; keeps small-d integrals finite
    return np.exp((np.cos(theta) - 1.0) / d)


@lru_cache(maxsize=256)
def log_normalizer(d: float) -> float:
    """log Z with Z = 4 pi int_0^pi m(theta) sin^2(theta/2) dtheta."""
    d = _check_d(d)
    integral, _ = adaptive_gauss_legendre(lambda t: _scaled_m(t, d) * np.sin(0.5 * t) ** 2, 0.0, np.pi, rtol=QUAD_RTOL)
    return float(np.log(4.0 * np.pi * integral) + 1.5 / d)


def normalizer(d: float) -> float:
    """
    Normalizing constant Z of the equilibrium

    Args:
        d (float): noise ratio D/nu

    Returns:
        float: Z (may overflow to inf for tiny d; use log_normalizer there)
    """
    with np.errstate(over="ignore"):
        return float(np.exp(log_normalizer(d)))


@dataclass(frozen=True)
class EquilibriumDist:
    d: float
    qbar: np.ndarray
    Z: float
    logZ: float

    @classmethod
    def create(cls, d: float, qbar=ONE) -> "EquilibriumDist":
        d = _check_d(d)
        logZ = log_normalizer(d)
        with np.errstate(over="ignore"):
            Z = float(np.exp(logZ))
        return cls(d=d, qbar=unit(qbar), Z=Z, logZ=logZ)


def log_density(dist: EquilibriumDist, q) -> np.ndarray:
    c = dot(dist.qbar, as_quat(q))
    return (2.0 / dist.d) * (c * c - 0.25) - dist.logZ


def density(dist: EquilibriumDist, q) -> np.ndarray:
    """(1/Z) exp((2/d)((qbar.q)^2 - 1/4)), evaluated in log space."""
    return np.exp(log_density(dist, q))


def matrix_log_weight(A, Lam, d: float) -> np.ndarray:
    """Unnormalized log-equilibrium on SO(3): A.Lambda / d."""
    return matrix_dot(A, Lam) / _check_d(d)


def sample(dist: EquilibriumDist, rng: np.random.Generator, size: Optional[int] = None,
           batch: int = 1 << 16) -> np.ndarray:
    """
    Exact samples from the equilibrium by rejection on the rotation angle

    A uniform quaternion has rotation angle with density proportional to
    sin^2(theta/2) on [0, 2 pi] and a uniform axis, which is the envelope
    c sin^2(theta/2) with c = m(0). It is accepted with probability
    m(theta)/m(0) = exp((2/d)(w^2 - 1)) and finally left-multiplied by qbar.

    Args:
        dist (EquilibriumDist): target distribution
        rng (Generator): caller-owned random generator
        size (int): number of samples, None for a single quaternion
        batch (int): proposals drawn per round

    Returns:
        ndarray: (size, 4) or (4,) unit quaternions
    """
    n = 1 if size is None else int(size)
    if n < 0:
        raise ValueError(f"sample size must be nonnegative, got {size}")
    accepted = []
    count = 0
    while count < n:
        proposal = sample_uniform(rng, batch)
        w = proposal[:, 0]
        keep = rng.random(batch) < np.exp((2.0 / dist.d) * (w * w - 1.0))
        chunk = proposal[keep]
        accepted.append(chunk)
        count += len(chunk)
    q = np.concatenate(accepted)[:n] if accepted else np.empty((0, 4))
    q = mul(dist.qbar, q)
    return q[0] if size is None else q


@lru_cache(maxsize=64)
def _cdf_table(d: float) -> Tuple[np.ndarray, np.ndarray]:
    edges = np.linspace(0.0, 2.0 * np.pi, CDF_PANELS + 1)
    nodes, weights = gauss_legendre_nodes(8, 0.0, 1.0)
    h = np.diff(edges)
    pts = edges[:-1, None] + h[:, None] * nodes[None, :]
    vals = _scaled_m(pts, d) * np.sin(0.5 * pts) ** 2
    cumulative = np.concatenate([[0.0], np.cumsum((vals @ weights) * h)])
    return edges, cumulative / cumulative[-1]


def theta_cdf(d: float, theta) -> np.ndarray:
    """CDF of the rotation angle of qbar* q on [0, 2 pi] under the equilibrium."""
    edges, cdf = _cdf_table(_check_d(d))
    return np.interp(np.asarray(theta, dtype=float), edges, cdf)


def rotation_angle(q, qbar=ONE) -> np.ndarray:
    """Angle in [0, 2 pi] of the rotation qbar* q."""
    q = as_quat(q)
    qbar = as_quat(qbar)
    rel = mul(qbar * np.array([1.0, -1.0, -1.0, -1.0]), q)
    return 2.0 * np.arctan2(np.linalg.norm(rel[..., 1:], axis=-1), rel[..., 0])


@lru_cache(maxsize=256)
def i_squared(d: float, order: int = 400) -> float:
    """
    Mean of (Re q)^2 under the equilibrium centred at 1

    With r = Re q the angle integrals reduce to
    I^2 = int r^2 e^{2r^2/d} sqrt(1-r^2) dr / int e^{2r^2/d} sqrt(1-r^2) dr over [-1, 1].
    The substitution r = sin(phi) removes the square-root endpoints.

    Args:
        d (float): noise ratio
        order (int): Gauss-Legendre order in phi

    Returns:
        float: I^2, strictly between 1/4 and 1
    """
    d = _check_d(d)
    phi, w = gauss_legendre_nodes(order, -0.5 * np.pi, 0.5 * np.pi)
    r2 = np.sin(phi) ** 2
    base = np.exp(2.0 * (r2 - 1.0) / d) * np.cos(phi) ** 2
    return float((r2 * base) @ w / (base @ w))


@lru_cache(maxsize=256)
def i_fourth(d: float, order: int = 400) -> float:
    """Mean of (Re q)^4 under the equilibrium centred at 1, same quadrature as i_squared."""
    d = _check_d(d)
    phi, w = gauss_legendre_nodes(order, -0.5 * np.pi, 0.5 * np.pi)
    r2 = np.sin(phi) ** 2
    base = np.exp(2.0 * (r2 - 1.0) / d) * np.cos(phi) ** 2
    return float((r2 * r2 * base) @ w / (base @ w))


def finite_n_alignment(d: float, n: int) -> float:
    """
    Expected empirical alignment of n equilibrium samples against their own principal axis

    The empirical mean of (q_k . qbar_hat)^2 is the top eigenvalue of the sample
    second-moment matrix, which overshoots I^2. To first order in 1/n the excess is
    3 (I^2 - I^4) / ((4 I^2 - 1) n), the remaining three eigenvalues being (1 - I^2)/3.

    Args:
        d (float): noise ratio
        n (int): number of samples sharing the estimated axis

    Returns:
        float: I^2 plus the 1/n excess
    """
    n = int(n)
    if n < 1:
        raise ValueError(f"Sample count must be positive, got {n}")
    i2 = i_squared(d)
    gap = 4.0 * i2 - 1.0
    if gap <= 0.0:
        return i2
    return i2 + 3.0 * (i2 - i_fourth(d)) / (gap * n)
