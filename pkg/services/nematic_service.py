import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import sparse

from services.quaternion_service import as_quat, dot, tangent_project, unit

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# Relative to the spectral radius of Q
GAP_TOL = 1e-9
QUARTER_ID = 0.25 * np.eye(4)
# Pair order of one cyclic Jacobi sweep on a 4x4 matrix
_SWEEP = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


class DegenerateMaximumError(ValueError):
    """The largest eigenvalue of a Q-tensor is (numerically) multiple."""


@dataclass(frozen=True)
class NematicMean:
    qbar: np.ndarray
    lambda_max: float
    spectral_gap: float


def build_qtensor(quats, weights) -> np.ndarray:
    """
    Weighted nematic tensor (1/N) sum_i w_i (q_i (x) q_i - Id/4)

    Args:
        quats: (N, 4) unit quaternions
        weights: (N,) nonnegative weights

    Returns:
        ndarray: symmetric 4x4 tensor, unchanged by flipping the sign of any q_i
    """
    quats = as_quat(np.atleast_2d(quats))
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if len(quats) == 0 or len(weights) != len(quats):
        raise ValueError(f"build_qtensor needs matching non-empty inputs, got {len(quats)} quats and {len(weights)} weights")
    if np.any(weights < 0.0) or not np.any(weights > 0.0):
        raise ValueError("build_qtensor needs nonnegative weights with at least one positive entry")
    n = len(quats)
    outer = quats[:, :, None] * quats[:, None, :]
    Q = np.einsum("i,ijk->jk", weights, outer) / n
    return Q - QUARTER_ID * (weights.sum() / n)


def build_qtensors(quats, weight_matrix) -> np.ndarray:
    """
    Batched build_qtensor: row k of weight_matrix gives the weights of tensor k

    Args:
        quats: (N, 4) unit quaternions
        weight_matrix: (K, N) nonnegative weights, dense or scipy.sparse

    Returns:
        ndarray: (K, 4, 4) tensors; rows with no positive weight give zero tensors
    """
    quats = as_quat(quats)
    n = quats.shape[0]
    outer = (quats[:, :, None] * quats[:, None, :]).reshape(n, 16)
    return build_qtensors_from_outer(outer, weight_matrix)


def build_qtensors_from_outer(outer, weight_matrix) -> np.ndarray:
    """build_qtensors from precomputed (N, 16) outer products q (x) q."""
    outer = np.asarray(outer, dtype=float).reshape(-1, 16)
    n = outer.shape[0]
    W = weight_matrix if sparse.issparse(weight_matrix) else np.asarray(weight_matrix, dtype=float)
    Q = np.asarray(W @ outer).reshape(-1, 4, 4) / n
    row_sums = np.asarray(W.sum(axis=1), dtype=float).reshape(-1)
    return Q - QUARTER_ID[None] * (row_sums / n)[:, None, None]


def jacobi_eigh(Q, max_sweeps: int = 30) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cyclic Jacobi eigensolver for stacks of symmetric 4x4 matrices

    Args:
        Q: (..., 4, 4) symmetric matrices
        max_sweeps (int): sweep cap; convergence is quadratic so a handful suffice

    Returns:
        tuple: eigenvalues (..., 4) in descending order and matching eigenvectors
        as columns of (..., 4, 4)
    """
    A = np.array(Q, dtype=float, copy=True)
    batch_shape = A.shape[:-2]
    A = A.reshape(-1, 4, 4)
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    V = np.broadcast_to(np.eye(4), A.shape).copy()
    scale = np.maximum(np.abs(A).max(axis=(1, 2)), np.finfo(float).tiny)

    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(A, 1) ** 2, axis=(1, 2)))
        if np.all(off <= 1e-15 * scale):
            break
        for p, q in _SWEEP:
            apq = A[:, p, q]
            active = np.abs(apq) > 1e-300
            safe = np.where(active, apq, 1.0)
            tau = (A[:, q, q] - A[:, p, p]) / (2.0 * safe)
            sign = np.where(tau >= 0.0, 1.0, -1.0)
            t = sign / (np.abs(tau) + np.sqrt(1.0 + np.minimum(tau * tau, 1e300)))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c

            # A <- A P with P the plane rotation in (p, q)
            col_p = A[:, :, p].copy()
            col_q = A[:, :, q]
            A[:, :, p] = c[:, None] * col_p - s[:, None] * col_q
            A[:, :, q] = s[:, None] * col_p + c[:, None] * col_q
            # A <- P^t A
            row_p = A[:, p, :].copy()
            row_q = A[:, q, :]
            A[:, p, :] = c[:, None] * row_p - s[:, None] * row_q
            A[:, q, :] = s[:, None] * row_p + c[:, None] * row_q
            A[:, p, q] = 0.0
            A[:, q, p] = 0.0

            vec_p = V[:, :, p].copy()
            vec_q = V[:, :, q]
            V[:, :, p] = c[:, None] * vec_p - s[:, None] * vec_q
            V[:, :, q] = s[:, None] * vec_p + c[:, None] * vec_q

    values = np.diagonal(A, axis1=1, axis2=2)
    order = np.argsort(-values, axis=1, kind="stable")
    values = np.take_along_axis(values, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    return values.reshape(batch_shape + (4,)), V.reshape(batch_shape + (4, 4))


def principal_eigvec(Q, hint=None, gap_tol: float = GAP_TOL, allow_ties: bool = False) -> NematicMean:
    """
    Maximizer of q.Qq over unit quaternions

    Args:
        Q: symmetric 4x4 tensor
        hint: optional unit quaternion; the returned qbar satisfies qbar.hint >= 0
        gap_tol (float): smallest accepted gap between the two largest eigenvalues,
            as a fraction of the largest eigenvalue magnitude
        allow_ties (bool): return an arbitrary maximizer instead of raising on ties

    Returns:
        NematicMean: principal eigenvector, its eigenvalue and the spectral gap

    Raises:
        DegenerateMaximumError: the largest eigenvalue is multiple
    """
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (4, 4) or not np.allclose(Q, Q.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(Q).max())):
        raise ValueError("principal_eigvec needs a symmetric 4x4 matrix")
    values, vectors = jacobi_eigh(Q)
    gap = float(values[0] - values[1])
    scale = float(np.abs(values).max())
    if gap <= gap_tol * scale and not allow_ties:
        logger.error(f"Degenerate nematic maximum: spectral gap {gap:.3e} below {gap_tol:.1e} x {scale:.3e}")
        raise DegenerateMaximumError(f"Largest eigenvalue is not simple (gap {gap:.3e})")
    qbar = vectors[:, 0]
    if hint is not None and dot(qbar, hint) < 0.0:
        qbar = -qbar
    return NematicMean(qbar=qbar, lambda_max=float(values[0]), spectral_gap=max(gap, 0.0))


def principal_eigvecs(Q, hints=None, gap_tol: float = GAP_TOL) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Batched principal_eigvec that flags ties instead of raising

    A row is degenerate when its top gap is at most gap_tol times its largest
    eigenvalue magnitude; an all-zero tensor is always degenerate.

    Returns:
        tuple: (qbar (K, 4), lambda_max (K,), degenerate mask (K,))
    """
    values, vectors = jacobi_eigh(Q)
    qbar = vectors[..., :, 0]
    if hints is not None:
        flip = dot(qbar, hints) < 0.0
        qbar = np.where(flip[..., None], -qbar, qbar)
    degenerate = (values[..., 0] - values[..., 1]) <= gap_tol * np.abs(values).max(axis=-1)
    return qbar, values[..., 0], degenerate


def maximizer_objective(Q, q) -> float:
    q = as_quat(q)
    return float(q @ np.asarray(Q, dtype=float) @ q)


def relaxation_drift(qbar, q) -> np.ndarray:
    """P_{q-perp}[(qbar (x) qbar - Id/4) q]; the Id/4 part drops out after projection."""
    qbar = as_quat(qbar)
    q = as_quat(q)
    force = dot(qbar, q)[..., None] * qbar - 0.25 * q
    return tangent_project(q, force)


def smoothed_eigvec_error(field: Callable[[np.ndarray], np.ndarray], x0: float, eps: float,
                          order: int = 40) -> float:
    """
    Distance between the local attitude and the nematic mean of its eps-neighbourhood

    The tensor integrates q(x) (x) q(x) - Id/4 against a Gaussian kernel of width
    eps centred at x0 (Gauss-Hermite rule). For smooth fields the principal
    eigenvector moves away from q(x0) at rate eps**2.

    Args:
        field (callable): maps an array of positions (m,) to unit quaternions (m, 4)
        x0 (float): centre
        eps (float): kernel width
        order (int): Gauss-Hermite order

    Returns:
        float: |qbar - q(x0)| with qbar sign-aligned to q(x0)
    """
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / weights.sum()
    quats = unit(field(x0 + eps * nodes))
    Q = build_qtensor(quats, weights * len(weights))
    centre = unit(field(np.array([x0])))[0]
    mean = principal_eigvec(Q, hint=centre)
    return float(np.linalg.norm(mean.qbar - centre))
