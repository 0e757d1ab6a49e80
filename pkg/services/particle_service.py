import logging
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy import sparse

from services.config_service import ConfigError
from services.nematic_service import QUARTER_ID, build_qtensors_from_outer, jacobi_eigh, principal_eigvecs, relaxation_drift
from services.quaternion_service import ONE, e1, mul, outer_from_matrix, pure, sample_uniform, to_matrix, unit

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

KERNEL_TYPES = ("indicator", "smooth")
REPRESENTATIONS = ("quaternion", "matrix")
INITIAL_STATES = ("uniform", "aligned")
STABILITY_GUARD = 0.1
POLAR_TOL = 1e-12
POLAR_MAX_ITER = 30
QUADRATURE_POINTS = 64
# Stream keys mixed with the seed; noise streams add the step index
INIT_STREAM = 0
NOISE_STREAM = 1


class InstabilityError(RuntimeError):
    """The state became non-finite; carries the step at which it happened."""

    def __init__(self, step: int, message: str = "non-finite state"):
        self.step = step
        super().__init__(f"step {step}: {message}")


class PolarDecompositionError(ValueError):
    """det(M) <= 0 or the Newton iteration did not converge."""


class NeighborSearchError(ValueError):
    """Interaction radius too large for the minimum-image cell list."""


@dataclass
class SimConfig:
    n_particles: int
    v0: float
    nu: float
    D: float
    kernel: Dict[str, Any]
    dt: float
    t_end: float
    domain: List[float]
    seed: int
    representation: str
    output_stride: int = 10
    snapshot_stride: int = 0
    all_pairs: bool = False
    threads: int = 1
    initial: str = "uniform"

    def validate(self) -> None:
        """Raise ConfigError naming the first offending field."""
        if isinstance(self.n_particles, bool) or not isinstance(self.n_particles, int) or self.n_particles < 1:
            raise ConfigError("n_particles", f"must be a positive integer, got {self.n_particles!r}")
        for name in ("v0", "nu", "D"):
            value = getattr(self, name)
            if not _is_number(value) or value < 0.0:
                raise ConfigError(name, f"must be a nonnegative number, got {value!r}")
        for name in ("dt", "t_end"):
            value = getattr(self, name)
            if not _is_number(value) or value <= 0.0:
                raise ConfigError(name, f"must be a positive number, got {value!r}")
        if self.dt * self.nu > STABILITY_GUARD:
            raise ConfigError("dt", f"dt * nu = {self.dt * self.nu:g} exceeds the stability guard {STABILITY_GUARD}")
        if not isinstance(self.kernel, dict):
            raise ConfigError("kernel", "must be an object {type, radius}")
        if self.kernel.get("type") not in KERNEL_TYPES:
            raise ConfigError("kernel.type", f"must be one of {', '.join(KERNEL_TYPES)}, got {self.kernel.get('type')!r}")
        radius = self.kernel.get("radius")
        if not _is_number(radius) or radius <= 0.0:
            raise ConfigError("kernel.radius", f"must be a positive number, got {radius!r}")
        if (not isinstance(self.domain, (list, tuple)) or len(self.domain) != 3
                or not all(_is_number(x) and x > 0.0 for x in self.domain)):
            raise ConfigError("domain", f"must be three positive box lengths, got {self.domain!r}")
        if radius > 0.5 * min(self.domain) and not self.all_pairs:
            raise ConfigError("kernel.radius", "exceeds half the smallest box length; set all_pairs to use the dense kernel")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed", f"must be a 64-bit nonnegative integer, got {self.seed!r}")
        if self.representation not in REPRESENTATIONS:
            raise ConfigError("representation", f"must be one of {', '.join(REPRESENTATIONS)}, got {self.representation!r}")
        for name, low in (("output_stride", 1), ("snapshot_stride", 0), ("threads", 1)):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < low:
                raise ConfigError(name, f"must be an integer >= {low}, got {value!r}")
        if self.initial not in INITIAL_STATES:
            raise ConfigError("initial", f"must be one of {', '.join(INITIAL_STATES)}, got {self.initial!r}")

    @property
    def radius(self) -> float:
        return float(self.kernel["radius"])

    @property
    def kernel_type(self) -> str:
        return self.kernel["type"]

    @property
    def box(self) -> np.ndarray:
        return np.asarray(self.domain, dtype=float)

    @property
    def n_steps(self) -> int:
        return max(int(round(self.t_end / self.dt)), 1)


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and np.isfinite(value)


@dataclass(frozen=True)
class ParticleEnsemble:
    positions: np.ndarray
    attitudes: np.ndarray
    time: float = 0.0
    step: int = 0
    representation: str = "quaternion"
    fallbacks: int = 0

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def directions(self) -> np.ndarray:
        if self.representation == "matrix":
            return self.attitudes[:, :, 0]
        return e1(self.attitudes)

    def outer(self) -> np.ndarray:
        """(N, 4, 4) products q (x) q, from either representation."""
        if self.representation == "matrix":
            return outer_from_matrix(self.attitudes)
        q = self.attitudes
        return q[:, :, None] * q[:, None, :]


@dataclass(frozen=True)
class Observables:
    time: float
    step: int
    nematic_order: float
    mean_direction: Tuple[float, float, float]
    polar_speed: float
    energy: float
    fallbacks: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "time": self.time,
            "step": self.step,
            "nematic_order": self.nematic_order,
            "mean_direction": list(self.mean_direction),
            "polar_speed": self.polar_speed,
            "energy": self.energy,
            "fallbacks": self.fallbacks,
        }


@dataclass(frozen=True)
class NeighborWeights:
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    n: int

    def matrix(self, scale: float = 1.0) -> sparse.csr_matrix:
        return sparse.csr_matrix((self.weights * scale, (self.rows, self.cols)), shape=(self.n, self.n))

    def as_set(self) -> Dict[Tuple[int, int], float]:
        return {(int(i), int(j)): float(w) for i, j, w in zip(self.rows, self.cols, self.weights)}


# ----------------------------------------------------------------------------
# Kernel and neighbours
# ----------------------------------------------------------------------------

def kernel_profile(r, radius: float, kernel_type: str = "indicator") -> np.ndarray:
    """Unnormalized K(r): 1 on the ball, or (1 - r^2/R^2)^2 for the smooth kernel."""
    r = np.asarray(r, dtype=float)
    inside = r <= radius
    if kernel_type == "indicator":
        return inside.astype(float)
    if kernel_type == "smooth":
        return np.where(inside, (1.0 - (r / radius) ** 2) ** 2, 0.0)
    raise ValueError(f"Unknown kernel type {kernel_type!r}")


def kernel_normalization(radius: float, box, kernel_type: str = "indicator") -> float:
    """
    Constant c with int_box c K(|x|) dx = 1 under the minimum image

    Closed forms hold while the ball fits in the box; otherwise the integral is
    taken by midpoint quadrature on the centred box.
    """
    box = np.asarray(box, dtype=float)
    if radius <= 0.5 * box.min():
        if kernel_type == "indicator":
            return 3.0 / (4.0 * np.pi * radius ** 3)
        if kernel_type == "smooth":
            return 105.0 / (32.0 * np.pi * radius ** 3)
        raise ValueError(f"Unknown kernel type {kernel_type!r}")
    axes = [(np.arange(QUADRATURE_POINTS) + 0.5) / QUADRATURE_POINTS * L - 0.5 * L for L in box]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    cell = np.prod(box) / QUADRATURE_POINTS ** 3
    integral = kernel_profile(np.sqrt(X ** 2 + Y ** 2 + Z ** 2), radius, kernel_type).sum() * cell
    return 1.0 / integral


def minimum_image(delta, box) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    return delta - box * np.round(delta / box)


def wrap(positions, box) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    x = np.mod(positions, box)
    return np.where(x >= box, x - box, x)


def _all_pairs(n: int) -> Tuple[np.ndarray, np.ndarray]:
    rows = np.repeat(np.arange(n), n)
    cols = np.tile(np.arange(n), n)
    return rows, cols


def _cell_list_pairs(positions: np.ndarray, box: np.ndarray, ncell: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n = len(positions)
    coords = np.minimum((positions / box * ncell).astype(int), ncell - 1)
    cell_id = np.ravel_multi_index(coords.T, ncell)
    order = np.argsort(cell_id, kind="stable")
    counts = np.bincount(cell_id, minlength=int(np.prod(ncell)))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    rows, cols = [], []
    for offset in product((-1, 0, 1), repeat=3):
        nb = np.ravel_multi_index(((coords + offset) % ncell).T, ncell)
        cnt = counts[nb]
        total = int(cnt.sum())
        if total == 0:
            continue
        first = np.repeat(np.cumsum(cnt) - cnt, cnt)
        within = np.arange(total) - first
        rows.append(np.repeat(np.arange(n), cnt))
        cols.append(order[np.repeat(starts[nb], cnt) + within])
    return np.concatenate(rows), np.concatenate(cols)


def neighbor_search(positions, radius: float, box, kernel_type: str = "indicator",
                    all_pairs: bool = False) -> NeighborWeights:
    """
    Kernel weights K(|X_i - X_k|) of all interacting pairs, self-pairs included

    Args:
        positions: (N, 3) positions inside the box
        radius (float): kernel radius R
        box: three periodic box lengths
        kernel_type (str): indicator or smooth
        all_pairs (bool): skip the cell list and test every pair

    Returns:
        NeighborWeights: pairs sorted by (row, col) with positive weights

    Raises:
        NeighborSearchError: R above half the smallest box length without all_pairs
    """
    positions = np.asarray(positions, dtype=float)
    box = np.asarray(box, dtype=float)
    n = len(positions)
    if radius > 0.5 * box.min() and not all_pairs:
        raise NeighborSearchError(f"Kernel radius {radius} exceeds half the box ({0.5 * box.min()}); use all_pairs")

    ncell = np.maximum((box // radius).astype(int), 1)
    if all_pairs or np.any(ncell < 3):
        rows, cols = _all_pairs(n)
    else:
        rows, cols = _cell_list_pairs(wrap(positions, box), box, ncell)

    dist = np.linalg.norm(minimum_image(positions[cols] - positions[rows], box), axis=1)
    weights = kernel_profile(dist, radius, kernel_type)
    keep = weights > 0.0
    rows, cols, weights = rows[keep], cols[keep], weights[keep]
    order = np.lexsort((cols, rows))
    return NeighborWeights(rows=rows[order], cols=cols[order], weights=weights[order], n=n)


@lru_cache(maxsize=16)
def _cached_normalization(radius: float, box: Tuple[float, ...], kernel_type: str) -> float:
    return kernel_normalization(radius, np.asarray(box), kernel_type)


def interaction_matrix(positions, cfg: SimConfig) -> sparse.csr_matrix:
    pairs = neighbor_search(positions, cfg.radius, cfg.box, cfg.kernel_type, cfg.all_pairs)
    scale = _cached_normalization(cfg.radius, tuple(float(x) for x in cfg.domain), cfg.kernel_type)
    return pairs.matrix(scale)


# ----------------------------------------------------------------------------
# Polar decomposition
# ----------------------------------------------------------------------------

def polar_decompose_batch(M) -> np.ndarray:
    """
    Orthogonal polar factors of a stack of 3x3 matrices with positive determinant

    Scaled Newton iteration X <- (gX + (gX)^{-t})/2 started at M, with the
    Frobenius scaling g switched off once the update is small.

    Raises:
        PolarDecompositionError: a determinant is not positive or the
        iteration fails to reach 1e-12 within 30 steps
    """
    X = np.array(M, dtype=float, copy=True).reshape(-1, 3, 3)
    if len(X) == 0:
        return X.reshape(np.shape(M))
    det = np.linalg.det(X)
    if not np.all(np.isfinite(det)) or np.any(det <= 0.0):
        raise PolarDecompositionError(f"Polar decomposition needs det(M) > 0, got min {float(np.min(det)):.3e}")

    delta = np.inf
    for _ in range(POLAR_MAX_ITER):
        inv_t = np.swapaxes(np.linalg.inv(X), -1, -2)
        if delta > 1e-2:
            g = np.sqrt(np.linalg.norm(inv_t, axis=(1, 2)) / np.linalg.norm(X, axis=(1, 2)))[:, None, None]
        else:
            g = 1.0
        X_new = 0.5 * (g * X + inv_t / g)
        delta = float(np.max(np.linalg.norm(X_new - X, axis=(1, 2)) / np.linalg.norm(X_new, axis=(1, 2))))
        X = X_new
        if delta <= POLAR_TOL:
            break
    else:
        raise PolarDecompositionError(f"Polar Newton iteration did not converge (last update {delta:.3e})")
    return X.reshape(np.shape(M))


def polar_decompose(M) -> np.ndarray:
    """Rotation A of M = A S with S symmetric positive definite."""
    M = np.asarray(M, dtype=float)
    if M.shape != (3, 3):
        raise ValueError(f"polar_decompose needs a 3x3 matrix, got shape {M.shape}")
    return polar_decompose_batch(M[None])[0]


def tangent_projection(A, X) -> np.ndarray:
    """P_{T_A} X = (X - A X^t A)/2 on the tangent space of SO(3) at A."""
    return 0.5 * (X - A @ np.swapaxes(X, -1, -2) @ A)


# ----------------------------------------------------------------------------
# Steps
# ----------------------------------------------------------------------------

def step_rng(seed: int, step: int) -> np.random.Generator:
    """Noise stream of one step; row k of each draw belongs to particle k."""
    return np.random.default_rng([int(seed), NOISE_STREAM, int(step)])


def _blocked(fn: Callable[[slice], Tuple[np.ndarray, ...]], n: int, threads: int,
             executor: Optional[Executor]) -> Tuple[np.ndarray, ...]:
    if executor is None or threads <= 1 or n < 2 * threads:
        return fn(slice(0, n))
    bounds = np.linspace(0, n, threads + 1).astype(int)
    parts = list(executor.map(fn, [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]))
    return tuple(np.concatenate(chunk) for chunk in zip(*parts))


def _advance_positions(state: ParticleEnsemble, cfg: SimConfig) -> np.ndarray:
    return wrap(state.positions + cfg.v0 * cfg.dt * state.directions(), cfg.box)


def _check_finite(step: int, *arrays) -> None:
    if not all(np.all(np.isfinite(a)) for a in arrays):
        logger.error(f"Non-finite particle state at step {step}")
        raise InstabilityError(step)


def step_quaternion(state: ParticleEnsemble, cfg: SimConfig, rng: np.random.Generator,
                    executor: Optional[Executor] = None) -> ParticleEnsemble:
    """
    One tangent Euler step of the quaternion model followed by renormalization

    The tangent noise is u q with u a standard 3-dimensional Gaussian, which has
    the law of P_{q-perp} xi for a standard 4-dimensional xi and flips sign with q.
    """
    if state.representation != "quaternion":
        raise ValueError("step_quaternion needs a quaternion ensemble")
    q = state.attitudes
    n = state.n
    W = interaction_matrix(state.positions, cfg)
    outer = (q[:, :, None] * q[:, None, :]).reshape(n, 16)

    def forces(rows: slice):
        Q = build_qtensors_from_outer(outer, W[rows])
        qbar, _, degenerate = principal_eigvecs(Q, hints=q[rows])
        drift = relaxation_drift(qbar, q[rows])
        drift[degenerate] = 0.0
        return drift, degenerate

    drift, degenerate = _blocked(forces, n, cfg.threads, executor)
    noise = mul(pure(rng.standard_normal((n, 3))), q)
    candidate = q + cfg.nu * cfg.dt * drift + np.sqrt(0.5 * cfg.D * cfg.dt) * noise
    _check_finite(state.step + 1, candidate)

    return ParticleEnsemble(
        positions=_advance_positions(state, cfg),
        attitudes=unit(candidate),
        time=state.time + cfg.dt,
        step=state.step + 1,
        representation="quaternion",
        fallbacks=state.fallbacks + int(np.count_nonzero(degenerate)),
    )


def step_matrix(state: ParticleEnsemble, cfg: SimConfig, rng: np.random.Generator,
                executor: Optional[Executor] = None) -> ParticleEnsemble:
    """
    One tangent Euler step of the rotation-matrix model followed by polar projection

    Drift nu P_T(PD(M_k)) with M_k the kernel-weighted mean rotation, noise
    2 sqrt(D) P_T(G) with G a 3x3 standard Gaussian. Particles whose M_k has
    det <= 0 only diffuse this step.
    """
    if state.representation != "matrix":
        raise ValueError("step_matrix needs a matrix ensemble")
    A = state.attitudes
    n = state.n
    W = interaction_matrix(state.positions, cfg)
    flat = A.reshape(n, 9)

    def forces(rows: slice):
        M = np.asarray(W[rows] @ flat).reshape(-1, 3, 3) / n
        ok = np.linalg.det(M) > 0.0
        target = np.zeros_like(M)
        if np.any(ok):
            target[ok] = polar_decompose_batch(M[ok])
        drift = tangent_projection(A[rows], target)
        drift[~ok] = 0.0
        return drift, ~ok

    drift, degenerate = _blocked(forces, n, cfg.threads, executor)
    noise = tangent_projection(A, rng.standard_normal((n, 3, 3)))
    candidate = A + cfg.nu * cfg.dt * drift + 2.0 * np.sqrt(cfg.D * cfg.dt) * noise
    _check_finite(state.step + 1, candidate)
    try:
        projected = polar_decompose_batch(candidate)
    except PolarDecompositionError as e:
        raise InstabilityError(state.step + 1, str(e))

    return ParticleEnsemble(
        positions=_advance_positions(state, cfg),
        attitudes=projected,
        time=state.time + cfg.dt,
        step=state.step + 1,
        representation="matrix",
        fallbacks=state.fallbacks + int(np.count_nonzero(degenerate)),
    )


# ----------------------------------------------------------------------------
# Observables
# ----------------------------------------------------------------------------

def global_qtensor(state: ParticleEnsemble) -> np.ndarray:
    return state.outer().mean(axis=0) - QUARTER_ID


def observe(state: ParticleEnsemble, cfg: SimConfig) -> Observables:
    """Global nematic order, mean heading and mean local alignment energy."""
    values, _ = jacobi_eigh(global_qtensor(state))
    directions = state.directions()
    mean_direction = directions.mean(axis=0)
    W = interaction_matrix(state.positions, cfg)
    local, _ = jacobi_eigh(build_qtensors_from_outer(state.outer().reshape(state.n, 16), W))
    return Observables(
        time=float(state.time),
        step=int(state.step),
        nematic_order=float(values[0]),
        mean_direction=tuple(float(x) for x in mean_direction),
        polar_speed=float(min(np.linalg.norm(mean_direction), 1.0)),
        energy=float(local[:, 0].mean()),
        fallbacks=int(state.fallbacks),
    )


def alignment_samples(state: ParticleEnsemble) -> np.ndarray:
    """(q_k . qbar)^2 for every particle, qbar the principal axis of the whole ensemble."""
    _, vectors = jacobi_eigh(global_qtensor(state))
    qbar = vectors[:, 0]
    return np.einsum("i,kij,j->k", qbar, state.outer(), qbar)


def snapshot_header(representation: str) -> List[str]:
    if representation == "matrix":
        entries = [f"a{i}{j}" for i in range(1, 4) for j in range(1, 4)]
    else:
        entries = ["w", "qx", "qy", "qz"]
    return ["step", "particle", "x1", "x2", "x3"] + entries


def snapshot_rows(state: ParticleEnsemble) -> List[List[Any]]:
    attitudes = state.attitudes.reshape(state.n, -1)
    return [[state.step, k] + [repr(float(x)) for x in state.positions[k]] + [repr(float(x)) for x in attitudes[k]]
            for k in range(state.n)]


# ----------------------------------------------------------------------------
# Driver
# ----------------------------------------------------------------------------

class ParticleSimulator:
    def __init__(self, cfg: SimConfig):
        cfg.validate()
        self.cfg = cfg

    def initial_state(self) -> ParticleEnsemble:
        """Uniform positions; uniform or identical attitudes. Both representations share the draw."""
        rng = np.random.default_rng([int(self.cfg.seed), INIT_STREAM])
        n = self.cfg.n_particles
        positions = rng.random((n, 3)) * self.cfg.box
        if self.cfg.initial == "aligned":
            quats = np.tile(ONE, (n, 1))
        else:
            quats = sample_uniform(rng, n)
        attitudes = to_matrix(quats) if self.cfg.representation == "matrix" else quats
        return ParticleEnsemble(positions=positions, attitudes=attitudes, representation=self.cfg.representation)

    def from_quaternions(self, positions, quats) -> ParticleEnsemble:
        positions = wrap(np.asarray(positions, dtype=float), self.cfg.box)
        quats = unit(np.asarray(quats, dtype=float))
        attitudes = to_matrix(quats) if self.cfg.representation == "matrix" else quats
        return ParticleEnsemble(positions=positions, attitudes=attitudes, representation=self.cfg.representation)

    def step(self, state: ParticleEnsemble, executor: Optional[Executor] = None) -> ParticleEnsemble:
        rng = step_rng(self.cfg.seed, state.step)
        if self.cfg.representation == "matrix":
            return step_matrix(state, self.cfg, rng, executor)
        return step_quaternion(state, self.cfg, rng, executor)

    def trajectory(self, state: Optional[ParticleEnsemble] = None,
                   n_steps: Optional[int] = None) -> Iterator[ParticleEnsemble]:
        """Yield the state after every step, starting with the initial state."""
        state = self.initial_state() if state is None else state
        n_steps = self.cfg.n_steps if n_steps is None else n_steps
        yield state
        executor = ThreadPoolExecutor(max_workers=self.cfg.threads) if self.cfg.threads > 1 else None
        try:
            for _ in range(n_steps):
                state = self.step(state, executor)
                yield state
        finally:
            if executor is not None:
                executor.shutdown()

    def run(self, state: Optional[ParticleEnsemble] = None,
            snapshot: Optional[Callable[[ParticleEnsemble], None]] = None) -> Iterator[Observables]:
        """
        Observables every output_stride steps and at the final step

        Args:
            state (ParticleEnsemble): initial state; drawn from the seed if None
            snapshot (callable): receives the full state every snapshot_stride steps

        Yields:
            Observables
        """
        cfg = self.cfg
        n_steps = cfg.n_steps
        logger.info(f"Running {cfg.representation} ensemble: N={cfg.n_particles}, steps={n_steps}, seed={cfg.seed}")
        last = None
        for state in self.trajectory(state, n_steps):
            last = state
            if snapshot is not None and cfg.snapshot_stride and state.step % cfg.snapshot_stride == 0:
                snapshot(state)
            if state.step % cfg.output_stride == 0 or state.step == n_steps:
                yield observe(state, cfg)
        if last is not None and last.fallbacks:
            logger.info(f"Diffusion fallbacks over the run: {last.fallbacks}")
        logger.info(f"Finished {cfg.representation} run at t={last.time if last else 0.0:.6g}")
