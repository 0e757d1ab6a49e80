import logging
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.linalg import LinAlgError, solve_banded

from services import __version__
from services.equilibrium_service import EquilibriumDist, sample as sample_equilibrium, weight_m
from services.quaternion_service import as_quat, dot, mul, pure, tangent_project, unit

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

MIN_NODES = 64
RESIDUAL_TOL = 1e-6
THETA_MARGIN = 1e-3


class GciSolverError(RuntimeError):
    """The discretized GCI problem could not be solved."""


class ThetaDomainError(ValueError):
    """k(theta) requested too close to theta = pi."""


@dataclass(frozen=True)
class GciTable:
    """
    Tabulated GCI profile h and its derivative on a symmetric grid of [-1, 1]

    Nodes are r_j = sin(phi_j) with phi uniform on [-pi/2, pi/2]; on the
    nonnegative half they map to rotation angles theta_j = pi - 2 phi_j which
    are uniform on [0, pi].
    """

    d: float
    n_nodes: int
    grid: np.ndarray
    h: np.ndarray
    hprime: np.ndarray
    _spline: CubicHermiteSpline = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_spline", CubicHermiteSpline(self.grid, self.h, self.hprime))

    @property
    def phi(self) -> np.ndarray:
        """Uniform phi nodes of the nonnegative half, phi_0 = 0 ... phi_n = pi/2."""
        return 0.5 * np.pi * np.arange(self.n_nodes + 1) / self.n_nodes

    @property
    def half(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(r, h, hprime) restricted to r >= 0, ordered from r = 0 to r = 1."""
        k = self.n_nodes
        return self.grid[k:], self.h[k:], self.hprime[k:]

    def h_at(self, r) -> np.ndarray:
        return self._spline(np.clip(r, -1.0, 1.0))

    def hprime_at(self, r) -> np.ndarray:
        return self._spline(np.clip(r, -1.0, 1.0), 1)

    def save(self, path: str) -> None:
        """Write the table atomically as .npz."""
        folder = os.path.dirname(os.path.abspath(path))
        os.makedirs(folder, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=folder, suffix=".npz")
        os.close(fd)
        try:
            np.savez(tmp, d=self.d, n_nodes=self.n_nodes, grid=self.grid, h=self.h, hprime=self.hprime,
                     version=__version__)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.remove(tmp)

    @classmethod
    def load(cls, path: str) -> "GciTable":
        with np.load(path, allow_pickle=False) as data:
            return cls(d=float(data["d"]), n_nodes=int(data["n_nodes"]), grid=data["grid"],
                       h=data["h"], hprime=data["hprime"])


@dataclass(frozen=True)
class GciFunction:
    qbar: np.ndarray
    beta: np.ndarray
    table: GciTable

    def __post_init__(self):
        if abs(float(dot(self.beta, self.qbar))) > 1e-10:
            raise ValueError("beta must be orthogonal to qbar")

    @classmethod
    def from_vector(cls, qbar, b, table: GciTable) -> "GciFunction":
        """Tangent direction beta = b qbar for a 3-vector b."""
        qbar = unit(qbar)
        return cls(qbar=qbar, beta=mul(pure(b), qbar), table=table)


def _phi_system(d: float, n: int) -> np.ndarray:
    """
    Central differences in phi for the GCI equation with r = sin(phi)

    In phi the equation reads
        h'' + (4 sin cos / d - 4 tan) h' + (-4 sin^2 / d - 3) h = sin
    with h(0) = 0. At phi = pi/2 the solution is even, so the row there becomes
    5 h'' + (-4/d - 3) h = 1 with the mirrored neighbour.

    Returns:
        ndarray: h at phi_j = (pi/2) j/n, j = 0..n
    """
    step = 0.5 * np.pi / n
    phi = step * np.arange(1, n + 1)
    s = np.sin(phi)
    c = np.cos(phi)
    inv2 = 1.0 / step ** 2

    b = np.zeros(n)
    b[:-1] = 4.0 * s[:-1] * c[:-1] / d - 4.0 * s[:-1] / c[:-1]
    coef = -4.0 * s * s / d - 3.0

    lower = inv2 - b / (2.0 * step)
    upper = inv2 + b / (2.0 * step)
    diag = -2.0 * inv2 + coef
    rhs = s.copy()

    # phi = pi/2: mirrored neighbour, regularity row
    lower[-1] = 10.0 * inv2
    diag[-1] = -10.0 * inv2 + (-4.0 / d - 3.0)
    upper[-1] = 0.0
    rhs[-1] = 1.0

    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1, :] = diag
    ab[2, :-1] = lower[1:]
    try:
        sol = solve_banded((1, 1), ab, rhs)
    except (LinAlgError, ValueError) as e:
        raise GciSolverError(f"GCI system singular for d={d}, n={n}: {e}") from e
    if not np.all(np.isfinite(sol)):
        raise GciSolverError(f"GCI system returned non-finite values for d={d}, n={n}")
    return np.concatenate([[0.0], sol])


def _phi_derivative(values: np.ndarray, step: float, odd_at_zero: bool) -> np.ndarray:
    """
    Fourth-order central derivative in phi using the symmetries at both ends

    Values are odd (or even) about phi = 0 and even about phi = pi/2.
    """
    left = values[2:0:-1]
    left = -left if odd_at_zero else left
    right = values[-2:-4:-1]
    ext = np.concatenate([left, values, right])
    return (-ext[4:] + 8.0 * ext[3:-1] - 8.0 * ext[1:-3] + ext[:-4]) / (12.0 * step)


def solve_h(d: float, n_nodes: int = 512) -> GciTable:
    """
    Solve the GCI profile equation on [0, 1] and reflect it to [-1, 0)

    The second-order scheme is solved on n_nodes and 2 n_nodes intervals of the
    nested phi grids and combined by Richardson extrapolation.

    Args:
        d (float): noise ratio D/nu
        n_nodes (int): intervals on [0, 1]

    Returns:
        GciTable: odd profile h with h <= 0 on [0, 1]

    Raises:
        GciSolverError: the linear system could not be solved
    """
    try:
        d = float(d)
        if not np.isfinite(d) or d <= 0.0:
            raise ValueError(f"d must be positive, got {d}")
        if n_nodes < MIN_NODES:
            raise ValueError(f"n_nodes must be at least {MIN_NODES}, got {n_nodes}")

        coarse = _phi_system(d, n_nodes)
        fine = _phi_system(d, 2 * n_nodes)
        h = (4.0 * fine[::2] - coarse) / 3.0
        h[0] = 0.0

        step = 0.5 * np.pi / n_nodes
        phi = step * np.arange(n_nodes + 1)
        h_phi = _phi_derivative(h, step, odd_at_zero=True)
        cos_phi = np.cos(phi)
        hprime = np.empty_like(h)
        hprime[:-1] = h_phi[:-1] / cos_phi[:-1]
        hprime[-1] = -(1.0 + (4.0 / d + 3.0) * h[-1]) / 5.0

        r = np.sin(phi)
        r[-1] = 1.0
        grid = np.concatenate([-r[:0:-1], r])
        table = GciTable(d=d, n_nodes=n_nodes, grid=grid,
                         h=np.concatenate([-h[:0:-1], h]),
                         hprime=np.concatenate([hprime[:0:-1], hprime]))
        logger.info(f"Solved GCI table for d={d} on {n_nodes} intervals, h(1)={h[-1]:.6e}")
        return table

    except GciSolverError as e:
        logger.error(f"GCI solve failed: {str(e)}")
        raise


def ode_residual(table: GciTable) -> np.ndarray:
    """
    Residual of (-4r^2/d - 3) h + (4(1-r^2)/d - 5) r h' + (1-r^2) h'' - r at interior nodes of [0, 1]

    h'' is taken from finite differences of the tabulated h' in phi, using
    (1 - r^2) h'' = cos(phi) d(h')/dphi.
    """
    d = table.d
    r, h, hp = table.half
    phi = table.phi
    step = phi[1] - phi[0]
    dhp = _phi_derivative(hp, step, odd_at_zero=False)
    residual = (-4.0 * r * r / d - 3.0) * h + (4.0 * (1.0 - r * r) / d - 5.0) * r * hp + np.cos(phi) * dhp - r
    return residual[1:-1]


def eval_psi(gci: GciFunction, q) -> np.ndarray:
    """psi(q) = (beta.q) h(q.qbar)."""
    q = as_quat(q)
    return dot(gci.beta, q) * gci.table.h_at(dot(q, gci.qbar))


def grad_psi(gci: GciFunction, q) -> np.ndarray:
    """Tangential gradient P_{q-perp}[beta h(c) + (beta.q) h'(c) qbar] with c = q.qbar."""
    q = as_quat(q)
    c = dot(q, gci.qbar)
    raw = gci.beta * gci.table.h_at(c)[..., None] + (dot(gci.beta, q) * gci.table.hprime_at(c))[..., None] * gci.qbar
    return tangent_project(q, raw)


@dataclass
class WeakFormDefect:
    names: List[str]
    lhs: np.ndarray
    rhs: np.ndarray
    defect: np.ndarray
    stderr: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        """Defect in units of its Monte-Carlo standard error."""
        return self.defect / np.where(self.stderr > 0.0, self.stderr, np.inf)


def weak_form_test_functions(gci: GciFunction) -> List[Tuple[str, Callable, Callable]]:
    """Low-order polynomial test functions (name, value, euclidean gradient)."""
    beta, qbar = gci.beta, gci.qbar

    def coordinate(a):
        e = np.eye(4)[a]
        return (f"q{a}", lambda q: q[:, a], lambda q: np.broadcast_to(e, q.shape))

    def product(a, b):
        ea, eb = np.eye(4)[a], np.eye(4)[b]
        return (f"q{a}q{b}", lambda q: q[:, a] * q[:, b],
                lambda q: q[:, b, None] * ea + q[:, a, None] * eb)

    funcs = [("one", lambda q: np.ones(len(q)), lambda q: np.zeros_like(q))]
    funcs += [coordinate(a) for a in range(4)]
    funcs.append(("align_beta", lambda q: dot(q, qbar) * dot(q, beta),
                  lambda q: dot(q, beta)[:, None] * qbar + dot(q, qbar)[:, None] * beta))
    funcs.append(("align_sq", lambda q: dot(q, qbar) ** 2, lambda q: 2.0 * dot(q, qbar)[:, None] * qbar))
    funcs.append(product(0, 1))
    funcs.append(product(1, 2))
    funcs.append(("q2q2_minus_q3q3", lambda q: q[:, 2] ** 2 - q[:, 3] ** 2,
                  lambda q: 2.0 * q * np.array([0.0, 0.0, 1.0, -1.0])))
    return funcs


def weak_residual(gci: GciFunction, d: float, n_mc: int, rng: np.random.Generator) -> WeakFormDefect:
    """
    Monte-Carlo defect of the weak GCI equation

    For each test function phi it estimates
        int M grad(psi).grad(phi)  and  -beta . int q (q.qbar) phi M
    from exact equilibrium samples and reports their difference.

    Args:
        gci (GciFunction): psi built from a table solved at d
        d (float): noise ratio of the equilibrium
        n_mc (int): number of samples
        rng (Generator): caller-owned random generator

    Returns:
        WeakFormDefect: per-function sides, defects and standard errors
    """
    try:
        if n_mc < 2:
            raise ValueError(f"n_mc must be at least 2, got {n_mc}")
        dist = EquilibriumDist.create(d, gci.qbar)
        q = sample_equilibrium(dist, rng, n_mc)
        g_psi = grad_psi(gci, q)
        source = dot(gci.beta, q) * dot(q, gci.qbar)

        names, lhs, rhs, defect, stderr = [], [], [], [], []
        for name, value, gradient in weak_form_test_functions(gci):
            left = np.sum(g_psi * gradient(q), axis=-1)
            right = -source * value(q)
            diff = left - right
            names.append(name)
            lhs.append(left.mean())
            rhs.append(right.mean())
            defect.append(diff.mean())
            stderr.append(diff.std(ddof=1) / np.sqrt(n_mc))

        result = WeakFormDefect(names=names, lhs=np.array(lhs), rhs=np.array(rhs),
                                defect=np.array(defect), stderr=np.array(stderr))
        logger.info(f"Weak-form check at d={d}: max |defect|/stderr = {np.max(np.abs(result.normalized)):.2f}")
        return result

    except Exception as e:
        logger.error(f"Weak-form check failed: {str(e)}")
        raise


def k_from_h(table: GciTable) -> Callable[[np.ndarray], np.ndarray]:
    """
    Matrix-side GCI profile k(theta) = 4 h(cos(theta/2)) / cos(theta/2)

    Returns:
        callable: k on [0, pi - 1e-3]; raises ThetaDomainError beyond
    """
    def k(theta):
        theta = np.asarray(theta, dtype=float)
        if np.any(theta > np.pi - THETA_MARGIN) or np.any(theta < 0.0):
            raise ThetaDomainError(f"k(theta) is evaluated on [0, pi - {THETA_MARGIN}], got max {theta.max():.6f}")
        c = np.cos(0.5 * theta)
        return 4.0 * table.h_at(c) / c

    return k


def k_ode_residual(k: Callable[[np.ndarray], np.ndarray], d: float, theta=None, step: float = 2e-3) -> float:
    """
    Max residual of the matrix-side GCI equation

        d/dtheta(s^2 m d/dtheta(sin(theta) k)) - m sin(theta) k / 2 = s^2 sin(theta) m

    with s = sin(theta/2), i.e. the equation multiplied through by s^2. Nested
    central differences with steps `step` and `step/2` are combined by
    Richardson extrapolation and the residual is reported relative to m.

    Args:
        k (callable): profile from k_from_h
        d (float): noise ratio
        theta: evaluation points, default 400 points on [0.05, pi - 0.05]
        step (float): outer finite-difference step

    Returns:
        float: max absolute residual divided by m(theta)
    """
    if theta is None:
        theta = np.linspace(0.05, np.pi - 0.05, 400)
    theta = np.asarray(theta, dtype=float)

    def divergence(t, eps):
        def inner(x):
            # s^2 m d/dtheta(sin(theta) k)
            slope = (np.sin(x + eps) * k(x + eps) - np.sin(x - eps) * k(x - eps)) / (2.0 * eps)
            return np.sin(0.5 * x) ** 2 * weight_m(x, d) * slope
        return (inner(t + eps) - inner(t - eps)) / (2.0 * eps)

    outer = (4.0 * divergence(theta, 0.5 * step) - divergence(theta, step)) / 3.0
    m = weight_m(theta, d)
    s2 = np.sin(0.5 * theta) ** 2
    residual = outer - 0.5 * m * np.sin(theta) * k(theta) - s2 * np.sin(theta) * m
    return float(np.max(np.abs(residual / m)))


def k_node_residual(table: GciTable, margin: float = 0.05) -> float:
    """k_ode_residual on the table's own theta nodes, so no interpolation error enters."""
    spacing = np.pi / table.n_nodes
    margin = max(margin, 5.0 * spacing)
    theta = np.sort(np.pi - 2.0 * table.phi)
    theta = theta[(theta >= margin) & (theta <= np.pi - margin)]
    return k_ode_residual(k_from_h(table), table.d, theta=theta, step=2.0 * spacing)


class GciService:
    """Disk cache of GCI tables keyed by (d, nodes, code version)."""

    def __init__(self, cache_dir: Optional[str] = None):
        self.cache_dir = cache_dir or os.getenv("BODYATT_CACHE_DIR", os.path.join("data", "gci_cache"))

    def _path(self, d: float, n_nodes: int) -> str:
        return os.path.join(self.cache_dir, f"gci_d{float(d)!r}_n{n_nodes}_v{__version__}.npz")

    def get_table(self, d: float, n_nodes: int = 512) -> GciTable:
        """
        Load a cached table when it still passes the residual check, otherwise solve and cache it

        Args:
            d (float): noise ratio
            n_nodes (int): intervals on [0, 1]

        Returns:
            GciTable: the table
        """
        path = self._path(d, n_nodes)
        if os.path.exists(path):
            try:
                table = GciTable.load(path)
                if np.max(np.abs(ode_residual(table))) < RESIDUAL_TOL:
                    logger.info(f"Loaded cached GCI table {path}")
                    return table
                logger.warning(f"Cached GCI table {path} failed the residual check; re-solving")
            except Exception as e:
                logger.warning(f"Could not read cached GCI table {path}: {str(e)}")

        table = solve_h(d, n_nodes)
        try:
            table.save(path)
        except OSError as e:
            logger.warning(f"Could not cache GCI table to {path}: {str(e)}")
        return table
