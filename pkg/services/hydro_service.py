import logging
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, NamedTuple, Optional

import numpy as np

from services.coefficient_service import HydroCoefficients
from services.config_service import ConfigError
from services.quaternion_service import (ONE, conj, e1, exp_map, hat, imag, mul, pure, tangent_project, to_matrix, unit,
                                         vee)

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

CFL_LIMIT = 0.4
RHO_FLOOR = 1e-10
INITIAL_TYPES = ("uniform", "bump", "twist", "random")
E1 = np.array([1.0, 0.0, 0.0])


class CflViolationError(ValueError):
    """dt max(c1, c2) / dx above the explicit stability limit."""


class TopologicalDefectError(ValueError):
    """The nematic lift of the field does not close around the periodic loop."""


class InstabilityError(RuntimeError):
    """Non-finite values or negative density; carries the step index."""

    def __init__(self, step: int, message: str = "non-finite field"):
        self.step = step
        super().__init__(f"step {step}: {message}")


@dataclass
class PdeConfig:
    n_cells: int
    dx: float
    dt: float
    t_end: float
    d: float
    initial: Dict[str, Any]
    frame_stride: int = 100
    rho_floor: float = RHO_FLOOR
    gci_nodes: int = 512
    threads: int = 1

    def validate(self) -> None:
        if isinstance(self.n_cells, bool) or not isinstance(self.n_cells, int) or self.n_cells < 3:
            raise ConfigError("n_cells", f"must be an integer >= 3, got {self.n_cells!r}")
        for name in ("dx", "dt", "t_end", "d"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not np.isfinite(value) or value <= 0.0:
                raise ConfigError(name, f"must be a positive number, got {value!r}")
        if not isinstance(self.initial, dict) or self.initial.get("type") not in INITIAL_TYPES:
            raise ConfigError("initial.type", f"must be one of {', '.join(INITIAL_TYPES)}")
        for name, low in (("frame_stride", 0), ("gci_nodes", 64), ("threads", 1)):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < low:
                raise ConfigError(name, f"must be an integer >= {low}, got {value!r}")
        if not isinstance(self.rho_floor, (int, float)) or self.rho_floor < 0.0:
            raise ConfigError("rho_floor", f"must be nonnegative, got {self.rho_floor!r}")

    @property
    def length(self) -> float:
        return self.n_cells * self.dx

    @property
    def n_steps(self) -> int:
        return max(int(round(self.t_end / self.dt)), 1)


@dataclass(frozen=True)
class HydroField:
    rho: np.ndarray
    qbar: np.ndarray
    dx: float
    time: float = 0.0
    step: int = 0
    skipped: int = 0

    @property
    def n_cells(self) -> int:
        return len(self.rho)

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n_cells) * self.dx

    @property
    def mass(self) -> float:
        return float(np.sum(self.rho) * self.dx)

    def rows(self):
        """CSV rows cell,rho,w,qx,qy,qz."""
        return [[i, repr(float(self.rho[i]))] + [repr(float(c)) for c in self.qbar[i]] for i in range(self.n_cells)]


class HydroRates(NamedTuple):
    drho: np.ndarray
    dqbar: np.ndarray
    skipped: int


# ----------------------------------------------------------------------------
# Gauge and relative operators
# ----------------------------------------------------------------------------

def gauge_lift(qbar) -> np.ndarray:
    """
    Sign-align neighbours left to right starting from cell 0

    Raises:
        TopologicalDefectError: the last cell ends up opposite to cell 0
    """
    q = np.array(qbar, dtype=float, copy=True)
    steps = np.einsum("ij,ij->i", q[1:], q[:-1])
    signs = np.concatenate([[1.0], np.cumprod(np.where(steps < 0.0, -1.0, 1.0))])
    q *= signs[:, None]
    if float(q[-1] @ q[0]) < 0.0:
        raise TopologicalDefectError("Nematic lift does not close around the periodic domain (odd number of sign flips)")
    return q


def central_difference(values: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(values, -1, axis=0) - np.roll(values, 1, axis=0)) / (2.0 * dx)


def _rel_x(qbar: np.ndarray, dx: float) -> np.ndarray:
    q = gauge_lift(qbar)
    dq = tangent_project(q, central_difference(q, dx))
    return imag(mul(dq, conj(q)))


def rel_grad(field: HydroField) -> np.ndarray:
    """
    Right relative gradient Im((d_j qbar) qbar*) per cell

    Returns:
        ndarray: (n, 3, 3); column j is the derivative along x_j, only j = 0 is
        nonzero in the slab reduction
    """
    out = np.zeros((field.n_cells, 3, 3))
    out[:, :, 0] = _rel_x(field.qbar, field.dx)
    return out


def rel_div(field: HydroField) -> np.ndarray:
    """Relative divergence: the trace of rel_grad."""
    return np.trace(rel_grad(field), axis1=1, axis2=2)


def matrix_derivative_operator(Lam, dLam_x) -> np.ndarray:
    """D_x(Lam) with (w . grad) Lam = [D w]x Lam; column j is vee(d_j Lam Lam^t)."""
    Lam = np.asarray(Lam, dtype=float)
    out = np.zeros(Lam.shape)
    out[..., :, 0] = vee(np.asarray(dLam_x) @ np.swapaxes(Lam, -1, -2))
    return out


# ----------------------------------------------------------------------------
# Right-hand sides
# ----------------------------------------------------------------------------

def _relative_rate(rho, v, a, drho_x, coeffs: HydroCoefficients) -> np.ndarray:
    """d_t,rel qbar from the equation written with relative operators only."""
    grad_rho = drho_x[:, None] * E1
    a_dot_v = np.einsum("ij,ij->i", a, v)
    return (-coeffs.c2 * v[:, :1] * a
            - (coeffs.c3 / rho)[:, None] * np.cross(v, grad_rho)
            - coeffs.c4 * (a_dot_v[:, None] * E1 + a[:, :1] * v))


def rhs(field: HydroField, coeffs: HydroCoefficients, rho_floor: float = RHO_FLOOR,
        executor: Optional[Executor] = None, threads: int = 1) -> HydroRates:
    """
    Time derivatives of rho and qbar

    drho is the conservative central flux difference of c1 e1(qbar) rho. The
    qbar equation is divided by rho; cells at or below rho_floor keep their
    attitude and are counted in the tally.

    Returns:
        HydroRates: (drho, dqbar, skipped); every dqbar row is tangent to qbar
    """
    q = gauge_lift(field.qbar)
    rho = np.asarray(field.rho, dtype=float)
    v = e1(q)
    drho = -coeffs.c1 * central_difference(v[:, 0] * rho, field.dx)
    drho_x = central_difference(rho, field.dx)
    dq_x = tangent_project(q, central_difference(q, field.dx))
    a = imag(mul(dq_x, conj(q)))
    active = rho > rho_floor

    def assemble(rows: slice) -> np.ndarray:
        safe = np.where(active[rows], rho[rows], 1.0)
        vr, ar = v[rows], a[rows]
        grad_rho = drho_x[rows, None] * E1
        a_dot_v = np.einsum("ij,ij->i", ar, vr)
        pressure = pure((coeffs.c3 / safe)[:, None] * np.cross(vr, grad_rho))
        twist = pure(coeffs.c4 * (a_dot_v[:, None] * E1 + ar[:, :1] * vr))
        dq = -coeffs.c2 * vr[:, :1] * dq_x[rows] - mul(pressure, q[rows]) - mul(twist, q[rows])
        dq[~active[rows]] = 0.0
        return dq

    n = field.n_cells
    if executor is not None and threads > 1 and n >= 2 * threads:
        bounds = np.linspace(0, n, threads + 1).astype(int)
        dq = np.concatenate(list(executor.map(assemble, [slice(s, e) for s, e in zip(bounds[:-1], bounds[1:])])))
    else:
        dq = assemble(slice(0, n))
    return HydroRates(drho=drho, dqbar=dq, skipped=int(np.count_nonzero(~active)))


def relative_form_check(field: HydroField, coeffs: HydroCoefficients, rho_floor: float = RHO_FLOOR) -> float:
    """
    Max difference between d_t qbar from the quaternion equation and from the
    equation right-multiplied by qbar*; round-off for any field.
    """
    q = gauge_lift(field.qbar)
    rho = np.asarray(field.rho, dtype=float)
    active = rho > rho_floor
    if not np.any(active):
        return 0.0
    direct = rhs(field, coeffs, rho_floor).dqbar
    rate = _relative_rate(np.where(active, rho, 1.0), e1(q), _rel_x(q, field.dx),
                          central_difference(rho, field.dx), coeffs)
    relative = mul(pure(rate), q)
    return float(np.max(np.abs(direct[active] - relative[active])))


def matrix_rhs(rho, Lam, dx: float, coeffs: HydroCoefficients, rho_floor: float = RHO_FLOOR) -> np.ndarray:
    """
    d_t Lam from the rotation-matrix system, with Lam-side operators built by
    central differences on Lam itself

    Returns:
        ndarray: (n, 3, 3) tangent rates d_t Lam = [w]x Lam
    """
    rho = np.asarray(rho, dtype=float)
    Lam = np.asarray(Lam, dtype=float)
    active = rho > rho_floor
    safe = np.where(active, rho, 1.0)
    terms = matrix_terms(safe, Lam, None, central_difference(Lam, dx), central_difference(rho, dx))
    forcing = ((coeffs.ct2 - coeffs.ct4) * terms[:, 1] + coeffs.ct3 * terms[:, 2]
               + coeffs.ct4 * terms[:, 3] + coeffs.ct4 * terms[:, 4])
    w = -vee(forcing) / safe[:, None]
    w[~active] = 0.0
    return hat(w) @ Lam


def sohb_equivalence_defect(field: HydroField, coeffs: HydroCoefficients, rho_floor: float = RHO_FLOOR) -> float:
    """Max entry of matrix_rhs(Phi(qbar)) - dPhi(qbar)[rhs(qbar)]; O(dx^2) on a grid."""
    q = gauge_lift(field.qbar)
    Lam = to_matrix(q)
    from_matrix = matrix_rhs(field.rho, Lam, field.dx, coeffs, rho_floor)
    rate = imag(mul(rhs(field, coeffs, rho_floor).dqbar, conj(q)))
    from_quaternion = 2.0 * hat(rate) @ Lam
    return float(np.max(np.abs(from_matrix - from_quaternion)))


# ----------------------------------------------------------------------------
# Term tables
# ----------------------------------------------------------------------------

def quaternion_terms(rho, q, dq_t, dq_x, drho_x) -> np.ndarray:
    """
    The five terms of the relative-form qbar equation at each point

    Args:
        rho, drho_x: (n,) density and its x-derivative
        q, dq_t, dq_x: (n, 4) attitude and its time and x derivatives

    Returns:
        ndarray: (n, 5, 3) vectors X_1..X_5
    """
    rho = np.asarray(rho, dtype=float)
    q = unit(q)
    a_t = imag(mul(tangent_project(q, dq_t), conj(q)))
    a = imag(mul(tangent_project(q, dq_x), conj(q)))
    v = e1(q)
    grad_rho = np.asarray(drho_x, dtype=float)[:, None] * E1
    r = 2.0 * rho[:, None]
    return np.stack([
        r * a_t,
        r * v[:, :1] * a,
        np.cross(v, grad_rho),
        r * np.einsum("ij,ij->i", a, v)[:, None] * E1,
        r * a[:, :1] * v,
    ], axis=1)


def matrix_terms(rho, Lam, dLam_t, dLam_x, drho_x) -> np.ndarray:
    """
    The five terms of the rotation-matrix equation at each point

    dLam_t may be None, in which case the first term is zero.

    Returns:
        ndarray: (n, 5, 3, 3) antisymmetric-valued terms
    """
    rho = np.asarray(rho, dtype=float)
    Lam = np.asarray(Lam, dtype=float)
    Lam_t = np.swapaxes(Lam, -1, -2)
    v = Lam[:, :, 0]
    grad_rho = np.asarray(drho_x, dtype=float)[:, None] * E1
    D = matrix_derivative_operator(Lam, dLam_x)
    r = vee(D - np.swapaxes(D, -1, -2))
    delta = np.trace(D, axis1=1, axis2=2)
    rr = rho[:, None, None]

    first = np.zeros_like(Lam) if dLam_t is None else rr * (np.asarray(dLam_t) @ Lam_t)
    transport = rr * (v[:, 0, None, None] * np.asarray(dLam_x)) @ Lam_t
    return np.stack([
        first,
        transport,
        hat(np.cross(v, grad_rho)),
        rr * hat(np.cross(v, r)) + transport,
        hat((rho * delta)[:, None] * v),
    ], axis=1)


# ----------------------------------------------------------------------------
# Initial conditions
# ----------------------------------------------------------------------------

def _param_quat(params: Dict[str, Any], key: str) -> np.ndarray:
    value = params.get(key)
    return ONE.copy() if value is None else unit(np.asarray(value, dtype=float))


def initial_field(cfg: PdeConfig) -> HydroField:
    """
    Build the initial condition named by cfg.initial["type"]

    uniform: rho, q. bump: rho0 + amplitude exp(-((x - L/2)/width)^2) with
    constant q. twist: q(x) = exp(2 pi winding x/L axis) q0, which closes
    without a sign flip for integer winding. random: smooth random Fourier
    modes of log density and of the attitude logarithm, seeded.
    """
    params = dict(cfg.initial)
    kind = params.pop("type")
    n, L = cfg.n_cells, cfg.length
    x = np.arange(n) * cfg.dx

    if kind == "uniform":
        rho = np.full(n, float(params.get("rho", 1.0)))
        q = np.tile(_param_quat(params, "q"), (n, 1))
    elif kind == "bump":
        width = float(params.get("width", 0.1 * L))
        rho = float(params.get("rho0", 1.0)) + float(params.get("amplitude", 0.5)) * np.exp(-((x - 0.5 * L) / width) ** 2)
        q = np.tile(_param_quat(params, "q"), (n, 1))
    elif kind == "twist":
        winding = int(params.get("winding", 1))
        axis = np.asarray(params.get("axis", [0.0, 0.0, 1.0]), dtype=float)
        axis = axis / np.linalg.norm(axis)
        a = 4.0 * np.pi * winding / L
        q = mul(exp_map(0.5 * a * x[:, None] * axis), _param_quat(params, "q0"))
        rho = float(params.get("rho", 1.0)) + float(params.get("rho_amplitude", 0.0)) * np.sin(2.0 * np.pi * x / L)
    elif kind == "random":
        rng = np.random.default_rng(int(params.get("seed", 0)))
        modes = int(params.get("modes", 3))
        amplitude = float(params.get("amplitude", 0.3))
        k = np.arange(1, modes + 1)
        phase = 2.0 * np.pi * x[:, None] * k[None, :] / L
        coef = rng.standard_normal((4, 2, modes)) * amplitude / k
        fields = [np.cos(phase) @ coef[i, 0] + np.sin(phase) @ coef[i, 1] for i in range(4)]
        rho = float(params.get("rho", 1.0)) * np.exp(fields[0])
        q = mul(exp_map(np.stack(fields[1:], axis=1)), _param_quat(params, "q0"))
    else:
        raise ConfigError("initial.type", f"unknown initial condition {kind!r}")
    return HydroField(rho=rho, qbar=gauge_lift(unit(q)), dx=cfg.dx)


# ----------------------------------------------------------------------------
# Time stepping
# ----------------------------------------------------------------------------

def check_cfl(coeffs: HydroCoefficients, dt: float, dx: float) -> float:
    number = dt * max(abs(coeffs.c1), abs(coeffs.c2)) / dx
    if number > CFL_LIMIT:
        raise CflViolationError(f"CFL number {number:.3f} exceeds {CFL_LIMIT}")
    return number


def step(field: HydroField, coeffs: HydroCoefficients, dt: float, rho_floor: float = RHO_FLOOR,
         executor: Optional[Executor] = None, threads: int = 1) -> HydroField:
    """
    One Heun (two-stage Runge-Kutta) step, renormalizing and gauge-fixing
    qbar after each stage

    Raises:
        CflViolationError: before any work when dt is too large
        InstabilityError: non-finite values or negative density
    """
    check_cfl(coeffs, dt, field.dx)
    k1 = rhs(field, coeffs, rho_floor, executor, threads)
    q = gauge_lift(field.qbar)
    stage = HydroField(rho=field.rho + dt * k1.drho, qbar=gauge_lift(unit(q + dt * k1.dqbar)), dx=field.dx)
    _check_state(stage, field.step + 1)
    k2 = rhs(stage, coeffs, rho_floor, executor, threads)

    rho = field.rho + 0.5 * dt * (k1.drho + k2.drho)
    qbar = gauge_lift(unit(q + 0.5 * dt * (k1.dqbar + k2.dqbar)))
    new = HydroField(rho=rho, qbar=qbar, dx=field.dx, time=field.time + dt, step=field.step + 1,
                     skipped=field.skipped + k1.skipped + k2.skipped)
    _check_state(new, new.step)
    return new


def _check_state(field: HydroField, step_index: int) -> None:
    if not (np.all(np.isfinite(field.rho)) and np.all(np.isfinite(field.qbar))):
        logger.error(f"Non-finite hydrodynamic field at step {step_index}")
        raise InstabilityError(step_index)
    if np.any(field.rho < 0.0):
        logger.error(f"Negative density at step {step_index}")
        raise InstabilityError(step_index, f"negative density {float(field.rho.min()):.3e}")


class HydroSolver:
    def __init__(self, cfg: PdeConfig, coeffs: HydroCoefficients):
        cfg.validate()
        if abs(coeffs.d - cfg.d) > 1e-12 * cfg.d:
            raise ConfigError("d", f"coefficients were computed at d={coeffs.d}, config asks for d={cfg.d}")
        check_cfl(coeffs, cfg.dt, cfg.dx)
        self.cfg = cfg
        self.coeffs = coeffs

    def initial(self) -> HydroField:
        return initial_field(self.cfg)

    def run(self, field: Optional[HydroField] = None,
            on_frame: Optional[Callable[[HydroField], None]] = None) -> Iterator[HydroField]:
        """
        Yield frames at step 0, every frame_stride steps and at the final step

        Args:
            field (HydroField): initial field, built from the config if None
            on_frame (callable): optional extra consumer of each frame
        """
        cfg = self.cfg
        field = self.initial() if field is None else field
        n_steps = cfg.n_steps
        logger.info(f"Integrating slab: n_cells={cfg.n_cells}, steps={n_steps}, "
                    f"CFL={check_cfl(self.coeffs, cfg.dt, cfg.dx):.3f}, mass={field.mass:.12g}")
        executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
        try:
            for i in range(n_steps + 1):
                if i > 0:
                    field = step(field, self.coeffs, cfg.dt, cfg.rho_floor, executor, cfg.threads)
                if i == 0 or i == n_steps or (cfg.frame_stride and i % cfg.frame_stride == 0):
                    if on_frame is not None:
                        on_frame(field)
                    yield field
        finally:
            if executor is not None:
                executor.shutdown()
        if field.skipped:
            logger.info(f"Vacuum cells skipped over the run: {field.skipped}")
        logger.info(f"Finished slab run at t={field.time:.6g}, mass={field.mass:.12g}")
