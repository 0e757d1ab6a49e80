import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List

import numpy as np

from services.gci_service import GciTable
from services.quadrature_service import adaptive_gauss_legendre, sphere_rule

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

CSV_HEADER = ["d", "c1", "c2", "c3", "c4", "ct2", "ct3", "ct4", "quad_err"]
BRACKET_RTOL = 1e-10
WEIGHT_FLOOR = 1e-14


class DegenerateWeightError(ValueError):
    """The weight of a bracket integrates to (numerically) zero."""


@dataclass(frozen=True)
class HydroCoefficients:
    d: float
    c1: float
    c2: float
    c3: float
    c4: float
    ct2: float
    ct3: float
    ct4: float
    quadrature_error: float

    def as_row(self) -> List[float]:
        return [self.d, self.c1, self.c2, self.c3, self.c4, self.ct2, self.ct3, self.ct4, self.quadrature_error]

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def bracket(g: Callable[[np.ndarray], np.ndarray], w: Callable[[np.ndarray], np.ndarray],
            rtol: float = BRACKET_RTOL) -> float:
    """
    Weighted average <g>_w = int_0^pi g w / int_0^pi w

    The weight may be signed (the GCI weights are nonpositive); only its
    integral has to stay away from zero.

    Args:
        g (callable): vectorized function of theta
        w (callable): vectorized weight of theta
        rtol (float): relative quadrature tolerance

    Returns:
        float: the bracket

    Raises:
        DegenerateWeightError: |int w| below 1e-14
    """
    den, _ = adaptive_gauss_legendre(w, 0.0, np.pi, rtol=0.1 * rtol)
    if abs(den) < WEIGHT_FLOOR:
        raise DegenerateWeightError(f"Bracket weight integrates to {den:.3e}")
    num, _ = adaptive_gauss_legendre(lambda t: g(t) * w(t), 0.0, np.pi, rtol=0.1 * rtol)
    return num / den


def _m_scaled(theta: np.ndarray, d: float) -> np.ndarray:
    # m(theta) up to the constant exp(3/(2d)), which cancels in every bracket
    return np.exp((np.cos(theta) - 1.0) / d)


def order_parameter(d: float) -> float:
    """c1 = (2/3) <1/2 + cos(theta)>_{m sin^2(theta/2)}; needs no GCI table."""
    d = float(d)
    if not np.isfinite(d) or d <= 0.0:
        raise ValueError(f"d must be positive, got {d}")
    return (2.0 / 3.0) * bracket(lambda t: 0.5 + np.cos(t), lambda t: _m_scaled(t, d) * np.sin(0.5 * t) ** 2)


def _trapezoid_weights(n: int) -> np.ndarray:
    w = np.ones(n + 1)
    w[0] = w[-1] = 0.5
    return w


def _node_bracket(g: np.ndarray, w: np.ndarray, weights: np.ndarray) -> float:
    den = float(np.sum(w * weights))
    if abs(den) < WEIGHT_FLOOR * max(1.0, float(np.max(np.abs(w)))):
        raise DegenerateWeightError(f"Bracket weight integrates to {den:.3e}")
    return float(np.sum(g * w * weights)) / den


def _node_quantities(table: GciTable, d: float, stride: int = 1) -> Dict[str, np.ndarray]:
    """
    Angle-side integrand pieces at the table nodes

    With r = cos(theta/2) the nonnegative half of the table sits on a uniform
    theta grid, and every integrand below is even and 2 pi periodic in theta,
    so the trapezoid rule on the nodes is spectrally accurate.
    """
    r, h, _ = table.half
    r = r[::stride]
    h = h[::stride]
    phi = table.phi[::stride]
    theta = np.pi - 2.0 * phi
    s = np.cos(phi)          # sin(theta/2)
    c = r                    # cos(theta/2)
    m = _m_scaled(theta, d)
    W = m * s ** 4 * h * c
    # k = 4 h(c)/c, finite as c -> 0; the weight carries sin^2(theta) = 0 there
    k = np.zeros_like(h)
    k[1:] = 4.0 * h[1:] / c[1:]
    m_tilde = np.sin(theta) ** 2 * m * k
    return {"theta": theta, "s": s, "c": c, "h": h, "m": m, "W": W, "m_tilde_w": m_tilde * s ** 2,
            "weights": _trapezoid_weights(len(theta) - 1)}


def _gci_constants(q: Dict[str, np.ndarray]) -> Dict[str, float]:
    cos_t = np.cos(q["theta"])
    wts = q["weights"]
    return {
        "c2": 0.2 * _node_bracket(1.0 + 4.0 * cos_t, q["W"], wts),
        "c4": 0.2 * _node_bracket(1.0 - cos_t, q["W"], wts),
        "ct2": 0.2 * _node_bracket(2.0 + 3.0 * cos_t, q["m_tilde_w"], wts),
        "ct4": 0.2 * _node_bracket(1.0 - cos_t, q["m_tilde_w"], wts),
    }


def _check_table(d: float, table: GciTable) -> float:
    d = float(d)
    if not np.isfinite(d) or d <= 0.0:
        raise ValueError(f"d must be positive, got {d}")
    if abs(table.d - d) > 1e-12 * d:
        raise ValueError(f"GCI table was solved at d={table.d}, not at d={d}")
    return d


def compute(d: float, table: GciTable) -> HydroCoefficients:
    """
    Hydrodynamic coefficients of the quaternion system and of the matrix system

    Args:
        d (float): noise ratio D/nu
        table (GciTable): GCI profile solved at the same d

    Returns:
        HydroCoefficients: c1..c4, ct2..ct4 and the node-halving error estimate
    """
    try:
        d = _check_table(d, table)
        c1 = order_parameter(d)
        full = _gci_constants(_node_quantities(table, d))
        if table.n_nodes % 2 == 0:
            half = _gci_constants(_node_quantities(table, d, stride=2))
            quad_err = max(abs(full[key] - half[key]) for key in full)
        else:
            quad_err = float("nan")

        coeffs = HydroCoefficients(d=d, c1=c1, c2=full["c2"], c3=0.5 * d, c4=full["c4"],
                                   ct2=full["ct2"], ct3=d, ct4=full["ct4"], quadrature_error=quad_err)
        logger.info(f"Computed coefficients at d={d}: c1={c1:.6f}, c2={coeffs.c2:.6f}, c4={coeffs.c4:.6f}")
        return coeffs

    except Exception as e:
        logger.error(f"Coefficient computation failed: {str(e)}")
        raise


def _sphere_moments() -> Dict[str, float]:
    points, weights = sphere_rule(32, 64)
    n1, n2 = points[:, 0], points[:, 1]
    return {"n1^4": float(n1 ** 4 @ weights), "n1^2n2^2": float((n1 * n2) ** 2 @ weights)}


def proof_constants(d: float, table: GciTable) -> Dict[str, float]:
    """
    Intermediate constants C2..C5 of the macroscopic limit

    C2, C3 and C5 are written as brackets against m sin^2(theta/2); C4 is
    assembled separately from the sphere moments int n1^4 - int n1^2 n2^2 and
    the radial integral of sin^6(theta/2) H(cos(theta/2)), H = M h r.

    Returns:
        dict: {"C2", "C3", "C4", "C5"}
    """
    d = _check_table(d, table)
    q = _node_quantities(table, d)
    wts = q["weights"]
    s, c, h, m = q["s"], q["c"], q["h"], q["m"]
    base = m * s ** 2
    chc = c * h
    C2 = _node_bracket(s ** 2 * chc, base, wts) / 3.0
    C3 = _node_bracket((2.0 * c ** 2 - 1.0) * s ** 2 * chc, base, wts) / 3.0
    C5 = _node_bracket(s ** 4 * chc, base, wts) / 15.0

    moments = _sphere_moments()
    z = 4.0 * np.pi * float(np.sum(base * wts))
    radial = float(np.sum(s ** 6 * (m / z) * h * c * wts))
    C4 = (moments["n1^4"] - moments["n1^2n2^2"]) * radial
    return {"C2": C2, "C3": C3, "C4": C4, "C5": C5}
