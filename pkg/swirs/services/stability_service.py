"""Disease-free equilibria of the uncontrolled model and their stability.

E1 = (1, 0, 0, 0, 0) and E2 = (sigma3/k, ., 0, 0, .) with their analytic
Jacobians, numerical spectra (full and restricted to the invariant
simplex), the closed-form stability conditions and the Lyapunov check
on W + I1 + I2.
"""
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.linalg import eigvals, null_space
from scipy.optimize import linear_sum_assignment

from swirs.config.logging import get_logger
from swirs.errors import SwirsError, UndefinedEquilibriumError
from swirs.services.model_service import ModelParams, State, StateLike, Trajectory, state_array

# Initialize logger for stability service
logger = get_logger('stability_service')

ZERO_REAL_PART = 1e-10
CLOSED_FORM_MATCH = 1e-8

Classification = Literal["asymptotically-stable", "unstable", "marginal"]


class Condition(BaseModel):
    """A named inequality; ``margin`` is positive when it holds with room to spare."""

    model_config = ConfigDict(frozen=True)

    name: str
    satisfied: bool
    margin: float


@dataclass(frozen=True)
class ClosedFormVariant:
    eigenvalues: List[complex]
    matches_numerical: bool
    max_error: float


@dataclass(frozen=True)
class EquilibriumReport:
    label: str
    point: List[float]
    in_simplex: bool
    eigenvalues: List[complex]
    classification: str
    simplex_eigenvalues: List[complex]
    simplex_classification: str
    has_zero_eigenvalue: bool
    proposition_conditions: List[Condition]
    derived_conditions: List[Condition] = field(default_factory=list)
    closed_form_eigs: Optional[List[complex]] = None
    closed_form_variants: Dict[str, ClosedFormVariant] = field(default_factory=dict)
    discriminant: Optional[float] = None

    @property
    def proposition_satisfied(self) -> bool:
        return all(c.satisfied for c in self.proposition_conditions)

    def to_json_dict(self) -> Dict[str, Any]:
        """JSON-ready form; complex numbers become [re, im] pairs."""
        def pairs(values):
            return None if values is None else [[v.real, v.imag] for v in values]

        data = asdict(self)
        data["proposition_conditions"] = [c.model_dump() for c in self.proposition_conditions]
        data["derived_conditions"] = [c.model_dump() for c in self.derived_conditions]
        data["eigenvalues"] = pairs(self.eigenvalues)
        data["closed_form_eigs"] = pairs(self.closed_form_eigs)
        data["simplex_eigenvalues"] = pairs(self.simplex_eigenvalues)
        data["closed_form_variants"] = {
            name: {**asdict(variant), "eigenvalues": pairs(variant.eigenvalues)}
            for name, variant in self.closed_form_variants.items()
        }
        return data


class LyapunovReport(BaseModel):
    """Lyapunov conditions at one state.

    ``margins`` use sigma2 in the I2 term; ``literal_margin3`` keeps the
    sigma3 that appears in the printed form of that inequality.
    """

    model_config = ConfigDict(frozen=True)

    satisfied: bool
    margins: Tuple[float, float, float]
    literal_satisfied: bool
    literal_margin3: float


def equilibrium_E1() -> State:
    return State(s=1.0, w=0.0, i1=0.0, i2=0.0, r=0.0)


def e2_coordinates(p: ModelParams) -> np.ndarray:
    """Coordinates of E2, whether or not they lie in the simplex.

    Raises:
        UndefinedEquilibriumError: if k = 0 or gamma + sigma3 = 0.
    """
    if p.k == 0:
        raise UndefinedEquilibriumError("E2 is undefined for k = 0")
    denom = p.k * (p.gamma + p.sigma3)
    if denom == 0:
        raise UndefinedEquilibriumError("E2 is undefined for gamma + sigma3 = 0")
    excess = p.k - p.sigma3
    return np.array([
        p.sigma3 / p.k,
        p.gamma * excess / denom,
        0.0,
        0.0,
        p.sigma3 * excess / denom,
    ])


def equilibrium_E2(p: ModelParams) -> State:
    """The second disease-free equilibrium as a State.

    Raises:
        UndefinedEquilibriumError: if k = 0 or E2 falls outside the simplex (k < sigma3).
    """
    coords = e2_coordinates(p)
    if p.k < p.sigma3:
        raise UndefinedEquilibriumError(
            f"E2 lies outside the simplex for k={p.k} < sigma3={p.sigma3}"
        )
    return State.from_array(coords)


def jacobian(x: StateLike, p: ModelParams) -> np.ndarray:
    """Analytic Jacobian of the uncontrolled right-hand side; columns sum to zero."""
    s, w, i1, i2, r = state_array(x)
    return np.array([
        [-p.k * w - p.beta_s1 * i1 - p.beta_s2 * i2, -p.k * s, -p.beta_s1 * s, -p.beta_s2 * s, p.gamma],
        [p.k * w, p.k * s - p.beta_w1 * i1 - p.beta_w2 * i2 - p.sigma3, -p.beta_w1 * w, -p.beta_w2 * w, 0.0],
        [p.beta_s1 * i1, p.beta_w1 * i1, p.beta_s1 * s + p.beta_w1 * w - p.epsilon * i2 - p.sigma1,
         -p.epsilon * i1, 0.0],
        [p.beta_s2 * i2, p.beta_w2 * i2, p.epsilon * i2,
         p.beta_s2 * s + p.beta_w2 * w + p.epsilon * i1 - p.sigma2, 0.0],
        [0.0, p.sigma3, p.sigma1, p.sigma2, -p.gamma],
    ])


def simplex_spectrum(jac: np.ndarray) -> np.ndarray:
    """Eigenvalues of the Jacobian restricted to the tangent space {v : sum(v) = 0}."""
    basis = null_space(np.ones((1, jac.shape[0])))
    return eigvals(basis.T @ jac @ basis)


def classify(eigenvalues: np.ndarray) -> Classification:
    top = float(np.max(np.real(eigenvalues)))
    if top < -ZERO_REAL_PART:
        return "asymptotically-stable"
    if abs(top) <= ZERO_REAL_PART:
        return "marginal"
    return "unstable"


def spectrum_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Largest pairwise distance under the best matching of two eigenvalue multisets."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.shape != b.shape:
        return math.inf
    cost = np.abs(a[:, None] - b[None, :])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].max())


def _variant(eigs: List[complex], numerical: np.ndarray) -> ClosedFormVariant:
    error = spectrum_distance(np.array(eigs), numerical)
    return ClosedFormVariant(eigenvalues=eigs, matches_numerical=error <= CLOSED_FORM_MATCH, max_error=error)


def _report(label: str, point: np.ndarray, p: ModelParams, **fields: Any) -> EquilibriumReport:
    jac = jacobian(point, p)
    eigs = eigvals(jac)
    reduced = simplex_spectrum(jac)
    in_simplex = bool(np.all(point >= -1e-12) and abs(point.sum() - 1.0) <= 1e-9)
    return EquilibriumReport(
        label=label,
        point=point.tolist(),
        in_simplex=in_simplex,
        eigenvalues=[complex(v) for v in eigs],
        classification=classify(eigs),
        simplex_eigenvalues=[complex(v) for v in reduced],
        simplex_classification=classify(reduced),
        has_zero_eigenvalue=bool(np.min(np.abs(eigs)) <= ZERO_REAL_PART),
        **fields,
    )


def analyze_E1(p: ModelParams) -> EquilibriumReport:
    """Spectrum of E1 and the three closed-form conditions k <= sigma3, beta_Sq <= sigma_q."""
    conditions = [
        Condition(name="k <= sigma3", satisfied=p.k <= p.sigma3, margin=p.sigma3 - p.k),
        Condition(name="beta_s1 <= sigma1", satisfied=p.beta_s1 <= p.sigma1, margin=p.sigma1 - p.beta_s1),
        Condition(name="beta_s2 <= sigma2", satisfied=p.beta_s2 <= p.sigma2, margin=p.sigma2 - p.beta_s2),
    ]
    closed = [complex(0.0), complex(p.k - p.sigma3), complex(p.beta_s1 - p.sigma1),
              complex(p.beta_s2 - p.sigma2), complex(-p.gamma)]
    point = equilibrium_E1().as_array()
    numerical = eigvals(jacobian(point, p))
    variant = _variant(closed, numerical)
    if not variant.matches_numerical:
        logger.warning(f"E1 closed-form spectrum differs from the eigensolver by {variant.max_error:.3e}")
    report = _report(
        "E1", point, p,
        closed_form_eigs=closed,
        closed_form_variants={"closed_form": variant},
        proposition_conditions=conditions,
    )
    logger.debug(f"E1: conditions={[c.satisfied for c in conditions]}, simplex={report.simplex_classification}")
    return report


def _e2_literal_conditions(p: ModelParams, discriminant: float) -> List[Condition]:
    conditions = []
    for q, (beta_s, beta_w, sigma) in enumerate(
            [(p.beta_s1, p.beta_w1, p.sigma1), (p.beta_s2, p.beta_w2, p.sigma2)], start=1):
        value = (p.gamma * p.sigma3 * (beta_w - beta_s) + p.k * p.gamma * (sigma - beta_w)
                 + p.sigma3 * (p.k * sigma - p.sigma3 * beta_s))
        conditions.append(Condition(name=f"infection condition q={q} >= 0", satisfied=value >= 0, margin=value))
    lead = p.gamma * (p.gamma + p.k - 2.0 * p.sigma3)
    if discriminant <= 0:
        margin = 2.0 * p.sigma3 - p.gamma - p.k
        conditions.append(Condition(name="gamma + k <= 2 sigma3", satisfied=margin >= 0, margin=margin))
    else:
        root = math.sqrt(discriminant)
        for sign, label in ((1.0, "+"), (-1.0, "-")):
            margin = -(lead + sign * root)
            conditions.append(Condition(name=f"gamma(gamma+k-2sigma3) {label} sqrt(D) <= 0",
                                        satisfied=margin >= 0, margin=margin))
    return conditions


def analyze_E2(p: ModelParams) -> EquilibriumReport:
    """Spectrum of E2 with the printed and the derived closed forms.

    The printed p_q uses x1 = gamma(sigma3 - k)/(k(gamma + sigma3)); the
    variant with x1 = W(E2) is reported too. The printed p_{3,4} are
    compared with the roots of
    lambda**2 + gamma(gamma + k)/(gamma + sigma3) lambda + gamma(k - sigma3) = 0,
    which is what the Jacobian at E2 gives.

    Raises:
        UndefinedEquilibriumError: if k = 0.
    """
    point = e2_coordinates(p)
    w_e2 = point[1]
    numerical = eigvals(jacobian(point, p))
    discriminant = (p.gamma ** 2 * (p.gamma + p.k - 2.0 * p.sigma3) ** 2
                    + 4.0 * p.gamma * (p.k - p.sigma3) * (p.gamma + p.sigma3) ** 2)

    infection_terms = [(p.beta_s1, p.beta_w1, p.sigma1), (p.beta_s2, p.beta_w2, p.sigma2)]
    x1_printed = -w_e2
    p_printed = [complex(-bw * x1_printed - sg + bs * p.sigma3 / p.k) for bs, bw, sg in infection_terms]
    p_as_w = [complex(-bw * w_e2 - sg + bs * p.sigma3 / p.k) for bs, bw, sg in infection_terms]

    lead = p.gamma * (p.gamma + p.k - 2.0 * p.sigma3)
    sq = np.sqrt(complex(discriminant))
    denom = 2.0 * (p.sigma3 + p.gamma)
    if denom > 0:
        pair_printed = [complex((lead + sq) / denom), complex((lead - sq) / denom)]
    else:
        pair_printed = [complex(math.nan, 0.0), complex(math.nan, 0.0)]
    pair_derived = [complex(v) for v in np.roots([
        1.0,
        p.gamma * (p.gamma + p.k) / (p.gamma + p.sigma3) if p.gamma + p.sigma3 > 0 else 0.0,
        p.gamma * (p.k - p.sigma3),
    ])]

    zero = [complex(0.0)]
    variants = {
        "printed": _variant(p_printed + pair_printed + zero, numerical),
        "x1_as_w": _variant(p_as_w + pair_printed + zero, numerical),
        "printed_pq_derived_pair": _variant(p_printed + pair_derived + zero, numerical),
        "x1_as_w_derived_pair": _variant(p_as_w + pair_derived + zero, numerical),
    }
    matching = [name for name, v in variants.items() if v.matches_numerical]
    closed = variants[matching[0]].eigenvalues if matching else None
    if not matching:
        logger.warning("No closed form for the E2 spectrum matches the eigensolver")

    derived = [
        Condition(name=f"p{q} < 0", satisfied=v.real < 0, margin=-v.real)
        for q, v in enumerate(p_printed, start=1)
    ]
    derived.append(Condition(name="k > sigma3", satisfied=p.k > p.sigma3, margin=p.k - p.sigma3))
    derived.append(Condition(name="gamma > 0", satisfied=p.gamma > 0, margin=p.gamma))

    report = _report(
        "E2", point, p,
        closed_form_eigs=closed,
        closed_form_variants=variants,
        proposition_conditions=_e2_literal_conditions(p, discriminant),
        derived_conditions=derived,
        discriminant=discriminant,
    )
    logger.debug(f"E2: D={discriminant:.6g}, matching closed forms={matching}")
    return report


def lyapunov_value(x: StateLike) -> float:
    """W + I1 + I2."""
    arr = state_array(x)
    return float(arr[1] + arr[2] + arr[3])


def lyapunov_derivative(x: StateLike, p: ModelParams, literal: bool = False) -> float:
    """(kS - sigma3) W + (beta_s1 S - sigma1) I1 + (beta_s2 S - sigma2) I2.

    With ``literal`` the last coefficient uses sigma3 instead of sigma2.
    """
    s, w, i1, i2, _ = state_array(x)
    last = p.sigma3 if literal else p.sigma2
    return float((p.k * s - p.sigma3) * w + (p.beta_s1 * s - p.sigma1) * i1 + (p.beta_s2 * s - last) * i2)


def lyapunov_conditions(x: StateLike, p: ModelParams) -> LyapunovReport:
    """Evaluate kS < sigma3, beta_s1 S < sigma1 and beta_s2 S < sigma2 at the state's S."""
    s = state_array(x)[0]
    margins = (p.sigma3 - p.k * s, p.sigma1 - p.beta_s1 * s, p.sigma2 - p.beta_s2 * s)
    literal = p.sigma3 - p.beta_s2 * s
    return LyapunovReport(
        satisfied=all(m > 0 for m in margins),
        margins=tuple(float(m) for m in margins),
        literal_satisfied=margins[0] > 0 and margins[1] > 0 and literal > 0,
        literal_margin3=float(literal),
    )


def check_lyapunov_trajectory(traj: Trajectory, p: ModelParams) -> Tuple[bool, float]:
    """Whether the conditions hold at every node, and the largest one-step rise of W + I1 + I2."""
    values = traj.values
    s = values[:, 0]
    holds = bool(np.all(p.sigma3 - p.k * s > 0) and np.all(p.sigma1 - p.beta_s1 * s > 0)
                 and np.all(p.sigma2 - p.beta_s2 * s > 0))
    lyap = values[:, 1] + values[:, 2] + values[:, 3]
    rise = float(np.max(np.diff(lyap))) if lyap.size > 1 else 0.0
    return holds, rise


class StabilityService:
    """Service wrapper producing both equilibrium reports."""

    def analyze(self, params: ModelParams) -> Dict[str, Any]:
        """
        Analyze E1 and, when k > 0, E2.

        Args:
            params: Model rates

        Returns:
            JSON-ready reports keyed by equilibrium label
        """
        try:
            reports = {"E1": analyze_E1(params).to_json_dict()}
            if params.k > 0:
                reports["E2"] = analyze_E2(params).to_json_dict()
            else:
                logger.info("k = 0: E2 is undefined, reporting E1 only")
            logger.info(
                f"E1 simplex classification: {reports['E1']['simplex_classification']}"
                + (f", E2: {reports['E2']['simplex_classification']}" if "E2" in reports else "")
            )
            return {"success": True, "reports": reports}
        except SwirsError as e:
            logger.error(f"Stability analysis failed: {e}")
            return {"success": False, **e.to_dict()}
