"""Optimal control of the SWIRS model by the maximum principle.

Costs, Hamiltonian, costate dynamics, the pointwise maximizer of the
Hamiltonian and a relaxed forward-backward sweep. The sweep driver
(``sweep_loop``) is shared with the network model.
"""
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import trapezoid

from swirs.config.logging import get_logger
from swirs.errors import ConsistencyError, DomainError, SwirsError
from swirs.services.model_service import (
    CONTROLS,
    ControlLike,
    ControlTrajectory,
    ControlVector,
    ModelParams,
    State,
    StateLike,
    TimeGrid,
    Trajectory,
    assemble,
    compute_flows,
    control_array,
    integrate,
    rk4_backward,
    rk4_forward,
    state_array,
)

# Initialize logger for control service
logger = get_logger('control_service')

_VALUE_CONFIG = ConfigDict(frozen=True, allow_inf_nan=False, extra="forbid")

ON_THRESHOLD = 1.0 - 1e-3
OFF_THRESHOLD = 1e-3
OBJECTIVE_SLACK = 1e-6
IDENTITY_TOLERANCE = 1e-12


class ControlCost(BaseModel):
    """Control cost h(u) = coef * u (linear) or coef * u**2 (quadratic)."""

    model_config = _VALUE_CONFIG

    shape: Literal["linear", "quadratic"] = "quadratic"
    coef: float = Field(gt=0)

    def value(self, u):
        if self.shape == "linear":
            return self.coef * u
        return self.coef * u * u

    def derivative(self, u):
        if self.shape == "linear":
            return self.coef * np.ones_like(np.asarray(u, dtype=float))
        return 2.0 * self.coef * np.asarray(u, dtype=float)

    def maximize(self, phi):
        """Maximizer of -h(u) + phi * u over [0, 1].

        Linear costs switch on when phi reaches h(1) (ties switch on);
        quadratic costs give the clipped inverse phi / (2 coef).
        """
        phi = np.asarray(phi, dtype=float)
        if self.shape == "linear":
            return np.where(phi >= self.coef, 1.0, 0.0)
        return np.clip(phi / (2.0 * self.coef), 0.0, 1.0)


class CostSpec(BaseModel):
    """Infection, control, warned-utility and recovery costs (linear f, L, g)."""

    model_config = _VALUE_CONFIG

    f1_coef: float = Field(default=30.0, ge=0)
    f2_coef: float = Field(default=40.0, ge=0)
    h1: ControlCost = ControlCost(shape="quadratic", coef=20.0)
    h2: ControlCost = ControlCost(shape="quadratic", coef=25.0)
    h3: ControlCost = ControlCost(shape="quadratic", coef=10.0)
    L_coef: float = Field(default=2.0, ge=0)
    g_coef: float = Field(default=5.0, ge=0)
    strict_ordering: bool = True

    @model_validator(mode="after")
    def _check_ordering(self) -> "CostSpec":
        if self.strict_ordering and self.h3.value(1.0) > min(self.h1.value(1.0), self.h2.value(1.0)):
            logger.warning(
                f"Information cost h3(1)={self.h3.value(1.0)} exceeds a treatment cost "
                f"(h1(1)={self.h1.value(1.0)}, h2(1)={self.h2.value(1.0)})"
            )
        return self

    @property
    def control_costs(self) -> Tuple[ControlCost, ControlCost, ControlCost]:
        return (self.h1, self.h2, self.h3)


class AdjointState(BaseModel):
    """Costates of S, W, I1, I2 and R."""

    model_config = _VALUE_CONFIG

    lam_s: float = 0.0
    lam_w: float = 0.0
    lam_i1: float = 0.0
    lam_i2: float = 0.0
    lam_r: float = 0.0

    @classmethod
    def from_array(cls, values: Any) -> "AdjointState":
        arr = np.asarray(values, dtype=float)
        if arr.shape != (5,):
            raise DomainError(f"a costate has 5 components, got shape {arr.shape}")
        return cls(lam_s=arr[0], lam_w=arr[1], lam_i1=arr[2], lam_i2=arr[3], lam_r=arr[4])

    def as_array(self) -> np.ndarray:
        return np.array([self.lam_s, self.lam_w, self.lam_i1, self.lam_i2, self.lam_r])


class CostBreakdown(BaseModel):
    """Information-layer cost j1, treatment-layer cost j2 and their sum."""

    model_config = ConfigDict(frozen=True)

    j1: float
    j2: float
    total: float

    @model_validator(mode="after")
    def _check_total(self) -> "CostBreakdown":
        if self.total != self.j1 + self.j2:
            raise ValueError("total must equal j1 + j2")
        return self

    @classmethod
    def of(cls, j1: float, j2: float) -> "CostBreakdown":
        j1, j2 = float(j1), float(j2)
        return cls(j1=j1, j2=j2, total=j1 + j2)


class ControlStructure(BaseModel):
    """Segment pattern of one control trajectory."""

    model_config = ConfigDict(frozen=True)

    control: str
    shape: Literal["bang-bang", "bang-interior-off", "all-off", "all-on", "other"]
    t0: Optional[float] = None
    t1: Optional[float] = None
    non_increasing: bool


class ControlStructureReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    controls: List[ControlStructure]

    def __getitem__(self, name: str) -> ControlStructure:
        for item in self.controls:
            if item.control == name:
                return item
        raise KeyError(name)


class SweepOptions(BaseModel):
    """Forward-backward sweep settings.

    The update is u <- (1 - rho) u + rho u_new. With ``adaptive`` on, rho
    is halved (down to ``min_relaxation``) whenever the max control change
    grows from one iteration to the next.
    """

    model_config = _VALUE_CONFIG

    relaxation: float = Field(default=0.5, gt=0, le=1)
    min_relaxation: float = Field(default=0.01, gt=0, le=1)
    adaptive: bool = True
    tol: float = Field(default=1e-6, gt=0)
    max_iters: int = Field(default=500, ge=1)


@dataclass(frozen=True, eq=False)
class SwitchingFunctions:
    """phi1, phi2, phi3 at every grid point, as columns of ``values``."""

    grid: TimeGrid
    values: np.ndarray

    @property
    def phi1(self) -> np.ndarray:
        return self.values[:, 0]

    @property
    def phi2(self) -> np.ndarray:
        return self.values[:, 1]

    @property
    def phi3(self) -> np.ndarray:
        return self.values[:, 2]


@dataclass(frozen=True, eq=False)
class SweepResult:
    state_traj: Trajectory
    adjoints: np.ndarray
    control: ControlTrajectory
    switching: SwitchingFunctions
    costs: CostBreakdown
    iterations: int
    converged: bool
    structure: ControlStructureReport
    cost_spec: CostSpec
    objective_history: List[float] = field(default_factory=list)
    max_change: float = math.nan

    @property
    def adjoint_traj(self) -> List[AdjointState]:
        return [AdjointState.from_array(row) for row in self.adjoints]


def _adjoint_array(lam: Any) -> np.ndarray:
    arr = lam.as_array() if isinstance(lam, AdjointState) else np.asarray(lam, dtype=float)
    if arr.shape != (5,) or not np.all(np.isfinite(arr)):
        raise DomainError(f"costate must be 5 finite numbers, got {arr!r}")
    return arr


def running_cost_rates(states: np.ndarray, controls: np.ndarray, c: CostSpec) -> Tuple[Any, Any]:
    """Integrands of j1 and j2 for one state (5,) or a whole grid (n + 1, 5)."""
    s, w, i1, i2, r = states.T
    u1, u2, u3 = controls.T
    j1 = c.h3.value(u3) - c.L_coef * w
    j2 = c.f1_coef * i1 + c.f2_coef * i2 + c.h1.value(u1) + c.h2.value(u2) - c.g_coef * r
    return j1, j2


def running_cost(x: StateLike, u: Optional[ControlLike], c: CostSpec) -> Tuple[float, float]:
    """(h3(u3) - L(W), f1(I1) + f2(I2) + h1(u1) + h2(u2) - g(R)) at one instant."""
    j1, j2 = running_cost_rates(state_array(x), control_array(u), c)
    return float(j1), float(j2)


def integrate_costs(states: np.ndarray, controls: np.ndarray, times: np.ndarray, c: CostSpec) -> CostBreakdown:
    j1, j2 = running_cost_rates(states, controls, c)
    return CostBreakdown.of(trapezoid(j1, times), trapezoid(j2, times))


def cost_breakdown(traj: Trajectory, ctrl: ControlTrajectory, c: CostSpec) -> CostBreakdown:
    """Trapezoid-rule costs of a trajectory under its control."""
    return integrate_costs(traj.values, ctrl.values, traj.grid.times, c)


def hamiltonian(x: StateLike, lam: Any, u: Optional[ControlLike], p: ModelParams, c: CostSpec) -> float:
    """Hamiltonian evaluated term by term.

    Cross-checked against -(j1 + j2) + lam . rhs(x, u).

    Raises:
        ConsistencyError: if the two evaluations disagree.
    """
    xs = state_array(x)
    lam_arr = _adjoint_array(lam)
    ls, lw, li1, li2, lr = lam_arr
    us = control_array(u)
    s, w, i1, i2, r = xs
    u1, u2, u3 = us
    value = (
        -c.f1_coef * i1 - c.f2_coef * i2 + c.g_coef * r
        - c.h1.value(u1) - c.h2.value(u2) + c.L_coef * w - c.h3.value(u3)
        + (lw - ls) * p.k * w * s + (lr - lw) * p.sigma3 * w
        + (li1 - ls) * p.beta_s1 * s * i1 + (li2 - ls) * p.beta_s2 * s * i2
        + (li1 - lw) * p.beta_w1 * w * i1 + (li2 - lw) * p.beta_w2 * w * i2
        + (li2 - li1) * p.epsilon * i1 * i2 + (ls - lr) * p.gamma * r
        + (lr - li1) * (p.sigma1 + u1) * i1 + (lr - li2) * (p.sigma2 + u2) * i2
        + (lw - ls) * u3 * s
    )
    j1, j2 = running_cost_rates(xs, us, c)
    identity = -(j1 + j2) + float(lam_arr @ assemble(compute_flows(xs, us, p)))
    if abs(value - identity) > IDENTITY_TOLERANCE * (1.0 + abs(value) + np.abs(lam_arr).sum()):
        raise ConsistencyError(f"Hamiltonian identity failed: {value!r} vs {identity!r}")
    return float(value)


def adjoint_field(lam: np.ndarray, x: np.ndarray, u: np.ndarray, p: ModelParams, c: CostSpec) -> np.ndarray:
    """Costate derivatives for the linear f, L and g costs."""
    s, w, i1, i2, r = x
    ls, lw, li1, li2, lr = lam
    u1, u2, u3 = u
    return np.array([
        (ls - lw) * p.k * w + (ls - li1) * p.beta_s1 * i1 + (ls - li2) * p.beta_s2 * i2 + (ls - lw) * u3,
        -c.L_coef + (ls - lw) * p.k * s + (lw - li1) * p.beta_w1 * i1
        + (lw - li2) * p.beta_w2 * i2 + (lw - lr) * p.sigma3,
        c.f1_coef + (ls - li1) * p.beta_s1 * s + (lw - li1) * p.beta_w1 * w
        + (li1 - li2) * p.epsilon * i2 + (li1 - lr) * (p.sigma1 + u1),
        c.f2_coef + (ls - li2) * p.beta_s2 * s + (lw - li2) * p.beta_w2 * w
        + (li1 - li2) * p.epsilon * i1 + (li2 - lr) * (p.sigma2 + u2),
        -c.g_coef + (lr - ls) * p.gamma,
    ])


def adjoint_rhs(x: StateLike, lam: Any, u: Optional[ControlLike], p: ModelParams, c: CostSpec) -> np.ndarray:
    """Time derivative of the costates (lam_S, lam_W, lam_I1, lam_I2, lam_R)."""
    return adjoint_field(_adjoint_array(lam), state_array(x), control_array(u), p, c)


def switching_values(states: np.ndarray, adjoints: np.ndarray) -> np.ndarray:
    """phi1 = (lam_R - lam_I1) I1, phi2 = (lam_R - lam_I2) I2, phi3 = (lam_W - lam_S) S."""
    s, w, i1, i2, r = states.T
    ls, lw, li1, li2, lr = adjoints.T
    return np.stack([(lr - li1) * i1, (lr - li2) * i2, (lw - ls) * s], axis=-1)


def switching_functions(traj: Trajectory, adjoints: np.ndarray) -> SwitchingFunctions:
    return SwitchingFunctions(traj.grid, switching_values(traj.values, np.asarray(adjoints, dtype=float)))


def maximize_controls(phi: np.ndarray, c: CostSpec) -> np.ndarray:
    """Pointwise maximizer for switching values with controls on the last axis."""
    return np.stack([cost.maximize(phi[..., i]) for i, cost in enumerate(c.control_costs)], axis=-1)


def maximize_hamiltonian_pointwise(phi: Sequence[float], c: CostSpec) -> ControlVector:
    """Control maximizing the Hamiltonian for the given switching values."""
    arr = np.asarray(phi, dtype=float)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise DomainError(f"switching values must be 3 finite numbers, got {arr!r}")
    u = maximize_controls(arr, c)
    return ControlVector(u1=u[0], u2=u[1], u3=u[2])


@dataclass
class SweepOutcome:
    states: np.ndarray
    adjoints: np.ndarray
    control: np.ndarray
    iterations: int
    converged: bool
    objective_history: List[float]
    max_change: float


def sweep_loop(forward: Callable[[np.ndarray], np.ndarray],
               backward: Callable[[np.ndarray, np.ndarray], np.ndarray],
               maximize: Callable[[np.ndarray, np.ndarray], np.ndarray],
               objective: Callable[[np.ndarray, np.ndarray], float],
               initial_control: np.ndarray,
               opts: SweepOptions,
               label: str = "sweep") -> SweepOutcome:
    """Relaxed fixed-point iteration on the control.

    On convergence, returns the last forward states and backward costates
    together with the maximizer computed from them (within ``tol`` of the
    control that produced them). Without convergence the last maximizer
    is returned with states and costates re-integrated under it.
    """
    u = np.array(initial_control, dtype=float)
    rho = opts.relaxation
    history: List[float] = []
    previous_change = math.inf
    converged = False
    iteration = 0
    change = math.inf
    states = adjoints = u_new = None
    for iteration in range(1, opts.max_iters + 1):
        states = forward(u)
        adjoints = backward(states, u)
        u_new = maximize(states, adjoints)
        change = float(np.max(np.abs(u_new - u)))
        history.append(float(objective(states, u)))
        if iteration > 2 and history[-1] > history[-2] + OBJECTIVE_SLACK:
            logger.warning(
                f"{label}: objective increased at iteration {iteration} "
                f"({history[-2]:.6g} -> {history[-1]:.6g})"
            )
        logger.debug(f"{label}: iteration {iteration} J={history[-1]:.6g} change={change:.3e} rho={rho:.3g}")
        if change <= opts.tol:
            converged = True
            break
        if opts.adaptive and change > previous_change:
            rho = max(0.5 * rho, opts.min_relaxation)
        previous_change = change
        u = (1.0 - rho) * u + rho * u_new

    control = np.clip(u_new, 0.0, 1.0)
    if converged:
        logger.info(f"{label}: converged after {iteration} iterations, J={history[-1]:.6g}")
    else:
        logger.warning(f"{label}: no convergence after {iteration} iterations (last change {change:.3e})")
        states = forward(control)
        adjoints = backward(states, control)
    return SweepOutcome(
        states=states,
        adjoints=adjoints,
        control=control,
        iterations=iteration,
        converged=converged,
        objective_history=history,
        max_change=change,
    )


def _classify(name: str, u: np.ndarray, times: np.ndarray, cost: Optional[ControlCost]) -> ControlStructure:
    labels = np.where(u > ON_THRESHOLD, 0, np.where(u < OFF_THRESHOLD, 2, 1))
    runs = [int(labels[0])] + [int(b) for a, b in zip(labels[:-1], labels[1:]) if a != b]
    ordered = all(a < b for a, b in zip(runs[:-1], runs[1:]))
    on_idx = np.flatnonzero(labels == 0)
    mid_idx = np.flatnonzero(labels == 1)
    t0 = float(times[on_idx[-1]]) if on_idx.size else None
    t1 = float(times[mid_idx[-1]]) if mid_idx.size else None
    if runs == [2]:
        shape, t0, t1 = "all-off", None, None
    elif runs == [0]:
        shape, t0, t1 = "all-on", None, None
    elif not ordered:
        shape = "other"
    elif 1 in runs:
        shape = "other" if cost is not None and cost.shape == "linear" else "bang-interior-off"
    else:
        shape = "bang-bang"
    return ControlStructure(
        control=name,
        shape=shape,
        t0=t0,
        t1=t1,
        non_increasing=bool(np.all(np.diff(u) <= OFF_THRESHOLD)),
    )


def extract_structure(res: Union[SweepResult, ControlTrajectory],
                      costs: Optional[CostSpec] = None) -> ControlStructureReport:
    """Classify every control into on / interior / off segments.

    Segments must appear in the order on, interior, off (any may be empty);
    linear costs admit no interior segment. Anything else is ``other``.
    """
    if isinstance(res, SweepResult):
        control, costs = res.control, costs or res.cost_spec
    else:
        control = res
    times = control.grid.times
    per_control = costs.control_costs if costs is not None else (None, None, None)
    return ControlStructureReport(controls=[
        _classify(name, control.values[:, i], times, per_control[i])
        for i, name in enumerate(CONTROLS)
    ])


def hamiltonian_series(res: SweepResult, p: ModelParams, c: Optional[CostSpec] = None) -> np.ndarray:
    """Hamiltonian at every grid point of a sweep result."""
    c = c or res.cost_spec
    states = res.state_traj.values
    controls = res.control.values
    j1, j2 = running_cost_rates(states, controls, c)
    f = assemble(compute_flows(states, controls, p))
    return -(j1 + j2) + np.einsum("ij,ij->i", res.adjoints, f)


def hamiltonian_spread(res: SweepResult, p: ModelParams, c: Optional[CostSpec] = None) -> float:
    """max_t H - min_t H; zero for an exact extremal of the autonomous problem."""
    series = hamiltonian_series(res, p, c)
    return float(series.max() - series.min())


def forward_backward_sweep(x0: StateLike, p: ModelParams, c: CostSpec, grid: TimeGrid,
                           opts: Optional[SweepOptions] = None,
                           initial_control: Optional[ControlTrajectory] = None) -> SweepResult:
    """Solve the optimal-control problem by a relaxed forward-backward sweep.

    Non-convergence is reported through ``converged=False``; divergence of
    the state integration propagates as IntegrationDivergedError.
    """
    opts = opts or SweepOptions()
    x = state_array(x0)
    times = grid.times

    def state_field(y: np.ndarray, v: np.ndarray) -> np.ndarray:
        return assemble(compute_flows(y, v, p))

    def costate_field(lam: np.ndarray, y: np.ndarray, v: np.ndarray) -> np.ndarray:
        return adjoint_field(lam, y, v, p, c)

    def forward(u: np.ndarray) -> np.ndarray:
        return rk4_forward(state_field, x, u, grid.dt, grid.t0)

    def backward(states: np.ndarray, u: np.ndarray) -> np.ndarray:
        return rk4_backward(costate_field, np.zeros(5), states, u, grid.dt)

    def maximize(states: np.ndarray, adjoints: np.ndarray) -> np.ndarray:
        return maximize_controls(switching_values(states, adjoints), c)

    def objective(states: np.ndarray, u: np.ndarray) -> float:
        return integrate_costs(states, u, times, c).total

    start = initial_control.values if initial_control is not None else np.zeros((grid.n_steps + 1, 3))
    logger.info(f"Forward-backward sweep: T={grid.t_end}, n_steps={grid.n_steps}, rho={opts.relaxation}")
    outcome = sweep_loop(forward, backward, maximize, objective, start, opts)

    state_traj = Trajectory(grid, outcome.states)
    control = ControlTrajectory(grid, outcome.control)
    return SweepResult(
        state_traj=state_traj,
        adjoints=outcome.adjoints,
        control=control,
        switching=switching_functions(state_traj, outcome.adjoints),
        costs=cost_breakdown(state_traj, control, c),
        iterations=outcome.iterations,
        converged=outcome.converged,
        structure=extract_structure(control, c),
        cost_spec=c,
        objective_history=outcome.objective_history,
        max_change=outcome.max_change,
    )


class ControlService:
    """Service wrapper comparing uncontrolled and optimally controlled runs."""

    def optimize(self, x0: State, params: ModelParams, costs: CostSpec, grid: TimeGrid,
                 options: Optional[SweepOptions] = None) -> Dict[str, Any]:
        """
        Run the uncontrolled model and the forward-backward sweep.

        Args:
            x0: Initial state
            params: Model rates
            costs: Cost specification
            grid: Time grid
            options: Sweep settings

        Returns:
            Result dictionary with both runs and a JSON-ready summary
        """
        try:
            zero = ControlTrajectory.zeros(grid)
            baseline = integrate(x0, zero, params, grid)
            baseline_costs = cost_breakdown(baseline, zero, costs)
            logger.info(f"Uncontrolled costs: J1={baseline_costs.j1:.6g}, J2={baseline_costs.j2:.6g}")

            result = forward_backward_sweep(x0, params, costs, grid, options)
            logger.info(f"Controlled costs: J1={result.costs.j1:.6g}, J2={result.costs.j2:.6g}")
            if not result.costs.total < baseline_costs.total:
                logger.warning("Controlled total cost is not below the uncontrolled one")

            return {
                "success": True,
                "converged": result.converged,
                "uncontrolled": baseline,
                "uncontrolled_control": zero,
                "uncontrolled_costs": baseline_costs,
                "result": result,
            }
        except SwirsError as e:
            logger.error(f"Optimization failed: {e}")
            return {"success": False, **e.to_dict()}
