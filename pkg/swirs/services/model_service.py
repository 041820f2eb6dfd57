"""Controlled SWIRS dynamics.

State, parameter and control types, the model right-hand side assembled
from its transition flows, and the fixed-step RK4 drivers shared by the
forward state pass and the backward costate pass.
"""
from dataclasses import dataclass
from typing import Annotated, Any, Callable, ClassVar, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import trapezoid

from swirs.config.logging import get_logger
from swirs.errors import ConsistencyError, DomainError, IntegrationDivergedError, SwirsError

# Initialize logger for model service
logger = get_logger('model_service')

COMPARTMENTS = ("S", "W", "I1", "I2", "R")
CONTROLS = ("u1", "u2", "u3")

STATE_TOLERANCE = 1e-9
MASS_TOLERANCE = 1e-9
DIVERGENCE_TOLERANCE = 1e-6

_VALUE_CONFIG = ConfigDict(frozen=True, allow_inf_nan=False, extra="forbid")

Fraction = Annotated[float, Field(ge=-STATE_TOLERANCE, le=1.0 + STATE_TOLERANCE)]


class State(BaseModel):
    """Compartment fractions (S, W, I1, I2, R) at one instant."""

    model_config = _VALUE_CONFIG

    s: Fraction
    w: Fraction
    i1: Fraction
    i2: Fraction
    r: Fraction

    @model_validator(mode="after")
    def _check_mass(self) -> "State":
        total = self.s + self.w + self.i1 + self.i2 + self.r
        if abs(total - 1.0) > MASS_TOLERANCE:
            raise ValueError(f"compartments must sum to 1, got {total!r}")
        return self

    @classmethod
    def from_array(cls, values: Any) -> "State":
        arr = np.asarray(values, dtype=float)
        if arr.shape != (5,):
            raise DomainError(f"a state has 5 components, got shape {arr.shape}")
        return cls(s=arr[0], w=arr[1], i1=arr[2], i2=arr[3], r=arr[4])

    @classmethod
    def snapped(cls, values: Any) -> "State":
        """State from an integrated row; round-off below 0 is clipped and the mass rescaled to 1."""
        arr = np.clip(np.asarray(values, dtype=float), 0.0, None)
        return cls.from_array(arr / arr.sum())

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.w, self.i1, self.i2, self.r])

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(COMPARTMENTS, self.as_array().tolist()))


class ModelParams(BaseModel):
    """Rate constants of the SWIRS model."""

    model_config = _VALUE_CONFIG

    k: float = Field(ge=0, description="information-spread rate")
    beta_s1: float = Field(ge=0, description="virus-1 infection rate of susceptible nodes")
    beta_s2: float = Field(ge=0, description="virus-2 infection rate of susceptible nodes")
    beta_w1: float = Field(ge=0, description="virus-1 infection rate of warned nodes")
    beta_w2: float = Field(ge=0, description="virus-2 infection rate of warned nodes")
    sigma1: float = Field(ge=0, description="virus-1 self-recovery rate")
    sigma2: float = Field(ge=0, description="virus-2 self-recovery rate")
    sigma3: float = Field(ge=0, description="warned recovery rate")
    gamma: float = Field(ge=0, description="immunity-loss rate")
    epsilon: float = Field(ge=0, le=1, description="virus-2 supersession rate")

    @classmethod
    def names(cls) -> Tuple[str, ...]:
        return tuple(cls.model_fields)

    def with_updates(self, **changes: float) -> "ModelParams":
        """Validated copy with some rates replaced."""
        return type(self).model_validate({**self.model_dump(), **changes})


class ControlVector(BaseModel):
    """Treatment fractions u1, u2 and information-spreading fraction u3."""

    model_config = _VALUE_CONFIG

    ZERO: ClassVar["ControlVector"]

    u1: float = Field(default=0.0, ge=0, le=1)
    u2: float = Field(default=0.0, ge=0, le=1)
    u3: float = Field(default=0.0, ge=0, le=1)

    def as_array(self) -> np.ndarray:
        return np.array([self.u1, self.u2, self.u3])


ControlVector.ZERO = ControlVector()


class TimeGrid(BaseModel):
    """Uniform discretization of [t0, t_end]."""

    model_config = _VALUE_CONFIG

    t0: float = 0.0
    t_end: float = Field(gt=0)
    n_steps: int = Field(default=2000, ge=1)

    @model_validator(mode="after")
    def _check_order(self) -> "TimeGrid":
        if self.t_end <= self.t0:
            raise ValueError("t_end must be greater than t0")
        return self

    @property
    def dt(self) -> float:
        return (self.t_end - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.t_end, self.n_steps + 1)


@dataclass(frozen=True, eq=False)
class ControlTrajectory:
    """Controls (u1, u2, u3) at every grid point, linear in between."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        expected = (self.grid.n_steps + 1, 3)
        if values.shape != expected:
            raise DomainError(f"control values must have shape {expected}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DomainError("control values must be finite")
        if values.min() < -1e-12 or values.max() > 1.0 + 1e-12:
            raise DomainError("control values must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: TimeGrid) -> "ControlTrajectory":
        return cls(grid, np.zeros((grid.n_steps + 1, 3)))

    @classmethod
    def constant(cls, grid: TimeGrid, u: ControlVector) -> "ControlTrajectory":
        return cls(grid, np.tile(u.as_array(), (grid.n_steps + 1, 1)))

    def at(self, t: float) -> ControlVector:
        times = self.grid.times
        u = [float(np.interp(t, times, self.values[:, i])) for i in range(3)]
        return ControlVector(**dict(zip(CONTROLS, np.clip(u, 0.0, 1.0))))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(CONTROLS))
        frame.insert(0, "t", self.grid.times)
        return frame


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States at every point of a time grid."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        expected = (self.grid.n_steps + 1, 5)
        if values.shape != expected:
            raise DomainError(f"trajectory values must have shape {expected}, got {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def final(self) -> State:
        return State.snapped(self.values[-1])

    def column(self, name: str) -> np.ndarray:
        return self.values[:, COMPARTMENTS.index(name)]

    def mass_error(self) -> float:
        return float(np.max(np.abs(self.values.sum(axis=1) - 1.0)))

    def i_total(self) -> float:
        """Time-integrated infection, the trapezoid rule of I1 + I2 over the grid."""
        return float(trapezoid(self.column("I1") + self.column("I2"), self.grid.times))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(COMPARTMENTS))
        frame.insert(0, "t", self.grid.times)
        return frame


class Flows(NamedTuple):
    """The eleven transition rates of the model, one per arrow."""

    s_to_w_contact: Any
    s_to_w_control: Any
    s_to_i1: Any
    s_to_i2: Any
    w_to_i1: Any
    w_to_i2: Any
    i1_to_i2: Any
    i1_to_r: Any
    i2_to_r: Any
    w_to_r: Any
    r_to_s: Any


StateLike = Union[State, np.ndarray, List[float], Tuple[float, ...]]
ControlLike = Union[ControlVector, np.ndarray, List[float], Tuple[float, ...]]


def state_array(x: StateLike) -> np.ndarray:
    """Coerce a State or a length-5 sequence into a finite float array."""
    arr = x.as_array() if isinstance(x, State) else np.asarray(x, dtype=float)
    if arr.shape != (5,):
        raise DomainError(f"a state has 5 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"state must be finite, got {arr.tolist()}")
    return arr


def control_array(u: Optional[ControlLike]) -> np.ndarray:
    """Coerce a ControlVector or a length-3 sequence into a finite float array."""
    if u is None:
        return np.zeros(3)
    arr = u.as_array() if isinstance(u, ControlVector) else np.asarray(u, dtype=float)
    if arr.shape != (3,):
        raise DomainError(f"a control has 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"control must be finite, got {arr.tolist()}")
    return arr


def compute_flows(x: np.ndarray, u: np.ndarray, p: ModelParams,
                  seen: Optional[Tuple[Any, Any, Any]] = None) -> Flows:
    """Transition rates for one population (shape (5,)) or many (shape (m, 5)).

    ``seen`` replaces the W, I1 and I2 a population is exposed to; the
    network model passes the adjacency-weighted sums here.
    """
    s, w, i1, i2, r = x.T
    u1, u2, u3 = u.T
    w_seen, i1_seen, i2_seen = (w, i1, i2) if seen is None else seen
    return Flows(
        s_to_w_contact=p.k * s * w_seen,
        s_to_w_control=u3 * s,
        s_to_i1=p.beta_s1 * s * i1_seen,
        s_to_i2=p.beta_s2 * s * i2_seen,
        w_to_i1=p.beta_w1 * w * i1_seen,
        w_to_i2=p.beta_w2 * w * i2_seen,
        i1_to_i2=p.epsilon * i1 * i2_seen,
        i1_to_r=(p.sigma1 + u1) * i1,
        i2_to_r=(p.sigma2 + u2) * i2,
        w_to_r=p.sigma3 * w,
        r_to_s=p.gamma * r,
    )


def assemble(f: Flows) -> np.ndarray:
    """Net derivative of every compartment; each flow leaves one and enters another."""
    ds = f.r_to_s - f.s_to_w_contact - f.s_to_w_control - f.s_to_i1 - f.s_to_i2
    dw = f.s_to_w_contact + f.s_to_w_control - f.w_to_i1 - f.w_to_i2 - f.w_to_r
    di1 = f.s_to_i1 + f.w_to_i1 - f.i1_to_i2 - f.i1_to_r
    di2 = f.s_to_i2 + f.w_to_i2 + f.i1_to_i2 - f.i2_to_r
    dr = f.i1_to_r + f.i2_to_r + f.w_to_r - f.r_to_s
    return np.stack([ds, dw, di1, di2, dr], axis=-1)


def flows(x: StateLike, u: Optional[ControlLike], p: ModelParams) -> Flows:
    """Named transition rates at a single state."""
    return compute_flows(state_array(x), control_array(u), p)


def rhs(x: StateLike, u: Optional[ControlLike], p: ModelParams) -> np.ndarray:
    """Time derivative (dS, dW, dI1, dI2, dR) of the controlled model.

    Raises:
        DomainError: if the state or the control is not finite.
    """
    return assemble(compute_flows(state_array(x), control_array(u), p))


def rk4_forward(field: Callable[[np.ndarray, np.ndarray], np.ndarray], x0: np.ndarray,
                controls: np.ndarray, dt: float, t0: float = 0.0) -> np.ndarray:
    """Classical RK4 with controls linear between grid points.

    The midpoint stages use the average of the two neighbouring controls.
    Any component leaving [-1e-6, 1 + 1e-6] raises IntegrationDivergedError.
    """
    n = controls.shape[0] - 1
    out = np.empty((n + 1,) + x0.shape)
    out[0] = x0
    x = x0
    half = 0.5 * dt
    for i in range(n):
        u_start = controls[i]
        u_end = controls[i + 1]
        u_mid = 0.5 * (u_start + u_end)
        k1 = field(x, u_start)
        k2 = field(x + half * k1, u_mid)
        k3 = field(x + half * k2, u_mid)
        k4 = field(x + dt * k3, u_end)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not (np.all(np.isfinite(x)) and x.min() >= -DIVERGENCE_TOLERANCE
                and x.max() <= 1.0 + DIVERGENCE_TOLERANCE):
            t = t0 + (i + 1) * dt
            raise IntegrationDivergedError(
                f"state left [-1e-6, 1+1e-6] at t={t:.6g}; reduce the step or check the rates",
                time=t, state=x.ravel(),
            )
        out[i + 1] = x
    return out


def rk4_backward(field: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
                 lam_end: np.ndarray, states: np.ndarray, controls: np.ndarray,
                 dt: float) -> np.ndarray:
    """RK4 from the last grid point back to the first.

    ``field(lam, x, u)`` is the costate derivative; the stored states and
    controls are interpolated linearly at the midpoint stages.
    """
    n = states.shape[0] - 1
    out = np.empty((n + 1,) + lam_end.shape)
    out[n] = lam_end
    lam = lam_end
    half = 0.5 * dt
    for i in range(n, 0, -1):
        x_mid = 0.5 * (states[i - 1] + states[i])
        u_mid = 0.5 * (controls[i - 1] + controls[i])
        k1 = field(lam, states[i], controls[i])
        k2 = field(lam - half * k1, x_mid, u_mid)
        k3 = field(lam - half * k2, x_mid, u_mid)
        k4 = field(lam - dt * k3, states[i - 1], controls[i - 1])
        lam = lam - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(lam)):
            raise DomainError(f"costate became non-finite at step {i - 1}")
        out[i - 1] = lam
    return out


def integrate(x0: StateLike, ctrl: ControlTrajectory, p: ModelParams, grid: TimeGrid) -> Trajectory:
    """Integrate the controlled model over ``grid`` with fixed-step RK4.

    Raises:
        DomainError: if the control lives on another grid or inputs are not finite.
        IntegrationDivergedError: if the state leaves the unit interval.
    """
    if ctrl.grid != grid:
        raise DomainError("control trajectory and integration grid differ")
    x = state_array(x0)

    def field(y: np.ndarray, u: np.ndarray) -> np.ndarray:
        return assemble(compute_flows(y, u, p))

    traj = Trajectory(grid, rk4_forward(field, x, ctrl.values, grid.dt, grid.t0))
    drift = traj.mass_error()
    if drift > MASS_TOLERANCE:
        raise ConsistencyError(f"mass drifted by {drift:.3e} during integration")
    return traj


class ModelService:
    """Service wrapper that runs single-population simulations."""

    def simulate(self, x0: State, params: ModelParams, grid: TimeGrid,
                 control: Optional[ControlVector] = None) -> Dict[str, Any]:
        """
        Integrate the model under a constant control.

        Args:
            x0: Initial state
            params: Model rates
            grid: Time grid
            control: Constant control, zero when omitted

        Returns:
            Result dictionary with the trajectory and a JSON-ready summary
        """
        try:
            u = control or ControlVector.ZERO
            ctrl = ControlTrajectory.constant(grid, u)
            logger.info(f"Simulating T={grid.t_end} with {grid.n_steps} steps, control={u.as_array().tolist()}")
            traj = integrate(x0, ctrl, params, grid)
            final = traj.final
            logger.debug(f"Final state: {final.as_dict()}")
            return {
                "success": True,
                "trajectory": traj,
                "control": ctrl,
                "final_state": final.as_dict(),
                "i_total": traj.i_total(),
            }
        except SwirsError as e:
            logger.error(f"Simulation failed: {e}")
            return {"success": False, **e.to_dict()}
