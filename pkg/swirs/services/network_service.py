"""Meta-population SWIRS dynamics on two coupled layers.

Every cluster carries its own compartment fractions. Information spreads
through the adjacency matrix ``a`` and infection through ``b``; all
rates are shared by the clusters. Costs apply the h, f, L and g
functions to cluster sums.
"""
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import trapezoid

from swirs.config.logging import get_logger
from swirs.errors import ConfigError, ConsistencyError, DomainError, SwirsError
from swirs.services.control_service import (
    ControlCost,
    CostBreakdown,
    CostSpec,
    SweepOptions,
    sweep_loop,
)
from swirs.services.model_service import (
    COMPARTMENTS,
    CONTROLS,
    MASS_TOLERANCE,
    ControlVector,
    ModelParams,
    State,
    TimeGrid,
    Trajectory,
    assemble,
    compute_flows,
    rk4_backward,
    rk4_forward,
)

# Initialize logger for network service
logger = get_logger('network_service')


class NetworkSpec(BaseModel):
    """Cluster adjacency on the information layer (a) and the infection layer (b)."""

    model_config = ConfigDict(frozen=True, allow_inf_nan=False, extra="forbid")

    a: List[List[float]]
    b: List[List[float]]
    initial: List[State] = Field(min_length=1)

    @model_validator(mode="after")
    def _check_shapes(self) -> "NetworkSpec":
        m = len(self.initial)
        for name in ("a", "b"):
            matrix = getattr(self, name)
            if len(matrix) != m or any(len(row) != m for row in matrix):
                raise ValueError(f"{name} must be a {m}x{m} matrix to match {m} initial states")
            if any(v < 0 for row in matrix for v in row):
                raise ValueError(f"{name} entries must be non-negative")
        return self

    @property
    def m(self) -> int:
        return len(self.initial)

    @property
    def a_matrix(self) -> np.ndarray:
        return np.array(self.a, dtype=float)

    @property
    def b_matrix(self) -> np.ndarray:
        return np.array(self.b, dtype=float)

    def initial_array(self) -> np.ndarray:
        return np.stack([x.as_array() for x in self.initial])


class NetworkState(BaseModel):
    """Compartment fractions of every cluster at one instant."""

    model_config = ConfigDict(frozen=True)

    clusters: List[State]

    @classmethod
    def from_array(cls, values: Any) -> "NetworkState":
        """Network state from integrated rows, each clipped and rescaled like ``State.snapped``."""
        return cls(clusters=[State.snapped(row) for row in np.asarray(values, dtype=float)])

    def as_array(self) -> np.ndarray:
        return np.stack([x.as_array() for x in self.clusters])


@dataclass(frozen=True, eq=False)
class NetworkControl:
    """Per-cluster controls on a grid, shape (n + 1, m, 3)."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 3 or values.shape[0] != self.grid.n_steps + 1 or values.shape[2] != 3:
            raise DomainError(f"network controls must have shape (n + 1, m, 3), got {values.shape}")
        if not np.all(np.isfinite(values)) or values.min() < -1e-12 or values.max() > 1.0 + 1e-12:
            raise DomainError("network controls must be finite and lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @classmethod
    def zeros(cls, grid: TimeGrid, m: int) -> "NetworkControl":
        return cls(grid, np.zeros((grid.n_steps + 1, m, 3)))

    @classmethod
    def constant(cls, grid: TimeGrid, levels: Any) -> "NetworkControl":
        """Hold per-cluster levels, given as an (m, 3) array or a list of ControlVector."""
        if len(levels) and isinstance(levels[0], ControlVector):
            levels = np.stack([u.as_array() for u in levels])
        levels = np.asarray(levels, dtype=float)
        return cls(grid, np.broadcast_to(levels, (grid.n_steps + 1,) + levels.shape))

    def cluster(self, j: int) -> np.ndarray:
        return self.values[:, j, :]


@dataclass(frozen=True, eq=False)
class NetworkTrajectory:
    """Per-cluster states on a grid, shape (n + 1, m, 5)."""

    grid: TimeGrid
    values: np.ndarray

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def cluster(self, j: int) -> Trajectory:
        return Trajectory(self.grid, self.values[:, j, :])

    @property
    def final(self) -> NetworkState:
        return NetworkState.from_array(self.values[-1])

    def mass_error(self) -> float:
        return float(np.max(np.abs(self.values.sum(axis=2) - 1.0)))

    def i_total(self) -> float:
        """Network-wide time-integrated infection."""
        infected = self.values[:, :, 2].sum(axis=1) + self.values[:, :, 3].sum(axis=1)
        return float(trapezoid(infected, self.grid.times))

    def to_frame(self, control: Optional[NetworkControl] = None) -> pd.DataFrame:
        """Columns t, S_1, W_1, ..., R_m and, with a control, u1_1, ..., u3_m."""
        columns: Dict[str, np.ndarray] = {"t": self.grid.times}
        for j in range(self.m):
            for i, name in enumerate(COMPARTMENTS):
                columns[f"{name}_{j + 1}"] = self.values[:, j, i]
        if control is not None:
            for j in range(control.m):
                for i, name in enumerate(CONTROLS):
                    columns[f"{name}_{j + 1}"] = control.values[:, j, i]
        return pd.DataFrame(columns)


@dataclass(frozen=True, eq=False)
class NetworkSweepResult:
    state_traj: NetworkTrajectory
    adjoints: np.ndarray
    control: NetworkControl
    switching: np.ndarray
    costs: CostBreakdown
    iterations: int
    converged: bool
    objective_history: List[float] = field(default_factory=list)
    max_change: float = math.nan


@dataclass(frozen=True)
class SuppressionBound:
    """Aggregate constant-control level U for an infection entering ``target``.

    ``per_cluster[j, q]`` is the floored per-cluster, per-virus level.
    """

    target: int
    value: float
    per_cluster: np.ndarray
    literal_sigma: bool = False


def _network_array(x: Any, m: int) -> np.ndarray:
    arr = x.as_array() if isinstance(x, NetworkState) else np.asarray(x, dtype=float)
    if arr.shape != (m, 5):
        raise ConfigError(f"network state must have shape ({m}, 5), got {arr.shape}", field="network")
    if not np.all(np.isfinite(arr)):
        raise DomainError("network state must be finite")
    return arr


def _control_levels(u: Any, m: int) -> np.ndarray:
    if u is None:
        return np.zeros((m, 3))
    if isinstance(u, (list, tuple)) and u and isinstance(u[0], ControlVector):
        u = np.stack([v.as_array() for v in u])
    arr = np.asarray(u, dtype=float)
    if arr.shape != (m, 3):
        raise ConfigError(f"network control must have shape ({m}, 3), got {arr.shape}", field="network")
    return arr


def _field(x: np.ndarray, u: np.ndarray, p: ModelParams, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    seen = (a @ x[:, 1], b @ x[:, 2], b @ x[:, 3])
    return assemble(compute_flows(x, u, p, seen))


def network_rhs(x: Any, u: Any, p: ModelParams, net: NetworkSpec) -> np.ndarray:
    """Derivatives of every cluster, shape (m, 5).

    Raises:
        ConfigError: if the state or control does not match the cluster count.
    """
    return _field(_network_array(x, net.m), _control_levels(u, net.m), p, net.a_matrix, net.b_matrix)


def network_integrate(net: NetworkSpec, ctrl: NetworkControl, p: ModelParams, grid: TimeGrid) -> NetworkTrajectory:
    """RK4 integration of all clusters from ``net.initial``."""
    if ctrl.grid != grid:
        raise DomainError("control trajectory and integration grid differ")
    if ctrl.m != net.m:
        raise ConfigError(f"control has {ctrl.m} clusters, network has {net.m}", field="network")
    a, b = net.a_matrix, net.b_matrix

    def field_fn(y: np.ndarray, v: np.ndarray) -> np.ndarray:
        return _field(y, v, p, a, b)

    traj = NetworkTrajectory(grid, rk4_forward(field_fn, net.initial_array(), ctrl.values, grid.dt, grid.t0))
    drift = traj.mass_error()
    if drift > MASS_TOLERANCE:
        raise ConsistencyError(f"cluster mass drifted by {drift:.3e} during integration")
    return traj


def _network_cost_rates(states: np.ndarray, controls: np.ndarray, c: CostSpec) -> Tuple[Any, Any]:
    totals = states.sum(axis=-2)
    efforts = controls.sum(axis=-2)
    s, w, i1, i2, r = totals.T
    u1, u2, u3 = efforts.T
    j1 = c.h3.value(u3) - c.L_coef * w
    j2 = c.f1_coef * i1 + c.f2_coef * i2 + c.h1.value(u1) + c.h2.value(u2) - c.g_coef * r
    return j1, j2


def network_cost(traj: NetworkTrajectory, ctrl: NetworkControl, c: CostSpec) -> CostBreakdown:
    """Trapezoid-rule costs with h, f, L and g applied to cluster sums."""
    j1, j2 = _network_cost_rates(traj.values, ctrl.values, c)
    times = traj.grid.times
    return CostBreakdown.of(trapezoid(j1, times), trapezoid(j2, times))


def network_hamiltonian(x: Any, lam: Any, u: Any, p: ModelParams, net: NetworkSpec, c: CostSpec) -> float:
    """-(j1 + j2) + sum over clusters of lam . derivative."""
    xs = _network_array(x, net.m)
    us = _control_levels(u, net.m)
    lams = np.asarray(lam, dtype=float).reshape(net.m, 5)
    j1, j2 = _network_cost_rates(xs, us, c)
    return float(-(j1 + j2) + np.sum(lams * _field(xs, us, p, net.a_matrix, net.b_matrix)))


def _adjoint_field(lam: np.ndarray, x: np.ndarray, u: np.ndarray, p: ModelParams,
                   a: np.ndarray, b: np.ndarray, c: CostSpec) -> np.ndarray:
    s, w, i1, i2, r = x.T
    ls, lw, li1, li2, lr = lam.T
    u1, u2, u3 = u.T
    w_seen, i1_seen, i2_seen = a @ w, b @ i1, b @ i2

    d_sw = lw - ls
    d_si1 = li1 - ls
    d_si2 = li2 - ls
    d_wi1 = li1 - lw
    d_wi2 = li2 - lw
    d_i1i2 = li2 - li1
    d_i1r = lr - li1
    d_i2r = lr - li2
    d_wr = lr - lw
    d_rs = ls - lr

    dh_ds = d_sw * p.k * w_seen + d_si1 * p.beta_s1 * i1_seen + d_si2 * p.beta_s2 * i2_seen + d_sw * u3
    dh_dw = (c.L_coef + p.k * (a.T @ (d_sw * s)) + d_wi1 * p.beta_w1 * i1_seen
             + d_wi2 * p.beta_w2 * i2_seen + d_wr * p.sigma3)
    dh_di1 = (-c.f1_coef + p.beta_s1 * (b.T @ (d_si1 * s)) + p.beta_w1 * (b.T @ (d_wi1 * w))
              + d_i1i2 * p.epsilon * i2_seen + d_i1r * (p.sigma1 + u1))
    dh_di2 = (-c.f2_coef + p.beta_s2 * (b.T @ (d_si2 * s)) + p.beta_w2 * (b.T @ (d_wi2 * w))
              + p.epsilon * (b.T @ (d_i1i2 * i1)) + d_i2r * (p.sigma2 + u2))
    dh_dr = c.g_coef + d_rs * p.gamma
    return -np.stack([dh_ds, dh_dw, dh_di1, dh_di2, dh_dr], axis=-1)


def network_adjoint_rhs(x: Any, lam: Any, u: Any, p: ModelParams, net: NetworkSpec, c: CostSpec) -> np.ndarray:
    """Costate derivatives of every cluster, shape (m, 5), i.e. minus the state gradient of the Hamiltonian."""
    lams = np.asarray(lam, dtype=float).reshape(net.m, 5)
    return _adjoint_field(lams, _network_array(x, net.m), _control_levels(u, net.m), p,
                          net.a_matrix, net.b_matrix, c)


def network_switching(states: np.ndarray, adjoints: np.ndarray) -> np.ndarray:
    """Per-cluster switching values, controls on the last axis."""
    s, i1, i2 = states[..., 0], states[..., 2], states[..., 3]
    ls, lw, li1, li2, lr = (adjoints[..., i] for i in range(5))
    return np.stack([(lr - li1) * i1, (lr - li2) * i2, (lw - ls) * s], axis=-1)


def _maximize_summed(phi: np.ndarray, cost: ControlCost) -> np.ndarray:
    """Maximize -h(sum u) + phi . u over u in [0, 1]^m, clusters on the last axis."""
    if cost.shape == "linear":
        return np.where(phi >= cost.coef, 1.0, 0.0)
    order = np.argsort(-phi, axis=-1, kind="stable")
    ranked = np.take_along_axis(phi, order, axis=-1)
    # the k-th best cluster sees k full clusters ahead of it; after a partial one the rest are 0
    levels = np.clip(ranked / (2.0 * cost.coef) - np.arange(phi.shape[-1]), 0.0, 1.0)
    out = np.empty_like(levels)
    np.put_along_axis(out, order, levels, axis=-1)
    return out


def maximize_network_controls(phi: np.ndarray, c: CostSpec) -> np.ndarray:
    """Pointwise maximizer of the network Hamiltonian.

    ``phi`` has shape (..., m, 3). Clusters are filled in decreasing order
    of phi while the marginal value phi - h'(sum u) stays positive.
    """
    phi = np.asarray(phi, dtype=float)
    return np.stack([_maximize_summed(phi[..., i], cost) for i, cost in enumerate(c.control_costs)], axis=-1)


def network_forward_backward_sweep(net: NetworkSpec, p: ModelParams, c: CostSpec, grid: TimeGrid,
                                   opts: Optional[SweepOptions] = None) -> NetworkSweepResult:
    """Forward-backward sweep on the stacked cluster states."""
    opts = opts or SweepOptions()
    a, b = net.a_matrix, net.b_matrix
    x0 = net.initial_array()
    times = grid.times

    def state_field(y: np.ndarray, v: np.ndarray) -> np.ndarray:
        return _field(y, v, p, a, b)

    def costate_field(lam: np.ndarray, y: np.ndarray, v: np.ndarray) -> np.ndarray:
        return _adjoint_field(lam, y, v, p, a, b, c)

    def forward(u: np.ndarray) -> np.ndarray:
        return rk4_forward(state_field, x0, u, grid.dt, grid.t0)

    def backward(states: np.ndarray, u: np.ndarray) -> np.ndarray:
        return rk4_backward(costate_field, np.zeros_like(x0), states, u, grid.dt)

    def maximize(states: np.ndarray, adjoints: np.ndarray) -> np.ndarray:
        return maximize_network_controls(network_switching(states, adjoints), c)

    def objective(states: np.ndarray, u: np.ndarray) -> float:
        j1, j2 = _network_cost_rates(states, u, c)
        return float(trapezoid(j1 + j2, times))

    logger.info(f"Network sweep: m={net.m}, T={grid.t_end}, n_steps={grid.n_steps}")
    outcome = sweep_loop(forward, backward, maximize, objective,
                         np.zeros((grid.n_steps + 1, net.m, 3)), opts, label="network sweep")
    traj = NetworkTrajectory(grid, outcome.states)
    control = NetworkControl(grid, outcome.control)
    return NetworkSweepResult(
        state_traj=traj,
        adjoints=outcome.adjoints,
        control=control,
        switching=network_switching(outcome.states, outcome.adjoints),
        costs=network_cost(traj, control, c),
        iterations=outcome.iterations,
        converged=outcome.converged,
        objective_history=outcome.objective_history,
        max_change=outcome.max_change,
    )


def suppression_bound(net: NetworkSpec, x0: Any, p: ModelParams, target: int,
                      literal_sigma: bool = False) -> SuppressionBound:
    """Constant-control level keeping the network disease-free after an infection reaches ``target``.

    U = (beta_s1 + beta_s2) sum_j S0_j b[j, target] + (beta_w1 + beta_w2) sum_j W0_j b[j, target]
        - m (sigma1 + sigma2).
    Per-cluster levels (beta_sq S0_j + beta_wq W0_j) b[j, target] - sigma_q are floored at 0;
    ``literal_sigma`` subtracts sigma1 for both viruses.
    """
    if not 0 <= target < net.m:
        raise ConfigError(f"target cluster {target} outside 0..{net.m - 1}", field="target")
    xs = _network_array(x0, net.m)
    column = net.b_matrix[:, target]
    s0, w0 = xs[:, 0], xs[:, 1]
    value = ((p.beta_s1 + p.beta_s2) * float(s0 @ column) + (p.beta_w1 + p.beta_w2) * float(w0 @ column)
             - net.m * (p.sigma1 + p.sigma2))
    sigmas = (p.sigma1, p.sigma1) if literal_sigma else (p.sigma1, p.sigma2)
    per_cluster = np.stack([
        np.maximum((p.beta_s1 * s0 + p.beta_w1 * w0) * column - sigmas[0], 0.0),
        np.maximum((p.beta_s2 * s0 + p.beta_w2 * w0) * column - sigmas[1], 0.0),
    ], axis=-1)
    logger.debug(f"Suppression bound for target {target}: U={value:.6g}")
    return SuppressionBound(target=target, value=float(value), per_cluster=per_cluster, literal_sigma=literal_sigma)


def suppression_controls(net: NetworkSpec, x0: Any, p: ModelParams) -> np.ndarray:
    """Constant per-cluster levels, shape (m, 3), that stop network-wide infection growth.

    u_{q l} = clip(sum_j (beta_sq S0_j + beta_wq W0_j) b[j, l] - sigma_q, 0, 1) and u3 = 0.
    With these levels sum_j (I1_j + I2_j) does not grow while S + W stays at or below its start.
    """
    xs = _network_array(x0, net.m)
    b = net.b_matrix
    s0, w0 = xs[:, 0], xs[:, 1]
    pressure1 = (p.beta_s1 * s0 + p.beta_w1 * w0) @ b
    pressure2 = (p.beta_s2 * s0 + p.beta_w2 * w0) @ b
    levels = np.zeros((net.m, 3))
    levels[:, 0] = np.clip(pressure1 - p.sigma1, 0.0, 1.0)
    levels[:, 1] = np.clip(pressure2 - p.sigma2, 0.0, 1.0)
    return levels


def suppression_cost_estimate(bound: SuppressionBound, x0: Any, c: CostSpec, horizon: float) -> float:
    """T * (min(h1(U), h2(U)) - L(sum W0) - g(sum R0)), with U floored at 0; a diagnostic only."""
    xs = np.asarray(x0.as_array() if isinstance(x0, NetworkState) else x0, dtype=float)
    level = max(bound.value, 0.0)
    return float(horizon * (min(c.h1.value(level), c.h2.value(level))
                            - c.L_coef * xs[:, 1].sum() - c.g_coef * xs[:, 4].sum()))


class NetworkService:
    """Service wrapper for network simulations, sweeps and suppression bounds."""

    def simulate(self, net: NetworkSpec, params: ModelParams, grid: TimeGrid, costs: CostSpec,
                 levels: Optional[Sequence[ControlVector]] = None) -> Dict[str, Any]:
        """
        Integrate the network under constant per-cluster controls.

        Args:
            net: Network specification
            params: Model rates
            grid: Time grid
            costs: Cost specification
            levels: Per-cluster constant controls, zero when omitted

        Returns:
            Result dictionary with the trajectory, costs and final states
        """
        try:
            ctrl = (NetworkControl.constant(grid, list(levels)) if levels
                    else NetworkControl.zeros(grid, net.m))
            logger.info(f"Simulating network with {net.m} clusters, T={grid.t_end}")
            traj = network_integrate(net, ctrl, params, grid)
            costs_out = network_cost(traj, ctrl, costs)
            return {
                "success": True,
                "trajectory": traj,
                "control": ctrl,
                "costs": costs_out,
                "final_states": [x.as_dict() for x in traj.final.clusters],
                "i_total": traj.i_total(),
            }
        except SwirsError as e:
            logger.error(f"Network simulation failed: {e}")
            return {"success": False, **e.to_dict()}

    def optimize(self, net: NetworkSpec, params: ModelParams, grid: TimeGrid, costs: CostSpec,
                 options: Optional[SweepOptions] = None) -> Dict[str, Any]:
        try:
            result = network_forward_backward_sweep(net, params, costs, grid, options)
            return {"success": True, "converged": result.converged, "result": result}
        except SwirsError as e:
            logger.error(f"Network sweep failed: {e}")
            return {"success": False, **e.to_dict()}

    def bound(self, net: NetworkSpec, params: ModelParams, target: int, costs: CostSpec,
              horizon: float, literal_sigma: bool = False) -> Dict[str, Any]:
        """
        Suppression bound for an infection entering ``target``.

        Returns:
            JSON-ready bound, per-cluster levels, suppression controls and cost estimate
        """
        try:
            x0 = net.initial_array()
            bound = suppression_bound(net, x0, params, target, literal_sigma=literal_sigma)
            levels = suppression_controls(net, x0, params)
            estimate = suppression_cost_estimate(bound, x0, costs, horizon)
            logger.info(f"Suppression bound U={bound.value:.6g}, cost estimate {estimate:.6g}")
            return {
                "success": True,
                "target": target,
                "U": bound.value,
                "per_cluster": bound.per_cluster.tolist(),
                "literal_sigma": literal_sigma,
                "suppression_controls": levels.tolist(),
                "cost_estimate": estimate,
            }
        except SwirsError as e:
            logger.error(f"Suppression bound failed: {e}")
            return {"success": False, **e.to_dict()}
