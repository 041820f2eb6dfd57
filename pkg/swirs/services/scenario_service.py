"""Scenario runner: dispatches a validated scenario to the services and writes results.

Time series go to CSV (UTF-8, header row, comma separated, 17 significant
digits); every run also writes ``<name>_summary.json`` matching
``RunSummary``.
"""
import json
import math
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError
from scipy.optimize import brentq

from swirs.config.logging import get_logger
from swirs.config.scenario import ScenarioConfig
from swirs.errors import (
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    ConfigError,
    DomainError,
    SwirsError,
)
from swirs.services.control_service import (
    ControlService,
    ControlStructureReport,
    CostBreakdown,
    cost_breakdown,
    forward_backward_sweep,
    hamiltonian_spread,
)
from swirs.services.model_service import (
    COMPARTMENTS,
    ControlTrajectory,
    ModelService,
    State,
    Trajectory,
    integrate,
)
from swirs.services.network_service import (
    NetworkControl,
    NetworkService,
    network_integrate,
    suppression_controls,
)
from swirs.services.stability_service import (
    StabilityService,
    check_lyapunov_trajectory,
    equilibrium_E1,
    lyapunov_conditions,
)

# Initialize logger for scenario service
logger = get_logger('scenario_service')

FLOAT_FORMAT = "%.17g"
SWEEP_COLUMNS = ("I_total_uncontrolled", "I_total_controlled", "I_total_fixed_policy", "controlled_converged")


class RunCosts(BaseModel):
    """Costs and end point of one single-population run."""

    costs: CostBreakdown
    final_state: Dict[str, float]
    i_total: float


class ControlledRun(RunCosts):
    iterations: int
    max_change: float
    structure: Optional[ControlStructureReport] = None
    hamiltonian_spread: Optional[float] = None


class ClusterRun(BaseModel):
    """Costs and per-cluster end points of one network run."""

    costs: CostBreakdown
    final_states: List[Dict[str, float]]
    i_total: float
    iterations: Optional[int] = None
    converged: Optional[bool] = None


class RunSummary(BaseModel):
    """JSON summary written next to every run's CSV files."""

    model_config = ConfigDict(extra="forbid")

    name: str
    mode: str
    status: Literal["ok", "not_converged"]
    converged: bool
    files: List[str]
    simulation: Optional[RunCosts] = None
    lyapunov: Optional[Dict[str, Any]] = None
    uncontrolled: Optional[RunCosts] = None
    controlled: Optional[ControlledRun] = None
    clusters: Optional[ClusterRun] = None
    clusters_controlled: Optional[ClusterRun] = None
    stability: Optional[Dict[str, Any]] = None
    bound: Optional[Dict[str, Any]] = None
    sweep: Optional[Dict[str, Any]] = None
    calibration: Optional[Dict[str, Any]] = None


def _service_result(result: Dict[str, Any]) -> Dict[str, Any]:
    """Unwrap a service response, re-raising its error as the matching exception."""
    if result.get("success"):
        return result
    if result.get("type") == "ConfigError":
        raise ConfigError(result["error"], field=result.get("field"), line=result.get("line"))
    error = SwirsError(result.get("error", "service failed"))
    error.code = result.get("code", error.code)
    raise error


def write_frame(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding="utf-8")
    logger.info(f"Wrote {path}")
    return path


def series_frame(traj: Trajectory, ctrl: ControlTrajectory, switching: Optional[np.ndarray] = None) -> pd.DataFrame:
    """Columns t, S, W, I1, I2, R, u1, u2, u3 and optionally phi1, phi2, phi3."""
    frame = traj.to_frame()
    for i, name in enumerate(("u1", "u2", "u3")):
        frame[name] = ctrl.values[:, i]
    if switching is not None:
        for i in range(3):
            frame[f"phi{i + 1}"] = switching[:, i]
    return frame


def _run_costs(traj: Trajectory, ctrl: ControlTrajectory, cfg: ScenarioConfig) -> RunCosts:
    return RunCosts(costs=cost_breakdown(traj, ctrl, cfg.costs), final_state=traj.final.as_dict(),
                    i_total=traj.i_total())


def _simulate(cfg: ScenarioConfig, out: Path) -> RunSummary:
    result = _service_result(ModelService().simulate(cfg.initial, cfg.params, cfg.grid, cfg.control))
    traj, ctrl = result["trajectory"], result["control"]
    path = write_frame(series_frame(traj, ctrl), out / f"{cfg.name}.csv")
    lyapunov = None
    if cfg.control is None or not np.any(cfg.control.as_array()):
        holds, max_rise = check_lyapunov_trajectory(traj, cfg.params)
        lyapunov = {"conditions_hold": holds, "max_rise": max_rise}
    return RunSummary(name=cfg.name, mode="simulate", status="ok", converged=True, files=[path.name],
                      simulation=_run_costs(traj, ctrl, cfg), lyapunov=lyapunov)


def _optimize(cfg: ScenarioConfig, out: Path) -> RunSummary:
    result = _service_result(
        ControlService().optimize(cfg.initial, cfg.params, cfg.costs, cfg.grid, cfg.sweep_options)
    )
    res = result["result"]
    files = [
        write_frame(series_frame(result["uncontrolled"], result["uncontrolled_control"]),
                    out / f"{cfg.name}_uncontrolled.csv").name,
        write_frame(series_frame(res.state_traj, res.control, res.switching.values),
                    out / f"{cfg.name}_controlled.csv").name,
    ]
    controlled = ControlledRun(
        costs=res.costs,
        final_state=res.state_traj.final.as_dict(),
        i_total=res.state_traj.i_total(),
        iterations=res.iterations,
        max_change=res.max_change,
        structure=res.structure,
        hamiltonian_spread=hamiltonian_spread(res, cfg.params),
    )
    return RunSummary(
        name=cfg.name,
        mode="optimize",
        status="ok" if res.converged else "not_converged",
        converged=res.converged,
        files=files,
        uncontrolled=_run_costs(result["uncontrolled"], result["uncontrolled_control"], cfg),
        controlled=controlled,
    )


def _stability(cfg: ScenarioConfig, out: Path) -> RunSummary:
    result = _service_result(StabilityService().analyze(cfg.params))
    path = out / f"{cfg.name}_stability.json"
    path.write_text(json.dumps(result["reports"], indent=2), encoding="utf-8")
    logger.info(f"Wrote {path}")
    at_e1 = lyapunov_conditions(equilibrium_E1(), cfg.params)
    stability = {
        name: {
            "classification": report["classification"],
            "simplex_classification": report["simplex_classification"],
            "proposition_satisfied": all(c["satisfied"] for c in report["proposition_conditions"]),
        }
        for name, report in result["reports"].items()
    }
    return RunSummary(name=cfg.name, mode="stability", status="ok", converged=True, files=[path.name],
                      stability=stability, lyapunov=at_e1.model_dump())


def _cluster_run(traj, costs, iterations=None, converged=None) -> ClusterRun:
    return ClusterRun(costs=costs, final_states=[x.as_dict() for x in traj.final.clusters],
                      i_total=traj.i_total(), iterations=iterations, converged=converged)


def _network(cfg: ScenarioConfig, out: Path) -> RunSummary:
    net = cfg.network_spec()
    service = NetworkService()
    result = _service_result(service.simulate(net, cfg.params, cfg.grid, cfg.costs, cfg.network.control))
    traj, ctrl = result["trajectory"], result["control"]
    files = [write_frame(traj.to_frame(ctrl), out / f"{cfg.name}_network.csv").name]
    summary = dict(
        name=cfg.name, mode="network", status="ok", converged=True,
        clusters=_cluster_run(traj, result["costs"]),
    )
    if cfg.network.optimize:
        res = _service_result(service.optimize(net, cfg.params, cfg.grid, cfg.costs, cfg.sweep_options))["result"]
        files.append(write_frame(res.state_traj.to_frame(res.control),
                                 out / f"{cfg.name}_network_controlled.csv").name)
        summary["clusters_controlled"] = _cluster_run(res.state_traj, res.costs,
                                                      res.iterations, res.converged)
        summary["converged"] = res.converged
        summary["status"] = "ok" if res.converged else "not_converged"
    return RunSummary(files=files, **summary)


def _bound(cfg: ScenarioConfig, out: Path) -> RunSummary:
    net = cfg.network_spec()
    bound = _service_result(NetworkService().bound(
        net, cfg.params, cfg.network.target_cluster, cfg.costs,
        horizon=cfg.grid.t_end - cfg.grid.t0, literal_sigma=cfg.network.literal_sigma,
    ))
    bound = {key: value for key, value in bound.items() if key != "success"}
    levels = suppression_controls(net, net.initial_array(), cfg.params)
    ctrl = NetworkControl.constant(cfg.grid, levels)
    traj = network_integrate(net, ctrl, cfg.params, cfg.grid)
    infected = traj.values[:, :, 2].sum(axis=1) + traj.values[:, :, 3].sum(axis=1)
    bound["network_infection_max_rise"] = float(max(np.max(np.diff(infected)), 0.0))
    path = write_frame(traj.to_frame(ctrl), out / f"{cfg.name}_suppression.csv")
    return RunSummary(name=cfg.name, mode="bound", status="ok", converged=True, files=[path.name], bound=bound)


def _sweep_cell(cfg: ScenarioConfig, point: Tuple[float, float]) -> Dict[str, Any]:
    """Uncontrolled, fixed-policy and optimally controlled I_total at one grid cell."""
    sweep = cfg.sweep
    xv, yv = point
    row: Dict[str, Any] = {sweep.x.name: xv, sweep.y.name: yv}
    row.update({name: math.nan for name in SWEEP_COLUMNS[:3]})
    row["controlled_converged"] = False
    try:
        params = cfg.params.with_updates(**{sweep.x.name: xv, sweep.y.name: yv})
        zero = ControlTrajectory.zeros(cfg.grid)
        row["I_total_uncontrolled"] = integrate(cfg.initial, zero, params, cfg.grid).i_total()
        fixed = ControlTrajectory.constant(cfg.grid, sweep.fixed_policy)
        row["I_total_fixed_policy"] = integrate(cfg.initial, fixed, params, cfg.grid).i_total()
        if sweep.controlled:
            res = forward_backward_sweep(cfg.initial, params, cfg.costs, cfg.grid, cfg.sweep_options)
            row["I_total_controlled"] = res.state_traj.i_total()
            row["controlled_converged"] = res.converged
    except (SwirsError, ValidationError) as e:
        logger.warning(f"Sweep cell {sweep.x.name}={xv:.6g}, {sweep.y.name}={yv:.6g} failed: {e}")
    return row


def sweep_points(cfg: ScenarioConfig) -> List[Tuple[float, float]]:
    """Grid cells in row-major order over (x, y)."""
    xs = np.linspace(cfg.sweep.x.min, cfg.sweep.x.max, cfg.sweep.x.steps)
    ys = np.linspace(cfg.sweep.y.min, cfg.sweep.y.max, cfg.sweep.y.steps)
    return [(float(x), float(y)) for x in xs for y in ys]


def run_sweep(cfg: ScenarioConfig, workers: int = 1) -> pd.DataFrame:
    """Evaluate every (x, y) cell, in parallel when ``workers`` > 1.

    Rows follow the row-major grid order whatever order cells finish in;
    a failed cell keeps NaN in the columns it could not compute.
    """
    if cfg.sweep is None or cfg.initial is None:
        raise ConfigError("a sweep needs a [sweep] table and an [initial] state", field="sweep")
    points = sweep_points(cfg)
    cell = partial(_sweep_cell, cfg)
    logger.info(f"Sweeping {cfg.sweep.x.name} x {cfg.sweep.y.name}: {len(points)} cells on {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(cell, points))
    else:
        rows = [cell(point) for point in points]
    frame = pd.DataFrame(rows, columns=[cfg.sweep.x.name, cfg.sweep.y.name, *SWEEP_COLUMNS])
    failed = int(frame["I_total_uncontrolled"].isna().sum())
    if failed:
        logger.warning(f"{failed} sweep cell(s) failed and hold NaN")
    return frame


def _sweep(cfg: ScenarioConfig, out: Path, workers: int) -> RunSummary:
    frame = run_sweep(cfg, workers)
    path = write_frame(frame, out / f"{cfg.name}_sweep.csv")
    converged = (not cfg.sweep.controlled) or bool(frame["controlled_converged"].all())
    sweep = {
        "x": cfg.sweep.x.name,
        "y": cfg.sweep.y.name,
        "cells": len(frame),
        "failed_cells": int(frame["I_total_uncontrolled"].isna().sum()),
        "unconverged_cells": int((~frame["controlled_converged"].astype(bool)).sum()) if cfg.sweep.controlled else 0,
    }
    return RunSummary(name=cfg.name, mode="sweep", status="ok" if converged else "not_converged",
                      converged=converged, files=[path.name], sweep=sweep)


def write_summary(summary: RunSummary, out: Path) -> Path:
    path = out / f"{summary.name}_summary.json"
    summary.files.append(path.name)
    path.write_text(summary.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Wrote {path}")
    return path


def run_scenario(cfg: ScenarioConfig, out: Union[str, Path], workers: int = 1) -> Tuple[int, RunSummary]:
    """Run ``cfg`` and write its outputs under ``out``.

    Returns:
        The process exit status (0, or 3 when a sweep did not converge) and the summary.

    Raises:
        SwirsError: numerical failures propagate; nothing is written for them.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    logger.info(f"Running scenario {cfg.name!r} in mode {cfg.mode!r}")
    if cfg.mode == "simulate":
        summary = _simulate(cfg, out)
    elif cfg.mode == "optimize":
        summary = _optimize(cfg, out)
    elif cfg.mode == "stability":
        summary = _stability(cfg, out)
    elif cfg.mode == "network":
        summary = _network(cfg, out)
    elif cfg.mode == "bound":
        summary = _bound(cfg, out)
    else:
        summary = _sweep(cfg, out, workers)
    write_summary(summary, out)
    if not summary.converged:
        logger.warning(f"Scenario {cfg.name!r} finished without convergence; outputs carry converged=false")
        return EXIT_NOT_CONVERGED, summary
    return EXIT_OK, summary


def seeded_state(template: State, seed: float) -> State:
    """Scale the non-susceptible part of ``template`` so that it sums to ``seed``."""
    x = template.as_array()
    rest = x[1:]
    total = rest.sum()
    if total <= 0:
        raise DomainError("the template state has no seed to scale (S = 1)")
    return State.from_array(np.concatenate([[1.0 - seed], rest * (seed / total)]))


def calibrate_seed(cfg: ScenarioConfig, target: float, compartment: str = "I2",
                   bracket: Tuple[float, float] = (1e-8, 0.5)) -> Dict[str, Any]:
    """Find the seed size whose uncontrolled run ends with ``compartment`` = ``target``.

    The seed keeps the proportions of the scenario's initial W, I1, I2 and R
    and is located with Brent's method on ``bracket``.
    """
    if compartment not in COMPARTMENTS:
        raise ConfigError(f"unknown compartment {compartment!r}", field="compartment")
    if cfg.initial is None:
        raise ConfigError("calibration needs an [initial] state", field="initial")
    index = COMPARTMENTS.index(compartment)
    zero = ControlTrajectory.zeros(cfg.grid)

    def miss(seed: float) -> float:
        traj = integrate(seeded_state(cfg.initial, seed), zero, cfg.params, cfg.grid)
        return float(traj.values[-1, index]) - target

    lo, hi = bracket
    f_lo, f_hi = miss(lo), miss(hi)
    if f_lo * f_hi > 0:
        raise DomainError(
            f"{compartment}(T) = {target} is not bracketed by seeds {lo:g} ({f_lo + target:.6g}) "
            f"and {hi:g} ({f_hi + target:.6g})"
        )
    seed = brentq(miss, lo, hi, xtol=1e-12)
    state = seeded_state(cfg.initial, seed)
    logger.info(f"Calibrated seed {seed:.6g}: initial state {state.as_dict()}")
    return {
        "compartment": compartment,
        "target": target,
        "seed": seed,
        "initial": state.as_dict(),
        "achieved": miss(seed) + target,
    }


class ScenarioService:
    """Service wrapper used by the command-line front end."""

    def run(self, cfg: ScenarioConfig, out: Union[str, Path], workers: int = 1) -> Dict[str, Any]:
        """
        Run a scenario and write its files.

        Args:
            cfg: Validated scenario
            out: Output directory
            workers: Worker processes for sweeps

        Returns:
            Result dictionary with the exit code and the summary
        """
        try:
            code, summary = run_scenario(cfg, out, workers)
            return {"success": True, "exit_code": code, "summary": summary}
        except SwirsError as e:
            logger.error(f"Scenario {cfg.name!r} failed: {e}")
            return {"success": False, **e.to_dict()}

    def calibrate(self, cfg: ScenarioConfig, out: Union[str, Path], target: float,
                  compartment: str = "I2") -> Dict[str, Any]:
        try:
            calibration = calibrate_seed(cfg, target, compartment)
            out = Path(out)
            out.mkdir(parents=True, exist_ok=True)
            summary = RunSummary(name=cfg.name, mode="calibrate", status="ok", converged=True,
                                 files=[], calibration=calibration)
            write_summary(summary, out)
            return {"success": True, "exit_code": EXIT_OK, "summary": summary}
        except SwirsError as e:
            logger.error(f"Calibration failed: {e}")
            return {"success": False, **e.to_dict()}
