"""Closed-loop receding-horizon simulation.

Each control period: (re)form coordination groups when a mode changed,
rebuild the affected controllers (this is the configuration time), solve
every active flock's program (max wall time over flocks is the step's MPC
time), apply each agent's first input for one control period of plant
sub-steps with ground-truth collision checks, then fire area-entry events.

Runs fail on collision (minor overlaps < 0.01 m are recorded with their own
severity), on a solver infeasibility verdict, or on two consecutive steps
whose solves hit the iteration cap without producing near-feasible iterates.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .coordination import AgentShape, AgentTask, check_event, form_flocks, validate_task
from .geom import Point2, point_in_polygon, point_to_segments_distance
from .mpcbuild import (AgentPlan, AgentState, ControlInput, MpcParams,
                       build_problem, dynamics_step, warm_start,
                       update_objective_weights)
from .solver import SolveStatus, map_multipliers, solve
from .worldmodel import NodeKind, SemanticMap, map_document

ALWAYS = "always"
DYNAMIC = "dynamic"
NEVER = "never"
_MODE_ALIASES = {"a": ALWAYS, "always": ALWAYS, "d": DYNAMIC, "dynamic": DYNAMIC,
                 "n": NEVER, "never": NEVER}

MINOR_OVERLAP = 0.01  # m; larger overlaps are full collisions


def cooperation_mode(name: str) -> str:
    try:
        return _MODE_ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown cooperation mode '{name}' (use A, D or N)") from None


@dataclass
class SimConfig:
    smap: SemanticMap
    tasks: dict[str, AgentTask]
    mode: str = DYNAMIC
    params: MpcParams = field(default_factory=MpcParams)
    seed: int = 0
    max_steps: int = 400
    n_substeps: int = 2
    name: str = "scenario"

    def __post_init__(self):
        self.mode = cooperation_mode(self.mode)
        for task in self.tasks.values():
            validate_task(self.smap, task)


@dataclass
class RunRecord:
    name: str
    mode: str
    seed: int
    agents: list[str]
    routes: dict[str, list[str]]
    trajectories: dict[str, list[list[float]]]
    modes: dict[str, list[int]]
    mode_changes: list[dict]
    flocks_per_step: list[list[list[str]]]
    mpc_time: list[float]
    config_time: list[float]
    solves: list[list[dict]]
    collisions: list[dict]
    completion_step: dict[str, int | None]
    completed: bool
    failure: dict | None
    steps: int
    map_doc: dict

    def to_dict(self) -> dict:
        return {
            "name": self.name, "mode": self.mode, "seed": self.seed,
            "agents": self.agents, "routes": self.routes,
            "trajectories": self.trajectories, "modes": self.modes,
            "mode_changes": self.mode_changes,
            "flocks_per_step": self.flocks_per_step,
            "mpc_time": self.mpc_time, "config_time": self.config_time,
            "solves": self.solves, "collisions": self.collisions,
            "completion_step": self.completion_step,
            "completed": self.completed, "failure": self.failure,
            "steps": self.steps, "map": self.map_doc,
        }

    def timeless_dict(self) -> dict:
        """Record contents with wall-clock fields stripped, for determinism
        comparisons."""
        doc = self.to_dict()
        doc.pop("mpc_time")
        doc.pop("config_time")
        doc["solves"] = [[{k: v for k, v in s.items() if k != "wall_time"}
                          for s in step] for step in doc["solves"]]
        return doc


@dataclass
class ScenarioStats:
    name: str
    mode: str
    runs: int
    completed_runs: int
    failures_infeasible: int
    failures_collision: int
    minor_collisions: int
    completion_steps: dict | None
    mpc_time_ms: dict | None
    config_time_s: dict | None
    flock_count_avg: float
    flock_size_avg: float

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def _min_avg_max(values) -> dict | None:
    values = list(values)
    if not values:
        return None
    return {"min": float(min(values)), "avg": float(np.mean(values)),
            "max": float(max(values))}


def sample_start_pose(area, shape: AgentShape, occupied, rng) -> AgentState:
    """Uniform rejection sample of a collision-free rest pose inside an area:
    clearance of one hard radius from the area boundary and two from every
    already-placed pose."""
    arr = area.as_array()
    xmin, ymin = arr.min(axis=0)
    xmax, ymax = arr.max(axis=0)
    edges_a = arr
    edges_b = np.roll(arr, -1, axis=0)
    for _ in range(10000):
        x = rng.uniform(xmin, xmax)
        y = rng.uniform(ymin, ymax)
        p = Point2(x, y)
        if not point_in_polygon(p, area):
            continue
        if point_to_segments_distance(np.array([x, y]), edges_a, edges_b).min() \
                < shape.hard_radius:
            continue
        if any(math.hypot(x - o.x, y - o.y) < 2 * shape.hard_radius for o in occupied):
            continue
        theta = rng.uniform(-math.pi, math.pi)
        return AgentState(x, y, theta, 0.0)
    raise RuntimeError("no feasible start pose found after 10000 samples")


def _partition(mode: str, tasks: dict[str, AgentTask], n_ha: int):
    ids = sorted(tasks)
    if mode == ALWAYS:
        return [tuple(ids)]
    if mode == NEVER:
        return [(a,) for a in ids]
    return form_flocks(list(tasks.values()), n_ha)


class _WallIndex:
    """All physical boundary edges of the map, for ground-truth checks."""

    def __init__(self, smap: SemanticMap):
        seg_a, seg_b, owners = [], [], []
        for node in smap.boundary_nodes():
            arr = node.polygon.as_array()
            seg_a.append(arr)
            seg_b.append(np.roll(arr, -1, axis=0))
            owners.extend([node.id] * len(arr))
        self.seg_a = np.vstack(seg_a) if seg_a else np.zeros((0, 2))
        self.seg_b = np.vstack(seg_b) if seg_b else np.zeros((0, 2))
        self.owners = owners

    def clearance(self, x: float, y: float):
        if not len(self.owners):
            return math.inf, None
        d = point_to_segments_distance(np.array([x, y]), self.seg_a, self.seg_b)
        i = int(np.argmin(d))
        return float(d[i]), self.owners[i]


def run_once(config: SimConfig, seed: int) -> RunRecord:
    """Simulate one run; deterministic in (config, seed) up to wall times."""
    rng = np.random.default_rng([seed, config.seed])
    smap = config.smap
    params = config.params
    ids = sorted(config.tasks)
    tasks = {a: config.tasks[a] for a in ids}
    walls = _WallIndex(smap)

    states: dict[str, AgentState] = {}
    occupied: list[AgentState] = []
    for aid in ids:
        start_area = smap.nodes[tasks[aid].route[tasks[aid].mode]].polygon
        pose = sample_start_pose(start_area, tasks[aid].shape, occupied, rng)
        states[aid] = pose
        occupied.append(pose)

    trajectories = {a: [] for a in ids}
    modes = {a: [] for a in ids}
    mode_changes: list[dict] = []
    flocks_log: list[list[list[str]]] = []
    mpc_time: list[float] = []
    config_time: list[float] = []
    solves_log: list[list[dict]] = []
    collisions: list[dict] = []
    completion_step: dict[str, int | None] = {
        a: (0 if tasks[a].completed else None) for a in ids}
    failure = None

    # per-flock controller state
    problems: dict[tuple, object] = {}
    multipliers: dict[tuple, dict] = {}
    plans: dict[str, AgentPlan] = {}
    reconfigure = True
    limit_streak = 0
    step = 0
    substep_dt = (1.0 / params.update_hz) / config.n_substeps

    while step < config.max_steps:
        for aid in ids:
            s = states[aid]
            trajectories[aid].append([s.x, s.y, s.theta, s.v])
            modes[aid].append(tasks[aid].mode)
        if all(tasks[a].completed for a in ids):
            break

        # (1) reconfiguration on mode changes
        t0 = time.perf_counter()
        if reconfigure:
            flocks = _partition(config.mode, tasks, params.agent_horizon)
            new_problems: dict[tuple, object] = {}
            new_multipliers: dict[tuple, dict] = {}
            for flock in flocks:
                old = problems.get(flock)
                stale = old is None or any(
                    old.blocks[a].task.mode != tasks[a].mode for a in flock)
                if not stale:
                    new_problems[flock] = old
                    if flock in multipliers:
                        new_multipliers[flock] = multipliers[flock]
                    continue
                prev = {a: plans[a] for a in flock if a in plans} or None
                prob = build_problem(flock, tasks, states, smap, params, prev)
                new_problems[flock] = prob
                if old is not None and flock in multipliers:
                    new_multipliers[flock] = map_multipliers(
                        old, multipliers[flock], prob)
            problems = new_problems
            multipliers = new_multipliers
            reconfigure = False
            config_time.append(time.perf_counter() - t0)
        else:
            flocks = list(problems)
            config_time.append(0.0)
        flocks_log.append([list(f) for f in flocks])

        # (2) per-step refresh and solve of every active flock
        step_solves: list[dict] = []
        step_mpc = 0.0
        step_limited = False
        for flock in flocks:
            active = any(not tasks[a].completed for a in flock) or \
                any(abs(states[a].v) > 1e-3 for a in flock)
            if not active:
                continue
            prob = problems[flock]
            for aid in flock:
                prob.set_initial_state(aid, states[aid])
                w = update_objective_weights(
                    plans[aid].states if aid in plans else None,
                    prob.blocks[aid].elements, smap)
                prob.set_objective_weights(aid, w)
            warm_start(prob, {a: plans[a] for a in flock if a in plans} or None)
            out = solve(prob, params, multipliers.get(flock))
            multipliers[flock] = out.multipliers
            step_mpc = max(step_mpc, out.wall_time)
            step_solves.append({
                "flock": list(flock), "status": out.status.value,
                "iterations": out.iterations, "objective": out.objective,
                "violation": out.max_violation, "wall_time": out.wall_time,
            })
            for aid, plan in prob.extract_plans(out.z).items():
                plans[aid] = plan
            if out.status is SolveStatus.INFEASIBLE:
                failure = {"kind": "infeasible", "step": step,
                           "detail": f"solver infeasible for flock {list(flock)}"}
            elif out.status is SolveStatus.ITERATION_LIMIT and \
                    out.max_violation > 10 * params.feas_tol:
                step_limited = True
        mpc_time.append(step_mpc)
        solves_log.append(step_solves)
        if failure is not None:
            break
        limit_streak = limit_streak + 1 if step_limited else 0
        if limit_streak >= 2:
            failure = {"kind": "infeasible", "step": step,
                       "detail": "iteration limit with unusable iterates on "
                                 "two consecutive steps"}
            break

        # (3) apply first inputs through plant sub-steps with ground-truth
        # collision checks
        inputs = {}
        for aid in ids:
            if aid in plans:
                lim = tasks[aid].limits
                a_cmd = min(max(float(plans[aid].inputs[0, 0]), lim.a_min), lim.a_max)
                w_cmd = min(max(float(plans[aid].inputs[0, 1]), lim.omega_min), lim.omega_max)
                inputs[aid] = ControlInput(a_cmd, w_cmd)
            else:
                inputs[aid] = ControlInput(0.0, 0.0)
        for _ in range(config.n_substeps):
            for aid in ids:
                s = dynamics_step(states[aid], inputs[aid], substep_dt)
                lim = tasks[aid].limits
                v = min(max(s.v, lim.v_min), lim.v_max)
                states[aid] = AgentState(s.x, s.y, s.theta, v)
            hit = _collision_check(ids, states, tasks, walls, step, collisions)
            if hit is not None:
                failure = hit
                break
        if failure is not None:
            break

        # (4) events: at most one mode advance per agent per step
        for aid in ids:
            nm = check_event(tasks[aid], states[aid].position, smap)
            if nm is not None:
                tasks[aid] = tasks[aid].advanced()
                mode_changes.append({"step": step, "agent": aid, "mode": nm})
                reconfigure = True
                if tasks[aid].completed and completion_step[aid] is None:
                    completion_step[aid] = step + 1
        step += 1

    completed = all(tasks[a].completed for a in ids) and failure is None
    return RunRecord(
        name=config.name, mode=config.mode, seed=seed, agents=ids,
        routes={a: list(config.tasks[a].route) for a in ids},
        trajectories=trajectories, modes=modes, mode_changes=mode_changes,
        flocks_per_step=flocks_log, mpc_time=mpc_time,
        config_time=config_time, solves=solves_log, collisions=collisions,
        completion_step=completion_step, completed=completed,
        failure=failure, steps=step, map_doc=map_document(smap),
    )


def _collision_check(ids, states, tasks, walls, step, collisions):
    """Ground-truth overlap test at a plant sub-step; returns a failure dict
    when any overlap occurs (minor ones recorded with their severity)."""
    worst = None
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            d = math.hypot(states[a].x - states[b].x, states[a].y - states[b].y)
            need = tasks[a].shape.hard_radius + tasks[b].shape.hard_radius
            if d < need:
                overlap = need - d
                sev = "minor" if overlap < MINOR_OVERLAP else "full"
                collisions.append({"step": step, "kind": "agent-agent",
                                   "agents": [a, b], "overlap": overlap,
                                   "severity": sev})
                worst = {"kind": "collision", "severity": sev, "step": step,
                         "detail": f"agents {a} and {b} overlap by {overlap:.4f} m"}
    for a in ids:
        clear, wall_id = walls.clearance(states[a].x, states[a].y)
        if clear < tasks[a].shape.hard_radius:
            overlap = tasks[a].shape.hard_radius - clear
            sev = "minor" if overlap < MINOR_OVERLAP else "full"
            collisions.append({"step": step, "kind": "agent-wall",
                               "agents": [a], "wall": wall_id,
                               "overlap": overlap, "severity": sev})
            worst = {"kind": "collision", "severity": sev, "step": step,
                     "detail": f"agent {a} overlaps wall {wall_id} by {overlap:.4f} m"}
    return worst


def aggregate(name: str, mode: str, records: list[RunRecord]) -> ScenarioStats:
    """Scenario statistics over a batch of runs. Completion-time statistics
    cover completed runs only; controller timing pools the per-step values of
    every run (failed runs still ran their solves); configuration timing
    pools the reconfiguration events."""
    completed = [r for r in records if r.completed]
    coll = sum(1 for r in records if r.failure and r.failure["kind"] == "collision")
    infeas = sum(1 for r in records if r.failure and r.failure["kind"] == "infeasible")
    minor = sum(1 for r in records
                if r.failure and r.failure.get("severity") == "minor")
    comp_steps = [max(s for s in r.completion_step.values())
                  for r in completed]
    mpc_ms = [1e3 * t for r in records for t in r.mpc_time]
    cfg_s = [t for r in records for t in r.config_time if t > 0.0]
    counts = [len(f) for r in records for f in r.flocks_per_step]
    sizes = [len(r.agents) / len(f) for r in records for f in r.flocks_per_step]
    return ScenarioStats(
        name=name, mode=mode, runs=len(records),
        completed_runs=len(completed),
        failures_infeasible=infeas, failures_collision=coll,
        minor_collisions=minor,
        completion_steps=_min_avg_max(comp_steps),
        mpc_time_ms=_min_avg_max(mpc_ms),
        config_time_s=_min_avg_max(cfg_s),
        flock_count_avg=float(np.mean(counts)) if counts else 0.0,
        flock_size_avg=float(np.mean(sizes)) if sizes else 0.0,
    )


def run_scenario(config: SimConfig, runs: int, jobs: int = 1):
    """Execute a batch of runs with per-run rng streams derived from
    (scenario seed, run index); returns (ScenarioStats, records)."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if jobs > 1:
        import multiprocessing as mp
        with mp.Pool(jobs) as pool:
            records = pool.starmap(run_once, [(config, i) for i in range(runs)])
    else:
        records = [run_once(config, i) for i in range(runs)]
    return aggregate(config.name, config.mode, records), records
