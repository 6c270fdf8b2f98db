"""Fixed solver benchmark battery. Run as: python tools/solver_battery.py

Each case is a deterministic problem instance; the battery reports status,
iterations, violation, certificate and an independent geometric audit, so
solver changes can be judged in one shot.
"""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from semnav import worldmodel as wm, coordination as co
from semnav.geom import Point2, point_polygon_distance
from semnav.mpcbuild import AgentState, ControlInput, MpcParams, build_problem, dynamics_step
from semnav.solver import solve, map_multipliers

GRID = wm.generate_grid_map()
CORNER = wm.corner_map()
PARAMS = MpcParams()


def audit(problem, z):
    """Independent geometric audit: worst wall clearance shortfall and worst
    pair shortfall over predicted knots."""
    worst_wall = 0.0
    worst_pair = 0.0
    plans = problem.extract_plans(z)
    for aid in problem.agents:
        bl = problem.blocks[aid]
        s = plans[aid].states
        for w in bl.walls:
            if len(w.vertices) >= 3:
                from semnav.geom import ConvexPolygon
                poly = ConvexPolygon(tuple(Point2(*v) for v in w.vertices))
                for p in s[:, :2]:
                    d = point_polygon_distance(Point2(*p), poly)
                    worst_wall = max(worst_wall, bl.task.shape.hard_radius - d)
            else:
                from semnav.geom import Segment2, _point_segment_distance
                (ax, ay), (bx, by) = w.vertices
                for p in s[:, :2]:
                    d = _point_segment_distance(p[0], p[1], ax, ay, bx, by)
                    worst_wall = max(worst_wall, bl.task.shape.hard_radius - d)
    for a, b in problem.pair_ids:
        sa = plans[a].states[:, :2]
        sb = plans[b].states[:, :2]
        rr = problem.blocks[a].task.shape.hard_radius + problem.blocks[b].task.shape.hard_radius
        d = np.hypot(*(sa - sb).T)
        worst_pair = max(worst_pair, float((rr - d).max()))
    return worst_wall, worst_pair


def report(name, problem, out, t):
    ww, wp = audit(problem, out.z)
    print(f"{name:28s} {out.status.value:16s} it={out.iterations:3d} "
          f"viol={out.max_violation:9.2e} kkt={out.stationarity:9.2e} "
          f"t={1e3*t:6.1f}ms wall_short={ww:+.2e} pair_short={wp:+.2e}")
    return out


def case_cold_corridor():
    route = ("X0_2", "H0_2", "X1_2", "H1_2", "X2_2")
    task = co.AgentTask("a", route, 0)
    st = AgentState(1.0, 11.4, 0.1, 0.0)
    prob = build_problem(["a"], {"a": task}, {"a": st}, GRID, PARAMS)
    t0 = time.perf_counter()
    out = solve(prob, PARAMS)
    report("cold corridor", prob, out, time.perf_counter() - t0)
    return prob, task, st, out


def case_warm_resolve(prob, task, st, out):
    plans = prob.extract_plans(out.z)
    prob2 = build_problem(["a"], {"a": task}, {"a": st}, GRID, PARAMS, plans)
    t0 = time.perf_counter()
    out2 = solve(prob2, PARAMS, multipliers=out.multipliers)
    report("warm fixed-point", prob2, out2, time.perf_counter() - t0)


def case_warm_advance(prob, task, st, out):
    plans = prob.extract_plans(out.z)
    u = ControlInput(*plans["a"].inputs[0])
    s2 = st
    for _ in range(2):
        s2 = dynamics_step(s2, u, 0.125)
    prob2 = build_problem(["a"], {"a": task}, {"a": s2}, GRID, PARAMS, plans)
    t0 = time.perf_counter()
    out2 = solve(prob2, PARAMS, multipliers=out.multipliers)
    report("warm advance", prob2, out2, time.perf_counter() - t0)


def case_cold_corner():
    task = co.AgentTask("a", ("S0", "S1", "S2"), 0)
    st = AgentState(-3.0, -1.0, 1.5707963, 0.0)
    prob = build_problem(["a"], {"a": task}, {"a": st}, CORNER, PARAMS)
    t0 = time.perf_counter()
    out = solve(prob, PARAMS)
    report("cold corner (tight map)", prob, out, time.perf_counter() - t0)


def case_encounter(offset):
    routeA = ("X0_2", "H0_2", "X1_2", "H1_2", "X2_2")
    routeB = ("X2_2", "H1_2", "X1_2", "H0_2", "X0_2")
    tasks = {"a": co.AgentTask("a", routeA, 1), "b": co.AgentTask("b", routeB, 1)}
    states = {"a": AgentState(4.0, 11.5 - offset, 0.0, 1.0),
              "b": AgentState(10.0, 11.5 + offset, np.pi, 1.0)}
    prob = build_problem(["a", "b"], tasks, states, GRID, PARAMS)
    t0 = time.perf_counter()
    out = solve(prob, PARAMS)
    report(f"cold encounter d_lat={2*offset:.1f}", prob, out, time.perf_counter() - t0)
    return prob, tasks, states, out


def case_encounter_replay(offset, steps=30):
    routeA = ("X0_2", "H0_2", "X1_2", "H1_2", "X2_2")
    routeB = ("X2_2", "H1_2", "X1_2", "H0_2", "X0_2")
    tasks = {"a": co.AgentTask("a", routeA, 0), "b": co.AgentTask("b", routeB, 0)}
    states = {"a": AgentState(0.9, 11.5 - offset, 0.0, 0.0),
              "b": AgentState(13.2, 11.5 + offset, np.pi, 0.0)}
    prev = None
    mult = None
    lastprob = None
    n_il = 0
    worst_streak = streak = 0
    t_tot = 0.0
    mind = 9e9
    worst_it = 0
    for _ in range(steps):
        prob = build_problem(["a", "b"], tasks, states, GRID, PARAMS, prev)
        use = None
        if mult is not None and lastprob is not None:
            use = mult if (len(mult["eq"]) == prob.m_eq and
                           len(mult["ineq"]) == prob.m_ineq) \
                else map_multipliers(lastprob, mult, prob)
        t0 = time.perf_counter()
        out = solve(prob, PARAMS, multipliers=use)
        t_tot += time.perf_counter() - t0
        worst_it = max(worst_it, out.iterations)
        if out.status.value != "optimal":
            n_il += 1
            streak += 1
            worst_streak = max(worst_streak, streak)
        else:
            streak = 0
        plans = prob.extract_plans(out.z)
        prev, mult, lastprob = plans, out.multipliers, prob
        for aid in ("a", "b"):
            u = ControlInput(*plans[aid].inputs[0])
            s = states[aid]
            for _ in range(2):
                s = dynamics_step(s, u, 0.125)
            states[aid] = s
            nm = co.check_event(tasks[aid], Point2(s.x, s.y), GRID)
            if nm is not None:
                tasks[aid] = co.AgentTask(aid, tasks[aid].route, nm)
        mind = min(mind, float(np.hypot(states["a"].x - states["b"].x,
                                        states["a"].y - states["b"].y)))
    print(f"replay {steps} steps d_lat={2*offset:.1f}: nonoptimal={n_il} "
          f"max_streak={worst_streak} worst_it={worst_it} mind={mind:.3f} "
          f"mean={1e3*t_tot/steps:.0f}ms")


if __name__ == "__main__":
    prob, task, st, out = case_cold_corridor()
    case_warm_resolve(prob, task, st, out)
    case_warm_advance(prob, task, st, out)
    case_cold_corner()
    case_encounter(0.2)
    case_encounter(0.05)
    case_encounter_replay(0.2)
