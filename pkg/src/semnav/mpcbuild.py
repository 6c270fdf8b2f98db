"""Per-flock optimal control problem assembly.

Each flock of coordinating agents is controlled by one nonlinear program over
a prediction horizon: unicycle dynamics as multiple-shooting equality
constraints, box bounds on speed and inputs, separating-hyperplane wall
constraints with the plane coefficients as decision variables, pairwise
agent-distance constraints, and slack-relaxed soft copies of the collision
constraints at an enlarged radius.

The problem object exposes vectorized cost/constraint/Jacobian evaluation
with fixed sparsity patterns, so the solver can iterate cheaply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .coordination import AgentTask
from .geom import Point2, point_in_polygon, point_to_segments_distance
from .worldmodel import RelevantElements, SemanticMap, relevant_elements


@dataclass(frozen=True)
class MpcParams:
    """Controller configuration; defaults follow the benchmark setup."""

    dt: float = 0.5                 # prediction step [s]
    horizon: int = 25               # prediction steps
    update_hz: float = 4.0          # control update frequency
    input_weights: tuple = ((0.05, 0.0), (0.0, 0.5))  # 2x2 cost on (accel, omega)
    progress_quad: float = 1.0      # quadratic weight on objective distance
    progress_lin: float = 10.0      # linear weight on objective distance
    element_horizon: int = 2        # look-ahead areas for walls/objectives
    agent_horizon: int = 1          # look-ahead areas for cooperation pairing
    soft_penalty: float = 1e3       # linear penalty on soft-constraint slacks
    max_iterations: int = 150       # solver iteration cap
    feas_tol: float = 1e-4          # constraint violation accepted as feasible
    stat_tol: float = 1e-4          # stationarity residual accepted as optimal
    time_cap: float | None = None   # optional wall-time cap per solve [s]

    def __post_init__(self):
        if self.dt <= 0 or self.horizon < 1:
            raise ValueError("need dt > 0 and horizon >= 1")
        r = np.asarray(self.input_weights, dtype=float)
        if r.shape != (2, 2) or np.any(np.linalg.eigvalsh(0.5 * (r + r.T)) < -1e-12):
            raise ValueError("input_weights must be a 2x2 positive semidefinite matrix")

    @property
    def input_cost_matrix(self) -> np.ndarray:
        return np.asarray(self.input_weights, dtype=float)

    def replace(self, **kw) -> "MpcParams":
        from dataclasses import replace as _rep
        return _rep(self, **kw)

    @staticmethod
    def from_dict(doc: dict) -> "MpcParams":
        base = MpcParams()
        kw = {}
        for f in base.__dataclass_fields__:
            if f in doc:
                v = doc[f]
                kw[f] = tuple(map(tuple, v)) if f == "input_weights" else v
        return base.replace(**kw)

    def to_dict(self) -> dict:
        return {
            "dt": self.dt, "horizon": self.horizon, "update_hz": self.update_hz,
            "input_weights": [list(r) for r in self.input_weights],
            "progress_quad": self.progress_quad, "progress_lin": self.progress_lin,
            "element_horizon": self.element_horizon, "agent_horizon": self.agent_horizon,
            "soft_penalty": self.soft_penalty, "max_iterations": self.max_iterations,
            "feas_tol": self.feas_tol, "stat_tol": self.stat_tol, "time_cap": self.time_cap,
        }


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    theta: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v])

    @property
    def position(self) -> Point2:
        return Point2(self.x, self.y)


@dataclass(frozen=True)
class ControlInput:
    accel: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.omega])


def dynamics_step(s: AgentState, u: ControlInput, dt: float) -> AgentState:
    """Forward-Euler kinematic unicycle step."""
    return AgentState(
        x=s.x + dt * s.v * math.cos(s.theta),
        y=s.y + dt * s.v * math.sin(s.theta),
        theta=s.theta + dt * u.omega,
        v=s.v + dt * u.accel,
    )


@dataclass
class AgentPlan:
    """Per-agent slice of a solved decision vector, used for warm starts and
    objective-weight gating on the next solve."""

    states: np.ndarray                       # (horizon+1, 4)
    inputs: np.ndarray                       # (horizon, 2)
    hyperplanes: dict[str, np.ndarray] = field(default_factory=dict)  # wall id -> (ax, ay, b)


def update_objective_weights(prev_trajectory: np.ndarray | None,
                             elements: RelevantElements,
                             smap: SemanticMap) -> np.ndarray:
    """Binary gate per objective slot: 1 while the slot's area was reached by
    the previous predicted trajectory, 0 beyond. The current area counts as
    reached, so the first slot is always on; with no previous solution only
    the first slot is on."""
    n_obj = len(elements.objectives)
    w = np.zeros(n_obj)
    if n_obj == 0:
        return w
    w[0] = 1.0
    if prev_trajectory is None:
        return w
    pts = np.asarray(prev_trajectory)[:, :2]
    for j in range(1, n_obj):
        poly = smap.nodes[elements.horizon_areas[j]].polygon
        if any(point_in_polygon(Point2(px, py), poly) for px, py in pts):
            w[j] = 1.0
        else:
            break
    return w


class _AgentBlock:
    """Variable layout and retrieved elements for one agent in the flock."""

    def __init__(self, task: AgentTask, state: AgentState,
                 elements: RelevantElements, offset: int, horizon: int):
        n1 = horizon + 1
        self.task = task
        self.state = state
        self.elements = elements
        self.walls = list(elements.walls)
        self.n_walls = len(self.walls)
        edges_a, edges_b = [], []
        for w in self.walls:
            v = w.vertices
            if len(v) >= 3:
                edges_a.append(v)
                edges_b.append(np.roll(v, -1, axis=0))
            else:
                edges_a.append(v[:1])
                edges_b.append(v[1:2])
        self.wall_edges = (np.vstack(edges_a), np.vstack(edges_b)) \
            if edges_a else (np.zeros((0, 2)), np.zeros((0, 2)))
        self.x_off = offset
        self.u_off = self.x_off + 4 * n1
        self.h_off = self.u_off + 2 * horizon
        self.s_off = self.h_off + 3 * self.n_walls
        self.end = self.s_off + self.n_walls * n1
        # index helpers
        k1 = np.arange(n1)
        self.ix = self.x_off + 4 * k1
        self.iy = self.ix + 1
        self.ith = self.ix + 2
        self.iv = self.ix + 3
        k = np.arange(horizon)
        self.ia = self.u_off + 2 * k
        self.iw = self.ia + 1
        wi = np.arange(self.n_walls)
        self.iax = self.h_off + 3 * wi
        self.iay = self.iax + 1
        self.ib = self.iax + 2


class MpcProblem:
    """Assembled nonlinear program for one flock.

    Decision vector layout, per agent in sorted-id order: states (4 per knot),
    inputs (2 per step), hyperplane coefficients (3 per wall), wall slacks
    (one per wall per knot); pairwise agent slacks (one per pair per knot)
    follow at the end. Initial states are decision variables pinned by the
    initial-condition constraint, which the solver enforces by fixing them.
    """

    def __init__(self, agents: list[str], blocks: dict[str, _AgentBlock],
                 params: MpcParams, smap: SemanticMap):
        self.agents = agents
        self.blocks = blocks
        self.params = params
        self.smap = smap
        self.horizon = params.horizon
        n1 = params.horizon + 1

        self.pair_ids = [(a, b) for i, a in enumerate(agents) for b in agents[i + 1:]]
        self.pair_s_off = blocks[agents[-1]].end if agents else 0
        self.n = self.pair_s_off + len(self.pair_ids) * n1

        self.lb = np.full(self.n, -np.inf)
        self.ub = np.full(self.n, np.inf)
        fixed_idx = []
        for aid in agents:
            bl = blocks[aid]
            lim = bl.task.limits
            self.lb[bl.iv], self.ub[bl.iv] = lim.v_min, lim.v_max
            self.lb[bl.ia], self.ub[bl.ia] = lim.a_min, lim.a_max
            self.lb[bl.iw], self.ub[bl.iw] = lim.omega_min, lim.omega_max
            self.lb[bl.s_off:bl.end] = 0.0
            fixed_idx.extend([bl.x_off, bl.x_off + 1, bl.x_off + 2, bl.x_off + 3])
        self.lb[self.pair_s_off:] = 0.0
        self.fixed_idx = np.array(fixed_idx, dtype=int)
        self.fixed_val = np.concatenate(
            [blocks[a].state.as_array() for a in agents]) if agents else np.zeros(0)

        self.weights = {aid: np.zeros(len(blocks[aid].elements.objectives)) for aid in agents}
        self._build_constraint_patterns()
        self._build_cost_terms()
        self.z0 = np.zeros(self.n)

    # ------------------------------------------------------------------ layout

    def pair_slack_indices(self, pair_pos: int) -> np.ndarray:
        n1 = self.horizon + 1
        return self.pair_s_off + pair_pos * n1 + np.arange(n1)

    def census(self) -> dict:
        n1 = self.horizon + 1
        c = {
            "variables": self.n,
            "dynamics": 4 * self.horizon * len(self.agents),
            "initial_condition": 4 * len(self.agents),
            "hyperplane_vertex": int(sum(len(w.vertices) for b in self.blocks.values()
                                         for w in b.walls)),
            "hyperplane_agent": sum(b.n_walls for b in self.blocks.values()) * n1,
            "hyperplane_norm": sum(b.n_walls for b in self.blocks.values()),
            "wall_soft": sum(b.n_walls for b in self.blocks.values()) * n1,
            "pair_hard": len(self.pair_ids) * n1,
            "pair_soft": len(self.pair_ids) * n1,
        }
        return c

    # ------------------------------------------------------- constraint patterns

    def _build_constraint_patterns(self):
        N, n1 = self.horizon, self.horizon + 1
        dt = self.params.dt

        # equalities: dynamics, 4 rows per step per agent
        eq_rows_c, eq_cols_c, eq_data_c = [], [], []   # constant entries
        eq_rows_v, eq_cols_v = [], []                  # state-dependent entries
        row0 = 0
        self._eq_agent_row0 = {}
        for aid in self.agents:
            bl = self.blocks[aid]
            self._eq_agent_row0[aid] = row0
            k = np.arange(N)
            r = row0 + 4 * k
            for comp in range(4):
                eq_rows_c.append(r + comp)
                eq_cols_c.append(bl.x_off + 4 * (k + 1) + comp)
                eq_data_c.append(np.ones(N))
                eq_rows_c.append(r + comp)
                eq_cols_c.append(bl.x_off + 4 * k + comp)
                eq_data_c.append(-np.ones(N))
            eq_rows_c.append(r + 2)
            eq_cols_c.append(bl.iw)
            eq_data_c.append(np.full(N, -dt))
            eq_rows_c.append(r + 3)
            eq_cols_c.append(bl.ia)
            eq_data_c.append(np.full(N, -dt))
            # trig entries: d(x row)/d theta, d(x row)/d v, same for y row
            for comp in (0, 1):
                eq_rows_v.append(r + comp)
                eq_cols_v.append(bl.ith[:-1])
                eq_rows_v.append(r + comp)
                eq_cols_v.append(bl.iv[:-1])
            row0 += 4 * N
        self.m_eq = row0
        self._eq_static = (np.concatenate(eq_rows_c) if eq_rows_c else np.zeros(0, int),
                           np.concatenate(eq_cols_c) if eq_cols_c else np.zeros(0, int),
                           np.concatenate(eq_data_c) if eq_data_c else np.zeros(0))
        self._eq_var_rows = np.concatenate(eq_rows_v) if eq_rows_v else np.zeros(0, int)
        self._eq_var_cols = np.concatenate(eq_cols_v) if eq_cols_v else np.zeros(0, int)

        # inequalities g(z) >= 0, families in fixed order
        rows_c, cols_c, data_c = [], [], []
        rows_v, cols_v = [], []
        row0 = 0
        fam = {}

        # 1) hyperplane vertex conditions (linear, constant)
        fam["hyperplane_vertex"] = row0
        self._vert_info = {}
        for aid in self.agents:
            bl = self.blocks[aid]
            if bl.n_walls == 0:
                self._vert_info[aid] = (row0, np.zeros((0, 2)), np.zeros(0, int))
                continue
            verts = np.vstack([w.vertices for w in bl.walls])
            wov = np.repeat(np.arange(bl.n_walls),
                            [len(w.vertices) for w in bl.walls])
            nv = len(verts)
            r = row0 + np.arange(nv)
            rows_c.extend([r, r, r])
            cols_c.extend([bl.iax[wov], bl.iay[wov], bl.ib[wov]])
            data_c.extend([verts[:, 0], verts[:, 1], -np.ones(nv)])
            self._vert_info[aid] = (row0, verts, wov)
            row0 += nv

        # 2) hard wall rows: -(a.p) + b - r_v >= 0, wall-major over knots
        fam["hyperplane_agent"] = row0
        self._wall_row0 = {}
        for aid in self.agents:
            bl = self.blocks[aid]
            self._wall_row0[aid] = row0
            if bl.n_walls == 0:
                continue
            nw = bl.n_walls
            w_rep = np.repeat(np.arange(nw), n1)
            k_tile = np.tile(np.arange(n1), nw)
            r = row0 + np.arange(nw * n1)
            rows_c.append(r)
            cols_c.append(bl.ib[w_rep])
            data_c.append(np.ones(nw * n1))
            for cols in (bl.iax[w_rep], bl.iay[w_rep], bl.ix[k_tile], bl.iy[k_tile]):
                rows_v.append(r)
                cols_v.append(cols)
            row0 += nw * n1

        # 3) hyperplane norm rows: 1 - |a|^2 >= 0
        fam["hyperplane_norm"] = row0
        self._norm_row0 = {}
        for aid in self.agents:
            bl = self.blocks[aid]
            self._norm_row0[aid] = row0
            if bl.n_walls == 0:
                continue
            r = row0 + np.arange(bl.n_walls)
            rows_v.extend([r, r])
            cols_v.extend([bl.iax, bl.iay])
            row0 += bl.n_walls

        # 4) soft wall rows: -(a.p) + b - r_soft + s >= 0
        fam["wall_soft"] = row0
        self._soft_row0 = {}
        for aid in self.agents:
            bl = self.blocks[aid]
            self._soft_row0[aid] = row0
            if bl.n_walls == 0:
                continue
            nw = bl.n_walls
            w_rep = np.repeat(np.arange(nw), n1)
            k_tile = np.tile(np.arange(n1), nw)
            r = row0 + np.arange(nw * n1)
            rows_c.extend([r, r])
            cols_c.extend([bl.ib[w_rep], bl.s_off + np.arange(nw * n1)])
            data_c.extend([np.ones(nw * n1), np.ones(nw * n1)])
            for cols in (bl.iax[w_rep], bl.iay[w_rep], bl.ix[k_tile], bl.iy[k_tile]):
                rows_v.append(r)
                cols_v.append(cols)
            row0 += nw * n1

        # 5) hard pair rows: |p_i - p_j|^2 - (r_i + r_j)^2 >= 0
        fam["pair_hard"] = row0
        for pos, (a, b) in enumerate(self.pair_ids):
            ba, bb = self.blocks[a], self.blocks[b]
            r = row0 + pos * n1 + np.arange(n1)
            for cols in (ba.ix, ba.iy, bb.ix, bb.iy):
                rows_v.append(r)
                cols_v.append(cols)
        row0 += len(self.pair_ids) * n1

        # 6) soft pair rows: |p_i - p_j|^2 - (rs_i + rs_j)^2 + s >= 0
        fam["pair_soft"] = row0
        for pos, (a, b) in enumerate(self.pair_ids):
            ba, bb = self.blocks[a], self.blocks[b]
            r = row0 + pos * n1 + np.arange(n1)
            rows_c.append(r)
            cols_c.append(self.pair_slack_indices(pos))
            data_c.append(np.ones(n1))
            for cols in (ba.ix, ba.iy, bb.ix, bb.iy):
                rows_v.append(r)
                cols_v.append(cols)
        row0 += len(self.pair_ids) * n1

        self.m_ineq = row0
        self._ineq_family_row0 = fam
        cat = lambda parts, dt_: (np.concatenate(parts) if parts else np.zeros(0, dtype=dt_))
        self._ineq_static = (cat(rows_c, int), cat(cols_c, int), cat(data_c, float))
        self._ineq_var_rows = cat(rows_v, int)
        self._ineq_var_cols = cat(cols_v, int)

    # ------------------------------------------------------------- cost pieces

    def _build_cost_terms(self):
        self._R = self.params.input_cost_matrix
        self._Rsym = self._R + self._R.T
        # objective gate lines per agent: unit normal and offset
        self._gate_n = {}
        self._gate_c = {}
        for aid in self.agents:
            gates = self.blocks[aid].elements.objectives
            if gates:
                coeffs = np.array([g.line_coefficients() for g in gates])
                self._gate_n[aid] = coeffs[:, :2]
                self._gate_c[aid] = coeffs[:, 2]
            else:
                self._gate_n[aid] = np.zeros((0, 2))
                self._gate_c[aid] = np.zeros(0)
        self._refresh_cost_hessian()

    def _refresh_cost_hessian(self):
        n1 = self.horizon + 1
        rows, cols, data = [], [], []
        for aid in self.agents:
            bl = self.blocks[aid]
            # input blocks
            for (i, j), val in np.ndenumerate(self._Rsym):
                if val != 0.0:
                    rows.append(bl.ia + i)
                    cols.append(bl.ia + j)
                    data.append(np.full(self.horizon, val))
            # position blocks from weighted objective quadratics
            nmat = self._gate_n[aid]
            w = self.weights[aid]
            if len(w):
                blk = 2.0 * self.params.progress_quad * (nmat.T * w) @ nmat
                pidx = [bl.ix, bl.iy]
                for i in range(2):
                    for j in range(2):
                        if blk[i, j] != 0.0:
                            rows.append(pidx[i])
                            cols.append(pidx[j])
                            data.append(np.full(n1, blk[i, j]))
        if rows:
            self._cost_hess = sp.csr_matrix(
                (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.n, self.n))
        else:
            self._cost_hess = sp.csr_matrix((self.n, self.n))

    # ------------------------------------------------------------- per-step API

    def set_initial_state(self, agent_id: str, state: AgentState):
        pos = self.agents.index(agent_id)
        bl = self.blocks[agent_id]
        bl.state = state
        self.fixed_val[4 * pos:4 * pos + 4] = state.as_array()
        self.z0[bl.x_off:bl.x_off + 4] = state.as_array()

    def set_objective_weights(self, agent_id: str, w: np.ndarray):
        w = np.asarray(w, dtype=float)
        expected = len(self.blocks[agent_id].elements.objectives)
        if w.shape != (expected,):
            raise ValueError(f"expected {expected} objective weights, got {w.shape}")
        self.weights[agent_id] = w
        self._refresh_cost_hessian()

    # --------------------------------------------------------------- evaluation

    def _agent_views(self, z, aid):
        bl = self.blocks[aid]
        n1 = self.horizon + 1
        S = z[bl.x_off:bl.x_off + 4 * n1].reshape(n1, 4)
        U = z[bl.u_off:bl.u_off + 2 * self.horizon].reshape(self.horizon, 2)
        H = z[bl.h_off:bl.h_off + 3 * bl.n_walls].reshape(bl.n_walls, 3)
        return S, U, H

    def cost(self, z: np.ndarray) -> float:
        total = 0.0
        for aid in self.agents:
            bl = self.blocks[aid]
            S, U, _ = self._agent_views(z, aid)
            total += float(np.einsum("ki,ij,kj->", U, self._R, U))
            w = self.weights[aid]
            if len(w):
                d = S[:, :2] @ self._gate_n[aid].T - self._gate_c[aid]
                total += float((w * (self.params.progress_quad * d * d
                                     + self.params.progress_lin * d)).sum())
            total += self.params.soft_penalty * float(z[bl.s_off:bl.end].sum())
        total += self.params.soft_penalty * float(z[self.pair_s_off:self.n].sum())
        return total

    def cost_grad(self, z: np.ndarray) -> np.ndarray:
        g = np.zeros(self.n)
        for aid in self.agents:
            bl = self.blocks[aid]
            S, U, _ = self._agent_views(z, aid)
            gu = U @ self._Rsym
            g[bl.u_off:bl.u_off + 2 * self.horizon] = gu.ravel()
            w = self.weights[aid]
            if len(w):
                d = S[:, :2] @ self._gate_n[aid].T - self._gate_c[aid]
                coef = (2.0 * self.params.progress_quad * d + self.params.progress_lin) * w
                gp = coef @ self._gate_n[aid]
                g[bl.ix] += gp[:, 0]
                g[bl.iy] += gp[:, 1]
            g[bl.s_off:bl.end] = self.params.soft_penalty
        g[self.pair_s_off:self.n] = self.params.soft_penalty
        return g

    def cost_hessian(self) -> sp.csr_matrix:
        return self._cost_hess

    def eq_residual(self, z: np.ndarray) -> np.ndarray:
        dt = self.params.dt
        out = np.empty(self.m_eq)
        for aid in self.agents:
            bl = self.blocks[aid]
            S, U, _ = self._agent_views(z, aid)
            r0 = self._eq_agent_row0[aid]
            c = np.empty((self.horizon, 4))
            th, v = S[:-1, 2], S[:-1, 3]
            c[:, 0] = S[1:, 0] - S[:-1, 0] - dt * v * np.cos(th)
            c[:, 1] = S[1:, 1] - S[:-1, 1] - dt * v * np.sin(th)
            c[:, 2] = S[1:, 2] - S[:-1, 2] - dt * U[:, 1]
            c[:, 3] = S[1:, 3] - S[:-1, 3] - dt * U[:, 0]
            out[r0:r0 + 4 * self.horizon] = c.ravel()
        return out

    def eq_jacobian(self, z: np.ndarray) -> sp.csr_matrix:
        dt = self.params.dt
        datas = []
        for aid in self.agents:
            bl = self.blocks[aid]
            S, _, _ = self._agent_views(z, aid)
            th, v = S[:-1, 2], S[:-1, 3]
            # order matches pattern: (x row: d theta, d v), (y row: d theta, d v)
            datas.extend([dt * v * np.sin(th), -dt * np.cos(th),
                          -dt * v * np.cos(th), -dt * np.sin(th)])
        rows = np.concatenate([self._eq_static[0], self._eq_var_rows])
        cols = np.concatenate([self._eq_static[1], self._eq_var_cols])
        data = np.concatenate([self._eq_static[2]] + datas) if datas else self._eq_static[2]
        return sp.csr_matrix((data, (rows, cols)), shape=(self.m_eq, self.n))

    def ineq_residual(self, z: np.ndarray) -> np.ndarray:
        n1 = self.horizon + 1
        out = np.empty(self.m_ineq)
        for aid in self.agents:
            bl = self.blocks[aid]
            S, _, H = self._agent_views(z, aid)
            r0, verts, wov = self._vert_info[aid]
            if bl.n_walls:
                out[r0:r0 + len(verts)] = (verts * H[wov, :2]).sum(1) - H[wov, 2]
                M = H[:, :2] @ S[:, :2].T  # (walls, knots)
                rw = self._wall_row0[aid]
                out[rw:rw + bl.n_walls * n1] = \
                    (-M + H[:, 2:3] - bl.task.shape.hard_radius).ravel()
                rn = self._norm_row0[aid]
                out[rn:rn + bl.n_walls] = 1.0 - (H[:, :2] ** 2).sum(1)
                rs = self._soft_row0[aid]
                out[rs:rs + bl.n_walls * n1] = \
                    (-M + H[:, 2:3] - bl.task.shape.soft_radius).ravel() \
                    + z[bl.s_off:bl.end]
        r0 = self._ineq_family_row0["pair_hard"]
        rsoft = self._ineq_family_row0["pair_soft"]
        for pos, (a, b) in enumerate(self.pair_ids):
            Sa, _, _ = self._agent_views(z, a)
            Sb, _, _ = self._agent_views(z, b)
            d2 = ((Sa[:, :2] - Sb[:, :2]) ** 2).sum(1)
            rr = self.blocks[a].task.shape.hard_radius + self.blocks[b].task.shape.hard_radius
            rr_s = self.blocks[a].task.shape.soft_radius + self.blocks[b].task.shape.soft_radius
            out[r0 + pos * n1:r0 + (pos + 1) * n1] = d2 - rr * rr
            out[rsoft + pos * n1:rsoft + (pos + 1) * n1] = \
                d2 - rr_s * rr_s + z[self.pair_slack_indices(pos)]
        return out

    def ineq_jacobian(self, z: np.ndarray) -> sp.csr_matrix:
        # data fill order must mirror the pattern build: family-major
        n1 = self.horizon + 1
        wall_data = {}
        for aid in self.agents:
            bl = self.blocks[aid]
            if bl.n_walls == 0:
                continue
            S, _, H = self._agent_views(z, aid)
            w_rep = np.repeat(np.arange(bl.n_walls), n1)
            k_tile = np.tile(np.arange(n1), bl.n_walls)
            wall_data[aid] = ([-S[k_tile, 0], -S[k_tile, 1],
                               -H[w_rep, 0], -H[w_rep, 1]],
                              [-2 * H[:, 0], -2 * H[:, 1]])
        datas = []
        for aid in self.agents:                      # family 2: hard wall
            if aid in wall_data:
                datas.extend(wall_data[aid][0])
        for aid in self.agents:                      # family 3: norm
            if aid in wall_data:
                datas.extend(wall_data[aid][1])
        for aid in self.agents:                      # family 4: soft wall
            if aid in wall_data:
                datas.extend(wall_data[aid][0])
        pair_data = []
        for a, b in self.pair_ids:
            Sa, _, _ = self._agent_views(z, a)
            Sb, _, _ = self._agent_views(z, b)
            dx = 2 * (Sa[:, 0] - Sb[:, 0])
            dy = 2 * (Sa[:, 1] - Sb[:, 1])
            pair_data.append([dx, dy, -dx, -dy])
        for pd in pair_data:                         # family 5: hard pair
            datas.extend(pd)
        for pd in pair_data:                         # family 6: soft pair
            datas.extend(pd)
        rows = np.concatenate([self._ineq_static[0], self._ineq_var_rows])
        cols = np.concatenate([self._ineq_static[1], self._ineq_var_cols])
        data = np.concatenate([self._ineq_static[2]] + datas) \
            if datas else self._ineq_static[2]
        return sp.csr_matrix((data, (rows, cols)), shape=(self.m_ineq, self.n))

    def eq_row_keys(self) -> list[tuple]:
        """Stable identity of each equality row, for carrying multipliers
        across problem rebuilds."""
        keys = []
        for aid in self.agents:
            for k in range(self.horizon):
                keys.extend(("dyn", aid, k, c) for c in range(4))
        return keys

    def ineq_row_keys(self) -> list[tuple]:
        """Stable identity of each inequality row (same order as
        ``ineq_residual``)."""
        n1 = self.horizon + 1
        keys = []
        for aid in self.agents:
            for w in self.blocks[aid].walls:
                keys.extend(("vx", aid, w.id, i) for i in range(len(w.vertices)))
        for aid in self.agents:
            for w in self.blocks[aid].walls:
                keys.extend(("wall", aid, w.id, k) for k in range(n1))
        for aid in self.agents:
            keys.extend(("norm", aid, w.id) for w in self.blocks[aid].walls)
        for aid in self.agents:
            for w in self.blocks[aid].walls:
                keys.extend(("wsoft", aid, w.id, k) for k in range(n1))
        for a, b in self.pair_ids:
            keys.extend(("pair", a, b, k) for k in range(n1))
        for a, b in self.pair_ids:
            keys.extend(("psoft", a, b, k) for k in range(n1))
        return keys

    def geo_violation(self, z: np.ndarray) -> float:
        """Worst physical penetration of the predicted knots: how far any
        agent disc overlaps a wall element or another agent. Independent of
        the hyperplane variables, so it is meaningful even when those are
        badly initialized."""
        worst = 0.0
        n1 = self.horizon + 1
        for aid in self.agents:
            bl = self.blocks[aid]
            ea, eb = bl.wall_edges
            if not ea.size:
                continue
            pts = z[bl.x_off:bl.x_off + 4 * n1].reshape(n1, 4)[:, :2]
            v = eb - ea                                  # (E, 2)
            w = pts[:, None, :] - ea[None, :, :]         # (K, E, 2)
            t = np.clip(np.einsum("kej,ej->ke", w, v) /
                        np.maximum(1e-12, np.einsum("ej,ej->e", v, v)), 0.0, 1.0)
            closest = ea[None] + t[:, :, None] * v[None]
            d = np.hypot(pts[:, None, 0] - closest[:, :, 0],
                         pts[:, None, 1] - closest[:, :, 1]).min()
            worst = max(worst, bl.task.shape.hard_radius - float(d))
        for a, b in self.pair_ids:
            ba, bb = self.blocks[a], self.blocks[b]
            pa = z[ba.x_off:ba.x_off + 4 * n1].reshape(n1, 4)[:, :2]
            pb = z[bb.x_off:bb.x_off + 4 * n1].reshape(n1, 4)[:, :2]
            d = float(np.hypot(*(pa - pb).T).min())
            worst = max(worst,
                        ba.task.shape.hard_radius + bb.task.shape.hard_radius - d)
        return max(0.0, worst)

    def constraint_curvature(self, z: np.ndarray, w_eq: np.ndarray,
                             w_ineq: np.ndarray) -> sp.csr_matrix:
        """Weighted sum of constraint Hessians, sum_r w_r * hess(c_r), for the
        solver's exact second-order model. Weights follow the row numbering of
        ``eq_residual``/``ineq_residual``."""
        n1 = self.horizon + 1
        dt = self.params.dt
        rows, cols, data = [], [], []

        def sym(r_idx, c_idx, vals):
            rows.append(r_idx)
            cols.append(c_idx)
            data.append(vals)
            rows.append(c_idx)
            cols.append(r_idx)
            data.append(vals)

        for aid in self.agents:
            bl = self.blocks[aid]
            S, _, H = self._agent_views(z, aid)
            th, v = S[:-1, 2], S[:-1, 3]
            r0 = self._eq_agent_row0[aid]
            w_rows = w_eq[r0:r0 + 4 * self.horizon].reshape(self.horizon, 4)
            wx, wy = w_rows[:, 0], w_rows[:, 1]
            thk, vk = bl.ith[:-1], bl.iv[:-1]
            rows.append(thk)
            cols.append(thk)
            data.append(dt * v * (wx * np.cos(th) + wy * np.sin(th)))
            sym(thk, vk, dt * (wx * np.sin(th) - wy * np.cos(th)))

            if bl.n_walls:
                nw = bl.n_walls
                w_rep = np.repeat(np.arange(nw), n1)
                k_tile = np.tile(np.arange(n1), nw)
                rh = self._wall_row0[aid]
                rs = self._soft_row0[aid]
                # hard + soft wall rows share the bilinear structure
                y = w_ineq[rh:rh + nw * n1] + w_ineq[rs:rs + nw * n1]
                sym(bl.iax[w_rep], bl.ix[k_tile], -y)
                sym(bl.iay[w_rep], bl.iy[k_tile], -y)
                rn = self._norm_row0[aid]
                yn = w_ineq[rn:rn + nw]
                for idx in (bl.iax, bl.iay):
                    rows.append(idx)
                    cols.append(idx)
                    data.append(-2.0 * yn)

        rh = self._ineq_family_row0["pair_hard"]
        rs = self._ineq_family_row0["pair_soft"]
        for pos, (a, b) in enumerate(self.pair_ids):
            ba, bb = self.blocks[a], self.blocks[b]
            y = w_ineq[rh + pos * n1:rh + (pos + 1) * n1] \
                + w_ineq[rs + pos * n1:rs + (pos + 1) * n1]
            for ia, ib in ((ba.ix, bb.ix), (ba.iy, bb.iy)):
                rows.extend([ia, ib])
                cols.extend([ia, ib])
                data.extend([2.0 * y, 2.0 * y])
                sym(ia, ib, -2.0 * y)
        if not rows:
            return sp.csr_matrix((self.n, self.n))
        return sp.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n, self.n))

    # ------------------------------------------------------------------ plans

    def extract_plans(self, z: np.ndarray) -> dict[str, AgentPlan]:
        plans = {}
        for aid in self.agents:
            S, U, H = self._agent_views(z, aid)
            bl = self.blocks[aid]
            planes = {w.id: H[i].copy() for i, w in enumerate(bl.walls)}
            plans[aid] = AgentPlan(S.copy(), U.copy(), planes)
        return plans


def build_problem(flock, tasks: dict[str, AgentTask], states: dict[str, AgentState],
                  smap: SemanticMap, params: MpcParams,
                  prev_solutions: dict[str, AgentPlan] | None = None) -> MpcProblem:
    """Assemble the flock's program: retrieve each member's relevant elements,
    gate objective weights from the previous predictions, lay out variables
    and constraints, and install the warm start."""
    agents = sorted(flock)
    blocks: dict[str, _AgentBlock] = {}
    offset = 0
    for aid in agents:
        task = tasks[aid]
        elements = relevant_elements(smap, list(task.route), task.mode,
                                     params.element_horizon)
        blocks[aid] = _AgentBlock(task, states[aid], elements, offset, params.horizon)
        offset = blocks[aid].end
    problem = MpcProblem(agents, blocks, params, smap)
    for aid in agents:
        prev = (prev_solutions or {}).get(aid)
        w = update_objective_weights(prev.states if prev else None,
                                     blocks[aid].elements, smap)
        problem.weights[aid] = w
    problem._refresh_cost_hessian()
    warm_start(problem, prev_solutions)
    return problem


def _cold_hyperplane(wall_vertices: np.ndarray, position: np.ndarray) -> np.ndarray:
    """Initial separating-plane guess: normal from the agent toward the wall
    centroid, offset splitting the gap."""
    centroid = wall_vertices.mean(axis=0)
    d = centroid - position
    norm = np.linalg.norm(d)
    a = d / norm if norm > 1e-9 else np.array([1.0, 0.0])
    b = float(a @ (0.5 * (centroid + position)))
    return np.array([a[0], a[1], b])


def warm_start(problem: MpcProblem,
               prev_solutions: dict[str, AgentPlan] | None = None) -> np.ndarray:
    """Install the initial decision vector on the problem and return it.

    With a previous solution for the same flock composition, states and inputs
    are shifted one step (terminal entries repeated) and hyperplanes carried
    over by wall id. Otherwise states hold the current state, inputs are zero
    and hyperplanes split the agent-wall gap. Slacks start at zero.

    Crossing predicted paths of flock members are pushed apart laterally: at
    coincident knots the squared-distance constraint has a vanishing gradient,
    so a guess that threads agents through each other traps the solver.
    """
    z = np.zeros(problem.n)
    N = problem.horizon
    for aid in problem.agents:
        bl = problem.blocks[aid]
        prev = (prev_solutions or {}).get(aid)
        if prev is not None and prev.states.shape == (N + 1, 4):
            states = np.vstack([prev.states[1:], prev.states[-1:]])
            inputs = np.vstack([prev.inputs[1:], prev.inputs[-1:]]) if N > 1 \
                else prev.inputs.copy()
        else:
            prev = None
            states = np.tile(bl.state.as_array(), (N + 1, 1))
            inputs = np.zeros((N, 2))
        states[0] = bl.state.as_array()
        z[bl.x_off:bl.x_off + 4 * (N + 1)] = states.ravel()
        z[bl.u_off:bl.u_off + 2 * N] = inputs.ravel()
    _separate_crossings(problem, z)
    for aid in problem.agents:
        bl = problem.blocks[aid]
        prev = (prev_solutions or {}).get(aid)
        if prev is not None and prev.states.shape != (N + 1, 4):
            prev = None
        pos = bl.state.as_array()[:2]
        for i, wall in enumerate(bl.walls):
            carried = prev.hyperplanes.get(wall.id) if prev is not None else None
            plane = carried if carried is not None else _cold_hyperplane(wall.vertices, pos)
            z[bl.h_off + 3 * i:bl.h_off + 3 * i + 3] = plane
    problem.z0 = z
    return z


def improve_cold_start(problem: MpcProblem, z: np.ndarray) -> np.ndarray:
    """Solver-side initialization: replace hold-everything agent blocks with a
    rollout of a simple gate-seeking steering law, so the optimizer starts
    from a dynamically consistent, already-transported guess instead of
    hauling the whole trajectory out of a standstill."""
    n1 = problem.horizon + 1
    dt = problem.params.dt
    q2 = 2.0 * problem.params.progress_quad
    q1 = problem.params.progress_lin
    z = z.copy()
    for aid in problem.agents:
        bl = problem.blocks[aid]
        w = problem.weights[aid]
        if not len(w) or not w.any():
            continue
        s_blk = z[bl.x_off:bl.x_off + 4 * n1].reshape(n1, 4)
        u_blk = z[bl.u_off:bl.u_off + 2 * problem.horizon].reshape(problem.horizon, 2)
        if np.abs(s_blk - s_blk[0]).max() > 1e-12 or np.abs(u_blk).max() > 1e-12:
            continue  # only hold starts are improved
        nmat = problem._gate_n[aid]
        coff = problem._gate_c[aid]
        lim = bl.task.limits
        ea, eb = bl.wall_edges
        r_stop = bl.task.shape.hard_radius + 0.02
        s = s_blk[0].copy()
        for k in range(problem.horizon):
            d = nmat @ s[:2] - coff
            pull = -((q2 * d + q1) * w) @ nmat
            norm = float(np.hypot(*pull))
            if norm < 1e-9:
                u = np.array([max(lim.a_min, -s[3] / dt), 0.0])
            else:
                err = math.atan2(pull[1], pull[0]) - s[2]
                err = (err + math.pi) % (2 * math.pi) - math.pi
                omega = min(lim.omega_max, max(lim.omega_min, 2.0 * err))
                v_want = lim.v_max * max(0.0, math.cos(err)) * 0.9
                accel = min(lim.a_max, max(lim.a_min, (v_want - s[3]) / dt))
                u = np.array([accel, omega])
            s_next = np.array([s[0] + dt * s[3] * math.cos(s[2]),
                               s[1] + dt * s[3] * math.sin(s[2]),
                               s[2] + dt * u[1],
                               s[3] + dt * u[0]])
            if ea.size and point_to_segments_distance(
                    s_next[:2], ea, eb).min() < r_stop:
                # would clip a wall: park the remaining guess here
                s_blk[k + 1:] = np.concatenate([s[:3], [0.0]])
                break
            u_blk[k] = u
            s = s_next
            s_blk[k + 1] = s
        if ea.size:
            clear = min(point_to_segments_distance(p, ea, eb).min()
                        for p in s_blk[:, :2])
            if clear < bl.task.shape.hard_radius:
                # rollout not clean, keep the hold start for this agent
                s_blk[:] = s_blk[0]
                u_blk[:] = 0.0
            else:
                # re-anchor the separating-plane guesses on the transported
                # trajectory instead of the start pose
                for i, wall in enumerate(bl.walls):
                    c = wall.vertices.mean(axis=0)
                    near = s_blk[np.argmin(np.hypot(s_blk[:, 0] - c[0],
                                                    s_blk[:, 1] - c[1])), :2]
                    z[bl.h_off + 3 * i:bl.h_off + 3 * i + 3] = \
                        _cold_hyperplane(wall.vertices, near)
    _separate_crossings(problem, z)
    return z


def _separate_crossings(problem: MpcProblem, z: np.ndarray):
    """Push near-coincident predicted knots of each agent pair apart along a
    single lateral pass direction (left of the first agent's mean heading),
    with the shift profile smoothed over neighboring knots."""
    n1 = problem.horizon + 1
    for a, b in problem.pair_ids:
        ba, bb = problem.blocks[a], problem.blocks[b]
        # repair only near the coincidence singularity; ordinary proximity is
        # left to the solver, whose gradients are healthy there
        need = ba.task.shape.hard_radius + bb.task.shape.hard_radius + 0.02
        sa = z[ba.x_off:ba.x_off + 4 * n1].reshape(n1, 4)
        sb = z[bb.x_off:bb.x_off + 4 * n1].reshape(n1, 4)
        delta = sa[:, :2] - sb[:, :2]
        dist = np.hypot(delta[:, 0], delta[:, 1])
        if (dist >= need).all():
            continue
        th = float(np.arctan2(np.sin(sa[:, 2]).mean(), np.cos(sa[:, 2]).mean()))
        side = np.array([-math.sin(th), math.cos(th)])
        # split the gap along the lateral direction: solve for the lateral
        # component that restores the required separation given the
        # longitudinal offset that remains
        ds = delta @ side
        dc2 = np.maximum(0.0, dist ** 2 - ds ** 2)
        req = np.sqrt(np.maximum(0.0, need ** 2 - dc2))
        tight = dist < need
        sigma = 1.0 if float(ds[tight].sum()) >= 0.0 else -1.0
        short = np.where(tight, np.maximum(0.0, req - sigma * ds), 0.0)
        short[0] = 0.0  # initial states are pinned
        if not short.any():
            continue
        kernel = np.array([0.25, 0.5, 1.0, 0.5, 0.25])
        spread = np.maximum.reduce([
            np.pad(short * w, (i, len(kernel) - 1 - i), mode="edge")
            for i, w in enumerate(kernel)])[2:2 + n1]
        spread[0] = 0.0
        half = 0.5 * spread
        side = sigma * side
        # never shove a knot into that agent's own walls
        for blk, sgn, states in ((ba, 1.0, sa), (bb, -1.0, sb)):
            ea, eb = blk.wall_edges
            shift = half.copy()
            if ea.size:
                for k in np.flatnonzero(shift > 0.0):
                    room = point_to_segments_distance(
                        states[k, :2] + sgn * shift[k] * side, ea, eb).min() \
                        - blk.task.shape.hard_radius - 0.01
                    if room < 0.0:
                        shift[k] = max(0.0, shift[k] + room)
            states[:, :2] += sgn * np.outer(shift, side)
