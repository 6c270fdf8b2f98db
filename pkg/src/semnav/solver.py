"""Nonlinear program solver for the per-flock control problems.

An augmented-Lagrangian loop (multiplier updates, penalty escalation on
stagnation) around projected, damped Newton steps that use the problems'
exact constraint curvature. At feasible iterates a least-squares multiplier
estimate acts as the optimality certificate; the stationarity residual is
measured relative to the problem's own gradient scale, as interior-point
codes do. Box bounds and pinned initial-state variables are handled by
projection, so iterates satisfy them exactly.

One iteration is one inner Newton step; the per-solve cap and tolerances come
from the parameter set.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mpcbuild import MpcParams, MpcProblem, improve_cold_start


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    ITERATION_LIMIT = "iteration_limit"
    INFEASIBLE = "infeasible"


@dataclass
class SolveOutcome:
    status: SolveStatus
    z: np.ndarray
    objective: float
    max_violation: float
    stationarity: float       # scaled projected Lagrangian gradient
    iterations: int
    wall_time: float
    multipliers: dict = field(default_factory=dict)


# infeasibility heuristic: no relative progress on the violation while it sits
# above this level for this many consecutive iterations, once the penalty has
# been driven up hard
_STALL_LEVEL = 1e-2
_STALL_ITERS = 20
_STALL_RHO = 1e6
_RHO_INIT = 1e3
_RHO_MAX = 1e8
_DELTA_MAX = 1e10
# line-search guard: a step may not blow up the wall/pair violation, and may
# never grow it beyond an absolute ceiling (deep penetration flips the
# separating planes into a trap the iteration cannot leave)
_VIOL_GUARD_FACTOR = 1.5
_VIOL_GUARD_FLOOR = 0.05


def _projected_gradient(g, z, lb, ub, free_mask) -> np.ndarray:
    pg = np.where(free_mask, g, 0.0)
    at_lb = (z <= lb + 1e-12) & (pg > 0)
    at_ub = (z >= ub - 1e-12) & (pg < 0)
    pg[at_lb | at_ub] = 0.0
    return pg


def _violation(ce, ci) -> float:
    v = 0.0
    if ce.size:
        v = max(v, float(np.abs(ce).max()))
    if ci.size:
        v = max(v, float(np.maximum(0.0, -ci).max()))
    return v


def _merit(problem, z, lam_e, lam_i, rho):
    """(Augmented Lagrangian value, max inequality violation) at z."""
    ce = problem.eq_residual(z)
    ci = problem.ineq_residual(z)
    val = problem.cost(z)
    if ce.size:
        val += 0.5 * rho * float(((ce + lam_e / rho) ** 2).sum())
    viol_i = 0.0
    if ci.size:
        t = np.maximum(0.0, lam_i / rho - ci)
        val += 0.5 * rho * float((t ** 2).sum())
        viol_i = float(np.maximum(0.0, -ci).max())
    return val, viol_i


def _refine_multipliers(problem, z, g_cost, je, ji, ci, lb, ub, free_mask):
    """Least-squares KKT multipliers at a (near-)feasible point.

    Minimizes the projected Lagrangian gradient over free equality multipliers
    and nonnegative multipliers on near-active inequality rows; rows whose
    multiplier comes out negative are dropped and the system re-solved.
    Returns (kkt_residual, lam_e, lam_i_full).
    """
    # variables pressed against a bound get their residual absorbed by the
    # bound multiplier, so they drop out of the least-squares system; rows
    # within the complementarity tolerance count as active
    cols = free_mask & (z > lb + 1e-6) & (z < ub - 1e-6)
    act_rows = np.flatnonzero(ci <= 1e-4) if ci.size else np.zeros(0, int)
    keep = np.ones(act_rows.size, dtype=bool)
    lam_e = np.zeros(problem.m_eq)
    lam_full = np.zeros(problem.m_ineq)
    lam = np.zeros(0)
    rows_used = act_rows
    for _ in range(4):
        rows_used = act_rows[keep]
        mats = []
        if problem.m_eq:
            mats.append(je.T)
        if rows_used.size:
            mats.append(-ji[rows_used].T)
        if not mats:
            break
        a_red = sp.hstack(mats, format="csr")[cols]
        lam = spla.lsmr(a_red, -g_cost[cols], atol=1e-10, btol=1e-10,
                        maxiter=200)[0]
        neg = lam[problem.m_eq:] < -1e-12
        if not neg.any():
            break
        keep[np.flatnonzero(keep)[neg]] = False
    if lam.size >= problem.m_eq:
        lam_e = lam[:problem.m_eq]
    if rows_used.size and lam.size > problem.m_eq:
        lam_full[rows_used] = np.maximum(0.0, lam[problem.m_eq:])
    g_lag = g_cost.copy()
    if problem.m_eq:
        g_lag = g_lag + je.T @ lam_e
    if problem.m_ineq:
        g_lag = g_lag - ji.T @ lam_full
    pg = _projected_gradient(g_lag, z, lb, ub, free_mask)
    kkt = float(np.abs(pg).max()) if pg.size else 0.0
    return kkt, lam_e, lam_full


def map_multipliers(src: MpcProblem, multipliers: dict,
                    dst: MpcProblem) -> dict:
    """Carry multipliers from one problem to a rebuilt one with the same
    flock composition, matching constraint rows by identity; rows new to the
    rebuilt problem start at zero."""
    out_e = np.zeros(dst.m_eq)
    out_i = np.zeros(dst.m_ineq)
    src_e = {k: v for k, v in zip(src.eq_row_keys(), multipliers["eq"])}
    src_i = {k: v for k, v in zip(src.ineq_row_keys(), multipliers["ineq"])}
    for r, key in enumerate(dst.eq_row_keys()):
        out_e[r] = src_e.get(key, 0.0)
    for r, key in enumerate(dst.ineq_row_keys()):
        out_i[r] = src_i.get(key, 0.0)
    return {"eq": out_e, "ineq": out_i}


def solve(problem: MpcProblem, params: MpcParams,
          multipliers: dict | None = None, verbose: bool = False) -> SolveOutcome:
    """Solve the flock program to local optimality.

    Terminates optimal when the constraint violation and the scaled
    stationarity residual drop below the configured tolerances, with
    iteration-limit and infeasibility (violation stall at high penalty)
    outcomes otherwise. Re-solving from a returned optimal solution
    certifies again within a few iterations.
    """
    t_start = time.perf_counter()
    n = problem.n
    lb, ub = problem.lb, problem.ub
    free_mask = np.ones(n, dtype=bool)
    free_mask[problem.fixed_idx] = False

    if problem.z0.shape != (n,):
        raise ValueError("warm start dimension mismatch")
    z = improve_cold_start(problem, problem.z0)
    np.clip(z, lb, ub, out=z)
    z[problem.fixed_idx] = problem.fixed_val
    ci0 = problem.ineq_residual(z)
    alg0 = float(np.maximum(0.0, -ci0).max()) if ci0.size else 0.0
    alg_ceiling = max(0.25, 1.001 * alg0)
    geo_ceiling = max(_VIOL_GUARD_FLOOR, 1.001 * problem.geo_violation(z))

    lam_e = np.zeros(problem.m_eq)
    lam_i = np.zeros(problem.m_ineq)
    if multipliers:
        me, mi = multipliers.get("eq"), multipliers.get("ineq")
        if me is None or mi is None or len(me) != problem.m_eq or len(mi) != problem.m_ineq:
            raise ValueError("multiplier dimension mismatch")
        lam_e, lam_i = me.copy(), mi.copy()

    rho = _RHO_INIT
    delta = 1e-6
    iters = 0
    inner_tol = 10.0
    feas_round_target = 1e-1
    round_viol0 = None
    force_update = False
    round_best_pg = np.inf
    round_no_gain = 0

    best_viol = np.inf
    stall_count = 0
    status = None
    kkt_scaled = np.inf
    viol = np.inf

    while status is None:
        ce = problem.eq_residual(z)
        ci = problem.ineq_residual(z)
        viol = _violation(ce, ci)
        if viol > _STALL_LEVEL:
            if viol < best_viol * (1.0 - 1e-2):
                best_viol = viol
                stall_count = 0
            else:
                stall_count += 1
        else:
            best_viol = min(best_viol, viol)
            stall_count = 0

        je = problem.eq_jacobian(z)
        ji = problem.ineq_jacobian(z)
        g_cost = problem.cost_grad(z)
        grad_scale = max(1.0, float(np.abs(g_cost).max()))
        y_i = np.maximum(0.0, lam_i - rho * ci)
        lam_e_hat = lam_e + rho * ce if ce.size else lam_e
        g = g_cost.copy()
        if ce.size:
            g = g + je.T @ lam_e_hat
        if ci.size:
            g = g - ji.T @ y_i
        pg = _projected_gradient(g, z, lb, ub, free_mask)
        pg_norm = float(np.abs(pg).max()) if n else 0.0
        kkt_scaled = pg_norm / grad_scale

        feasible = viol <= params.feas_tol
        if feasible:
            # the AL multiplier estimates certify on their own when they also
            # satisfy complementarity
            comp = float((y_i * np.maximum(ci, 0.0)).max()) if ci.size else 0.0
            if max(pg_norm, comp) / grad_scale <= params.stat_tol:
                lam_e, lam_i = lam_e_hat, y_i
                status = SolveStatus.OPTIMAL
                break
            # otherwise ask for the best least-squares multipliers, which
            # enforce complementarity structurally (worth its cost only when
            # certification is plausibly close)
            if pg_norm / grad_scale <= 100.0 * params.stat_tol:
                kkt_r, le_r, li_r = _refine_multipliers(
                    problem, z, g_cost, je, ji, ci, lb, ub, free_mask)
                kkt_scaled = min(kkt_scaled, kkt_r / grad_scale)
                if kkt_r / grad_scale <= params.stat_tol:
                    lam_e, lam_i = le_r, li_r
                    status = SolveStatus.OPTIMAL
                    break
            inner_tol = params.stat_tol * grad_scale

        if iters >= params.max_iterations:
            status = SolveStatus.ITERATION_LIMIT
            break
        if params.time_cap is not None and \
                time.perf_counter() - t_start > params.time_cap:
            status = SolveStatus.ITERATION_LIMIT
            break
        if viol > _STALL_LEVEL and stall_count >= _STALL_ITERS and rho >= _STALL_RHO:
            status = SolveStatus.INFEASIBLE
            break

        # ---- outer updates, only at inner convergence: multiplier step when
        # the round met its feasibility target, penalty escalation otherwise;
        # the inner loop itself decides when transport work is done
        if pg_norm < 0.95 * round_best_pg:
            round_best_pg = pg_norm
            round_no_gain = 0
        else:
            round_no_gain += 1
        if pg_norm <= inner_tol or force_update or round_no_gain >= 8:
            force_update = False
            round_best_pg = np.inf
            round_no_gain = 0
            if viol <= feas_round_target:
                lam_e = lam_e + rho * ce
                lam_i = np.maximum(0.0, lam_i - rho * ci)
                if round_viol0 is not None and viol > 0.2 * round_viol0 \
                        and viol > params.feas_tol:
                    # multiplier iteration contracting slowly: mild stiffening
                    rho = min(rho * 2.0, 1e6)
                feas_round_target = max(params.feas_tol,
                                        0.3 * min(feas_round_target, viol))
                inner_tol = max(params.stat_tol * grad_scale, 0.3 * inner_tol)
            else:
                if rho >= _RHO_MAX:
                    status = SolveStatus.INFEASIBLE
                    break
                rho = min(rho * 5.0, _RHO_MAX)
                feas_round_target = max(params.feas_tol, 0.5 * best_viol)
            round_viol0 = viol
            stall_count = 0
            continue
        if round_viol0 is None:
            round_viol0 = viol

        # ---- assemble the AL Hessian model
        act = np.zeros(n, dtype=bool)
        act[(z <= lb + 1e-9) & (g > 0)] = True
        act[(z >= ub - 1e-9) & (g < 0)] = True
        act[~free_mask] = True
        f_idx = np.flatnonzero(~act)
        if f_idx.size == 0:
            status = SolveStatus.ITERATION_LIMIT
            break
        h = problem.cost_hessian()
        if ce.size:
            h = (h + rho * (je.T @ je)).tocsr()
        if ci.size:
            act_rows = np.flatnonzero(y_i > 0.0)
            if act_rows.size:
                ja = ji[act_rows]
                h = h + rho * (ja.T @ ja)
        h = h + problem.constraint_curvature(z, lam_e_hat, -y_i)
        h_ff = h[f_idx][:, f_idx].tocsc()
        g_f = g[f_idx]
        eye = sp.identity(f_idx.size, format="csc")

        phi0, alg_now = _merit(problem, z, lam_e, lam_i, rho)
        geo_now = problem.geo_violation(z)
        guard_alg = max(min(max(_VIOL_GUARD_FACTOR * alg_now, 0.25), alg_ceiling),
                        alg_now)
        guard_geo = max(min(max(_VIOL_GUARD_FACTOR * geo_now, _VIOL_GUARD_FLOOR),
                            geo_ceiling), geo_now)

        def try_direction(d):
            alpha = 1.0
            for _ in range(25):
                z_new = np.clip(z + alpha * d, lb, ub)
                z_new[problem.fixed_idx] = problem.fixed_val
                phi_new, alg_new = _merit(problem, z_new, lam_e, lam_i, rho)
                slope = min(0.0, float(g @ (z_new - z)))
                armijo = phi_new <= phi0 + 1e-4 * slope - 1e-14 * max(1.0, abs(phi0))
                if (armijo or (slope == 0.0 and phi_new < phi0)) and \
                        alg_new <= guard_alg and \
                        problem.geo_violation(z_new) <= guard_geo:
                    return z_new, alpha
                alpha *= 0.5
            return None, 0.0

        step_taken = False
        alpha = 0.0
        for _ in range(8):
            try:
                d_f = spla.splu(h_ff + delta * eye).solve(-g_f)
            except RuntimeError:
                delta = min(max(delta * 10.0, 1e-4), _DELTA_MAX)
                continue
            if not np.all(np.isfinite(d_f)) or float(g_f @ d_f) >= 0.0:
                delta = min(max(delta * 10.0, 1e-4), _DELTA_MAX)
                continue
            d = np.zeros(n)
            d[f_idx] = d_f
            z_new, alpha = try_direction(d)
            if z_new is not None:
                z = z_new
                step_taken = True
                if alpha >= 1.0:
                    delta = max(delta / 2.0, 1e-9)
                elif alpha <= 0.1:
                    # accepted but heavily cut back: distrust the model
                    delta = min(max(delta * 3.0, 1e-6), 1e4)
                break
            delta = min(max(delta * 10.0, 1e-4), _DELTA_MAX)
            if delta >= _DELTA_MAX:
                break
        if not step_taken:
            # steepest-descent fallback keeps the iteration moving when the
            # Newton model is hopeless
            d = np.zeros(n)
            d[f_idx] = -g_f / max(1.0, float(np.abs(g_f).max()))
            z_new, alpha = try_direction(d)
            if z_new is not None:
                z = z_new
                step_taken = True
        iters += 1
        if verbose:
            print(f"  it={iters:3d} rho={rho:8.1e} viol={viol:9.3e} "
                  f"kkt={kkt_scaled:9.3e} f={problem.cost(z):10.3f} "
                  f"alpha={alpha if step_taken else 0:.4f} delta={delta:.1e}")
        if not step_taken:
            # no direction yields progress: force an outer update next
            force_update = True

    return SolveOutcome(
        status=status,
        z=z,
        objective=problem.cost(z),
        max_violation=viol,
        stationarity=kkt_scaled,
        iterations=iters,
        wall_time=time.perf_counter() - t_start,
        multipliers={"eq": lam_e.copy(), "ineq": lam_i.copy()},
    )
