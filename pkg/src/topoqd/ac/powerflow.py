"""Polar Newton-Raphson AC power flow.

Generators with a voltage setpoint make their node PV, the slack node is the
angle reference and every other node is PQ. Generator reactive limits are not
enforced.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from topoqd.graph import is_connected
from topoqd.grid import ContingencyCase, GridModel

MAX_ITER = 30
TOL = 1e-6


class NonConvergence(Exception):
    """Raised by :func:`require_converged` for a failed case."""


@dataclass(frozen=True)
class ACCaseResult:
    converged: bool
    iterations: int
    flows: np.ndarray | None = None  # MVA, max of both branch ends; 0 for open branches
    loadings: np.ndarray | None = None  # flows / limits
    p_from: np.ndarray | None = None  # MW at the from end
    vm: np.ndarray | None = None
    va: np.ndarray | None = None
    mismatch: float = np.inf  # final max |mismatch|, per unit


def require_converged(result: ACCaseResult) -> ACCaseResult:
    if not result.converged:
        raise NonConvergence(f"no convergence after {result.iterations} iterations")
    return result


def build_ybus(grid: GridModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bus admittance matrix and the from/to branch admittance rows (per unit)."""
    n, e = grid.n_nodes, grid.n_edges
    src, dst = grid.branch_ends
    ybus = np.zeros((n, n), dtype=complex)
    yf = np.zeros((e, n), dtype=complex)
    yt = np.zeros((e, n), dtype=complex)
    for k, b in enumerate(grid.branches):
        if not b.in_service:
            continue
        ys = 1.0 / complex(b.resistance, b.reactance)
        bc = 1j * b.charging / 2.0
        t = b.tap
        yff, yft, ytf, ytt = (ys + bc) / t**2, -ys / t, -ys / t, ys + bc
        i, j = src[k], dst[k]
        ybus[i, i] += yff
        ybus[i, j] += yft
        ybus[j, i] += ytf
        ybus[j, j] += ytt
        yf[k, i], yf[k, j] = yff, yft
        yt[k, i], yt[k, j] = ytf, ytt
    for i, node in enumerate(grid.nodes):
        ybus[i, i] += 1j * node.shunt_mvar / grid.base_mva
    return ybus, yf, yt


def ac_power_flow(grid: GridModel, max_iter: int = MAX_ITER, tol: float = TOL) -> ACCaseResult:
    """Solve the AC power flow from a flat start."""
    n = grid.n_nodes
    src, dst = grid.branch_ends
    if not is_connected(n, src, dst, grid.in_service_mask):
        return ACCaseResult(converged=False, iterations=0)

    base = grid.base_mva
    s_spec = np.zeros(n, dtype=complex)
    v_set = np.ones(n)
    pv = np.zeros(n, dtype=bool)
    idx = grid.node_index
    for g in grid.injections:
        i = idx[g.node]
        s_spec[i] += complex(g.active_power, g.reactive_power) / base
        if g.kind == "generator" and g.voltage_setpoint is not None and not pv[i]:
            pv[i] = True
            v_set[i] = g.voltage_setpoint
    slack = grid.slack_index
    if not pv[slack]:
        v_set[slack] = 1.0
    pv[slack] = False
    pq = np.ones(n, dtype=bool)
    pq[pv] = False
    pq[slack] = False
    pvpq = np.flatnonzero(pv | pq)
    pq_idx = np.flatnonzero(pq)
    n_a = len(pvpq)

    ybus, yf, yt = build_ybus(grid)
    vm = np.where(pq, 1.0, v_set)
    va = np.zeros(n)
    v = vm * np.exp(1j * va)

    converged = False
    it = 0
    mis = np.inf
    for it in range(1, max_iter + 1):
        current = ybus @ v
        mismatch = v * np.conj(current) - s_spec
        f = np.concatenate([mismatch.real[pvpq], mismatch.imag[pq_idx]])
        mis = float(np.max(np.abs(f))) if len(f) else 0.0
        if not np.isfinite(mis):
            break
        if mis < tol:
            converged = True
            break
        dv = np.diag(v)
        dvn = np.diag(v / np.abs(v))
        ds_dva = 1j * dv @ np.conj(np.diag(current) - ybus @ dv)
        ds_dvm = dv @ np.conj(ybus @ dvn) + np.conj(np.diag(current)) @ dvn
        jac = np.block([
            [ds_dva.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq_idx)]],
            [ds_dva.imag[np.ix_(pq_idx, pvpq)], ds_dvm.imag[np.ix_(pq_idx, pq_idx)]],
        ])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            break
        va[pvpq] += dx[:n_a]
        vm[pq_idx] += dx[n_a:]
        if np.any(vm <= 0) or not np.all(np.isfinite(vm)):
            break
        v = vm * np.exp(1j * va)

    if not converged:
        return ACCaseResult(converged=False, iterations=it, mismatch=mis)

    s_from = v[src] * np.conj(yf @ v) * base
    s_to = v[dst] * np.conj(yt @ v) * base
    flows = np.maximum(np.abs(s_from), np.abs(s_to))
    flows[~grid.in_service_mask] = 0.0
    return ACCaseResult(
        converged=True,
        iterations=it,
        flows=flows,
        loadings=flows / grid.limits,
        p_from=s_from.real,
        vm=np.abs(v),
        va=np.angle(v),
        mismatch=mis,
    )


def apply_outage(grid: GridModel, case: ContingencyCase | tuple[str, ...]) -> GridModel:
    """Grid with the case's branches opened and injections removed."""
    if isinstance(case, ContingencyCase):
        branches, injections = set(case.removed_branches), set(case.removed_injections)
    else:
        branches, injections = set(case), set()
    return replace(
        grid,
        branches=tuple(replace(b, in_service=False) if b.id in branches else b for b in grid.branches),
        injections=tuple(g for g in grid.injections if g.id not in injections),
    )


def node_mismatch(grid: GridModel, result: ACCaseResult) -> np.ndarray:
    """Complex power mismatch per node (per unit) at a converged solution.

    Slack and PV reactive mismatches are free variables, so only their
    active part (slack: none) is meaningful for balance checks.
    """
    ybus, _, _ = build_ybus(grid)
    v = result.vm * np.exp(1j * result.va)
    s = v * np.conj(ybus @ v)
    spec = np.zeros(grid.n_nodes, dtype=complex)
    for g in grid.injections:
        spec[grid.node_index[g.node]] += complex(g.active_power, g.reactive_power) / grid.base_mva
    return s - spec
