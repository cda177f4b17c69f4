"""Regenerate the bundled 14-bus grid fixtures.

Network data is the public IEEE 14-bus test case (100 MVA base). Flow limits
are not part of that case; they are derived here from DC and AC N-1 flows:

* ``ieee14.json``: every limit is 30 % above the largest flow seen, so the
  grid has no overloads.
* ``congestion14.json``: same network, but one branch gets a tight limit that
  a single branch disconnection can relieve.

Run from the repository root: ``python3 scripts/make_fixtures.py``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

DATA = Path(__file__).resolve().parents[1] / "src" / "topoqd" / "data"

# bus: (Pd, Qd, Bs)
BUSES = {
    1: (0.0, 0.0, 0.0), 2: (21.7, 12.7, 0.0), 3: (94.2, 19.0, 0.0), 4: (47.8, -3.9, 0.0),
    5: (7.6, 1.6, 0.0), 6: (11.2, 7.5, 0.0), 7: (0.0, 0.0, 0.0), 8: (0.0, 0.0, 0.0),
    9: (29.5, 16.6, 19.0), 10: (9.0, 5.8, 0.0), 11: (3.5, 1.8, 0.0), 12: (6.1, 1.6, 0.0),
    13: (13.5, 5.8, 0.0), 14: (14.9, 5.0, 0.0),
}
# bus: (Pg, Qg, Vset)
GENS = {1: (232.4, -16.9, 1.06), 2: (40.0, 42.4, 1.045), 3: (0.0, 23.4, 1.01),
        6: (0.0, 12.2, 1.07), 8: (0.0, 17.4, 1.09)}
# (from, to, r, x, b, tap)
BRANCHES = [
    (1, 2, 0.01938, 0.05917, 0.0528, 1.0), (1, 5, 0.05403, 0.22304, 0.0492, 1.0),
    (2, 3, 0.04699, 0.19797, 0.0438, 1.0), (2, 4, 0.05811, 0.17632, 0.0340, 1.0),
    (2, 5, 0.05695, 0.17388, 0.0346, 1.0), (3, 4, 0.06701, 0.17103, 0.0128, 1.0),
    (4, 5, 0.01335, 0.04211, 0.0, 1.0), (4, 7, 0.0, 0.20912, 0.0, 0.978),
    (4, 9, 0.0, 0.55618, 0.0, 0.969), (5, 6, 0.0, 0.25202, 0.0, 0.932),
    (6, 11, 0.09498, 0.19890, 0.0, 1.0), (6, 12, 0.12291, 0.25581, 0.0, 1.0),
    (6, 13, 0.06615, 0.13027, 0.0, 1.0), (7, 8, 0.0, 0.17615, 0.0, 1.0),
    (7, 9, 0.0, 0.11001, 0.0, 1.0), (9, 10, 0.03181, 0.08450, 0.0, 1.0),
    (9, 14, 0.12711, 0.27038, 0.0, 1.0), (10, 11, 0.08205, 0.19207, 0.0, 1.0),
    (12, 13, 0.22092, 0.19988, 0.0, 1.0), (13, 14, 0.17093, 0.34802, 0.0, 1.0),
]
# published solved voltage magnitudes
VM_SOLVED = [1.060, 1.045, 1.010, 1.019, 1.020, 1.070, 1.062, 1.090, 1.056, 1.051,
             1.057, 1.055, 1.050, 1.036]
SWITCHABLE = (2, 4, 5, 6, 9)
BUSBAR_OUTAGES = (("4", "4A"), ("9", "9B"))


def branch_id(f: int, t: int) -> str:
    return f"L{f}-{t}"


def raw_grid(limits: dict[str, float] | None = None) -> dict:
    nodes = [{"id": str(i), "substation": f"S{i}"} | ({"shunt_mvar": bs} if bs else {})
             for i, (_, _, bs) in BUSES.items()]
    branches = []
    for f, t, r, x, b, tap in BRANCHES:
        bid = branch_id(f, t)
        d = {"id": bid, "from": str(f), "to": str(t), "x_pu": x,
             "limit_mw": (limits or {}).get(bid, 9999.0), "r_pu": r}
        if b:
            d["b_pu"] = b
        if tap != 1.0:
            d["tap"] = tap
        branches.append(d)
    injections = [
        {"id": f"G{i}", "node": str(i), "p_mw": pg, "q_mvar": 0.0, "kind": "generator",
         "v_setpoint_pu": vs}
        for i, (pg, _, vs) in GENS.items()
    ]
    injections += [
        {"id": f"D{i}", "node": str(i), "p_mw": -pd, "q_mvar": -qd, "kind": "load"}
        for i, (pd, qd, _) in BUSES.items() if pd or qd
    ]
    contingencies = [
        {"id": f"N-1 {branch_id(f, t)}", "branches": [branch_id(f, t)], "injections": []}
        for f, t, *_ in BRANCHES if (f, t) != (7, 8)  # 7-8 is radial
    ]
    substations = []
    for s in SWITCHABLE:
        elements = [branch_id(f, t) for f, t, *_ in BRANCHES if s in (f, t)]
        elements += [g["id"] for g in injections if g["node"] == str(s)]
        terminals = []
        for k, el in enumerate(elements):
            reach = [f"{s}A", f"{s}B"]
            if s == 9 and el.startswith("D"):
                reach = [f"{s}A"]  # load feeder wired to one busbar only
            default = reach[k % len(reach)]
            terminals.append({"element": el, "reachable": reach, "default": default})
        substations.append({"node": str(s), "busbars": [f"{s}A", f"{s}B"],
                            "couplers": [[f"{s}A", f"{s}B"]], "terminals": terminals})
    return {
        "base_mva": 100.0,
        "slack": "1",
        "nodes": nodes,
        "branches": branches,
        "injections": injections,
        "contingencies": contingencies,
        "busbar_outages": [{"id": f"BB {bb}", "substation": s, "busbar": bb}
                           for s, bb in BUSBAR_OUTAGES],
        "substations": substations,
    }


def _round_up(x: float, step: float = 5.0) -> float:
    return max(step, math.ceil(x / step) * step)


def main() -> None:
    from topoqd.ac.powerflow import ac_power_flow, apply_outage
    from topoqd.dc_engine import DCEngine
    from topoqd.grid import grid_from_dict
    from topoqd.importer import build_action_set
    from topoqd.qd.genome import Genome

    grid = grid_from_dict(raw_grid())
    acts = build_action_set(grid)
    eng = DCEngine(grid, acts, 3, 2)
    empty = Genome.empty(3, 2)

    def dc_worst(g: Genome) -> np.ndarray:
        op = eng.apply_topology(g)
        fr = eng.screen_contingencies(op)
        return np.maximum(np.abs(fr.f_n0), fr.f_max)

    def ac_worst(gm) -> np.ndarray:
        out = np.zeros(gm.n_edges)
        for case in [None, *gm.outages]:
            res = ac_power_flow(gm if case is None else apply_outage(gm, case))
            if res.converged:
                out = np.maximum(out, res.flows)
        return out

    base_dc = dc_worst(empty)
    base_ac = ac_worst(grid)
    ids = [b.id for b in grid.branches]
    limits = {bid: _round_up(1.3 * max(d, a)) for bid, d, a in zip(ids, base_dc, base_ac)}
    doc = raw_grid(limits)
    (DATA / "ieee14.json").write_text(json.dumps(doc, indent=2) + "\n")

    # congestion variant: pick the (branch, disconnection) pair with the largest relief
    from topoqd.topology import materialize

    best = None
    for j, d in enumerate(acts.disconnectables):
        g = Genome((-1, -1, -1), (j, -1))
        dc_after = dc_worst(g)
        ac_after = ac_worst(materialize(grid, acts, g))
        for k, bid in enumerate(ids):
            if bid == d:
                continue
            relief = min(base_dc[k] - dc_after[k], base_ac[k] - ac_after[k])
            if best is None or relief > best[0]:
                best = (relief, k, j, dc_after, ac_after)
    relief, k, j, dc_after, ac_after = best
    target = ids[k]
    tight = {bid: _round_up(1.3 * max(base_dc[i], base_ac[i], dc_after[i], ac_after[i]))
             for i, bid in enumerate(ids)}
    # limit halfway into the relieved range, so the disconnection clears it
    tight[target] = round(max(dc_after[k], ac_after[k]) + 0.1 * relief, 1)
    doc = raw_grid(tight)
    doc["description"] = (f"tight limit on {target}; disconnecting "
                          f"{acts.disconnectables[j]} relieves it")
    (DATA / "congestion14.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(f"target {target} limit {tight[target]}, relief {relief:.1f} MW by "
          f"{acts.disconnectables[j]}")


if __name__ == "__main__":
    main()
