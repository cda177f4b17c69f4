"""Explicit bus/branch model of a genome's topology.

Used by the AC validator and as the rebuild reference for the low-rank DC
updates. Split stations get a second node ``"<node>#b"`` that carries the
group-1 terminals; disconnected branches are kept but marked out of service.
"""

from __future__ import annotations

from dataclasses import replace

from topoqd.grid import BusbarOutage, GridModel, Node, busbar_implied_branches
from topoqd.importer import ActionSet
from topoqd.qd.genome import Genome

SPLIT_SUFFIX = "#b"


def split_node_id(node: str) -> str:
    return node + SPLIT_SUFFIX


def station_assignments(action_set: ActionSet, genome: Genome) -> dict[str, dict[str, str]]:
    """Station node -> terminal busbar assignment for every split in the genome."""
    return {
        action_set.actions[a].substation: action_set.actions[a].assignment
        for a in genome.action_ids
    }


def materialize(grid: GridModel, action_set: ActionSet, genome: Genome) -> GridModel:
    """Return the bus/branch grid realised by ``genome`` (no re-validation)."""
    off = {action_set.disconnectables[d] for d in genome.disconnection_ids}
    branches = [replace(b, in_service=b.in_service and b.id not in off) for b in grid.branches]
    bidx = grid.branch_index
    new_nodes: list[Node] = []
    moved_injections: dict[str, str] = {}
    for a in genome.action_ids:
        action = action_set.actions[a]
        node = action.substation
        station = grid.substation_by_node[node]
        extra = split_node_id(node)
        new_nodes.append(Node(id=extra, substation=grid.nodes[grid.node_index[node]].substation))
        for element in action.group1_elements(station):
            k = bidx.get(element)
            if k is None:
                moved_injections[element] = extra
                continue
            # a branch joining two split stations can have both ends moved
            b = branches[k]
            if b.from_node == node:
                branches[k] = replace(b, from_node=extra)
            elif b.to_node == node:
                branches[k] = replace(b, to_node=extra)

    injections = tuple(
        replace(g, node=moved_injections[g.id]) if g.id in moved_injections else g
        for g in grid.injections
    )
    assignments = station_assignments(action_set, genome)
    in_service_ids = {b.id for b in branches if b.in_service}
    busbar_outages = tuple(
        BusbarOutage(
            o.id, o.substation, o.busbar,
            busbar_implied_branches(
                grid.substation_by_node[o.substation], o.busbar,
                assignments.get(o.substation, {}), in_service_ids,
            ),
        )
        for o in grid.busbar_outages
    )
    return GridModel(
        nodes=grid.nodes + tuple(new_nodes),
        branches=tuple(branches),
        injections=injections,
        outages=grid.outages,
        busbar_outages=busbar_outages,
        substations=(),
        slack_node=grid.slack_node,
        base_mva=grid.base_mva,
    )
