"""Batched DC N-1 scoring of genomes.

Topology changes are applied as low-rank (Woodbury) updates to the inverse of
a fixed augmented susceptance matrix. The augmented system holds one spare
node per splittable station; an unused spare carries a unit placeholder on
its diagonal so the base matrix stays invertible. A split moves the group-1
branch ends to the spare and removes the placeholder, a disconnection removes
the branch; each is a rank-one term, so a genome is a rank-r update with r
bounded by the slot counts. Outages on top of the modified topology use the
multi-outage LODF identity.

All per-batch arrays have static shapes (padding to the bound on r and on
the outage sizes), so a genome's score does not depend on its batch mates.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from topoqd.graph import is_connected
from topoqd.grid import GridModel, busbar_implied_branches
from topoqd.importer import ActionSet
from topoqd.qd.genome import Genome

DEFAULT_ISLAND_PENALTY = 10_000.0
DEFAULT_WORST_K = 20
# |det| of the outage system below which the outage is treated as islanding
ISLAND_TOL = 1e-9


@dataclass(frozen=True)
class ScoreVector:
    overload_energy: float  # MW, N-1
    n_critical: int  # branches over limit post-contingency
    n_critical_n0: int  # branches over limit in the base case
    busbar_overload: float  # MW
    n_disconnections: int
    n_splits: int
    n_reassignments: int
    fitness: float
    worst_contingencies: tuple[tuple[str, float], ...] = ()

    @property
    def feasible(self) -> bool:
        return np.isfinite(self.fitness)

    @property
    def switching_distance(self) -> int:
        return self.n_disconnections + self.n_splits + self.n_reassignments

    def to_dict(self) -> dict:
        return {
            "overload_energy": self.overload_energy,
            "n_critical": self.n_critical,
            "n_critical_n0": self.n_critical_n0,
            "busbar_overload": self.busbar_overload,
            "n_disconnections": self.n_disconnections,
            "n_splits": self.n_splits,
            "n_reassignments": self.n_reassignments,
            "fitness": self.fitness if np.isfinite(self.fitness) else None,
            "worst_contingencies": [list(w) for w in self.worst_contingencies],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ScoreVector:
        return cls(
            overload_energy=d["overload_energy"],
            n_critical=d["n_critical"],
            n_critical_n0=d["n_critical_n0"],
            busbar_overload=d["busbar_overload"],
            n_disconnections=d["n_disconnections"],
            n_splits=d["n_splits"],
            n_reassignments=d["n_reassignments"],
            fitness=-np.inf if d["fitness"] is None else d["fitness"],
            worst_contingencies=tuple((c, e) for c, e in d["worst_contingencies"]),
        )


@dataclass
class FlowResult:
    """Screening output for one topology (MW)."""

    f_n0: np.ndarray
    f_max: np.ndarray
    f_busbar_max: np.ndarray
    contingency_energy: np.ndarray  # per outage case, island penalty included
    busbar_energy: np.ndarray
    contingency_islanded: np.ndarray
    busbar_islanded: np.ndarray
    limits: np.ndarray
    island_penalty: float = DEFAULT_ISLAND_PENALTY
    islanded: bool = False  # the topology itself is disconnected


@dataclass
class TopologyOperator:
    """Flow operator of one modified topology.

    ``ptdf`` maps augmented nodal injections (original nodes followed by one
    spare per station) to branch flows; the slack column is zero.
    """

    ptdf: np.ndarray
    injection: np.ndarray  # augmented injection vector for this genome
    islanded: bool
    _batch: _Batch = field(repr=False)

    def flows(self, p: np.ndarray | None = None) -> np.ndarray:
        return self.ptdf @ (self.injection if p is None else p)


@dataclass
class _Batch:
    islanded: np.ndarray  # (B,)
    b: np.ndarray  # (B, E) in-service susceptances
    inc: np.ndarray  # (B, E, M) reduced incidence
    x: np.ndarray  # (B, M, M) reduced inverse
    p: np.ndarray  # (B, M) reduced injections
    inj_node: np.ndarray  # (B, N_i) reduced node position of each injection (-1 = slack)
    bb_idx: np.ndarray  # (B, N_ob, Lb)
    bb_valid: np.ndarray  # (B, N_ob, Lb)
    pt: np.ndarray | None = None
    z: np.ndarray | None = None
    f0: np.ndarray | None = None


class DCEngine:
    """Evaluation context: grid, action set, precomputed base inverse and scoring settings."""

    def __init__(
        self,
        grid: GridModel,
        action_set: ActionSet,
        n_action_slots: int = 3,
        n_disconnection_slots: int = 2,
        *,
        weights: tuple[float, float] = (200.0, 50.0),
        fitness_variant: int = 1,
        island_penalty: float = DEFAULT_ISLAND_PENALTY,
        worst_k: int = DEFAULT_WORST_K,
    ):
        if fitness_variant not in (1, 2):
            raise ValueError("fitness_variant must be 1 or 2")
        self.grid = grid
        self.action_set = action_set
        self.n_action_slots = n_action_slots
        self.n_disconnection_slots = n_disconnection_slots
        self.weights = weights
        self.fitness_variant = fitness_variant
        self.island_penalty = island_penalty
        self.worst_k = worst_k

        n, e = grid.n_nodes, grid.n_edges
        self.stations = action_set.substations
        self.n_aug = n + len(self.stations)
        slack = grid.slack_index
        self._red = np.full(self.n_aug, -1, dtype=np.int64)
        keep = [i for i in range(self.n_aug) if i != slack]
        self._red[keep] = np.arange(len(keep))
        self._keep = np.array(keep, dtype=np.int64)
        self.m = len(keep)
        self._spare = {s: n + i for i, s in enumerate(self.stations)}

        self._src, self._dst = (a.copy() for a in grid.branch_ends)
        self._b_base = np.where(grid.in_service_mask, grid.susceptances, 0.0)
        self.limits = grid.limits.copy()
        self._disc_branch = np.array(
            [grid.branch_index[d] for d in action_set.disconnectables], dtype=np.int64
        )

        inc = np.zeros((e, self.m))
        rs, rd = self._red[self._src], self._red[self._dst]
        rows = np.arange(e)
        inc[rows[rs >= 0], rs[rs >= 0]] = 1.0
        inc[rows[rd >= 0], rd[rd >= 0]] = -1.0
        self._inc0 = inc
        b0 = inc.T @ (self._b_base[:, None] * inc)
        for s in self.stations:
            j = self._red[self._spare[s]]
            b0[j, j] += 1.0
        if not is_connected(n, self._src, self._dst, grid.in_service_mask):
            raise ValueError("base grid is disconnected")
        self._x0 = np.linalg.inv(b0)

        # per action: moved branch ends (branch, end 0=from/1=to) and moved injections
        bidx, gidx = grid.branch_index, grid.injection_index
        self._act_branches: list[list[tuple[int, int]]] = []
        self._act_injections: list[list[int]] = []
        for a in action_set.actions:
            station = grid.substation_by_node[a.substation]
            ni = grid.node_index[a.substation]
            br, inj = [], []
            for el in sorted(a.group1_elements(station)):
                if el in bidx:
                    k = bidx[el]
                    br.append((k, 0 if self._src[k] == ni else 1))
                else:
                    inj.append(gidx[el])
            self._act_branches.append(br)
            self._act_injections.append(inj)
        max_moved = max((len(b) for b in self._act_branches), default=0)
        self.rank_bound = max(1, 2 * (n_action_slots * max_moved + n_disconnection_slots) + n_action_slots)

        # injections
        self._inj_p = np.array([g.active_power for g in grid.injections], dtype=float)
        self._inj_node0 = np.array([grid.node_index[g.node] for g in grid.injections], dtype=np.int64)

        # contingencies, padded to a common size
        outs = grid.outages
        lc = max((len(o.removed_branches) for o in outs), default=1) or 1
        self._c_idx = np.zeros((len(outs), lc), dtype=np.int64)
        self._c_valid = np.zeros((len(outs), lc), dtype=bool)
        self._c_inj: list[list[int]] = []
        for i, o in enumerate(outs):
            ks = [bidx[x] for x in o.removed_branches]
            self._c_idx[i, :len(ks)] = ks
            self._c_valid[i, :len(ks)] = True
            self._c_inj.append([gidx[x] for x in o.removed_injections])
        self._c_ids = tuple(o.id for o in outs)

        # busbar outages: implied branches by station configuration
        in_service_ids = {b.id for b in grid.branches if b.in_service}
        self._bb_default: list[list[int]] = []
        self._bb_by_action: list[dict[int, list[int]]] = []
        lb = 1
        act_ids_by_station = {s: range(*action_set.ranges[s]) for s in self.stations}
        for o in grid.busbar_outages:
            station = grid.substation_by_node[o.substation]
            default = [bidx[x] for x in busbar_implied_branches(station, o.busbar, {}, in_service_ids)]
            per_action = {}
            for a in act_ids_by_station.get(o.substation, ()):
                ks = busbar_implied_branches(
                    station, o.busbar, action_set.actions[a].assignment, in_service_ids
                )
                per_action[a] = [bidx[x] for x in ks]
                lb = max(lb, len(ks))
            lb = max(lb, len(default))
            self._bb_default.append(default)
            self._bb_by_action.append(per_action)
        self._bb_station = [o.substation for o in grid.busbar_outages]
        self._lb = lb

        empty = Genome.empty(n_action_slots, n_disconnection_slots)
        # worst-k ties are broken by the unmodified topology's case energies, so
        # cases that were binding before stay on the list once relieved
        self._pre_energy = self.screen(self._prepare([empty]))[0].contingency_energy.copy()
        self.busbar_pre = self._score_batch([empty], busbar_pre=None)[0].busbar_overload
        self.pre_score = self._score_batch([empty], self.busbar_pre)[0]

    # -- topology -------------------------------------------------------------
    def _prepare(self, genomes: Sequence[Genome]) -> _Batch:
        nb, e, m, r = len(genomes), self.grid.n_edges, self.m, self.rank_bound
        n_ob = len(self._bb_default)
        u = np.zeros((nb, m, r))
        c = np.ones((nb, r))
        b_all = np.repeat(self._b_base[None], nb, axis=0)
        inc = np.repeat(self._inc0[None], nb, axis=0)
        p = np.zeros((nb, m))
        inj_node = np.repeat(self._red[self._inj_node0][None], nb, axis=0)
        islanded = np.zeros(nb, dtype=bool)
        bb_idx = np.zeros((nb, n_ob, self._lb), dtype=np.int64)
        bb_valid = np.zeros((nb, n_ob, self._lb), dtype=bool)
        red = self._red

        for i, g in enumerate(genomes):
            src, dst = self._src.copy(), self._dst.copy()
            node_of = self._inj_node0.copy()
            used_spares = []
            acts = g.action_ids
            for a in acts:
                spare = self._spare[self.action_set.actions[a].substation]
                used_spares.append(spare)
                for k, end in self._act_branches[a]:
                    if end == 0:
                        src[k] = spare
                    else:
                        dst[k] = spare
                for j in self._act_injections[a]:
                    node_of[j] = spare
            active = self._b_base > 0
            off = self._disc_branch[list(g.disconnection_ids)]
            active[off] = False
            changed = np.flatnonzero((src != self._src) | (dst != self._dst) | (active != (self._b_base > 0)))

            nodes_used = np.concatenate([np.arange(self.grid.n_nodes), np.array(used_spares, dtype=np.int64)])
            if not is_connected(self.n_aug, src, dst, active, nodes_used):
                islanded[i] = True
                continue

            col = 0
            for k in changed:
                bk = self._b_base[k]
                if bk == 0:
                    continue
                for node, sign in ((self._src[k], 1.0), (self._dst[k], -1.0)):
                    if red[node] >= 0:
                        u[i, red[node], col] += sign
                c[i, col] = -bk
                col += 1
                if active[k]:
                    for node, sign in ((src[k], 1.0), (dst[k], -1.0)):
                        if red[node] >= 0:
                            u[i, red[node], col] += sign
                    c[i, col] = bk
                    col += 1
                row = np.zeros(m)
                for node, sign in ((src[k], 1.0), (dst[k], -1.0)):
                    if red[node] >= 0:
                        row[red[node]] = sign
                inc[i, k] = row
            for spare in used_spares:
                u[i, red[spare], col] = 1.0
                c[i, col] = -1.0
                col += 1
            b_all[i, ~active] = 0.0

            rn = red[node_of]
            inj_node[i] = rn
            ok = rn >= 0
            np.add.at(p[i], rn[ok], self._inj_p[ok])

            act_at = {self.action_set.actions[a].substation: a for a in acts}
            for j, station in enumerate(self._bb_station):
                a = act_at.get(station)
                ks = self._bb_default[j] if a is None else self._bb_by_action[j][a]
                bb_idx[i, j, :len(ks)] = ks
                bb_valid[i, j, :len(ks)] = True

        # Woodbury: X = X0 - X0 U (C^-1 + U^T X0 U)^-1 U^T X0
        xu = self._x0 @ u
        k_mat = np.einsum("bmr,bms->brs", u, xu)
        k_mat[:, np.arange(r), np.arange(r)] += 1.0 / c
        x = self._x0[None] - xu @ np.linalg.solve(k_mat, np.swapaxes(xu, 1, 2))
        return _Batch(islanded, b_all, inc, x, p, inj_node, bb_idx, bb_valid)

    def _flows(self, batch: _Batch) -> None:
        ax = batch.inc @ batch.x  # (B, E, M)
        batch.pt = batch.b[:, :, None] * ax
        batch.z = ax @ np.swapaxes(batch.inc, 1, 2)  # (B, E, E)
        batch.f0 = np.einsum("bem,bm->be", batch.pt, batch.p)

    def _outage_flows(
        self,
        batch: _Batch,
        idx: np.ndarray,
        valid: np.ndarray,
        inj: list[list[int]] | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Post-outage flows (B, n, E) and islanding flags (B, n).

        ``idx``/``valid``: (B, n, L) removed branch positions.
        """
        nb, n, l = idx.shape
        e = self.grid.n_edges
        if n == 0:
            return np.zeros((nb, 0, e)), np.zeros((nb, 0), dtype=bool)
        f_pre = np.repeat(batch.f0[:, None, :], n, axis=1)
        if inj:
            for o, gens in enumerate(inj):
                for j in gens:
                    # lost injection is picked up by the slack (zero PTDF column)
                    for bi in range(nb):
                        node = batch.inj_node[bi, j]
                        if node >= 0:
                            f_pre[bi, o] -= batch.pt[bi, :, node] * self._inj_p[j]
        flat = idx.reshape(nb, 1, n * l)
        z_cols = np.take_along_axis(batch.z, np.broadcast_to(flat, (nb, e, n * l)), axis=2)
        z_cols = z_cols.reshape(nb, e, n, l).transpose(0, 2, 1, 3)  # (B, n, E, L)
        z_oo = np.take_along_axis(z_cols, np.broadcast_to(idx[:, :, :, None], (nb, n, l, l)), axis=2)
        b_o = np.take_along_axis(batch.b, idx.reshape(nb, n * l), axis=1).reshape(nb, n, l) * valid
        mat = np.eye(l) - b_o[..., :, None] * z_oo
        f_o = np.take_along_axis(f_pre, idx, axis=2) * valid
        det = np.linalg.det(mat)
        island = np.abs(det) < ISLAND_TOL
        mat[island] = np.eye(l)
        y = np.linalg.solve(mat, f_o[..., None])[..., 0]
        post = f_pre + batch.b[:, None, :] * np.einsum("bnel,bnl->bne", z_cols, y)
        out_mask = ((idx[..., None] == np.arange(e)) & valid[..., None]).any(axis=2)
        post[out_mask] = 0.0
        return post, island

    def screen(self, batch: _Batch) -> list[FlowResult]:
        if batch.f0 is None:
            self._flows(batch)
        nb = len(batch.islanded)
        c_idx = np.broadcast_to(self._c_idx[None], (nb,) + self._c_idx.shape)
        c_valid = np.broadcast_to(self._c_valid[None], (nb,) + self._c_valid.shape)
        post_c, isl_c = self._outage_flows(batch, c_idx, c_valid, self._c_inj)
        post_b, isl_b = self._outage_flows(batch, batch.bb_idx, batch.bb_valid)
        lim = self.limits
        abs_c, abs_b = np.abs(post_c), np.abs(post_b)
        energy_c = np.maximum(abs_c - lim, 0.0).sum(axis=2)
        energy_b = np.maximum(abs_b - lim, 0.0).sum(axis=2)
        energy_c[isl_c] = self.island_penalty
        energy_b[isl_b] = self.island_penalty
        fmax_c = np.where(isl_c[..., None], 0.0, abs_c).max(axis=1, initial=0.0)
        fmax_b = np.where(isl_b[..., None], 0.0, abs_b).max(axis=1, initial=0.0)
        return [
            FlowResult(
                f_n0=batch.f0[i],
                f_max=fmax_c[i],
                f_busbar_max=fmax_b[i],
                contingency_energy=energy_c[i],
                busbar_energy=energy_b[i],
                contingency_islanded=isl_c[i],
                busbar_islanded=isl_b[i],
                limits=lim,
                island_penalty=self.island_penalty,
                islanded=bool(batch.islanded[i]),
            )
            for i in range(nb)
        ]

    # -- public surface ------------------------------------------------------------
    def apply_topology(self, genome: Genome) -> TopologyOperator:
        batch = self._prepare([genome])
        self._flows(batch)
        pt = np.zeros((self.grid.n_edges, self.n_aug))
        pt[:, self._keep] = batch.pt[0]
        inj = np.zeros(self.n_aug)
        inj[self._keep] = batch.p[0]
        return TopologyOperator(pt, inj, bool(batch.islanded[0]), batch)

    def screen_contingencies(self, op: TopologyOperator, p: np.ndarray | None = None) -> FlowResult:
        batch = op._batch
        if p is not None:
            batch.p = p[None, self._keep].copy()
            batch.f0 = np.einsum("bem,bm->be", batch.pt, batch.p)
        return self.screen(batch)[0]

    def _score_batch(self, genomes: Sequence[Genome], busbar_pre: float | None) -> list[ScoreVector]:
        batch = self._prepare(genomes)
        flows = self.screen(batch)
        pre = busbar_pre if busbar_pre is not None else 0.0
        return [
            compute_scores(
                fr, g, pre, self.fitness_variant,
                action_set=self.action_set, weights=self.weights,
                contingency_ids=self._c_ids, worst_k=self.worst_k,
                tie_break=self._pre_energy,
            )
            for fr, g in zip(flows, genomes)
        ]

    def evaluate_batch(self, genomes: Sequence[Genome], pad_to: int | None = None) -> list[ScoreVector]:
        """Score genomes; when ``pad_to`` is given the batch is padded with the empty genome."""
        genomes = list(genomes)
        n = len(genomes)
        if pad_to is not None and n < pad_to:
            genomes += [Genome.empty(self.n_action_slots, self.n_disconnection_slots)] * (pad_to - n)
        return self._score_batch(genomes, self.busbar_pre)[:n]

    def evaluate(self, genome: Genome) -> ScoreVector:
        return self.evaluate_batch([genome])[0]


def compute_scores(
    flows: FlowResult,
    genome: Genome,
    busbar_pre: float,
    fitness_variant: int = 1,
    *,
    action_set: ActionSet,
    weights: tuple[float, float] = (200.0, 50.0),
    contingency_ids: Sequence[str] = (),
    worst_k: int = DEFAULT_WORST_K,
    tie_break: np.ndarray | None = None,
) -> ScoreVector:
    """Congestion metrics, switching descriptors and scalar fitness of one topology."""
    n_splits = genome.n_splits
    n_disc = genome.n_disconnections
    n_reassign = int(sum(action_set.actions[a].reassignment_distance for a in genome.action_ids))
    if flows.islanded:
        return ScoreVector(
            overload_energy=np.inf, n_critical=0, n_critical_n0=0, busbar_overload=np.inf,
            n_disconnections=n_disc, n_splits=n_splits, n_reassignments=n_reassign,
            fitness=-np.inf,
        )
    lim = flows.limits
    overload = float(np.maximum(flows.f_max - lim, 0.0).sum())
    overload += flows.island_penalty * int(flows.contingency_islanded.sum())
    n_crit = int((flows.f_max > lim).sum())
    n_crit0 = int((np.abs(flows.f_n0) > lim).sum())
    busbar = float(np.maximum(flows.f_busbar_max - lim, 0.0).sum())
    busbar += flows.island_penalty * int(flows.busbar_islanded.sum())
    w_n0, w_n1 = weights
    penalty = overload + w_n0 * n_crit0 + w_n1 * n_crit
    if fitness_variant == 2:
        penalty += max(busbar - busbar_pre, 0.0)
    energy = flows.contingency_energy
    tie = tie_break if tie_break is not None else np.zeros(len(energy))
    order = sorted(range(len(energy)), key=lambda o: (-energy[o], -tie[o], o))[:worst_k]
    worst = tuple((contingency_ids[o], float(energy[o])) for o in order) if len(contingency_ids) else ()
    return ScoreVector(
        overload_energy=overload,
        n_critical=n_crit,
        n_critical_n0=n_crit0,
        busbar_overload=busbar,
        n_disconnections=n_disc,
        n_splits=n_splits,
        n_reassignments=n_reassign,
        fitness=0.0 - penalty,
        worst_contingencies=worst,
    )


def apply_topology(engine: DCEngine, genome: Genome) -> TopologyOperator:
    return engine.apply_topology(genome)


def screen_contingencies(engine: DCEngine, op: TopologyOperator, p: np.ndarray | None = None) -> FlowResult:
    return engine.screen_contingencies(op, p)


def evaluate_batch(genomes: Sequence[Genome], engine: DCEngine, pad_to: int | None = None) -> list[ScoreVector]:
    return engine.evaluate_batch(genomes, pad_to)
