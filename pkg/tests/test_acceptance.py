"""Acceptance criteria, one test per criterion.

Each test prints a PASS/FAIL line; the lines are also collected and repeated
in the pytest terminal summary.
"""

import itertools
import json
import time

import numpy as np
import pytest
from click.testing import CliRunner
from scipy import stats

from topoqd.ac.powerflow import ac_power_flow
from topoqd.cli import main
from topoqd.config import OptimizerConfig
from topoqd.dc_engine import DCEngine
from topoqd.importer import build_action_set, enumerate_disconnectables, enumerate_station_actions
from topoqd.qd.genome import EMPTY, Genome, is_valid
from topoqd.qd.loop import run
from topoqd.qd.operators import OPERATIONS, crossover, mutate
from topoqd.qd.repertoire import descriptor_to_cell, n_cells
from topoqd.topology import materialize

from conftest import data_path
from gridgen import (
    brute_force_disconnectables,
    brute_force_station_partitions,
    random_genome,
    random_grid,
    rebuild_screen,
)
from test_ac import IEEE14_VM, two_bus
from test_importer import action_keys, station

RESULTS: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1.0))


def test_01_dc_flows_match_rebuild():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, mismatched_islanding, checked = 0.0, 0, 0
    for _ in range(50):
        grid = random_grid(rng, int(rng.integers(10, 61)), n_stations=4)
        acts = build_action_set(grid)
        eng = DCEngine(grid, acts)
        for _ in range(20):
            g = random_genome(rng, acts, fill=0.8)
            base, _, _ = rebuild_screen(materialize(grid, acts, g))
            op = eng.apply_topology(g)
            if base is None or op.islanded:
                mismatched_islanding += (base is None) != op.islanded
                continue
            worst = max(worst, rel_err(op.flows(), base))
            checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and mismatched_islanding == 0 and elapsed < 60
    verdict(1, "DC oracle equivalence", ok,
            f"{checked} topologies, max rel err {worst:.2e}, islanding mismatches {mismatched_islanding}, "
            f"{elapsed:.1f}s")


def test_02_contingency_screen_matches_rebuild(ieee14):
    # every single-branch outage except the radial feeder L7-8, which islands bus 8
    expected = {(b.id,) for b in ieee14.branches} - {("L7-8",)}
    assert {tuple(o.removed_branches) for o in ieee14.outages} == expected
    grid = ieee14
    acts = build_action_set(grid)
    eng = DCEngine(grid, acts)
    rng = np.random.default_rng(202)
    worst, flag_errors = 0.0, 0
    genomes = [Genome.empty(3, 2)] + [random_genome(rng, acts) for _ in range(10)]
    for g in genomes:
        base, cases, _ = rebuild_screen(materialize(grid, acts, g))
        if base is None:
            continue
        fr = eng.screen_contingencies(eng.apply_topology(g))
        flag_errors += fr.contingency_islanded.tolist() != [c is None for c in cases]
        ref = np.max(np.abs([c for c in cases if c is not None]), axis=0)
        worst = max(worst, float(np.max(np.abs(fr.f_max - ref))))
    verdict(2, "contingency oracle", worst < 1e-8 and flag_errors == 0,
            f"{len(grid.outages)} single-branch outages, {len(genomes)} topologies, max |f_max| err {worst:.2e} MW")


def test_03_disconnectables_match_brute_force():
    rng = np.random.default_rng(303)
    mismatches, sizes = 0, []
    for _ in range(20):
        grid = random_grid(rng, int(rng.integers(8, 30)), n_outages=20, max_edges=50)
        assert grid.n_edges <= 50 and len(grid.outages) <= 20
        mismatches += set(enumerate_disconnectables(grid)) != brute_force_disconnectables(grid)
        sizes.append(grid.n_edges)
    verdict(3, "bridge/disconnectable oracle", mismatches == 0,
            f"20 grids with {min(sizes)}-{max(sizes)} branches, {mismatches} mismatches")


def test_04_station_enumeration_counts():
    full = station([{"A", "B"}] * 4)
    n_full = len(enumerate_station_actions(full))
    single = station([{"A", "B"}, {"A"}, {"A", "B"}, {"A", "B"}])
    found = action_keys(enumerate_station_actions(single), single)
    oracle = set(brute_force_station_partitions(single))
    ok = n_full == 2**3 - 1 and found == oracle
    verdict(4, "enumeration count", ok,
            f"4-terminal station: {n_full} actions, single-busbar terminal: {len(found)} vs brute force {len(oracle)}")


def test_05_descriptor_map_is_bijective():
    ranges = (2, 3, 45)
    cells = [descriptor_to_cell(d, s, r, ranges)
             for d, s, r in itertools.product(range(3), range(4), range(46))]
    ok = sorted(cells) == list(range(552)) and n_cells(ranges) == 552
    verdict(5, "descriptor bijectivity", ok, f"{len(set(cells))} distinct of {len(cells)} descriptors")


def test_06_operator_soundness(congestion_actions):
    acts = congestion_actions
    rng = np.random.default_rng(606)
    cfg = OptimizerConfig()
    weights = {"action": cfg.p_action, "disconnection": cfg.p_disconnection}
    observed = {k: np.zeros(4) for k in weights}
    expected = {k: np.zeros(4) for k in weights}

    def valid(g):
        return (len(g.actions) == cfg.n_action_slots and len(g.disconnections) == cfg.n_disconnection_slots
                and is_valid(g, acts.substation_of, len(acts.actions), len(acts.disconnectables)))

    violations = 0
    for i in range(100_000):
        g = random_genome(rng, acts, fill=float(rng.random()))
        if i % 2:
            child = crossover(g, random_genome(rng, acts, fill=float(rng.random())), acts, rng,
                              cfg.p_crossover_first)
        else:
            trace = []
            child = mutate(g, acts, rng, cfg.p_action, cfg.p_disconnection, cfg.mutation_mean, trace=trace)
            for stage, op, feasible in trace:
                if stage in weights:
                    w = np.array(weights[stage]) * np.array(feasible)
                    observed[stage][OPERATIONS.index(op)] += 1
                    expected[stage] += w / w.sum()
        violations += not valid(child)
    p_values = {}
    for stage in weights:
        keep = expected[stage] > 0
        violations += int(observed[stage][~keep].sum())
        p_values[stage] = stats.chisquare(observed[stage][keep], expected[stage][keep]).pvalue
    ok = violations == 0 and all(p > 0.01 for p in p_values.values())
    verdict(6, "genome-operator soundness", ok,
            f"1e5 applications, {violations} violations, chi-square p "
            + ", ".join(f"{k}={v:.3f}" for k, v in p_values.items()))


def test_07_optimization_progress(congestion14, congestion_actions, congestion_engine):
    acts, eng = congestion_actions, congestion_engine
    pre = eng.pre_score
    singles = [Genome((a, EMPTY, EMPTY), (EMPTY, EMPTY)) for a in range(len(acts.actions))]
    singles += [Genome((EMPTY,) * 3, (d, EMPTY)) for d in range(len(acts.disconnectables))]
    scores = eng.evaluate_batch(singles)
    optimum = max(s.fitness for s in scores)
    relief = max(1 - s.overload_energy / pre.overload_energy
                 for g, s in zip(singles, scores) if g.n_disconnections and s.feasible)

    snaps = []
    res = run(congestion14, acts, OptimizerConfig(batch_size=64, max_evaluations=10_000, iters_per_epoch=10),
              snaps.append, seed=7, engine=eng)
    best = res.repertoire.best().score.fitness
    previous, elitism_ok = {}, True
    for snap in snaps:
        for cell, entries in snap.cells:
            elitism_ok &= entries[0].score.fitness >= previous.get(cell, -np.inf)
            previous[cell] = entries[0].score.fitness
    trace = [f for _, f in res.trace]
    elitism_ok &= trace == sorted(trace)
    ok = (relief >= 0.8 and res.evaluations <= 10_000 and best >= optimum - 0.05 * abs(optimum)
          and elitism_ok)
    verdict(7, "optimization progress", ok,
            f"single disconnection removes {100 * relief:.0f}% of overload energy, scan optimum {optimum:.3f}, "
            f"best {best:.3f} after {res.evaluations} evaluations (pre {pre.fitness:.3f}), elitism ok {elitism_ok}")


def test_08_ac_solver(ieee14):
    res = ac_power_flow(ieee14)
    vm_err = float(np.max(np.abs(res.vm - IEEE14_VM))) if res.converged else np.inf
    p, q, r, x = 0.5, 0.1, 0.01, 0.1
    two = ac_power_flow(two_bus(50.0, 10.0, r, x))
    b = 2 * (p * r + q * x) - 1.0
    v2 = np.sqrt((-b + np.sqrt(b * b - 4 * (p**2 + q**2) * (r**2 + x**2))) / 2)
    two_err = abs(two.vm[1] - v2) if two.converged else np.inf
    ok = res.converged and res.iterations <= 10 and vm_err < 1e-3 and two_err < 1e-6
    verdict(8, "AC solver", ok,
            f"14-bus: {res.iterations} iterations, max |V| err {vm_err:.1e} pu; 2-bus err {two_err:.1e} pu")


def test_09_end_to_end(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"queue_policy": "block",
                               "optimizer": {"max_evaluations": 10_000, "iters_per_epoch": 50}}))
    outs, codes = [tmp_path / "a", tmp_path / "b"], []
    t0 = time.perf_counter()
    for out in outs:
        res = CliRunner().invoke(main, ["optimize", "--grid", data_path("congestion14.json"),
                                        "--config", str(cfg), "--seed", "42", "--budget-seconds", "60",
                                        "--out", str(out)])
        codes.append(res.exit_code)
    elapsed = time.perf_counter() - t0
    rows = [line.split(",")[1:] for line in (outs[0] / "heatmap_overload.csv").read_text().splitlines()[1:]]
    pre = float(rows[0][0])
    values = [float(v) for i, row in enumerate(rows) for j, v in enumerate(row) if v != "-" and (i, j) != (0, 0)]
    pct = sum(float(line.split(",")[1]) for line in (outs[0] / "rejections.csv").read_text().splitlines()[1:])
    info = [json.loads((o / "run.json").read_text()) for o in outs]
    accepted = info[0]["accepted"]
    for i in info:
        i.pop("runtime")
    identical = info[0] == info[1] and all(
        (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
        for n in ("heatmap_overload.csv", "accepted_counts.csv", "rejections.csv", "fitness_trace.csv"))
    ok = (codes == [0, 0] and accepted >= 1 and values and min(values) < pre
          and abs(pct - 100) <= 0.1 and identical)
    verdict(9, "end-to-end optimize", ok,
            f"{accepted} accepted, overload {pre:.3f} -> {min(values) if values else float('nan'):.3f}, "
            f"rejections sum {pct:.2f}%, identical reports {identical}, two runs {elapsed:.1f}s")


def test_10_throughput(congestion_engine, congestion_actions):
    rng = np.random.default_rng(1010)
    batches = [[random_genome(rng, congestion_actions) for _ in range(64)] for _ in range(20)]
    congestion_engine.evaluate_batch(batches[0])
    n, t0 = 0, time.perf_counter()
    while time.perf_counter() - t0 < 3.0:
        for batch in batches:
            congestion_engine.evaluate_batch(batch)
            n += len(batch)
    rate = n / (time.perf_counter() - t0)
    line = (f"[{'PASS' if rate >= 5000 else 'SOFT'}] criterion 10: throughput, informational "
            f"({rate:.0f} evaluations/s with {len(congestion_engine.grid.outages)} N-1 cases, target 5000 on 8 cores)")
    RESULTS.append(line)
    print(line)
