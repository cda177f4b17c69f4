import dataclasses
import json

import numpy as np
import pytest

from topoqd.ac import validator as validator_mod
from topoqd.ac.powerflow import NonConvergence, ac_power_flow, apply_outage, node_mismatch, require_converged
from topoqd.ac.validator import (
    CRITICAL_COUNT_INCREASED,
    ELIMINATED_BELOW_THRESHOLD,
    ELIMINATED_DOMINATED,
    ELIMINATED_SIMILAR,
    NONCONVERGENCE,
    OVERLOAD_NOT_IMPROVED,
    Baseline,
    Validator,
    eliminate,
    full_validation,
    genome_distance,
    worst_k_check,
)
from topoqd.config import OptimizerConfig, ValidatorConfig
from topoqd.dc_engine import ScoreVector
from topoqd.grid import grid_from_dict
from topoqd.qd.genome import EMPTY, Genome
from topoqd.qd.loop import run
from topoqd.qd.repertoire import Elite
from topoqd.topology import materialize

from gridgen import random_genome

# solved IEEE 14-bus case as published with MATPOWER (case14, runpf)
IEEE14_VM = [1.060, 1.045, 1.010, 1.018, 1.020, 1.070, 1.062, 1.090, 1.056, 1.051, 1.057, 1.055, 1.050, 1.036]
IEEE14_VA = [0.0, -4.983, -12.725, -10.313, -8.774, -14.221, -13.360, -13.360, -14.939, -15.097,
             -14.791, -15.076, -15.156, -16.034]
# magnitudes printed in the original common-format data file
IEEE14_VM_CDF = [1.060, 1.045, 1.010, 1.019, 1.020, 1.070, 1.062, 1.090, 1.056, 1.051, 1.057, 1.055, 1.050, 1.036]


def two_bus(p_load=0.0, q_load=0.0, r=0.01, x=0.1):
    return grid_from_dict({
        "slack": "1",
        "nodes": [{"id": "1"}, {"id": "2"}],
        "branches": [{"id": "L", "from": "1", "to": "2", "x_pu": x, "r_pu": r, "limit_mw": 100}],
        "injections": [
            {"id": "G", "node": "1", "p_mw": 0.0, "q_mvar": 0.0, "kind": "generator", "v_setpoint_pu": 1.0},
            {"id": "D", "node": "2", "p_mw": -p_load, "q_mvar": -q_load, "kind": "load"},
        ],
    })


def test_two_bus_no_load():
    res = ac_power_flow(two_bus())
    assert res.converged and res.iterations == 1
    np.testing.assert_allclose(res.flows, 0.0, atol=1e-12)


def test_two_bus_analytic():
    p, q, r, x = 0.5, 0.1, 0.01, 0.1  # per unit on 100 MVA
    res = require_converged(ac_power_flow(two_bus(50.0, 10.0, r, x)))
    # receiving-end voltage: V^4 + (2(pr + qx) - 1) V^2 + (p^2 + q^2)(r^2 + x^2) = 0, larger root
    b = 2 * (p * r + q * x) - 1.0
    c = (p**2 + q**2) * (r**2 + x**2)
    v2 = np.sqrt((-b + np.sqrt(b * b - 4 * c)) / 2)
    assert res.vm[1] == pytest.approx(v2, abs=1e-6)
    sending = p + (p**2 + q**2) / v2**2 * r
    assert res.p_from[0] / 100.0 == pytest.approx(sending, abs=1e-6)
    assert res.p_from[0] > 50.0


def test_ieee14_matches_published_solution(ieee14):
    res = ac_power_flow(ieee14)
    assert res.converged and res.iterations <= 10
    assert np.max(np.abs(res.vm - IEEE14_VM)) < 1e-3
    assert np.max(np.abs(np.degrees(res.va) - IEEE14_VA)) < 1e-2
    assert np.max(np.abs(res.vm - IEEE14_VM_CDF)) < 2e-3


def test_power_balance_on_converged_cases(ieee14):
    pq = [i for i, n in enumerate(ieee14.nodes) if not any(
        g.node == n.id and g.voltage_setpoint is not None for g in ieee14.injections)]
    for case in [None, *ieee14.outages]:
        grid = ieee14 if case is None else apply_outage(ieee14, case)
        res = ac_power_flow(grid)
        assert res.converged
        mis = node_mismatch(grid, res)
        non_slack = np.arange(grid.n_nodes) != grid.slack_index
        assert np.max(np.abs(mis.real[non_slack])) < 1e-6
        assert np.max(np.abs(mis.imag[pq])) < 1e-6


def test_nonconvergence_is_a_verdict():
    res = ac_power_flow(two_bus(2000.0, 500.0))
    assert not res.converged and res.flows is None
    with pytest.raises(NonConvergence):
        require_converged(res)


def test_disconnected_grid_does_not_converge(ieee14):
    res = ac_power_flow(apply_outage(ieee14, ("L7-8",)))
    assert not res.converged and res.iterations == 0


# -- validator: elimination -------------------------------------------------------------


def elite(actions, discs, fitness, n_reassign=0):
    g = Genome(tuple(actions), tuple(discs))
    s = ScoreVector(0.0, 0, 0, 0.0, g.n_disconnections, g.n_splits, n_reassign, fitness)
    return Elite(g, s)


def test_duplicate_of_validated_is_similar():
    c = elite((1, EMPTY), (EMPTY,), -1.0)
    queue, pruned = eliminate([c], [c.genome], -100.0)
    assert queue == [] and pruned[c.genome.key()] == ELIMINATED_SIMILAR


def test_larger_switching_distance_is_dominated():
    small = elite((1, EMPTY), (EMPTY,), -10.0)
    large = elite((1, 7), (EMPTY,), -10.0)
    queue, pruned = eliminate([small, large], [], -100.0)
    assert queue == [small] and pruned == {large.genome.key(): ELIMINATED_DOMINATED}


def test_small_gain_is_below_threshold():
    c = elite((1, EMPTY), (EMPTY,), -97.0)
    _, pruned = eliminate([c], [], -100.0)
    assert pruned[c.genome.key()] == ELIMINATED_BELOW_THRESHOLD


def test_elimination_predicate_replay():
    rng = np.random.default_rng(8)
    cfg = ValidatorConfig()
    for _ in range(40):
        pre = -float(rng.uniform(50, 500))
        cands, keys = [], set()
        while len(cands) < 30:
            acts = tuple(int(a) if rng.random() < 0.5 else EMPTY for a in rng.choice(20, 3, replace=False))
            discs = tuple(int(d) if rng.random() < 0.5 else EMPTY for d in rng.choice(6, 2, replace=False))
            e = elite(acts, discs, pre * float(rng.uniform(0, 1.1)), int(rng.integers(0, 4)))
            if e.genome.key() not in keys and not e.genome.is_empty():
                keys.add(e.genome.key())
                cands.append(e)
        validated = [cands[int(i)].genome for i in rng.choice(30, 3, replace=False)]
        queue, pruned = eliminate(cands, validated, pre, cfg)
        eps, gain = cfg.dominance_tolerance * abs(pre), cfg.improvement_threshold * abs(pre)

        def similar(c):
            return any(genome_distance(c.genome, v) <= cfg.similarity_distance for v in validated)

        def dominated(c):
            return any(o.score.switching_distance < c.score.switching_distance
                       and o.score.fitness >= c.score.fitness - eps for o in cands)

        def small(c):
            return c.score.fitness - pre < gain

        for c in queue:
            assert not (similar(c) or dominated(c) or small(c))
        for c in cands:
            key = c.genome.key()
            if similar(c):
                assert pruned[key] == ELIMINATED_SIMILAR
            elif dominated(c):
                assert pruned[key] == ELIMINATED_DOMINATED
            elif small(c):
                assert pruned[key] == ELIMINATED_BELOW_THRESHOLD
            else:
                assert key not in pruned
        fits = [c.score.fitness for c in queue]
        assert fits == sorted(fits, reverse=True)


# -- validator: AC stages ---------------------------------------------------------------


@pytest.fixture(scope="module")
def baseline(congestion14, congestion_engine):
    return Baseline.compute(congestion14, congestion_engine.pre_score)


def l56_genome(acts):
    return Genome((EMPTY,) * 3, (acts.disconnectables.index("L5-6"), EMPTY))


def test_unchanged_topology_is_not_an_improvement(congestion14, congestion_engine, baseline):
    passed, reason, _ = worst_k_check(congestion14, congestion_engine.pre_score.worst_contingencies, baseline)
    assert not passed and reason == OVERLOAD_NOT_IMPROVED


def test_base_case_nonconvergence_rejected_early(baseline):
    grid = two_bus(2000.0, 500.0)
    passed, reason, _ = worst_k_check(grid, [], baseline)
    assert not passed and reason == NONCONVERGENCE


def test_relieving_disconnection_passes_and_is_accepted(congestion14, congestion_actions, congestion_engine, baseline):
    g = l56_genome(congestion_actions)
    grid = materialize(congestion14, congestion_actions, g)
    score = congestion_engine.evaluate(g)
    passed, reason, a = worst_k_check(grid, score.worst_contingencies, baseline)
    assert passed and reason is None
    ok, reason, energy, critical, nonconv = full_validation(grid, baseline, assessment=a)
    assert ok and reason is None
    assert energy == pytest.approx(0.0, abs=1e-9) and baseline.overload > 5.0
    assert critical == 0 and nonconv == 0


def test_new_critical_branch_rejected(congestion14, congestion_actions, congestion_engine, baseline):
    # a split that lowers the overload energy but keeps one critical branch
    v = Validator(congestion14, congestion_actions, congestion_engine.pre_score)
    g = Genome((45, EMPTY, EMPTY), (EMPTY, EMPTY))
    grid = materialize(congestion14, congestion_actions, g)
    ok, _, energy, critical, _ = full_validation(grid, v.baseline)
    assert ok and 0 < energy < v.baseline.overload and critical == 1
    strict = dataclasses.replace(v.baseline, critical=0)
    ok, reason, *_ = full_validation(grid, strict)
    assert not ok and reason == CRITICAL_COUNT_INCREASED


def test_many_nonconverged_contingencies_rejected(congestion14, congestion_actions, baseline, monkeypatch):
    real = validator_mod.ac_power_flow
    calls = {"n": 0}

    def flaky(grid, *args):
        calls["n"] += 1
        res = real(grid, *args)
        if calls["n"] > 1 and calls["n"] % 3 == 0:  # about 30 % of the contingencies
            return dataclasses.replace(res, converged=False, flows=None)
        return res

    monkeypatch.setattr(validator_mod, "ac_power_flow", flaky)
    grid = materialize(congestion14, congestion_actions, l56_genome(congestion_actions))
    ok, reason, *_, nonconv = full_validation(grid, baseline, ValidatorConfig(max_nonconverged_fraction=0.05))
    assert not ok and reason == NONCONVERGENCE and nonconv >= 5


def test_lower_load_never_flips_to_overload_rejection(congestion14, congestion_actions, baseline):
    g = l56_genome(congestion_actions)
    for factor in (1.0, 0.98, 0.95, 0.9):
        grid = materialize(congestion14, congestion_actions, g)
        grid = dataclasses.replace(grid, injections=tuple(
            dataclasses.replace(i, active_power=i.active_power * factor, reactive_power=i.reactive_power * factor)
            if i.kind == "load" else i for i in grid.injections))
        ok, reason, *_ = full_validation(grid, baseline)
        assert reason != OVERLOAD_NOT_IMPROVED


def test_validator_bookkeeping(congestion14, congestion_actions, congestion_engine, tmp_path):
    snaps = []
    run(congestion14, congestion_actions, OptimizerConfig(max_evaluations=4000, iters_per_epoch=10),
        snaps.append, seed=2, engine=congestion_engine)
    log = tmp_path / "validation.jsonl"
    v = Validator(congestion14, congestion_actions, congestion_engine.pre_score, log_path=log)
    for s in snaps:
        for r in v.process(s):
            assert r.stage in ("worst_k", "full_n1")
            assert not r.accepted or r.stage == "full_n1"
    v.finalize()
    v.close()
    seen = {e.genome.key() for s in snaps for e in s.elites() if not e.genome.is_empty()}
    keys = [r.genome.key() for r in v.records]
    assert len(keys) == len(set(keys)) and set(keys) == seen
    assert any(r.accepted for r in v.records)
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert lines[0]["type"] == "baseline"
    assert len(lines) == 1 + len(v.records)
    assert {r.reason for r in v.records} <= set(validator_mod.REASONS) | {None}


def test_validation_cap_and_refill(congestion14, congestion_actions, congestion_engine):
    snaps = []
    run(congestion14, congestion_actions, OptimizerConfig(max_evaluations=2000, iters_per_epoch=30),
        snaps.append, seed=4, engine=congestion_engine)
    cfg = ValidatorConfig(max_validations_per_snapshot=3, refill_per_snapshot=2)
    v = Validator(congestion14, congestion_actions, congestion_engine.pre_score, cfg)
    for s in snaps:
        assert len(v.process(s)) <= 3


def test_random_genomes_validate_without_errors(congestion14, congestion_actions, congestion_engine, baseline):
    rng = np.random.default_rng(0)
    v = Validator(congestion14, congestion_actions, congestion_engine.pre_score)
    for _ in range(15):
        g = random_genome(rng, congestion_actions)
        s = congestion_engine.evaluate(g)
        if s.feasible:
            r = v.validate(Elite(g, s))
            assert r.reason in validator_mod.REASONS or r.accepted
